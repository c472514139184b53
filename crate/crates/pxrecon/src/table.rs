//! Aligned two-column text rendering of JSON reports.

use serde_json::Value;

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(a) if a.iter().all(|x| x.is_number()) => {
            let cells: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            out.push((prefix.to_string(), cells.join(" ")));
        }
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        Value::Null => out.push((prefix.to_string(), "-".into())),
        Value::Number(n) => out.push((
            prefix.to_string(),
            n.as_f64().filter(|x| x.fract() != 0.0).map_or(n.to_string(), |x| format!("{x:.4}")),
        )),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
    }
}

/// One `name  value` line per scalar leaf, names padded to a common width.
pub fn text_table(v: &Value) -> String {
    let mut rows = Vec::new();
    flatten("", v, &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
}
