use pxrecon_core::autodiff::{CmaMode, Graph};
use pxrecon_core::gradcheck::{grad_check, probe_tensor, GradCheckConfig};
use pxrecon_core::{Error, Tensor};

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-5,
        max_checks_per_group: 64,
        floor: 1e-6,
    }
}

fn eval(f: impl FnOnce(&mut Graph<f64>) -> pxrecon_core::Result<pxrecon_core::autodiff::Var>) -> pxrecon_core::Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn sse_examples() {
    let f = t(&[1, 2, 2, 2], vec![1.0; 8]);
    let y = Tensor::zeros(&[1, 2, 2, 2]);
    assert_eq!(eval(|g| { let (a, b) = (g.constant(f.clone()), g.constant(y.clone())); g.sse(a, b) }).unwrap(), 8.0);
    assert_eq!(eval(|g| { let a = g.constant(f.clone()); g.sse(a, a) }).unwrap(), 0.0);
    let p = probe_tensor(&[2, 3, 4], 1);
    let q = probe_tensor(&[2, 3, 4], 2);
    let base = eval(|g| { let (a, b) = (g.constant(p.clone()), g.constant(q.clone())); g.sse(a, b) }).unwrap();
    let scaled = eval(|g| {
        let (a, b) = (g.constant(p.map(|v| 3.0 * v)), g.constant(q.map(|v| 3.0 * v)));
        g.sse(a, b)
    })
    .unwrap();
    assert!((scaled - 9.0 * base).abs() < 1e-12 * scaled.abs().max(1.0));
    let r = eval(|g| { let (a, b) = (g.constant(p.clone()), g.constant(Tensor::zeros(&[2, 3, 5]))); g.sse(a, b) });
    assert!(matches!(r, Err(Error::Shape { .. })));
}

fn cma_value(z: Vec<f64>, zs: Vec<f64>, n: usize, d: usize, tau: f64, mode: CmaMode) -> pxrecon_core::Result<f64> {
    eval(|g| {
        let (a, b) = (g.constant(t(&[n, d], z)), g.constant(t(&[n, d], zs)));
        g.cma_loss(a, b, tau, mode)
    })
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

#[test]
fn cma_orthonormal_examples() {
    let v = cma_value(identity(2), identity(2), 2, 2, 1.0, CmaMode::Literal).unwrap();
    assert!((v + 2.0).abs() < 1e-9, "{v}");
    for (n, tau) in [(2usize, 0.5), (3, 1.0), (5, 0.1)] {
        let lit = cma_value(identity(n), identity(n), n, n, tau, CmaMode::Literal).unwrap();
        // each term: -(1/tau - log((n-1) e^0))
        let expected = -(n as f64) * (1.0 / tau - ((n - 1) as f64).ln());
        assert!((lit - expected).abs() < 1e-9, "n {n}: {lit} vs {expected}");
        let inc = cma_value(identity(n), identity(n), n, n, tau, CmaMode::Inclusive).unwrap();
        let closed = n as f64 * (1.0 + (n - 1) as f64 * (-1.0 / tau).exp()).ln();
        let brute: f64 = (0..n)
            .map(|_| {
                let den: f64 = (0..n).map(|k| if k == 0 { (1.0 / tau).exp() } else { 1.0 }).sum();
                -((1.0 / tau).exp() / den).ln()
            })
            .sum();
        assert!((inc - closed).abs() < 1e-9 && (closed - brute).abs() < 1e-12);
    }
}

#[test]
fn cma_equal_similarity_cases() {
    for n in 2..7 {
        let z: Vec<f64> = (0..n).flat_map(|_| [0.6, 0.8]).collect();
        let v = cma_value(z.clone(), z, n, 2, 0.3, CmaMode::Literal).unwrap();
        let expected = n as f64 * ((n - 1) as f64).ln();
        assert!((v - expected).abs() < 1e-9, "n {n}: {v}");
    }
}

#[test]
fn cma_permutation_invariance_and_errors() {
    let n = 5;
    let raw = probe_tensor(&[n, 4], 3);
    let raw_s = probe_tensor(&[n, 4], 4);
    let norm = |x: &Tensor<f64>| -> Vec<f64> {
        x.data().chunks(4).flat_map(|r| {
            let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(move |v| v / s).collect::<Vec<_>>()
        }).collect()
    };
    let (z, zs) = (norm(&raw), norm(&raw_s));
    let perm = [3, 0, 4, 1, 2];
    let pz: Vec<f64> = perm.iter().flat_map(|&i| z[i * 4..i * 4 + 4].to_vec()).collect();
    let pzs: Vec<f64> = perm.iter().flat_map(|&i| zs[i * 4..i * 4 + 4].to_vec()).collect();
    for mode in [CmaMode::Literal, CmaMode::Inclusive] {
        let a = cma_value(z.clone(), zs.clone(), n, 4, 0.1, mode).unwrap();
        let b = cma_value(pz.clone(), pzs.clone(), n, 4, 0.1, mode).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(cma_value(vec![1.0, 0.0], vec![1.0, 0.0], 1, 2, 1.0, CmaMode::Literal), Err(Error::DegenerateBatch(_))));
    assert!(cma_value(identity(2), identity(2), 2, 2, 0.0, CmaMode::Literal).is_err());
}

#[test]
fn cross_entropy_is_per_sample_mean() {
    let logits = probe_tensor(&[4, 5], 8);
    let labels = [0usize, 3, 1, 4];
    let full = eval(|g| { let l = g.constant(logits.clone()); g.cross_entropy(l, &labels) }).unwrap();
    let singles: f64 = (0..4)
        .map(|i| {
            let row = logits.index0(i).reshaped(&[1, 5]).unwrap();
            eval(|g| { let l = g.constant(row); g.cross_entropy(l, &labels[i..i + 1]) }).unwrap()
        })
        .sum();
    assert!((full - singles / 4.0).abs() < 1e-12);
    let pair = eval(|g| {
        let l = g.constant(t(&[2, 5], logits.data()[5..15].to_vec()));
        g.cross_entropy(l, &labels[1..3])
    })
    .unwrap();
    let s1 = eval(|g| { let l = g.constant(logits.index0(1).reshaped(&[1, 5]).unwrap()); g.cross_entropy(l, &labels[1..2]) }).unwrap();
    let s2 = eval(|g| { let l = g.constant(logits.index0(2).reshaped(&[1, 5]).unwrap()); g.cross_entropy(l, &labels[2..3]) }).unwrap();
    assert!((pair - (s1 + s2) / 2.0).abs() < 1e-12);
}

#[test]
fn smooth_losses_pass_gradient_check() {
    let c = cfg();
    let x = probe_tensor(&[3, 4], 1);
    let target = probe_tensor(&[3, 4], 2).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let y = probe_tensor(&[3, 4], 3);
    let zs = probe_tensor(&[3, 4], 5);
    let checks: Vec<(&str, pxrecon_core::gradcheck::GradReport)> = vec![
        ("sse", grad_check(&[("f".into(), x.clone()), ("y".into(), y.clone())], |g, v| g.sse(v[0], v[1]), &c)),
        ("cross_entropy", grad_check(&[("logits".into(), x.clone())], |g, v| g.cross_entropy(v[0], &[1, 0, 3]), &c)),
        ("bce", grad_check(&[("logits".into(), x.clone())], |g, v| { let tt = g.constant(target.clone()); g.bce_with_logits(v[0], tt) }, &c)),
        ("dice", grad_check(&[("logits".into(), x.clone())], |g, v| { let tt = g.constant(target.clone()); g.soft_dice_loss(v[0], tt) }, &c)),
        ("l2_normalize", grad_check(&[("x".into(), x.clone())], |g, v| {
            let n = g.l2_normalize(v[0])?;
            g.dot_const(n, probe_tensor(&[3, 4], 9))
        }, &c)),
        ("cma_literal", grad_check(&[("z".into(), x.clone()), ("z*".into(), zs.clone())], |g, v| {
            let (a, b) = (g.l2_normalize(v[0])?, g.l2_normalize(v[1])?);
            g.cma_loss(a, b, 0.5, CmaMode::Literal)
        }, &c)),
        ("cma_inclusive", grad_check(&[("z".into(), x.clone()), ("z*".into(), zs.clone())], |g, v| {
            let (a, b) = (g.l2_normalize(v[0])?, g.l2_normalize(v[1])?);
            g.cma_loss(a, b, 0.5, CmaMode::Inclusive)
        }, &c)),
        ("depth_fuse", grad_check(
            &[("f2d".into(), probe_tensor(&[2, 3, 2, 3], 6)), ("f3d".into(), probe_tensor(&[2, 3, 4, 2, 3], 7))],
            |g, v| {
                let (m2, m3) = g.depth_fuse(v[0], v[1])?;
                let a = g.dot_const(m2, probe_tensor(&[2, 3, 2, 3], 10))?;
                let b = g.dot_const(m3, probe_tensor(&[2, 3, 5, 2, 3], 11))?;
                g.add(a, b)
            },
            &c,
        )),
    ];
    for (name, r) in checks {
        assert!(r.passed(1e-6), "{name}: {r:#?}");
    }
}

#[test]
fn cma_sends_gradient_to_both_branches() {
    let mut g = Graph::<f64>::new();
    let z = g.variable(probe_tensor(&[4, 3], 1));
    let zs = g.variable(probe_tensor(&[4, 3], 2));
    let (a, b) = (g.l2_normalize(z).unwrap(), g.l2_normalize(zs).unwrap());
    let l = g.cma_loss(a, b, 0.1, CmaMode::Literal).unwrap();
    let grads = g.backward(l).unwrap();
    for v in [z, zs] {
        assert!(grads.get(v).unwrap().data().iter().any(|x| x.abs() > 1e-8));
    }
}

#[test]
fn depth_fuse_with_empty_volume_scales_2d() {
    let mut g = Graph::<f64>::new();
    let f2 = probe_tensor(&[1, 2, 3, 4], 1);
    let a = g.constant(f2.clone());
    let b = g.constant(Tensor::zeros(&[1, 2, 6, 3, 4]));
    let (m2, m3) = g.depth_fuse(a, b).unwrap();
    assert_eq!(g.shape(m3), &[1, 2, 7, 3, 4]);
    for (x, y) in g.value(m2).data().iter().zip(f2.data()) {
        assert!((x - y / 7.0).abs() < 1e-15);
    }
}
