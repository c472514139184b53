use std::path::Path;

use proptest::prelude::*;
use pxrecon::checkpoint::Checkpoint;
use pxrecon::png16::{self, read_png16, sidecar_path, write_png16, Sidecar};
use pxrecon::render::{render_mip, render_threshold, Axis};
use pxrecon::rvol::{self, read_volume, write_volume, HEADER_LEN};
use pxrecon::Error;
use pxrecon_core::geometry::{build_samples, ProjectionConfig};
use pxrecon_core::metrics::DENSITY_FACTOR;
use pxrecon_core::pgr::{PgrConfig, PgrTrainConfig, PgrTrainer, ReconExample};
use pxrecon_core::phantom::{generate_phantom, PhantomConfig};
use pxrecon_core::volume::{AxisOrder, Image, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.iter().product()).map(|_| rng.random::<f32>()).collect();
    Volume::from_vec(dims, [0.5, 0.75, 1.25], AxisOrder::Dhw, data).unwrap()
}

fn field_of(e: Error) -> &'static str {
    match e {
        Error::Format { field, .. } => field,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn rvol_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, axes) in [AxisOrder::Dhw, AxisOrder::Hwd].into_iter().enumerate() {
        let mut v = random_volume([3, 5, 7], i as u64);
        v.axes = axes;
        let p = dir.path().join(format!("v{i}.rvol"));
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back.dims, v.dims);
        assert_eq!(back.spacing_mm, v.spacing_mm);
        assert_eq!(back.axes, v.axes);
        let bits = |x: &Volume| x.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }
}

#[test]
fn rvol_ones_payload_words() {
    let v = Volume::from_vec([2, 2, 2], [1.0; 3], AxisOrder::Dhw, vec![1.0; 8]).unwrap();
    let bytes = rvol::encode(&v);
    assert_eq!(bytes.len(), HEADER_LEN + 32);
    assert_eq!(&bytes[..5], b"RVOL1");
    assert_eq!(&bytes[45..48], b"DHW");
    for w in bytes[HEADER_LEN..].chunks_exact(4) {
        assert_eq!(w, [0x00, 0x00, 0x80, 0x3F]);
        assert_eq!(u32::from_le_bytes(w.try_into().unwrap()), 0x3F80_0000);
    }
}

#[test]
fn rvol_rejects_corruption_by_field() {
    let v = random_volume([2, 3, 4], 9);
    let good = rvol::encode(&v);
    let p = Path::new("x.rvol");

    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(field_of(rvol::decode(&bad, p).unwrap_err()), "magic");

    assert_eq!(field_of(rvol::decode(&good[..good.len() - 4], p).unwrap_err()), "payload");
    assert_eq!(field_of(rvol::decode(&good[..20], p).unwrap_err()), "header");

    let mut bad = good.clone();
    bad[5..9].copy_from_slice(&3u32.to_le_bytes());
    assert_eq!(field_of(rvol::decode(&bad, p).unwrap_err()), "payload");

    let mut bad = good.clone();
    bad[41..45].copy_from_slice(b"F64L");
    assert_eq!(field_of(rvol::decode(&bad, p).unwrap_err()), "dtype");

    let mut bad = good;
    bad[45..48].copy_from_slice(b"XYZ");
    assert_eq!(field_of(rvol::decode(&bad, p).unwrap_err()), "axis order");
}

#[test]
fn png16_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (9, 13);
    let mut data: Vec<f32> = (0..h * w).map(|_| rng.random_range(-0.2f32..1.2)).collect();
    data[0] = 0.0;
    data[1] = 1.0;
    let img = Image::from_vec(h, w, data).unwrap();
    let p = dir.path().join("img.png");
    let mut side = Sidecar::for_image(&img);
    side.label = Some("regular".into());
    write_png16(&img, &p, &side).unwrap();
    let back = read_png16(&p).unwrap();
    assert_eq!((back.h, back.w), (h, w));
    for (a, b) in img.data.iter().zip(&back.data) {
        let a = a.clamp(0.0, 1.0);
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7, "{a} vs {b}");
        assert_eq!(png16::quantize(*b), png16::quantize(a));
    }
    assert_eq!(back.data[0], 0.0);
    assert_eq!(back.data[1], 1.0);
    let side_back: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(&p)).unwrap()).unwrap();
    assert_eq!(side_back, side);
}

#[test]
fn png16_rejects_eight_bit_images() {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, 2, 2);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(&[0, 1, 2, 3]).unwrap();
    assert_eq!(field_of(png16::decode(&out, Path::new("x.png")).unwrap_err()), "png");
}

fn brute_max(v: &Volume, axis: usize) -> Vec<f32> {
    let [a, b, c] = v.dims;
    let (h, w) = match axis {
        0 => (b, c),
        1 => (a, c),
        _ => (a, b),
    };
    let mut out = vec![f32::NEG_INFINITY; h * w];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let (r, col) = match axis {
                    0 => (j, k),
                    1 => (i, k),
                    _ => (i, j),
                };
                out[r * w + col] = out[r * w + col].max(v.get(i, j, k));
            }
        }
    }
    out
}

const AXES: [Axis; 3] = [Axis::First, Axis::Second, Axis::Third];

#[test]
fn mip_matches_brute_force_max_exactly() {
    let v = random_volume([4, 6, 5], 11);
    for (ai, axis) in AXES.into_iter().enumerate() {
        let mut want = brute_max(&v, ai);
        pxrecon_core::volume::min_max_normalize(&mut want);
        let got = render_mip(&v, axis);
        assert_eq!(got.data, want, "axis {ai}");
        assert_eq!(got.data.len(), v.len() / v.dims[ai]);
    }
}

#[test]
fn mip_of_constant_and_single_voxel() {
    let c = Volume::from_vec([3, 4, 5], [1.0; 3], AxisOrder::Dhw, vec![0.3; 60]).unwrap();
    let img = render_mip(&c, Axis::First);
    assert!(img.data.iter().all(|&x| x == img.data[0]));

    let mut v = Volume::zeros([3, 4, 5], [1.0; 3], AxisOrder::Dhw);
    let i = v.idx(1, 2, 3);
    v.data[i] = 0.9;
    let img = render_mip(&v, Axis::First);
    assert_eq!((img.h, img.w), (4, 5));
    assert_eq!(img.argmax(), (2, 3));
    assert_eq!(img.data.iter().filter(|&&x| x > 0.0).count(), 1);
    let img = render_mip(&v, Axis::Third);
    assert_eq!((img.h, img.w), (3, 4));
    assert_eq!(img.argmax(), (1, 2));
}

#[test]
fn threshold_of_empty_volume_is_blank() {
    let v = Volume::zeros([4, 5, 6], [1.0; 3], AxisOrder::Dhw);
    for axis in AXES {
        assert!(render_threshold(&v, axis).data.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn threshold_of_slab_is_uniform_front_depth() {
    let (d, h, w) = (10, 6, 8);
    let front = 4;
    let mut v = Volume::zeros([d, h, w], [1.0; 3], AxisOrder::Dhw);
    for k in front..7 {
        for r in 1..5 {
            for c in 2..7 {
                let i = v.idx(k, r, c);
                v.data[i] = 1.0;
            }
        }
    }
    let img = render_threshold(&v, Axis::First);
    let shade = 1.0 - front as f32 / d as f32;
    for r in 0..h {
        for c in 0..w {
            let inside = (1..5).contains(&r) && (2..7).contains(&c);
            assert_eq!(img.get(r, c), if inside { shade } else { 0.0 }, "({r},{c})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_support_is_mip_of_binarized(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6) {
        let v = random_volume([a, b, c], seed);
        let t = DENSITY_FACTOR * v.mean();
        let bin: Vec<f32> = v.data.iter().map(|&x| (x as f64 > t) as u8 as f32).collect();
        let bv = Volume::from_vec(v.dims, v.spacing_mm, v.axes, bin).unwrap();
        for (ai, axis) in AXES.into_iter().enumerate() {
            let occupied = brute_max(&bv, ai);
            let img = render_threshold(&v, axis);
            for (o, x) in occupied.iter().zip(&img.data) {
                prop_assert_eq!(*o > 0.0, *x > 0.0);
            }
        }
    }

    #[test]
    fn rvol_round_trip_any_shape(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let v = random_volume([a, b, c], seed);
        let back = rvol::decode(&rvol::encode(&v), Path::new("p")).unwrap();
        prop_assert_eq!(back, v);
    }
}

fn tiny_trainer(seed: u64) -> (PgrTrainer, Vec<ReconExample>, Vec<Image>) {
    let cfg = PgrTrainConfig {
        steps: 4,
        batch_size: 2,
        seed,
        ..Default::default()
    };
    let tr = PgrTrainer::new(PgrConfig::desk(), cfg).unwrap();
    let p = generate_phantom(&PhantomConfig::desk().with_seed(seed)).unwrap();
    let samples = build_samples(&p, &ProjectionConfig::desk()).unwrap();
    let ex = samples
        .iter()
        .take(3)
        .map(|s| ReconExample::new(&s.px, &s.unfolded, &tr.model.cfg, &tr.weights).unwrap())
        .collect();
    (tr, ex, samples.into_iter().take(3).map(|s| s.px).collect())
}

#[test]
fn checkpoint_reload_reproduces_forward_and_training_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (mut tr, ex, px) = tiny_trainer(5);
    tr.train_step(&ex).unwrap();
    tr.train_step(&ex).unwrap();
    let p = dir.path().join("a.pxck");
    let h1 = Checkpoint::of_pgr(&tr, "cfg").save(&p).unwrap();
    let ck = Checkpoint::load(&p).unwrap();
    assert_eq!(ck.header.step, 2);
    assert_eq!(ck.header.config_hash, "cfg");
    let mut back = ck.pgr_trainer(&p).unwrap();
    assert_eq!(Checkpoint::of_pgr(&back, "cfg").save(&dir.path().join("b.pxck")).unwrap(), h1);
    for img in &px {
        let a = tr.predict(img).unwrap();
        let b = back.predict(img).unwrap();
        assert_eq!(
            a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
    let la = tr.train_step(&ex).unwrap();
    let lb = back.train_step(&ex).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn checkpoint_rejects_truncation_and_wrong_kind() {
    let (tr, _, _) = tiny_trainer(1);
    let bytes = Checkpoint::of_pgr(&tr, "h").encode().unwrap();
    let p = Path::new("c.pxck");
    assert_eq!(field_of(Checkpoint::decode(&bytes[..bytes.len() - 1], p).unwrap_err()), "payload");
    let mut extra = bytes.clone();
    extra.push(0);
    assert_eq!(field_of(Checkpoint::decode(&extra, p).unwrap_err()), "payload");
    assert_eq!(field_of(Checkpoint::decode(b"NOPE", p).unwrap_err()), "magic");
    let ck = Checkpoint::decode(&bytes, p).unwrap();
    assert_eq!(field_of(ck.joint_trainer(p).unwrap_err()), "kind");
}
