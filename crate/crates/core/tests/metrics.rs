use pxrecon_core::metrics::*;
use pxrecon_core::volume::{AxisOrder, Image, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] as f64 - b[i] as f64).powi(2);
    }
    10.0 * (1.0 / (se / a.len() as f64)).log10()
}

/// Evaluates every window with its own 2D weighted moments.
fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let s: f64 = g.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=a.h - 11 {
        for x0 in 0..=a.w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let w = g[dy] * g[dx] / (s * s);
                    let p = a.get(y0 + dy, x0 + dx) as f64;
                    let q = b.get(y0 + dy, x0 + dx) as f64;
                    ma += w * p;
                    mb += w * q;
                    saa += w * p * p;
                    sbb += w * q * q;
                    sab += w * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_vec(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

#[test]
fn psnr_examples() {
    let a = vec![0.0f32; 64];
    let b = vec![0.5f32; 64];
    assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-12);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b[..10]).is_err());
}

#[test]
fn ssim_examples() {
    let a = Image::from_vec(12, 14, vec![0.2; 168]).unwrap();
    let b = Image::from_vec(12, 14, vec![0.8; 168]).unwrap();
    assert!((ssim(&a, &b).unwrap() - 0.47066).abs() < 1e-5);
    assert!((ssim(&a, &b).unwrap() - (0.32 + 1e-4) / (0.68 + 1e-4)).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = random_image(&mut rng, 16, 16);
    assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&Image::zeros(8, 20), &Image::zeros(8, 20)).is_err());
}

#[test]
fn metrics_match_brute_force_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..1000 {
        let h = rng.random_range(8..=16);
        let w = rng.random_range(8..=16);
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        let p = psnr(&a.data, &b.data).unwrap();
        assert!((p - naive_psnr(&a.data, &b.data)).abs() < 1e-6, "case {case}");
        assert!((p - psnr(&b.data, &a.data).unwrap()).abs() < 1e-12);
        if h >= 11 && w >= 11 {
            let s = ssim(&a, &b).unwrap();
            assert!((s - naive_ssim(&a, &b)).abs() < 1e-6, "case {case}");
            assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        } else {
            assert!(ssim(&a, &b).is_err());
        }
        let pm = random_mask(&mut rng, h * w, 0.4);
        let gm = random_mask(&mut rng, h * w, 0.4);
        let inter = pm.iter().zip(&gm).filter(|(p, g)| **p && **g).count() as f64;
        let union = pm.iter().zip(&gm).filter(|(p, g)| **p || **g).count() as f64;
        let (np, ng) = (pm.iter().filter(|v| **v).count() as f64, gm.iter().filter(|v| **v).count() as f64);
        let o = Overlap::of(&pm, &gm).unwrap();
        if union > 0.0 {
            assert!((o.iou() - inter / union).abs() < 1e-6);
            assert!((o.dsc() - 2.0 * inter / (np + ng)).abs() < 1e-6);
        }
        let to_img = |m: &[bool]| Image::from_vec(h, w, m.iter().map(|&v| v as u8 as f32).collect()).unwrap();
        let mm = mask_metrics(&to_img(&pm), &to_img(&gm)).unwrap();
        assert_eq!((mm.dsc, mm.iou), (o.dsc(), o.iou()));
        let va = Volume::from_vec([1, h, w], [1.0; 3], AxisOrder::Dhw, a.data.clone()).unwrap();
        let vb = Volume::from_vec([1, h, w], [1.0; 3], AxisOrder::Dhw, b.data.clone()).unwrap();
        let (ma, mb) = (mean(&a.data), mean(&b.data));
        let ta: Vec<bool> = a.data.iter().map(|&v| v as f64 > 1.5 * ma).collect();
        let tb: Vec<bool> = b.data.iter().map(|&v| v as f64 > 1.5 * mb).collect();
        let i2 = ta.iter().zip(&tb).filter(|(p, g)| **p && **g).count() as f64;
        let s2 = (ta.iter().filter(|v| **v).count() + tb.iter().filter(|v| **v).count()) as f64;
        let expected = if s2 == 0.0 { 1.0 } else { 2.0 * i2 / s2 };
        assert!((dsc_volumes(&va, &vb, ThresholdRule::OwnMean).unwrap() - expected).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn dice_iou_identity(pred in proptest::collection::vec(any::<bool>(), 1..300), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<bool> = (0..pred.len()).map(|_| rng.random()).collect();
        let o = Overlap::of(&pred, &gt).unwrap();
        let (d, i) = (o.dsc(), o.iou());
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 4.0 * f64::EPSILON);
        for v in [d, i, o.precision(), o.recall()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dsc_mask_ignores_positive_rescaling(data in proptest::collection::vec(0.0f32..1.0, 8..200), e in -6i32..6) {
        let k = 2f32.powi(e);
        let scaled: Vec<f32> = data.iter().map(|v| v * k).collect();
        prop_assert_eq!(high_density_mask(&data, mean(&data)), high_density_mask(&scaled, mean(&scaled)));
    }
}

#[test]
fn analytic_threshold_region() {
    // ramp along x: mean 0.5, threshold 0.75
    let n = 40;
    let data: Vec<f32> = (0..n * n * n).map(|i| (i % n) as f32 / (n - 1) as f32).collect();
    let v = Volume::from_vec([n, n, n], [1.0; 3], AxisOrder::Dhw, data).unwrap();
    let m = high_density_mask(&v.data, mean(&v.data));
    let agree = (0..v.len()).filter(|&i| m[i] == ((i % n) as f64 > 0.75 * (n - 1) as f64)).count();
    assert!(agree as f64 >= 0.99 * v.len() as f64);
    assert_eq!(dsc_volumes(&v, &v, ThresholdRule::OwnMean).unwrap(), 1.0);
    let zeros = Volume::zeros([n, n, n], [1.0; 3], AxisOrder::Dhw);
    assert_eq!(dsc_volumes(&zeros, &zeros, ThresholdRule::OwnMean).unwrap(), 1.0);
}

#[test]
fn disjoint_masks_score_zero() {
    let mut a = vec![0.0f32; 100];
    let mut b = vec![0.0f32; 100];
    a[..10].iter_mut().for_each(|v| *v = 1.0);
    b[50..60].iter_mut().for_each(|v| *v = 1.0);
    let va = Volume::from_vec([1, 10, 10], [1.0; 3], AxisOrder::Dhw, a).unwrap();
    let vb = Volume::from_vec([1, 10, 10], [1.0; 3], AxisOrder::Dhw, b).unwrap();
    assert_eq!(dsc_volumes(&va, &vb, ThresholdRule::OwnMean).unwrap(), 0.0);
}

#[test]
fn mask_examples() {
    let gt = Image::from_vec(2, 4, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let half = Image::from_vec(2, 4, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let m = mask_metrics(&half, &gt).unwrap();
    assert_eq!((m.recall, m.precision, m.iou), (0.5, 1.0, 0.5));
    assert!((m.dsc - 2.0 / 3.0).abs() < 1e-15);
    let same = mask_metrics(&gt, &gt).unwrap();
    assert_eq!((same.dsc, same.iou, same.precision, same.recall), (1.0, 1.0, 1.0, 1.0));
    let empty = Image::zeros(2, 4);
    let e = mask_metrics(&empty, &empty).unwrap();
    assert_eq!((e.dsc, e.iou, e.precision, e.recall), (1.0, 1.0, 1.0, 1.0));
    let bad = Image::from_vec(2, 4, vec![0.5; 8]).unwrap();
    assert!(mask_metrics(&bad, &gt).is_err());
}

#[test]
fn classification_reports() {
    let labels = vec![0, 1, 2, 3, 4, 0, 1, 2];
    let r = classification_report(&labels, &labels, 5).unwrap();
    assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
    let preds = vec![0, 1, 1, 3, 4, 2, 1, 2];
    let a = classification_report(&preds, &labels, 5).unwrap().accuracy;
    let perm = [3, 0, 4, 1, 2];
    let pp: Vec<usize> = preds.iter().map(|&c| perm[c]).collect();
    let pl: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
    assert_eq!(classification_report(&pp, &pl, 5).unwrap().accuracy, a);
    let absent = classification_report(&[0, 1], &[0, 1], 3).unwrap();
    assert_eq!(absent.warnings.len(), 1);
    assert!((absent.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!(classification_report(&[5], &[0], 5).is_err());
}
