use pxrecon_core::phantom::*;
use pxrecon_core::Error;
use proptest::prelude::*;

fn lesion_config(seed: u64) -> PhantomConfig {
    PhantomConfig {
        grid_dims: [64, 64, 64],
        spacing_mm: 0.5,
        lesion_probability: 1.0,
        lesion_radius_range_mm: (3.0, 5.0),
        seed,
        ..PhantomConfig::desk()
    }
}

#[test]
fn same_config_gives_identical_phantoms() {
    let c = PhantomConfig::desk().with_seed(11);
    let (a, b) = (generate_phantom(&c).unwrap(), generate_phantom(&c).unwrap());
    assert_eq!(a, b);
    let other = generate_phantom(&c.clone().with_seed(12)).unwrap();
    assert_ne!(a.volume, other.volume);
}

#[test]
fn zero_lesion_probability_means_no_lesion() {
    for seed in 0..5 {
        let mut c = PhantomConfig::desk().with_seed(seed);
        c.lesion_probability = 0.0;
        let p = generate_phantom(&c).unwrap();
        assert!(!p.metadata.lesion_present);
        assert!(p.lesion_mask_3d.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn lesion_voxels_match_brute_force_ellipsoid() {
    let lo = 4.0 / 3.0 * std::f64::consts::PI * 6f64.powi(3) * 0.9;
    let hi = 4.0 / 3.0 * std::f64::consts::PI * 10f64.powi(3) * 1.1;
    for seed in 0..6 {
        let p = generate_phantom(&lesion_config(seed)).unwrap();
        let c = p.metadata.lesion_center_mm.unwrap();
        let r = p.metadata.lesion_radii_mm.unwrap();
        let mut expected = 0usize;
        for k in 0..64 {
            for j in 0..64 {
                for i in 0..64 {
                    let d = [
                        (i as f64 * 0.5 - c[0]) / r[0],
                        (j as f64 * 0.5 - c[1]) / r[1],
                        (k as f64 * 0.5 - c[2]) / r[2],
                    ];
                    let inside = d.iter().map(|v| v * v).sum::<f64>() <= 1.0;
                    expected += inside as usize;
                    assert_eq!(p.lesion_mask_3d.get(k, j, i) == 1.0, inside, "voxel {k},{j},{i}");
                }
            }
        }
        let count = p.lesion_mask_3d.data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(count, expected);
        assert!((lo..=hi).contains(&(count as f64)), "seed {seed}: {count} voxels");
    }
}

fn binomial_cdf(n: u64, p: f64, k: u64) -> f64 {
    let mut term = (1.0 - p).powi(n as i32);
    let mut acc = term;
    for i in 1..=k {
        term *= (n - i + 1) as f64 / i as f64 * p / (1.0 - p);
        acc += term;
    }
    acc
}

#[test]
fn lesion_frequency_is_within_binomial_interval() {
    let lo = (0..=100).find(|&k| binomial_cdf(100, 0.5, k) > 0.005).unwrap();
    let hi = (0..=100).find(|&k| binomial_cdf(100, 0.5, k) >= 0.995).unwrap();
    assert!(lo >= 30 && hi <= 70, "99% interval [{lo},{hi}]");
    let present = (0..100)
        .filter(|&s| {
            let mut c = PhantomConfig::desk().with_seed(s);
            c.grid_dims = [24, 22, 28];
            c.spacing_mm = 4.6;
            generate_phantom(&c).unwrap().metadata.lesion_present
        })
        .count();
    assert!((30..=70).contains(&present), "{present} lesions");
}

#[test]
fn densities_are_ordered_by_region() {
    for seed in 0..4 {
        let mut c = PhantomConfig::desk().with_seed(seed);
        c.lesion_probability = 1.0;
        let p = generate_phantom(&c).unwrap();
        let mean = |t: u8| {
            let v: Vec<f64> = p
                .tissue
                .iter()
                .zip(&p.volume.data)
                .filter(|(&k, _)| k == t)
                .map(|(_, &v)| v as f64)
                .collect();
            assert!(!v.is_empty(), "tissue {t} missing");
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(TISSUE_TOOTH) > mean(TISSUE_BONE));
        assert!(mean(TISSUE_BONE) > mean(TISSUE_LESION));
        for (&t, &m) in p.tissue.iter().zip(&p.lesion_mask_3d.data) {
            assert_eq!(t == TISSUE_LESION, m == 1.0);
        }
    }
}

#[test]
fn arch_lies_inside_volume() {
    for seed in 0..10 {
        let p = generate_phantom(&PhantomConfig::desk().with_seed(seed)).unwrap();
        let ext = p.volume.extent_mm();
        for q in &p.arch_curve.points_mm {
            assert!((0.0..=ext[2]).contains(&q[0]));
            assert!((0.0..=ext[1]).contains(&q[1]));
            assert!((0.0..=ext[0]).contains(&q[2]));
        }
    }
}

#[test]
fn invalid_config_names_field() {
    let mut c = PhantomConfig::desk();
    c.spacing_mm = -1.0;
    match generate_phantom(&c) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "spacing_mm"),
        other => panic!("expected config error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn generated_values_stay_in_unit_range(seed in any::<u64>(), teeth in 1usize..20, p in 0.0f64..=1.0) {
        let c = PhantomConfig {
            grid_dims: [28, 26, 32],
            spacing_mm: 4.0,
            tooth_count: teeth,
            lesion_probability: p,
            seed,
            ..PhantomConfig::desk()
        };
        let ph = generate_phantom(&c).unwrap();
        prop_assert!(ph.volume.data.iter().all(|v| (0.0..=1.0).contains(v)));
        if !ph.metadata.lesion_present {
            prop_assert!(ph.lesion_mask_3d.data.iter().all(|&v| v == 0.0));
        }
    }
}
