use hfunet::autograd::Tape;
use hfunet::config::{parse_config_str, ExperimentConfig};
use hfunet::contour::{extract_contour, gaussian_contour_map, ContourSet};
use hfunet::losses::{self, LossBreakdown, LossWeights};
use hfunet::metrics::{asd, dsc, sen_ppv, squared_distance_map, surface};
use hfunet::model::tcl::{self, apply_masks, FusionMasks};
use hfunet::model::{build_topology, Group, TopologyConfig};
use hfunet::patches::{extract_mask, extract_plane, extract_stack, sample_training_patches};
use hfunet::phantom::{generate_phantom, PhantomSpec};
use hfunet::pipeline::localize::{contains, localize, FixedMask, COARSE_FACTOR};
use hfunet::pipeline::{infer, InferConfig, StepDecay};
use hfunet::preprocess::{downsample_label, normalize, resample_label};
use hfunet::tensor::Tensor;
use hfunet::volume::{Geometry, LabelVolume, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn geom(d: [usize; 3], s: [f32; 3]) -> Geometry {
    Geometry::new(d, s).unwrap()
}

fn random_mask(d: [usize; 3], p: f64, seed: u64) -> LabelVolume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    LabelVolume::from_fn(geom(d, [1.0; 3]), |_, _, _| r.random_bool(p))
}

fn ball(d: [usize; 3], c: [f64; 3], r: [f64; 3]) -> LabelVolume {
    LabelVolume::from_fn(geom(d, [1.0; 3]), |x, y, z| {
        let q = [x as f64, y as f64, z as f64];
        (0..3).map(|a| ((q[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
    })
}

fn points(nx: usize, ny: usize, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<(usize, usize)> = (0..n).map(|_| (r.random_range(0..nx), r.random_range(0..ny))).collect();
    v.sort();
    v.dedup();
    v
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn phantom_is_pure_in_seed(seed in 0u64..1000, amp in 0.0f64..0.3) {
        let mut s = PhantomSpec::centered([28, 28, 20], [1.0, 1.0, 1.5], [5.0, 4.0, 6.0], seed);
        s.radial_perturbation_amplitude = amp;
        s.noise_sigma = 0.3;
        let a = generate_phantom(&s).unwrap();
        let b = generate_phantom(&s).unwrap();
        prop_assert_eq!(a.0.data(), b.0.data());
        prop_assert_eq!(a.1.data(), b.1.data());
        prop_assert!(a.1.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn normalization_hits_both_endpoints(seed in 0u64..1000, lo in -50.0f32..0.0, span in 0.01f32..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Volume::from_fn(geom([5, 4, 3], [1.0; 3]), |_, _, _| lo + span * r.random::<f32>());
        v.data_mut()[0] = lo;
        v.data_mut()[1] = lo + span;
        normalize(&mut v);
        prop_assert!(v.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        prop_assert_eq!(v.data().iter().cloned().fold(f32::INFINITY, f32::min), -1.0);
        prop_assert_eq!(v.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
    }

    #[test]
    fn patches_recrop_exactly(seed in 0u64..1000, p in 4usize..12) {
        let label = ball([16, 16, 10], [8.0, 7.0, 5.0], [4.0, 3.0, 2.0]);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Volume::from_fn(*label.geometry(), |_, _, _| r.random());
        let heat = Volume::from_fn(*label.geometry(), |x, y, z| (x + 3 * y + 7 * z) as f32);
        for patch in sample_training_patches(&img, &label, &heat, p, 3, 8, seed).unwrap() {
            let [x0, y0, z] = patch.stack.origin;
            prop_assert_eq!(&patch.stack, &extract_stack(&img, x0, y0, z as usize, p, 3));
            prop_assert_eq!(&patch.mask, &extract_mask(&label, x0, y0, z as usize, p));
            prop_assert_eq!(&patch.heatmap, &extract_plane(&heat, x0, y0, z as usize, p));
        }
    }

    #[test]
    fn label_stays_binary(seed in 0u64..1000, f in 1usize..4, s in 0.5f32..2.5) {
        let m = random_mask([9, 8, 7], 0.4, seed);
        prop_assert!(downsample_label(&m, f).unwrap().data().iter().all(|&v| v <= 1));
        prop_assert!(resample_label(&m, [s, s, s]).unwrap().data().iter().all(|&v| v <= 1));
        prop_assert!(m.crop([-2, 1, 3], [6, 6, 6]).unwrap().data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn contour_points_are_boundary(seed in 0u64..1000, p in 0.2f64..0.9) {
        let m = random_mask([12, 10, 1], p, seed);
        let c = extract_contour(m.slice(0), [12, 10], 0).unwrap();
        let mut sorted = c.points.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), c.points.len());
        for &(i, j) in &c.points {
            prop_assert!(m.get(i, j, 0));
            let bg = |a: isize, b: isize| a < 0 || b < 0 || a >= 12 || b >= 10 || !m.get(a as usize, b as usize, 0);
            let (a, b) = (i as isize, j as isize);
            prop_assert!(bg(a - 1, b) || bg(a + 1, b) || bg(a, b - 1) || bg(a, b + 1));
        }
    }

    #[test]
    fn heatmap_superposition_and_bounds(seed in 0u64..1000, sigma in 0.5f64..6.0, trunc in 0.5f64..8.0) {
        let all = points(14, 12, 12, seed);
        let (a, b): (Vec<_>, Vec<_>) = all.iter().enumerate().partition(|(i, _)| i % 2 == 0);
        let set = |v: Vec<(usize, &(usize, usize))>| ContourSet { slice: 0, points: v.into_iter().map(|(_, &p)| p).collect() };
        let (sa, sb) = (set(a), set(b));
        let whole = ContourSet { slice: 0, points: all.clone() };
        let m = |c: &ContourSet| gaussian_contour_map(c, [14, 12], sigma, trunc).unwrap();
        let (ha, hb, hw) = (m(&sa), m(&sb), m(&whole));
        let bound = all.len() as f64 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        for j in 0..12 {
            for i in 0..14 {
                let v = hw.get(i, j);
                prop_assert!((v - ha.get(i, j) - hb.get(i, j)).abs() <= 1e-12);
                prop_assert!(v >= 0.0 && v <= bound + 1e-12);
                let dmin = all.iter().map(|&(a, b)| ((a as f64 - i as f64).powi(2) + (b as f64 - j as f64).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
                if dmin >= trunc {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn heatmap_decreases_with_distance(sigma in 0.5f64..6.0, trunc in 2.0f64..9.0) {
        let c = ContourSet { slice: 0, points: vec![(0, 0)] };
        let h = gaussian_contour_map(&c, [12, 1], sigma, trunc).unwrap();
        let inside: Vec<f64> = (0..12).filter(|&i| (i as f64) < trunc).map(|i| h.get(i, 0)).collect();
        prop_assert!(inside.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn heatmap_translates(seed in 0u64..1000, dx in 0usize..4, dy in 0usize..4) {
        let pts = points(6, 6, 5, seed);
        let base = ContourSet { slice: 0, points: pts.iter().map(|&(i, j)| (i + 7, j + 7)).collect() };
        let moved = ContourSet { slice: 0, points: pts.iter().map(|&(i, j)| (i + 7 + dx, j + 7 + dy)).collect() };
        let a = gaussian_contour_map(&base, [24, 24], 2.0, 3.0).unwrap();
        let b = gaussian_contour_map(&moved, [24, 24], 2.0, 3.0).unwrap();
        for j in 0..20 {
            for i in 0..20 {
                prop_assert_eq!(a.get(i, j), b.get(i + dx, j + dy));
            }
        }
    }

    #[test]
    fn metric_symmetry_identity_duality(seed in 0u64..1000, p in 0.1f64..0.8, q in 0.1f64..0.8) {
        let a = random_mask([7, 6, 5], p, seed);
        let b = random_mask([7, 6, 5], q, seed + 1);
        prop_assume!(a.count() > 0 && b.count() > 0);
        prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        let s = [0.7, 1.1, 2.3];
        prop_assert!((asd(&a, &b, s).unwrap() - asd(&b, &a, s).unwrap()).abs() < 1e-12);
        let (sen, _) = sen_ppv(&a, &b).unwrap();
        let (_, ppv) = sen_ppv(&b, &a).unwrap();
        prop_assert_eq!(sen, ppv);
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(asd(&a, &a, s).unwrap(), 0.0);
        prop_assert_eq!(sen_ppv(&a, &a).unwrap(), (1.0, 1.0));
        if a != b {
            prop_assert!(dsc(&a, &b).unwrap() < 1.0);
        }
        for v in [dsc(&a, &b).unwrap(), sen, ppv] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn distance_map_matches_brute_force(seed in 0u64..1000, sx in 0.5f64..3.0, sz in 0.5f64..3.0) {
        let d = [6, 5, 4];
        let m = random_mask(d, 0.15, seed);
        prop_assume!(m.count() > 0);
        let sites = surface(&m);
        let got = squared_distance_map(&sites, d, [sx, 1.0, sz]);
        let idx = |i: usize| [i % 6, (i / 6) % 5, i / 30];
        for i in 0..got.len() {
            let c = idx(i);
            let best = (0..got.len()).filter(|&j| sites[j]).map(|j| {
                let e = idx(j);
                ((c[0] as f64 - e[0] as f64) * sx).powi(2) + (c[1] as f64 - e[1] as f64).powi(2) + ((c[2] as f64 - e[2] as f64) * sz).powi(2)
            }).fold(f64::INFINITY, f64::min);
            prop_assert!((got[i] - best).abs() <= 1e-9 * best.max(1.0));
        }
    }

    #[test]
    fn losses_non_negative_and_permutation_invariant(seed in 0u64..1000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..32).map(|_| r.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..32).map(|_| r.random_range(0..2) as f64).collect();
        let h: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let perm = |v: &[f64]| -> Vec<f64> { v[16..].iter().chain(&v[..16]).copied().collect() };
        let eval = |p: Vec<f64>, y: Vec<f64>, h: Vec<f64>| {
            let mut t = Tape::<f64>::new();
            let pv = t.leaf(Tensor::from_vec(&[2, 4, 4], p).unwrap(), false);
            let hv = t.constant(Tensor::from_vec(&[2, 4, 4], h).unwrap());
            let c = losses::classification_loss(&mut t, pv, Tensor::from_vec(&[2, 4, 4], y).unwrap()).unwrap();
            let g = losses::regression_loss(&mut t, pv, hv).unwrap();
            (t.value(c).item(), t.value(g).item())
        };
        let a = eval(p.clone(), y.clone(), h.clone());
        let b = eval(perm(&p), perm(&y), perm(&h));
        prop_assert!(a.0 >= 0.0 && a.1 >= 0.0);
        prop_assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
    }

    #[test]
    fn total_is_linear_in_each_weight(l in prop::array::uniform4(0.0f64..5.0), w in prop::array::uniform3(0.0f64..2.0), k in 0.0f64..3.0) {
        let base = LossWeights { lambda1: w[0], lambda2: w[1], lambda3: w[2], weight_decay: 0.0 };
        let t = |b: &LossWeights| LossBreakdown::combine(l[0], l[1], l[2], l[3], b).unwrap().total;
        let t0 = t(&base);
        prop_assert!((t0 - (w[0] * l[0] + w[1] * l[1] + w[2] * l[2] + l[3])).abs() < 1e-12);
        let bumped = [
            LossWeights { lambda1: w[0] + k, ..base },
            LossWeights { lambda2: w[1] + k, ..base },
            LossWeights { lambda3: w[2] + k, ..base },
        ];
        for (i, b) in bumped.iter().enumerate() {
            prop_assert!((t(b) - t0 - k * l[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, 4, 4, 4], |_| scale * r.random_range(-1.0..1.0));
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x);
        let (m, _) = tcl::channel_attention(&mut t, xv).unwrap();
        for row in t.value(m.mask).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_fusion_is_linear_with_frozen_masks(seed in 0u64..1000, averaged: bool) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut f = |_| r.random_range(-1.0..1.0);
        let (a, b) = (Tensor::<f64>::from_fn(&[1, 3, 4, 4], &mut f), Tensor::<f64>::from_fn(&[1, 3, 4, 4], &mut f));
        let mut t = Tape::<f64>::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let masks = FusionMasks {
            c1: Some(tcl::channel_attention(&mut t, av).unwrap().0),
            c2: Some(tcl::channel_attention(&mut t, bv).unwrap().0),
            ..Default::default()
        };
        let one = apply_masks(&mut t, av, bv, &masks, averaged).unwrap();
        let (a2, b2) = (t.constant(a.map(|v| 2.0 * v)), t.constant(b.map(|v| 2.0 * v)));
        let two = apply_masks(&mut t, a2, b2, &masks, averaged).unwrap();
        for (x, y) in t.value(one).data().iter().zip(t.value(two).data()) {
            prop_assert!((2.0 * x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn lr_is_bounded_and_non_increasing(start in 1e-4f64..1.0, ratio in 1e-3f64..1.0, step in 1usize..50, total in 1usize..500) {
        let end = start * ratio;
        let s = StepDecay::new(start, end, step, total);
        let mut prev = f64::INFINITY;
        for t in 0..total + step {
            let lr = s.lr(t);
            prop_assert!(lr <= prev && lr >= end && lr <= start);
            prev = lr;
        }
        if (total - 1) / step >= 1 {
            prop_assert!((s.lr(total - 1) - end).abs() <= 1e-12 * start);
        }
    }

    #[test]
    fn localized_crop_contains_organ(cx in 10.0f64..38.0, cy in 10.0f64..38.0, cz in 8.0f64..32.0, rx in 6.0f64..10.0, rz in 6.0f64..10.0) {
        let crop = 32;
        let label = ball([48, 48, 40], [cx, cy, cz], [rx, rx * 0.8, rz]);
        let img = label.to_volume();
        let coarse = downsample_label(&label, COARSE_FACTOR).unwrap();
        prop_assume!(coarse.count() > 0);
        let found = localize(&img, &FixedMask(coarse), crop).unwrap();
        prop_assert!(!found.fallback);
        prop_assert!(contains(&label, found.origin, crop));
    }

    #[test]
    fn grid_config_round_trips(alphas in prop::collection::vec(0.0f64..1.0, 1..4), seeds in prop::collection::vec(0u64..100, 1..3), width in 2usize..16) {
        let mut cfg = ExperimentConfig::default();
        cfg.topology.names = vec!["unet".into(), "hf-2".into()];
        cfg.topology.alpha = alphas.clone();
        cfg.topology.seeds = Some(seeds.clone());
        cfg.topology.base_width = width;
        let back = parse_config_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.cells().unwrap().len(), 2 * alphas.len() * seeds.len());
    }
}

#[test]
fn parameter_groups_partition_every_family() {
    for name in ["unet", "eb", "lb", "hf-1", "hf-2", "hf-3", "hf-6"] {
        let m = build_topology(&TopologyConfig::named(name).unwrap(), 0).unwrap();
        let counts = m.param_counts();
        assert_eq!(counts.values().sum::<usize>(), m.store.total(), "{name}");
        let mut names: Vec<&str> = m.store.iter().map(|p| p.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.store.len(), "{name}");
        for p in m.store.iter() {
            assert!(p.name.starts_with(p.group.tag()), "{name}: {} in {:?}", p.name, p.group);
        }
        if name == "lb" {
            assert_eq!(m.store.count(Group::Tcl), 0);
        }
    }
}

#[test]
fn inference_is_translation_consistent() {
    let mut cfg = TopologyConfig::named("hf-1").unwrap();
    cfg.depth = 2;
    let mut model = build_topology(&cfg, 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    let g = geom([16, 16, 10], [1.0; 3]);
    let vol = Volume::from_fn(g, |x, y, z| ((x * 7 + y * 3 + z * 11) % 13) as f32 / 6.5 - 1.0);
    let shifted = Volume::from_fn(g, |x, y, z| if z >= 2 { vol.get(x, y, z - 2) } else { -1.0 });
    let icfg = InferConfig { batch: 4, largest_component: false };
    let a = infer(&model, &vol, &icfg).unwrap();
    let b = infer(&model, &shifted, &icfg).unwrap();
    for z in 1..7 {
        for y in 0..16 {
            for x in 0..16 {
                let (pa, pb) = (a.probs.get(x, y, z), b.probs.get(x, y, z + 2));
                assert!((pa - pb).abs() <= 1e-5, "({x},{y},{z}) {pa} vs {pb}");
                if (pa - 0.5).abs() > 1e-4 {
                    assert_eq!(a.mask.get(x, y, z), b.mask.get(x, y, z + 2));
                }
            }
        }
    }
}
