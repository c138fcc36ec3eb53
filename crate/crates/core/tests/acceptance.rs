//! One pass/fail line per acceptance criterion, tolerances pinned below.
//! The phantom training runs take about half an hour on one core.

mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hfunet::autograd::Tape;
use hfunet::config::{parse_config_str, ExperimentConfig, LocalizationMode};
use hfunet::contour::{extract_contour, gaussian_contour_map, ContourSet};
use hfunet::metrics::{asd, dsc, sen_ppv};
use hfunet::model::{build_topology, count_blocks, Family, Group, ModelState, TopologyConfig};
use hfunet::phantom::{generate_phantom, PhantomSpec};
use hfunet::pipeline::experiment::run_experiment;
use hfunet::pipeline::{train, TrainCase, TrainConfig, TrainHooks};
use hfunet::report::{CellStatus, CellSummary};
use hfunet::tensor::Tensor;
use hfunet::volume::{Geometry, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_FRACTION: f64 = 0.99;
const GRAD_WORST: f64 = 1e-3;
const GRAD_SECONDS: f64 = 120.0;
const CONTOUR_TOL: f64 = 1e-12;
const CONTOUR_SECONDS: f64 = 10.0;
const POINT_AT_0: f64 = 0.0797885;
const POINT_AT_3: f64 = 0.0666486;
const POINT_TOL: f64 = 1e-5;
const ASD_TOL: f64 = 1e-9;
const METRIC_SECONDS: f64 = 60.0;
const DEGENERACY_TOL: f32 = 1e-6;
const TRAIN_DSC: f64 = 0.95;
const TEST_DSC: f64 = 0.85;
const TEST_ASD_MM: f64 = 2.0;
const OVERFIT_SECONDS: f64 = 20.0 * 60.0;
const JOINT_STEPS: usize = 2000;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(n: usize, name: &str, o: &Outcome) {
    let s = format!("acceptance {n} {name}: {} ({})\n", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(s.as_bytes());
    let _ = out.flush();
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let reports = common::loss_and_fusion_suite();
    let secs = t0.elapsed().as_secs_f64();
    let bad: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passes(GRAD_FRACTION, GRAD_WORST))
        .map(|(n, r)| format!("{n} frac {:.4} worst {:.2e}", r.frac_within, r.max_rel_err))
        .collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let min_frac = reports.iter().map(|(_, r)| r.frac_within).fold(1.0, f64::min);
    Outcome {
        pass: bad.is_empty() && secs < GRAD_SECONDS,
        detail: format!(
            "{} checks, min fraction within 1e-4 {min_frac:.4}, worst rel err {worst:.2e}, {secs:.1} s{}",
            reports.len(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    }
}

fn brute_heatmap(mask: &[u8], n: usize, sigma: f64, trunc: f64) -> Vec<f64> {
    let fg = |i: isize, j: isize| i >= 0 && j >= 0 && i < n as isize && j < n as isize && mask[i as usize + n * j as usize] == 1;
    let mut pts = Vec::new();
    for j in 0..n as isize {
        for i in 0..n as isize {
            if fg(i, j) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(a, b)| !fg(i + a, j + b)) {
                pts.push((i as f64, j as f64));
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let mut s = 0.0;
            for &(pi, pj) in &pts {
                let d = ((i as f64 - pi).powi(2) + (j as f64 - pj).powi(2)).sqrt();
                if d < trunc {
                    s += (-(d * d) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                }
            }
            out[i + n * j] = s;
        }
    }
    out
}

fn contour_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut max_diff = 0.0f64;
    for _ in 0..50 {
        let p = r.random_range(0.2..0.8);
        let mask: Vec<u8> = (0..256).map(|_| r.random_bool(p) as u8).collect();
        let (sigma, trunc) = (r.random_range(1.0..6.0), r.random_range(1.0..8.0));
        let c = extract_contour(&mask, [16, 16], 0).expect("binary mask");
        let h = gaussian_contour_map(&c, [16, 16], sigma, trunc).expect("valid parameters");
        for (a, b) in h.data.iter().zip(brute_heatmap(&mask, 16, sigma, trunc)) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    let single = ContourSet { slice: 0, points: vec![(0, 0)] };
    let h = gaussian_contour_map(&single, [8, 1], 5.0, 5.0).expect("valid parameters");
    let (v0, v3, v5) = (h.get(0, 0), h.get(3, 0), h.get(5, 0));
    let formula3 = POINT_AT_0 * (-9.0f64 / 50.0).exp();
    let secs = t0.elapsed().as_secs_f64();
    let points = (v0 - POINT_AT_0).abs() <= 1e-7 && (v3 - POINT_AT_3).abs() <= POINT_TOL && v5 == 0.0;
    Outcome {
        pass: max_diff <= CONTOUR_TOL && points && secs < CONTOUR_SECONDS,
        detail: format!(
            "max abs diff {max_diff:.1e} over 50 masks; S(0) {v0:.7}, S(3) {v3:.7} (quoted {POINT_AT_3}, formula {formula3:.7}), S(5) {v5}; {secs:.2} s"
        ),
    }
}

fn brute_surface(m: &LabelVolume) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.dims();
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0 && y >= 0 && z >= 0 && x < nx as isize && y < ny as isize && z < nz as isize && m.get(x as usize, y as usize, z as usize)
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (a, b, c) = (x as isize, y as isize, z as isize);
                let faces = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if m.get(x, y, z) && faces.iter().any(|&(i, j, k)| !inside(a + i, b + j, c + k)) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn brute_asd(a: &LabelVolume, b: &LabelVolume, s: [f64; 3]) -> f64 {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2)).sum::<f64>().sqrt()
    };
    let mean_min = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / from.len() as f64
    };
    0.5 * (mean_min(&sa, &sb) + mean_min(&sb, &sa))
}

fn metrics_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (mut max_diff, mut exact, mut scaled, mut n) = (0.0f64, true, true, 0);
    while n < 50 {
        let dims = [r.random_range(2..=12), r.random_range(2..=12), r.random_range(2..=12)];
        let g = Geometry::new(dims, [1.0; 3]).expect("geometry");
        let (p, q) = (r.random_range(0.05..0.7), r.random_range(0.05..0.7));
        let a = LabelVolume::from_fn(g, |_, _, _| r.random_bool(p));
        let b = LabelVolume::from_fn(g, |_, _, _| r.random_bool(q));
        if a.count() == 0 || b.count() == 0 {
            continue;
        }
        n += 1;
        let inter = a.data().iter().zip(b.data()).filter(|(&x, &y)| x == 1 && y == 1).count() as f64;
        let (na, nb) = (a.count() as f64, b.count() as f64);
        let (sen, ppv) = sen_ppv(&a, &b).expect("same dims");
        exact &= dsc(&a, &b).expect("same dims") == 2.0 * inter / (na + nb) && sen == inter / na && ppv == inter / nb;
        let s = [r.random_range(0.5..3.0), r.random_range(0.5..3.0), r.random_range(0.5..3.0)];
        let got = asd(&a, &b, s).expect("non-empty");
        max_diff = max_diff.max((got - brute_asd(&a, &b, s)).abs());
        scaled &= asd(&a, &b, s.map(|v| 2.0 * v)).expect("non-empty") == 2.0 * got;
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: exact && scaled && max_diff <= ASD_TOL && secs < METRIC_SECONDS,
        detail: format!("set counts exact {exact}, ASD max abs diff {max_diff:.1e}, 2x spacing exact {scaled}; {secs:.2} s"),
    }
}

fn topology_contract() -> Outcome {
    let expected = [
        ("unet", (0, 0)),
        ("eb", (1, 0)),
        ("lb", (7, 0)),
        ("hf-1", (6, 1)),
        ("hf-2", (5, 2)),
        ("hf-3", (4, 3)),
        ("hf-6", (1, 6)),
    ];
    let mut problems = Vec::new();
    let mut counts = Vec::new();
    for (name, fb) in expected {
        let cfg = TopologyConfig::named(name).expect("known family");
        let got = count_blocks(&cfg);
        counts.push(format!("{name} {got:?}"));
        if got != fb {
            problems.push(format!("{name} counts {got:?}"));
        }
        let model = build_topology(&cfg, 0).expect("builds");
        let mut t = Tape::<f32>::new();
        let pv = model.bind(&mut t, |_| false);
        let x = t.constant(Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 31) % 17) as f32 / 8.5 - 1.0));
        let out = model.forward(&mut t, &pv, x).expect("forward");
        if t.shape(out.seg_logits) != [2, 2, 32, 32] {
            problems.push(format!("{name} seg {:?}", t.shape(out.seg_logits)));
        }
        let contour = out.contour.map(|c| t.shape(c).to_vec());
        if contour != cfg.has_contour_branch().then(|| vec![2, 1, 32, 32]) {
            problems.push(format!("{name} contour {contour:?}"));
        }
        if out.triples.len() != cfg.tcl_count {
            problems.push(format!("{name} {} triples", out.triples.len()));
        }
        for tr in &out.triples {
            let s = cfg.scale(tr.level);
            let want = [2, cfg.width(tr.level), 32 >> s, 32 >> s];
            for v in [tr.seg, tr.cont, tr.tcl, tr.fed_seg, tr.fed_cont] {
                if t.shape(v) != want {
                    problems.push(format!("{name} level {} shape {:?} != {want:?}", tr.level, t.shape(v)));
                }
            }
        }
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() { format!("FB {}; shapes hold at width 8", counts.join(", ")) } else { problems.join("; ") },
    }
}

fn degeneracy() -> Outcome {
    let mut worst = 0.0f32;
    let mut levels = 0;
    for name in ["hf-1", "hf-2", "hf-3", "hf-6"] {
        let mut cfg = TopologyConfig::named(name).expect("known family");
        cfg.alpha = 0.0;
        let mut model = build_topology(&cfg, 11).expect("builds");
        model.mirror_branches();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = Tensor::from_fn(&[2, 3, 32, 32], |_| r.random_range(-1.0f32..1.0));
            let mut t = Tape::<f32>::new();
            let pv = model.bind(&mut t, |_| false);
            let xv = t.constant(x);
            let out = model.forward(&mut t, &pv, xv).expect("forward");
            for tr in &out.triples {
                worst = worst.max(t.value(tr.fed_seg).max_abs_diff(t.value(tr.fed_cont)) as f32);
                levels += 1;
            }
        }
    }
    Outcome {
        pass: worst <= DEGENERACY_TOL && levels > 0,
        detail: format!("max |seg - contour| {worst:.1e} over {levels} fused levels of hf-1/2/3/6, 10 batches each"),
    }
}

fn checksums(m: &ModelState) -> [String; 4] {
    [Group::Shared, Group::SegBranch, Group::ContourBranch, Group::Tcl].map(|g| m.store.checksum(g))
}

fn cold_start_freeze() -> Outcome {
    let mut spec = PhantomSpec::centered([32, 32, 20], [1.0; 3], [7.0, 6.0, 5.0], 4);
    spec.noise_sigma = 0.3;
    let (img, label) = generate_phantom(&spec).expect("phantom");
    let case = TrainCase::new("c0", img, label, 5.0, 5.0).expect("targets");
    let cfg = TopologyConfig { base_width: 4, depth: 2, ..TopologyConfig::new(Family::Hf, 2) };
    let model = build_topology(&cfg, 3).expect("builds");
    let before = checksums(&model);
    let tc = TrainConfig {
        epochs: 2,
        steps_per_epoch: 3,
        batch_size: 2,
        lr_step_iterations: 3,
        cold_start_epochs: 1,
        crop_size: 32,
        patch_size: 32,
        ..Default::default()
    };
    let mut after_cold = None;
    let mut cb = |e: usize, m: &ModelState| {
        if e == 0 {
            after_cold = Some(checksums(m));
        }
    };
    let mut hooks = TrainHooks { on_epoch_end: Some(&mut cb), ..Default::default() };
    let res = train(model, std::slice::from_ref(&case), &tc, &mut hooks);
    drop(hooks);
    let (Ok((trained, _)), Some(cold)) = (res, after_cold) else {
        return Outcome { pass: false, detail: "training failed".into() };
    };
    let frozen = cold[2] == before[2] && cold[3] == before[3];
    let seg_moved = cold[1] != before[1];
    let joint_moved = checksums(&trained)[2] != before[2];
    Outcome {
        pass: frozen && seg_moved,
        detail: format!(
            "contour/TCL unchanged after cold start {frozen}, segmentation changed {seg_moved}, contour trains in the joint phase {joint_moved}"
        ),
    }
}

fn phantom_experiment(out: &Path) -> ExperimentConfig {
    let src = format!(
        "name = \"acceptance\"\noutput = {:?}\n\
         [topology]\nnames = [\"hf-6\", \"unet\"]\nalpha = [0.2]\nbase_width = 8\nseeds = {:?}\n\
         [train]\nepochs = {}\nsteps_per_epoch = 100\ncold_start_epochs = 1\nbatch_size = 8\nlr_start = 0.01\nlr_end = 0.001\nlr_step_iterations = 100\ncrop_size = 64\npatch_size = 64\n",
        out.to_string_lossy(),
        SEEDS,
        JOINT_STEPS / 100 + 1
    );
    let cfg = parse_config_str(&src).expect("acceptance config parses");
    assert_eq!(cfg.eval.localization, LocalizationMode::Unet);
    cfg
}

fn overfit(hf6: Option<&CellSummary>) -> Outcome {
    let Some(c) = hf6.filter(|c| c.status == CellStatus::Ok) else {
        return Outcome { pass: false, detail: format!("hf-6 seed 0 did not finish: {:?}", hf6.and_then(|c| c.error.clone())) };
    };
    let train_dsc = c.train_dsc.unwrap_or(0.0);
    let (d, a) = (c.dsc(), c.asd());
    Outcome {
        pass: train_dsc >= TRAIN_DSC && d.mean >= TEST_DSC && a.mean <= TEST_ASD_MM && c.seconds <= OVERFIT_SECONDS && d.n == 4,
        detail: format!(
            "train DSC {train_dsc:.4} (>= {TRAIN_DSC}), test DSC {:.4} (>= {TEST_DSC}), test ASD {:.3} mm (<= {TEST_ASD_MM}) over {} cases, {} steps, {:.0} s",
            d.mean, a.mean, d.n, c.steps, c.seconds
        ),
    }
}

fn direction(cells: &[CellSummary]) -> Outcome {
    let mean_asd = |name: &str| {
        let v: Vec<f64> = cells
            .iter()
            .filter(|c| c.topology.name() == name && c.status == CellStatus::Ok)
            .map(|c| c.asd().mean)
            .collect();
        (v.iter().sum::<f64>() / v.len().max(1) as f64, v)
    };
    let (hf, hv) = mean_asd("hf-6");
    let (un, uv) = mean_asd("unet");
    let complete = hv.len() == SEEDS.len() && uv.len() == SEEDS.len();
    Outcome {
        pass: complete && hf <= un,
        detail: format!("mean test ASD hf-6 {hf:.3} mm {hv:.3?} vs unet {un:.3} mm {uv:.3?}"),
    }
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = format!(
        "[data]\nn_train = 2\nn_val = 0\nn_test = 1\ndims = [48, 48, 24]\nradius_range = [6.0, 8.0]\ncenter_jitter = 2.0\n\
         [topology]\nnames = [\"hf-2\"]\nbase_width = 4\ndepth = 2\n\
         [train]\nepochs = 2\nsteps_per_epoch = 3\nbatch_size = 2\nlr_step_iterations = 3\nlr_end = 0.005\ncrop_size = 32\npatch_size = 32\nseed = 7\n\
         [eval]\nlocalization = \"oracle\"\n"
    );
    let path = dir.join("det.toml");
    std::fs::write(&path, cfg).expect("write config");
    let mut runs = Vec::new();
    for r in ["a", "b"] {
        let out = dir.join(r);
        let status = Command::new(env!("CARGO_BIN_EXE_hfunet"))
            .args(["train", "--config"])
            .arg(&path)
            .arg("--output")
            .arg(&out)
            .output()
            .expect("spawn hfunet");
        if !status.status.success() {
            return Outcome { pass: false, detail: format!("run {r} failed: {}", String::from_utf8_lossy(&status.stderr)) };
        }
        let cell = out.join("hf-2-a0.2-none-s7");
        let loss = std::fs::read(cell.join("loss.csv")).unwrap_or_default();
        let summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(cell.join("summary.json")).unwrap_or_default()).unwrap_or_default();
        runs.push((loss, summary["param_checksum"].as_str().unwrap_or("").to_string()));
    }
    let same_loss = !runs[0].0.is_empty() && runs[0].0 == runs[1].0;
    let same_params = !runs[0].1.is_empty() && runs[0].1 == runs[1].1;
    Outcome {
        pass: same_loss && same_params,
        detail: format!(
            "loss.csv identical {same_loss} ({} bytes), parameter checksum identical {same_params} ({})",
            runs[0].0.len(),
            &runs[0].1[..runs[0].1.len().min(16)]
        ),
    }
}

#[test]
fn acceptance() {
    let mut all = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        line(n, name, &o);
        all.push((n, o.pass));
    };
    record(1, "gradient suite", gradient_suite());
    record(2, "contour oracle", contour_oracle());
    record(3, "metrics oracle", metrics_oracle());
    record(4, "topology contract", topology_contract());
    record(5, "alpha = 0 degeneracy", degeneracy());
    record(6, "cold-start freeze", cold_start_freeze());

    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).expect("scratch directory");
    record(9, "determinism", determinism(&root));

    let cfg = phantom_experiment(&root.join("phantoms"));
    match run_experiment(&cfg) {
        Ok(o) => {
            let hf6 = o.cells.iter().find(|c| c.topology.name() == "hf-6" && c.seed == SEEDS[0]);
            record(7, "overfit", overfit(hf6));
            record(8, "direction over seeds", direction(&o.cells));
        }
        Err(e) => {
            record(7, "overfit", Outcome { pass: false, detail: e.to_string() });
            record(8, "direction over seeds", Outcome { pass: false, detail: e.to_string() });
        }
    }

    let failed: Vec<usize> = all.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
