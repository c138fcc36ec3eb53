use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfunet::model::load_checkpoint;
use hfunet::pipeline::infer::{infer, InferConfig};
use hfunet::volume::{read_label, read_volume, write_label, write_volume};

const TINY: &str = "[data]\nn_train = 2\nn_val = 0\nn_test = 1\ndims = [48, 48, 24]\nradius_range = [6.0, 8.0]\ncenter_jitter = 2.0\n\
[topology]\nnames = [\"hf-2\"]\nbase_width = 4\ndepth = 2\n\
[train]\nepochs = 2\nsteps_per_epoch = 3\nbatch_size = 2\nlr_step_iterations = 3\nlr_end = 0.005\ncrop_size = 32\npatch_size = 32\nseed = 7\n\
[eval]\nlocalization = \"oracle\"\n";

const CELL: &str = "hf-2-a0.2-none-s7";

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(bin: &str, args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut c = Command::new(bin);
    for a in args {
        c.arg(a);
    }
    c.output().expect("spawn")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstdout {}\nstderr {}", o.status, String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn error_json(o: &Output) -> serde_json::Value {
    let s = String::from_utf8_lossy(&o.stderr);
    let line = s.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("stderr holds one JSON object")
}

const HFUNET: &str = env!("CARGO_BIN_EXE_hfunet");

#[test]
fn bad_config_reports_every_issue() {
    let d = scratch("bad");
    let cfg = d.join("bad.toml");
    std::fs::write(&cfg, "[train]\nfoo = 1\n[eval]\nbar = 2\n").unwrap();
    let o = run(HFUNET, &[&"train", &"--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let js = error_json(&o);
    assert_eq!(js["error"], "config");
    assert_eq!(js["exit_code"], 2);
    assert_eq!(js["details"].as_array().unwrap().len(), 2, "{js}");
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let d = scratch("missing");
    let o = run(HFUNET, &[&"infer", &"--ckpt", &d.join("none.hfck"), &"--in", &d.join("none.hfv"), &"--out", &d.join("m.hfv")]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"], "runtime");
    let o = run(env!("CARGO_BIN_EXE_labels"), &[&"heatmap", &"--in", &d.join("none.hfv"), &"--out", &d.join("h.hfv")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_report_infer_and_tools() {
    let d = scratch("tiny");
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = d.join("run");
    ok(&run(HFUNET, &[&"train", &"--config", &cfg, &"--output", &out]));
    let cell = out.join(CELL);
    for f in ["loss.csv", "model.hfck", "summary.json", "metrics.csv"] {
        assert!(cell.join(f).is_file(), "{f} missing");
    }
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let rebuilt = d.join("table.csv");
    ok(&run(HFUNET, &[&"report", &"--runs", &out, &"--out", &rebuilt]));
    assert_eq!(std::fs::read_to_string(&rebuilt).unwrap(), table);

    // The test case of the tiny config, cropped around its organ.
    let cases = d.join("cases");
    ok(&run(env!("CARGO_BIN_EXE_phantom"), &[&"generate", &"--spec", &cfg, &"--out", &cases]));
    assert!(cases.join("manifest.json").is_file());
    let image = read_volume(cases.join("case002_image.hfv")).unwrap();
    let label = read_label(cases.join("case002_label.hfv")).unwrap();
    let c = label.centroid().expect("organ present");
    let origin = [c[0] as isize - 16, c[1] as isize - 16, 0];
    let size = [32, 32, image.dims()[2]];
    let region = image.crop(origin, size, image.data().iter().copied().fold(f32::MAX, f32::min)).unwrap();
    let gt = label.crop(origin, size).unwrap();
    let region_path = d.join("region.hfv");
    let gt_path = d.join("gt.hfv");
    write_volume(&region_path, &region).unwrap();
    write_label(&gt_path, &gt).unwrap();

    let mask_path = d.join("mask.hfv");
    let ckpt = cell.join("model.hfck");
    ok(&run(
        HFUNET,
        &[&"infer", &"--ckpt", &ckpt, &"--in", &region_path, &"--out", &mask_path, &"--probs", &d.join("p.hfv"), &"--heatmap", &d.join("h.hfv")],
    ));
    let mask = read_label(&mask_path).unwrap();
    let model = load_checkpoint(&ckpt, None).unwrap();
    let direct = infer(&model, &region, &InferConfig { largest_component: true, ..Default::default() }).unwrap();
    assert_eq!(mask.data(), direct.mask.data());
    assert_eq!(read_volume(d.join("p.hfv")).unwrap().data(), direct.probs.data());
    assert_eq!(read_volume(d.join("h.hfv")).unwrap().dims(), size);

    let scores = d.join("scores.csv");
    ok(&run(env!("CARGO_BIN_EXE_metrics"), &[&"eval", &"--gt", &gt_path, &"--pred", &gt_path, &"--out", &scores]));
    let csv = std::fs::read_to_string(&scores).unwrap();
    assert!(csv.lines().count() >= 2, "{csv}");

    let heat = d.join("heat.hfv");
    ok(&run(env!("CARGO_BIN_EXE_labels"), &[&"heatmap", &"--in", &gt_path, &"--out", &heat, &"--sigma", &"3"]));
    let hv = read_volume(&heat).unwrap();
    assert_eq!(hv.dims(), size);
    assert!(hv.data().iter().any(|&v| v > 0.0));

    let png = |n: &str| d.join(n);
    for n in ["f1.png", "f2.png"] {
        ok(&run(HFUNET, &[&"dump-features", &"--ckpt", &ckpt, &"--in", &region_path, &"--out", &png(n)]));
    }
    assert_eq!(std::fs::read(png("f1.png")).unwrap(), std::fs::read(png("f2.png")).unwrap());
    let o = run(HFUNET, &[&"dump-features", &"--ckpt", &ckpt, &"--in", &region_path, &"--level", &"Q7", &"--out", &png("f3.png")]);
    assert_eq!(o.status.code(), Some(2));

    // A sweep worker reproduces the in-process cell bit for bit.
    let swept = d.join("sweep");
    ok(&run(HFUNET, &[&"sweep", &"--config", &cfg, &"--output", &swept, &"--jobs", &"1"]));
    let summary = |p: &Path| -> serde_json::Value { serde_json::from_slice(&std::fs::read(p.join(CELL).join("summary.json")).unwrap()).unwrap() };
    assert_eq!(summary(&out)["param_checksum"], summary(&swept)["param_checksum"]);
    assert_eq!(std::fs::read(out.join(CELL).join("loss.csv")).unwrap(), std::fs::read(swept.join(CELL).join("loss.csv")).unwrap());
}
