use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hfunet::cli::{self, Failure};
use hfunet::metrics::{evaluate_case, MetricsReport, RunMeta};
use hfunet::volume::{read_label, LabelVolume};

#[derive(Parser)]
#[command(name = "metrics", version, about = "Overlap and surface-distance metrics")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score predictions against ground truth; directories are matched by file name.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pairs(gt: &Path, pred: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, Failure> {
    if gt.is_file() {
        let name = gt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, gt.to_path_buf(), pred.to_path_buf())]);
    }
    let mut names: Vec<_> = std::fs::read_dir(gt)
        .map_err(|e| Failure::runtime(format!("{}: {e}", gt.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hfv"))
        .collect();
    names.sort();
    let out: Vec<_> = names
        .into_iter()
        .filter_map(|g| {
            let f = g.file_name()?.to_owned();
            let p = pred.join(&f);
            p.is_file().then(|| (Path::new(&f).file_stem().unwrap().to_string_lossy().into_owned(), g, p))
        })
        .collect();
    if out.is_empty() {
        return Err(Failure::runtime(format!("no matching .hfv files in {} and {}", gt.display(), pred.display())));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let Cmd::Eval { gt, pred, out } = Args::parse().cmd;
    cli::run(|| {
        let mut loaded: Vec<(String, LabelVolume, LabelVolume)> = Vec::new();
        for (name, g, p) in pairs(&gt, &pred)? {
            let lg = read_label(&g).map_err(|e| Failure::runtime(format!("{}: {e}", g.display())))?;
            let lp = read_label(&p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
            loaded.push((name, lg, lp));
        }
        let rows = loaded.iter().map(|(n, g, p)| evaluate_case(n, g, p, g.geometry().spacing_f64())).collect();
        let rep = MetricsReport::from_rows(rows, RunMeta::default());
        std::fs::write(&out, rep.to_csv()).map_err(Failure::runtime)?;
        for line in rep.summary().lines().skip(1) {
            log::info!("{line}");
        }
        let failed: Vec<String> = rep.rows.iter().filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.case))).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            let mut f = Failure::runtime(format!("{} case(s) could not be scored", failed.len()));
            f.details = failed;
            Err(f)
        }
    })
}
