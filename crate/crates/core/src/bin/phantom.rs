use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hfunet::cli::{self, Failure};
use hfunet::config::parse_config;
use hfunet::phantom::generate_phantom;
use hfunet::pipeline::dataset::generate_case;
use hfunet::volume::{write_label, write_volume};

#[derive(Parser)]
#[command(name = "phantom", version, about = "Synthetic low-contrast phantom volumes")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write every case of a config's `[data]` section.
    Generate {
        /// Experiment config; only `[data]` is used.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip resampling and body cropping.
        #[arg(long)]
        raw: bool,
    },
}

fn main() -> ExitCode {
    let Cmd::Generate { spec, out, raw } = Args::parse().cmd;
    cli::run(|| {
        let cfg = parse_config(&spec)?.data;
        std::fs::create_dir_all(&out).map_err(Failure::runtime)?;
        let n_train = cfg.n_train;
        let n_val = cfg.n_val;
        let mut manifest = Vec::new();
        for (i, s) in cfg.specs().iter().enumerate() {
            let id = format!("case{i:03}");
            let (image, label) = if raw {
                generate_phantom(s).map_err(|e| Failure::runtime(format!("{id}: {e}")))?
            } else {
                let c = generate_case(&cfg, i, s).map_err(Failure::runtime)?;
                (c.image, c.label)
            };
            write_volume(out.join(format!("{id}_image.hfv")), &image).map_err(Failure::runtime)?;
            write_label(out.join(format!("{id}_label.hfv")), &label).map_err(Failure::runtime)?;
            let split = if i < n_train { "train" } else if i < n_train + n_val { "val" } else { "test" };
            manifest.push(serde_json::json!({
                "id": id,
                "split": split,
                "dims": image.dims(),
                "spacing": image.spacing(),
                "foreground_voxels": label.count(),
                "spec": s,
            }));
            log::info!("{id} {split} dims {:?} foreground {}", image.dims(), label.count());
        }
        let js = serde_json::json!({ "data": cfg, "raw": raw, "cases": manifest });
        std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&js).expect("json")).map_err(Failure::runtime)?;
        Ok(())
    })
}
