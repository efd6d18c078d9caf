//! Train briefly, predict a held-out dataset through the file-based commands
//! and score the predictions.
//!
//! ```text
//! cargo run --release --example infer_and_eval -- --epochs 20 --work /tmp/dcfm_demo
//! ```

use std::path::PathBuf;

use clap::Parser;
use dcfm::cli;
use dcfm::config::{Mode, RunConfig};
use dcfm::datagen;

#[derive(Parser, Debug)]
struct Args {
    #[arg(long, default_value = "dcfm_demo")]
    work: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    groups: usize,
}

fn main() -> dcfm::Result<()> {
    let args = Args::parse();
    let mut cfg = RunConfig {
        synthetic: true,
        epochs: args.epochs,
        checkpoint: args.work.join("model.ckpt"),
        out_dir: args.work.join("train"),
        lr_extractor: 1e-3,
        lr_other: 3e-4,
        distractors_max: 0,
        ..RunConfig::default()
    };
    cfg.validate()?;
    cli::train_command(&cfg)?;

    let data = args.work.join("held_out");
    datagen::write_dataset(&data, &datagen::validation_groups(&cfg.gen_config(), args.groups)?)?;
    cfg.data_root = Some(data);
    cfg.out_dir = args.work.join("predictions");
    cfg.mode = Mode::Infer;
    let written = cli::infer_command(&cfg)?;
    println!("{} prediction maps", written.len());
    cfg.mode = Mode::Eval;
    let report = cli::eval_command(&cfg)?;
    for s in report.images.iter().take(5) {
        println!("{:<24} mae {:.4}  fmax {}", s.image, s.mae, s.fmax.map_or("-".into(), |f| format!("{f:.4}")));
    }
    println!("mean over {} images: mae {:.4}, fmax {:.4}", report.images.len(), report.mae, report.fmax);
    Ok(())
}
