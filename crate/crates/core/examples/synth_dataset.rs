//! Write a synthetic dataset in the on-disk layout used by `dcfm`.
//!
//! ```text
//! cargo run --release --example synth_dataset -- --out data --groups 8 --group-size 6
//! ```

use std::path::PathBuf;

use clap::Parser;
use dcfm::datagen::{self, GenConfig, ShapeClass};

#[derive(Parser, Debug)]
struct Args {
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 2)]
    max_distractors: usize,
    /// Draw from the held-out seed range instead of the training range.
    #[arg(long)]
    held_out: bool,
}

fn main() -> dcfm::Result<()> {
    let args = Args::parse();
    let gen = GenConfig {
        group_size: args.group_size,
        image_size: args.image_size,
        distractors: (0, args.max_distractors),
        ..GenConfig::default()
    };
    let groups = if args.held_out {
        datagen::validation_groups(&gen, args.groups)?
    } else {
        (0..args.groups)
            .map(|i| datagen::generate_group(&gen, ShapeClass::ALL[i % ShapeClass::ALL.len()], i as u64))
            .collect::<dcfm::Result<Vec<_>>>()?
    };
    datagen::write_dataset(&args.out, &groups)?;
    for g in &groups {
        let fg: f64 = g.masks.iter().map(|m| m.data().iter().sum::<f64>()).sum::<f64>()
            / (g.len() * args.image_size * args.image_size) as f64;
        let distractors: usize = g.distractors.iter().map(Vec::len).sum();
        println!("{}: {} images, {:.1}% foreground, {distractors} distractors", g.group_id, g.len(), 100.0 * fg);
    }
    println!("written under {}", args.out.display());
    Ok(())
}
