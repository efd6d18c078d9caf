//! Rank-based readjustment of attention rows: a worked row, then the full
//! attention of one image written as CSV.
//!
//! ```text
//! cargo run --release --example attention_readjust -- --alpha 3 --csv attention.csv
//! ```

use std::path::PathBuf;

use clap::Parser;
use dcfm::datagen::{self, GenConfig, ShapeClass};
use dcfm::{dfe, Dcfm, ModelConfig, Tape};

#[derive(Parser, Debug)]
struct Args {
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    /// Raw attention row to readjust.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.5, -0.2, 0.1])]
    row: Vec<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> dcfm::Result<()> {
    let args = Args::parse();
    dfe::validate_alpha(args.alpha)?;
    let (norm, rank, re, fin) = dfe::readjust_row(&args.row, args.alpha);
    println!("{:>8} {:>8} {:>5} {:>8} {:>9}", "A", "A_norm", "Z", "A_re", "A_final");
    for i in 0..args.row.len() {
        println!("{:>8.4} {:>8.4} {:>5} {:>8.1} {:>9.4}", args.row[i], norm[i], rank[i], re[i], fin[i]);
    }
    println!("row sum of A_final: {:.4}", fin.iter().sum::<f64>());

    if let Some(path) = &args.csv {
        let gen = GenConfig { group_size: 2, ..GenConfig::default() };
        let group = datagen::generate_group(&gen, ShapeClass::Disk, 0)?;
        let model = Dcfm::new(ModelConfig { alpha: args.alpha, ..ModelConfig::default() }, 0)?;
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let x = tape.constant(group.image_batch());
        let out = model.forward(&mut tape, &bound, x, None)?;
        let bundle = out.dfe.expect("full model").bundle(&tape, 0);
        dfe::write_attention_csv(path, &bundle)?;
        println!("attention of image 0 written to {}", path.display());
    }
    Ok(())
}
