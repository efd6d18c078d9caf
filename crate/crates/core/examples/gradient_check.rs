//! Central-difference check of the whole training objective on a tiny group.
//!
//! ```text
//! cargo run --release --example gradient_check -- --step 1e-5
//! ```

use clap::Parser;
use dcfm::datagen::{self, GenConfig, ShapeClass};
use dcfm::selftest::{objective_grad_check, tiny_model_config};
use dcfm::{Dcfm, Tensor};

#[derive(Parser, Debug)]
struct Args {
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> dcfm::Result<()> {
    let args = Args::parse();
    let gen = GenConfig { group_size: 2, image_size: 16, ..GenConfig::default() };
    let group = datagen::generate_group(&gen, ShapeClass::Triangle, args.seed)?;
    let shrink = |ts: &[Tensor]| Tensor::stack(&ts.iter().map(|t| datagen::resize(t, 8, 8)).collect::<Vec<_>>());
    let model = Dcfm::new(tiny_model_config(), args.seed)?;
    let start = std::time::Instant::now();
    let report = objective_grad_check(&model, &shrink(&group.images)?, &shrink(&group.masks)?, args.lambda, args.step)?;
    let names: Vec<&str> = model.store.params().iter().map(|p| p.name.as_str()).chain(["images"]).collect();
    println!(
        "{} coordinates, max relative error {:.3e} (at {} [{}]) in {:.2?}",
        report.coordinates,
        report.max_rel_error,
        names[report.worst.0],
        report.worst.1,
        start.elapsed()
    );
    Ok(())
}
