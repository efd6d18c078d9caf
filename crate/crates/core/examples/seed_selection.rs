//! Pick one seed pixel per image of a synthetic group and show where it landed.
//!
//! ```text
//! cargo run --release --example seed_selection -- --class triangle --seed 3
//! ```

use clap::Parser;
use dcfm::datagen::{self, GenConfig, ShapeClass};
use dcfm::{Dcfm, ModelConfig, Tape};

#[derive(Parser, Debug)]
struct Args {
    #[arg(long, default_value = "disk")]
    class: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    group_size: usize,
    /// Trained checkpoint; an untrained model picks seeds almost at random.
    #[arg(long)]
    checkpoint: Option<std::path::PathBuf>,
}

fn main() -> dcfm::Result<()> {
    let args = Args::parse();
    let gen = GenConfig { group_size: args.group_size, ..GenConfig::default() };
    let group = datagen::generate_group(&gen, ShapeClass::parse(&args.class)?, args.seed)?;
    let mut model = Dcfm::new(ModelConfig::default(), args.seed)?;
    if let Some(path) = &args.checkpoint {
        dcfm::checkpoint::load(path, &mut model.store)?;
    }

    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let x = tape.constant(group.image_batch());
    let out = model.forward(&mut tape, &bound, x, None)?;
    let dpg = out.dpg.expect("full model runs prototype generation");
    let stride = model.cfg.encoder.downsample();

    println!("group {} ({} images, features {:?})", group.group_id, group.len(), tape.shape(out.f_ext));
    for (seed, mask) in dpg.seeds.indices.iter().zip(&group.masks) {
        // the feature cell covers a stride x stride block of the image
        let (y0, x0) = (seed.h * stride, seed.w * stride);
        let mut covered = 0.0;
        for y in y0..y0 + stride {
            for x in x0..x0 + stride {
                covered += mask.at(&[0, y, x]);
            }
        }
        println!(
            "image {}: seed at feature cell ({}, {}) -> pixels [{y0}..{}, {x0}..{}], object covers {:.0}% of it",
            seed.image,
            seed.h,
            seed.w,
            y0 + stride,
            x0 + stride,
            100.0 * covered / (stride * stride) as f64
        );
    }
    let proto = tape.value(dpg.proto.0);
    println!("prototype norm {:.4}", proto.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
