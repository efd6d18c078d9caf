//! Dump each image's democratic response map as a grayscale PGM next to the
//! image it came from.
//!
//! ```text
//! cargo run --release --example response_maps -- --out /tmp/maps
//! ```

use std::path::PathBuf;

use clap::Parser;
use dcfm::datagen::{self, GenConfig, ShapeClass};
use dcfm::{dpg, pnm, Dcfm, ModelConfig, Tape};

#[derive(Parser, Debug)]
struct Args {
    #[arg(long, default_value = "response_maps")]
    out: PathBuf,
    #[arg(long, default_value = "ring")]
    class: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Optional trained checkpoint; a fresh model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let gen = GenConfig { group_size: 4, ..GenConfig::default() };
    let group = datagen::generate_group(&gen, ShapeClass::parse(&args.class)?, args.seed)?;
    let mut model = Dcfm::new(ModelConfig::default(), 0)?;
    if let Some(path) = &args.checkpoint {
        dcfm::checkpoint::load(path, &mut model.store)?;
    }

    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let x = tape.constant(group.image_batch());
    let out = model.forward(&mut tape, &bound, x, None)?;
    let maps = tape.value(out.dpg.expect("full model").maps.final_map).clone();

    std::fs::create_dir_all(&args.out)?;
    let size = gen.image_size;
    for (i, img) in group.images.iter().enumerate() {
        let map = dpg::response_map_image(&maps, i);
        let [h, w] = *map.shape() else { unreachable!() };
        // blow the coarse map up to image size for viewing
        let big = datagen::resize(&map.reshaped(&[1, h, w])?, size, size);
        pnm::write_ppm(&args.out.join(format!("{i:03}.ppm")), img)?;
        pnm::write_pgm(&args.out.join(format!("{i:03}_response.pgm")), &big)?;
        pnm::write_pgm(&args.out.join(format!("{i:03}_gt.pgm")), &group.masks[i])?;
    }
    println!("wrote {} images with response maps to {}", group.len(), args.out.display());
    Ok(())
}
