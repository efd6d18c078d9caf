//! Compare the group prototype with the prototypes of the object-only and
//! background-only features, as the contrastive loss sees them.
//!
//! ```text
//! cargo run --release --example self_contrastive
//! ```

use clap::Parser;
use dcfm::datagen::{self, GenConfig, ShapeClass};
use dcfm::scl;
use dcfm::{Dcfm, ModelConfig, Tape, Tensor};

#[derive(Parser, Debug)]
struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> dcfm::Result<()> {
    let args = Args::parse();
    let gen = GenConfig { group_size: 8, ..GenConfig::default() };
    let group = datagen::generate_group(&gen, ShapeClass::Square, args.seed)?;
    let model = Dcfm::new(ModelConfig::default(), args.seed)?;
    let masks = group.mask_batch();

    let cases = [
        ("ground-truth masks", masks.clone()),
        ("inverted masks", masks.map(|v| 1.0 - v)),
        ("everything kept", Tensor::ones(masks.shape())),
    ];
    println!("{:<20} {:>8} {:>8} {:>10}", "erasing with", "cos_c", "cos_b", "L_sc");
    for (name, y) in cases {
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let x = tape.constant(group.image_batch());
        let fwd = model.forward(&mut tape, &bound, x, None)?;
        let proto = fwd.dpg.expect("full model").proto;
        let pair = scl::erase_and_prototype(&mut tape, &model.dpg, &bound, fwd.f_ext, &y, None)?;
        let loss = scl::self_contrastive_loss(&mut tape, proto, &pair)?;
        println!(
            "{name:<20} {:>8.4} {:>8.4} {:>10.4}",
            tape.value(loss.cos_c).item(),
            tape.value(loss.cos_b).item(),
            tape.value(loss.loss).item()
        );
    }
    Ok(())
}
