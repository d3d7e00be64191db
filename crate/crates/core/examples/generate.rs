//! Continue a two-event seed with greedy and sampled decoding. HAQAE
//! conditions on the codes it infers from the seed.

mod common;

use haqae::config::Variant;
use haqae::generate::{generate, DecodeMode, GenerationConstraints};

fn main() -> haqae::Result<()> {
    let data = common::synthetic(3000);
    let ckpt = common::trained(&data, &common::small_config(Variant::Haqae, 500));
    let constraints = GenerationConstraints {
        max_events: 4,
        ..Default::default()
    };

    for seq in data.valid.iter().take(3) {
        let seed = &seq.events[..2];
        let stepper = ckpt.model.stepper_for(
            &data
                .vocab
                .encode_words(&haqae::corpus::EventSequence::new("seed", seed.to_vec()))?,
        )?;
        println!("seed:");
        for e in seed {
            println!("    {}", e.slots().join(" "));
        }
        for (name, mode) in [
            ("greedy", DecodeMode::Greedy),
            ("sample", DecodeMode::Sample { seed: 3 }),
        ] {
            let out = generate(&stepper, &data.vocab, seed, &constraints, mode)?;
            println!("  {name}:");
            for e in &out.events[2..] {
                println!("    {}", e.slots().join(" "));
            }
        }
        println!();
    }
    Ok(())
}
