//! Inverse narrative cloze: pick the true five-event continuation of a
//! seed event among six candidates.

mod common;

use haqae::config::Variant;
use haqae::corpus::tokenize_events;
use haqae::eval::{build_cloze_set, cloze_accuracy, RandomScorer};

fn main() -> haqae::Result<()> {
    let data = common::synthetic(3000);
    let instances = build_cloze_set(&data.valid, 200, 5)?;
    let first = &instances[0];
    println!("seed event: {}", first.seed_event().slots().join(" "));
    for (i, c) in first.candidates().enumerate() {
        let mark = if i == 0 { "*" } else { " " };
        println!(" {mark} {}", tokenize_events(c)?[5..].join(" "));
    }

    let chance = cloze_accuracy(&mut RandomScorer::new(1), &data.vocab, &instances)?;
    println!("\nrandom scorer: {:.1}%", 100.0 * chance.accuracy);
    let mut ckpt = common::trained(&data, &common::small_config(Variant::Haqae, 400));
    let r = cloze_accuracy(&mut ckpt.model, &data.vocab, &instances)?;
    println!(
        "haqae: {}/{} = {:.1}%",
        r.correct,
        r.instances,
        100.0 * r.accuracy
    );
    Ok(())
}
