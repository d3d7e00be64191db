//! Train a small HAQAE on synthetic scripts, keep the best checkpoint and
//! the metric log.

mod common;

use haqae::checkpoint::Checkpoint;
use haqae::config::Variant;
use haqae::model::build_variant;
use haqae::train::{train, Split};

fn main() -> haqae::Result<()> {
    let data = common::synthetic(3000);
    let mut config = common::small_config(Variant::Haqae, 600);
    config.eval_interval = 200;
    let model = build_variant::<f32>(&config, data.vocab.len())?;
    println!("{} parameters", model.params.numel());
    for (group, n) in model.census() {
        println!("  {group:<10} {n}");
    }

    let start = Checkpoint::new(model, data.vocab.clone());
    let mut log = Vec::new();
    let outcome = train(start, &data.ids(&data.train), &data.ids(&data.valid), |r| {
        if r.split == Split::Valid {
            println!("{r}");
        }
        log.push(r.to_json_line());
    })?;
    if let Some(e) = &outcome.stopped {
        println!("stopped early: {e}");
    }

    let dir = std::env::temp_dir().join("haqae-example");
    std::fs::create_dir_all(&dir)?;
    outcome.best.save(dir.join("best.ckpt"))?;
    std::fs::write(dir.join("metrics.jsonl"), log.join("\n") + "\n")?;
    println!(
        "best valid NLL {:.4} after {} steps; wrote {}",
        outcome.best.state.best_valid_nll.unwrap_or(f64::NAN),
        outcome.last.state.step,
        dir.display()
    );
    Ok(())
}
