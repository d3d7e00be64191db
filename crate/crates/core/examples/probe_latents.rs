//! Override one latent code at a time and measure how much the greedy
//! regeneration changes.

mod common;

use haqae::config::Variant;
use haqae::eval::{latent_probe, probe_sweep, render_table, ProbeMode};

fn main() -> haqae::Result<()> {
    let data = common::synthetic(3000);
    let ckpt = common::trained(&data, &common::small_config(Variant::Haqae, 500));
    let (model, vocab) = (&ckpt.model, &ckpt.vocab);

    let seq = &data.valid[0];
    let r = latent_probe(model, vocab, seq, 0, 1, ProbeMode::Recompute)?;
    println!("codes {:?} -> {:?}", r.base_codes, r.probed_codes);
    for (a, b) in r.base.iter().zip(&r.regenerated) {
        println!("  {a:<28} | {b}");
    }
    println!("edit distance {}", r.edit_distance);

    for mode in [ProbeMode::Frozen, ProbeMode::Recompute] {
        let (_, summary) = probe_sweep(model, vocab, &data.valid[..40], mode, 9)?;
        let rows: Vec<Vec<String>> = summary
            .iter()
            .map(|s| {
                vec![
                    format!("z{}", s.latent),
                    s.probes.to_string(),
                    format!("{:.2}", s.mean_edit_distance),
                ]
            })
            .collect();
        println!("\n{mode:?}");
        print!(
            "{}",
            render_table(&["latent", "probes", "mean edit"], &rows)
        );
    }
    Ok(())
}
