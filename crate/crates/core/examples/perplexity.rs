//! Held-out perplexity of a uniform baseline, an RNN language model and
//! HAQAE trained for the same number of steps.

mod common;

use haqae::config::Variant;
use haqae::eval::{perplexity_eval, render_table, UniformScorer};

fn main() -> haqae::Result<()> {
    let data = common::synthetic(3000);
    let valid = data.ids(&data.valid);

    let uniform = perplexity_eval(
        &mut UniformScorer {
            vocab_size: data.vocab.len(),
        },
        &valid,
    )?;
    let mut rows = vec![vec![
        "uniform".to_string(),
        format!("{:.4}", uniform.nll),
        format!("{:.2}", uniform.ppl),
    ]];
    for variant in [Variant::Rnnlm, Variant::Haqae] {
        println!("training {}", variant.as_str());
        let mut ckpt = common::trained(&data, &common::small_config(variant, 400));
        let r = perplexity_eval(&mut ckpt.model, &valid)?;
        rows.push(vec![
            variant.as_str().to_string(),
            format!("{:.4}", r.nll),
            format!("{:.2}", r.ppl),
        ]);
    }
    println!(
        "\n{} words in {} sequences; EOS is predicted but not counted",
        uniform.words, uniform.sequences
    );
    print!("{}", render_table(&["model", "nll", "ppl"], &rows));
    Ok(())
}
