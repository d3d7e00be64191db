//! Save a model with its optimizer state, read it back at the same and at
//! a wider precision, and confirm the forward pass is unchanged.

mod common;

use haqae::checkpoint::{stored_dtype, Checkpoint};
use haqae::config::Variant;
use haqae::model::build_variant;

fn main() -> haqae::Result<()> {
    let data = common::synthetic(300);
    let model = build_variant::<f32>(&common::small_config(Variant::Haqae, 1), data.vocab.len())?;
    let mut ckpt = Checkpoint::new(model, data.vocab.clone());
    ckpt.state.step = 42;

    let bytes = ckpt.to_bytes();
    println!(
        "{} bytes, parameters stored as {}",
        bytes.len(),
        stored_dtype(&bytes)?
    );

    let back = Checkpoint::<f32>::from_bytes(&bytes)?;
    let words = data.ids(&data.valid[..20]);
    let a = ckpt.model.evaluate(&words, 8)?;
    let b = back.model.evaluate(&words, 8)?;
    let same = a
        .scores
        .iter()
        .zip(&b.scores)
        .all(|(x, y)| x.word_nll.to_bits() == y.word_nll.to_bits());
    println!(
        "step {} restored, forward pass bitwise equal: {same}",
        back.state.step
    );

    let wide = Checkpoint::<f64>::from_bytes(&bytes)?;
    let c = wide.model.evaluate(&words, 8)?;
    println!(
        "f64 reload: word NLL {:.6} vs {:.6}",
        c.word_nll(),
        a.word_nll()
    );

    let mut broken = bytes.clone();
    broken[9] = 7;
    match Checkpoint::<f32>::from_bytes(&broken) {
        Err(e) => println!("tampered header rejected: {e}"),
        Ok(_) => println!("tampered header accepted"),
    }
    Ok(())
}
