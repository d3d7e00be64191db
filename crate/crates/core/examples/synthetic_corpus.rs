//! Sample labeled scripts from the built-in grammar, render them as flat
//! token streams and build a vocabulary.

use haqae::corpus::{
    build_vocabulary, default_grammar, generate_synthetic_corpus, tokenize_events,
};

fn main() -> haqae::Result<()> {
    let grammar = default_grammar();
    println!(
        "{} topics, noise rate {}",
        grammar.topics.len(),
        grammar.noise_rate
    );

    let labeled = generate_synthetic_corpus(&grammar, 500, 7)?;
    for item in labeled.iter().take(3) {
        let topic = &grammar.topics[item.label.topic];
        println!(
            "\n{} [{} / {}] noise at {:?}",
            item.sequence.source_id,
            topic.name,
            topic.tracks[item.label.track].name,
            item.label.noise_positions
        );
        println!("  {}", tokenize_events(&item.sequence)?.join(" "));
    }

    let corpus: Vec<_> = labeled.into_iter().map(|l| l.sequence).collect();
    let vocab = build_vocabulary(&corpus, 5_000)?;
    let ids = vocab.encode_sequence(&corpus[0])?;
    println!(
        "\nvocabulary of {} types; first sequence as ids: {ids:?}",
        vocab.len()
    );
    Ok(())
}
