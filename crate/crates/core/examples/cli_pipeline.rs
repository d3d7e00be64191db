//! The command-line workflow run in-process: sample a corpus, split it,
//! train, then evaluate and probe.

fn run(args: &[&str]) -> i32 {
    println!("$ haqae {}", args.join(" "));
    let code = haqae::cli::run(std::iter::once("haqae").chain(args.iter().copied()));
    println!("exit {code}\n");
    code
}

fn main() {
    let dir = std::env::temp_dir().join("haqae-cli-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    std::env::set_current_dir(&dir).expect("temp dir is accessible");
    println!("working in {}\n", dir.display());

    let steps = [
        vec![
            "synth-corpus",
            "--n",
            "2000",
            "--seed",
            "3",
            "--out",
            "corpus.tsv",
        ],
        vec!["prepare-data", "--input", "corpus.tsv", "--out-dir", "data"],
        vec![
            "train",
            "--preset",
            "desk",
            "--variant",
            "haqae",
            "--train",
            "data/train.tsv",
            "--valid",
            "data/valid.tsv",
            "--set",
            "train.max_steps=300",
            "--set",
            "train.eval_interval=150",
            "--out",
            "model.ckpt",
            "--log",
            "metrics.jsonl",
        ],
        vec![
            "eval-ppl",
            "--model",
            "model.ckpt",
            "--corpus",
            "data/test.tsv",
        ],
        vec![
            "eval-ppl",
            "--model",
            "uniform",
            "--corpus",
            "data/test.tsv",
        ],
        vec![
            "eval-cloze",
            "--model",
            "model.ckpt",
            "--corpus",
            "data/test.tsv",
            "--sets",
            "50",
        ],
        vec![
            "generate",
            "--model",
            "model.ckpt",
            "--event",
            "reported,people,fire,null",
            "--event",
            "spread,fire,neighborhood,in",
        ],
        vec![
            "probe-latents",
            "--model",
            "model.ckpt",
            "--corpus",
            "data/test.tsv",
            "--n",
            "20",
        ],
    ];
    for args in &steps {
        if run(args) != 0 {
            std::process::exit(1);
        }
    }
}
