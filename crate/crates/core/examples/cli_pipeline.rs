//! The full command-line pipeline driven in-process:
//! gen-synth, sample-trials, train-backend, score, evaluate.

use clap::Parser;
use nplda::cli::{run, Cli};

fn step(args: &[&str]) -> nplda::Result<()> {
    println!("$ nplda {}", args.join(" "));
    run(Cli::parse_from(
        std::iter::once("nplda").chain(args.iter().copied()),
    ))
}

fn main() -> nplda::Result<()> {
    let dir = std::env::temp_dir().join("nplda-cli-example");
    std::fs::create_dir_all(&dir).map_err(|e| nplda::Error::Config(e.to_string()))?;
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(
        p("spec.txt"),
        "dim = 12\nspeakers = 60\nsegments_per_speaker = 6\nsigma = 0.6\n",
    )
    .map_err(|e| nplda::Error::Config(e.to_string()))?;

    step(&[
        "gen-synth",
        "--spec",
        &p("spec.txt"),
        "--out",
        &p("train.emb"),
    ])?;
    step(&[
        "sample-trials",
        "--archive",
        &p("train.emb"),
        "--out",
        &p("trials.txt"),
        "--targets",
        "300",
    ])?;
    for backend in ["gplda", "nplda"] {
        let model = p(&format!("{backend}.mdl"));
        let scores = p(&format!("{backend}.scores"));
        step(&[
            "train-backend",
            backend,
            "--archive",
            &p("train.emb"),
            "--trials",
            &p("trials.txt"),
            "--out",
            &model,
            "--lda-dim",
            "8",
            "--epochs",
            "5",
            "--batch-size",
            "1024",
        ])?;
        step(&[
            "score",
            "--model",
            &model,
            "--archive",
            &p("train.emb"),
            "--trials",
            &p("trials.txt"),
            "--out",
            &scores,
        ])?;
        step(&["evaluate", "--scores", &scores])?;
    }
    Ok(())
}
