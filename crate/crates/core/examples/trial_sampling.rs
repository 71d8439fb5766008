//! Draw target and gender-matched nontarget trials from an archive.

use std::collections::HashSet;

use nplda::dataio::TrialLabel;
use nplda::synth::{generate, SynthSpec};
use nplda::trainer::{sample_trials, split_trials};

fn main() -> nplda::Result<()> {
    let archive = generate(&SynthSpec::isotropic(6, 40, 5, 0.5, 1))?;
    let trials = sample_trials(&archive, 100, 10, 42)?;
    let targets = trials
        .iter()
        .filter(|t| t.label == TrialLabel::Target)
        .count();
    println!(
        "{} trials, {targets} target, {} nontarget",
        trials.len(),
        trials.len() - targets
    );

    let speakers: HashSet<_> = trials
        .iter()
        .filter(|t| t.label == TrialLabel::Target)
        .filter_map(|t| archive.get(&t.enroll_id)?.speaker_id.clone())
        .collect();
    println!("targets cover {} of 40 speakers", speakers.len());

    let (train, valid) = split_trials(&trials, 0.2, 7);
    println!("train/valid split: {} / {}", train.len(), valid.len());
    for t in trials.iter().take(4) {
        println!("  {} {} {}", t.enroll_id, t.test_id, t.label);
    }

    match sample_trials(&archive, 10_000, 10, 42) {
        Err(e) => println!("asking for too many: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
