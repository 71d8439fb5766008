//! Neural PLDA: a network initialized from GPLDA and trained on the soft
//! detection cost. Prints the per-epoch history as CSV.

use nplda::dataio::ResolvedTrials;
use nplda::gplda::{derive_score_matrices, fit_gplda_em, GpldaBackend, GpldaConfig};
use nplda::metrics::{min_dcf, CostParams, ScoreSet};
use nplda::nplda::{forward_batch, init_from_gplda};
use nplda::preprocess::PreprocessPipeline;
use nplda::synth::{generate, SynthSpec};
use nplda::trainer::{format_history, sample_trials, split_trials, train_nplda, TrainConfig};

fn main() -> nplda::Result<()> {
    let archive = generate(&SynthSpec::isotropic(16, 120, 8, 2.0, 6))?;
    let pipeline = PreprocessPipeline::fit(&archive, Some(12))?;
    let fit = fit_gplda_em(&pipeline.apply_archive(&archive)?, &GpldaConfig::default())?;
    let sm = derive_score_matrices(&fit.model)?;
    let init = init_from_gplda(&pipeline, &fit.model, &sm, &[99.0], 20.0)?;
    let gplda = GpldaBackend::new(pipeline, fit.model)?;

    let (train, valid) = split_trials(&sample_trials(&archive, 1000, 10, 1)?, 0.2, 2);
    let config = TrainConfig {
        batch_size: 1024,
        max_epochs: 10,
        ..TrainConfig::default()
    };
    let outcome = train_nplda(init, &train, &valid, &archive, &config)?;
    print!("{}", format_history(&outcome.history));

    let resolved = ResolvedTrials::resolve(&valid, &archive)?;
    let recs = archive.records();
    let pairs: Vec<_> = resolved
        .pairs
        .iter()
        .map(|&(e, t)| (&recs[e].vector, &recs[t].vector))
        .collect();
    let g: Vec<f64> = pairs
        .iter()
        .map(|(e, t)| gplda.score(e, t))
        .collect::<nplda::Result<_>>()?;
    let n = forward_batch(&outcome.params, &pairs)?;
    let cost = CostParams::default();
    let before = min_dcf(&ScoreSet::new(g, resolved.labels.clone())?, &cost)?.0;
    let after = min_dcf(&ScoreSet::new(n, resolved.labels)?, &cost)?.0;
    println!(
        "validation minDCF: gplda {before:.4}, nplda {after:.4} (best epoch {})",
        outcome.best_epoch
    );
    Ok(())
}
