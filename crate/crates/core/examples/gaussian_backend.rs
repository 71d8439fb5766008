//! Two-class Gaussian back-end over concatenated trial embeddings.

use nplda::baselines::{fit_gaussian_backend, GaussianBackend};
use nplda::dataio::ResolvedTrials;
use nplda::metrics::{CostParams, MetricReport, ScoreSet};
use nplda::preprocess::PreprocessPipeline;
use nplda::synth::{generate, SynthSpec};
use nplda::trainer::{sample_trials, split_trials};

fn main() -> nplda::Result<()> {
    let archive = generate(&SynthSpec::isotropic(10, 80, 6, 1.0, 3))?;
    let pipeline = PreprocessPipeline::fit(&archive, Some(6))?;
    let processed = pipeline.apply_archive(&archive)?;
    let (train, test) = split_trials(&sample_trials(&archive, 600, 10, 1)?, 0.3, 2);

    let model = fit_gaussian_backend(&train, &processed)?;
    println!(
        "target mean norm {:.3}, nontarget mean norm {:.3}",
        model.mu_t.norm(),
        model.mu_nt.norm()
    );
    let backend = GaussianBackend::new(pipeline, model)?;

    let resolved = ResolvedTrials::resolve(&test, &archive)?;
    let recs = archive.records();
    let scores = resolved
        .pairs
        .iter()
        .map(|&(e, t)| backend.score(&recs[e].vector, &recs[t].vector))
        .collect::<nplda::Result<Vec<_>>>()?;
    print!(
        "{}",
        MetricReport::compute(
            &ScoreSet::new(scores, resolved.labels)?,
            &CostParams::default()
        )?
    );
    Ok(())
}
