//! Discriminative PLDA: logistic regression on the quadratic trial
//! expansion, started from the generative PLDA weights.

use nplda::baselines::{train_dplda, DPLDAModel, DpldaBackend, DpldaConfig};
use nplda::gplda::{derive_score_matrices, fit_gplda_em, GpldaConfig};
use nplda::preprocess::PreprocessPipeline;
use nplda::synth::{generate, SynthSpec};
use nplda::trainer::sample_trials;

fn main() -> nplda::Result<()> {
    let archive = generate(&SynthSpec::isotropic(12, 80, 6, 1.2, 4))?;
    let pipeline = PreprocessPipeline::fit(&archive, Some(8))?;
    let processed = pipeline.apply_archive(&archive)?;
    let fit = fit_gplda_em(&processed, &GpldaConfig::default())?;
    let init = DPLDAModel::from_score_matrices(&derive_score_matrices(&fit.model)?, &fit.model.mu);
    println!("{} weights for k = {}", init.w.len(), pipeline.output_dim());

    let trials = sample_trials(&archive, 500, 10, 8)?;
    let config = DpldaConfig {
        epochs: 8,
        batch_size: 512,
        ..DpldaConfig::default()
    };
    let trained = train_dplda(&trials, &processed, &init, &config)?;
    for (epoch, loss) in trained.losses.iter().enumerate() {
        println!("epoch {epoch}: objective {loss:.5}");
    }
    println!("|w - w0| = {:.4}", (&trained.model.w - &init.w).norm());
    let _backend = DpldaBackend::new(pipeline, trained.model)?;
    Ok(())
}
