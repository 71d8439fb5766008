//! Fit a two-covariance PLDA model with EM and score a few trials.

use nplda::gplda::{fit_gplda_em, GpldaBackend, GpldaConfig};
use nplda::preprocess::PreprocessPipeline;
use nplda::synth::{generate, SynthSpec};
use nplda::trainer::sample_trials;

fn main() -> nplda::Result<()> {
    let archive = generate(&SynthSpec::isotropic(20, 100, 8, 0.8, 9))?;
    let pipeline = PreprocessPipeline::fit(&archive, Some(12))?;
    let processed = pipeline.apply_archive(&archive)?;

    let config = GpldaConfig {
        rank: Some(8),
        iterations: 15,
        ..GpldaConfig::default()
    };
    let fit = fit_gplda_em(&processed, &config)?;
    for (i, ll) in fit.log_likelihoods.iter().enumerate() {
        println!("iteration {i:2}: log-likelihood {ll:.4}");
    }
    for w in &fit.warnings {
        println!("warning: {w}");
    }

    let backend = GpldaBackend::new(pipeline, fit.model)?;
    for t in sample_trials(&archive, 3, 1, 4)? {
        let s = backend.score(
            &archive.get(&t.enroll_id).unwrap().vector,
            &archive.get(&t.test_id).unwrap().vector,
        )?;
        println!(
            "{} {} {:>9} score {s:.3}",
            t.enroll_id,
            t.test_id,
            t.label.to_string()
        );
    }
    Ok(())
}
