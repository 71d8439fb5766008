//! Centering, LDA and length normalization fitted on speaker labels.

use nplda::preprocess::{fit_lda, scatter_matrices, PreprocessPipeline};
use nplda::synth::{generate, SynthSpec};

fn main() -> nplda::Result<()> {
    let archive = generate(&SynthSpec::isotropic(16, 60, 6, 1.0, 5))?;
    let (between, within) = scatter_matrices(&archive)?;
    println!(
        "trace S_b = {:.3}, trace S_w = {:.3}",
        between.trace(),
        within.trace()
    );

    let lda = fit_lda(&archive, 6)?;
    let ratios: Vec<String> = lda.eigenvalues.iter().map(|v| format!("{v:.2}")).collect();
    println!("leading discriminant ratios: {}", ratios.join(" "));

    let pipeline = PreprocessPipeline::fit(&archive, Some(6))?;
    let processed = pipeline.apply_archive(&archive)?;
    let max_dev = processed
        .records()
        .iter()
        .map(|r| (r.vector.norm() - 1.0).abs())
        .fold(0.0, f64::max);
    println!(
        "{} -> {} dims, max |norm - 1| after length normalization = {max_dev:.1e}",
        pipeline.input_dim(),
        pipeline.output_dim()
    );
    Ok(())
}
