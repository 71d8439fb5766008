//! Embedding pre-processing: centering, LDA projection and length
//! normalization.

use nalgebra::{DMatrix, DVector};

use crate::dataio::{ByteReader, ByteWriter, EmbeddingArchive, Persist};
use crate::error::{Error, Result};
use crate::linalg::{sorted_symmetric_eigen, symmetrize};

/// Relative ridge added to the within-class scatter before the eigensolve.
pub const WITHIN_SCATTER_RIDGE: f64 = 1e-6;
/// Upper bound on the default LDA output dimension.
pub const DEFAULT_LDA_DIM: usize = 170;
const ZERO_NORM: f64 = 1e-12;

/// `length_normalize(lda_matrix * (v - mean) - post_mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessPipeline {
    pub mean: DVector<f64>,
    /// `k x d`, one projection direction per row.
    pub lda_matrix: DMatrix<f64>,
    pub post_mean: DVector<f64>,
}

/// Result of [`fit_lda`].
#[derive(Debug, Clone)]
pub struct LdaFit {
    /// `k x d`, unit-norm rows in non-increasing eigenvalue order.
    pub matrix: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
}

/// Arithmetic mean of every record.
pub fn fit_centering(archive: &EmbeddingArchive) -> Result<DVector<f64>> {
    if archive.is_empty() {
        return Err(Error::Empty("archive has no records".into()));
    }
    let mut sum = DVector::zeros(archive.dimension());
    for rec in archive.records() {
        sum += &rec.vector;
    }
    Ok(sum / archive.len() as f64)
}

/// Between- and within-speaker scatter matrices, both normalized by the
/// number of labeled records. Records without a speaker id are ignored.
pub fn scatter_matrices(archive: &EmbeddingArchive) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = archive.dimension();
    let groups = archive.speaker_groups();
    let n: usize = groups.iter().map(|(_, idx)| idx.len()).sum();
    if n == 0 {
        return Err(Error::Empty("no records carry a speaker id".into()));
    }
    let recs = archive.records();
    let mut global = DVector::zeros(d);
    for (_, idx) in &groups {
        for &i in idx {
            global += &recs[i].vector;
        }
    }
    global /= n as f64;

    let mut between = DMatrix::zeros(d, d);
    let mut within = DMatrix::zeros(d, d);
    for (_, idx) in &groups {
        let mut m = DVector::zeros(d);
        for &i in idx {
            m += &recs[i].vector;
        }
        m /= idx.len() as f64;
        let dm = &m - &global;
        between.ger(idx.len() as f64, &dm, &dm, 1.0);
        for &i in idx {
            let dx = &recs[i].vector - &m;
            within.ger(1.0, &dx, &dx, 1.0);
        }
    }
    Ok((between / n as f64, within / n as f64))
}

/// Adds `WITHIN_SCATTER_RIDGE * trace / d` to the diagonal.
pub fn regularize_within(within: &DMatrix<f64>) -> DMatrix<f64> {
    let d = within.nrows();
    let ridge = WITHIN_SCATTER_RIDGE * within.trace() / d as f64;
    let mut out = symmetrize(within);
    for i in 0..d {
        out[(i, i)] += ridge;
    }
    out
}

/// Fits a `target_dim x d` LDA projection.
///
/// Rows solve `S_b r = lambda S_w r` with the regularized `S_w`, for the
/// `target_dim` largest eigenvalues. Each row is scaled to unit length and
/// signed so its first nonzero component is positive.
pub fn fit_lda(archive: &EmbeddingArchive, target_dim: usize) -> Result<LdaFit> {
    let d = archive.dimension();
    if target_dim == 0 || target_dim > d {
        return Err(Error::InvalidArgument(format!(
            "LDA dimension {target_dim} must be in 1..={d}"
        )));
    }
    let n_speakers = archive.speaker_groups().len();
    if n_speakers < target_dim + 1 {
        return Err(Error::Insufficient(format!(
            "LDA to {target_dim} dimensions needs at least {} speakers, found {n_speakers}",
            target_dim + 1
        )));
    }
    let (between, within) = scatter_matrices(archive)?;
    let within = regularize_within(&within);
    let chol = within
        .cholesky()
        .ok_or_else(|| Error::Singular("within-class scatter after regularization".into()))?;
    let l = chol.l();
    // C = L^-1 S_b L^-T
    let left = l
        .solve_lower_triangular(&between)
        .ok_or_else(|| Error::Singular("within-class Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Singular("within-class Cholesky factor".into()))?;
    let (values, vectors) = sorted_symmetric_eigen(&c);
    let lt = l.transpose();

    let mut matrix = DMatrix::zeros(target_dim, d);
    for row in 0..target_dim {
        let mut r = lt
            .solve_upper_triangular(&vectors.column(row).into_owned())
            .ok_or_else(|| Error::Singular("within-class Cholesky factor".into()))?;
        r /= r.norm();
        let scale = r.amax();
        if let Some(first) = r.iter().find(|x| x.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                r.neg_mut();
            }
        }
        matrix.row_mut(row).copy_from(&r.transpose());
    }
    Ok(LdaFit {
        matrix,
        eigenvalues: values.rows(0, target_dim).into_owned(),
    })
}

/// `v / ||v||`.
pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if !norm.is_finite() || norm < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v / norm)
}

/// `min(170, d, speakers - 1)`, never below 1.
pub fn default_lda_dim(archive: &EmbeddingArchive) -> usize {
    let speakers = archive.speaker_groups().len();
    DEFAULT_LDA_DIM
        .min(archive.dimension())
        .min(speakers.saturating_sub(1))
        .max(1)
}

impl PreprocessPipeline {
    /// Mean 0, identity projection, no post-centering.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            lda_matrix: DMatrix::identity(dim, dim),
            post_mean: DVector::zeros(dim),
        }
    }

    /// Centers, fits LDA to `target_dim` (default [`default_lda_dim`]) and
    /// estimates the post-projection mean on the same records.
    pub fn fit(archive: &EmbeddingArchive, target_dim: Option<usize>) -> Result<Self> {
        let mean = fit_centering(archive)?;
        let centered = archive.map_vectors(|v| Ok(v - &mean))?;
        let k = target_dim.unwrap_or_else(|| default_lda_dim(archive));
        let lda = fit_lda(&centered, k)?;
        let mut post_mean = DVector::zeros(k);
        for rec in centered.records() {
            post_mean += &lda.matrix * &rec.vector;
        }
        post_mean /= centered.len() as f64;
        Ok(Self {
            mean,
            lda_matrix: lda.matrix,
            post_mean,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.lda_matrix.nrows()
    }

    /// Projection before length normalization.
    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: v.len(),
            });
        }
        Ok(&self.lda_matrix * (v - &self.mean) - &self.post_mean)
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        length_normalize(&self.project(v)?)
    }

    pub fn apply_batch(&self, vs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        vs.iter().map(|v| self.apply(v)).collect()
    }

    /// Applies the pipeline to every record, keeping metadata.
    pub fn apply_archive(&self, archive: &EmbeddingArchive) -> Result<EmbeddingArchive> {
        if archive.dimension() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: archive.dimension(),
            });
        }
        archive.map_vectors(|v| self.apply(v))
    }
}

impl Persist for PreprocessPipeline {
    const KIND: u8 = 1;
    const NAME: &'static str = "preprocess pipeline";

    fn write_payload(&self, w: &mut ByteWriter) {
        w.vector(&self.mean);
        w.matrix(&self.lda_matrix);
        w.vector(&self.post_mean);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        let mean = r.vector()?;
        let lda_matrix = r.matrix()?;
        let post_mean = r.vector()?;
        if lda_matrix.ncols() != mean.len() || lda_matrix.nrows() != post_mean.len() {
            return Err(Error::Format("inconsistent pipeline dimensions".into()));
        }
        Ok(Self {
            mean,
            lda_matrix,
            post_mean,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Embedding, Gender};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn archive(rows: &[(&str, Vec<f64>)]) -> EmbeddingArchive {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (spk, v))| Embedding {
                segment_id: format!("seg{i}"),
                speaker_id: Some(spk.to_string()),
                gender: Gender::Unknown,
                vector: DVector::from_row_slice(v),
            })
            .collect();
        EmbeddingArchive::new(rows[0].1.len(), records).unwrap()
    }

    fn random_archive(seed: u64, speakers: usize, per: usize, d: usize) -> EmbeddingArchive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let names: Vec<String> = (0..speakers).map(|s| format!("spk{s}")).collect();
        for name in &names {
            let center: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            for _ in 0..per {
                let v = center
                    .iter()
                    .map(|c| c + rng.random_range(-1.0..1.0))
                    .collect();
                rows.push((name.as_str(), v));
            }
        }
        archive(&rows)
    }

    #[test]
    fn centering_examples() {
        let a = archive(&[("a", vec![0.0, 2.0]), ("b", vec![2.0, 0.0])]);
        assert_eq!(
            fit_centering(&a).unwrap(),
            DVector::from_row_slice(&[1.0, 1.0])
        );
        let single = archive(&[("a", vec![3.5, -1.0])]);
        assert_eq!(fit_centering(&single).unwrap(), single.records()[0].vector);
    }

    #[test]
    fn centering_matches_streaming_mean() {
        let a = random_archive(3, 50, 20, 5);
        let mean = fit_centering(&a).unwrap();
        let mut running = DVector::zeros(5);
        for (i, rec) in a.records().iter().enumerate() {
            running += (&rec.vector - &running) / (i + 1) as f64;
        }
        assert!((mean - running).amax() < 1e-12);
    }

    #[test]
    fn lda_two_clusters_picks_separating_axis() {
        let mut rows = Vec::new();
        let spread = [(-0.3, -0.3), (0.3, -0.3), (-0.3, 0.3), (0.3, 0.3)];
        for (name, cx) in [("a", -2.0), ("b", 2.0), ("c", 0.0)] {
            for (dx, dy) in spread {
                rows.push((name, vec![cx + dx, dy]));
            }
        }
        let fit = fit_lda(&archive(&rows), 1).unwrap();
        let r = fit.matrix.row(0);
        assert!((r[0] - 1.0).abs() < 1e-9 && r[1].abs() < 1e-9, "{r}");
    }

    #[test]
    fn lda_rows_solve_generalized_problem() {
        let a = random_archive(11, 3, 30, 4);
        let fit = fit_lda(&a, 2).unwrap();
        let (sb, sw) = scatter_matrices(&a).unwrap();
        let sw = regularize_within(&sw);
        for i in 0..2 {
            let r = fit.matrix.row(i).transpose();
            let resid = &sb * &r - fit.eigenvalues[i] * (&sw * &r);
            assert!(resid.amax() < 1e-8, "row {i} residual {}", resid.amax());
            assert!((r.norm() - 1.0).abs() < 1e-12);
        }
        assert!(fit.eigenvalues[0] >= fit.eigenvalues[1]);
    }

    #[test]
    fn lda_full_rank_preserves_scatter_ratio() {
        // with k = d the generalized eigenvalues are the invariants of
        // (S_b, S_w); projecting and refitting must reproduce them
        let a = random_archive(5, 8, 10, 3);
        let fit = fit_lda(&a, 3).unwrap();
        let projected = a.map_vectors(|v| Ok(&fit.matrix * v)).unwrap();
        let refit = fit_lda(&projected, 3).unwrap();
        let rel = (&refit.eigenvalues - &fit.eigenvalues).amax() / fit.eigenvalues[0];
        assert!(rel < 1e-5, "{rel}");
    }

    #[test]
    fn lda_translation_invariant_up_to_sign() {
        let a = random_archive(7, 6, 12, 4);
        let shift = DVector::from_row_slice(&[10.0, -5.0, 3.0, 1.0]);
        let b = a.map_vectors(|v| Ok(v + &shift)).unwrap();
        let fa = fit_lda(
            &a.map_vectors(|v| Ok(v - fit_centering(&a).unwrap()))
                .unwrap(),
            3,
        )
        .unwrap();
        let fb = fit_lda(
            &b.map_vectors(|v| Ok(v - fit_centering(&b).unwrap()))
                .unwrap(),
            3,
        )
        .unwrap();
        for i in 0..3 {
            let dot = fa.matrix.row(i).dot(&fb.matrix.row(i)).abs();
            assert!((dot - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn lda_errors() {
        let a = random_archive(1, 2, 5, 3);
        assert!(matches!(fit_lda(&a, 2), Err(Error::Insufficient(_))));
        assert!(matches!(fit_lda(&a, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn length_norm_examples() {
        let v = length_normalize(&DVector::from_row_slice(&[3.0, 4.0])).unwrap();
        assert!((&v - DVector::from_row_slice(&[0.6, 0.8])).amax() < 1e-15);
        assert!((length_normalize(&v).unwrap() - &v).amax() < 1e-15);
        let w = length_normalize(&(&v * 7.5)).unwrap();
        assert!((w - &v).amax() < 1e-15);
        assert!(matches!(
            length_normalize(&DVector::zeros(2)),
            Err(Error::ZeroVector)
        ));
        assert!(length_normalize(&DVector::from_row_slice(&[f64::NAN, 1.0])).is_err());
    }

    #[test]
    fn apply_examples() {
        let id = PreprocessPipeline::identity(2);
        let out = id.apply(&DVector::from_row_slice(&[3.0, 4.0])).unwrap();
        assert!((out - DVector::from_row_slice(&[0.6, 0.8])).amax() < 1e-15);

        let mut p = PreprocessPipeline::identity(2);
        p.mean = DVector::from_row_slice(&[1.0, 2.0]);
        p.post_mean = DVector::from_row_slice(&[0.5, -2.0]);
        let out = p.apply(&p.mean.clone()).unwrap();
        let expected = length_normalize(&-p.post_mean.clone()).unwrap();
        assert!((out - expected).amax() < 1e-15);
        assert!(matches!(
            p.apply(&DVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fitted_pipeline_centers_training_set() {
        let a = random_archive(21, 10, 8, 6);
        let p = PreprocessPipeline::fit(&a, None).unwrap();
        assert_eq!(p.output_dim(), 6);
        let mut mean = DVector::zeros(6);
        for rec in a.records() {
            mean += p.project(&rec.vector).unwrap();
        }
        assert!((mean / a.len() as f64).amax() < 1e-8);
        let batch: Vec<_> = a.records().iter().map(|r| r.vector.clone()).collect();
        let out = p.apply_batch(&batch).unwrap();
        for (v, o) in batch.iter().zip(&out) {
            assert_eq!(&p.apply(v).unwrap(), o);
            assert!((o.norm() - 1.0).abs() < 1e-12);
        }
    }
}
