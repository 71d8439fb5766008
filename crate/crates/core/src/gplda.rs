//! Generative Gaussian PLDA: `eta = mu + Phi * omega + eps`, with
//! `omega ~ N(0, I)` and `eps ~ N(0, Sigma)`. Trained by EM and scored with
//! the quadratic log-likelihood-ratio form
//! `s = e'Qe + t'Qt + e'Pt`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::dataio::{ByteReader, ByteWriter, EmbeddingArchive, Persist};
use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, sorted_symmetric_eigen, spd_inverse, spd_logdet, symmetrize};
use crate::preprocess::PreprocessPipeline;

/// Residual covariance eigenvalues are floored at this fraction of the
/// largest eigenvalue after every M-step.
pub const SIGMA_EIGEN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GPLDAModel {
    /// `k x r` speaker subspace.
    pub phi: DMatrix<f64>,
    /// `k x k` residual covariance.
    pub sigma: DMatrix<f64>,
    pub mu: DVector<f64>,
}

impl GPLDAModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.phi.ncols()
    }

    /// `Phi Phi' + Sigma`.
    pub fn total_covariance(&self) -> DMatrix<f64> {
        symmetrize(&(&self.phi * self.phi.transpose() + &self.sigma))
    }

    /// `Phi Phi'`.
    pub fn across_class_covariance(&self) -> DMatrix<f64> {
        symmetrize(&(&self.phi * self.phi.transpose()))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        if self.phi.nrows() != k || self.sigma.shape() != (k, k) {
            return Err(Error::Dimension {
                expected: k,
                got: self.sigma.nrows(),
            });
        }
        if max_asymmetry(&self.sigma) > 1e-10 {
            return Err(Error::InvalidArgument("sigma is not symmetric".into()));
        }
        spd_logdet(&self.sigma, "sigma").map(|_| ())
    }
}

/// Score matrices of the quadratic LLR form.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrices {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// `Q = T^-1 - (T - A T^-1 A)^-1`, `P = T^-1 A (T - A T^-1 A)^-1` with
/// `T = Phi Phi' + Sigma` and `A = Phi Phi'`; both symmetrized.
pub fn derive_score_matrices(model: &GPLDAModel) -> Result<ScoreMatrices> {
    model.validate()?;
    let tot = model.total_covariance();
    let ac = model.across_class_covariance();
    let tot_inv = spd_inverse(&tot, "total covariance")?;
    let schur = symmetrize(&(&tot - &ac * &tot_inv * &ac));
    let schur_inv = spd_inverse(&schur, "T - A T^-1 A")?;
    let q = symmetrize(&(&tot_inv - &schur_inv));
    let p = symmetrize(&(&tot_inv * &ac * &schur_inv));
    Ok(ScoreMatrices { p, q })
}

/// `e'Qe + t'Qt + e'Pt`.
pub fn gplda_score(sm: &ScoreMatrices, eta_e: &DVector<f64>, eta_t: &DVector<f64>) -> Result<f64> {
    let k = sm.q.nrows();
    for v in [eta_e, eta_t] {
        if v.len() != k {
            return Err(Error::Dimension {
                expected: k,
                got: v.len(),
            });
        }
    }
    Ok(sm.q.dot(&(eta_e * eta_e.transpose()))
        + sm.q.dot(&(eta_t * eta_t.transpose()))
        + eta_e.dot(&(&sm.p * eta_t)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpldaConfig {
    /// Speaker subspace rank; `None` means full rank.
    pub rank: Option<usize>,
    pub iterations: usize,
    /// Replace every speaker's records by their mean before training.
    pub average_per_speaker: bool,
    /// Warn when more than this fraction of residual eigenvalues is floored.
    pub floor_warning_fraction: f64,
}

impl Default for GpldaConfig {
    fn default() -> Self {
        Self {
            rank: None,
            iterations: 10,
            average_per_speaker: false,
            floor_warning_fraction: 0.5,
        }
    }
}

/// Sufficient statistics of a speaker-labeled data set, centered on `mean`.
#[derive(Debug, Clone)]
pub struct SpeakerStats {
    pub mean: DVector<f64>,
    /// Per speaker: record count and sum of centered vectors.
    pub speakers: Vec<(usize, DVector<f64>)>,
    /// Sum of outer products of centered vectors.
    pub scatter: DMatrix<f64>,
    pub n_records: usize,
}

impl SpeakerStats {
    pub fn from_archive(archive: &EmbeddingArchive, average_per_speaker: bool) -> Result<Self> {
        let groups = archive.speaker_groups();
        if groups.len() < 2 {
            return Err(Error::Insufficient(format!(
                "PLDA training needs at least 2 speakers, found {}",
                groups.len()
            )));
        }
        let recs = archive.records();
        let vectors: Vec<Vec<DVector<f64>>> = groups
            .iter()
            .map(|(_, idx)| {
                let vs: Vec<DVector<f64>> = idx.iter().map(|&i| recs[i].vector.clone()).collect();
                if average_per_speaker {
                    let m = vs
                        .iter()
                        .fold(DVector::zeros(archive.dimension()), |a, v| a + v);
                    vec![m / vs.len() as f64]
                } else {
                    vs
                }
            })
            .collect();
        Ok(Self::from_groups(&vectors))
    }

    pub fn from_groups(groups: &[Vec<DVector<f64>>]) -> Self {
        let k = groups[0][0].len();
        let n_records: usize = groups.iter().map(Vec::len).sum();
        let mean = groups
            .iter()
            .flatten()
            .fold(DVector::zeros(k), |a, v| a + v)
            / n_records as f64;
        let mut scatter = DMatrix::zeros(k, k);
        let mut speakers = Vec::with_capacity(groups.len());
        for g in groups {
            let mut sum = DVector::zeros(k);
            for v in g {
                let c = v - &mean;
                scatter.ger(1.0, &c, &c, 1.0);
                sum += c;
            }
            speakers.push((g.len(), sum));
        }
        Self {
            mean,
            speakers,
            scatter,
            n_records,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Outcome of EM training.
#[derive(Debug, Clone)]
pub struct GpldaFit {
    pub model: GPLDAModel,
    /// Marginal log-likelihood before the first and after every iteration.
    pub log_likelihoods: Vec<f64>,
    pub warnings: Vec<String>,
}

struct Posterior {
    inv_by_count: HashMap<usize, (DMatrix<f64>, f64)>,
    sigma_inv: DMatrix<f64>,
    proj: DMatrix<f64>,
    a: DMatrix<f64>,
}

impl Posterior {
    fn new(model: &GPLDAModel) -> Result<Self> {
        let sigma_inv = spd_inverse(&model.sigma, "sigma")?;
        let proj = model.phi.transpose() * &sigma_inv;
        let a = symmetrize(&(&proj * &model.phi));
        Ok(Self {
            inv_by_count: HashMap::new(),
            sigma_inv,
            proj,
            a,
        })
    }

    /// `(L^-1, log|L|)` for `L = I + n Phi' Sigma^-1 Phi`.
    fn precision_inverse(&mut self, n: usize) -> Result<&(DMatrix<f64>, f64)> {
        if !self.inv_by_count.contains_key(&n) {
            let r = self.a.nrows();
            let l = DMatrix::identity(r, r) + &self.a * n as f64;
            let entry = (
                spd_inverse(&l, "posterior precision")?,
                spd_logdet(&l, "posterior precision")?,
            );
            self.inv_by_count.insert(n, entry);
        }
        Ok(&self.inv_by_count[&n])
    }
}

/// Marginal log-likelihood of the data under `model` (mean taken from the
/// statistics).
pub fn log_likelihood(model: &GPLDAModel, stats: &SpeakerStats) -> Result<f64> {
    let mut post = Posterior::new(model)?;
    let k = stats.dim() as f64;
    let n = stats.n_records as f64;
    let mut ll = n * k * (2.0 * std::f64::consts::PI).ln()
        + n * spd_logdet(&model.sigma, "sigma")?
        + post.sigma_inv.dot(&stats.scatter);
    for (count, sum) in &stats.speakers {
        let b = &post.proj * sum;
        let (l_inv, logdet) = post.precision_inverse(*count)?;
        ll += logdet - b.dot(&(l_inv * &b));
    }
    Ok(-0.5 * ll)
}

/// One EM iteration. Returns the new model and the number of floored
/// residual eigenvalues.
pub fn em_iteration(model: &GPLDAModel, stats: &SpeakerStats) -> Result<(GPLDAModel, usize)> {
    let (k, r) = (stats.dim(), model.rank());
    let mut post = Posterior::new(model)?;
    let mut cross = DMatrix::zeros(k, r);
    let mut second = DMatrix::zeros(r, r);
    for (count, sum) in &stats.speakers {
        let b = &post.proj * sum;
        let (l_inv, _) = post.precision_inverse(*count)?;
        let omega = l_inv * b;
        cross.ger(1.0, sum, &omega, 1.0);
        let mut moment = l_inv.clone();
        moment.ger(1.0, &omega, &omega, 1.0);
        second += moment * *count as f64;
    }
    let second_inv = spd_inverse(&symmetrize(&second), "latent second moment")?;
    let phi = &cross * second_inv;
    let sigma = (&stats.scatter - &phi * cross.transpose()) / stats.n_records as f64;
    let (sigma, floored) = floor_eigenvalues(&symmetrize(&sigma));
    Ok((
        GPLDAModel {
            phi,
            sigma,
            mu: stats.mean.clone(),
        },
        floored,
    ))
}

fn floor_eigenvalues(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (mut values, vectors) = sorted_symmetric_eigen(m);
    let floor = SIGMA_EIGEN_FLOOR * values[0].max(f64::MIN_POSITIVE);
    let mut floored = 0;
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
            floored += 1;
        }
    }
    if floored == 0 {
        return (m.clone(), 0);
    }
    let rebuilt = &vectors * DMatrix::from_diagonal(&values) * vectors.transpose();
    (symmetrize(&rebuilt), floored)
}

/// Starting point: residual from the within-speaker scatter, subspace from
/// the leading eigenvectors of the between-speaker scatter.
pub fn initial_model(stats: &SpeakerStats, rank: usize) -> GPLDAModel {
    let k = stats.dim();
    let n = stats.n_records as f64;
    let mut between = DMatrix::zeros(k, k);
    let mut between_weighted = DMatrix::zeros(k, k);
    for (count, sum) in &stats.speakers {
        let m = sum / *count as f64;
        between.ger(1.0, &m, &m, 1.0);
        between_weighted.ger(*count as f64, &m, &m, 1.0);
    }
    between /= stats.speakers.len() as f64;
    let total = &stats.scatter / n;
    let within = (&stats.scatter - between_weighted) / n;
    let (within, between) = if within.trace() <= 1e-9 * total.trace() {
        (&total * 0.5, &total * 0.5)
    } else {
        (within, between)
    };
    let (sigma, _) = floor_eigenvalues(&symmetrize(&within));
    let (values, vectors) = sorted_symmetric_eigen(&between);
    let mut phi = DMatrix::zeros(k, rank);
    for c in 0..rank {
        let scale = values[c].max(1e-6 * values[0].abs().max(1e-12)).sqrt();
        phi.set_column(c, &(vectors.column(c) * scale));
    }
    GPLDAModel {
        phi,
        sigma,
        mu: stats.mean.clone(),
    }
}

/// Trains a PLDA model on pre-processed, speaker-labeled embeddings.
pub fn fit_gplda_em(archive: &EmbeddingArchive, config: &GpldaConfig) -> Result<GpldaFit> {
    let stats = SpeakerStats::from_archive(archive, config.average_per_speaker)?;
    let k = stats.dim();
    let rank = config.rank.unwrap_or(k);
    if rank == 0 || rank > k {
        return Err(Error::InvalidArgument(format!(
            "PLDA rank {rank} must be in 1..={k}"
        )));
    }
    fit_gplda_from(initial_model(&stats, rank), &stats, config)
}

/// EM from an explicit starting model.
pub fn fit_gplda_from(
    init: GPLDAModel,
    stats: &SpeakerStats,
    config: &GpldaConfig,
) -> Result<GpldaFit> {
    let mut model = init;
    let mut log_likelihoods = vec![log_likelihood(&model, stats)?];
    let mut warnings = Vec::new();
    for it in 0..config.iterations {
        let (next, floored) = em_iteration(&model, stats)?;
        if floored as f64 > config.floor_warning_fraction * stats.dim() as f64 {
            warnings.push(format!(
                "iteration {}: {floored} of {} residual eigenvalues floored",
                it + 1,
                stats.dim()
            ));
        }
        model = next;
        log_likelihoods.push(log_likelihood(&model, stats)?);
    }
    Ok(GpldaFit {
        model,
        log_likelihoods,
        warnings,
    })
}

/// Pipeline plus PLDA model: scores raw embeddings.
#[derive(Debug, Clone)]
pub struct GpldaBackend {
    pub pipeline: PreprocessPipeline,
    pub model: GPLDAModel,
    pub matrices: ScoreMatrices,
}

impl GpldaBackend {
    pub fn new(pipeline: PreprocessPipeline, model: GPLDAModel) -> Result<Self> {
        if pipeline.output_dim() != model.dim() {
            return Err(Error::Dimension {
                expected: pipeline.output_dim(),
                got: model.dim(),
            });
        }
        let matrices = derive_score_matrices(&model)?;
        Ok(Self {
            pipeline,
            model,
            matrices,
        })
    }

    /// Pre-processed embedding with the model mean removed.
    pub fn embed(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.pipeline.apply(x)? - &self.model.mu)
    }

    pub fn score(&self, x_e: &DVector<f64>, x_t: &DVector<f64>) -> Result<f64> {
        gplda_score(&self.matrices, &self.embed(x_e)?, &self.embed(x_t)?)
    }
}

impl Persist for GPLDAModel {
    const KIND: u8 = 2;
    const NAME: &'static str = "PLDA";

    fn write_payload(&self, w: &mut ByteWriter) {
        w.matrix(&self.phi);
        w.matrix(&self.sigma);
        w.vector(&self.mu);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        let model = Self {
            phi: r.matrix()?,
            sigma: r.matrix()?,
            mu: r.vector()?,
        };
        model.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(model)
    }
}

impl Persist for GpldaBackend {
    const KIND: u8 = 3;
    const NAME: &'static str = "PLDA backend";

    fn write_payload(&self, w: &mut ByteWriter) {
        self.pipeline.write_payload(w);
        self.model.write_payload(w);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        let pipeline = PreprocessPipeline::read_payload(r)?;
        let model = GPLDAModel::read_payload(r)?;
        Self::new(pipeline, model).map_err(|e| Error::Format(e.to_string()))
    }
}
