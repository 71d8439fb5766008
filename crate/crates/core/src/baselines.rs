//! Comparison backends: the pairwise Gaussian backend and discriminative
//! PLDA over the quadratic trial expansion.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{ByteReader, ByteWriter, EmbeddingArchive, Persist, ResolvedTrials, Trial};
use crate::error::{Error, Result};
use crate::gplda::ScoreMatrices;
use crate::linalg::{spd_inverse, symmetrize};
use crate::metrics::bce_grad;
use crate::preprocess::PreprocessPipeline;
use crate::trainer::{stratified_batches, AdamState};

/// Ridge added to both pair covariances: relative to the mean variance, with this as an absolute floor.
pub const GB_RIDGE: f64 = 1e-4;

/// Gaussian models of stacked `[e; t]` pairs for each class.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBackendModel {
    pub mu_t: DVector<f64>,
    pub sigma_t: DMatrix<f64>,
    pub mu_nt: DVector<f64>,
    pub sigma_nt: DMatrix<f64>,
}

fn stack(e: &DVector<f64>, t: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(e.len() + t.len());
    v.rows_mut(0, e.len()).copy_from(e);
    v.rows_mut(e.len(), t.len()).copy_from(t);
    v
}

fn ridge(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let amount = (GB_RIDGE * cov.trace() / n as f64).max(GB_RIDGE);
    symmetrize(cov) + DMatrix::identity(n, n) * amount
}

/// Class-conditional sample means and (ridged) covariances of the stacked
/// trial vectors. `archive` holds pre-processed embeddings.
pub fn fit_gaussian_backend(
    trials: &[Trial],
    archive: &EmbeddingArchive,
) -> Result<GaussianBackendModel> {
    let resolved = ResolvedTrials::resolve(trials, archive)?;
    let dim = 2 * archive.dimension();
    let recs = archive.records();
    let mut moments = [
        (0usize, DVector::zeros(dim), DMatrix::zeros(dim, dim)),
        (0, DVector::zeros(dim), DMatrix::zeros(dim, dim)),
    ];
    for (&(e, t), &label) in resolved.pairs.iter().zip(&resolved.labels) {
        let eta = stack(&recs[e].vector, &recs[t].vector);
        let slot = &mut moments[label as usize];
        slot.0 += 1;
        slot.1 += &eta;
        slot.2.ger(1.0, &eta, &eta, 1.0);
    }
    let mut out = Vec::with_capacity(2);
    for (class, (n, sum, outer)) in moments.into_iter().enumerate() {
        if n == 0 {
            let name = if class == 1 { "target" } else { "nontarget" };
            return Err(Error::Insufficient(format!("no {name} trials")));
        }
        let mean = sum / n as f64;
        let cov = outer / n as f64 - &mean * mean.transpose();
        out.push((mean, ridge(&cov)));
    }
    let (mu_t, sigma_t) = out.pop().expect("target class");
    let (mu_nt, sigma_nt) = out.pop().expect("nontarget class");
    Ok(GaussianBackendModel {
        mu_t,
        sigma_t,
        mu_nt,
        sigma_nt,
    })
}

/// Gaussian backend with inverted covariances, ready for scoring.
#[derive(Debug, Clone)]
pub struct GaussianBackendScorer {
    mu_t: DVector<f64>,
    prec_t: DMatrix<f64>,
    mu_nt: DVector<f64>,
    prec_nt: DMatrix<f64>,
}

impl GaussianBackendModel {
    pub fn pair_dim(&self) -> usize {
        self.mu_t.len()
    }

    pub fn scorer(&self) -> Result<GaussianBackendScorer> {
        Ok(GaussianBackendScorer {
            mu_t: self.mu_t.clone(),
            prec_t: spd_inverse(&self.sigma_t, "target pair covariance")?,
            mu_nt: self.mu_nt.clone(),
            prec_nt: spd_inverse(&self.sigma_nt, "nontarget pair covariance")?,
        })
    }
}

impl GaussianBackendScorer {
    /// `(eta - mu_nt)' S_nt^-1 (eta - mu_nt) - (eta - mu_t)' S_t^-1 (eta - mu_t)`.
    /// Log-determinant terms are not included.
    pub fn llr(&self, eta_e: &DVector<f64>, eta_t: &DVector<f64>) -> Result<f64> {
        if eta_e.len() + eta_t.len() != self.mu_t.len() || eta_e.len() != eta_t.len() {
            return Err(Error::Dimension {
                expected: self.mu_t.len() / 2,
                got: eta_e.len(),
            });
        }
        let eta = stack(eta_e, eta_t);
        let dn = &eta - &self.mu_nt;
        let dt = &eta - &self.mu_t;
        Ok(dn.dot(&(&self.prec_nt * &dn)) - dt.dot(&(&self.prec_t * &dt)))
    }
}

pub fn gb_llr(
    model: &GaussianBackendModel,
    eta_e: &DVector<f64>,
    eta_t: &DVector<f64>,
) -> Result<f64> {
    model.scorer()?.llr(eta_e, eta_t)
}

/// `[vec(e t' + t e'); vec(e e' + t t'); e + t; 1]`, row-major.
pub fn expand_quadratic(eta_e: &DVector<f64>, eta_t: &DVector<f64>) -> Result<DVector<f64>> {
    let k = eta_e.len();
    if eta_t.len() != k {
        return Err(Error::Dimension {
            expected: k,
            got: eta_t.len(),
        });
    }
    let mut out = DVector::zeros(expansion_dim(k));
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = eta_e[i] * eta_t[j] + eta_t[i] * eta_e[j];
            out[k * k + i * k + j] = eta_e[i] * eta_e[j] + eta_t[i] * eta_t[j];
        }
        out[2 * k * k + i] = eta_e[i] + eta_t[i];
    }
    out[2 * k * k + k] = 1.0;
    Ok(out)
}

pub fn expansion_dim(k: usize) -> usize {
    2 * k * k + k + 1
}

/// Weight vector over the quadratic expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct DPLDAModel {
    pub w: DVector<f64>,
}

impl DPLDAModel {
    /// Embedding dimension implied by the weight length, if consistent.
    pub fn dim(&self) -> Option<usize> {
        let n = self.w.len();
        (1..=n).find(|&k| expansion_dim(k) == n)
    }

    /// Weights that reproduce `e'Qe + t'Qt + e'Pt` on inputs centered at
    /// `mu`: `[vec(P)/2; vec(Q); -(2Q + P) mu; mu'(2Q + P) mu]`. With
    /// `mu = 0` the last two blocks vanish.
    pub fn from_score_matrices(sm: &ScoreMatrices, mu: &DVector<f64>) -> Self {
        let k = sm.p.nrows();
        let mut w = DVector::zeros(expansion_dim(k));
        for i in 0..k {
            for j in 0..k {
                w[i * k + j] = 0.5 * sm.p[(i, j)];
                w[k * k + i * k + j] = sm.q[(i, j)];
            }
        }
        let lin = (&sm.q * 2.0 + &sm.p) * mu;
        w.rows_mut(2 * k * k, k).copy_from(&(-&lin));
        w[2 * k * k + k] = mu.dot(&lin);
        Self { w }
    }
}

/// `w' phi(e, t)`.
pub fn dplda_score(model: &DPLDAModel, eta_e: &DVector<f64>, eta_t: &DVector<f64>) -> Result<f64> {
    let phi = expand_quadratic(eta_e, eta_t)?;
    if phi.len() != model.w.len() {
        return Err(Error::Dimension {
            expected: model.w.len(),
            got: phi.len(),
        });
    }
    Ok(model.w.dot(&phi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpldaConfig {
    /// Weight of `||w - w0||^2`.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DpldaConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 20,
            batch_size: 8192,
            lr: 1e-3,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpldaFit {
    pub model: DPLDAModel,
    /// Full-data objective before training and after each epoch.
    pub losses: Vec<f64>,
}

fn dplda_objective(
    w: &DVector<f64>,
    w0: &DVector<f64>,
    lambda: f64,
    feats: &[DVector<f64>],
    labels: &[u8],
    grad: Option<&mut DVector<f64>>,
) -> f64 {
    let scores: Vec<f64> = feats.iter().map(|f| w.dot(f)).collect();
    let lg = bce_grad(&scores, labels, None, 0.0);
    let diff = w - w0;
    if let Some(g) = grad {
        g.fill(0.0);
        for (f, ds) in feats.iter().zip(&lg.d_scores) {
            g.axpy(*ds, f, 1.0);
        }
        g.axpy(2.0 * lambda, &diff, 1.0);
    }
    lg.value + lambda * diff.norm_squared()
}

/// Logistic-regression training of the DPLDA weights with an L2 pull toward
/// `init` (normally the PLDA-derived weights). `archive` holds
/// pre-processed embeddings.
pub fn train_dplda(
    trials: &[Trial],
    archive: &EmbeddingArchive,
    init: &DPLDAModel,
    config: &DpldaConfig,
) -> Result<DpldaFit> {
    let resolved = ResolvedTrials::resolve(trials, archive)?;
    if expansion_dim(archive.dimension()) != init.w.len() {
        return Err(Error::Dimension {
            expected: init.w.len(),
            got: expansion_dim(archive.dimension()),
        });
    }
    let recs = archive.records();
    let feats = resolved
        .pairs
        .iter()
        .map(|&(e, t)| expand_quadratic(&recs[e].vector, &recs[t].vector))
        .collect::<Result<Vec<_>>>()?;
    let w0 = init.w.clone();
    let mut w = w0.clone();
    let initial = dplda_objective(&w, &w0, config.lambda, &feats, &resolved.labels, None);
    let mut losses = vec![initial];
    let mut adam = AdamState::new(&[w.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = DVector::zeros(w.len());
    for _ in 0..config.epochs {
        for batch in stratified_batches(&resolved.labels, config.batch_size, &mut rng) {
            let bf: Vec<DVector<f64>> = batch.iter().map(|&i| feats[i].clone()).collect();
            let bl: Vec<u8> = batch.iter().map(|&i| resolved.labels[i]).collect();
            dplda_objective(&w, &w0, config.lambda, &bf, &bl, Some(&mut grad));
            adam.step(&mut [w.as_mut_slice()], &[grad.as_slice()], config.lr)?;
        }
        let loss = dplda_objective(&w, &w0, config.lambda, &feats, &resolved.labels, None);
        if !loss.is_finite() || loss > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged { loss, initial });
        }
        losses.push(loss);
    }
    Ok(DpldaFit {
        model: DPLDAModel { w },
        losses,
    })
}

/// Pipeline plus Gaussian backend over processed embeddings.
#[derive(Debug, Clone)]
pub struct GaussianBackend {
    pub pipeline: PreprocessPipeline,
    pub model: GaussianBackendModel,
    scorer: GaussianBackendScorer,
}

impl GaussianBackend {
    pub fn new(pipeline: PreprocessPipeline, model: GaussianBackendModel) -> Result<Self> {
        if 2 * pipeline.output_dim() != model.pair_dim() {
            return Err(Error::Dimension {
                expected: 2 * pipeline.output_dim(),
                got: model.pair_dim(),
            });
        }
        let scorer = model.scorer()?;
        Ok(Self {
            pipeline,
            model,
            scorer,
        })
    }

    pub fn score(&self, x_e: &DVector<f64>, x_t: &DVector<f64>) -> Result<f64> {
        self.scorer
            .llr(&self.pipeline.apply(x_e)?, &self.pipeline.apply(x_t)?)
    }
}

/// Pipeline plus DPLDA weights over processed embeddings.
#[derive(Debug, Clone)]
pub struct DpldaBackend {
    pub pipeline: PreprocessPipeline,
    pub model: DPLDAModel,
}

impl DpldaBackend {
    pub fn new(pipeline: PreprocessPipeline, model: DPLDAModel) -> Result<Self> {
        if expansion_dim(pipeline.output_dim()) != model.w.len() {
            return Err(Error::Dimension {
                expected: expansion_dim(pipeline.output_dim()),
                got: model.w.len(),
            });
        }
        Ok(Self { pipeline, model })
    }

    pub fn score(&self, x_e: &DVector<f64>, x_t: &DVector<f64>) -> Result<f64> {
        dplda_score(
            &self.model,
            &self.pipeline.apply(x_e)?,
            &self.pipeline.apply(x_t)?,
        )
    }
}

impl Persist for GaussianBackendModel {
    const KIND: u8 = 4;
    const NAME: &'static str = "Gaussian backend";

    fn write_payload(&self, w: &mut ByteWriter) {
        w.vector(&self.mu_t);
        w.matrix(&self.sigma_t);
        w.vector(&self.mu_nt);
        w.matrix(&self.sigma_nt);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        Ok(Self {
            mu_t: r.vector()?,
            sigma_t: r.matrix()?,
            mu_nt: r.vector()?,
            sigma_nt: r.matrix()?,
        })
    }
}

impl Persist for DPLDAModel {
    const KIND: u8 = 5;
    const NAME: &'static str = "discriminative PLDA";

    fn write_payload(&self, w: &mut ByteWriter) {
        w.vector(&self.w);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        let model = Self { w: r.vector()? };
        if model.dim().is_none() {
            return Err(Error::Format(format!(
                "weight length {} is not 2k^2 + k + 1",
                model.w.len()
            )));
        }
        Ok(model)
    }
}

impl Persist for GaussianBackend {
    const KIND: u8 = 7;
    const NAME: &'static str = "Gaussian backend with pipeline";

    fn write_payload(&self, w: &mut ByteWriter) {
        self.pipeline.write_payload(w);
        self.model.write_payload(w);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        let pipeline = PreprocessPipeline::read_payload(r)?;
        let model = GaussianBackendModel::read_payload(r)?;
        Self::new(pipeline, model).map_err(|e| Error::Format(e.to_string()))
    }
}

impl Persist for DpldaBackend {
    const KIND: u8 = 8;
    const NAME: &'static str = "DPLDA with pipeline";

    fn write_payload(&self, w: &mut ByteWriter) {
        self.pipeline.write_payload(w);
        self.model.write_payload(w);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        let pipeline = PreprocessPipeline::read_payload(r)?;
        let model = DPLDAModel::read_payload(r)?;
        Self::new(pipeline, model).map_err(|e| Error::Format(e.to_string()))
    }
}
