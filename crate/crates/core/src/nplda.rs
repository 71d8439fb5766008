//! Neural PLDA scoring network.
//!
//! Each side of a trial goes through
//! `f(x) = A2 * lengthnorm(A1 * x + b1) + b2`, and the pair is scored by the
//! quadratic layer `f_e'Q f_e + f_t'Q f_t + f_e'P f_t`. Only the symmetric
//! parts of `P` and `Q` enter the score, so their gradients are symmetric
//! too. Gradients are closed-form.

use nalgebra::{DMatrix, DVector};

use crate::dataio::{ByteReader, ByteWriter, Persist};
use crate::error::{Error, Result};
use crate::gplda::{GPLDAModel, ScoreMatrices};
use crate::linalg::{max_asymmetry, symmetrize_in_place};
use crate::preprocess::PreprocessPipeline;

const ZERO_NORM: f64 = 1e-12;

/// Default sigmoid warp factor of the soft detection cost.
pub const DEFAULT_ALPHA: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NPLDAParams {
    /// `k x d` first affine layer.
    pub a1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `k x k` second affine layer.
    pub a2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// One learnable threshold per operating point.
    pub thresholds: Vec<f64>,
    /// Cost weight of each operating point (fixed).
    pub betas: Vec<f64>,
    /// Sigmoid warp factor (fixed).
    pub alpha: f64,
}

/// Gradients with the same shapes as [`NPLDAParams`]' learnable fields.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub a1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub a2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub thresholds: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 7] = ["a1", "b1", "a2", "b2", "p", "q", "thresholds"];

/// Initializes the network so that it reproduces the PLDA backend's scores.
///
/// `b1` folds both the input centering and the post-projection mean, so the
/// first layer matches the pipeline exactly; `b2` removes the PLDA model
/// mean. `A2` starts as the identity.
pub fn init_from_gplda(
    pipeline: &PreprocessPipeline,
    model: &GPLDAModel,
    sm: &ScoreMatrices,
    betas: &[f64],
    alpha: f64,
) -> Result<NPLDAParams> {
    let k = pipeline.output_dim();
    if model.dim() != k || sm.p.nrows() != k || sm.q.nrows() != k {
        return Err(Error::Dimension {
            expected: k,
            got: model.dim(),
        });
    }
    if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::InvalidArgument(
            "need at least one positive beta".into(),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let a1 = pipeline.lda_matrix.clone();
    let b1 = -(&a1 * &pipeline.mean) - &pipeline.post_mean;
    Ok(NPLDAParams {
        a1,
        b1,
        a2: DMatrix::identity(k, k),
        b2: -model.mu.clone(),
        p: sm.p.clone(),
        q: sm.q.clone(),
        thresholds: betas.iter().map(|b| b.ln()).collect(),
        betas: betas.to_vec(),
        alpha,
    })
}

/// Intermediate values of one embedding branch.
struct Branch {
    norm: f64,
    u: DVector<f64>,
    f: DVector<f64>,
}

impl NPLDAParams {
    pub fn input_dim(&self) -> usize {
        self.a1.ncols()
    }

    pub fn dim(&self) -> usize {
        self.a1.nrows()
    }

    fn branch(&self, x: &DVector<f64>) -> Result<Branch> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let v = &self.a1 * x + &self.b1;
        let norm = v.norm();
        if !norm.is_finite() || norm < ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        let u = v / norm;
        let f = &self.a2 * &u + &self.b2;
        Ok(Branch { norm, u, f })
    }

    /// Embedding after the second affine layer.
    pub fn embed(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.branch(x).map(|b| b.f)
    }

    fn quadratic(&self, fe: &DVector<f64>, ft: &DVector<f64>) -> f64 {
        let pe = &self.p * ft;
        let pt = &self.p * fe;
        fe.dot(&(&self.q * fe)) + ft.dot(&(&self.q * ft)) + 0.5 * (fe.dot(&pe) + ft.dot(&pt))
    }

    /// Symmetrizes `P` and `Q` in place.
    pub fn enforce_symmetry(&mut self) {
        symmetrize_in_place(&mut self.p);
        symmetrize_in_place(&mut self.q);
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        max_asymmetry(&self.p) <= tol && max_asymmetry(&self.q) <= tol
    }

    /// Learnable parameter blocks, in [`BLOCK_NAMES`] order.
    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 7] {
        [
            ("a1", self.a1.as_mut_slice()),
            ("b1", self.b1.as_mut_slice()),
            ("a2", self.a2.as_mut_slice()),
            ("b2", self.b2.as_mut_slice()),
            ("p", self.p.as_mut_slice()),
            ("q", self.q.as_mut_slice()),
            ("thresholds", self.thresholds.as_mut_slice()),
        ]
    }

    pub fn zero_gradients(&self) -> BatchGradients {
        let (k, d) = self.a1.shape();
        BatchGradients {
            a1: DMatrix::zeros(k, d),
            b1: DVector::zeros(k),
            a2: DMatrix::zeros(k, k),
            b2: DVector::zeros(k),
            p: DMatrix::zeros(k, k),
            q: DMatrix::zeros(k, k),
            thresholds: vec![0.0; self.thresholds.len()],
        }
    }
}

/// Network score of one trial.
pub fn forward(params: &NPLDAParams, x_e: &DVector<f64>, x_t: &DVector<f64>) -> Result<f64> {
    let e = params.branch(x_e)?;
    let t = params.branch(x_t)?;
    Ok(params.quadratic(&e.f, &t.f))
}

pub fn forward_batch(
    params: &NPLDAParams,
    pairs: &[(&DVector<f64>, &DVector<f64>)],
) -> Result<Vec<f64>> {
    pairs.iter().map(|(e, t)| forward(params, e, t)).collect()
}

/// Back-propagates per-score loss gradients (and threshold gradients, which
/// the network itself does not touch) into parameter gradients. Trials are
/// accumulated in batch order.
pub fn backward(
    params: &NPLDAParams,
    pairs: &[(&DVector<f64>, &DVector<f64>)],
    d_scores: &[f64],
    d_thresholds: &[f64],
) -> Result<BatchGradients> {
    if pairs.len() != d_scores.len() {
        return Err(Error::Dimension {
            expected: pairs.len(),
            got: d_scores.len(),
        });
    }
    if d_thresholds.len() != params.thresholds.len() {
        return Err(Error::Dimension {
            expected: params.thresholds.len(),
            got: d_thresholds.len(),
        });
    }
    let mut g = params.zero_gradients();
    g.thresholds.copy_from_slice(d_thresholds);
    let q_sym = (&params.q + params.q.transpose()) * 0.5;
    let p_sym = (&params.p + params.p.transpose()) * 0.5;

    for (&(xe, xt), &ds) in pairs.iter().zip(d_scores) {
        if ds == 0.0 {
            continue;
        }
        let e = params.branch(xe)?;
        let t = params.branch(xt)?;
        // quadratic layer
        g.q.ger(ds, &e.f, &e.f, 1.0);
        g.q.ger(ds, &t.f, &t.f, 1.0);
        g.p.ger(0.5 * ds, &e.f, &t.f, 1.0);
        g.p.ger(0.5 * ds, &t.f, &e.f, 1.0);
        let d_fe = (&q_sym * &e.f * 2.0 + &p_sym * &t.f) * ds;
        let d_ft = (&q_sym * &t.f * 2.0 + &p_sym * &e.f) * ds;
        for (branch, x, d_f) in [(&e, xe, d_fe), (&t, xt, d_ft)] {
            g.a2.ger(1.0, &d_f, &branch.u, 1.0);
            g.b2 += &d_f;
            let d_u = params.a2.tr_mul(&d_f);
            // length-norm Jacobian (I - u u') / ||v||
            let d_v = (&d_u - &branch.u * branch.u.dot(&d_u)) / branch.norm;
            g.a1.ger(1.0, &d_v, x, 1.0);
            g.b1 += &d_v;
        }
    }
    g.check_finite()?;
    Ok(g)
}

impl BatchGradients {
    pub fn blocks(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("a1", self.a1.as_slice()),
            ("b1", self.b1.as_slice()),
            ("a2", self.a2.as_slice()),
            ("b2", self.b2.as_slice()),
            ("p", self.p.as_slice()),
            ("q", self.q.as_slice()),
            ("thresholds", self.thresholds.as_slice()),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, block) in self.blocks() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

impl Persist for NPLDAParams {
    const KIND: u8 = 6;
    const NAME: &'static str = "neural PLDA";

    fn write_payload(&self, w: &mut ByteWriter) {
        w.matrix(&self.a1);
        w.vector(&self.b1);
        w.matrix(&self.a2);
        w.vector(&self.b2);
        w.matrix(&self.p);
        w.matrix(&self.q);
        w.vector(&DVector::from_row_slice(&self.thresholds));
        w.vector(&DVector::from_row_slice(&self.betas));
        w.f64(self.alpha);
    }

    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self> {
        let params = Self {
            a1: r.matrix()?,
            b1: r.vector()?,
            a2: r.matrix()?,
            b2: r.vector()?,
            p: r.matrix()?,
            q: r.matrix()?,
            thresholds: r.vector()?.as_slice().to_vec(),
            betas: r.vector()?.as_slice().to_vec(),
            alpha: r.f64()?,
        };
        let k = params.a1.nrows();
        let consistent = params.b1.len() == k
            && params.a2.shape() == (k, k)
            && params.b2.len() == k
            && params.p.shape() == (k, k)
            && params.q.shape() == (k, k)
            && params.thresholds.len() == params.betas.len()
            && !params.thresholds.is_empty();
        if !consistent {
            return Err(Error::Format("inconsistent neural PLDA shapes".into()));
        }
        Ok(params)
    }
}
