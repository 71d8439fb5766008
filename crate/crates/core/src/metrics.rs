//! Verification losses and detection metrics.
//!
//! Labels use 1 for a target trial and 0 for a nontarget trial. A score equal
//! to the threshold counts as an acceptance.

use std::fmt;

use crate::error::{Error, Result};

/// Scores with binary labels (1 = target, 0 = nontarget).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
    n_target: usize,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension {
                expected: scores.len(),
                got: labels.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("score {i} is not finite")));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {i} is not 0 or 1")));
        }
        let n_target = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            scores,
            labels,
            n_target,
        })
    }

    /// Builds a set from separate target and nontarget score lists.
    pub fn from_classes(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = std::iter::repeat_n(1, targets.len())
            .chain(std::iter::repeat_n(0, nontargets.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn n_nontarget(&self) -> usize {
        self.scores.len() - self.n_target
    }

    fn check_classes(&self) -> Result<()> {
        if self.n_target == 0 || self.n_nontarget() == 0 {
            return Err(Error::MissingClass);
        }
        Ok(())
    }
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
    pub beta: f64,
}

impl CostParams {
    pub fn new(c_miss: f64, c_fa: f64, p_target: f64) -> Result<Self> {
        if !(c_miss > 0.0 && c_fa > 0.0) || !(p_target > 0.0 && p_target < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cost parameters out of range: c_miss={c_miss}, c_fa={c_fa}, p_target={p_target}"
            )));
        }
        Ok(Self {
            c_miss,
            c_fa,
            p_target,
            beta: c_fa * (1.0 - p_target) / (c_miss * p_target),
        })
    }

    /// Cost parameters with unit costs and the prior implied by `beta`.
    pub fn from_beta(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {beta}"
            )));
        }
        let p_target = 1.0 / (1.0 + beta);
        Ok(Self {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target,
            beta,
        })
    }

    /// The Bayes threshold for calibrated log-likelihood ratios.
    pub fn log_beta(&self) -> f64 {
        self.beta.ln()
    }
}

impl Default for CostParams {
    /// `c_miss = c_fa = 1`, `p_target = 0.01`, i.e. beta = 99.
    fn default() -> Self {
        Self::new(1.0, 1.0, 0.01).expect("valid defaults")
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Miss and false-alarm probabilities at threshold `theta`.
pub fn p_miss_p_fa(ss: &ScoreSet, theta: f64) -> Result<(f64, f64)> {
    ss.check_classes()?;
    let mut misses = 0usize;
    let mut false_alarms = 0usize;
    for (&s, &l) in ss.scores.iter().zip(&ss.labels) {
        if l == 1 && s < theta {
            misses += 1;
        } else if l == 0 && s >= theta {
            false_alarms += 1;
        }
    }
    Ok(rates(misses, false_alarms, ss))
}

fn rates(misses: usize, false_alarms: usize, ss: &ScoreSet) -> (f64, f64) {
    (
        misses as f64 / ss.n_target as f64,
        false_alarms as f64 / ss.n_nontarget() as f64,
    )
}

/// Normalized detection cost `P_miss + beta * P_fa`.
pub fn dcf(ss: &ScoreSet, cp: &CostParams, theta: f64) -> Result<f64> {
    let (pm, pfa) = p_miss_p_fa(ss, theta)?;
    Ok(pm + cp.beta * pfa)
}

/// Sigmoid-relaxed detection cost.
pub fn soft_dcf(ss: &ScoreSet, cp: &CostParams, theta: f64, alpha: f64) -> Result<f64> {
    soft_dcf_grad(ss.scores(), ss.labels(), cp.beta, theta, alpha).map(|g| g.value)
}

/// Value and gradients of a loss over scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// d loss / d score, one per trial.
    pub d_scores: Vec<f64>,
    /// d loss / d threshold; zero for threshold-free losses.
    pub d_theta: f64,
}

/// Soft detection cost with gradients in every score and in `theta`.
pub fn soft_dcf_grad(
    scores: &[f64],
    labels: &[u8],
    beta: f64,
    theta: f64,
    alpha: f64,
) -> Result<LossGrad> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let n_t = labels.iter().filter(|&&l| l == 1).count();
    let n_n = labels.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::MissingClass);
    }
    let (w_t, w_n) = (1.0 / n_t as f64, beta / n_n as f64);
    let mut value = 0.0;
    let mut d_theta = 0.0;
    let mut d_scores = vec![0.0; scores.len()];
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        let sig = sigmoid(alpha * (s - theta));
        let slope = alpha * sig * (1.0 - sig);
        if l == 1 {
            value += w_t * (1.0 - sig);
            d_scores[i] = -w_t * slope;
        } else {
            value += w_n * sig;
            d_scores[i] = w_n * slope;
        }
        d_theta -= d_scores[i];
    }
    Ok(LossGrad {
        value,
        d_scores,
        d_theta,
    })
}

/// Every candidate threshold in ascending order with its miss and
/// false-alarm counts: `-inf`, midpoints between consecutive distinct
/// scores, `+inf`.
fn sweep(ss: &ScoreSet) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<(f64, u8)> = ss
        .scores
        .iter()
        .copied()
        .zip(ss.labels.iter().copied())
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut misses = 0usize;
    let mut false_alarms = ss.n_nontarget();
    let mut out = Vec::with_capacity(order.len() + 2);
    out.push((f64::NEG_INFINITY, misses, false_alarms));
    let mut i = 0;
    while i < order.len() {
        let value = order[i].0;
        while i < order.len() && order[i].0 == value {
            match order[i].1 {
                1 => misses += 1,
                _ => false_alarms -= 1,
            }
            i += 1;
        }
        let theta = match order.get(i) {
            Some(&(next, _)) => {
                let mid = value + 0.5 * (next - value);
                if mid > value {
                    mid
                } else {
                    next
                }
            }
            None => f64::INFINITY,
        };
        out.push((theta, misses, false_alarms));
    }
    out
}

/// Minimum detection cost over all thresholds and the smallest threshold
/// attaining it.
pub fn min_dcf(ss: &ScoreSet, cp: &CostParams) -> Result<(f64, f64)> {
    ss.check_classes()?;
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for (theta, misses, fas) in sweep(ss) {
        let (pm, pfa) = rates(misses, fas, ss);
        let cost = pm + cp.beta * pfa;
        if cost < best.0 {
            best = (cost, theta);
        }
    }
    Ok(best)
}

/// Detection cost at the Bayes threshold `log beta`.
pub fn act_dcf(ss: &ScoreSet, cp: &CostParams) -> Result<f64> {
    dcf(ss, cp, cp.log_beta())
}

/// Equal error rate as a fraction, linearly interpolated between the two
/// operating points where `P_miss - P_fa` changes sign.
pub fn eer(ss: &ScoreSet) -> Result<f64> {
    ss.check_classes()?;
    let points: Vec<(f64, f64)> = sweep(ss)
        .into_iter()
        .map(|(_, m, f)| rates(m, f, ss))
        .collect();
    let mut prev = points[0];
    for &(pm, pfa) in &points {
        let d = pm - pfa;
        if d == 0.0 {
            return Ok(pm);
        }
        if d > 0.0 {
            let d_prev = prev.0 - prev.1;
            let t = -d_prev / (d - d_prev);
            return Ok(prev.0 + t * (pm - prev.0));
        }
        prev = (pm, pfa);
    }
    unreachable!("sweep ends at P_miss = 1, P_fa = 0")
}

/// Mean binary cross-entropy of `sigmoid(score)` against the labels.
pub fn bce_loss(ss: &ScoreSet) -> f64 {
    bce_grad(ss.scores(), ss.labels(), None, 0.0).value
}

/// Cross-entropy plus `lambda / N * sum (s_i - l_i)^2`, pulling scores
/// toward reference PLDA scores `l`.
pub fn bce_regularized(ss: &ScoreSet, plda_scores: &[f64], lambda: f64) -> Result<f64> {
    if plda_scores.len() != ss.len() {
        return Err(Error::Dimension {
            expected: ss.len(),
            got: plda_scores.len(),
        });
    }
    Ok(bce_grad(ss.scores(), ss.labels(), Some(plda_scores), lambda).value)
}

/// Cross-entropy (optionally regularized) with per-score gradients.
pub fn bce_grad(scores: &[f64], labels: &[u8], reference: Option<&[f64]>, lambda: f64) -> LossGrad {
    let n = scores.len().max(1) as f64;
    let mut value = 0.0;
    let mut d_scores = Vec::with_capacity(scores.len());
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        // -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
        let (nll, target) = if l == 1 {
            (softplus(-s), 1.0)
        } else {
            (softplus(s), 0.0)
        };
        let mut g = (sigmoid(s) - target) / n;
        value += nll / n;
        if let Some(r) = reference {
            let diff = s - r[i];
            value += lambda * diff * diff / n;
            g += 2.0 * lambda * diff / n;
        }
        d_scores.push(g);
    }
    LossGrad {
        value,
        d_scores,
        d_theta: 0.0,
    }
}

/// Summary metrics of one score set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub beta: f64,
    /// Equal error rate as a fraction.
    pub eer: f64,
    pub min_dcf: f64,
    pub act_dcf: f64,
    pub min_dcf_threshold: f64,
}

impl MetricReport {
    pub fn compute(ss: &ScoreSet, cp: &CostParams) -> Result<Self> {
        let (min_dcf, min_dcf_threshold) = min_dcf(ss, cp)?;
        Ok(Self {
            beta: cp.beta,
            eer: eer(ss)?,
            min_dcf,
            act_dcf: act_dcf(ss, cp)?,
            min_dcf_threshold,
        })
    }
}

impl fmt::Display for MetricReport {
    /// Key-value block, four decimals, EER in percent.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "beta={:.4}", self.beta)?;
        writeln!(f, "eer={:.4}", 100.0 * self.eer)?;
        writeln!(f, "min_dcf={:.4}", self.min_dcf)?;
        writeln!(f, "act_dcf={:.4}", self.act_dcf)?;
        writeln!(f, "threshold={:.4}", self.min_dcf_threshold)
    }
}
