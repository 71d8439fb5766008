//! Trial sampling, stratified mini-batching, Adam and the neural PLDA
//! training loop.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{unordered, EmbeddingArchive, Gender, ResolvedTrials, Trial, TrialLabel};
use crate::error::{Error, Result};
use crate::metrics::{bce_grad, min_dcf, soft_dcf_grad, CostParams, ScoreSet};
use crate::nplda::{backward, forward_batch, BatchGradients, NPLDAParams, DEFAULT_ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftDcf,
    Bce,
    BceRegularized,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_dcf" | "soft-dcf" => Ok(LossKind::SoftDcf),
            "bce" => Ok(LossKind::Bce),
            "bce_regularized" | "bce-regularized" => Ok(LossKind::BceRegularized),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation-loss improvement before the rate halves.
    pub lr_halving_patience: usize,
    pub max_epochs: usize,
    /// Nontarget trials per target trial.
    pub target_nontarget_ratio: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Weight of the pull toward the initial scores in `BceRegularized`.
    pub lambda: f64,
    pub alpha: f64,
    /// Operating point of the validation minDCF used for model selection.
    pub cost: CostParams,
    /// Keep the global target/nontarget mix in every batch.
    pub stratified: bool,
    /// Move each threshold to the minDCF threshold of the initial training
    /// scores before the first epoch.
    pub calibrate_thresholds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8192,
            lr: 1e-3,
            lr_halving_patience: 2,
            max_epochs: 20,
            target_nontarget_ratio: 10,
            seed: 42,
            loss: LossKind::SoftDcf,
            lambda: 0.0,
            alpha: DEFAULT_ALPHA,
            cost: CostParams::default(),
            stratified: true,
            calibrate_thresholds: true,
        }
    }
}

/// Draws `n_target` same-speaker pairs and `ratio * n_target`
/// different-speaker, same-gender pairs, without repeating an unordered
/// pair. Records without a speaker id are ignored.
pub fn sample_trials(
    archive: &EmbeddingArchive,
    n_target: usize,
    ratio: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = archive.records();
    let groups = archive.speaker_groups();
    let speaker_of: HashMap<usize, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(s, (_, idx))| idx.iter().map(move |&i| (i, s)))
        .collect();

    // targets: uniform over all same-speaker pairs
    let target_weights: Vec<u64> = groups.iter().map(|(_, idx)| pairs_of(idx.len())).collect();
    let target_capacity: u64 = target_weights.iter().sum();
    if n_target as u64 > target_capacity {
        return Err(Error::Insufficient(format!(
            "{n_target} target trials requested but only {target_capacity} same-speaker pairs exist"
        )));
    }
    let mut pairs: Vec<(usize, usize, TrialLabel)> = Vec::with_capacity(n_target * (ratio + 1));
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    if 2 * n_target as u64 > target_capacity {
        let mut all: Vec<(usize, usize)> =
            groups.iter().flat_map(|(_, idx)| all_pairs(idx)).collect();
        all.shuffle(&mut rng);
        pairs.extend(
            all.into_iter()
                .take(n_target)
                .map(|(a, b)| (a, b, TrialLabel::Target)),
        );
    } else {
        while pairs.len() < n_target {
            let s = weighted_pick(&target_weights, &mut rng);
            let idx = &groups[s].1;
            let (a, b) = distinct_pair(idx.len(), &mut rng);
            if seen.insert(unordered(idx[a], idx[b])) {
                pairs.push((idx[a], idx[b], TrialLabel::Target));
            }
        }
    }

    // nontargets: uniform over same-gender, different-speaker pairs
    let n_nontarget = n_target * ratio;
    let mut by_gender: Vec<(Gender, Vec<usize>)> = Vec::new();
    for (i, rec) in recs.iter().enumerate() {
        if !speaker_of.contains_key(&i) {
            continue;
        }
        match by_gender.iter_mut().find(|(g, _)| *g == rec.gender) {
            Some((_, v)) => v.push(i),
            None => by_gender.push((rec.gender, vec![i])),
        }
    }
    let nontarget_weights: Vec<u64> = by_gender
        .iter()
        .map(|(_, idx)| {
            let mut per_speaker: HashMap<usize, usize> = HashMap::new();
            for i in idx {
                *per_speaker.entry(speaker_of[i]).or_default() += 1;
            }
            pairs_of(idx.len()) - per_speaker.values().map(|&n| pairs_of(n)).sum::<u64>()
        })
        .collect();
    let nontarget_capacity: u64 = nontarget_weights.iter().sum();
    if n_nontarget as u64 > nontarget_capacity {
        return Err(Error::Insufficient(format!(
            "{n_nontarget} nontarget trials requested but only {nontarget_capacity} \
             same-gender different-speaker pairs exist"
        )));
    }
    if 2 * n_nontarget as u64 > nontarget_capacity {
        let mut all: Vec<(usize, usize)> = by_gender
            .iter()
            .flat_map(|(_, idx)| all_pairs(idx))
            .filter(|(a, b)| speaker_of[a] != speaker_of[b])
            .collect();
        all.shuffle(&mut rng);
        pairs.extend(
            all.into_iter()
                .take(n_nontarget)
                .map(|(a, b)| (a, b, TrialLabel::Nontarget)),
        );
    } else {
        let mut drawn = 0;
        while drawn < n_nontarget {
            let g = weighted_pick(&nontarget_weights, &mut rng);
            let idx = &by_gender[g].1;
            let (a, b) = distinct_pair(idx.len(), &mut rng);
            let (a, b) = (idx[a], idx[b]);
            if speaker_of[&a] != speaker_of[&b] && seen.insert(unordered(a, b)) {
                pairs.push((a, b, TrialLabel::Nontarget));
                drawn += 1;
            }
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs
        .into_iter()
        .map(|(a, b, label)| Trial::new(&recs[a].segment_id, &recs[b].segment_id, label))
        .collect())
}

fn pairs_of(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

fn all_pairs(idx: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..idx.len()).flat_map(move |a| ((a + 1)..idx.len()).map(move |b| (idx[a], idx[b])))
}

fn distinct_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn weighted_pick<R: Rng + ?Sized>(weights: &[u64], rng: &mut R) -> usize {
    let total: u64 = weights.iter().sum();
    let mut x = rng.random_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    unreachable!("x < total")
}

/// Splits trial indices into batches of at most `batch_size`.
///
/// Target and nontarget indices are shuffled separately and dealt so that
/// every batch holds the global class mix to within one trial.
pub fn stratified_batches<R: Rng + ?Sized>(
    labels: &[u8],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n = labels.len();
    if n == 0 {
        return Vec::new();
    }
    let mut targets: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let mut nontargets: Vec<usize> = (0..n).filter(|&i| labels[i] != 1).collect();
    targets.shuffle(rng);
    nontargets.shuffle(rng);
    let n_batches = n.div_ceil(batch_size.max(1));
    let share = |len: usize, b: usize| (b * len / n_batches, (b + 1) * len / n_batches);
    (0..n_batches)
        .map(|b| {
            let (t0, t1) = share(targets.len(), b);
            let (n0, n1) = share(nontargets.len(), b);
            let mut batch: Vec<usize> = targets[t0..t1]
                .iter()
                .chain(&nontargets[n0..n1])
                .copied()
                .collect();
            batch.shuffle(rng);
            batch
        })
        .collect()
}

/// Shuffled batches without class balancing.
pub fn random_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Adam moment estimates for a list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        Self {
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_params(params: &NPLDAParams) -> Self {
        let mut p = params.clone();
        let sizes: Vec<usize> = p.blocks_mut().iter().map(|(_, b)| b.len()).collect();
        Self::new(&sizes)
    }

    /// One bias-corrected Adam update. Nothing is modified if any update
    /// would be non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Dimension {
                    expected: m.len(),
                    got: p.len().min(g.len()),
                });
            }
        }
        let t = self.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut first = self.first.clone();
        let mut second = self.second.clone();
        let mut updates: Vec<Vec<f64>> = Vec::with_capacity(grads.len());
        for ((g, m), v) in grads.iter().zip(first.iter_mut()).zip(second.iter_mut()) {
            let mut u = Vec::with_capacity(g.len());
            for ((gi, mi), vi) in g.iter().zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let step = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.epsilon);
                if !step.is_finite() {
                    return Err(Error::InvalidArgument("non-finite Adam update".into()));
                }
                u.push(step);
            }
            updates.push(u);
        }
        for (p, u) in params.iter_mut().zip(&updates) {
            for (pi, ui) in p.iter_mut().zip(u) {
                *pi -= ui;
            }
        }
        self.first = first;
        self.second = second;
        self.step = t;
        Ok(())
    }
}

/// Adam step on every network block, then re-symmetrizes `P` and `Q`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut NPLDAParams,
    grads: &BatchGradients,
    lr: f64,
) -> Result<()> {
    let grad_blocks: Vec<&[f64]> = grads.blocks().iter().map(|(_, b)| *b).collect();
    {
        let mut blocks = params.blocks_mut();
        let mut slices: Vec<&mut [f64]> = blocks.iter_mut().map(|(_, b)| &mut **b).collect();
        state.step(&mut slices, &grad_blocks, lr)?;
    }
    params.enforce_symmetry();
    Ok(())
}

/// Loss value with gradients in the scores and in every threshold.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub value: f64,
    pub d_scores: Vec<f64>,
    pub d_thresholds: Vec<f64>,
}

/// Evaluates the configured loss on a batch of scores. Soft DCF sums over
/// the operating points of `params`.
pub fn objective(
    params: &NPLDAParams,
    scores: &[f64],
    labels: &[u8],
    reference: Option<&[f64]>,
    loss: LossKind,
    lambda: f64,
) -> Result<ObjectiveGrad> {
    let mut d_thresholds = vec![0.0; params.thresholds.len()];
    match loss {
        LossKind::SoftDcf => {
            let mut value = 0.0;
            let mut d_scores = vec![0.0; scores.len()];
            for (m, (&theta, &beta)) in params.thresholds.iter().zip(&params.betas).enumerate() {
                let g = soft_dcf_grad(scores, labels, beta, theta, params.alpha)?;
                value += g.value;
                d_scores
                    .iter_mut()
                    .zip(&g.d_scores)
                    .for_each(|(a, b)| *a += b);
                d_thresholds[m] = g.d_theta;
            }
            Ok(ObjectiveGrad {
                value,
                d_scores,
                d_thresholds,
            })
        }
        LossKind::Bce | LossKind::BceRegularized => {
            let reference = match loss {
                LossKind::BceRegularized => Some(reference.ok_or_else(|| {
                    Error::InvalidArgument("regularized BCE needs reference scores".into())
                })?),
                _ => None,
            };
            let g = bce_grad(scores, labels, reference, lambda);
            Ok(ObjectiveGrad {
                value: g.value,
                d_scores: g.d_scores,
                d_thresholds,
            })
        }
    }
}

/// Batch loss of the network.
pub fn batch_loss(
    params: &NPLDAParams,
    pairs: &[(&DVector<f64>, &DVector<f64>)],
    labels: &[u8],
    reference: Option<&[f64]>,
    loss: LossKind,
    lambda: f64,
) -> Result<f64> {
    let scores = forward_batch(params, pairs)?;
    objective(params, &scores, labels, reference, loss, lambda).map(|o| o.value)
}

/// Batch loss and its gradient in every parameter block.
pub fn batch_gradients(
    params: &NPLDAParams,
    pairs: &[(&DVector<f64>, &DVector<f64>)],
    labels: &[u8],
    reference: Option<&[f64]>,
    loss: LossKind,
    lambda: f64,
) -> Result<(f64, BatchGradients)> {
    let scores = forward_batch(params, pairs)?;
    let obj = objective(params, &scores, labels, reference, loss, lambda)?;
    let grads = backward(params, pairs, &obj.d_scores, &obj.d_thresholds)?;
    Ok((obj.value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_min_dcf: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation minDCF among epochs whose
    /// validation loss does not exceed the initial one (the initial
    /// parameters unless some epoch qualifies).
    pub params: NPLDAParams,
    pub best_epoch: usize,
    /// Parameters at epoch 0, after any threshold calibration.
    pub initial_params: NPLDAParams,
    /// Validation loss and minDCF of the initial parameters.
    pub initial_valid_loss: f64,
    pub initial_valid_min_dcf: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_valid_min_dcf(&self) -> f64 {
        self.history
            .iter()
            .map(|r| r.valid_min_dcf)
            .fold(self.initial_valid_min_dcf, f64::min)
    }
}

/// `epoch,train_loss,valid_loss,valid_min_dcf,lr` rows with a header line.
pub fn format_history(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss,valid_min_dcf,lr\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?}",
            r.epoch, r.train_loss, r.valid_loss, r.valid_min_dcf, r.lr
        );
    }
    out
}

struct TrialView<'a> {
    pairs: Vec<(&'a DVector<f64>, &'a DVector<f64>)>,
    labels: Vec<u8>,
}

impl<'a> TrialView<'a> {
    fn new(trials: &[Trial], archive: &'a EmbeddingArchive) -> Result<Self> {
        let resolved = ResolvedTrials::resolve(trials, archive)?;
        let recs = archive.records();
        Ok(Self {
            pairs: resolved
                .pairs
                .iter()
                .map(|&(e, t)| (&recs[e].vector, &recs[t].vector))
                .collect(),
            labels: resolved.labels,
        })
    }
}

fn evaluate(
    params: &NPLDAParams,
    view: &TrialView<'_>,
    reference: &[f64],
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let scores = forward_batch(params, &view.pairs)?;
    let loss = objective(
        params,
        &scores,
        &view.labels,
        Some(reference),
        config.loss,
        config.lambda,
    )?
    .value;
    let ss = ScoreSet::new(scores, view.labels.clone())?;
    let (min, _) = min_dcf(&ss, &config.cost)?;
    Ok((loss, min))
}

/// Trains the network on `train_trials`, selecting the snapshot with the
/// best validation minDCF. `archive` holds raw embeddings; both trial lists
/// must resolve against it.
pub fn train_nplda(
    params: NPLDAParams,
    train_trials: &[Trial],
    valid_trials: &[Trial],
    archive: &EmbeddingArchive,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let mut params = params;
    params.alpha = config.alpha;
    let train = TrialView::new(train_trials, archive)?;
    let valid = TrialView::new(valid_trials, archive)?;
    let train_ref = forward_batch(&params, &train.pairs)?;
    if config.calibrate_thresholds {
        let ss = ScoreSet::new(train_ref.clone(), train.labels.clone())?;
        for (theta, &beta) in params.thresholds.iter_mut().zip(&params.betas) {
            let (_, t) = min_dcf(&ss, &CostParams::from_beta(beta)?)?;
            if t.is_finite() {
                *theta = t;
            }
        }
    }
    let valid_ref = forward_batch(&params, &valid.pairs)?;

    let (initial_valid_loss, initial_valid_min_dcf) =
        evaluate(&params, &valid, &valid_ref, config)?;
    let initial_params = params.clone();
    let mut best = (initial_valid_min_dcf, 0usize, params.clone());
    let mut best_valid_loss = initial_valid_loss;
    let mut stale = 0usize;
    let mut lr = config.lr;
    let mut adam = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.max_epochs);

    for epoch in 1..=config.max_epochs {
        let batches = if config.stratified {
            stratified_batches(&train.labels, config.batch_size, &mut rng)
        } else {
            random_batches(train.labels.len(), config.batch_size, &mut rng)
        };
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let pairs: Vec<_> = batch.iter().map(|&i| train.pairs[i]).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train.labels[i]).collect();
            let reference: Vec<f64> = batch.iter().map(|&i| train_ref[i]).collect();
            let has_both = labels.contains(&1) && labels.contains(&0);
            if config.loss == LossKind::SoftDcf && !has_both {
                continue;
            }
            let (value, grads) = batch_gradients(
                &params,
                &pairs,
                &labels,
                Some(&reference),
                config.loss,
                config.lambda,
            )?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam_step(&mut adam, &mut params, &grads, lr)?;
            loss_sum += value * batch.len() as f64;
            weight += batch.len();
        }
        let train_loss = loss_sum / weight.max(1) as f64;
        let (valid_loss, valid_min_dcf) = evaluate(&params, &valid, &valid_ref, config)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batches.len(),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_min_dcf,
            lr,
        });
        if valid_min_dcf < best.0 && valid_loss <= initial_valid_loss {
            best = (valid_min_dcf, epoch, params.clone());
        }
        if valid_loss < best_valid_loss {
            best_valid_loss = valid_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.lr_halving_patience {
                lr *= 0.5;
                stale = 0;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        initial_params,
        initial_valid_loss,
        initial_valid_min_dcf,
        history,
    })
}

/// Deterministically splits trials into `(train, held_out)` with roughly
/// `fraction` of each class held out.
pub fn split_trials(trials: &[Trial], fraction: f64, seed: u64) -> (Vec<Trial>, Vec<Trial>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for label in [TrialLabel::Target, TrialLabel::Nontarget] {
        let mut idx: Vec<usize> = (0..trials.len())
            .filter(|&i| trials[i].label == label)
            .collect();
        idx.shuffle(&mut rng);
        let cut = ((idx.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(
            usize::from(idx.len() > 1),
            idx.len().saturating_sub(1).max(1).min(idx.len()),
        );
        for (n, i) in idx.into_iter().enumerate() {
            if n < cut {
                held.push(trials[i].clone());
            } else {
                train.push(trials[i].clone());
            }
        }
    }
    (train, held)
}
