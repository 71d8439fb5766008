//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test --test acceptance`.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use nplda::baselines::{dplda_score, DPLDAModel};
use nplda::dataio::{EmbeddingArchive, ResolvedTrials, TrialLabel};
use nplda::gplda::{derive_score_matrices, fit_gplda_em, gplda_score, GpldaBackend, GpldaConfig};
use nplda::linalg::{column_mean, relative_frobenius, scatter_about};
use nplda::metrics::{dcf, eer, min_dcf, soft_dcf, soft_dcf_grad, CostParams, ScoreSet};
use nplda::nplda::{forward, forward_batch, init_from_gplda, NPLDAParams, BLOCK_NAMES};
use nplda::preprocess::PreprocessPipeline;
use nplda::synth::{generate, PhiSpec, SigmaSpec, SynthSpec};
use nplda::trainer::{
    batch_gradients, batch_loss, sample_trials, train_nplda, LossKind, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::RngExt;

use common::{normal_mat, normal_vec, random_gplda, random_symmetric, rng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// NPLDA built from a fitted GPLDA scores trials exactly like GPLDA.
fn epoch_zero_equivalence() -> Outcome {
    let archive = generate(&SynthSpec::isotropic(24, 80, 8, 0.5, 101)).map_err(e2s)?;
    let pipeline = PreprocessPipeline::fit(&archive, Some(16)).map_err(e2s)?;
    let processed = pipeline.apply_archive(&archive).map_err(e2s)?;
    let fit = fit_gplda_em(&processed, &GpldaConfig::default()).map_err(e2s)?;
    let sm = derive_score_matrices(&fit.model).map_err(e2s)?;
    let params = init_from_gplda(&pipeline, &fit.model, &sm, &[99.0], 20.0).map_err(e2s)?;
    let backend = GpldaBackend::new(pipeline, fit.model).map_err(e2s)?;

    let mut r = rng(5);
    let recs = archive.records();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let e = r.random_range(0..recs.len());
        let t = r.random_range(0..recs.len());
        let a = forward(&params, &recs[e].vector, &recs[t].vector).map_err(e2s)?;
        let b = backend
            .score(&recs[e].vector, &recs[t].vector)
            .map_err(e2s)?;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-10, || {
        format!("max |nplda - gplda| = {worst:e}")
    })?;
    Ok(format!("10000 trials, max abs diff {worst:.2e}"))
}

fn random_params(r: &mut rand_chacha::ChaCha8Rng, d: usize, k: usize) -> NPLDAParams {
    NPLDAParams {
        a1: normal_mat(r, k, d) * 0.5,
        b1: normal_vec(r, k) * 0.3,
        a2: nalgebra::DMatrix::identity(k, k) + normal_mat(r, k, k) * 0.2,
        b2: normal_vec(r, k) * 0.2,
        p: random_symmetric(r, k, 0.3),
        q: random_symmetric(r, k, 0.3),
        thresholds: vec![normal_vec(r, 1)[0] * 0.5, normal_vec(r, 1)[0] * 0.5],
        betas: vec![99.0, 9.0],
        alpha: 20.0,
    }
}

/// Analytic backward pass against central differences, per block.
fn gradient_check() -> Outcome {
    let (d, k, batch) = (10, 8, 32);
    let h = 1e-5;
    let mut r = rng(17);
    let mut worst = vec![0.0f64; BLOCK_NAMES.len()];
    for _ in 0..20 {
        let params = random_params(&mut r, d, k);
        for _ in 0..5 {
            let xs: Vec<DVector<f64>> = (0..2 * batch).map(|_| normal_vec(&mut r, d)).collect();
            let pairs: Vec<_> = (0..batch).map(|i| (&xs[2 * i], &xs[2 * i + 1])).collect();
            let mut labels: Vec<u8> = (0..batch).map(|i| u8::from(i < 8)).collect();
            labels.shuffle(&mut r);
            let (_, grads) =
                batch_gradients(&params, &pairs, &labels, None, LossKind::SoftDcf, 0.0)
                    .map_err(e2s)?;
            let analytic = grads.blocks();
            for (b, (name, g)) in analytic.iter().enumerate() {
                let mut max_diff = 0.0f64;
                let mut scale = 0.0f64;
                for i in 0..g.len() {
                    let mut plus = params.clone();
                    plus.blocks_mut()[b].1[i] += h;
                    let mut minus = params.clone();
                    minus.blocks_mut()[b].1[i] -= h;
                    let lp = batch_loss(&plus, &pairs, &labels, None, LossKind::SoftDcf, 0.0)
                        .map_err(e2s)?;
                    let lm = batch_loss(&minus, &pairs, &labels, None, LossKind::SoftDcf, 0.0)
                        .map_err(e2s)?;
                    let numeric = (lp - lm) / (2.0 * h);
                    max_diff = max_diff.max((g[i] - numeric).abs());
                    scale = scale.max(numeric.abs()).max(g[i].abs());
                }
                let rel = max_diff / scale.max(1e-8);
                ensure(rel <= 1e-4, || {
                    format!("block {name}: relative error {rel:e}")
                })?;
                worst[b] = worst[b].max(rel);
            }
        }
    }
    let summary: Vec<String> = BLOCK_NAMES
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n}={w:.1e}"))
        .collect();
    Ok(format!(
        "100 batches at k=8, max rel err {}",
        summary.join(" ")
    ))
}

/// With every score at least 0.5 from the threshold, alpha = 100 makes the
/// soft cost match the hard one.
fn soft_hard_convergence() -> Outcome {
    let mut r = rng(23);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let beta: f64 = r.random_range(1.0..200.0);
        let cp = CostParams::from_beta(beta).map_err(e2s)?;
        let theta: f64 = r.random_range(-3.0..3.0);
        let n = r.random_range(2..150);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let off: f64 = 0.5 + r.random_range(0.0..3.0);
                if r.random_bool(0.5) {
                    theta + off
                } else {
                    theta - off
                }
            })
            .collect();
        let ss = ScoreSet::new(scores, labels).map_err(e2s)?;
        let diff = (soft_dcf(&ss, &cp, theta, 100.0).map_err(e2s)?
            - dcf(&ss, &cp, theta).map_err(e2s)?)
        .abs();
        ensure(diff <= 1e-3 * (1.0 + beta), || {
            format!("beta={beta}: |soft - hard| = {diff:e}")
        })?;
        worst = worst.max(diff / (1.0 + beta));
    }
    Ok(format!("100 sets, max |soft-hard|/(1+beta) = {worst:.2e}"))
}

/// Sweep minimum against evaluating the cost just at and just above every
/// distinct score.
fn min_dcf_oracle() -> Outcome {
    let mut r = rng(31);
    for set in 0..1000 {
        let n = r.random_range(2..=200);
        let tied = set % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let z = normal_vec(&mut r, 1)[0] * 2.0;
                if tied {
                    (z * 2.0).round() / 2.0
                } else {
                    z
                }
            })
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        let beta = [1.0, 9.0, 99.0, r.random_range(0.1..500.0)][set % 4];
        let cp = CostParams::from_beta(beta).map_err(e2s)?;
        let ss = ScoreSet::new(scores.clone(), labels).map_err(e2s)?;
        let mut oracle = f64::INFINITY;
        let candidates = scores
            .iter()
            .flat_map(|&s| [s, s.next_up(), s.next_down()])
            .chain([f64::NEG_INFINITY, f64::INFINITY]);
        for theta in candidates {
            oracle = oracle.min(dcf(&ss, &cp, theta).map_err(e2s)?);
        }
        let (swept, theta) = min_dcf(&ss, &cp).map_err(e2s)?;
        ensure(swept == oracle, || {
            format!("set {set}: sweep {swept} vs oracle {oracle}")
        })?;
        let at = dcf(&ss, &cp, theta).map_err(e2s)?;
        ensure(at == swept, || {
            format!("set {set}: cost at reported threshold {at} vs {swept}")
        })?;
    }
    Ok("1000 sets, exact match".into())
}

/// Quadratic-expansion weights assembled from (P, Q, mu) reproduce PLDA.
fn dplda_equivalence() -> Outcome {
    let mut r = rng(41);
    let model = random_gplda(&mut r, 6, 4);
    let sm = derive_score_matrices(&model).map_err(e2s)?;
    let w = DPLDAModel::from_score_matrices(&sm, &model.mu);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let e = normal_vec(&mut r, 6);
        let t = normal_vec(&mut r, 6);
        let a = dplda_score(&w, &e, &t).map_err(e2s)?;
        let b = gplda_score(&sm, &(&e - &model.mu), &(&t - &model.mu)).map_err(e2s)?;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-10, || format!("max diff {worst:e}"))?;
    Ok(format!("10000 pairs, max abs diff {worst:.2e}"))
}

fn mismatch_spec(sigma_values: Vec<f64>, rotation_seed: u64, seed: u64, prefix: &str) -> SynthSpec {
    SynthSpec {
        dim: 40,
        rank: 32,
        n_speakers: 200,
        segments_per_speaker: 10,
        phi: PhiSpec::Random {
            spectrum: vec![0.3],
            seed: 900,
        },
        sigma: SigmaSpec::Diagonal {
            values: sigma_values,
            rotation_seed: Some(rotation_seed),
        },
        mean: None,
        seed,
        id_prefix: prefix.into(),
    }
}

fn min_dcf_of(scores: Vec<f64>, labels: Vec<u8>, cp: &CostParams) -> Result<f64, String> {
    Ok(min_dcf(&ScoreSet::new(scores, labels).map_err(e2s)?, cp)
        .map_err(e2s)?
        .0)
}

/// Train on (Phi, Sigma), validate and test on (Phi, 1.2 Sigma).
fn synthetic_improvement() -> Outcome {
    let train_sigma: Vec<f64> = (0..40).map(|i| 0.5 + 1.5 * i as f64 / 39.0).collect();
    let held_sigma: Vec<f64> = train_sigma.iter().map(|s| 1.2 * s).collect();
    let train = generate(&mismatch_spec(train_sigma, 11, 1, "tr-")).map_err(e2s)?;
    let held = generate(&mismatch_spec(held_sigma, 11, 2, "ho-")).map_err(e2s)?;
    let combined = EmbeddingArchive::new(
        40,
        train
            .records()
            .iter()
            .chain(held.records())
            .cloned()
            .collect(),
    )
    .map_err(e2s)?;

    let pipeline = PreprocessPipeline::fit(&train, Some(32)).map_err(e2s)?;
    let fit = fit_gplda_em(
        &pipeline.apply_archive(&train).map_err(e2s)?,
        &GpldaConfig::default(),
    )
    .map_err(e2s)?;
    let sm = derive_score_matrices(&fit.model).map_err(e2s)?;
    let init = init_from_gplda(&pipeline, &fit.model, &sm, &[99.0], 20.0).map_err(e2s)?;
    let backend = GpldaBackend::new(pipeline, fit.model).map_err(e2s)?;

    let train_trials = sample_trials(&train, 2000, 10, 3).map_err(e2s)?;
    let valid_trials = sample_trials(&held, 1000, 10, 4).map_err(e2s)?;
    let config = TrainConfig {
        batch_size: 1024,
        lr: 2e-4,
        max_epochs: 20,
        ..TrainConfig::default()
    };
    let outcome =
        train_nplda(init, &train_trials, &valid_trials, &combined, &config).map_err(e2s)?;

    let resolved = ResolvedTrials::resolve(&valid_trials, &combined).map_err(e2s)?;
    let recs = combined.records();
    let pairs: Vec<_> = resolved
        .pairs
        .iter()
        .map(|&(e, t)| (&recs[e].vector, &recs[t].vector))
        .collect();
    let gplda_scores = pairs
        .iter()
        .map(|(e, t)| backend.score(e, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e2s)?;
    let nplda_scores = forward_batch(&outcome.params, &pairs).map_err(e2s)?;
    let cp = CostParams::from_beta(99.0).map_err(e2s)?;
    let gplda_dcf = min_dcf_of(gplda_scores, resolved.labels.clone(), &cp)?;
    let nplda_dcf = min_dcf_of(nplda_scores.clone(), resolved.labels.clone(), &cp)?;
    ensure(nplda_dcf <= gplda_dcf, || {
        format!("held-out minDCF nplda {nplda_dcf} > gplda {gplda_dcf}")
    })?;

    let soft = |params: &NPLDAParams| -> Result<f64, String> {
        let s = forward_batch(params, &pairs).map_err(e2s)?;
        Ok(
            soft_dcf_grad(&s, &resolved.labels, 99.0, params.thresholds[0], 20.0)
                .map_err(e2s)?
                .value,
        )
    };
    let (soft0, soft_best) = (soft(&outcome.initial_params)?, soft(&outcome.params)?);
    ensure(soft_best <= soft0, || {
        format!("validation soft DCF {soft_best} > epoch-0 {soft0}")
    })?;

    let test_trials = sample_trials(&held, 1000, 10, 5).map_err(e2s)?;
    let test = ResolvedTrials::resolve(&test_trials, &combined).map_err(e2s)?;
    let test_pairs: Vec<_> = test
        .pairs
        .iter()
        .map(|&(e, t)| (&recs[e].vector, &recs[t].vector))
        .collect();
    let test_g = test_pairs
        .iter()
        .map(|(e, t)| backend.score(e, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e2s)?;
    let test_n = forward_batch(&outcome.params, &test_pairs).map_err(e2s)?;
    let test_gd = min_dcf_of(test_g, test.labels.clone(), &cp)?;
    let test_nd = min_dcf_of(test_n, test.labels.clone(), &cp)?;

    Ok(format!(
        "valid minDCF gplda {gplda_dcf:.4} -> nplda {nplda_dcf:.4} ({:+.1}%), soft DCF {soft0:.4} -> {soft_best:.4}, \
         best epoch {}, second held-out list {test_gd:.4} -> {test_nd:.4} ({:+.1}%)",
        100.0 * (nplda_dcf - gplda_dcf) / gplda_dcf,
        outcome.best_epoch,
        100.0 * (test_nd - test_gd) / test_gd,
    ))
}

/// Monotone EM likelihood and a total covariance close to the sample one.
fn em_sanity() -> Outcome {
    let mut worst_drop = 0.0f64;
    for i in 0..20u64 {
        let mut r = rng(1000 + i);
        let dim = r.random_range(3..8);
        let mut spec = SynthSpec::isotropic(
            dim,
            r.random_range(10..40),
            r.random_range(2..8),
            r.random_range(0.2..2.0),
            i,
        );
        spec.rank = r.random_range(1..=dim);
        let archive = generate(&spec).map_err(e2s)?;
        let config = GpldaConfig {
            rank: Some(r.random_range(1..=dim)),
            iterations: 15,
            ..GpldaConfig::default()
        };
        let fit = fit_gplda_em(&archive, &config).map_err(e2s)?;
        for w in fit.log_likelihoods.windows(2) {
            ensure(w[1] >= w[0] - 1e-8, || {
                format!("dataset {i}: log-likelihood fell {} -> {}", w[0], w[1])
            })?;
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    let archive = generate(&SynthSpec::isotropic(10, 200, 20, 0.7, 77)).map_err(e2s)?;
    let fit = fit_gplda_em(&archive, &GpldaConfig::default()).map_err(e2s)?;
    let x = archive.to_matrix();
    let sample = scatter_about(&x, &column_mean(&x));
    let err = relative_frobenius(&fit.model.total_covariance(), &sample);
    ensure(err <= 0.10, || {
        format!("total covariance off by {:.1}%", 100.0 * err)
    })?;
    Ok(format!(
        "20 datasets monotone (largest drop {worst_drop:.1e}), total covariance rel err {:.2}%",
        100.0 * err
    ))
}

fn metric_ground_truths() -> Outcome {
    let round4 = |x: f64| (x * 1e4).round() / 1e4;
    let ss = ScoreSet::from_classes(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.75]).map_err(e2s)?;
    let e = eer(&ss).map_err(e2s)?;
    ensure(round4(e) == round4(1.0 / 3.0), || format!("eer {e}"))?;
    let ss = ScoreSet::from_classes(&[1.0, 2.0], &[0.0, 3.0]).map_err(e2s)?;
    let cp = CostParams::from_beta(1.0).map_err(e2s)?;
    let hard = dcf(&ss, &cp, 1.5).map_err(e2s)?;
    let (min, _) = min_dcf(&ss, &cp).map_err(e2s)?;
    ensure(round4(hard) == 1.0 && round4(min) == 0.5, || {
        format!("dcf {hard}, min_dcf {min}")
    })?;
    let beta = CostParams::new(1.0, 1.0, 0.01).map_err(e2s)?.beta;
    ensure(round4(beta) == 99.0, || format!("beta {beta}"))?;
    Ok(format!(
        "eer={:.4} dcf={hard:.4} min_dcf={min:.4} beta={beta:.4}",
        e
    ))
}

fn run_pipeline(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let bin = env!("CARGO_BIN_EXE_nplda");
    fs::write(
        dir.join("spec.txt"),
        "dim = 12\nspeakers = 40\nsegments_per_speaker = 6\nsigma = 0.5\nseed = 7\n",
    )
    .map_err(e2s)?;
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "gen-synth".into(),
            "--spec".into(),
            p("spec.txt"),
            "--out".into(),
            p("train.emb"),
        ],
        vec![
            "sample-trials".into(),
            "--archive".into(),
            p("train.emb"),
            "--out".into(),
            p("trials.txt"),
            "--targets".into(),
            "200".into(),
        ],
        vec![
            "train-backend".into(),
            "nplda".into(),
            "--archive".into(),
            p("train.emb"),
            "--trials".into(),
            p("trials.txt"),
            "--out".into(),
            p("model.bin"),
            "--epochs".into(),
            "3".into(),
            "--batch-size".into(),
            "512".into(),
            "--lda-dim".into(),
            "10".into(),
        ],
        vec![
            "score".into(),
            "--model".into(),
            p("model.bin"),
            "--archive".into(),
            p("train.emb"),
            "--trials".into(),
            p("trials.txt"),
            "--out".into(),
            p("scores.txt"),
        ],
    ];
    for args in &steps {
        let out = Command::new(bin).args(args).output().map_err(e2s)?;
        ensure(out.status.success(), || {
            format!(
                "{} failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr)
            )
        })?;
    }
    let eval = Command::new(bin)
        .args(["evaluate", "--scores", &p("scores.txt")])
        .output()
        .map_err(e2s)?;
    ensure(eval.status.success(), || {
        String::from_utf8_lossy(&eval.stderr).into_owned()
    })?;
    let mut outputs = Vec::new();
    for f in [
        "train.emb",
        "trials.txt",
        "model.bin",
        "model.bin.history.csv",
        "scores.txt",
    ] {
        outputs.push(fs::read(dir.join(f)).map_err(e2s)?);
    }
    outputs.push(eval.stdout);
    Ok(outputs)
}

/// Two full CLI runs with the default seed give byte-identical artifacts.
fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    let names = [
        "archive",
        "trials",
        "model",
        "history",
        "scores",
        "evaluate output",
    ];
    for ((x, y), name) in first.iter().zip(&second).zip(names) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    let scores = String::from_utf8_lossy(&first[4]);
    ensure(scores.lines().count() == 2200, || {
        "expected 2200 score lines".into()
    })?;
    ensure(
        scores
            .lines()
            .all(|l| l.ends_with(&TrialLabel::Target.to_string()) || l.ends_with("nontarget")),
        || "score lines lack labels".into(),
    )?;
    Ok(format!("{} artifacts identical", names.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        (
            "epoch-0 equivalence",
            epoch_zero_equivalence,
            Duration::from_secs(10),
        ),
        (
            "gradient correctness",
            gradient_check,
            Duration::from_secs(60),
        ),
        (
            "soft-to-hard DCF convergence",
            soft_hard_convergence,
            Duration::from_secs(5),
        ),
        ("minDCF oracle", min_dcf_oracle, Duration::from_secs(30)),
        (
            "DPLDA/GPLDA equivalence",
            dplda_equivalence,
            Duration::from_secs(5),
        ),
        (
            "end-to-end synthetic improvement",
            synthetic_improvement,
            Duration::from_secs(600),
        ),
        ("EM sanity", em_sanity, Duration::from_secs(120)),
        (
            "metric ground truths",
            metric_ground_truths,
            Duration::from_secs(1),
        ),
        ("determinism", determinism, Duration::from_secs(600)),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let number = (i + 1).to_string();
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| *f == number || name.contains(f.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= *budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}"))
            }
        });
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name} [{elapsed:.2?}] {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} [{elapsed:.2?}] {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
