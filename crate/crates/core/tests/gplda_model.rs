mod common;

use nalgebra::{DMatrix, DVector};
use nplda::gplda::*;
use nplda::linalg::{relative_frobenius, spd_inverse, spd_logdet};
use nplda::synth::{generate, PhiSpec, SigmaSpec, SynthSpec};

use common::{normal_vec, random_gplda, rng};

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x - mean;
    let inv = spd_inverse(cov, "cov").unwrap();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
        + spd_logdet(cov, "cov").unwrap()
        + d.dot(&(&inv * &d)))
}

/// Same-speaker versus different-speaker joint densities, computed directly.
fn brute_force_llr(model: &GPLDAModel, e: &DVector<f64>, t: &DVector<f64>) -> f64 {
    let k = model.dim();
    let tot = model.total_covariance();
    let ac = model.across_class_covariance();
    let mut joint = DMatrix::zeros(2 * k, 2 * k);
    joint.view_mut((0, 0), (k, k)).copy_from(&tot);
    joint.view_mut((k, k), (k, k)).copy_from(&tot);
    joint.view_mut((0, k), (k, k)).copy_from(&ac);
    joint.view_mut((k, 0), (k, k)).copy_from(&ac);
    let stacked = DVector::from_iterator(2 * k, e.iter().chain(t.iter()).copied());
    let mean2 = DVector::from_iterator(2 * k, model.mu.iter().chain(model.mu.iter()).copied());
    log_gauss(&stacked, &mean2, &joint)
        - log_gauss(e, &model.mu, &tot)
        - log_gauss(t, &model.mu, &tot)
}

#[test]
fn score_matrices_give_the_exact_llr_up_to_a_constant() {
    let mut r = rng(8);
    for _ in 0..10 {
        let model = random_gplda(&mut r, 5, 3);
        let sm = derive_score_matrices(&model).unwrap();
        let mut offsets = Vec::new();
        for _ in 0..50 {
            let e = normal_vec(&mut r, 5) + &model.mu;
            let t = normal_vec(&mut r, 5) + &model.mu;
            let (ec, tc) = (&e - &model.mu, &t - &model.mu);
            let half_q =
                0.5 * (ec.dot(&(&sm.q * &ec)) + tc.dot(&(&sm.q * &tc))) + ec.dot(&(&sm.p * &tc));
            offsets.push(brute_force_llr(&model, &e, &t) - half_q);
        }
        let spread = offsets.iter().cloned().fold(f64::MIN, f64::max)
            - offsets.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-9, "spread {spread}");
    }
}

#[test]
fn printed_score_differs_from_llr_only_in_the_q_weight() {
    let mut r = rng(9);
    let model = random_gplda(&mut r, 4, 4);
    let sm = derive_score_matrices(&model).unwrap();
    let e = normal_vec(&mut r, 4);
    let t = normal_vec(&mut r, 4);
    let s = gplda_score(&sm, &e, &t).unwrap();
    let quad = e.dot(&(&sm.q * &e)) + t.dot(&(&sm.q * &t));
    let cross = e.dot(&(&sm.p * &t));
    assert!((s - quad - cross).abs() < 1e-12);
}

#[test]
fn score_is_symmetric_and_matrices_are_symmetric() {
    let mut r = rng(10);
    let model = random_gplda(&mut r, 6, 2);
    let sm = derive_score_matrices(&model).unwrap();
    assert!((&sm.p - sm.p.transpose()).amax() < 1e-12);
    assert!((&sm.q - sm.q.transpose()).amax() < 1e-12);
    for _ in 0..20 {
        let e = normal_vec(&mut r, 6);
        let t = normal_vec(&mut r, 6);
        let a = gplda_score(&sm, &e, &t).unwrap();
        let b = gplda_score(&sm, &t, &e).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn em_recovers_generating_covariances() {
    let spec = SynthSpec {
        dim: 6,
        rank: 2,
        n_speakers: 600,
        segments_per_speaker: 15,
        phi: PhiSpec::Random {
            spectrum: vec![2.0, 1.0],
            seed: 3,
        },
        sigma: SigmaSpec::Diagonal {
            values: vec![0.3, 0.5, 0.7, 0.9, 1.1, 1.3],
            rotation_seed: Some(4),
        },
        mean: None,
        seed: 5,
        id_prefix: String::new(),
    };
    let archive = generate(&spec).unwrap();
    let fit = fit_gplda_em(
        &archive,
        &GpldaConfig {
            rank: Some(2),
            iterations: 40,
            ..GpldaConfig::default()
        },
    )
    .unwrap();
    let phi = spec.phi_matrix().unwrap();
    let true_ac = &phi * phi.transpose();
    let true_sigma = spec.sigma_matrix().unwrap();
    assert!(relative_frobenius(&fit.model.across_class_covariance(), &true_ac) < 0.15);
    assert!(relative_frobenius(&fit.model.sigma, &true_sigma) < 0.05);
    assert!(fit.model.mu.amax() < 0.3);
    assert_eq!(fit.log_likelihoods.len(), 41);
}

#[test]
fn em_log_likelihood_matches_direct_density() {
    // per speaker, the joint Gaussian density of the stacked records; the
    // mean is the data mean held by the statistics
    let mut r = rng(12);
    let model = random_gplda(&mut r, 3, 2);
    let groups: Vec<Vec<DVector<f64>>> = (0..4)
        .map(|s| (0..s + 1).map(|_| normal_vec(&mut r, 3)).collect())
        .collect();
    let stats = SpeakerStats::from_groups(&groups);
    let ll = log_likelihood(&model, &stats).unwrap();

    let mut direct = 0.0;
    for g in &groups {
        let n = g.len();
        let k = 3;
        let ac = model.across_class_covariance();
        let mut cov = DMatrix::zeros(n * k, n * k);
        for i in 0..n {
            for j in 0..n {
                let block = if i == j {
                    model.total_covariance()
                } else {
                    ac.clone()
                };
                cov.view_mut((i * k, j * k), (k, k)).copy_from(&block);
            }
        }
        let x = DVector::from_iterator(n * k, g.iter().flat_map(|v| v.iter().copied()));
        let m = DVector::from_iterator(n * k, (0..n).flat_map(|_| stats.mean.iter().copied()));
        direct += log_gauss(&x, &m, &cov);
    }
    assert!(
        (ll - direct).abs() < 1e-8 * direct.abs().max(1.0),
        "{ll} vs {direct}"
    );
}

#[test]
fn too_few_speakers_is_an_error() {
    let archive = generate(&SynthSpec::isotropic(3, 1, 5, 1.0, 1)).unwrap();
    assert!(fit_gplda_em(&archive, &GpldaConfig::default()).is_err());
}

#[test]
fn averaging_per_speaker_still_fits() {
    let archive = generate(&SynthSpec::isotropic(4, 50, 6, 0.5, 2)).unwrap();
    let fit = fit_gplda_em(
        &archive,
        &GpldaConfig {
            average_per_speaker: true,
            ..GpldaConfig::default()
        },
    )
    .unwrap();
    assert!(fit.model.validate().is_ok());
    for w in fit.log_likelihoods.windows(2) {
        assert!(w[1] >= w[0] - 1e-8);
    }
}
