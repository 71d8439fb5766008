//! The P and Q matrices of a PLDA model and the quadratic trial score.

use nalgebra::{DMatrix, DVector};
use nplda::gplda::{derive_score_matrices, gplda_score, GPLDAModel};

fn main() -> nplda::Result<()> {
    // one dimension, unit speaker and channel variance
    let model = GPLDAModel {
        phi: DMatrix::from_element(1, 1, 1.0),
        sigma: DMatrix::from_element(1, 1, 1.0),
        mu: DVector::zeros(1),
    };
    let sm = derive_score_matrices(&model)?;
    println!("Q = {:.6}, P = {:.6}", sm.q[(0, 0)], sm.p[(0, 0)]);
    let one = DVector::from_element(1, 1.0);
    let minus = DVector::from_element(1, -1.0);
    println!("score(1, 1)  = {:.6}", gplda_score(&sm, &one, &one)?);
    println!("score(1, -1) = {:.6}", gplda_score(&sm, &one, &minus)?);

    // the score is symmetric in its two arguments
    let model = GPLDAModel {
        phi: DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.4, 0.8, 0.3, 0.1]),
        sigma: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.7, 0.9])),
        mu: DVector::zeros(3),
    };
    let sm = derive_score_matrices(&model)?;
    let e = DVector::from_vec(vec![0.3, -1.0, 0.5]);
    let t = DVector::from_vec(vec![0.1, -0.8, 0.9]);
    println!(
        "s(e, t) = {:.6}, s(t, e) = {:.6}",
        gplda_score(&sm, &e, &t)?,
        gplda_score(&sm, &t, &e)?
    );
    Ok(())
}
