//! Compare the analytic network gradients with central differences.

use nalgebra::{DMatrix, DVector};
use nplda::nplda::NPLDAParams;
use nplda::trainer::{batch_gradients, batch_loss, LossKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> nplda::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut normal = |r: usize, c: usize, s: f64| {
        DMatrix::from_fn(r, c, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        })
    };
    let (d, k) = (6, 4);
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let params = NPLDAParams {
        a1: normal(k, d, 0.5),
        b1: normal(k, 1, 0.3).column(0).into(),
        a2: DMatrix::identity(k, k) + normal(k, k, 0.2),
        b2: normal(k, 1, 0.2).column(0).into(),
        p: sym(normal(k, k, 0.3)),
        q: sym(normal(k, k, 0.3)),
        thresholds: vec![0.1],
        betas: vec![99.0],
        alpha: 20.0,
    };
    let xs: Vec<DVector<f64>> = (0..20)
        .map(|_| normal(d, 1, 1.0).column(0).into())
        .collect();
    let pairs: Vec<_> = (0..10).map(|i| (&xs[2 * i], &xs[2 * i + 1])).collect();
    let labels: Vec<u8> = (0..10).map(|i| u8::from(i < 3)).collect();

    let (loss, grads) = batch_gradients(&params, &pairs, &labels, None, LossKind::SoftDcf, 0.0)?;
    println!("soft DCF on the batch: {loss:.6}");
    let h = 1e-5;
    for (b, (name, g)) in grads.blocks().iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..g.len() {
            let mut plus = params.clone();
            plus.blocks_mut()[b].1[i] += h;
            let mut minus = params.clone();
            minus.blocks_mut()[b].1[i] -= h;
            let fd = (batch_loss(&plus, &pairs, &labels, None, LossKind::SoftDcf, 0.0)?
                - batch_loss(&minus, &pairs, &labels, None, LossKind::SoftDcf, 0.0)?)
                / (2.0 * h);
            worst = worst.max((fd - g[i]).abs());
        }
        println!("{name:>10}: max |analytic - numeric| = {worst:.2e}");
    }
    Ok(())
}
