//! EER, minDCF, actDCF and the sigmoid-relaxed DCF on small score sets.

use nplda::metrics::{dcf, eer, min_dcf, soft_dcf, CostParams, MetricReport, ScoreSet};

fn main() -> nplda::Result<()> {
    let ss = ScoreSet::from_classes(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.75])?;
    println!("EER = {:.4}", eer(&ss)?);

    let toy = ScoreSet::from_classes(&[1.0, 2.0], &[0.0, 3.0])?;
    let unit = CostParams::from_beta(1.0)?;
    let (best, theta) = min_dcf(&toy, &unit)?;
    println!(
        "dcf at 1.5 = {:.4}, min_dcf = {best:.4} at threshold {theta}",
        dcf(&toy, &unit, 1.5)?
    );

    let cost = CostParams::default();
    println!(
        "beta from (c_miss, c_fa, p_target) = (1, 1, 0.01): {:.4}",
        cost.beta
    );

    // the soft cost approaches the hard one as alpha grows
    let spread = ScoreSet::from_classes(&[2.0, 3.0, 5.5], &[-1.0, 0.0, 4.0])?;
    let hard = dcf(&spread, &unit, 1.0)?;
    for alpha in [1.0, 5.0, 20.0, 100.0] {
        println!(
            "alpha {alpha:>5}: soft {:.6} vs hard {hard:.6}",
            soft_dcf(&spread, &unit, 1.0, alpha)?
        );
    }

    print!("{}", MetricReport::compute(&spread, &cost)?);
    Ok(())
}
