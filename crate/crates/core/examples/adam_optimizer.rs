//! The Adam update on a badly scaled quadratic.

use nplda::trainer::AdamState;

fn main() -> nplda::Result<()> {
    let mut state = AdamState::new(&[2]);
    let mut x = vec![4.0, 4.0];
    for step in 1..=2000 {
        // f(x) = (x0 - 1)^2 + 100 (x1 + 2)^2
        let g = [2.0 * (x[0] - 1.0), 200.0 * (x[1] + 2.0)];
        state.step(&mut [x.as_mut_slice()], &[&g], 0.02)?;
        if step % 400 == 0 {
            println!("step {step:4}: x = ({:.5}, {:.5})", x[0], x[1]);
        }
    }
    Ok(())
}
