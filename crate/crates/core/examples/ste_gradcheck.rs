//! Straight-through router gradient: the forward value is the usual
//! renormalized top-K gate, while the backward pass flows through the dense
//! temperature softmax so unselected experts still learn.

use moelab::numeric;
use moelab::routing;

pub fn run_example() -> moelab::Result<Vec<f64>> {
    let z = [1.2, -0.3, 0.8, 0.1, -1.5, 0.4];
    let tau = 0.5;
    let selected = routing::topk_select(&numeric::softmax(&z, 1.0), 2)?;
    let gates = routing::ste_gate_value(&z, &selected, tau)?;
    let upstream = [1.0, -0.5];
    let grad = routing::ste_backward(&upstream, &z, &selected, tau)?;

    println!("selected experts: {selected:?}");
    println!("forward gates:    {gates:.4?}");
    for (j, g) in grad.iter().enumerate() {
        let tag = if selected.contains(&j) { "selected" } else { "unselected" };
        println!("  dL/dz[{j}] = {g:+.6}  ({tag})");
    }

    // Cross-check against central differences of the surrogate.
    let surrogate = |zz: &[f64]| {
        let p = numeric::softmax(zz, tau);
        selected.iter().zip(&upstream).map(|(&i, u)| u * p[i]).sum::<f64>()
    };
    let fd = numeric::finite_diff_grad(surrogate, &z, 1e-5)?;
    println!("relative error vs finite differences: {:.2e}", numeric::relative_error(&grad, &fd));

    let summary = experiments_summary()?;
    println!("100 random instances: worst relative error {summary:.2e}");
    Ok(grad)
}

fn experiments_summary() -> moelab::Result<f64> {
    Ok(moelab::experiments::ste_gradcheck(12, 100, 7, &[0.5, 1.0, 2.0])?.max_rel_err)
}

pub fn main() -> moelab::Result<()> {
    run_example().map(|_| ())
}
