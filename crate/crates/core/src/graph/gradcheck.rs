//! Central finite-difference verification of reverse-mode gradients.

use ndarray::ArrayD;

use super::{Graph, Var};

/// Largest relative error between analytic and numeric gradients of a scalar
/// function, probing every element of `x0` with a central difference.
pub fn max_rel_error<B>(x0: &ArrayD<f64>, eps: f64, build: B) -> f64
where
    B: Fn(&Graph<f64>, Var) -> Var,
{
    let g = Graph::<f64>::new();
    let x = g.leaf(x0.clone());
    let root = build(&g, x);
    g.backward(root);
    let analytic = g
        .grad(x)
        .expect("input did not receive a gradient; is the output independent of it?");

    let eval = |xp: &ArrayD<f64>| -> f64 {
        let g = Graph::<f64>::new();
        let x = g.leaf(xp.clone());
        let root = build(&g, x);
        g.scalar_value(root)
    };

    let mut worst = 0.0_f64;
    let mut flat = x0.clone();
    let n = flat.len();
    for i in 0..n {
        let slot = flat.as_slice_mut().expect("contiguous")[i];
        flat.as_slice_mut().unwrap()[i] = slot + eps;
        let up = eval(&flat);
        flat.as_slice_mut().unwrap()[i] = slot - eps;
        let down = eval(&flat);
        flat.as_slice_mut().unwrap()[i] = slot;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.as_slice().expect("contiguous")[i];
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Panics when any element's relative gradient error exceeds `tol`.
pub fn check_gradients<B>(x0: &ArrayD<f64>, eps: f64, tol: f64, build: B)
where
    B: Fn(&Graph<f64>, Var) -> Var,
{
    let worst = max_rel_error(x0, eps, build);
    assert!(worst <= tol, "gradient check failed: max rel error {worst:.3e} > {tol:.0e}");
}
