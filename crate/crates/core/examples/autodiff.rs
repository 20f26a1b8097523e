//! Builds a small softmax-regression graph, back-propagates, and compares
//! the gradient with central finite differences.
//!
//! cargo run --example autodiff

use mtcool::tensor::{Graph, Tensor};
use mtcool::verify::{finite_diff_grad, relative_error};

fn loss(w: &[f64], grad: bool) -> mtcool::Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(
        vec![3, 2],
        vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8],
    )?);
    let w = g.leaf(Tensor::new(vec![2, 3], w.to_vec())?.with_grad(grad));
    let logits = g.matmul(x, w)?;
    let h = g.relu(logits)?;
    let ce = g.cross_entropy(h, &[0, 2, 1])?;
    if grad {
        g.backward(ce)?;
    }
    Ok((g.scalar(ce).unwrap(), g.grad(w).to_vec()))
}

fn main() -> mtcool::Result<()> {
    let w = [0.3, -0.2, 0.7, 0.1, 0.4, -0.6];
    let (value, analytic) = loss(&w, true)?;
    let numeric = finite_diff_grad(&mut |p| loss(p, false).map(|r| r.0), &w, 1e-6)?;
    println!("loss       {value:.6}");
    println!("autodiff   {analytic:.6?}");
    println!("finite diff {numeric:.6?}");
    println!("relative error {:.2e}", relative_error(&analytic, &numeric));
    Ok(())
}
