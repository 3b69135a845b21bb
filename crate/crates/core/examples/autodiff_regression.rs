//! Fits a two-layer network to `y = sin(x)` with the tape and Adam, after
//! checking its gradients against finite differences.

use ivd_lookonce::numkit::{dense, grad_check, init_dense, Graph, GraphFn, OptimizerState, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ivd_lookonce::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamStore::new();
    init_dense(&mut params, "fc1", 1, 16, &mut rng)?;
    init_dense(&mut params, "fc2", 16, 1, &mut rng)?;

    let xs: Vec<f64> = (0..32).map(|i| -3.0 + 6.0 * i as f64 / 31.0).collect();
    let x = Tensor::matrix(32, 1, xs.clone())?;
    let y = Tensor::matrix(32, 1, xs.iter().map(|v| v.sin()).collect())?;

    let mut loss_fn = GraphFn(|g: &mut Graph, p: &ParamStore| {
        let input = g.input(x.clone());
        let h = dense(g, p, "fc1", input)?;
        let h = g.sigmoid(h);
        let out = dense(g, p, "fc2", h)?;
        g.mse(out, &y)
    });
    let report = grad_check(&mut loss_fn, &mut params, 1e-4)?;
    println!("gradient check: max relative error {:.2e}", report.max_rel_error());

    let mut opt = OptimizerState::adam(0.05);
    for step in 0..=400 {
        let mut g = Graph::new();
        let loss = (loss_fn.0)(&mut g, &params)?;
        if step % 100 == 0 {
            println!("step {step:>3}  mse {:.5}", g.value(loss).item());
        }
        g.backward(loss)?;
        params.zero_grad();
        g.accumulate_into(&mut params)?;
        opt.step(&mut params)?;
    }
    Ok(())
}
