//! Compare the analytic gradient of the probe-KD objective with central
//! differences.

use probekd::distill::{objective_loss_grad, KdWeights, LogitTarget, FeatureTarget, ObjectiveBatch, ObjectiveParams};
use probekd::numkern::{softmax, DenseMatrix, Mlp, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, m, c) = (4, 6, 3);
    let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let inputs = DenseMatrix::from_vec(n, m, gauss(n * m))?;
    let rows = (0..n).map(|_| softmax(&gauss(c), 1.0)).collect::<Result<Vec<_>, _>>()?;
    let batch = ObjectiveBatch {
        inputs,
        labels: vec![0, 2, 1, 1],
        logits: LogitTarget::Probe(rows),
        features: FeatureTarget::None,
    };
    let params = ObjectiveParams { student: Mlp::<f64>::init(m, 5, c, &mut ChaCha8Rng::seed_from_u64(2)), projections: vec![] };
    let weights = KdWeights::default();

    let (parts, grads) = objective_loss_grad(&params, &batch, &weights)?;
    let analytic = grads.flat();
    let theta = params.flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let eval = |delta: f64| {
            let mut p = params.clone();
            let mut t = theta.clone();
            t[i] += delta;
            p.assign_flat(&t);
            objective_loss_grad(&p, &batch, &weights).map(|(l, _)| l.total)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((numeric - analytic[i]).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6));
    }
    println!("loss {:.6} over {} parameters, worst relative error {worst:.2e}", parts.total, theta.len());
    Ok(())
}
