//! Checks the network's exact derivatives against central finite differences:
//! time derivatives, input Jacobians, and parameter gradients of a composite
//! loss including derivative terms.
//!
//! ```bash
//! cargo run --release --example autodiff_check
//! ```

use settler_pinn::domain::SettlerConfig;
use settler_pinn::nn::DualTrace;
use settler_pinn::train::{build_surrogate, ModelKind};

fn main() -> settler_pinn::Result<()> {
    let config = SettlerConfig::default();
    let model = build_surrogate(ModelKind::Pinn, &config, 7)?;
    let input = [0.4, 0.08, 0.04, 4.0e-4];

    // time derivative of every output vs finite differences
    let jvp = model.jvp_time(&input)?;
    let h = 1e-6;
    let mut plus = input;
    let mut minus = input;
    plus[0] += h;
    minus[0] -= h;
    let (yp, ym) = (model.forward(&plus)?, model.forward(&minus)?);
    println!("{:>8} {:>14} {:>14} {:>10}", "output", "exact d/dt", "central diff", "rel err");
    for j in 0..model.n_outputs() {
        let fd = (yp[j] - ym[j]) / (2.0 * h);
        let rel = (jvp[j] - fd).abs() / fd.abs().max(1e-12);
        println!("{:>8} {:>14.6e} {:>14.6e} {:>10.2e}", j, jvp[j], fd, rel);
    }

    // state Jacobian used by the estimation filter
    let jac = model.input_jacobian(&input, &[0, 1], &[1, 2])?;
    println!("\nstate Jacobian (scaled heights per meter):");
    for row in &jac {
        println!("  [{:>12.6} {:>12.6}]", row[0], row[1]);
    }

    // parameter gradient of a scalar functional containing the t-derivative
    let dir = [1.0, 0.0, 0.0, 0.0];
    let mut trace = DualTrace::new(&model);
    model.eval_into(&input, Some(&dir), &mut trace)?;
    let gy = vec![0.3; model.n_outputs()];
    let gyt = vec![-0.2; model.n_outputs()];
    let mut grad = vec![0.0; model.n_params()];
    model.backprop_into(&trace, &gy, Some(&gyt), &mut grad)?;

    let objective = |m: &settler_pinn::nn::MlpModel| -> f64 {
        let mut tr = DualTrace::new(m);
        m.eval_into(&input, Some(&dir), &mut tr).unwrap();
        (0..m.n_outputs())
            .map(|j| gy[j] * tr.outputs[j] + gyt[j] * tr.d_outputs[j])
            .sum()
    };
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let theta0 = model.params().to_vec();
    for k in (0..theta0.len()).step_by(97) {
        let mut theta = theta0.clone();
        theta[k] += h;
        probe.set_params(&theta)?;
        let fp = objective(&probe);
        theta[k] -= 2.0 * h;
        probe.set_params(&theta)?;
        let fm = objective(&probe);
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((grad[k] - fd).abs() / fd.abs().max(1e-8));
    }
    println!("\nworst parameter-gradient relative error vs finite differences: {worst:.2e}");
    Ok(())
}
