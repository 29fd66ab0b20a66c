//! Chained open-loop simulation: a small trained ensemble predicts the twin
//! trajectory one second at a time, feeding each prediction forward.
//!
//! ```bash
//! cargo run --release --example forward_simulation
//! ```

use settler_pinn::domain::SettlerConfig;
use settler_pinn::filter::chain_forward;
use settler_pinn::mech::{
    balanced_equilibrium, generate_pretrain_dataset, simulate_trajectory, stepwise_schedule,
    QBotPolicy,
};
use settler_pinn::train::*;

fn main() -> settler_pinn::Result<()> {
    let config = SettlerConfig::default();
    let m3h = 1.0 / 3600.0;
    let schedule = stepwise_schedule(&[1.0 * m3h, 1.5 * m3h, 1.0 * m3h], 60);
    let initial = balanced_equilibrium(1.0 * m3h, &config)?;
    let twin = simulate_trajectory(&initial, &schedule, &QBotPolicy::BalancedValve, None, &config)?;
    let rows = settler_pinn::io::trajectory_to_rows(&twin);

    // a quick two-stage ensemble, small enough to train in under a minute
    let sim = generate_pretrain_dataset(40, &config, 42)?;
    let pre_data = segments_to_train_data(&sim, &config);
    let ft_data = trajectory_to_train_data(&rows, &config)?;
    let colloc = CollocationSet::sample(600, 100, &config, 43)?;
    let ensemble = train_ensemble(
        ModelKind::Pinn,
        2,
        1000,
        &[
            StagePlan { schedule: TrainSchedule::pretrain_default().with_epochs(200, 20), data: &pre_data },
            StagePlan { schedule: TrainSchedule::finetune_default().with_epochs(150, 10), data: &ft_data },
        ],
        &colloc,
        &config,
    )?;

    let rollout = chain_forward(
        &ensemble.models(),
        [initial.h_hp, initial.h_dp],
        &schedule,
        &config,
    )?;
    let mut se = [0.0, 0.0];
    for (k, s) in twin.steps.iter().enumerate() {
        se[0] += (rollout.mean[k][0] - s.h_hp_true).powi(2);
        se[1] += (rollout.mean[k][1] - s.h_dp_true).powi(2);
    }
    let n = twin.steps.len() as f64;
    println!(
        "ensemble-mean rollout RMSE over {} s: h_HP {:.2} mm, h_DP {:.2} mm",
        twin.steps.len(),
        (se[0] / n).sqrt() * 1e3,
        (se[1] / n).sqrt() * 1e3
    );
    println!("states clipped to the operating box during rollout: {}", rollout.clipped_steps);
    Ok(())
}
