//! Tracks the unmeasured phase heights from outlet flow measurements with
//! the ensemble filter, starting from a searched initial state.
//!
//! ```bash
//! cargo run --release --example state_estimation
//! ```

use settler_pinn::domain::SettlerConfig;
use settler_pinn::filter::{run_filter, FilterStep};
use settler_pinn::mech::{
    balanced_equilibrium, generate_pretrain_dataset, simulate_trajectory, stepwise_schedule,
    NoiseSpec, QBotPolicy,
};
use settler_pinn::train::*;

fn main() -> settler_pinn::Result<()> {
    let config = SettlerConfig::default();
    let m3h = 1.0 / 3600.0;
    let schedule = stepwise_schedule(&[1.0 * m3h, 1.5 * m3h, 1.0 * m3h], 60);
    let initial = balanced_equilibrium(1.0 * m3h, &config)?;
    let noise = NoiseSpec { sigma_h: 0.002, sigma_q: 5.0e-7, seed: 31 };
    let twin = simulate_trajectory(&initial, &schedule, &QBotPolicy::BalancedValve, Some(&noise), &config)?;

    let sim = generate_pretrain_dataset(40, &config, 42)?;
    let pre_data = segments_to_train_data(&sim, &config);
    let ft_data = trajectory_to_train_data(&settler_pinn::io::trajectory_to_rows(&twin), &config)?;
    let colloc = CollocationSet::sample(600, 100, &config, 43)?;
    let ensemble = train_ensemble(
        ModelKind::Pinn,
        3,
        1000,
        &[
            StagePlan { schedule: TrainSchedule::pretrain_default().with_epochs(200, 20), data: &pre_data },
            StagePlan { schedule: TrainSchedule::finetune_default().with_epochs(150, 10), data: &ft_data },
        ],
        &colloc,
        &config,
    )?;

    let steps: Vec<FilterStep> = twin
        .steps
        .iter()
        .map(|s| FilterStep { tau_s: s.tau_s, q_in: s.q_in, y: [s.q_bot, s.q_top] })
        .collect();
    let outcome = run_filter(&ensemble.models(), &steps, &config, 5)?;

    println!(
        "initial estimate ({:.4}, {:.4}) m vs truth ({:.4}, {:.4}) m",
        outcome.mean_estimates[0][0],
        outcome.mean_estimates[0][1],
        twin.steps[0].h_hp_true,
        twin.steps[0].h_dp_true
    );
    println!("\n{:>6} {:>12} {:>12} {:>12} {:>12}", "tau/s", "est h_HP", "true h_HP", "est h_DP", "true h_DP");
    for k in (0..outcome.mean_estimates.len()).step_by(20) {
        let e = outcome.mean_estimates[k];
        let t = &twin.steps[k];
        println!(
            "{:>6} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
            t.tau_s, e[0], t.h_hp_true, e[1], t.h_dp_true
        );
    }
    let last = outcome.mean_estimates.last().unwrap();
    let t = twin.steps.last().unwrap();
    println!(
        "\nfinal absolute error: h_HP {:.2} mm, h_DP {:.2} mm ({} skipped updates)",
        (last[0] - t.h_hp_true).abs() * 1e3,
        (last[1] - t.h_dp_true).abs() * 1e3,
        outcome.skipped_updates
    );
    Ok(())
}
