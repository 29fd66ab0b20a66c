//! Simulates the mechanistic settler twin through a stepwise inlet schedule
//! and prints how the phase heights respond.
//!
//! ```bash
//! cargo run --release --example mechanistic_twin
//! ```

use settler_pinn::domain::SettlerConfig;
use settler_pinn::mech::{balanced_equilibrium, simulate_trajectory, stepwise_schedule, QBotPolicy};

fn main() -> settler_pinn::Result<()> {
    let config = SettlerConfig::default();
    let m3h = 1.0 / 3600.0;
    let levels = [1.0 * m3h, 1.5 * m3h, 2.0 * m3h, 1.5 * m3h, 1.0 * m3h];
    let schedule = stepwise_schedule(&levels, 120);

    let initial = balanced_equilibrium(levels[0], &config)?;
    println!(
        "starting from the balanced state: h_HP = {:.4} m, h_DP = {:.4} m",
        initial.h_hp, initial.h_dp
    );

    let traj = simulate_trajectory(&initial, &schedule, &QBotPolicy::BalancedValve, None, &config)?;
    println!("simulated {} seconds\n", traj.steps.len());
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "tau/s", "q_in/l/s", "q_bot/l/s", "h_HP/m", "h_DP/m");
    for step in traj.steps.iter().step_by(60) {
        println!(
            "{:>6} {:>10.3} {:>10.3} {:>10.4} {:>10.4}",
            step.tau_s,
            step.q_in * 1e3,
            step.q_bot_true * 1e3,
            step.h_hp_true,
            step.h_dp_true
        );
    }

    let peak = traj
        .steps
        .iter()
        .max_by(|a, b| a.h_dp_true.total_cmp(&b.h_dp_true))
        .unwrap();
    println!(
        "\npeak dense-packed zone height {:.4} m at tau = {} s",
        peak.h_dp_true, peak.tau_s
    );
    Ok(())
}
