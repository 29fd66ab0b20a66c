//! Runs the two-stage pipeline at a small scale: synthetic pretraining on an
//! approximate closure, then fine-tuning on noisy trajectories of the twin.
//!
//! ```bash
//! cargo run --release --example two_stage_training
//! ```

use settler_pinn::domain::SettlerConfig;
use settler_pinn::mech::{
    balanced_equilibrium, generate_pretrain_dataset, simulate_trajectory, stepwise_schedule,
    NoiseSpec, QBotPolicy, SubmodelSpec,
};
use settler_pinn::train::*;

fn main() -> settler_pinn::Result<()> {
    // the plant: reference closure; the model: a biased approximation of it
    let plant = SettlerConfig::default();
    let mut approx = SettlerConfig::default();
    approx.submodel = SubmodelSpec::SaturatingSurrogate {
        k_s: 5.5e-3,
        k_c: 3.5e-3,
        h_half: 0.13,
    };

    let sim = generate_pretrain_dataset(40, &approx, 42)?;
    let pre_data = segments_to_train_data(&sim, &approx);

    let m3h = 1.0 / 3600.0;
    let schedule_q = stepwise_schedule(&[1.0 * m3h, 1.5 * m3h, 2.0 * m3h, 1.5 * m3h, 1.0 * m3h], 60);
    let initial = balanced_equilibrium(1.0 * m3h, &plant)?;
    let noise = NoiseSpec { sigma_h: 0.002, sigma_q: 5.0e-7, seed: 9 };
    let twin = simulate_trajectory(&initial, &schedule_q, &QBotPolicy::BalancedValve, Some(&noise), &plant)?;
    let rows = settler_pinn::io::trajectory_to_rows(&twin);
    let ft_data = trajectory_to_train_data(&rows, &plant)?;
    println!(
        "pretraining rows {}, fine-tuning rows {}",
        pre_data.rows.len(),
        ft_data.rows.len()
    );

    let colloc = CollocationSet::sample(500, 100, &plant, 43)?;
    let pretrain = TrainSchedule::pretrain_default().with_epochs(150, 20);
    let finetune = TrainSchedule::finetune_default().with_epochs(100, 10);

    let member = train_member(
        ModelKind::Pinn,
        0,
        1000,
        &[
            StagePlan { schedule: pretrain, data: &pre_data },
            StagePlan { schedule: finetune, data: &ft_data },
        ],
        &colloc,
        &plant,
    )?;

    let pre_norm: f64 = member
        .history
        .iter()
        .filter(|r| r.stage == StageKind::Pretrain)
        .map(|r| r.loss_total)
        .fold(f64::INFINITY, f64::min);
    let fin_norm: f64 = member
        .history
        .iter()
        .filter(|r| r.stage == StageKind::Finetune)
        .map(|r| r.loss_total)
        .fold(f64::INFINITY, f64::min);
    println!("best pretrain total {pre_norm:.3e}; best fine-tune total {fin_norm:.3e}");
    println!(
        "model stage tag after the pipeline: {:?}",
        member.model.stage()
    );
    Ok(())
}
