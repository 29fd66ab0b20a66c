//! Pretrains a small physics-informed surrogate ensemble on synthetic
//! segments and reports the loss trajectory.
//!
//! ```bash
//! cargo run --release --example pretrain_pinn
//! ```

use settler_pinn::domain::SettlerConfig;
use settler_pinn::mech::generate_pretrain_dataset;
use settler_pinn::train::*;

fn main() -> settler_pinn::Result<()> {
    let config = SettlerConfig::default();
    let sim = generate_pretrain_dataset(30, &config, 42)?;
    let data = segments_to_train_data(&sim, &config);
    let colloc = CollocationSet::sample(500, 100, &config, 43)?;
    println!(
        "pretraining on {} rows, {} physics points, {} init points",
        data.rows.len(),
        colloc.physics.len(),
        colloc.init.len()
    );

    let schedule = TrainSchedule::pretrain_default().with_epochs(150, 20);
    let ensemble = train_ensemble(
        ModelKind::Pinn,
        2,
        1000,
        &[StagePlan { schedule, data: &data }],
        &colloc,
        &config,
    )?;

    for member in &ensemble.members {
        let first = member.history.first().unwrap();
        let last = member.history.last().unwrap();
        println!(
            "member {} (seed {}): total {:.3e} -> {:.3e}; final weights λ1={:.2} λ2={:.2} λg={:.2} λz={:.2}",
            member.index,
            member.seed,
            first.loss_total,
            last.loss_total,
            last.lambda_1,
            last.lambda_2,
            last.lambda_g,
            last.lambda_z,
        );
    }

    let dir = std::env::temp_dir().join("settler_pretrain_example");
    std::fs::create_dir_all(&dir)?;
    for member in &ensemble.members {
        member
            .model
            .save(&dir.join(format!("member_{:03}.mlp", member.index)))?;
    }
    println!("models written to {}", dir.display());
    Ok(())
}
