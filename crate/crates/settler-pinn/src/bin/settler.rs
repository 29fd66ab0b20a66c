//! Command-line pipeline driver.
//!
//! Every subcommand is deterministic given its flags and seeds, writes its
//! outputs atomically, and records a manifest sufficient to reproduce the
//! run bit-exactly (see `replay`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settler_pinn::domain::{SettlerConfig, SettlerState};
use settler_pinn::error::{Error, Result};
use settler_pinn::filter::{
    chain_forward, outlet_dpz_predict, outlet_dpz_train, run_filter, FilterStep,
};
use settler_pinn::io::{
    self, evaluate_heights, plot_heights, replay_args, PlotSeries, RunManifest, SeriesStyle,
    TrajectoryRow,
};
use settler_pinn::mech::{
    balanced_equilibrium, generate_pretrain_dataset, simulate_trajectory, NoiseSpec, QBotPolicy,
};
use settler_pinn::nn::MlpModel;
use settler_pinn::train::{
    segments_to_train_data, trajectory_to_train_data, train_ensemble, CollocationSet, ModelKind,
    StagePlan, TrainSchedule,
};

#[derive(Parser)]
#[command(
    name = "settler",
    version,
    about = "Gravity-settler twin simulation, surrogate training, and phase-height estimation"
)]
struct Cli {
    /// Configuration file (TOML); defaults are used when omitted.
    #[arg(long, global = true, env = "SETTLER_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pretraining dataset by Latin-hypercube sampling.
    GenerateData(GenerateDataArgs),
    /// Simulate a synthetic experimental trajectory from a schedule file.
    MakeTwin(MakeTwinArgs),
    /// Pretrain a surrogate ensemble on a segment dataset.
    Pretrain(TrainArgs),
    /// Fine-tune a pretrained ensemble on a measured trajectory.
    Finetune(FinetuneArgs),
    /// Chained open-loop simulation of a trained ensemble along a trajectory.
    Simulate(SimulateArgs),
    /// Estimate phase heights from flow measurements with the ensemble filter.
    Estimate(EstimateArgs),
    /// Train or apply the average-to-outlet height network.
    OutletDpz(OutletArgs),
    /// Compare a predicted trajectory against ground truth.
    Evaluate(EvaluateArgs),
    /// Emit per-figure CSV and SVG plots for a simulation or estimation run.
    Plot(PlotArgs),
    /// Re-execute a recorded run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct GenerateDataArgs {
    /// Number of one-second segments.
    #[arg(long, default_value_t = 1000)]
    segments: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeTwinArgs {
    /// Schedule file: CSV with columns level_m3h,hold_s.
    #[arg(long)]
    schedule: PathBuf,
    /// Height measurement noise, meters.
    #[arg(long, default_value_t = 0.0)]
    noise_h: f64,
    /// Flow measurement noise, m³/s.
    #[arg(long, default_value_t = 0.0)]
    noise_q: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output trajectory CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Ensemble size.
    #[arg(long, default_value_t = 40)]
    members: usize,
    /// Segment dataset CSV from generate-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// Adam epochs (reference schedule when omitted).
    #[arg(long)]
    adam_epochs: Option<usize>,
    /// L-BFGS iterations (reference schedule when omitted).
    #[arg(long)]
    lbfgs_iters: Option<usize>,
    /// Physics collocation points.
    #[arg(long, default_value_t = 10000)]
    physics_points: usize,
    /// Initial-condition collocation points.
    #[arg(long, default_value_t = 1000)]
    init_points: usize,
    /// Train the data-driven baseline instead of the physics-informed model.
    #[arg(long, default_value_t = false)]
    vnn: bool,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Directory holding pretrained member models.
    #[arg(long)]
    models: PathBuf,
    /// Measured trajectory CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[arg(long)]
    adam_epochs: Option<usize>,
    #[arg(long)]
    lbfgs_iters: Option<usize>,
    #[arg(long, default_value_t = 10000)]
    physics_points: usize,
    #[arg(long, default_value_t = 1000)]
    init_points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory holding trained member models.
    #[arg(long)]
    models: PathBuf,
    /// Trajectory CSV providing the control schedule and initial heights.
    #[arg(long)]
    trajectory: PathBuf,
    /// Output trajectory CSV (ensemble mean; member columns alongside).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    models: PathBuf,
    /// Trajectory CSV with flow measurements (heights optional).
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    /// Output directory for per-member and mean estimation CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OutletArgs {
    /// Train on a trajectory CSV carrying detection heights.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Predict for a trajectory CSV using --model.
    #[arg(long)]
    predict: Option<PathBuf>,
    /// Model file to write (train) or read (predict).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    val_split: f64,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Output CSV for predictions.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Convergence threshold on absolute height error, meters.
    #[arg(long, default_value_t = 0.005)]
    threshold: f64,
    /// Output report (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory produced by simulate or estimate.
    #[arg(long)]
    run: PathBuf,
    /// Truth-bearing trajectory CSV to overlay.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest of the run to re-execute.
    #[arg(long)]
    manifest: PathBuf,
    /// Fresh output location.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error category={} message={e}", e.category());
            ExitCode::from(error_code(&e))
        }
    }
}

fn error_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "parse" => 3,
        "domain" => 4,
        "numeric" | "singularity" | "divergence" => 5,
        "model-format" => 6,
        "training" => 7,
        "filter" => 8,
        _ => 1,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<SettlerConfig> {
    match path {
        Some(p) => SettlerConfig::load(p),
        None => Ok(SettlerConfig::default()),
    }
}

fn write_manifest(
    dir: &Path,
    subcommand: &str,
    args: BTreeMap<String, String>,
    config: &SettlerConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = RunManifest::new(subcommand, args, config.to_toml()?);
    manifest.save(&dir.join("manifest.json"))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = load_config(&cli.config)?;
    match &cli.command {
        Command::GenerateData(a) => generate_data(a, &config),
        Command::MakeTwin(a) => make_twin(a, &config),
        Command::Pretrain(a) => pretrain(a, &config),
        Command::Finetune(a) => finetune(a, &config),
        Command::Simulate(a) => simulate(a, &config),
        Command::Estimate(a) => estimate(a, &config),
        Command::OutletDpz(a) => outlet(a, &config),
        Command::Evaluate(a) => evaluate(a, &config),
        Command::Plot(a) => plot(a, &config),
        Command::Replay(a) => replay(a),
    }
}

fn generate_data(a: &GenerateDataArgs, config: &SettlerConfig) -> Result<()> {
    let data = generate_pretrain_dataset(a.segments, config, a.seed)?;
    io::write_segment_csv(&a.out.join("segments.csv"), &data)?;
    let mut args = BTreeMap::new();
    args.insert("segments".into(), a.segments.to_string());
    args.insert("seed".into(), a.seed.to_string());
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&a.out, "generate-data", args, config)?;
    log::info!(
        "wrote {} segments ({} redrawn) to {}",
        data.segments.len(),
        data.resampled,
        a.out.display()
    );
    Ok(())
}

/// Schedule CSV rows: inlet level in m³/h and hold duration in seconds.
#[derive(serde::Deserialize)]
struct ScheduleRow {
    level_m3h: f64,
    hold_s: usize,
}

fn read_schedule(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::Reader::from_reader(file);
    let mut schedule = Vec::new();
    for row in reader.deserialize::<ScheduleRow>() {
        let row = row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        schedule.extend(std::iter::repeat(row.level_m3h / 3600.0).take(row.hold_s));
    }
    if schedule.is_empty() {
        return Err(Error::Config("schedule file has no rows".into()));
    }
    Ok(schedule)
}

fn make_twin(a: &MakeTwinArgs, config: &SettlerConfig) -> Result<()> {
    let schedule = read_schedule(&a.schedule)?;
    let initial = balanced_equilibrium(schedule[0], config)?;
    let noise = if a.noise_h > 0.0 || a.noise_q > 0.0 {
        Some(NoiseSpec {
            sigma_h: a.noise_h,
            sigma_q: a.noise_q,
            seed: a.seed,
        })
    } else {
        None
    };
    let traj = simulate_trajectory(
        &initial,
        &schedule,
        &QBotPolicy::BalancedValve,
        noise.as_ref(),
        config,
    )?;
    if let Some(reason) = &traj.truncated {
        log::warn!("twin truncated: {reason}");
    }
    let mut rows = io::trajectory_to_rows(&traj);
    // eight detection positions spread around the band average; the outlet
    // position sits deepest in the wedge
    let weights = [0.85, 0.90, 0.95, 1.00, 1.00, 1.05, 1.10, 1.20];
    let correction = 8.0 / weights.iter().sum::<f64>();
    for row in &mut rows {
        if let Some(h) = row.h_dp_m {
            let mut dets = [None; 8];
            for (slot, w) in dets.iter_mut().zip(weights) {
                *slot = Some(h * w * correction);
            }
            row.set_detection_heights(dets);
        }
    }
    io::write_trajectory_csv(&a.out, &rows)?;
    let dir = a.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut args = BTreeMap::new();
    args.insert("schedule".into(), a.schedule.display().to_string());
    args.insert("noise-h".into(), a.noise_h.to_string());
    args.insert("noise-q".into(), a.noise_q.to_string());
    args.insert("seed".into(), a.seed.to_string());
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&dir, "make-twin", args, config)?;
    log::info!("wrote {} twin rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn save_ensemble(
    dir: &Path,
    outcome: &settler_pinn::train::EnsembleOutcome,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut seeds = BTreeMap::new();
    for member in &outcome.members {
        let name = format!("member_{:03}.mlp", member.index);
        member.model.save(&dir.join(&name))?;
        settler_pinn::train::write_history_csv(
            &dir.join(format!("history_{:03}.csv", member.index)),
            &member.history,
        )?;
        seeds.insert(name, member.seed);
    }
    let seed_manifest = serde_json::json!({
        "base_seed": seed,
        "member_seeds": seeds,
        "failures": outcome.failures,
    });
    io::write_atomic(
        &dir.join("seeds.json"),
        serde_json::to_string_pretty(&seed_manifest)
            .map_err(|e| Error::Numeric(e.to_string()))?
            .as_bytes(),
    )
}

fn load_ensemble(dir: &Path) -> Result<Vec<MlpModel>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "mlp").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .mlp model files found in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| MlpModel::load(p)).collect()
}

fn pretrain(a: &TrainArgs, config: &SettlerConfig) -> Result<()> {
    let dataset = io::read_segment_csv(&a.data)?;
    let mut data = segments_to_train_data(&dataset, config);
    let kind = if a.vnn { ModelKind::Vnn } else { ModelKind::Pinn };
    let mut schedule = TrainSchedule::pretrain_default();
    if let Some(e) = a.adam_epochs {
        schedule.adam_epochs = e;
    }
    if let Some(l) = a.lbfgs_iters {
        schedule.lbfgs_iters = l;
    }
    if a.vnn {
        schedule.n_out = 4;
        for row in &mut data.rows {
            row.z_targets = None;
        }
    }
    let colloc =
        CollocationSet::sample(a.physics_points, a.init_points, config, a.seed ^ 0x00c0_110c)?;
    let outcome = train_ensemble(
        kind,
        a.members,
        a.seed,
        &[StagePlan { schedule, data: &data }],
        &colloc,
        config,
    )?;
    save_ensemble(&a.out, &outcome, a.seed)?;
    let mut args = BTreeMap::new();
    args.insert("members".into(), a.members.to_string());
    args.insert("data".into(), a.data.display().to_string());
    args.insert("seed".into(), a.seed.to_string());
    args.insert("adam-epochs".into(), schedule.adam_epochs.to_string());
    args.insert("lbfgs-iters".into(), schedule.lbfgs_iters.to_string());
    args.insert("physics-points".into(), a.physics_points.to_string());
    args.insert("init-points".into(), a.init_points.to_string());
    args.insert("vnn".into(), a.vnn.to_string());
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&a.out, "pretrain", args, config)?;
    log::info!(
        "pretrained {} members ({} failures) into {}",
        outcome.members.len(),
        outcome.failures.len(),
        a.out.display()
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs, config: &SettlerConfig) -> Result<()> {
    let models = load_ensemble(&a.models)?;
    let rows = io::read_trajectory_csv(&a.data)?;
    let data = trajectory_to_train_data(&rows, config)?;
    let mut schedule = TrainSchedule::finetune_default();
    if let Some(e) = a.adam_epochs {
        schedule.adam_epochs = e;
    }
    if let Some(l) = a.lbfgs_iters {
        schedule.lbfgs_iters = l;
    }
    let colloc =
        CollocationSet::sample(a.physics_points, a.init_points, config, a.seed ^ 0x00c0_110c)?;

    // continue each member from its pretrained parameters
    use rayon::prelude::*;
    let results: Vec<Result<settler_pinn::train::StageOutcome>> = models
        .par_iter()
        .map(|model| {
            let kind = if model.n_outputs() == 6 {
                ModelKind::Pinn
            } else {
                ModelKind::Vnn
            };
            settler_pinn::train::train_stage(
                kind,
                model.clone(),
                &schedule,
                &data,
                &colloc,
                config,
                settler_pinn::train::LossWeights::default(),
            )
        })
        .collect();
    std::fs::create_dir_all(&a.out)?;
    let mut failures: Vec<(usize, String)> = Vec::new();
    let mut saved = 0usize;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(outcome) => {
                outcome
                    .model
                    .save(&a.out.join(format!("member_{i:03}.mlp")))?;
                settler_pinn::train::write_history_csv(
                    &a.out.join(format!("history_{i:03}.csv")),
                    &outcome.history,
                )?;
                saved += 1;
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if saved * 5 < models.len() * 4 {
        return Err(Error::Training(format!(
            "only {saved}/{} members fine-tuned successfully",
            models.len()
        )));
    }
    for (i, e) in &failures {
        log::warn!("member {i} failed fine-tuning: {e}");
    }
    let mut args = BTreeMap::new();
    args.insert("models".into(), a.models.display().to_string());
    args.insert("data".into(), a.data.display().to_string());
    args.insert("seed".into(), a.seed.to_string());
    args.insert("adam-epochs".into(), schedule.adam_epochs.to_string());
    args.insert("lbfgs-iters".into(), schedule.lbfgs_iters.to_string());
    args.insert("physics-points".into(), a.physics_points.to_string());
    args.insert("init-points".into(), a.init_points.to_string());
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&a.out, "finetune", args, config)?;
    log::info!("fine-tuned {saved} members into {}", a.out.display());
    Ok(())
}

fn simulate(a: &SimulateArgs, config: &SettlerConfig) -> Result<()> {
    let models = load_ensemble(&a.models)?;
    let rows = io::read_trajectory_csv(&a.trajectory)?;
    if rows.is_empty() {
        return Err(Error::Domain("trajectory is empty".into()));
    }
    let schedule: Vec<f64> = rows
        .iter()
        .map(|r| {
            r.q_in_m3s
                .ok_or_else(|| Error::Domain(format!("row at tau {} lacks q_in", r.tau_s)))
        })
        .collect::<Result<_>>()?;
    let first = &rows[0];
    let (h0, d0) = match (
        first.h_hp_m.or(first.truth_h_hp_m),
        first.h_dp_m.or(first.truth_h_dp_m),
    ) {
        (Some(h), Some(d)) => (h, d),
        _ => return Err(Error::Domain("first row must carry initial heights".into())),
    };
    SettlerState::new(h0, d0, &config.geometry)?;
    let rollout = chain_forward(&models, [h0, d0], &schedule, config)?;

    let mut out_rows = Vec::with_capacity(rows.len());
    for (k, r) in rows.iter().enumerate() {
        out_rows.push(TrajectoryRow {
            tau_s: r.tau_s,
            q_in_m3s: r.q_in_m3s,
            h_hp_m: Some(rollout.mean[k][0]),
            h_dp_m: Some(rollout.mean[k][1]),
            truth_h_hp_m: r.truth_h_hp_m,
            truth_h_dp_m: r.truth_h_dp_m,
            ..Default::default()
        });
    }
    std::fs::create_dir_all(&a.out)?;
    io::write_trajectory_csv(&a.out.join("rollout.csv"), &out_rows)?;
    write_member_heights_csv(&a.out.join("rollout_members.csv"), &rows, &rollout.members)?;

    let mut args = BTreeMap::new();
    args.insert("models".into(), a.models.display().to_string());
    args.insert("trajectory".into(), a.trajectory.display().to_string());
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&a.out, "simulate", args, config)?;
    log::info!(
        "chained rollout over {} steps ({} clipped) into {}",
        schedule.len(),
        rollout.clipped_steps,
        a.out.display()
    );
    Ok(())
}

fn write_member_heights_csv(
    path: &Path,
    rows: &[TrajectoryRow],
    members: &[Vec<[f64; 2]>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["tau_s".to_string()];
    for i in 0..members.len() {
        header.push(format!("member_{i}_h_hp_m"));
        header.push(format!("member_{i}_h_dp_m"));
    }
    w.write_record(&header)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    for (k, r) in rows.iter().enumerate() {
        let mut rec = vec![r.tau_s.to_string()];
        for m in members {
            rec.push(m[k][0].to_string());
            rec.push(m[k][1].to_string());
        }
        w.write_record(&rec)
            .map_err(|e| Error::Numeric(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?;
    io::write_atomic(path, &bytes)
}

fn estimate(a: &EstimateArgs, config: &SettlerConfig) -> Result<()> {
    let models = load_ensemble(&a.models)?;
    let rows = io::read_trajectory_csv(&a.trajectory)?;
    let steps: Vec<FilterStep> = rows
        .iter()
        .map(|r| match (r.q_in_m3s, r.q_bot_m3s, r.q_top_m3s) {
            (Some(q_in), Some(qb), Some(qt)) => Ok(FilterStep {
                tau_s: r.tau_s,
                q_in,
                y: [qb, qt],
            }),
            _ => Err(Error::Domain(format!(
                "row at tau {} lacks flow measurements",
                r.tau_s
            ))),
        })
        .collect::<Result<_>>()?;
    let outcome = run_filter(&models, &steps, config, a.seed)?;

    std::fs::create_dir_all(&a.out)?;
    for member in &outcome.members {
        io::write_estimation_csv(
            &a.out.join(format!("member_{:03}.csv", member.member)),
            &member.rows,
        )?;
    }
    // ensemble-mean estimate as a trajectory CSV, truth carried through
    let mut mean_rows = Vec::with_capacity(outcome.mean_estimates.len());
    for (k, est) in outcome.mean_estimates.iter().enumerate() {
        mean_rows.push(TrajectoryRow {
            tau_s: rows[k].tau_s,
            q_in_m3s: rows[k].q_in_m3s,
            q_bot_m3s: rows[k].q_bot_m3s,
            q_top_m3s: rows[k].q_top_m3s,
            h_hp_m: Some(est[0]),
            h_dp_m: Some(est[1]),
            truth_h_hp_m: rows[k].truth_h_hp_m,
            truth_h_dp_m: rows[k].truth_h_dp_m,
            ..Default::default()
        });
    }
    io::write_trajectory_csv(&a.out.join("mean_estimate.csv"), &mean_rows)?;

    // metrics against truth columns when present
    if rows.iter().any(|r| r.truth_h_hp_m.is_some()) {
        let report = evaluate_heights(&mean_rows, &rows, 0.005)?;
        report.save(&a.out.join("metrics.json"))?;
    }
    let mut args = BTreeMap::new();
    args.insert("models".into(), a.models.display().to_string());
    args.insert("trajectory".into(), a.trajectory.display().to_string());
    args.insert("seed".into(), a.seed.to_string());
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&a.out, "estimate", args, config)?;
    log::info!(
        "filtered {} steps with {} members ({} skipped updates) into {}",
        steps.len(),
        models.len(),
        outcome.skipped_updates,
        a.out.display()
    );
    Ok(())
}

fn outlet(a: &OutletArgs, config: &SettlerConfig) -> Result<()> {
    match (&a.train, &a.predict) {
        (Some(train_path), None) => {
            let rows = io::read_trajectory_csv(train_path)?;
            let pairs: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| match (r.h_dp_m, r.h_4_3) {
                    (Some(avg), Some(outlet)) => Some((avg, outlet)),
                    _ => None,
                })
                .collect();
            if pairs.len() < 2 {
                return Err(Error::Domain(
                    "training trajectory needs h_dp_m and h_4_3 columns".into(),
                ));
            }
            let (model, report) = outlet_dpz_train(&pairs, a.val_split, a.seed, config)?;
            model.save(&a.model)?;
            log::info!(
                "outlet map trained on {} pairs: {} epochs, validation RMSE {:.3e} m",
                pairs.len(),
                report.epochs_run,
                report.val_rmse_m
            );
            let dir = a.model.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut args = BTreeMap::new();
            args.insert("train".into(), train_path.display().to_string());
            args.insert("model".into(), a.model.display().to_string());
            args.insert("val-split".into(), a.val_split.to_string());
            args.insert("seed".into(), a.seed.to_string());
            write_manifest(&dir, "outlet-dpz", args, config)?;
            Ok(())
        }
        (None, Some(predict_path)) => {
            let model = MlpModel::load(&a.model)?;
            let rows = io::read_trajectory_csv(predict_path)?;
            let series: Vec<f64> = rows.iter().filter_map(|r| r.h_dp_m).collect();
            let (pred, flags) = outlet_dpz_predict(&model, &series)?;
            let out = a
                .out
                .clone()
                .ok_or_else(|| Error::Config("--out is required with --predict".into()))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["tau_s", "h_dp_avg_m", "h_outlet_m", "extrapolated"])
                .map_err(|e| Error::Numeric(e.to_string()))?;
            let mut i = 0usize;
            for r in &rows {
                if r.h_dp_m.is_some() {
                    w.write_record([
                        r.tau_s.to_string(),
                        series[i].to_string(),
                        pred[i].to_string(),
                        flags[i].to_string(),
                    ])
                    .map_err(|e| Error::Numeric(e.to_string()))?;
                    i += 1;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?;
            io::write_atomic(&out, &bytes)?;
            log::info!("wrote {} outlet predictions to {}", pred.len(), out.display());
            Ok(())
        }
        _ => Err(Error::Config(
            "outlet-dpz requires exactly one of --train or --predict".into(),
        )),
    }
}

fn evaluate(a: &EvaluateArgs, config: &SettlerConfig) -> Result<()> {
    let pred = io::read_trajectory_csv(&a.pred)?;
    let truth = io::read_trajectory_csv(&a.truth)?;
    let report = evaluate_heights(&pred, &truth, a.threshold)?;
    report.save(&a.out)?;
    for m in &report.ensemble_mean {
        log::info!(
            "{}: RMSE {:.4e} m, max |err| {:.4e} m, converged at {:?} s",
            m.variable,
            m.rmse,
            m.max_abs_error,
            m.convergence_time_s
        );
    }
    let dir = a.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut args = BTreeMap::new();
    args.insert("pred".into(), a.pred.display().to_string());
    args.insert("truth".into(), a.truth.display().to_string());
    args.insert("threshold".into(), a.threshold.to_string());
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&dir, "evaluate", args, config)?;
    Ok(())
}

fn plot(a: &PlotArgs, config: &SettlerConfig) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mean_path = ["mean_estimate.csv", "rollout.csv"]
        .iter()
        .map(|n| a.run.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::Config(format!(
                "no mean_estimate.csv or rollout.csv under {}",
                a.run.display()
            ))
        })?;
    let mean_rows = io::read_trajectory_csv(&mean_path)?;
    let truth_rows = match &a.trajectory {
        Some(p) => io::read_trajectory_csv(p)?,
        None => mean_rows.clone(),
    };

    type Pick = fn(&TrajectoryRow) -> Option<f64>;
    let channels: [(&str, Pick, Pick, &str); 2] = [
        (
            "h_dp",
            |r| r.h_dp_m,
            |r| r.truth_h_dp_m.or(r.h_dp_m),
            "dense-packed zone height / m",
        ),
        (
            "h_hp",
            |r| r.h_hp_m,
            |r| r.truth_h_hp_m.or(r.h_hp_m),
            "heavy phase height / m",
        ),
    ];
    for (channel, pick_mean, pick_truth, label) in channels {
        let mut series = Vec::new();
        let xs: Vec<f64> = truth_rows.iter().map(|r| r.tau_s).collect();
        let truth_ys: Vec<f64> = truth_rows.iter().filter_map(pick_truth).collect();
        if truth_ys.len() == xs.len() {
            series.push(PlotSeries {
                label: "truth".into(),
                xs: xs.clone(),
                ys: truth_ys,
                style: SeriesStyle::Truth,
            });
        }
        let mut member_paths: Vec<PathBuf> = std::fs::read_dir(&a.run)
            .map(|rd| {
                rd.filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.file_name()
                            .and_then(|n| n.to_str())
                            .map(|n| n.starts_with("member_") && n.ends_with(".csv"))
                            .unwrap_or(false)
                    })
                    .collect()
            })
            .unwrap_or_default();
        member_paths.sort();
        for p in member_paths.iter().take(40) {
            if let Ok((xs, ys)) = read_member_estimation(p, channel) {
                series.push(PlotSeries {
                    label: p
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("member")
                        .to_string(),
                    xs,
                    ys,
                    style: SeriesStyle::Member,
                });
            }
        }
        let mean_xs: Vec<f64> = mean_rows.iter().map(|r| r.tau_s).collect();
        let mean_ys: Vec<f64> = mean_rows.iter().filter_map(pick_mean).collect();
        if mean_ys.len() == mean_xs.len() {
            series.push(PlotSeries {
                label: "ensemble_mean".into(),
                xs: mean_xs,
                ys: mean_ys,
                style: SeriesStyle::EnsembleMean,
            });
        }
        plot_heights(
            &a.out.join(format!("fig_{channel}")),
            &format!("{channel} trajectory"),
            "process time / s",
            label,
            &series,
        )?;
    }
    let mut args = BTreeMap::new();
    args.insert("run".into(), a.run.display().to_string());
    if let Some(t) = &a.trajectory {
        args.insert("trajectory".into(), t.display().to_string());
    }
    args.insert("out".into(), a.out.display().to_string());
    write_manifest(&a.out, "plot", args, config)?;
    log::info!("figures written to {}", a.out.display());
    Ok(())
}

fn read_member_estimation(path: &Path, channel: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::Reader::from_reader(file);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in reader.deserialize::<io::EstimationRow>() {
        let row = row.map_err(|e| Error::Numeric(e.to_string()))?;
        xs.push(row.tau_s);
        ys.push(if channel == "h_dp" {
            row.x_upd_h_dp_m
        } else {
            row.x_upd_h_hp_m
        });
    }
    Ok((xs, ys))
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    let argv = replay_args(&manifest, &a.out)?;
    log::info!("replaying: settler {}", argv.join(" "));
    let mut full = vec!["settler".to_string()];
    full.extend(argv);
    let cli = Cli::try_parse_from(&full)
        .map_err(|e| Error::Config(format!("manifest does not parse into a command: {e}")))?;
    dispatch(&cli)
}
