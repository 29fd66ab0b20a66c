use settler_pinn::domain::SettlerConfig;
use settler_pinn::mech;
use settler_pinn::nn::DualTrace;
use settler_pinn::train::*;

fn height_val_rmse(m: &settler_pinn::nn::MlpModel, config: &SettlerConfig) -> (f64, f64) {
    let val = mech::generate_pretrain_dataset(100, config, 777).unwrap();
    let val_data = segments_to_train_data(&val, config);
    let mut trace = DualTrace::new(m);
    let (mut s0, mut s1) = (0.0f64, 0.0f64);
    for row in &val_data.rows {
        m.eval_into(&row.input, None, &mut trace).unwrap();
        s0 += (trace.outputs[0] - row.targets[0]).powi(2);
        s1 += (trace.outputs[1] - row.targets[1]).powi(2);
    }
    let n = val_data.rows.len() as f64;
    ((s0/n).sqrt(), (s1/n).sqrt())
}

#[test]
fn dbg_starvation() {
    let config = SettlerConfig::default();
    let sim = mech::generate_pretrain_dataset(100, &config, 42).unwrap();
    let data = segments_to_train_data(&sim, &config);
    let mut data_noz = data.clone();
    for r in &mut data_noz.rows { r.z_targets = None; }
    let colloc = CollocationSet::sample(2000, 200, &config, 43).unwrap();

    // trivial predictor baseline: h(t) := h0
    {
        let val = mech::generate_pretrain_dataset(100, &config, 777).unwrap();
        let val_data = segments_to_train_data(&val, &config);
        let (mut s0, mut s1) = (0.0f64, 0.0);
        for row in &val_data.rows {
            s0 += (row.input[1]/0.2 - row.targets[0]).powi(2);
            s1 += (row.input[2]/0.2 - row.targets[1]).powi(2);
        }
        let n = val_data.rows.len() as f64;
        println!("identity baseline: h_hp {:.2e} h_dp {:.2e}", (s0/n).sqrt(), (s1/n).sqrt());
    }

    // PINN with IDW (current default)
    let schedule = TrainSchedule::pretrain_default().with_epochs(500, 50);
    let m = train_member(ModelKind::Pinn, 0, 1000, &[StagePlan { schedule, data: &data }], &colloc, &config).unwrap();
    let (a, b) = height_val_rmse(&m.model, &config);
    println!("PINN idw:    h_hp {a:.2e} h_dp {b:.2e}");

    // PINN without IDW (all weights stay 1)
    let mut s2 = schedule; s2.idw_enabled = false;
    let m = train_member(ModelKind::Pinn, 0, 1000, &[StagePlan { schedule: s2, data: &data }], &colloc, &config).unwrap();
    let (a, b) = height_val_rmse(&m.model, &config);
    println!("PINN no-idw: h_hp {a:.2e} h_dp {b:.2e}");

    // VNN (data+init only)
    let mut s3 = schedule; s3.n_out = 4;
    let m = train_member(ModelKind::Vnn, 0, 1000, &[StagePlan { schedule: s3, data: &data_noz }], &colloc, &config).unwrap();
    let (a, b) = height_val_rmse(&m.model, &config);
    println!("VNN idw:     h_hp {a:.2e} h_dp {b:.2e}");
}
