//! Learns the map from the band-averaged dense-packed-zone height to the
//! height at the separator outlet and applies it to fresh data.
//!
//! ```bash
//! cargo run --release --example outlet_dpz
//! ```

use settler_pinn::domain::SettlerConfig;
use settler_pinn::filter::{outlet_dpz_predict, outlet_dpz_train};

fn main() -> settler_pinn::Result<()> {
    let config = SettlerConfig::default();

    // synthetic wedge behavior: the outlet height grows faster than the
    // average once the zone thickens
    let truth = |avg: f64| 1.1 * avg + 2.0 * avg * avg;
    let mut pairs = Vec::new();
    let mut noise_state = 0x9e3779b97f4a7c15u64;
    let mut noise = || {
        // small deterministic dither standing in for detection error
        noise_state = noise_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((noise_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2.0e-3
    };
    for k in 0..200 {
        let avg = 0.02 + 0.04 * (k as f64 / 199.0);
        pairs.push((avg, truth(avg) + noise()));
    }

    let (model, report) = outlet_dpz_train(&pairs, 0.25, 11, &config)?;
    println!(
        "trained in {} epochs (early stop: {}), validation RMSE {:.2} mm on {} held-out points",
        report.epochs_run,
        report.early_stopped,
        report.val_rmse_m * 1e3,
        report.n_val
    );

    let probe = [0.025, 0.040, 0.055, 0.080];
    let (pred, flags) = outlet_dpz_predict(&model, &probe)?;
    println!("\n{:>10} {:>12} {:>12} {:>14}", "avg/m", "outlet/m", "truth/m", "extrapolated");
    for i in 0..probe.len() {
        println!(
            "{:>10.3} {:>12.4} {:>12.4} {:>14}",
            probe[i],
            pred[i],
            truth(probe[i]),
            flags[i]
        );
    }
    Ok(())
}
