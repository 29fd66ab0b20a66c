//! Resampling of raw trajectories onto the one-second grid.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::TrajectoryRow;

/// What [`preprocess`] changed or skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    /// Channels that had no usable samples and were dropped.
    pub dropped_channels: Vec<String>,
    /// (channel, gap start τ, gap end τ) for interior gaps wider than
    /// [`GAP_FLAG_SECONDS`] that linear interpolation bridged.
    pub bridged_gaps: Vec<(String, f64, f64)>,
}

/// Interior sample gaps wider than this many seconds are flagged.
pub const GAP_FLAG_SECONDS: f64 = 3.0;

struct Channel {
    name: &'static str,
    samples: Vec<(f64, f64)>,
}

fn collect_channel(
    rows: &[TrajectoryRow],
    name: &'static str,
    get: impl Fn(&TrajectoryRow) -> Option<f64>,
) -> Channel {
    Channel {
        name,
        samples: rows
            .iter()
            .filter_map(|r| get(r).map(|v| (r.tau_s, v)))
            .collect(),
    }
}

/// Linear interpolation with exact passthrough at sample points; `None`
/// outside the sampled range.
fn interp(samples: &[(f64, f64)], t: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    if t < samples[0].0 || t > samples[samples.len() - 1].0 {
        return None;
    }
    match samples.binary_search_by(|(s, _)| s.partial_cmp(&t).unwrap()) {
        Ok(i) => Some(samples[i].1),
        Err(i) => {
            let (t0, v0) = samples[i - 1];
            let (t1, v1) = samples[i];
            Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
        }
    }
}

/// Linearly resamples every channel of a raw trajectory onto the integer
/// second grid and averages the available optical detection positions into
/// the mean dense-packed-zone height.
///
/// Channels with fewer than two samples are dropped with a warning; interior
/// sample gaps wider than [`GAP_FLAG_SECONDS`] are bridged by the
/// interpolation and flagged in the report. Already-regular one-second input
/// passes through unchanged.
pub fn preprocess(rows: &[TrajectoryRow]) -> Result<(Vec<TrajectoryRow>, PreprocessReport)> {
    if rows.len() < 2 {
        return Err(Error::Domain(
            "preprocess requires at least two rows".into(),
        ));
    }
    let mut report = PreprocessReport::default();

    let channels: Vec<Channel> = vec![
        collect_channel(rows, "q_in_m3s", |r| r.q_in_m3s),
        collect_channel(rows, "q_bot_m3s", |r| r.q_bot_m3s),
        collect_channel(rows, "q_top_m3s", |r| r.q_top_m3s),
        collect_channel(rows, "h_hp_m", |r| r.h_hp_m),
        collect_channel(rows, "h_dp_m", |r| r.h_dp_m),
        collect_channel(rows, "h_3_0", |r| r.h_3_0),
        collect_channel(rows, "h_3_1", |r| r.h_3_1),
        collect_channel(rows, "h_3_2", |r| r.h_3_2),
        collect_channel(rows, "h_3_3", |r| r.h_3_3),
        collect_channel(rows, "h_4_0", |r| r.h_4_0),
        collect_channel(rows, "h_4_1", |r| r.h_4_1),
        collect_channel(rows, "h_4_2", |r| r.h_4_2),
        collect_channel(rows, "h_4_3", |r| r.h_4_3),
        collect_channel(rows, "truth_h_hp_m", |r| r.truth_h_hp_m),
        collect_channel(rows, "truth_h_dp_m", |r| r.truth_h_dp_m),
        collect_channel(rows, "truth_q_bot_m3s", |r| r.truth_q_bot_m3s),
        collect_channel(rows, "truth_q_top_m3s", |r| r.truth_q_top_m3s),
        collect_channel(rows, "truth_q_c_m3s", |r| r.truth_q_c_m3s),
        collect_channel(rows, "truth_q_s_m3s", |r| r.truth_q_s_m3s),
    ];

    let mut usable: BTreeMap<&'static str, &Channel> = BTreeMap::new();
    for ch in &channels {
        if ch.samples.len() >= 2 {
            for pair in ch.samples.windows(2) {
                if pair[1].0 - pair[0].0 > GAP_FLAG_SECONDS {
                    report
                        .bridged_gaps
                        .push((ch.name.to_string(), pair[0].0, pair[1].0));
                }
            }
            usable.insert(ch.name, ch);
        } else if !ch.samples.is_empty() || ch.name.starts_with("q_") {
            log::warn!("preprocess: dropping channel {} ({} samples)", ch.name, ch.samples.len());
            report.dropped_channels.push(ch.name.to_string());
        }
    }

    let t_min = rows.first().unwrap().tau_s.ceil();
    let t_max = rows.last().unwrap().tau_s.floor();
    if t_max < t_min {
        return Err(Error::Domain("trajectory spans less than one second".into()));
    }

    let at = |name: &str, t: f64| usable.get(name).and_then(|c| interp(&c.samples, t));
    let detection_names = ["h_3_0", "h_3_1", "h_3_2", "h_3_3", "h_4_0", "h_4_1", "h_4_2", "h_4_3"];
    let has_detections = detection_names.iter().any(|n| usable.contains_key(n));

    let mut out = Vec::with_capacity((t_max - t_min) as usize + 1);
    let mut t = t_min;
    while t <= t_max {
        let mut row = TrajectoryRow {
            tau_s: t,
            q_in_m3s: at("q_in_m3s", t),
            q_bot_m3s: at("q_bot_m3s", t),
            q_top_m3s: at("q_top_m3s", t),
            h_hp_m: at("h_hp_m", t),
            h_dp_m: at("h_dp_m", t),
            truth_h_hp_m: at("truth_h_hp_m", t),
            truth_h_dp_m: at("truth_h_dp_m", t),
            truth_q_bot_m3s: at("truth_q_bot_m3s", t),
            truth_q_top_m3s: at("truth_q_top_m3s", t),
            truth_q_c_m3s: at("truth_q_c_m3s", t),
            truth_q_s_m3s: at("truth_q_s_m3s", t),
            ..Default::default()
        };
        if has_detections {
            let mut dets = [None; 8];
            let mut sum = 0.0;
            let mut n = 0usize;
            for (slot, name) in dets.iter_mut().zip(detection_names) {
                *slot = at(name, t);
                if let Some(v) = *slot {
                    sum += v;
                    n += 1;
                }
            }
            row.set_detection_heights(dets);
            if n > 0 {
                // Mean of the positions available at this instant stands in
                // for the band-shaped average height.
                row.h_dp_m = Some(sum / n as f64);
            }
        }
        out.push(row);
        t += 1.0;
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(tau: f64) -> TrajectoryRow {
        TrajectoryRow {
            tau_s: tau,
            q_in_m3s: Some(3.0e-4),
            q_bot_m3s: Some(1.5e-4),
            q_top_m3s: Some(1.5e-4),
            ..Default::default()
        }
    }

    #[test]
    fn linear_midpoint_interpolation() {
        let mut r0 = row(0.0);
        r0.h_hp_m = Some(0.05);
        let mut r2 = row(2.0);
        r2.h_hp_m = Some(0.07);
        let (out, _) = preprocess(&[r0, r2]).unwrap();
        assert_eq!(out.len(), 3);
        assert_relative_eq!(out[1].h_hp_m.unwrap(), 0.06, max_relative = 1e-15);
    }

    #[test]
    fn identical_detection_channels_average_to_themselves() {
        let mut rows = vec![row(0.0), row(1.0), row(2.0)];
        for r in &mut rows {
            r.set_detection_heights([Some(0.04); 8]);
        }
        let (out, _) = preprocess(&rows).unwrap();
        for r in &out {
            assert_relative_eq!(r.h_dp_m.unwrap(), 0.04);
        }
    }

    #[test]
    fn partial_detections_average_available_positions() {
        let mut rows = vec![row(0.0), row(1.0)];
        for r in &mut rows {
            let mut dets = [None; 8];
            dets[0] = Some(0.04);
            dets[5] = Some(0.06);
            r.set_detection_heights(dets);
        }
        let (out, _) = preprocess(&rows).unwrap();
        assert_relative_eq!(out[0].h_dp_m.unwrap(), 0.05);
    }

    #[test]
    fn idempotent_on_regular_input() {
        let mut rows: Vec<TrajectoryRow> = (0..5).map(|k| row(k as f64)).collect();
        for (k, r) in rows.iter_mut().enumerate() {
            r.h_hp_m = Some(0.07 + 1e-3 * k as f64);
            r.h_dp_m = Some(0.03 + 1e-3 * k as f64);
        }
        let (once, _) = preprocess(&rows).unwrap();
        assert_eq!(once, rows);
        let (twice, _) = preprocess(&once).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn irregular_samples_and_gaps_are_bridged_and_flagged() {
        let mut r0 = row(0.0);
        r0.h_dp_m = Some(0.030);
        let mut r1 = row(1.0);
        r1.h_dp_m = Some(0.032);
        let mut r5 = row(6.0);
        r5.h_dp_m = Some(0.042);
        let (out, report) = preprocess(&[r0, r1, r5]).unwrap();
        assert_eq!(out.len(), 7);
        assert_relative_eq!(out[3].h_dp_m.unwrap(), 0.036, max_relative = 1e-12);
        assert!(report
            .bridged_gaps
            .iter()
            .any(|(name, a, b)| name == "h_dp_m" && *a == 1.0 && *b == 6.0));
    }

    #[test]
    fn empty_channel_is_dropped_with_report() {
        let rows = vec![row(0.0), row(1.0)];
        let (out, report) = preprocess(&rows).unwrap();
        assert!(out.iter().all(|r| r.h_hp_m.is_none()));
        assert!(!report.dropped_channels.iter().any(|c| c == "q_in_m3s"));
    }
}
