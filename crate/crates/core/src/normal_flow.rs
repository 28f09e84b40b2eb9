//! Per-event normal flow from local plane fitting in the spatio-temporal
//! neighborhood.
//!
//! A plane `t = c0 + c1*u + c2*v` is fitted over the events near each query
//! event (pixel coordinates `u`, `v`). The observable flow component along the
//! local gradient is `(c1, c2) / (c1^2 + c2^2)` in pixels per second, which is
//! then rescaled to normalized units via the intrinsics.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::event::{CameraIntrinsics, EventSlice};

/// One normal-flow observation.
#[derive(Debug, Clone, Copy)]
pub struct NormalFlowMeasurement {
    /// Normalized image coordinates of the source event.
    pub p: Vector2<f64>,
    /// Normal flow in normalized units per second.
    pub n: Vector2<f64>,
    /// Event timestamp, seconds.
    pub t_s: f64,
    /// Source pixel.
    pub px: Vector2<f64>,
    /// Index of the source event in its slice.
    pub source_index: usize,
}

/// Plane-fit configuration. `None` fields derive their value from the slice.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Spatial neighborhood radius in pixels.
    pub radius_px: u32,
    /// Temporal neighborhood half-width; `None` means the slice duration.
    pub dt_window_s: Option<f64>,
    /// Minimum events in the neighborhood (query included).
    pub min_events: usize,
    /// RMS residual ceiling in seconds; `None` means 30% of the time window.
    pub max_residual_s: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { radius_px: 3, dt_window_s: None, min_events: 8, max_residual_s: None }
    }
}

/// Why events were dropped during flow estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowStats {
    pub n_queried: usize,
    pub n_kept: usize,
    pub n_too_few_neighbors: usize,
    pub n_degenerate_gradient: usize,
    pub n_residual_too_large: usize,
}

/// Estimates normal flow for every event in the slice.
pub fn estimate_normal_flow(
    slice: &EventSlice,
    intr: &CameraIntrinsics,
    cfg: &FlowConfig,
) -> (Vec<NormalFlowMeasurement>, FlowStats) {
    let all: Vec<usize> = (0..slice.len()).collect();
    estimate_normal_flow_for(slice, &all, intr, cfg)
}

/// Estimates normal flow for the selected events, with neighborhoods drawn
/// from the whole slice. Output preserves the order of `indices`; events
/// failing the checks are dropped and counted.
pub fn estimate_normal_flow_for(
    slice: &EventSlice,
    indices: &[usize],
    intr: &CameraIntrinsics,
    cfg: &FlowConfig,
) -> (Vec<NormalFlowMeasurement>, FlowStats) {
    let events = slice.events();
    let dt_window = cfg.dt_window_s.unwrap_or_else(|| slice.duration_s().max(1e-9));
    let max_residual = cfg.max_residual_s.unwrap_or(0.3 * dt_window);
    let radius = cfg.radius_px as i64;
    let r2 = radius * radius;

    let mut buckets: HashMap<(u16, u16), Vec<u32>> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        buckets.entry((e.x, e.y)).or_default().push(i as u32);
    }

    let mut stats = FlowStats { n_queried: indices.len(), ..FlowStats::default() };
    let mut out = Vec::with_capacity(indices.len());

    for &k in indices {
        let q = &events[k];
        let t_k = q.t_s();

        // Normal-equation accumulators for t' = c0 + c1*u + c2*v with
        // coordinates centered on the query event.
        let mut ata = Matrix3::<f64>::zeros();
        let mut atb = Vector3::<f64>::zeros();
        let mut count = 0usize;
        let mut samples: Vec<(f64, f64, f64)> = Vec::new();

        for dy in -radius..=radius {
            let ny = q.y as i64 + dy;
            if ny < 0 || ny >= slice.height() as i64 {
                continue;
            }
            for dx in -radius..=radius {
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let nx = q.x as i64 + dx;
                if nx < 0 || nx >= slice.width() as i64 {
                    continue;
                }
                let Some(bucket) = buckets.get(&(nx as u16, ny as u16)) else {
                    continue;
                };
                for &j in bucket {
                    let e = &events[j as usize];
                    let dt = e.t_s() - t_k;
                    if dt.abs() > dt_window {
                        continue;
                    }
                    let u = dx as f64;
                    let v = dy as f64;
                    let row = Vector3::new(1.0, u, v);
                    ata += row * row.transpose();
                    atb += row * dt;
                    samples.push((u, v, dt));
                    count += 1;
                }
            }
        }

        if count < cfg.min_events {
            stats.n_too_few_neighbors += 1;
            continue;
        }
        let Some(c) = ata.lu().solve(&atb) else {
            stats.n_degenerate_gradient += 1;
            continue;
        };
        let (c0, c1, c2) = (c.x, c.y, c.z);
        let g2 = c1 * c1 + c2 * c2;
        if g2 <= 0.0 || !g2.is_finite() {
            stats.n_degenerate_gradient += 1;
            continue;
        }
        let sse: f64 = samples
            .iter()
            .map(|&(u, v, dt)| {
                let r = dt - (c0 + c1 * u + c2 * v);
                r * r
            })
            .sum();
        if (sse / count as f64).sqrt() > max_residual {
            stats.n_residual_too_large += 1;
            continue;
        }

        let n_px = Vector2::new(c1 / g2, c2 / g2);
        let n = Vector2::new(n_px.x / intr.fx, n_px.y / intr.fy);
        let px = q.px();
        out.push(NormalFlowMeasurement {
            p: intr.pixel_to_normalized(px),
            n,
            t_s: t_k,
            px,
            source_index: k,
        });
        stats.n_kept += 1;
    }
    (out, stats)
}

/// Projects a full flow vector onto a unit direction: `(u . d) d`.
pub fn synthesize_normal_flow(full_flow: Vector2<f64>, direction: Vector2<f64>) -> Vector2<f64> {
    debug_assert!((direction.norm() - 1.0).abs() < 1e-9, "direction must be unit length");
    direction * full_flow.dot(&direction)
}

/// Writes measurements as CSV rows `t_s,px,py,nx,ny` for offline inspection.
pub fn write_flow_csv<W: Write>(
    measurements: &[NormalFlowMeasurement],
    mut writer: W,
) -> std::io::Result<()> {
    writeln!(writer, "t_s,px,py,nx,ny")?;
    for m in measurements {
        writeln!(writer, "{},{},{},{},{}", m.t_s, m.px.x, m.px.y, m.n.x, m.n.y)?;
    }
    Ok(())
}
