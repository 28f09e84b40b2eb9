//! End-to-end estimator: adaptive slice scheduling over an event stream and a
//! bounding-box track, with a robust linear initialization stage and a
//! registration-only tracking stage.
//!
//! The state machine starts in INIT (robust sampling, normal flow, RANSAC,
//! then LM), hands over to TRACK (bounding-box prediction, warm-started LM at
//! each new reference time) and falls back to INIT when tracking degrades.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::event::{BoundingBox, CameraIntrinsics, EventSlice, ParseError};
use crate::linear_solver::{ransac_fit, ttc_from_params, AffineParams, RansacConfig, Ttc};
use crate::lts::{
    median_reference_time, render_lts, robust_sample, smooth_bilateral, PixelWindow,
    DEFAULT_G1_MIN, DEFAULT_G2_MAX, DEFAULT_SPATIAL_SIGMA,
};
use crate::normal_flow::{estimate_normal_flow_for, FlowConfig};
use crate::registration::{lm_refine, LmConfig, MIN_REFINE_EVENTS};

#[derive(Debug)]
pub enum PipelineError {
    /// Parameter propagation crossed the model's collision time.
    CollisionPassed,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::CollisionPassed => {
                write!(f, "propagation interval crosses the predicted collision")
            }
        }
    }
}

impl std::error::Error for PipelineError {}

/// Surface rendering and sampling knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtsConfig {
    pub spatial_sigma_px: f64,
    /// `None`: half the slice duration.
    pub range_sigma_s: Option<f64>,
    pub g1_min: f64,
    pub g2_max: f64,
}

impl Default for LtsConfig {
    fn default() -> Self {
        Self {
            spatial_sigma_px: DEFAULT_SPATIAL_SIGMA,
            range_sigma_s: None,
            g1_min: DEFAULT_G1_MIN,
            g2_max: DEFAULT_G2_MAX,
        }
    }
}

/// Full pipeline configuration; all fields have defaults so a config file may
/// specify any subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Fractional scale change per slice the scheduler aims for.
    pub target_scale_change: f64,
    pub min_slice_duration_s: f64,
    pub max_slice_duration_s: f64,
    /// Slices with fewer events are extended, then skipped.
    pub min_events_per_slice: usize,
    pub crop_margin_px: f64,
    /// `a_z` floor for TTC output and scheduling.
    pub min_az: f64,
    /// Reset when the refined rms exceeds this multiple of the smoothed
    /// surface's value spread.
    pub reset_rms_factor: f64,
    pub lts: LtsConfig,
    pub flow: FlowConfig,
    pub ransac: RansacConfig,
    pub lm: LmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_scale_change: 0.05,
            min_slice_duration_s: 0.002,
            max_slice_duration_s: 0.050,
            min_events_per_slice: 500,
            crop_margin_px: 2.0,
            min_az: crate::linear_solver::DEFAULT_MIN_AZ,
            reset_rms_factor: 3.0,
            lts: LtsConfig::default(),
            flow: FlowConfig::default(),
            ransac: RansacConfig::default(),
            lm: LmConfig::default(),
        }
    }
}

/// Which stage produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Refine,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Refine => "refine",
        }
    }
}

/// One output of the estimator.
#[derive(Debug, Clone)]
pub struct TtcEstimate {
    pub t_ref_s: f64,
    pub ttc: Ttc,
    pub params: AffineParams,
    pub n_events: usize,
    /// RANSAC inliers at INIT; events used by LM at TRACK.
    pub n_inliers: usize,
    pub rms_s: f64,
    pub stage: Stage,
    /// Accepted LM iterations for this slice.
    pub lm_iterations: usize,
}

/// A per-slice failure note; failures never abort the stream.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub t_s: f64,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct PipelineOutput {
    pub estimates: Vec<TtcEstimate>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Propagates params expressed at their own reference time to `t_ref_new_s`:
/// under constant velocity `Z` scales by `(1 - a_z dt)`, so `a` divides by it.
pub fn propagate_params(
    a: &AffineParams,
    t_ref_new_s: f64,
) -> Result<AffineParams, PipelineError> {
    let dt = t_ref_new_s - a.t_ref_s;
    let denom = 1.0 - a.a_z * dt;
    if denom <= 0.0 {
        return Err(PipelineError::CollisionPassed);
    }
    Ok(AffineParams::new(a.a_x / denom, a.a_y / denom, a.a_z / denom, t_ref_new_s))
}

/// Propagates a detection box forward by `dt` with the affine model: each
/// corner moves by its model flow, `corner + A(corner; a) * dt`.
pub fn predict_bbox(
    bbox: &BoundingBox,
    a: &AffineParams,
    dt_s: f64,
    intr: &CameraIntrinsics,
) -> BoundingBox {
    assert!(dt_s >= 0.0, "prediction runs forward in time");
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in bbox.corners() {
        let p = intr.pixel_to_normalized(c);
        let q = p + a.flow_at(p) * dt_s;
        let px = intr.normalized_to_pixel(q);
        x_min = x_min.min(px.x);
        y_min = y_min.min(px.y);
        x_max = x_max.max(px.x);
        y_max = y_max.max(px.y);
    }
    BoundingBox { t_s: bbox.t_s + dt_s, x_min, y_min, x_max, y_max, track_id: bbox.track_id }
}

/// Time for the predicted scale to change by the target fraction, clamped to
/// the configured slice duration range.
pub fn next_render_interval(a: &AffineParams, cfg: &PipelineConfig) -> f64 {
    let rate = a.a_z.abs().max(cfg.min_az);
    (cfg.target_scale_change / rate)
        .clamp(cfg.min_slice_duration_s, cfg.max_slice_duration_s)
}

/// Linear interpolation of the detection track at `t`, clamped to the ends.
pub fn interpolate_bbox(track: &[BoundingBox], t_s: f64) -> Option<BoundingBox> {
    if track.is_empty() {
        return None;
    }
    if t_s <= track[0].t_s {
        return Some(track[0]);
    }
    let last = &track[track.len() - 1];
    if t_s >= last.t_s {
        return Some(*last);
    }
    let hi = track.partition_point(|b| b.t_s < t_s);
    let (lo, hi) = (&track[hi - 1], &track[hi]);
    let span = hi.t_s - lo.t_s;
    if span <= 0.0 {
        return Some(*lo);
    }
    let f = (t_s - lo.t_s) / span;
    Some(BoundingBox {
        t_s,
        x_min: lo.x_min + f * (hi.x_min - lo.x_min),
        y_min: lo.y_min + f * (hi.y_min - lo.y_min),
        x_max: lo.x_max + f * (hi.x_max - lo.x_max),
        y_max: lo.y_max + f * (hi.y_max - lo.y_max),
        track_id: lo.track_id,
    })
}

// Latest detection at or before `t`, else the first one.
fn latest_detection(track: &[BoundingBox], t_s: f64) -> Option<BoundingBox> {
    if track.is_empty() {
        return None;
    }
    let hi = track.partition_point(|b| b.t_s <= t_s);
    Some(if hi == 0 { track[0] } else { track[hi - 1] })
}

#[derive(Clone, Copy)]
enum Mode {
    Init,
    Track { params: AffineParams },
}

/// Runs the estimator over an event stream and a detection track.
///
/// Per-slice failures are recorded as diagnostics and trigger a reset to the
/// INIT stage; they never abort the stream. Output estimates are strictly
/// ordered by reference time and the whole run is deterministic for fixed
/// inputs and seeds.
pub fn run_pipeline(
    events: &EventSlice,
    track: &[BoundingBox],
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> PipelineOutput {
    let mut out = PipelineOutput::default();
    if events.is_empty() || track.is_empty() {
        return out;
    }
    let mut track = track.to_vec();
    track.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    let track = track.as_slice();

    let stream_end = events.t_end_s();
    let mut cursor = events.t_begin_s();
    let mut mode = Mode::Init;

    while cursor < stream_end - 1e-9 {
        let desired = match &mode {
            Mode::Init => cfg.max_slice_duration_s,
            Mode::Track { params } => next_render_interval(params, cfg),
        };
        // A stub window at the stream tail cannot support a scheduled slice.
        if stream_end - cursor < 0.5 * desired {
            break;
        }

        // Assemble the slice, extending the window when events are scarce.
        let mut dur = desired;
        let (slice, bbox, t1) = loop {
            let t1 = (cursor + dur).min(stream_end);
            let mid = 0.5 * (cursor + t1);
            let bbox = match &mode {
                Mode::Init => interpolate_bbox(track, mid),
                Mode::Track { params } => latest_detection(track, mid).map(|det| {
                    let dt = (mid - det.t_s).max(0.0);
                    predict_bbox(&det, params, dt, intr)
                }),
            };
            let Some(bbox) = bbox else {
                return out;
            };
            let slice = events.crop_to_volume(&bbox, cursor, t1, cfg.crop_margin_px);
            if slice.len() >= cfg.min_events_per_slice
                || dur >= cfg.max_slice_duration_s
                || t1 >= stream_end
            {
                break (slice, bbox, t1);
            }
            dur = (dur * 2.0).min(cfg.max_slice_duration_s);
        };

        if slice.len() < cfg.min_events_per_slice {
            // Sparse stretch: idle forward without resetting.
            out.diagnostics.push(Diagnostic {
                t_s: cursor,
                message: format!("idle: {} events in window", slice.len()),
            });
            cursor = t1;
            continue;
        }

        let t_ref = median_reference_time(&slice).expect("slice is non-empty");
        let window =
            PixelWindow::from_bbox(&bbox, cfg.crop_margin_px, intr.width, intr.height);
        let lts = render_lts(&slice, t_ref, window);
        let range_sigma =
            cfg.lts.range_sigma_s.unwrap_or((slice.duration_s() * 0.5).max(1e-6));
        let smoothed = smooth_bilateral(&lts, cfg.lts.spatial_sigma_px, range_sigma);
        let sampled = robust_sample(&smoothed, &slice, intr, cfg.lts.g1_min, cfg.lts.g2_max);

        if sampled.events.len() < MIN_REFINE_EVENTS {
            out.diagnostics.push(Diagnostic {
                t_s: cursor,
                message: format!("{} sampled events, too few to solve", sampled.events.len()),
            });
            mode = Mode::Init;
            cursor = t1;
            continue;
        }

        let rms_ceiling = cfg.reset_rms_factor * smoothed.occupied_std();

        match mode {
            Mode::Init => {
                let indices: Vec<usize> = sampled.events.iter().map(|s| s.index).collect();
                let (measurements, _) =
                    estimate_normal_flow_for(&slice, &indices, intr, &cfg.flow);
                let fit = match ransac_fit(&measurements, t_ref, &cfg.ransac) {
                    Ok(fit) => fit,
                    Err(e) => {
                        out.diagnostics.push(Diagnostic {
                            t_s: cursor,
                            message: format!("init ransac failed: {e}"),
                        });
                        cursor = t1;
                        continue;
                    }
                };
                match lm_refine(&sampled, &smoothed, intr, fit.params, &cfg.lm) {
                    Ok(refined) if refined.rms_s <= rms_ceiling => {
                        out.estimates.push(TtcEstimate {
                            t_ref_s: t_ref,
                            ttc: ttc_from_params(&refined.params, cfg.min_az),
                            params: refined.params,
                            n_events: slice.len(),
                            n_inliers: fit.inliers.len(),
                            rms_s: refined.rms_s,
                            stage: Stage::Init,
                            lm_iterations: refined.iterations,
                        });
                        mode = Mode::Track { params: refined.params };
                    }
                    Ok(refined) => {
                        out.diagnostics.push(Diagnostic {
                            t_s: cursor,
                            message: format!(
                                "init rms {} exceeds ceiling {rms_ceiling}",
                                refined.rms_s
                            ),
                        });
                    }
                    Err(e) => {
                        out.diagnostics.push(Diagnostic {
                            t_s: cursor,
                            message: format!("init refine failed: {e}"),
                        });
                    }
                }
                cursor = t1;
            }
            Mode::Track { params } => {
                let warm = match propagate_params(&params, t_ref) {
                    Ok(p) => p,
                    Err(e) => {
                        out.diagnostics.push(Diagnostic {
                            t_s: cursor,
                            message: format!("propagation failed: {e}"),
                        });
                        mode = Mode::Init;
                        continue; // retry this window from scratch
                    }
                };
                match lm_refine(&sampled, &smoothed, intr, warm, &cfg.lm) {
                    Ok(refined) if refined.rms_s <= rms_ceiling => {
                        out.estimates.push(TtcEstimate {
                            t_ref_s: t_ref,
                            ttc: ttc_from_params(&refined.params, cfg.min_az),
                            params: refined.params,
                            n_events: slice.len(),
                            n_inliers: refined.n_residuals,
                            rms_s: refined.rms_s,
                            stage: Stage::Refine,
                            lm_iterations: refined.iterations,
                        });
                        mode = Mode::Track { params: refined.params };
                        cursor = t1;
                    }
                    Ok(refined) => {
                        out.diagnostics.push(Diagnostic {
                            t_s: cursor,
                            message: format!(
                                "track rms {} exceeds ceiling {rms_ceiling}, reset",
                                refined.rms_s
                            ),
                        });
                        mode = Mode::Init;
                    }
                    Err(e) => {
                        out.diagnostics.push(Diagnostic {
                            t_s: cursor,
                            message: format!("track refine failed: {e}, reset"),
                        });
                        mode = Mode::Init;
                    }
                }
            }
        }
    }
    out
}

/// Writes estimates as CSV: `t_ref_s,ttc_s,a_x,a_y,a_z,n_events,n_inliers,rms_s,stage`.
/// `ttc_s` is `inf` when diverging and negative when receding.
pub fn write_estimates_csv<W: Write>(
    estimates: &[TtcEstimate],
    mut writer: W,
) -> std::io::Result<()> {
    writeln!(writer, "t_ref_s,ttc_s,a_x,a_y,a_z,n_events,n_inliers,rms_s,stage")?;
    for e in estimates {
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{}",
            e.t_ref_s,
            e.ttc.as_csv_value(),
            e.params.a_x,
            e.params.a_y,
            e.params.a_z,
            e.n_events,
            e.n_inliers,
            e.rms_s,
            e.stage.as_str()
        )?;
    }
    Ok(())
}

/// Reads back `(t_ref_s, ttc_s)` pairs from an estimates CSV.
pub fn parse_estimates_csv<R: BufRead>(reader: R) -> Result<Vec<(f64, f64)>, ParseError> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("t_ref_s") {
            continue;
        }
        let mut fields = trimmed.split(',');
        let parsed = (|| {
            let t: f64 = fields.next()?.trim().parse().ok()?;
            let ttc: f64 = fields.next()?.trim().parse().ok()?;
            Some((t, ttc))
        })()
        .ok_or(ParseError::MalformedLine { line: line_no })?;
        rows.push(parsed);
    }
    Ok(rows)
}
