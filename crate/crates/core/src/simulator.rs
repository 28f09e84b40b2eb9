//! Synthetic approach scenes with analytically known trajectories, affine
//! parameters and TTC, used as the test oracle and by the `simulate` CLI.
//!
//! Contour points share one depth and move with a constant relative velocity,
//! so every projected trajectory has the closed form
//! `p(t) = ((X0 - nu_x t) / (Z0 - nu_z t), (Y0 - nu_y t) / (Z0 - nu_z t))`.
//! Events are emitted geometrically, each time a projected point has moved by
//! a fixed pixel distance since its previous event.

use std::fmt;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::event::{BoundingBox, CameraIntrinsics, Event, EventSlice};
use crate::linear_solver::AffineParams;
use crate::normal_flow::{synthesize_normal_flow, NormalFlowMeasurement};

#[derive(Debug)]
pub enum SimError {
    EmptyContour,
    /// Contour points must share the initial depth for the affine ground
    /// truth to be well defined.
    NonUniformDepth,
    BehindCamera,
    /// `Z(t)` must stay positive over the simulated span.
    CollisionInsideSpan,
    InvalidConfig(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::EmptyContour => write!(f, "contour is empty"),
            SimError::NonUniformDepth => write!(f, "contour points must share one depth"),
            SimError::BehindCamera => write!(f, "point is behind the camera"),
            SimError::CollisionInsideSpan => {
                write!(f, "depth reaches zero inside the simulated span")
            }
            SimError::InvalidConfig(msg) => write!(f, "invalid scene config: {msg}"),
        }
    }
}

impl std::error::Error for SimError {}

fn default_pixel_step() -> f64 {
    0.5
}
fn default_jitter() -> f64 {
    1e-4
}

/// Scene description; serializable as JSON for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    /// 3D contour points in the observer frame, meters; Z > 0 and uniform.
    pub contour: Vec<[f64; 3]>,
    /// Relative linear velocity, m/s; positive `nu_z` means approach.
    pub nu: [f64; 3],
    pub intr: CameraIntrinsics,
    pub t_span_s: f64,
    /// Pixel distance a projected point travels between two of its events.
    #[serde(default = "default_pixel_step")]
    pub event_pixel_step: f64,
    #[serde(default = "default_jitter")]
    pub timestamp_jitter_sigma_s: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SceneConfig {
    fn validate(&self) -> Result<f64, SimError> {
        if self.contour.is_empty() {
            return Err(SimError::EmptyContour);
        }
        let z0 = self.contour[0][2];
        if z0 <= 0.0 {
            return Err(SimError::BehindCamera);
        }
        if self.contour.iter().any(|p| (p[2] - z0).abs() > 1e-9 * z0.max(1.0)) {
            return Err(SimError::NonUniformDepth);
        }
        if z0 - self.nu[2] * self.t_span_s <= 0.0 {
            return Err(SimError::CollisionInsideSpan);
        }
        if !self.t_span_s.is_finite() || self.t_span_s <= 0.0 {
            return Err(SimError::InvalidConfig("t_span_s must be positive".into()));
        }
        if !self.event_pixel_step.is_finite() || self.event_pixel_step <= 0.0 {
            return Err(SimError::InvalidConfig("event_pixel_step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(SimError::InvalidConfig("outlier_fraction must lie in [0, 1)".into()));
        }
        if self.timestamp_jitter_sigma_s < 0.0 {
            return Err(SimError::InvalidConfig("jitter sigma must be non-negative".into()));
        }
        Ok(z0)
    }

    pub fn nu_vec(&self) -> Vector3<f64> {
        Vector3::new(self.nu[0], self.nu[1], self.nu[2])
    }
}

/// Closed-form normalized trajectory of a constant-velocity 3D point.
pub fn trajectory(p0: Vector3<f64>, nu: Vector3<f64>, t: f64) -> Result<Vector2<f64>, SimError> {
    let z = p0.z - nu.z * t;
    if z <= 0.0 {
        return Err(SimError::BehindCamera);
    }
    Ok(Vector2::new((p0.x - nu.x * t) / z, (p0.y - nu.y * t) / z))
}

/// Analytic ground truth for a generated scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    contour: Vec<Vector3<f64>>,
    nu: Vector3<f64>,
    z0: f64,
    t_span_s: f64,
    intr: CameraIntrinsics,
}

impl GroundTruth {
    pub fn z_at(&self, t_s: f64) -> f64 {
        self.z0 - self.nu.z * t_s
    }

    /// `a = nu / Z(t_ref)`.
    pub fn affine_at(&self, t_ref_s: f64) -> AffineParams {
        let z = self.z_at(t_ref_s);
        AffineParams::new(self.nu.x / z, self.nu.y / z, self.nu.z / z, t_ref_s)
    }

    /// `TTC(t) = Z(t) / nu_z`; infinite without approach.
    pub fn ttc_at(&self, t_s: f64) -> f64 {
        if self.nu.z <= 0.0 {
            f64::INFINITY
        } else {
            self.z_at(t_s) / self.nu.z
        }
    }

    pub fn t_span_s(&self) -> f64 {
        self.t_span_s
    }

    pub fn trajectory_of(&self, point: usize, t_s: f64) -> Result<Vector2<f64>, SimError> {
        trajectory(self.contour[point], self.nu, t_s)
    }

    pub fn contour_len(&self) -> usize {
        self.contour.len()
    }

    /// Instantaneous full flow of a contour point at `t`.
    pub fn full_flow_of(&self, point: usize, t_s: f64) -> Result<Vector2<f64>, SimError> {
        let p = self.trajectory_of(point, t_s)?;
        let a_t = self.affine_at(t_s);
        Ok(a_t.flow_at(p))
    }

    /// Tight pixel bounding box of the projected contour at `t`.
    pub fn bbox_at(&self, t_s: f64) -> Result<BoundingBox, SimError> {
        let mut x_min = f64::INFINITY;
        let mut y_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for p0 in &self.contour {
            let p = trajectory(*p0, self.nu, t_s)?;
            let px = self.intr.normalized_to_pixel(p);
            x_min = x_min.min(px.x);
            y_min = y_min.min(px.y);
            x_max = x_max.max(px.x);
            y_max = y_max.max(px.y);
        }
        if !(x_min < x_max && y_min < y_max) {
            // Degenerate contour projection (single point): widen minimally.
            x_max = x_min + 1.0;
            y_max = y_min + 1.0;
        }
        Ok(BoundingBox { t_s, x_min, y_min, x_max, y_max, track_id: 0 })
    }
}

/// Generates the event stream of a scene. Deterministic for a fixed seed.
pub fn generate_events(scene: &SceneConfig) -> Result<(EventSlice, GroundTruth), SimError> {
    let z0 = scene.validate()?;
    let nu = scene.nu_vec();
    let contour: Vec<Vector3<f64>> =
        scene.contour.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
    let gt = GroundTruth {
        contour: contour.clone(),
        nu,
        z0,
        t_span_s: scene.t_span_s,
        intr: scene.intr,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    let jitter = if scene.timestamp_jitter_sigma_s > 0.0 {
        Some(Normal::new(0.0, scene.timestamp_jitter_sigma_s).expect("valid sigma"))
    } else {
        None
    };

    let mut events: Vec<Event> = Vec::new();
    let t_span_us = (scene.t_span_s * 1e6).round() as i64;

    for p0 in &contour {
        // Dense sampling fine enough that a point moves well under one
        // emission step per sample.
        let path_px = estimate_path_length_px(*p0, nu, scene.t_span_s, &scene.intr);
        let n_steps = ((path_px / (0.2 * scene.event_pixel_step)).ceil() as usize)
            .clamp(64, 2_000_000);
        let dt = scene.t_span_s / n_steps as f64;

        let mut last_pos = scene.intr.normalized_to_pixel(trajectory(*p0, nu, 0.0)?);
        let mut prev_pos = last_pos;
        let mut prev_t = 0.0f64;
        for j in 1..=n_steps {
            let t = j as f64 * dt;
            let pos = scene.intr.normalized_to_pixel(trajectory(*p0, nu, t)?);
            let d_prev = (prev_pos - last_pos).norm();
            let d_cur = (pos - last_pos).norm();
            if d_cur >= scene.event_pixel_step && d_cur > d_prev {
                let f = (scene.event_pixel_step - d_prev) / (d_cur - d_prev);
                let f = f.clamp(0.0, 1.0);
                let t_cross = prev_t + f * (t - prev_t);
                let pos_cross = prev_pos + (pos - prev_pos) * f;

                let px = pos_cross.x.round();
                let py = pos_cross.y.round();
                if px >= 0.0
                    && py >= 0.0
                    && (px as u32) < scene.intr.width
                    && (py as u32) < scene.intr.height
                {
                    let p_norm = scene.intr.pixel_to_normalized(pos_cross);
                    let flow = gt.affine_at(t_cross).flow_at(p_norm);
                    let polarity = if p_norm.dot(&flow) >= 0.0 { 1 } else { -1 };
                    let mut t_event = t_cross;
                    if let Some(normal) = &jitter {
                        t_event += normal.sample(&mut rng);
                    }
                    let t_us = ((t_event * 1e6).round() as i64).clamp(0, t_span_us);
                    events.push(Event::new(px as u16, py as u16, t_us, polarity));
                }
                last_pos = pos_cross;
            }
            prev_pos = pos;
            prev_t = t;
        }
    }

    let n_outliers = (scene.outlier_fraction * events.len() as f64).round() as usize;
    for _ in 0..n_outliers {
        events.push(Event::new(
            rng.random_range(0..scene.intr.width) as u16,
            rng.random_range(0..scene.intr.height) as u16,
            rng.random_range(0..=t_span_us),
            if rng.random_bool(0.5) { 1 } else { -1 },
        ));
    }

    events.sort_by_key(|e| (e.t_us, e.y, e.x, e.polarity));
    let slice = EventSlice::new(events, 0.0, scene.t_span_s, scene.intr.width, scene.intr.height)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok((slice, gt))
}

fn estimate_path_length_px(
    p0: Vector3<f64>,
    nu: Vector3<f64>,
    t_span: f64,
    intr: &CameraIntrinsics,
) -> f64 {
    let probes = 64;
    let mut len = 0.0;
    let mut prev = intr.normalized_to_pixel(trajectory(p0, nu, 0.0).expect("validated"));
    for j in 1..=probes {
        let t = t_span * j as f64 / probes as f64;
        let pos = intr.normalized_to_pixel(trajectory(p0, nu, t).expect("validated"));
        len += (pos - prev).norm();
        prev = pos;
    }
    len
}

/// How gradient directions are chosen for synthetic measurements.
#[derive(Debug, Clone, Copy)]
pub enum DirectionPolicy {
    /// Image-plane normal of the contour polyline at each point.
    ContourNormal,
    /// Unit full-flow direction rotated by the given angle (radians).
    RotatedFromFlow(f64),
}

/// Exact normal-flow measurements: the instantaneous full flow of each
/// contour point at each sample time, projected onto the chosen directions.
/// Measurements with (numerically) zero projection are dropped.
pub fn ground_truth_measurements(
    scene: &SceneConfig,
    sample_times_s: &[f64],
    policy: DirectionPolicy,
) -> Result<Vec<NormalFlowMeasurement>, SimError> {
    scene.validate()?;
    let nu = scene.nu_vec();
    let contour: Vec<Vector3<f64>> =
        scene.contour.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
    let z0 = contour[0].z;
    let n_pts = contour.len();

    let mut out = Vec::new();
    for &t in sample_times_s {
        let z_t = z0 - nu.z * t;
        if z_t <= 0.0 {
            return Err(SimError::BehindCamera);
        }
        let a_t = Vector3::new(nu.x / z_t, nu.y / z_t, nu.z / z_t);
        for (i, p0) in contour.iter().enumerate() {
            let p = trajectory(*p0, nu, t)?;
            let full = Vector2::new(-a_t.x + p.x * a_t.z, -a_t.y + p.y * a_t.z);
            let dir = match policy {
                DirectionPolicy::ContourNormal => {
                    let prev = trajectory(contour[(i + n_pts - 1) % n_pts], nu, t)?;
                    let next = trajectory(contour[(i + 1) % n_pts], nu, t)?;
                    let tangent = next - prev;
                    let norm = tangent.norm();
                    if norm < 1e-12 {
                        continue;
                    }
                    Vector2::new(-tangent.y / norm, tangent.x / norm)
                }
                DirectionPolicy::RotatedFromFlow(angle) => {
                    let norm = full.norm();
                    if norm < 1e-12 {
                        continue;
                    }
                    let u = full / norm;
                    Vector2::new(
                        u.x * angle.cos() - u.y * angle.sin(),
                        u.x * angle.sin() + u.y * angle.cos(),
                    )
                }
            };
            let n = synthesize_normal_flow(full, dir);
            if n.norm_squared() < 1e-18 {
                continue;
            }
            out.push(NormalFlowMeasurement {
                p,
                n,
                t_s: t,
                px: scene.intr.normalized_to_pixel(p),
                source_index: out.len(),
            });
        }
    }
    Ok(out)
}

/// Ellipse contour centered at `(cx, cy)` meters, at depth `z` meters.
pub fn ellipse_contour(
    cx: f64,
    cy: f64,
    radius_x: f64,
    radius_y: f64,
    z: f64,
    n_points: usize,
) -> Vec<[f64; 3]> {
    assert!(n_points >= 3);
    (0..n_points)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / n_points as f64;
            [cx + radius_x * angle.cos(), cy + radius_y * angle.sin(), z]
        })
        .collect()
}

/// Circle contour centered at `(cx, cy)` meters, at depth `z` meters.
pub fn circle_contour(cx: f64, cy: f64, radius: f64, z: f64, n_points: usize) -> Vec<[f64; 3]> {
    ellipse_contour(cx, cy, radius, radius, z, n_points)
}

/// Rectangle contour (`points_per_side` per edge) centered at `(cx, cy)`
/// meters, at depth `z` meters.
pub fn rectangle_contour(
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    z: f64,
    points_per_side: usize,
) -> Vec<[f64; 3]> {
    assert!(points_per_side >= 1);
    let n = points_per_side;
    let mut pts = Vec::with_capacity(4 * n);
    for i in 0..n {
        let f = i as f64 / n as f64;
        // Walk the perimeter counterclockwise, one edge at a time.
        pts.push([cx - half_w + 2.0 * half_w * f, cy - half_h, z]);
    }
    for i in 0..n {
        let f = i as f64 / n as f64;
        pts.push([cx + half_w, cy - half_h + 2.0 * half_h * f, z]);
    }
    for i in 0..n {
        let f = i as f64 / n as f64;
        pts.push([cx + half_w - 2.0 * half_w * f, cy + half_h, z]);
    }
    for i in 0..n {
        let f = i as f64 / n as f64;
        pts.push([cx - half_w, cy + half_h - 2.0 * half_h * f, z]);
    }
    pts
}

/// Writes ground truth rows `t_s,ttc_s,a_x,a_y,a_z` at the given times.
pub fn write_ground_truth_csv<W: Write>(
    gt: &GroundTruth,
    times_s: &[f64],
    mut writer: W,
) -> std::io::Result<()> {
    writeln!(writer, "t_s,ttc_s,a_x,a_y,a_z")?;
    for &t in times_s {
        let a = gt.affine_at(t);
        writeln!(writer, "{},{},{},{},{}", t, gt.ttc_at(t), a.a_x, a.a_y, a.a_z)?;
    }
    Ok(())
}
