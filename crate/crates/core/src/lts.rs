//! Linear time surface: per-pixel signed time offset relative to a reference
//! time, with bilateral smoothing, sub-pixel sampling and robust event
//! selection.
//!
//! For every pixel that saw events, the surface stores `t_k - t_ref` of the
//! event triggered closest to `t_ref`; other pixels hold 0 and are marked
//! unoccupied. With the reference at the median timestamp the surface behaves
//! like a signed distance transform of the contours at `t_ref`.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

#[cfg(test)]
use nalgebra::Matrix2;
use nalgebra::Vector2;

use crate::event::{BoundingBox, CameraIntrinsics, EventSlice};

/// Default first-order gradient magnitude threshold (s/px) for event sampling.
pub const DEFAULT_G1_MIN: f64 = 1e-5;
/// Default second-order magnitude ceiling (s/px^2) for event sampling.
pub const DEFAULT_G2_MAX: f64 = 1e-3;
/// Default spatial sigma of the bilateral filter, in pixels.
pub const DEFAULT_SPATIAL_SIGMA: f64 = 1.5;

#[derive(Debug)]
pub enum LtsError {
    EmptySlice,
    OutOfWindow,
}

impl fmt::Display for LtsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LtsError::EmptySlice => write!(f, "slice holds no events"),
            LtsError::OutOfWindow => write!(f, "point outside the sampleable window interior"),
        }
    }
}

impl std::error::Error for LtsError {}

/// Integer pixel rectangle: origin in sensor coordinates plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelWindow {
    pub x0: i32,
    pub y0: i32,
    pub width: u32,
    pub height: u32,
}

impl PixelWindow {
    pub fn new(x0: i32, y0: i32, width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "window must be non-empty");
        Self { x0, y0, width, height }
    }

    /// Window covering the full sensor.
    pub fn full_sensor(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    /// Window around a bounding box expanded by `margin`, clamped to the sensor.
    pub fn from_bbox(bbox: &BoundingBox, margin_px: f64, sensor_w: u32, sensor_h: u32) -> Self {
        let x0 = ((bbox.x_min - margin_px).floor() as i32).clamp(0, sensor_w as i32 - 1);
        let y0 = ((bbox.y_min - margin_px).floor() as i32).clamp(0, sensor_h as i32 - 1);
        let x1 = ((bbox.x_max + margin_px).ceil() as i32).clamp(x0 + 1, sensor_w as i32);
        let y1 = ((bbox.y_max + margin_px).ceil() as i32).clamp(y0 + 1, sensor_h as i32);
        Self::new(x0, y0, (x1 - x0) as u32, (y1 - y0) as u32)
    }

    #[inline]
    pub fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.width as i32
            && y < self.y0 + self.height as i32
    }
}

/// The linear time surface over a pixel window.
#[derive(Debug, Clone)]
pub struct LinearTimeSurface {
    values: Vec<f64>,
    occupied: Vec<bool>,
    window: PixelWindow,
    t_ref_s: f64,
}

impl LinearTimeSurface {
    fn zeroed(window: PixelWindow, t_ref_s: f64) -> Self {
        let n = window.width as usize * window.height as usize;
        Self { values: vec![0.0; n], occupied: vec![false; n], window, t_ref_s }
    }

    /// Builds a surface from explicit row-major values; every pixel counts as
    /// occupied. Useful for synthetic surfaces and for loading dumps.
    pub fn from_values(window: PixelWindow, t_ref_s: f64, values: Vec<f64>) -> Self {
        let n = window.width as usize * window.height as usize;
        assert_eq!(values.len(), n, "value grid does not match the window size");
        Self { values, occupied: vec![true; n], window, t_ref_s }
    }

    #[inline]
    fn idx(&self, lx: usize, ly: usize) -> usize {
        ly * self.window.width as usize + lx
    }

    pub fn window(&self) -> PixelWindow {
        self.window
    }

    pub fn t_ref_s(&self) -> f64 {
        self.t_ref_s
    }

    /// Value at a sensor pixel; 0 outside the window.
    pub fn value_at(&self, x: i32, y: i32) -> f64 {
        if !self.window.contains(x, y) {
            return 0.0;
        }
        self.values[self.idx((x - self.window.x0) as usize, (y - self.window.y0) as usize)]
    }

    pub fn occupied_at(&self, x: i32, y: i32) -> bool {
        if !self.window.contains(x, y) {
            return false;
        }
        self.occupied[self.idx((x - self.window.x0) as usize, (y - self.window.y0) as usize)]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Fraction of occupied pixels holding negative values.
    pub fn negative_fraction(&self) -> f64 {
        let mut neg = 0usize;
        let mut occ = 0usize;
        for (v, o) in self.values.iter().zip(&self.occupied) {
            if *o {
                occ += 1;
                if *v < 0.0 {
                    neg += 1;
                }
            }
        }
        if occ == 0 {
            0.0
        } else {
            neg as f64 / occ as f64
        }
    }

    /// Standard deviation of the values over occupied pixels.
    pub fn occupied_std(&self) -> f64 {
        let vals: Vec<f64> = self
            .values
            .iter()
            .zip(&self.occupied)
            .filter(|(_, o)| **o)
            .map(|(v, _)| *v)
            .collect();
        if vals.is_empty() {
            return 0.0;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
    }

    /// True when `px` (sensor coordinates) can be sampled: at least one pixel
    /// inside the window border so that bilinear corners have full central
    /// difference stencils.
    pub fn contains_interior(&self, px: Vector2<f64>) -> bool {
        let lx = px.x - self.window.x0 as f64;
        let ly = px.y - self.window.y0 as f64;
        lx >= 1.0
            && ly >= 1.0
            && lx <= self.window.width as f64 - 2.0
            && ly <= self.window.height as f64 - 2.0
    }

    // Central-difference gradient at an interior grid node (local coords).
    #[inline]
    fn node_gradient(&self, lx: usize, ly: usize) -> Vector2<f64> {
        let gx = 0.5 * (self.values[self.idx(lx + 1, ly)] - self.values[self.idx(lx - 1, ly)]);
        let gy = 0.5 * (self.values[self.idx(lx, ly + 1)] - self.values[self.idx(lx, ly - 1)]);
        Vector2::new(gx, gy)
    }

    // 3x3 central-difference Hessian at an interior grid node (local coords).
    // Test oracle for the robust-sampling gate.
    #[cfg(test)]
    fn node_hessian(&self, lx: usize, ly: usize) -> Matrix2<f64> {
        let v = |dx: i64, dy: i64| {
            self.values[self.idx((lx as i64 + dx) as usize, (ly as i64 + dy) as usize)]
        };
        let dxx = v(1, 0) - 2.0 * v(0, 0) + v(-1, 0);
        let dyy = v(0, 1) - 2.0 * v(0, 0) + v(0, -1);
        let dxy = 0.25 * (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1));
        Matrix2::new(dxx, dxy, dxy, dyy)
    }

    /// Bilinear value and gradient at a sub-pixel location (sensor pixels).
    ///
    /// The value interpolates the stored grid; the gradient interpolates the
    /// central-difference gradients of the four surrounding nodes, in seconds
    /// per pixel.
    pub fn sample_value_and_gradient(
        &self,
        px: Vector2<f64>,
    ) -> Result<(f64, Vector2<f64>), LtsError> {
        if !self.contains_interior(px) {
            return Err(LtsError::OutOfWindow);
        }
        let lx = px.x - self.window.x0 as f64;
        let ly = px.y - self.window.y0 as f64;
        let x0 = lx.floor() as usize;
        let y0 = ly.floor() as usize;
        let fx = lx - x0 as f64;
        let fy = ly - y0 as f64;
        // With a zero fraction the far corner has zero weight; collapse it so
        // the stencil never leaves the grid at the interior boundary.
        let x1 = if fx == 0.0 { x0 } else { x0 + 1 };
        let y1 = if fy == 0.0 { y0 } else { y0 + 1 };

        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;

        let value = w00 * self.values[self.idx(x0, y0)]
            + w10 * self.values[self.idx(x1, y0)]
            + w01 * self.values[self.idx(x0, y1)]
            + w11 * self.values[self.idx(x1, y1)];
        let gradient = w00 * self.node_gradient(x0, y0)
            + w10 * self.node_gradient(x1, y0)
            + w01 * self.node_gradient(x0, y1)
            + w11 * self.node_gradient(x1, y1);
        Ok((value, gradient))
    }
}

/// Median timestamp of the slice, in seconds. Uses the lower median for even
/// counts so the reference is an exact event timestamp.
pub fn median_reference_time(slice: &EventSlice) -> Result<f64, LtsError> {
    if slice.is_empty() {
        return Err(LtsError::EmptySlice);
    }
    let events = slice.events();
    Ok(events[(events.len() - 1) / 2].t_s())
}

/// Renders the linear time surface at `t_ref_s` over `window`.
///
/// Per pixel, among all events at that pixel the one minimizing |t - t_ref|
/// wins and `t - t_ref` is stored; ties keep the earlier event. Events outside
/// the window are ignored.
pub fn render_lts(slice: &EventSlice, t_ref_s: f64, window: PixelWindow) -> LinearTimeSurface {
    let mut lts = LinearTimeSurface::zeroed(window, t_ref_s);
    let mut best_abs = vec![f64::INFINITY; lts.values.len()];
    for e in slice.events() {
        let x = e.x as i32;
        let y = e.y as i32;
        if !window.contains(x, y) {
            continue;
        }
        let idx = lts.idx((x - window.x0) as usize, (y - window.y0) as usize);
        let dt = e.t_s() - t_ref_s;
        if dt.abs() < best_abs[idx] {
            best_abs[idx] = dt.abs();
            lts.values[idx] = dt;
            lts.occupied[idx] = true;
        }
    }
    lts
}

/// Bilateral smoothing over occupied pixels.
///
/// Each occupied pixel is replaced by the Gaussian-weighted average of the
/// occupied pixels in a `(2*ceil(3*spatial_sigma)+1)^2` neighborhood, with
/// range weights on the value difference. Unoccupied pixels are neither read
/// nor written: their zeros are sentinels, not data.
pub fn smooth_bilateral(
    lts: &LinearTimeSurface,
    spatial_sigma_px: f64,
    range_sigma_s: f64,
) -> LinearTimeSurface {
    assert!(spatial_sigma_px > 0.0 && range_sigma_s > 0.0, "sigmas must be positive");
    let radius = (3.0 * spatial_sigma_px).ceil() as i64;
    let inv2s2 = 0.5 / (spatial_sigma_px * spatial_sigma_px);
    let inv2r2 = 0.5 / (range_sigma_s * range_sigma_s);
    let w = lts.window.width as i64;
    let h = lts.window.height as i64;

    let mut out = lts.clone();
    for ly in 0..h {
        for lx in 0..w {
            let idx = lts.idx(lx as usize, ly as usize);
            if !lts.occupied[idx] {
                continue;
            }
            let center = lts.values[idx];
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -radius..=radius {
                let ny = ly + dy;
                if ny < 0 || ny >= h {
                    continue;
                }
                for dx in -radius..=radius {
                    let nx = lx + dx;
                    if nx < 0 || nx >= w {
                        continue;
                    }
                    let nidx = lts.idx(nx as usize, ny as usize);
                    if !lts.occupied[nidx] {
                        continue;
                    }
                    let v = lts.values[nidx];
                    let d2 = (dx * dx + dy * dy) as f64;
                    let dv = v - center;
                    let weight = (-d2 * inv2s2 - dv * dv * inv2r2).exp();
                    num += weight * v;
                    den += weight;
                }
            }
            out.values[idx] = num / den;
        }
    }
    out
}

/// An event retained for solving, with its pixel and normalized coordinates.
#[derive(Debug, Clone, Copy)]
pub struct SampledEvent {
    /// Index into the source slice.
    pub index: usize,
    pub px: Vector2<f64>,
    pub p_norm: Vector2<f64>,
    pub t_s: f64,
}

/// Subset of a slice that passed the gradient tests.
#[derive(Debug, Clone)]
pub struct SampledEventSet {
    pub events: Vec<SampledEvent>,
    /// Number of events examined.
    pub n_input: usize,
}

/// Keeps events whose pixel has |grad T| > `g1_min` and a second-order
/// magnitude (Frobenius norm of the central-difference Hessian) below
/// `g2_max` on the given (smoothed) surface.
///
/// Derivatives are taken over occupied pixels only: zeros at unoccupied
/// pixels are sentinels, and reading them would reject the entire support
/// boundary of the surface, which carries the extreme time offsets the
/// solvers need. Where a neighbor is missing the stencil falls back to a
/// one-sided difference; second-order terms without both sides count as
/// zero. Pixels with no occupied neighbor along either axis are rejected.
pub fn robust_sample(
    lts: &LinearTimeSurface,
    slice: &EventSlice,
    intr: &CameraIntrinsics,
    g1_min: f64,
    g2_max: f64,
) -> SampledEventSet {
    let w = lts.window.width as i64;
    let h = lts.window.height as i64;
    let mut pixel_pass: HashMap<(i32, i32), bool> = HashMap::new();
    let mut events = Vec::new();

    for (index, e) in slice.events().iter().enumerate() {
        let x = e.x as i32;
        let y = e.y as i32;
        let pass = *pixel_pass.entry((x, y)).or_insert_with(|| {
            let lx = (x - lts.window.x0) as i64;
            let ly = (y - lts.window.y0) as i64;
            if lx < 0 || ly < 0 || lx >= w || ly >= h {
                return false;
            }
            let at = |dx: i64, dy: i64| -> Option<f64> {
                let nx = lx + dx;
                let ny = ly + dy;
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    return None;
                }
                let nidx = lts.idx(nx as usize, ny as usize);
                lts.occupied[nidx].then(|| lts.values[nidx])
            };
            let Some(v0) = at(0, 0) else {
                return false;
            };
            let axis = |minus: Option<f64>, plus: Option<f64>| -> Option<(f64, f64)> {
                // (first derivative, second derivative) along one axis.
                match (minus, plus) {
                    (Some(m), Some(p)) => Some((0.5 * (p - m), p - 2.0 * v0 + m)),
                    (None, Some(p)) => Some((p - v0, 0.0)),
                    (Some(m), None) => Some((v0 - m, 0.0)),
                    (None, None) => None,
                }
            };
            let x_terms = axis(at(-1, 0), at(1, 0));
            let y_terms = axis(at(0, -1), at(0, 1));
            if x_terms.is_none() && y_terms.is_none() {
                return false;
            }
            let (gx, dxx) = x_terms.unwrap_or((0.0, 0.0));
            let (gy, dyy) = y_terms.unwrap_or((0.0, 0.0));
            let dxy = match (at(1, 1), at(1, -1), at(-1, 1), at(-1, -1)) {
                (Some(pp), Some(pm), Some(mp), Some(mm)) => 0.25 * (pp - pm - mp + mm),
                _ => 0.0,
            };
            let grad = (gx * gx + gy * gy).sqrt();
            let frob = (dxx * dxx + 2.0 * dxy * dxy + dyy * dyy).sqrt();
            grad > g1_min && frob < g2_max
        });
        if pass {
            let px = e.px();
            events.push(SampledEvent {
                index,
                px,
                p_norm: intr.pixel_to_normalized(px),
                t_s: e.t_s(),
            });
        }
    }
    SampledEventSet { events, n_input: slice.len() }
}

/// Writes the surface as a min-max scaled 8-bit PGM plus a sidecar text file
/// (`<path>.txt`) holding the reference time and the applied scaling.
pub fn write_lts_pgm<P: AsRef<Path>>(lts: &LinearTimeSurface, path: P) -> std::io::Result<()> {
    let path = path.as_ref();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, o) in lts.values.iter().zip(&lts.occupied) {
        if *o {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 0.0;
    }
    let range = if hi > lo { hi - lo } else { 1.0 };

    let mut file = std::fs::File::create(path)?;
    writeln!(file, "P5\n{} {}\n255", lts.window.width, lts.window.height)?;
    let bytes: Vec<u8> = lts
        .values
        .iter()
        .zip(&lts.occupied)
        .map(|(v, o)| if *o { (255.0 * (v - lo) / range).round() as u8 } else { 0 })
        .collect();
    file.write_all(&bytes)?;

    let mut sidecar = std::fs::File::create(path.with_extension("pgm.txt"))?;
    writeln!(sidecar, "t_ref_s {}", lts.t_ref_s)?;
    writeln!(sidecar, "value_min_s {lo}")?;
    writeln!(sidecar, "value_max_s {hi}")?;
    writeln!(
        sidecar,
        "window {} {} {} {}",
        lts.window.x0, lts.window.y0, lts.window.width, lts.window.height
    )?;
    Ok(())
}
