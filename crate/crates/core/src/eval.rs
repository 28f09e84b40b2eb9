//! Evaluation tooling: relative TTC error, images of warped events and their
//! contrast, used both by the tests and by the `eval`/`iwe` subcommands.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::event::{CameraIntrinsics, EventSlice, ParseError};
use crate::linear_solver::AffineParams;
use crate::registration::{warp_event, warp_event_constant_model};

#[derive(Debug)]
pub enum EvalError {
    ZeroGroundTruth,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::ZeroGroundTruth => write!(f, "ground-truth TTC is zero"),
        }
    }
}

impl std::error::Error for EvalError {}

/// `|(t_gt - t_est) / t_gt| * 100`.
pub fn relative_ttc_error(t_gt_s: f64, t_est_s: f64) -> Result<f64, EvalError> {
    if t_gt_s == 0.0 {
        return Err(EvalError::ZeroGroundTruth);
    }
    Ok(((t_gt_s - t_est_s) / t_gt_s).abs() * 100.0)
}

/// Which warp drives the accumulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarpModel {
    /// Parameters anchored at the destination depth `Z(t_ref)`; exact for
    /// constant-velocity scenes.
    TimeVariant,
    /// Constant-flow baseline anchored at `Z(t_anchor)`.
    Constant { t_anchor_s: f64 },
}

/// Image of warped events: bilinearly splatted event counts.
#[derive(Debug, Clone)]
pub struct Iwe {
    values: Vec<f64>,
    width: u32,
    height: u32,
    pub t_ref_s: f64,
    pub model: WarpModel,
    /// Events whose warp landed inside the grid.
    pub n_in_window: usize,
}

impl Iwe {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn value_at(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    /// Total accumulated mass; equals the number of in-window events.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn occupied_pixels(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Warps every event to `a.t_ref_s` under the chosen model and splats it
/// bilinearly into a `width x height` grid aligned with the sensor.
pub fn build_iwe(
    slice: &EventSlice,
    a: &AffineParams,
    intr: &CameraIntrinsics,
    model: WarpModel,
    width: u32,
    height: u32,
) -> Iwe {
    let mut iwe = Iwe {
        values: vec![0.0; width as usize * height as usize],
        width,
        height,
        t_ref_s: a.t_ref_s,
        model,
        n_in_window: 0,
    };
    let sx = width as f64 / intr.width as f64;
    let sy = height as f64 / intr.height as f64;
    for e in slice.events() {
        let p = intr.pixel_to_normalized(e.px());
        let q = match model {
            WarpModel::TimeVariant => warp_event(p, e.t_s(), a.t_ref_s, a),
            WarpModel::Constant { t_anchor_s } => {
                warp_event_constant_model(p, e.t_s(), a.t_ref_s, t_anchor_s, a)
            }
        };
        let px = intr.normalized_to_pixel(q);
        let gx = px.x * sx;
        let gy = px.y * sy;
        if gx < 0.0 || gy < 0.0 || gx > (width - 1) as f64 || gy > (height - 1) as f64 {
            continue;
        }
        let x0 = gx.floor() as u32;
        let y0 = gy.floor() as u32;
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let x1 = if fx == 0.0 { x0 } else { x0 + 1 };
        let y1 = if fy == 0.0 { y0 } else { y0 + 1 };
        let idx = |x: u32, y: u32| (y * width + x) as usize;
        iwe.values[idx(x0, y0)] += (1.0 - fx) * (1.0 - fy);
        iwe.values[idx(x1, y0)] += fx * (1.0 - fy);
        iwe.values[idx(x0, y1)] += (1.0 - fx) * fy;
        iwe.values[idx(x1, y1)] += fx * fy;
        iwe.n_in_window += 1;
    }
    iwe
}

/// Contrast of the image: the population variance of the grid values.
pub fn contrast(iwe: &Iwe) -> f64 {
    let n = iwe.values.len() as f64;
    let mean = iwe.values.iter().sum::<f64>() / n;
    iwe.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Min-max scaled 8-bit PGM dump.
pub fn write_iwe_pgm<P: AsRef<Path>>(iwe: &Iwe, path: P) -> std::io::Result<()> {
    let lo = iwe.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = iwe.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "P5\n{} {}\n255", iwe.width, iwe.height)?;
    let bytes: Vec<u8> =
        iwe.values.iter().map(|v| (255.0 * (v - lo) / range).round() as u8).collect();
    file.write_all(&bytes)
}

/// One ground-truth row from the simulator CSV.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthRow {
    pub t_s: f64,
    pub ttc_s: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
}

/// Parses `t_s,ttc_s,a_x,a_y,a_z` rows (header optional), sorted by time.
pub fn parse_ground_truth_csv<R: BufRead>(reader: R) -> Result<Vec<GroundTruthRow>, ParseError> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("t_s") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let parsed = (|| {
            if fields.len() != 5 {
                return None;
            }
            Some(GroundTruthRow {
                t_s: fields[0].trim().parse().ok()?,
                ttc_s: fields[1].trim().parse().ok()?,
                a_x: fields[2].trim().parse().ok()?,
                a_y: fields[3].trim().parse().ok()?,
                a_z: fields[4].trim().parse().ok()?,
            })
        })()
        .ok_or(ParseError::MalformedLine { line: line_no })?;
        rows.push(parsed);
    }
    rows.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    Ok(rows)
}

/// Linear interpolation of the ground-truth TTC at `t`, clamped to the ends.
pub fn interpolate_gt_ttc(rows: &[GroundTruthRow], t_s: f64) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    if t_s <= rows[0].t_s {
        return Some(rows[0].ttc_s);
    }
    if t_s >= rows[rows.len() - 1].t_s {
        return Some(rows[rows.len() - 1].ttc_s);
    }
    let hi = rows.partition_point(|r| r.t_s < t_s);
    let (lo, hi) = (&rows[hi - 1], &rows[hi]);
    let span = hi.t_s - lo.t_s;
    if span <= 0.0 {
        return Some(lo.ttc_s);
    }
    let f = (t_s - lo.t_s) / span;
    Some(lo.ttc_s + f * (hi.ttc_s - lo.ttc_s))
}

/// Per-estimate relative error against interpolated ground truth plus the
/// batch mean. Estimates with non-finite TTC are scored against the ground
/// truth as-is (an infinite estimate of a finite TTC is a 100%+ error).
pub fn evaluate_against_gt(
    estimates: &[(f64, f64)],
    gt: &[GroundTruthRow],
) -> (Vec<(f64, f64, f64, f64)>, f64) {
    let mut rows = Vec::new();
    let mut sum = 0.0;
    for &(t_ref_s, est_ttc_s) in estimates {
        let Some(gt_ttc) = interpolate_gt_ttc(gt, t_ref_s) else {
            continue;
        };
        let Ok(e) = relative_ttc_error(gt_ttc, est_ttc_s) else {
            continue;
        };
        rows.push((t_ref_s, gt_ttc, est_ttc_s, e));
        sum += e;
    }
    let mean = if rows.is_empty() { f64::NAN } else { sum / rows.len() as f64 };
    (rows, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Event;
    use crate::simulator::{generate_events, rectangle_contour, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn ttc_error_formula() {
        assert_eq!(relative_ttc_error(2.0, 2.0).unwrap(), 0.0);
        assert!((relative_ttc_error(2.0, 1.9).unwrap() - 5.0).abs() < 1e-12);
        assert!(matches!(relative_ttc_error(0.0, 1.0), Err(EvalError::ZeroGroundTruth)));
    }

    #[test]
    fn batch_mean_matches_per_sample_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let gt: Vec<GroundTruthRow> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.02;
                GroundTruthRow { t_s: t, ttc_s: 3.0 - t, a_x: 0.0, a_y: 0.0, a_z: 0.0 }
            })
            .collect();
        let estimates: Vec<(f64, f64)> = (0..30)
            .map(|_| {
                let t = rng.random_range(0.0..0.9);
                (t, 3.0 - t + rng.random_range(-0.2..0.2))
            })
            .collect();
        let (rows, mean) = evaluate_against_gt(&estimates, &gt);
        assert_eq!(rows.len(), estimates.len());
        // Brute-force recomputation.
        let mut sum = 0.0;
        for &(t, gt_ttc, est, e) in &rows {
            let expect = ((gt_ttc - est) / gt_ttc).abs() * 100.0;
            assert_eq!(e, expect);
            let interp = interpolate_gt_ttc(&gt, t).unwrap();
            assert!((interp - gt_ttc).abs() < 1e-12);
            sum += expect;
        }
        assert_eq!(mean, sum / rows.len() as f64);
    }

    fn approach_scene(seed: u64) -> SceneConfig {
        SceneConfig {
            contour: rectangle_contour(0.0, 0.0, 0.4, 0.3, 2.0, 30),
            nu: [0.0, 0.0, 2.0],
            intr: intr(),
            t_span_s: 0.25, // Z: 2.0 -> 1.5, 25% depth change
            event_pixel_step: 0.5,
            timestamp_jitter_sigma_s: 0.0,
            outlier_fraction: 0.0,
            rng_seed: seed,
        }
    }

    #[test]
    fn identity_warp_equals_plain_accumulation() {
        let (slice, _) = generate_events(&approach_scene(1)).unwrap();
        let a = AffineParams::zero(0.1);
        let iwe = build_iwe(&slice, &a, &intr(), WarpModel::TimeVariant, 640, 480);
        // Plain accumulation oracle.
        let mut plain = vec![0.0f64; 640 * 480];
        for e in slice.events() {
            plain[e.y as usize * 640 + e.x as usize] += 1.0;
        }
        for y in 0..480u32 {
            for x in 0..640u32 {
                assert!((iwe.value_at(x, y) - plain[y as usize * 640 + x as usize]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mass_equals_in_window_events() {
        let (slice, gt) = generate_events(&approach_scene(2)).unwrap();
        let a = gt.affine_at(0.12);
        let iwe = build_iwe(&slice, &a, &intr(), WarpModel::TimeVariant, 640, 480);
        assert!((iwe.mass() - iwe.n_in_window as f64).abs() < 1e-6);
        assert!(iwe.n_in_window > 0);
    }

    #[test]
    fn true_params_concentrate_mass() {
        let (slice, gt) = generate_events(&approach_scene(3)).unwrap();
        let t_ref = crate::lts::median_reference_time(&slice).unwrap();
        let a_true = gt.affine_at(t_ref);
        let sharp = build_iwe(&slice, &a_true, &intr(), WarpModel::TimeVariant, 640, 480);
        let blurred =
            build_iwe(&slice, &AffineParams::zero(t_ref), &intr(), WarpModel::TimeVariant, 640, 480);
        assert!(
            sharp.occupied_pixels() < blurred.occupied_pixels(),
            "sharp {} vs blurred {}",
            sharp.occupied_pixels(),
            blurred.occupied_pixels()
        );
        assert!(contrast(&sharp) > contrast(&blurred));
    }

    #[test]
    fn contrast_of_uniform_grid_is_zero() {
        let slice = EventSlice::empty(8, 8);
        let a = AffineParams::zero(0.0);
        let iwe = build_iwe(&slice, &a, &CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 8, 8), WarpModel::TimeVariant, 8, 8);
        assert_eq!(contrast(&iwe), 0.0);
    }

    #[test]
    fn contrast_single_hot_pixel_closed_form() {
        // m events splat onto one pixel among N: variance = (N-1) m^2 / N^2.
        let camera = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 10, 10);
        let m = 7usize;
        let events: Vec<Event> = (0..m).map(|i| Event::new(4, 4, i as i64 * 10, 1)).collect();
        let slice = EventSlice::new(events, 0.0, 1.0, 10, 10).unwrap();
        let iwe = build_iwe(&slice, &AffineParams::zero(0.0), &camera, WarpModel::TimeVariant, 10, 10);
        let n = 100.0;
        let expected = (n - 1.0) * (m as f64) * (m as f64) / (n * n);
        assert!((contrast(&iwe) - expected).abs() < 1e-12);
    }

    #[test]
    fn contrast_peaks_at_true_az() {
        let (slice, gt) = generate_events(&approach_scene(4)).unwrap();
        let t_ref = crate::lts::median_reference_time(&slice).unwrap();
        let a_true = gt.affine_at(t_ref);
        let c_true =
            contrast(&build_iwe(&slice, &a_true, &intr(), WarpModel::TimeVariant, 640, 480));
        for factor in [0.8, 1.2] {
            let a_pert = AffineParams::new(a_true.a_x, a_true.a_y, a_true.a_z * factor, t_ref);
            let c_pert =
                contrast(&build_iwe(&slice, &a_pert, &intr(), WarpModel::TimeVariant, 640, 480));
            assert!(
                c_true > c_pert,
                "perturbed {factor}: contrast {c_pert} vs true {c_true}"
            );
        }
    }

    #[test]
    fn gt_csv_roundtrip_and_interpolation() {
        let csv = "t_s,ttc_s,a_x,a_y,a_z\n0.0,3.0,0,0,0.3333\n1.0,2.0,0,0,0.5\n";
        let rows = parse_ground_truth_csv(std::io::Cursor::new(csv)).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((interpolate_gt_ttc(&rows, 0.5).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(interpolate_gt_ttc(&rows, -1.0).unwrap(), 3.0);
        assert_eq!(interpolate_gt_ttc(&rows, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn iwe_pgm_dump_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let (slice, _) = generate_events(&approach_scene(5)).unwrap();
        let iwe = build_iwe(
            &slice,
            &AffineParams::zero(0.1),
            &intr(),
            WarpModel::TimeVariant,
            320,
            240,
        );
        let path = dir.path().join("iwe.pgm");
        write_iwe_pgm(&iwe, &path).unwrap();
        let data = std::fs::read(&path).unwrap();
        assert!(data.starts_with(b"P5\n320 240\n255\n"));
        assert_eq!(data.len(), 15 + 320 * 240);
    }
}
