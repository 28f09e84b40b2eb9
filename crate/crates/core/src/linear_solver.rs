//! Robust linear initialization of the affine flow parameters from
//! normal-flow measurements.
//!
//! Each measurement contributes one linear constraint derived from the inner
//! product between the (unobservable) full flow and the observed normal flow:
//! the projection identity `u . n = n . n` holds exactly, and rewriting it in
//! terms of `a = nu / Z(t_ref)` gives a per-event row that is linear in `a`
//! even though the instantaneous flow scale varies with depth.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::normal_flow::NormalFlowMeasurement;

/// Condition-number ceiling above which a linear system counts as singular.
pub const SINGULARITY_CONDITION: f64 = 1e12;
/// Minimum angular diversity (radians) of the three sampled normal-flow
/// directions before a minimal solve is attempted.
pub const MIN_SAMPLE_ANGLE_SPREAD: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// Default `a_z` magnitude below which the scene counts as non-approaching.
pub const DEFAULT_MIN_AZ: f64 = 1e-3;

/// The affine flow parameters `a = nu / Z(t_ref)`, in 1/seconds, expressed at
/// a specific reference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    pub t_ref_s: f64,
}

impl AffineParams {
    pub fn new(a_x: f64, a_y: f64, a_z: f64, t_ref_s: f64) -> Self {
        Self { a_x, a_y, a_z, t_ref_s }
    }

    pub fn zero(t_ref_s: f64) -> Self {
        Self::new(0.0, 0.0, 0.0, t_ref_s)
    }

    #[inline]
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.a_x, self.a_y, self.a_z)
    }

    pub fn from_vector(v: Vector3<f64>, t_ref_s: f64) -> Self {
        Self::new(v.x, v.y, v.z, t_ref_s)
    }

    /// The affine flow field at a normalized point: `(-a_x + x a_z, -a_y + y a_z)`.
    #[inline]
    pub fn flow_at(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(-self.a_x + p.x * self.a_z, -self.a_y + p.y * self.a_z)
    }

    pub fn is_finite(&self) -> bool {
        self.a_x.is_finite() && self.a_y.is_finite() && self.a_z.is_finite()
    }
}

/// One row of the linear system, `row . a = rhs`.
#[derive(Debug, Clone, Copy)]
pub struct MeasurementRow {
    pub row: Vector3<f64>,
    pub rhs: f64,
    /// Index of the originating measurement.
    pub source: usize,
    /// Squared norm of the normal flow, used to normalize residuals.
    pub n_sq: f64,
}

impl MeasurementRow {
    /// Residual of the row under `a`, normalized by `n . n` so thresholds are
    /// dimensionless.
    #[inline]
    pub fn normalized_residual(&self, a: &Vector3<f64>) -> f64 {
        (self.row.dot(a) - self.rhs) / self.n_sq
    }
}

#[derive(Debug)]
pub enum SolverError {
    ZeroNormalFlow,
    SingularSystem,
    RankDeficient,
    NoConsensus { best_inliers: usize, total: usize },
    TooFewMeasurements { got: usize, need: usize },
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverError::ZeroNormalFlow => write!(f, "normal flow has zero magnitude"),
            SolverError::SingularSystem => write!(f, "minimal system is singular"),
            SolverError::RankDeficient => write!(f, "system is rank deficient"),
            SolverError::NoConsensus { best_inliers, total } => {
                write!(f, "no consensus: best {best_inliers} inliers of {total}")
            }
            SolverError::TooFewMeasurements { got, need } => {
                write!(f, "{got} measurements, need at least {need}")
            }
        }
    }
}

impl std::error::Error for SolverError {}

/// Builds the linear constraint for one measurement:
/// `row = [n_x, n_y, (dt n - p) . n]`, `rhs = -(n . n)`, `dt = t_ref - t`.
pub fn build_row(m: &NormalFlowMeasurement, t_ref_s: f64) -> Result<MeasurementRow, SolverError> {
    let n_sq = m.n.norm_squared();
    if n_sq <= 0.0 || !n_sq.is_finite() {
        return Err(SolverError::ZeroNormalFlow);
    }
    let dt = t_ref_s - m.t_s;
    let third = (m.n * dt - m.p).dot(&m.n);
    Ok(MeasurementRow {
        row: Vector3::new(m.n.x, m.n.y, third),
        rhs: -n_sq,
        source: m.source_index,
        n_sq,
    })
}

/// Exact solve from three rows. Fails when the 3x3 system's condition number
/// exceeds [`SINGULARITY_CONDITION`].
pub fn solve_minimal(rows: &[MeasurementRow], t_ref_s: f64) -> Result<AffineParams, SolverError> {
    if rows.len() != 3 {
        return Err(SolverError::TooFewMeasurements { got: rows.len(), need: 3 });
    }
    let m = Matrix3::from_rows(&[
        rows[0].row.transpose(),
        rows[1].row.transpose(),
        rows[2].row.transpose(),
    ]);
    let b = Vector3::new(rows[0].rhs, rows[1].rhs, rows[2].rhs);
    let svd = m.svd(true, true);
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[2];
    if !smin.is_finite() || smin <= 0.0 || smax / smin > SINGULARITY_CONDITION {
        return Err(SolverError::SingularSystem);
    }
    let a = svd.solve(&b, 0.0).map_err(|_| SolverError::SingularSystem)?;
    Ok(AffineParams::from_vector(a, t_ref_s))
}

/// Least-squares solve over three or more rows via orthogonal factorization
/// (SVD). Fails when the stacked system is rank deficient.
pub fn solve_least_squares(
    rows: &[MeasurementRow],
    t_ref_s: f64,
) -> Result<AffineParams, SolverError> {
    if rows.len() < 3 {
        return Err(SolverError::TooFewMeasurements { got: rows.len(), need: 3 });
    }
    let mut m = DMatrix::<f64>::zeros(rows.len(), 3);
    let mut b = DVector::<f64>::zeros(rows.len());
    for (i, r) in rows.iter().enumerate() {
        m[(i, 0)] = r.row.x;
        m[(i, 1)] = r.row.y;
        m[(i, 2)] = r.row.z;
        b[i] = r.rhs;
    }
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !smin.is_finite() || smin <= 0.0 || smax / smin > SINGULARITY_CONDITION {
        return Err(SolverError::RankDeficient);
    }
    let a = svd.solve(&b, 0.0).map_err(|_| SolverError::RankDeficient)?;
    Ok(AffineParams::from_vector(Vector3::new(a[0], a[1], a[2]), t_ref_s))
}

/// RANSAC configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iters: usize,
    /// Early-exit target: stop once this fraction of measurements agrees.
    pub target_inlier_ratio: f64,
    /// Dimensionless ceiling on `|row . a - rhs| / (n . n)`.
    pub inlier_threshold: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iters: 300, target_inlier_ratio: 0.9, inlier_threshold: 0.3, rng_seed: 0 }
    }
}

/// Result of a robust fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: AffineParams,
    /// Indices into the measurement list (not event indices).
    pub inliers: Vec<usize>,
    /// RMS of the normalized residuals over the inliers.
    pub rms: f64,
    pub iterations: usize,
}

// Angular spread of direction lines (mod pi). Degenerate samples whose normal
// flows are nearly parallel produce ill-conditioned minimal systems.
fn angle_spread(rows: [&MeasurementRow; 3]) -> f64 {
    let mut angles = [0.0f64; 3];
    for (i, r) in rows.iter().enumerate() {
        let mut a = r.row.y.atan2(r.row.x);
        if a < 0.0 {
            a += std::f64::consts::PI;
        }
        angles[i] = a;
    }
    let mut max_d: f64 = 0.0;
    for i in 0..3 {
        for j in (i + 1)..3 {
            let d = (angles[i] - angles[j]).abs();
            max_d = max_d.max(d.min(std::f64::consts::PI - d));
        }
    }
    max_d
}

/// Robust fit: repeated minimal solves on random triples, inlier counting
/// with the normalized residual, early exit at the target inlier ratio, and a
/// final least-squares refit on the best inlier set.
///
/// Deterministic for a fixed `cfg.rng_seed`.
pub fn ransac_fit(
    measurements: &[NormalFlowMeasurement],
    t_ref_s: f64,
    cfg: &RansacConfig,
) -> Result<FitResult, SolverError> {
    assert!(cfg.max_iters >= 1, "max_iters must be at least 1");
    assert!(
        cfg.target_inlier_ratio > 0.0 && cfg.target_inlier_ratio <= 1.0,
        "target inlier ratio must lie in (0, 1]"
    );
    let rows: Vec<MeasurementRow> = measurements
        .iter()
        .filter_map(|m| build_row(m, t_ref_s).ok())
        .collect();
    let n = rows.len();
    if n < 3 {
        return Err(SolverError::TooFewMeasurements { got: n, need: 3 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let target = (cfg.target_inlier_ratio * n as f64).ceil() as usize;

    let mut best_inliers: Vec<usize> = Vec::new();
    let mut best_params: Option<Vector3<f64>> = None;
    let mut iterations = 0usize;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let pick = rand::seq::index::sample(&mut rng, n, 3).into_vec();
        let sample = [&rows[pick[0]], &rows[pick[1]], &rows[pick[2]]];
        if angle_spread(sample) < MIN_SAMPLE_ANGLE_SPREAD {
            continue;
        }
        let Ok(candidate) = solve_minimal(
            &[*sample[0], *sample[1], *sample[2]],
            t_ref_s,
        ) else {
            continue;
        };
        let a = candidate.as_vector();
        let inliers: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.normalized_residual(&a).abs() <= cfg.inlier_threshold)
            .map(|(i, _)| i)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
            best_params = Some(a);
            if best_inliers.len() >= target {
                break;
            }
        }
    }

    let min_consensus = ((0.10 * n as f64).ceil() as usize).max(3);
    if best_inliers.len() < min_consensus {
        return Err(SolverError::NoConsensus { best_inliers: best_inliers.len(), total: n });
    }

    let inlier_rows: Vec<MeasurementRow> = best_inliers.iter().map(|&i| rows[i]).collect();
    let params = match solve_least_squares(&inlier_rows, t_ref_s) {
        Ok(p) => p,
        // Fall back to the winning minimal solution on a degenerate refit.
        Err(_) => AffineParams::from_vector(best_params.expect("best sample exists"), t_ref_s),
    };

    // A genuine consensus survives its own refit; a chance alignment of
    // noise scatters under least squares. Re-validate before reporting.
    let a = params.as_vector();
    let final_inliers: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.normalized_residual(&a).abs() <= cfg.inlier_threshold)
        .map(|(i, _)| i)
        .collect();
    if final_inliers.len() < min_consensus {
        return Err(SolverError::NoConsensus { best_inliers: final_inliers.len(), total: n });
    }
    let rms = (final_inliers
        .iter()
        .map(|&i| {
            let e = rows[i].normalized_residual(&a);
            e * e
        })
        .sum::<f64>()
        / final_inliers.len() as f64)
        .sqrt();

    // Report inliers as measurement indices.
    let inliers = final_inliers.iter().map(|&i| rows[i].source).collect();
    Ok(FitResult { params, inliers, rms, iterations })
}

/// Time to collision derived from `a_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ttc {
    /// Relative approach; collision in the given number of seconds.
    Approaching(f64),
    /// `|a_z|` below the floor: no measurable approach.
    Diverging,
    /// Moving apart; the magnitude is the time since (virtual) contact.
    Receding(f64),
}

impl Ttc {
    /// Seconds for CSV output: `inf` when diverging, negative when receding.
    pub fn as_csv_value(&self) -> f64 {
        match self {
            Ttc::Approaching(s) => *s,
            Ttc::Diverging => f64::INFINITY,
            Ttc::Receding(s) => -*s,
        }
    }
}

/// TTC = 1 / a_z, guarded by `min_az` against division by noise.
pub fn ttc_from_params(a: &AffineParams, min_az: f64) -> Ttc {
    if a.a_z > min_az {
        Ttc::Approaching(1.0 / a.a_z)
    } else if a.a_z < -min_az {
        Ttc::Receding(1.0 / a.a_z.abs())
    } else {
        Ttc::Diverging
    }
}
