//! Guidance trajectories fitted through sparse waypoints.
//!
//! Sparse planner waypoints plus the target pose are interpolated by a
//! clamped cubic B-spline with chord-length knot parameterization: the
//! control points are solved so the curve passes through every
//! waypoint, with natural (zero second derivative) end conditions
//! supplying the two extra constraints. Positions are evaluated with
//! de Boor's algorithm; orientations are carried at the waypoints that
//! specify one and filled by spherical interpolation in between.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_slerp, Pose, Quat, Vec3};

/// Waypoints closer than this (consecutively) are merged before fitting.
pub const DEDUP_DISTANCE: f64 = 1e-6;

/// Nominal speed used to derive a duration hint from the chord length.
pub const REFERENCE_SPEED: f64 = 0.25;

const DEGREE: usize = 3;

/// A sparse guidance waypoint in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: Vec3,
    pub orientation: Option<Quat>,
    pub gripper_hint: Option<bool>,
}

impl Waypoint {
    pub fn at(position: Vec3) -> Self {
        Waypoint {
            position,
            orientation: None,
            gripper_hint: None,
        }
    }

    pub fn with_orientation(position: Vec3, orientation: Quat) -> Self {
        Waypoint {
            position,
            orientation: Some(orientation),
            gripper_hint: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.position.is_finite() {
            return Err(Error::validation("waypoint with non-finite position"));
        }
        if let Some(q) = self.orientation {
            if !q.is_finite() || (q.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::validation("waypoint with non-unit orientation"));
            }
        }
        Ok(())
    }
}

/// A pose sampled from a guidance trajectory, tagged with its phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidancePose {
    pub pose: Pose,
    pub phase: f64,
}

/// Continuous curve through the fitted waypoints, parameterized over
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrajectory {
    /// Chord-length parameter of each fitted waypoint (strictly
    /// increasing, first 0, last 1).
    knots: Vec<f64>,
    /// Clamped knot vector of the cubic position spline.
    knot_vector: Vec<f64>,
    control_points: Vec<Vec3>,
    /// One orientation per waypoint knot; non-carrier waypoints hold
    /// the spherical interpolation of the nearest carriers.
    orientation_keys: Vec<(f64, Quat)>,
    /// Waypoints that carried a gripper hint.
    gripper_keys: Vec<(f64, bool)>,
    /// Rough wall-clock duration of the motion in seconds.
    pub duration_hint: f64,
}

/// Evaluation result carrying the out-of-range clamp diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    pub pose: Pose,
    /// The requested phase fell outside `[0, 1]` and was clamped.
    pub clamped: bool,
}

impl GuidanceTrajectory {
    /// Parameters (in `[0, 1]`) at which the fitted waypoints sit.
    pub fn waypoint_knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn gripper_keys(&self) -> &[(f64, bool)] {
        &self.gripper_keys
    }

    pub fn orientation_keys(&self) -> &[(f64, Quat)] {
        &self.orientation_keys
    }

    pub fn control_points(&self) -> &[Vec3] {
        &self.control_points
    }

    pub fn knot_vector(&self) -> &[f64] {
        &self.knot_vector
    }

    /// Position at `phase` via de Boor's algorithm. Phase 0 and 1
    /// return the first/last waypoint positions exactly.
    pub fn position(&self, phase: f64) -> Vec3 {
        let u = phase.clamp(0.0, 1.0);
        if u <= 0.0 {
            return self.control_points[0];
        }
        if u >= 1.0 {
            return *self.control_points.last().expect("nonempty control net");
        }
        let t = &self.knot_vector;
        let span = find_span(t, self.control_points.len(), u);
        let mut d = [Vec3::ZERO; DEGREE + 1];
        for (j, slot) in d.iter_mut().enumerate() {
            *slot = self.control_points[span - DEGREE + j];
        }
        for r in 1..=DEGREE {
            for j in (r..=DEGREE).rev() {
                let i = span - DEGREE + j;
                let denom = t[i + DEGREE + 1 - r] - t[i];
                let alpha = if denom == 0.0 { 0.0 } else { (u - t[i]) / denom };
                d[j] = d[j - 1] * (1.0 - alpha) + d[j] * alpha;
            }
        }
        d[DEGREE]
    }

    /// Orientation at `phase`: spherical interpolation between the
    /// bracketing orientation keys, clamped outside the key range.
    pub fn orientation(&self, phase: f64) -> Quat {
        let u = phase.clamp(0.0, 1.0);
        let keys = &self.orientation_keys;
        if u <= keys[0].0 {
            return keys[0].1;
        }
        if u >= keys[keys.len() - 1].0 {
            return keys[keys.len() - 1].1;
        }
        let hi = keys.partition_point(|(k, _)| *k <= u);
        let (k0, q0) = keys[hi - 1];
        let (k1, q1) = keys[hi];
        if k1 - k0 <= f64::EPSILON {
            return q0;
        }
        quat_slerp(q0, q1, (u - k0) / (k1 - k0))
    }

    /// Pose at `phase`, with the clamp diagnostic.
    pub fn eval_checked(&self, phase: f64) -> TrajectorySample {
        let clamped = !(0.0..=1.0).contains(&phase);
        let u = phase.clamp(0.0, 1.0);
        TrajectorySample {
            pose: Pose::from_parts(self.position(u), self.orientation(u)),
            clamped,
        }
    }

    /// Pose at `phase` (clamped to `[0, 1]`).
    pub fn eval(&self, phase: f64) -> Pose {
        self.eval_checked(phase).pose
    }

    /// Phase of the point on the position curve nearest to `point`.
    ///
    /// Coarse grid search refined by ternary section in the winning
    /// bracket; deterministic.
    pub fn project_phase(&self, point: Vec3) -> f64 {
        const GRID: usize = 256;
        let mut best_i = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..=GRID {
            let u = i as f64 / GRID as f64;
            let delta = self.position(u) - point;
            let d = delta.dot(delta);
            if d < best_d {
                best_d = d;
                best_i = i;
            }
        }
        let mut lo = (best_i.saturating_sub(1)) as f64 / GRID as f64;
        let mut hi = ((best_i + 1).min(GRID)) as f64 / GRID as f64;
        for _ in 0..80 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            let d1 = self.position(m1) - point;
            let d2 = self.position(m2) - point;
            if d1.dot(d1) <= d2.dot(d2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        0.5 * (lo + hi)
    }

    /// Phase reached after `elapsed` seconds at the nominal duration
    /// (the alternative, time-indexed guidance sampling rule).
    pub fn phase_at_time(&self, elapsed: f64) -> f64 {
        if self.duration_hint <= 0.0 {
            return 1.0;
        }
        (elapsed / self.duration_hint).clamp(0.0, 1.0)
    }
}

/// Fit a guidance trajectory through `waypoints` plus the `target`
/// pose (appended as the final, orientation-carrying waypoint).
pub fn fit_guidance(waypoints: &[Waypoint], target: &Pose) -> Result<GuidanceTrajectory> {
    let mut all = waypoints.to_vec();
    all.push(Waypoint {
        position: target.position,
        orientation: Some(target.orientation),
        gripper_hint: None,
    });
    fit_waypoints(&all)
}

/// Fit a guidance trajectory through an explicit waypoint sequence
/// whose last element is the target.
pub fn fit_waypoints(waypoints: &[Waypoint]) -> Result<GuidanceTrajectory> {
    for w in waypoints {
        w.validate()?;
    }
    let pts = dedup(waypoints);
    let m = pts.len();
    if m < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 distinct waypoints, got {m} after deduplication"
        )));
    }

    // Chord-length parameterization normalized to [0, 1].
    let mut knots = Vec::with_capacity(m);
    knots.push(0.0);
    let mut acc = 0.0;
    for i in 1..m {
        acc += (pts[i].position - pts[i - 1].position).norm();
        knots.push(acc);
    }
    let total = acc;
    for k in &mut knots[1..] {
        *k /= total;
    }
    knots[m - 1] = 1.0;

    let mut knot_vector = vec![0.0; DEGREE + 1];
    knot_vector.extend_from_slice(&knots[1..m - 1]);
    knot_vector.extend(std::iter::repeat(1.0).take(DEGREE + 1));

    let control_points = solve_control_points(&knot_vector, &knots, &pts)?;
    let orientation_keys = fill_orientation_keys(&knots, &pts);
    let gripper_keys = pts
        .iter()
        .zip(&knots)
        .filter_map(|(w, &k)| w.gripper_hint.map(|h| (k, h)))
        .collect();

    Ok(GuidanceTrajectory {
        knots,
        knot_vector,
        control_points,
        orientation_keys,
        gripper_keys,
        duration_hint: total / REFERENCE_SPEED,
    })
}

/// Sample the guidance pose for an end effector at `ee_position`:
/// nearest-point projection plus a fixed phase lookahead, clamped.
pub fn sample_guidance(
    traj: &GuidanceTrajectory,
    ee_position: Vec3,
    lookahead: f64,
) -> GuidancePose {
    let phase = (traj.project_phase(ee_position) + lookahead).clamp(0.0, 1.0);
    GuidancePose {
        pose: traj.eval(phase),
        phase,
    }
}

/// Displace waypoints by Gaussian noise.
///
/// Positions move by i.i.d. noise of standard deviation
/// `sigma * workspace_diagonal` per axis; orientations (where present)
/// rotate about a random axis by an angle drawn from
/// `N(0, sigma * pi/4)`. `sigma` is dimensionless.
pub fn perturb_goal(
    waypoints: &[Waypoint],
    sigma: f64,
    workspace_diagonal: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Waypoint>> {
    if sigma < 0.0 {
        return Err(Error::Validation(format!("negative noise scale {sigma}")));
    }
    if workspace_diagonal <= 0.0 {
        return Err(Error::validation("workspace diagonal must be positive"));
    }
    let pos_std = sigma * workspace_diagonal;
    let ang_std = sigma * std::f64::consts::FRAC_PI_4;
    let mut out = Vec::with_capacity(waypoints.len());
    for w in waypoints {
        let mut p = *w;
        let n: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        if sigma > 0.0 {
            p.position = p.position + Vec3::new(n[0], n[1], n[2]) * pos_std;
        }
        if let Some(q) = p.orientation {
            let a: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let angle: f64 = rng.sample::<f64, _>(StandardNormal) * ang_std;
            if sigma > 0.0 {
                let axis = Vec3::new(a[0], a[1], a[2]);
                let axis = if axis.norm() < 1e-12 {
                    Vec3::new(0.0, 0.0, 1.0)
                } else {
                    axis
                };
                p.orientation = Some(Quat::from_axis_angle(axis, angle).mul(q).canonicalized());
            }
        }
        out.push(p);
    }
    Ok(out)
}

fn dedup(waypoints: &[Waypoint]) -> Vec<Waypoint> {
    let mut out: Vec<Waypoint> = Vec::with_capacity(waypoints.len());
    for w in waypoints {
        match out.last_mut() {
            Some(prev) if (prev.position - w.position).norm() < DEDUP_DISTANCE => {
                // Merge: later fields win where present.
                prev.orientation = w.orientation.or(prev.orientation);
                prev.gripper_hint = w.gripper_hint.or(prev.gripper_hint);
            }
            _ => out.push(*w),
        }
    }
    out
}

fn fill_orientation_keys(knots: &[f64], pts: &[Waypoint]) -> Vec<(f64, Quat)> {
    let carriers: Vec<(usize, Quat)> = pts
        .iter()
        .enumerate()
        .filter_map(|(i, w)| w.orientation.map(|q| (i, q.canonicalized())))
        .collect();
    if carriers.is_empty() {
        return knots.iter().map(|&k| (k, Quat::IDENTITY)).collect();
    }
    let mut keys = Vec::with_capacity(pts.len());
    for (i, &k) in knots.iter().enumerate() {
        let after = carriers.partition_point(|(ci, _)| *ci < i);
        let q = if after == 0 {
            carriers[0].1
        } else if after == carriers.len() {
            carriers[carriers.len() - 1].1
        } else if carriers[after].0 == i {
            carriers[after].1
        } else {
            let (i0, q0) = carriers[after - 1];
            let (i1, q1) = carriers[after];
            let (k0, k1) = (knots[i0], knots[i1]);
            quat_slerp(q0, q1, (k - k0) / (k1 - k0))
        };
        keys.push((k, q));
    }
    keys
}

/// Index of the knot span containing `u` (half-open spans, the last
/// span closed).
fn find_span(t: &[f64], n_ctrl: usize, u: f64) -> usize {
    let last = n_ctrl - 1;
    if u >= t[last + 1] {
        return last;
    }
    let mut lo = DEGREE;
    let mut hi = last;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if t[mid] <= u {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Cox-de Boor basis value N_{j,p}(u) with the 0/0 = 0 convention and
/// the final span treated as closed.
fn basis_value(t: &[f64], j: usize, p: usize, u: f64) -> f64 {
    if p == 0 {
        let last = *t.last().expect("nonempty knot vector");
        let closed_end = u == last && t[j + 1] == last && t[j] < t[j + 1];
        return if (t[j] <= u && u < t[j + 1]) || closed_end {
            1.0
        } else {
            0.0
        };
    }
    let mut v = 0.0;
    let d1 = t[j + p] - t[j];
    if d1 > 0.0 {
        v += (u - t[j]) / d1 * basis_value(t, j, p - 1, u);
    }
    let d2 = t[j + p + 1] - t[j + 1];
    if d2 > 0.0 {
        v += (t[j + p + 1] - u) / d2 * basis_value(t, j + 1, p - 1, u);
    }
    v
}

/// First derivative of N_{j,p} at u.
fn basis_deriv(t: &[f64], j: usize, p: usize, u: f64) -> f64 {
    let mut v = 0.0;
    let d1 = t[j + p] - t[j];
    if d1 > 0.0 {
        v += p as f64 / d1 * basis_value(t, j, p - 1, u);
    }
    let d2 = t[j + p + 1] - t[j + 1];
    if d2 > 0.0 {
        v -= p as f64 / d2 * basis_value(t, j + 1, p - 1, u);
    }
    v
}

/// Second derivative of N_{j,p} at u.
fn basis_deriv2(t: &[f64], j: usize, p: usize, u: f64) -> f64 {
    let mut v = 0.0;
    let d1 = t[j + p] - t[j];
    if d1 > 0.0 {
        v += p as f64 / d1 * basis_deriv(t, j, p - 1, u);
    }
    let d2 = t[j + p + 1] - t[j + 1];
    if d2 > 0.0 {
        v -= p as f64 / d2 * basis_deriv(t, j + 1, p - 1, u);
    }
    v
}

/// Solve the interpolation system for the control points.
///
/// The first and last control points are pinned to the end waypoints
/// (so the clamped curve hits them bit-exactly); the interior ones
/// solve the waypoint interpolation conditions plus natural end
/// conditions.
fn solve_control_points(
    knot_vector: &[f64],
    knots: &[f64],
    pts: &[Waypoint],
) -> Result<Vec<Vec3>> {
    let m = pts.len();
    let n_ctrl = m + 2;
    let unknowns = m; // control points 1..=m
    let mut a = vec![0.0; unknowns * unknowns];
    let mut b = vec![[0.0; 3]; unknowns];

    let first = pts[0].position.to_array();
    let last = pts[m - 1].position.to_array();

    let mut row = 0;
    let mut push_row = |coeffs: Vec<(usize, f64)>, rhs: [f64; 3]| {
        let mut r = rhs;
        for (j, c) in coeffs {
            if j == 0 {
                for (axis, f) in first.iter().enumerate() {
                    r[axis] -= c * f;
                }
            } else if j == n_ctrl - 1 {
                for (axis, l) in last.iter().enumerate() {
                    r[axis] -= c * l;
                }
            } else {
                a[row * unknowns + (j - 1)] += c;
            }
        }
        b[row] = r;
        row += 1;
    };

    // Natural end conditions: zero second derivative at both ends.
    for &u in &[0.0, 1.0] {
        let coeffs: Vec<(usize, f64)> = (0..n_ctrl)
            .filter_map(|j| {
                let c = basis_deriv2(knot_vector, j, DEGREE, u);
                (c != 0.0).then_some((j, c))
            })
            .collect();
        push_row(coeffs, [0.0; 3]);
    }

    // Interior interpolation conditions.
    for i in 1..m - 1 {
        let u = knots[i];
        let coeffs: Vec<(usize, f64)> = (0..n_ctrl)
            .filter_map(|j| {
                let c = basis_value(knot_vector, j, DEGREE, u);
                (c != 0.0).then_some((j, c))
            })
            .collect();
        push_row(coeffs, pts[i].position.to_array());
    }
    debug_assert_eq!(row, unknowns);

    let solution = solve_dense(&mut a, &mut b, unknowns)?;
    let mut control = Vec::with_capacity(n_ctrl);
    control.push(pts[0].position);
    control.extend(solution);
    control.push(pts[m - 1].position);
    Ok(control)
}

/// Gaussian elimination with partial pivoting on a dense system with a
/// 3-column right-hand side.
fn solve_dense(a: &mut [f64], b: &mut [[f64; 3]], n: usize) -> Result<Vec<Vec3>> {
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * n + col]
                    .abs()
                    .partial_cmp(&a[r2 * n + col].abs())
                    .expect("finite matrix entries")
            })
            .expect("nonempty range");
        if a[pivot_row * n + col].abs() < 1e-14 {
            return Err(Error::DegenerateInput(
                "singular spline interpolation system".to_string(),
            ));
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for axis in 0..3 {
                b[r][axis] -= factor * b[col][axis];
            }
        }
    }
    let mut x = vec![Vec3::ZERO; n];
    for row in (0..n).rev() {
        let mut rhs = b[row];
        for j in row + 1..n {
            for (axis, r) in rhs.iter_mut().enumerate() {
                *r -= a[row * n + j] * x[j].to_array()[axis];
            }
        }
        let pivot = a[row * n + row];
        x[row] = Vec3::new(rhs[0] / pivot, rhs[1] / pivot, rhs[2] / pivot);
    }
    Ok(x)
}
