//! Ego poses, relative motion between steps, and the discrete pose vocabulary.
//!
//! Coordinates follow the ego convention used by the renderer: x points
//! forward, y points left, headings are counter-clockwise radians.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute pose in the world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub theta: f64,
    pub x: f64,
    pub y: f64,
}

impl Pose {
    pub fn new(theta: f64, x: f64, y: f64) -> Self {
        Self { theta: wrap_angle(theta), x, y }
    }
}

/// Motion between two consecutive steps, expressed in the earlier step's ego
/// frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub dtheta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl RelativePose {
    pub fn new(dtheta: f64, dx: f64, dy: f64) -> Self {
        Self { dtheta, dx, dy }
    }

    pub fn is_finite(&self) -> bool {
        self.dtheta.is_finite() && self.dx.is_finite() && self.dy.is_finite()
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

pub fn relative_pose(prev: &Pose, curr: &Pose) -> RelativePose {
    let (s, c) = prev.theta.sin_cos();
    let wx = curr.x - prev.x;
    let wy = curr.y - prev.y;
    RelativePose { dtheta: wrap_angle(curr.theta - prev.theta), dx: c * wx + s * wy, dy: -s * wx + c * wy }
}

pub fn compose(pose: &Pose, delta: &RelativePose) -> Pose {
    let (s, c) = pose.theta.sin_cos();
    Pose {
        theta: wrap_angle(pose.theta + delta.dtheta),
        x: pose.x + c * delta.dx - s * delta.dy,
        y: pose.y + s * delta.dx + c * delta.dy,
    }
}

/// Relative poses of a trajectory; the first entry is always zero.
pub fn relative_poses(poses: &[Pose]) -> Vec<RelativePose> {
    let mut out = Vec::with_capacity(poses.len());
    if poses.is_empty() {
        return out;
    }
    out.push(RelativePose::default());
    for w in poses.windows(2) {
        out.push(relative_pose(&w[0], &w[1]));
    }
    out
}

/// Composes `deltas` one after another starting at `initial`; entry `t` is
/// the pose after applying `deltas[..=t]`.
pub fn accumulate_trajectory(initial: &Pose, deltas: &[RelativePose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(deltas.len());
    let mut p = *initial;
    for d in deltas {
        p = compose(&p, d);
        out.push(p);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseBinning {
    pub alpha: usize,
    pub beta: usize,
    pub gamma: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Reconstruct at bin centers instead of lower edges.
    pub bin_center: bool,
}

impl Default for PoseBinning {
    fn default() -> Self {
        Self {
            alpha: 64,
            beta: 32,
            gamma: 32,
            theta_min: -0.5,
            theta_max: 0.5,
            x_min: -2.0,
            x_max: 2.0,
            y_min: -2.0,
            y_max: 2.0,
            bin_center: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoseTokens {
    pub phi: usize,
    pub v: usize,
}

/// Counts of clamped components seen by [`tokenize_pose_counted`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationCounter {
    pub theta: u64,
    pub x: u64,
    pub y: u64,
}

impl SaturationCounter {
    pub fn total(&self) -> u64 {
        self.theta + self.x + self.y
    }
}

/// One quantized axis: `n` equal bins over `[lo, hi]`.
#[derive(Clone, Copy, Debug)]
struct Axis {
    n: usize,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 / self.n as f64 * (self.hi - self.lo)
    }

    /// Returns the bin index and whether the value had to be clamped. The raw
    /// floor is nudged so that every lower edge produced by `edge` maps back
    /// to its own bin despite rounding.
    fn index(&self, val: f64) -> (usize, bool) {
        let raw = ((val - self.lo) / (self.hi - self.lo) * self.n as f64).floor();
        let saturated = raw < 0.0 || raw >= self.n as f64;
        let mut i = raw.clamp(0.0, (self.n - 1) as f64) as usize;
        if !saturated {
            while i + 1 < self.n && self.edge(i + 1) <= val {
                i += 1;
            }
            while i > 0 && self.edge(i) > val {
                i -= 1;
            }
        }
        (i, saturated)
    }

    fn value(&self, i: usize, center: bool) -> f64 {
        if center {
            self.edge(i) + 0.5 * self.width()
        } else {
            self.edge(i)
        }
    }
}

impl PoseBinning {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 2 || self.beta < 2 || self.gamma < 2 {
            return Err(Error::Config("pose bin counts must be at least 2".into()));
        }
        for (lo, hi, name) in
            [(self.theta_min, self.theta_max, "theta"), (self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")]
        {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!("pose range for {name} must satisfy min < max")));
            }
        }
        Ok(())
    }

    pub fn phi_vocab(&self) -> usize {
        self.alpha
    }

    pub fn v_vocab(&self) -> usize {
        self.beta * self.gamma
    }

    fn theta_axis(&self) -> Axis {
        Axis { n: self.alpha, lo: self.theta_min, hi: self.theta_max }
    }

    fn x_axis(&self) -> Axis {
        Axis { n: self.beta, lo: self.x_min, hi: self.x_max }
    }

    fn y_axis(&self) -> Axis {
        Axis { n: self.gamma, lo: self.y_min, hi: self.y_max }
    }

    pub fn theta_bin_width(&self) -> f64 {
        self.theta_axis().width()
    }

    pub fn x_bin_width(&self) -> f64 {
        self.x_axis().width()
    }

    pub fn y_bin_width(&self) -> f64 {
        self.y_axis().width()
    }

    /// Splits a location token into its (x bin, y bin).
    pub fn split_v(&self, v: usize) -> (usize, usize) {
        (v / self.gamma, v % self.gamma)
    }
}

pub fn tokenize_pose(rel: &RelativePose, bins: &PoseBinning) -> Result<PoseTokens> {
    tokenize_pose_counted(rel, bins, &mut SaturationCounter::default())
}

pub fn tokenize_pose_counted(
    rel: &RelativePose,
    bins: &PoseBinning,
    saturation: &mut SaturationCounter,
) -> Result<PoseTokens> {
    if !rel.is_finite() {
        return Err(Error::NonFinite(format!("relative pose {rel:?}")));
    }
    let (phi, st) = bins.theta_axis().index(rel.dtheta);
    let (bx, sx) = bins.x_axis().index(rel.dx);
    let (by, sy) = bins.y_axis().index(rel.dy);
    saturation.theta += st as u64;
    saturation.x += sx as u64;
    saturation.y += sy as u64;
    Ok(PoseTokens { phi, v: bx * bins.gamma + by })
}

pub fn detokenize_pose(tokens: &PoseTokens, bins: &PoseBinning) -> Result<RelativePose> {
    if tokens.phi >= bins.alpha || tokens.v >= bins.v_vocab() {
        return Err(Error::OutOfRange(format!(
            "pose tokens (phi={}, v={}) outside vocabularies ({}, {})",
            tokens.phi,
            tokens.v,
            bins.alpha,
            bins.v_vocab()
        )));
    }
    let (bx, by) = bins.split_v(tokens.v);
    let c = bins.bin_center;
    Ok(RelativePose {
        dtheta: bins.theta_axis().value(tokens.phi, c),
        dx: bins.x_axis().value(bx, c),
        dy: bins.y_axis().value(by, c),
    })
}
