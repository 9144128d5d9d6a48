//! Rigid-body geometry: rotations, SE(3) poses, tangent-space updates,
//! pose interpolation and ordering, pinhole projection, pose-error metrics.
//!
//! Conventions: poses map world coordinates into the camera frame
//! (`X_cam = R·X_world + t`), rotations are unit quaternions canonicalized
//! to `w >= 0`, the camera looks down +z, and tangent-space updates are
//! applied on the left (`exp(xi) ∘ T`).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A 3D rotation stored as a unit quaternion with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds a rotation from raw quaternion components, renormalizing and
    /// canonicalizing the sign so `w >= 0`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Self::canonical(q)
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::canonical(q)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let q = UnitQuaternion::from_scaled_axis(axis * (angle_rad / n));
        Self::canonical(q)
    }

    /// Rotation from a scaled axis (axis direction, magnitude = angle in radians).
    pub fn from_scaled_axis(omega: &Vector3<f64>) -> Self {
        Self::canonical(UnitQuaternion::from_scaled_axis(*omega))
    }

    /// Rebuilds a rotation from persisted components without renormalizing,
    /// so values that round-tripped through 32-bit storage keep their bits.
    /// Only the sign flip to `w >= 0` (exact in floating point) is applied.
    /// Rejects inputs whose norm strays more than 1e-3 from unit.
    pub fn from_stored(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
            return Err(Error::malformed(
                "rotation",
                format!("stored quaternion norm {norm} is not near unit"),
            ));
        }
        let q = if w < 0.0 {
            Quaternion::new(-w, -x, -y, -z)
        } else {
            Quaternion::new(w, x, y, z)
        };
        Ok(Rotation(UnitQuaternion::new_unchecked(q)))
    }

    fn canonical(q: UnitQuaternion<f64>) -> Self {
        let mut raw = q.into_inner();
        if raw.w < 0.0 {
            raw = -raw;
        }
        // Renormalize so the unit-norm invariant survives long update chains.
        Rotation(UnitQuaternion::new_normalize(raw))
    }

    /// Quaternion components as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        self.0
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::canonical(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let [w, x, y, z] = self.wxyz();
        let vec_norm = (x * x + y * y + z * z).sqrt();
        2.0 * vec_norm.atan2(w.abs())
    }

    /// Geodesic angle in radians between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.inverse().compose(other).angle()
    }

    /// Axis-angle vector (`axis * angle`), the log map of SO(3).
    pub fn scaled_axis(&self) -> Vector3<f64> {
        let [w, x, y, z] = self.wxyz();
        let v = Vector3::new(x, y, z);
        let n = v.norm();
        if n < 1e-12 {
            // Near identity: q ≈ (1, omega/2).
            return v * 2.0;
        }
        let angle = 2.0 * n.atan2(w);
        v * (angle / n)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

/// Spherical linear interpolation between unit quaternions along the shortest
/// great-circle arc.
///
/// When `dot(q0, q1) < 0`, the sign of `q1` is flipped so the shorter of the
/// two double-cover paths is taken. Nearly identical inputs fall back to
/// normalized linear interpolation. For rotations exactly 180° apart the
/// geodesic is not unique; the path through the given representatives is used.
pub fn slerp(q0: &Rotation, q1: &Rotation, alpha: f64) -> Rotation {
    let a = q0.wxyz();
    let mut b = q1.wxyz();
    let mut dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    if dot < 0.0 {
        for c in &mut b {
            *c = -*c;
        }
        dot = -dot;
    }
    let dot = dot.min(1.0);
    let (s0, s1) = if dot > 1.0 - 1e-12 {
        (1.0 - alpha, alpha)
    } else {
        let omega = dot.acos();
        let sin_omega = omega.sin();
        (
            ((1.0 - alpha) * omega).sin() / sin_omega,
            (alpha * omega).sin() / sin_omega,
        )
    };
    Rotation::from_quaternion(
        s0 * a[0] + s1 * b[0],
        s0 * a[1] + s1 * b[1],
        s0 * a[2] + s1 * b[2],
        s0 * a[3] + s1 * b[3],
    )
}

/// An SE(3) element mapping world coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -rot_inv.rotate(&self.translation),
        }
    }

    /// World point into the camera frame: `R·X + t`.
    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(point) + self.translation
    }

    /// Camera center expressed in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -self.rotation.inverse().rotate(&self.translation)
    }

    /// Left-trivialized log map; inverse of [`Twist::exp`].
    pub fn log(&self) -> Twist {
        let omega = self.rotation.scaled_axis();
        let v = v_matrix_inverse(&omega) * self.translation;
        Twist { omega, v }
    }

    /// 4x4 row-major homogeneous matrix as whitespace-separated text
    /// (one row per line).
    pub fn to_matrix_text(&self) -> String {
        let r = self.rotation.to_matrix();
        let t = self.translation;
        let mut out = String::new();
        for row in 0..3 {
            out.push_str(&format!(
                "{} {} {} {}\n",
                r[(row, 0)],
                r[(row, 1)],
                r[(row, 2)],
                t[row]
            ));
        }
        out.push_str("0 0 0 1\n");
        out
    }

    /// Parses the 4x4 row-major text form produced by [`Pose::to_matrix_text`].
    pub fn from_matrix_text(text: &str) -> Result<Pose> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::malformed("pose matrix", format!("bad number `{tok}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 16 {
            return Err(Error::malformed(
                "pose matrix",
                format!("expected 16 values, got {}", values.len()),
            ));
        }
        let bottom = &values[12..16];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::malformed(
                "pose matrix",
                "last row must be `0 0 0 1`".to_string(),
            ));
        }
        let r = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let q = UnitQuaternion::from_matrix(&r);
        Ok(Pose {
            rotation: Rotation::from_unit_quaternion(q),
            translation: Vector3::new(values[3], values[7], values[11]),
        })
    }
}

// JSON form: {"q": [w, x, y, z], "t": [x, y, z]}.
impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            q: [f64; 4],
            t: [f64; 3],
        }
        Repr {
            q: self.rotation.wxyz(),
            t: self.translation.into(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            q: [f64; 4],
            t: [f64; 3],
        }
        let repr = Repr::deserialize(deserializer)?;
        let norm2: f64 = repr.q.iter().map(|c| c * c).sum();
        if !(norm2.is_finite() && norm2 > 0.0) {
            return Err(D::Error::custom("pose quaternion must be finite and nonzero"));
        }
        Ok(Pose {
            rotation: Rotation::from_quaternion(repr.q[0], repr.q[1], repr.q[2], repr.q[3]),
            translation: Vector3::from(repr.t),
        })
    }
}

/// SE(3) tangent increment: rotational part `omega` (axis-angle, radians)
/// and translational part `v` (scene units).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn from_array(xi: &[f64; 6]) -> Self {
        Twist {
            omega: Vector3::new(xi[0], xi[1], xi[2]),
            v: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    /// Exponential map onto SE(3). Rodrigues for the rotational part with a
    /// series fallback below `|omega| < 1e-8`; `exp(0)` is exactly the identity.
    pub fn exp(&self) -> Pose {
        Pose {
            rotation: Rotation::from_scaled_axis(&self.omega),
            translation: v_matrix(&self.omega) * self.v,
        }
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Left Jacobian of SO(3): `V = I + ((1-cos t)/t^2)·[w]x + ((t-sin t)/t^3)·[w]x^2`.
fn v_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    let (a, b) = if theta < 1e-8 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

fn v_matrix_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    let c = if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let t2 = theta * theta;
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / t2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Left-multiplicative pose update: `exp(xi) ∘ T`.
pub fn apply_twist(pose: &Pose, xi: &Twist) -> Pose {
    xi.exp().compose(pose)
}

/// Cosine-eased interpolation weight for the k-th of K in-between poses.
pub fn pseudo_view_alpha(k: usize, count: usize) -> f64 {
    (1.0 - (k as f64 * std::f64::consts::PI / (count as f64 + 1.0)).cos()) / 2.0
}

/// K poses between `a` and `b`: translations blended linearly, rotations by
/// slerp, both with the cosine-eased weight `alpha(k) = (1 - cos(k·pi/(K+1)))/2`.
pub fn interpolate_pose_pair(a: &Pose, b: &Pose, count: usize) -> Vec<Pose> {
    (1..=count)
        .map(|k| {
            let alpha = pseudo_view_alpha(k, count);
            Pose {
                rotation: slerp(&a.rotation, &b.rotation, alpha),
                translation: a.translation * (1.0 - alpha) + b.translation * alpha,
            }
        })
        .collect()
}

fn path_length(order: &[usize], dist: &[Vec<f64>]) -> f64 {
    order.windows(2).map(|w| dist[w[0]][w[1]]).sum()
}

/// Orders poses into the open path minimizing total pairwise translation
/// distance. Exact (Held-Karp) for up to 10 poses; greedy nearest-neighbor
/// from the pose closest to the centroid plus 2-opt above that.
pub fn order_poses(poses: &[Pose]) -> Vec<usize> {
    let n = poses.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (poses[i].translation - poses[j].translation).norm())
                .collect()
        })
        .collect();
    if n <= 10 {
        held_karp_path(&dist)
    } else {
        let greedy = greedy_path(poses, &dist);
        two_opt(greedy, &dist)
    }
}

fn held_karp_path(dist: &[Vec<f64>]) -> Vec<usize> {
    let n = dist.len();
    let full = 1usize << n;
    // dp[mask][last] = shortest open path covering `mask`, ending at `last`.
    let mut dp = vec![vec![f64::INFINITY; n]; full];
    let mut parent = vec![vec![usize::MAX; n]; full];
    for i in 0..n {
        dp[1 << i][i] = 0.0;
    }
    for mask in 1..full {
        for last in 0..n {
            if mask & (1 << last) == 0 || !dp[mask][last].is_finite() {
                continue;
            }
            let base = dp[mask][last];
            for next in 0..n {
                if mask & (1 << next) != 0 {
                    continue;
                }
                let cand = base + dist[last][next];
                let m2 = mask | (1 << next);
                if cand < dp[m2][next] {
                    dp[m2][next] = cand;
                    parent[m2][next] = last;
                }
            }
        }
    }
    let mut best_last = 0;
    for last in 1..n {
        if dp[full - 1][last] < dp[full - 1][best_last] {
            best_last = last;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut mask = full - 1;
    let mut last = best_last;
    while last != usize::MAX {
        order.push(last);
        let prev = parent[mask][last];
        mask &= !(1 << last);
        last = prev;
    }
    order.reverse();
    order
}

fn greedy_path(poses: &[Pose], dist: &[Vec<f64>]) -> Vec<usize> {
    let n = poses.len();
    let centroid =
        poses.iter().map(|p| p.translation).sum::<Vector3<f64>>() / n as f64;
    let mut start = 0;
    let mut best = f64::INFINITY;
    for (i, p) in poses.iter().enumerate() {
        let d = (p.translation - centroid).norm();
        if d < best {
            best = d;
            start = i;
        }
    }
    let mut visited = vec![false; n];
    let mut order = vec![start];
    visited[start] = true;
    while order.len() < n {
        let last = *order.last().unwrap();
        let mut next = usize::MAX;
        let mut best = f64::INFINITY;
        for (j, seen) in visited.iter().enumerate() {
            if !seen && dist[last][j] < best {
                best = dist[last][j];
                next = j;
            }
        }
        visited[next] = true;
        order.push(next);
    }
    order
}

fn two_opt(mut order: Vec<usize>, dist: &[Vec<f64>]) -> Vec<usize> {
    let n = order.len();
    let mut improved = true;
    while improved {
        improved = false;
        let current = path_length(&order, dist);
        'scan: for i in 0..n - 1 {
            for j in i + 1..n {
                let mut cand = order.clone();
                cand[i..=j].reverse();
                if path_length(&cand, dist) < current - 1e-12 {
                    order = cand;
                    improved = true;
                    break 'scan;
                }
            }
        }
    }
    order
}

/// Translation (L2) and rotation (geodesic angle, degrees) error between
/// an estimated and a ground-truth pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_err: f64,
    pub rotation_err_deg: f64,
}

pub fn pose_error(estimate: &Pose, ground_truth: &Pose) -> PoseError {
    let translation_err = (estimate.translation - ground_truth.translation).norm();
    let rel = ground_truth.rotation.inverse().compose(&estimate.rotation);
    let [_, x, y, z] = rel.wxyz();
    let vec_norm = (x * x + y * y + z * z).sqrt().min(1.0);
    PoseError {
        translation_err,
        rotation_err_deg: (2.0 * vec_norm.asin()).to_degrees(),
    }
}

/// World point into the camera frame under pose `T`: `R·X + t`.
pub fn world_to_camera(pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(point)
}

/// Pinhole camera intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Intrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::Intrinsics(format!(
                "image size must be at least 1x1 ({}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    /// The caller is responsible for checking `point.z > 0`.
    pub fn project(&self, point: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        )
    }

    /// Back-projects a pixel at the given depth into the camera frame.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}
