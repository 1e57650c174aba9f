//! Local reference frames: plane-fit normal, FLARE tangent axis, quaternion.
//!
//! The frame quaternion rotates the canonical basis `(e1, e2, e3)` onto
//! `(d1, d2, d3)`, i.e. the rotation matrix has the frame axes as columns.

use crate::error::{QecError, Result};
use crate::linalg::jacobi_eigen;
use crate::quat::{cross3, dot3, norm3, scale3, sub3, Rotation3, UnitQuaternion, Vec3};

/// Relative gap between the two smallest covariance eigenvalues below which
/// the plane is undefined.
pub const PLANE_GAP: f64 = 1e-9;
/// Tangential components shorter than this cannot define the second axis.
pub const TANGENT_EPS: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Patch {
    pub center: Vec3,
    pub points: Vec<Vec3>,
    pub radius: f64,
    /// Normals are oriented away from this point (usually the cloud centroid).
    pub viewpoint: Vec3,
}

impl Patch {
    /// Radius is the distance to the farthest member; the viewpoint defaults
    /// to the center, which leaves the normal sign to the axis tie-break.
    pub fn new(center: Vec3, points: Vec<Vec3>) -> Self {
        let radius = points.iter().map(|p| norm3(&sub3(p, &center))).fold(0.0, f64::max);
        Self {
            center,
            points,
            radius,
            viewpoint: center,
        }
    }

    pub fn with_viewpoint(mut self, viewpoint: Vec3) -> Self {
        self.viewpoint = viewpoint;
        self
    }

    /// Points outside the recorded radius (the bound is soft).
    pub fn outside_radius(&self) -> usize {
        self.points
            .iter()
            .filter(|p| norm3(&sub3(p, &self.center)) > self.radius * (1.0 + 1e-12))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrfFrame {
    pub d1: Vec3,
    pub d2: Vec3,
    pub d3: Vec3,
    pub q: UnitQuaternion,
}

impl LrfFrame {
    pub fn rotation(&self) -> Rotation3 {
        Rotation3::from_columns(self.d1, self.d2, self.d3)
    }
}

/// Which point fixed the second axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlareChoice {
    pub index: usize,
    /// Farther points were skipped because they lie along the normal.
    pub fell_back: bool,
    /// Another candidate lies within `TANGENT_EPS` of the chosen distance.
    pub ambiguous: bool,
}

fn sign_toward_positive_axis(n: &Vec3) -> f64 {
    for c in [n[2], n[1], n[0]] {
        if c != 0.0 {
            return c.signum();
        }
    }
    1.0
}

pub fn fit_normal(patch: &Patch) -> Result<Vec3> {
    let k = patch.points.len();
    if k < 3 {
        return Err(QecError::DegeneratePatch(format!("{k} points, need at least 3")));
    }
    let rel: Vec<Vec3> = patch.points.iter().map(|p| sub3(p, &patch.center)).collect();
    let mut mean = [0.0; 3];
    for r in &rel {
        for a in 0..3 {
            mean[a] += r[a];
        }
    }
    let mean = scale3(&mean, 1.0 / k as f64);
    let mut cov = [[0.0; 3]; 3];
    for r in &rel {
        let d = sub3(r, &mean);
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += d[a] * d[b];
            }
        }
    }
    let eig = jacobi_eigen(cov);
    let [l1, l2, l3] = eig.values;
    if l1 <= 0.0 || (l2 - l3) <= PLANE_GAP * l1 {
        return Err(QecError::DegeneratePatch(format!(
            "covariance spectrum ({l1:e}, {l2:e}, {l3:e}) has no unique normal"
        )));
    }
    let mut n = eig.vectors[2];
    let len = norm3(&n);
    n = scale3(&n, 1.0 / len);
    let out = sub3(&patch.center, &patch.viewpoint);
    let s = dot3(&n, &out);
    let scale = norm3(&out);
    let flip = if s.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) && scale > 0.0 {
        s.signum()
    } else {
        sign_toward_positive_axis(&n)
    };
    Ok(scale3(&n, flip))
}

pub fn flare_axis2(patch: &Patch, normal: &Vec3) -> Result<(Vec3, FlareChoice)> {
    let mut order: Vec<(usize, f64)> = patch
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, norm3(&sub3(p, &patch.center))))
        .collect();
    // Stable sort keeps ties in index order.
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (rank, &(i, dist)) in order.iter().enumerate() {
        let v = sub3(&patch.points[i], &patch.center);
        let t = sub3(&v, &scale3(normal, dot3(&v, normal)));
        let len = norm3(&t);
        if len < TANGENT_EPS {
            continue;
        }
        let ambiguous = order
            .iter()
            .any(|&(j, d)| j != i && (d - dist).abs() <= TANGENT_EPS && d > 0.0);
        return Ok((
            scale3(&t, 1.0 / len),
            FlareChoice {
                index: i,
                fell_back: rank > 0,
                ambiguous,
            },
        ));
    }
    Err(QecError::DegenerateTangent)
}

pub fn build_lrf(patch: &Patch) -> Result<LrfFrame> {
    build_lrf_detailed(patch).map(|(f, _)| f)
}

pub fn build_lrf_detailed(patch: &Patch) -> Result<(LrfFrame, FlareChoice)> {
    build_lrf_two_scale(patch, patch)
}

/// FLARE with separate supports: the normal is fitted on `normal_patch` and
/// the second axis comes from the farthest point of the (usually wider)
/// `support`. Both patches share the same center.
pub fn build_lrf_two_scale(normal_patch: &Patch, support: &Patch) -> Result<(LrfFrame, FlareChoice)> {
    let d1 = fit_normal(normal_patch)?;
    let (d2, choice) = flare_axis2(support, &d1)?;
    let d3 = cross3(&d1, &d2);
    let q = UnitQuaternion::from_rotation3(&Rotation3::from_columns(d1, d2, d3))?;
    Ok((LrfFrame { d1, d2, d3, q }, choice))
}

/// The frame of `g·patch` predicted from the frame of `patch`.
pub fn rotate_frame(frame: &LrfFrame, g: &UnitQuaternion) -> LrfFrame {
    LrfFrame {
        d1: g.rotate_point(frame.d1),
        d2: g.rotate_point(frame.d2),
        d3: g.rotate_point(frame.d3),
        q: g.hamilton(&frame.q).canonicalize(),
    }
}

/// Frames for every query point from its `k` nearest neighbours in `cloud`
/// (self included). Normals face away from the cloud centroid.
pub fn frames_for_points(cloud: &[Vec3], queries: &[Vec3], k: usize) -> Vec<Result<LrfFrame>> {
    frames_two_scale(cloud, queries, k, k)
}

/// Like [`frames_for_points`], with normals from the `k_normal` nearest
/// neighbours and the FLARE axis from the `k_support` nearest.
pub fn frames_two_scale(cloud: &[Vec3], queries: &[Vec3], k_normal: usize, k_support: usize) -> Vec<Result<LrfFrame>> {
    let centroid = crate::pointcloud::centroid(cloud);
    queries
        .iter()
        .map(|c| {
            let nn = crate::pointcloud::knn_point(cloud, c, k_normal.max(k_support));
            let pick = |k: usize| Patch::new(*c, nn[..k.min(nn.len())].iter().map(|&i| cloud[i]).collect()).with_viewpoint(centroid);
            build_lrf_two_scale(&pick(k_normal), &pick(k_support)).map(|(f, _)| f)
        })
        .collect()
}
