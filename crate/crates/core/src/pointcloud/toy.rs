//! Procedural, rotationally asymmetric shapes for small experiments.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QecError, Result};
use crate::quat::{UnitQuaternion, Vec3};

use super::{centroid, sample_surface, PointCloud, TriMesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyClass {
    ElongatedBox,
    LShape,
    Cone,
    TetraFlag,
}

impl ToyClass {
    pub const ALL: [ToyClass; 4] = [Self::ElongatedBox, Self::LShape, Self::Cone, Self::TetraFlag];

    pub fn name(&self) -> &'static str {
        match self {
            Self::ElongatedBox => "elongated_box",
            Self::LShape => "l_shape",
            Self::Cone => "cone",
            Self::TetraFlag => "tetra_flag",
        }
    }

    /// Undistorted template mesh.
    pub fn template(&self) -> TriMesh {
        match self {
            Self::ElongatedBox => {
                let mut m = box_mesh([-1.0, -0.3, -0.2], [1.0, 0.3, 0.2]);
                m.merge(&box_mesh([0.6, 0.0, 0.2], [1.0, 0.3, 0.5]));
                m
            }
            Self::LShape => {
                let mut m = box_mesh([0.0, 0.0, 0.0], [1.6, 0.4, 0.5]);
                m.merge(&box_mesh([0.0, 0.4, 0.0], [0.4, 1.0, 0.5]));
                m
            }
            Self::Cone => oblique_cone(0.8, 0.5, [0.4, 0.0, 1.5], 32),
            Self::TetraFlag => {
                let v = vec![[0.0, 0.0, 0.0], [1.2, 0.0, 0.0], [0.3, 0.9, 0.0], [0.2, 0.3, 1.1]];
                let mut m = TriMesh::new(v, vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [2, 0, 3]]).expect("static mesh");
                m.merge(&box_mesh([0.15, 0.25, 1.1], [0.25, 0.3, 1.6]));
                m.merge(&box_mesh([0.25, 0.25, 1.35], [0.75, 0.3, 1.6]));
                m
            }
        }
    }
}

impl fmt::Display for ToyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyClass {
    type Err = QecError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| QecError::Config(format!("unknown toy class {s:?}")))
    }
}

/// Closed axis-aligned box.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriMesh {
    let v: Vec<Vec3> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { lo[0] } else { hi[0] },
                if i & 2 == 0 { lo[1] } else { hi[1] },
                if i & 4 == 0 { lo[2] } else { hi[2] },
            ]
        })
        .collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    TriMesh::new(v, faces).expect("box indices are in range")
}

/// Elliptic base in the `z = 0` plane joined to an off-axis apex.
pub fn oblique_cone(a: f64, b: f64, apex: Vec3, segments: usize) -> TriMesh {
    let mut v = vec![[0.0, 0.0, 0.0], apex];
    for s in 0..segments {
        let t = TAU * s as f64 / segments as f64;
        v.push([a * t.cos(), b * t.sin(), 0.0]);
    }
    let mut faces = vec![];
    for s in 0..segments {
        let (i, j) = (2 + s, 2 + (s + 1) % segments);
        faces.push([0, j, i]);
        faces.push([1, i, j]);
    }
    TriMesh::new(v, faces).expect("cone indices are in range")
}

#[derive(Clone, Debug)]
pub struct ToySample {
    pub label: usize,
    pub class: ToyClass,
    pub mesh: TriMesh,
    pub cloud: PointCloud,
    /// Orientation applied to the canonical instance (identity for NR).
    pub rotation: UnitQuaternion,
}

impl ToySample {
    /// The same instance rotated by `g`, mesh and sampled points alike.
    pub fn rotated(&self, g: &UnitQuaternion) -> Self {
        Self {
            label: self.label,
            class: self.class,
            mesh: self.mesh.rotated(g),
            cloud: self.cloud.rotated(g),
            rotation: g.hamilton(&self.rotation),
        }
    }

    pub fn resample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let mut c = sample_surface(&self.mesh, n, seed)?;
        c.label = Some(self.label);
        Ok(c)
    }
}

/// `per_class` jittered instances of every class, in class order. Each
/// instance gets ±10% per-axis scale jitter, Gaussian vertex noise of
/// standard deviation `noise`, and is centered at the origin before
/// `points` surface samples are drawn.
pub fn make_toy_dataset(classes: &[ToyClass], per_class: usize, noise: f64, seed: u64, points: usize) -> Result<Vec<ToySample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for (label, class) in classes.iter().enumerate() {
        let template = class.template();
        for _ in 0..per_class {
            let scale: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.9..1.1));
            let mut mesh = template.clone();
            for v in &mut mesh.vertices {
                for a in 0..3 {
                    v[a] = v[a] * scale[a] + noise * gaussian(&mut rng);
                }
            }
            let c = centroid(&mesh.vertices);
            for v in &mut mesh.vertices {
                for a in 0..3 {
                    v[a] -= c[a];
                }
            }
            let mut cloud = sample_surface(&mesh, points, rng.gen())?;
            cloud.label = Some(label);
            out.push(ToySample {
                label,
                class: *class,
                mesh,
                cloud,
                rotation: UnitQuaternion::IDENTITY,
            });
        }
    }
    Ok(out)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_labels() {
        let d = make_toy_dataset(&ToyClass::ALL[..3], 10, 0.005, 1, 64).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(d.iter().filter(|s| s.label == 2).count(), 10);
        assert!(d.iter().all(|s| s.cloud.len() == 64 && s.cloud.label == Some(s.label)));
    }

    #[test]
    fn reproducible() {
        let a = make_toy_dataset(&ToyClass::ALL, 2, 0.01, 5, 32).unwrap();
        let b = make_toy_dataset(&ToyClass::ALL, 2, 0.01, 5, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cloud.points, y.cloud.points);
            assert_eq!(x.mesh, y.mesh);
        }
    }

    #[test]
    fn rotated_copies_match_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = make_toy_dataset(&ToyClass::ALL, 1, 0.0, 2, 100).unwrap();
        for s in &d {
            let g = UnitQuaternion::random(&mut rng);
            let r = s.rotated(&g);
            for (p, q) in s.cloud.points.iter().zip(&r.cloud.points) {
                let gp = g.rotate_point(*p);
                assert!((0..3).all(|a| (gp[a] - q[a]).abs() <= 1e-12));
            }
            assert!(r.rotation.geodesic_distance(&g) < 1e-7);
        }
    }

    #[test]
    fn templates_are_closed_and_nondegenerate() {
        for c in ToyClass::ALL {
            let m = c.template();
            assert!(m.area() > 0.5, "{c}");
            assert_eq!(m.dropped_faces, 0, "{c}");
            assert_eq!(c.name().parse::<ToyClass>().unwrap(), c);
        }
        assert!("sphere".parse::<ToyClass>().is_err());
    }
}
