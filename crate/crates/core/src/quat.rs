//! Unit quaternion algebra.
//!
//! Quaternions are stored as `(w, x, y, z)` with `w` the scalar part. All
//! constructors normalize. `q` and `-q` encode the same rotation; the
//! hemisphere canonicalization picks a deterministic representative.

use std::f64::consts::PI;
use std::ops::Mul;

use rand::Rng;

use crate::error::{QecError, Result};

pub type Vec3 = [f64; 3];

/// A rotation encoded as a unit 4-vector `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion([f64; 4]);

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion([1.0, 0.0, 0.0, 0.0]);

    /// Normalizes `(w, x, y, z)`. A zero vector maps to the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_array([w, x, y, z])
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        let n = norm4(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self([v[0] / n, v[1] / n, v[2] / n, v[3] / n])
    }

    /// Wraps an array that the caller guarantees is already unit length.
    pub(crate) fn from_unit_unchecked(v: [f64; 4]) -> Self {
        Self(v)
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(&axis);
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Uniformly distributed rotation (Shoemake's subgroup algorithm).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen::<f64>() * 2.0 * PI;
        let u3: f64 = rng.gen::<f64>() * 2.0 * PI;
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        Self::new(b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin())
    }

    /// Rotation by a uniformly random axis with the given angle.
    pub fn random_with_angle<R: Rng + ?Sized>(rng: &mut R, angle: f64) -> Self {
        let axis = random_unit_vec3(rng);
        Self::from_axis_angle(axis, angle)
    }

    pub fn w(&self) -> f64 {
        self.0[0]
    }
    pub fn x(&self) -> f64 {
        self.0[1]
    }
    pub fn y(&self) -> f64 {
        self.0[2]
    }
    pub fn z(&self) -> f64 {
        self.0[3]
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot4(&self.0, &other.0)
    }

    pub fn neg(&self) -> Self {
        Self([-self.0[0], -self.0[1], -self.0[2], -self.0[3]])
    }

    /// Hamilton product `self ∘ r`, renormalized. The sign is preserved.
    pub fn hamilton(&self, r: &Self) -> Self {
        Self::from_array(hamilton_raw(&self.0, &r.0))
    }

    pub fn conjugate(&self) -> Self {
        Self([self.0[0], -self.0[1], -self.0[2], -self.0[3]])
    }

    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// The left-multiplication matrix `T(q)`, so that `T(p) r = p ∘ r`.
    pub fn to_matrix(&self) -> QuatMatrix4 {
        let [a, b, c, d] = self.0;
        QuatMatrix4([
            [a, -b, -c, -d],
            [b, a, -d, c],
            [c, d, a, -b],
            [d, -c, b, a],
        ])
    }

    /// `2 acos(|<q1, q2>|)`, in `[0, π]`.
    pub fn geodesic_distance(&self, other: &Self) -> f64 {
        geodesic_raw(&self.0, &other.0)
    }

    /// Vector part of `q ∘ (0, x) ∘ q̄`.
    pub fn rotate_point(&self, p: Vec3) -> Vec3 {
        rotate_raw(&self.0, &p)
    }

    /// Flips the sign so that `w > 0`; at `w == 0` the first nonzero of
    /// `(x, y, z)` is made positive.
    pub fn canonicalize(&self) -> Self {
        Self(canonical_raw(&self.0))
    }

    pub fn is_canonical(&self) -> bool {
        canonical_sign(&self.0) > 0.0
    }

    pub fn to_rotation3(&self) -> Rotation3 {
        let [w, x, y, z] = self.0;
        Rotation3([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }

    /// Converts a proper rotation matrix. The result is canonicalized.
    pub fn from_rotation3(r: &Rotation3) -> Result<Self> {
        r.check_orthonormal()?;
        let m = &r.0;
        let trace = m[0][0] + m[1][1] + m[2][2];
        // Shepperd: branch on the largest of (trace, diagonal) for stability.
        let q = if trace >= m[0][0] && trace >= m[1][1] && trace >= m[2][2] {
            let s = (1.0 + trace).sqrt() * 2.0;
            [
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            ]
        } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            ]
        } else if m[1][1] >= m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            ]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            ]
        };
        Ok(Self::from_array(q).canonicalize())
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.geodesic_distance(&Self::IDENTITY)
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: Self) -> Self {
        self.hamilton(&rhs)
    }
}

/// `q_b ∘ q_a⁻¹`: the rotation taking frame A to frame B.
pub fn relative_rotation(qa: &UnitQuaternion, qb: &UnitQuaternion) -> UnitQuaternion {
    qb.hamilton(&qa.inverse())
}

/// Relative angular error `d(q_est, q_gt) / π`, in `[0, 1]`.
pub fn rae(q_est: &UnitQuaternion, q_gt: &UnitQuaternion) -> f64 {
    q_est.geodesic_distance(q_gt) / PI
}

/// 4×4 real matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuatMatrix4(pub [[f64; 4]; 4]);

impl QuatMatrix4 {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self(m)
    }

    pub fn mul_vec(&self, v: &[f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(&self.0) {
            *o = dot4(row, v);
        }
        out
    }

    pub fn mul_mat(&self, other: &Self) -> Self {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Self(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = self.0[j][i];
            }
        }
        Self(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                m = m.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        m
    }

    /// Determinant by cofactor expansion.
    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        let mut det = 0.0;
        for c in 0..4 {
            let mut minor = [[0.0; 3]; 3];
            for i in 1..4 {
                let mut cc = 0;
                for j in 0..4 {
                    if j == c {
                        continue;
                    }
                    minor[i - 1][cc] = m[i][j];
                    cc += 1;
                }
            }
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * m[0][c] * Rotation3(minor).determinant();
        }
        det
    }
}

/// 3×3 rotation matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(pub [[f64; 3]; 3]);

impl Rotation3 {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Matrix whose columns are `c0, c1, c2`.
    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Self([
            [c0[0], c1[0], c2[0]],
            [c0[1], c1[1], c2[1]],
            [c0[2], c1[2], c2[2]],
        ])
    }

    pub fn column(&self, j: usize) -> Vec3 {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        [
            dot3(&self.0[0], v),
            dot3(&self.0[1], v),
            dot3(&self.0[2], v),
        ]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `||RᵀR − I||_∞` (max-abs entry).
    pub fn orthonormality_error(&self) -> f64 {
        let m = &self.0;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((v - target).abs());
            }
        }
        err
    }

    fn check_orthonormal(&self) -> Result<()> {
        let err = self.orthonormality_error();
        if !(err <= 1e-6) || self.determinant() < 0.0 {
            return Err(QecError::NonOrthonormalInput { error: err });
        }
        Ok(())
    }
}

// Raw-array kernels, shared with the differentiable ops.

pub(crate) fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub(crate) fn norm4(a: &[f64; 4]) -> f64 {
    dot4(a, a).sqrt()
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn random_unit_vec3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = [
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ];
        let n = norm3(&v);
        if n > 1e-3 && n <= 1.0 {
            return scale3(&v, 1.0 / n);
        }
    }
}

pub(crate) fn hamilton_raw(p: &[f64; 4], r: &[f64; 4]) -> [f64; 4] {
    let [p1, px, py, pz] = *p;
    let [r1, rx, ry, rz] = *r;
    [
        p1 * r1 - (px * rx + py * ry + pz * rz),
        p1 * rx + r1 * px + (py * rz - pz * ry),
        p1 * ry + r1 * py + (pz * rx - px * rz),
        p1 * rz + r1 * pz + (px * ry - py * rx),
    ]
}

pub(crate) fn geodesic_raw(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    2.0 * dot4(a, b).abs().clamp(-1.0, 1.0).acos()
}

pub(crate) fn rotate_raw(q: &[f64; 4], p: &Vec3) -> Vec3 {
    let [w, x, y, z] = *q;
    let u = [x, y, z];
    // v' = v + 2w (u × v) + 2 u × (u × v)
    let t = scale3(&cross3(&u, p), 2.0);
    let ut = cross3(&u, &t);
    [
        p[0] + w * t[0] + ut[0],
        p[1] + w * t[1] + ut[1],
        p[2] + w * t[2] + ut[2],
    ]
}

/// `+1` or `-1`: the multiplier that moves `q` onto the canonical hemisphere.
pub(crate) fn canonical_sign(q: &[f64; 4]) -> f64 {
    for &c in q {
        if c > 0.0 {
            return 1.0;
        }
        if c < 0.0 {
            return -1.0;
        }
    }
    1.0
}

pub(crate) fn canonical_raw(q: &[f64; 4]) -> [f64; 4] {
    let s = canonical_sign(q);
    [s * q[0], s * q[1], s * q[2], s * q[3]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn close4(a: [f64; 4], b: [f64; 4], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hamilton_unit_products() {
        let i = UnitQuaternion::new(0.0, 1.0, 0.0, 0.0);
        let j = UnitQuaternion::new(0.0, 0.0, 1.0, 0.0);
        assert_eq!(i.hamilton(&j).as_array(), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(i.hamilton(&i).as_array(), [-1.0, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = UnitQuaternion::random(&mut rng);
        assert!(close4(
            q.hamilton(&UnitQuaternion::IDENTITY).as_array(),
            q.as_array(),
            1e-15
        ));
    }

    #[test]
    fn matrix_representation() {
        assert_eq!(UnitQuaternion::IDENTITY.to_matrix(), QuatMatrix4::identity());
        let q = UnitQuaternion::new(0.0, 1.0, 0.0, 0.0);
        assert_eq!(q.to_matrix().mul_vec(&[1.0, 0.0, 0.0, 0.0]), q.as_array());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = UnitQuaternion::random(&mut rng);
            let r = UnitQuaternion::random(&mut rng);
            assert!(close4(
                p.to_matrix().mul_vec(&r.as_array()),
                hamilton_raw(&p.as_array(), &r.as_array()),
                1e-12
            ));
            let pr = p.hamilton(&r).to_matrix();
            assert!(pr.max_abs_diff(&p.to_matrix().mul_mat(&r.to_matrix())) < 1e-9);
            let m = p.to_matrix();
            let mtm = m.transpose().mul_mat(&m);
            assert!(mtm.max_abs_diff(&QuatMatrix4::identity()) < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
            let sum = QuatMatrix4({
                let mut s = [[0.0; 4]; 4];
                for i in 0..4 {
                    for j in 0..4 {
                        s[i][j] = m.0[i][j] + m.0[j][i];
                    }
                }
                s
            });
            let mut expect = QuatMatrix4::identity();
            for i in 0..4 {
                expect.0[i][i] = 2.0 * p.w();
            }
            assert!(sum.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn conjugate_and_inverse() {
        assert_eq!(UnitQuaternion::IDENTITY.conjugate(), UnitQuaternion::IDENTITY);
        assert_eq!(
            UnitQuaternion::new(0.0, 0.0, 0.0, 1.0).conjugate().as_array(),
            [0.0, 0.0, 0.0, -1.0]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = UnitQuaternion::random(&mut rng);
        assert_eq!(q.inverse(), q.conjugate());
        assert!(close4(
            q.hamilton(&q.conjugate()).as_array(),
            [1.0, 0.0, 0.0, 0.0],
            1e-9
        ));
    }

    #[test]
    fn geodesic_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = UnitQuaternion::random(&mut rng);
        assert!(q.geodesic_distance(&q) < 1e-7);
        let k = UnitQuaternion::new(0.0, 0.0, 0.0, 1.0);
        assert!((UnitQuaternion::IDENTITY.geodesic_distance(&k) - PI).abs() < 1e-15);
        let z90 = UnitQuaternion::new(S2, 0.0, 0.0, S2);
        assert!((UnitQuaternion::IDENTITY.geodesic_distance(&z90) - PI / 2.0).abs() < 1e-12);
        assert_eq!(q.geodesic_distance(&q.neg()), q.geodesic_distance(&q));
    }

    #[test]
    fn rotate_point_examples() {
        let p = UnitQuaternion::IDENTITY.rotate_point([1.0, 2.0, 3.0]);
        assert_eq!(p, [1.0, 2.0, 3.0]);
        let z90 = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], PI / 2.0);
        let r = z90.rotate_point([1.0, 0.0, 0.0]);
        assert!(norm3(&sub3(&r, &[0.0, 1.0, 0.0])) < 1e-15);
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(
            UnitQuaternion::new(-1.0, 0.0, 0.0, 0.0).canonicalize().as_array(),
            [1.0, 0.0, 0.0, 0.0]
        );
        let h = UnitQuaternion::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(h.canonicalize(), h);
        assert_eq!(
            UnitQuaternion::new(0.0, -1.0, 0.0, 0.0).canonicalize().as_array(),
            [0.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(
            UnitQuaternion::new(0.0, 0.0, -S2, S2).canonicalize().as_array(),
            [0.0, 0.0, S2, -S2]
        );
    }

    #[test]
    fn relative_rotation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qa = UnitQuaternion::random(&mut rng);
        let qb = UnitQuaternion::random(&mut rng);
        assert!(relative_rotation(&qa, &qa).angle() < 1e-7);
        assert!(close4(
            relative_rotation(&UnitQuaternion::IDENTITY, &qa).as_array(),
            qa.as_array(),
            1e-15
        ));
        let chained = relative_rotation(&qa, &qb).hamilton(&qa);
        assert!(chained.geodesic_distance(&qb) < 1e-7);
        assert!(close4(chained.as_array(), qb.as_array(), 1e-9));
    }

    #[test]
    fn rae_examples() {
        let id = UnitQuaternion::IDENTITY;
        assert_eq!(rae(&id, &id), 0.0);
        let x180 = UnitQuaternion::from_axis_angle([1.0, 0.0, 0.0], PI);
        assert!((rae(&id, &x180) - 1.0).abs() < 1e-12);
        let z90 = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], PI / 2.0);
        assert!((rae(&id, &z90) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotation3_conversions() {
        let q = UnitQuaternion::from_rotation3(&Rotation3::identity()).unwrap();
        assert_eq!(q, UnitQuaternion::IDENTITY);
        // Columns (e3, e1, e2): the rotation sending e1→e3, e2→e1, e3→e2.
        let r = Rotation3::from_columns([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let q = UnitQuaternion::from_rotation3(&r).unwrap();
        assert!(close4(q.as_array(), [0.5, -0.5, -0.5, -0.5], 1e-15));
        for (j, e) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().enumerate() {
            let img = q.rotate_point(*e);
            assert!(norm3(&sub3(&img, &r.column(j))) < 1e-12);
        }
        // (0.5, 0.5, 0.5, 0.5) is the inverse rotation: columns (e2, e3, e1).
        let r2 = UnitQuaternion::new(0.5, 0.5, 0.5, 0.5).to_rotation3();
        assert!(norm3(&sub3(&r2.column(0), &[0.0, 1.0, 0.0])) < 1e-15);

        let bad = Rotation3([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(
            UnitQuaternion::from_rotation3(&bad),
            Err(QecError::NonOrthonormalInput { .. })
        ));
        let reflection = Rotation3([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(UnitQuaternion::from_rotation3(&reflection).is_err());
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
        any::<u64>().prop_map(|s| UnitQuaternion::random(&mut ChaCha8Rng::seed_from_u64(s)))
    }

    proptest! {
        #[test]
        fn rotation3_round_trip(q in arb_quat()) {
            let back = UnitQuaternion::from_rotation3(&q.to_rotation3()).unwrap();
            prop_assert!(back.is_canonical());
            let c = q.canonicalize();
            prop_assert!(close4(back.as_array(), c.as_array(), 1e-9));
        }

        #[test]
        fn rotate_point_matches_matrix(q in arb_quat(), x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64) {
            let p = [x, y, z];
            let a = q.rotate_point(p);
            let b = q.to_rotation3().mul_vec(&p);
            prop_assert!(norm3(&sub3(&a, &b)) < 1e-9);
            prop_assert!((norm3(&a) - norm3(&p)).abs() < 1e-12);
        }

        #[test]
        fn distance_left_invariant(g in arb_quat(), a in arb_quat(), b in arb_quat()) {
            let d0 = a.geodesic_distance(&b);
            let d1 = g.hamilton(&a).geodesic_distance(&g.hamilton(&b));
            prop_assert!((d0 - d1).abs() <= 1e-9);
        }

        #[test]
        fn antipodes_are_identified(q in arb_quat()) {
            prop_assert!(q.geodesic_distance(&q.neg()) < 1e-7);
            prop_assert!(rae(&q, &q.neg()) < 1e-7);
            prop_assert_eq!(q.canonicalize(), q.neg().canonicalize());
        }
    }
}
