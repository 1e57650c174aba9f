//! Point clouds, triangle meshes, sampling and grouping.

pub mod io;
pub mod manifest;
pub mod toy;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QecError, Result};
use crate::lrf::LrfFrame;
use crate::quat::{cross3, norm3, sub3, UnitQuaternion, Vec3};

#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frames: Option<Vec<LrfFrame>>,
    pub label: Option<usize>,
    pub source: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(QecError::EmptyGeometry);
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(QecError::InvalidProblem("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn rotated(&self, g: &UnitQuaternion) -> Self {
        Self {
            points: self.points.iter().map(|p| g.rotate_point(*p)).collect(),
            frames: self
                .frames
                .as_ref()
                .map(|fs| fs.iter().map(|f| crate::lrf::rotate_frame(f, g)).collect()),
            label: self.label,
            source: self.source.clone(),
        }
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            for a in 0..3 {
                p[a] += t[a];
            }
        }
        out
    }

    /// Keeps the listed points (and their frames) in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            frames: self.frames.as_ref().map(|fs| indices.iter().map(|&i| fs[i]).collect()),
            label: self.label,
            source: self.source.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Zero-area faces dropped while loading or building.
    pub dropped_faces: usize,
}

impl TriMesh {
    /// Drops out-of-range and zero-area faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(QecError::InvalidProblem(format!("face {f:?} indexes past {n} vertices")));
        }
        let mut mesh = Self {
            vertices,
            faces: Vec::with_capacity(faces.len()),
            dropped_faces: 0,
        };
        for f in faces {
            if mesh.face_area(&f) > 0.0 {
                mesh.faces.push(f);
            } else {
                mesh.dropped_faces += 1;
            }
        }
        Ok(mesh)
    }

    pub fn face_area(&self, f: &[usize; 3]) -> f64 {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        0.5 * norm3(&cross3(&sub3(&b, &a), &sub3(&c, &a)))
    }

    pub fn area(&self) -> f64 {
        self.faces.iter().map(|f| self.face_area(f)).sum()
    }

    pub fn rotated(&self, g: &UnitQuaternion) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| g.rotate_point(*v)).collect(),
            faces: self.faces.clone(),
            dropped_faces: self.dropped_faces,
        }
    }

    /// Appends another mesh, offsetting its indices.
    pub fn merge(&mut self, other: &TriMesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| f.map(|i| i + off)));
        self.dropped_faces += other.dropped_faces;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grouping {
    pub centers: Vec<usize>,
    pub patches: Vec<Vec<usize>>,
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let n = points.len().max(1) as f64;
    c.map(|v| v / n)
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Area-uniform samples: faces drawn proportionally to area, then uniform
/// barycentric coordinates inside the face.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let areas: Vec<f64> = mesh.faces.iter().map(|f| mesh.face_area(f)).collect();
    if areas.iter().sum::<f64>() <= 0.0 {
        return Err(QecError::ZeroArea);
    }
    let pick = WeightedIndex::new(&areas).map_err(|_| QecError::ZeroArea)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let [a, b, c] = mesh.faces[pick.sample(&mut rng)].map(|i| mesh.vertices[i]);
            let r1: f64 = rng.gen::<f64>().sqrt();
            let r2: f64 = rng.gen();
            let (u, v, w) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            [0, 1, 2].map(|k| u * a[k] + v * b[k] + w * c[k])
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Greedy farthest point sampling from a seed-chosen start. Ties go to the
/// lowest index.
pub fn farthest_point_sampling(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = if cloud.is_empty() { 0 } else { rng.gen_range(0..cloud.len()) };
    fps_from(&cloud.points, n, start)
}

pub fn fps_from(points: &[Vec3], n: usize, start: usize) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(QecError::TooManyRequested {
            requested: n,
            available: points.len(),
        });
    }
    if n == 0 {
        return Ok(vec![]);
    }
    let mut chosen = Vec::with_capacity(n);
    let mut mind = vec![f64::INFINITY; points.len()];
    let mut cur = start;
    loop {
        chosen.push(cur);
        mind[cur] = f64::NEG_INFINITY;
        if chosen.len() == n {
            return Ok(chosen);
        }
        let c = points[cur];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if mind[i] == f64::NEG_INFINITY {
                continue;
            }
            mind[i] = mind[i].min(dist2(p, &c));
            if mind[i] > best.0 {
                best = (mind[i], i);
            }
        }
        cur = best.1;
    }
}

/// Indices of the `k` points nearest to `q`, nearest first, ties by index.
pub fn knn_point(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, q), i)).collect();
    let k = k.min(d.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() && k > 0 {
        d.select_nth_unstable_by(k - 1, cmp);
    }
    d.truncate(k);
    d.sort_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

pub fn group_knn(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<Grouping> {
    if k > cloud.len() {
        return Err(QecError::TooManyRequested {
            requested: k,
            available: cloud.len(),
        });
    }
    let patches = centers.iter().map(|&c| knn_point(&cloud.points, &cloud.points[c], k)).collect();
    Ok(Grouping {
        centers: centers.to_vec(),
        patches,
    })
}

/// Removes contiguous regions (a random seed point and its nearest
/// neighbours) until about `fraction` of the points are gone.
pub fn patch_dropout(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(QecError::InvalidProblem(format!("dropout fraction {fraction} outside [0, 1)")));
    }
    let n = cloud.len();
    let target = (fraction * n as f64).round() as usize;
    let region = (n / 20).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alive: Vec<usize> = (0..n).collect();
    let mut removed = 0;
    while removed < target {
        let pts: Vec<Vec3> = alive.iter().map(|&i| cloud.points[i]).collect();
        let seed_pt = pts[rng.gen_range(0..pts.len())];
        let take = region.min(target - removed);
        let mut gone = knn_point(&pts, &seed_pt, take);
        gone.sort_unstable();
        for (shift, g) in gone.into_iter().enumerate() {
            alive.remove(g - shift);
        }
        removed += take;
    }
    Ok(cloud.select(&alive))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect())
    }

    #[test]
    fn zero_area_faces_are_dropped() {
        let m = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2], [0, 1, 3]])
            .unwrap();
        assert_eq!(m.faces.len(), 1);
        assert_eq!(m.dropped_faces, 1);
        assert!(TriMesh::new(vec![[0.0; 3]], vec![[0, 0, 1]]).is_err());
    }

    #[test]
    fn sampling_is_area_uniform() {
        let c = sample_surface(&square(), 10_000, 7).unwrap();
        // Diagonal y = x splits the square into the two faces.
        let below = c.points.iter().filter(|p| p[1] < p[0]).count() as f64 / 1e4;
        assert!((below - 0.5).abs() < 0.025);
        let again = sample_surface(&square(), 10_000, 7).unwrap();
        assert_eq!(c.points, again.points);
    }

    #[test]
    fn single_triangle_samples_inside() {
        let m = TriMesh::new(vec![[0.0; 3], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        for p in sample_surface(&m, 2000, 3).unwrap().points {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] / 2.0 + p[1] <= 1.0 + 1e-12);
        }
        let flat = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(sample_surface(&flat, 5, 0), Err(QecError::ZeroArea)));
    }

    #[test]
    fn fps_examples() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(fps_from(&pts, 2, 0).unwrap(), vec![0, 3]);
        let mut all = fps_from(&pts, 4, 2).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(fps_from(&pts, 5, 0), Err(QecError::TooManyRequested { .. })));
    }

    fn min_pairwise(points: &[Vec3], idx: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                m = m.min(dist2(&points[i], &points[j]));
            }
        }
        m
    }

    #[test]
    fn fps_spreads_better_than_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in 0..20 {
            let c = random_cloud(300, s);
            let f = farthest_point_sampling(&c, 16, s).unwrap();
            let r: Vec<usize> = rand::seq::index::sample(&mut rng, 300, 16).into_vec();
            assert!(min_pairwise(&c.points, &f) >= min_pairwise(&c.points, &r));
        }
    }

    #[test]
    fn knn_examples() {
        let c = random_cloud(50, 9);
        let g = group_knn(&c, &[0, 5, 7], 1).unwrap();
        assert_eq!(g.patches, vec![vec![0], vec![5], vec![7]]);

        // 3×3 grid with unit spacing: the 5 nearest to the middle are the plus.
        let grid: Vec<Vec3> = (0..9).map(|i| [(i % 3) as f64, (i / 3) as f64, 0.0]).collect();
        let nn = knn_point(&grid, &grid[4], 5);
        assert_eq!(nn, vec![4, 1, 3, 5, 7]);
        let corner = knn_point(&grid, &grid[0], 4);
        assert_eq!(corner, vec![0, 1, 3, 4]);

        // Independent full sort.
        for q in 0..50 {
            let mut all: Vec<usize> = (0..50).collect();
            all.sort_by(|&a, &b| {
                dist2(&c.points[a], &c.points[q]).total_cmp(&dist2(&c.points[b], &c.points[q])).then(a.cmp(&b))
            });
            assert_eq!(knn_point(&c.points, &c.points[q], 9), all[..9].to_vec());
        }
    }

    #[test]
    fn grouping_survives_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = random_cloud(200, 11);
        let g = UnitQuaternion::random(&mut rng);
        let moved = c.rotated(&g).translated(&[3.0, -1.0, 0.5]);
        let centers = fps_from(&c.points, 16, 4).unwrap();
        assert_eq!(centers, fps_from(&moved.points, 16, 4).unwrap());
        assert_eq!(group_knn(&c, &centers, 9).unwrap(), group_knn(&moved, &centers, 9).unwrap());
    }

    #[test]
    fn dropout_examples() {
        let c = random_cloud(1000, 12);
        assert_eq!(patch_dropout(&c, 0.0, 1).unwrap().points, c.points);
        let half = patch_dropout(&c, 0.5, 1).unwrap();
        assert!((half.len() as i64 - 500).abs() <= 50);
        assert_eq!(half.points, patch_dropout(&c, 0.5, 1).unwrap().points);
        assert!(patch_dropout(&c, 1.0, 1).is_err());
    }
}
