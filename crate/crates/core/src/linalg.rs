//! Cyclic Jacobi eigensolver for small symmetric matrices.

/// Eigen-decomposition of a symmetric `N×N` matrix, sorted by descending
/// eigenvalue. `vectors[k]` is the unit eigenvector for `values[k]`.
#[derive(Clone, Copy, Debug)]
pub struct SymEigen<const N: usize> {
    pub values: [f64; N],
    pub vectors: [[f64; N]; N],
    pub sweeps: usize,
}

const MAX_SWEEPS: usize = 64;

fn off_diagonal_norm<const N: usize>(a: &[[f64; N]; N]) -> f64 {
    let mut s = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v * v;
            }
        }
    }
    s.sqrt()
}

/// Runs cyclic Jacobi sweeps until the off-diagonal Frobenius norm drops
/// below `1e-12 · max(1, ||A||_F)` (or stops shrinking).
pub fn jacobi_eigen<const N: usize>(mut a: [[f64; N]; N]) -> SymEigen<N> {
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let frob = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let target = 1e-12 * frob.max(1.0);
    let mut sweeps = 0;
    let mut prev_off = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        if off <= target * 1e-3 || (off <= target && off >= prev_off) {
            break;
        }
        prev_off = off;
        sweeps += 1;
        for p in 0..N {
            for q in (p + 1)..N {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: [usize; N] = [0; N];
    for (i, o) in order.iter_mut().enumerate() {
        *o = i;
    }
    // Stable sort keeps the Jacobi output order for exact ties.
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut values = [0.0; N];
    let mut vectors = [[0.0; N]; N];
    for (k, &i) in order.iter().enumerate() {
        values[k] = a[i][i];
        for r in 0..N {
            vectors[k][r] = v[r][i];
        }
    }
    SymEigen {
        values,
        vectors,
        sweeps,
    }
}
