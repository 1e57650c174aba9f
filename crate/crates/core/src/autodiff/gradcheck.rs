//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::quat::UnitQuaternion;

/// Max |analytic − numeric| relative to the largest component of either.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

/// Central differences of `f` (which builds a scalar on a fresh tape from
/// parameter inputs) against the tape gradient. Returns the worst
/// [`rel_err`] over the inputs.
pub fn fd_check(inputs: &[(Vec<f64>, Vec<usize>)], f: &dyn Fn(&mut Tape, &[Var]) -> Var, h: f64) -> f64 {
    let eval = |vals: &[Vec<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().zip(inputs).map(|(v, (_, s))| t.param(v.clone(), s).unwrap()).collect();
        let out = f(&mut t, &vars);
        (t, vars, out)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (t, vars, out) = eval(&base);
    let grads = match t.backward(out) {
        Ok(g) => g,
        Err(_) => return f64::NAN,
    };
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.dense(*var, base[k].len());
        let mut numeric = vec![0.0; base[k].len()];
        for i in 0..base[k].len() {
            let mut p = base.clone();
            p[k][i] += h;
            let (tp, _, op) = eval(&p);
            let mut m = base.clone();
            m[k][i] -= h;
            let (tm, _, om) = eval(&m);
            numeric[i] = (tp.value(op)[0] - tm.value(om)[0]) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn quats(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).flat_map(|_| UnitQuaternion::random(rng).as_array()).collect()
}

/// Contracts any node to a scalar with fixed pseudo-random weights.
pub fn project(t: &mut Tape, v: Var, seed: u64) -> Var {
    let n = t.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(randv(&mut rng, n), &[n]).unwrap();
    let flat = t.reshape(v, &[n]).unwrap();
    let m = t.mul(flat, w).unwrap();
    t.sum(m).unwrap()
}

/// Pairs of quaternions at least `min_angle` away from both 0 and π, where
/// `2·acos|dot|` is smooth.
fn separated_pairs(rng: &mut ChaCha8Rng, n: usize, min_angle: f64) -> (Vec<f64>, Vec<f64>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    while a.len() < 4 * n {
        let p = UnitQuaternion::random(rng);
        let q = UnitQuaternion::random(rng);
        let d = p.geodesic_distance(&q);
        if d > min_angle && d < std::f64::consts::PI - min_angle {
            a.extend(p.as_array());
            b.extend(q.as_array());
        }
    }
    (a, b)
}

/// Worst relative error of every tape operation against central
/// differences, one entry per op group.
pub fn op_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let inputs = vec![(randv(&mut rng, 6), vec![2, 3]), (randv(&mut rng, 12), vec![3, 4]), (randv(&mut rng, 4), vec![4])];
    let e = fd_check(
        &inputs,
        &|t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let b = t.add_bias(m, v[2]).unwrap();
            project(t, b, 1)
        },
        1e-6,
    );
    out.push(("matmul+add_bias", e));

    // Keep relu inputs away from the kink.
    let x: Vec<f64> = randv(&mut rng, 8).into_iter().map(|v| v + 0.1f64.copysign(v)).collect();
    let inputs = vec![(x, vec![8]), (randv(&mut rng, 8), vec![8])];
    let e = fd_check(
        &inputs,
        &|t, v| {
            let r = t.relu(v[0]);
            let s = t.sigmoid(v[1]);
            let m = t.mul(r, s).unwrap();
            let a = t.add(m, v[0]).unwrap();
            let sc = t.scale(a, -1.7);
            let g = t.sum_groups(sc, 2).unwrap();
            project(t, g, 2)
        },
        1e-6,
    );
    out.push(("relu+sigmoid+mul+add+scale+sum_groups", e));

    let inputs = vec![(randv(&mut rng, 12), vec![4, 3])];
    let e = fd_check(
        &inputs,
        &|t, v| {
            let g = t.gather(v[0], vec![3, 0, 0, 2, 3], 3).unwrap();
            let r = t.reshape(g, &[3, 5]).unwrap();
            project(t, r, 3)
        },
        1e-6,
    );
    out.push(("gather+reshape", e));

    let inputs = vec![(randv(&mut rng, 12), vec![3, 4]), (quats(&mut rng, 3), vec![3, 4])];
    let e = fd_check(
        &inputs,
        &|t, v| {
            let n = t.normalize4(v[0]).unwrap();
            let c = t.canon4(n).unwrap();
            let j = t.conjugate(v[1]).unwrap();
            let h = t.hamilton(c, j).unwrap();
            project(t, h, 4)
        },
        1e-6,
    );
    out.push(("normalize4+canon4+conjugate+hamilton", e));

    let (a, b) = separated_pairs(&mut rng, 4, 0.05);
    let inputs = vec![(a, vec![4, 4]), (b, vec![4, 4])];
    let e = fd_check(
        &inputs,
        &|t, v| {
            let g = t.geodesic(v[0], v[1]).unwrap();
            project(t, g, 5)
        },
        1e-7,
    );
    out.push(("geodesic", e));

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (a, b) = separated_pairs(&mut rng, 1, 0.05);
        let inputs = vec![(a, vec![4]), (b, vec![4])];
        worst = worst.max(fd_check(&inputs, &|t, v| t.rotation_loss(v[0], v[1]).unwrap(), 1e-7));
    }
    out.push(("rotation_loss", worst));

    let inputs = vec![(quats(&mut rng, 5), vec![5, 4]), (randv(&mut rng, 15), vec![5, 3])];
    let e = fd_check(
        &inputs,
        &|t, v| {
            let r = t.rotate_inv(v[0], v[1]).unwrap();
            project(t, r, 6)
        },
        1e-6,
    );
    out.push(("rotate_inv", e));

    let center = UnitQuaternion::random(&mut rng);
    let v: Vec<f64> = (0..10)
        .flat_map(|_| center.hamilton(&UnitQuaternion::random_with_angle(&mut rng, 0.6)).as_array())
        .collect();
    let w: Vec<f64> = (0..10).map(|_| rng.gen_range(0.2..1.0)).collect();
    let inputs = vec![(v, vec![10, 4]), (w, vec![10])];
    let e = fd_check(
        &inputs,
        &|t, v| {
            let m = t.quat_mean(v[0], v[1], 5).unwrap();
            project(t, m, 7)
        },
        1e-6,
    );
    out.push(("quat_mean", e));

    let inputs = vec![(vec![0.31, 0.42, 0.25, 0.4], vec![4])];
    let worst = (0..4)
        .map(|target| fd_check(&inputs, &|t, v| t.spread_loss(v[0], target, 0.2).unwrap(), 1e-7))
        .fold(0.0, f64::max);
    out.push(("spread_loss", worst));
    out
}
