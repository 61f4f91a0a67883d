//! Plain-arithmetic oracles and a finite-difference checker that also
//! covers parameters stored in a `ParamStore`.
#![allow(dead_code)]

use diffcore::gradcheck::rel_error;
use diffcore::{Binder, Graph, ParamId, ParamStore, Tensor, Var};
use meshfuse::config::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let cols = m.first().map_or(0, |r| r.len());
    Tensor::from_vec(&[m.len(), cols], m.iter().flatten().copied().collect())
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Adds a single row to every row.
pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

/// softmax(q kᵀ / √d) v written out directly.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    let scores: Mat = q
        .iter()
        .map(|qr| k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect())
        .collect();
    matmul(&softmax_rows(&scores), v)
}

pub fn layer_norm(a: &Mat, eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            r.iter().map(|x| (x - mean) / (var + eps).sqrt()).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

/// `x W + b` with the weights read from a store.
pub fn linear(store: &ParamStore, l: &meshfuse::nn::Linear, x: &Mat) -> Mat {
    add_row(&matmul(x, &to_mat(store.get(l.w))), store.get(l.b).data())
}

pub fn mlp(store: &ParamStore, m: &meshfuse::nn::Mlp, x: &Mat) -> Mat {
    linear(store, &m.fc2, &map(&linear(store, &m.fc1, x), gelu))
}

pub fn ln_affine(store: &ParamStore, l: &meshfuse::nn::LayerNorm, x: &Mat) -> Mat {
    let g = store.get(l.gamma).data();
    let b = store.get(l.beta).data();
    layer_norm(x, meshfuse::nn::LN_EPS)
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| v * g[j] + b[j]).collect())
        .collect()
}

/// Multi-head attention with every projection applied by hand.
pub fn mha(store: &ParamStore, a: &meshfuse::nn::MultiHeadAttention, q_in: &Mat, k_in: &Mat, v_in: &Mat) -> Mat {
    let q = linear(store, &a.q, q_in);
    let k = linear(store, &a.k, k_in);
    let v = linear(store, &a.v, v_in);
    let c = q[0].len();
    let dh = c / a.heads;
    let cols = |m: &Mat, h: usize| -> Mat { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
    let mut cat = vec![Vec::new(); q.len()];
    for h in 0..a.heads {
        let o = attention(&cols(&q, h), &cols(&k, h), &cols(&v, h));
        for (row, part) in cat.iter_mut().zip(o) {
            row.extend(part);
        }
    }
    linear(store, &a.o, &cat)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// A deliberately small model configuration for structural tests.
pub fn tiny_config() -> Config {
    let mut c = Config::smoke();
    c.model.image_size = 16;
    c.model.channels = 8;
    c.model.depth = 2;
    c.model.height = 2;
    c.model.width = 2;
    c.model.heads = 2;
    c.model.latent_dim = 6;
    c.model.refine_layers = 2;
    c
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of a scalar-projected output, over the given tensor inputs and
/// (up to `per_param` leading elements of) the given parameters.
pub fn grad_check_with_params<F>(store: &ParamStore, ids: &[ParamId], inputs: &[Tensor], per_param: usize, f: F) -> f64
where
    F: for<'g> Fn(&Binder<'g>, &[Var<'g>]) -> Var<'g>,
{
    let eps = 1e-5;
    let projection = {
        let g = Graph::new();
        let p = Binder::new(&g, store, false);
        let xs: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&p, &xs).value();
        let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
        Tensor::from_vec(out.dims(), (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let eval = |store: &ParamStore, xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let p = Binder::new(&g, store, false);
        let vs: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&p, &vs).value();
        out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let p = Binder::new(&g, store, true);
    let xs: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&p, &xs);
    let grads = g.backward_with(out, projection.clone());
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(xs[k]);
        for i in 0..t.len() {
            let mut work = inputs.to_vec();
            work[k].data_mut()[i] += eps;
            let fp = eval(store, &work);
            work[k].data_mut()[i] -= 2.0 * eps;
            let fm = eval(store, &work);
            worst = worst.max(rel_error(analytic.data()[i], (fp - fm) / (2.0 * eps)));
        }
    }
    for &id in ids {
        let analytic = grads.get_or_zeros(p.var(id));
        let n = store.get(id).len().min(per_param);
        for i in 0..n {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += eps;
            let fp = eval(&s, inputs);
            s.get_mut(id).data_mut()[i] -= 2.0 * eps;
            let fm = eval(&s, inputs);
            worst = worst.max(rel_error(analytic.data()[i], (fp - fm) / (2.0 * eps)));
        }
    }
    worst
}

pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Compensated sum, so the oracle below accumulates without the rounding
/// drift of a plain fold.
fn kahan(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let y = x - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

/// Eigenpairs of a symmetric 4x4 matrix by cyclic Jacobi rotations.
fn jacobi4(mut a: [[f64; 4]; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..4 {
            for q in p + 1..4 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2], a[3][3]], v)
}

/// PA-MPJPE by Horn's closed-form unit-quaternion method, sharing no code
/// with the SVD path under test.
pub fn horn_pa_mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let n = pred.len() as f64;
    let mean = |p: &[[f64; 3]], a: usize| kahan(p.iter().map(|x| x[a])) / n;
    let mp = [mean(pred, 0), mean(pred, 1), mean(pred, 2)];
    let mg = [mean(gt, 0), mean(gt, 1), mean(gt, 2)];
    let x: Vec<[f64; 3]> = pred.iter().map(|p| [p[0] - mp[0], p[1] - mp[1], p[2] - mp[2]]).collect();
    let y: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] - mg[0], p[1] - mg[1], p[2] - mg[2]]).collect();
    let s = |i: usize, j: usize| kahan(x.iter().zip(&y).map(|(a, b)| a[i] * b[j]));
    let (sxx, sxy, sxz) = (s(0, 0), s(0, 1), s(0, 2));
    let (syx, syy, syz) = (s(1, 0), s(1, 1), s(1, 2));
    let (szx, szy, szz) = (s(2, 0), s(2, 1), s(2, 2));
    let nmat = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = jacobi4(nmat);
    let best = (0..4).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
    let (q0, qx, qy, qz) = (vecs[0][best], vecs[1][best], vecs[2][best], vecs[3][best]);
    let r = [
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2.0 * (qx * qy - q0 * qz), 2.0 * (qx * qz + q0 * qy)],
        [2.0 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2.0 * (qy * qz - q0 * qx)],
        [2.0 * (qz * qx - q0 * qy), 2.0 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz],
    ];
    let rot = |p: &[f64; 3]| -> [f64; 3] { std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) };
    let num = kahan(x.iter().zip(&y).map(|(a, b)| {
        let ra = rot(a);
        ra[0] * b[0] + ra[1] * b[1] + ra[2] * b[2]
    }));
    let den = kahan(x.iter().map(|a| a[0] * a[0] + a[1] * a[1] + a[2] * a[2]));
    let scale = num / den;
    kahan(x.iter().zip(&y).map(|(a, b)| {
        let ra = rot(a);
        let d: [f64; 3] = std::array::from_fn(|i| scale * ra[i] - b[i]);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    })) / n
}
