//! Differentiable operations on [`Var`].
//!
//! Matrix-style operations read a tensor as `rows() x cols()`. Binary
//! elementwise operations broadcast a `1 x n`, `m x 1` or `1 x 1` operand
//! against an `m x n` one.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::ShapeError;
use crate::graph::{BackwardCtx, Var};
use crate::tensor::{axpy, dot, matmul_nn, matmul_nt, matmul_tn, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn map_grad(ctx: &BackwardCtx<'_>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    // f(x, y, dy)
    let x = ctx.inputs[0].data();
    let y = ctx.output.data();
    let g = ctx.grad.data();
    let data = x
        .iter()
        .zip(y)
        .zip(g)
        .map(|((&x, &y), &g)| f(x, y, g))
        .collect();
    Tensor::from_vec(ctx.inputs[0].dims(), data)
}

impl<'g> Var<'g> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let out = self.value().map(f);
        self.graph.custom(
            &[self],
            out,
            Box::new(move |ctx| vec![Some(map_grad(ctx, &df))]),
        )
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(|x| -x, |_, _, g| -g)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(move |x| x * c, move |_, _, g| g * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _, g| g)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y, g| g * y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _, g| g / x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y, g| g * 0.5 / y)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _, g| 2.0 * x * g)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _, g| if x >= 0.0 { g } else { -g })
    }

    /// `x^p` for a constant exponent; inputs must be nonnegative.
    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(
            move |x| x.powf(p),
            move |x, _, g| if x > 0.0 { g * p * x.powf(p - 1.0) } else { 0.0 },
        )
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        self.unary(
            |x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()),
            |x, _, g| {
                let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
                let dt = (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                g * (0.5 * (1.0 + t) + 0.5 * x * dt)
            },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y, g| g * y * (1.0 - y),
        )
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y, g| g * (1.0 - y * y))
    }

    /// Clamp into `[lo, hi]`; the gradient is passed through strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _, g| if x > lo && x < hi { g } else { 0.0 },
        )
    }

    /// Elementwise `self^exponent` with a learnable `1 x 1` exponent.
    ///
    /// Inputs must be nonnegative. At `x = 0` the derivative with respect to
    /// the exponent is taken as its limit, 0.
    pub fn pow(self, exponent: Var<'g>) -> Var<'g> {
        let e = exponent.item();
        let out = self.value().map(|x| x.powf(e));
        self.graph.custom(
            &[self, exponent],
            out,
            Box::new(move |ctx| {
                let e = ctx.inputs[1].item();
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let dx = ctx.needs[0].then(|| {
                    let data = x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g * e * x.powf(e - 1.0) } else { 0.0 })
                        .collect();
                    Tensor::from_vec(ctx.inputs[0].dims(), data)
                });
                let de = ctx.needs[1].then(|| {
                    let s: f64 = x
                        .iter()
                        .zip(y)
                        .zip(g)
                        .map(|((&x, &y), &g)| if x > 0.0 { g * y * x.ln() } else { 0.0 })
                        .sum();
                    Tensor::from_vec(ctx.inputs[1].dims(), vec![s])
                });
                vec![dx, de]
            }),
        )
    }

    /// Expands a `1 x n`, `m x 1` or `1 x 1` value to `rows x cols`.
    pub fn broadcast_to(self, rows: usize, cols: usize) -> Var<'g> {
        let v = self.value();
        let (r, c) = (v.rows(), v.cols());
        assert!(
            (r == rows || r == 1) && (c == cols || c == 1),
            "cannot broadcast {:?} to [{rows}, {cols}]",
            v.dims()
        );
        if r == rows && c == cols {
            return self;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let ri = if r == 1 { 0 } else { i };
            for j in 0..cols {
                let cj = if c == 1 { 0 } else { j };
                out.push(v.data()[ri * c + cj]);
            }
        }
        self.graph.custom(
            &[self],
            Tensor::from_vec(&[rows, cols], out),
            Box::new(move |ctx| {
                let src = &ctx.inputs[0];
                let mut gin = Tensor::zeros(src.dims());
                let gd = ctx.grad.data();
                let gi = gin.data_mut();
                for i in 0..rows {
                    let ri = if r == 1 { 0 } else { i };
                    for j in 0..cols {
                        let cj = if c == 1 { 0 } else { j };
                        gi[ri * c + cj] += gd[i * cols + j];
                    }
                }
                vec![Some(gin)]
            }),
        )
    }

    fn align(self, other: Var<'g>) -> (Var<'g>, Var<'g>) {
        let (a, b) = (self.value(), other.value());
        if a.dims() == b.dims() {
            return (self, other);
        }
        let rows = a.rows().max(b.rows());
        let cols = a.cols().max(b.cols());
        let fit = |t: &Tensor| (t.rows() == rows || t.rows() == 1) && (t.cols() == cols || t.cols() == 1);
        assert!(
            fit(&a) && fit(&b),
            "elementwise op on incompatible shapes {:?} and {:?}",
            a.dims(),
            b.dims()
        );
        let a_full = a.rows() == rows && a.cols() == cols;
        let b_full = b.rows() == rows && b.cols() == cols;
        let lhs = if a_full { self } else { self.broadcast_to(rows, cols) };
        let rhs = if b_full { other } else { other.broadcast_to(rows, cols) };
        // Equal element count but different rank: reshape to the full one.
        if lhs.value().dims() != rhs.value().dims() {
            let d = if a_full { a.dims().to_vec() } else { b.dims().to_vec() };
            return (lhs.reshape(&d), rhs.reshape(&d));
        }
        (lhs, rhs)
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let (a, b) = self.align(other);
        let out = a.value().zip_map(&b.value(), f);
        self.graph.custom(
            &[a, b],
            out,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.inputs[1].data();
                let z = ctx.output.data();
                let g = ctx.grad.data();
                let dims = ctx.inputs[0].dims();
                let make = |d: &dyn Fn(f64, f64, f64, f64) -> f64| {
                    let data = (0..x.len()).map(|i| d(x[i], y[i], z[i], g[i])).collect();
                    Tensor::from_vec(dims, data)
                };
                vec![
                    ctx.needs[0].then(|| make(&da)),
                    ctx.needs[1].then(|| make(&db)),
                ]
            }),
        )
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a + b, |_, _, _, g| g, |_, _, _, g| g)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a - b, |_, _, _, g| g, |_, _, _, g| -g)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, |_, b, _, g| g * b, |a, _, _, g| g * a)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            |a, b| a / b,
            |_, b, _, g| g / b,
            |_, b, z, g| -g * z / b,
        )
    }

    pub fn try_matmul(self, other: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.graph.custom(
            &[self, other],
            out,
            Box::new(|ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let g = ctx.grad.data();
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    matmul_nt(g, b.data(), &mut d, m, n, k);
                    Tensor::from_vec(a.dims(), d)
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    matmul_tn(a.data(), g, &mut d, k, m, n);
                    Tensor::from_vec(b.dims(), d)
                });
                vec![da, db]
            }),
        ))
    }

    /// Matrix product; panics on an inner-dimension mismatch.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.try_matmul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    /// `self * other^T` without materialising the transpose.
    pub fn matmul_t(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        assert_eq!(k, b.cols(), "matmul_t: {:?} x {:?}^T", a.dims(), b.dims());
        let mut out = vec![0.0; m * n];
        matmul_nt(a.data(), b.data(), &mut out, m, k, n);
        self.graph.custom(
            &[self, other],
            Tensor::from_vec(&[m, n], out),
            Box::new(move |ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let g = ctx.grad.data();
                // dA = G B, dB = G^T A
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    matmul_nn(g, b.data(), &mut d, m, n, k);
                    Tensor::from_vec(a.dims(), d)
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; n * k];
                    matmul_tn(g, a.data(), &mut d, n, m, k);
                    Tensor::from_vec(b.dims(), d)
                });
                vec![da, db]
            }),
        )
    }

    pub fn transpose(self) -> Var<'g> {
        let out = self.value().transpose2();
        self.graph.custom(
            &[self],
            out,
            Box::new(|ctx| {
                let t = ctx.grad.transpose2();
                vec![Some(Tensor::from_vec(ctx.inputs[0].dims(), t.into_data()))]
            }),
        )
    }

    pub fn reshape(self, dims: &[usize]) -> Var<'g> {
        let out = self
            .value()
            .reshaped(dims)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.graph.custom(
            &[self],
            out,
            Box::new(|ctx| {
                vec![Some(Tensor::from_vec(
                    ctx.inputs[0].dims(),
                    ctx.grad.data().to_vec(),
                ))]
            }),
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        assert!(start + len <= n, "slice_cols {start}+{len} > {n}");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v.data()[i * n + start..i * n + start + len]);
        }
        self.graph.custom(
            &[self],
            Tensor::from_vec(&[m, len], out),
            Box::new(move |ctx| {
                let mut gin = Tensor::zeros(ctx.inputs[0].dims());
                let g = ctx.grad.data();
                let gi = gin.data_mut();
                for i in 0..m {
                    gi[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gin)]
            }),
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        assert!(start + len <= m, "slice_rows {start}+{len} > {m}");
        let out = v.data()[start * n..(start + len) * n].to_vec();
        self.graph.custom(
            &[self],
            Tensor::from_vec(&[len, n], out),
            Box::new(move |ctx| {
                let mut gin = Tensor::zeros(ctx.inputs[0].dims());
                gin.data_mut()[start * n..(start + len) * n].copy_from_slice(ctx.grad.data());
                vec![Some(gin)]
            }),
        )
    }

    pub fn row(self, r: usize) -> Var<'g> {
        self.slice_rows(r, 1)
    }

    pub fn col(self, c: usize) -> Var<'g> {
        self.slice_cols(c, 1)
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = parts[0].cols();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            assert_eq!(v.cols(), n, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            sizes.push(v.len());
        }
        let m = data.len() / n.max(1);
        parts[0].graph.custom(
            parts,
            Tensor::from_vec(&[m, n], data),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut off = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let piece = &g[off..off + s];
                        off += s;
                        ctx.needs[i]
                            .then(|| Tensor::from_vec(ctx.inputs[i].dims(), piece.to_vec()))
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = parts[0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.rows(), m, "concat_cols row mismatch");
                p.cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        parts[0].graph.custom(
            parts,
            Tensor::from_vec(&[m, n], data),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut off = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(p, &w)| {
                        let start = off;
                        off += w;
                        ctx.needs[p].then(|| {
                            let mut d = Vec::with_capacity(m * w);
                            for i in 0..m {
                                d.extend_from_slice(&g[i * n + start..i * n + start + w]);
                            }
                            Tensor::from_vec(ctx.inputs[p].dims(), d)
                        })
                    })
                    .collect()
            }),
        )
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        self.graph.custom(
            &[self],
            Tensor::scalar(s),
            Box::new(|ctx| {
                vec![Some(Tensor::full(ctx.inputs[0].dims(), ctx.grad.item()))]
            }),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums: `m x n -> 1 x n`.
    pub fn sum_rows(self) -> Var<'g> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            axpy(1.0, v.row_slice(i), &mut out);
        }
        self.graph.custom(
            &[self],
            Tensor::from_vec(&[1, n], out),
            Box::new(move |ctx| {
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend_from_slice(ctx.grad.data());
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].dims(), d))]
            }),
        )
    }

    pub fn mean_rows(self) -> Var<'g> {
        let m = self.rows() as f64;
        self.sum_rows().scale(1.0 / m)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(self) -> Var<'g> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.graph.custom(
            &[self],
            Tensor::from_vec(v.dims(), out),
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let s = dot(yr, gr);
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].dims(), d))]
            }),
        )
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        let mut out = v.data().to_vec();
        let mut inv_std = vec![0.0; m];
        for (i, row) in out.chunks_mut(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[i] = r;
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
        }
        self.graph.custom(
            &[self],
            Tensor::from_vec(v.dims(), out),
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = dot(gr, yr) / n as f64;
                    for j in 0..n {
                        d[i * n + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].dims(), d))]
            }),
        )
    }

    /// Scales each row to unit Euclidean norm (rows with norm below `eps`
    /// are divided by `eps`).
    pub fn l2_normalize(self, eps: f64) -> Var<'g> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        let mut out = v.data().to_vec();
        let mut norms = vec![0.0; m];
        for (i, row) in out.chunks_mut(n).enumerate() {
            let nr = dot(row, row).sqrt().max(eps);
            norms[i] = nr;
            for x in row.iter_mut() {
                *x /= nr;
            }
        }
        self.graph.custom(
            &[self],
            Tensor::from_vec(v.dims(), out),
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let x = ctx.inputs[0].data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let (yr, gr) = (&y[r.clone()], &g[r.clone()]);
                    let raw_norm = dot(&x[r.clone()], &x[r]).sqrt();
                    if raw_norm < eps {
                        for j in 0..n {
                            d[i * n + j] = gr[j] / eps;
                        }
                        continue;
                    }
                    let s = dot(yr, gr);
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * s) / norms[i];
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].dims(), d))]
            }),
        )
    }

    /// Flat gather: `out[i] = self.data[index[i]]`, or 0 where `index[i] < 0`.
    pub fn gather(self, index: Rc<[isize]>, dims: &[usize]) -> Var<'g> {
        assert_eq!(dims.iter().product::<usize>(), index.len(), "gather dims");
        let v = self.value();
        let src = v.data();
        let out: Vec<f64> = index
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
            .collect();
        self.graph.custom(
            &[self],
            Tensor::from_vec(dims, out),
            Box::new(move |ctx| {
                let mut gin = Tensor::zeros(ctx.inputs[0].dims());
                let gi = gin.data_mut();
                for (&i, &g) in index.iter().zip(ctx.grad.data()) {
                    if i >= 0 {
                        gi[i as usize] += g;
                    }
                }
                vec![Some(gin)]
            }),
        )
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Var<'g> {
        let n = self.cols();
        let m = self.rows();
        let mut index = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "gather_rows index {r} out of {m}");
            index.extend((r * n..(r + 1) * n).map(|i| i as isize));
        }
        self.gather(index.into(), &[rows.len(), n])
    }

    /// Stops gradient flow: a constant copy of the current value.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(self, rhs)
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(self, rhs)
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(self, rhs)
    }
}

impl<'g> Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        Var::div(self, rhs)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        Var::neg(self)
    }
}
