//! Layers shared by the extractor, lifting and fusion blocks.
//!
//! Feature maps are matrices with one row per spatial cell (row-major over
//! depth, height, width) and one column per channel.

use std::rc::Rc;

use diffcore::{Binder, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, dims: &[usize], bound: f64) -> Tensor {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::from_vec(dims, data)
    }

    /// Glorot-uniform `fan_in x fan_out` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), init.xavier(fan_in, fan_out), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), false);
        Self { w, b, fan_in, fan_out }
    }

    /// A linear layer whose weights start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), false);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(p.var(self.w)) + p.var(self.b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.w);
        zero_param(store, self.b);
    }
}

pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().fill(0.0);
}

/// Layer normalization with a learned per-channel gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]), false),
        }
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(LN_EPS) * p.var(self.gamma) + p.var(self.beta)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: [usize; 3]) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dims[0], dims[1]),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), dims[1], dims[2]),
        }
    }

    /// Hidden layer random, output layer zero: the block starts as a
    /// zero map.
    pub fn residual(store: &mut ParamStore, init: &mut Init, name: &str, dims: [usize; 3]) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dims[0], dims[1]),
            fc2: Linear::zeroed(store, &format!("{name}.fc2"), dims[1], dims[2]),
        }
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        self.fc2.forward(p, self.fc1.forward(p, x).gelu())
    }
}

/// softmax(q kᵀ / √d) v with d the key width. Returns the output and the
/// attention probabilities.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> (Var<'g>, Var<'g>) {
    let d = q.cols() as f64;
    let probs = q.matmul_t(k).scale(1.0 / d.sqrt()).softmax();
    (probs.matmul(v), probs)
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionOut<'g> {
    pub out: Var<'g>,
    /// Probabilities averaged over heads, `n_q x n_k`.
    pub probs: Tensor,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{heads} heads do not divide {dim}");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, q_in: Var<'g>, k_in: Var<'g>, v_in: Var<'g>) -> AttentionOut<'g> {
        let q = self.q.forward(p, q_in);
        let k = self.k.forward(p, k_in);
        let v = self.v.forward(p, v_in);
        let dh = q.cols() / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Tensor::zeros(&[q.rows(), k.rows()]);
        for h in 0..self.heads {
            let (o, pr) = attention(
                q.slice_cols(h * dh, dh),
                k.slice_cols(h * dh, dh),
                v.slice_cols(h * dh, dh),
            );
            probs.add_assign(&pr.value());
            outs.push(o);
        }
        let inv = 1.0 / self.heads as f64;
        probs.data_mut().iter_mut().for_each(|x| *x *= inv);
        let cat = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs) };
        AttentionOut {
            out: self.o.forward(p, cat),
            probs,
        }
    }

    /// Zeroes the output projection so the block contributes nothing.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.o.zero(store);
    }
}

/// Pre-norm encoder layer; positional encodings are added to queries and
/// keys only.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), [dim, dim * mlp_ratio, dim]),
        }
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, x: Var<'g>, pos: Option<Var<'g>>) -> Var<'g> {
        let h = self.ln1.forward(p, x);
        let qk = match pos {
            Some(pe) => h + pe,
            None => h,
        };
        let x = x + self.attn.forward(p, qk, qk, h).out;
        x + self.mlp.forward(p, self.ln2.forward(p, x))
    }

    pub fn zero_residuals(&self, store: &mut ParamStore) {
        self.attn.zero_output(store);
        self.mlp.fc2.zero(store);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
    pub ln_out: LayerNorm,
}

pub struct DecoderOut<'g> {
    pub tgt: Var<'g>,
    /// Normalized hidden state read by the heads.
    pub hidden: Var<'g>,
    pub cross_probs: Tensor,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross"), dim, heads),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), [dim, dim * mlp_ratio, dim]),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim),
        }
    }

    pub fn forward<'g>(
        &self,
        p: &Binder<'g>,
        tgt: Var<'g>,
        memory: Var<'g>,
        memory_pos: Option<Var<'g>>,
    ) -> DecoderOut<'g> {
        let h = self.ln1.forward(p, tgt);
        let tgt = tgt + self.self_attn.forward(p, h, h, h).out;
        let h = self.ln2.forward(p, tgt);
        let keys = match memory_pos {
            Some(pe) => memory + pe,
            None => memory,
        };
        let cross = self.cross_attn.forward(p, h, keys, memory);
        let tgt = tgt + cross.out;
        let tgt = tgt + self.mlp.forward(p, self.ln3.forward(p, tgt));
        DecoderOut {
            hidden: self.ln_out.forward(p, tgt),
            tgt,
            cross_probs: cross.probs,
        }
    }

    pub fn zero_residuals(&self, store: &mut ParamStore) {
        self.self_attn.zero_output(store);
        self.cross_attn.zero_output(store);
        self.mlp.fc2.zero(store);
    }
}

/// A stack of encoder layers with one learned positional vector per token.
#[derive(Debug, Clone)]
pub struct TokenEncoder {
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl TokenEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        tokens: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
    ) -> Self {
        let pos = store.add(format!("{name}.pos"), init.uniform(&[tokens, dim], 0.1), false);
        let layers = (0..depth)
            .map(|l| EncoderLayer::new(store, init, &format!("{name}.layer{l}"), dim, heads, mlp_ratio))
            .collect();
        Self { pos, layers }
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        let pos = p.var(self.pos);
        self.layers.iter().fold(x, |x, l| l.forward(p, x, Some(pos)))
    }
}

/// Geometry of a (possibly degenerate-depth) 3D convolution over a
/// row-per-cell feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub in_channels: usize,
}

impl ConvGeom {
    /// Square 2D convolution over an `h x w` map.
    pub fn conv2d(h: usize, w: usize, in_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            input: [1, h, w],
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
            in_channels,
        }
    }

    /// Cubic 3D convolution.
    pub fn conv3d(dims: [usize; 3], in_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            input: dims,
            kernel: [kernel; 3],
            stride: [stride; 3],
            pad: [pad; 3],
            in_channels,
        }
    }

    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.input[a] + 2 * self.pad[a];
            if span < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    /// im2col gather table: one row per output cell, columns ordered
    /// (kernel depth, kernel row, kernel column, channel); -1 marks padding.
    pub fn im2col(&self) -> Rc<[isize]> {
        let out = self.output().expect("conv geometry has no output");
        let [di, hi, wi] = self.input;
        let c = self.in_channels;
        let mut idx = Vec::with_capacity(out.iter().product::<usize>() * self.patch_len());
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    for kd in 0..self.kernel[0] {
                        let d = (od * self.stride[0] + kd) as isize - self.pad[0] as isize;
                        for kh in 0..self.kernel[1] {
                            let h = (oh * self.stride[1] + kh) as isize - self.pad[1] as isize;
                            for kw in 0..self.kernel[2] {
                                let w = (ow * self.stride[2] + kw) as isize - self.pad[2] as isize;
                                let inside = (0..di as isize).contains(&d)
                                    && (0..hi as isize).contains(&h)
                                    && (0..wi as isize).contains(&w);
                                if inside {
                                    let base = ((d as usize * hi + h as usize) * wi + w as usize) * c;
                                    idx.extend((base..base + c).map(|i| i as isize));
                                } else {
                                    idx.extend(std::iter::repeat_n(-1, c));
                                }
                            }
                        }
                    }
                }
            }
        }
        idx.into()
    }
}

/// Convolution as an im2col gather followed by a matrix product.
#[derive(Debug, Clone)]
pub struct Conv {
    pub geom: ConvGeom,
    pub lin: Linear,
    out: [usize; 3],
    index: Rc<[isize]>,
}

impl Conv {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, geom: ConvGeom, out_channels: usize) -> Self {
        let out = geom.output().expect("conv geometry has no output");
        Self {
            geom,
            lin: Linear::new(store, init, name, geom.patch_len(), out_channels),
            out,
            index: geom.im2col(),
        }
    }

    pub fn out_dims(&self) -> [usize; 3] {
        self.out
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        let cells: usize = self.out.iter().product();
        let cols = x.gather(self.index.clone(), &[cells, self.geom.patch_len()]);
        self.lin.forward(p, cols)
    }
}
