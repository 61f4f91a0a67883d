//! 2D-to-3D lifting with rescaled relative coordinates (RRC).
//!
//! A per-cell MLP turns each `F_2D` vector into a depth column of `D`
//! vectors; the RRC grid is appended as three extra channels and a 3D
//! convolution block mixes them; a transformer encoder over the `D*H*W`
//! cells gives `H_3D`. Cells are ordered `(i*H + j)*W + k` for depth `i`,
//! row `j`, column `k`.

use diffcore::{Binder, Graph, ParamId, ParamStore, Tensor, Var};

use crate::config::Config;
use crate::nn::{Conv, ConvGeom, Init, LayerNorm, Mlp, TokenEncoder};

/// Smallest λ kept after an optimizer step.
pub const LAMBDA_FLOOR: f64 = 1.0 + 1e-4;

/// ψ(z) = z^λ.
pub fn psi(z: f64, lambda: f64) -> f64 {
    z.powf(lambda)
}

/// Differentiable ψ in both arguments.
pub fn psi_var<'g>(z: Var<'g>, lambda: Var<'g>) -> Var<'g> {
    z.pow(lambda)
}

/// Clamps a learnable λ back above 1; returns whether it had to.
pub fn clamp_lambda(store: &mut ParamStore, id: ParamId) -> bool {
    let l = store.get_mut(id);
    let v = l.item();
    if v <= 1.0 || !v.is_finite() {
        log::warn!("lambda {v} left (1, inf); clamped to {LAMBDA_FLOOR}");
        l.data_mut()[0] = LAMBDA_FLOOR;
        return true;
    }
    false
}

/// Uniform half-cell centers `(c + 0.5) / n`.
pub fn cell_centers(n: usize) -> Vec<f64> {
    (0..n).map(|c| (c as f64 + 0.5) / n as f64).collect()
}

/// RRC coordinates as a `(D*H*W) x 3` matrix of (x, y, z).
pub fn build_rrc(d: usize, h: usize, w: usize, lambda: f64) -> Tensor {
    let (zs, ys, xs) = (cell_centers(d), cell_centers(h), cell_centers(w));
    let mut out = Vec::with_capacity(d * h * w * 3);
    for &z in &zs {
        let zr = psi(z, lambda);
        for &y in &ys {
            for &x in &xs {
                out.extend_from_slice(&[x, y, zr]);
            }
        }
    }
    Tensor::from_vec(&[d * h * w, 3], out)
}

/// [`build_rrc`] on the tape, differentiable in `lambda`.
pub fn rrc_var<'g>(g: &'g Graph, dims: [usize; 3], lambda: Var<'g>) -> Var<'g> {
    let [d, h, w] = dims;
    let base = build_rrc(d, h, w, 1.0);
    let xy = g.constant(Tensor::from_vec(
        &[d * h * w, 2],
        base.data().chunks_exact(3).flat_map(|c| [c[0], c[1]]).collect(),
    ));
    let z = g.constant(Tensor::from_vec(
        &[d * h * w, 1],
        base.data().chunks_exact(3).map(|c| c[2]).collect(),
    ));
    Var::concat_cols(&[xy, psi_var(z, lambda)])
}

/// Row order that turns per-2D-cell depth columns into depth-major cells.
pub fn column_permutation(d: usize, h: usize, w: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(d * h * w);
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                perm.push((j * w + k) * d + i);
            }
        }
    }
    perm
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Lifting {
    pub dims: [usize; 3],
    pub channels: usize,
    pub lambda: ParamId,
    pub mlp: Mlp,
    pub blocks: Vec<ConvBlock>,
    pub encoder: TokenEncoder,
    perm: Vec<usize>,
}

impl Lifting {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config) -> Self {
        let m = &cfg.model;
        let dims = [m.depth, m.height, m.width];
        let c = m.channels;
        let lambda = store.add("lifting.lambda", Tensor::scalar(m.lambda_init), false);
        let mlp = Mlp::new(store, init, "lifting.mlp", [c, c, m.depth * c]);
        let blocks = (0..m.lift_conv_blocks.max(1))
            .map(|b| {
                let cin = if b == 0 { c + 3 } else { c };
                let name = format!("lifting.conv{b}");
                ConvBlock {
                    conv: Conv::new(store, init, &name, ConvGeom::conv3d(dims, cin, 3, 1, 1), c),
                    norm: LayerNorm::new(store, &format!("{name}.ln"), c),
                }
            })
            .collect();
        let encoder = TokenEncoder::new(
            store,
            init,
            "enc3d",
            dims.iter().product(),
            c,
            m.heads,
            m.mlp_ratio,
            m.enc3d_layers,
        );
        Self {
            dims,
            channels: c,
            lambda,
            mlp,
            blocks,
            encoder,
            perm: column_permutation(dims[0], dims[1], dims[2]),
        }
    }

    /// Coarse `F̂_3D`: the per-cell MLP output rearranged to depth-major
    /// cells, `(D*H*W) x C`.
    pub fn coarse<'g>(&self, p: &Binder<'g>, f2d: Var<'g>) -> Var<'g> {
        let [d, h, w] = self.dims;
        self.mlp
            .forward(p, f2d)
            .reshape(&[h * w * d, self.channels])
            .gather_rows(&self.perm)
    }

    /// `F̃_3D = CNN(concat(F̂_3D, C_3D))`.
    pub fn lift<'g>(&self, p: &Binder<'g>, f2d: Var<'g>) -> Var<'g> {
        let rrc = rrc_var(p.graph(), self.dims, p.var(self.lambda));
        let mut x = Var::concat_cols(&[self.coarse(p, f2d), rrc]);
        for b in &self.blocks {
            x = b.norm.forward(p, b.conv.forward(p, x)).gelu();
        }
        x
    }

    /// `H_3D` from `F̃_3D`.
    pub fn encode3d<'g>(&self, p: &Binder<'g>, x: Var<'g>) -> Var<'g> {
        self.encoder.forward(p, x)
    }

    pub fn forward<'g>(&self, p: &Binder<'g>, f2d: Var<'g>) -> Var<'g> {
        self.encode3d(p, self.lift(p, f2d))
    }
}
