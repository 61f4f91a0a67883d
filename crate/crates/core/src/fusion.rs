//! The fusion transformer: 2D encoder, SMPL and joint queries, initial
//! regression from `H_2D`, trilinear joint sampling of `H_3D`, and
//! refining layers with cascade residual updates.
//!
//! Grid coordinates live in [0, 1]³ as (x, y, z); a grid of extents
//! `(D, H, W)` has cell centers at `(k + 0.5)/W`, `(j + 0.5)/H`,
//! `(i + 0.5)/D` before the depth rescaling ψ.

use diffcore::{Archive, Binder, Dtype, Graph, ParamId, ParamStore, Tensor, Var};

use crate::body_model::NUM_BETAS;
use crate::config::{Config, Feat2dMode, Feat3dMode};
use crate::lifting::psi_var;
use crate::nn::{DecoderLayer, Init, Linear, Mlp, TokenEncoder};

pub const NUM_SMPL_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy)]
struct AxisInterp {
    lo: usize,
    t: f64,
    /// d(index)/d(coordinate), zero where the coordinate is clamped.
    slope: f64,
    two: bool,
}

fn axis_interp(u: f64, n: usize) -> AxisInterp {
    let nf = n as f64;
    let f = u * nf - 0.5;
    if n == 1 {
        return AxisInterp { lo: 0, t: 0.0, slope: 0.0, two: false };
    }
    let c = f.clamp(0.0, nf - 1.0);
    let lo = (c.floor() as usize).min(n - 2);
    AxisInterp {
        lo,
        t: c - lo as f64,
        slope: if f > 0.0 && f < nf - 1.0 { nf } else { 0.0 },
        two: true,
    }
}

/// The (up to 8) cells enclosing a point and their trilinear weights.
pub fn corner_weights(dims: [usize; 3], point: [f64; 3]) -> Vec<(usize, f64)> {
    let [d, h, w] = dims;
    let ax = [axis_interp(point[2], d), axis_interp(point[1], h), axis_interp(point[0], w)];
    let mut out = Vec::with_capacity(8);
    for oz in 0..=(ax[0].two as usize) {
        for oy in 0..=(ax[1].two as usize) {
            for ox in 0..=(ax[2].two as usize) {
                let wz = if oz == 0 { 1.0 - ax[0].t } else { ax[0].t };
                let wy = if oy == 0 { 1.0 - ax[1].t } else { ax[1].t };
                let wx = if ox == 0 { 1.0 - ax[2].t } else { ax[2].t };
                let cell = ((ax[0].lo + oz) * h + ax[1].lo + oy) * w + ax[2].lo + ox;
                out.push((cell, wz * wy * wx));
            }
        }
    }
    out
}

/// Trilinear interpolation of a `(D*H*W) x C` grid at `N x 3` points in
/// [0, 1]³; coordinates past the outermost centers clamp to the border.
pub fn sample_grid<'g>(grid: Var<'g>, dims: [usize; 3], points: Var<'g>) -> Var<'g> {
    let gv = grid.value();
    let pv = points.value();
    let cells: usize = dims.iter().product();
    assert_eq!(gv.rows(), cells, "grid rows vs extents {dims:?}");
    assert_eq!(pv.cols(), 3, "points must be N x 3");
    let c = gv.cols();
    let n = pv.rows();
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        let p = pv.row_slice(r);
        for (cell, wgt) in corner_weights(dims, [p[0], p[1], p[2]]) {
            if wgt != 0.0 {
                diffcore_axpy(&mut out[r * c..(r + 1) * c], wgt, gv.row_slice(cell));
            }
        }
    }
    grid.graph().custom(
        &[grid, points],
        Tensor::from_vec(&[n, c], out),
        Box::new(move |ctx| {
            let grid = &ctx.inputs[0];
            let pts = &ctx.inputs[1];
            let g = ctx.grad;
            let [d, h, w] = dims;
            let mut dgrid = ctx.needs[0].then(|| Tensor::zeros(grid.dims()));
            let mut dpts = ctx.needs[1].then(|| Tensor::zeros(pts.dims()));
            for r in 0..n {
                let p = pts.row_slice(r);
                let gr = g.row_slice(r);
                if let Some(dg) = dgrid.as_mut() {
                    for (cell, wgt) in corner_weights(dims, [p[0], p[1], p[2]]) {
                        if wgt != 0.0 {
                            diffcore_axpy(&mut dg.data_mut()[cell * c..(cell + 1) * c], wgt, gr);
                        }
                    }
                }
                if let Some(dp) = dpts.as_mut() {
                    let ax = [axis_interp(p[2], d), axis_interp(p[1], h), axis_interp(p[0], w)];
                    // derivative of each corner weight along each axis
                    let mut acc = [0.0; 3];
                    for oz in 0..=(ax[0].two as usize) {
                        for oy in 0..=(ax[1].two as usize) {
                            for ox in 0..=(ax[2].two as usize) {
                                let o = [oz, oy, ox];
                                let f: [f64; 3] = std::array::from_fn(|a| if o[a] == 0 { 1.0 - ax[a].t } else { ax[a].t });
                                let s: [f64; 3] = std::array::from_fn(|a| if o[a] == 0 { -1.0 } else { 1.0 });
                                let cell = ((ax[0].lo + oz) * h + ax[1].lo + oy) * w + ax[2].lo + ox;
                                let dot = diffcore::dot(gr, grid.row_slice(cell));
                                acc[0] += s[0] * f[1] * f[2] * dot;
                                acc[1] += f[0] * s[1] * f[2] * dot;
                                acc[2] += f[0] * f[1] * s[2] * dot;
                            }
                        }
                    }
                    let row = &mut dp.data_mut()[r * 3..r * 3 + 3];
                    // columns are (x, y, z); axes above are (z, y, x)
                    row[0] = acc[2] * ax[2].slope;
                    row[1] = acc[1] * ax[1].slope;
                    row[2] = acc[0] * ax[0].slope;
                }
            }
            vec![dgrid, dpts]
        }),
    )
}

fn diffcore_axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `F(H_3D, J')`: z is rescaled by ψ(z) = z^λ before interpolation.
pub fn trilinear_sample<'g>(grid: Var<'g>, dims: [usize; 3], points: Var<'g>, lambda: Var<'g>) -> Var<'g> {
    let warped = Var::concat_cols(&[points.slice_cols(0, 2), psi_var(points.slice_cols(2, 1), lambda)]);
    sample_grid(grid, dims, warped)
}

/// Cells with nonzero trilinear weight for at least one point (after ψ).
pub fn contribution_mask(dims: [usize; 3], points: &Tensor, lambda: f64) -> Vec<bool> {
    let mut mask = vec![false; dims.iter().product()];
    for r in 0..points.rows() {
        let p = points.row_slice(r);
        for (cell, w) in corner_weights(dims, [p[0], p[1], p[2].powf(lambda)]) {
            if w > 0.0 {
                mask[cell] = true;
            }
        }
    }
    mask
}

/// Normalized image points (`N x 2`, [-1, 1]) as depth-free grid points.
pub fn image_to_grid_points(joints2d: &Tensor) -> Tensor {
    let n = joints2d.rows();
    let mut out = Vec::with_capacity(3 * n);
    for r in 0..n {
        out.push((joints2d.get2(r, 0) + 1.0) * 0.5);
        out.push((joints2d.get2(r, 1) + 1.0) * 0.5);
        out.push(0.5);
    }
    Tensor::from_vec(&[n, 3], out)
}

/// Share of attention mass on the first `n2d` keys and on the rest,
/// averaged over query rows.
pub fn mass_split(probs: &Tensor, n2d: usize) -> (f64, f64) {
    let rows = probs.rows();
    let (mut a, mut b) = (0.0, 0.0);
    for r in 0..rows {
        let row = probs.row_slice(r);
        a += row[..n2d].iter().sum::<f64>();
        b += row[n2d..].iter().sum::<f64>();
    }
    (a / rows as f64, b / rows as f64)
}

/// Regressed parameters after one stage.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'g> {
    pub latent: Var<'g>,
    /// `1 x 3K` axis-angle pose.
    pub theta: Var<'g>,
    pub beta: Var<'g>,
    /// Camera before the scale exponential.
    pub cam_raw: Var<'g>,
    /// `(s, t_x, t_y)` with `s = exp(raw)`.
    pub cam: Var<'g>,
    /// `J'_3D`, `N_j x 3` grid coordinates.
    pub joints: Var<'g>,
}

pub struct FusionOut<'g> {
    /// Initial regression then one per refining layer.
    pub snapshots: Vec<Snapshot<'g>>,
    /// Decoder hidden states `H_d` per stage.
    pub hidden: Vec<Var<'g>>,
    /// Sampled `H_J3D` fed to each refining layer.
    pub joint_features: Vec<Var<'g>>,
    /// Head-averaged cross-attention of each refining layer.
    pub attention: Vec<Tensor>,
    /// Number of 2D keys in the refining memory.
    pub keys_2d: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub pose: Mlp,
    pub shape: Mlp,
    pub cam: Mlp,
    pub joints: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct Residuals {
    pub pose: Mlp,
    pub shape: Mlp,
    pub cam: Mlp,
    pub joints: Mlp,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub encoder2d: TokenEncoder,
    pub queries: ParamId,
    pub initial: Vec<DecoderLayer>,
    pub refine: Vec<DecoderLayer>,
    pub heads: Heads,
    pub residuals: Vec<Residuals>,
    pub pose_decoder: Linear,
    pub grid2d: [usize; 3],
    pub grid3d: [usize; 3],
    pub num_joints: usize,
    pub smpl_token: bool,
    pub feat2d: Feat2dMode,
    pub feat3d: Feat3dMode,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config, pose_dim: usize) -> Self {
        let m = &cfg.model;
        let c = m.channels;
        let nq = m.num_joints + if m.smpl_token { NUM_SMPL_TOKENS } else { 0 };
        let layer = |store: &mut ParamStore, init: &mut Init, name: String| {
            DecoderLayer::new(store, init, &name, c, m.heads, m.mlp_ratio)
        };
        let encoder2d = TokenEncoder::new(
            store,
            init,
            "enc2d",
            m.height * m.width,
            c,
            m.heads,
            m.mlp_ratio,
            m.enc2d_layers,
        );
        let queries = store.add("queries", init.uniform(&[nq, c], 1.0), false);
        let initial = (0..m.dec_layers.max(1))
            .map(|l| layer(store, init, format!("dec{l}")))
            .collect();
        let refine = (0..m.refine_layers)
            .map(|l| layer(store, init, format!("refine{l}")))
            .collect();
        let heads = Heads {
            pose: Mlp::new(store, init, "head.pose", [c, c, m.latent_dim]),
            shape: Mlp::new(store, init, "head.shape", [c, c, NUM_BETAS]),
            cam: Mlp::new(store, init, "head.cam", [c, c, 3]),
            joints: Mlp::new(store, init, "head.joints", [c, c, 3]),
        };
        let residuals = (0..m.refine_layers)
            .map(|l| {
                let n = |s: &str| format!("residual{l}.{s}");
                Residuals {
                    pose: Mlp::residual(store, init, &n("pose"), [m.latent_dim + c, c, m.latent_dim]),
                    shape: Mlp::residual(store, init, &n("shape"), [NUM_BETAS + c, c, NUM_BETAS]),
                    cam: Mlp::residual(store, init, &n("cam"), [3 + c, c, 3]),
                    joints: Mlp::residual(store, init, &n("joints"), [3 + c, c, 3]),
                }
            })
            .collect();
        let pose_decoder = Linear::new(store, init, "pose_decoder", m.latent_dim, pose_dim);
        Self {
            encoder2d,
            queries,
            initial,
            refine,
            heads,
            residuals,
            pose_decoder,
            grid2d: [1, m.height, m.width],
            grid3d: [m.depth, m.height, m.width],
            num_joints: m.num_joints,
            smpl_token: m.smpl_token,
            feat2d: m.feat2d,
            feat3d: m.feat3d,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_joints + if self.smpl_token { NUM_SMPL_TOKENS } else { 0 }
    }

    /// `H_2D = TransformerEncoder(F_2D)`.
    pub fn encode2d<'g>(&self, p: &Binder<'g>, f2d: Var<'g>) -> Var<'g> {
        self.encoder2d.forward(p, f2d)
    }

    /// Keys and key positions for the 2D part of the memory.
    pub fn memory2d<'g>(&self, p: &Binder<'g>, h2d: Var<'g>, joints2d: &Tensor) -> (Var<'g>, Var<'g>) {
        let pos = p.var(self.encoder2d.pos);
        match self.feat2d {
            Feat2dMode::Flatting => (h2d, pos),
            Feat2dMode::Sampling => {
                let pts = p.graph().constant(image_to_grid_points(joints2d));
                (sample_grid(h2d, self.grid2d, pts), sample_grid(pos, self.grid2d, pts))
            }
        }
    }

    /// θ from the pose latent.
    pub fn decode_pose_latent<'g>(&self, p: &Binder<'g>, latent: Var<'g>) -> Var<'g> {
        self.pose_decoder.forward(p, latent)
    }

    fn smpl_rows<'g>(&self, hidden: Var<'g>) -> [Var<'g>; 3] {
        if self.smpl_token {
            [hidden.row(0), hidden.row(1), hidden.row(2)]
        } else {
            let pooled = hidden.mean_rows();
            [pooled; 3]
        }
    }

    fn joint_rows<'g>(&self, hidden: Var<'g>) -> Var<'g> {
        let off = if self.smpl_token { NUM_SMPL_TOKENS } else { 0 };
        hidden.slice_rows(off, self.num_joints)
    }

    fn snapshot<'g>(&self, p: &Binder<'g>, latent: Var<'g>, beta: Var<'g>, cam_raw: Var<'g>, joints: Var<'g>) -> Snapshot<'g> {
        let cam = Var::concat_cols(&[cam_raw.slice_cols(0, 1).exp(), cam_raw.slice_cols(1, 2)]);
        Snapshot {
            latent,
            theta: self.decode_pose_latent(p, latent),
            beta,
            cam_raw,
            cam,
            joints,
        }
    }

    /// Decoder over the 2D memory and the regression heads. Returns the
    /// decoder state, its normalized hidden state and the first snapshot.
    pub fn initial_regress<'g>(
        &self,
        p: &Binder<'g>,
        memory: Var<'g>,
        memory_pos: Var<'g>,
    ) -> (Var<'g>, Var<'g>, Snapshot<'g>) {
        let mut tgt = p.var(self.queries);
        let mut hidden = tgt;
        for layer in &self.initial {
            let out = layer.forward(p, tgt, memory, Some(memory_pos));
            tgt = out.tgt;
            hidden = out.hidden;
        }
        let [hp, hs, hc] = self.smpl_rows(hidden);
        let latent = self.heads.pose.forward(p, hp);
        let beta = self.heads.shape.forward(p, hs);
        let cam_raw = self.heads.cam.forward(p, hc);
        let joints = self.heads.joints.forward(p, self.joint_rows(hidden)).sigmoid();
        (tgt, hidden, self.snapshot(p, latent, beta, cam_raw, joints))
    }

    /// Joint features `H_J3D` at the current reference joints.
    pub fn sample_joints<'g>(&self, h3d: Var<'g>, joints: Var<'g>, lambda: Var<'g>) -> Var<'g> {
        trilinear_sample(h3d, self.grid3d, joints, lambda)
    }

    /// Full fusion pass. `h3d` is `None` exactly when 3D features are off.
    pub fn forward<'g>(
        &self,
        p: &Binder<'g>,
        f2d: Var<'g>,
        h3d: Option<Var<'g>>,
        lambda: Var<'g>,
        joints2d: &Tensor,
    ) -> FusionOut<'g> {
        let h2d = self.encode2d(p, f2d);
        let (mem2d, pos2d) = self.memory2d(p, h2d, joints2d);
        let (tgt, hidden, first) = self.initial_regress(p, mem2d, pos2d);
        self.refine_from(p, tgt, hidden, first, mem2d, pos2d, h3d, lambda)
    }

    /// Refining layers; each updates the previous snapshot by a residual.
    #[allow(clippy::too_many_arguments)]
    pub fn refine_from<'g>(
        &self,
        p: &Binder<'g>,
        mut tgt: Var<'g>,
        hidden: Var<'g>,
        first: Snapshot<'g>,
        mem2d: Var<'g>,
        pos2d: Var<'g>,
        h3d: Option<Var<'g>>,
        lambda: Var<'g>,
    ) -> FusionOut<'g> {
        let g = p.graph();
        let keys_2d = mem2d.rows();
        let mut snapshots = vec![first];
        let mut hiddens = vec![hidden];
        let mut joint_features = Vec::new();
        let mut attention = Vec::new();
        let zero_pos = h3d.map(|h| g.constant(Tensor::zeros(&[self.num_joints, h.cols()])));
        let (memory, memory_pos) = (mem2d, pos2d);
        for (layer, res) in self.refine.iter().zip(&self.residuals) {
            let cur = *snapshots.last().unwrap();
            let (mem, pos) = match (h3d, zero_pos) {
                (Some(h), Some(z)) => {
                    let hj = self.sample_joints(h, cur.joints, lambda);
                    joint_features.push(hj);
                    (Var::concat_rows(&[memory, hj]), Var::concat_rows(&[memory_pos, z]))
                }
                _ => (memory, memory_pos),
            };
            let out = layer.forward(p, tgt, mem, Some(pos));
            tgt = out.tgt;
            attention.push(out.cross_probs);
            let hd = out.hidden;
            let [hp, hs, hc] = self.smpl_rows(hd);
            let step = |mlp: &Mlp, x: Var<'g>, h: Var<'g>| x + mlp.forward(p, Var::concat_cols(&[x, h]));
            let latent = step(&res.pose, cur.latent, hp);
            let beta = step(&res.shape, cur.beta, hs);
            let cam_raw = step(&res.cam, cur.cam_raw, hc);
            // clamp after the residual update
            let joints = step(&res.joints, cur.joints, self.joint_rows(hd)).clamp(0.0, 1.0);
            snapshots.push(self.snapshot(p, latent, beta, cam_raw, joints));
            hiddens.push(hd);
        }
        FusionOut {
            snapshots,
            hidden: hiddens,
            joint_features,
            attention,
            keys_2d,
        }
    }

    /// Zeroes every residual MLP so refinement leaves the parameters as the
    /// initial regression produced them.
    pub fn zero_residuals(&self, store: &mut ParamStore) {
        for r in &self.residuals {
            for m in [r.pose, r.shape, r.cam, r.joints] {
                m.fc1.zero(store);
                m.fc2.zero(store);
            }
        }
    }

    pub fn zero_heads(&self, store: &mut ParamStore) {
        for m in [self.heads.pose, self.heads.shape, self.heads.cam, self.heads.joints] {
            m.fc2.zero(store);
        }
    }
}

/// Attention matrices as an archive with one `layer{l}.attn` entry each.
pub fn attention_archive(attention: &[Tensor]) -> Archive {
    let mut a = Archive::new();
    for (l, t) in attention.iter().enumerate() {
        a.push(format!("layer{l}.attn"), t.clone(), Dtype::F64);
    }
    a
}

/// Samples the grid at the given plain points; a convenience for callers
/// without a tape.
pub fn sample_values(grid: &Tensor, dims: [usize; 3], points: &Tensor) -> Tensor {
    let g = Graph::new();
    (*sample_grid(g.constant(grid.clone()), dims, g.constant(points.clone())).value()).clone()
}
