//! Differentiable SMPL-style body: parameters to mesh vertices, joints and
//! projected 2D joints.
//!
//! Points are row vectors. A rotation `R` acts on a row `p` as `p Rᵀ`.

use std::path::Path;

use diffcore::{Archive, ArchiveError, Dtype, Graph, ShapeError, Tensor, Var};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const NUM_BETAS: usize = 10;
pub const NUM_EVAL_JOINTS: usize = 17;
pub const PELVIS: usize = 0;

/// Canonical evaluation joint order shared by ground truth and predictions.
pub const JOINT_NAMES: [&str; NUM_EVAL_JOINTS] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "neck",
    "nose",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

/// Below this angle the rotation coefficients use their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-3;
/// Series cut-over for the derivative coefficients, which cancel harder.
const SMALL_ANGLE_GRAD: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("invalid body asset: {0}")]
    Invalid(String),
    #[error("invalid body parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyAsset {
    /// `V x 3` rest vertices in meters.
    pub template: Tensor,
    /// `10 x 3V` shape basis, each row a flattened `V x 3` offset field.
    pub shapedirs: Tensor,
    /// `V x K` skinning weights.
    pub weights: Tensor,
    pub parents: Vec<Option<usize>>,
    /// `K x V`.
    pub j_model: Tensor,
    /// `17 x V`.
    pub j_eval: Tensor,
    pub faces: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    /// `3K` axis-angle values, joint-major.
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// Weak-perspective `(s, t_x, t_y)`.
    pub cam: [f64; 3],
}

impl BodyParams {
    pub fn rest(num_joints: usize) -> Self {
        Self {
            theta: vec![0.0; 3 * num_joints],
            beta: vec![0.0; NUM_BETAS],
            cam: [1.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self, asset: &BodyAsset) -> Result<(), BodyError> {
        if self.theta.len() != 3 * asset.num_joints() {
            return Err(BodyError::Params(format!(
                "pose has {} values, asset needs {}",
                self.theta.len(),
                3 * asset.num_joints()
            )));
        }
        if self.beta.len() != NUM_BETAS {
            return Err(BodyError::Params(format!("shape has {} values", self.beta.len())));
        }
        if !(self.cam[0] > 0.0) {
            return Err(BodyError::Params(format!("camera scale {} is not positive", self.cam[0])));
        }
        Ok(())
    }
}

impl BodyAsset {
    pub fn num_vertices(&self) -> usize {
        self.template.rows()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        let bad = |m: String| Err(BodyError::Invalid(m));
        let v = self.num_vertices();
        let k = self.num_joints();
        if self.template.dims() != [v, 3] {
            return bad(format!("template dims {:?}", self.template.dims()));
        }
        if self.shapedirs.dims() != [NUM_BETAS, 3 * v] {
            return bad(format!("shapedirs dims {:?}", self.shapedirs.dims()));
        }
        if self.weights.dims() != [v, k] {
            return bad(format!("weights dims {:?}, want [{v}, {k}]", self.weights.dims()));
        }
        if self.j_model.dims() != [k, v] {
            return bad(format!("J_regressor_model dims {:?}", self.j_model.dims()));
        }
        if self.j_eval.dims() != [NUM_EVAL_JOINTS, v] {
            return bad(format!("J_regressor_eval dims {:?}", self.j_eval.dims()));
        }
        for r in 0..v {
            let s: f64 = self.weights.row_slice(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return bad(format!("skinning weights of vertex {r} sum to {s}"));
            }
        }
        for r in 0..NUM_EVAL_JOINTS {
            let s: f64 = self.j_eval.row_slice(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return bad(format!("evaluation regressor row {r} sums to {s}"));
            }
        }
        if k == 0 || self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} parent {p:?} must precede it")),
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= v)) {
            return bad(format!("face {f:?} indexes past {v} vertices"));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let v = self.num_vertices();
        let mut a = Archive::new();
        a.push("template", self.template.clone(), Dtype::F64);
        a.push(
            "shapedirs",
            Tensor::from_vec(&[NUM_BETAS, v, 3], self.shapedirs.data().to_vec()),
            Dtype::F64,
        );
        a.push("weights", self.weights.clone(), Dtype::F64);
        let parents = self
            .parents
            .iter()
            .map(|p| p.map_or(-1.0, |p| p as f64))
            .collect();
        a.push("parents", Tensor::from_vec(&[self.num_joints()], parents), Dtype::F64);
        a.push("J_regressor_model", self.j_model.clone(), Dtype::F64);
        a.push("J_regressor_eval", self.j_eval.clone(), Dtype::F64);
        if !self.faces.is_empty() {
            let f = self.faces.iter().flatten().map(|&i| i as f64).collect();
            a.push("faces", Tensor::from_vec(&[self.faces.len(), 3], f), Dtype::F64);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self, BodyError> {
        let template = a.require("template")?.clone();
        let sd = a.require("shapedirs")?;
        let v = template.rows();
        if sd.dims() != [NUM_BETAS, v, 3] {
            return Err(BodyError::Invalid(format!("shapedirs dims {:?}", sd.dims())));
        }
        let shapedirs = Tensor::from_vec(&[NUM_BETAS, 3 * v], sd.data().to_vec());
        let parents = a
            .require("parents")?
            .data()
            .iter()
            .map(|&p| (p >= 0.0).then_some(p as usize))
            .collect();
        let faces = match a.get("faces") {
            Some(f) => f
                .data()
                .chunks_exact(3)
                .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
                .collect(),
            None => Vec::new(),
        };
        let asset = Self {
            template,
            shapedirs,
            weights: a.require("weights")?.clone(),
            parents,
            j_model: a.require("J_regressor_model")?.clone(),
            j_eval: a.require("J_regressor_eval")?.clone(),
            faces,
        };
        asset.validate()?;
        Ok(asset)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BodyError> {
        Self::from_archive(&Archive::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BodyError> {
        Ok(self.to_archive().write(path)?)
    }

    /// Mesh vertices for `params` (`V x 3`, meters).
    pub fn mesh(&self, params: &BodyParams) -> Tensor {
        let g = Graph::new();
        let theta = g.constant(Tensor::row(&params.theta));
        let beta = g.constant(Tensor::row(&params.beta));
        (*forward_mesh(&g, self, theta, beta).value()).clone()
    }

    /// Evaluation joints of a vertex set (`17 x 3`).
    pub fn eval_joints(&self, vertices: &Tensor) -> Tensor {
        self.j_eval.matmul(vertices).expect("vertex count matches regressor")
    }

    /// Diagonal of the axis-aligned box around the rest template.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for r in 0..self.num_vertices() {
            for a in 0..3 {
                let x = self.template.get2(r, a);
                lo[a] = lo[a].min(x);
                hi[a] = hi[a].max(x);
            }
        }
        (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
    }
}

struct Ring {
    center: [f64; 3],
    radius: f64,
    /// The two in-plane axes.
    plane: (usize, usize),
    joint: usize,
    /// Blend half of the ring's weight onto the parent joint.
    blend: bool,
}

fn toy_rings() -> Vec<Ring> {
    let xz = (0, 2);
    let yz = (1, 2);
    let ring = |center: [f64; 3], radius, plane, joint, blend| Ring {
        center,
        radius,
        plane,
        joint,
        blend,
    };
    let mut rings = vec![
        ring([0.0, 0.0, 0.0], 0.12, xz, 0, false),
        ring([0.0, -0.25, 0.0], 0.14, xz, 1, true),
        ring([0.0, -0.45, 0.0], 0.06, xz, 1, false),
        ring([0.0, -0.62, 0.0], 0.09, xz, 1, false),
    ];
    for (side, joint) in [(1.0, 2), (-1.0, 3)] {
        for (i, (x, r)) in [(0.18, 0.05), (0.40, 0.04), (0.60, 0.035)].into_iter().enumerate() {
            rings.push(ring([side * x, -0.45, 0.0], r, yz, joint, i == 0));
        }
    }
    for (side, joint) in [(1.0, 4), (-1.0, 5)] {
        for (i, (y, r)) in [(0.05, 0.07), (0.38, 0.05), (0.70, 0.04)].into_iter().enumerate() {
            rings.push(ring([side * 0.1, y, 0.0], r, xz, joint, i == 0));
        }
    }
    rings
}

/// Ring of each evaluation joint, with the nose handled separately.
const EVAL_RINGS: [usize; NUM_EVAL_JOINTS] = [0, 13, 14, 15, 10, 11, 12, 1, 2, 3, 3, 4, 5, 6, 7, 8, 9];
const NOSE: usize = 9;
const HEAD_RING: usize = 3;
/// Seed of the toy asset's random shape directions.
pub const TOY_SEED: u64 = 0x70f;

/// The procedural test body: 16 rings of 4 vertices on a 6-joint skeleton
/// (pelvis, chest, two arms, two legs), y pointing down, facing -z.
pub fn toy_asset() -> BodyAsset {
    let rings = toy_rings();
    let v = rings.len() * 4;
    let k = 6;
    let parents = vec![None, Some(0), Some(1), Some(1), Some(0), Some(0)];
    let own_ring = [0, 1, 4, 7, 10, 13];

    let mut template = Tensor::zeros(&[v, 3]);
    let mut weights = Tensor::zeros(&[v, k]);
    for (ri, ring) in rings.iter().enumerate() {
        for m in 0..4 {
            let row = ri * 4 + m;
            let mut p = ring.center;
            let sign = if m < 2 { 1.0 } else { -1.0 };
            let axis = if m % 2 == 0 { ring.plane.0 } else { ring.plane.1 };
            p[axis] += sign * ring.radius;
            template.data_mut()[row * 3..row * 3 + 3].copy_from_slice(&p);
            let w = weights.data_mut();
            match (ring.blend, parents[ring.joint]) {
                (true, Some(parent)) => {
                    w[row * k + ring.joint] = 0.5;
                    w[row * k + parent] = 0.5;
                }
                _ => w[row * k + ring.joint] = 1.0,
            }
        }
    }

    let mut j_model = Tensor::zeros(&[k, v]);
    for (j, &r) in own_ring.iter().enumerate() {
        for m in 0..4 {
            j_model.data_mut()[j * v + r * 4 + m] = 0.25;
        }
    }
    let mut j_eval = Tensor::zeros(&[NUM_EVAL_JOINTS, v]);
    for (j, &r) in EVAL_RINGS.iter().enumerate() {
        for m in 0..4 {
            // the nose sits on the front (-z) vertex of the head ring
            let w = match (j == NOSE, m) {
                (false, _) => 0.25,
                (true, 3) => 0.7,
                (true, _) => 0.1,
            };
            j_eval.data_mut()[j * v + r * 4 + m] = w;
        }
    }
    debug_assert_eq!(EVAL_RINGS[NOSE], HEAD_RING);

    let mut shapedirs = Tensor::zeros(&[NUM_BETAS, 3 * v]);
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let random: Vec<[[f64; 3]; 5]> = rings
        .iter()
        .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0) * 0.02)))
        .collect();
    for (ri, ring) in rings.iter().enumerate() {
        let arm = (4..10).contains(&ri);
        let leg = ri >= 10;
        for m in 0..4 {
            let row = ri * 4 + m;
            let p = &template.data()[row * 3..row * 3 + 3];
            let (x, y) = (p[0], p[1]);
            let mut set = |b: usize, off: [f64; 3]| {
                shapedirs.data_mut()[b * 3 * v + row * 3..b * 3 * v + row * 3 + 3].copy_from_slice(&off);
            };
            set(0, [0.0, 0.1 * y, 0.0]);
            set(1, [0.1 * x, 0.0, 0.0]);
            set(2, std::array::from_fn(|a| 0.2 * (p[a] - ring.center[a])));
            if arm {
                set(3, [0.2 * (x - x.signum() * 0.18), 0.0, 0.0]);
            }
            if leg {
                set(4, [0.0, 0.2 * (y - 0.05), 0.0]);
            }
            for (b, off) in random[ri].iter().enumerate() {
                set(5 + b, *off);
            }
        }
    }

    let chains: [&[usize]; 5] = [&[0, 1, 2, 3], &[4, 5, 6], &[7, 8, 9], &[10, 11, 12], &[13, 14, 15]];
    let mut faces = Vec::new();
    for chain in chains {
        for pair in chain.windows(2) {
            let (a, b) = (pair[0] * 4, pair[1] * 4);
            for m in 0..4 {
                let n = (m + 1) % 4;
                faces.push([a + m, a + n, b + n]);
                faces.push([a + m, b + n, b + m]);
            }
        }
    }

    let asset = BodyAsset {
        template,
        shapedirs,
        weights,
        parents,
        j_model,
        j_eval,
        faces,
    };
    debug_assert!(asset.validate().is_ok());
    asset
}

fn skew(r: [f64; 3]) -> Matrix3<f64> {
    Matrix3::new(0.0, -r[2], r[1], r[2], 0.0, -r[0], -r[1], r[0], 0.0)
}

/// (sinθ/θ, (1-cosθ)/θ², (θcosθ-sinθ)/θ³, (θsinθ-2(1-cosθ))/θ⁴).
fn rotation_coefficients(theta: f64) -> [f64; 4] {
    let t2 = theta * theta;
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        let h = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * h * h / t2)
    };
    let (c, d) = if theta < SMALL_ANGLE_GRAD {
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        // 1 - cos θ as 2 sin²(θ/2) avoids cancellation
        let h = (0.5 * theta).sin();
        (
            (theta * co - s) / (t2 * theta),
            (theta * s - 4.0 * h * h) / (t2 * t2),
        )
    };
    [a, b, c, d]
}

/// Rotation matrix of an axis-angle vector.
pub fn rotation_matrix(r: [f64; 3]) -> Matrix3<f64> {
    let theta = Vector3::from(r).norm();
    let [a, b, _, _] = rotation_coefficients(theta);
    let k = skew(r);
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix.
pub fn axis_angle(m: &Matrix3<f64>) -> [f64; 3] {
    let rot = nalgebra::Rotation3::from_matrix(m);
    rot.scaled_axis().into()
}

fn mat_to_tensor(m: &Matrix3<f64>) -> Tensor {
    let mut data = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_vec(&[3, 3], data)
}

/// Differentiable axis-angle (`1 x 3`) to rotation matrix (`3 x 3`).
pub fn rodrigues(r: Var<'_>) -> Var<'_> {
    let rv = r.value();
    assert_eq!(rv.len(), 3, "rodrigues takes a 3-vector");
    let rr = [rv.data()[0], rv.data()[1], rv.data()[2]];
    let value = mat_to_tensor(&rotation_matrix(rr));
    r.graph().custom(
        &[r],
        value,
        Box::new(|ctx| {
            let d = ctx.inputs[0].data();
            let r = [d[0], d[1], d[2]];
            let theta = Vector3::from(r).norm();
            let [a, b, c, dd] = rotation_coefficients(theta);
            let k = skew(r);
            let k2 = k * k;
            let g = ctx.grad.data();
            let mut out = vec![0.0; 3];
            for (i, o) in out.iter_mut().enumerate() {
                let mut e = [0.0; 3];
                e[i] = 1.0;
                let ei = skew(e);
                let dr = ei * a + (ei * k + k * ei) * b + k * (c * r[i]) + k2 * (dd * r[i]);
                *o = (0..3)
                    .flat_map(|p| (0..3).map(move |q| (p, q)))
                    .map(|(p, q)| g[p * 3 + q] * dr[(p, q)])
                    .sum();
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].dims(), out))]
        }),
    )
}

/// Shaped and posed mesh vertices (`V x 3`) for pose `theta` (`1 x 3K`)
/// and shape `beta` (`1 x 10`), by linear blend skinning along the tree.
pub fn forward_mesh<'g>(g: &'g Graph, asset: &BodyAsset, theta: Var<'g>, beta: Var<'g>) -> Var<'g> {
    let v = asset.num_vertices();
    let k = asset.num_joints();
    assert_eq!(theta.value().len(), 3 * k, "pose length");
    let shaped = beta
        .matmul(g.constant(asset.shapedirs.clone()))
        .reshape(&[v, 3])
        + g.constant(asset.template.clone());
    let joints = g.constant(asset.j_model.clone()).matmul(shaped);

    let eye = g.constant(Tensor::eye(3));
    let mut world_rot: Vec<Var<'g>> = Vec::with_capacity(k);
    let mut world_trans: Vec<Var<'g>> = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    for j in 0..k {
        let local = rodrigues(theta.slice_cols(3 * j, 3));
        let jj = joints.row(j);
        // local map x -> R (x - J) + J, translation J - J Rᵀ (zero at rest)
        let local_t = jj - jj.matmul_t(local);
        let (rot, trans) = match asset.parents[j] {
            None => (local, local_t),
            Some(p) => (
                world_rot[p].matmul(local),
                local_t.matmul_t(world_rot[p]) + world_trans[p],
            ),
        };
        // displacement form: rows of (Rᵀ - I) then the translation
        let a = Var::concat_rows(&[rot.transpose() - eye, trans]).reshape(&[1, 12]);
        rows.push(a);
        world_rot.push(rot);
        world_trans.push(trans);
    }
    let stacked = Var::concat_rows(&rows);
    let blended = g.constant(asset.weights.clone()).matmul(stacked);
    let mut out = shaped;
    for i in 0..4 {
        let block = blended.slice_cols(3 * i, 3);
        out = if i < 3 { out + block * shaped.col(i) } else { out + block };
    }
    out
}

/// Joint coordinates `W M` (`N x 3`).
pub fn regress_joints<'g>(vertices: Var<'g>, regressor: Var<'g>) -> Result<Var<'g>, ShapeError> {
    regressor.try_matmul(vertices)
}

/// Weak perspective: `(x, y) = s (X, Y) + (t_x, t_y)`; `cam` is `1 x 3`.
pub fn project<'g>(joints: Var<'g>, cam: Var<'g>) -> Var<'g> {
    joints.slice_cols(0, 2) * cam.slice_cols(0, 1) + cam.slice_cols(1, 2)
}

/// Plain-value weak-perspective projection of an `N x 3` tensor.
pub fn project_values(joints: &Tensor, cam: [f64; 3]) -> Tensor {
    let n = joints.rows();
    let mut out = Vec::with_capacity(2 * n);
    for r in 0..n {
        out.push(cam[0] * joints.get2(r, 0) + cam[1]);
        out.push(cam[0] * joints.get2(r, 1) + cam[2]);
    }
    Tensor::from_vec(&[n, 2], out)
}
