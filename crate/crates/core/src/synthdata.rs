//! Seeded synthetic occluded scenes: posed bodies rendered as flat-shaded
//! point splats, with rectangle or second-person occluders.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use diffcore::{Archive, ArchiveError, Dtype, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::body_model::{project_values, BodyAsset, BodyParams, NUM_BETAS};
use crate::config::{DataConfig, Occlusion};
use crate::objective::Target;
use crate::seeding::{self, Stream};

pub const MANIFEST: &str = "manifest.txt";
pub const MAX_COVERAGE: f64 = 0.6;
/// Joints of the target a person occluder must hide.
pub const MIN_OCCLUDED_JOINTS: usize = 2;
const RETRIES: usize = 64;
/// Slack added when a joint falls outside its sample box.
pub const BOX_MARGIN_MM: f64 = 20.0;
const BACKGROUND: [f64; 3] = [0.15, 0.15, 0.2];
const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.75, 0.6],
    [0.85, 0.55, 0.45],
    [0.4, 0.7, 0.9],
    [0.35, 0.85, 0.5],
    [0.9, 0.85, 0.3],
    [0.7, 0.45, 0.85],
    [0.95, 0.6, 0.2],
    [0.3, 0.5, 0.6],
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

/// Per-axis affine from millimeters to grid coordinates, `u = a p + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAffine {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl GridAffine {
    pub fn forward(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.scale[a] * p[a] + self.offset[a])
    }

    pub fn inverse(&self, u: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (u[a] - self.offset[a]) / self.scale[a])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[2, 3], self.scale.iter().chain(&self.offset).copied().collect())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.data();
        Self {
            scale: [d[0], d[1], d[2]],
            offset: [d[3], d[4], d[5]],
        }
    }

    pub fn apply(&self, points: &Tensor) -> Tensor {
        map_rows(points, |p| self.forward(p))
    }

    pub fn invert(&self, points: &Tensor) -> Tensor {
        map_rows(points, |u| self.inverse(u))
    }
}

fn map_rows(points: &Tensor, f: impl Fn([f64; 3]) -> [f64; 3]) -> Tensor {
    let data = points.data().chunks_exact(3).flat_map(|c| f([c[0], c[1], c[2]])).collect();
    Tensor::from_vec(points.dims(), data)
}

/// Axis-aligned box in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl SampleBox {
    /// The box whose x, y faces project to the image border under `cam`
    /// and whose depth spans the same extent as the width.
    pub fn camera_aligned(cam: [f64; 3]) -> Self {
        let s = cam[0];
        let lo = [(-1.0 - cam[1]) / s, (-1.0 - cam[2]) / s, -1.0 / s];
        let hi = [(1.0 - cam[1]) / s, (1.0 - cam[2]) / s, 1.0 / s];
        Self {
            lo: lo.map(|v| v * 1000.0),
            hi: hi.map(|v| v * 1000.0),
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    pub fn affine(&self) -> GridAffine {
        let scale: [f64; 3] = std::array::from_fn(|a| 1.0 / (self.hi[a] - self.lo[a]));
        GridAffine {
            scale,
            offset: std::array::from_fn(|a| -self.lo[a] * scale[a]),
        }
    }
}

/// Maps `N x 3` millimeter joints into [0, 1]³ through `sample_box`,
/// growing the box (with a warning) when a joint lies outside it.
pub fn normalize_to_grid(joints_mm: &Tensor, sample_box: SampleBox) -> (Tensor, GridAffine) {
    let mut b = sample_box;
    let pts: Vec<[f64; 3]> = joints_mm.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    if pts.iter().any(|&p| !b.contains(p)) {
        log::warn!("joint outside its sample box; expanding the box");
        for p in &pts {
            for a in 0..3 {
                b.lo[a] = b.lo[a].min(p[a] - BOX_MARGIN_MM);
                b.hi[a] = b.hi[a].max(p[a] + BOX_MARGIN_MM);
            }
        }
    }
    let affine = b.affine();
    (affine.apply(joints_mm), affine)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub params: BodyParams,
    /// `3 x S x S`.
    pub image: Tensor,
    pub joints_mm: Tensor,
    pub joints_grid: Tensor,
    /// Normalized image coordinates of the evaluation joints.
    pub joints_2d: Tensor,
    pub affine: GridAffine,
    pub has_3d: bool,
    pub has_smpl: bool,
    /// Share of the body silhouette hidden by the occluder.
    pub coverage: f64,
    /// Evaluation joints whose pixel lies under the occluder.
    pub occluded_joints: usize,
}

impl SynthSample {
    /// Supervision in body units (meters).
    pub fn target(&self) -> Target {
        Target {
            theta: Tensor::row(&self.params.theta),
            beta: Tensor::row(&self.params.beta),
            joints3d: self.joints_mm.map(|v| v / 1000.0),
            joints2d: self.joints_2d.clone(),
            grid: self.joints_grid.clone(),
            has_3d: self.has_3d,
            has_smpl: self.has_smpl,
        }
    }
}

/// Pixel layer: depth (`inf` where empty) and color per pixel.
struct Layer {
    size: usize,
    depth: Vec<f64>,
    color: Vec<[f64; 3]>,
}

impl Layer {
    fn new(size: usize) -> Self {
        Self {
            size,
            depth: vec![f64::INFINITY; size * size],
            color: vec![[0.0; 3]; size * size],
        }
    }

    fn covered(&self, px: usize) -> bool {
        self.depth[px].is_finite()
    }

    fn count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    fn splat(&mut self, x: f64, y: f64, z: f64, color: [f64; 3]) {
        let s = self.size as f64;
        let (c, r) = (((x + 1.0) * 0.5 * s).floor(), ((y + 1.0) * 0.5 * s).floor());
        if c < 0.0 || r < 0.0 || c >= s || r >= s {
            return;
        }
        let px = r as usize * self.size + c as usize;
        // nearer means smaller z
        if z < self.depth[px] {
            self.depth[px] = z;
            self.color[px] = color;
        }
    }
}

fn pixel_of(x: f64, y: f64, size: usize) -> Option<usize> {
    let s = size as f64;
    let (c, r) = (((x + 1.0) * 0.5 * s).floor(), ((y + 1.0) * 0.5 * s).floor());
    (c >= 0.0 && r >= 0.0 && c < s && r < s).then(|| r as usize * size + c as usize)
}

fn dominant_joint(asset: &BodyAsset, v: usize) -> usize {
    let k = asset.num_joints();
    let row = &asset.weights.data()[v * k..(v + 1) * k];
    (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

/// Orthographic point-splat of the mesh surface: every face is filled with
/// a barycentric lattice dense enough to leave no pixel gaps.
fn render_body(asset: &BodyAsset, verts: &Tensor, cam: [f64; 3], size: usize, tint: usize) -> Layer {
    let mut layer = Layer::new(size);
    let proj = project_values(verts, cam);
    let vz = |v: usize| verts.get2(v, 2);
    let px = |v: usize| [proj.get2(v, 0), proj.get2(v, 1)];
    let half = size as f64 * 0.5;
    for f in &asset.faces {
        let [a, b, c] = f.map(px);
        let edge = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).hypot(p[1] - q[1])) * half;
        let n = (edge(a, b).max(edge(b, c)).max(edge(c, a)).ceil() as usize + 1).clamp(2, 128);
        let base = PALETTE[(dominant_joint(asset, f[0]) + tint) % PALETTE.len()];
        let (za, zb, zc) = (vz(f[0]), vz(f[1]), vz(f[2]));
        for i in 0..=n {
            for j in 0..=(n - i) {
                let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                let w = 1.0 - u - v;
                let x = w * a[0] + u * b[0] + v * c[0];
                let y = w * a[1] + u * b[1] + v * c[1];
                let z = w * za + u * zb + v * zc;
                let shade = (0.85 - 0.5 * z).clamp(0.5, 1.0);
                layer.splat(x, y, z, base.map(|ch| ch * shade));
            }
        }
    }
    layer
}

fn sample_params(asset: &BodyAsset, cfg: &DataConfig, rng: &mut ChaCha8Rng) -> BodyParams {
    let k = asset.num_joints();
    let theta = (0..3 * k)
        .map(|_| if cfg.pose_noise > 0.0 { rng.random_range(-cfg.pose_noise..=cfg.pose_noise) } else { 0.0 })
        .collect();
    // uniform in a ball: gaussian direction, radius r u^(1/n)
    let dir: Vec<f64> = (0..NUM_BETAS).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let radius = cfg.shape_noise * rng.random::<f64>().powf(1.0 / NUM_BETAS as f64);
    let beta = dir.iter().map(|v| v / norm * radius).collect();
    let s = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let t = |rng: &mut ChaCha8Rng| if cfg.trans_range > 0.0 { rng.random_range(-cfg.trans_range..=cfg.trans_range) } else { 0.0 };
    let cam = [s, t(rng), t(rng)];
    BodyParams { theta, beta, cam }
}

/// Occluder pixels (mask and colors) painted over the body.
struct Occluder {
    mask: Vec<bool>,
    color: Vec<[f64; 3]>,
}

fn coverage_of(body: &Layer, occ: &Occluder, joints_2d: &Tensor) -> (f64, usize) {
    let total = body.count();
    let hidden = (0..occ.mask.len()).filter(|&p| occ.mask[p] && body.covered(p)).count();
    let joints = (0..joints_2d.rows())
        .filter(|&j| pixel_of(joints_2d.get2(j, 0), joints_2d.get2(j, 1), body.size).is_some_and(|p| occ.mask[p]))
        .count();
    (if total == 0 { 0.0 } else { hidden as f64 / total as f64 }, joints)
}

fn rectangles(size: usize, joints_2d: &Tensor, rng: &mut ChaCha8Rng) -> Occluder {
    let mut occ = Occluder {
        mask: vec![false; size * size],
        color: vec![[0.0; 3]; size * size],
    };
    let s = size as f64;
    for _ in 0..rng.random_range(1..=2) {
        let j = rng.random_range(0..joints_2d.rows());
        let cx = (joints_2d.get2(j, 0) + 1.0) * 0.5 * s;
        let cy = (joints_2d.get2(j, 1) + 1.0) * 0.5 * s;
        let w = rng.random_range(0.15..0.45) * s;
        let h = rng.random_range(0.15..0.45) * s;
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let c0 = (cx - w / 2.0).max(0.0) as usize;
        let r0 = (cy - h / 2.0).max(0.0) as usize;
        let c1 = ((cx + w / 2.0).max(0.0) as usize).min(size);
        let r1 = ((cy + h / 2.0).max(0.0) as usize).min(size);
        for r in r0..r1 {
            for c in c0..c1 {
                occ.mask[r * size + c] = true;
                occ.color[r * size + c] = color;
            }
        }
    }
    occ
}

fn person(asset: &BodyAsset, cfg: &DataConfig, target: &BodyParams, size: usize, rng: &mut ChaCha8Rng) -> Occluder {
    let mut p = sample_params(asset, cfg, rng);
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    p.cam[0] = target.cam[0] * rng.random_range(0.9..1.1);
    p.cam[1] = target.cam[1] + side * rng.random_range(0.15..0.6);
    p.cam[2] = target.cam[2] + rng.random_range(-0.2..0.2);
    let layer = render_body(asset, &asset.mesh(&p), p.cam, size, 3);
    Occluder {
        mask: layer.depth.iter().map(|d| d.is_finite()).collect(),
        color: layer.color,
    }
}

fn compose(body: &Layer, occ: Option<&Occluder>) -> Tensor {
    let n = body.size * body.size;
    let mut img = vec![0.0; 3 * n];
    for p in 0..n {
        let c = match occ {
            Some(o) if o.mask[p] => o.color[p],
            _ if body.covered(p) => body.color[p],
            _ => BACKGROUND,
        };
        for ch in 0..3 {
            img[ch * n + p] = c[ch];
        }
    }
    Tensor::from_vec(&[3, body.size, body.size], img)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Sample `index` of the dataset for `seed`; independent of other samples.
pub fn generate_one(asset: &BodyAsset, cfg: &DataConfig, image_size: usize, seed: u64, index: usize) -> SynthSample {
    let mut rng = seeding::rng(seed, Stream::Data, index as u64);
    let params = sample_params(asset, cfg, &mut rng);
    let verts = asset.mesh(&params);
    let joints_m = asset.eval_joints(&verts);
    let joints_2d = project_values(&joints_m, params.cam);
    let joints_mm = joints_m.map(|v| v * 1000.0);
    let (joints_grid, affine) = normalize_to_grid(&joints_mm, SampleBox::camera_aligned(params.cam));
    let body = render_body(asset, &verts, params.cam, image_size, 0);

    let mut chosen: Option<(Occluder, f64, usize)> = None;
    if cfg.occlusion != Occlusion::None {
        for _ in 0..RETRIES {
            let occ = match cfg.occlusion {
                Occlusion::Object => rectangles(image_size, &joints_2d, &mut rng),
                _ => person(asset, cfg, &params, image_size, &mut rng),
            };
            let (cov, hidden) = coverage_of(&body, &occ, &joints_2d);
            if cov > MAX_COVERAGE {
                continue;
            }
            let enough = cfg.occlusion == Occlusion::Object || hidden >= MIN_OCCLUDED_JOINTS;
            let better = chosen.as_ref().is_none_or(|c| hidden > c.2);
            if better {
                chosen = Some((occ, cov, hidden));
            }
            if enough {
                break;
            }
        }
        if chosen.is_none() {
            log::warn!("{}: no occluder under the coverage limit", sample_id(index));
        }
    }
    let image = compose(&body, chosen.as_ref().map(|c| &c.0));
    let (coverage, occluded_joints) = chosen.as_ref().map_or((0.0, 0), |c| (c.1, c.2));
    SynthSample {
        id: sample_id(index),
        params,
        image,
        joints_mm,
        joints_grid,
        joints_2d,
        affine,
        has_3d: true,
        has_smpl: true,
        coverage,
        occluded_joints,
    }
}

/// `cfg.count` samples for `seed`.
pub fn generate(asset: &BodyAsset, cfg: &DataConfig, image_size: usize, seed: u64) -> Vec<SynthSample> {
    (0..cfg.count).map(|i| generate_one(asset, cfg, image_size, seed, i)).collect()
}

fn flags(s: &SynthSample) -> Tensor {
    Tensor::row(&[s.has_3d as u8 as f64, s.has_smpl as u8 as f64, s.occluded_joints as f64])
}

/// Writes `shard{k}.jtrk` archives and the manifest into `dir`.
pub fn write_dataset(dir: &Path, samples: &[SynthSample], shard_size: usize) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (k, chunk) in samples.chunks(shard_size.max(1)).enumerate() {
        let mut a = Archive::new();
        for s in chunk {
            let id = &s.id;
            let mut put = |name: &str, t: Tensor| a.push(format!("{id}.{name}"), t, Dtype::F64);
            put("image", s.image.clone());
            put("theta", Tensor::row(&s.params.theta));
            put("beta", Tensor::row(&s.params.beta));
            put("cam", Tensor::row(&s.params.cam));
            put("joints_mm", s.joints_mm.clone());
            put("joints_grid", s.joints_grid.clone());
            put("joints_2d", s.joints_2d.clone());
            put("affine", s.affine.to_tensor());
            put("flags", flags(s));
            put("coverage", Tensor::scalar(s.coverage));
            let af = s.affine.to_tensor();
            write!(manifest, "{id} shard{k} has_3d={} has_smpl={} affine", s.has_3d as u8, s.has_smpl as u8).unwrap();
            for v in af.data() {
                write!(manifest, " {v:e}").unwrap();
            }
            manifest.push('\n');
        }
        a.write(dir.join(format!("shard{k}.jtrk")))?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SynthSample>, DataError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut shards: Vec<(String, Archive)> = Vec::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| DataError::Manifest {
            line: i + 1,
            msg: msg.to_string(),
        };
        let mut parts = line.split_whitespace();
        let (Some(id), Some(shard)) = (parts.next(), parts.next()) else {
            return Err(bad("expected id and shard"));
        };
        if !shards.iter().any(|(n, _)| n == shard) {
            shards.push((shard.to_string(), Archive::read(dir.join(format!("{shard}.jtrk")))?));
        }
        let a = &shards.iter().find(|(n, _)| n == shard).unwrap().1;
        let get = |name: &str| a.require(&format!("{id}.{name}")).cloned();
        let fl = get("flags")?;
        let cam = get("cam")?;
        out.push(SynthSample {
            id: id.to_string(),
            params: BodyParams {
                theta: get("theta")?.into_data(),
                beta: get("beta")?.into_data(),
                cam: [cam.data()[0], cam.data()[1], cam.data()[2]],
            },
            image: get("image")?,
            joints_mm: get("joints_mm")?,
            joints_grid: get("joints_grid")?,
            joints_2d: get("joints_2d")?,
            affine: GridAffine::from_tensor(&get("affine")?),
            has_3d: fl.data()[0] != 0.0,
            has_smpl: fl.data()[1] != 0.0,
            coverage: get("coverage")?.item(),
            occluded_joints: fl.data()[2] as usize,
        });
    }
    Ok(out)
}
