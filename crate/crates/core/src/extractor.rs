//! Pose-guided 2D features: image and joint heatmaps through a plain
//! strided convolution stack.

use diffcore::{Binder, ParamStore, Tensor, Var};
use thiserror::Error;

use crate::config::Config;
use crate::nn::{Conv, ConvGeom, Init};

#[derive(Debug, Error, PartialEq)]
pub enum ExtractorError {
    #[error("extractor block {block} has no output for a {size}x{size} input")]
    Collapsed { block: usize, size: usize },
    #[error("extractor reduces {from} to {got}, expected {want}")]
    Extent { from: usize, got: usize, want: usize },
}

/// Image (`3 x S x S`) and heatmaps (`N x S x S`), intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct InputPatch {
    pub image: Tensor,
    pub heatmaps: Tensor,
}

impl InputPatch {
    pub fn size(&self) -> usize {
        self.image.dims()[1]
    }

    /// Pixel-major `(S*S) x (3 + N)` matrix: image channels then heatmaps.
    pub fn to_matrix(&self) -> Tensor {
        let s = self.size();
        let n = self.heatmaps.dims()[0];
        let c = 3 + n;
        let mut out = vec![0.0; s * s * c];
        for (ch, plane) in self
            .image
            .data()
            .chunks_exact(s * s)
            .chain(self.heatmaps.data().chunks_exact(s * s))
            .enumerate()
        {
            for (px, &v) in plane.iter().enumerate() {
                out[px * c + ch] = v;
            }
        }
        Tensor::from_vec(&[s * s, c], out)
    }
}

/// Continuous pixel coordinate (column, row) of a normalized image point;
/// pixel centers sit at integers.
pub fn to_pixel(x: f64, y: f64, s: usize) -> (f64, f64) {
    let sf = s as f64;
    ((x + 1.0) * 0.5 * sf - 0.5, (y + 1.0) * 0.5 * sf - 0.5)
}

/// Normalized coordinate of a pixel center.
pub fn pixel_center(col: usize, row: usize, s: usize) -> (f64, f64) {
    let sf = s as f64;
    ((col as f64 + 0.5) / sf * 2.0 - 1.0, (row as f64 + 0.5) / sf * 2.0 - 1.0)
}

/// Gaussian maps `exp(-d²/2σ²)` (σ in pixels), `N x S x S`. Joints
/// outside [-1, 1]² give all-zero maps.
pub fn make_heatmaps(joints2d: &Tensor, s: usize, sigma: f64) -> Tensor {
    assert!(sigma > 0.0, "heatmap sigma must be positive");
    let n = joints2d.rows();
    let mut out = vec![0.0; n * s * s];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for j in 0..n {
        let (x, y) = (joints2d.get2(j, 0), joints2d.get2(j, 1));
        if !(-1.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
            continue;
        }
        let (px, py) = to_pixel(x, y, s);
        let map = &mut out[j * s * s..(j + 1) * s * s];
        for r in 0..s {
            let dy = r as f64 - py;
            for c in 0..s {
                let dx = c as f64 - px;
                map[r * s + c] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Tensor::from_vec(&[n, s, s], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
    pub activation: bool,
}

#[derive(Debug, Clone)]
pub struct Extractor {
    pub blocks: Vec<(Conv, bool)>,
    pub input_size: usize,
    pub output_size: usize,
}

impl Extractor {
    pub fn from_specs(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        size: usize,
        in_channels: usize,
        specs: &[ConvSpec],
    ) -> Result<Self, ExtractorError> {
        let mut blocks = Vec::with_capacity(specs.len());
        let (mut hw, mut c) = (size, in_channels);
        for (i, sp) in specs.iter().enumerate() {
            let geom = ConvGeom::conv2d(hw, hw, c, sp.kernel, sp.stride, sp.pad);
            let out = geom
                .output()
                .ok_or(ExtractorError::Collapsed { block: i, size: hw })?;
            blocks.push((
                Conv::new(store, init, &format!("{name}.conv{i}"), geom, sp.out_channels),
                sp.activation,
            ));
            hw = out[1];
            c = sp.out_channels;
        }
        Ok(Self {
            blocks,
            input_size: size,
            output_size: hw,
        })
    }

    /// Stride-2 3x3 blocks from `S` down to `H`, channels doubling up to `C`.
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &Config) -> Result<Self, ExtractorError> {
        let m = &cfg.model;
        let n = cfg.extractor_blocks().ok_or(ExtractorError::Extent {
            from: m.image_size,
            got: m.image_size,
            want: m.height,
        })?;
        let specs: Vec<ConvSpec> = (0..n)
            .map(|i| ConvSpec {
                kernel: 3,
                stride: 2,
                pad: 1,
                out_channels: (m.channels >> (n - 1 - i)).max(1),
                activation: true,
            })
            .collect();
        let e = Self::from_specs(store, init, "extractor", m.image_size, 3 + m.num_joints, &specs)?;
        if e.output_size != m.height {
            return Err(ExtractorError::Extent {
                from: m.image_size,
                got: e.output_size,
                want: m.height,
            });
        }
        Ok(e)
    }

    /// `F_2D` as an `(H*W) x C` matrix.
    pub fn forward<'g>(&self, p: &Binder<'g>, input: Var<'g>) -> Var<'g> {
        let mut x = input;
        for (conv, act) in &self.blocks {
            x = conv.forward(p, x);
            if *act {
                x = x.gelu();
            }
        }
        x
    }

    pub fn extract<'g>(&self, p: &Binder<'g>, patch: &InputPatch) -> Var<'g> {
        self.forward(p, p.graph().constant(patch.to_matrix()))
    }
}
