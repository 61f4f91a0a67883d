//! The full network: extractor, lifting, fusion and the body model,
//! plus the per-batch loss.

use diffcore::{Binder, Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::body_model::{forward_mesh, project, regress_joints, BodyAsset, NUM_EVAL_JOINTS};
use crate::config::{Config, ConfigError, Feat3dMode};
use crate::contrast::{joint_contrast, ContrastError, ImageJoints};
use crate::extractor::{make_heatmaps, Extractor, ExtractorError, InputPatch};
use crate::fusion::{Fusion, FusionOut};
use crate::lifting::Lifting;
use crate::nn::Init;
use crate::objective::{average_snapshots, l1_terms, total_loss, LossBundle, LossWeights, Prediction, Target, Term};
use crate::seeding::{self, Stream};
use crate::synthdata::SynthSample;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error("model has {model} joint queries but the asset regresses {asset} joints")]
    Joints { model: usize, asset: usize },
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error("checkpoint does not fit the model: {0}")]
    Checkpoint(String),
}

pub struct Model {
    pub cfg: Config,
    pub asset: BodyAsset,
    pub store: ParamStore,
    pub extractor: Extractor,
    pub lifting: Lifting,
    pub fusion: Fusion,
    pub weights: LossWeights,
}

/// One sample's network output on a tape.
pub struct Forward<'g> {
    pub fusion: FusionOut<'g>,
    pub h3d: Option<Var<'g>>,
    pub lambda: Var<'g>,
}

/// One snapshot pushed through the body model.
#[derive(Debug, Clone, Copy)]
pub struct Posed<'g> {
    pub prediction: Prediction<'g>,
    pub vertices: Var<'g>,
    pub cam: Var<'g>,
}

/// Plain values of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotValues {
    pub theta: Tensor,
    pub beta: Tensor,
    pub cam: Tensor,
    pub grid: Tensor,
    pub vertices: Tensor,
    pub joints3d: Tensor,
    pub joints2d: Tensor,
}

/// Ground-truth 2D joints with gaussian noise, emulating a detector.
pub fn detector_joints(gt: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if sigma <= 0.0 {
        return gt.clone();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let data = gt.data().iter().map(|v| v + n.sample(rng)).collect();
    Tensor::from_vec(gt.dims(), data)
}

impl Model {
    /// Fresh parameters from the `Init` stream of `cfg.seed`.
    pub fn new(cfg: &Config, asset: BodyAsset) -> Result<Self, ModelError> {
        cfg.validate()?;
        let eval = asset.j_eval.rows();
        if cfg.model.num_joints != eval || eval != NUM_EVAL_JOINTS {
            return Err(ModelError::Joints {
                model: cfg.model.num_joints,
                asset: eval,
            });
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(seeding::rng(cfg.seed, Stream::Init, 0));
        let extractor = Extractor::new(&mut store, &mut init, cfg)?;
        let lifting = Lifting::new(&mut store, &mut init, cfg);
        let fusion = Fusion::new(&mut store, &mut init, cfg, 3 * asset.num_joints());
        let weights = LossWeights::new(&mut store, &cfg.loss);
        Ok(Self {
            cfg: cfg.clone(),
            asset,
            store,
            extractor,
            lifting,
            fusion,
            weights,
        })
    }

    pub fn uses_3d(&self) -> bool {
        self.cfg.model.feat3d == Feat3dMode::Sampling
    }

    pub fn input_patch(&self, image: &Tensor, joints2d: &Tensor) -> InputPatch {
        let s = self.cfg.model.image_size;
        InputPatch {
            image: image.clone(),
            heatmaps: make_heatmaps(joints2d, s, self.cfg.model.heatmap_sigma),
        }
    }

    /// Network pass on one image with detector joints `joints2d`.
    pub fn forward<'g>(&self, p: &Binder<'g>, image: &Tensor, joints2d: &Tensor) -> Forward<'g> {
        let patch = self.input_patch(image, joints2d);
        let f2d = self.extractor.extract(p, &patch);
        let lambda = p.var(self.lifting.lambda);
        let h3d = self.uses_3d().then(|| self.lifting.forward(p, f2d));
        let fusion = self.fusion.forward(p, f2d, h3d, lambda, joints2d);
        Forward { fusion, h3d, lambda }
    }

    /// Mesh, joints and projection for every snapshot.
    pub fn pose<'g>(&self, p: &Binder<'g>, fwd: &Forward<'g>) -> Vec<Posed<'g>> {
        let g = p.graph();
        let w = g.constant(self.asset.j_eval.clone());
        fwd.fusion
            .snapshots
            .iter()
            .map(|s| {
                let vertices = forward_mesh(g, &self.asset, s.theta, s.beta);
                let joints3d = regress_joints(vertices, w).expect("regressor matches mesh");
                Posed {
                    prediction: Prediction {
                        theta: s.theta,
                        beta: s.beta,
                        joints3d,
                        joints2d: project(joints3d, s.cam),
                        grid: s.joints,
                    },
                    vertices,
                    cam: s.cam,
                }
            })
            .collect()
    }

    /// Snapshot values for one image, no gradients.
    pub fn predict(&self, image: &Tensor, joints2d: &Tensor) -> Vec<SnapshotValues> {
        let g = Graph::new();
        let p = Binder::new(&g, &self.store, false);
        let fwd = self.forward(&p, image, joints2d);
        let v = |x: Var<'_>| (*x.value()).clone();
        self.pose(&p, &fwd)
            .iter()
            .map(|s| SnapshotValues {
                theta: v(s.prediction.theta),
                beta: v(s.prediction.beta),
                cam: v(s.cam),
                grid: v(s.prediction.grid),
                vertices: v(s.vertices),
                joints3d: v(s.prediction.joints3d),
                joints2d: v(s.prediction.joints2d),
            })
            .collect()
    }

    /// Loss bundle and weighted total for a batch of samples with their
    /// detector joints.
    pub fn batch_loss<'g>(
        &self,
        p: &Binder<'g>,
        batch: &[(&SynthSample, Tensor)],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'g>, LossBundle<'g>), ModelError> {
        let g = p.graph();
        let rounds = self.fusion.refine.len() + 1;
        let targets: Vec<Target> = batch.iter().map(|(s, _)| s.target()).collect();
        let target_refs: Vec<&Target> = targets.iter().collect();
        let mut per_round: Vec<Vec<Prediction<'g>>> = vec![Vec::new(); rounds];
        let mut images = Vec::new();
        let round = self.cfg.contrast_round();
        for ((sample, det), target) in batch.iter().zip(&targets) {
            let fwd = self.forward(p, &sample.image, det);
            for (r, posed) in self.pose(p, &fwd).into_iter().enumerate() {
                per_round[r].push(posed.prediction);
            }
            if let Some(h3d) = fwd.h3d {
                images.push(ImageJoints {
                    h3d,
                    predicted: fwd.fusion.snapshots[round].joints,
                    ground_truth: target.has_3d.then(|| target.grid.clone()),
                });
            }
        }
        let terms: Vec<_> = per_round.iter().map(|preds| l1_terms(g, preds, &target_refs)).collect();
        let avg = average_snapshots(&terms);
        let mut bundle = LossBundle::default();
        let loss = &self.cfg.loss;
        if loss.l3d {
            bundle.push(Term::L3d, avg.l3d);
        }
        if loss.l2d {
            bundle.push(Term::L2d, avg.l2d);
        }
        if loss.lsmpl {
            bundle.push(Term::Smpl, avg.smpl);
        }
        if loss.j2n || loss.j2j {
            let lambda = p.var(self.lifting.lambda);
            let c = joint_contrast(
                g,
                &images,
                self.lifting.dims,
                lambda,
                &self.cfg.contrast,
                (loss.j2n, loss.j2j),
                rng,
            )?;
            if loss.j2n {
                bundle.push(Term::J2n, c.j2n);
            }
            if loss.j2j {
                bundle.push(Term::J2j, c.j2j);
            }
        }
        Ok((total_loss(p, &self.weights, &bundle), bundle))
    }

    /// Eval-time detector joints for a sample, seeded by its index.
    pub fn eval_detections(&self, sample: &SynthSample, index: usize) -> Tensor {
        let mut rng = seeding::rng(self.cfg.seed, Stream::EvalNoise, index as u64);
        detector_joints(&sample.joints_2d, self.cfg.train.detector_noise, &mut rng)
    }

    /// Training-time detector joints, fresh per step.
    pub fn train_detections(&self, sample: &SynthSample, rng: &mut ChaCha8Rng) -> Tensor {
        detector_joints(&sample.joints_2d, self.cfg.train.detector_noise, rng)
    }
}
