//! Training loop: one tape per step over the whole batch, gradient
//! clipping, AdamW, λ clamping, checkpoints and `train.log`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use diffcore::params::clip_grad_norm;
use diffcore::{AdamW, AdamWConfig, Archive, ArchiveError, Binder, Dtype, Graph};
use thiserror::Error;

use crate::lifting::clamp_lambda;
use crate::model::{detector_joints, Model, ModelError};
use crate::objective::Term;
use crate::seeding::{self, Stream};
use crate::synthdata::SynthSample;

pub const TRAIN_LOG: &str = "train.log";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("no training samples")]
    NoData,
    #[error("loss became non-finite at step {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub terms: Vec<(Term, f64)>,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn term(&self, t: Term) -> Option<f64> {
        self.terms.iter().find(|(x, _)| *x == t).map(|p| p.1)
    }

    /// `step term value` lines, including the total and the count of
    /// weighted terms.
    pub fn log_lines(&self) -> String {
        let mut s = String::new();
        for (t, v) in &self.terms {
            writeln!(s, "{} {} {:.9e}", self.step, t, v).unwrap();
        }
        writeln!(s, "{} total {:.9e}", self.step, self.total).unwrap();
        writeln!(s, "{} terms {}", self.step, self.terms.len()).unwrap();
        writeln!(s, "{} grad_norm {:.9e}", self.step, self.grad_norm).unwrap();
        s
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.jtrk")
}

pub fn checkpoint_archive(model: &Model) -> Archive {
    model.store.to_archive(Dtype::F64)
}

pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<(), TrainError> {
    let a = Archive::read(path)?;
    model.store.load_archive(&a)?;
    Ok(())
}

pub struct Trainer<'d> {
    pub model: Model,
    pub opt: AdamW,
    pub data: &'d [SynthSample],
    pub step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, data: &'d [SynthSample]) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::NoData);
        }
        let t = &model.cfg.train;
        let opt = AdamW::new(
            AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                ..AdamWConfig::default()
            },
            &model.store,
        );
        Ok(Self {
            model,
            opt,
            data,
            step: 0,
        })
    }

    /// Indices of the batch for the current step.
    pub fn batch_indices(&self) -> Vec<usize> {
        let n = self.data.len();
        let b = self.model.cfg.train.batch_size;
        if b >= n {
            return (0..n).collect();
        }
        let mut rng = seeding::rng(self.model.cfg.seed, Stream::Batches, self.step as u64);
        let mut idx = rand::seq::index::sample(&mut rng, n, b).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let seed = self.model.cfg.seed;
        let mut noise = seeding::rng(seed, Stream::Noise, self.step as u64);
        let mut crng = seeding::rng(seed, Stream::Contrast, self.step as u64);
        let sigma = self.model.cfg.train.detector_noise;
        let batch: Vec<(&SynthSample, _)> = self
            .batch_indices()
            .into_iter()
            .map(|i| {
                let s = &self.data[i];
                (s, detector_joints(&s.joints_2d, sigma, &mut noise))
            })
            .collect();
        let g = Graph::new();
        let p = Binder::new(&g, &self.model.store, true);
        let (total, bundle) = self.model.batch_loss(&p, &batch, &mut crng)?;
        let total_v = total.item();
        if !total_v.is_finite() {
            return Err(TrainError::NonFinite(self.step));
        }
        let terms = bundle.terms.iter().map(|(t, v)| (*t, v.item())).collect();
        let grads = g.backward(total);
        let mut grads = p.collect(&grads);
        let clip = self.model.cfg.train.grad_clip;
        let grad_norm = if clip > 0.0 {
            clip_grad_norm(&mut grads, clip)
        } else {
            diffcore::params::grad_norm(&grads)
        };
        self.opt.step(&mut self.model.store, &grads);
        clamp_lambda(&mut self.model.store, self.model.lifting.lambda);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            total: total_v,
            terms,
            grad_norm,
        })
    }

    pub fn write_checkpoint(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        let path = dir.join(checkpoint_name(self.step));
        checkpoint_archive(&self.model).write(&path)?;
        Ok(path)
    }

    /// Runs `steps` steps; with an output directory, appends to `train.log`
    /// and writes checkpoints every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        steps: usize,
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>, TrainError> {
        let every = self.model.cfg.train.checkpoint_every;
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(TRAIN_LOG), "")?;
        }
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.train_step()?;
            on_step(&r);
            if let Some(dir) = out {
                use std::io::Write;
                let mut f = fs::OpenOptions::new().append(true).open(dir.join(TRAIN_LOG))?;
                f.write_all(r.log_lines().as_bytes())?;
                if every > 0 && self.step % every == 0 {
                    self.write_checkpoint(dir)?;
                }
            }
            records.push(r);
        }
        if let Some(dir) = out {
            if steps == 0 || every == 0 || self.step % every != 0 {
                self.write_checkpoint(dir)?;
            }
        }
        Ok(records)
    }
}
