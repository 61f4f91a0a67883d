//! Evaluation reports, mesh inference and diagnostic exports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use diffcore::{Archive, ArchiveError, Binder, Dtype, Graph, Tensor};
use nalgebra::Vector3;
use thiserror::Error;

use crate::body_model::{BodyAsset, BodyParams, PELVIS};
use crate::contrast::{embedding_report, joint_embeddings, EmbeddingReport};
use crate::fusion::{attention_archive, mass_split};
use crate::metrics::{mpjpe, pa_mpjpe, pve, to_points, EvalResult, SampleMetrics};
use crate::model::Model;
use crate::synthdata::SynthSample;

pub const EVAL_REPORT: &str = "eval_report.txt";
pub const EVAL_RECORDS: &str = "eval_records.txt";
pub const ATTENTION_SPLIT: &str = "attention_split.txt";
pub const EMBEDDINGS: &str = "embeddings.jtrk";
pub const EMBEDDING_REPORT: &str = "embedding_report.txt";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("3D features are disabled; no joint embeddings to export")]
    NoEmbeddings,
}

/// Metrics of the final output plus one entry per snapshot (initial
/// regression, then each refining layer).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub result: EvalResult,
    pub layers: Vec<EvalResult>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.result;
        writeln!(s, "samples {}", r.samples.len()).unwrap();
        writeln!(s, "mpjpe_mm {:.6}", r.mpjpe).unwrap();
        writeln!(s, "pa_mpjpe_mm {:.6}", r.pa_mpjpe).unwrap();
        writeln!(s, "pve_mm {:.6}", r.pve).unwrap();
        writeln!(s, "layer mpjpe_mm pa_mpjpe_mm pve_mm").unwrap();
        for (l, e) in self.layers.iter().enumerate() {
            writeln!(s, "{l} {:.6} {:.6} {:.6}", e.mpjpe, e.pa_mpjpe, e.pve).unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(EVAL_REPORT), self.to_text())?;
        fs::write(dir.join(EVAL_RECORDS), self.result.records())
    }
}

fn millimeters(t: &Tensor) -> Vec<Vector3<f64>> {
    to_points(&t.data().iter().map(|v| v * 1000.0).collect::<Vec<_>>())
}

/// Joint and vertex errors of predicted values against a sample.
pub fn sample_metrics(asset: &BodyAsset, sample: &SynthSample, vertices: &Tensor, joints3d: &Tensor) -> SampleMetrics {
    let gt_verts = asset.mesh(&sample.params);
    let gt_joints = to_points(sample.joints_mm.data());
    let pred_joints = millimeters(joints3d);
    SampleMetrics {
        id: sample.id.clone(),
        mpjpe: mpjpe(&pred_joints, &gt_joints),
        pa_mpjpe: pa_mpjpe(&pred_joints, &gt_joints),
        pve: pve(
            &millimeters(vertices),
            &millimeters(&gt_verts),
            pred_joints[PELVIS],
            gt_joints[PELVIS],
        ),
    }
}

pub fn evaluate(model: &Model, samples: &[SynthSample]) -> EvalReport {
    let rounds = model.fusion.refine.len() + 1;
    let mut per_layer: Vec<Vec<SampleMetrics>> = vec![Vec::new(); rounds];
    for (i, s) in samples.iter().enumerate() {
        let det = model.eval_detections(s, i);
        for (l, snap) in model.predict(&s.image, &det).iter().enumerate() {
            per_layer[l].push(sample_metrics(&model.asset, s, &snap.vertices, &snap.joints3d));
        }
    }
    let layers: Vec<EvalResult> = per_layer.into_iter().map(EvalResult::from_samples).collect();
    EvalReport {
        result: layers.last().cloned().unwrap_or_default(),
        layers,
    }
}

/// `v x y z` per vertex then `f i j k` per face, 1-based indices.
pub fn mesh_text(vertices: &Tensor, faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for r in 0..vertices.rows() {
        let v = vertices.row_slice(r);
        writeln!(s, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]).unwrap();
    }
    for f in faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

/// How `infer` obtains body parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Network prediction from the image.
    Net,
    /// The sample's ground-truth parameters, bypassing the network.
    Gt,
}

pub fn mesh_file_name(id: &str) -> String {
    format!("{id}.mesh.txt")
}

pub fn infer(model: &Model, samples: &[SynthSample], mode: InferMode, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let vertices = match mode {
            InferMode::Gt => model.asset.mesh(&s.params),
            InferMode::Net => {
                let det = model.eval_detections(s, i);
                model.predict(&s.image, &det).pop().expect("at least one snapshot").vertices
            }
        };
        fs::write(dir.join(mesh_file_name(&s.id)), mesh_text(&vertices, &model.asset.faces))?;
    }
    Ok(())
}

/// The mesh of explicit parameters, for callers without samples.
pub fn mesh_of(asset: &BodyAsset, params: &BodyParams) -> String {
    mesh_text(&asset.mesh(params), &asset.faces)
}

pub fn attention_file_name(id: &str) -> String {
    format!("attention_{id}.jtrk")
}

/// Final-round joint embeddings of every sample, with class labels.
pub fn collect_embeddings(model: &Model, samples: &[SynthSample]) -> Result<(Tensor, Vec<usize>), EvalError> {
    if !model.uses_3d() {
        return Err(EvalError::NoEmbeddings);
    }
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    let mut c = 0;
    for (i, s) in samples.iter().enumerate() {
        let g = Graph::new();
        let p = Binder::new(&g, &model.store, false);
        let det = model.eval_detections(s, i);
        let fwd = model.forward(&p, &s.image, &det);
        let h3d = fwd.h3d.expect("3D features enabled");
        let joints = fwd.fusion.snapshots.last().expect("snapshots").joints;
        let e = joint_embeddings(h3d, model.lifting.dims, joints, fwd.lambda).value();
        c = e.cols();
        rows.extend_from_slice(e.data());
        classes.extend(0..e.rows());
    }
    Ok((Tensor::from_vec(&[classes.len(), c], rows), classes))
}

/// Attention archives per sample, the 2D/3D mass split, the embedding
/// archive and its report.
pub fn export(model: &Model, samples: &[SynthSample], dir: &Path) -> Result<Option<EmbeddingReport>, EvalError> {
    fs::create_dir_all(dir)?;
    let mut split = String::from("id layer mass_2d mass_3d\n");
    for (i, s) in samples.iter().enumerate() {
        let g = Graph::new();
        let p = Binder::new(&g, &model.store, false);
        let det = model.eval_detections(s, i);
        let fwd = model.forward(&p, &s.image, &det);
        let att = &fwd.fusion.attention;
        attention_archive(att).write(dir.join(attention_file_name(&s.id)))?;
        for (l, a) in att.iter().enumerate() {
            let (m2, m3) = mass_split(a, fwd.fusion.keys_2d);
            writeln!(split, "{} {l} {m2:.6} {m3:.6}", s.id).unwrap();
        }
    }
    fs::write(dir.join(ATTENTION_SPLIT), split)?;
    if !model.uses_3d() {
        log::warn!("3D features disabled; skipping the embedding export");
        return Ok(None);
    }
    let (emb, classes) = collect_embeddings(model, samples)?;
    let mut a = Archive::new();
    a.push("embeddings", emb.clone(), Dtype::F64);
    a.push(
        "classes",
        Tensor::from_vec(&[classes.len(), 1], classes.iter().map(|&c| c as f64).collect()),
        Dtype::F64,
    );
    a.write(dir.join(EMBEDDINGS))?;
    let report = embedding_report(&emb, &classes);
    fs::write(dir.join(EMBEDDING_REPORT), report.to_text())?;
    Ok(Some(report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_text_format() {
        let v = Tensor::from_vec(&[3, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let t = mesh_text(&v, &[[0, 1, 2]]);
        assert_eq!(
            t,
            "v 0.000000000 0.000000000 0.000000000\nv 1.000000000 0.000000000 0.000000000\n\
             v 0.000000000 1.000000000 0.000000000\nf 1 2 3\n"
        );
    }
}
