//! Joint contrastive losses over ℓ2-normalized 3D joint embeddings:
//! joint-to-non-joint (other predicted joints vs. unused voxels) and
//! joint-to-joint (same-class ground truth vs. other-class predictions).

use std::fmt::Write as _;

use diffcore::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{Budget, ContrastConfig};
use crate::fusion::{contribution_mask, trilinear_sample};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ContrastError {
    #[error("every voxel contributes to a joint embedding; no negatives")]
    NoNegatives,
    #[error("need at least 2 predicted joints, got {0}")]
    TooFewJoints(usize),
}

/// Where an embedding row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JointLabel {
    pub image: usize,
    pub class: usize,
}

/// Anchors index the anchor matrix; positives and negatives index the
/// positive and negative matrices handed to [`batch_nce`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    pub tau: f64,
}

impl ContrastBatch {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `amount` draws from `0..population`: distinct when the population is
/// large enough, with replacement otherwise.
pub fn draw(rng: &mut ChaCha8Rng, population: usize, amount: usize, what: &str) -> Vec<usize> {
    if population == 0 || amount == 0 {
        return Vec::new();
    }
    if population >= amount {
        rand::seq::index::sample(rng, population, amount).into_vec()
    } else {
        log::debug!("{what}: {amount} draws from {population}, sampling with replacement");
        (0..amount).map(|_| rng.random_range(0..population)).collect()
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, pool: &[T], amount: usize, what: &str) -> Vec<T> {
    draw(rng, pool.len(), amount, what).into_iter().map(|i| pool[i]).collect()
}

/// Joint-to-non-joint batch. Anchors and positives index the predicted
/// joints; negatives index a pool of `voxels` unmarked voxel embeddings.
pub fn sample_j2n(
    predicted: &[JointLabel],
    voxels: usize,
    budget: Budget,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastBatch, ContrastError> {
    let n = predicted.len();
    if n < 2 {
        return Err(ContrastError::TooFewJoints(n));
    }
    if voxels == 0 {
        return Err(ContrastError::NoNegatives);
    }
    let anchors = draw(rng, n, budget.anchors, "j2n anchors");
    let mut positives = Vec::with_capacity(anchors.len());
    let mut negatives = Vec::with_capacity(anchors.len());
    for &a in &anchors {
        let pool: Vec<usize> = (0..n).filter(|&i| i != a).collect();
        positives.push(pick(rng, &pool, budget.positives, "j2n positives"));
        negatives.push(draw(rng, voxels, budget.negatives, "j2n negatives"));
    }
    Ok(ContrastBatch {
        anchors,
        positives,
        negatives,
        tau,
    })
}

/// Joint-to-joint batch. Anchors and negatives index the predicted joints;
/// positives index the ground-truth joints. Anchors of a class without
/// ground truth in the batch are dropped.
pub fn sample_j2j(
    predicted: &[JointLabel],
    ground_truth: &[JointLabel],
    budget: Budget,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> ContrastBatch {
    let candidates: Vec<usize> = (0..predicted.len())
        .filter(|&i| ground_truth.iter().any(|g| g.class == predicted[i].class))
        .collect();
    let skipped = predicted.len() - candidates.len();
    if skipped > 0 {
        log::debug!("j2j: {skipped} predicted joints have no ground truth of their class");
    }
    let anchors = pick(rng, &candidates, budget.anchors, "j2j anchors");
    let mut positives = Vec::with_capacity(anchors.len());
    let mut negatives = Vec::with_capacity(anchors.len());
    for &a in &anchors {
        let class = predicted[a].class;
        let pos: Vec<usize> = (0..ground_truth.len()).filter(|&i| ground_truth[i].class == class).collect();
        let neg: Vec<usize> = (0..predicted.len()).filter(|&i| predicted[i].class != class).collect();
        positives.push(pick(rng, &pos, budget.positives, "j2j positives"));
        negatives.push(pick(rng, &neg, budget.negatives, "j2j negatives"));
    }
    ContrastBatch {
        anchors,
        positives,
        negatives,
        tau,
    }
}

fn lse_shift(values: impl Iterator<Item = f64> + Clone) -> f64 {
    values.fold(f64::NEG_INFINITY, f64::max)
}

/// InfoNCE from precomputed similarities: `sp` is anchors x positives,
/// `sn` anchors x negatives (rows follow `batch.anchors` order). Averaged
/// over positives, then over anchors that have any.
pub fn batch_nce<'g>(sp: Var<'g>, sn: Var<'g>, batch: &ContrastBatch) -> Var<'g> {
    let spv = sp.value();
    let snv = sn.value();
    let m = batch.anchors.len();
    assert_eq!(spv.rows(), m);
    assert_eq!(snv.rows(), m);
    let tau = batch.tau;
    let counted = batch.positives.iter().filter(|p| !p.is_empty()).count();
    if counted < m {
        log::debug!("info_nce: {} anchors without positives skipped", m - counted);
    }
    let mut total = 0.0;
    for a in 0..m {
        let pos = &batch.positives[a];
        if pos.is_empty() {
            continue;
        }
        let (prow, nrow) = (spv.row_slice(a), snv.row_slice(a));
        let neg = &batch.negatives[a];
        let zn = neg.iter().map(|&n| nrow[n] / tau);
        let zp = pos.iter().map(|&p| prow[p] / tau);
        let shift = lse_shift(zn.clone().chain(zp.clone()));
        let sum_neg: f64 = zn.map(|z| (z - shift).exp()).sum();
        let mut acc = 0.0;
        for z in zp {
            acc += ((z - shift).exp() + sum_neg).ln() + shift - z;
        }
        total += acc / pos.len() as f64;
    }
    let value = if counted == 0 { 0.0 } else { total / counted as f64 };
    let owned = batch.clone();
    sp.graph().custom(
        &[sp, sn],
        Tensor::scalar(value),
        Box::new(move |ctx| {
            let g = ctx.grad.item();
            let (spv, snv) = (&ctx.inputs[0], &ctx.inputs[1]);
            let mut dsp = Tensor::zeros(spv.dims());
            let mut dsn = Tensor::zeros(snv.dims());
            if counted == 0 {
                return vec![Some(dsp), Some(dsn)];
            }
            let tau = owned.tau;
            for a in 0..owned.anchors.len() {
                let pos = &owned.positives[a];
                if pos.is_empty() {
                    continue;
                }
                let neg = &owned.negatives[a];
                let (prow, nrow) = (spv.row_slice(a), snv.row_slice(a));
                let zn: Vec<f64> = neg.iter().map(|&n| nrow[n] / tau).collect();
                let zp: Vec<f64> = pos.iter().map(|&p| prow[p] / tau).collect();
                let shift = lse_shift(zn.iter().chain(&zp).copied());
                let en: Vec<f64> = zn.iter().map(|z| (z - shift).exp()).collect();
                let sum_neg: f64 = en.iter().sum();
                let w = g / (pos.len() * counted) as f64 / tau;
                let pc = spv.cols();
                let nc = snv.cols();
                let mut inv = 0.0;
                for (&p, &z) in pos.iter().zip(&zp) {
                    let ep = (z - shift).exp();
                    let denom = ep + sum_neg;
                    dsp.data_mut()[a * pc + p] += w * (ep / denom - 1.0);
                    inv += 1.0 / denom;
                }
                for (&n, e) in neg.iter().zip(&en) {
                    dsn.data_mut()[a * nc + n] += w * e * inv;
                }
            }
            vec![Some(dsp), Some(dsn)]
        }),
    )
}

/// Single-anchor InfoNCE over all rows of `positives` and `negatives`.
pub fn info_nce<'g>(anchor: Var<'g>, positives: Var<'g>, negatives: Option<Var<'g>>, tau: f64) -> Var<'g> {
    let (sn, nn) = match negatives {
        Some(n) => (anchor.matmul_t(n), n.rows()),
        None => (anchor.graph().constant(Tensor::zeros(&[1, 1])), 0),
    };
    let batch = ContrastBatch {
        anchors: vec![0],
        positives: vec![(0..positives.rows()).collect()],
        negatives: vec![(0..nn).collect()],
        tau,
    };
    batch_nce(anchor.matmul_t(positives), sn, &batch)
}

/// InfoNCE over a sampled batch with embedding matrices on the tape.
pub fn contrast_loss<'g>(anchors: Var<'g>, positives: Var<'g>, negatives: Var<'g>, batch: &ContrastBatch) -> Option<Var<'g>> {
    if batch.is_empty() {
        return None;
    }
    let a = anchors.gather_rows(&batch.anchors);
    Some(batch_nce(a.matmul_t(positives), a.matmul_t(negatives), batch))
}

/// Per-image inputs to the contrastive terms.
pub struct ImageJoints<'g> {
    pub h3d: Var<'g>,
    /// Predicted `J'` of the contrast round, `N_j x 3`.
    pub predicted: Var<'g>,
    /// Ground-truth grid coordinates when the sample has 3D labels.
    pub ground_truth: Option<Tensor>,
}

#[derive(Default)]
pub struct ContrastTerms<'g> {
    pub j2n: Option<Var<'g>>,
    pub j2j: Option<Var<'g>>,
}

/// ℓ2-normalized embeddings sampled at grid points.
pub fn joint_embeddings<'g>(h3d: Var<'g>, dims: [usize; 3], points: Var<'g>, lambda: Var<'g>) -> Var<'g> {
    trilinear_sample(h3d, dims, points, lambda).l2_normalize(NORM_EPS)
}

/// Both contrastive terms for a batch; disabled terms stay `None`.
pub fn joint_contrast<'g>(
    g: &'g Graph,
    images: &[ImageJoints<'g>],
    dims: [usize; 3],
    lambda: Var<'g>,
    cfg: &ContrastConfig,
    (use_j2n, use_j2j): (bool, bool),
    rng: &mut ChaCha8Rng,
) -> Result<ContrastTerms<'g>, ContrastError> {
    let mut out = ContrastTerms::default();
    if images.is_empty() || !(use_j2n || use_j2j) {
        return Ok(out);
    }
    let lam = lambda.value().item();
    let mut pred = Vec::new();
    let mut pred_labels = Vec::new();
    for (b, im) in images.iter().enumerate() {
        pred.push(joint_embeddings(im.h3d, dims, im.predicted, lambda));
        pred_labels.extend((0..im.predicted.rows()).map(|c| JointLabel { image: b, class: c }));
    }
    let pred = Var::concat_rows(&pred);
    if use_j2n {
        let mut voxels = Vec::new();
        for im in images {
            let mask = contribution_mask(dims, &im.predicted.value(), lam);
            let free: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
            if free.is_empty() {
                continue;
            }
            let mut h = im.h3d.gather_rows(&free).l2_normalize(NORM_EPS);
            if cfg.detach_negatives {
                h = h.detach();
            }
            voxels.push(h);
        }
        let pool = voxels.iter().map(|v| v.rows()).sum();
        let batch = sample_j2n(&pred_labels, pool, cfg.j2n(), cfg.tau, rng)?;
        out.j2n = contrast_loss(pred, pred, Var::concat_rows(&voxels), &batch);
    }
    if use_j2j {
        let mut gt = Vec::new();
        let mut gt_labels = Vec::new();
        for (b, im) in images.iter().enumerate() {
            if let Some(t) = &im.ground_truth {
                let mut e = joint_embeddings(im.h3d, dims, g.constant(t.clone()), lambda);
                if cfg.detach_gt {
                    e = e.detach();
                }
                gt.push(e);
                gt_labels.extend((0..t.rows()).map(|c| JointLabel { image: b, class: c }));
            }
        }
        if !gt.is_empty() {
            let batch = sample_j2j(&pred_labels, &gt_labels, cfg.j2j(), cfg.tau, rng);
            let negatives = if cfg.detach_negatives { pred.detach() } else { pred };
            out.j2j = contrast_loss(pred, Var::concat_rows(&gt), negatives, &batch);
        } else {
            log::debug!("j2j: no ground-truth joints in batch");
        }
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = diffcore::dot(a, a).sqrt();
    let nb = diffcore::dot(b, b).sqrt();
    diffcore::dot(a, b) / (na * nb).max(NORM_EPS)
}

/// Cluster statistics of labelled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingReport {
    pub classes: Vec<usize>,
    /// Cosine between class centroids, `classes x classes`.
    pub centroid_cosine: Tensor,
    /// Mean cosine over same-class pairs; `None` without such pairs.
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

impl EmbeddingReport {
    /// `intra - inter`, treating a missing intra value as 0.
    pub fn gap(&self) -> f64 {
        self.intra.unwrap_or(0.0) - self.inter.unwrap_or(0.0)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        writeln!(s, "intra_class_cosine {}", fmt(self.intra)).unwrap();
        writeln!(s, "inter_class_cosine {}", fmt(self.inter)).unwrap();
        writeln!(s, "gap {:.6}", self.gap()).unwrap();
        writeln!(s, "centroid_cosine").unwrap();
        for (r, c) in self.classes.iter().enumerate() {
            write!(s, "{c:>3}").unwrap();
            for v in self.centroid_cosine.row_slice(r) {
                write!(s, " {v:>7.3}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn embedding_report(embeddings: &Tensor, classes: &[usize]) -> EmbeddingReport {
    let n = embeddings.rows();
    assert_eq!(n, classes.len());
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(embeddings.row_slice(i), embeddings.row_slice(j));
            if classes[i] == classes[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    let mut uniq: Vec<usize> = classes.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let dim = embeddings.cols();
    let centroids: Vec<Vec<f64>> = uniq
        .iter()
        .map(|&c| {
            let mut acc = vec![0.0; dim];
            for i in (0..n).filter(|&i| classes[i] == c) {
                for (a, v) in acc.iter_mut().zip(embeddings.row_slice(i)) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let k = uniq.len();
    let mut mat = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            mat[a * k + b] = cosine(&centroids[a], &centroids[b]);
        }
    }
    EmbeddingReport {
        classes: uniq,
        centroid_cosine: Tensor::from_vec(&[k, k], mat),
        intra: (ni > 0).then(|| intra / ni as f64),
        inter: (nx > 0).then(|| inter / nx as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn labels(images: usize, joints: usize) -> Vec<JointLabel> {
        (0..images)
            .flat_map(|image| (0..joints).map(move |class| JointLabel { image, class }))
            .collect()
    }

    #[test]
    fn one_positive_no_negatives_is_zero() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let p = g.constant(Tensor::from_vec(&[1, 2], vec![0.6, 0.8]));
        assert_eq!(info_nce(a, p, None, 0.07).item(), 0.0);
    }

    #[test]
    fn equal_similarities_give_log_count() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let p = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let n = g.constant(Tensor::from_vec(&[2048, 2], [1.0, 0.0].repeat(2048)));
        for tau in [0.07, 1.0] {
            let l = info_nce(a, p, Some(n), tau).item();
            assert!((l - 2049f64.ln()).abs() < 1e-9);
        }
        assert_eq!(format!("{:.4}", 2049f64.ln()), "7.6251");
    }

    #[test]
    fn j2n_pool_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_j2n(&labels(1, 17), 5, Budget { anchors: 4, positives: 16, negatives: 3 }, 0.07, &mut rng).unwrap();
        for (a, p) in b.anchors.iter().zip(&b.positives) {
            let mut p = p.clone();
            p.sort_unstable();
            p.dedup();
            assert_eq!(p.len(), 16);
            assert!(!p.contains(a));
        }
        assert_eq!(
            sample_j2n(&labels(1, 17), 0, Budget { anchors: 1, positives: 1, negatives: 1 }, 0.07, &mut rng),
            Err(ContrastError::NoNegatives)
        );
    }

    #[test]
    fn j2j_negatives_never_share_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = labels(2, 17);
        let b = sample_j2j(&pred, &labels(2, 17), Budget { anchors: 30, positives: 2, negatives: 40 }, 0.07, &mut rng);
        for (i, &a) in b.anchors.iter().enumerate() {
            assert!(b.negatives[i].iter().all(|&n| pred[n].class != pred[a].class));
            let mut p = b.positives[i].clone();
            p.sort_unstable();
            assert_eq!(p.len(), 2);
            assert_ne!(p[0], p[1]);
        }
    }

    #[test]
    fn report_orthogonal_and_duplicates() {
        let r = embedding_report(&Tensor::eye(3), &[0, 1, 2]);
        assert_eq!(r.intra, None);
        assert_eq!(r.inter, Some(0.0));
        let e = Tensor::from_vec(&[2, 2], vec![0.6, 0.8, 0.6, 0.8]);
        let r = embedding_report(&e, &[5, 5]);
        assert!((r.intra.unwrap() - 1.0).abs() < 1e-15);
        assert!(r.to_text().contains("inter_class_cosine absent"));
    }
}
