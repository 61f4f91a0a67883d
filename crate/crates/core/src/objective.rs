//! L1 supervision and the learned-uncertainty weighted total loss.

use std::fmt;

use diffcore::{Binder, Graph, ParamId, ParamStore, Tensor, Var};

use crate::body_model::PELVIS;
use crate::config::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    L3d,
    L2d,
    Smpl,
    J2n,
    J2j,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::L3d, Term::L2d, Term::Smpl, Term::J2n, Term::J2j];

    pub fn name(self) -> &'static str {
        match self {
            Term::L3d => "l3d",
            Term::L2d => "l2d",
            Term::Smpl => "lsmpl",
            Term::J2n => "j2n",
            Term::J2j => "j2j",
        }
    }

    pub fn enabled(self, cfg: &LossConfig) -> bool {
        match self {
            Term::L3d => cfg.l3d,
            Term::L2d => cfg.l2d,
            Term::Smpl => cfg.lsmpl,
            Term::J2n => cfg.j2n,
            Term::J2j => cfg.j2j,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One snapshot's predictions for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Prediction<'g> {
    pub theta: Var<'g>,
    pub beta: Var<'g>,
    /// Regressed evaluation joints, `17 x 3`, body units.
    pub joints3d: Var<'g>,
    /// Projected joints, `17 x 2`, normalized image units.
    pub joints2d: Var<'g>,
    /// `J'` in grid coordinates.
    pub grid: Var<'g>,
}

/// Ground truth for one sample. Missing annotations are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub theta: Tensor,
    pub beta: Tensor,
    pub joints3d: Tensor,
    pub joints2d: Tensor,
    pub grid: Tensor,
    pub has_3d: bool,
    pub has_smpl: bool,
}

/// Supervision terms; `None` marks a term with no annotated sample.
#[derive(Debug, Clone, Copy)]
pub struct L1Terms<'g> {
    pub l3d: Option<Var<'g>>,
    pub l2d: Option<Var<'g>>,
    pub smpl: Option<Var<'g>>,
}

fn l1<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    (a - b).abs().mean()
}

fn root_relative<'g>(j: Var<'g>) -> Var<'g> {
    j - j.row(PELVIS)
}

fn mean_of<'g>(xs: &[Var<'g>]) -> Option<Var<'g>> {
    let first = *xs.first()?;
    let sum = xs[1..].iter().fold(first, |acc, &x| acc + x);
    Some(sum.scale(1.0 / xs.len() as f64))
}

/// Per-batch L1 terms. `L_3D` averages the root-relative joint error and
/// the grid joint error.
pub fn l1_terms<'g>(g: &'g Graph, preds: &[Prediction<'g>], targets: &[&Target]) -> L1Terms<'g> {
    assert_eq!(preds.len(), targets.len());
    let (mut t3, mut t2, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for (p, t) in preds.iter().zip(targets) {
        t2.push(l1(p.joints2d, g.constant(t.joints2d.clone())));
        if t.has_3d {
            let gt = root_relative(g.constant(t.joints3d.clone()));
            let joint = l1(root_relative(p.joints3d), gt);
            let grid = l1(p.grid, g.constant(t.grid.clone()));
            t3.push((joint + grid).scale(0.5));
        }
        if t.has_smpl {
            ts.push(l1(p.theta, g.constant(t.theta.clone())) + l1(p.beta, g.constant(t.beta.clone())));
        }
    }
    L1Terms {
        l3d: mean_of(&t3),
        l2d: mean_of(&t2),
        smpl: mean_of(&ts),
    }
}

/// Equal-weight average of the terms over refinement snapshots.
pub fn average_snapshots<'g>(per_snapshot: &[L1Terms<'g>]) -> L1Terms<'g> {
    let collect = |f: fn(&L1Terms<'g>) -> Option<Var<'g>>| {
        let xs: Vec<Var<'g>> = per_snapshot.iter().filter_map(f).collect();
        mean_of(&xs)
    };
    L1Terms {
        l3d: collect(|t| t.l3d),
        l2d: collect(|t| t.l2d),
        smpl: collect(|t| t.smpl),
    }
}

/// Learnable log-variances `s_i`, one per enabled term.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub ids: Vec<(Term, ParamId)>,
}

impl LossWeights {
    pub fn new(store: &mut ParamStore, cfg: &LossConfig) -> Self {
        let ids = Term::ALL
            .into_iter()
            .filter(|t| t.enabled(cfg))
            .map(|t| (t, store.add(format!("loss.s.{t}"), Tensor::scalar(0.0), false)))
            .collect();
        Self { ids }
    }

    pub fn id(&self, term: Term) -> Option<ParamId> {
        self.ids.iter().find(|(t, _)| *t == term).map(|p| p.1)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Term values of one step.
#[derive(Debug, Clone, Default)]
pub struct LossBundle<'g> {
    pub terms: Vec<(Term, Var<'g>)>,
}

impl<'g> LossBundle<'g> {
    pub fn push(&mut self, term: Term, value: Option<Var<'g>>) {
        match value {
            Some(v) => self.terms.push((term, v)),
            None => log::debug!("loss term {term} has no annotated sample this step"),
        }
    }

    pub fn get(&self, term: Term) -> Option<Var<'g>> {
        self.terms.iter().find(|(t, _)| *t == term).map(|p| p.1)
    }
}

/// `Σ exp(-s_i) L_i + s_i` over terms that are both enabled and present.
pub fn total_loss<'g>(p: &Binder<'g>, weights: &LossWeights, bundle: &LossBundle<'g>) -> Var<'g> {
    let mut total = p.graph().scalar(0.0);
    for &(term, value) in &bundle.terms {
        if let Some(id) = weights.id(term) {
            let s = p.var(id);
            total = total + s.neg().exp() * value + s;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> Target {
        Target {
            theta: Tensor::zeros(&[1, 6]),
            beta: Tensor::zeros(&[1, 10]),
            joints3d: Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 0.1, 0.2, 0.3]),
            joints2d: Tensor::from_vec(&[2, 2], vec![0.1, 0.2, -0.3, 0.4]),
            grid: Tensor::full(&[2, 3], 0.5),
            has_3d: true,
            has_smpl: true,
        }
    }

    fn predict<'g>(g: &'g Graph, t: &Target) -> Prediction<'g> {
        Prediction {
            theta: g.constant(t.theta.clone()),
            beta: g.constant(t.beta.clone()),
            joints3d: g.constant(t.joints3d.clone()),
            joints2d: g.constant(t.joints2d.clone()),
            grid: g.constant(t.grid.clone()),
        }
    }

    #[test]
    fn exact_prediction_is_zero() {
        let g = Graph::new();
        let t = target();
        let terms = l1_terms(&g, &[predict(&g, &t)], &[&t]);
        for v in [terms.l3d, terms.l2d, terms.smpl] {
            assert_eq!(v.unwrap().item(), 0.0);
        }
    }

    #[test]
    fn shifted_2d_joints() {
        let g = Graph::new();
        let t = target();
        let mut p = predict(&g, &t);
        p.joints2d = p.joints2d + g.constant(Tensor::from_vec(&[1, 2], vec![0.1, 0.0]));
        let l = l1_terms(&g, &[p], &[&t]).l2d.unwrap().item();
        assert!((l - 0.05).abs() < 1e-15);
    }

    #[test]
    fn unannotated_terms_are_flagged() {
        let g = Graph::new();
        let mut t = target();
        t.has_3d = false;
        t.has_smpl = false;
        let terms = l1_terms(&g, &[predict(&g, &t)], &[&t]);
        assert!(terms.l3d.is_none() && terms.smpl.is_none() && terms.l2d.is_some());
    }

    #[test]
    fn zero_log_variance_sums_terms() {
        let mut store = ParamStore::new();
        let w = LossWeights::new(&mut store, &LossConfig::default());
        assert_eq!(w.len(), 5);
        let g = Graph::new();
        let p = Binder::new(&g, &store, false);
        let mut b = LossBundle::default();
        b.push(Term::L3d, Some(g.scalar(0.3)));
        b.push(Term::L2d, Some(g.scalar(0.2)));
        b.push(Term::J2n, None);
        assert!((total_loss(&p, &w, &b).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn disabled_term_leaves_the_sum() {
        let mut store = ParamStore::new();
        let cfg = LossConfig {
            j2j: false,
            ..LossConfig::default()
        };
        let w = LossWeights::new(&mut store, &cfg);
        assert_eq!(w.len(), 4);
        assert!(w.id(Term::J2j).is_none());
        assert!(store.id("loss.s.j2j").is_none());
    }
}
