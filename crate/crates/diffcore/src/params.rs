//! Named learnable tensors, their binding onto a tape, and AdamW.

use std::collections::HashMap;

use crate::archive::{Archive, ArchiveError, Dtype};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Insertion-ordered parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_archive(&self, dtype: Dtype) -> Archive {
        let mut a = Archive::new();
        for p in &self.params {
            a.push(p.name.clone(), p.value.clone(), dtype);
        }
        a
    }

    /// Overwrites every parameter with the same-named archive entry.
    pub fn load_archive(&mut self, archive: &Archive) -> Result<(), ArchiveError> {
        for p in &mut self.params {
            let t = archive.require(&p.name)?;
            if t.dims() != p.value.dims() {
                return Err(ArchiveError::Shape {
                    name: p.name.clone(),
                    source: crate::error::ShapeError::Mismatch {
                        op: "load",
                        left: p.value.dims().to_vec(),
                        right: t.dims().to_vec(),
                    },
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Parameters of a store recorded as leaves on one graph.
pub struct Binder<'g> {
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
}

impl<'g> Binder<'g> {
    /// `trainable = false` binds everything as constants (inference).
    pub fn new(graph: &'g Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        Self { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Gradient of every parameter, zeros where none flowed.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let decay = if p.decay { c.lr * c.weight_decay } else { 0.0 };
            for ((x, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads[k].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= decay * *x;
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Global gradient norm, for logging and clipping.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    n
}
