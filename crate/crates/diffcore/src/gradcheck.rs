//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::GradCheckError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so gradients that are
/// analytically ~0 are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel error {:.3e} (tol {:.0e}) at {:?}",
            self.max_rel_error, self.tol, self.worst
        )
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `f` at `inputs` with central
/// differences of step `eps`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random projection
/// so every output element contributes.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let projection = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value();
        if !out.all_finite() {
            return Err(GradCheckError::NonFiniteBase);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9c4e);
        let scale = 1.0 / (out.len() as f64).sqrt();
        if out.len() == 1 {
            Tensor::full(out.dims(), 1.0)
        } else {
            Tensor::from_vec(
                out.dims(),
                (0..out.len())
                    .map(|_| rng.random_range(-1.0..1.0) * scale)
                    .collect(),
            )
        }
    };

    let evaluate = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value();
        out.data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = if out.requires_grad() {
            Some(g.backward_with(out, projection.clone()))
        } else {
            None
        };
        vars.iter()
            .map(|&v| match &grads {
                Some(gr) => gr.get_or_zeros(v),
                None => Tensor::zeros(v.value().dims()),
            })
            .collect()
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut num = Tensor::zeros(input.dims());
        for i in 0..input.len() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + eps;
            let fp = evaluate(&work);
            work[k].data_mut()[i] = x0 - eps;
            let fm = evaluate(&work);
            work[k].data_mut()[i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(GradCheckError::NonFinite { input: k, index: i });
            }
            let d = (fp - fm) / (2.0 * eps);
            num.data_mut()[i] = d;
            let e = rel_error(analytic[k].data()[i], d);
            if e > max_rel_error {
                max_rel_error = e;
                worst = Some((k, i));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        tol,
    })
}

/// [`grad_check`] with the default step and tolerance.
pub fn grad_check_default<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    grad_check(f, inputs, DEFAULT_EPS, DEFAULT_TOL)
}

/// Deterministic uniform random tensor, handy for building check inputs.
pub fn random_tensor(rng: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}
