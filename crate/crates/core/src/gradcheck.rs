//! Finite-difference verification of tape gradients.
//!
//! The scalar under test is `L = <r, f(inputs)>` for a random projection
//! `r`. Tape gradients of `L` are compared against central differences
//! `(L(x + eps) - L(x - eps)) / (2 eps)`, coordinate by coordinate, using the
//! relative error `|a - b| / max(|a|, |b|, 1e-8)`.

use crate::autograd::{NodeId, Tape};
use crate::error::Result;
use crate::params::{Graph, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    /// `(analytic, numeric)` at each input's worst coordinate.
    pub worst_pairs: Vec<(f64, f64)>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Compare at most this many coordinates per input (chosen at random);
    /// `None` checks every coordinate.
    pub max_probes: Option<usize>,
    /// Inputs sampled by [`GradCheck::run`] are redrawn while `|x|` is below
    /// this threshold, keeping samples away from kinks.
    pub min_abs_input: f64,
    /// The projection `r` is redrawn (up to [`REDRAWS`] times) while any
    /// analytic coordinate is below this magnitude. Near-zero gradients come
    /// from cancellation and leave the relative error dominated by
    /// truncation and rounding in the difference quotient.
    pub min_abs_grad: f64,
}

pub const REDRAWS: usize = 64;

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self {
            eps,
            tol,
            max_probes: None,
            min_abs_input: 0.0,
            min_abs_grad: 0.0,
        }
    }

    pub fn max_probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }

    pub fn min_abs_input(mut self, v: f64) -> Self {
        self.min_abs_input = v;
        self
    }

    pub fn min_abs_grad(mut self, v: f64) -> Self {
        self.min_abs_grad = v;
        self
    }

    fn well_conditioned(&self, analytic: &[Tensor<f64>]) -> bool {
        analytic
            .iter()
            .all(|t| t.data().iter().all(|a| a.abs() >= self.min_abs_grad))
    }

    /// Samples inputs uniformly in `[-1, 1]` and checks `f`.
    pub fn run<F>(&self, shapes: &[Shape], rng: &mut Rng, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let inputs = shapes
            .iter()
            .map(|&s| {
                let data = (0..s.numel())
                    .map(|_| loop {
                        let v = rng.uniform(-1.0, 1.0);
                        if v.abs() >= self.min_abs_input {
                            break v;
                        }
                    })
                    .collect();
                Tensor::new(s, data)
            })
            .collect::<Result<Vec<_>>>()?;
        self.run_with_inputs(inputs, rng, f)
    }

    pub fn run_with_inputs<F>(
        &self,
        mut inputs: Vec<Tensor<f64>>,
        rng: &mut Rng,
        f: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let eval = |inputs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &ids)?;
            Ok((tape, ids, out))
        };

        let (tape, ids, out) = eval(&inputs)?;
        let mut attempt = 0;
        let (projection, analytic) = loop {
            let projection = Tensor::random_uniform(tape.shape(out)?, -1.0, 1.0, rng);
            let grads = tape.backward(out, &projection)?;
            let analytic: Vec<Tensor<f64>> =
                ids.iter().map(|&id| grads.wrt(id)).collect::<Result<_>>()?;
            attempt += 1;
            if attempt >= REDRAWS || self.well_conditioned(&analytic) {
                break (projection, analytic);
            }
        };
        drop(tape);

        let loss = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let (tape, _, out) = eval(inputs)?;
            tape.value(out)?.dot(&projection)
        };
        self.compare(&mut inputs, &analytic, rng, loss)
    }

    /// Checks a parameterized module: the gradient of `f` with respect to
    /// its input and to every parameter of `store`. `per_input[0]` is the
    /// input; the rest follow store order.
    pub fn run_module<F>(
        &self,
        store: &ParamStore<f64>,
        input: Tensor<f64>,
        rng: &mut Rng,
        f: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>,
    {
        let (projection, analytic) = {
            let mut g = Graph::new(store);
            let x = g.input(input.clone());
            let out = f(&mut g, x)?;
            let projection = Tensor::random_uniform(g.tape.shape(out)?, -1.0, 1.0, rng);
            let grads = g.tape.backward(out, &projection)?;
            let mut analytic = vec![grads.wrt(x)?];
            analytic.extend(g.param_grads(&grads)?);
            (projection, analytic)
        };
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let mut tensors = vec![input];
        tensors.extend(store.iter().map(|(_, p)| p.value.clone()));
        let loss = |ts: &[Tensor<f64>]| -> Result<f64> {
            let mut s = store.clone();
            for (&id, t) in ids.iter().zip(&ts[1..]) {
                *s.get_mut(id) = t.clone();
            }
            let mut g = Graph::new(&s);
            let x = g.input(ts[0].clone());
            let out = f(&mut g, x)?;
            g.tape.value(out)?.dot(&projection)
        };
        self.compare(&mut tensors, &analytic, rng, loss)
    }

    fn compare<L>(
        &self,
        inputs: &mut [Tensor<f64>],
        analytic: &[Tensor<f64>],
        rng: &mut Rng,
        loss: L,
    ) -> Result<GradCheckReport>
    where
        L: Fn(&[Tensor<f64>]) -> Result<f64>,
    {
        let mut per_input = Vec::with_capacity(inputs.len());
        let mut worst_pairs = Vec::with_capacity(inputs.len());
        let mut checked = 0;
        for k in 0..inputs.len() {
            let n = inputs[k].numel();
            let coords: Vec<usize> = match self.max_probes {
                Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
                _ => (0..n).collect(),
            };
            let mut worst = 0.0f64;
            let mut pair = (0.0, 0.0);
            for i in coords {
                let orig = inputs[k].data()[i];
                inputs[k].data_mut()[i] = orig + self.eps;
                let plus = loss(inputs)?;
                inputs[k].data_mut()[i] = orig - self.eps;
                let minus = loss(inputs)?;
                inputs[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let err = relative_error(analytic[k].data()[i], numeric);
                if err >= worst {
                    worst = err;
                    pair = (analytic[k].data()[i], numeric);
                }
                checked += 1;
            }
            per_input.push(worst);
            worst_pairs.push(pair);
        }
        let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
        Ok(GradCheckReport {
            max_rel_err,
            pass: max_rel_err <= self.tol,
            checked,
            per_input,
            worst_pairs,
        })
    }
}
