//! Named parameter storage and the per-forward binding of parameters onto
//! a tape.

use std::fmt;

use crate::autograd::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Accounting bucket a parameter (and the compute using it) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Rfa,
    SmallConv,
    Ffn,
    StemDownsample,
    Head,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Rfa,
        Category::SmallConv,
        Category::Ffn,
        Category::StemDownsample,
        Category::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Rfa => "rfa",
            Category::SmallConv => "small_conv",
            Category::Ffn => "ffn",
            Category::StemDownsample => "stem_downsample",
            Category::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub category: Category,
    pub value: Tensor<T>,
}

/// Distribution for convolution and linear weights. Biases always start at
/// zero, LayerNorm at `gamma = 1, beta = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Truncated normal at two standard deviations.
    TruncNormal {
        std: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Uniform with variance `1 / fan_in`, where fan-in is
    /// `in_channels / groups * K * K`.
    FanIn,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::TruncNormal { std: 0.02 }
    }
}

/// Builder context: where new parameters go and how they are initialized.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
    pub weights: WeightInit,
}

impl<T: Real> Init<'_, T> {
    pub fn weight(&mut self, name: &str, category: Category, shape: Shape) -> Result<ParamId> {
        let value = match self.weights {
            WeightInit::TruncNormal { std } => Tensor::random_normal(shape, std, self.rng),
            WeightInit::Uniform { lo, hi } => Tensor::random_uniform(shape, lo, hi, self.rng),
            WeightInit::FanIn => {
                let bound = (3.0 / (shape.channels * shape.plane()) as f64).sqrt();
                Tensor::random_uniform(shape, -bound, bound, self.rng)
            }
        };
        self.store.add(name, category, value)
    }

    pub fn constant(
        &mut self,
        name: &str,
        category: Category,
        shape: Shape,
        value: f64,
    ) -> Result<ParamId> {
        self.store
            .add(name, category, Tensor::full(shape, T::from_f64(value)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, category: Category, value: Tensor<T>) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::config(name, "is registered twice"));
        }
        self.params.push(Param {
            name: name.to_owned(),
            category,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// `p <- p - lr * g` for every parameter. `grads` is aligned with the
    /// store, as returned by [`Graph::param_grads`].
    pub fn sgd_step(&mut self, grads: &[Tensor<T>], lr: T) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.value
                .axpy(-lr, g)
                .map_err(|_| Error::Shape(format!("gradient shape mismatch for `{}`", p.name)))?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    category: p.category,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// A tape together with the parameter store it reads from. Parameters are
/// placed on the tape lazily, once per forward.
pub struct Graph<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<NodeId>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::new())
    }

    /// Graph on an instrumented tape, see [`Tape::counting`].
    pub fn counting(store: &'a ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::counting())
    }

    fn with_tape(store: &'a ParamStore<T>, tape: Tape<T>) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.tape.leaf(value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let node = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(node);
        node
    }

    pub fn set_scope(&mut self, category: Category) {
        self.tape.set_scope(category.as_str());
    }

    /// Parameter gradients aligned with the store; zeros for parameters the
    /// forward never touched.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, node)| match node {
                Some(n) => grads.wrt(*n),
                None => Ok(Tensor::zeros(self.store.get(ParamId(i)).shape())),
            })
            .collect()
    }
}
