//! Named parameter storage and the per-graph binding context.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_parts(rows, cols, data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let src = other.get(j);
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

/// Binds parameters into one graph on first use.
///
/// In training mode parameters become gradient-taking leaves; otherwise
/// they are constants and the forward pass records no gradient state.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn inference(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            g,
            bound: vec![None; store.len()],
            store,
            trainable: false,
            dropout_rng: None,
        }
    }

    pub fn trainable(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            trainable: true,
            ..Self::inference(g, store)
        }
    }

    /// Uses caller-provided leaves in place of the stored parameters, in
    /// store order. Used by gradient checks.
    pub fn prebound(g: &'a mut Graph<T>, store: &'a ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self {
            g,
            bound: vars.iter().copied().map(Some).collect(),
            store,
            trainable: true,
            dropout_rng: None,
        }
    }

    /// Enables inverted dropout driven by `rng`.
    pub fn with_dropout(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.g.leaf(value, self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity unless a dropout RNG is attached.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = self.g.shape(x);
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = (0..r * c)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = self.g.constant(Tensor::from_parts(r, c, mask));
        self.g.mul(x, m)
    }

    /// Gradients of every parameter bound in this graph, in store order.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v)))
            .collect()
    }
}
