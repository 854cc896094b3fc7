//! Named parameter storage and binding of parameters into a [`Graph`].

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Initialization scheme for one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered name -> tensor map. Names are stable and double as checkpoint keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T> Default for Params<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut params = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(spec.shape.clone(), |_| {
                        T::from_f64_lossy(rng.random_range(-bound..bound))
                    })
                }
            };
            params.insert(spec.name.clone(), t);
        }
        params
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that every spec is present with the declared shape.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.require(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Params<T>) {
        self.tensors.extend(other.tensors);
    }

    pub fn add_scaled(&mut self, other: &Self, s: T) {
        for (k, v) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(k) {
                for (a, &b) in v.data_mut().iter_mut().zip(o.data()) {
                    *a += b * s;
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Lazily lifts parameters into a graph, as trainable leaves or constants.
pub struct Binding<'a, T: Scalar> {
    graph: &'a Graph<T>,
    params: Option<&'a Params<T>>,
    trainable: bool,
    vars: RefCell<HashMap<String, Var>>,
}

impl<'a, T: Scalar> Binding<'a, T> {
    pub fn trainable(graph: &'a Graph<T>, params: &'a Params<T>) -> Self {
        Self::build(graph, params, true)
    }

    pub fn frozen(graph: &'a Graph<T>, params: &'a Params<T>) -> Self {
        Self::build(graph, params, false)
    }

    fn build(graph: &'a Graph<T>, params: &'a Params<T>, trainable: bool) -> Self {
        Self {
            graph,
            params: Some(params),
            trainable,
            vars: RefCell::new(HashMap::new()),
        }
    }

    /// Binding over nodes that already exist in `graph`, e.g. leaves created
    /// by a gradient check.
    pub fn from_vars(graph: &'a Graph<T>, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            graph,
            params: None,
            trainable: true,
            vars: RefCell::new(vars.into_iter().collect()),
        }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?
            .require(name)?
            .clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every bound parameter; parameters never touched by the
    /// forward pass get zeros.
    pub fn grads(&self, grads: &mut Grads<T>) -> Params<T> {
        let vars = self.vars.borrow();
        let mut out = Params::new();
        let Some(params) = self.params else {
            return out;
        };
        for (name, t) in params.iter() {
            let g = vars
                .get(name)
                .and_then(|v| grads.take(*v))
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let specs = vec![
            ParamSpec::new("w", [4, 9], Init::FanInUniform { fan_in: 9 }),
            ParamSpec::new("b", [4], Init::Zeros),
            ParamSpec::new("g", [4], Init::Ones),
        ];
        let a = Params::<f32>::init(&specs, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Params::<f32>::init(&specs, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert!(a.get("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("g").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(a.num_elements(), 44);
        a.validate(&specs).unwrap();
    }

    #[test]
    fn binding_reports_missing_tensor() {
        let g = Graph::<f64>::new();
        let p = Params::new();
        let b = Binding::trainable(&g, &p);
        assert!(matches!(b.var("nope"), Err(Error::MissingTensor(_))));
    }
}
