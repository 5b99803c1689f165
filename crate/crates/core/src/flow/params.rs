use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use revealtoy_tensor::{Element, Graph, Tensor, Var};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Named model tensors. Iteration order is the sorted name order, which
/// fixes the order of every parameter-wise loop (optimizer, checkpoint).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameters bound into one graph, looked up by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Shape and initial scale of one parameter. `std == 0` means zeros.
struct Spec {
    name: String,
    shape: Vec<usize>,
    std: f64,
}

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.dim;
    let td = cfg.token_dim();
    let h = d * cfg.mlp_ratio;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, std: f64| out.push(Spec { name, shape, std });
    let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    push("text_emb".into(), vec![cfg.k_text, d], 1.0);
    push("role_emb".into(), vec![2, d], 1.0);
    push("cond_in.w".into(), vec![td, d], lin(td));
    push("cond_in.b".into(), vec![d], 0.0);
    push("img_in.w".into(), vec![td, d], lin(td));
    push("img_in.b".into(), vec![d], 0.0);
    push("time.w1".into(), vec![d, d], lin(d));
    push("time.b1".into(), vec![d], 0.0);
    push("time.w2".into(), vec![d, d], lin(d));
    push("time.b2".into(), vec![d], 0.0);
    for b in 0..cfg.blocks {
        for s in ["txt", "img"] {
            let p = format!("blocks.{b}.{s}");
            // modulation starts at zero so every block begins as the identity
            push(format!("{p}.mod.w"), vec![d, 6 * d], 0.0);
            push(format!("{p}.mod.b"), vec![6 * d], 0.0);
            push(format!("{p}.qkv.w"), vec![d, 3 * d], lin(d));
            push(format!("{p}.qkv.b"), vec![3 * d], 0.0);
            push(format!("{p}.proj.w"), vec![d, d], lin(d));
            push(format!("{p}.proj.b"), vec![d], 0.0);
            push(format!("{p}.mlp.w1"), vec![d, h], lin(d));
            push(format!("{p}.mlp.b1"), vec![h], 0.0);
            push(format!("{p}.mlp.w2"), vec![h, d], lin(h));
            push(format!("{p}.mlp.b2"), vec![d], 0.0);
        }
        if cfg.oga {
            let p = format!("blocks.{b}.oga");
            push(format!("{p}.q.w"), vec![d, d], lin(d));
            push(format!("{p}.k.w"), vec![d, d], lin(d));
            push(format!("{p}.v.w"), vec![d, d], lin(d));
            // zero output projection: the adapter starts as a pass-through
            push(format!("{p}.out.w"), vec![d, d], 0.0);
        }
    }
    push("final.mod.w".into(), vec![d, 2 * d], 0.0);
    push("final.mod.b".into(), vec![2 * d], 0.0);
    push("head.w".into(), vec![d, td], lin(d) * 0.1);
    push("head.b".into(), vec![td], 0.0);
    out
}

impl<T: Element> ParamStore<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for s in specs(cfg) {
            let n: usize = s.shape.iter().product();
            let data: Vec<T> = if s.std == 0.0 {
                vec![T::zero(); n]
            } else {
                let dist = Normal::new(0.0, s.std).expect("positive std");
                (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
            };
            tensors.insert(s.name, Tensor::new(s.shape, data)?);
        }
        Ok(ParamStore { tensors })
    }

    /// Adds `N(0, std²)` noise to every entry, including zero-initialized
    /// ones. Used to probe gradients away from the degenerate start.
    pub fn perturbed(&self, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let data = t
                    .data()
                    .iter()
                    .map(|&v| v + T::from_f64(dist.sample(rng)))
                    .collect();
                (k.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
            })
            .collect();
        ParamStore { tensors }
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let expected = specs(cfg);
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, the configuration needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for s in &expected {
            match tensors.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {
                    if !t.is_finite() {
                        return Err(Error::Checkpoint(format!("{} has non-finite entries", s.name)));
                    }
                }
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {}", s.name))),
            }
        }
        Ok(ParamStore { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            _ => Err(Error::Config(format!("cannot set parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
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

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    /// Trainable leaves in `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<Bound> {
        self.bind_with(graph, true)
    }

    /// Constant leaves, for inference without gradient bookkeeping.
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Result<Bound> {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                graph.param(t.clone())?
            } else {
                graph.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }
}
