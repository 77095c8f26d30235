//! Named parameter tensors, graph binding, and the Adam optimiser.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Adds every parameter to `g` as a leaf; names in `frozen` become
    /// constants.
    pub fn bind(&self, g: &mut Graph<F>, frozen: &BTreeSet<String>) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| if frozen.contains(n) { g.constant(t.clone()) } else { g.param(t.clone()) })
            .collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Gradients for every parameter (zeros where none flowed).
    pub fn collect_grads(&self, bound: &Bound, grads: &Grads<F>) -> Vec<Vec<F>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| grads.get(*v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); t.len()]))
            .collect()
    }

    /// Copies values from `other` for every name both stores share with
    /// equal shapes; returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore<F>) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, t) in other.iter() {
            if let Some(dst) = self.get_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    copied.push(name.to_string());
                }
            }
        }
        copied
    }
}

/// Parameter name → graph variable for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn init_normal<F: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(std * z)
        })
        .collect();
    Tensor::new(data, shape).unwrap()
}

/// Fan-in scaled normal init for a `[fan_in, fan_out]` matrix.
pub fn init_linear<F: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    init_normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = params.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn matches(&self, params: &ParamStore<F>) -> bool {
        self.m.len() == params.len() && params.iter().zip(&self.m).all(|((_, t), m)| t.len() == m.len())
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[Vec<F>], cfg: &AdamConfig) -> Result<f64> {
        if grads.len() != params.len() || !self.matches(params) {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        let norm = grads.iter().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = F::of(cfg.lr);
        for (k, t) in params.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads[k][i].f64() * clip;
                let mi = b1 * m[i].f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].f64() + (1.0 - b2) * g * g;
                m[i] = F::of(mi);
                v[i] = F::of(vi);
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                *p = *p - lr * F::of(upd);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("x", Tensor::new(vec![3.0, -2.0], &[2]).unwrap());
        let mut opt = Adam::new(&ps);
        let cfg = AdamConfig { lr: 0.1, clip_norm: 0.0, ..Default::default() };
        for _ in 0..500 {
            let x = ps.get("x").unwrap().data().to_vec();
            let g = vec![x.iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
            opt.update(&mut ps, &g, &cfg).unwrap();
        }
        assert!(ps.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("w", Tensor::full(&[3], 0.5));
        let before = ps.clone();
        let mut opt = Adam::new(&ps);
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        opt.update(&mut ps, &[vec![1.0, -1.0, 2.0]], &cfg).unwrap();
        assert_eq!(ps.get("w"), before.get("w"));
    }

    #[test]
    fn frozen_names_bind_as_constants() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("a", Tensor::full(&[1], 1.0));
        ps.insert("b", Tensor::full(&[1], 1.0));
        let mut g = Graph::new(true);
        let frozen: BTreeSet<String> = ["b".to_string()].into();
        let bound = ps.bind(&mut g, &frozen);
        assert!(g.needs_grad(bound.get("a")));
        assert!(!g.needs_grad(bound.get("b")));
    }
}
