use std::collections::BTreeMap;

use thiserror::Error;

use super::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`; step aborted")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has {got} entries, parameter has {expected}")]
    GradientShape { name: String, expected: usize, got: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on `tape`. Names in `trainable` (all when `None`)
    /// become gradient-tracking leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: Option<&[&str]>) -> Result<BoundParams, TensorError> {
        self.bind_with(tape, trainable, None)
    }

    /// Like [`ParamSet::bind`] but substitutes raw `f64` values for one
    /// parameter. Used by finite-difference checks.
    pub fn bind_with(
        &self,
        tape: &mut Tape,
        trainable: Option<&[&str]>,
        substitute: Option<(&str, &[f64])>,
    ) -> Result<BoundParams, TensorError> {
        let mut bound = BoundParams::default();
        for (name, t) in &self.entries {
            let wants = trainable.map_or(true, |names| names.contains(&name.as_str()));
            let (r, c) = t.matrix_dims()?;
            let data = match substitute {
                Some((n, values)) if n == name => values.to_vec(),
                _ => t.to_f64(),
            };
            let v = tape.leaf(r, c, data, wants);
            bound.entries.push((name.clone(), v, wants));
        }
        Ok(bound)
    }
}

/// Tape handles for a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    entries: Vec<(String, Var, bool)>,
}

impl BoundParams {
    /// Handle for `name`. Panics on an unknown name: parameter names are
    /// fixed by the model definition, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, _)| *v)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, v, _)| *v)
    }

    /// Gradients of trainable parameters, keyed by name.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        let mut map = GradMap::default();
        for (name, v, trainable) in &self.entries {
            if *trainable {
                map.insert(name.clone(), grads.get(*v));
            }
        }
        map
    }
}

/// Parameter name to gradient, accumulated in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn insert(&mut self, name: String, g: Vec<f64>) {
        self.grads.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|g| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn validate(&self, params: &ParamSet) -> Result<(), OptimError> {
        for (name, g) in &self.grads {
            let p = params.get(name).ok_or_else(|| OptimError::UnknownParam(name.clone()))?;
            if p.len() != g.len() {
                return Err(OptimError::GradientShape {
                    name: name.clone(),
                    expected: p.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
        }
        Ok(())
    }
}

/// Plain gradient descent with decoupled L2: `θ ← θ − lr·(g + wd·θ)`.
///
/// Every gradient is validated before any parameter moves, so a rejected
/// step leaves `params` untouched. Parameters absent from `grads` are frozen.
pub fn optimizer_step(params: &mut ParamSet, grads: &GradMap, lr: f64, weight_decay: f64) -> Result<(), OptimError> {
    grads.validate(params)?;
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("validated above");
        for (theta, gi) in p.data_mut().iter_mut().zip(g) {
            let t = *theta as f64;
            *theta = (t - lr * (gi + weight_decay * t)) as f32;
        }
    }
    Ok(())
}

/// Adam with L2 penalty folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<(), OptimError> {
        grads.validate(params)?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("validated above");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((theta, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let t = *theta as f64;
                let grad = gi + self.weight_decay * t;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * grad;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * grad * grad;
                let update = self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *theta = (t - update) as f32;
            }
        }
        Ok(())
    }
}

/// Update rule selected by configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Stateful wrapper over [`optimizer_step`] and [`Adam`].
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64, weight_decay: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr, weight_decay },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, weight_decay)),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<(), OptimError> {
        match self {
            Optimizer::Sgd { lr, weight_decay } => optimizer_step(params, grads, *lr, *weight_decay),
            Optimizer::Adam(a) => a.step(params, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    fn grad(name: &str, g: f64) -> GradMap {
        let mut m = GradMap::default();
        m.insert(name.into(), vec![g]);
        m
    }

    #[test]
    fn one_sgd_step() {
        let mut p = single("w", 1.0);
        optimizer_step(&mut p, &grad("w", 1.0), 1e-3, 0.0).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = single("w", 0.37);
        optimizer_step(&mut p, &grad("w", 0.0), 1e-3, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.37);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = single("w", 1.0);
        optimizer_step(&mut p, &grad("w", 0.0), 1e-3, 1e-4).unwrap();
        let got = p.get("w").unwrap().data()[0] as f64;
        assert!((got - 0.9999999).abs() < 1e-7, "{got}");
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_param() {
        let mut p = single("w", 1.0);
        p.insert("b", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut g = grad("b", 1.0);
        g.insert("w".into(), vec![f64::NAN]);
        let err = optimizer_step(&mut p, &g, 0.1, 0.0).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("w".into()));
        assert_eq!(p.get("b").unwrap().data()[0], 2.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = single("w", 1.0);
        let mut opt = Adam::new(1e-3, 0.0);
        opt.step(&mut p, &grad("w", 5.0)).unwrap();
        // first Adam step has magnitude lr regardless of gradient scale
        assert!((p.get("w").unwrap().data()[0] as f64 - (1.0 - 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn bind_marks_only_requested_params_trainable() {
        let mut p = single("a", 1.0);
        p.insert("b", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, Some(&["b"])).unwrap();
        assert!(!tape.requires_grad(bound.var("a")));
        assert!(tape.requires_grad(bound.var("b")));
        let s = tape.add(bound.var("a"), bound.var("b")).unwrap();
        let g = bound.gradients(&tape.backward(s).unwrap());
        assert_eq!(g.len(), 1);
        assert_eq!(g.get("b"), Some(&[1.0][..]));
    }
}
