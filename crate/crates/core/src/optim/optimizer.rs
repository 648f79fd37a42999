use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamTree, Real, Tensor};

pub const ADADELTA_RHO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Adamax,
    Adadelta,
    Sgd,
}

impl OptimizerKind {
    fn default_eps(self) -> f64 {
        match self {
            OptimizerKind::Adadelta => 1e-6,
            _ => 1e-8,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Adamax => "adamax",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerKind::AdamW),
            "adamax" => Ok(OptimizerKind::Adamax),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Optimizer(format!("unknown optimizer `{s}`"))),
        }
    }
}

/// Optimizer hyperparameters.
///
/// `momentum = false` zeroes both betas for the Adam family and disables the
/// momentum buffer for SGD (whose coefficient is `betas.0`). Weight decay is
/// decoupled for AdamW and added to the gradient otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub momentum: bool,
    pub weight_decay: f64,
    /// Defaults to 1e-8, or 1e-6 for Adadelta.
    pub eps: Option<f64>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 5e-8,
            betas: (0.9, 0.999),
            momentum: true,
            weight_decay: 0.0,
            eps: None,
        }
    }
}

impl OptimizerSpec {
    /// `lr = 0` is accepted so that no-op runs can be expressed.
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Optimizer(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Optimizer(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Optimizer(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.eps.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::Optimizer("eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or_else(|| self.kind.default_eps())
    }

    /// Betas actually used by the update rules.
    pub fn effective_betas(&self) -> (f64, f64) {
        if self.momentum {
            self.betas
        } else {
            (0.0, 0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state over a fixed set of trainable names.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    state: IndexMap<String, Slots>,
}

impl Optimizer {
    pub fn new<R: Real>(spec: OptimizerSpec, params: &ParamTree<R>, trainable: &[&str]) -> Result<Self> {
        spec.validate()?;
        let mut state = IndexMap::new();
        for &name in trainable {
            let n = params.require(name)?.len();
            state.insert(
                name.to_string(),
                Slots {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                },
            );
        }
        Ok(Self { spec, step: 0, state })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Applies one update at learning rate `lr`. Every name in `grads` must
    /// be trainable; trainable names without a gradient are left alone.
    pub fn step<R: Real>(
        &mut self,
        params: &mut ParamTree<R>,
        grads: &IndexMap<String, Tensor<R>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !self.state.contains_key(name) {
                return Err(Error::Optimizer(format!("gradient supplied for non-trainable `{name}`")));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Optimizer(format!(
                    "gradient shape {:?} does not match `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = self.spec.effective_betas();
        let eps = self.spec.eps();
        let wd = self.spec.weight_decay;
        let kind = self.spec.kind;
        for (name, g) in grads {
            let slots = self.state.get_mut(name).expect("checked above");
            let w = params.get_mut(name).expect("checked above").data_mut();
            for (i, (wi, gi)) in w.iter_mut().zip(g.data()).enumerate() {
                let mut x = wi.to_f64();
                let mut gr = gi.to_f64();
                let m = &mut slots.first[i];
                let v = &mut slots.second[i];
                match kind {
                    OptimizerKind::AdamW => {
                        if wd != 0.0 {
                            x *= 1.0 - lr * wd;
                        }
                        *m = b1 * *m + (1.0 - b1) * gr;
                        *v = b2 * *v + (1.0 - b2) * gr * gr;
                        let bc1 = 1.0 - b1.powi(t);
                        let bc2 = 1.0 - b2.powi(t);
                        let denom = v.sqrt() / bc2.sqrt() + eps;
                        x -= lr / bc1 * (*m / denom);
                    }
                    OptimizerKind::Adamax => {
                        gr += wd * x;
                        *m = b1 * *m + (1.0 - b1) * gr;
                        *v = (b2 * *v).max(gr.abs() + eps);
                        let bc1 = 1.0 - b1.powi(t);
                        x -= lr / bc1 * (*m / *v);
                    }
                    OptimizerKind::Adadelta => {
                        gr += wd * x;
                        let rho = ADADELTA_RHO;
                        *m = rho * *m + (1.0 - rho) * gr * gr;
                        let delta = (*v + eps).sqrt() / (*m + eps).sqrt() * gr;
                        *v = rho * *v + (1.0 - rho) * delta * delta;
                        x -= lr * delta;
                    }
                    OptimizerKind::Sgd => {
                        gr += wd * x;
                        if b1 > 0.0 {
                            *m = if t == 1 { gr } else { b1 * *m + gr };
                            gr = *m;
                        }
                        x -= lr * gr;
                    }
                }
                *wi = R::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(w: f64) -> ParamTree<f64> {
        let mut p = ParamTree::new();
        p.insert("w", Tensor::vector(vec![w]));
        p
    }

    fn grad(g: f64) -> IndexMap<String, Tensor<f64>> {
        [("w".to_string(), Tensor::vector(vec![g]))].into_iter().collect()
    }

    #[test]
    fn sgd_one_step() {
        let mut p = one(1.0);
        let spec = OptimizerSpec {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: false,
            ..Default::default()
        };
        let mut opt = Optimizer::new(spec, &p, &["w"]).unwrap();
        opt.step(&mut p, &grad(2.0), 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_trainable_and_non_finite_rejected() {
        let mut p = one(1.0);
        let mut opt = Optimizer::new(OptimizerSpec::default(), &p, &[]).unwrap();
        assert!(opt.step(&mut p, &grad(1.0), 0.1).is_err());
        let mut opt = Optimizer::new(OptimizerSpec::default(), &p, &["w"]).unwrap();
        assert!(matches!(opt.step(&mut p, &grad(f64::NAN), 0.1), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn validation() {
        let bad = OptimizerSpec {
            betas: (1.0, 0.5),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerSpec {
            lr: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("AdamW".parse::<OptimizerKind>().unwrap(), OptimizerKind::AdamW);
    }
}
