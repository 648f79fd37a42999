use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Triplet margin loss over Euclidean distances of unit embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub margin: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { margin: 0.1 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Optimizer(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// `max(0, ‖a−p‖ − ‖a−n‖ + margin)` recorded on the tape.
pub fn triplet_margin_loss<R: Real>(
    tape: &mut Tape<R>,
    anchor: Var,
    positive: Var,
    negative: Var,
    spec: &LossSpec,
) -> Result<Var> {
    let ap = tape.sub(anchor, positive)?;
    let an = tape.sub(anchor, negative)?;
    let d_ap = tape.norm(ap)?;
    let d_an = tape.norm(an)?;
    let diff = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(diff, R::of(spec.margin))?;
    Ok(tape.relu(shifted)?)
}

/// Mean of per-triplet losses.
pub fn batch_triplet_loss<R: Real>(
    tape: &mut Tape<R>,
    triplets: &[(Var, Var, Var)],
    spec: &LossSpec,
) -> Result<Var> {
    if triplets.is_empty() {
        return Err(Error::Tuning("empty batch".into()));
    }
    let losses = triplets
        .iter()
        .map(|&(a, p, n)| triplet_margin_loss(tape, a, p, n, spec))
        .collect::<Result<Vec<_>>>()?;
    let total = if losses.len() == 1 {
        losses[0]
    } else {
        tape.add_n(&losses)?
    };
    Ok(tape.scale(total, R::of(1.0 / triplets.len() as f64))?)
}

pub fn euclidean<R: Real>(a: &[R], b: &[R]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Loss value without gradient tracking.
pub fn triplet_loss_value<R: Real>(anchor: &[R], positive: &[R], negative: &[R], spec: &LossSpec) -> f64 {
    (euclidean(anchor, positive) - euclidean(anchor, negative) + spec.margin).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tape_loss(a: &[f64], p: &[f64], n: &[f64]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let va = tape.param(Tensor::vector(a.to_vec()));
        let vp = tape.param(Tensor::vector(p.to_vec()));
        let vn = tape.param(Tensor::vector(n.to_vec()));
        let l = triplet_margin_loss(&mut tape, va, vp, vn, &LossSpec::default()).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn satisfied_margin_is_zero() {
        assert_eq!(tape_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn inverted_triplet() {
        let l = tape_loss(&[1.0, 0.0], &[0.5, 0.75f64.sqrt()], &[1.0, 0.0]);
        assert!((l - 1.1).abs() < 1e-12);
    }

    #[test]
    fn value_matches_tape() {
        let a = [0.6, 0.8];
        let p = [0.8, 0.6];
        let n = [0.0, 1.0];
        assert!((tape_loss(&a, &p, &n) - triplet_loss_value(&a, &p, &n, &LossSpec::default())).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_zero_on_satisfied_side() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::vector(vec![1.0, 0.0]));
        let p = tape.param(Tensor::vector(vec![0.9, 0.1]));
        let n = tape.param(Tensor::vector(vec![-1.0, 0.0]));
        let l = triplet_margin_loss(&mut tape, a, p, n, &LossSpec::default()).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).is_none_or(|t| t.max_abs() == 0.0));
    }
}
