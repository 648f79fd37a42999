//! Per-tensor weight-change diagnostics between two parameter trees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamTree, Real};

/// Change summary of one named tensor. `W` is the maximal absolute entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChange {
    pub name: String,
    pub w_o: f64,
    pub w_t: f64,
    /// Any entry differs bitwise.
    pub changed: bool,
    /// `W_t` of a changed tensor.
    pub metric_a: Option<f64>,
    /// `(W_t - W_o) / (W_t + W_o)`, absent when both maxima are zero.
    pub metric_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChangeReport {
    /// In parameter order.
    pub layers: Vec<LayerChange>,
    /// Indices of changed layers by descending `metric_a`.
    pub rank_a: Vec<usize>,
    /// Indices of changed layers by descending `metric_b`.
    pub rank_b: Vec<usize>,
}

impl LayerChangeReport {
    pub fn top_a(&self, k: usize) -> Vec<&LayerChange> {
        self.rank_a.iter().take(k).map(|&i| &self.layers[i]).collect()
    }

    pub fn top_b(&self, k: usize) -> Vec<&LayerChange> {
        self.rank_b.iter().take(k).map(|&i| &self.layers[i]).collect()
    }

    pub fn changed(&self) -> impl Iterator<Item = &LayerChange> {
        self.layers.iter().filter(|l| l.changed)
    }
}

/// Short display name with the `encoder.layer.` prefix removed.
pub fn short_name(name: &str) -> &str {
    name.strip_prefix("encoder.layer.").unwrap_or(name)
}

fn rank_by(layers: &[LayerChange], key: impl Fn(&LayerChange) -> Option<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].changed && key(&layers[i]).is_some()).collect();
    // Stable sort keeps parameter order among equal values.
    idx.sort_by(|&a, &b| key(&layers[b]).unwrap().total_cmp(&key(&layers[a]).unwrap()));
    idx
}

pub fn diagnose_layers<R: Real>(before: &ParamTree<R>, after: &ParamTree<R>) -> Result<LayerChangeReport> {
    let missing: Vec<&str> = before.names().filter(|n| !after.contains(n)).collect();
    let extra: Vec<&str> = after.names().filter(|n| !before.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Lab(format!(
            "parameter name sets differ (only before: {missing:?}, only after: {extra:?})"
        )));
    }
    let mut layers = Vec::with_capacity(before.len());
    for (name, b) in before.iter() {
        let a = after.require(name)?;
        if a.shape() != b.shape() {
            return Err(Error::Lab(format!(
                "{name}: shape {:?} before, {:?} after",
                b.shape(),
                a.shape()
            )));
        }
        let changed = a.data().iter().zip(b.data()).any(|(x, y)| x.to_f64().to_bits() != y.to_f64().to_bits());
        let w_o = b.max_abs().to_f64();
        let w_t = a.max_abs().to_f64();
        let sum = w_t + w_o;
        layers.push(LayerChange {
            name: name.to_string(),
            w_o,
            w_t,
            changed,
            metric_a: changed.then_some(w_t),
            metric_b: (sum > 0.0).then(|| (w_t - w_o) / sum),
        });
    }
    let rank_a = rank_by(&layers, |l| l.metric_a);
    let rank_b = rank_by(&layers, |l| l.metric_b);
    Ok(LayerChangeReport { layers, rank_a, rank_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};
    use crate::tensor::Rng;

    fn tree() -> ParamTree<f64> {
        let cfg = EncoderConfig {
            vocab_size: 10,
            hidden: 8,
            n_blocks: 4,
            n_heads: 2,
            intermediate: 16,
            max_positions: 8,
            n_token_types: 2,
        };
        init_params(&cfg, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn identical_trees_have_no_change() {
        let t = tree();
        let r = diagnose_layers(&t, &t).unwrap();
        assert!(r.layers.iter().all(|l| !l.changed && l.metric_a.is_none()));
        assert!(r.rank_a.is_empty() && r.rank_b.is_empty());
    }

    #[test]
    fn single_perturbation_tops_both_rankings() {
        let before = tree();
        let mut after = before.clone();
        let name = "encoder.layer.3.output.dense.weight";
        after.get_mut(name).unwrap().data_mut()[0] += 1.0;
        let r = diagnose_layers(&before, &after).unwrap();
        assert_eq!(r.top_a(1)[0].name, name);
        assert_eq!(r.top_b(1)[0].name, name);
        assert_eq!(r.rank_a.len(), 1);
        assert_eq!(short_name(name), "3.output.dense.weight");
    }

    #[test]
    fn name_mismatch_is_error() {
        let before = tree();
        let mut after = ParamTree::new();
        for (n, t) in before.iter().skip(1) {
            after.insert(n, t.clone());
        }
        assert!(diagnose_layers(&before, &after).is_err());
    }
}
