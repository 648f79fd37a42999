use super::{Bindings, ParamTree, Result, Tape, TensorError, Var};

/// Differences below this magnitude are compared absolutely; pure
/// round-off between two near-zero gradients is not a relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise relative error.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub values_checked: usize,
    /// Norm-wise `‖a − n‖ / max(‖a‖, ‖n‖)` per parameter tensor.
    pub param_rel_err: Vec<(String, f64)>,
}

impl GradCheckReport {
    /// Largest norm-wise relative error over parameter tensors.
    pub fn max_param_rel_err(&self) -> f64 {
        self.param_rel_err.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(w+ε) − f(w−ε)) / 2ε` for every value of every parameter.
///
/// `f` builds a scalar on the given tape from parameters bound by name.
pub fn grad_check<F>(f: F, params: &ParamTree<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bindings) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(TensorError::Invalid(format!("grad_check eps {eps} outside [1e-5, 1e-2]")));
    }
    let eval = |p: &ParamTree<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let b = tape.bind(p, |_| false);
        let out = f(&mut tape, &b)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| TensorError::NonScalarOutput(tape.value(out).shape().to_vec()))?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let bindings = tape.bind(params, |_| true);
    let out = f(&mut tape, &bindings)?;
    let grads = tape.backward(out)?;
    let analytic = bindings.collect(&tape, &grads);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        values_checked: 0,
        param_rel_err: Vec::with_capacity(analytic.len()),
    };
    let mut probe = params.clone();
    for (name, grad) in &analytic {
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for idx in 0..grad.len() {
            let original = params.require(name)?.data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = original + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[idx] = original - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[idx] = original;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[idx];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.values_checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel.max(report.max_rel_err);
                if rel >= report.max_rel_err {
                    report.worst_param = name.clone();
                    report.worst_index = idx;
                }
            }
        }
        let denom = a_sq.max(n_sq).sqrt().max(REL_FLOOR);
        report.param_rel_err.push((name.clone(), diff_sq.sqrt() / denom));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn tree(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamTree<f64> {
        let mut p = ParamTree::new();
        for (n, s, d) in entries {
            p.insert(*n, Tensor::new(s.clone(), d.clone()).unwrap());
        }
        p
    }

    fn random_tree(rng: &mut Rng, entries: &[(&str, Vec<usize>)]) -> ParamTree<f64> {
        let mut p = ParamTree::new();
        for (n, s) in entries {
            let len = s.iter().product();
            let d = (0..len).map(|_| rng.uniform() * 4.0 - 2.0).collect();
            p.insert(*n, Tensor::new(s.clone(), d).unwrap());
        }
        p
    }

    #[test]
    fn quadratic() {
        let p = tree(&[("w", vec![2], vec![1.0, 2.0])]);
        let r = grad_check(
            |t, b| {
                let w = b.get("w")?;
                let sq = t.mul(w, w)?;
                t.sum(sq)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");

        let mut tape = Tape::new();
        let b = tape.bind(&p, |_| true);
        let w = b.get("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = tree(&[("w", vec![3], vec![0.3, -1.0, 2.0])]);
        let mut tape = Tape::new();
        let b = tape.bind(&p, |_| true);
        let c = tape.constant(Tensor::scalar(4.0));
        let out = tape.scale(c, 1.0).unwrap();
        let g = tape.backward(out).unwrap();
        let grads = b.collect(&tape, &g);
        assert!(grads["w"].data().iter().all(|&v| v == 0.0));
        let r = grad_check(|t, _| {
            let c = t.constant(Tensor::scalar(4.0));
            t.scale(c, 1.0)
        }, &p, 1e-3)
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn gelu_gradient_matches_central_difference() {
        let x = 0.7;
        let h = 1e-3;
        let numeric = (super::super::gelu_f64(x + h) - super::super::gelu_f64(x - h)) / (2.0 * h);
        let p = tree(&[("x", vec![1], vec![x])]);
        let mut tape = Tape::new();
        let b = tape.bind(&p, |_| true);
        let xv = b.get("x").unwrap();
        let y = tape.gelu(xv).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().get(xv).unwrap().data()[0];
        assert!(((g - numeric) / numeric).abs() < 1e-6, "{g} vs {numeric}");
    }

    #[test]
    fn eps_out_of_range() {
        let p = tree(&[("w", vec![1], vec![1.0])]);
        let r = grad_check(|t, b| t.sum(b.get("w")?), &p, 0.5);
        assert!(matches!(r, Err(TensorError::Invalid(_))));
    }

    /// Each primitive against central differences on random inputs in [-2, 2].
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = Rng::new(11);
        type Build = fn(&mut Tape<f64>, &Bindings) -> Result<Var>;
        let cases: Vec<(&str, Vec<(&str, Vec<usize>)>, Build)> = vec![
            ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], |t, b| {
                let y = t.matmul(b.get("a")?, b.get("b")?)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            }),
            ("linear", vec![("x", vec![3, 4]), ("w", vec![5, 4]), ("b", vec![5])], |t, b| {
                let y = t.linear(b.get("x")?, b.get("w")?, Some(b.get("b")?))?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            }),
            ("add_sub_mul", vec![("a", vec![4]), ("b", vec![4])], |t, b| {
                let s = t.add(b.get("a")?, b.get("b")?)?;
                let d = t.sub(b.get("a")?, b.get("b")?)?;
                let p = t.mul(s, d)?;
                t.mean(p)
            }),
            ("softmax", vec![("x", vec![2, 5]), ("w", vec![2, 5])], |t, b| {
                let y = t.softmax(b.get("x")?)?;
                let p = t.mul(y, b.get("w")?)?;
                t.sum(p)
            }),
            ("masked_softmax", vec![("x", vec![2, 4]), ("w", vec![2, 4])], |t, b| {
                let y = t.softmax_masked(b.get("x")?, Some(&[true, true, false, true]))?;
                let p = t.mul(y, b.get("w")?)?;
                t.sum(p)
            }),
            ("gelu", vec![("x", vec![6])], |t, b| {
                let y = t.gelu(b.get("x")?)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            }),
            ("layer_norm", vec![("x", vec![3, 5]), ("g", vec![5]), ("b", vec![5]), ("w", vec![3, 5])], |t, b| {
                let y = t.layer_norm(b.get("x")?, b.get("g")?, b.get("b")?, 1e-12)?;
                let p = t.mul(y, b.get("w")?)?;
                t.sum(p)
            }),
            ("masked_mean_l2", vec![("x", vec![4, 3]), ("w", vec![3])], |t, b| {
                let m = t.masked_mean_rows(b.get("x")?, &[true, false, true, true])?;
                let n = t.l2_normalize(m)?;
                let p = t.mul(n, b.get("w")?)?;
                t.sum(p)
            }),
            ("norm_relu", vec![("a", vec![3]), ("b", vec![3])], |t, b| {
                let d = t.sub(b.get("a")?, b.get("b")?)?;
                let n = t.norm(d)?;
                let s = t.add_scalar(n, 5.0)?;
                t.relu(s)
            }),
            ("gather_slices", vec![("table", vec![5, 4]), ("w", vec![3, 4])], |t, b| {
                let g = t.gather(b.get("table")?, &[4, 1, 4])?;
                let l = t.col_slice(g, 0, 1)?;
                let r = t.col_slice(g, 1, 3)?;
                let c = t.concat_cols(&[r, l])?;
                let p = t.mul(c, b.get("w")?)?;
                let s = t.scale(p, 0.5)?;
                t.sum(s)
            }),
            ("add_row_add_n", vec![("x", vec![2, 3]), ("r", vec![3])], |t, b| {
                let y = t.add_row(b.get("x")?, b.get("r")?)?;
                let y2 = t.mul(y, y)?;
                let z = t.add_n(&[y2, y, y])?;
                t.sum(z)
            }),
            ("matmul_nt", vec![("a", vec![3, 4]), ("b", vec![2, 4])], |t, b| {
                let y = t.matmul_nt(b.get("a")?, b.get("b")?)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            }),
        ];
        for (name, shapes, build) in cases {
            for _ in 0..5 {
                let p = random_tree(&mut rng, &shapes);
                let r = grad_check(build, &p, 1e-5).unwrap();
                assert!(r.max_rel_err < 1e-6, "{name}: {r:?}");
            }
        }
    }
}
