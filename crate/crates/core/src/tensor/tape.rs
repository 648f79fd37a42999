use indexmap::IndexMap;

use super::{gelu_f64, gelu_grad_f64, ParamTree, Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<R> {
    Leaf,
    MatMul(usize, usize),
    /// `x · wᵀ (+ b)` with `w` laid out `[out, in]`.
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    AddN(Vec<usize>),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, R),
    AddScalar(usize),
    Softmax(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<R>,
    },
    MaskedMeanRows {
        x: usize,
        keep: Vec<bool>,
        count: usize,
    },
    Mean(usize),
    Sum(usize),
    L2Normalize {
        x: usize,
        norm: R,
    },
    Norm(usize),
    Relu(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ColSlice {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Records primitive operations so that gradients of a scalar output can be
/// replayed in reverse order. Only leaves created with [`Tape::param`] (and
/// nodes downstream of them) carry gradient accumulators.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a parameter leaf, or `None` if it never influenced the
    /// output (or is not a parameter).
    pub fn get(&self, var: Var) -> Option<Tensor<R>> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }
}

/// Parameters of a [`ParamTree`] bound onto a tape, trainable or constant.
pub struct Bindings {
    vars: IndexMap<String, Var>,
    trainable: Vec<String>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Per-name gradients for every trainable binding; parameters that did
    /// not influence the output get zeros.
    pub fn collect<R: Real>(
        &self,
        tape: &Tape<R>,
        grads: &Gradients<R>,
    ) -> IndexMap<String, Tensor<R>> {
        self.trainable
            .iter()
            .map(|name| {
                let var = self.vars[name];
                let g = grads
                    .get(var)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn add_into<R: Real>(acc: &mut [R], src: &[R]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut s = R::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a[m,k] · b[k,n]`.
fn matmul_kernel<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            axpy(aip, &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
fn matmul_nt_kernel<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(ai, &b[j * k..(j + 1) * k]));
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]` → `[k,n]`.
fn matmul_tn_kernel<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); k * n];
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != R::zero() {
                axpy(aip, bi, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives a gradient accumulator.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds every entry of `params`; entries for which `trainable` returns
    /// true become parameters, the rest constants.
    pub fn bind(&mut self, params: &ParamTree<R>, trainable: impl Fn(&str) -> bool) -> Bindings {
        let mut vars = IndexMap::with_capacity(params.len());
        let mut names = Vec::new();
        for (name, t) in params.iter() {
            let var = if trainable(name) {
                names.push(name.to_string());
                self.param(t.clone())
            } else {
                self.constant(t.clone())
            };
            vars.insert(name.to_string(), var);
        }
        Bindings {
            vars,
            trainable: names,
        }
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<R>, op: Op<R>, inputs: &[usize]) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected rank 2, got {:?}", self.value(v).shape())))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `x · wᵀ + b` where `w` is `[out, in]` and `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2(x, "linear")?;
        let (n, k2) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(shape_err("linear", format!("x [{m},{k}] with w [{n},{k2}]")));
        }
        let mut out = matmul_nt_kernel(self.value(x).data(), self.value(w).data(), m, k, n);
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [n] {
                return Err(shape_err("linear", format!("bias {:?} for {n} outputs", bias.shape())));
            }
            for row in out.chunks_mut(n) {
                add_into(row, bias.data());
            }
            inputs.push(b.0);
        }
        self.push(
            "linear",
            vec![m, n],
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &inputs,
        )
    }

    /// `a · bᵀ` for rank-2 inputs.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("add", shape, out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    /// Sum of several same-shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err("add_n", "no inputs".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![R::zero(); self.value(first).len()];
        for &x in xs {
            self.same_shape(first, x, "add_n")?;
            add_into(&mut out, self.value(x).data());
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push("add_n", shape, out, Op::AddN(ids.clone()), &ids)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("sub", shape, out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("mul", shape, out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Adds a `[n]` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row")?;
        if self.value(row).shape() != [n] {
            return Err(shape_err("add_row", format!("row {:?} for width {n}", self.value(row).shape())));
        }
        let mut out = self.value(x).data().to_vec();
        let r = self.value(row).data();
        for chunk in out.chunks_mut(n) {
            add_into(chunk, r);
        }
        let shape = self.value(x).shape().to_vec();
        self.push("add_row", shape, out, Op::AddRow(x.0, row.0), &[x.0, row.0])
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("scale", shape, out, Op::Scale(x.0, c), &[x.0])
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar(x.0), &[x.0])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax; columns with `keep[j] == false` get probability
    /// exactly zero.
    pub fn softmax_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        if let Some(k) = keep {
            if k.len() != n {
                return Err(shape_err("softmax", format!("mask of {} for width {n}", k.len())));
            }
            if !k.iter().any(|&b| b) {
                return Err(shape_err("softmax", "mask keeps no columns".into()));
            }
        }
        let kept = |j: usize| keep.is_none_or(|k| k[j]);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let mut max = None::<R>;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    max = Some(max.map_or(v, |m: R| m.max(v)));
                }
            }
            let max = max.unwrap_or_else(R::zero);
            let mut total = R::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if kept(j) {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = R::zero();
                }
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push("softmax", shape, out, Op::Softmax(x.0), &[x.0])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| R::of(gelu_f64(v.to_f64())))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push("gelu", shape, out, Op::Gelu(x.0), &[x.0])
    }

    /// Normalises each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(shape_err("layer_norm", format!("affine params for width {n}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(xs.len() / n.max(1));
        let nf = n as f64;
        for row in xs.chunks(n) {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / nf;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(R::of(inv));
            for j in 0..n {
                let xhat = R::of((row[j].to_f64() - mean) * inv);
                out.push(g[j] * xhat + b[j]);
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Mean of the rows with `keep[i] == true`; `[m, n]` → `[n]`.
    pub fn masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(x, "masked_mean_rows")?;
        if keep.len() != m {
            return Err(shape_err("masked_mean_rows", format!("mask of {} for {m} rows", keep.len())));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(shape_err("masked_mean_rows", "mask keeps no rows".into()));
        }
        let mut out = vec![R::zero(); n];
        for (row, &k) in self.value(x).data().chunks(n).zip(keep) {
            if k {
                add_into(&mut out, row);
            }
        }
        let inv = R::of(1.0 / count as f64);
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        self.push(
            "masked_mean_rows",
            vec![n],
            out,
            Op::MaskedMeanRows {
                x: x.0,
                keep: keep.to_vec(),
                count,
            },
            &[x.0],
        )
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(shape_err("mean", "empty input".into()));
        }
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push("mean", vec![], vec![R::of(s / len as f64)], Op::Mean(x.0), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: R = self.value(x).data().iter().copied().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x.0), &[x.0])
    }

    /// `x / ‖x‖` for a vector; the zero vector is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 1 {
            return Err(shape_err("l2_normalize", format!("expected vector, got {shape:?}")));
        }
        let norm = super::l2_norm(self.value(x).data());
        if norm == 0.0 {
            return Err(TensorError::ZeroNorm);
        }
        let inv = R::of(1.0 / norm);
        let out = self.value(x).data().iter().map(|&v| v * inv).collect();
        self.push(
            "l2_normalize",
            shape,
            out,
            Op::L2Normalize {
                x: x.0,
                norm: R::of(norm),
            },
            &[x.0],
        )
    }

    /// Euclidean norm, as a scalar. The gradient at the origin is zero.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = super::l2_norm(self.value(x).data());
        self.push("norm", vec![], vec![R::of(n)], Op::Norm(x.0), &[x.0])
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > R::zero() { v } else { R::zero() })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push("relu", shape, out, Op::Relu(x.0), &[x.0])
    }

    /// Rows of a `[rows, n]` table, in `ids` order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims2(table, "gather")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    limit: rows,
                });
            }
            out.extend_from_slice(&t[id * n..(id + 1) * n]);
        }
        self.push(
            "gather",
            vec![ids.len(), n],
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        )
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "col_slice")?;
        if start + len > n {
            return Err(shape_err("col_slice", format!("{start}+{len} > {n}")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in d.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push("col_slice", vec![m, len], out, Op::ColSlice { x: x.0, start }, &[x.0])
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mx, nx) = self.dims2(x, "concat_cols")?;
            if mx != m {
                return Err(shape_err("concat_cols", format!("{mx} rows vs {m}")));
            }
            widths.push(nx);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push("concat_cols", vec![m, total], out, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<R>> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(TensorError::NonScalarOutput(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        if out_node.needs_grad {
            grads[output.0] = Some(vec![R::one()]);
        }
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let mut leaf_grads = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                leaf_grads[i] = grads[i].take();
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<R>>], idx: usize, contrib: Vec<R>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => add_into(acc, &contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn propagate(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2().unwrap();
                let (_, n) = self.nodes[*b].value.dims2().unwrap();
                if self.wants(*a) {
                    let da = matmul_nt_kernel(g, val(*b), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = matmul_tn_kernel(val(*a), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.nodes[*x].value.dims2().unwrap();
                let (n, _) = self.nodes[*w].value.dims2().unwrap();
                if self.wants(*x) {
                    let dx = matmul_kernel(g, val(*w), m, n, k);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = matmul_tn_kernel(g, val(*x), m, n, k);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![R::zero(); n];
                        for row in g.chunks(n) {
                            add_into(&mut db, row);
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.accumulate(grads, x, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = g.iter().zip(val(*b)).map(|(&gi, &bi)| gi * bi).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(val(*a)).map(|(&gi, &ai)| gi * ai).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*row) {
                    let n = self.nodes[*row].value.len();
                    let mut dr = vec![R::zero(); n];
                    for chunk in g.chunks(n) {
                        add_into(&mut dr, chunk);
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let s = dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - s)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &xi)| gi * R::of(gelu_grad_f64(xi.to_f64())))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
            } => {
                let n = *node.value.shape().last().unwrap();
                let gam = val(*gamma);
                let y = node.value.data();
                let mut dgamma = vec![R::zero(); n];
                let mut dbeta = vec![R::zero(); n];
                let mut dx = Vec::with_capacity(y.len());
                let xs = val(*x);
                for ((row_g, row_x), &inv) in g.chunks(n).zip(xs.chunks(n)).zip(inv_std) {
                    let mean = row_x.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
                    let xhat: Vec<R> = row_x
                        .iter()
                        .map(|&v| R::of((v.to_f64() - mean) * inv.to_f64()))
                        .collect();
                    let mut sum_g = R::zero();
                    let mut sum_gx = R::zero();
                    for j in 0..n {
                        dgamma[j] += row_g[j] * xhat[j];
                        dbeta[j] += row_g[j];
                        let gj = row_g[j] * gam[j];
                        sum_g += gj;
                        sum_gx += gj * xhat[j];
                    }
                    let nf = R::of(n as f64);
                    let scale = inv / nf;
                    for j in 0..n {
                        let gj = row_g[j] * gam[j];
                        dx.push(scale * (nf * gj - sum_g - xhat[j] * sum_gx));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::MaskedMeanRows { x, keep, count } => {
                let n = g.len();
                let inv = R::of(1.0 / *count as f64);
                let mut dx = Vec::with_capacity(keep.len() * n);
                for &k in keep {
                    if k {
                        dx.extend(g.iter().map(|&v| v * inv));
                    } else {
                        dx.extend(std::iter::repeat_n(R::zero(), n));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let len = self.nodes[*x].value.len();
                let v = g[0] * R::of(1.0 / len as f64);
                self.accumulate(grads, *x, vec![v; len]);
            }
            Op::Sum(x) => {
                let len = self.nodes[*x].value.len();
                self.accumulate(grads, *x, vec![g[0]; len]);
            }
            Op::L2Normalize { x, norm } => {
                let y = node.value.data();
                let s = dot(y, g);
                let inv = R::one() / *norm;
                let dx = y.iter().zip(g).map(|(&yi, &gi)| (gi - yi * s) * inv).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Norm(x) => {
                let n = node.value.data()[0];
                let xs = val(*x);
                let dx = if n > R::zero() {
                    let c = g[0] / n;
                    xs.iter().map(|&v| v * c).collect()
                } else {
                    vec![R::zero(); xs.len()]
                };
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &xi)| if xi > R::zero() { gi } else { R::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                let t = &self.nodes[*table].value;
                let (_, n) = t.dims2().unwrap();
                let mut dt = vec![R::zero(); t.len()];
                for (row, &id) in g.chunks(n).zip(ids) {
                    add_into(&mut dt[id * n..(id + 1) * n], row);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::ColSlice { x, start } => {
                let (m, n) = self.nodes[*x].value.dims2().unwrap();
                let len = g.len() / m.max(1);
                let mut dx = vec![R::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(xs) => {
                let (m, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let (_, w) = self.nodes[x].value.dims2().unwrap();
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dx.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, x, dx);
                    }
                    offset += w;
                }
            }
        }
    }
}
