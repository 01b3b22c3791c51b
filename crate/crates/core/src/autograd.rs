//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Values that enter
//! the tape through [`Tape::constant`] never receive gradients; anything
//! computed outside the tape and fed back in is detached by construction.

use ndarray::{s, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Block-diagonal multi-head attention over sequences stacked row-wise.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// `batch * seq_len` flags; false marks a padded key position.
    pub key_valid: Vec<bool>,
}

enum Op {
    Leaf,
    Constant,
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Dropout { x: Var, mask: Array2<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<Array2<f64>> },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    /// Scalar output whose gradient w.r.t. `x` was computed with the value.
    ScalarFn { x: Var, grad: Array2<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Attention probabilities of an attention node, one matrix per (sequence, head).
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionLayout, &[Array2<f64>])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Some((layout, probs)),
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `x + bias` with `bias` a single row broadcast over all rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let out = self.value(x) + &self.value(bias).row(0);
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBT(a, b))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let out = &xhat * &g + b;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    /// Inverted dropout with a caller-supplied keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dim();
        let AttentionLayout { batch, seq_len, heads, .. } = layout;
        assert_eq!(rows, batch * seq_len, "attention rows must equal batch * seq_len");
        assert_eq!(layout.key_valid.len(), rows);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * seq_len..(b + 1) * seq_len;
            let valid = &layout.key_valid[r.clone()];
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![r.clone(), c.clone()]);
                let kb = kv.slice(s![r.clone(), c.clone()]);
                let vb = vv.slice(s![r.clone(), c.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                masked_softmax_rows(&mut p, valid);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, probs })
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out = xv.select(Axis(0), &rows);
        self.push(out, Op::SelectRows { x, rows })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts))
    }

    /// Appends a scalar node with value `value` and local gradient `grad` (shape of `x`).
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.value(x).dim(), "scalar_fn gradient shape");
        self.push(Array2::from_elem((1, 1), value), Op::ScalarFn { x, grad })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum::<f64>();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms))
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Constant => {}
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(x, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma).row(0).to_owned();
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &gv;
                    let cols = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv_std[r] / cols * (cols * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = self.value(*x).mapv(|v| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                    });
                    gx *= &g;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, g * mask),
                Op::Attention { q, k, v, layout, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dim = qv.ncols();
                    let dh = dim / layout.heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gvv = Array2::zeros(vv.dim());
                    for b in 0..layout.batch {
                        let r = b * layout.seq_len..(b + 1) * layout.seq_len;
                        for h in 0..layout.heads {
                            let c = h * dh..(h + 1) * dh;
                            let p = &probs[b * layout.heads + h];
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let vb = vv.slice(s![r.clone(), c.clone()]);
                            let qb = qv.slice(s![r.clone(), c.clone()]);
                            let kb = kv.slice(s![r.clone(), c.clone()]);
                            gvv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vb.t());
                            let mut ds = p * &dp;
                            for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                                let dot: f64 = row.sum();
                                row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
                            }
                            ds *= scale;
                            gq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kb));
                            gk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qb));
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gvv);
                }
                Op::SelectRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = gx.row_mut(r);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        accumulate(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ScalarFn { x, grad } => {
                    let up = g[[0, 0]];
                    accumulate(&mut grads, *x, grad * up);
                }
                Op::WeightedSum(terms) => {
                    let up = g[[0, 0]];
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Array2::from_elem((1, 1), up * w));
                    }
                }
            }
        }
        grads.iter_mut().enumerate().for_each(|(i, g)| {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        });
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax restricted to columns with `valid[c]`; other columns become exactly 0.
pub fn masked_softmax_rows(m: &mut Array2<f64>, valid: &[bool]) {
    for mut row in m.outer_iter_mut() {
        let max = row
            .iter()
            .zip(valid)
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (v, &ok) in row.iter_mut().zip(valid) {
            if ok {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    /// Reduces a matrix node to a scalar by a fixed weighting so every entry matters.
    fn reduce(t: &mut Tape, v: Var) -> Var {
        let val = t.value(v).clone();
        let w = Array2::from_shape_fn(val.dim(), |(r, c)| 0.3 + 0.1 * r as f64 - 0.07 * c as f64);
        let value = (&val * &w).sum();
        t.scalar_fn(v, value, w)
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, x: Array2<f64>) {
        let f = |xv: &Array2<f64>| {
            let mut t = Tape::new();
            let l = t.leaf(xv.clone());
            let out = build(&mut t, l);
            let r = reduce(&mut t, out);
            t.scalar(r)
        };
        let mut t = Tape::new();
        let l = t.leaf(x.clone());
        let out = build(&mut t, l);
        let r = reduce(&mut t, out);
        let grads = t.backward(r);
        let analytic = grads.get(l).unwrap();
        let numeric = numeric_grad(&f, &x);
        let err = (analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt().max(1e-8);
        assert!(err / scale < 1e-6, "rel err {} analytic {analytic:?} numeric {numeric:?}", err / scale);
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let x = array![[0.3, -1.2, 0.8, 2.0], [1.5, 0.1, -0.4, 0.2]];
        check(
            &|t, x| {
                let g = t.constant(array![[1.1, 0.9, -0.5, 1.3]]);
                let b = t.constant(array![[0.1, 0.0, 0.2, -0.3]]);
                let y = t.layer_norm(x, g, b);
                t.gelu(y)
            },
            x,
        );
    }

    #[test]
    fn attention_gradient_with_padding() {
        let x = Array2::from_shape_fn((6, 4), |(r, c)| ((r * 4 + c) as f64 * 0.37).sin());
        check(
            &|t, x| {
                let wk = t.constant(Array2::from_shape_fn((4, 4), |(r, c)| ((r + 2 * c) as f64).cos() * 0.5));
                let k = t.matmul(x, wk);
                let layout = AttentionLayout {
                    batch: 2,
                    seq_len: 3,
                    heads: 2,
                    key_valid: vec![true, true, false, true, true, true],
                };
                t.attention(x, k, x, layout)
            },
            x,
        );
    }

    #[test]
    fn gather_select_concat_matmul_bt() {
        let x = Array2::from_shape_fn((4, 3), |(r, c)| (r as f64 - c as f64) * 0.25 + 0.1);
        check(
            &|t, x| {
                let a = t.gather(x, vec![0, 2, 2]);
                let b = t.select_rows(x, vec![3, 1]);
                let h = t.concat_rows(vec![a, b]);
                let bias = t.constant(array![[0.5, -0.5, 0.25]]);
                let h = t.add_bias(h, bias);
                t.matmul_bt(h, h)
            },
            x,
        );
    }

    #[test]
    fn masked_softmax_zeroes_invalid_columns() {
        let mut m = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        masked_softmax_rows(&mut m, &[true, false, true]);
        assert_eq!(m[[0, 1]], 0.0);
        assert!((m.row(0).sum() - 1.0).abs() < 1e-12);
        assert!((m[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let c = t.constant(array![[3.0, 4.0]]);
        let s = t.add(a, c);
        let r = t.scalar_fn(s, 0.0, array![[1.0, 1.0]]);
        let g = t.backward(r);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap(), &array![[1.0, 1.0]]);
    }
}
