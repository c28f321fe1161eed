use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{PetError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `[start, start + len)` belonging to one sequence
/// in a packed batch.
pub type Segment = (usize, usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    MulRow {
        a: Var,
        row: Var,
    },
    BroadcastCols {
        u: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    GroupMean {
        a: Var,
        assign: Vec<Option<usize>>,
        counts: Vec<usize>,
    },
    GroupExpand {
        a: Var,
        assign: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    NormalizeRows {
        a: Var,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_seg: Vec<Segment>,
        k_seg: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so
/// the node list is always a valid topological order.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    keyed: HashMap<u64, Var>,
    track: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            keyed: HashMap::new(),
            track: true,
        }
    }

    /// Tape that records values only; no leaf requires gradients.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>, rg: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let rg = rg && self.track;
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad: rg,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Places a tensor on the tape. Gradient tracking follows the tensor's
    /// own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(t.data().to_vec(), r, c, Op::Leaf, t.requires_grad()))
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(t.data().to_vec(), r, c, Op::Leaf, false))
    }

    pub fn matrix(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(PetError::dim("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(data, rows, cols, Op::Leaf, requires_grad))
    }

    /// Leaf shared by every use of `key` on this tape; `make` runs once.
    pub fn keyed_leaf(
        &mut self,
        key: u64,
        make: impl FnOnce() -> (Tensor<T>, bool),
    ) -> Result<Var> {
        if let Some(&v) = self.keyed.get(&key) {
            return Ok(v);
        }
        let (t, rg) = make();
        let (r, c) = t.dims2()?;
        let v = self.push(t.into_data(), r, c, Op::Leaf, rg);
        self.keyed.insert(key, v);
        Ok(v)
    }

    /// Keyed leaves with their accumulated gradients.
    pub fn keyed_grads(&self) -> impl Iterator<Item = (u64, &[T])> {
        self.keyed
            .iter()
            .filter_map(|(&k, &v)| self.nodes[v.0].grad.as_deref().map(|g| (k, g)))
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&[n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(PetError::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            m,
            n,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(PetError::dim("matmul_t", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            true,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            m,
            n,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(PetError::dim(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, r, c, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, r, c, Op::Mul(a, b), rg))
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(PetError::dim(op, &[r, c], &[rr, rc]));
        }
        Ok((r, c))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("add_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, r, c, Op::AddRow { a, row }, rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("mul_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| x * y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, r, c, Op::MulRow { a, row }, rg))
    }

    /// `1_{n×1} · v` for a `1 × c` row `v`.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let (r, _) = self.shape(v);
        if r != 1 {
            return Err(PetError::dim("broadcast_rows", &[r], &[1]));
        }
        self.group_expand(v, vec![0; n])
    }

    /// `u · 1_{1×c}` for an `n × 1` column `u`.
    pub fn broadcast_cols(&mut self, u: Var, c: usize) -> Result<Var> {
        let (r, uc) = self.shape(u);
        if uc != 1 {
            return Err(PetError::dim("broadcast_cols", &[r, uc], &[r, 1]));
        }
        let out = self
            .value(u)
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, c))
            .collect();
        let rg = self.rg(u);
        Ok(self.push(out, r, c, Op::BroadcastCols { u }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * f).collect();
        let rg = self.rg(a);
        self.push(out, r, c, Op::Scale { a, factor: f }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Var {
        let v = T::of(value);
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x + v).collect();
        let rg = self.rg(a);
        self.push(out, r, c, Op::AddScalar(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(out, r, c, Op::Sigmoid(a), rg)
    }

    /// Exact GELU, `x · Φ(x)` with `Φ` the standard normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.push(out, r, c, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s], 1, 1, Op::Sum(a), rg)
    }

    /// Average over the row (length) axis, giving a `1 × c` row.
    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        self.group_mean(a, vec![Some(0); r], 1)
    }

    /// Per-group row means. `assign[i]` names the group of row `i`; `None`
    /// excludes the row. Every group must receive at least one row.
    pub fn group_mean(&mut self, a: Var, assign: Vec<Option<usize>>, groups: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if assign.len() != r {
            return Err(PetError::dim("group_mean", &[r], &[assign.len()]));
        }
        let mut counts = vec![0usize; groups];
        for g in assign.iter().flatten() {
            if *g >= groups {
                return Err(PetError::contract(format!(
                    "group {g} out of range {groups}"
                )));
            }
            counts[*g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(PetError::contract(format!(
                "pooling group {empty} is empty"
            )));
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); groups * c];
        for (i, g) in assign.iter().enumerate() {
            if let Some(g) = *g {
                for j in 0..c {
                    out[g * c + j] += av[i * c + j];
                }
            }
        }
        for (g, &n) in counts.iter().enumerate() {
            let inv = T::one() / T::of(n as f64);
            out[g * c..(g + 1) * c].iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(a);
        Ok(self.push(out, groups, c, Op::GroupMean { a, assign, counts }, rg))
    }

    /// Row `i` of the output is row `assign[i]` of `a`.
    pub fn group_expand(&mut self, a: Var, assign: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = assign.iter().find(|&&g| g >= r) {
            return Err(PetError::contract(format!(
                "expand index {bad} out of range {r}"
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(assign.len() * c);
        for &g in &assign {
            out.extend_from_slice(&av[g * c..(g + 1) * c]);
        }
        let n = assign.len();
        let rg = self.rg(a);
        Ok(self.push(out, n, c, Op::GroupExpand { a, assign }, rg))
    }

    // ---------------------------------------------------------------
    // Layout
    // ---------------------------------------------------------------

    /// Concatenation along the last (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(PetError::contract("concat of zero tensors"));
        };
        let rows = self.shape(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(PetError::dim("concat_cols", &[rows], &[r]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rows, total, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(PetError::dim("slice_cols", &[r, c], &[start, len]));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, r, len, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(PetError::contract("concat of zero tensors"));
        };
        let cols = self.shape(first).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(PetError::dim("concat_rows", &[cols], &[c]));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rows, cols, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(PetError::dim("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, len, c, Op::SliceRows { a, start }, rg))
    }

    /// Embedding lookup: row `i` of the output is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(PetError::contract(format!(
                "index {bad} out of range for table of {r} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            ids.len(),
            c,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------
    // Fused transformer kernels
    // ---------------------------------------------------------------

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)`; the affine
    /// part of layer normalisation is applied separately.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.shape(a);
        let eps = T::of(eps);
        let av = self.value(a);
        let mut out = vec![T::zero(); r * c];
        let mut rstd = Vec::with_capacity(r);
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_c;
            let s = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * s;
            }
            rstd.push(s);
        }
        let rg = self.rg(a);
        self.push(out, r, c, Op::NormalizeRows { a, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q_seg[s]` and `k_seg[s]` give the row ranges of sequence `s` in the
    /// query and key/value inputs. With `causal`, query `i` of a segment only
    /// sees keys `0..=i` of the same segment.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_seg: &[Segment],
        k_seg: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        let (nv, dv) = self.shape(v);
        if dk != d || dv != d || nk != nv {
            return Err(PetError::dim("attention", &[nq, d], &[nk, dk, nv, dv]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(PetError::config(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        if q_seg.len() != k_seg.len() {
            return Err(PetError::dim(
                "attention segments",
                &[q_seg.len()],
                &[k_seg.len()],
            ));
        }
        for (&(qs, ql), &(ks, kl)) in q_seg.iter().zip(k_seg) {
            if qs + ql > nq || ks + kl > nk || kl == 0 {
                return Err(PetError::contract("attention segment out of range"));
            }
            if causal && kl < ql {
                return Err(PetError::contract(
                    "causal attention needs at least as many keys as queries",
                ));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); nq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (&(qs, ql), &(ks, kl)) in q_seg.iter().zip(k_seg) {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..ql {
                    let qrow = &qv[(qs + i) * d + off..(qs + i) * d + off + dh];
                    let visible = if causal { i + 1 } else { kl };
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for j in 0..visible {
                        let krow = &kv[(ks + j) * d + off..(ks + j) * d + off + dh];
                        let s = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut total = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let orow = (qs + i) * d + off;
                    for j in 0..kl {
                        let p = if j < visible {
                            scores[j] / total
                        } else {
                            T::zero()
                        };
                        probs.push(p);
                        if p != T::zero() {
                            let vrow = &vv[(ks + j) * d + off..(ks + j) * d + off + dh];
                            for c in 0..dh {
                                out[orow + c] += p * vrow[c];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention {
            q,
            k,
            v,
            q_seg: q_seg.to_vec(),
            k_seg: k_seg.to_vec(),
            heads,
            probs,
        };
        Ok(self.push(out, nq, d, op, rg))
    }

    /// Mean token-level cross-entropy of row-wise logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || r == 0 {
            return Err(PetError::dim("cross_entropy", &[r, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(PetError::contract(format!(
                "target {bad} outside vocabulary of {c}"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                total += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= total;
            }
            loss += total.ln() + max - row[targets[i]];
        }
        loss /= T::of(r as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![loss], 1, 1, op, rg))
    }

    // ---------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// gradients. Repeated calls add to the existing accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(PetError::contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // trans_b: b is n×k and a·bᵀ; otherwise b is k×n.
                    T::gemm(m, n, k, g, false, self.value(*b), !trans_b, &mut da, false);
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        T::gemm(n, m, k, g, true, self.value(*a), false, &mut db, false);
                    } else {
                        T::gemm(k, m, n, self.value(*a), true, g, false, &mut db, false);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.rg(p) {
                        accumulate(grads, p, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::AddRow { a, row } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.rg(*row) {
                    let mut d = vec![T::zero(); cols];
                    for chunk in g.chunks(cols) {
                        d.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                    accumulate(grads, *row, d);
                }
            }
            Op::MulRow { a, row } => {
                let rv = self.value(*row);
                if self.rg(*a) {
                    let d = g
                        .chunks(cols)
                        .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| x * y))
                        .collect();
                    accumulate(grads, *a, d);
                }
                if self.rg(*row) {
                    let av = self.value(*a);
                    let mut d = vec![T::zero(); cols];
                    for (gc, ac) in g.chunks(cols).zip(av.chunks(cols)) {
                        for j in 0..cols {
                            d[j] += gc[j] * ac[j];
                        }
                    }
                    accumulate(grads, *row, d);
                }
            }
            Op::BroadcastCols { u } => {
                let d = g
                    .chunks(cols)
                    .map(|chunk| chunk.iter().copied().sum())
                    .collect();
                accumulate(grads, *u, d);
            }
            Op::Scale { a, factor } => {
                let d = g.iter().map(|&x| x * *factor).collect();
                accumulate(grads, *a, d);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gy, &y)| gy * y * (T::one() - y))
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&gy, &x)| gy * gelu_grad(x))
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::GroupMean { a, assign, counts } => {
                let mut d = vec![T::zero(); assign.len() * cols];
                for (r, grp) in assign.iter().enumerate() {
                    if let Some(grp) = *grp {
                        let inv = T::one() / T::of(counts[grp] as f64);
                        for j in 0..cols {
                            d[r * cols + j] = g[grp * cols + j] * inv;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::GroupExpand { a, assign } => {
                let (ar, _) = self.shape(*a);
                let mut d = vec![T::zero(); ar * cols];
                for (r, &grp) in assign.iter().enumerate() {
                    for j in 0..cols {
                        d[grp * cols + j] += g[r * cols + j];
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * cols + off..r * cols + off + w]);
                        }
                        accumulate(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (ar, ac) = self.shape(*a);
                let mut d = vec![T::zero(); ar * ac];
                for r in 0..ar {
                    d[r * ac + start..r * ac + start + cols]
                        .copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let (ar, ac) = self.shape(*a);
                let mut d = vec![T::zero(); ar * ac];
                d[start * ac..(start + rows) * ac].copy_from_slice(g);
                accumulate(grads, *a, d);
            }
            Op::Gather { table, ids } => {
                let (tr, tc) = self.shape(*table);
                let mut d = vec![T::zero(); tr * tc];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..tc {
                        d[id * tc + j] += g[r * tc + j];
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::NormalizeRows { a, rstd } => {
                let y = &node.value;
                let inv_c = T::one() / T::of(cols as f64);
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let mg = gr.iter().copied().sum::<T>() * inv_c;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for j in 0..cols {
                        d[r * cols + j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Attention {
                q,
                k,
                v,
                q_seg,
                k_seg,
                heads,
                probs,
            } => {
                let d = cols;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let nk = self.shape(*k).0;
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); nk * d];
                let mut dv = vec![T::zero(); nk * d];
                let mut dp = Vec::new();
                let mut pofs = 0;
                for (&(qs, ql), &(ks, kl)) in q_seg.iter().zip(k_seg) {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..ql {
                            let p = &probs[pofs..pofs + kl];
                            pofs += kl;
                            let grow = &g[(qs + i) * d + off..(qs + i) * d + off + dh];
                            dp.clear();
                            let mut weighted = T::zero();
                            for (j, &pj) in p.iter().enumerate() {
                                if pj == T::zero() {
                                    dp.push(T::zero());
                                    continue;
                                }
                                let vrow = (ks + j) * d + off;
                                let mut s = T::zero();
                                for c in 0..dh {
                                    s += grow[c] * vv[vrow + c];
                                    dv[vrow + c] += pj * grow[c];
                                }
                                weighted += pj * s;
                                dp.push(s);
                            }
                            let qrow = (qs + i) * d + off;
                            for j in 0..kl {
                                if p[j] == T::zero() {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let krow = (ks + j) * d + off;
                                for c in 0..dh {
                                    dq[qrow + c] += ds * kv[krow + c];
                                    dk[krow + c] += ds * qv[qrow + c];
                                }
                            }
                        }
                    }
                }
                if self.rg(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.rg(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.rg(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.shape(*logits);
                let scale = g[0] / T::of(r as f64);
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= T::one();
                }
                d.iter_mut().for_each(|x| *x *= scale);
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::<f64>::new();
        let i = t.leaf(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let p = t.matmul(i, i).unwrap();
        assert_eq!(t.value(p), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_matmul() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(&m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = t.leaf(&m(&[&[0.0], &[1.0]])).unwrap();
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(p), (2, 1));
        assert_eq!(t.value(p), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = t.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        match t.matmul(a, b) {
            Err(PetError::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn pointwise_values() {
        let mut t = Tape::<f64>::new();
        let z = t.leaf(&Tensor::zeros(&[1, 1])).unwrap();
        let s = t.sigmoid(z);
        let g = t.gelu(z);
        assert_eq!(t.scalar(s), 0.5);
        assert_eq!(t.scalar(g), 0.0);
    }

    #[test]
    fn mean_over_rows_by_hand() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(&m(&[&[1.0, 3.0], &[5.0, 7.0]])).unwrap();
        let mu = t.mean_over_rows(a).unwrap();
        assert_eq!(t.shape(mu), (1, 2));
        assert_eq!(t.value(mu), &[3.0, 5.0]);
    }

    #[test]
    fn broadcasts_follow_definition() {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(&m(&[&[1.0, 2.0, 3.0]])).unwrap();
        let u = t.leaf(&m(&[&[4.0], &[5.0]])).unwrap();
        let bv = t.broadcast_rows(v, 2).unwrap();
        let bu = t.broadcast_cols(u, 3).unwrap();
        assert_eq!(t.value(bv), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.value(bu), &[4.0, 4.0, 4.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut t = Tape::<f64>::new();
        let w = t
            .leaf(&Tensor::zeros(&[2, 2]).with_requires_grad(true))
            .unwrap();
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn sigmoid_backward_at_zero() {
        let mut t = Tape::<f64>::new();
        let w = t
            .leaf(&Tensor::zeros(&[2, 2]).with_requires_grad(true))
            .unwrap();
        let s = t.sigmoid(w);
        let l = t.sum(s);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::<f64>::new();
        let w = t
            .leaf(&Tensor::zeros(&[1, 3]).with_requires_grad(true))
            .unwrap();
        let s = t.sum(w);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0; 3]);
        t.zero_grads();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let w = t
            .leaf(&Tensor::zeros(&[2, 2]).with_requires_grad(true))
            .unwrap();
        assert!(matches!(t.backward(w), Err(PetError::Contract(_))));
    }

    #[test]
    fn frozen_leaves_receive_no_grad() {
        let mut t = Tape::<f64>::new();
        let w = t
            .leaf(&Tensor::ones(&[2, 2]).with_requires_grad(true))
            .unwrap();
        let f = t.leaf(&Tensor::ones(&[2, 2])).unwrap();
        let p = t.matmul(w, f).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(w).is_some());
        assert!(t.grad(f).is_none());
    }

    #[test]
    fn empty_pooling_group_is_an_error() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(t.group_mean(a, vec![None, None], 1).is_err());
    }

    #[test]
    fn causal_attention_first_query_copies_first_value() {
        let mut t = Tape::<f64>::new();
        let q = t.leaf(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let v = t.leaf(&m(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let o = t.attention(q, q, v, &[(0, 2)], &[(0, 2)], 1, true).unwrap();
        assert_eq!(&t.value(o)[..2], &[3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(&Tensor::zeros(&[3, 4])).unwrap();
        let ce = t.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((t.scalar(ce) - 4f64.ln()).abs() < 1e-15);
    }
}
