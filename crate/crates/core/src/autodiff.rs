//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] borrows a [`ParamStore`], binds parameter blocks lazily as
//! leaves, records every op together with its output value, and walks the
//! record backwards in [`Graph::backward`]. Only nodes that transitively
//! depend on a trainable parameter (or a leaf created with
//! [`Graph::variable`]) carry gradients, so detaching a sub-network is a
//! matter of leaving its group out of the trainable set.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdaError};
use crate::tensor::{gemm, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Convolutional encoder of the generator.
    Backbone,
    /// Temporal conditioning and context summarizer of the generator.
    Temporal,
    /// Tracker head.
    Head,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::Temporal,
        ParamGroup::Head,
        ParamGroup::Discriminator,
    ];

    fn bit(self) -> u8 {
        match self {
            ParamGroup::Backbone => 1,
            ParamGroup::Temporal => 2,
            ParamGroup::Head => 4,
            ParamGroup::Discriminator => 8,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn all() -> Self {
        Self::of(&ParamGroup::ALL)
    }

    pub fn generator() -> Self {
        Self::of(&[ParamGroup::Backbone, ParamGroup::Temporal, ParamGroup::Head])
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn without(self, group: ParamGroup) -> Self {
        GroupSet(self.0 & !group.bit())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Owner of every trainable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.blocks.push(ParamBlock {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.blocks.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.blocks[id.0].value
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn ids_in(&self, groups: GroupSet) -> Vec<ParamId> {
        self.ids()
            .filter(|id| groups.contains(self.blocks[id.0].group))
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn num_values(&self, groups: GroupSet) -> usize {
        self.blocks
            .iter()
            .filter(|b| groups.contains(b.group))
            .map(|b| b.value.len())
            .sum()
    }

    /// FNV-1a over the bit patterns of every value in `groups`.
    pub fn checksum(&self, groups: GroupSet) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for block in self.blocks.iter().filter(|b| groups.contains(b.group)) {
            for v in block.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Copies values from `other`, which must have an identical layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(TdaError::Config(format!(
                "parameter layout mismatch: {} blocks vs {}",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(TdaError::Config(format!(
                    "parameter block {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Conv2d(Box<ConvRecord>),
    DwConvRows {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Sum(Var),
    Mean(Var),
    BceLogits {
        x: Var,
        targets: Vec<f64>,
    },
    SqErr {
        x: Var,
        targets: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct ConvRecord {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    cols: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    trainable: GroupSet,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, trainable: GroupSet) -> Self {
        Self {
            store: Some(store),
            trainable,
            bound: vec![None; store.len()],
            nodes: Vec::new(),
        }
    }

    /// A graph with no parameter store, for pure tensor computations.
    pub fn standalone() -> Graph<'static> {
        Graph {
            store: None,
            trainable: GroupSet::NONE,
            bound: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> Option<&'s ParamStore> {
        self.store
    }

    pub fn trainable(&self) -> GroupSet {
        self.trainable
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, for checking derivatives w.r.t. inputs.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("parameter bound on a standalone graph");
        let block = store.block(id);
        let needs = self.trainable.contains(block.group);
        let v = self.push(block.value.clone(), Op::Param, needs);
        self.bound[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TdaError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TdaError::Shape(format!("{what}: expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_vec(va.shape(), data).expect("shapes checked");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (n, m) = self.dims2(x, "row broadcast")?;
        if self.value(r).len() != m {
            return Err(TdaError::Shape(format!(
                "row broadcast: row of {} values against {} columns",
                self.value(r).len(),
                m
            )));
        }
        let rv = self.value(r).data();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let a = xv[i * m + j];
                out.push(if mul { a * rv[j] } else { a + rv[j] });
            }
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        let ng = self.ng(x) || self.ng(r);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(t, op, ng))
    }

    /// `x[i, j] + r[j]` for `x` of shape `(n, m)`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, false)
    }

    /// `x[i, j] * r[j]` for `x` of shape `(n, m)`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * s).collect();
        let t = Tensor::from_vec(v.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(TdaError::Shape(format!("matmul: ({m}, {k}) x ({k2}, {n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let t = Tensor::from_vec(&[m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2(x, "transpose")?;
        let t = self.value(x).transpose2();
        let ng = self.ng(x);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| f(*a)).collect();
        let t = Tensor::from_vec(v.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "softmax")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SoftmaxRows(x), ng))
    }

    /// Normalizes every row to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.dims2(x, "layer norm")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mu) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::LayerNormRows { x, inv_std }, ng))
    }

    /// Column means: `(n, m) -> (1, m)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "mean rows")?;
        if n == 0 {
            return Err(TdaError::Shape("mean over zero rows".into()));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += xv[i * m + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::row(out), Op::MeanRows(x), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TdaError::Shape("concat of nothing".into()))?;
        let (_, m) = self.dims2(*first, "concat rows")?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let (pn, pm) = self.dims2(*p, "concat rows")?;
            if pm != m {
                return Err(TdaError::Shape(format!("concat rows: {pm} vs {m} columns")));
            }
            data.extend_from_slice(self.value(*p).data());
            n += pn;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        let t = Tensor::from_vec(&[n, m], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TdaError::Shape("concat of nothing".into()))?;
        let (n, _) = self.dims2(*first, "concat cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pm) = self.dims2(*p, "concat cols")?;
            if pn != n {
                return Err(TdaError::Shape(format!("concat cols: {pn} vs {n} rows")));
            }
            widths.push(pm);
        }
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        let t = Tensor::from_vec(&[n, m], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims2(x, "slice rows")?;
        if start > end || end > n {
            return Err(TdaError::Shape(format!("slice rows {start}..{end} of {n}")));
        }
        let data = self.value(x).data()[start * m..end * m].to_vec();
        let t = Tensor::from_vec(&[end - start, m], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims2(x, "slice cols")?;
        if start > end || end > m {
            return Err(TdaError::Shape(format!("slice cols {start}..{end} of {m}")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&xv[i * m + start..i * m + end]);
        }
        let t = Tensor::from_vec(&[n, end - start], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols(x, start), ng))
    }

    /// 2-D convolution of a `(C_in, H, W)` input with `(C_out, C_in, k, k)`
    /// weights and a `C_out` bias, zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(TdaError::Shape(format!("conv2d: input {xs:?}, weights {ws:?}")));
        }
        if self.value(b).len() != ws[0] {
            return Err(TdaError::Shape("conv2d: bias length".into()));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(TdaError::Shape("conv2d: kernel larger than padded input".into()));
        }
        let geo = ConvGeometry::new(xs[0], xs[1], xs[2], ws[2], stride, pad);
        let cols = geo.im2col(self.value(x).data());
        let (co, kk, p) = (ws[0], geo.patch_len(), geo.out_len());
        let mut out = vec![0.0; co * p];
        gemm(co, kk, p, self.value(w).data(), false, &cols, false, 0.0, &mut out);
        let bv = self.value(b).data();
        for c in 0..co {
            for v in &mut out[c * p..(c + 1) * p] {
                *v += bv[c];
            }
        }
        let t = Tensor::from_vec(&[co, geo.out_h, geo.out_w], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let rec = ConvRecord {
            x,
            w,
            b,
            stride,
            pad,
            cols: if ng { cols } else { Vec::new() },
        };
        Ok(self.push(t, Op::Conv2d(Box::new(rec)), ng))
    }

    /// Depthwise convolution along the row (token) axis of an `(L, C)`
    /// input: `out[l, c] = b[c] + sum_j w[c, j] * x[l + j - pad, c]`.
    pub fn dwconv_rows(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (l, c) = self.dims2(x, "dwconv")?;
        let (wc, k) = self.dims2(w, "dwconv weights")?;
        if wc != c || self.value(b).len() != c {
            return Err(TdaError::Shape(format!(
                "dwconv: input ({l}, {c}), weights ({wc}, {k})"
            )));
        }
        if l + 2 * pad < k {
            return Err(TdaError::Shape("dwconv: kernel longer than padded input".into()));
        }
        let lo = l + 2 * pad + 1 - k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; lo * c];
        for o in 0..lo {
            for ch in 0..c {
                let mut acc = bv[ch];
                for j in 0..k {
                    let src = o + j;
                    if src >= pad && src - pad < l {
                        acc += wv[ch * k + j] * xv[(src - pad) * c + ch];
                    }
                }
                out[o * c + ch] = acc;
            }
        }
        let t = Tensor::from_vec(&[lo, c], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(t, Op::DwConvRows { x, w, b, pad }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean binary cross-entropy of logits `x` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(TdaError::Shape(format!(
                "bce: {} logits, {} targets",
                xv.len(),
                targets.len()
            )));
        }
        let total: f64 = xv.iter().zip(targets).map(|(&a, &t)| bce_logit(a, t)).sum();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(total / xv.len() as f64),
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn squared_error(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(TdaError::Shape("squared error: length mismatch".into()));
        }
        let total: f64 = xv.iter().zip(targets).map(|(a, t)| (a - t) * (a - t)).sum();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(total / xv.len() as f64),
            Op::SqErr {
                x,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Smooth-L1 (beta = 1) averaged over the elements where `mask` is set.
    /// Yields zero when the mask is empty.
    pub fn smooth_l1_masked(&mut self, x: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.len() != mask.len() {
            return Err(TdaError::Shape("smooth l1: length mismatch".into()));
        }
        let count = mask.iter().filter(|m| **m).count();
        let mut total = 0.0;
        for i in 0..xv.len() {
            if mask[i] {
                let d = (xv[i] - targets[i]).abs();
                total += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SmoothL1 {
                x,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_seeded(&[(loss, seed)])
            .expect("seed shaped like the loss")
    }

    /// Reverse sweep with upstream gradients injected at several nodes, as
    /// when this graph feeds another graph whose input gradients are known.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = None;
        for (v, t) in seeds {
            if t.shape() != self.shape(*v) {
                return Err(TdaError::Shape(format!(
                    "seed {:?} for node of shape {:?}",
                    t.shape(),
                    self.shape(*v)
                )));
            }
            if self.ng(*v) {
                self.acc(&mut grads, *v, t.clone());
                last = last.max(Some(v.0));
            }
        }
        let Some(last) = last else {
            return Ok(Gradients { grads });
        };
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.ng(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let like = |v: Var, data: Vec<f64>| Tensor::from_vec(self.shape(v), data).expect("shape");
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || like(*b, g.data().iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || {
                    like(*a, g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect())
                });
                self.acc_with(grads, *b, || {
                    like(*b, g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect())
                });
            }
            Op::AddRow(x, r) => {
                self.acc_with(grads, *x, || g.clone());
                self.acc_with(grads, *r, || {
                    let m = g.cols();
                    let mut acc = vec![0.0; m];
                    for (i, v) in g.data().iter().enumerate() {
                        acc[i % m] += v;
                    }
                    like(*r, acc)
                });
            }
            Op::MulRow(x, r) => {
                let m = g.cols();
                let rv = self.value(*r).data();
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, || {
                    like(*x, g.data().iter().enumerate().map(|(i, v)| v * rv[i % m]).collect())
                });
                self.acc_with(grads, *r, || {
                    let mut acc = vec![0.0; m];
                    for (i, v) in g.data().iter().enumerate() {
                        acc[i % m] += v * xv[i];
                    }
                    like(*r, acc)
                });
            }
            Op::Scale(x, s) => {
                self.acc_with(grads, *x, || like(*x, g.data().iter().map(|v| v * s).collect()));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                self.acc_with(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut da);
                    like(*a, da)
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut db);
                    like(*b, db)
                });
            }
            Op::Transpose(x) => {
                self.acc_with(grads, *x, || g.transpose2());
            }
            Op::Reshape(x) => {
                self.acc_with(grads, *x, || like(*x, g.data().to_vec()));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, || {
                    like(
                        *x,
                        g.data()
                            .iter()
                            .zip(xv)
                            .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
                            .collect(),
                    )
                });
            }
            Op::Sigmoid(x) => {
                self.acc_with(grads, *x, || {
                    like(
                        *x,
                        g.data()
                            .iter()
                            .zip(out.data())
                            .map(|(d, y)| d * y * (1.0 - y))
                            .collect(),
                    )
                });
            }
            Op::SoftmaxRows(x) => {
                self.acc_with(grads, *x, || {
                    let (n, m) = (out.rows(), out.cols());
                    let (y, d) = (out.data(), g.data());
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let dot: f64 = y[r.clone()].iter().zip(&d[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            dx[j] = y[j] * (d[j] - dot);
                        }
                    }
                    like(*x, dx)
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                self.acc_with(grads, *x, || {
                    let (n, m) = (out.rows(), out.cols());
                    let (y, d) = (out.data(), g.data());
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let md = d[r.clone()].iter().sum::<f64>() / m as f64;
                        let mdy = d[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in r {
                            dx[j] = inv_std[i] * (d[j] - md - y[j] * mdy);
                        }
                    }
                    like(*x, dx)
                });
            }
            Op::MeanRows(x) => {
                self.acc_with(grads, *x, || {
                    let (n, m) = (self.value(*x).rows(), self.value(*x).cols());
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] = g.data()[j] / n as f64;
                        }
                    }
                    like(*x, dx)
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc_with(grads, *p, || like(*p, g.data()[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let m = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc_with(grads, *p, || {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g.data()[i * m + offset..i * m + offset + w]);
                        }
                        like(*p, d)
                    });
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                self.acc_with(grads, *x, || {
                    let m = g.cols();
                    let mut d = vec![0.0; self.value(*x).len()];
                    d[start * m..start * m + g.len()].copy_from_slice(g.data());
                    like(*x, d)
                });
            }
            Op::SliceCols(x, start) => {
                self.acc_with(grads, *x, || {
                    let (n, w) = (g.rows(), g.cols());
                    let m = self.value(*x).cols();
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        d[i * m + start..i * m + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    like(*x, d)
                });
            }
            Op::Conv2d(rec) => {
                let xs = self.shape(rec.x);
                let ws = self.shape(rec.w);
                let geo = ConvGeometry::new(xs[0], xs[1], xs[2], ws[2], rec.stride, rec.pad);
                let (co, kk, p) = (ws[0], geo.patch_len(), geo.out_len());
                self.acc_with(grads, rec.w, || {
                    let mut dw = vec![0.0; co * kk];
                    gemm(co, p, kk, g.data(), false, &rec.cols, true, 0.0, &mut dw);
                    like(rec.w, dw)
                });
                self.acc_with(grads, rec.b, || {
                    let db = (0..co).map(|c| g.data()[c * p..(c + 1) * p].iter().sum()).collect();
                    like(rec.b, db)
                });
                self.acc_with(grads, rec.x, || {
                    let mut dcols = vec![0.0; kk * p];
                    gemm(
                        kk,
                        co,
                        p,
                        self.value(rec.w).data(),
                        true,
                        g.data(),
                        false,
                        0.0,
                        &mut dcols,
                    );
                    like(rec.x, geo.col2im(&dcols))
                });
            }
            Op::DwConvRows { x, w, b, pad } => {
                let (l, c) = (self.value(*x).rows(), self.value(*x).cols());
                let k = self.value(*w).cols();
                let lo = g.rows();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let d = g.data();
                self.acc_with(grads, *b, || {
                    let mut db = vec![0.0; c];
                    for o in 0..lo {
                        for ch in 0..c {
                            db[ch] += d[o * c + ch];
                        }
                    }
                    like(*b, db)
                });
                self.acc_with(grads, *w, || {
                    let mut dw = vec![0.0; c * k];
                    for o in 0..lo {
                        for j in 0..k {
                            let src = o + j;
                            if src >= *pad && src - pad < l {
                                for ch in 0..c {
                                    dw[ch * k + j] += d[o * c + ch] * xv[(src - pad) * c + ch];
                                }
                            }
                        }
                    }
                    like(*w, dw)
                });
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; l * c];
                    for o in 0..lo {
                        for j in 0..k {
                            let src = o + j;
                            if src >= *pad && src - pad < l {
                                for ch in 0..c {
                                    dx[(src - pad) * c + ch] += d[o * c + ch] * wv[ch * k + j];
                                }
                            }
                        }
                    }
                    like(*x, dx)
                });
            }
            Op::Sum(x) => {
                let s = g.item();
                self.acc_with(grads, *x, || Tensor::full(self.shape(*x), s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let s = g.item() / n;
                self.acc_with(grads, *x, || Tensor::full(self.shape(*x), s));
            }
            Op::BceLogits { x, targets } => {
                let s = g.item() / targets.len() as f64;
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, || {
                    like(*x, xv.iter().zip(targets).map(|(a, t)| s * (sigmoid(*a) - t)).collect())
                });
            }
            Op::SqErr { x, targets } => {
                let s = g.item() / targets.len() as f64;
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, || {
                    like(*x, xv.iter().zip(targets).map(|(a, t)| s * 2.0 * (a - t)).collect())
                });
            }
            Op::SmoothL1 {
                x,
                targets,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let s = g.item() / *count as f64;
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, || {
                    let d = (0..xv.len())
                        .map(|i| {
                            if !mask[i] {
                                return 0.0;
                            }
                            let diff = xv[i] - targets[i];
                            s * if diff.abs() < 1.0 { diff } else { diff.signum() }
                        })
                        .collect();
                    like(*x, d)
                });
            }
        }
    }

    /// Collects the gradient of every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|v| grads.wrt(v).cloned()))
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-(t ln s(x) + (1 - t) ln(1 - s(x)))`.
pub fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = o * self.stride + kk;
        (pos >= self.pad && pos - self.pad < limit).then(|| pos - self.pad)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * p];
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let Some(sy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.out_w {
                            if let Some(sx) = self.src(ox, kx, self.w) {
                                dst[oy * self.out_w + ox] = x[(ci * self.h + sy) * self.w + sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.out_len();
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let Some(sy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.out_w {
                            if let Some(sx) = self.src(ox, kx, self.w) {
                                x[(ci * self.h + sy) * self.w + sx] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
