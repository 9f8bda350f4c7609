//! A small reverse-mode tape over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`]
//! for every node that depends on a parameter or a gradient-tracked input.
//! Loss functions whose gradients are cheaper to write by hand enter the tape
//! through [`Graph::scalar_fn`] with precomputed local gradients.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors shared by every sub-network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<Vec<f64>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    ChannelMean(Var),
    ChannelStd {
        x: Var,
    },
    Grl {
        x: Var,
        lambda: f64,
    },
    L2Normalize {
        x: Var,
        eps: f64,
    },
    PoolCells {
        x: Var,
        groups: Vec<(usize, Vec<usize>)>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScalarFn {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    Combine(Vec<(Var, f64)>),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant input; gradients are not propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is wanted (e.g. for finite-difference checks).
    pub fn tracked_input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// Parameter used as a constant: no gradient flows into it.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Input, false)
    }

    /// 2-D convolution with square kernel. `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let plane = ho * wo;
        let mut out = vec![0.0; n * o * plane];
        let mut all_cols = Vec::with_capacity(n);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for img in 0..n {
                let src = &xv[img * c * h * wd..(img + 1) * c * h * wd];
                let cols = im2col(src, c, h, wd, k, stride, pad, ho, wo);
                let dst = &mut out[img * o * plane..(img + 1) * o * plane];
                for (oc, row) in dst.chunks_mut(plane).enumerate() {
                    row.fill(bv[oc]);
                }
                gemm(o, ckk, plane, wv, ckk, 1, &cols, plane, 1, dst, plane, 1.0);
                all_cols.push(cols);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(
            Tensor::from_vec(&[n, o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: all_cols,
            },
            tracked,
        )
    }

    /// `y = x Wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be 2-D");
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
            gemm(
                n,
                din,
                dout,
                self.value(x).data(),
                din,
                1,
                self.value(w).data(),
                1,
                din,
                &mut out,
                dout,
                1.0,
            );
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let t = self.tracked(x);
        self.push(v, Op::Relu(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let t = self.tracked(x);
        self.push(v, Op::Sigmoid(x), t)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(av.shape(), data);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    /// Concatenate 2-D tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2, "concat expects 2-D tensors");
                assert_eq!(s[0], n, "concat row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::from_vec(&[n, total], out), Op::Concat(parts.to_vec()), t)
    }

    /// Stack 2-D tensors with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).dim(1);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.dim(1), d, "concat_rows width mismatch");
            rows += v.dim(0);
            out.extend_from_slice(v.data());
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::from_vec(&[rows, d], out), Op::ConcatRows(parts.to_vec()), t)
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let plane = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = self.tracked(x);
        self.push(Tensor::from_vec(&[s[0], s[1]], data), Op::ChannelMean(x), t)
    }

    /// Spatial standard deviation per channel, `sqrt(var + eps)`: `[N, C, H, W] -> [N, C]`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Var {
        let s = self.value(x).shape().to_vec();
        let plane = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| {
                let m = ch.iter().sum::<f64>() / plane as f64;
                let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
                (var + eps).sqrt()
            })
            .collect();
        let t = self.tracked(x);
        self.push(Tensor::from_vec(&[s[0], s[1]], data), Op::ChannelStd { x }, t)
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.value(x).clone();
        let t = self.tracked(x);
        self.push(v, Op::Grl { x, lambda }, t)
    }

    /// Row-wise `x / (‖x‖ + eps)` for a 2-D tensor.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2);
        let d = xv.dim(1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n + eps;
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        let t = self.tracked(x);
        self.push(v, Op::L2Normalize { x, eps }, t)
    }

    /// Mean feature column over a set of cells per group.
    ///
    /// `x: [N, C, H, W]`; each group is `(image index, flat cell indices)`.
    /// Output is `[groups, C]`.
    pub fn pool_cells(&mut self, x: Var, groups: Vec<(usize, Vec<usize>)>) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; groups.len() * c];
        for (g, (img, cells)) in groups.iter().enumerate() {
            assert!(!cells.is_empty(), "pool_cells group {g} is empty");
            let base = img * c * plane;
            for ch in 0..c {
                let mut acc = 0.0;
                for &cell in cells {
                    acc += xv[base + ch * plane + cell];
                }
                out[g * c + ch] = acc / cells.len() as f64;
            }
        }
        let t = self.tracked(x);
        self.push(
            Tensor::from_vec(&[groups.len(), c], out),
            Op::PoolCells { x, groups },
            t,
        )
    }

    /// Gather rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let d = xv.dim(1);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(xv.row(r));
        }
        let t = self.tracked(x);
        self.push(Tensor::from_vec(&[rows.len(), d], out), Op::SelectRows { x, rows }, t)
    }

    /// A scalar-valued function evaluated outside the tape, entered with its
    /// gradient with respect to each input.
    pub fn scalar_fn(&mut self, value: f64, inputs: &[Var], grads: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (&i, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(i).shape(), g.shape(), "scalar_fn gradient shape");
        }
        let t = inputs.iter().any(|&i| self.tracked(i));
        self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                grads,
            },
            t,
        )
    }

    /// Weighted sum of equally shaped tensors.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            let val = self.value(v);
            assert_eq!(val.shape(), acc.shape(), "combine shape mismatch");
            for (a, b) in acc.data_mut().iter_mut().zip(val.data()) {
                *a += w * b;
            }
        }
        let t = terms.iter().any(|&(v, _)| self.tracked(v));
        self.push(acc, Op::Combine(terms.to_vec()), t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let t = self.tracked(x);
        self.push(v, Op::Sum(x), t)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, cols, g, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.tracked(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, g.data(), dout, 1, wv.data(), din, 1, &mut dx, din, 0.0);
                    accumulate(grads, *x, Tensor::from_vec(&[n, din], dx));
                }
                if self.tracked(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, g.data(), 1, dout, xv.data(), din, 1, &mut dw, din, 0.0);
                    accumulate(grads, *w, Tensor::from_vec(&[dout, din], dw));
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[dout], db));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &a)| if a > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Sigmoid(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(node.value.shape(), data));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), data));
                }
                if self.tracked(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), data));
                }
            }
            Op::Concat(parts) => {
                let total = g.dim(1);
                let n = g.dim(0);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dim(1);
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(&[n, w], d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.tracked(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        accumulate(grads, p, Tensor::from_vec(self.value(p).shape(), d));
                    }
                    offset += len;
                }
            }
            Op::ChannelMean(x) => {
                let s = self.value(*x).shape();
                let plane = s[2] * s[3];
                let mut d = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                accumulate(grads, *x, Tensor::from_vec(s, d));
            }
            Op::ChannelStd { x } => {
                let xv = self.value(*x);
                let plane = xv.dim(2) * xv.dim(3);
                let mut d = Vec::with_capacity(xv.len());
                for ((ch, &gv), &sd) in xv.data().chunks(plane).zip(g.data()).zip(node.value.data()) {
                    let m = ch.iter().sum::<f64>() / plane as f64;
                    let k = gv / (plane as f64 * sd);
                    d.extend(ch.iter().map(|v| k * (v - m)));
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), d));
            }
            Op::Grl { x, lambda } => {
                let mut d = g.clone();
                d.scale(-lambda);
                accumulate(grads, *x, d);
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.value(*x);
                let dim = xv.dim(1);
                let mut d = Vec::with_capacity(xv.len());
                for (row, grow) in xv.data().chunks(dim).zip(g.data().chunks(dim)) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let denom = n + eps;
                    if n == 0.0 {
                        d.extend(grow.iter().map(|gv| gv / denom));
                        continue;
                    }
                    let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let k = dot / (n * denom * denom);
                    d.extend(row.iter().zip(grow).map(|(a, gv)| gv / denom - k * a));
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), d));
            }
            Op::PoolCells { x, groups } => {
                let s = self.value(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut d = Tensor::zeros(s);
                let dd = d.data_mut();
                for (gi, (img, cells)) in groups.iter().enumerate() {
                    let base = img * c * plane;
                    let inv = 1.0 / cells.len() as f64;
                    for ch in 0..c {
                        let gv = g.data()[gi * c + ch] * inv;
                        for &cell in cells {
                            dd[base + ch * plane + cell] += gv;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::SelectRows { x, rows } => {
                let s = self.value(*x).shape();
                let dim = s[1];
                let mut d = Tensor::zeros(s);
                for (i, &r) in rows.iter().enumerate() {
                    for k in 0..dim {
                        d.data_mut()[r * dim + k] += g.data()[i * dim + k];
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ScalarFn { inputs, grads: local } => {
                let up = g.item();
                for (&i, lg) in inputs.iter().zip(local) {
                    if self.tracked(i) {
                        let mut d = lg.clone();
                        d.scale(up);
                        accumulate(grads, i, d);
                    }
                }
            }
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    if self.tracked(v) {
                        let mut d = g.clone();
                        d.scale(w);
                        accumulate(grads, v, d);
                    }
                }
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape();
                accumulate(grads, *x, Tensor::full(s, g.item()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: &[Vec<f64>],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = (g.dim(2), g.dim(3));
        let plane = ho * wo;
        let ckk = c * k * k;
        let gd = g.data();
        if self.tracked(w) {
            let mut dw = vec![0.0; o * ckk];
            for (img, col) in cols.iter().enumerate() {
                let go = &gd[img * o * plane..(img + 1) * o * plane];
                gemm(o, plane, ckk, go, plane, 1, col, 1, plane, &mut dw, ckk, 1.0);
            }
            accumulate(grads, w, Tensor::from_vec(&ws, dw));
        }
        if self.tracked(b) {
            let mut db = vec![0.0; o];
            for img in 0..n {
                for (oc, d) in db.iter_mut().enumerate() {
                    let start = (img * o + oc) * plane;
                    *d += gd[start..start + plane].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, Tensor::from_vec(&[o], db));
        }
        if self.tracked(x) {
            let wv = self.value(w).data();
            let mut dx = vec![0.0; n * c * h * wd];
            let mut dcols = vec![0.0; ckk * plane];
            for img in 0..n {
                let go = &gd[img * o * plane..(img + 1) * o * plane];
                gemm(ckk, o, plane, wv, 1, ckk, go, plane, 1, &mut dcols, plane, 0.0);
                let dst = &mut dx[img * c * h * wd..(img + 1) * c * h * wd];
                col2im(&dcols, dst, c, h, wd, k, stride, pad, ho, wo);
            }
            accumulate(grads, x, Tensor::from_vec(&xs, dx));
        }
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each parameter referenced on the tape; parameters used
    /// more than once have their contributions summed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
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

/// `c = a·b + beta·c` for row-major slices described by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let plane = ho * wo;
    let mut cols = vec![0.0; c * k * k * plane];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dst: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
