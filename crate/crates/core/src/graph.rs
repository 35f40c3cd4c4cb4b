//! Reverse-mode automatic differentiation over dense multi-dimensional arrays.
//!
//! A [`Graph`] records one forward pass as a flat tape of nodes; insertion
//! order is a topological order, so [`Graph::backward`] replays the tape in
//! reverse exactly once. Graphs are built per forward pass and dropped after
//! the gradients have been read out. A graph and its tensors are confined to
//! one thread; distinct graphs may run on distinct threads.

use crate::error::{Error, Result};
use crate::tensor::{strides, Elem, TensorData};

/// Handle to a node inside one [`Graph`]. Only valid for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    ScaleRows { x: usize, s: usize },
    BroadcastRow { row: usize, n: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Sigmoid { x: usize },
    Gelu { x: usize },
    Log { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize, temp: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterRows { x: usize, idx: Vec<usize> },
    StopGrad,
    MeanAxis { x: usize, axis: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Conv3d { x: usize, w: usize, b: usize },
    Upsample2 { x: usize },
}

struct Node<T> {
    value: TensorData<T>,
    op: Op,
    requires_grad: bool,
    /// Op-specific context saved for backward (layer norm: per-row mean/rstd).
    saved: Vec<T>,
}

/// Dynamic computation graph; one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of the forward pass recorded so far:
    /// every matmul contributes `batch * m * k * n` and every convolution
    /// `cout * cin * kernel_volume * output_voxels`. Elementwise ops,
    /// reductions, and data movement count zero.
    pub fn mac_count(&self) -> u64 {
        let mut total = 0u64;
        for node in &self.nodes {
            match node.op {
                Op::Matmul { a, b } => {
                    let ash = self.nodes[a].value.shape();
                    let bsh = self.nodes[b].value.shape();
                    let rank = ash.len();
                    let batch: u64 = ash[..rank - 2].iter().map(|&d| d as u64).product();
                    let (m, k, n) =
                        (ash[rank - 2] as u64, ash[rank - 1] as u64, bsh[rank - 1] as u64);
                    total += batch * m * k * n;
                }
                Op::Conv3d { x, w, .. } => {
                    let xsh = self.nodes[x].value.shape();
                    let wsh = self.nodes[w].value.shape();
                    let voxels = (xsh[1] * xsh[2] * xsh[3]) as u64;
                    let kernel = (wsh[2] * wsh[3] * wsh[4]) as u64;
                    total += wsh[0] as u64 * wsh[1] as u64 * kernel * voxels;
                }
                _ => {}
            }
        }
        total
    }

    fn push(&mut self, value: TensorData<T>, op: Op, requires_grad: bool, saved: Vec<T>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    /// Insert a differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: TensorData<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, Vec::new())
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: TensorData<T>) -> Var {
        self.push(value, Op::Leaf, false, Vec::new())
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// Zeros if `v` requires grad but was not reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ── shape plumbing ───────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", xv.shape(), shape),
            });
        }
        let value = TensorData::new(shape, xv.data().to_vec())?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape { x: x.0 }, rg, Vec::new()))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let nd = xv.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Param { what: format!("permute axes {axes:?} invalid for rank {nd}") });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xv.shape()[a]).collect();
        let out = permute_raw(xv, axes);
        let rg = self.nodes[x.0].requires_grad;
        let value = TensorData::new(out_shape, out)?;
        Ok(self.push(value, Op::Permute { x: x.0, axes: axes.to_vec() }, rg, Vec::new()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Param { what: "concat of zero parts".into() });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Param { what: format!("concat axis {axis} out of rank {}", first.len()) });
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("part {:?} incompatible with {:?} on axis {axis}", s, first),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let mut offset = 0usize;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let len_a = pv.shape()[axis];
            let src = pv.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len_a * inner;
                out[dst_base..dst_base + len_a * inner]
                    .copy_from_slice(&src[src_base..src_base + len_a * inner]);
            }
            offset += len_a;
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        let value = TensorData::new(out_shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis }, rg, Vec::new()))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading batch extents must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 || ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2]
        {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("incompatible operand shapes {ash:?} and {bsh:?}"),
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner extents differ: {ash:?} vs {bsh:?}"),
            });
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out = vec![T::ZERO; batch * m * n];
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for bi in 0..batch {
            mm_nn(&mut out[bi * m * n..(bi + 1) * m * n], &ad[bi * m * k..], &bd[bi * k * n..], m, k, n);
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let value = TensorData::new(out_shape, out)?;
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, rg, Vec::new()))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (ash, bsh) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if ash != bsh {
            return Err(Error::Shape {
                op: op_name,
                detail: format!("operand shapes {ash:?} and {bsh:?} differ"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let value = TensorData::new(shape, out)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg, Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let value = TensorData::new(shape, out)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, rg, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let value = TensorData::new(shape, out)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg, Vec::new()))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let value = TensorData::new(shape, out)?;
        Ok(self.push(value, Op::Div { a: a.0, b: b.0 }, rg, Vec::new()))
    }

    /// Broadcast-add a `[c]` row over the last axis of `x: [.., c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xsh, rsh) = (self.nodes[x.0].value.shape().to_vec(), self.nodes[row.0].value.shape());
        let c = *xsh.last().unwrap_or(&0);
        if rsh != [c] {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("row shape {rsh:?} does not match last axis of {xsh:?}"),
            });
        }
        let rows = self.nodes[x.0].value.numel() / c;
        let mut out = self.nodes[x.0].value.data().to_vec();
        let rowd = self.nodes[row.0].value.data();
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = out[r * c + j] + rowd[j];
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[row.0].requires_grad;
        let value = TensorData::new(xsh, out)?;
        Ok(self.push(value, Op::AddRow { x: x.0, row: row.0 }, rg, Vec::new()))
    }

    /// Scale each row of `x: [r, c]` by the matching entry of `s: [r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let ssh = self.nodes[s.0].value.shape();
        if xsh.len() != 2 || ssh != [xsh[0]] {
            return Err(Error::Shape {
                op: "scale_rows",
                detail: format!("x {xsh:?} and scales {ssh:?} incompatible"),
            });
        }
        let (r, c) = (xsh[0], xsh[1]);
        let mut out = self.nodes[x.0].value.data().to_vec();
        let sd = self.nodes[s.0].value.data();
        for i in 0..r {
            let si = sd[i];
            for j in 0..c {
                out[i * c + j] = out[i * c + j] * si;
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[s.0].requires_grad;
        let value = TensorData::new(xsh, out)?;
        Ok(self.push(value, Op::ScaleRows { x: x.0, s: s.0 }, rg, Vec::new()))
    }

    /// Repeat a `[c]` row `n` times into `[n, c]`.
    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Result<Var> {
        let rsh = self.nodes[row.0].value.shape().to_vec();
        if rsh.len() != 1 {
            return Err(Error::Shape {
                op: "broadcast_row",
                detail: format!("expected rank-1 row, got {rsh:?}"),
            });
        }
        let c = rsh[0];
        let rowd = self.nodes[row.0].value.data();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(rowd);
        }
        let rg = self.nodes[row.0].requires_grad;
        let value = TensorData::new(vec![n, c], out)?;
        Ok(self.push(value, Op::BroadcastRow { row: row.0, n }, rg, Vec::new()))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cf = T::from_f64(c);
        let out: Vec<T> = self.nodes[x.0].value.data().iter().map(|&v| v * cf).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(TensorData::new(shape, out).expect("same numel"), Op::Scale { x: x.0, c }, rg, Vec::new())
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cf = T::from_f64(c);
        let out: Vec<T> = self.nodes[x.0].value.data().iter().map(|&v| v + cf).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(TensorData::new(shape, out).expect("same numel"), Op::AddScalar { x: x.0 }, rg, Vec::new())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.nodes[x.0].value.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(TensorData::new(shape, out).expect("same numel"), Op::Sigmoid { x: x.0 }, rg, Vec::new())
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.nodes[x.0].value.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(TensorData::new(shape, out).expect("same numel"), Op::Gelu { x: x.0 }, rg, Vec::new())
    }

    /// Natural log. Every element must be strictly positive; callers clamp first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.nodes[x.0].value.data().iter().find(|v| **v <= T::ZERO) {
            return Err(Error::Domain { what: format!("log of non-positive value {v}") });
        }
        let out: Vec<T> = self.nodes[x.0].value.data().iter().map(|&v| v.ln()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(TensorData::new(shape, out)?, Op::Log { x: x.0 }, rg, Vec::new()))
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Param { what: format!("clamp bounds inverted: [{lo}, {hi}]") });
        }
        let (lot, hit) = (T::from_f64(lo), T::from_f64(hi));
        let out: Vec<T> =
            self.nodes[x.0].value.data().iter().map(|&v| v.maximum(lot).minimum(hit)).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(TensorData::new(shape, out)?, Op::Clamp { x: x.0, lo, hi }, rg, Vec::new()))
    }

    /// Temperature softmax along `axis`: `softmax(x / temp)`.
    pub fn softmax(&mut self, x: Var, axis: usize, temp: f64) -> Result<Var> {
        if temp <= 0.0 {
            return Err(Error::Param { what: format!("softmax temperature must be positive, got {temp}") });
        }
        let xv = &self.nodes[x.0].value;
        if axis >= xv.shape().len() {
            return Err(Error::Param { what: format!("softmax axis {axis} out of rank {}", xv.shape().len()) });
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let tinv = T::from_f64(1.0 / temp);
        let xd = xv.data();
        let mut out = vec![T::ZERO; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = xd[base];
                for k in 1..len {
                    let v = xd[base + k * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::ZERO;
                for k in 0..len {
                    let e = ((xd[base + k * inner] - mx) * tinv).exp();
                    out[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[base + k * inner] = out[base + k * inner] / sum;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(TensorData::new(shape, out)?, Op::Softmax { x: x.0, axis, temp }, rg, Vec::new()))
    }

    /// Layer normalization over the last axis, then affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param { what: format!("layer_norm eps must be positive, got {eps}") });
        }
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let c = *xsh.last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if self.nodes[gain.0].value.shape() != [c] || self.nodes[bias.0].value.shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} do not match last axis of {:?}",
                    self.nodes[gain.0].value.shape(),
                    self.nodes[bias.0].value.shape(),
                    xsh
                ),
            });
        }
        let rows = self.nodes[x.0].value.numel() / c;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gain.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![T::ZERO; xd.len()];
        let mut saved = Vec::with_capacity(2 * rows);
        let inv_c = T::from_f64(1.0 / c as f64);
        let epst = T::from_f64(eps);
        for r in 0..rows {
            let xr = &xd[r * c..(r + 1) * c];
            let mu = xr.iter().copied().sum::<T>() * inv_c;
            let mut var = T::ZERO;
            for &v in xr {
                let d = v - mu;
                var += d * d;
            }
            var = var * inv_c;
            let rstd = T::ONE / (var + epst).sqrt();
            for j in 0..c {
                let xhat = (xr[j] - mu) * rstd;
                out[r * c + j] = xhat * gd[j] + bd[j];
            }
            saved.push(mu);
            saved.push(rstd);
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        let value = TensorData::new(xsh, out)?;
        Ok(self.push(value, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 }, rg, saved))
    }

    // ── row selection ────────────────────────────────────────────────

    /// Select rows of `x` (first axis) in the given order. Indices must be
    /// unique and in range.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let rows = *xsh.first().ok_or_else(|| Error::Shape {
            op: "gather_rows",
            detail: "rank-0 input".into(),
        })?;
        check_unique_in_range(idx, rows)?;
        let rlen: usize = xsh[1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * rlen);
        for &i in idx {
            out.extend_from_slice(&xd[i * rlen..(i + 1) * rlen]);
        }
        let mut out_shape = xsh.clone();
        out_shape[0] = idx.len();
        let rg = self.nodes[x.0].requires_grad;
        let value = TensorData::new(out_shape, out)?;
        Ok(self.push(value, Op::GatherRows { x: x.0, idx: idx.to_vec() }, rg, Vec::new()))
    }

    /// Place rows of `x` at the given first-axis positions of a zero tensor
    /// with `rows_out` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows_out: usize) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let rows_in = *xsh.first().ok_or_else(|| Error::Shape {
            op: "scatter_rows",
            detail: "rank-0 input".into(),
        })?;
        if idx.len() != rows_in {
            return Err(Error::Index {
                what: format!("scatter of {rows_in} rows given {} indices", idx.len()),
            });
        }
        check_unique_in_range(idx, rows_out)?;
        let rlen: usize = xsh[1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; rows_out * rlen];
        for (r, &i) in idx.iter().enumerate() {
            out[i * rlen..(i + 1) * rlen].copy_from_slice(&xd[r * rlen..(r + 1) * rlen]);
        }
        let mut out_shape = xsh.clone();
        out_shape[0] = rows_out;
        let rg = self.nodes[x.0].requires_grad;
        let value = TensorData::new(out_shape, out)?;
        Ok(self.push(value, Op::ScatterRows { x: x.0, idx: idx.to_vec() }, rg, Vec::new()))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGrad, false, Vec::new())
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        if axis >= xsh.len() {
            return Err(Error::Param { what: format!("mean axis {axis} out of rank {}", xsh.len()) });
        }
        let (outer, len, inner) = axis_split(&xsh, axis);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; outer * inner];
        let inv = T::from_f64(1.0 / len as f64);
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let mut out_shape = xsh.clone();
        out_shape.remove(axis);
        let rg = self.nodes[x.0].requires_grad;
        let value = TensorData::new(out_shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x: x.0, axis }, rg, Vec::new()))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(TensorData::scalar(s), Op::SumAll { x: x.0 }, rg, Vec::new())
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            TensorData::scalar(s * T::from_f64(1.0 / n as f64)),
            Op::MeanAll { x: x.0 },
            rg,
            Vec::new(),
        )
    }

    // ── spatial ops ──────────────────────────────────────────────────

    /// 3D convolution, stride 1, odd kernel, same padding.
    /// `x: [c_in, X, Y, Z]`, `w: [c_out, c_in, k, k, k]`, `b: [c_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let wsh = self.nodes[w.0].value.shape().to_vec();
        let bsh = self.nodes[b.0].value.shape().to_vec();
        if xsh.len() != 4 || wsh.len() != 5 || wsh[1] != xsh[0] || wsh[2] != wsh[3] || wsh[3] != wsh[4] {
            return Err(Error::Shape {
                op: "conv3d",
                detail: format!("input {xsh:?} vs weight {wsh:?}"),
            });
        }
        let k = wsh[2];
        if k % 2 == 0 {
            return Err(Error::Param { what: format!("conv3d kernel extent must be odd, got {k}") });
        }
        if bsh != [wsh[0]] {
            return Err(Error::Shape {
                op: "conv3d",
                detail: format!("bias {bsh:?} vs weight {wsh:?}"),
            });
        }
        let (cin, xs, ys, zs) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let cout = wsh[0];
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::ZERO; cout * xs * ys * zs];
        conv3d_forward(&mut out, xd, wd, bd, cin, cout, xs, ys, zs, k);
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        let value = TensorData::new(vec![cout, xs, ys, zs], out)?;
        Ok(self.push(value, Op::Conv3d { x: x.0, w: w.0, b: b.0 }, rg, Vec::new()))
    }

    /// Nearest-neighbor x2 upsampling: `[c, X, Y, Z] -> [c, 2X, 2Y, 2Z]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xsh = self.nodes[x.0].value.shape().to_vec();
        if xsh.len() != 4 {
            return Err(Error::Shape {
                op: "upsample2",
                detail: format!("expected rank-4 volume, got {xsh:?}"),
            });
        }
        let (c, xs, ys, zs) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; c * 8 * xs * ys * zs];
        let (ox, oy, oz) = (2 * xs, 2 * ys, 2 * zs);
        for ci in 0..c {
            for xo in 0..ox {
                for yo in 0..oy {
                    let in_base = ((ci * xs + xo / 2) * ys + yo / 2) * zs;
                    let out_base = ((ci * ox + xo) * oy + yo) * oz;
                    for zo in 0..oz {
                        out[out_base + zo] = xd[in_base + zo / 2];
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let value = TensorData::new(vec![c, ox, oy, oz], out)?;
        Ok(self.push(value, Op::Upsample2 { x: x.0 }, rg, Vec::new()))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// reachable node with `requires_grad`; resets previous gradients first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract {
                what: format!(
                    "backward requires a scalar loss, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        // Reachable-but-unvisited parameters read back as zeros.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.grads[i].is_none() {
                if let Op::Leaf = self.nodes[i].op {
                    self.grads[i] = Some(vec![T::ZERO; self.nodes[i].value.numel()]);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, node: usize, delta: &[T]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let slot = &mut self.grads[node];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add { a, b } => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Sub { a, b } => {
                self.accum(a, g);
                if self.nodes[b].requires_grad {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accum(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data();
                    let da: Vec<T> = g.iter().zip(bv).map(|(&gv, &v)| gv * v).collect();
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data();
                    let db: Vec<T> = g.iter().zip(av).map(|(&gv, &v)| gv * v).collect();
                    self.accum(b, &db);
                }
            }
            Op::Div { a, b } => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data();
                    let da: Vec<T> = g.iter().zip(bv).map(|(&gv, &v)| gv / v).collect();
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<T> = {
                        let av = self.nodes[a].value.data();
                        let bv = self.nodes[b].value.data();
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&gv, (&an, &bn))| -gv * an / (bn * bn))
                            .collect()
                    };
                    self.accum(b, &db);
                }
            }
            Op::AddRow { x, row } => {
                self.accum(x, g);
                if self.nodes[row].requires_grad {
                    let c = self.nodes[row].value.numel();
                    let mut dr = vec![T::ZERO; c];
                    for (pos, &gv) in g.iter().enumerate() {
                        dr[pos % c] += gv;
                    }
                    self.accum(row, &dr);
                }
            }
            Op::ScaleRows { x, s } => {
                let (r, c) = {
                    let sh = self.nodes[x].value.shape();
                    (sh[0], sh[1])
                };
                if self.nodes[x].requires_grad {
                    let sd = self.nodes[s].value.data();
                    let mut dx = vec![T::ZERO; r * c];
                    for i2 in 0..r {
                        let si = sd[i2];
                        for j in 0..c {
                            dx[i2 * c + j] = g[i2 * c + j] * si;
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.nodes[s].requires_grad {
                    let xd = self.nodes[x].value.data();
                    let mut ds = vec![T::ZERO; r];
                    for i2 in 0..r {
                        let mut acc = T::ZERO;
                        for j in 0..c {
                            acc += g[i2 * c + j] * xd[i2 * c + j];
                        }
                        ds[i2] = acc;
                    }
                    self.accum(s, &ds);
                }
            }
            Op::BroadcastRow { row, n } => {
                if self.nodes[row].requires_grad {
                    let c = self.nodes[row].value.numel();
                    let mut dr = vec![T::ZERO; c];
                    for r in 0..n {
                        for j in 0..c {
                            dr[j] += g[r * c + j];
                        }
                    }
                    self.accum(row, &dr);
                }
            }
            Op::Scale { x, c } => {
                let cf = T::from_f64(c);
                let dx: Vec<T> = g.iter().map(|&v| v * cf).collect();
                self.accum(x, &dx);
            }
            Op::AddScalar { x } => {
                self.accum(x, g);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<T> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::ONE - yv)).collect();
                self.accum(x, &dx);
            }
            Op::Gelu { x } => {
                let xv = self.nodes[x].value.data();
                let dx: Vec<T> = g.iter().zip(xv).map(|(&gv, &v)| gv * gelu_grad_scalar(v)).collect();
                self.accum(x, &dx);
            }
            Op::Log { x } => {
                let xv = self.nodes[x].value.data();
                let dx: Vec<T> = g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect();
                self.accum(x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let (lot, hit) = (T::from_f64(lo), T::from_f64(hi));
                let xv = self.nodes[x].value.data();
                let dx: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v >= lot && v <= hit { gv } else { T::ZERO })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Softmax { x, axis, temp } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = axis_split(self.nodes[i].value.shape(), axis);
                let tinv = T::from_f64(1.0 / temp);
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let mut dot = T::ZERO;
                        for k in 0..len {
                            let p = base + k * inner;
                            dot += g[p] * y[p];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            dx[p] = y[p] * (g[p] - dot) * tinv;
                        }
                    }
                }
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let c = *self.nodes[i].value.shape().last().expect("validated");
                let rows = self.nodes[i].value.numel() / c;
                let xd = self.nodes[x].value.data();
                let gd = self.nodes[gain].value.data();
                let saved = &self.nodes[i].saved;
                let inv_c = T::from_f64(1.0 / c as f64);
                let mut dx = vec![T::ZERO; rows * c];
                let mut dgain = vec![T::ZERO; c];
                let mut dbias = vec![T::ZERO; c];
                for r in 0..rows {
                    let mu = saved[2 * r];
                    let rstd = saved[2 * r + 1];
                    let grow = &g[r * c..(r + 1) * c];
                    let xrow = &xd[r * c..(r + 1) * c];
                    let mut mean_dxhat = T::ZERO;
                    let mut mean_dxhat_xhat = T::ZERO;
                    for j in 0..c {
                        let xhat = (xrow[j] - mu) * rstd;
                        let dxhat = grow[j] * gd[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    mean_dxhat = mean_dxhat * inv_c;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_c;
                    for j in 0..c {
                        let xhat = (xrow[j] - mu) * rstd;
                        let dxhat = grow[j] * gd[j];
                        dx[r * c + j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * rstd;
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dgain);
                self.accum(bias, &dbias);
            }
            Op::Matmul { a, b } => {
                let ash = self.nodes[a].value.shape().to_vec();
                let bsh = self.nodes[b].value.shape().to_vec();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].value.data();
                    let mut da = vec![T::ZERO; batch * m * k];
                    for bi in 0..batch {
                        mm_nt(&mut da[bi * m * k..], &g[bi * m * n..], &bd[bi * k * n..], m, n, k);
                    }
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].value.data();
                    let mut db = vec![T::ZERO; batch * k * n];
                    for bi in 0..batch {
                        mm_tn(&mut db[bi * k * n..], &ad[bi * m * k..], &g[bi * m * n..], m, k, n);
                    }
                    self.accum(b, &db);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.nodes[x].requires_grad {
                    let rlen = self.nodes[x].value.numel() / self.nodes[x].value.shape()[0];
                    let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..rlen {
                            dx[src * rlen + j] += g[r * rlen + j];
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::ScatterRows { x, idx } => {
                if self.nodes[x].requires_grad {
                    let rlen = self.nodes[x].value.numel() / self.nodes[x].value.shape()[0].max(1);
                    let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
                    for (r, &dst) in idx.iter().enumerate() {
                        dx[r * rlen..(r + 1) * rlen].copy_from_slice(&g[dst * rlen..(dst + 1) * rlen]);
                    }
                    self.accum(x, &dx);
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.nodes[x].requires_grad {
                    let xsh = self.nodes[x].value.shape().to_vec();
                    let (outer, len, inner) = axis_split(&xsh, axis);
                    let inv = T::from_f64(1.0 / len as f64);
                    let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for inn in 0..inner {
                                dx[base + inn] = g[o * inner + inn] * inv;
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::SumAll { x } => {
                if self.nodes[x].requires_grad {
                    let dx = vec![g[0]; self.nodes[x].value.numel()];
                    self.accum(x, &dx);
                }
            }
            Op::MeanAll { x } => {
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].value.numel();
                    let dx = vec![g[0] * T::from_f64(1.0 / n as f64); n];
                    self.accum(x, &dx);
                }
            }
            Op::Concat { parts, axis } => {
                let osh = self.nodes[i].value.shape().to_vec();
                let outer: usize = osh[..axis].iter().product();
                let inner: usize = osh[axis + 1..].iter().product();
                let total_a = osh[axis];
                let mut offset = 0usize;
                for p in parts {
                    let psh = self.nodes[p].value.shape().to_vec();
                    let len_a = psh[axis];
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![T::ZERO; self.nodes[p].value.numel()];
                        for o in 0..outer {
                            let src_base = (o * total_a + offset) * inner;
                            let dst_base = o * len_a * inner;
                            dp[dst_base..dst_base + len_a * inner]
                                .copy_from_slice(&g[src_base..src_base + len_a * inner]);
                        }
                        self.accum(p, &dp);
                    }
                    offset += len_a;
                }
            }
            Op::Reshape { x } => {
                self.accum(x, g);
            }
            Op::Permute { x, axes } => {
                if self.nodes[x].requires_grad {
                    let mut inv = vec![0usize; axes.len()];
                    for (pos, &a) in axes.iter().enumerate() {
                        inv[a] = pos;
                    }
                    let gt = TensorData::new(self.nodes[i].value.shape().to_vec(), g.to_vec())
                        .expect("gradient matches node shape");
                    let dx = permute_raw(&gt, &inv);
                    self.accum(x, &dx);
                }
            }
            Op::Conv3d { x, w, b } => {
                let xsh = self.nodes[x].value.shape().to_vec();
                let wsh = self.nodes[w].value.shape().to_vec();
                let (cin, xs, ys, zs) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                let (cout, k) = (wsh[0], wsh[2]);
                if self.nodes[x].requires_grad {
                    let wd = self.nodes[w].value.data();
                    let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
                    conv3d_backward_input(&mut dx, g, wd, cin, cout, xs, ys, zs, k);
                    self.accum(x, &dx);
                }
                if self.nodes[w].requires_grad {
                    let xd = self.nodes[x].value.data();
                    let mut dw = vec![T::ZERO; self.nodes[w].value.numel()];
                    conv3d_backward_weight(&mut dw, g, xd, cin, cout, xs, ys, zs, k);
                    self.accum(w, &dw);
                }
                if self.nodes[b].requires_grad {
                    let plane = xs * ys * zs;
                    let mut db = vec![T::ZERO; cout];
                    for co in 0..cout {
                        db[co] = g[co * plane..(co + 1) * plane].iter().copied().sum();
                    }
                    self.accum(b, &db);
                }
            }
            Op::Upsample2 { x } => {
                if self.nodes[x].requires_grad {
                    let xsh = self.nodes[x].value.shape().to_vec();
                    let (c, xs, ys, zs) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                    let (ox, oy, oz) = (2 * xs, 2 * ys, 2 * zs);
                    let mut dx = vec![T::ZERO; self.nodes[x].value.numel()];
                    for ci in 0..c {
                        for xo in 0..ox {
                            for yo in 0..oy {
                                let in_base = ((ci * xs + xo / 2) * ys + yo / 2) * zs;
                                let out_base = ((ci * ox + xo) * oy + yo) * oz;
                                for zo in 0..oz {
                                    dx[in_base + zo / 2] += g[out_base + zo];
                                }
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
            }
        }
        Ok(())
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// `c[m,n] += a[m,k] * b[k,n]`
fn mm_nn<T: Elem>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn mm_nt<T: Elem>(c: &mut [T], a: &[T], b: &[T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::ZERO;
            for p in 0..n {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn mm_tn<T: Elem>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

fn conv3d_forward<T: Elem>(
    out: &mut [T],
    x: &[T],
    w: &[T],
    b: &[T],
    cin: usize,
    cout: usize,
    xs: usize,
    ys: usize,
    zs: usize,
    k: usize,
) {
    let plane = xs * ys * zs;
    let pad = (k / 2) as isize;
    for co in 0..cout {
        let orow = &mut out[co * plane..(co + 1) * plane];
        let bv = b[co];
        for v in orow.iter_mut() {
            *v = bv;
        }
    }
    for co in 0..cout {
        for ci in 0..cin {
            let wbase = ((co * cin + ci) * k * k) * k;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((xs as isize - dx).min(xs as isize)) as usize;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((ys as isize - dy).min(ys as isize)) as usize;
                    for kz in 0..k {
                        let dz = kz as isize - pad;
                        let z_lo = (-dz).max(0) as usize;
                        let z_hi = ((zs as isize - dz).min(zs as isize)) as usize;
                        if z_lo >= z_hi {
                            continue;
                        }
                        let wv = w[wbase + (kx * k + ky) * k + kz];
                        let zi_lo = (z_lo as isize + dz) as usize;
                        let run = z_hi - z_lo;
                        for xo in x_lo..x_hi {
                            let xi = (xo as isize + dx) as usize;
                            for yo in y_lo..y_hi {
                                let yi = (yo as isize + dy) as usize;
                                let obase = co * plane + (xo * ys + yo) * zs;
                                let ibase = ci * plane + (xi * ys + yi) * zs;
                                let orow = &mut out[obase + z_lo..obase + z_lo + run];
                                let irow = &x[ibase + zi_lo..ibase + zi_lo + run];
                                for (ov, &iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_input<T: Elem>(
    dx: &mut [T],
    dout: &[T],
    w: &[T],
    cin: usize,
    cout: usize,
    xs: usize,
    ys: usize,
    zs: usize,
    k: usize,
) {
    let plane = xs * ys * zs;
    let pad = (k / 2) as isize;
    for co in 0..cout {
        for ci in 0..cin {
            let wbase = ((co * cin + ci) * k * k) * k;
            for kx in 0..k {
                let dxo = kx as isize - pad;
                let x_lo = (-dxo).max(0) as usize;
                let x_hi = ((xs as isize - dxo).min(xs as isize)) as usize;
                for ky in 0..k {
                    let dyo = ky as isize - pad;
                    let y_lo = (-dyo).max(0) as usize;
                    let y_hi = ((ys as isize - dyo).min(ys as isize)) as usize;
                    for kz in 0..k {
                        let dzo = kz as isize - pad;
                        let z_lo = (-dzo).max(0) as usize;
                        let z_hi = ((zs as isize - dzo).min(zs as isize)) as usize;
                        if z_lo >= z_hi {
                            continue;
                        }
                        let wv = w[wbase + (kx * k + ky) * k + kz];
                        let zi_lo = (z_lo as isize + dzo) as usize;
                        let run = z_hi - z_lo;
                        for xo in x_lo..x_hi {
                            let xi = (xo as isize + dxo) as usize;
                            for yo in y_lo..y_hi {
                                let yi = (yo as isize + dyo) as usize;
                                let gbase = co * plane + (xo * ys + yo) * zs;
                                let ibase = ci * plane + (xi * ys + yi) * zs;
                                let grow = &dout[gbase + z_lo..gbase + z_lo + run];
                                let dirow = &mut dx[ibase + zi_lo..ibase + zi_lo + run];
                                for (dv, &gv) in dirow.iter_mut().zip(grow) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_weight<T: Elem>(
    dw: &mut [T],
    dout: &[T],
    x: &[T],
    cin: usize,
    cout: usize,
    xs: usize,
    ys: usize,
    zs: usize,
    k: usize,
) {
    let plane = xs * ys * zs;
    let pad = (k / 2) as isize;
    for co in 0..cout {
        for ci in 0..cin {
            let wbase = ((co * cin + ci) * k * k) * k;
            for kx in 0..k {
                let dxo = kx as isize - pad;
                let x_lo = (-dxo).max(0) as usize;
                let x_hi = ((xs as isize - dxo).min(xs as isize)) as usize;
                for ky in 0..k {
                    let dyo = ky as isize - pad;
                    let y_lo = (-dyo).max(0) as usize;
                    let y_hi = ((ys as isize - dyo).min(ys as isize)) as usize;
                    for kz in 0..k {
                        let dzo = kz as isize - pad;
                        let z_lo = (-dzo).max(0) as usize;
                        let z_hi = ((zs as isize - dzo).min(zs as isize)) as usize;
                        if z_lo >= z_hi {
                            continue;
                        }
                        let zi_lo = (z_lo as isize + dzo) as usize;
                        let run = z_hi - z_lo;
                        let mut acc = T::ZERO;
                        for xo in x_lo..x_hi {
                            let xi = (xo as isize + dxo) as usize;
                            for yo in y_lo..y_hi {
                                let yi = (yo as isize + dyo) as usize;
                                let gbase = co * plane + (xo * ys + yo) * zs;
                                let ibase = ci * plane + (xi * ys + yi) * zs;
                                let grow = &dout[gbase + z_lo..gbase + z_lo + run];
                                let irow = &x[ibase + zi_lo..ibase + zi_lo + run];
                                for (&gv, &iv) in grow.iter().zip(irow) {
                                    acc += gv * iv;
                                }
                            }
                        }
                        dw[wbase + (kx * k + ky) * k + kz] += acc;
                    }
                }
            }
        }
    }
}

fn permute_raw<T: Elem>(x: &TensorData<T>, axes: &[usize]) -> Vec<T> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    let nd = in_shape.len();
    if nd == 0 {
        out.copy_from_slice(xd);
        return out;
    }
    let mut coord = vec![0usize; nd];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for d in 0..nd {
            coord[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut ii = 0usize;
        for d in 0..nd {
            ii += coord[d] * in_strides[axes[d]];
        }
        *slot = xd[ii];
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn check_unique_in_range(idx: &[usize], rows: usize) -> crate::error::Result<()> {
    let mut seen = vec![false; rows];
    for &i in idx {
        if i >= rows {
            return Err(Error::Index { what: format!("row index {i} out of range 0..{rows}") });
        }
        if seen[i] {
            return Err(Error::Index { what: format!("duplicate row index {i}") });
        }
        seen[i] = true;
    }
    Ok(())
}

fn sigmoid_scalar<T: Elem>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

/// tanh-approximation GELU.
fn gelu_scalar<T: Elem>(x: T) -> T {
    let a = T::from_f64(GELU_A);
    let b = T::from_f64(GELU_B);
    let half = T::from_f64(0.5);
    let u = a * (x + b * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad_scalar<T: Elem>(x: T) -> T {
    let a = T::from_f64(GELU_A);
    let b = T::from_f64(GELU_B);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * a * (T::ONE + three * b * x * x)
}
