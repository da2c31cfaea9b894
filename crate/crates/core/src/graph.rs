//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the tape once in reverse. Shapes are explicit: the only broadcasting is a
//! scalar tensor (`scale_by`), a last-axis bias (`add_bias`) and a last-axis
//! gate (`mul_channels`).

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    AddBias(Var, Var),
    MulChannels(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Gather { x: Var, rows: Vec<usize> },
    Conv { x: Var, k: Var, geom: ConvGeom },
    CrossEntropy { logits: Var, label: usize },
    Cosine { a: Var, b: Var, eps: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every relu and abs input on the tape, in tape order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = n.op {
                out.extend(self.nodes[a.0].value.iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), value)?;
        Ok(self.input(&t))
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter from the attached store. Repeated calls return the
    /// same node so gradients accumulate in one place.
    ///
    /// Panics if the graph was created without a parameter store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("graph has no parameter store bound");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated on push")
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(&mut out, self.value(a), self.value(b), m, k, n, false, false);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over the leading axis: `[B,m,k] x [B,k,n]`, or
    /// `[B,m,k] x [B,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                kernels::gemm(
                    &mut out[i * m * n..(i + 1) * m * n],
                    &va[i * m * k..(i + 1) * m * k],
                    &vb[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                );
            }
        }
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).iter().map(|x| f(*x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", format!("scale has shape {:?}", self.shape(s))));
        }
        let c = self.value(s)[0];
        let v = self.map(a, |x| x * c);
        Ok(self.push(self.shape(a).to_vec(), v, Op::ScaleBy(a, s), &[a, s]))
    }

    /// Adds `b` (length = last extent of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap();
        if self.value(b).len() != c {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b);
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % c])
            .collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::AddBias(a, b), &[a, b]))
    }

    /// Multiplies every row of `a` elementwise by `g` (length = last extent).
    pub fn mul_channels(&mut self, a: Var, g: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap();
        if self.value(g).len() != c {
            return Err(shape_err(
                "mul_channels",
                format!("{:?} * {:?}", self.shape(a), self.shape(g)),
            ));
        }
        let gv = self.value(g);
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * gv[i % c])
            .collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::MulChannels(a, g), &[a, g]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(self.shape(a).to_vec(), v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::abs);
        self.push(self.shape(a).to_vec(), v, Op::Abs(a), &[a])
    }

    /// Softmax along `axis`, shifted by the axis maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(a).to_vec();
        kernels::softmax_strided(&mut out, outer, len, inner);
        Ok(self.push(shape, out, Op::Softmax { x: a, axis }, &[a]))
    }

    // ----- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for {shape:?}")));
        }
        let (out, out_shape) = kernels::permute(self.value(a), &shape, perm);
        Ok(self.push(out_shape, out, Op::Permute { x: a, perm: perm.to_vec() }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Arithmetic mean over one axis; the axis is removed from the shape
    /// (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(out_shape, out, Op::MeanAxis { x: a, axis }, &[a]))
    }

    /// Global average pooling: mean over every axis but the last.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("gap", format!("need at least one reduced axis, got {shape:?}")));
        }
        let c = *shape.last().unwrap();
        let rows = self.value(a).len() / c;
        let flat = self.reshape(a, &[rows, c])?;
        self.mean_axis(flat, 0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Selects rows along axis 0. The indices are plain integers and carry no
    /// gradient.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let row = shape[1..].iter().product::<usize>();
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(shape_err("gather_rows", format!("indices {rows:?} for {shape:?}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            out.extend_from_slice(&v[r * row..(r + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.push(out_shape, out, Op::Gather { x: a, rows: rows.to_vec() }, &[a]))
    }

    // ----- convolution ----------------------------------------------------

    /// `x: [L, Cin]`, `k: [K, Cin, Cout]`, zero "same" padding, stride 1.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 2 || sk.len() != 3 {
            return Err(shape_err("conv1d", format!("x {sx:?}, kernel {sk:?}")));
        }
        self.conv(x, k, [1, 1, sx[0]], sx[1], [1, 1, sk[0]], sk[1], sk[2], "conv1d")
    }

    /// `x: [H, W, Cin]`, `k: [KH, KW, Cin, Cout]`, zero "same" padding, stride 1.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(shape_err("conv2d", format!("x {sx:?}, kernel {sk:?}")));
        }
        self.conv(x, k, [1, sx[0], sx[1]], sx[2], [1, sk[0], sk[1]], sk[2], sk[3], "conv2d")
    }

    /// `x: [T, H, W, Cin]`, `k: [KT, KH, KW, Cin, Cout]`, zero "same" padding.
    pub fn conv3d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 5 {
            return Err(shape_err("conv3d", format!("x {sx:?}, kernel {sk:?}")));
        }
        self.conv(
            x,
            k,
            [sx[0], sx[1], sx[2]],
            sx[3],
            [sk[0], sk[1], sk[2]],
            sk[3],
            sk[4],
            "conv3d",
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: Var,
        k: Var,
        extent: [usize; 3],
        cin: usize,
        ksize: [usize; 3],
        kcin: usize,
        cout: usize,
        op: &'static str,
    ) -> Result<Var> {
        if cin != kcin {
            return Err(shape_err(op, format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if ksize.iter().any(|k| k % 2 == 0) {
            return Err(shape_err(op, format!("kernel extents {ksize:?} must be odd")));
        }
        let geom = ConvGeom {
            extent,
            ksize,
            cin,
            cout,
        };
        let mut out = vec![0.0; geom.positions() * cout];
        kernels::conv_forward(&geom, self.value(x), self.value(k), &mut out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(shape, out, Op::Conv { x, k, geom }, &[x, k]))
    }

    // ----- losses ---------------------------------------------------------

    /// `-log softmax(logits)[label]` for a rank-1 logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        if label >= v.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("label {label} for {} classes", v.len()),
            ));
        }
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v[label];
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, label }, &[logits]))
    }

    /// `a.b / max(|a||b|, eps)`.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = dot / (na * nb).max(eps);
        Ok(self.push(vec![1], vec![c], Op::Cosine { a, b, eps }, &[a, b]))
    }

    // ----- backward -------------------------------------------------------

    /// Accumulates gradients of `loss` into every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Clears stored gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter, aligned with the parameter store.
    pub fn param_grads(&self) -> Gradients {
        let n = self.params.map_or(0, ParamStore::len);
        let mut slots = vec![None; n];
        for (id, v) in &self.bound {
            if let Some(g) = self.grad(*v) {
                slots[id.index()] = Some(g.to_vec());
            }
        }
        Gradients::from_slots(slots)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let da = slot(grads, *a, m * k);
                    kernels::gemm(da, g, val(*b), m, n, k, false, true);
                }
                if wants(*b) {
                    let db = slot(grads, *b, k * n);
                    kernels::gemm(db, val(*a), g, k, m, n, true, false);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                if wants(*a) {
                    let vb = val(*b);
                    let da = slot(grads, *a, batch * m * k);
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &vb[t * k * n..(t + 1) * k * n];
                        let ds = &mut da[t * m * k..(t + 1) * m * k];
                        // dA = dC B^T, or dC B when B was used transposed.
                        kernels::gemm(ds, gs, bs, m, n, k, false, !*trans_b);
                    }
                }
                if wants(*b) {
                    let va = val(*a);
                    let db = slot(grads, *b, batch * k * n);
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &va[t * m * k..(t + 1) * m * k];
                        let ds = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            kernels::gemm(ds, gs, as_, n, m, k, true, false);
                        } else {
                            kernels::gemm(ds, as_, gs, k, m, n, true, false);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        axpy(slot(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        axpy(slot(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let vb = val(*b);
                    let d = slot(grads, *a, g.len());
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                }
                if wants(*b) {
                    let va = val(*a);
                    let d = slot(grads, *b, g.len());
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, c) => axpy(slot(grads, *a, g.len()), g, *c),
            Op::AddScalar(a) => axpy(slot(grads, *a, g.len()), g, 1.0),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, c);
                }
                if wants(*s) {
                    let dot: f64 = g.iter().zip(val(*a)).map(|(g, x)| g * x).sum();
                    slot(grads, *s, 1)[0] += dot;
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if wants(*b) {
                    let c = val(*b).len();
                    let db = slot(grads, *b, c);
                    for (i, gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                }
            }
            Op::MulChannels(a, gate) => {
                let c = val(*gate).len();
                if wants(*a) {
                    let gv = val(*gate);
                    let da = slot(grads, *a, g.len());
                    for (i, (d, gr)) in da.iter_mut().zip(g).enumerate() {
                        *d += gr * gv[i % c];
                    }
                }
                if wants(*gate) {
                    let va = val(*a);
                    let dg = slot(grads, *gate, c);
                    for (i, (gr, x)) in g.iter().zip(va).enumerate() {
                        dg[i % c] += gr * x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = slot(grads, *a, g.len());
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = slot(grads, *a, g.len());
                for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Abs(a) => {
                let x = val(*a);
                let d = slot(grads, *a, g.len());
                for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                    if *x > 0.0 {
                        *d += g;
                    } else if *x < 0.0 {
                        *d -= g;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let d = slot(grads, *x, g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
            Op::Reshape(a) => axpy(slot(grads, *a, g.len()), g, 1.0),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, p) in perm.iter().enumerate() {
                    inv[*p] = i;
                }
                let (back, _) = kernels::permute(g, &node.shape, &inv);
                axpy(slot(grads, *x, g.len()), &back, 1.0);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let width = self.nodes[p.0].shape[*axis];
                    if wants(*p) {
                        let d = slot(grads, *p, outer * width * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                            axpy(&mut d[o * width * inner..(o + 1) * width * inner], src, 1.0);
                        }
                    }
                    offset += width;
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = &self.nodes[x.0].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let inv = 1.0 / len as f64;
                let d = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        axpy(dst, &g[o * inner..(o + 1) * inner], inv);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                let d = slot(grads, *a, n);
                d.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Gather { x, rows } => {
                let n = self.nodes[x.0].value.len();
                let row = node.value.len() / rows.len();
                let d = slot(grads, *x, n);
                for (i, r) in rows.iter().enumerate() {
                    axpy(&mut d[r * row..(r + 1) * row], &g[i * row..(i + 1) * row], 1.0);
                }
            }
            Op::Conv { x, k, geom } => {
                if wants(*x) {
                    let n = self.nodes[x.0].value.len();
                    let kv = val(*k);
                    kernels::conv_backward_input(geom, g, kv, slot(grads, *x, n));
                }
                if wants(*k) {
                    let n = self.nodes[k.0].value.len();
                    let xv = val(*x);
                    kernels::conv_backward_kernel(geom, xv, g, slot(grads, *k, n));
                }
            }
            Op::CrossEntropy { logits, label } => {
                let v = val(*logits);
                let mut p = v.to_vec();
                let n = p.len();
                kernels::softmax_strided(&mut p, 1, n, 1);
                let d = slot(grads, *logits, v.len());
                for (i, (d, p)) in d.iter_mut().zip(&p).enumerate() {
                    let target = if i == *label { 1.0 } else { 0.0 };
                    *d += g[0] * (p - target);
                }
            }
            Op::Cosine { a, b, eps } => {
                let (va, vb) = (val(*a), val(*b));
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let na2: f64 = va.iter().map(|x| x * x).sum();
                let nb2: f64 = vb.iter().map(|x| x * x).sum();
                let denom = (na2.sqrt() * nb2.sqrt()).max(*eps);
                let c = dot / denom;
                let active = na2.sqrt() * nb2.sqrt() > *eps;
                for (target, this, other, n2) in [(*a, va, vb, na2), (*b, vb, va, nb2)] {
                    if !wants(target) {
                        continue;
                    }
                    let d = slot(grads, target, this.len());
                    for ((d, o), t) in d.iter_mut().zip(other).zip(this) {
                        let mut dc = o / denom;
                        if active {
                            dc -= c * t / n2;
                        }
                        *d += g[0] * dc;
                    }
                }
            }
        }
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

/// `(outer, len, inner)` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
