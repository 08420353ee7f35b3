//! Reverse-mode automatic differentiation on a flat tape.
//!
//! `Graph` is a define-by-run tape: every operation computes its value
//! eagerly and records how to push gradients back to its inputs. Nodes are
//! appended in construction order, so walking the tape backwards is already
//! a topological order and `backward` is a single reverse sweep.
//!
//! Invariants:
//! - a node's inputs always have smaller indices than the node itself;
//! - gradients accumulate by addition in tape order, never in thread order,
//!   so results are bit-identical across `ANROT_THREADS` settings;
//! - `backward` requires a scalar root and keeps gradients for every node
//!   that transitively feeds it, including interior activations (needed for
//!   feature-space adversarial steps).

use crate::parallel;
use crate::tensor::Tensor;

/// Handle to a node on the tape. Cheap to copy, only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    /// Sum of all entries, scalar output.
    Sum(Var),
    /// Mean of all entries, scalar output.
    Mean(Var),
    /// `[n, d] -> [n]`, summing each row.
    RowSum(Var),
    /// `[n, d] -> [d]`, one row.
    Row(Var, usize),
    /// `[n, d] -> [d]`, mean of the listed rows.
    MeanRows(Var, Vec<usize>),
    /// `[n, d] -> [end - start, d]`, contiguous row block.
    RowsRange { a: Var, start: usize },
    /// `x [n, k] * w [k, m] + b [m] -> [n, m]`.
    Linear { x: Var, w: Var, b: Var },
    /// Stride-1 2-d convolution with symmetric zero padding.
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    /// 2x2 max pooling, floor semantics, identity on unit dims.
    MaxPool2 { x: Var, arg: Vec<u32> },
    /// `[b, c, h, w] -> [b, c]` spatial mean.
    MeanSpatial(Var),
    /// `[b, c, h, w] -> [b, c]` spatial max.
    MaxSpatial { x: Var, arg: Vec<u32> },
    /// `[b, c, h, w] -> [b, 1, h, w]` mean over channels.
    MeanChannel(Var),
    /// `[b, c, h, w] -> [b, 1, h, w]` max over channels.
    MaxChannel { x: Var, arg: Vec<u32> },
    /// Channel-axis concatenation of two rank-4 tensors.
    ConcatChannel(Var, Var),
    /// `gate [b, c]` scales `x [b, c, h, w]` per channel.
    GateChannel { gate: Var, x: Var },
    /// Per-channel affine `x·scale[c] + shift[c]`, shared across the batch.
    AffineChannel { x: Var, scale: Var, shift: Var },
    /// `gate [b, 1, h, w]` scales `x [b, c, h, w]` per position.
    GateSpatial { gate: Var, x: Var },
    /// Nearest-neighbor resize to `[th, tw]`.
    ResizeNearest { x: Var, th: usize, tw: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or was created without gradient tracking.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Tracked input; gradients will be available for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked input; treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    // ---- elementwise binary ----

    fn zip2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "elementwise op needs matching shapes"
        );
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let ng = self.wants(a) || self.wants(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----

    fn map1(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.wants(a);
        self.push(t, op, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map1(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map1(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map1(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map1(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map1(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map1(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map1(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map1(a, f64::abs, Op::Abs(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.wants(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.wants(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (n, _d) = self.value(a).dims2().expect("row_sum needs rank-2 input");
        let va = self.value(a);
        let data: Vec<f64> = (0..n).map(|r| va.row(r).iter().sum()).collect();
        let ng = self.wants(a);
        self.push(
            Tensor::new(vec![n], data).expect("sized"),
            Op::RowSum(a),
            ng,
        )
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let (n, d) = self.value(a).dims2().expect("row needs rank-2 input");
        assert!(r < n, "row index {r} out of {n}");
        let data = self.value(a).row(r).to_vec();
        let ng = self.wants(a);
        self.push(Tensor::new(vec![d], data).expect("sized"), Op::Row(a, r), ng)
    }

    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (n, d) = self.value(a).dims2().expect("mean_rows needs rank-2 input");
        assert!(!rows.is_empty(), "mean_rows needs at least one row");
        assert!(rows.iter().all(|&r| r < n), "mean_rows index out of range");
        let va = self.value(a);
        let mut data = vec![0.0; d];
        for &r in rows {
            for (acc, v) in data.iter_mut().zip(va.row(r)) {
                *acc += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut data {
            *v *= inv;
        }
        let ng = self.wants(a);
        self.push(
            Tensor::new(vec![d], data).expect("sized"),
            Op::MeanRows(a, rows.to_vec()),
            ng,
        )
    }

    pub fn rows_range(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, d) = self.value(a).dims2().expect("rows_range needs rank-2 input");
        assert!(start < end && end <= n, "rows_range {start}..{end} out of {n}");
        let data = self.value(a).data()[start * d..end * d].to_vec();
        let ng = self.wants(a);
        self.push(
            Tensor::new(vec![end - start, d], data).expect("sized"),
            Op::RowsRange { a, start },
            ng,
        )
    }

    // ---- linear algebra ----

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, k) = self.value(x).dims2().expect("linear input rank 2");
        let (k2, m) = self.value(w).dims2().expect("linear weight rank 2");
        assert_eq!(k, k2, "linear: input cols {k} vs weight rows {k2}");
        assert_eq!(self.value(b).shape(), &[m], "linear: bias shape");
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let xrow = vx.row(r);
            let orow = &mut data[r * m..(r + 1) * m];
            orow.copy_from_slice(vb.data());
            for (kk, &xv) in xrow.iter().enumerate() {
                let wrow = vw.row(kk);
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let ng = self.wants(x) || self.wants(w) || self.wants(b);
        self.push(
            Tensor::new(vec![n, m], data).expect("sized"),
            Op::Linear { x, w, b },
            ng,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), pad);
        let ng = self.wants(x) || self.wants(w) || self.wants(b);
        self.push(value, Op::Conv2d { x, w, b, pad }, ng)
    }

    // ---- spatial ops ----

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("max_pool2 rank 4");
        let (ho, wo) = (pool_dim(h), pool_dim(w));
        let vx = self.value(x);
        let mut data = vec![0.0; bs * c * ho * wo];
        let mut arg = vec![0u32; bs * c * ho * wo];
        let mut oi = 0;
        for b in 0..bs {
            for ch in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0usize;
                        for yy in 2 * y..(2 * y + 2).min(h) {
                            for xw in 2 * xx..(2 * xx + 2).min(w) {
                                let idx = vx.idx4(b, ch, yy, xw);
                                let v = vx.data()[idx];
                                if v > best {
                                    best = v;
                                    best_at = idx;
                                }
                            }
                        }
                        data[oi] = best;
                        arg[oi] = best_at as u32;
                        oi += 1;
                    }
                }
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![bs, c, ho, wo], data).expect("sized"),
            Op::MaxPool2 { x, arg },
            ng,
        )
    }

    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("mean_spatial rank 4");
        let vx = self.value(x);
        let inv = 1.0 / (h * w) as f64;
        let mut data = vec![0.0; bs * c];
        for b in 0..bs {
            for ch in 0..c {
                let start = vx.idx4(b, ch, 0, 0);
                data[b * c + ch] = vx.data()[start..start + h * w].iter().sum::<f64>() * inv;
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![bs, c], data).expect("sized"),
            Op::MeanSpatial(x),
            ng,
        )
    }

    pub fn max_spatial(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("max_spatial rank 4");
        let vx = self.value(x);
        let mut data = vec![0.0; bs * c];
        let mut arg = vec![0u32; bs * c];
        for b in 0..bs {
            for ch in 0..c {
                let start = vx.idx4(b, ch, 0, 0);
                let plane = &vx.data()[start..start + h * w];
                let (mut best, mut at) = (f64::NEG_INFINITY, 0usize);
                for (i, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        at = start + i;
                    }
                }
                data[b * c + ch] = best;
                arg[b * c + ch] = at as u32;
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![bs, c], data).expect("sized"),
            Op::MaxSpatial { x, arg },
            ng,
        )
    }

    pub fn mean_channel(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("mean_channel rank 4");
        let vx = self.value(x);
        let inv = 1.0 / c as f64;
        let mut data = vec![0.0; bs * h * w];
        for b in 0..bs {
            for ch in 0..c {
                let start = vx.idx4(b, ch, 0, 0);
                for (o, &v) in data[b * h * w..(b + 1) * h * w]
                    .iter_mut()
                    .zip(&vx.data()[start..start + h * w])
                {
                    *o += v;
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![bs, 1, h, w], data).expect("sized"),
            Op::MeanChannel(x),
            ng,
        )
    }

    pub fn max_channel(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("max_channel rank 4");
        let vx = self.value(x);
        let mut data = vec![0.0; bs * h * w];
        let mut arg = vec![0u32; bs * h * w];
        for b in 0..bs {
            for p in 0..h * w {
                let (mut best, mut at) = (f64::NEG_INFINITY, 0usize);
                for ch in 0..c {
                    let idx = vx.idx4(b, ch, 0, 0) + p;
                    let v = vx.data()[idx];
                    if v > best {
                        best = v;
                        at = idx;
                    }
                }
                data[b * h * w + p] = best;
                arg[b * h * w + p] = at as u32;
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![bs, 1, h, w], data).expect("sized"),
            Op::MaxChannel { x, arg },
            ng,
        )
    }

    pub fn concat_channel(&mut self, a: Var, b: Var) -> Var {
        let (ba, ca, ha, wa) = self.value(a).dims4().expect("concat rank 4");
        let (bb, cb, hb, wb) = self.value(b).dims4().expect("concat rank 4");
        assert_eq!((ba, ha, wa), (bb, hb, wb), "concat_channel: dims differ");
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ba * (ca + cb) * ha * wa);
        for bi in 0..ba {
            let sa = va.idx4(bi, 0, 0, 0);
            data.extend_from_slice(&va.data()[sa..sa + ca * ha * wa]);
            let sb = vb.idx4(bi, 0, 0, 0);
            data.extend_from_slice(&vb.data()[sb..sb + cb * hb * wb]);
        }
        let ng = self.wants(a) || self.wants(b);
        self.push(
            Tensor::new(vec![ba, ca + cb, ha, wa], data).expect("sized"),
            Op::ConcatChannel(a, b),
            ng,
        )
    }

    pub fn gate_channel(&mut self, gate: Var, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("gate_channel rank 4");
        assert_eq!(
            self.value(gate).shape(),
            &[bs, c],
            "gate_channel: gate must be [batch, channels]"
        );
        let (vg, vx) = (self.value(gate), self.value(x));
        let mut data = vec![0.0; bs * c * h * w];
        for b in 0..bs {
            for ch in 0..c {
                let g = vg.data()[b * c + ch];
                let start = vx.idx4(b, ch, 0, 0);
                for (o, &v) in data[start..start + h * w]
                    .iter_mut()
                    .zip(&vx.data()[start..start + h * w])
                {
                    *o = g * v;
                }
            }
        }
        let ng = self.wants(gate) || self.wants(x);
        self.push(
            Tensor::new(vec![bs, c, h, w], data).expect("sized"),
            Op::GateChannel { gate, x },
            ng,
        )
    }

    pub fn affine_channel(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("affine_channel rank 4");
        assert_eq!(self.value(scale).shape(), &[c], "affine_channel: scale");
        assert_eq!(self.value(shift).shape(), &[c], "affine_channel: shift");
        let (vx, vs, vt) = (self.value(x), self.value(scale), self.value(shift));
        let mut data = vec![0.0; bs * c * h * w];
        for b in 0..bs {
            for ch in 0..c {
                let (s, t) = (vs.data()[ch], vt.data()[ch]);
                let start = vx.idx4(b, ch, 0, 0);
                for (o, &v) in data[start..start + h * w]
                    .iter_mut()
                    .zip(&vx.data()[start..start + h * w])
                {
                    *o = v * s + t;
                }
            }
        }
        let ng = self.wants(x) || self.wants(scale) || self.wants(shift);
        self.push(
            Tensor::new(vec![bs, c, h, w], data).expect("sized"),
            Op::AffineChannel { x, scale, shift },
            ng,
        )
    }

    pub fn gate_spatial(&mut self, gate: Var, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("gate_spatial rank 4");
        assert_eq!(
            self.value(gate).shape(),
            &[bs, 1, h, w],
            "gate_spatial: gate must be [batch, 1, h, w]"
        );
        let (vg, vx) = (self.value(gate), self.value(x));
        let mut data = vec![0.0; bs * c * h * w];
        for b in 0..bs {
            for ch in 0..c {
                let start = vx.idx4(b, ch, 0, 0);
                let gstart = b * h * w;
                for p in 0..h * w {
                    data[start + p] = vg.data()[gstart + p] * vx.data()[start + p];
                }
            }
        }
        let ng = self.wants(gate) || self.wants(x);
        self.push(
            Tensor::new(vec![bs, c, h, w], data).expect("sized"),
            Op::GateSpatial { gate, x },
            ng,
        )
    }

    pub fn resize_nearest(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let (bs, c, h, w) = self.value(x).dims4().expect("resize rank 4");
        assert!(th >= 1 && tw >= 1, "resize target must be positive");
        let vx = self.value(x);
        let mut data = vec![0.0; bs * c * th * tw];
        let mut oi = 0;
        for b in 0..bs {
            for ch in 0..c {
                for y in 0..th {
                    let sy = y * h / th;
                    for xx in 0..tw {
                        let sx = xx * w / tw;
                        data[oi] = vx.data()[vx.idx4(b, ch, sy, sx)];
                        oi += 1;
                    }
                }
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![bs, c, th, tw], data).expect("sized"),
            Op::ResizeNearest { x, th, tw },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self
            .value(x)
            .reshaped(shape)
            .expect("reshape must preserve element count");
        let ng = self.wants(x);
        self.push(t, Op::Reshape(x), ng)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients exist for every tracked
    /// node that influences the root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(
            self.value(root).is_scalar(),
            "backward root must be scalar, got shape {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            // Inputs always precede `id`, so the tape splits cleanly into
            // writable predecessors and the read-only gradient at `id`.
            let (lo, hi) = grads.split_at_mut(id);
            let g = hi[0].as_ref().expect("checked above");
            self.propagate(id, g, lo);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Tensor, lo: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_scaled(lo, *a, g, 1.0);
                self.acc_scaled(lo, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(lo, *a, g, 1.0);
                self.acc_scaled(lo, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                self.acc_map(lo, *a, g, |i, gv| gv * vb.data()[i]);
                self.acc_map(lo, *b, g, |i, gv| gv * va.data()[i]);
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).clone();
                let vo = out.clone();
                self.acc_map(lo, *a, g, |i, gv| gv / vb.data()[i]);
                self.acc_map(lo, *b, g, |i, gv| -gv * vo.data()[i] / vb.data()[i]);
            }
            Op::AddScalar(a) => self.acc_scaled(lo, *a, g, 1.0),
            Op::MulScalar(a, s) => self.acc_scaled(lo, *a, g, *s),
            Op::Exp(a) => {
                let vo = out.clone();
                self.acc_map(lo, *a, g, |i, gv| gv * vo.data()[i]);
            }
            Op::Ln(a) => {
                let va = self.value(*a).clone();
                self.acc_map(lo, *a, g, |i, gv| gv / va.data()[i]);
            }
            Op::Sqrt(a) => {
                let vo = out.clone();
                self.acc_map(lo, *a, g, |i, gv| gv * 0.5 / vo.data()[i]);
            }
            Op::Sigmoid(a) => {
                let vo = out.clone();
                self.acc_map(lo, *a, g, |i, gv| {
                    let s = vo.data()[i];
                    gv * s * (1.0 - s)
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).clone();
                self.acc_map(lo, *a, g, |i, gv| if va.data()[i] > 0.0 { gv } else { 0.0 });
            }
            Op::Abs(a) => {
                let va = self.value(*a).clone();
                self.acc_map(lo, *a, g, |i, gv| {
                    let v = va.data()[i];
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let gv = g.scalar_value();
                    let slot = self.slot(lo, *a);
                    for v in slot.data_mut() {
                        *v += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let gv = g.scalar_value() / self.value(*a).numel() as f64;
                    let slot = self.slot(lo, *a);
                    for v in slot.data_mut() {
                        *v += gv;
                    }
                }
            }
            Op::RowSum(a) => {
                if self.wants(*a) {
                    let (n, d) = self.value(*a).dims2().expect("checked at forward");
                    let slot = self.slot(lo, *a);
                    for r in 0..n {
                        let gv = g.data()[r];
                        for v in &mut slot.data_mut()[r * d..(r + 1) * d] {
                            *v += gv;
                        }
                    }
                }
            }
            Op::Row(a, r) => {
                if self.wants(*a) {
                    let d = g.numel();
                    let slot = self.slot(lo, *a);
                    for (v, gv) in slot.data_mut()[r * d..(r + 1) * d].iter_mut().zip(g.data())
                    {
                        *v += gv;
                    }
                }
            }
            Op::MeanRows(a, rows) => {
                if self.wants(*a) {
                    let d = g.numel();
                    let inv = 1.0 / rows.len() as f64;
                    let slot = self.slot(lo, *a);
                    for &r in rows {
                        for (v, gv) in
                            slot.data_mut()[r * d..(r + 1) * d].iter_mut().zip(g.data())
                        {
                            *v += gv * inv;
                        }
                    }
                }
            }
            Op::RowsRange { a, start } => {
                if self.wants(*a) {
                    let d = self.value(*a).dims2().expect("checked at forward").1;
                    let slot = self.slot(lo, *a);
                    for (v, gv) in slot.data_mut()[start * d..start * d + g.numel()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *v += gv;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2().expect("checked");
                let m = self.value(*b).numel();
                if self.wants(*x) {
                    let vw = self.value(*w).clone();
                    let slot = self.slot(lo, *x);
                    for r in 0..n {
                        for kk in 0..k {
                            let wrow = vw.row(kk);
                            let mut acc = 0.0;
                            for (o, &wv) in g.data()[r * m..(r + 1) * m].iter().zip(wrow) {
                                acc += o * wv;
                            }
                            slot.data_mut()[r * k + kk] += acc;
                        }
                    }
                }
                if self.wants(*w) {
                    let vx = self.value(*x).clone();
                    let slot = self.slot(lo, *w);
                    for r in 0..n {
                        let xrow = vx.row(r);
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for (kk, &xv) in xrow.iter().enumerate() {
                            for (wv, &gv) in
                                slot.data_mut()[kk * m..(kk + 1) * m].iter_mut().zip(grow)
                            {
                                *wv += xv * gv;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let slot = self.slot(lo, *b);
                    for r in 0..n {
                        for (bv, &gv) in slot
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[r * m..(r + 1) * m])
                        {
                            *bv += gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                if self.wants(*x) {
                    let dx = conv2d_backward_input(vx, vw, g, *pad);
                    self.acc_tensor(lo, *x, dx);
                }
                if self.wants(*w) {
                    let dw = conv2d_backward_weight(vx, vw, g, *pad);
                    self.acc_tensor(lo, *w, dw);
                }
                if self.wants(*b) {
                    let (bs, co, ho, wo) = g.dims4().expect("grad rank 4");
                    let slot = self.slot(lo, *b);
                    for bi in 0..bs {
                        for o in 0..co {
                            let start = g.idx4(bi, o, 0, 0);
                            slot.data_mut()[o] +=
                                g.data()[start..start + ho * wo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MaxPool2 { x, arg } => {
                if self.wants(*x) {
                    let slot = self.slot(lo, *x);
                    for (gi, &src) in arg.iter().enumerate() {
                        slot.data_mut()[src as usize] += g.data()[gi];
                    }
                }
            }
            Op::MeanSpatial(a) => {
                if self.wants(*a) {
                    let (bs, c, h, w) = self.value(*a).dims4().expect("checked");
                    let inv = 1.0 / (h * w) as f64;
                    let slot = self.slot(lo, *a);
                    for b in 0..bs {
                        for ch in 0..c {
                            let gv = g.data()[b * c + ch] * inv;
                            let start = ((b * c + ch) * h) * w;
                            for v in &mut slot.data_mut()[start..start + h * w] {
                                *v += gv;
                            }
                        }
                    }
                }
            }
            Op::MaxSpatial { x, arg } => {
                if self.wants(*x) {
                    let slot = self.slot(lo, *x);
                    for (gi, &src) in arg.iter().enumerate() {
                        slot.data_mut()[src as usize] += g.data()[gi];
                    }
                }
            }
            Op::MeanChannel(a) => {
                if self.wants(*a) {
                    let (bs, c, h, w) = self.value(*a).dims4().expect("checked");
                    let inv = 1.0 / c as f64;
                    let slot = self.slot(lo, *a);
                    for b in 0..bs {
                        for ch in 0..c {
                            let start = ((b * c + ch) * h) * w;
                            for p in 0..h * w {
                                slot.data_mut()[start + p] += g.data()[b * h * w + p] * inv;
                            }
                        }
                    }
                }
            }
            Op::MaxChannel { x, arg } => {
                if self.wants(*x) {
                    let slot = self.slot(lo, *x);
                    for (gi, &src) in arg.iter().enumerate() {
                        slot.data_mut()[src as usize] += g.data()[gi];
                    }
                }
            }
            Op::ConcatChannel(a, b) => {
                let (bs, ca, h, w) = self.value(*a).dims4().expect("checked");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                if self.wants(*a) {
                    let slot = self.slot(lo, *a);
                    for bi in 0..bs {
                        let gs = (bi * (ca + cb)) * plane;
                        let ds = bi * ca * plane;
                        for p in 0..ca * plane {
                            slot.data_mut()[ds + p] += g.data()[gs + p];
                        }
                    }
                }
                if self.wants(*b) {
                    let slot = self.slot(lo, *b);
                    for bi in 0..bs {
                        let gs = (bi * (ca + cb) + ca) * plane;
                        let ds = bi * cb * plane;
                        for p in 0..cb * plane {
                            slot.data_mut()[ds + p] += g.data()[gs + p];
                        }
                    }
                }
            }
            Op::GateChannel { gate, x } => {
                let (bs, c, h, w) = self.value(*x).dims4().expect("checked");
                let plane = h * w;
                if self.wants(*gate) {
                    let vx = self.value(*x).clone();
                    let slot = self.slot(lo, *gate);
                    for b in 0..bs {
                        for ch in 0..c {
                            let start = ((b * c + ch) * h) * w;
                            let mut acc = 0.0;
                            for p in 0..plane {
                                acc += g.data()[start + p] * vx.data()[start + p];
                            }
                            slot.data_mut()[b * c + ch] += acc;
                        }
                    }
                }
                if self.wants(*x) {
                    let vg = self.value(*gate).clone();
                    let slot = self.slot(lo, *x);
                    for b in 0..bs {
                        for ch in 0..c {
                            let gv = vg.data()[b * c + ch];
                            let start = ((b * c + ch) * h) * w;
                            for p in 0..plane {
                                slot.data_mut()[start + p] += g.data()[start + p] * gv;
                            }
                        }
                    }
                }
            }
            Op::AffineChannel { x, scale, shift } => {
                let (bs, c, h, w) = self.value(*x).dims4().expect("checked");
                let plane = h * w;
                if self.wants(*x) {
                    let vs = self.value(*scale).clone();
                    let slot = self.slot(lo, *x);
                    for b in 0..bs {
                        for ch in 0..c {
                            let s = vs.data()[ch];
                            let start = ((b * c + ch) * h) * w;
                            for p in 0..plane {
                                slot.data_mut()[start + p] += g.data()[start + p] * s;
                            }
                        }
                    }
                }
                if self.wants(*scale) {
                    let vx = self.value(*x).clone();
                    let slot = self.slot(lo, *scale);
                    for b in 0..bs {
                        for ch in 0..c {
                            let start = ((b * c + ch) * h) * w;
                            let mut acc = 0.0;
                            for p in 0..plane {
                                acc += g.data()[start + p] * vx.data()[start + p];
                            }
                            slot.data_mut()[ch] += acc;
                        }
                    }
                }
                if self.wants(*shift) {
                    let slot = self.slot(lo, *shift);
                    for b in 0..bs {
                        for ch in 0..c {
                            let start = ((b * c + ch) * h) * w;
                            slot.data_mut()[ch] +=
                                g.data()[start..start + plane].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::GateSpatial { gate, x } => {
                let (bs, c, h, w) = self.value(*x).dims4().expect("checked");
                let plane = h * w;
                if self.wants(*gate) {
                    let vx = self.value(*x).clone();
                    let slot = self.slot(lo, *gate);
                    for b in 0..bs {
                        for ch in 0..c {
                            let start = ((b * c + ch) * h) * w;
                            for p in 0..plane {
                                slot.data_mut()[b * plane + p] +=
                                    g.data()[start + p] * vx.data()[start + p];
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let vg = self.value(*gate).clone();
                    let slot = self.slot(lo, *x);
                    for b in 0..bs {
                        for ch in 0..c {
                            let start = ((b * c + ch) * h) * w;
                            for p in 0..plane {
                                slot.data_mut()[start + p] +=
                                    g.data()[start + p] * vg.data()[b * plane + p];
                            }
                        }
                    }
                }
            }
            Op::ResizeNearest { x, th, tw } => {
                if self.wants(*x) {
                    let (bs, c, h, w) = self.value(*x).dims4().expect("checked");
                    let slot = self.slot(lo, *x);
                    let mut gi = 0;
                    for b in 0..bs {
                        for ch in 0..c {
                            let base = ((b * c + ch) * h) * w;
                            for y in 0..*th {
                                let sy = y * h / th;
                                for xx in 0..*tw {
                                    let sx = xx * w / tw;
                                    slot.data_mut()[base + sy * w + sx] += g.data()[gi];
                                    gi += 1;
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let delta = g.reshaped(shape).expect("same element count");
                    self.acc_tensor(lo, *a, delta);
                }
            }
        }
    }

    /// Gradient slot for `v`, zero-initialized on first touch.
    fn slot<'s>(&self, lo: &'s mut [Option<Tensor>], v: Var) -> &'s mut Tensor {
        lo[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape().to_vec()))
    }

    fn acc_scaled(&self, lo: &mut [Option<Tensor>], v: Var, g: &Tensor, scale: f64) {
        if self.wants(v) {
            self.slot(lo, v).add_scaled(g, scale);
        }
    }

    /// Accumulates `f(index, g[index])` into the slot of `v`.
    fn acc_map(
        &self,
        lo: &mut [Option<Tensor>],
        v: Var,
        g: &Tensor,
        f: impl Fn(usize, f64) -> f64,
    ) {
        if self.wants(v) {
            let slot = self.slot(lo, v);
            for (i, gv) in g.data().iter().enumerate() {
                slot.data_mut()[i] += f(i, *gv);
            }
        }
    }

    fn acc_tensor(&self, lo: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if self.wants(v) {
            match &mut lo[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }
    }
}

/// Output size of 2x2 floor pooling; unit dims pass through.
fn pool_dim(d: usize) -> usize {
    (d / 2).max(1)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Valid output row/col range for a kernel offset `k` under padding `pad`:
/// output index `o` maps to input index `o + k - pad`, which must land in
/// `0..limit`. Returns `(lo, hi)` with `lo <= hi <= out_limit`.
fn conv_range(k: usize, pad: usize, limit: usize, out_limit: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (limit + pad).saturating_sub(k).min(out_limit);
    (lo, hi.max(lo))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (bs, ci, h, wd) = x.dims4().expect("conv input rank 4");
    let (co, ci2, kh, kw) = w.dims4().expect("conv weight rank 4");
    assert_eq!(ci, ci2, "conv2d: channel mismatch");
    assert_eq!(b.shape(), &[co], "conv2d: bias shape");
    let ho = (h + 2 * pad).checked_sub(kh - 1).expect("kernel too large");
    let wo = (wd + 2 * pad).checked_sub(kw - 1).expect("kernel too large");
    assert!(ho >= 1 && wo >= 1, "conv2d: empty output");

    let slabs = parallel::map_indexed(bs, |bi| {
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let (plane_lo, plane_hi) = (o * ho * wo, (o + 1) * ho * wo);
            out[plane_lo..plane_hi].fill(b.data()[o]);
            for i in 0..ci {
                let xstart = x.idx4(bi, i, 0, 0);
                let xplane = &x.data()[xstart..xstart + h * wd];
                for ky in 0..kh {
                    let (y0, y1) = conv_range(ky, pad, h, ho);
                    for kx in 0..kw {
                        let (x0, x1) = conv_range(kx, pad, wd, wo);
                        if x1 == x0 {
                            continue;
                        }
                        let wv = w.data()[((o * ci + i) * kh + ky) * kw + kx];
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let ix0 = x0 + kx - pad;
                            let src = &xplane[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                            let dst = &mut out[plane_lo + y * wo + x0..plane_lo + y * wo + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    });
    let mut data = Vec::with_capacity(bs * co * ho * wo);
    for slab in slabs {
        data.extend_from_slice(&slab);
    }
    Tensor::new(vec![bs, co, ho, wo], data).expect("sized")
}

fn conv2d_backward_input(x: &Tensor, w: &Tensor, g: &Tensor, pad: usize) -> Tensor {
    let (bs, ci, h, wd) = x.dims4().expect("checked");
    let (co, _, kh, kw) = w.dims4().expect("checked");
    let (_, _, ho, wo) = g.dims4().expect("grad rank 4");

    let slabs = parallel::map_indexed(bs, |bi| {
        let mut dx = vec![0.0; ci * h * wd];
        for o in 0..co {
            let gstart = g.idx4(bi, o, 0, 0);
            let gplane = &g.data()[gstart..gstart + ho * wo];
            for i in 0..ci {
                let dplane = &mut dx[i * h * wd..(i + 1) * h * wd];
                for ky in 0..kh {
                    let (y0, y1) = conv_range(ky, pad, h, ho);
                    for kx in 0..kw {
                        let (x0, x1) = conv_range(kx, pad, wd, wo);
                        if x1 == x0 {
                            continue;
                        }
                        let wv = w.data()[((o * ci + i) * kh + ky) * kw + kx];
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let ix0 = x0 + kx - pad;
                            let src = &gplane[y * wo + x0..y * wo + x1];
                            let dst = &mut dplane[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        dx
    });
    let mut data = Vec::with_capacity(bs * ci * h * wd);
    for slab in slabs {
        data.extend_from_slice(&slab);
    }
    Tensor::new(vec![bs, ci, h, wd], data).expect("sized")
}

fn conv2d_backward_weight(x: &Tensor, w: &Tensor, g: &Tensor, pad: usize) -> Tensor {
    let (bs, ci, h, wd) = x.dims4().expect("checked");
    let (co, _, kh, kw) = w.dims4().expect("checked");
    let (_, _, ho, wo) = g.dims4().expect("grad rank 4");

    // Per-image partials summed in batch order keep the reduction exact
    // across thread counts.
    let partials = parallel::map_indexed(bs, |bi| {
        let mut dw = vec![0.0; co * ci * kh * kw];
        for o in 0..co {
            let gstart = g.idx4(bi, o, 0, 0);
            let gplane = &g.data()[gstart..gstart + ho * wo];
            for i in 0..ci {
                let xstart = x.idx4(bi, i, 0, 0);
                let xplane = &x.data()[xstart..xstart + h * wd];
                for ky in 0..kh {
                    let (y0, y1) = conv_range(ky, pad, h, ho);
                    for kx in 0..kw {
                        let (x0, x1) = conv_range(kx, pad, wd, wo);
                        if x1 == x0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let ix0 = x0 + kx - pad;
                            let gs = &gplane[y * wo + x0..y * wo + x1];
                            let xs = &xplane[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                            for (gv, xv) in gs.iter().zip(xs) {
                                acc += gv * xv;
                            }
                        }
                        dw[((o * ci + i) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
        dw
    });
    let mut dw = Tensor::zeros(vec![co, ci, kh, kw]);
    for p in partials {
        for (d, s) in dw.data_mut().iter_mut().zip(&p) {
            *d += s;
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grads, rel_err};
    use crate::rng::{rng_from_seed, standard_normals};

    /// FD-checks `build` on `inputs`: the analytic gradient of a fixed
    /// random weighting of the op output must match central differences.
    fn check_op(
        inputs: &[Tensor],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f64,
        seed: u64,
    ) {
        // Probe run fixes the weighting tensor from the output shape.
        let mut probe = Graph::new();
        let pvars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let pout = build(&mut probe, &pvars);
        let mut rng = rng_from_seed(seed);
        let weights = Tensor::new(
            probe.value(pout).shape().to_vec(),
            standard_normals(&mut rng, probe.value(pout).numel()),
        )
        .unwrap();

        let loss = |ts: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            let wv = g.constant(weights.clone());
            let prod = g.mul(out, wv);
            let s = g.sum(prod);
            g.value(s).scalar_value()
        };

        let fd = fd_grads(loss, inputs, 1e-5);

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let wv = g.constant(weights.clone());
        let prod = g.mul(out, wv);
        let root = g.sum(prod);
        let grads = g.backward(root);

        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("leaf must receive gradient");
            let e = rel_err(analytic, &fd[i]);
            assert!(
                e <= tol,
                "op gradient mismatch on input {i}: rel err {e:.3e} > {tol:.1e}"
            );
        }
    }

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::new(shape, standard_normals(&mut rng, n)).unwrap()
    }

    /// Random tensor bounded away from zero, for kinked ops.
    fn randn_off_zero(shape: Vec<usize>, seed: u64) -> Tensor {
        randn(shape, seed).map(|v| if v.abs() < 0.2 { v + 0.4 } else { v })
    }

    fn randn_positive(shape: Vec<usize>, seed: u64) -> Tensor {
        randn(shape, seed).map(|v| v.abs() + 0.5)
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let a = randn(vec![3, 4], 1);
        let b = randn_positive(vec![3, 4], 2);
        check_op(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-7, 10);
        check_op(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-7, 11);
        check_op(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), 1e-7, 12);
        check_op(&[a.clone(), b.clone()], |g, v| g.div(v[0], v[1]), 1e-6, 13);
        check_op(&[a.clone()], |g, v| g.add_scalar(v[0], 1.7), 1e-7, 14);
        check_op(&[a.clone()], |g, v| g.mul_scalar(v[0], -0.3), 1e-7, 15);
        check_op(&[a.clone()], |g, v| g.exp(v[0]), 1e-7, 16);
        check_op(&[b.clone()], |g, v| g.ln(v[0]), 1e-6, 17);
        check_op(&[b.clone()], |g, v| g.sqrt(v[0]), 1e-6, 18);
        check_op(&[a.clone()], |g, v| g.sigmoid(v[0]), 1e-7, 19);
        let off = randn_off_zero(vec![3, 4], 3);
        check_op(&[off.clone()], |g, v| g.relu(v[0]), 1e-7, 20);
        check_op(&[off], |g, v| g.abs(v[0]), 1e-7, 21);
    }

    #[test]
    fn reduction_grads_match_fd() {
        let a = randn(vec![4, 5], 30);
        check_op(&[a.clone()], |g, v| g.sum(v[0]), 1e-7, 31);
        check_op(&[a.clone()], |g, v| g.mean(v[0]), 1e-7, 32);
        check_op(&[a.clone()], |g, v| g.row_sum(v[0]), 1e-7, 33);
        check_op(&[a.clone()], |g, v| g.row(v[0], 2), 1e-7, 34);
        check_op(&[a.clone()], |g, v| g.mean_rows(v[0], &[0, 2, 3]), 1e-7, 35);
        check_op(&[a.clone()], |g, v| g.rows_range(v[0], 1, 3), 1e-7, 36);
        check_op(&[a], |g, v| g.rows_range(v[0], 0, 4), 1e-7, 37);
    }

    #[test]
    fn linear_grads_match_fd() {
        let x = randn(vec![3, 4], 40);
        let w = randn(vec![4, 5], 41);
        let b = randn(vec![5], 42);
        check_op(&[x, w, b], |g, v| g.linear(v[0], v[1], v[2]), 1e-6, 43);
    }

    #[test]
    fn conv_grads_match_fd() {
        let x = randn(vec![2, 3, 5, 6], 50);
        let w = randn(vec![4, 3, 3, 3], 51);
        let b = randn(vec![4], 52);
        check_op(
            &[x, w, b],
            |g, v| g.conv2d(v[0], v[1], v[2], 1),
            1e-6,
            53,
        );
        // 7x7 kernel with pad 3 (the spatial-attention configuration).
        let x2 = randn(vec![1, 2, 8, 8], 54);
        let w2 = randn(vec![1, 2, 7, 7], 55);
        let b2 = randn(vec![1], 56);
        check_op(
            &[x2, w2, b2],
            |g, v| g.conv2d(v[0], v[1], v[2], 3),
            1e-6,
            57,
        );
    }

    #[test]
    fn conv_forward_matches_hand_case() {
        // 1x1 image, 1x1 kernel: out = w*x + b.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = g.conv2d(x, w, b, 0);
        assert_eq!(g.value(y).data(), &[6.5]);

        // 3x3 all-ones kernel over 3x3 all-ones image with pad 1: center
        // sees 9 cells, edges 6, corners 4.
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1);
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn pooling_and_spatial_grads_match_fd() {
        let x = randn(vec![2, 3, 5, 6], 60);
        check_op(&[x.clone()], |g, v| g.max_pool2(v[0]), 1e-6, 61);
        check_op(&[x.clone()], |g, v| g.mean_spatial(v[0]), 1e-7, 62);
        check_op(&[x.clone()], |g, v| g.max_spatial(v[0]), 1e-6, 63);
        check_op(&[x.clone()], |g, v| g.mean_channel(v[0]), 1e-7, 64);
        check_op(&[x.clone()], |g, v| g.max_channel(v[0]), 1e-6, 65);
        check_op(
            &[x.clone()],
            |g, v| g.resize_nearest(v[0], 10, 12),
            1e-7,
            66,
        );
        check_op(&[x.clone()], |g, v| g.resize_nearest(v[0], 3, 3), 1e-7, 67);
        check_op(&[x], |g, v| g.reshape(v[0], vec![6, 30]), 1e-7, 68);
    }

    #[test]
    fn max_pool_handles_odd_and_unit_dims() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::new(vec![1, 1, 1, 5], vec![1.0, 5.0, 2.0, 4.0, 3.0]).unwrap(),
        );
        let y = g.max_pool2(x);
        // Height 1 passes through; width 5 floors to 2 (last column dropped).
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 2]);
        assert_eq!(g.value(y).data(), &[5.0, 4.0]);
    }

    #[test]
    fn affine_channel_grads_match_fd() {
        let x = randn(vec![2, 3, 4, 4], 90);
        let scale = randn(vec![3], 91);
        let shift = randn(vec![3], 92);
        check_op(
            &[x, scale, shift],
            |g, v| g.affine_channel(v[0], v[1], v[2]),
            1e-7,
            93,
        );
    }

    #[test]
    fn gate_and_concat_grads_match_fd() {
        let x = randn(vec![2, 4, 3, 3], 70);
        let gate_c = randn(vec![2, 4], 71).map(sigmoid);
        let gate_s = randn(vec![2, 1, 3, 3], 72).map(sigmoid);
        check_op(
            &[gate_c, x.clone()],
            |g, v| g.gate_channel(v[0], v[1]),
            1e-7,
            73,
        );
        check_op(
            &[gate_s, x.clone()],
            |g, v| g.gate_spatial(v[0], v[1]),
            1e-7,
            74,
        );
        let y = randn(vec![2, 2, 3, 3], 75);
        check_op(&[x, y], |g, v| g.concat_channel(v[0], v[1]), 1e-7, 76);
    }

    #[test]
    fn repeated_input_accumulates_gradient() {
        // d(x*x)/dx = 2x exercises double accumulation into one slot.
        let x = randn(vec![3], 80);
        check_op(&[x], |g, v| g.mul(v[0], v[0]), 1e-7, 81);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let p = g.mul(a, c);
        let root = g.sum(p);
        let grads = g.backward(root);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn interior_gradients_are_retained() {
        // Needed by feature-space adversarial steps: gradient w.r.t. an
        // interior activation, not just leaves.
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let inner = g.mul(a, a);
        let root = g.mul_scalar(inner, 3.0);
        let grads = g.backward(root);
        assert_eq!(grads.get(inner).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[12.0]);
    }
}
