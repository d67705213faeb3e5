//! The tape: eager forward evaluation with recorded operations, then
//! a single reverse sweep for exact gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

use super::{GradSet, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Floor applied inside every log in the BCE/focal losses.
pub const LOG_FLOOR: f64 = 1e-7;

/// Per-cell assignment consumed by the IoU loss: grid cell plus the
/// target box it must regress to.
#[derive(Clone, Debug)]
pub struct IouCell {
    pub cy: usize,
    pub cx: usize,
    pub target: BBox,
}

enum Op {
    Leaf,
    /// input [h,w,cin], weight [kh,kw,cin,cout], bias [cout].
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    /// input [n], weight [m,n], bias [m] -> [m].
    Affine { x: NodeId, w: NodeId, b: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Sigmoid { x: NodeId },
    /// [h,w,c] -> [c].
    GlobalAvgPool { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    Sum { x: NodeId },
    /// [h,w,C] -> [h,w,to-from].
    SliceChannels { x: NodeId, from: usize, to: usize },
    /// [h,w,c] -> [h,w]; ties route gradient to the lowest index.
    MaxChannel { x: NodeId },
    /// sum_i weights[i] * bce(p[i], targets[i]); weights fold in any
    /// mask and averaging denominator.
    BceLoss { p: NodeId, targets: Tensor, weights: Tensor },
    /// Focal variant of the same reduction.
    FocalLoss { p: NodeId, targets: Tensor, weights: Tensor, alpha: f64, gamma: f64 },
    /// mean over cells of (1 - IoU(decoded box, target box)); input is
    /// the raw regression map [h,w,5].
    IouLoss { reg: NodeId, cells: Vec<IouCell>, stride: usize, img_w: f64, img_h: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Affine { .. } => "affine",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::SliceChannels { .. } => "slice_channels",
            Op::MaxChannel { .. } => "max_channel",
            Op::BceLoss { .. } => "bce_loss",
            Op::FocalLoss { .. } => "focal_loss",
            Op::IouLoss { .. } => "iou_loss",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records a computation while evaluating it. One tape per graph
/// instance; values are immutable once recorded, so independent tapes
/// may be evaluated concurrently.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(32), params: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn node_label(&self, idx: usize) -> String {
        format!("{}#{}", self.nodes[idx].op.name(), idx)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.all_finite() {
            return Err(Error::NonFinite { node: format!("{}#{}", op.name(), id.0) });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; backward never propagates into it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, false)
    }

    /// Named parameter leaf; receives a gradient entry on backward.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self.push(Op::Leaf, value, true)?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// Registers every entry of a `ParamSet` and returns name -> node.
    pub fn param_set(&mut self, params: &ParamSet) -> Result<BTreeMap<String, NodeId>> {
        let mut map = BTreeMap::new();
        for (name, t) in params.iter() {
            map.insert(name.clone(), self.param(name, t.clone())?);
        }
        Ok(map)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (h, wid, cin) = {
            let xs = self.value(x).shape();
            if xs.len() != 3 {
                return Err(self.shape_err("conv2d", format!("input rank {} != 3", xs.len())));
            }
            (xs[0], xs[1], xs[2])
        };
        let (kh, kw, wcin, cout) = {
            let ws = self.value(w).shape();
            if ws.len() != 4 {
                return Err(self.shape_err("conv2d", format!("weight rank {} != 4", ws.len())));
            }
            (ws[0], ws[1], ws[2], ws[3])
        };
        if wcin != cin {
            return Err(self.shape_err("conv2d", format!("cin {cin} != weight cin {wcin}")));
        }
        if self.value(b).shape() != [cout] {
            return Err(self.shape_err("conv2d", format!("bias shape {:?} != [{cout}]", self.value(b).shape())));
        }
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(self.shape_err("conv2d", format!("kernel {kh}x{kw} too large for {h}x{wid} with pad {pad}")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wid + 2 * pad - kw) / stride + 1;

        let mut out = Tensor::zeros(&[oh, ow, cout]);
        conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
            ConvDims { h, w: wid, cin, kh, kw, cout, oh, ow, stride, pad },
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, out, needs)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = {
            let xs = self.value(x).shape();
            if xs.len() != 1 {
                return Err(self.shape_err("affine", format!("input rank {} != 1", xs.len())));
            }
            xs[0]
        };
        let (m, wn) = {
            let ws = self.value(w).shape();
            if ws.len() != 2 {
                return Err(self.shape_err("affine", format!("weight rank {} != 2", ws.len())));
            }
            (ws[0], ws[1])
        };
        if wn != n || self.value(b).shape() != [m] {
            return Err(self.shape_err("affine", format!("x[{n}], w[{m},{wn}], b{:?}", self.value(b).shape())));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = bv[i];
            for j in 0..n {
                acc += row[j] * xv[j];
            }
            out[i] = acc;
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Affine { x, w, b }, Tensor::from_vec(&[m], out), needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(Op::LeakyRelu { x, slope }, out, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, out, needs)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = {
            let xs = self.value(x).shape();
            if xs.len() != 3 {
                return Err(self.shape_err("global_avg_pool", format!("input rank {} != 3", xs.len())));
            }
            (xs[0], xs[1], xs[2])
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for px in 0..h * w {
            let base = px * c;
            for ch in 0..c {
                out[ch] += xv[base + ch];
            }
        }
        let inv = 1.0 / (h * w) as f64;
        for v in &mut out {
            *v *= inv;
        }
        let needs = self.needs(x);
        self.push(Op::GlobalAvgPool { x }, Tensor::from_vec(&[c], out), needs)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, name: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, out, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a, b }, out, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, out, needs)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| k * v);
        let needs = self.needs(x);
        self.push(Op::Scale { x, k }, out, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), needs)
    }

    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (h, w, c) = {
            let xs = self.value(x).shape();
            if xs.len() != 3 {
                return Err(self.shape_err("slice_channels", format!("input rank {} != 3", xs.len())));
            }
            (xs[0], xs[1], xs[2])
        };
        if from >= to || to > c {
            return Err(self.shape_err("slice_channels", format!("range {from}..{to} out of {c} channels")));
        }
        let nc = to - from;
        let xv = self.value(x).data();
        let mut out = vec![0.0; h * w * nc];
        for px in 0..h * w {
            out[px * nc..(px + 1) * nc].copy_from_slice(&xv[px * c + from..px * c + to]);
        }
        let needs = self.needs(x);
        self.push(Op::SliceChannels { x, from, to }, Tensor::from_vec(&[h, w, nc], out), needs)
    }

    pub fn max_channel(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = {
            let xs = self.value(x).shape();
            if xs.len() != 3 {
                return Err(self.shape_err("max_channel", format!("input rank {} != 3", xs.len())));
            }
            (xs[0], xs[1], xs[2])
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; h * w];
        for px in 0..h * w {
            let cell = &xv[px * c..(px + 1) * c];
            out[px] = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        let needs = self.needs(x);
        self.push(Op::MaxChannel { x }, Tensor::from_vec(&[h, w], out), needs)
    }

    /// Weighted binary cross entropy reduced to a scalar. `targets`
    /// and `weights` must match the prediction shape; the weights fold
    /// in masking and averaging.
    pub fn bce_loss(&mut self, p: NodeId, targets: Tensor, weights: Tensor) -> Result<NodeId> {
        if targets.shape() != self.value(p).shape() || weights.shape() != self.value(p).shape() {
            return Err(self.shape_err("bce_loss", "targets/weights shape mismatch".into()));
        }
        let pv = self.value(p).data();
        let mut acc = 0.0;
        for i in 0..pv.len() {
            let w = weights.data()[i];
            if w == 0.0 {
                continue;
            }
            acc += w * bce_term(pv[i], targets.data()[i]);
        }
        let needs = self.needs(p);
        self.push(Op::BceLoss { p, targets, weights }, Tensor::scalar(acc), needs)
    }

    /// Weighted focal loss reduced to a scalar.
    pub fn focal_loss(
        &mut self,
        p: NodeId,
        targets: Tensor,
        weights: Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<NodeId> {
        if targets.shape() != self.value(p).shape() || weights.shape() != self.value(p).shape() {
            return Err(self.shape_err("focal_loss", "targets/weights shape mismatch".into()));
        }
        let pv = self.value(p).data();
        let mut acc = 0.0;
        for i in 0..pv.len() {
            let w = weights.data()[i];
            if w == 0.0 {
                continue;
            }
            acc += w * focal_term(pv[i], targets.data()[i], alpha, gamma);
        }
        let needs = self.needs(p);
        self.push(
            Op::FocalLoss { p, targets, weights, alpha, gamma },
            Tensor::scalar(acc),
            needs,
        )
    }

    /// Mean over assigned cells of `1 - IoU(decoded box, target box)`.
    ///
    /// `reg` is the raw `[h,w,5]` regression map; decoding uses
    /// sigmoid-bounded center offsets within the cell and exponential
    /// sizes times the stride, capped at the image extent. The cells
    /// list must be non-empty (callers handle the zero-positive case).
    pub fn iou_loss(
        &mut self,
        reg: NodeId,
        cells: Vec<IouCell>,
        stride: usize,
        img_w: f64,
        img_h: f64,
    ) -> Result<NodeId> {
        let shape = self.value(reg).shape();
        if shape.len() != 3 || shape[2] < 4 {
            return Err(self.shape_err("iou_loss", format!("regression map shape {shape:?}")));
        }
        if cells.is_empty() {
            return Err(self.shape_err("iou_loss", "no assigned cells".into()));
        }
        let (h, w, _) = (shape[0], shape[1], shape[2]);
        for c in &cells {
            if c.cy >= h || c.cx >= w {
                return Err(self.shape_err("iou_loss", format!("cell ({},{}) outside {h}x{w}", c.cy, c.cx)));
            }
        }
        let mut acc = 0.0;
        for cell in &cells {
            let pred = decode_cell(self.value(reg), cell, stride, img_w, img_h);
            acc += 1.0 - crate::geometry::iou(&pred, &cell.target);
        }
        let loss = acc / cells.len() as f64;
        let needs = self.needs(reg);
        self.push(Op::IouLoss { reg, cells, stride, img_w, img_h }, Tensor::scalar(loss), needs)
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::ShapeMismatch { node: format!("{}#{}", op, self.nodes.len()), detail }
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for
    /// every registered parameter; parameters the loss does not reach
    /// get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradSet> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::ShapeMismatch {
                node: self.node_label(loss.0),
                detail: format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
            if !g.all_finite() {
                return Err(Error::NonFinite { node: format!("gradient of '{name}'") });
            }
            out.insert(name.clone(), g);
        }
        Ok(GradSet::from_entries(out))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: &Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (d, s) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *d += s;
                }
            }
            None => grads[id.0] = Some(contrib.clone()),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let dims = ConvDims {
                    h: xs[0],
                    w: xs[1],
                    cin: xs[2],
                    kh: ws[0],
                    kw: ws[1],
                    cout: ws[3],
                    oh: self.nodes[idx].value.shape()[0],
                    ow: self.nodes[idx].value.shape()[1],
                    stride: *stride,
                    pad: *pad,
                };
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[dims.cout]);
                    let gd = g.data();
                    for px in 0..dims.oh * dims.ow {
                        for oc in 0..dims.cout {
                            db.data_mut()[oc] += gd[px * dims.cout + oc];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.value(*w).shape());
                    conv_backward_weight(self.value(*x).data(), g.data(), dw.data_mut(), &dims);
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    conv_backward_input(self.value(*w).data(), g.data(), dx.data_mut(), &dims);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Affine { x, w, b } => {
                let n = self.value(*x).shape()[0];
                let m = self.value(*b).shape()[0];
                let gv = g.data();
                if self.needs(*b) {
                    self.accumulate(grads, *b, g);
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let mut dw = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        let gi = gv[i];
                        let row = &mut dw.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] = gi * xv[j];
                        }
                    }
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = Tensor::zeros(&[n]);
                    for i in 0..m {
                        let gi = gv[i];
                        let row = &wv[i * n..(i + 1) * n];
                        for j in 0..n {
                            dx.data_mut()[j] += gi * row[j];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for i in 0..xv.len() {
                        dx.data_mut()[i] = g.data()[i] * if xv[i] >= 0.0 { 1.0 } else { *slope };
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let sv = self.nodes[idx].value.data();
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for i in 0..sv.len() {
                        dx.data_mut()[i] = g.data()[i] * sv[i] * (1.0 - sv[i]);
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let (h, w, c) = self.value(*x).dims3();
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for px in 0..h * w {
                        for ch in 0..c {
                            dx.data_mut()[px * c + ch] = g.data()[ch] * inv;
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                let neg = g.map(|v| -v);
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = zip_map(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = zip_map(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    let dx = g.map(|v| v * k);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let dx = Tensor::filled(self.value(*x).shape(), g.scalar_value());
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SliceChannels { x, from, to } => {
                if self.needs(*x) {
                    let (h, w, c) = self.value(*x).dims3();
                    let nc = to - from;
                    let mut dx = Tensor::zeros(&[h, w, c]);
                    for px in 0..h * w {
                        dx.data_mut()[px * c + from..px * c + to]
                            .copy_from_slice(&g.data()[px * nc..(px + 1) * nc]);
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::MaxChannel { x } => {
                if self.needs(*x) {
                    let (h, w, c) = self.value(*x).dims3();
                    let xv = self.value(*x).data();
                    let mut dx = Tensor::zeros(&[h, w, c]);
                    for px in 0..h * w {
                        let cell = &xv[px * c..(px + 1) * c];
                        let am = crate::geometry::argmax(cell);
                        dx.data_mut()[px * c + am] = g.data()[px];
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::BceLoss { p, targets, weights } => {
                if self.needs(*p) {
                    let gs = g.scalar_value();
                    let pv = self.value(*p).data();
                    let mut dp = Tensor::zeros(self.value(*p).shape());
                    for i in 0..pv.len() {
                        let w = weights.data()[i];
                        if w == 0.0 {
                            continue;
                        }
                        dp.data_mut()[i] = gs * w * bce_term_dp(pv[i], targets.data()[i]);
                    }
                    self.accumulate(grads, *p, &dp);
                }
            }
            Op::FocalLoss { p, targets, weights, alpha, gamma } => {
                if self.needs(*p) {
                    let gs = g.scalar_value();
                    let pv = self.value(*p).data();
                    let mut dp = Tensor::zeros(self.value(*p).shape());
                    for i in 0..pv.len() {
                        let w = weights.data()[i];
                        if w == 0.0 {
                            continue;
                        }
                        dp.data_mut()[i] =
                            gs * w * focal_term_dp(pv[i], targets.data()[i], *alpha, *gamma);
                    }
                    self.accumulate(grads, *p, &dp);
                }
            }
            Op::IouLoss { reg, cells, stride, img_w, img_h } => {
                if self.needs(*reg) {
                    let gs = g.scalar_value() / cells.len() as f64;
                    let mut dreg = Tensor::zeros(self.value(*reg).shape());
                    for cell in cells {
                        iou_cell_backward(self.value(*reg), cell, *stride, *img_w, *img_h, gs, &mut dreg);
                    }
                    self.accumulate(grads, *reg, &dreg);
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn bce_term(p: f64, y: f64) -> f64 {
    -(y * p.max(LOG_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(LOG_FLOOR).ln())
}

fn bce_term_dp(p: f64, y: f64) -> f64 {
    let mut d = 0.0;
    if p > LOG_FLOOR {
        d += -y / p;
    }
    if 1.0 - p > LOG_FLOOR {
        d += (1.0 - y) / (1.0 - p);
    }
    d
}

pub fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y >= 0.5 {
        -alpha * (1.0 - p).powf(gamma) * p.max(LOG_FLOOR).ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).max(LOG_FLOOR).ln()
    }
}

fn focal_term_dp(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y >= 0.5 {
        let q = 1.0 - p;
        let mut d = 0.0;
        if gamma > 0.0 && q > 0.0 {
            d += alpha * gamma * q.powf(gamma - 1.0) * p.max(LOG_FLOOR).ln();
        }
        if p > LOG_FLOOR {
            d -= alpha * q.powf(gamma) / p;
        }
        d
    } else {
        let q = 1.0 - p;
        let mut d = 0.0;
        if gamma > 0.0 && p > 0.0 {
            d -= (1.0 - alpha) * gamma * p.powf(gamma - 1.0) * q.max(LOG_FLOOR).ln();
        }
        if q > LOG_FLOOR {
            d += (1.0 - alpha) * p.powf(gamma) / q;
        }
        d
    }
}

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], d: ConvDims) {
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let obase = (oy * d.ow + ox) * d.cout;
            out[obase..obase + d.cout].copy_from_slice(b);
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let xbase = (iy as usize * d.w + ix as usize) * d.cin;
                    let wbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for ic in 0..d.cin {
                        let xv = x[xbase + ic];
                        let wrow = &w[wbase + ic * d.cout..wbase + (ic + 1) * d.cout];
                        let orow = &mut out[obase..obase + d.cout];
                        for oc in 0..d.cout {
                            orow[oc] += xv * wrow[oc];
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(x: &[f64], g: &[f64], dw: &mut [f64], d: &ConvDims) {
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let gbase = (oy * d.ow + ox) * d.cout;
            let grow = &g[gbase..gbase + d.cout];
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let xbase = (iy as usize * d.w + ix as usize) * d.cin;
                    let wbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for ic in 0..d.cin {
                        let xv = x[xbase + ic];
                        let drow = &mut dw[wbase + ic * d.cout..wbase + (ic + 1) * d.cout];
                        for oc in 0..d.cout {
                            drow[oc] += xv * grow[oc];
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(w: &[f64], g: &[f64], dx: &mut [f64], d: &ConvDims) {
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let gbase = (oy * d.ow + ox) * d.cout;
            let grow = &g[gbase..gbase + d.cout];
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let xbase = (iy as usize * d.w + ix as usize) * d.cin;
                    let wbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for ic in 0..d.cin {
                        let wrow = &w[wbase + ic * d.cout..wbase + (ic + 1) * d.cout];
                        let mut acc = 0.0;
                        for oc in 0..d.cout {
                            acc += wrow[oc] * grow[oc];
                        }
                        dx[xbase + ic] += acc;
                    }
                }
            }
        }
    }
}

/// Decode one cell of a regression map into an absolute box. Center
/// offsets pass through a sigmoid so they stay inside the cell; sizes
/// are `exp(logit) * stride`, capped at the image extent. Not clamped
/// to the image: the loss keeps gradients alive at the borders, while
/// inference-time decoding clamps separately.
pub(crate) fn decode_cell(reg: &Tensor, cell: &IouCell, stride: usize, img_w: f64, img_h: f64) -> BBox {
    let tx = reg.at3(cell.cy, cell.cx, 0);
    let ty = reg.at3(cell.cy, cell.cx, 1);
    let tw = reg.at3(cell.cy, cell.cx, 2);
    let th = reg.at3(cell.cy, cell.cx, 3);
    let s = stride as f64;
    let cx = (cell.cx as f64 + sigmoid(tx)) * s;
    let cy = (cell.cy as f64 + sigmoid(ty)) * s;
    let bw = (tw.exp() * s).min(img_w);
    let bh = (th.exp() * s).min(img_h);
    BBox::new(cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh)
}

fn iou_cell_backward(
    reg: &Tensor,
    cell: &IouCell,
    stride: usize,
    img_w: f64,
    img_h: f64,
    upstream: f64,
    dreg: &mut Tensor,
) {
    let tx = reg.at3(cell.cy, cell.cx, 0);
    let ty = reg.at3(cell.cy, cell.cx, 1);
    let tw = reg.at3(cell.cy, cell.cx, 2);
    let th = reg.at3(cell.cy, cell.cx, 3);
    let s = stride as f64;
    let sx = sigmoid(tx);
    let sy = sigmoid(ty);
    let bw = tw.exp() * s;
    let bh = th.exp() * s;
    let w_capped = bw >= img_w;
    let h_capped = bh >= img_h;
    let bw_c = bw.min(img_w);
    let bh_c = bh.min(img_h);
    let cx = (cell.cx as f64 + sx) * s;
    let cy = (cell.cy as f64 + sy) * s;
    let pred = BBox::new(cx - 0.5 * bw_c, cy - 0.5 * bh_c, cx + 0.5 * bw_c, cy + 0.5 * bh_c);

    let (_, diou) = iou_with_corner_grads(&pred, &cell.target);
    // d(1 - iou) = -diou; chain through corners -> (cx, cy, w, h).
    let gx1 = -upstream * diou[0];
    let gy1 = -upstream * diou[1];
    let gx2 = -upstream * diou[2];
    let gy2 = -upstream * diou[3];
    let dcx = gx1 + gx2;
    let dcy = gy1 + gy2;
    let dw = 0.5 * (gx2 - gx1);
    let dh = 0.5 * (gy2 - gy1);

    let (h, w, c) = reg.dims3();
    debug_assert!(cell.cy < h && cell.cx < w);
    let base = (cell.cy * w + cell.cx) * c;
    let data = dreg.data_mut();
    data[base] += dcx * s * sx * (1.0 - sx);
    data[base + 1] += dcy * s * sy * (1.0 - sy);
    if !w_capped {
        data[base + 2] += dw * bw;
    }
    if !h_capped {
        data[base + 3] += dh * bh;
    }
}

/// IoU plus its gradient with respect to the first box's corners.
/// Max/min branches take the subgradient of the selected argument;
/// disjoint boxes sit on the zero-gradient plateau.
fn iou_with_corner_grads(p: &BBox, t: &BBox) -> (f64, [f64; 4]) {
    let ix1 = p.x1.max(t.x1);
    let iy1 = p.y1.max(t.y1);
    let ix2 = p.x2.min(t.x2);
    let iy2 = p.y2.min(t.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let area_p = p.area();
    let area_t = t.area();

    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;

    // d inter / d pred corners.
    let dix1 = if p.x1 >= t.x1 { 1.0 } else { 0.0 };
    let diy1 = if p.y1 >= t.y1 { 1.0 } else { 0.0 };
    let dix2 = if p.x2 <= t.x2 { 1.0 } else { 0.0 };
    let diy2 = if p.y2 <= t.y2 { 1.0 } else { 0.0 };
    let dinter = [-ih * dix1, -iw * diy1, ih * dix2, iw * diy2];

    // d area_p / d pred corners.
    let dap = [
        -(p.y2 - p.y1),
        -(p.x2 - p.x1),
        p.y2 - p.y1,
        p.x2 - p.x1,
    ];

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let dunion = dap[i] - dinter[i];
        grad[i] = (dinter[i] * union - inter * dunion) / (union * union);
    }
    (iou, grad)
}
