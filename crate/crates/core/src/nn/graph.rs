use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::gemm::gemm;
use super::roi::RoiAlignPlan;
use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Gradients of the backward root, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Param(String),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize, kernel: (usize, usize), cols: Vec<f64> },
    Relu(NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    RoiAlign { levels: Vec<NodeId>, plan: Rc<RoiAlignPlan> },
    AddBroadcast { x: NodeId, m: NodeId },
    Add(NodeId, NodeId),
    ChannelAffine { x: NodeId, scale: NodeId, shift: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Resample { x: NodeId, plan: Rc<ResamplePlan> },
    Reshape(NodeId),
    SliceRows { x: NodeId, start: usize },
    Gather { x: NodeId, idx: Vec<usize> },
    Concat(Vec<NodeId>),
    WeightedSum(Vec<(NodeId, f64)>),
    SoftmaxCe { logits: NodeId, rows: Vec<usize>, targets: Vec<usize>, probs: Vec<f64> },
    SmoothL1 { pred: NodeId, rows: Vec<usize>, targets: Vec<f64>, beta: f64 },
    BceLogits { logits: NodeId, labels: Vec<f64> },
}

/// Per-output-pixel interpolation taps for resizing a `h x w` plane.
#[derive(Debug)]
pub struct ResamplePlan {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    offsets: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl ResamplePlan {
    /// Bilinear resize with half-pixel centers (edges clamp).
    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let (ih, iw) = in_hw;
        let (oh, ow) = out_hw;
        let axis = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        };
        let mut offsets = vec![0];
        let mut taps = Vec::with_capacity(oh * ow * 4);
        for y in 0..oh {
            let (y0, y1, fy) = axis(y, oh, ih);
            for x in 0..ow {
                let (x0, x1, fx) = axis(x, ow, iw);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        if wy * wx != 0.0 {
                            taps.push((yy * iw + xx, wy * wx));
                        }
                    }
                }
                offsets.push(taps.len());
            }
        }
        Self { in_hw, out_hw, offsets, taps }
    }

    /// Nearest-neighbour resize (exact for integer up-sampling factors).
    pub fn nearest(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let (ih, iw) = in_hw;
        let (oh, ow) = out_hw;
        let mut offsets = vec![0];
        let mut taps = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = (y * ih / oh).min(ih - 1);
            for x in 0..ow {
                let sx = (x * iw / ow).min(iw - 1);
                taps.push((sy * iw + sx, 1.0));
                offsets.push(taps.len());
            }
        }
        Self { in_hw, out_hw, offsets, taps }
    }
}

/// A recording of one forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
    record: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), record: true }
    }

    /// A forward-only graph; skips backward caches.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { record: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = self.record && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Looks up a named parameter. Panics if the store lacks it: parameter
    /// names are fixed by the model constructor.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        self.nodes.push(Node { value: t, op: Op::Param(name.to_string()), needs_grad: self.record });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let keep_cols = self.record && !pointwise && (self.needs(w) || self.needs(x));
        let mut out = vec![0.0; n * o * plane];
        let mut cols_all = if keep_cols { vec![0.0; n * ckk * plane] } else { Vec::new() };
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            for i in 0..n {
                let x_i = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let out_i = &mut out[i * o * plane..(i + 1) * o * plane];
                if pointwise {
                    gemm(o, c, plane, 1.0, wv, false, x_i, false, 0.0, out_i);
                } else {
                    im2col(x_i, c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
                    gemm(o, ckk, plane, 1.0, wv, false, &cols, false, 0.0, out_i);
                    if keep_cols {
                        cols_all[i * ckk * plane..(i + 1) * ckk * plane].copy_from_slice(&cols);
                    }
                }
            }
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value.data;
                for (chunk, bias) in out.chunks_mut(plane).zip(bv.iter().cycle()) {
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor { shape: vec![n, o, ho, wo], data: out },
            Op::Conv2d { x, w, b, stride, pad, kernel: (kh, kw), cols: cols_all },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| a.max(0.0)).collect() };
        self.push(out, Op::Relu(x), &[x])
    }

    /// `x: [N, In]` (trailing dims flattened), `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.shape(x);
        let n = xs[0];
        let fan_in: usize = xs[1..].iter().product();
        let ws = self.shape(w);
        assert_eq!(ws[1], fan_in, "linear fan-in mismatch");
        let out_dim = ws[0];
        let mut out = vec![0.0; n * out_dim];
        gemm(n, fan_in, out_dim, 1.0, &self.nodes[x.0].value.data, false, &self.nodes[w.0].value.data, true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value.data;
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor { shape: vec![n, out_dim], data: out }, Op::Linear { x, w, b }, &inputs)
    }

    /// Pools boxes from `[1, C, H, W]` feature levels to `[N, C, P, P]`.
    pub fn roi_align(&mut self, levels: &[NodeId], plan: Rc<RoiAlignPlan>) -> NodeId {
        let c = self.shape(levels[0])[1];
        let p = plan.pooled;
        let bins = p * p;
        let mut out = vec![0.0; plan.num_boxes * c * bins];
        for n in 0..plan.num_boxes {
            let lv = &self.nodes[levels[plan.level_of_box[n]].0].value;
            let plane = lv.shape[2] * lv.shape[3];
            for bin in 0..bins {
                let taps = plan.bin_taps(n, bin);
                for ch in 0..c {
                    let f = &lv.data[ch * plane..(ch + 1) * plane];
                    out[(n * c + ch) * bins + bin] = taps.iter().map(|&(i, w)| w * f[i as usize]).sum();
                }
            }
        }
        let shape = vec![plan.num_boxes, c, p, p];
        self.push(Tensor { shape, data: out }, Op::RoiAlign { levels: levels.to_vec(), plan }, levels)
    }

    /// `x: [B, C, ...]` plus `m: [B', 1, ...]` broadcast over channels, with row
    /// `b` of `x` using row `b % B'` of `m`.
    pub fn add_broadcast(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        let (bx, c) = (xs[0], xs[1]);
        let bm = ms[0];
        let spatial: usize = xs[2..].iter().product();
        assert_eq!(ms[1], 1);
        assert_eq!(ms[2..].iter().product::<usize>(), spatial, "broadcast spatial mismatch");
        assert!(bm > 0 && bx % bm == 0, "broadcast rows must divide");
        let mut out = self.nodes[x.0].value.data.clone();
        let mv = &self.nodes[m.0].value.data;
        for b in 0..bx {
            let mrow = &mv[(b % bm) * spatial..(b % bm + 1) * spatial];
            for ch in 0..c {
                let o = &mut out[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
                o.iter_mut().zip(mrow).for_each(|(v, a)| *v += a);
            }
        }
        self.push(Tensor { shape: xs, data: out }, Op::AddBroadcast { x, m }, &[x, m])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().zip(&self.nodes[b.0].value.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, Op::Add(a, b), &[a, b])
    }

    /// Per-channel `x * scale + shift` on `[N, C, ...]`.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape[1];
        let spatial: usize = xv.shape[2..].iter().product();
        let sv = &self.nodes[scale.0].value.data;
        let tv = &self.nodes[shift.0].value.data;
        let mut data = xv.data.clone();
        for (i, chunk) in data.chunks_mut(spatial).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * sv[ch] + tv[ch]);
        }
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        let mut out = vec![f64::NEG_INFINITY; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let src = &xv.data[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = p * ho * wo + oy * wo + ox;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > out[o] {
                                out[o] = src[idx];
                                argmax[o] = idx as u32;
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor { shape: vec![n, c, ho, wo], data: out }, Op::MaxPool { x, argmax }, &[x])
    }

    /// Resizes every `[h, w]` plane of `x: [N, C, h, w]`.
    pub fn resample(&mut self, x: NodeId, plan: Rc<ResamplePlan>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.shape[0], xv.shape[1]);
        assert_eq!((xv.shape[2], xv.shape[3]), plan.in_hw, "resample input size mismatch");
        let in_plane = plan.in_hw.0 * plan.in_hw.1;
        let out_plane = plan.out_hw.0 * plan.out_hw.1;
        let mut out = vec![0.0; n * c * out_plane];
        for p in 0..n * c {
            let src = &xv.data[p * in_plane..(p + 1) * in_plane];
            for o in 0..out_plane {
                out[p * out_plane + o] =
                    plan.taps[plan.offsets[o]..plan.offsets[o + 1]].iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
        let shape = vec![n, c, plan.out_hw.0, plan.out_hw.1];
        self.push(Tensor { shape, data: out }, Op::Resample { x, plan }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let t = Tensor { shape: shape.to_vec(), data: v.data.clone() };
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        let row: usize = v.shape[1..].iter().product();
        let mut shape = v.shape.clone();
        shape[0] = end - start;
        let t = Tensor { shape, data: v.data[start * row..end * row].to_vec() };
        self.push(t, Op::SliceRows { x, start }, &[x])
    }

    /// Flat gather `out[m] = x.flat[idx[m]]`.
    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let v = &self.nodes[x.0].value.data;
        let data: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let t = Tensor { shape: vec![data.len()], data };
        self.push(t, Op::Gather { x, idx }, &[x])
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let data: Vec<f64> = parts.iter().flat_map(|p| self.nodes[p.0].value.data.iter().copied()).collect();
        let t = Tensor { shape: vec![data.len()], data };
        self.push(t, Op::Concat(parts.to_vec()), parts)
    }

    /// `sum_i w_i * x_i` over same-shaped nodes. Terms with weight exactly
    /// zero are dropped from the tape so nothing flows back through them.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let terms: Vec<(NodeId, f64)> = terms.iter().copied().filter(|&(_, w)| w != 0.0).collect();
        let shape = match terms.first() {
            Some(&(id, _)) => self.shape(id).to_vec(),
            None => vec![1],
        };
        let mut data = vec![0.0; shape.iter().product()];
        for &(id, w) in &terms {
            assert_eq!(self.shape(id), &shape[..], "weighted_sum shape mismatch");
            data.iter_mut().zip(&self.nodes[id.0].value.data).for_each(|(d, v)| *d += w * v);
        }
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor { shape, data }, Op::WeightedSum(terms), &inputs)
    }

    /// Mean softmax cross-entropy over `rows` of `logits: [N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, rows: Vec<usize>, targets: Vec<usize>) -> NodeId {
        assert_eq!(rows.len(), targets.len());
        let v = &self.nodes[logits.0].value;
        let k = v.shape[1];
        let mut probs = vec![0.0; rows.len() * k];
        let mut loss = 0.0;
        for (r, (&row, &t)) in rows.iter().zip(&targets).enumerate() {
            let z = &v.data[row * k..(row + 1) * k];
            let p = &mut probs[r * k..(r + 1) * k];
            softmax_into(z, p);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
            loss += lse - z[t];
        }
        if !rows.is_empty() {
            loss /= rows.len() as f64;
        }
        self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, rows, targets, probs }, &[logits])
    }

    /// Smooth-L1 summed over the columns of the selected `rows` of
    /// `pred: [N, D]`, averaged over rows. `targets` holds `rows.len() * D`.
    pub fn smooth_l1(&mut self, pred: NodeId, rows: Vec<usize>, targets: Vec<f64>, beta: f64) -> NodeId {
        let v = &self.nodes[pred.0].value;
        let d: usize = v.shape[1..].iter().product();
        assert_eq!(targets.len(), rows.len() * d);
        let mut loss = 0.0;
        for (r, &row) in rows.iter().enumerate() {
            for j in 0..d {
                loss += smooth_l1_value(v.data[row * d + j] - targets[r * d + j], beta);
            }
        }
        if !rows.is_empty() {
            loss /= rows.len() as f64;
        }
        self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, rows, targets, beta }, &[pred])
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `labels`.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: Vec<f64>) -> NodeId {
        let v = &self.nodes[logits.0].value.data;
        assert_eq!(v.len(), labels.len());
        let mut loss: f64 = v
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        if !labels.is_empty() {
            loss /= labels.len() as f64;
        }
        self.push(Tensor::scalar(loss), Op::BceLogits { logits, labels }, &[logits])
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients::new();
        if !self.nodes[root.0].needs_grad {
            return out;
        }
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(name) = &node.op {
                if let Some(g) = grads[id].take() {
                    out.insert(name.clone(), Tensor { shape: node.value.shape.clone(), data: g });
                }
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        out
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad, kernel, cols } => {
                let xs = &self.nodes[x.0].value.shape;
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, ho, wo) = (node.value.shape[1], node.value.shape[2], node.value.shape[3]);
                let (kh, kw) = *kernel;
                let ckk = c * kh * kw;
                let plane = ho * wo;
                let pointwise = cols.is_empty();
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                if let Some(gb) = b.and_then(|b| self.acc(grads, b)) {
                    for (i, chunk) in gy.chunks(plane).enumerate() {
                        gb[i % o] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for i in 0..n {
                        let gy_i = &gy[i * o * plane..(i + 1) * o * plane];
                        let src = if pointwise { &xv[i * c * h * wd..(i + 1) * c * h * wd] } else { &cols[i * ckk * plane..(i + 1) * ckk * plane] };
                        gemm(o, plane, ckk, 1.0, gy_i, false, src, true, 1.0, gw);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dcols = vec![0.0; ckk * plane];
                    for i in 0..n {
                        let gy_i = &gy[i * o * plane..(i + 1) * o * plane];
                        let gx_i = &mut gx[i * c * h * wd..(i + 1) * c * h * wd];
                        if pointwise {
                            gemm(c, o, plane, 1.0, wv, true, gy_i, false, 1.0, gx_i);
                        } else {
                            gemm(ckk, o, plane, 1.0, wv, true, gy_i, false, 0.0, &mut dcols);
                            col2im(&dcols, c, h, wd, kh, kw, *stride, *pad, ho, wo, gx_i);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, &a), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        if a > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let n = xv.shape[0];
                let fan_in = xv.len() / n.max(1);
                let out_dim = node.value.shape[1];
                if let Some(gb) = b.and_then(|b| self.acc(grads, b)) {
                    for row in gy.chunks(out_dim) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(out_dim, n, fan_in, 1.0, gy, true, &xv.data, false, 1.0, gw);
                }
                let wv = &self.nodes[w.0].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(n, out_dim, fan_in, 1.0, gy, false, wv, false, 1.0, gx);
                }
            }
            Op::RoiAlign { levels, plan } => {
                let c = node.value.shape[1];
                let bins = plan.pooled * plan.pooled;
                for n in 0..plan.num_boxes {
                    let lid = levels[plan.level_of_box[n]];
                    let ls = &self.nodes[lid.0].value.shape;
                    let plane = ls[2] * ls[3];
                    let Some(gl) = self.acc(grads, lid) else { continue };
                    for bin in 0..bins {
                        let taps = plan.bin_taps(n, bin);
                        for ch in 0..c {
                            let d = gy[(n * c + ch) * bins + bin];
                            if d == 0.0 {
                                continue;
                            }
                            let g = &mut gl[ch * plane..(ch + 1) * plane];
                            for &(i, w) in taps {
                                g[i as usize] += w * d;
                            }
                        }
                    }
                }
            }
            Op::AddBroadcast { x, m } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                let xs = &node.value.shape;
                let (bx, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let bm = self.nodes[m.0].value.shape[0];
                if let Some(gm) = self.acc(grads, *m) {
                    for b in 0..bx {
                        let row = &mut gm[(b % bm) * spatial..(b % bm + 1) * spatial];
                        for ch in 0..c {
                            let src = &gy[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
                            row.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(g) = self.acc(grads, *id) {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = &self.nodes[x.0].value;
                let c = xv.shape[1];
                let spatial: usize = xv.shape[2..].iter().product();
                let sv = &self.nodes[scale.0].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (g, d)) in gx.chunks_mut(spatial).zip(gy.chunks(spatial)).enumerate() {
                        let s = sv[i % c];
                        g.iter_mut().zip(d).for_each(|(g, d)| *g += s * d);
                    }
                }
                if let Some(gs) = self.acc(grads, *scale) {
                    for (i, (xc, d)) in xv.data.chunks(spatial).zip(gy.chunks(spatial)).enumerate() {
                        gs[i % c] += xc.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gt) = self.acc(grads, *shift) {
                    for (i, d) in gy.chunks(spatial).enumerate() {
                        gt[i % c] += d.iter().sum::<f64>();
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let xs = &self.nodes[x.0].value.shape;
                let in_plane = xs[2] * xs[3];
                let out_plane = node.value.shape[2] * node.value.shape[3];
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, (&a, &d)) in argmax.iter().zip(gy).enumerate() {
                        gx[(o / out_plane) * in_plane + a as usize] += d;
                    }
                }
            }
            Op::Resample { x, plan } => {
                let in_plane = plan.in_hw.0 * plan.in_hw.1;
                let out_plane = plan.out_hw.0 * plan.out_hw.1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (p, d) in gy.chunks(out_plane).enumerate() {
                        let g = &mut gx[p * in_plane..(p + 1) * in_plane];
                        for (o, &dv) in d.iter().enumerate() {
                            for &(i, w) in &plan.taps[plan.offsets[o]..plan.offsets[o + 1]] {
                                g[i] += w * dv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::SliceRows { x, start } => {
                let row: usize = node.value.shape[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * row..start * row + gy.len()].iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&i, &d) in idx.iter().zip(gy) {
                        gx[i] += d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(g) = self.acc(grads, *p) {
                        g.iter_mut().zip(&gy[off..off + len]).for_each(|(g, d)| *g += d);
                    }
                    off += len;
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    if let Some(g) = self.acc(grads, id) {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += w * d);
                    }
                }
            }
            Op::SoftmaxCe { logits, rows, targets, probs } => {
                if rows.is_empty() {
                    return;
                }
                let k = self.nodes[logits.0].value.shape[1];
                let scale = gy[0] / rows.len() as f64;
                if let Some(g) = self.acc(grads, *logits) {
                    for (r, (&row, &t)) in rows.iter().zip(targets).enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[row * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, rows, targets, beta } => {
                if rows.is_empty() {
                    return;
                }
                let pv = &self.nodes[pred.0].value;
                let d: usize = pv.shape[1..].iter().product();
                let scale = gy[0] / rows.len() as f64;
                if let Some(g) = self.acc(grads, *pred) {
                    for (r, &row) in rows.iter().enumerate() {
                        for j in 0..d {
                            let diff = pv.data[row * d + j] - targets[r * d + j];
                            g[row * d + j] += scale * smooth_l1_grad(diff, *beta);
                        }
                    }
                }
            }
            Op::BceLogits { logits, labels } => {
                if labels.is_empty() {
                    return;
                }
                let xv = &self.nodes[logits.0].value.data;
                let scale = gy[0] / labels.len() as f64;
                if let Some(g) = self.acc(grads, *logits) {
                    for ((g, &x), &y) in g.iter_mut().zip(xv).zip(labels) {
                        *g += scale * (sigmoid(x) - y);
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

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn smooth_l1_value(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        diff / beta
    } else {
        diff.signum()
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let plane = ho * wo;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ch * kh + ki) * kw + kj) * plane..((ch * kh + ki) * kw + kj + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize, x: &mut [f64]) {
    let plane = ho * wo;
    for ch in 0..c {
        let dst = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ch * kh + ki) * kw + kj) * plane..((ch * kh + ki) * kw + kj + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::nn::{RoiLevel, RoiAlignPlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    /// Central finite differences of `f` against the tape's gradient for
    /// every scalar of every parameter.
    fn check<F>(store: &ParamStore, f: F)
    where
        F: for<'a> Fn(&mut Graph<'a>) -> NodeId,
    {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        let grads = g.backward(root);
        let h = 1e-5;
        for (name, t) in store.iter() {
            let gt = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            for i in 0..t.len() {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().data[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().data[i] -= h;
                let lp = { let mut g = Graph::new(&plus); let r = f(&mut g); g.scalar(r) };
                let lm = { let mut g = Graph::new(&minus); let r = f(&mut g); g.scalar(r) };
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = gt.data[i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!((numeric - analytic).abs() / denom < 1e-5, "{name}[{i}]: {analytic} vs {numeric}");
            }
        }
    }

    fn sum_sq(g: &mut Graph<'_>, x: NodeId) -> NodeId {
        // A smooth scalar readout: 0.5 * sum(x^2) via smooth_l1 with huge beta.
        let n = g.shape(x)[0];
        let d: usize = g.shape(x)[1..].iter().product();
        g.smooth_l1(x, (0..n).collect(), vec![0.0; n * d], 1e9)
    }

    #[test]
    fn conv_relu_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("x", rand_tensor(&mut rng, &[2, 2, 5, 6]));
        store.insert("w", rand_tensor(&mut rng, &[3, 2, 3, 3]));
        store.insert("b", rand_tensor(&mut rng, &[3]));
        store.insert("w1", rand_tensor(&mut rng, &[3, 3, 1, 1]));
        store.insert("fc", rand_tensor(&mut rng, &[4, 3 * 3 * 3]));
        store.insert("fb", rand_tensor(&mut rng, &[4]));
        check(&store, |g| {
            let x = g.param("x");
            let w = g.param("w");
            let b = g.param("b");
            let y = g.conv2d(x, w, Some(b), 2, 1);
            let w1 = g.param("w1");
            let y = g.conv2d(y, w1, None, 1, 0);
            let y = g.relu(y);
            let fc = g.param("fc");
            let fb = g.param("fb");
            let z = g.linear(y, fc, Some(fb));
            g.softmax_cross_entropy(z, vec![0, 1], vec![2, 0])
        });
    }

    #[test]
    fn roi_resample_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert("f", rand_tensor(&mut rng, &[1, 2, 6, 7]));
        store.insert("m", rand_tensor(&mut rng, &[2, 1, 2, 2]));
        store.insert("s", rand_tensor(&mut rng, &[2]));
        store.insert("t", rand_tensor(&mut rng, &[2]));
        let level = RoiLevel { height: 6, width: 7, stride: 4.0 };
        let boxes = [BBox::new(2.0, 3.0, 20.0, 17.0), BBox::new(0.0, 0.0, 28.0, 24.0), BBox::new(9.0, 5.0, 13.0, 11.0), BBox::new(1.0, 1.0, 5.0, 5.0)];
        let plan = Rc::new(RoiAlignPlan::new(&boxes, &[0; 4], &[level], 3, 2).unwrap());
        let up = Rc::new(ResamplePlan::bilinear((2, 2), (3, 3)));
        check(&store, |g| {
            let f = g.param("f");
            let s = g.param("s");
            let t = g.param("t");
            let f = g.channel_affine(f, s, t);
            let r = g.roi_align(&[f], plan.clone());
            let m = g.param("m");
            let m = g.resample(m, up.clone());
            let y = g.add_broadcast(r, m);
            let a = g.slice_rows(y, 1, 3);
            let b = g.slice_rows(y, 2, 4);
            let y = g.add(a, b);
            sum_sq(g, y)
        });
    }

    #[test]
    fn pool_gather_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("x", rand_tensor(&mut rng, &[1, 2, 5, 5]));
        store.insert("y", rand_tensor(&mut rng, &[3]));
        let near = Rc::new(ResamplePlan::nearest((3, 3), (6, 6)));
        check(&store, |g| {
            let x = g.param("x");
            let p = g.max_pool(x);
            let u = g.resample(p, near.clone());
            let y = g.param("y");
            let cat = g.concat(&[u, y]);
            let sel = g.gather(cat, vec![0, 5, 7, 71, 72, 73]);
            let l1 = g.bce_with_logits(sel, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
            let r = g.reshape(sel, &[3, 2]);
            let l2 = g.smooth_l1(r, vec![0, 2], vec![0.3, -0.2, 1.5, 0.1], 1.0 / 9.0);
            g.weighted_sum(&[(l1, 0.7), (l2, 1.3)])
        });
    }

    #[test]
    fn zero_weight_terms_do_not_reach_params() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(2.0));
        let mut g = Graph::new(&store);
        let a = g.param("a");
        let b = g.param("b");
        let la = g.smooth_l1(a, vec![0], vec![0.0], 1.0);
        let lb = g.smooth_l1(b, vec![0], vec![0.0], 1.0);
        let total = g.weighted_sum(&[(la, 1.0), (lb, 0.0)]);
        let grads = g.backward(total);
        assert!(grads.contains_key("a"));
        assert!(!grads.contains_key("b"));
    }

    #[test]
    fn inference_graph_records_no_grads() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        let mut g = Graph::inference(&store);
        let a = g.param("a");
        let l = g.smooth_l1(a, vec![0], vec![0.0], 1.0);
        assert!(g.backward(l).is_empty());
    }
}
