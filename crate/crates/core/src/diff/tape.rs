use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::estimator::{solve_alignment, AlignmentSolution};
use crate::geometry::{rot_z, CameraIntrinsics, PlanarPose, SE3Pose, MIN_DISPARITY};

use super::align::alignment_adjoint;

/// Standard deviations at or below this are treated as zero variance by ZNCC.
pub(crate) const ZNCC_MIN_STD: f64 = 1e-12;

/// Sample points this close outside a map are snapped onto its border.
const BORDER_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    SoftmaxRows { x: NodeId, temperature: f64, cols: usize },
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    AvgPool2(NodeId),
    UpsampleNearest2(NodeId),
    ResizeBilinear { x: NodeId, rows: Vec<Lerp>, cols: Vec<Lerp> },
    Concat(Vec<NodeId>),
    WindowUnfold { x: NodeId, window: usize },
    Subsample { x: NodeId, stride: usize },
    BilinearSample { map: NodeId, points: NodeId, taps: Vec<Tap> },
    ZnccMatrix { a: NodeId, b: NodeId, cache: ZnccCache },
    ZnccRows { a: NodeId, b: NodeId, cache: ZnccCache },
    Backproject { points: NodeId, disparity: NodeId, k: CameraIntrinsics },
    GatherRows { x: NodeId, idx: Vec<usize> },
    RigidAlign { source: NodeId, target: NodeId, weights: NodeId, solution: Box<AlignmentSolution> },
    PlanarPoseLoss { pose: NodeId, gt: PlanarPose, lambda: f64 },
    PlanarKeypointLoss { source: NodeId, target: NodeId, gt: SE3Pose },
}

/// Linear interpolation between two source indices.
#[derive(Debug, Clone, Copy)]
struct Lerp {
    i0: usize,
    i1: usize,
    t: f64,
}

/// Bilinear footprint of one sample point.
#[derive(Debug, Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    tx: f64,
    ty: f64,
}

/// Zero-normalized rows of both operands and their standard deviations.
#[derive(Debug, Clone)]
struct ZnccCache {
    dim: usize,
    a_hat: Vec<f64>,
    a_std: Vec<f64>,
    b_hat: Vec<f64>,
    b_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output, one entry per parameter node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

/// Ordered record of primitive operations. Node ids are indices, so the
/// record is topologically sorted by construction.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn normalize_rows(x: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / dim;
    let mut hat = vec![0.0; x.len()];
    let mut std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let s = var.sqrt();
        std[r] = s;
        if s > ZNCC_MIN_STD {
            for (h, v) in hat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *h = (v - mean) / s;
            }
        }
    }
    (hat, std)
}

fn lerp_table(out_len: usize, in_len: usize) -> Vec<Lerp> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Lerp {
                i0,
                i1,
                t: src - i0 as f64,
            }
        })
        .collect()
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node {id:?} is not scalar");
        v[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[NodeId]) -> NodeId {
        debug_assert_eq!(value.len(), numel(&shape));
        let needs_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_shape(&self, id: NodeId, expect: &[usize], what: &str) {
        assert_eq!(self.shape(id), expect, "{what}: unexpected shape");
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> NodeId {
        assert_eq!(value.len(), numel(shape), "constant value does not match shape");
        self.push(value, shape.to_vec(), Op::Constant, &[])
    }

    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> NodeId {
        assert_eq!(value.len(), numel(shape), "parameter value does not match shape");
        self.push(value, shape.to_vec(), Op::Param, &[])
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "elementwise operands differ in size"
        );
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, op, &[x])
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, offset: f64) -> NodeId {
        self.unary(x, |v| scale * v + offset, Op::Affine { x, scale })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        assert_eq!(numel(shape), self.value(x).len(), "reshape changes element count");
        let value = self.value(x).to_vec();
        self.push(value, shape.to_vec(), Op::Reshape(x), &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aik = av[i * k + p];
                if aik == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aik * bv;
                }
            }
        }
        self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Row-wise `softmax(temperature * x)` over the last axis of a matrix.
    pub fn softmax_rows(&mut self, x: NodeId, temperature: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "softmax_rows expects a matrix");
        let cols = shape[1];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (temperature * (*v - max)).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, shape, Op::SoftmaxRows { x, temperature, cols }, &[x])
    }

    /// Zero-padded 3x3 convolution: `[C, H, W] * [O, C, 3, 3] + [O] -> [O, H, W]`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "conv input must be [C, H, W]");
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let sw = self.shape(w).to_vec();
        assert!(sw.len() == 4 && sw[1] == c && sw[2] == 3 && sw[3] == 3, "conv weight {sw:?} for {c} channels");
        let o = sw[0];
        self.check_shape(b, &[o], "conv bias");
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let plane = h * wd;
        let mut out = vec![0.0; o * plane];
        for oc in 0..o {
            let out_plane = &mut out[oc * plane..(oc + 1) * plane];
            out_plane.iter_mut().for_each(|v| *v = bv[oc]);
            for ic in 0..c {
                let in_plane = &xv[ic * plane..(ic + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let weight = wv[((oc * c + ic) * 3 + ky) * 3 + kx];
                        conv_tap(out_plane, in_plane, h, wd, ky, kx, weight);
                    }
                }
            }
        }
        self.push(out, vec![o, h, wd], Op::Conv3x3 { x, w, b }, &[x, w, b])
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[1].is_multiple_of(2) && s[2].is_multiple_of(2), "avg_pool2 on {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
                }
            }
        }
        self.push(out, vec![c, oh, ow], Op::AvgPool2(x), &[x])
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "upsample expects [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, vec![c, oh, ow], Op::UpsampleNearest2(x), &[x])
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "resize expects [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows = lerp_table(out_h, h);
        let cols = lerp_table(out_w, w);
        let xv = self.value(x);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            for (oy, r) in rows.iter().enumerate() {
                for (ox, q) in cols.iter().enumerate() {
                    let top = src[r.i0 * w + q.i0] * (1.0 - q.t) + src[r.i0 * w + q.i1] * q.t;
                    let bot = src[r.i1 * w + q.i0] * (1.0 - q.t) + src[r.i1 * w + q.i1] * q.t;
                    out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - r.t) + bot * r.t;
                }
            }
        }
        self.push(out, vec![c, out_h, out_w], Op::ResizeBilinear { x, rows, cols }, &[x])
    }

    /// Concatenates `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let s0 = self.shape(parts[0]).to_vec();
        assert_eq!(s0.len(), 3, "concat expects [C, H, W]");
        let mut channels = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 3 && s[1] == s0[1] && s[2] == s0[2], "concat spatial mismatch {s:?} vs {s0:?}");
            channels += s[0];
            out.extend_from_slice(self.value(p));
        }
        self.push(out, vec![channels, s0[1], s0[2]], Op::Concat(parts.to_vec()), parts)
    }

    /// Rearranges a `[1, H, W]` or `[H, W]` map into one row per `window x window`
    /// tile, tiles in row-major order, pixels row-major within each tile.
    pub fn window_unfold(&mut self, x: NodeId, window: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        let (h, w) = match s.as_slice() {
            [1, h, w] | [h, w] => (*h, *w),
            _ => panic!("window_unfold expects a single-channel map, got {s:?}"),
        };
        assert!(window > 0 && h % window == 0 && w % window == 0, "window {window} does not tile {h}x{w}");
        let (ny, nx) = (h / window, w / window);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(h * w);
        for ty in 0..ny {
            for tx in 0..nx {
                for ly in 0..window {
                    let row = (ty * window + ly) * w + tx * window;
                    out.extend_from_slice(&xv[row..row + window]);
                }
            }
        }
        self.push(out, vec![ny * nx, window * window], Op::WindowUnfold { x, window }, &[x])
    }

    /// Keeps every `stride`-th pixel of a `[C, H, W]` map in both directions.
    pub fn subsample(&mut self, x: NodeId, stride: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && stride >= 1, "subsample expects [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(xv[(ch * h + y * stride) * w + xx * stride]);
                }
            }
        }
        self.push(out, vec![c, oh, ow], Op::Subsample { x, stride }, &[x])
    }

    /// Samples a `[C, H, W]` map at `[N, 2]` points `(u, v)`, giving `[N, C]`.
    pub fn bilinear_sample(&mut self, map: NodeId, points: NodeId) -> Result<NodeId> {
        let s = self.shape(map).to_vec();
        let (c, h, w) = match s.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            _ => return Err(Error::Shape(format!("bilinear map of shape {s:?}"))),
        };
        let sp = self.shape(points).to_vec();
        if sp.len() != 2 || sp[1] != 2 {
            return Err(Error::Shape(format!("sample points of shape {sp:?}")));
        }
        let n = sp[0];
        let pv = self.value(points);
        let mut taps = Vec::with_capacity(n);
        for i in 0..n {
            let (u, v) = (pv[2 * i], pv[2 * i + 1]);
            let in_range = |q: f64, len: usize| q >= -BORDER_SLACK && q <= (len - 1) as f64 + BORDER_SLACK;
            if !(in_range(u, w) && in_range(v, h)) {
                return Err(Error::OutOfBounds {
                    x: u,
                    y: v,
                    width: w,
                    height: h,
                });
            }
            let split = |q: f64, len: usize| {
                let q = q.clamp(0.0, (len - 1) as f64);
                let i0 = (q.floor() as usize).min(len.saturating_sub(2));
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, if i1 == i0 { 0.0 } else { q - i0 as f64 })
            };
            let (x0, x1, tx) = split(u, w);
            let (y0, y1, ty) = split(v, h);
            taps.push(Tap { x0, x1, y0, y1, tx, ty });
        }
        let mv = self.value(map);
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        for (i, t) in taps.iter().enumerate() {
            for ch in 0..c {
                let p = &mv[ch * plane..(ch + 1) * plane];
                out[i * c + ch] = (1.0 - t.ty) * ((1.0 - t.tx) * p[t.y0 * w + t.x0] + t.tx * p[t.y0 * w + t.x1])
                    + t.ty * ((1.0 - t.tx) * p[t.y1 * w + t.x0] + t.tx * p[t.y1 * w + t.x1]);
            }
        }
        Ok(self.push(out, vec![n, c], Op::BilinearSample { map, points, taps }, &[map, points]))
    }

    /// ZNCC between every row of `a: [N, D]` and every pixel of a
    /// channel-major map `b: [D, ...]`, giving `[N, M]`.
    pub fn zncc_matrix(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 2 && !sb.is_empty() && sb[0] == sa[1], "zncc_matrix shapes {sa:?} vs {sb:?}");
        let (n, d) = (sa[0], sa[1]);
        let m = numel(&sb) / d;
        let (a_hat, a_std) = normalize_rows(self.value(a), d);
        // pixel-major copy of b so each candidate descriptor is contiguous
        let bv = self.value(b);
        let mut b_rows = vec![0.0; m * d];
        for ch in 0..d {
            for j in 0..m {
                b_rows[j * d + ch] = bv[ch * m + j];
            }
        }
        let (b_hat, b_std) = normalize_rows(&b_rows, d);
        let inv_d = 1.0 / d as f64;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &a_hat[i * d..(i + 1) * d];
            for j in 0..m {
                let br = &b_hat[j * d..(j + 1) * d];
                out[i * m + j] = dot(ar, br) * inv_d;
            }
        }
        let cache = ZnccCache {
            dim: d,
            a_hat,
            a_std,
            b_hat,
            b_std,
        };
        self.push(out, vec![n, m], Op::ZnccMatrix { a, b, cache }, &[a, b])
    }

    /// Row-wise ZNCC of two `[N, D]` matrices, giving `[N]`.
    pub fn zncc_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        assert!(sa.len() == 2 && self.shape(b) == sa.as_slice(), "zncc_rows shape mismatch");
        let d = sa[1];
        let (a_hat, a_std) = normalize_rows(self.value(a), d);
        let (b_hat, b_std) = normalize_rows(self.value(b), d);
        let out = a_hat
            .chunks(d)
            .zip(b_hat.chunks(d))
            .map(|(x, y)| dot(x, y) / d as f64)
            .collect();
        let cache = ZnccCache {
            dim: d,
            a_hat,
            a_std,
            b_hat,
            b_std,
        };
        self.push(out, vec![sa[0]], Op::ZnccRows { a, b, cache }, &[a, b])
    }

    /// Inverse stereo model for `[N, 2]` pixels and `[N]` disparities, giving `[N, 3]`.
    pub fn backproject(&mut self, points: NodeId, disparity: NodeId, k: &CameraIntrinsics) -> Result<NodeId> {
        let n = self.shape(points)[0];
        if self.shape(points) != [n, 2] || self.value(disparity).len() != n {
            return Err(Error::Shape("backproject expects [N, 2] points and N disparities".into()));
        }
        let (pv, dv) = (self.value(points), self.value(disparity));
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            let d = dv[i];
            if !(d > MIN_DISPARITY) {
                return Err(Error::InvalidDisparity(d));
            }
            let s = k.b / d;
            out.push(s * (pv[2 * i] - k.cu));
            out.push(s * (k.fu / k.fv) * (pv[2 * i + 1] - k.cv));
            out.push(s * k.fu);
        }
        Ok(self.push(out, vec![n, 3], Op::Backproject { points, disparity, k: *k }, &[points, disparity]))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let s = self.shape(x).to_vec();
        let row = numel(&s[1..]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < s[0], "gather index {i} out of {}", s[0]);
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        self.push(out, shape, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Weighted rigid alignment of `[n, 3]` point sets with `[n]` weights.
    /// The output is `[12]`: row-major rotation followed by translation.
    pub fn rigid_align(&mut self, source: NodeId, target: NodeId, weights: NodeId) -> Result<NodeId> {
        let n = self.shape(source)[0];
        if self.shape(source) != [n, 3] || self.shape(target) != [n, 3] || self.value(weights).len() != n {
            return Err(Error::Shape("rigid_align expects [n, 3], [n, 3], [n]".into()));
        }
        let s = to_vectors(self.value(source));
        let t = to_vectors(self.value(target));
        let solution = solve_alignment(&s, &t, self.value(weights))?;
        let value = solution.pose.to_array().to_vec();
        Ok(self.push(
            value,
            vec![12],
            Op::RigidAlign {
                source,
                target,
                weights,
                solution: Box::new(solution),
            },
            &[source, target, weights],
        ))
    }

    /// Planar pose loss: the estimate is reduced to `(r_x, r_y, yaw)` and
    /// compared with `gt` via translation error plus `lambda` times the
    /// squared Frobenius norm of `C_est C_gt^T - I`.
    pub fn planar_pose_loss(&mut self, pose: NodeId, gt: &PlanarPose, lambda: f64) -> NodeId {
        self.check_shape(pose, &[12], "pose");
        let p = self.value(pose);
        let yaw = p[3].atan2(p[0]);
        let rel = rot_z(yaw) * rot_z(gt.gamma).transpose() - nalgebra::Matrix3::identity();
        let loss = (p[9] - gt.alpha).powi(2) + (p[10] - gt.beta).powi(2) + lambda * rel.norm_squared();
        self.push(vec![loss], vec![1], Op::PlanarPoseLoss { pose, gt: *gt, lambda }, &[pose])
    }

    /// Sum over pairs of the squared (x, y) residual `(T p_s - p_t)`.
    pub fn planar_keypoint_loss(&mut self, source: NodeId, target: NodeId, gt: &SE3Pose) -> NodeId {
        let n = self.shape(source)[0];
        self.check_shape(source, &[n, 3], "keypoint loss source");
        self.check_shape(target, &[n, 3], "keypoint loss target");
        let (sv, tv) = (self.value(source), self.value(target));
        let mut loss = 0.0;
        for i in 0..n {
            let e = planar_residual(gt, &sv[3 * i..3 * i + 3], &tv[3 * i..3 * i + 3]);
            loss += e[0] * e[0] + e[1] * e[1];
        }
        self.push(vec![loss], vec![1], Op::PlanarKeypointLoss { source, target, gt: *gt }, &[source, target])
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<GradientMap> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, node has shape {:?}",
                out.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        let mut grads = BTreeMap::new();
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Param) {
                let g = adj[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                grads.insert(NodeId(i), g);
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        Ok(GradientMap { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let buf = adj[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| {
                    for ((x, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let (bv, out) = (self.value(*b), &node.value);
                acc(*a, &mut |buf| {
                    for ((x, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                        *x += gi / bi;
                    }
                });
                acc(*b, &mut |buf| {
                    for (((x, gi), bi), oi) in buf.iter_mut().zip(g).zip(bv).zip(out) {
                        *x -= gi * oi / bi;
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += scale * gi));
            }
            Op::Sqrt(x) => elementwise_back(&mut acc, *x, g, &node.value, |_, y| 0.5 / y),
            Op::Exp(x) => elementwise_back(&mut acc, *x, g, &node.value, |_, y| y),
            Op::Log(x) => elementwise_back(&mut acc, *x, g, self.value(*x), |xv, _| 1.0 / xv),
            Op::Tanh(x) => elementwise_back(&mut acc, *x, g, &node.value, |_, y| 1.0 - y * y),
            Op::Sigmoid(x) => elementwise_back(&mut acc, *x, g, &node.value, |_, y| y * (1.0 - y)),
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Reshape(x) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi)),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            buf[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (bb, gi) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *bb += aip * gi;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, temperature, cols } => {
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for ((brow, yrow), grow) in buf.chunks_mut(*cols).zip(y.chunks(*cols)).zip(g.chunks(*cols)) {
                        let inner = dot(yrow, grow);
                        for ((b, yi), gi) in brow.iter_mut().zip(yrow).zip(grow) {
                            *b += temperature * yi * (gi - inner);
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w, b } => {
                let sx = self.shape(*x);
                let (c, h, wd) = (sx[0], sx[1], sx[2]);
                let o = self.shape(*w)[0];
                let plane = h * wd;
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*b, &mut |buf| {
                    for oc in 0..o {
                        buf[oc] += g[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
                    }
                });
                acc(*w, &mut |buf| {
                    for oc in 0..o {
                        let gp = &g[oc * plane..(oc + 1) * plane];
                        for ic in 0..c {
                            let ip = &xv[ic * plane..(ic + 1) * plane];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    buf[((oc * c + ic) * 3 + ky) * 3 + kx] += conv_tap_corr(gp, ip, h, wd, ky, kx);
                                }
                            }
                        }
                    }
                });
                acc(*x, &mut |buf| {
                    for oc in 0..o {
                        let gp = &g[oc * plane..(oc + 1) * plane];
                        for ic in 0..c {
                            let bp = &mut buf[ic * plane..(ic + 1) * plane];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let weight = wv[((oc * c + ic) * 3 + ky) * 3 + kx];
                                    conv_tap_transpose(bp, gp, h, wd, ky, kx, weight);
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = 0.25 * g[(ch * oh + y) * ow + xx];
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                buf[base] += gv;
                                buf[base + 1] += gv;
                                buf[base + w] += gv;
                                buf[base + w + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::UpsampleNearest2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                buf[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::ResizeBilinear { x, rows, cols } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (rows.len(), cols.len());
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        let dst = &mut buf[ch * h * w..(ch + 1) * h * w];
                        for (oy, r) in rows.iter().enumerate() {
                            for (ox, q) in cols.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                dst[r.i0 * w + q.i0] += gv * (1.0 - r.t) * (1.0 - q.t);
                                dst[r.i0 * w + q.i1] += gv * (1.0 - r.t) * q.t;
                                dst[r.i1 * w + q.i0] += gv * r.t * (1.0 - q.t);
                                dst[r.i1 * w + q.i1] += gv * r.t * q.t;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |buf| buf.iter_mut().zip(slice).for_each(|(b, gi)| *b += gi));
                    offset += len;
                }
            }
            Op::WindowUnfold { x, window } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (ny, nx) = (h / window, w / window);
                acc(*x, &mut |buf| {
                    let mut k = 0;
                    for ty in 0..ny {
                        for tx in 0..nx {
                            for ly in 0..*window {
                                let row = (ty * window + ly) * w + tx * window;
                                for b in &mut buf[row..row + window] {
                                    *b += g[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                });
            }
            Op::Subsample { x, stride } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h.div_ceil(*stride), w.div_ceil(*stride));
                acc(*x, &mut |buf| {
                    let mut k = 0;
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                buf[(ch * h + y * stride) * w + xx * stride] += g[k];
                                k += 1;
                            }
                        }
                    }
                });
            }
            Op::BilinearSample { map, points, taps } => {
                let s = self.shape(*map);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let c = self.value(*map).len() / (h * w);
                let plane = h * w;
                acc(*map, &mut |buf| {
                    for (i, t) in taps.iter().enumerate() {
                        for ch in 0..c {
                            let gv = g[i * c + ch];
                            let p = &mut buf[ch * plane..(ch + 1) * plane];
                            p[t.y0 * w + t.x0] += gv * (1.0 - t.ty) * (1.0 - t.tx);
                            p[t.y0 * w + t.x1] += gv * (1.0 - t.ty) * t.tx;
                            p[t.y1 * w + t.x0] += gv * t.ty * (1.0 - t.tx);
                            p[t.y1 * w + t.x1] += gv * t.ty * t.tx;
                        }
                    }
                });
                let mv = self.value(*map);
                acc(*points, &mut |buf| {
                    for (i, t) in taps.iter().enumerate() {
                        let (mut du, mut dv) = (0.0, 0.0);
                        for ch in 0..c {
                            let gv = g[i * c + ch];
                            let p = &mv[ch * plane..(ch + 1) * plane];
                            let (v00, v01) = (p[t.y0 * w + t.x0], p[t.y0 * w + t.x1]);
                            let (v10, v11) = (p[t.y1 * w + t.x0], p[t.y1 * w + t.x1]);
                            if t.x1 != t.x0 {
                                du += gv * ((1.0 - t.ty) * (v01 - v00) + t.ty * (v11 - v10));
                            }
                            if t.y1 != t.y0 {
                                dv += gv * ((1.0 - t.tx) * (v10 - v00) + t.tx * (v11 - v01));
                            }
                        }
                        buf[2 * i] += du;
                        buf[2 * i + 1] += dv;
                    }
                });
            }
            Op::ZnccMatrix { a, b, cache } => {
                let d = cache.dim;
                let n = cache.a_std.len();
                let m = cache.b_std.len();
                let z = &node.value;
                let inv_d = 1.0 / d as f64;
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        if cache.a_std[i] <= ZNCC_MIN_STD {
                            continue;
                        }
                        let row = &mut ga[i * d..(i + 1) * d];
                        let mut gz = 0.0;
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            gz += gij * z[i * m + j];
                            axpy(row, gij, &cache.b_hat[j * d..(j + 1) * d]);
                        }
                        let ahat = &cache.a_hat[i * d..(i + 1) * d];
                        let scale = inv_d / cache.a_std[i];
                        for (r, ah) in row.iter_mut().zip(ahat) {
                            *r = scale * (*r - gz * ah);
                        }
                    }
                    acc(*a, &mut |buf| buf.iter_mut().zip(&ga).for_each(|(x, y)| *x += y));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; m * d];
                    let mut gz = vec![0.0; m];
                    for i in 0..n {
                        let ahat = &cache.a_hat[i * d..(i + 1) * d];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            gz[j] += gij * z[i * m + j];
                            axpy(&mut gb[j * d..(j + 1) * d], gij, ahat);
                        }
                    }
                    acc(*b, &mut |buf| {
                        for j in 0..m {
                            if cache.b_std[j] <= ZNCC_MIN_STD {
                                continue;
                            }
                            let scale = inv_d / cache.b_std[j];
                            let bhat = &cache.b_hat[j * d..(j + 1) * d];
                            for ch in 0..d {
                                buf[ch * m + j] += scale * (gb[j * d + ch] - gz[j] * bhat[ch]);
                            }
                        }
                    });
                }
            }
            Op::ZnccRows { a, b, cache } => {
                let d = cache.dim;
                let z = &node.value;
                let inv_d = 1.0 / d as f64;
                let side = |buf: &mut [f64], mine: &[f64], std: &[f64], other: &[f64]| {
                    for (i, gi) in g.iter().enumerate() {
                        if std[i] <= ZNCC_MIN_STD {
                            continue;
                        }
                        let scale = gi * inv_d / std[i];
                        for ch in 0..d {
                            buf[i * d + ch] += scale * (other[i * d + ch] - z[i] * mine[i * d + ch]);
                        }
                    }
                };
                acc(*a, &mut |buf| side(buf, &cache.a_hat, &cache.a_std, &cache.b_hat));
                acc(*b, &mut |buf| side(buf, &cache.b_hat, &cache.b_std, &cache.a_hat));
            }
            Op::Backproject { points, disparity, k } => {
                let pv = self.value(*points);
                let dv = self.value(*disparity);
                let out = &node.value;
                let n = dv.len();
                acc(*points, &mut |buf| {
                    for i in 0..n {
                        let s = k.b / dv[i];
                        buf[2 * i] += g[3 * i] * s;
                        buf[2 * i + 1] += g[3 * i + 1] * s * k.fu / k.fv;
                    }
                });
                let _ = pv;
                acc(*disparity, &mut |buf| {
                    for i in 0..n {
                        let d = dv[i];
                        buf[i] -= (g[3 * i] * out[3 * i] + g[3 * i + 1] * out[3 * i + 1] + g[3 * i + 2] * out[3 * i + 2]) / d;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let s = self.shape(*x);
                let row = numel(&s[1..]);
                acc(*x, &mut |buf| {
                    for (k, &i) in idx.iter().enumerate() {
                        for (b, gi) in buf[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                            *b += gi;
                        }
                    }
                });
            }
            Op::RigidAlign { source, target, weights, solution } => {
                let s = to_vectors(self.value(*source));
                let t = to_vectors(self.value(*target));
                let w = self.value(*weights);
                let up: [f64; 12] = g.try_into().expect("pose adjoint has 12 entries");
                let grad = alignment_adjoint(solution, &s, &t, w, &up);
                acc(*source, &mut |buf| add_vectors(buf, &grad.source));
                acc(*target, &mut |buf| add_vectors(buf, &grad.target));
                acc(*weights, &mut |buf| buf.iter_mut().zip(&grad.weights).for_each(|(b, gi)| *b += gi));
            }
            Op::PlanarPoseLoss { pose, gt, lambda } => {
                let p = self.value(*pose);
                let (c00, c10) = (p[0], p[3]);
                let yaw = c10.atan2(c00);
                let r2 = c00 * c00 + c10 * c10;
                // |Rz(a) Rz(b)^T - I|_F^2 = 4 (1 - cos(a - b))
                let d_yaw = lambda * 4.0 * (yaw - gt.gamma).sin();
                acc(*pose, &mut |buf| {
                    buf[0] += g[0] * d_yaw * (-c10 / r2);
                    buf[3] += g[0] * d_yaw * (c00 / r2);
                    buf[9] += g[0] * 2.0 * (p[9] - gt.alpha);
                    buf[10] += g[0] * 2.0 * (p[10] - gt.beta);
                });
            }
            Op::PlanarKeypointLoss { source, target, gt } => {
                let (sv, tv) = (self.value(*source), self.value(*target));
                let n = sv.len() / 3;
                let c = gt.rotation;
                acc(*source, &mut |buf| {
                    for i in 0..n {
                        let e = planar_residual(gt, &sv[3 * i..3 * i + 3], &tv[3 * i..3 * i + 3]);
                        let ge = Vector3::new(2.0 * g[0] * e[0], 2.0 * g[0] * e[1], 0.0);
                        let back = c.transpose() * ge;
                        for r in 0..3 {
                            buf[3 * i + r] += back[r];
                        }
                    }
                });
                acc(*target, &mut |buf| {
                    for i in 0..n {
                        let e = planar_residual(gt, &sv[3 * i..3 * i + 3], &tv[3 * i..3 * i + 3]);
                        buf[3 * i] -= 2.0 * g[0] * e[0];
                        buf[3 * i + 1] -= 2.0 * g[0] * e[1];
                    }
                });
            }
        }
    }
}

fn planar_residual(gt: &SE3Pose, s: &[f64], t: &[f64]) -> [f64; 2] {
    let p = gt.apply(&Vector3::new(s[0], s[1], s[2]));
    [p.x - t[0], p.y - t[1]]
}

fn elementwise_back(
    acc: &mut impl FnMut(NodeId, &mut dyn FnMut(&mut [f64])),
    x: NodeId,
    g: &[f64],
    aux: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
) {
    // `aux` is either the input or the output, per `deriv`'s convention.
    acc(x, &mut |buf| {
        for ((b, gi), a) in buf.iter_mut().zip(g).zip(aux) {
            *b += gi * deriv(*a, *a);
        }
    });
}

fn to_vectors(v: &[f64]) -> Vec<Vector3<f64>> {
    v.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn add_vectors(buf: &mut [f64], v: &[Vector3<f64>]) {
    for (i, p) in v.iter().enumerate() {
        for r in 0..3 {
            buf[3 * i + r] += p[r];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Output range of a 3x3 tap at offset `k - 1` along an axis of length `len`.
#[inline]
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

/// `out[y, x] += weight * inp[y + ky - 1, x + kx - 1]` over the valid region.
#[inline]
fn conv_tap(out: &mut [f64], inp: &[f64], h: usize, w: usize, ky: usize, kx: usize, weight: f64) {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    for y in y0..y1 {
        let iy = y + ky - 1;
        let orow = &mut out[y * w + x0..y * w + x1];
        let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
        for (o, i) in orow.iter_mut().zip(irow) {
            *o += weight * i;
        }
    }
}

/// `sum_{y,x} g[y, x] * inp[y + ky - 1, x + kx - 1]`.
#[inline]
fn conv_tap_corr(g: &[f64], inp: &[f64], h: usize, w: usize, ky: usize, kx: usize) -> f64 {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    let mut total = 0.0;
    for y in y0..y1 {
        let iy = y + ky - 1;
        total += dot(&g[y * w + x0..y * w + x1], &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1]);
    }
    total
}

/// `buf[y + ky - 1, x + kx - 1] += weight * g[y, x]`.
#[inline]
fn conv_tap_transpose(buf: &mut [f64], g: &[f64], h: usize, w: usize, ky: usize, kx: usize, weight: f64) {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    for y in y0..y1 {
        let iy = y + ky - 1;
        let brow = &mut buf[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
        axpy(brow, weight, &g[y * w + x0..y * w + x1]);
    }
}
