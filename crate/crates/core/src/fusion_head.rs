//! Per-pixel agent-axis fusion, the 1x1 detection head, detection losses,
//! decoding with NMS, and AP evaluation.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;

use crate::adversary::sigmoid;
use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::feature_core::FeatureMap;
use crate::fax_attention::{multi_head_attention, AttentionParams, FaxConfig};
use crate::nn::{Binding, Init, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

/// Per pixel, the ego feature attends over the stacked `[ego; collaborators]`
/// features; the attended value is added back onto the ego feature.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub attn: AttentionParams,
    pub dim: usize,
}

impl FusionModel {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let cfg = FaxConfig { window_p: 1, grid_g: 1, heads, head_dim };
        Self { attn: AttentionParams::new(store, &format!("{name}.attn"), dim, &cfg, Init::Scaled(1.0), rng), dim }
    }

    /// `f_s: [1,H,W,C]`, `f_t2: [N,H,W,C]` (or `None` for no collaborators) -> `[1,H,W,C]`.
    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, f_s: Var, f_t2: Option<Var>) -> Result<Var> {
        let t = b.tape();
        let s = t.shape(f_s);
        ensure!(s.len() == 4 && s[0] == 1, Shape, "ego map must be [1,H,W,C], got {:?}", s);
        ensure!(s[3] == self.dim, Shape, "fusion built for {} channels, got {}", self.dim, s[3]);
        let hw = s[1] * s[2];
        let (stack, slots) = match f_t2 {
            Some(x) => {
                let ts = t.shape(x);
                ensure!(ts.len() == 4 && ts[1..] == s[1..], Shape, "collaborator map {:?} vs ego {:?}", ts, s);
                (t.concat0(&[f_s, x])?, 1 + ts[0])
            }
            None => (f_s, 1),
        };
        let q = t.reshape(f_s, &[hw, 1, s[3]])?;
        let index: Vec<usize> = (0..hw).flat_map(|p| (0..slots).map(move |a| a * hw + p)).collect();
        let kv = t.gather_rows(stack, Arc::new(index), &[hw, slots, s[3]])?;
        let o = multi_head_attention(b, &self.attn, q, kv, kv)?;
        let o = t.reshape(o, &s)?;
        t.add(f_s, o)
    }
}

/// Inference-time fusion of whole feature maps.
pub fn fuse<T: Real>(
    store: &ParamStore<T>,
    f_s: &FeatureMap<T>,
    f_t2: Option<&FeatureMap<T>>,
    m: &FusionModel,
) -> Result<FeatureMap<T>> {
    let b = Binding::inference(store);
    let t = b.tape();
    let v = m.forward(&b, t.constant(f_s.data().clone()), f_t2.map(|x| t.constant(x.data().clone())))?;
    FeatureMap::from_tensor((*t.value(v)).clone(), f_s.domain_id())
}

pub const HEAD_CHANNELS: usize = 5;
/// Objectness bias at init: `logit(0.01)`.
pub const OBJECTNESS_PRIOR_BIAS: f64 = -4.59511985013459;

/// 1x1 convolution to `(objectness, dcx, dcy, log w, log h)` per cell.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub conv: Linear,
}

impl DetectionHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let conv = Linear::new(store, &format!("{name}.conv"), dim, HEAD_CHANNELS, Init::Scaled(0.1), true, rng);
        let mut bias = Tensor::zeros(&[HEAD_CHANNELS]);
        bias.data_mut()[0] = T::lit(OBJECTNESS_PRIOR_BIAS);
        store.set(conv.bias.expect("bias"), bias).expect("shape");
        Self { conv }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, v: Var) -> Result<Var> {
        self.conv.forward(b, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Result<Self> {
        ensure!(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite(), InvalidArgument, "box size must be positive: {w}x{h}");
        ensure!((0.0..=1.0).contains(&score), InvalidArgument, "score {score} outside [0,1]");
        Ok(Self { cx, cy, w, h, score })
    }

    pub fn gt(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx, cy, w, h, 1.0)
    }

    fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }
}

/// Axis-aligned intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxSet {
    pub boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>) -> Self {
        Self { boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn by_score_desc(a: &BBox, b: &BBox) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Greedy non-maximum suppression.
pub fn nms(mut boxes: Vec<BBox>, iou_thr: f64) -> BoxSet {
    boxes.sort_by(by_score_desc);
    let mut keep: Vec<BBox> = Vec::new();
    for b in boxes {
        if keep.iter().all(|k| iou(k, &b) <= iou_thr) {
            keep.push(b);
        }
    }
    BoxSet::new(keep)
}

/// Decodes a `[1,H,W,5]` head output into scored boxes above `score_thr`.
pub fn decode<T: Real>(head_out: &Tensor<T>, score_thr: f64) -> Result<Vec<BBox>> {
    let s = head_out.shape();
    ensure!(s.len() == 4 && s[0] == 1 && s[3] == HEAD_CHANNELS, Shape, "head output must be [1,H,W,5], got {:?}", s);
    let mut out = Vec::new();
    for (cell, v) in head_out.data().chunks(HEAD_CHANNELS).enumerate() {
        let score = sigmoid(v[0].as_f64());
        if score < score_thr {
            continue;
        }
        let (row, col) = ((cell / s[2]) as f64, (cell % s[2]) as f64);
        let w = v[3].as_f64().clamp(-20.0, 20.0).exp();
        let h = v[4].as_f64().clamp(-20.0, 20.0).exp();
        out.push(BBox { cx: col + sigmoid(v[1].as_f64()), cy: row + sigmoid(v[2].as_f64()), w, h, score });
    }
    Ok(out)
}

pub fn detect<T: Real>(head_out: &Tensor<T>, score_thr: f64, nms_iou: f64) -> Result<BoxSet> {
    Ok(nms(decode(head_out, score_thr)?, nms_iou))
}

/// Per-cell training targets: a cell is positive iff it contains a box center.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTargets {
    pub h: usize,
    pub w: usize,
    pub positive: Vec<bool>,
    /// `(tx, ty, ln w, ln h)` per cell; meaningful on positives only.
    pub reg: Vec<[f64; 4]>,
}

impl RasterTargets {
    /// Boxes whose center falls outside the grid are ignored; when two centers
    /// share a cell the first box wins.
    pub fn new(h: usize, w: usize, gts: &BoxSet) -> Self {
        let mut positive = vec![false; h * w];
        let mut reg = vec![[0.0; 4]; h * w];
        for b in &gts.boxes {
            let (col, row) = (b.cx.floor(), b.cy.floor());
            if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
                continue;
            }
            let cell = row as usize * w + col as usize;
            if positive[cell] {
                continue;
            }
            positive[cell] = true;
            reg[cell] = [b.cx - col, b.cy - row, b.w.ln(), b.h.ln()];
        }
        Self { h, w, positive, reg }
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal loss of one logit and its derivative.
pub fn focal(z: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let s = if positive { 1.0 } else { -1.0 };
    let alpha_t = if positive { fp.alpha } else { 1.0 - fp.alpha };
    let p_t = sigmoid(s * z);
    let log_p_t = -softplus(-s * z);
    let q = 1.0 - p_t;
    let mod_ = if q == 0.0 { 0.0 } else { q.powf(fp.gamma) };
    let loss = -alpha_t * mod_ * log_p_t;
    let grad = s * alpha_t * mod_ * (fp.gamma * p_t * log_p_t - q);
    (loss, grad)
}

/// Smooth-L1 with `beta = 1` and its derivative.
pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossParts {
    pub focal: f64,
    pub regression: f64,
    pub positives: usize,
}

/// `L_det = mean_cells(focal) + mean_positives(sum_channels smooth_l1)`.
pub fn detection_loss<T: Real>(
    tape: &Tape<T>,
    head_out: Var,
    targets: &RasterTargets,
    fp: FocalParams,
) -> Result<(Var, DetLossParts)> {
    let v = tape.value(head_out);
    let s = v.shape().to_vec();
    ensure!(
        s.len() == 4 && s[0] == 1 && s[1] == targets.h && s[2] == targets.w && s[3] == HEAD_CHANNELS,
        Shape,
        "head output {:?} vs targets {}x{}",
        s,
        targets.h,
        targets.w
    );
    let cells = targets.h * targets.w;
    let npos = targets.num_positive();
    let mut grad = vec![0.0f64; cells * HEAD_CHANNELS];
    let (mut lf, mut lr) = (0.0, 0.0);
    for (cell, out) in v.data().chunks(HEAD_CHANNELS).enumerate() {
        let pos = targets.positive[cell];
        let (l, g) = focal(out[0].as_f64(), pos, fp);
        lf += l / cells as f64;
        grad[cell * HEAD_CHANNELS] = g / cells as f64;
        if pos {
            let t = targets.reg[cell];
            let (sx, sy) = (sigmoid(out[1].as_f64()), sigmoid(out[2].as_f64()));
            let res = [sx - t[0], sy - t[1], out[3].as_f64() - t[2], out[4].as_f64() - t[3]];
            let dres = [sx * (1.0 - sx), sy * (1.0 - sy), 1.0, 1.0];
            for k in 0..4 {
                let (l, g) = smooth_l1(res[k]);
                lr += l / npos as f64;
                grad[cell * HEAD_CHANNELS + 1 + k] = g * dres[k] / npos as f64;
            }
        }
    }
    let parts = DetLossParts { focal: lf, regression: lr, positives: npos };
    let out = tape.push(Tensor::scalar(T::lit(lf + lr)), &[head_out], move |g, _| {
        let g0 = g.data()[0].as_f64();
        vec![Some(Tensor::from_vec(&s, grad.iter().map(|&v| T::lit(g0 * v)).collect()).expect("shape"))]
    });
    Ok((out, parts))
}

/// How the precision-recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    /// Sum of precision at each true positive times its recall increment.
    #[default]
    Step,
    /// Same, with precision replaced by its running maximum from the right.
    Envelope,
}

/// Matches detections to ground truths scene by scene (score order, best
/// unmatched IoU at or above `iou_thr`), pools the matches and integrates
/// the precision-recall curve. No ground truth at all gives 0.
pub fn average_precision_scenes(scenes: &[(&BoxSet, &BoxSet)], iou_thr: f64, mode: ApMode) -> f64 {
    let total_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut flags: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in scenes {
        let mut order: Vec<&BBox> = dets.boxes.iter().collect();
        order.sort_by(|a, b| by_score_desc(a, b));
        let mut used = vec![false; gts.len()];
        for d in order {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let o = iou(d, g);
                if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            flags.push((d.score, best.is_some()));
        }
    }
    // stable sort keeps per-scene order among equal scores
    flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    if mode == ApMode::Envelope {
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(_, hit)) in flags.iter().enumerate() {
        if hit {
            ap += (recall[i] - prev_r) * precision[i];
            prev_r = recall[i];
        }
    }
    ap
}

pub fn average_precision(dets: &BoxSet, gts: &BoxSet, iou_thr: f64) -> f64 {
    average_precision_scenes(&[(dets, gts)], iou_thr, ApMode::Step)
}
