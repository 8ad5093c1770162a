//! Class-agnostic two-stage detector.
//!
//! A residual backbone produces a stride-`s` feature map. A region proposal
//! network scores and refines anchors at every cell; the best proposals are
//! pooled with RoIAlign and a fully connected head gives each one a
//! food/background score and a second box refinement.
//!
//! RoIAlign is written as a matrix product: the bilinear sampling weights of
//! all bins of all RoIs form a `(R * bins, H * W)` matrix that multiplies the
//! flattened feature map, so gradients flow to the features through ordinary
//! matmul backward.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor};
use candle_nn::Optimizer;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use foodlens_core::detection::nms_indices;
use foodlens_core::raster::rgb_to_planar;
use foodlens_core::{BoundingBox, DatasetManifest, Detection, EatingOccasionRecord};

use crate::classifier::flip_planar;
use crate::error::{ModelError, Result};
use crate::nn::{bce_with_logits, scalar, smooth_l1_sum, stack_planar, BackboneConfig, Conv2d, Linear, ResNet};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::{adam, cosine_lr, ensure_finite, shuffled, EpochLog, TrainLog};

pub const CHECKPOINT_FORMAT: &str = "foodlens-detector";

/// Smallest accepted image side in pixels.
pub const MIN_INPUT_SIZE: u32 = 16;

/// Head regression targets are divided by these before the loss.
const HEAD_DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Largest log-scale change allowed when decoding a box.
const MAX_LOG_SCALE: f64 = 4.0;

type Box4 = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Anchor side lengths as fractions of the input size.
    pub sizes: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            sizes: vec![0.125, 0.25, 0.5],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorHyper {
    /// Images are resized to `input_size x input_size`.
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub rpn_width: usize,
    pub anchors: AnchorSpec,
    pub roi_size: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub flip_augment: bool,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_samples: usize,
    pub roi_foreground_iou: f64,
    pub roi_samples: usize,
    pub roi_foreground_fraction: f64,
    /// Jittered copies of each groundtruth box added to the training proposals.
    pub gt_jitter_copies: usize,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub rpn_nms_iou: f64,
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        Self {
            input_size: 64,
            backbone: BackboneConfig {
                widths: vec![16, 32],
                blocks_per_stage: 1,
                stem_stride: 2,
            },
            rpn_width: 32,
            anchors: AnchorSpec::default(),
            roi_size: 5,
            head_hidden: 128,
            epochs: 24,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            flip_augment: true,
            rpn_positive_iou: 0.5,
            rpn_negative_iou: 0.3,
            rpn_samples: 64,
            roi_foreground_iou: 0.5,
            roi_samples: 32,
            roi_foreground_fraction: 0.5,
            gt_jitter_copies: 2,
            pre_nms_top: 200,
            post_nms_top: 32,
            rpn_nms_iou: 0.7,
            score_threshold: 0.5,
            nms_iou_threshold: 0.5,
        }
    }
}

impl DetectorHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidInput(m));
        self.backbone.validate()?;
        for (name, t) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("rpn_nms_iou", self.rpn_nms_iou),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {t}"));
            }
        }
        let stride = self.backbone.total_stride();
        if self.input_size < MIN_INPUT_SIZE as usize || self.input_size % stride != 0 {
            return bad(format!(
                "input_size {} must be >= {MIN_INPUT_SIZE} and divisible by the backbone stride {stride}",
                self.input_size
            ));
        }
        if self.anchors.per_cell() == 0 || self.anchors.sizes.iter().chain(&self.anchors.ratios).any(|v| !(*v > 0.0)) {
            return bad("anchor sizes and ratios must be positive and nonempty".into());
        }
        if self.batch_size == 0 || self.roi_size == 0 || self.rpn_samples == 0 || self.roi_samples == 0 {
            return bad("batch_size, roi_size and sample counts must be positive".into());
        }
        Ok(())
    }

    fn feature_size(&self) -> usize {
        self.input_size / self.backbone.total_stride()
    }
}

fn iou4(a: &Box4, b: &Box4) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |r: &Box4| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// Offsets `(dx, dy, dw, dh)` that move `anchor` onto `target`.
fn encode_box(anchor: &Box4, target: &Box4) -> [f64; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let (tw, th) = (target[2] - target[0], target[3] - target[1]);
    let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
    [(tx - ax) / aw, (ty - ay) / ah, (tw / aw).ln(), (th / ah).ln()]
}

fn decode_box(anchor: &Box4, d: &[f64]) -> Box4 {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

fn clip_box(b: &Box4, size: f64) -> Box4 {
    [b[0].clamp(0.0, size), b[1].clamp(0.0, size), b[2].clamp(0.0, size), b[3].clamp(0.0, size)]
}

/// All anchors in cell-major order: index `(row * W + col) * A + a`.
fn make_anchors(hyper: &DetectorHyper) -> Vec<Box4> {
    let stride = hyper.backbone.total_stride() as f64;
    let fs = hyper.feature_size();
    let mut out = Vec::with_capacity(fs * fs * hyper.anchors.per_cell());
    for row in 0..fs {
        for col in 0..fs {
            let (cx, cy) = ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride);
            for &s in &hyper.anchors.sizes {
                let side = s * hyper.input_size as f64;
                for &r in &hyper.anchors.ratios {
                    let (w, h) = (side / r.sqrt(), side * r.sqrt());
                    out.push([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]);
                }
            }
        }
    }
    out
}

/// Bilinear RoIAlign weights for `rois` (input-pixel coordinates) on a
/// `fs x fs` map with the given stride; 2x2 samples per bin.
fn roi_align_matrix(rois: &[Box4], fs: usize, stride: f64, bins: usize) -> Vec<f32> {
    let cells = fs * fs;
    let mut m = vec![0f32; rois.len() * bins * bins * cells];
    const SAMPLES: usize = 2;
    let w_sample = 1.0 / (SAMPLES * SAMPLES) as f64;
    for (r, roi) in rois.iter().enumerate() {
        let (x1, y1) = (roi[0] / stride, roi[1] / stride);
        let bw = ((roi[2] - roi[0]) / stride).max(1e-3) / bins as f64;
        let bh = ((roi[3] - roi[1]) / stride).max(1e-3) / bins as f64;
        for by in 0..bins {
            for bx in 0..bins {
                let row = &mut m[((r * bins + by) * bins + bx) * cells..][..cells];
                for sy in 0..SAMPLES {
                    for sx in 0..SAMPLES {
                        let y = y1 + (by as f64 + (sy as f64 + 0.5) / SAMPLES as f64) * bh - 0.5;
                        let x = x1 + (bx as f64 + (sx as f64 + 0.5) / SAMPLES as f64) * bw - 0.5;
                        if y < -1.0 || y > fs as f64 || x < -1.0 || x > fs as f64 {
                            continue;
                        }
                        let y = y.clamp(0.0, (fs - 1) as f64);
                        let x = x.clamp(0.0, (fs - 1) as f64);
                        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                        let (y1i, x1i) = ((y0 + 1).min(fs - 1), (x0 + 1).min(fs - 1));
                        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
                        for (yy, wy) in [(y0, 1.0 - ly), (y1i, ly)] {
                            for (xx, wx) in [(x0, 1.0 - lx), (x1i, lx)] {
                                row[yy * fs + xx] += (wy * wx * w_sample) as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    m
}

struct DetectorNet {
    backbone: ResNet,
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_reg: Conv2d,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

struct RpnOutput {
    features: Tensor,
    /// `(N, H*W*A)` objectness logits.
    logits: Tensor,
    /// `(N, H*W*A, 4)` anchor offsets.
    deltas: Tensor,
}

impl DetectorNet {
    fn new(ps: &mut ParamStore, h: &DetectorHyper) -> Result<Self> {
        let c = h.backbone.out_channels();
        let a = h.anchors.per_cell();
        let pooled = c * h.roi_size * h.roi_size;
        Ok(Self {
            backbone: ResNet::new(ps, "backbone", 3, &h.backbone)?,
            rpn_conv: Conv2d::new(ps, "rpn.conv", c, h.rpn_width, 3, 1, 1, 1.0)?,
            rpn_cls: Conv2d::new(ps, "rpn.cls", h.rpn_width, a, 1, 1, 0, 0.1)?,
            rpn_reg: Conv2d::new(ps, "rpn.reg", h.rpn_width, 4 * a, 1, 1, 0, 0.1)?,
            fc1: Linear::new(ps, "head.fc1", pooled, h.head_hidden, 1.0)?,
            fc2: Linear::new(ps, "head.fc2", h.head_hidden, h.head_hidden, 1.0)?,
            cls: Linear::new(ps, "head.cls", h.head_hidden, 1, 0.1)?,
            reg: Linear::new(ps, "head.reg", h.head_hidden, 4, 0.1)?,
        })
    }

    fn rpn(&self, x: &Tensor) -> Result<RpnOutput> {
        let features = self.backbone.forward(x)?;
        let h = self.rpn_conv.forward(&features)?.relu()?;
        let cls = self.rpn_cls.forward(&h)?;
        let (n, a, fh, fw) = cls.dims4()?;
        let logits = cls.permute((0, 2, 3, 1))?.reshape((n, fh * fw * a))?;
        let deltas = self
            .rpn_reg
            .forward(&h)?
            .reshape((n, a, 4, fh, fw))?
            .permute((0, 3, 4, 1, 2))?
            .reshape((n, fh * fw * a, 4))?;
        Ok(RpnOutput {
            features,
            logits,
            deltas,
        })
    }

    /// Head logits `(R,)` and offsets `(R, 4)` for RoIs of image `n`.
    fn head(&self, features: &Tensor, n: usize, rois: &[Box4], h: &DetectorHyper) -> Result<(Tensor, Tensor)> {
        let (_, c, fh, fw) = features.dims4()?;
        let bins = h.roi_size * h.roi_size;
        let stride = h.backbone.total_stride() as f64;
        let m = roi_align_matrix(rois, fh, stride, h.roi_size);
        let m = Tensor::from_vec(m, (rois.len() * bins, fh * fw), &Device::Cpu)?.to_dtype(features.dtype())?;
        let f = features.i(n)?.reshape((c, fh * fw))?.t()?;
        let pooled = m.matmul(&f)?.reshape((rois.len(), bins * c))?;
        let z = self.fc2.forward(&self.fc1.forward(&pooled)?.relu()?)?.relu()?;
        Ok((self.cls.forward(&z)?.squeeze(1)?, self.reg.forward(&z)?))
    }
}

/// Proposals for one image from its RPN outputs, in input coordinates.
fn proposals(logits: &[f32], deltas: &[f32], anchors: &[Box4], h: &DetectorHyper, top: usize) -> Vec<Box4> {
    let size = h.input_size as f64;
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(h.pre_nms_top);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for i in order {
        let d: Vec<f64> = deltas[4 * i..4 * i + 4].iter().map(|&v| v as f64).collect();
        let b = clip_box(&decode_box(&anchors[i], &d), size);
        if b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0 {
            boxes.push(b);
            scores.push(logits[i] as f64);
        }
    }
    let bbs: Vec<BoundingBox> = boxes
        .iter()
        .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]).expect("proposal has positive extent"))
        .collect();
    let mut keep = nms_indices(bbs.iter().zip(scores.iter().copied()), h.rpn_nms_iou);
    keep.truncate(top);
    keep.into_iter().map(|i| boxes[i]).collect()
}

/// One training image in input coordinates.
#[derive(Clone)]
struct Example {
    input: Vec<f32>,
    boxes: Vec<Box4>,
}

fn to_input(image: &RgbImage, size: usize) -> Vec<f32> {
    rgb_to_planar(image, size, size).into_iter().map(|v| v - 0.5).collect()
}

fn scale_factors(image: &RgbImage, size: usize) -> (f64, f64) {
    (size as f64 / image.width() as f64, size as f64 / image.height() as f64)
}

fn flip_example(ex: &mut Example, size: usize, horizontal: bool) {
    flip_planar(&mut ex.input, 3, size, horizontal);
    let s = size as f64;
    for b in &mut ex.boxes {
        *b = if horizontal {
            [s - b[2], b[1], s - b[0], b[3]]
        } else {
            [b[0], s - b[3], b[2], s - b[1]]
        };
    }
}

/// Labels and regression targets for sampled anchors of one image.
struct RpnTargets {
    indices: Vec<u32>,
    labels: Vec<f32>,
    pos_indices: Vec<u32>,
    pos_deltas: Vec<f32>,
}

fn rpn_targets(anchors: &[Box4], gts: &[Box4], h: &DetectorHyper, rng: &mut ChaCha8Rng) -> RpnTargets {
    let mut best = vec![(0.0f64, usize::MAX); anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou4(a, gt);
            if v > best[i].0 {
                best[i] = (v, g);
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let (v, g) = best[i];
        let is_best = g != usize::MAX && gts.iter().enumerate().any(|(k, gt)| gt_best[k] > 0.0 && iou4(a, gt) == gt_best[k]);
        if v >= h.rpn_positive_iou || is_best {
            pos.push(i);
        } else if v < h.rpn_negative_iou {
            neg.push(i);
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(h.rpn_samples / 2);
    neg.truncate(h.rpn_samples - pos.len());
    let mut t = RpnTargets {
        indices: Vec::new(),
        labels: Vec::new(),
        pos_indices: Vec::new(),
        pos_deltas: Vec::new(),
    };
    for &i in &pos {
        t.indices.push(i as u32);
        t.labels.push(1.0);
        t.pos_indices.push(i as u32);
        let gt = gts[best[i].1];
        t.pos_deltas.extend(encode_box(&anchors[i], &gt).map(|v| v as f32));
    }
    for &i in &neg {
        t.indices.push(i as u32);
        t.labels.push(0.0);
    }
    t
}

fn jitter(b: &Box4, rng: &mut ChaCha8Rng, size: f64) -> Option<Box4> {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let mut j = |v: f64, scale: f64| v + rng.random_range(-0.15..0.15) * scale;
    let out = clip_box(&[j(b[0], w), j(b[1], h), j(b[2], w), j(b[3], h)], size);
    (out[2] - out[0] >= 1.0 && out[3] - out[1] >= 1.0).then_some(out)
}

/// Sampled RoIs of one image with head targets.
struct RoiTargets {
    rois: Vec<Box4>,
    labels: Vec<f32>,
    /// Positions within `rois` of the foreground samples, with their targets.
    fg: Vec<u32>,
    fg_deltas: Vec<f32>,
}

fn roi_targets(mut candidates: Vec<Box4>, gts: &[Box4], h: &DetectorHyper, rng: &mut ChaCha8Rng) -> RoiTargets {
    let size = h.input_size as f64;
    for gt in gts {
        candidates.push(*gt);
        for _ in 0..h.gt_jitter_copies {
            if let Some(b) = jitter(gt, rng, size) {
                candidates.push(b);
            }
        }
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let (v, g) = gts
            .iter()
            .enumerate()
            .map(|(g, gt)| (iou4(c, gt), g))
            .fold((0.0, usize::MAX), |a, b| if b.0 > a.0 { b } else { a });
        if v >= h.roi_foreground_iou {
            fg.push((i, g));
        } else {
            bg.push(i);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min((h.roi_samples as f64 * h.roi_foreground_fraction).round() as usize);
    fg.truncate(n_fg);
    bg.truncate(h.roi_samples - n_fg);
    let mut t = RoiTargets {
        rois: Vec::new(),
        labels: Vec::new(),
        fg: Vec::new(),
        fg_deltas: Vec::new(),
    };
    for (i, g) in fg {
        t.fg.push(t.rois.len() as u32);
        let d = encode_box(&candidates[i], &gts[g]);
        t.fg_deltas.extend((0..4).map(|k| (d[k] / HEAD_DELTA_STD[k]) as f32));
        t.rois.push(candidates[i]);
        t.labels.push(1.0);
    }
    for i in bg {
        t.rois.push(candidates[i]);
        t.labels.push(0.0);
    }
    t
}

/// RPN and head losses averaged over the images of a batch.
fn batch_loss(
    net: &DetectorNet,
    batch: &[Example],
    anchors: &[Box4],
    h: &DetectorHyper,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let size = h.input_size;
    let inputs: Vec<Vec<f32>> = batch.iter().map(|e| e.input.clone()).collect();
    let x = stack_planar(&inputs, 3, size, size, DType::F32)?;
    let out = net.rpn(&x)?;
    let logits_cpu: Vec<Vec<f32>> = out.logits.detach().to_vec2()?;
    let deltas_cpu: Vec<Vec<Vec<f32>>> = out.deltas.detach().to_vec3()?;
    let mut terms: Vec<Tensor> = Vec::new();
    let n = batch.len() as f64;
    for (i, ex) in batch.iter().enumerate() {
        let t = rpn_targets(anchors, &ex.boxes, h, rng);
        let logits = out.logits.i(i)?;
        let idx = Tensor::new(t.indices.as_slice(), &Device::Cpu)?;
        let labels = Tensor::new(t.labels.as_slice(), &Device::Cpu)?;
        terms.push((bce_with_logits(&logits.index_select(&idx, 0)?, &labels)? / n)?);
        if !t.pos_indices.is_empty() {
            let pidx = Tensor::new(t.pos_indices.as_slice(), &Device::Cpu)?;
            let pred = out.deltas.i(i)?.index_select(&pidx, 0)?;
            let target = Tensor::from_vec(t.pos_deltas, (t.pos_indices.len(), 4), &Device::Cpu)?;
            let reg = smooth_l1_sum(&pred, &target, 1.0 / 9.0)?;
            terms.push((reg / (t.indices.len() as f64 * n))?);
        }

        let flat: Vec<f32> = deltas_cpu[i].iter().flatten().copied().collect();
        let props = proposals(&logits_cpu[i], &flat, anchors, h, h.post_nms_top);
        let rt = roi_targets(props, &ex.boxes, h, rng);
        if rt.rois.is_empty() {
            continue;
        }
        let (cls, reg) = net.head(&out.features, i, &rt.rois, h)?;
        let labels = Tensor::new(rt.labels.as_slice(), &Device::Cpu)?;
        terms.push((bce_with_logits(&cls, &labels)? / n)?);
        if !rt.fg.is_empty() {
            let fidx = Tensor::new(rt.fg.as_slice(), &Device::Cpu)?;
            let target = Tensor::from_vec(rt.fg_deltas, (rt.fg.len(), 4), &Device::Cpu)?;
            let l = smooth_l1_sum(&reg.index_select(&fidx, 0)?, &target, 1.0)?;
            terms.push((l / (rt.rois.len() as f64 * n))?);
        }
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = (total + t)?;
    }
    Ok(total)
}

fn examples_from(manifest: &DatasetManifest, records: &[&EatingOccasionRecord], size: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let img = manifest.load_image(r)?;
            Ok(example(&img, &r.annotations.iter().map(|a| a.bbox).collect::<Vec<_>>(), size))
        })
        .collect()
}

fn example(image: &RgbImage, boxes: &[BoundingBox], size: usize) -> Example {
    let (sx, sy) = scale_factors(image, size);
    Example {
        input: to_input(image, size),
        boxes: boxes
            .iter()
            .map(|b| [b.x1() * sx, b.y1() * sy, b.x2() * sx, b.y2() * sy])
            .collect(),
    }
}

/// A labelled detector training image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSample {
    pub image: RgbImage,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: DetectorHyper,
    seed: u64,
    log: TrainLog,
}

pub struct DetectorModel {
    params: ParamStore,
    net: DetectorNet,
    anchors: Vec<Box4>,
    hyper: DetectorHyper,
    seed: u64,
    log: TrainLog,
}

impl std::fmt::Debug for DetectorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DetectorModel")
            .field("hyper", &self.hyper)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

/// Trains on the train-split records of `manifest`; val records, when
/// present, are scored with the same loss after every epoch.
pub fn train_detector(manifest: &DatasetManifest, hyper: &DetectorHyper, seed: u64) -> Result<DetectorModel> {
    use foodlens_core::SplitTag;
    let train = manifest.records_in(SplitTag::Train);
    let val = manifest.records_in(SplitTag::Val);
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet("detector train split is empty".into()));
    }
    hyper.validate()?;
    let train = examples_from(manifest, &train, hyper.input_size)?;
    let val = examples_from(manifest, &val, hyper.input_size)?;
    fit(train, val, hyper, seed)
}

/// Same as [`train_detector`] for in-memory samples.
pub fn train_detector_on(train: &[DetectorSample], val: &[DetectorSample], hyper: &DetectorHyper, seed: u64) -> Result<DetectorModel> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet("detector train split is empty".into()));
    }
    hyper.validate()?;
    let conv = |s: &DetectorSample| example(&s.image, &s.boxes, hyper.input_size);
    fit(train.iter().map(conv).collect(), val.iter().map(conv).collect(), hyper, seed)
}

fn fit(train: Vec<Example>, val: Vec<Example>, hyper: &DetectorHyper, seed: u64) -> Result<DetectorModel> {
    let mut params = ParamStore::seeded(seed, DType::F32);
    let net = DetectorNet::new(&mut params, hyper)?;
    let anchors = make_anchors(hyper);
    let mut opt = adam(params.vars(), hyper.learning_rate, 0.9, hyper.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde7e_c7);
    let mut log = TrainLog::default();
    let size = hyper.input_size;

    for epoch in 0..hyper.epochs {
        opt.set_learning_rate(cosine_lr(hyper.learning_rate, 0.05, epoch, hyper.epochs));
        let order = shuffled(train.len(), &mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for (step, idx) in order.chunks(hyper.batch_size).enumerate() {
            let mut batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            if hyper.flip_augment {
                for ex in &mut batch {
                    if rng.random_bool(0.5) {
                        flip_example(ex, size, true);
                    }
                    if rng.random_bool(0.5) {
                        flip_example(ex, size, false);
                    }
                }
            }
            let loss = batch_loss(&net, &batch, &anchors, hyper, &mut rng)?;
            sum += ensure_finite("train-detector", epoch, step, scalar(&loss)?)?;
            steps += 1;
            opt.backward_step(&loss)?;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1);
            let mut total = 0.0;
            let mut n = 0;
            for chunk in val.chunks(hyper.batch_size) {
                total += scalar(&batch_loss(&net, chunk, &anchors, hyper, &mut vrng)?)?;
                n += 1;
            }
            Some(total / n as f64)
        };
        let entry = EpochLog {
            epoch,
            train_loss: sum / steps as f64,
            val_loss,
            val_metric: None,
            aux_loss: None,
        };
        log::info!("detector epoch {epoch}: train loss {:.4}, val loss {:?}", entry.train_loss, val_loss);
        log.push(entry);
    }
    Ok(DetectorModel {
        params,
        net,
        anchors,
        hyper: hyper.clone(),
        seed,
        log,
    })
}

impl DetectorModel {
    pub fn hyper(&self) -> &DetectorHyper {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Scored boxes above the score threshold after NMS, best first, in the
    /// coordinates of `image`.
    pub fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>> {
        self.detect_with_threshold(image, self.hyper.score_threshold)
    }

    /// As [`detect`](Self::detect) with a caller-chosen score threshold.
    pub fn detect_with_threshold(&self, image: &RgbImage, score_threshold: f64) -> Result<Vec<Detection>> {
        let (w, h) = image.dimensions();
        if w < MIN_INPUT_SIZE || h < MIN_INPUT_SIZE {
            return Err(ModelError::InvalidInput(format!(
                "image {w}x{h} is smaller than the minimum detector input {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
            )));
        }
        let hp = &self.hyper;
        let size = hp.input_size;
        let x = stack_planar(&[to_input(image, size)], 3, size, size, self.params.dtype())?;
        let out = self.net.rpn(&x)?;
        let logits: Vec<f32> = out.logits.i(0)?.to_vec1()?;
        let deltas: Vec<f32> = out.deltas.i(0)?.flatten_all()?.to_vec1()?;
        let rois = proposals(&logits, &deltas, &self.anchors, hp, hp.post_nms_top.max(50));
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let (cls, reg) = self.net.head(&out.features, 0, &rois, hp)?;
        let scores: Vec<f32> = candle_nn::ops::sigmoid(&cls)?.to_vec1()?;
        let reg: Vec<Vec<f32>> = reg.to_vec2()?;
        let (sx, sy) = scale_factors(image, size);
        let mut boxes = Vec::new();
        let mut kept_scores = Vec::new();
        for (i, roi) in rois.iter().enumerate() {
            let score = scores[i] as f64;
            if score < score_threshold {
                continue;
            }
            let d: Vec<f64> = (0..4).map(|k| reg[i][k] as f64 * HEAD_DELTA_STD[k]).collect();
            let b = decode_box(roi, &d);
            let b = [
                (b[0] / sx).clamp(0.0, w as f64),
                (b[1] / sy).clamp(0.0, h as f64),
                (b[2] / sx).clamp(0.0, w as f64),
                (b[3] / sy).clamp(0.0, h as f64),
            ];
            if let Ok(bb) = BoundingBox::new(b[0], b[1], b[2], b[3]) {
                boxes.push(bb);
                kept_scores.push(score);
            }
        }
        let keep = nms_indices(boxes.iter().zip(kept_scores.iter().copied()), hp.nms_iou_threshold);
        Ok(keep
            .into_iter()
            .map(|i| Detection::new(boxes[i], kept_scores[i]).expect("sigmoid score lies in [0, 1]"))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            hyper: self.hyper.clone(),
            seed: self.seed,
            log: self.log.clone(),
        };
        save_checkpoint(path, CHECKPOINT_FORMAT, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (Header, _) = load_checkpoint(path, CHECKPOINT_FORMAT)?;
        header.hyper.validate()?;
        let mut params = ParamStore::from_tensors(tensors, DType::F32);
        let net = DetectorNet::new(&mut params, &header.hyper)?;
        Ok(Self {
            params,
            net,
            anchors: make_anchors(&header.hyper),
            hyper: header.hyper,
            seed: header.seed,
            log: header.log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use foodlens_core::{generate_scene, SceneConfig};

    #[test]
    fn box_codec_round_trip() {
        let a = [10.0, 12.0, 30.0, 20.0];
        let t = [8.5, 13.0, 35.0, 27.0];
        let d = encode_box(&a, &t);
        let back = decode_box(&a, &d);
        for k in 0..4 {
            assert!((back[k] - t[k]).abs() < 1e-9);
        }
        assert_eq!(encode_box(&a, &a), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn anchors_follow_the_spec() {
        let h = DetectorHyper::default();
        let anchors = make_anchors(&h);
        let fs = h.feature_size();
        assert_eq!(fs, 16);
        assert_eq!(anchors.len(), fs * fs * 9);
        // Cell (0, 0), size 0.25 * 64, ratio 1.
        let a = anchors[4];
        assert_eq!(a, [2.0 - 8.0, 2.0 - 8.0, 2.0 + 8.0, 2.0 + 8.0]);
    }

    #[test]
    fn roi_align_weights_sum_to_one_inside_the_map() {
        let m = roi_align_matrix(&[[4.0, 4.0, 20.0, 28.0]], 16, 4.0, 3);
        for row in m.chunks(256) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "{s}");
        }
        // A box covering exactly cell (row 2, col 3) is centred on that cell.
        let m = roi_align_matrix(&[[12.0, 8.0, 16.0, 12.0]], 16, 4.0, 1);
        let cy: f32 = (0..256).map(|i| m[i] * (i / 16) as f32).sum();
        let cx: f32 = (0..256).map(|i| m[i] * (i % 16) as f32).sum();
        assert!((cy - 2.0).abs() < 1e-5 && (cx - 3.0).abs() < 1e-5, "({cx}, {cy})");
    }

    #[test]
    fn rpn_sampling_marks_the_best_anchor_positive() {
        let h = DetectorHyper::default();
        let anchors = make_anchors(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // A thin box no anchor overlaps at 0.5 IoU still gets a positive.
        let t = rpn_targets(&anchors, &[[30.0, 30.0, 33.0, 45.0]], &h, &mut rng);
        assert!(!t.pos_indices.is_empty());
        assert!(t.labels.len() <= h.rpn_samples);
        let none = rpn_targets(&anchors, &[], &h, &mut rng);
        assert!(none.pos_indices.is_empty());
        assert_eq!(none.labels.len(), h.rpn_samples);
    }

    fn tiny(epochs: usize) -> DetectorHyper {
        DetectorHyper {
            input_size: 32,
            backbone: BackboneConfig {
                widths: vec![8, 8],
                blocks_per_stage: 1,
                stem_stride: 2,
            },
            rpn_width: 8,
            head_hidden: 16,
            epochs,
            batch_size: 2,
            ..DetectorHyper::default()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<DetectorSample> {
        let cfg = SceneConfig {
            image_size: [32, 32],
            size_range: [8, 14],
            items_per_scene: [1, 2],
            ..SceneConfig::default()
        };
        (0..n)
            .map(|i| {
                let s = generate_scene(&cfg, seed + i as u64).unwrap();
                DetectorSample {
                    image: s.image,
                    boxes: s.annotations.iter().map(|a| a.bbox).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let m = DatasetManifest::new(vec!["a".into()], Vec::new(), ".");
        assert!(matches!(
            train_detector(&m, &tiny(1), 0),
            Err(ModelError::EmptyTrainingSet(_))
        ));
    }

    #[test]
    fn smoke_run_round_trips_and_respects_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let train = samples(1, 0);
        let model = train_detector_on(&train, &[], &tiny(1), 4).unwrap();
        assert!(model.log().epochs[0].train_loss.is_finite());
        let path = dir.path().join("det.safetensors");
        model.save(&path).unwrap();
        let loaded = DetectorModel::load(&path).unwrap();
        for s in samples(3, 10) {
            let a = model.detect_with_threshold(&s.image, 0.05).unwrap();
            assert_eq!(a, loaded.detect_with_threshold(&s.image, 0.05).unwrap());
            assert_eq!(a, model.detect_with_threshold(&s.image, 0.05).unwrap());
            for (i, d) in a.iter().enumerate() {
                assert!(d.bbox.is_within(32, 32));
                assert!(d.score >= 0.05);
                if i > 0 {
                    assert!(a[i - 1].score >= d.score);
                }
            }
        }
        assert!(model.detect(&RgbImage::new(8, 40)).is_err());
    }

    #[test]
    fn training_loss_decreases() {
        let train = samples(8, 20);
        let model = train_detector_on(&train, &[], &tiny(6), 1).unwrap();
        let losses = model.log().train_losses();
        let head: f64 = losses[..2].iter().sum::<f64>() / 2.0;
        let tail: f64 = losses[losses.len() - 2..].iter().sum::<f64>() / 2.0;
        assert!(tail < head, "losses {losses:?}");
    }
}
