//! Reconstruction and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLayout;
use crate::dataset::{sprite_mask, Frame};
use crate::decomposition::Decomposition;
use crate::error::{Error, Result};
use crate::sprite::SpritePatch;

/// Binary `h x w` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask sizes differ");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn union_all<'a>(width: usize, height: usize, masks: impl IntoIterator<Item = &'a Mask>) -> Mask {
        let mut out = Mask::empty(width, height);
        for m in masks {
            out.union_with(m);
        }
        out
    }

    /// `(|a & b|, |a | b|)`.
    pub fn overlap(&self, other: &Mask) -> (usize, usize) {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask sizes differ");
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        (inter, union)
    }

    /// Intersection over union; two empty masks agree perfectly.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (inter, union) = self.overlap(other);
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// PSNR cap for identical images.
pub const MAX_PSNR: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`, capped at 99.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("cannot compare {} values with {}", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        MAX_PSNR
    } else {
        (10.0 * (1.0 / mse).log10()).min(MAX_PSNR)
    }
}

pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!("frame {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height())));
    }
    psnr_values(a.data(), b.data())
}

pub fn foreground_iou(pred: &Mask, truth: &Mask) -> f64 {
    pred.iou(truth)
}

/// Outcome of one-to-one instance matching in a single frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub true_positives: usize,
    pub predicted: usize,
    pub truth: usize,
    /// Matched `(prediction, truth, iou)` triples.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.predicted)
    }

    /// 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.truth)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Greedy one-to-one matching by descending IoU; a pair counts as a true
/// positive when its IoU is at least `tau`.
pub fn match_instances(pred: &[Mask], truth: &[Mask], tau: f64) -> MatchResult {
    let mut candidates = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let (inter, union) = p.overlap(t);
            if inter > 0 {
                let iou = inter as f64 / union as f64;
                if iou >= tau {
                    candidates.push((i, j, iou));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (i, j, iou) in candidates {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            pairs.push((i, j, iou));
        }
    }
    MatchResult { true_positives: pairs.len(), predicted: pred.len(), truth: truth.len(), pairs }
}

/// Dataset-level metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub frames: usize,
    pub psnr: f64,
    /// Mean of per-frame foreground IoU.
    pub foreground_iou: f64,
    /// Foreground IoU of all frames pooled into one mask pair.
    pub foreground_iou_pooled: f64,
    /// Pooled over all frames' instance counts.
    pub precision: f64,
    pub recall: f64,
    pub tau: f64,
}

/// Per-frame inputs to [`evaluate`].
pub struct FrameEvaluation<'a> {
    pub frame: &'a Frame,
    pub reconstruction: &'a Frame,
    pub predicted: &'a [Mask],
    pub truth: &'a [Mask],
}

pub fn evaluate(items: &[FrameEvaluation<'_>], tau: f64) -> Result<EvaluationReport> {
    if items.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut psnr_sum = 0.0;
    let mut iou_sum = 0.0;
    let (mut inter, mut union) = (0usize, 0usize);
    let (mut tp, mut np, mut nt) = (0, 0, 0);
    for item in items {
        psnr_sum += psnr(item.frame, item.reconstruction)?;
        let (w, h) = (item.frame.width(), item.frame.height());
        let p = Mask::union_all(w, h, item.predicted);
        let t = Mask::union_all(w, h, item.truth);
        iou_sum += foreground_iou(&p, &t);
        let (i, u) = p.overlap(&t);
        inter += i;
        union += u;
        let m = match_instances(item.predicted, item.truth, tau);
        tp += m.true_positives;
        np += m.predicted;
        nt += m.truth;
    }
    let n = items.len() as f64;
    Ok(EvaluationReport {
        frames: items.len(),
        psnr: psnr_sum / n,
        foreground_iou: iou_sum / n,
        foreground_iou_pooled: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        precision: ratio(tp, np),
        recall: ratio(tp, nt),
        tau,
    })
}

/// Footprint masks (alpha >= 0.5) of the active placements using one of
/// `ids`, in placement order. Placements that end up fully outside the
/// frame are dropped.
pub fn sprite_instances(
    decomposition: &Decomposition,
    layout: &AnchorLayout,
    sprites: &[SpritePatch],
    ids: &[usize],
) -> Result<Vec<Mask>> {
    if let Some(&id) = ids.iter().find(|&&id| id >= sprites.len()) {
        return Err(Error::UnknownSprite { id, count: sprites.len() });
    }
    let mut masks = Vec::new();
    for p in decomposition.active().filter(|p| ids.contains(&p.sprite_id)) {
        let mask = sprite_mask(&sprites[p.sprite_id], p.position(layout), decomposition.width, decomposition.height);
        if !mask.is_empty() {
            masks.push(mask);
        }
    }
    Ok(masks)
}

/// Union of the footprints of every active placement whose sprite is one
/// of `ids`. No ids give an empty mask.
pub fn segment_by_sprites(
    decomposition: &Decomposition,
    layout: &AnchorLayout,
    sprites: &[SpritePatch],
    ids: &[usize],
) -> Result<Mask> {
    let masks = sprite_instances(decomposition, layout, sprites, ids)?;
    Ok(Mask::union_all(decomposition.width, decomposition.height, &masks))
}
