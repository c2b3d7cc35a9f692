//! Grid decoding and class-wise non-maximum suppression.

use serde::{Deserialize, Serialize};

use super::{RawPrediction, BOX_CHANNEL, CLS_CHANNEL, NUM_CLASSES, OBJ_CHANNEL, STRIDE};
use crate::scenegen::ObjectClass;

pub const DEFAULT_SCORE_THRESH: f32 = 0.1;
pub const DEFAULT_NMS_IOU: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub class: ObjectClass,
    pub score: f32,
}

/// Intersection over union of two `[x_min, y_min, x_max, y_max]` boxes.
pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Greedy per-class suppression over detections already sorted by score.
pub fn nms(sorted: Vec<Detection>, iou_thresh: f32) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Turns a raw grid into scored, suppressed boxes in descending score order.
/// Equal scores keep cell order.
pub fn decode(pred: &RawPrediction, image_h: usize, image_w: usize, score_thresh: f32, iou_thresh: f32) -> Vec<Detection> {
    let (gh, gw) = pred.grid_dims();
    let cells = gh * gw;
    let g = pred.grid.data();
    let s = STRIDE as f32;
    let (w_img, h_img) = (image_w as f32, image_h as f32);

    let mut out = Vec::new();
    for cell in 0..cells {
        let obj = sigmoid(g[OBJ_CHANNEL * cells + cell]);
        let logits: [f32; NUM_CLASSES] = std::array::from_fn(|k| g[(CLS_CHANNEL + k) * cells + cell]);
        let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = logits.iter().map(|&l| (l - m).exp()).sum();
        // First maximum wins among equal logits.
        let best = (0..NUM_CLASSES).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
        let score = obj * (logits[best] - m).exp() / z;
        if !(score >= score_thresh) {
            continue;
        }
        let (row, col) = (cell / gw, cell % gw);
        let cx = (col as f32 + sigmoid(g[BOX_CHANNEL * cells + cell])) * s;
        let cy = (row as f32 + sigmoid(g[(BOX_CHANNEL + 1) * cells + cell])) * s;
        let w = w_img * g[(BOX_CHANNEL + 2) * cells + cell].exp();
        let h = h_img * g[(BOX_CHANNEL + 3) * cells + cell].exp();
        let bbox = [
            (cx - 0.5 * w).clamp(0.0, w_img),
            (cy - 0.5 * h).clamp(0.0, h_img),
            (cx + 0.5 * w).clamp(0.0, w_img),
            (cy + 0.5 * h).clamp(0.0, h_img),
        ];
        if !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
            continue;
        }
        out.push(Detection {
            bbox,
            class: ObjectClass::from_index(best).expect("class index in range"),
            score,
        });
    }
    // Stable sort keeps ascending cell index among ties.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    nms(out, iou_thresh)
}
