//! Grid target assignment and the detection loss.

use super::{BOX_CHANNEL, CLS_CHANNEL, HEAD_CHANNELS, NUM_CLASSES, OBJ_CHANNEL, STRIDE};
use crate::error::{Error, Result};
use crate::ndlab::{Tape, Tensor, Var};
use crate::scenegen::GtBox;

/// Weight of the box-regression term in the total loss.
pub const REG_WEIGHT: f32 = 5.0;
/// Smooth-L1 transition point for the box terms.
pub const REG_BETA: f32 = 1.0;

/// Per-cell training targets for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Index of the gt box owning each cell.
    pub owner: Vec<Option<usize>>,
    pub class: Vec<usize>,
    /// `(tx, ty, tw, th)` per cell; zero at negatives.
    pub boxes: Vec<[f32; 4]>,
    /// Objects that lost their cell to a larger box.
    pub dropped: usize,
}

impl Targets {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_positive(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    pub fn is_positive(&self, cell: usize) -> bool {
        self.owner[cell].is_some()
    }
}

fn area(b: &[f32; 4]) -> f32 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// The cell containing each box center is positive. Offsets are measured
/// within the cell; sizes are log ratios to the image size.
pub fn assign_targets(gt: &[GtBox], image_h: usize, image_w: usize) -> Targets {
    let (gh, gw) = (image_h / STRIDE, image_w / STRIDE);
    let cells = gh * gw;
    let mut t = Targets {
        grid_h: gh,
        grid_w: gw,
        image_h,
        image_w,
        owner: vec![None; cells],
        class: vec![0; cells],
        boxes: vec![[0.0; 4]; cells],
        dropped: 0,
    };
    let s = STRIDE as f32;
    for (i, g) in gt.iter().enumerate() {
        let b = g.bbox;
        let cx = 0.5 * (b[0] + b[2]) / s;
        let cy = 0.5 * (b[1] + b[3]) / s;
        let col = (cx.floor().max(0.0) as usize).min(gw - 1);
        let row = (cy.floor().max(0.0) as usize).min(gh - 1);
        let cell = row * gw + col;
        if let Some(prev) = t.owner[cell] {
            t.dropped += 1;
            if area(&gt[prev].bbox) >= area(&b) {
                continue;
            }
        }
        t.owner[cell] = Some(i);
        t.class[cell] = g.class.index();
        t.boxes[cell] = [
            cx - col as f32,
            cy - row as f32,
            ((b[2] - b[0]) / image_w as f32).ln(),
            ((b[3] - b[1]) / image_h as f32).ln(),
        ];
    }
    t
}

/// Tape handles of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub objectness: Var,
    pub class: Var,
    pub regression: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f32,
    pub objectness: f32,
    pub class: f32,
    pub regression: f32,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        LossParts {
            total: tape.value(self.total).item(),
            objectness: tape.value(self.objectness).item(),
            class: tape.value(self.class).item(),
            regression: tape.value(self.regression).item(),
        }
    }
}

fn check_pred(tape: &Tape, pred: Var, t: &Targets) -> Result<()> {
    let shape = tape.value(pred).shape();
    if shape != [HEAD_CHANNELS, t.grid_h, t.grid_w] {
        return Err(Error::shape(
            "loss",
            format!("prediction {shape:?} vs target grid {}×{}", t.grid_h, t.grid_w),
        ));
    }
    Ok(())
}

fn positive_weights(t: &Targets) -> Vec<f32> {
    let n = t.num_positive();
    let w = if n == 0 { 0.0 } else { 1.0 / n as f32 };
    t.owner.iter().map(|o| if o.is_some() { w } else { 0.0 }).collect()
}

/// Smooth-L1 over `(σ(tx), σ(ty), tw, th)` at positives, averaged per positive.
pub fn regression_loss(tape: &mut Tape, pred: Var, t: &Targets) -> Result<Var> {
    check_pred(tape, pred, t)?;
    let w = positive_weights(t);
    let plane = |k: usize| -> Vec<f32> { t.boxes.iter().map(|b| b[k]).collect() };
    let weights2: Vec<f32> = w.iter().chain(&w).copied().collect();

    let offsets = tape.slice_channels(pred, BOX_CHANNEL, BOX_CHANNEL + 2)?;
    let offsets = tape.sigmoid(offsets)?;
    let sizes = tape.slice_channels(pred, BOX_CHANNEL + 2, BOX_CHANNEL + 4)?;
    let off_target = [plane(0), plane(1)].concat();
    let size_target = [plane(2), plane(3)].concat();
    let a = tape.smooth_l1(offsets, off_target, weights2.clone(), REG_BETA)?;
    let b = tape.smooth_l1(sizes, size_target, weights2, REG_BETA)?;
    tape.add(a, b)
}

/// `total = objectness + class + 5 · regression`. Objectness is averaged over
/// all cells, the other terms per positive.
pub fn detection_loss(tape: &mut Tape, pred: Var, t: &Targets) -> Result<LossVars> {
    check_pred(tape, pred, t)?;
    let cells = t.cells();
    let obj_logits = tape.slice_channels(pred, OBJ_CHANNEL, OBJ_CHANNEL + 1)?;
    let obj_target = t.owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }).collect();
    let objectness = tape.bce_with_logits(obj_logits, obj_target, vec![1.0 / cells as f32; cells])?;

    let cls_logits = tape.slice_channels(pred, CLS_CHANNEL, CLS_CHANNEL + NUM_CLASSES)?;
    let class = tape.softmax_cross_entropy(cls_logits, t.class.clone(), positive_weights(t))?;

    let regression = regression_loss(tape, pred, t)?;
    let head = tape.add(objectness, class)?;
    let weighted = tape.scale(regression, REG_WEIGHT)?;
    let total = tape.add(head, weighted)?;
    Ok(LossVars {
        total,
        objectness,
        class,
        regression,
    })
}

/// Loss of a fixed prediction grid.
pub fn loss_of(pred: &Tensor, t: &Targets) -> Result<LossParts> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    Ok(detection_loss(&mut tape, p, t)?.values(&tape))
}

fn logit(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// A grid whose logits reproduce `t` to within a micro-pixel.
pub fn perfect_prediction(t: &Targets) -> Tensor {
    let cells = t.cells();
    let mut g = Tensor::zeros(&[HEAD_CHANNELS, t.grid_h, t.grid_w]);
    let d = g.data_mut();
    for c in 0..cells {
        match t.owner[c] {
            Some(_) => {
                d[OBJ_CHANNEL * cells + c] = 20.0;
                for k in 0..NUM_CLASSES {
                    d[(CLS_CHANNEL + k) * cells + c] = if k == t.class[c] { 20.0 } else { -20.0 };
                }
                let b = t.boxes[c];
                d[BOX_CHANNEL * cells + c] = logit(b[0]);
                d[(BOX_CHANNEL + 1) * cells + c] = logit(b[1]);
                d[(BOX_CHANNEL + 2) * cells + c] = b[2];
                d[(BOX_CHANNEL + 3) * cells + c] = b[3];
            }
            None => d[OBJ_CHANNEL * cells + c] = -20.0,
        }
    }
    g
}
