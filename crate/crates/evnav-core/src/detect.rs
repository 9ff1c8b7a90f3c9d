//! Grid-based single-shot gate detection: target encoding, prediction
//! decoding, the detection loss with its gradient, IoU, and non-maximum
//! suppression.
//!
//! The head emits one 385-value vector per window, reshaped as a 5x7 grid of
//! 11 channels: two boxes of (x offset, y offset, width, height, confidence)
//! plus one class probability. Offsets are cell-relative in [0,1); sizes are
//! fractions of the input plane. All slots are read directly (no output
//! nonlinearity): the loss and the decoder share one parameterization, and
//! the size terms are compared through a square-root map.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

pub const GRID_ROWS: usize = 5;
pub const GRID_COLS: usize = 7;
pub const N_CELLS: usize = GRID_ROWS * GRID_COLS;
pub const BOXES_PER_CELL: usize = 2;
pub const CELL_CHANNELS: usize = BOXES_PER_CELL * 5 + 1;
/// 5 * 7 * 11.
pub const PRED_LEN: usize = N_CELLS * CELL_CHANNELS;

pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Axis-aligned box in input-plane pixels, center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
    /// Detection score; 1 for ground truth.
    pub conf: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn from_corners(x_min: T, y_min: T, x_max: T, y_max: T, conf: T) -> Self {
        let half = T::from_f64(0.5);
        BoundingBox {
            cx: (x_min + x_max) * half,
            cy: (y_min + y_max) * half,
            w: x_max - x_min,
            h: y_max - y_min,
            conf,
        }
    }

    pub fn corners(&self) -> [T; 4] {
        let half = T::from_f64(0.5);
        [
            self.cx - self.w * half,
            self.cy - self.h * half,
            self.cx + self.w * half,
            self.cy + self.h * half,
        ]
    }

    pub fn area(&self) -> T {
        if self.w > T::zero() && self.h > T::zero() {
            self.w * self.h
        } else {
            T::zero()
        }
    }
}

/// Cell-relative target for the cell that owns a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetBox<T> {
    /// Center offsets within the cell, in [0, 1).
    pub tx: T,
    pub ty: T,
    /// Size as a fraction of the input plane.
    pub w_frac: T,
    pub h_frac: T,
}

/// Per-cell targets; at most one gate per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthGrid<T> {
    pub cells: Vec<Option<TargetBox<T>>>,
}

impl<T: Scalar> GroundTruthGrid<T> {
    pub fn empty() -> Self {
        GroundTruthGrid {
            cells: vec![None; N_CELLS],
        }
    }

    pub fn n_objects(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Grid cell (row, col) owning the point (cx, cy).
pub fn cell_of<T: Scalar>(cx: T, cy: T, input_w: T, input_h: T) -> (usize, usize) {
    let cols = T::from_usize(GRID_COLS);
    let rows = T::from_usize(GRID_ROWS);
    let col = (cx * cols / input_w).floor().to_f64() as usize;
    let row = (cy * rows / input_h).floor().to_f64() as usize;
    (row.min(GRID_ROWS - 1), col.min(GRID_COLS - 1))
}

/// Assigns each box to the cell containing its center. Boxes landing in an
/// occupied cell are dropped; the second return value counts them.
pub fn encode_targets<T: Scalar>(
    boxes: &[BoundingBox<T>],
    input_w: T,
    input_h: T,
) -> (GroundTruthGrid<T>, usize) {
    let mut grid = GroundTruthGrid::empty();
    let mut dropped = 0;
    let cell_w = input_w / T::from_usize(GRID_COLS);
    let cell_h = input_h / T::from_usize(GRID_ROWS);
    for b in boxes {
        let (row, col) = cell_of(b.cx, b.cy, input_w, input_h);
        let cell = row * GRID_COLS + col;
        if grid.cells[cell].is_some() {
            dropped += 1;
            continue;
        }
        grid.cells[cell] = Some(TargetBox {
            tx: b.cx / cell_w - T::from_usize(col),
            ty: b.cy / cell_h - T::from_usize(row),
            w_frac: b.w / input_w,
            h_frac: b.h / input_h,
        });
    }
    (grid, dropped)
}

fn slot(cell: usize, boxi: usize) -> usize {
    cell * CELL_CHANNELS + boxi * 5
}

fn class_slot(cell: usize) -> usize {
    cell * CELL_CHANNELS + BOXES_PER_CELL * 5
}

fn box_from_slots<T: Scalar>(
    pred: &[T],
    cell: usize,
    boxi: usize,
    input_w: T,
    input_h: T,
) -> BoundingBox<T> {
    let s = slot(cell, boxi);
    let (row, col) = (cell / GRID_COLS, cell % GRID_COLS);
    let cell_w = input_w / T::from_usize(GRID_COLS);
    let cell_h = input_h / T::from_usize(GRID_ROWS);
    BoundingBox {
        cx: (T::from_usize(col) + pred[s]) * cell_w,
        cy: (T::from_usize(row) + pred[s + 1]) * cell_h,
        w: pred[s + 2] * input_w,
        h: pred[s + 3] * input_h,
        conf: pred[s + 4],
    }
}

fn target_as_box<T: Scalar>(t: &TargetBox<T>, cell: usize, input_w: T, input_h: T) -> BoundingBox<T> {
    let (row, col) = (cell / GRID_COLS, cell % GRID_COLS);
    let cell_w = input_w / T::from_usize(GRID_COLS);
    let cell_h = input_h / T::from_usize(GRID_ROWS);
    BoundingBox {
        cx: (T::from_usize(col) + t.tx) * cell_w,
        cy: (T::from_usize(row) + t.ty) * cell_h,
        w: t.w_frac * input_w,
        h: t.h_frac * input_h,
        conf: T::one(),
    }
}

/// Emits per cell the higher-confidence box when its score (confidence times
/// class probability, clamped to [0,1]) reaches the threshold. Degenerate
/// sizes are discarded; centers are clamped into the input plane.
pub fn decode_predictions<T: Scalar>(
    pred: &[T],
    conf_threshold: T,
    input_w: T,
    input_h: T,
) -> Vec<BoundingBox<T>> {
    assert_eq!(pred.len(), PRED_LEN, "prediction vector length");
    let mut out = Vec::new();
    for cell in 0..N_CELLS {
        let c0 = pred[slot(cell, 0) + 4];
        let c1 = pred[slot(cell, 1) + 4];
        let boxi = if c1 > c0 { 1 } else { 0 };
        let class = pred[class_slot(cell)];
        let conf = pred[slot(cell, boxi) + 4];
        let score = (conf * class).max(T::zero()).min(T::one());
        if score < conf_threshold {
            continue;
        }
        let mut b = box_from_slots(pred, cell, boxi, input_w, input_h);
        if b.w <= T::zero() || b.h <= T::zero() {
            continue;
        }
        let hi_x = input_w * T::from_f64(1.0 - 1e-9);
        let hi_y = input_h * T::from_f64(1.0 - 1e-9);
        b.cx = b.cx.max(T::zero()).min(hi_x);
        b.cy = b.cy.max(T::zero()).min(hi_y);
        b.conf = score;
        out.push(b);
    }
    out
}

/// Intersection over union of corner-form boxes [x_min, y_min, x_max, y_max].
pub fn iou_corners<T: Scalar>(a: [T; 4], b: [T; 4]) -> T {
    let aw = (a[2] - a[0]).max(T::zero());
    let ah = (a[3] - a[1]).max(T::zero());
    let bw = (b[2] - b[0]).max(T::zero());
    let bh = (b[3] - b[1]).max(T::zero());
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(T::zero());
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(T::zero());
    let inter = ix * iy;
    let union = aw * ah + bw * bh - inter;
    if union > T::zero() {
        inter / union
    } else {
        T::zero()
    }
}

pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    if a.area() == T::zero() || b.area() == T::zero() {
        return T::zero();
    }
    iou_corners(a.corners(), b.corners())
}

/// Square-root size map with a linear extension below zero so that negative
/// size predictions keep a restoring gradient.
fn size_map<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v.sqrt()
    } else {
        v * T::from_f64(0.5)
    }
}

fn size_map_grad<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::from_f64(0.5) / v.sqrt()
    } else {
        T::from_f64(0.5)
    }
}

/// Detection loss and its gradient wrt the prediction vector.
///
/// Per object cell, the responsible box (higher IoU against the target, ties
/// to box 0) pays coordinate and square-root size errors weighted by
/// `LAMBDA_COORD`, plus a confidence error toward 1 and a class error toward
/// 1; the other box pays `LAMBDA_NOOBJ` times its squared confidence. Cells
/// without objects pay `LAMBDA_NOOBJ` times each box's squared confidence.
pub fn yolo_loss_grad<T: Scalar>(
    pred: &[T],
    target: &GroundTruthGrid<T>,
    input_w: T,
    input_h: T,
) -> (T, Vec<T>) {
    assert_eq!(pred.len(), PRED_LEN, "prediction vector length");
    assert_eq!(target.cells.len(), N_CELLS, "target grid size");
    let l_coord = T::from_f64(LAMBDA_COORD);
    let l_noobj = T::from_f64(LAMBDA_NOOBJ);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); PRED_LEN];

    for cell in 0..N_CELLS {
        match &target.cells[cell] {
            None => {
                for boxi in 0..BOXES_PER_CELL {
                    let ci = slot(cell, boxi) + 4;
                    loss += l_noobj * pred[ci] * pred[ci];
                    grad[ci] += two * l_noobj * pred[ci];
                }
            }
            Some(t) => {
                let tb = target_as_box(t, cell, input_w, input_h);
                let iou0 = iou(&box_from_slots(pred, cell, 0, input_w, input_h), &tb);
                let iou1 = iou(&box_from_slots(pred, cell, 1, input_w, input_h), &tb);
                let resp = if iou1 > iou0 { 1 } else { 0 };
                let other = 1 - resp;

                let s = slot(cell, resp);
                let dx = pred[s] - t.tx;
                let dy = pred[s + 1] - t.ty;
                loss += l_coord * (dx * dx + dy * dy);
                grad[s] += two * l_coord * dx;
                grad[s + 1] += two * l_coord * dy;

                let dw = size_map(pred[s + 2]) - t.w_frac.sqrt();
                let dh = size_map(pred[s + 3]) - t.h_frac.sqrt();
                loss += l_coord * (dw * dw + dh * dh);
                grad[s + 2] += two * l_coord * dw * size_map_grad(pred[s + 2]);
                grad[s + 3] += two * l_coord * dh * size_map_grad(pred[s + 3]);

                let dc = pred[s + 4] - T::one();
                loss += dc * dc;
                grad[s + 4] += two * dc;

                let co = slot(cell, other) + 4;
                loss += l_noobj * pred[co] * pred[co];
                grad[co] += two * l_noobj * pred[co];

                let pc = class_slot(cell);
                let dp = pred[pc] - T::one();
                loss += dp * dp;
                grad[pc] += two * dp;
            }
        }
    }
    (loss, grad)
}

/// Greedy non-maximum suppression: keep by descending confidence, suppress
/// any remaining box whose IoU with a kept box exceeds the threshold.
pub fn nms<T: Scalar>(boxes: &[BoundingBox<T>], iou_threshold: T) -> Vec<BoundingBox<T>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .conf
            .partial_cmp(&boxes[a].conf)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<BoundingBox<T>> = Vec::new();
    for &i in &order {
        if kept.iter().all(|k| iou(k, &boxes[i]) <= iou_threshold) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// One output line per window in the detections stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionRecord {
    pub window_index: usize,
    pub t_start_us: i64,
    pub t_end_us: i64,
    pub boxes: Vec<DetectionBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
}

impl DetectionBox {
    pub fn from_box<T: Scalar>(b: &BoundingBox<T>) -> Self {
        DetectionBox {
            cx: b.cx.to_f64(),
            cy: b.cy.to_f64(),
            w: b.w.to_f64(),
            h: b.h.to_f64(),
            conf: b.conf.to_f64(),
        }
    }

    pub fn to_box<T: Scalar>(&self) -> BoundingBox<T> {
        BoundingBox {
            cx: T::from_f64(self.cx),
            cy: T::from_f64(self.cy),
            w: T::from_f64(self.w),
            h: T::from_f64(self.h),
            conf: T::from_f64(self.conf),
        }
    }
}

pub fn write_detections(path: &std::path::Path, records: &[DetectionRecord]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("serializing detection record: {e}"),
            })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &std::path::Path) -> Result<Vec<DetectionRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rdr = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in rdr.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: i as u64,
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}
