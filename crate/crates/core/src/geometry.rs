//! Axis-aligned boxes and the box-delta parameterization.

use thiserror::Error;

/// `[x1, y1, x2, y2]` in pixels.
pub type BBox = [f64; 4];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box {0:?}")]
    Degenerate(BBox),
}

pub fn is_valid(b: &BBox) -> bool {
    b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1]
}

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// IoU without validation; both boxes must have positive area.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    for bx in [a, b] {
        if !is_valid(bx) {
            return Err(GeometryError::Degenerate(*bx));
        }
    }
    Ok(iou_unchecked(a, b))
}

pub fn clip(b: &BBox, width: f64, height: f64) -> BBox {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Largest log-scale width/height delta accepted when decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Center-offset / log-size box deltas, each divided by a per-coordinate weight
/// on decode and multiplied on encode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder { weights: [1.0, 1.0, 1.0, 1.0] };
    /// Weights conventionally used by second-stage R-CNN heads.
    pub const RCNN: BoxCoder = BoxCoder { weights: [10.0, 10.0, 5.0, 5.0] };

    pub fn encode(&self, target: &BBox, reference: &BBox) -> [f64; 4] {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let (tw, th) = (target[2] - target[0], target[3] - target[1]);
        let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, deltas: &[f64], reference: &BBox) -> BBox {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(MAX_LOG_SCALE);
        let dh = (deltas[3] / wh).min(MAX_LOG_SCALE);
        let cx = rx + dx * rw;
        let cy = ry + dy * rh;
        let w = rw * dw.exp();
        let h = rh * dh.exp();
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]).unwrap(), 0.0);
        assert!((iou(&a, &[1.0, 1.0, 3.0, 3.0]).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(iou(&a, &[1.0, 1.0, 1.0, 3.0]).is_err());
    }

    #[test]
    fn zero_delta_decodes_to_reference() {
        let r = [3.0, 4.0, 19.0, 30.0];
        for coder in [BoxCoder::UNIT, BoxCoder::RCNN] {
            assert_eq!(coder.decode(&[0.0; 4], &r), r);
            assert_eq!(coder.encode(&r, &r), [0.0; 4]);
        }
    }

    #[test]
    fn clip_keeps_box_in_bounds() {
        assert_eq!(clip(&[-3.0, 2.0, 70.0, 80.0], 64.0, 64.0), [0.0, 2.0, 64.0, 64.0]);
    }
}
