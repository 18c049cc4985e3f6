use crate::raster::Mask;

/// Axis-aligned box in pixel-edge coordinates, `x0 <= x1`, `y0 <= y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamp(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox::new(width - self.x1, self.y0, width - self.x0, self.y1)
    }

    pub fn flip_vertical(&self, height: f64) -> BBox {
        BBox::new(self.x0, height - self.y1, self.x1, height - self.y0)
    }
}

/// One predicted instance.
///
/// `score` is the ranking score consumed by NMS and AP; `box_score` and `mask_score` keep the
/// component confidences so pipelines can recombine them.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub mask: Option<Mask>,
    pub class_id: u32,
    pub score: f64,
    pub box_score: f64,
    pub mask_score: Option<f64>,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, score: f64) -> Self {
        Self {
            bbox,
            mask: None,
            class_id,
            score,
            box_score: score,
            mask_score: None,
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }
}
