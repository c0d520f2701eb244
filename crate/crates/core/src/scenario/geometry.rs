use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with coordinates normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub const FULL: BBox = BBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 1.0,
        y_max: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.x_min)
            && (0.0..=1.0).contains(&self.y_min)
            && (0.0..=1.0).contains(&self.x_max)
            && (0.0..=1.0).contains(&self.y_max)
            && self.x_min < self.x_max
            && self.y_min < self.y_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid normalized box {self:?}")))
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Pixel columns `[start, end)` covered by the box. A pixel is covered when
    /// its center lies in `[x_min, x_max)` after scaling by the frame width.
    pub fn pixel_cols(&self, width: usize) -> (usize, usize) {
        pixel_span(self.x_min, self.x_max, width)
    }

    pub fn pixel_rows(&self, height: usize) -> (usize, usize) {
        pixel_span(self.y_min, self.y_max, height)
    }

    /// Box from pixel-space extents, clipped to the frame. `None` when nothing remains.
    pub fn from_pixels_clipped(x0: f64, y0: f64, x1: f64, y1: f64, width: usize, height: usize) -> Option<Self> {
        let (w, h) = (width as f64, height as f64);
        let b = BBox {
            x_min: (x0 / w).clamp(0.0, 1.0),
            y_min: (y0 / h).clamp(0.0, 1.0),
            x_max: (x1 / w).clamp(0.0, 1.0),
            y_max: (y1 / h).clamp(0.0, 1.0),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let scale = n as f64;
    let start = (lo * scale - 0.5).ceil().clamp(0.0, scale) as usize;
    let end = (hi * scale - 0.5).ceil().clamp(0.0, scale) as usize;
    (start, end.max(start))
}

/// Road-user category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn id(self) -> u8 {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Pedestrian => 1,
            ObjectClass::Cyclist => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown class id {id}")))
    }

    pub fn word(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }

    /// Nominal pixel footprint `(width, height)` on a 64-pixel frame.
    pub(crate) fn footprint(self) -> (f64, f64) {
        match self {
            ObjectClass::Car => (12.0, 8.0),
            ObjectClass::Pedestrian => (4.0, 9.0),
            ObjectClass::Cyclist => (6.0, 10.0),
        }
    }
}

/// Per-frame boxes of one tracked object; `None` where the object is out of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBoxTrack {
    pub class_id: u8,
    pub boxes: Vec<Option<BBox>>,
}

impl BBoxTrack {
    pub fn validate(&self) -> Result<()> {
        ObjectClass::from_id(self.class_id)?;
        self.boxes.iter().flatten().try_for_each(BBox::validate)
    }

    pub fn class(&self) -> ObjectClass {
        ObjectClass::from_id(self.class_id).unwrap_or(ObjectClass::Car)
    }

    /// The track restricted to frames `[start, end)`, optionally time-reversed.
    pub fn window(&self, start: usize, end: usize, reversed: bool) -> BBoxTrack {
        let mut boxes = self.boxes[start..end].to_vec();
        if reversed {
            boxes.reverse();
        }
        BBoxTrack {
            class_id: self.class_id,
            boxes,
        }
    }
}

/// Boolean pixel mask `frames × height × width` marking the union of all boxes.
pub fn rasterize_pixel_mask(tracks: &[BBoxTrack], frames: usize, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; frames * height * width];
    for track in tracks {
        for (t, b) in track.boxes.iter().enumerate().take(frames) {
            let Some(b) = b else { continue };
            let (x0, x1) = b.pixel_cols(width);
            let (y0, y1) = b.pixel_rows(height);
            for y in y0..y1 {
                let row = (t * height + y) * width;
                mask[row + x0..row + x1].fill(true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_disjoint_and_identical() {
        let a = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn pixel_span_uses_centers() {
        let b = BBox::new(0.0, 0.0, 0.25, 1.0).unwrap();
        assert_eq!(b.pixel_cols(8), (0, 2));
        let b = BBox::new(0.1, 0.0, 0.2, 1.0).unwrap();
        // centers at 0.5/8=0.0625, 1.5/8=0.1875: only column 1 qualifies
        assert_eq!(b.pixel_cols(8), (1, 2));
        assert_eq!(BBox::FULL.pixel_cols(64), (0, 64));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
    }
}
