//! Point, box and dense prompts for a promptable segmenter.

use alloc::vec::Vec;

use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::raster::Grid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub positive: bool,
}

/// Validated prompts for one tile. Coordinates are in tile pixels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PromptSet {
    points: Vec<PointPrompt>,
    boxes: Vec<BBox>,
    dense_mask: Option<Grid<bool>>,
}

impl PromptSet {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<PointPrompt>,
        boxes: Vec<BBox>,
        dense_mask: Option<Grid<bool>>,
    ) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        for p in &points {
            if !(p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h) {
                return Err(Error::InvalidPrompt(alloc::format!(
                    "point ({}, {}) outside {width}x{height} tile",
                    p.x,
                    p.y
                )));
            }
        }
        for b in &boxes {
            if !(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= w && b.y1 <= h) {
                return Err(Error::InvalidPrompt(alloc::format!(
                    "box {b:?} outside {width}x{height} tile"
                )));
            }
            if !(b.x1 > b.x0 && b.y1 > b.y0) {
                return Err(Error::InvalidPrompt(alloc::format!("box {b:?} has zero area")));
            }
        }
        Ok(Self {
            points,
            boxes,
            dense_mask,
        })
    }

    pub fn points(&self) -> &[PointPrompt] {
        &self.points
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn dense_mask(&self) -> Option<&Grid<bool>> {
        self.dense_mask.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len() + self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `pps * pps` positive points at the centers of a uniform grid of cells over the tile.
pub fn automatic_grid_prompts(pps: usize, width: usize, height: usize) -> Result<PromptSet> {
    if pps == 0 {
        return Err(Error::InvalidConfig("points per side must be at least 1".into()));
    }
    let mut points = Vec::with_capacity(pps * pps);
    for j in 0..pps {
        for i in 0..pps {
            points.push(PointPrompt {
                x: (i as f64 + 0.5) / pps as f64 * width as f64,
                y: (j as f64 + 0.5) / pps as f64 * height as f64,
                positive: true,
            });
        }
    }
    PromptSet::new(width, height, points, Vec::new(), None)
}

/// Positive point prompts at the given pixel positions, placed at pixel centers.
pub fn point_prompts(peaks: &[(usize, usize)], width: usize, height: usize) -> Result<PromptSet> {
    let points = peaks
        .iter()
        .map(|&(x, y)| PointPrompt {
            x: x as f64 + 0.5,
            y: y as f64 + 0.5,
            positive: true,
        })
        .collect();
    PromptSet::new(width, height, points, Vec::new(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn grid_counts() {
        for pps in [1, 2, 10, 37, 100] {
            assert_eq!(automatic_grid_prompts(pps, 1024, 1024).unwrap().points().len(), pps * pps);
        }
        let one = automatic_grid_prompts(1, 1024, 1024).unwrap();
        assert_eq!((one.points()[0].x, one.points()[0].y), (512.0, 512.0));
        assert!(automatic_grid_prompts(0, 8, 8).is_err());
    }

    #[test]
    fn zero_area_box_rejected() {
        let e = PromptSet::new(64, 64, vec![], vec![BBox::new(3.0, 3.0, 3.0, 9.0)], None);
        assert!(matches!(e, Err(Error::InvalidPrompt(_))));
        let e = PromptSet::new(64, 64, vec![], vec![BBox::new(3.0, 3.0, 70.0, 9.0)], None);
        assert!(e.is_err());
    }
}
