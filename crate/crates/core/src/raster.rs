//! Dense row-major 2-D arrays and binary masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::detection::BBox;
use crate::error::{Error, Result};

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T: Clone> Grid<T> {
    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y).clone()
        })
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y).clone()
        })
    }

    /// Copy a `w`x`h` window starting at (`x0`, `y0`).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y).clone())
    }
}

/// Binary mask with cached foreground area and bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Grid<bool>,
    area: usize,
    // inclusive pixel bounds (x0, y0, x1, y1)
    bounds: Option<(usize, usize, usize, usize)>,
}

impl Mask {
    pub fn new(grid: Grid<bool>) -> Self {
        let mut area = 0;
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..grid.height() {
            for (x, &v) in grid.row(y).iter().enumerate() {
                if v {
                    area += 1;
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        Self { grid, area, bounds }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            grid: Grid::filled(width, height, false),
            area: 0,
            bounds: None,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl FnMut(usize, usize) -> bool) -> Self {
        Self::new(Grid::from_fn(width, height, f))
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.grid.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.grid.height()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        *self.grid.get(x, y)
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.grid
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    /// Inclusive pixel bounds of the foreground.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        self.bounds
    }

    /// Tight box around the foreground in pixel-edge coordinates.
    pub fn bbox(&self) -> Option<BBox> {
        self.bounds.map(|(x0, y0, x1, y1)| {
            BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
        })
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        let (Some(a), Some(b)) = (self.bounds, other.bounds) else {
            return 0;
        };
        if !self.grid.same_shape(&other.grid) {
            return 0;
        }
        let x0 = a.0.max(b.0);
        let y0 = a.1.max(b.1);
        let x1 = a.2.min(b.2);
        let y1 = a.3.min(b.3);
        if x0 > x1 || y0 > y1 {
            return 0;
        }
        let mut n = 0;
        for y in y0..=y1 {
            let ra = &self.grid.row(y)[x0..=x1];
            let rb = &other.grid.row(y)[x0..=x1];
            n += ra.iter().zip(rb).filter(|(p, q)| **p && **q).count();
        }
        n
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::new(self.grid.flip_horizontal())
    }

    pub fn flip_vertical(&self) -> Self {
        Self::new(self.grid.flip_vertical())
    }
}
