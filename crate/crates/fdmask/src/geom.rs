//! Pixel rectangles.
//!
//! `(x, y)` is the top-left corner with `x` the column and `y` the row; `right()`
//! and `bottom()` are exclusive. An empty rectangle has zero width or height.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// One past the last column.
    pub fn right(&self) -> usize {
        self.x + self.width
    }

    /// One past the last row.
    pub fn bottom(&self) -> usize {
        self.y + self.height
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.bottom() && x >= self.x && x < self.right()
    }

    /// Intersection; empty rectangles come back as zero-sized at the origin.
    pub fn intersect(&self, other: &Rect) -> Rect {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            Rect::new(0, 0, 0, 0)
        } else {
            Rect::new(x0, y0, x1 - x0, y1 - y0)
        }
    }

    /// True when the rectangle lies entirely inside an `height` x `width` image.
    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.right() <= width && self.bottom() <= height
    }
}
