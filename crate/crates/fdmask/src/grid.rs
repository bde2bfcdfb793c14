//! The n x n facial block grid.
//!
//! An aligned face is partitioned into `n * n` rectangular blocks, identified by
//! [`BlockId`] values `1..=n*n` in row-major order. Every pixel belongs to exactly
//! one block; when the image dimensions are not divisible by `n`, the remainder
//! pixels are absorbed by the last row / last column of blocks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::OcclusionRegion;
use crate::geom::Rect;

/// 1-based row-major block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(u32);

impl BlockId {
    /// `index` must be >= 1; range against a particular grid is checked by
    /// [`GridSpec::validate_block`].
    pub fn new(index: u32) -> Self {
        assert!(index >= 1, "block ids are 1-based");
        BlockId(index)
    }

    pub fn index(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Geometry of the block grid over a fixed image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    image_height: usize,
    image_width: usize,
    blocks_per_side: usize,
}

impl GridSpec {
    /// Builds the grid. Dimensions must be positive and at least `n` pixels in each
    /// direction so that every block is non-empty.
    pub fn new(image_height: usize, image_width: usize, blocks_per_side: usize) -> Result<Self> {
        if image_height == 0 || image_width == 0 {
            return Err(Error::invalid_argument(format!(
                "image dimensions must be positive, got {image_height}x{image_width}"
            )));
        }
        if blocks_per_side == 0 {
            return Err(Error::invalid_argument("blocks_per_side must be >= 1"));
        }
        if blocks_per_side > image_height.min(image_width) {
            return Err(Error::invalid_argument(format!(
                "blocks_per_side {blocks_per_side} exceeds the smaller image dimension of \
                 {image_height}x{image_width}; blocks would be empty"
            )));
        }
        Ok(GridSpec {
            image_height,
            image_width,
            blocks_per_side,
        })
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn blocks_per_side(&self) -> usize {
        self.blocks_per_side
    }

    pub fn block_count(&self) -> usize {
        self.blocks_per_side * self.blocks_per_side
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> {
        (1..=self.block_count() as u32).map(BlockId)
    }

    pub fn validate_block(&self, block: BlockId) -> Result<()> {
        if (block.index() as usize) > self.block_count() {
            return Err(Error::invalid_argument(format!(
                "block {} out of range for a {0}x{0} grid with {1} blocks",
                block,
                self.block_count()
            )));
        }
        Ok(())
    }

    /// 1-based `(row, col)` of a block.
    pub fn row_col(&self, block: BlockId) -> Result<(usize, usize)> {
        self.validate_block(block)?;
        let i = block.index() as usize - 1;
        Ok((i / self.blocks_per_side + 1, i % self.blocks_per_side + 1))
    }

    pub fn block_at(&self, row: usize, col: usize) -> Result<BlockId> {
        let n = self.blocks_per_side;
        if row < 1 || row > n || col < 1 || col > n {
            return Err(Error::invalid_argument(format!(
                "block position ({row},{col}) out of range for n={n}"
            )));
        }
        Ok(BlockId(((row - 1) * n + (col - 1) + 1) as u32))
    }

    fn span(total: usize, n: usize, i: usize) -> (usize, usize) {
        // 0-based strip index i; the last strip takes the remainder pixels.
        let base = total / n;
        let start = i * base;
        let len = if i == n - 1 { total - base * (n - 1) } else { base };
        (start, len)
    }

    /// Pixel rectangle of a block.
    pub fn block_rect(&self, block: BlockId) -> Result<Rect> {
        let (row, col) = self.row_col(block)?;
        let (y, height) = Self::span(self.image_height, self.blocks_per_side, row - 1);
        let (x, width) = Self::span(self.image_width, self.blocks_per_side, col - 1);
        Ok(Rect::new(x, y, width, height))
    }

    /// A block is central when it does not touch the grid border (both its row and
    /// column are interior). Degenerate grids with n < 3 have no border-free
    /// blocks, so every block counts as central there.
    pub fn is_central(&self, block: BlockId) -> Result<bool> {
        let n = self.blocks_per_side;
        let (row, col) = self.row_col(block)?;
        if n < 3 {
            return Ok(true);
        }
        Ok(row >= 2 && row <= n - 1 && col >= 2 && col <= n - 1)
    }

    /// Central blocks in ascending id order.
    pub fn central_blocks(&self) -> Vec<BlockId> {
        self.blocks()
            .filter(|b| self.is_central(*b).expect("id from iterator is valid"))
            .collect()
    }

    /// The up/down/left/right neighbors that exist, in ascending id order.
    pub fn four_neighbors(&self, block: BlockId) -> Result<Vec<BlockId>> {
        let n = self.blocks_per_side as isize;
        let (row, col) = self.row_col(block)?;
        let (row, col) = (row as isize, col as isize);
        let mut out = Vec::with_capacity(4);
        for (dr, dc) in [(-1isize, 0isize), (0, -1), (0, 1), (1, 0)] {
            let (r, c) = (row + dr, col + dc);
            if r >= 1 && r <= n && c >= 1 && c <= n {
                out.push(self.block_at(r as usize, c as usize)?);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Blocks whose covered fraction `|region ∩ block| / |block|` reaches
    /// `threshold`. `threshold` must lie in `(0, 1]`; the region mask must match
    /// the grid's image dimensions.
    pub fn region_to_blocks(
        &self,
        region: &OcclusionRegion,
        threshold: f64,
    ) -> Result<BTreeSet<BlockId>> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "coverage threshold must be in (0, 1], got {threshold}"
            )));
        }
        let (h, w) = region.dims();
        if h != self.image_height || w != self.image_width {
            return Err(Error::shape(
                format!("{}x{}", self.image_height, self.image_width),
                format!("{h}x{w}"),
            ));
        }
        let mask = region.mask();
        let mut out = BTreeSet::new();
        for block in self.blocks() {
            let rect = self.block_rect(block)?;
            let mut covered = 0usize;
            for y in rect.y..rect.bottom() {
                for x in rect.x..rect.right() {
                    covered += usize::from(mask[(y, x)]);
                }
            }
            if covered as f64 / rect.area() as f64 >= threshold {
                out.insert(block);
            }
        }
        Ok(out)
    }
}
