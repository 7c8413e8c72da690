//! Non-overlapping square tiling of channel-first images.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub original_height: usize,
    pub original_width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if height == 0 || width == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width} does not tile into {patch_size}x{patch_size} patches; \
                 resize it to a multiple of {patch_size} first"
            )));
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
            original_height: height,
            original_width: width,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel of patch `index` in row-major order.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        ((index / self.cols) * self.patch_size, (index % self.cols) * self.patch_size)
    }
}

/// Splits a `[C, H, W]` tensor into row-major `[C, P, P]` patches.
pub fn split(image: &Tensor, patch_size: usize) -> Result<(Vec<Tensor>, PatchGrid)> {
    let (_, h, w) = image
        .dims3()
        .map_err(|_| Error::Shape(format!("expected a [C, H, W] image, got {:?}", image.dims())))?;
    let grid = PatchGrid::new(h, w, patch_size)?;
    let mut patches = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (y, x) = grid.origin(i);
        patches.push(image.narrow(1, y, patch_size)?.narrow(2, x, patch_size)?.contiguous()?);
    }
    Ok((patches, grid))
}

/// Reassembles patches produced by [`split`].
pub fn stitch(patches: &[Tensor], grid: &PatchGrid) -> Result<Tensor> {
    if patches.len() != grid.len() || patches.is_empty() {
        return Err(Error::Shape(format!(
            "grid has {} cells but {} patches were given",
            grid.len(),
            patches.len()
        )));
    }
    let channels = patches[0].dims().first().copied().unwrap_or(0);
    let p = grid.patch_size;
    for (i, patch) in patches.iter().enumerate() {
        if patch.dims() != [channels, p, p] {
            return Err(Error::Shape(format!(
                "patch {i} is {:?}, expected [{channels}, {p}, {p}]",
                patch.dims()
            )));
        }
    }
    let rows = patches
        .chunks(grid.cols)
        .map(|row| Tensor::cat(row, 2))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, 1)?)
}
