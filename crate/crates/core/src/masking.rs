//! Tube masks over a patch grid and per-patch target normalization.
//!
//! Mask sampling is reproducible: a ChaCha8 generator seeded with the mask
//! seed drives a partial Fisher-Yates shuffle of the row-major patch indices
//! `0..K`; the first `round(ratio * K)` shuffled indices are masked.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 32;
pub const DEFAULT_MASK_RATIO: f64 = 0.5;
pub const DEFAULT_NORM_EPSILON: f64 = 1e-6;

const TUBE_MAGIC: &[u8; 4] = b"TUBE";

/// Square patches covering an `height x width` image, zero-padded on the
/// bottom and right up to a multiple of the patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch grid needs positive sizes (image {height}x{width}, patch {patch})"
            )));
        }
        Ok(Self {
            patch,
            height,
            width,
            grid_h: height.div_ceil(patch),
            grid_w: width.div_ceil(patch),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn padded_height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn padded_width(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn pad_bottom(&self) -> usize {
        self.padded_height() - self.height
    }

    pub fn pad_right(&self) -> usize {
        self.padded_width() - self.width
    }

    /// In-image pixel ranges `(rows, cols)` of patch `(gy, gx)`.
    pub fn patch_bounds(
        &self,
        gy: usize,
        gx: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let p = self.patch;
        let rows = gy * p..((gy + 1) * p).min(self.height);
        let cols = gx * p..((gx + 1) * p).min(self.width);
        (rows, cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TubeMask {
    /// `(grid_h, grid_w)`, true where the patch is hidden.
    pub masked: Array2<bool>,
    pub ratio: f64,
    pub seed: u32,
}

impl TubeMask {
    pub fn grid_h(&self) -> usize {
        self.masked.nrows()
    }

    pub fn grid_w(&self) -> usize {
        self.masked.ncols()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, gy: usize, gx: usize) -> bool {
        self.masked[[gy, gx]]
    }

    /// Every patch hidden; handy for losses over the whole frame.
    pub fn full(grid: &PatchGrid) -> Self {
        Self {
            masked: Array2::from_elem((grid.grid_h, grid.grid_w), true),
            ratio: 1.0,
            seed: 0,
        }
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if self.masked.dim() != (grid.grid_h, grid.grid_w) {
            return Err(shape_mismatch(
                format!("mask grid {}x{}", grid.grid_h, grid.grid_w),
                format!("{}x{}", self.grid_h(), self.grid_w()),
            ));
        }
        Ok(())
    }

    /// Per-pixel view over the (unpadded) image.
    pub fn pixel_mask(&self, grid: &PatchGrid) -> Result<Array2<bool>> {
        self.check_grid(grid)?;
        let p = grid.patch;
        Ok(Array2::from_shape_fn((grid.height, grid.width), |(y, x)| {
            self.masked[[y / p, x / p]]
        }))
    }

    /// 12-byte header (`TUBE`, u16 grid_w, u16 grid_h, u32 seed) followed by
    /// the row-major mask bits, least significant bit first within each byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.masked.len();
        let mut out = Vec::with_capacity(12 + k.div_ceil(8));
        out.extend_from_slice(TUBE_MAGIC);
        out.extend_from_slice(&(self.grid_w() as u16).to_le_bytes());
        out.extend_from_slice(&(self.grid_h() as u16).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let mut bits = vec![0u8; k.div_ceil(8)];
        for (i, &m) in self.masked.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format { kind: "TUBE", reason };
        if bytes.len() < 12 || &bytes[..4] != TUBE_MAGIC {
            return Err(bad("missing TUBE header".into()));
        }
        let grid_w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let grid_h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let seed = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
        let k = grid_w * grid_h;
        let payload = &bytes[12..];
        if payload.len() != k.div_ceil(8) {
            return Err(bad(format!(
                "expected {} mask bytes for a {grid_w}x{grid_h} grid, found {}",
                k.div_ceil(8),
                payload.len()
            )));
        }
        let flags: Vec<bool> = (0..k).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
        let masked = Array2::from_shape_vec((grid_h, grid_w), flags).expect("k = grid_h * grid_w");
        let count = masked.iter().filter(|&&m| m).count();
        let ratio = if k == 0 { 0.0 } else { count as f64 / k as f64 };
        Ok(Self { masked, ratio, seed })
    }
}

/// Number of patches hidden for a given ratio.
pub fn masked_count(ratio: f64, num_patches: usize) -> usize {
    (ratio * num_patches as f64).round() as usize
}

pub fn sample_tube_mask(grid: &PatchGrid, ratio: f64, seed: u32) -> Result<TubeMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = grid.num_patches();
    let m = masked_count(ratio, k);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let mut order: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let j = rng.random_range(i..k);
        order.swap(i, j);
    }
    let mut flags = vec![false; k];
    for &i in &order[..m] {
        flags[i] = true;
    }
    Ok(TubeMask {
        masked: Array2::from_shape_vec((grid.grid_h, grid.grid_w), flags).expect("grid shape"),
        ratio,
        seed,
    })
}

/// Zero-fills hidden patches in every channel and appends an indicator
/// channel (1 on hidden pixels), giving `C + 1` channels.
pub fn apply_mask(input: &Array3<f32>, mask: &TubeMask, grid: &PatchGrid) -> Result<Array3<f32>> {
    let (c, h, w) = input.dim();
    if (h, w) != (grid.height, grid.width) {
        return Err(shape_mismatch(
            format!("{}x{} image", grid.height, grid.width),
            format!("{h}x{w}"),
        ));
    }
    let pixels = mask.pixel_mask(grid)?;
    let mut out = Array3::<f32>::zeros((c + 1, h, w));
    for ch in 0..c {
        ndarray::Zip::from(out.index_axis_mut(ndarray::Axis(0), ch))
            .and(input.index_axis(ndarray::Axis(0), ch))
            .and(&pixels)
            .for_each(|o, &v, &m| *o = if m { 0.0 } else { v });
    }
    ndarray::Zip::from(out.index_axis_mut(ndarray::Axis(0), c))
        .and(&pixels)
        .for_each(|o, &m| *o = if m { 1.0 } else { 0.0 });
    Ok(out)
}

/// Standardizes each patch with its own mean and variance:
/// `(x - mean) / sqrt(var + epsilon)`. Padding never enters the statistics.
pub fn normalize_patches(target: &Array2<f64>, grid: &PatchGrid, epsilon: f64) -> Result<Array2<f64>> {
    if target.dim() != (grid.height, grid.width) {
        return Err(shape_mismatch(
            format!("{}x{} image", grid.height, grid.width),
            format!("{:?}", target.dim()),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut out = Array2::<f64>::zeros(target.dim());
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let (rows, cols) = grid.patch_bounds(gy, gx);
            let view = target.slice(ndarray::s![rows.clone(), cols.clone()]);
            let n = view.len() as f64;
            let mean = view.sum() / n;
            let var = view.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let scale = 1.0 / (var + epsilon).sqrt();
            ndarray::Zip::from(out.slice_mut(ndarray::s![rows, cols]))
                .and(&view)
                .for_each(|o, &v| *o = (v - mean) * scale);
        }
    }
    Ok(out)
}
