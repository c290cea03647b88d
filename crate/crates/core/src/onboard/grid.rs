use crate::error::{Error, Result};
use crate::geom::{backproject, CameraIntrinsics, Vec3};
use crate::raster::{DepthImage, Mask};

/// Square image of `image_size` pixels tiled by `patch_size` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGridSpec {
    pub image_size: u32,
    pub patch_size: u32,
}

impl Default for PatchGridSpec {
    fn default() -> Self {
        Self { image_size: 420, patch_size: 14 }
    }
}

impl PatchGridSpec {
    pub fn new(image_size: u32, patch_size: u32) -> Result<Self> {
        if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
            return Err(Error::InvalidInput(format!("patch size {patch_size} must divide image size {image_size}")));
        }
        Ok(Self { image_size, patch_size })
    }

    /// Cells per side.
    pub fn cells(&self) -> u32 {
        self.image_size / self.patch_size
    }

    /// Pixel `(x, y)` at the centre of cell `(row, col)`.
    pub fn center_pixel(&self, row: u32, col: u32) -> (u32, u32) {
        let half = self.patch_size / 2;
        (col * self.patch_size + half, row * self.patch_size + half)
    }

    /// Intrinsics for rendering at the grid resolution: the dataset focal
    /// lengths with the principal point at the image centre.
    pub fn adapt_intrinsics(&self, k: &CameraIntrinsics) -> CameraIntrinsics {
        let c = self.image_size as f64 / 2.0;
        CameraIntrinsics { fx: k.fx, fy: k.fy, cx: c, cy: c, width: self.image_size, height: self.image_size }
    }
}

/// Cells whose centre pixel lies on the mask, in row-major order.
pub fn valid_patch_indices(mask: &Mask, grid: &PatchGridSpec) -> Vec<(u32, u32)> {
    let n = grid.cells();
    let mut out = Vec::new();
    for row in 0..n {
        for col in 0..n {
            let (x, y) = grid.center_pixel(row, col);
            if x < mask.width && y < mask.height && mask.get(x, y) {
                out.push((row, col));
            }
        }
    }
    out
}

/// Back-projects each cell centre with its rendered depth.
pub fn lift_patch_centers(
    depth: &DepthImage,
    indices: &[(u32, u32)],
    grid: &PatchGridSpec,
    k: &CameraIntrinsics,
) -> Result<Vec<Vec3>> {
    indices
        .iter()
        .map(|&(row, col)| {
            let (x, y) = grid.center_pixel(row, col);
            let z = depth.get(x, y);
            if !(z > 0.0) {
                return Err(Error::Consistency(format!("no depth at valid patch ({row}, {col})")));
            }
            backproject(x as f64, y as f64, z, k)
        })
        .collect()
}
