use crate::error::{Error, Result};

/// Smallest admissible extent along any axis.
pub const MIN_EXTENT: usize = 4;

/// A regular 2D or 3D voxel grid.
///
/// Values on the grid are stored axis-major: axis 0 varies slowest and the
/// last axis is contiguous in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    ndim: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Grid {
    /// Unit-spaced grid.
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::Dimension(format!(
                "grids have 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::Dimension(format!(
                "{} spacings given for {} axes",
                spacing.len(),
                dims.len()
            )));
        }
        if let Some(&d) = dims.iter().find(|&&d| d < MIN_EXTENT) {
            return Err(Error::Input(format!(
                "grid extent {d} is below the minimum of {MIN_EXTENT}"
            )));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Input(format!(
                "grid spacing must be positive, got {spacing:?}"
            )));
        }
        let mut g = Grid {
            ndim: dims.len(),
            dims: [1; 3],
            spacing: [1.0; 3],
        };
        g.dims[..dims.len()].copy_from_slice(dims);
        g.spacing[..dims.len()].copy_from_slice(spacing);
        Ok(g)
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.ndim]
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Memory stride of each axis.
    pub fn strides(&self) -> [usize; 3] {
        let mut s = [0; 3];
        let mut acc = 1;
        for a in (0..self.ndim).rev() {
            s[a] = acc;
            acc *= self.dims[a];
        }
        s
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let s = self.strides();
        idx.iter().zip(&s).map(|(i, s)| i * s).sum()
    }

    /// Integer coordinates of a flat index.
    pub fn unravel(&self, mut flat: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for a in (0..self.ndim).rev() {
            out[a] = flat % self.dims[a];
            flat /= self.dims[a];
        }
        out
    }

    /// Physical position of voxel `flat` (index times spacing).
    pub fn position(&self, flat: usize) -> [f64; 3] {
        let idx = self.unravel(flat);
        let mut p = [0.0; 3];
        for a in 0..self.ndim {
            p[a] = idx[a] as f64 * self.spacing[a];
        }
        p
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            Err(Error::Dimension(format!(
                "{what}: grid {:?} does not match {:?}",
                other.dims(),
                self.dims()
            )))
        } else {
            Ok(())
        }
    }
}
