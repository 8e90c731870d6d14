use super::Grid;
use crate::error::{Error, Result};

/// One real value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "scalar field needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value at voxel {i}")));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        ScalarField {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        let n = grid.len();
        ScalarField {
            grid,
            values: vec![c; n],
        }
    }

    /// Evaluates `f` at every voxel's physical position.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let nd = grid.ndim();
        let values = (0..grid.len())
            .map(|i| f(&grid.position(i)[..nd]))
            .collect();
        ScalarField { grid, values }
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Sum of squared differences against `other`.
    pub fn ssd(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One real vector (one entry per spatial axis) per voxel.
///
/// Components are stored one after another: component `c` occupies
/// `data[c * n..(c + 1) * n]` with `n` the voxel count.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        let want = grid.ndim() * grid.len();
        if data.len() != want {
            return Err(Error::Dimension(format!(
                "vector field needs {want} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value at entry {i}")));
        }
        Ok(VectorField { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.ndim() * grid.len();
        VectorField {
            grid,
            data: vec![0.0; n],
        }
    }

    pub fn constant(grid: Grid, c: &[f64]) -> Self {
        let mut v = Self::zeros(grid);
        for (a, &ca) in c.iter().enumerate().take(v.grid.ndim()) {
            v.component_mut(a).fill(ca);
        }
        v
    }

    /// Evaluates `f` at each voxel's physical position; `f` writes the vector into its second argument.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let nd = grid.ndim();
        let n = grid.len();
        let mut data = vec![0.0; nd * n];
        let mut buf = [0.0; 3];
        for i in 0..n {
            f(&grid.position(i)[..nd], &mut buf[..nd]);
            for a in 0..nd {
                data[a * n + i] = buf[a];
            }
        }
        VectorField { grid, data }
    }

    pub(crate) fn from_raw(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len() * grid.ndim(), data.len());
        VectorField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ndim(&self) -> usize {
        self.grid.ndim()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[axis * n..(axis + 1) * n]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[axis * n..(axis + 1) * n]
    }

    /// Vector at voxel `i`.
    pub fn at(&self, i: usize) -> [f64; 3] {
        let n = self.grid.len();
        let mut out = [0.0; 3];
        for (a, o) in out.iter_mut().enumerate().take(self.ndim()) {
            *o = self.data[a * n + i];
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &VectorField) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// Plain Euclidean dot product of the raw arrays (no volume weighting).
    pub fn dot(&self, other: &VectorField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Grid inner product, weighted by voxel volume.
    pub fn inner(&self, other: &VectorField) -> f64 {
        self.dot(other) * self.grid.voxel_volume()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Largest per-voxel Euclidean magnitude.
    pub fn max_magnitude(&self) -> f64 {
        let n = self.grid.len();
        let nd = self.ndim();
        (0..n)
            .map(|i| {
                (0..nd)
                    .map(|a| self.data[a * n + i].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Per-voxel `ndim x ndim` matrix field, as produced by [`super::jacobian`].
///
/// Entry `(i, j)` occupies block `i * ndim + j` of the storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    grid: Grid,
    data: Vec<f64>,
}

impl MatrixField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len() * grid.ndim() * grid.ndim();
        MatrixField {
            grid,
            data: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let n = self.grid.len();
        let b = i * self.grid.ndim() + j;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let n = self.grid.len();
        let b = i * self.grid.ndim() + j;
        &mut self.data[b * n..(b + 1) * n]
    }

    /// The matrix at voxel `v`, row-major in a 3x3 buffer.
    pub fn at(&self, v: usize) -> [[f64; 3]; 3] {
        let nd = self.grid.ndim();
        let n = self.grid.len();
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate().take(nd) {
            for (j, e) in row.iter_mut().enumerate().take(nd) {
                *e = self.data[(i * nd + j) * n + v];
            }
        }
        m
    }
}
