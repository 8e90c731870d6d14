//! The metric operator `L = -alpha * Laplacian + Id` and its inverse `K`,
//! both diagonal in the discrete Fourier basis.
//!
//! The Laplacian is the standard second-order stencil with periodic
//! boundaries, so its eigenvalue at frequency `f` is
//! `sum_axis (2 - 2 cos(2 pi f_axis / dim_axis)) / spacing_axis^2`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{Grid, ScalarField, VectorField};
use crate::error::{Error, Result};

#[derive(Clone)]
struct AxisPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Fourier-diagonal pair `(L, K = L^-1)` bound to one grid.
#[derive(Clone)]
pub struct SpectralOperator {
    alpha: f64,
    grid: Grid,
    l_symbol: Vec<f64>,
    k_symbol: Vec<f64>,
    plans: Vec<AxisPlan>,
}

impl fmt::Debug for SpectralOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralOperator")
            .field("alpha", &self.alpha)
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

/// Eigenvalue of the periodic negative discrete Laplacian at a frequency.
pub fn laplacian_eigenvalue(grid: &Grid, freq: &[usize]) -> f64 {
    grid.dims()
        .iter()
        .zip(grid.spacing())
        .zip(freq)
        .map(|((&d, &h), &f)| (2.0 - 2.0 * (2.0 * PI * f as f64 / d as f64).cos()) / (h * h))
        .sum()
}

impl SpectralOperator {
    pub fn new(grid: &Grid, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
        }
        let n = grid.len();
        let mut l_symbol = Vec::with_capacity(n);
        for flat in 0..n {
            let f = grid.unravel(flat);
            l_symbol.push(1.0 + alpha * laplacian_eigenvalue(grid, &f[..grid.ndim()]));
        }
        let k_symbol = l_symbol.iter().map(|l| 1.0 / l).collect();
        let mut planner = FftPlanner::new();
        let plans = grid
            .dims()
            .iter()
            .map(|&d| AxisPlan {
                forward: planner.plan_fft_forward(d),
                inverse: planner.plan_fft_inverse(d),
            })
            .collect();
        Ok(SpectralOperator {
            alpha,
            grid: grid.clone(),
            l_symbol,
            k_symbol,
            plans,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Multipliers of `L`, one per frequency in grid layout.
    pub fn l_symbol(&self) -> &[f64] {
        &self.l_symbol
    }

    pub fn k_symbol(&self) -> &[f64] {
        &self.k_symbol
    }

    pub fn apply_l(&self, v: &VectorField) -> Result<VectorField> {
        self.grid.check_same(v.grid(), "apply_L")?;
        let mut out = v.clone();
        self.apply_in_place(&self.l_symbol, out.data_mut());
        Ok(out)
    }

    pub fn apply_k(&self, m: &VectorField) -> Result<VectorField> {
        self.grid.check_same(m.grid(), "apply_K")?;
        let mut out = m.clone();
        self.apply_in_place(&self.k_symbol, out.data_mut());
        Ok(out)
    }

    pub fn apply_k_scalar(&self, f: &ScalarField) -> Result<ScalarField> {
        self.grid.check_same(f.grid(), "apply_K")?;
        let mut out = f.clone();
        self.apply_in_place(&self.k_symbol, out.values_mut());
        Ok(out)
    }

    /// `L` on raw component-major storage whose grid is already known to match.
    pub(crate) fn l_in_place(&self, data: &mut [f64]) {
        self.apply_in_place(&self.l_symbol, data);
    }

    pub(crate) fn k_in_place(&self, data: &mut [f64]) {
        self.apply_in_place(&self.k_symbol, data);
    }

    /// Draws `v ~ N(0, K)` independently per component: `K^{1/2}` applied to
    /// unit white noise.
    pub fn sample_gaussian<R: rand::Rng>(&self, rng: &mut R) -> VectorField {
        let nd = self.grid.ndim();
        let mut data: Vec<f64> = (0..nd * self.grid.len())
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let sqrt_k: Vec<f64> = self.k_symbol.iter().map(|k| k.sqrt()).collect();
        self.apply_in_place(&sqrt_k, &mut data);
        VectorField::from_raw(self.grid.clone(), data)
    }

    /// `(L v, v)` with voxel-volume weighting.
    pub fn energy(&self, v: &VectorField) -> Result<f64> {
        Ok(self.apply_l(v)?.inner(v))
    }

    /// Applies a real even symbol to every length-`n` block of `data`.
    ///
    /// Two real blocks share one complex transform (real and imaginary part);
    /// an even real symbol maps real fields to real fields, so the parts
    /// separate exactly on the way back.
    fn apply_in_place(&self, symbol: &[f64], data: &mut [f64]) {
        let n = self.grid.len();
        debug_assert_eq!(data.len() % n, 0);
        let blocks = data.len() / n;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = Vec::new();
        let scale = 1.0 / n as f64;
        let mut b = 0;
        while b < blocks {
            let paired = b + 1 < blocks;
            {
                let re = &data[b * n..(b + 1) * n];
                if paired {
                    let im = &data[(b + 1) * n..(b + 2) * n];
                    for ((c, &r), &i) in buf.iter_mut().zip(re).zip(im) {
                        *c = Complex64::new(r, i);
                    }
                } else {
                    for (c, &r) in buf.iter_mut().zip(re) {
                        *c = Complex64::new(r, 0.0);
                    }
                }
            }
            self.transform(&mut buf, &mut scratch, true);
            for (c, &s) in buf.iter_mut().zip(symbol) {
                *c *= s * scale;
            }
            self.transform(&mut buf, &mut scratch, false);
            for (d, c) in data[b * n..(b + 1) * n].iter_mut().zip(&buf) {
                *d = c.re;
            }
            if paired {
                for (d, c) in data[(b + 1) * n..(b + 2) * n].iter_mut().zip(&buf) {
                    *d = c.im;
                }
            }
            b += if paired { 2 } else { 1 };
        }
    }

    /// Unnormalized N-d DFT, one axis at a time.
    fn transform(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>, forward: bool) {
        let strides = self.grid.strides();
        let dims = self.grid.dims();
        let n = buf.len();
        let mut lines: Vec<Complex64> = Vec::new();
        for (a, plan) in self.plans.iter().enumerate() {
            let fft = if forward { &plan.forward } else { &plan.inverse };
            let need = fft.get_inplace_scratch_len();
            if scratch.len() < need {
                scratch.resize(need, Complex64::new(0.0, 0.0));
            }
            let d = dims[a];
            let s = strides[a];
            if s == 1 {
                fft.process_with_scratch(buf, &mut scratch[..need]);
                continue;
            }
            // Each block of d*s entries is a d x s matrix whose columns are
            // the lines along this axis; transpose, transform, transpose back.
            lines.resize(d * s, Complex64::new(0.0, 0.0));
            for block in buf.chunks_mut(d * s).take(n / (d * s)) {
                for k in 0..d {
                    for i in 0..s {
                        lines[i * d + k] = block[k * s + i];
                    }
                }
                fft.process_with_scratch(&mut lines, &mut scratch[..need]);
                for k in 0..d {
                    for i in 0..s {
                        block[k * s + i] = lines[i * d + k];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frequency_symbol_is_one() {
        let g = Grid::new(&[8, 6]).unwrap();
        let op = SpectralOperator::new(&g, 3.0).unwrap();
        assert_eq!(op.l_symbol()[0], 1.0);
        for (l, k) in op.l_symbol().iter().zip(op.k_symbol()) {
            assert!(*l >= 1.0);
            assert!((l * k - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let g = Grid::new(&[8, 8, 8]).unwrap();
        let op = SpectralOperator::new(&g, 3.0).unwrap();
        let c = VectorField::constant(g, &[0.5, -1.25, 2.0]);
        let l = op.apply_l(&c).unwrap();
        let k = op.apply_k(&c).unwrap();
        for ((a, b), e) in l.data().iter().zip(k.data()).zip(c.data()) {
            assert!((a - e).abs() < 1e-12);
            assert!((b - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_grid() {
        let op = SpectralOperator::new(&Grid::new(&[8, 8]).unwrap(), 1.0).unwrap();
        let v = VectorField::zeros(Grid::new(&[8, 9]).unwrap());
        assert!(matches!(op.apply_l(&v), Err(Error::Dimension(_))));
        assert!(SpectralOperator::new(&Grid::new(&[8, 8]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn single_axis_sinusoid_scales_by_symbol() {
        let g = Grid::new(&[16, 8]).unwrap();
        let alpha = 3.0;
        let op = SpectralOperator::new(&g, alpha).unwrap();
        for f in 0..8 {
            let w = 2.0 * PI * f as f64 / 16.0;
            let v = VectorField::from_fn(g.clone(), |p, out| {
                out[0] = (w * p[0]).sin();
                out[1] = (w * p[0]).cos();
            });
            let lv = op.apply_l(&v).unwrap();
            let factor = 1.0 + alpha * (2.0 - 2.0 * w.cos());
            for (a, b) in lv.data().iter().zip(v.data()) {
                assert!((a - factor * b).abs() < 1e-12);
            }
        }
    }
}
