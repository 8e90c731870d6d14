//! Multilinear interpolation with clamp-to-border sampling.
//!
//! Positions are physical coordinates (voxel index times spacing). A
//! coordinate outside the grid is clamped to the boundary voxel, and the
//! derivative with respect to that coordinate is zero there.

use super::{Grid, ScalarField, VectorField};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Axis {
    lo: usize,
    t: f64,
    /// d t / d position, zero when clamped.
    dt: f64,
}

#[inline]
fn axis_weights(grid: &Grid, a: usize, p: f64) -> Axis {
    let d = grid.dims()[a];
    let h = grid.spacing()[a];
    let u = p / h;
    let last = (d - 1) as f64;
    if u < 0.0 {
        Axis { lo: 0, t: 0.0, dt: 0.0 }
    } else if u > last {
        Axis { lo: d - 2, t: 1.0, dt: 0.0 }
    } else {
        let lo = (u.floor() as usize).min(d - 2);
        Axis {
            lo,
            t: u - lo as f64,
            dt: 1.0 / h,
        }
    }
}

/// Corner offsets and weights of the interpolation stencil around a point.
pub(crate) struct Stencil {
    count: usize,
    index: [usize; 8],
    weight: [f64; 8],
    /// d weight / d position, per axis (filled only on request).
    dweight: [[f64; 3]; 8],
    nd: usize,
}

impl Stencil {
    #[inline]
    pub(crate) fn new(grid: &Grid, p: &[f64; 3], with_grad: bool) -> Stencil {
        let nd = grid.ndim();
        let strides = grid.strides();
        let mut ax = [Axis { lo: 0, t: 0.0, dt: 0.0 }; 3];
        let mut base = 0;
        for a in 0..nd {
            ax[a] = axis_weights(grid, a, p[a]);
            base += ax[a].lo * strides[a];
        }
        let count = 1 << nd;
        let mut st = Stencil {
            count,
            index: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
            nd,
        };
        for corner in 0..count {
            let mut idx = base;
            let mut w = 1.0;
            let mut f = [0.0; 3];
            let mut dfac = [0.0; 3];
            for a in 0..nd {
                if (corner >> a) & 1 == 1 {
                    idx += strides[a];
                    f[a] = ax[a].t;
                    dfac[a] = ax[a].dt;
                } else {
                    f[a] = 1.0 - ax[a].t;
                    dfac[a] = -ax[a].dt;
                }
                w *= f[a];
            }
            if with_grad {
                for a in 0..nd {
                    let mut dw = dfac[a];
                    for b in 0..nd {
                        if b != a {
                            dw *= f[b];
                        }
                    }
                    st.dweight[corner][a] = dw;
                }
            }
            st.index[corner] = idx;
            st.weight[corner] = w;
        }
        st
    }

    #[inline]
    pub(crate) fn sample(&self, values: &[f64]) -> f64 {
        let mut v = 0.0;
        for c in 0..self.count {
            v += self.weight[c] * values[self.index[c]];
        }
        v
    }

    /// Value and positional gradient; the stencil must carry derivatives.
    #[inline]
    pub(crate) fn sample_with_grad(&self, values: &[f64]) -> (f64, [f64; 3]) {
        let mut val = 0.0;
        let mut g = [0.0; 3];
        for c in 0..self.count {
            let f = values[self.index[c]];
            val += self.weight[c] * f;
            for a in 0..self.nd {
                g[a] += self.dweight[c][a] * f;
            }
        }
        (val, g)
    }

    /// Adjoint of [`Stencil::sample`] with respect to the field values.
    #[inline]
    pub(crate) fn scatter(&self, acc: &mut [f64], w: f64) {
        for c in 0..self.count {
            acc[self.index[c]] += self.weight[c] * w;
        }
    }
}

#[inline]
pub(crate) fn sample(grid: &Grid, values: &[f64], p: &[f64; 3]) -> f64 {
    Stencil::new(grid, p, false).sample(values)
}

/// Value and positional gradient at `p`.
#[inline]
pub(crate) fn sample_with_grad(grid: &Grid, values: &[f64], p: &[f64; 3]) -> (f64, [f64; 3]) {
    Stencil::new(grid, p, true).sample_with_grad(values)
}

fn check_positions(positions: &VectorField, nd: usize) -> Result<()> {
    if positions.ndim() != nd {
        return Err(Error::Dimension(format!(
            "{}-d positions for a {nd}-d field",
            positions.ndim()
        )));
    }
    if !positions.is_finite() {
        return Err(Error::Input("non-finite interpolation coordinate".into()));
    }
    Ok(())
}

/// Samples `f` at every position stored in `positions` (one point per voxel of its grid).
pub fn interpolate(f: &ScalarField, positions: &VectorField) -> Result<ScalarField> {
    check_positions(positions, f.grid().ndim())?;
    let n = positions.grid().len();
    let out = (0..n)
        .map(|i| sample(f.grid(), f.values(), &positions.at(i)))
        .collect();
    Ok(ScalarField::from_raw(positions.grid().clone(), out))
}

/// Component-wise [`interpolate`].
pub fn interpolate_vector(v: &VectorField, positions: &VectorField) -> Result<VectorField> {
    check_positions(positions, v.ndim())?;
    let n = positions.grid().len();
    let nd = v.ndim();
    let mut out = vec![0.0; nd * n];
    for i in 0..n {
        let st = Stencil::new(v.grid(), &positions.at(i), false);
        for a in 0..nd {
            out[a * n + i] = st.sample(v.component(a));
        }
    }
    Ok(VectorField::from_raw(positions.grid().clone(), out))
}

/// Samples `f` at a single physical point.
pub fn sample_at(f: &ScalarField, point: &[f64]) -> Result<f64> {
    let nd = f.grid().ndim();
    if point.len() != nd {
        return Err(Error::Dimension(format!("{}-d point for a {nd}-d field", point.len())));
    }
    if point.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("non-finite interpolation coordinate".into()));
    }
    let mut p = [0.0; 3];
    p[..nd].copy_from_slice(point);
    Ok(sample(f.grid(), f.values(), &p))
}
