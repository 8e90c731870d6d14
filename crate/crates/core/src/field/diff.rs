//! Finite-difference derivatives: central in the interior, one-sided at the
//! first and last voxel of each axis. The `periodic_*` variants wrap
//! around instead, matching the periodic metric operators.

use super::{Grid, MatrixField, ScalarField, VectorField};

/// Central difference along `axis` with periodic wrap.
fn diff_axis_periodic(grid: &Grid, src: &[f64], axis: usize, out: &mut [f64]) {
    let d = grid.dims()[axis];
    let s = grid.strides()[axis];
    let inv_2h = 0.5 / grid.spacing()[axis];
    for (flat, o) in out.iter_mut().enumerate() {
        let c = (flat / s) % d;
        let up = if c == d - 1 { flat + s - d * s } else { flat + s };
        let down = if c == 0 { flat + (d - 1) * s } else { flat - s };
        *o = (src[up] - src[down]) * inv_2h;
    }
}

/// Transpose of [`diff_axis_periodic`], accumulated into `acc`; the
/// operator is skew-symmetric, so this is the negated derivative.
fn diff_axis_periodic_adjoint(grid: &Grid, cot: &[f64], axis: usize, acc: &mut [f64]) {
    let mut tmp = vec![0.0; cot.len()];
    diff_axis_periodic(grid, cot, axis, &mut tmp);
    for (a, t) in acc.iter_mut().zip(&tmp) {
        *a -= t;
    }
}

/// Writes the derivative of `src` along `axis` into `out`.
pub(crate) fn diff_axis(grid: &Grid, src: &[f64], axis: usize, out: &mut [f64]) {
    let d = grid.dims()[axis];
    let s = grid.strides()[axis];
    let h = grid.spacing()[axis];
    let inv_h = 1.0 / h;
    let inv_2h = 0.5 / h;
    for (flat, o) in out.iter_mut().enumerate() {
        let c = (flat / s) % d;
        *o = if c == 0 {
            (src[flat + s] - src[flat]) * inv_h
        } else if c == d - 1 {
            (src[flat] - src[flat - s]) * inv_h
        } else {
            (src[flat + s] - src[flat - s]) * inv_2h
        };
    }
}

/// Per-voxel Jacobian; entry `(i, j)` is `d v_i / d x_j`.
pub fn jacobian(v: &VectorField) -> MatrixField {
    let grid = v.grid().clone();
    let nd = grid.ndim();
    let mut out = MatrixField::zeros(grid.clone());
    for i in 0..nd {
        for j in 0..nd {
            diff_axis(&grid, v.component(i), j, out.entry_mut(i, j));
        }
    }
    out
}

/// [`jacobian`] with periodic central differences on every voxel.
pub fn periodic_jacobian(v: &VectorField) -> MatrixField {
    let grid = v.grid().clone();
    let nd = grid.ndim();
    let mut out = MatrixField::zeros(grid.clone());
    for i in 0..nd {
        for j in 0..nd {
            diff_axis_periodic(&grid, v.component(i), j, out.entry_mut(i, j));
        }
    }
    out
}

/// Transpose of [`periodic_jacobian`], accumulating.
pub(crate) fn periodic_jacobian_adjoint_acc(cot: &MatrixField, acc: &mut VectorField) {
    let grid = cot.grid().clone();
    let nd = grid.ndim();
    for i in 0..nd {
        for j in 0..nd {
            diff_axis_periodic_adjoint(&grid, cot.entry(i, j), j, acc.component_mut(i));
        }
    }
}

/// Trace of the Jacobian.
pub fn divergence(v: &VectorField) -> ScalarField {
    let grid = v.grid().clone();
    let n = grid.len();
    let mut total = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for a in 0..grid.ndim() {
        diff_axis(&grid, v.component(a), a, &mut tmp);
        for (t, d) in total.iter_mut().zip(&tmp) {
            *t += d;
        }
    }
    ScalarField::from_raw(grid, total)
}

/// Spatial gradient of a scalar field.
pub fn gradient(f: &ScalarField) -> VectorField {
    let grid = f.grid().clone();
    let mut out = VectorField::zeros(grid.clone());
    for a in 0..grid.ndim() {
        diff_axis(&grid, f.values(), a, out.component_mut(a));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_has_zero_jacobian() {
        let g = Grid::new(&[6, 7]).unwrap();
        let v = VectorField::constant(g, &[1.5, -2.0]);
        let j = jacobian(&v);
        for i in 0..2 {
            for k in 0..2 {
                assert!(j.entry(i, k).iter().all(|&e| e == 0.0));
            }
        }
        assert!(divergence(&v).values().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn linear_field_jacobian_is_exact() {
        let g = Grid::with_spacing(&[6, 5, 7], &[1.0, 0.5, 2.0]).unwrap();
        let a = [[0.3, -1.2, 0.7], [2.0, 0.1, -0.4], [0.0, 0.9, 1.1]];
        let v = VectorField::from_fn(g.clone(), |p, out| {
            for i in 0..3 {
                out[i] = (0..3).map(|j| a[i][j] * p[j]).sum();
            }
        });
        let jac = jacobian(&v);
        for flat in 0..g.len() {
            let m = jac.at(flat);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m[i][j] - a[i][j]).abs() < 1e-12);
                }
            }
        }
        let div = divergence(&v);
        assert!(div.values().iter().all(|d| (d - 1.5).abs() < 1e-12));
    }

    #[test]
    fn identity_position_field_divergence_is_ndim() {
        let g = Grid::new(&[5, 5, 5]).unwrap();
        let v = VectorField::from_fn(g, |p, out| out.copy_from_slice(p));
        assert!(divergence(&v).values().iter().all(|d| (d - 3.0).abs() < 1e-12));
    }

    #[test]
    fn periodic_difference_wraps() {
        let g = Grid::new(&[4, 4]).unwrap();
        let v = VectorField::from_fn(g.clone(), |p, out| out[0] = p[1]);
        let j = periodic_jacobian(&v);
        // Columns 0 and 3 see the jump between 3 and 0 across the seam.
        let row: Vec<f64> = (0..4).map(|c| j.entry(0, 1)[g.flat_index(&[1, c])]).collect();
        assert_eq!(row, vec![-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn adjoint_matches_transpose() {
        let g = Grid::with_spacing(&[5, 6], &[1.0, 0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = g.len();
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for axis in 0..2 {
            let mut du = vec![0.0; n];
            diff_axis_periodic(&g, &u, axis, &mut du);
            let mut dtw = vec![0.0; n];
            diff_axis_periodic_adjoint(&g, &w, axis, &mut dtw);
            let lhs: f64 = du.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(&dtw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
