//! Regular-grid fields and the numerical operators shared by every other module.

mod diff;
mod fields;
mod grid;
mod interp;
mod spectral;

pub use diff::{divergence, gradient, jacobian, periodic_jacobian};
pub use fields::{MatrixField, ScalarField, VectorField};
pub use grid::{Grid, MIN_EXTENT};
pub use interp::{interpolate, interpolate_vector, sample_at};
pub use spectral::{laplacian_eigenvalue, SpectralOperator};

pub(crate) use diff::periodic_jacobian_adjoint_acc;
pub(crate) use interp::{sample_with_grad, Stencil};
