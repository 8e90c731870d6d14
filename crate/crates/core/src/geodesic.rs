//! Geodesic shooting: EPDiff integration from an initial velocity, the
//! deformation flow it generates, image warping, and the Jacobian
//! determinant diagnostic.
//!
//! Both the velocity equation and the flow use forward Euler with
//! `dt = 1 / num_steps`. The velocity trajectory is integrated first and
//! the flow is then integrated on the stored trajectory.

use crate::error::{Error, Result};
use crate::field::{
    self, jacobian, periodic_jacobian, periodic_jacobian_adjoint_acc, Grid, MatrixField, ScalarField, SpectralOperator, Stencil,
    VectorField,
};

/// Time discretization of the shooting equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingConfig {
    pub num_steps: usize,
    pub alpha: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            num_steps: 10,
            alpha: 3.0,
        }
    }
}

impl ShootingConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.num_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn operator(&self, grid: &Grid) -> Result<SpectralOperator> {
        self.validate()?;
        SpectralOperator::new(grid, self.alpha)
    }
}

/// Velocities `v[0..=num_steps]` along a geodesic, `v[0]` being the initial velocity.
#[derive(Debug, Clone)]
pub struct VelocityTrajectory {
    velocities: Vec<VectorField>,
}

impl VelocityTrajectory {
    pub fn new(velocities: Vec<VectorField>) -> Result<Self> {
        let Some(first) = velocities.first() else {
            return Err(Error::Input("empty trajectory".into()));
        };
        if velocities.len() < 2 {
            return Err(Error::Input("a trajectory needs at least one step".into()));
        }
        for v in &velocities[1..] {
            first.grid().check_same(v.grid(), "trajectory")?;
        }
        Ok(VelocityTrajectory { velocities })
    }

    pub fn velocities(&self) -> &[VectorField] {
        &self.velocities
    }

    pub fn num_steps(&self) -> usize {
        self.velocities.len() - 1
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.num_steps() as f64
    }

    pub fn grid(&self) -> &Grid {
        self.velocities[0].grid()
    }

    /// Largest displacement any voxel undergoes in a single flow step.
    pub fn max_step_displacement(&self) -> f64 {
        let dt = self.dt();
        self.velocities[..self.num_steps()]
            .iter()
            .map(|v| dt * v.max_magnitude())
            .fold(0.0, f64::max)
    }

    /// `(L v(t), v(t))` at every time point.
    pub fn hamiltonian(&self, op: &SpectralOperator) -> Result<Vec<f64>> {
        self.velocities.iter().map(|v| op.energy(v)).collect()
    }
}

/// A transformation stored as the absolute physical coordinate `phi(x)` of every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationMap {
    coords: VectorField,
}

impl DeformationMap {
    pub fn identity(grid: &Grid) -> Self {
        DeformationMap {
            coords: VectorField::from_fn(grid.clone(), |p, out| out.copy_from_slice(p)),
        }
    }

    pub fn from_coords(coords: VectorField) -> Self {
        DeformationMap { coords }
    }

    pub fn coords(&self) -> &VectorField {
        &self.coords
    }

    pub fn into_coords(self) -> VectorField {
        self.coords
    }

    pub fn grid(&self) -> &Grid {
        self.coords.grid()
    }

    /// `phi(x) - x`.
    pub fn displacement(&self) -> VectorField {
        let mut d = self.coords.clone();
        d.axpy(-1.0, Self::identity(self.grid()).coords());
        d
    }
}

/// Intermediate fields of one EPDiff right-hand-side evaluation.
struct RhsParts {
    m: VectorField,
    jv: MatrixField,
    jm: MatrixField,
    div: Vec<f64>,
}

fn rhs_parts(v: &VectorField, op: &SpectralOperator) -> RhsParts {
    let mut m = v.clone();
    op.l_in_place(m.data_mut());
    let jv = periodic_jacobian(v);
    let jm = periodic_jacobian(&m);
    let nd = v.ndim();
    let n = v.grid().len();
    let mut div = vec![0.0; n];
    for a in 0..nd {
        for (d, e) in div.iter_mut().zip(jv.entry(a, a)) {
            *d += e;
        }
    }
    RhsParts { m, jv, jm, div }
}

/// `-K[(Dv)^T m + (Dm) v + m div v]` with `m = L v`.
pub fn epdiff_rhs(v: &VectorField, op: &SpectralOperator) -> Result<VectorField> {
    op.grid().check_same(v.grid(), "epdiff_rhs")?;
    Ok(epdiff_rhs_unchecked(v, op))
}

fn epdiff_rhs_unchecked(v: &VectorField, op: &SpectralOperator) -> VectorField {
    let nd = v.ndim();
    let n = v.grid().len();
    let p = rhs_parts(v, op);
    let mut w = vec![0.0; nd * n];
    for i in 0..nd {
        let wi = &mut w[i * n..(i + 1) * n];
        let mi = p.m.component(i);
        for j in 0..nd {
            let dvj_i = p.jv.entry(j, i);
            let mj = p.m.component(j);
            let dmi_j = p.jm.entry(i, j);
            let vj = v.component(j);
            for x in 0..n {
                wi[x] += dvj_i[x] * mj[x] + dmi_j[x] * vj[x];
            }
        }
        for x in 0..n {
            wi[x] += mi[x] * p.div[x];
        }
    }
    op.k_in_place(&mut w);
    w.iter_mut().for_each(|e| *e = -*e);
    VectorField::from_raw(v.grid().clone(), w)
}

/// Vector-Jacobian product of [`epdiff_rhs`] at `v` with cotangent `cot`.
pub(crate) fn epdiff_rhs_vjp(v: &VectorField, op: &SpectralOperator, cot: &VectorField) -> VectorField {
    let grid = v.grid().clone();
    let nd = v.ndim();
    let n = grid.len();
    let p = rhs_parts(v, op);
    let mut gw = cot.clone();
    op.k_in_place(gw.data_mut());
    gw.scale(-1.0);

    let mut v_bar = VectorField::zeros(grid.clone());
    let mut m_bar = VectorField::zeros(grid.clone());
    let mut jv_bar = MatrixField::zeros(grid.clone());
    let mut jm_bar = MatrixField::zeros(grid.clone());
    let mut div_bar = vec![0.0; n];

    for i in 0..nd {
        let gi = gw.component(i);
        let mi = p.m.component(i);
        for x in 0..n {
            div_bar[x] += gi[x] * mi[x];
        }
    }
    for j in 0..nd {
        let mj = p.m.component(j).to_vec();
        let vj = v.component(j).to_vec();
        for i in 0..nd {
            let gi = gw.component(i);
            // (Dv)^T m: w_i += dv_j/dx_i * m_j
            {
                let dvj_i = p.jv.entry(j, i);
                let mb = m_bar.component_mut(j);
                for x in 0..n {
                    mb[x] += gi[x] * dvj_i[x];
                }
            }
            {
                let jb = jv_bar.entry_mut(j, i);
                for x in 0..n {
                    jb[x] += gi[x] * mj[x];
                }
            }
            // (Dm) v: w_i += dm_i/dx_j * v_j
            {
                let dmi_j = p.jm.entry(i, j);
                let vb = v_bar.component_mut(j);
                for x in 0..n {
                    vb[x] += gi[x] * dmi_j[x];
                }
            }
            {
                let jb = jm_bar.entry_mut(i, j);
                for x in 0..n {
                    jb[x] += gi[x] * vj[x];
                }
            }
        }
        // m div v
        let gj = gw.component(j);
        let mb = m_bar.component_mut(j);
        for x in 0..n {
            mb[x] += gj[x] * p.div[x];
        }
        let jb = jv_bar.entry_mut(j, j);
        for x in 0..n {
            jb[x] += div_bar[x];
        }
    }
    periodic_jacobian_adjoint_acc(&jv_bar, &mut v_bar);
    periodic_jacobian_adjoint_acc(&jm_bar, &mut m_bar);
    op.l_in_place(m_bar.data_mut());
    v_bar.axpy(1.0, &m_bar);
    v_bar
}

/// Integrates EPDiff from `v0` with forward Euler.
pub fn shoot(v0: &VectorField, op: &SpectralOperator, num_steps: usize) -> Result<VelocityTrajectory> {
    op.grid().check_same(v0.grid(), "shoot")?;
    if num_steps == 0 {
        return Err(Error::Config("num_steps must be at least 1".into()));
    }
    if !v0.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: "initial velocity is not finite".into(),
        });
    }
    let dt = 1.0 / num_steps as f64;
    let mut velocities = Vec::with_capacity(num_steps + 1);
    velocities.push(v0.clone());
    for k in 0..num_steps {
        let cur = &velocities[k];
        let mut next = cur.clone();
        next.axpy(dt, &epdiff_rhs_unchecked(cur, op));
        if !next.is_finite() {
            return Err(Error::Divergence {
                step: k + 1,
                what: "velocity became non-finite".into(),
            });
        }
        velocities.push(next);
    }
    Ok(VelocityTrajectory { velocities })
}

/// Flow maps `phi[0] = id, ..., phi[num_steps]` along a trajectory.
pub fn integrate_flow_path(traj: &VelocityTrajectory) -> Vec<DeformationMap> {
    let grid = traj.grid();
    let n = grid.len();
    let nd = grid.ndim();
    let dt = traj.dt();
    let mut path = Vec::with_capacity(traj.num_steps() + 1);
    path.push(DeformationMap::identity(grid));
    for v in &traj.velocities[..traj.num_steps()] {
        let prev = path.last().expect("path starts with the identity").coords();
        let mut next = prev.clone();
        for x in 0..n {
            let st = Stencil::new(grid, &prev.at(x), false);
            for a in 0..nd {
                next.data_mut()[a * n + x] += dt * st.sample(v.component(a));
            }
        }
        path.push(DeformationMap { coords: next });
    }
    path
}

/// The deformation at `t = 1`.
pub fn integrate_flow(traj: &VelocityTrajectory) -> Result<DeformationMap> {
    let map = integrate_flow_path(traj).pop().expect("non-empty path");
    if !map.coords.is_finite() {
        return Err(Error::Divergence {
            step: traj.num_steps(),
            what: "deformation became non-finite".into(),
        });
    }
    Ok(map)
}

/// `I o phi`: samples `image` at `phi(x)` for every voxel `x`.
pub fn warp_image(image: &ScalarField, phi: &DeformationMap) -> Result<ScalarField> {
    field::interpolate(image, phi.coords())
}

/// Per-voxel determinant of the finite-difference Jacobian of `phi`.
pub fn det_jacobian(phi: &DeformationMap) -> ScalarField {
    let jac = jacobian(phi.coords());
    let grid = phi.grid().clone();
    let n = grid.len();
    let dets = (0..n)
        .map(|x| {
            let m = jac.at(x);
            if grid.ndim() == 2 {
                m[0][0] * m[1][1] - m[0][1] * m[1][0]
            } else {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        })
        .collect();
    ScalarField::from_raw(grid, dets)
}

/// Shoot from `v0`, integrate the flow and warp `template`, keeping every
/// intermediate needed to back-propagate through the chain.
#[derive(Debug, Clone)]
pub struct GeodesicWarp {
    trajectory: VelocityTrajectory,
    path: Vec<DeformationMap>,
    warped: ScalarField,
}

impl GeodesicWarp {
    pub fn forward(
        template: &ScalarField,
        v0: &VectorField,
        op: &SpectralOperator,
        num_steps: usize,
    ) -> Result<Self> {
        template.grid().check_same(v0.grid(), "geodesic warp")?;
        let trajectory = shoot(v0, op, num_steps)?;
        let path = integrate_flow_path(&trajectory);
        let last = path.last().expect("non-empty path");
        if !last.coords.is_finite() {
            return Err(Error::Divergence {
                step: num_steps,
                what: "deformation became non-finite".into(),
            });
        }
        let warped = warp_image(template, last)?;
        Ok(GeodesicWarp {
            trajectory,
            path,
            warped,
        })
    }

    pub fn warped(&self) -> &ScalarField {
        &self.warped
    }

    pub fn trajectory(&self) -> &VelocityTrajectory {
        &self.trajectory
    }

    pub fn map(&self) -> &DeformationMap {
        self.path.last().expect("non-empty path")
    }

    /// Gradient with respect to `v0` of `<cot_warped, warped>`.
    pub fn backward(
        &self,
        template: &ScalarField,
        op: &SpectralOperator,
        cot_warped: &[f64],
    ) -> VectorField {
        let grid = template.grid().clone();
        let n = grid.len();
        let nd = grid.ndim();
        let steps = self.trajectory.num_steps();
        let dt = self.trajectory.dt();
        let vs = &self.trajectory.velocities;

        // Warp: d/dphi of I(phi(x)).
        let mut phi_bar = vec![0.0; nd * n];
        {
            let coords = self.map().coords();
            for x in 0..n {
                let g = cot_warped[x];
                if g == 0.0 {
                    continue;
                }
                let (_, grad) = field::sample_with_grad(&grid, template.values(), &coords.at(x));
                for a in 0..nd {
                    phi_bar[a * n + x] = g * grad[a];
                }
            }
        }

        // Flow, in reverse: phi[k+1] = phi[k] + dt * v[k](phi[k]).
        let mut flow_bar: Vec<VectorField> = vec![VectorField::zeros(grid.clone()); steps];
        for k in (0..steps).rev() {
            let coords = self.path[k].coords();
            let v = &vs[k];
            let vb = flow_bar[k].data_mut();
            let mut next_bar = phi_bar.clone();
            for x in 0..n {
                if (0..nd).all(|c| phi_bar[c * n + x] == 0.0) {
                    continue;
                }
                let st = Stencil::new(&grid, &coords.at(x), k > 0);
                for c in 0..nd {
                    let g = phi_bar[c * n + x];
                    if g == 0.0 {
                        continue;
                    }
                    st.scatter(&mut vb[c * n..(c + 1) * n], dt * g);
                    if k > 0 {
                        let (_, grad) = st.sample_with_grad(v.component(c));
                        for a in 0..nd {
                            next_bar[a * n + x] += dt * g * grad[a];
                        }
                    }
                }
            }
            phi_bar = next_bar;
        }

        // Shooting, in reverse: v[k+1] = v[k] + dt * rhs(v[k]).
        let mut acc = VectorField::zeros(grid.clone());
        for k in (0..steps).rev() {
            let mut cur = flow_bar[k].clone();
            if acc.data().iter().any(|&e| e != 0.0) {
                cur.axpy(1.0, &acc);
                cur.axpy(dt, &epdiff_rhs_vjp(&vs[k], op, &acc));
            }
            acc = cur;
        }
        acc
    }
}
