//! Cartpole swing-up with a point-mass pendulum, Forward-Euler discretized.
//!
//! State `x = [y, q, ẏ, q̇]` (cart position, pole angle from hanging, and
//! their rates), control `u` (horizontal force). Parameters are laid out as
//! `θ = [m_c, m_p, ℓ, g, w_y, w_q, w_ẏ, w_q̇, w_u, y_max, u_max]`, the last two
//! only when the box constraints are enabled.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::jet::{Jet, Number};
use crate::error::{Error, Result};
use crate::problem::{ConstraintKind, Dimensions, Jacobians, ProblemDefinition, SecondDerivatives};

pub const M_C: usize = 0;
pub const M_P: usize = 1;
pub const ELL: usize = 2;
pub const GRAVITY: usize = 3;
pub const W: usize = 4;
pub const W_U: usize = 8;
pub const Y_MAX: usize = 9;
pub const U_MAX: usize = 10;

pub const D_UNCONSTRAINED: usize = 9;
pub const D_CONSTRAINED: usize = 11;

/// Goal state: cart centred, pole upright.
pub const GOAL: [f64; 4] = [0.0, -PI, 0.0, 0.0];

/// Denominator of the cart acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// `m_c + m_c sin²q`
    AsPrinted,
    /// `m_c + m_p sin²q`
    Standard,
}

impl Default for Denominator {
    fn default() -> Self {
        if cfg!(feature = "textbook-cartpole") {
            Denominator::Standard
        } else {
            Denominator::AsPrinted
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    pub m_c: f64,
    pub m_p: f64,
    pub ell: f64,
    pub gravity: f64,
    /// `[w_y, w_q, w_ẏ, w_q̇]`
    pub w: [f64; 4],
    pub w_u: f64,
    pub y_max: f64,
    pub u_max: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            m_c: 1.0,
            m_p: 0.5,
            ell: 1.0,
            gravity: 10.0,
            w: [0.5, 2.0, 0.2, 0.2],
            w_u: 0.1,
            y_max: 1.0,
            u_max: 6.0,
        }
    }
}

impl CartpoleParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("m_c", self.m_c),
            ("m_p", self.m_p),
            ("ell", self.ell),
            ("gravity", self.gravity),
            ("w_y", self.w[0]),
            ("w_q", self.w[1]),
            ("w_ydot", self.w[2]),
            ("w_qdot", self.w[3]),
            ("w_u", self.w_u),
            ("y_max", self.y_max),
            ("u_max", self.u_max),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("cartpole parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn to_theta(&self, with_constraints: bool) -> DVector<f64> {
        let mut v = vec![self.m_c, self.m_p, self.ell, self.gravity];
        v.extend_from_slice(&self.w);
        v.push(self.w_u);
        if with_constraints {
            v.extend([self.y_max, self.u_max]);
        }
        DVector::from_vec(v)
    }

    /// Reads `θ`; without constraint entries the box limits keep their defaults.
    pub fn from_theta(theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != D_UNCONSTRAINED && theta.len() != D_CONSTRAINED {
            return Err(Error::DimensionMismatch {
                what: "cartpole parameter vector",
                index: None,
                expected: D_CONSTRAINED,
                found: theta.len(),
            });
        }
        let defaults = Self::default();
        let p = Self {
            m_c: theta[M_C],
            m_p: theta[M_P],
            ell: theta[ELL],
            gravity: theta[GRAVITY],
            w: [theta[W], theta[W + 1], theta[W + 2], theta[W + 3]],
            w_u: theta[W_U],
            y_max: if theta.len() > Y_MAX { theta[Y_MAX] } else { defaults.y_max },
            u_max: if theta.len() > U_MAX { theta[U_MAX] } else { defaults.u_max },
        };
        p.validate()?;
        Ok(p)
    }
}

/// Cart and pole accelerations `(ÿ, q̈)`.
pub fn accelerations<S: Number>(q: S, qd: S, u: S, m_c: S, m_p: S, ell: S, g: S, den: Denominator) -> (S, S) {
    let (s, c) = (q.sin(), q.cos());
    let s2 = s * s;
    let den_y = match den {
        Denominator::AsPrinted => m_c + m_c * s2,
        Denominator::Standard => m_c + m_p * s2,
    };
    let ydd = (u + m_p * s * (ell * qd * qd + g * c)) / den_y;
    let qdd = (-(u * c) - m_p * ell * qd * qd * c * s - (m_c + m_p) * g * s) / (ell * (m_c + m_p * s2));
    (ydd, qdd)
}

/// Kinetic plus potential energy, zero potential at the pivot height.
pub fn energy(x: &DVector<f64>, params: &CartpoleParams) -> f64 {
    let (qd, yd, q) = (x[3], x[2], x[1]);
    let (mc, mp, l, g) = (params.m_c, params.m_p, params.ell, params.gravity);
    0.5 * (mc + mp) * yd * yd + mp * l * yd * qd * q.cos() + 0.5 * mp * l * l * qd * qd - mp * g * l * q.cos()
}

/// Jet seeds: q, q̇, u, m_c, m_p, ℓ, g.
type J = Jet<7>;
const Z_OF_SEED: [usize; 3] = [1, 3, 4];

#[derive(Debug, Clone)]
pub struct Cartpole {
    dims: Dimensions,
    x_init: DVector<f64>,
    pub dt: f64,
    pub constrained: bool,
    pub denominator: Denominator,
}

/// Builds the problem and returns it with `θ` for `params`.
pub fn cartpole_problem(
    params: &CartpoleParams,
    horizon: usize,
    dt: f64,
    with_constraints: bool,
) -> Result<(Cartpole, DVector<f64>)> {
    params.validate()?;
    Ok((Cartpole::new(horizon, dt, with_constraints)?, params.to_theta(with_constraints)))
}

impl Cartpole {
    pub fn new(horizon: usize, dt: f64, with_constraints: bool) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
        }
        let d = if with_constraints { D_CONSTRAINED } else { D_UNCONSTRAINED };
        let dims = if with_constraints {
            let mut ineq = vec![4; horizon + 1];
            ineq[horizon] = 2;
            Dimensions::with_constraints(4, 1, d, horizon, ineq, vec![0; horizon + 1])?
        } else {
            Dimensions::new(4, 1, d, horizon)?
        };
        Ok(Self {
            dims,
            x_init: DVector::zeros(4),
            dt,
            constrained: with_constraints,
            denominator: Denominator::default(),
        })
    }

    pub fn with_initial_state(mut self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != 4 {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                index: None,
                expected: 4,
                found: x0.len(),
            });
        }
        self.x_init = x0;
        Ok(self)
    }

    pub fn with_denominator(mut self, den: Denominator) -> Self {
        self.denominator = den;
        self
    }

    fn jets(&self, z: &DVector<f64>, theta: &DVector<f64>) -> (J, J) {
        let seed = |i: usize, v: f64| J::var(i, v);
        accelerations(
            seed(0, z[1]),
            seed(1, z[3]),
            seed(2, z[4]),
            seed(3, theta[M_C]),
            seed(4, theta[M_P]),
            seed(5, theta[ELL]),
            seed(6, theta[GRAVITY]),
            self.denominator,
        )
    }

    fn is_terminal(&self, t: usize) -> bool {
        t >= self.dims.horizon
    }
}

impl ProblemDefinition for Cartpole {
    fn dims(&self) -> &Dimensions {
        &self.dims
    }

    fn x_init(&self) -> &DVector<f64> {
        &self.x_init
    }

    fn cost(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let mut c = 0.0;
        for i in 0..4 {
            let e = z[i] - GOAL[i];
            c += theta[W + i] * e * e;
        }
        if !self.is_terminal(t) {
            c += theta[W_U] * z[4] * z[4];
        }
        c
    }

    fn dynamics(&self, _t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (ydd, qdd) = accelerations(
            z[1],
            z[3],
            z[4],
            theta[M_C],
            theta[M_P],
            theta[ELL],
            theta[GRAVITY],
            self.denominator,
        );
        let dt = self.dt;
        DVector::from_vec(vec![z[0] + dt * z[2], z[1] + dt * z[3], z[2] + dt * ydd, z[3] + dt * qdd])
    }

    fn inequality(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        if !self.constrained {
            return DVector::zeros(0);
        }
        let (y, ym) = (z[0], theta[Y_MAX]);
        if self.is_terminal(t) {
            DVector::from_vec(vec![y - ym, -y - ym])
        } else {
            let (u, um) = (z[4], theta[U_MAX]);
            DVector::from_vec(vec![y - ym, -y - ym, u - um, -u - um])
        }
    }

    fn cost_gradient(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let mut g = DVector::zeros(z.len());
        for i in 0..4 {
            g[i] = 2.0 * theta[W + i] * (z[i] - GOAL[i]);
        }
        if !self.is_terminal(t) {
            g[4] = 2.0 * theta[W_U] * z[4];
        }
        Some(g)
    }

    fn cost_hessian(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> Option<SecondDerivatives> {
        let mut zz = DMatrix::zeros(z.len(), z.len());
        let mut z_theta = DMatrix::zeros(z.len(), theta.len());
        for i in 0..4 {
            zz[(i, i)] = 2.0 * theta[W + i];
            z_theta[(i, W + i)] = 2.0 * (z[i] - GOAL[i]);
        }
        if !self.is_terminal(t) {
            zz[(4, 4)] = 2.0 * theta[W_U];
            z_theta[(4, W_U)] = 2.0 * z[4];
        }
        Some(SecondDerivatives { zz, z_theta })
    }

    fn jacobian(
        &self,
        kind: ConstraintKind,
        t: usize,
        z: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Option<Jacobians> {
        let d = theta.len();
        match kind {
            ConstraintKind::Dynamics => {
                let dt = self.dt;
                let (ydd, qdd) = self.jets(z, theta);
                let mut wrt_z = DMatrix::zeros(4, 5);
                for i in 0..4 {
                    wrt_z[(i, i)] = 1.0;
                }
                wrt_z[(0, 2)] = dt;
                wrt_z[(1, 3)] = dt;
                let mut wrt_theta = DMatrix::zeros(4, d);
                for (row, acc) in [(2, &ydd), (3, &qdd)] {
                    for (s, &zi) in Z_OF_SEED.iter().enumerate() {
                        wrt_z[(row, zi)] += dt * acc.g[s];
                    }
                    for k in 0..4 {
                        wrt_theta[(row, k)] = dt * acc.g[3 + k];
                    }
                }
                Some(Jacobians { wrt_z, wrt_theta })
            }
            ConstraintKind::Inequality => {
                if !self.constrained {
                    return Some(Jacobians {
                        wrt_z: DMatrix::zeros(0, z.len()),
                        wrt_theta: DMatrix::zeros(0, d),
                    });
                }
                let rows = if self.is_terminal(t) { 2 } else { 4 };
                let mut wrt_z = DMatrix::zeros(rows, z.len());
                let mut wrt_theta = DMatrix::zeros(rows, d);
                wrt_z[(0, 0)] = 1.0;
                wrt_z[(1, 0)] = -1.0;
                wrt_theta[(0, Y_MAX)] = -1.0;
                wrt_theta[(1, Y_MAX)] = -1.0;
                if rows == 4 {
                    wrt_z[(2, 4)] = 1.0;
                    wrt_z[(3, 4)] = -1.0;
                    wrt_theta[(2, U_MAX)] = -1.0;
                    wrt_theta[(3, U_MAX)] = -1.0;
                }
                Some(Jacobians { wrt_z, wrt_theta })
            }
            ConstraintKind::Equality => Some(Jacobians {
                wrt_z: DMatrix::zeros(0, z.len()),
                wrt_theta: DMatrix::zeros(0, d),
            }),
        }
    }

    fn weighted_hessian(
        &self,
        kind: ConstraintKind,
        _t: usize,
        z: &DVector<f64>,
        theta: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> Option<SecondDerivatives> {
        let mut zz = DMatrix::zeros(z.len(), z.len());
        let mut z_theta = DMatrix::zeros(z.len(), theta.len());
        if kind == ConstraintKind::Dynamics {
            let (ydd, qdd) = self.jets(z, theta);
            let (a, b) = (self.dt * weights[2], self.dt * weights[3]);
            for (s, &zi) in Z_OF_SEED.iter().enumerate() {
                for (r, &zk) in Z_OF_SEED.iter().enumerate() {
                    zz[(zi, zk)] = a * ydd.h[s][r] + b * qdd.h[s][r];
                }
                for k in 0..4 {
                    z_theta[(zi, k)] = a * ydd.h[s][3 + k] + b * qdd.h[s][3 + k];
                }
            }
        }
        Some(SecondDerivatives { zz, z_theta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::rollout;
    use crate::problem::Evaluator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_dimensions() {
        let (p, th) = cartpole_problem(&CartpoleParams::default(), 30, 0.1, false).unwrap();
        let dims = p.dims();
        assert_eq!((dims.n, dims.m, dims.d, dims.horizon), (4, 1, 9, 30));
        assert_eq!(th.len(), 9);
        let (p, th) = cartpole_problem(&CartpoleParams::default(), 35, 0.1, true).unwrap();
        assert_eq!((p.dims().d, p.dims().horizon, th.len()), (11, 35, 11));
        assert_eq!(p.dt, 0.1);
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let bad = CartpoleParams {
            ell: 0.0,
            ..CartpoleParams::default()
        };
        assert!(matches!(cartpole_problem(&bad, 30, 0.1, false), Err(Error::Invalid(_))));
        assert!(Cartpole::new(30, 0.0, false).is_err());
    }

    #[test]
    fn hanging_rest_is_fixed_point() {
        let (p, th) = cartpole_problem(&CartpoleParams::default(), 30, 0.1, false).unwrap();
        let traj = rollout(&p, &th, &vec![DVector::zeros(1); 30]).unwrap();
        assert_eq!(traj.data.amax(), 0.0);
    }

    fn analytic_and_fd(p: &Cartpole, th: &DVector<f64>, z: &DVector<f64>, w: &DVector<f64>) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
        let exact = Evaluator::new(p);
        let opaque = Opaque(p);
        let fd = Evaluator::new(&opaque);
        let mut out = Vec::new();
        for kind in [ConstraintKind::Dynamics, ConstraintKind::Inequality] {
            let a = exact.jacobian(kind, 0, z, th).unwrap();
            let b = fd.jacobian(kind, 0, z, th).unwrap();
            out.push((a.wrt_z, b.wrt_z));
            out.push((a.wrt_theta, b.wrt_theta));
        }
        let a = exact.weighted_hessian(ConstraintKind::Dynamics, 0, z, th, w).unwrap();
        let b = fd.weighted_hessian(ConstraintKind::Dynamics, 0, z, th, w).unwrap();
        out.push((a.zz, b.zz));
        out.push((a.z_theta, b.z_theta));
        out
    }

    /// Hides the analytic derivatives so the evaluator falls back to differences.
    struct Opaque<'a>(&'a Cartpole);

    impl ProblemDefinition for Opaque<'_> {
        fn dims(&self) -> &Dimensions {
            self.0.dims()
        }
        fn x_init(&self) -> &DVector<f64> {
            self.0.x_init()
        }
        fn cost(&self, t: usize, z: &DVector<f64>, th: &DVector<f64>) -> f64 {
            self.0.cost(t, z, th)
        }
        fn dynamics(&self, t: usize, z: &DVector<f64>, th: &DVector<f64>) -> DVector<f64> {
            self.0.dynamics(t, z, th)
        }
        fn inequality(&self, t: usize, z: &DVector<f64>, th: &DVector<f64>) -> DVector<f64> {
            self.0.inequality(t, z, th)
        }
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for den in [Denominator::AsPrinted, Denominator::Standard] {
            let (p, th) = cartpole_problem(&CartpoleParams::default(), 30, 0.1, true).unwrap();
            let p = p.with_denominator(den);
            for _ in 0..20 {
                let z = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
                let w = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
                for (exact, fd) in analytic_and_fd(&p, &th, &z, &w) {
                    let scale = 1.0 + exact.amax();
                    assert!((&exact - &fd).amax() <= 1e-5 * scale, "{exact} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn cost_derivatives_match_differences() {
        let (p, th) = cartpole_problem(&CartpoleParams::default(), 30, 0.1, true).unwrap();
        let z = DVector::from_vec(vec![0.3, -1.0, 0.2, 0.5, 1.5]);
        let exact = Evaluator::new(&p);
        let opaque = Opaque(&p);
        let fd = Evaluator::new(&opaque);
        for t in [0, 30] {
            let a = exact.cost_hessian(t, &z, &th).unwrap();
            let b = fd.cost_hessian(t, &z, &th).unwrap();
            assert!((a.zz - b.zz).amax() < 1e-5);
            assert!((a.z_theta - b.z_theta).amax() < 1e-5);
            let ga = exact.cost_gradient(t, &z, &th).unwrap();
            let gb = fd.cost_gradient(t, &z, &th).unwrap();
            assert!((ga - gb).amax() < 1e-6);
        }
    }

    #[test]
    fn energy_drift_is_small_for_fine_steps() {
        let params = CartpoleParams::default();
        let (p, th) = cartpole_problem(&params, 30, 0.01, false).unwrap();
        let p = p.with_initial_state(DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        let traj = rollout(&p, &th, &vec![DVector::zeros(1); 30]).unwrap();
        let e0 = energy(&traj.state(0), &params);
        for t in 1..=30 {
            let e = energy(&traj.state(t), &params);
            assert!((e - e0).abs() <= 0.1 * e0.abs(), "t={t}: {e} vs {e0}");
        }
    }
}
