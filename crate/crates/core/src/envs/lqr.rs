//! Random time-invariant linear-quadratic problems with a closed-form solution.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::BlockFactor;
use crate::problem::{ConstraintKind, Dimensions, Jacobians, ProblemDefinition, SecondDerivatives, Trajectory};

/// How `θ` enters the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LqrParameterization {
    /// `θ = [q (n), r (m), a]`: `Q = Q₀ + diag(q)`, `R = R₀ + diag(r)`, `A = A₀ + a E`.
    #[default]
    DiagonalAndDynamics,
    /// `θ = [s]`: `Q = s Q₀`, `R = s R₀`.
    UniformCostScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalCost {
    /// `½ x_Tᵀ Q x_T`.
    #[default]
    Quadratic,
    /// No terminal cost; the last Hessian block is zero.
    Zero,
}

/// `min Σ ½ xᵀQx + ½ uᵀRu` subject to `x_{t+1} = A x_t + B u_t`.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    dims: Dimensions,
    x_init: DVector<f64>,
    pub a0: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q0: DMatrix<f64>,
    pub r0: DMatrix<f64>,
    pub parameterization: LqrParameterization,
    pub terminal: TerminalCost,
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn with_spectral_norm(m: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let norm = m.clone().singular_values().max();
    if norm > 0.0 {
        m * (target / norm)
    } else {
        m
    }
}

/// A seeded random instance with the default parameterization.
pub fn lqr_problem(n: usize, m: usize, horizon: usize, seed: u64) -> Result<LqrProblem> {
    LqrProblem::random(n, m, horizon, seed, LqrParameterization::default(), TerminalCost::default())
}

impl LqrProblem {
    pub fn random(
        n: usize,
        m: usize,
        horizon: usize,
        seed: u64,
        parameterization: LqrParameterization,
        terminal: TerminalCost,
    ) -> Result<Self> {
        if n == 0 || m == 0 || horizon == 0 {
            return Err(Error::Invalid(format!("LQR dimensions must be positive, got n={n}, m={m}, T={horizon}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = with_spectral_norm(gaussian(&mut rng, n, n), 0.9);
        let e = with_spectral_norm(gaussian(&mut rng, n, n), 0.05);
        let b = gaussian(&mut rng, n, m);
        let x = gaussian(&mut rng, n, n);
        let q0 = &x * x.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
        let y = gaussian(&mut rng, m, m);
        let r0 = &y * y.transpose() / m as f64 + DMatrix::identity(m, m) * 0.5;
        let x_init = gaussian(&mut rng, n, 1).column(0).into_owned();
        let d = match parameterization {
            LqrParameterization::DiagonalAndDynamics => n + m + 1,
            LqrParameterization::UniformCostScale => 1,
        };
        Ok(Self {
            dims: Dimensions::new(n, m, d, horizon)?,
            x_init,
            a0,
            e,
            b,
            q0,
            r0,
            parameterization,
            terminal,
        })
    }

    /// A parameter vector at which every cost block is positive definite.
    pub fn nominal_theta(&self) -> DVector<f64> {
        let (n, m) = (self.dims.n, self.dims.m);
        match self.parameterization {
            LqrParameterization::DiagonalAndDynamics => {
                let mut th = DVector::from_element(n + m + 1, 1.0);
                th[n + m] = 0.5;
                th
            }
            LqrParameterization::UniformCostScale => DVector::from_element(1, 1.0),
        }
    }

    pub fn with_initial_state(mut self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.dims.n {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                index: None,
                expected: self.dims.n,
                found: x0.len(),
            });
        }
        self.x_init = x0;
        Ok(self)
    }

    pub fn q(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dims.n;
        match self.parameterization {
            LqrParameterization::DiagonalAndDynamics => {
                &self.q0 + DMatrix::from_diagonal(&theta.rows(0, n).into_owned())
            }
            LqrParameterization::UniformCostScale => &self.q0 * theta[0],
        }
    }

    pub fn r(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = (self.dims.n, self.dims.m);
        match self.parameterization {
            LqrParameterization::DiagonalAndDynamics => {
                &self.r0 + DMatrix::from_diagonal(&theta.rows(n, m).into_owned())
            }
            LqrParameterization::UniformCostScale => &self.r0 * theta[0],
        }
    }

    pub fn a(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        match self.parameterization {
            LqrParameterization::DiagonalAndDynamics => &self.a0 + &self.e * theta[self.dims.n + self.dims.m],
            LqrParameterization::UniformCostScale => self.a0.clone(),
        }
    }

    fn q_terminal(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        match self.terminal {
            TerminalCost::Quadratic => self.q(theta),
            TerminalCost::Zero => DMatrix::zeros(self.dims.n, self.dims.n),
        }
    }

    /// Optimal trajectory by the discrete Riccati recursion.
    pub fn closed_form(&self, theta: &DVector<f64>) -> Result<Trajectory> {
        let (n, m, horizon) = (self.dims.n, self.dims.m, self.dims.horizon);
        let (a, b, q, r) = (self.a(theta), &self.b, self.q(theta), self.r(theta));
        let mut p = self.q_terminal(theta);
        let mut gains = Vec::with_capacity(horizon);
        for t in (0..horizon).rev() {
            let pb = &p * b;
            let fac = BlockFactor::new(&(&r + b.tr_mul(&pb)))
                .map_err(|rcond| Error::SingularRecursion { t, rcond })?;
            let k = -fac.solve(&pb.tr_mul(&a));
            p = &q + a.tr_mul(&(&p * &a)) + a.tr_mul(&(&pb * &k));
            p = (&p + p.transpose()) * 0.5;
            gains.push(k);
        }
        gains.reverse();
        let mut traj = Trajectory::zeros(n, m, horizon);
        let mut x = self.x_init.clone();
        for (t, k) in gains.iter().enumerate() {
            let u = k * &x;
            let mut z = DVector::zeros(n + m);
            z.rows_mut(0, n).copy_from(&x);
            z.rows_mut(n, m).copy_from(&u);
            traj.set_block(t, &z);
            x = &a * &x + b * &u;
        }
        traj.set_block(horizon, &x);
        Ok(traj)
    }
}

impl ProblemDefinition for LqrProblem {
    fn dims(&self) -> &Dimensions {
        &self.dims
    }

    fn x_init(&self) -> &DVector<f64> {
        &self.x_init
    }

    fn cost(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let n = self.dims.n;
        let x = z.rows(0, n);
        if t >= self.dims.horizon {
            return 0.5 * x.dot(&(self.q_terminal(theta) * x));
        }
        let u = z.rows(n, self.dims.m);
        0.5 * x.dot(&(self.q(theta) * x)) + 0.5 * u.dot(&(self.r(theta) * u))
    }

    fn dynamics(&self, _t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let n = self.dims.n;
        self.a(theta) * z.rows(0, n) + &self.b * z.rows(n, self.dims.m)
    }

    fn cost_gradient(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.cost_hessian(t, z, theta)?.zz * z)
    }

    fn cost_hessian(&self, t: usize, z: &DVector<f64>, theta: &DVector<f64>) -> Option<SecondDerivatives> {
        let (n, m) = (self.dims.n, self.dims.m);
        let terminal = t >= self.dims.horizon;
        let mut zz = DMatrix::zeros(z.len(), z.len());
        let mut z_theta = DMatrix::zeros(z.len(), theta.len());
        if terminal {
            zz.copy_from(&self.q_terminal(theta));
        } else {
            zz.view_mut((0, 0), (n, n)).copy_from(&self.q(theta));
            zz.view_mut((n, n), (m, m)).copy_from(&self.r(theta));
        }
        if terminal && self.terminal == TerminalCost::Zero {
            return Some(SecondDerivatives { zz, z_theta });
        }
        match self.parameterization {
            LqrParameterization::DiagonalAndDynamics => {
                for i in 0..n {
                    z_theta[(i, i)] = z[i];
                }
                if !terminal {
                    for j in 0..m {
                        z_theta[(n + j, n + j)] = z[n + j];
                    }
                }
            }
            LqrParameterization::UniformCostScale => {
                let unscaled = &zz * z / theta[0];
                z_theta.column_mut(0).copy_from(&unscaled);
            }
        }
        Some(SecondDerivatives { zz, z_theta })
    }

    fn jacobian(
        &self,
        kind: ConstraintKind,
        _t: usize,
        z: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Option<Jacobians> {
        let (n, m, d) = (self.dims.n, self.dims.m, theta.len());
        if kind != ConstraintKind::Dynamics {
            return Some(Jacobians {
                wrt_z: DMatrix::zeros(0, z.len()),
                wrt_theta: DMatrix::zeros(0, d),
            });
        }
        let mut wrt_z = DMatrix::zeros(n, n + m);
        wrt_z.columns_mut(0, n).copy_from(&self.a(theta));
        wrt_z.columns_mut(n, m).copy_from(&self.b);
        let mut wrt_theta = DMatrix::zeros(n, d);
        if self.parameterization == LqrParameterization::DiagonalAndDynamics {
            wrt_theta.column_mut(n + m).copy_from(&(&self.e * z.rows(0, n)));
        }
        Some(Jacobians { wrt_z, wrt_theta })
    }

    fn weighted_hessian(
        &self,
        kind: ConstraintKind,
        _t: usize,
        z: &DVector<f64>,
        theta: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> Option<SecondDerivatives> {
        let n = self.dims.n;
        let zz = DMatrix::zeros(z.len(), z.len());
        let mut z_theta = DMatrix::zeros(z.len(), theta.len());
        if kind == ConstraintKind::Dynamics && self.parameterization == LqrParameterization::DiagonalAndDynamics {
            let col = self.e.tr_mul(weights);
            z_theta.view_mut((0, n + self.dims.m), (n, 1)).copy_from(&col);
        }
        Some(SecondDerivatives { zz, z_theta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::assemble_kkt_blocks;
    use crate::forward::{solve_coc, SolverOptions};
    use crate::idoc::{trajectory_derivative, BackwardOptions};
    use crate::problem::{ActiveSet, Evaluator};

    #[test]
    fn forward_solve_matches_closed_form() {
        let p = lqr_problem(3, 2, 12, 5).unwrap();
        let th = p.nominal_theta();
        let sol = solve_coc(&p, &th, None, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        let exact = p.closed_form(&th).unwrap();
        assert!((sol.trajectory.data - exact.data).amax() <= 1e-8);
    }

    #[test]
    fn uniform_cost_scale_leaves_trajectory_fixed() {
        let p = LqrProblem::random(3, 1, 8, 2, LqrParameterization::UniformCostScale, TerminalCost::Quadratic).unwrap();
        let th = DVector::from_element(1, 2.5);
        let sol = solve_coc(&p, &th, None, &SolverOptions::default()).unwrap();
        let active = ActiveSet::empty(p.dims());
        let blocks = assemble_kkt_blocks(&p, &sol.trajectory, &th, &active, &sol.lambda).unwrap();
        let dxi = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
        assert!(dxi.amax() <= 1e-10);
    }

    #[test]
    fn derivative_matches_resolve_differences() {
        let p = lqr_problem(3, 2, 10, 8).unwrap();
        let th = p.nominal_theta();
        let sol = solve_coc(&p, &th, None, &SolverOptions::default()).unwrap();
        let active = ActiveSet::empty(p.dims());
        let blocks = assemble_kkt_blocks(&p, &sol.trajectory, &th, &active, &sol.lambda).unwrap();
        let dxi = trajectory_derivative(&blocks, &BackwardOptions::default()).unwrap();
        let h = 1e-5;
        for j in 0..th.len() {
            let mut tp = th.clone();
            tp[j] += h;
            let mut tm = th.clone();
            tm[j] -= h;
            let fd = (p.closed_form(&tp).unwrap().data - p.closed_form(&tm).unwrap().data) / (2.0 * h);
            assert!((dxi.column(j) - fd).amax() <= 1e-6, "column {j}");
        }
    }

    #[test]
    fn analytic_derivatives_agree_with_differences() {
        struct Opaque(LqrProblem);
        impl ProblemDefinition for Opaque {
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
        }
        for param in [LqrParameterization::DiagonalAndDynamics, LqrParameterization::UniformCostScale] {
            let p = LqrProblem::random(3, 2, 4, 1, param, TerminalCost::Quadratic).unwrap();
            let th = p.nominal_theta();
            let opaque = Opaque(p.clone());
            let (exact, fd) = (Evaluator::new(&p), Evaluator::new(&opaque));
            let z = DVector::from_vec(vec![0.3, -0.2, 0.9, 0.4, -1.1]);
            let w = DVector::from_vec(vec![0.5, -1.0, 2.0]);
            let a = exact.cost_hessian(0, &z, &th).unwrap();
            let b = fd.cost_hessian(0, &z, &th).unwrap();
            assert!((a.zz - b.zz).amax() < 1e-5 && (a.z_theta - b.z_theta).amax() < 1e-5);
            let a = exact.jacobian(ConstraintKind::Dynamics, 0, &z, &th).unwrap();
            let b = fd.jacobian(ConstraintKind::Dynamics, 0, &z, &th).unwrap();
            assert!((a.wrt_z - b.wrt_z).amax() < 1e-6 && (a.wrt_theta - b.wrt_theta).amax() < 1e-6);
            let a = exact.weighted_hessian(ConstraintKind::Dynamics, 0, &z, &th, &w).unwrap();
            let b = fd.weighted_hessian(ConstraintKind::Dynamics, 0, &z, &th, &w).unwrap();
            assert!((a.zz - b.zz).amax() < 1e-5 && (a.z_theta - b.z_theta).amax() < 1e-5);
        }
    }

    #[test]
    fn zero_terminal_cost_has_singular_last_block() {
        let p = LqrProblem::random(2, 1, 5, 3, LqrParameterization::DiagonalAndDynamics, TerminalCost::Zero).unwrap();
        let th = p.nominal_theta();
        let z = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(Evaluator::new(&p).cost_hessian(5, &z, &th).unwrap().zz.amax(), 0.0);
    }
}
