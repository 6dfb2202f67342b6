//! C interface to the backward pass and the bundled environments.
//!
//! Objects are opaque heap handles released with the matching `*_free`.
//! Every fallible call returns an [`IdocStatus`]; on failure the message is
//! kept per thread and read back with [`idoc_last_error_message`]. Matrices
//! cross the boundary as dense row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};

use idoc::blocks::{assemble_kkt_blocks, BlockBandedA, BlockDiagonal, KktBlocks};
use idoc::envs::cartpole::{Cartpole, CartpoleParams};
use idoc::envs::lqr::{LqrParameterization, LqrProblem, TerminalCost};
use idoc::forward::{solve_coc, CocSolution, SolverOptions};
use idoc::idoc::{trajectory_derivative, vjp, BackwardOptions, Mode};
use idoc::problem::ProblemDefinition;
use idoc::riccati::riccati_trajectory_derivative;
use idoc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    /// Singular or rank-deficient systems, non-finite values.
    Numerical = 4,
    /// The forward solver did not converge.
    NotConverged = 5,
    Panic = 6,
}

/// Which block of the KKT system a setter addresses. Dynamics residuals
/// are `r_t = x_{t+1} − f_t(ξ_t)`, so `ASub` holds `[I 0]` in its
/// dynamics rows and `ADiag` holds `−D f_t`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdocBlock {
    /// `H_t`, `|ξ_t| × |ξ_t|`, `t ∈ [0, T]`.
    Hessian = 0,
    /// `D_{ξ_t} r_t`, `t ∈ [0, T]`.
    ADiag = 1,
    /// `D_{ξ_{t+1}} r_t`, `t ∈ [0, T)`.
    ASub = 2,
    /// `D_{ξ_0}` of the initial-state residual, `n × |ξ_0|`; index ignored.
    AInit = 3,
    /// `B_t`, `|ξ_t| × d`.
    B = 4,
    /// `C_k` for residual block `k ∈ [0, T + 1]`, with block `0` the
    /// initial-state residual.
    C = 5,
}

/// Dense backward-pass inputs.
pub struct IdocKkt {
    blocks: KktBlocks<f64>,
}

/// A bundled optimal control problem.
pub struct IdocProblem {
    problem: Box<dyn ProblemDefinition>,
}

/// A forward solution together with the parameters it was solved at.
pub struct IdocSolution {
    solution: CocSolution,
    theta: DVector<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(IdocStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => IdocStatus::DimensionMismatch,
            Error::SolveFailed(_) => IdocStatus::NotConverged,
            e if e.is_numerical() => IdocStatus::Numerical,
            _ => IdocStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IdocStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(IdocStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IdocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IdocStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            IdocStatus::Panic
        }
    }
}

unsafe fn slice<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn slice_mut<'a>(data: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(data, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn write_row_major(m: &DMatrix<f64>, out: &mut [f64]) -> Result<(), Failure> {
    let need = m.nrows() * m.ncols();
    if out.len() != need {
        return Err(Failure(
            IdocStatus::DimensionMismatch,
            format!("output buffer holds {} values, expected {need}", out.len()),
        ));
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    Ok(())
}

fn write_vector(v: &DVector<f64>, out: &mut [f64]) -> Result<(), Failure> {
    if out.len() != v.len() {
        return Err(Failure(
            IdocStatus::DimensionMismatch,
            format!("output buffer holds {} values, expected {}", out.len(), v.len()),
        ));
    }
    out.copy_from_slice(v.as_slice());
    Ok(())
}

/// Length of the last error message on this thread, excluding the
/// terminator; zero when there is none.
#[no_mangle]
pub extern "C" fn idoc_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (truncated, always
/// NUL-terminated when `len > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn idoc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

#[no_mangle]
pub extern "C" fn idoc_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn idoc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Zero-initialised KKT inputs. `active` (may be null for none) holds
/// `T + 1` counts of extra equality rows per stage, ordered ahead of the
/// dynamics rows; the initial-state block is set to `[I 0]`.
///
/// # Safety
/// `active` must be null or point to `horizon + 1` values; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idoc_kkt_new(
    n: usize,
    m: usize,
    horizon: usize,
    d: usize,
    active: *const usize,
    out: *mut *mut IdocKkt,
) -> IdocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if n == 0 || m == 0 || horizon == 0 || d == 0 {
            return Err(invalid(format!("dimensions must be positive, got n={n}, m={m}, T={horizon}, d={d}")));
        }
        let extra: Vec<usize> = if active.is_null() {
            vec![0; horizon + 1]
        } else {
            std::slice::from_raw_parts(active, horizon + 1).to_vec()
        };
        let sizes: Vec<usize> = (0..=horizon).map(|t| if t < horizon { n + m } else { n }).collect();
        let diag = (0..=horizon)
            .map(|t| DMatrix::zeros(extra[t] + if t < horizon { n } else { 0 }, sizes[t]))
            .collect();
        let sub = (0..horizon).map(|t| DMatrix::zeros(extra[t] + n, sizes[t + 1])).collect();
        let a = BlockBandedA {
            init_block: DMatrix::identity(n, sizes[0]),
            diag,
            sub,
        };
        let blocks = KktBlocks {
            n,
            m,
            horizon,
            d,
            h: BlockDiagonal::new(sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect()),
            b: sizes.iter().map(|&s| DMatrix::zeros(s, d)).collect(),
            c: a.row_sizes().iter().map(|&r| DMatrix::zeros(r, d)).collect(),
            a,
            lambda: DVector::zeros(0),
        };
        *out = Box::into_raw(Box::new(IdocKkt { blocks }));
        Ok(())
    })
}

/// # Safety
/// `kkt` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn idoc_kkt_free(kkt: *mut IdocKkt) {
    if !kkt.is_null() {
        drop(Box::from_raw(kkt));
    }
}

/// Decision and residual lengths `n_ξ` and `n_r`; either pointer may be null.
///
/// # Safety
/// Non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idoc_kkt_dims(kkt: *const IdocKkt, n_xi: *mut usize, n_r: *mut usize) -> IdocStatus {
    guard(|| {
        let k = handle(kkt, "kkt")?;
        if !n_xi.is_null() {
            *n_xi = k.blocks.n_xi();
        }
        if !n_r.is_null() {
            *n_r = k.blocks.n_r();
        }
        Ok(())
    })
}

/// Shape of one block; either pointer may be null.
///
/// # Safety
/// `kkt` must be a live handle; non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idoc_kkt_block_shape(
    kkt: *const IdocKkt,
    kind: IdocBlock,
    index: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> IdocStatus {
    guard(|| {
        let k = handle(kkt, "kkt")?;
        let (r, c) = block_ref(&k.blocks, kind, index)?.shape();
        if !rows.is_null() {
            *rows = r;
        }
        if !cols.is_null() {
            *cols = c;
        }
        Ok(())
    })
}

fn block_ref(b: &KktBlocks<f64>, kind: IdocBlock, index: usize) -> Result<&DMatrix<f64>, Failure> {
    let found = match kind {
        IdocBlock::Hessian => b.h.blocks.get(index),
        IdocBlock::ADiag => b.a.diag.get(index),
        IdocBlock::ASub => b.a.sub.get(index),
        IdocBlock::AInit => Some(&b.a.init_block),
        IdocBlock::B => b.b.get(index),
        IdocBlock::C => b.c.get(index),
    };
    found.ok_or_else(|| invalid(format!("{kind:?} block index {index} is out of range")))
}

fn block_mut(b: &mut KktBlocks<f64>, kind: IdocBlock, index: usize) -> Result<&mut DMatrix<f64>, Failure> {
    let found = match kind {
        IdocBlock::Hessian => b.h.blocks.get_mut(index),
        IdocBlock::ADiag => b.a.diag.get_mut(index),
        IdocBlock::ASub => b.a.sub.get_mut(index),
        IdocBlock::AInit => Some(&mut b.a.init_block),
        IdocBlock::B => b.b.get_mut(index),
        IdocBlock::C => b.c.get_mut(index),
    };
    found.ok_or_else(|| invalid(format!("{kind:?} block index {index} is out of range")))
}

/// Overwrites one block from `rows × cols` row-major values; the shape
/// must match [`idoc_kkt_block_shape`].
///
/// # Safety
/// `kkt` must be a live handle and `data` must point to `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn idoc_kkt_set_block(
    kkt: *mut IdocKkt,
    kind: IdocBlock,
    index: usize,
    data: *const f64,
    rows: usize,
    cols: usize,
) -> IdocStatus {
    guard(|| {
        let k = handle_mut(kkt, "kkt")?;
        let values = slice(data, rows * cols, "data")?;
        let blk = block_mut(&mut k.blocks, kind, index)?;
        if blk.shape() != (rows, cols) {
            return Err(Failure(
                IdocStatus::DimensionMismatch,
                format!("{kind:?} block {index} is {}×{}, got {rows}×{cols}", blk.nrows(), blk.ncols()),
            ));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(invalid("block values must be finite"));
        }
        *blk = DMatrix::from_row_slice(rows, cols, values);
        Ok(())
    })
}

/// `Dξ` (`n_ξ × d`, row-major) with proximal shift `prox_delta` (0 disables).
///
/// # Safety
/// `kkt` must be a live handle and `out` must point to `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn idoc_trajectory_derivative(
    kkt: *const IdocKkt,
    prox_delta: f64,
    out: *mut f64,
    out_len: usize,
) -> IdocStatus {
    guard(|| {
        let k = handle(kkt, "kkt")?;
        let out = slice_mut(out, out_len, "out")?;
        let opts = BackwardOptions {
            prox_delta,
            ..BackwardOptions::default()
        };
        write_row_major(&trajectory_derivative(&k.blocks, &opts)?, out)
    })
}

/// `vᵀDξ` (length `d`) without forming `Dξ`; `v` has length `n_ξ`.
///
/// # Safety
/// `kkt` must be a live handle; `v` and `out` must point to `v_len` and
/// `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn idoc_vjp(
    kkt: *const IdocKkt,
    prox_delta: f64,
    v: *const f64,
    v_len: usize,
    out: *mut f64,
    out_len: usize,
) -> IdocStatus {
    guard(|| {
        let k = handle(kkt, "kkt")?;
        let v = DVector::from_column_slice(slice(v, v_len, "v")?);
        let out = slice_mut(out, out_len, "out")?;
        let opts = BackwardOptions {
            prox_delta,
            mode: Mode::Vjp,
            ..BackwardOptions::default()
        };
        write_vector(&vjp(&v, &k.blocks, &opts)?, out)
    })
}

/// `Dξ` through the auxiliary LQR recursion; equality-only inputs.
///
/// # Safety
/// `kkt` must be a live handle and `out` must point to `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn idoc_riccati_trajectory_derivative(kkt: *const IdocKkt, out: *mut f64, out_len: usize) -> IdocStatus {
    guard(|| {
        let k = handle(kkt, "kkt")?;
        let out = slice_mut(out, out_len, "out")?;
        write_row_major(&riccati_trajectory_derivative(&k.blocks)?, out)
    })
}

unsafe fn new_problem(out: *mut *mut IdocProblem, build: impl FnOnce() -> idoc::Result<Box<dyn ProblemDefinition>>) -> IdocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let problem = build()?;
        *out = Box::into_raw(Box::new(IdocProblem { problem }));
        Ok(())
    })
}

/// Cartpole swing-up with `horizon` steps of length `dt`; `constrained`
/// adds the track and force bounds (and their two parameters).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idoc_cartpole_new(horizon: usize, dt: f64, constrained: bool, out: *mut *mut IdocProblem) -> IdocStatus {
    new_problem(out, || Ok(Box::new(Cartpole::new(horizon, dt, constrained)?)))
}

/// The demonstration parameters `θ★` of the cartpole task, 9 values
/// without constraints and 11 with them.
///
/// # Safety
/// `out` must point to `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn idoc_cartpole_default_theta(constrained: bool, out: *mut f64, out_len: usize) -> IdocStatus {
    guard(|| {
        let out = slice_mut(out, out_len, "out")?;
        write_vector(&CartpoleParams::default().to_theta(constrained), out)
    })
}

/// Seeded random LQR problem with `θ = [diag Q shift, diag R shift, A
/// perturbation]`; `zero_terminal` drops the terminal cost.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idoc_lqr_new(
    n: usize,
    m: usize,
    horizon: usize,
    seed: u64,
    zero_terminal: bool,
    out: *mut *mut IdocProblem,
) -> IdocStatus {
    let terminal = if zero_terminal { TerminalCost::Zero } else { TerminalCost::Quadratic };
    new_problem(out, || {
        Ok(Box::new(LqrProblem::random(n, m, horizon, seed, LqrParameterization::DiagonalAndDynamics, terminal)?))
    })
}

/// # Safety
/// `problem` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn idoc_problem_free(problem: *mut IdocProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// `n`, `m`, `d` and `T`; any pointer may be null.
///
/// # Safety
/// `problem` must be a live handle; non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idoc_problem_dims(
    problem: *const IdocProblem,
    n: *mut usize,
    m: *mut usize,
    d: *mut usize,
    horizon: *mut usize,
) -> IdocStatus {
    guard(|| {
        let dims = handle(problem, "problem")?.problem.dims();
        for (p, v) in [(n, dims.n), (m, dims.m), (d, dims.d), (horizon, dims.horizon)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Solves the forward problem at `θ` (length `d`) with default solver
/// options. An unconverged solve returns `NotConverged` and no handle.
///
/// # Safety
/// `problem` must be a live handle, `theta` must point to `theta_len`
/// values and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idoc_problem_solve(
    problem: *const IdocProblem,
    theta: *const f64,
    theta_len: usize,
    out: *mut *mut IdocSolution,
) -> IdocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = handle(problem, "problem")?;
        let theta = DVector::from_column_slice(slice(theta, theta_len, "theta")?);
        let solution = solve_coc(p.problem.as_ref(), &theta, None, &SolverOptions::default())?;
        if !solution.converged {
            return Err(Failure(
                IdocStatus::NotConverged,
                format!("forward solve did not converge: {}", solution.message),
            ));
        }
        *out = Box::into_raw(Box::new(IdocSolution { solution, theta }));
        Ok(())
    })
}

/// # Safety
/// `solution` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn idoc_solution_free(solution: *mut IdocSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Length of the solved trajectory `ξ` (`n_ξ`), or 0 for a null handle.
///
/// # Safety
/// `solution` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idoc_solution_length(solution: *const IdocSolution) -> usize {
    solution.as_ref().map_or(0, |s| s.solution.trajectory.len())
}

/// Copies `ξ = (x₀, u₀, …, x_T)` into `out`.
///
/// # Safety
/// `solution` must be a live handle and `out` must point to `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn idoc_solution_trajectory(solution: *const IdocSolution, out: *mut f64, out_len: usize) -> IdocStatus {
    guard(|| {
        let s = handle(solution, "solution")?;
        let out = slice_mut(out, out_len, "out")?;
        write_vector(&s.solution.trajectory.data, out)
    })
}

/// Number of inequality rows treated as active in the backward pass.
///
/// # Safety
/// `solution` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idoc_solution_active_count(solution: *const IdocSolution) -> usize {
    solution.as_ref().map_or(0, |s| s.solution.active.count())
}

/// KKT inputs at a solution, ready for the backward-pass calls.
///
/// # Safety
/// `problem` and `solution` must be live handles (the solution obtained
/// from this problem) and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idoc_solution_kkt(
    problem: *const IdocProblem,
    solution: *const IdocSolution,
    out: *mut *mut IdocKkt,
) -> IdocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = handle(problem, "problem")?;
        let s = handle(solution, "solution")?;
        if p.problem.dims().n_xi() != s.solution.trajectory.len() {
            return Err(Failure(
                IdocStatus::DimensionMismatch,
                "solution does not belong to this problem".into(),
            ));
        }
        let blocks = assemble_kkt_blocks(
            p.problem.as_ref(),
            &s.solution.trajectory,
            &s.theta,
            &s.solution.active,
            &s.solution.lambda,
        )?;
        *out = Box::into_raw(Box::new(IdocKkt { blocks }));
        Ok(())
    })
}
