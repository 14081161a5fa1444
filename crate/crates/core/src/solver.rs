//! Reduced unconstrained problem and its conjugate gradient solution.
//!
//! Eliminating the state through the constraint gives the quadratic
//! `J*(X) = ½(XᵀMX + 2dᵀX + q)` in the interface unknowns `X = [Φ; Ψ]`.
//! `M` is never formed: each product costs one solve with `𝒜` and one with
//! `𝒜ᵀ`, both split into the 3D block and the independent 1D blocks.

use std::io::Write;

use log::{debug, info, warn};
use thiserror::Error;

use crate::assembly::BlockSystem;
use crate::linalg::{axpy, dot, factorize, norm2, FactorKind, Factorization, LinalgError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("operator not positive definite: δXᵀMδX = {curvature:e} at iteration {iteration}")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },
    #[error("no convergence after {} iterations (relative residual {:e})", .0.iterations, .0.history.last().copied().unwrap_or(f64::NAN))]
    MaxIterations(Box<SolverState>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid tolerance {0}")]
    InvalidTolerance(f64),
    #[error("factorization of solve group {group} failed: {source}")]
    Factorization { group: usize, source: LinalgError },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Symmetric positive definite operator applied matrix-free.
pub trait SpdOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>, SolverError>;
}

/// Block-diagonal solver for `𝒜` built from one factorization per
/// independent index group.
pub struct BlockSolver {
    n: usize,
    groups: Vec<(Vec<usize>, Factorization)>,
}

impl BlockSolver {
    pub fn new(blocks: &BlockSystem) -> Result<Self, SolverError> {
        let mut groups = Vec::with_capacity(blocks.solve_groups.len());
        for (g, (idx, &indefinite)) in blocks.solve_groups.iter().zip(&blocks.group_indefinite).enumerate() {
            if idx.is_empty() {
                continue;
            }
            let kind = if indefinite { FactorKind::SymmetricIndefinite } else { FactorKind::SymmetricPositiveDefinite };
            let sub = blocks.a.submatrix(idx, idx);
            let f = factorize(&sub, kind).map_err(|source| SolverError::Factorization { group: g, source })?;
            groups.push((idx.clone(), f));
        }
        Ok(Self { n: blocks.a.nrows(), groups })
    }

    fn solve_impl(&self, b: &[f64], transpose: bool) -> Result<Vec<f64>, SolverError> {
        if b.len() != self.n {
            return Err(SolverError::Dimension { expected: self.n, got: b.len() });
        }
        let mut x = vec![0.0; self.n];
        for (idx, f) in &self.groups {
            let local: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let sol = if transpose { f.solve_transpose(&local)? } else { f.solve(&local)? };
            for (&i, v) in idx.iter().zip(sol) {
                x[i] = v;
            }
        }
        Ok(x)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.solve_impl(b, false)
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.solve_impl(b, true)
    }
}

/// The operator `M` of the reduced problem together with `d` and `q`.
pub struct ReducedOperator {
    blocks: BlockSystem,
    solver: BlockSolver,
    d: Vec<f64>,
    q: f64,
}

/// Full state recovered from the interface unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredState {
    /// Solution of the constraint system on free unknowns.
    pub w: Vec<f64>,
    /// 3D solution on free nodes.
    pub u_free: Vec<f64>,
    /// Stacked 1D solution on free nodes.
    pub uhat_free: Vec<f64>,
    pub multipliers: Vec<f64>,
}

impl ReducedOperator {
    /// Factorizes the blocks of `𝒜` and precomputes `d` and `q`.
    pub fn new(blocks: BlockSystem) -> Result<Self, SolverError> {
        let solver = BlockSolver::new(&blocks)?;
        let mut op = Self { blocks, solver, d: Vec::new(), q: 0.0 };
        let (d, q) = op.compute_d_q()?;
        op.d = d;
        op.q = q;
        info!("reduced operator ready: {} interface unknowns, ‖d‖ = {:e}", op.dim(), norm2(&op.d));
        Ok(op)
    }

    pub fn blocks(&self) -> &BlockSystem {
        &self.blocks
    }

    pub fn block_solver(&self) -> &BlockSolver {
        &self.solver
    }

    pub fn n_phi(&self) -> usize {
        self.blocks.n_phi()
    }

    pub fn n_psi(&self) -> usize {
        self.blocks.n_psi()
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    fn split<'x>(&self, x: &'x [f64]) -> Result<(&'x [f64], &'x [f64]), SolverError> {
        if x.len() != self.dim() {
            return Err(SolverError::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(x.split_at(self.n_phi()))
    }

    /// `ℬΦ + 𝒞^αΨ`
    fn interface_load(&self, phi: &[f64], psi: &[f64]) -> Result<Vec<f64>, SolverError> {
        let mut rhs = self.blocks.b.spmv(phi, false)?;
        self.blocks.c_alpha.mul_add(psi, &mut rhs);
        Ok(rhs)
    }

    /// `MδX`: forward solve for `δW`, adjoint solve for `δP`, then the
    /// transposed couplings.
    pub fn apply_m(&self, x: &[f64]) -> Result<Vec<f64>, SolverError> {
        let (phi, psi) = self.split(x)?;
        let bk = &self.blocks;
        let dw = self.solver.solve(&self.interface_load(phi, psi)?)?;
        let mut adj = bk.g.spmv(&dw, false)?;
        let cpsi = bk.c.spmv(psi, false)?;
        axpy(-1.0, &cpsi, &mut adj);
        let dp = self.solver.solve_transpose(&adj)?;
        let mut out = bk.b.spmv(&dp, true)?;
        let mut out_psi = bk.c_alpha.spmv(&dp, true)?;
        let ctw = bk.c.spmv(&dw, true)?;
        axpy(-1.0, &ctw, &mut out_psi);
        let gpsi = bk.g_psi.spmv(psi, false)?;
        axpy(2.0, &gpsi, &mut out_psi);
        out.extend(out_psi);
        Ok(out)
    }

    /// Linear and constant terms of `J*`, including the prescribed-value
    /// contributions.
    pub fn compute_d_q(&self) -> Result<(Vec<f64>, f64), SolverError> {
        let bk = &self.blocks;
        let wf = self.solver.solve(&bk.f)?;
        let mut adj = bk.g.spmv(&wf, false)?;
        axpy(1.0, &bk.h_w, &mut adj);
        let pf = self.solver.solve_transpose(&adj)?;
        let mut d = bk.b.spmv(&pf, true)?;
        let mut d_psi = bk.c_alpha.spmv(&pf, true)?;
        let ctw = bk.c.spmv(&wf, true)?;
        axpy(-1.0, &ctw, &mut d_psi);
        axpy(1.0, &bk.h_psi, &mut d_psi);
        d.extend(d_psi);
        let q = bk.g.quad_form(&wf, &wf) + 2.0 * dot(&bk.h_w, &wf) + bk.q_lift;
        Ok((d, q))
    }

    /// `J*(X) = ½(XᵀMX + 2dᵀX + q)`.
    pub fn j_star(&self, x: &[f64]) -> Result<f64, SolverError> {
        let mx = self.apply_m(x)?;
        Ok(0.5 * (dot(x, &mx) + 2.0 * dot(&self.d, x) + self.q))
    }

    /// `W = 𝒜⁻¹(ℬΦ + 𝒞^αΨ + ℱ)`, split into its parts.
    pub fn recover_state(&self, x: &[f64]) -> Result<RecoveredState, SolverError> {
        let (phi, psi) = self.split(x)?;
        let mut rhs = self.interface_load(phi, psi)?;
        axpy(1.0, &self.blocks.f, &mut rhs);
        let w = self.solver.solve(&rhs)?;
        let l = self.blocks.layout;
        Ok(RecoveredState {
            u_free: w[..l.n_u].to_vec(),
            uhat_free: w[l.n_u..l.n_u + l.n_uhat].to_vec(),
            multipliers: w[l.n_u + l.n_uhat..].to_vec(),
            w,
        })
    }
}

impl SpdOperator for ReducedOperator {
    fn dim(&self) -> usize {
        self.n_phi() + self.n_psi()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.apply_m(x)
    }
}

/// Conjugate gradient settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CgOptions {
    /// Stop when `‖r‖/‖d‖ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point, zero when `None`.
    pub x0: Option<Vec<f64>>,
    /// Interval between recomputations of the true residual.
    pub check_every: usize,
    /// Relative disagreement between recurrence and true residual that
    /// triggers a restart.
    pub drift_tol: f64,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 100_000, x0: None, check_every: 50, drift_tol: 1e-6 }
    }
}

/// Iterate, residual and history of a CG run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub dx: Vec<f64>,
    pub iterations: usize,
    /// `‖r_k‖/‖d‖` for `k = 0, 1, …`.
    pub history: Vec<f64>,
    /// `J*(X_k)` for `k = 0, 1, …`, from the recurrence residual.
    pub objective: Vec<f64>,
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub converged: bool,
}

impl SolverState {
    /// Residual history as CSV with header `iter,res_rel`.
    pub fn write_history_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,res_rel")?;
        for (k, r) in self.history.iter().enumerate() {
            writeln!(w, "{k},{r:e}")?;
        }
        Ok(())
    }
}

/// Conjugate gradient for `MX + d = 0`.
///
/// Each iteration applies the operator once. Every `check_every` iterations
/// the residual is recomputed as `MX + d`; if it has drifted from the
/// recurrence the search restarts from the true residual.
pub fn cg_solve<O: SpdOperator + ?Sized>(
    op: &O,
    d: &[f64],
    q: f64,
    opts: &CgOptions,
) -> Result<SolverState, SolverError> {
    let n = op.dim();
    if d.len() != n {
        return Err(SolverError::Dimension { expected: n, got: d.len() });
    }
    if !(opts.tol > 0.0) {
        return Err(SolverError::InvalidTolerance(opts.tol));
    }
    let d_norm = norm2(d);
    let objective = |x: &[f64], r: &[f64]| {
        // MX = r − d, so J* = ½(Xᵀ(r + d) + q)
        0.5 * (x.iter().zip(r.iter().zip(d)).map(|(xi, (ri, di))| xi * (ri + di)).sum::<f64>() + q)
    };
    let residual = |x: &[f64]| -> Result<Vec<f64>, SolverError> {
        let mut r = op.apply(x)?;
        axpy(1.0, d, &mut r);
        Ok(r)
    };
    let mut state = SolverState {
        x: vec![0.0; n],
        r: d.to_vec(),
        dx: vec![0.0; n],
        iterations: 0,
        history: Vec::new(),
        objective: Vec::new(),
        restarts: 0,
        tol: opts.tol,
        max_iter: opts.max_iter,
        converged: false,
    };
    if d_norm == 0.0 {
        state.history.push(0.0);
        state.objective.push(0.5 * q);
        state.converged = true;
        return Ok(state);
    }
    if let Some(x0) = &opts.x0 {
        if x0.len() != n {
            return Err(SolverError::Dimension { expected: n, got: x0.len() });
        }
        state.x = x0.clone();
        state.r = residual(&state.x)?;
    }
    state.dx = state.r.iter().map(|v| -v).collect();
    let mut rr = dot(&state.r, &state.r);
    state.history.push(rr.sqrt() / d_norm);
    state.objective.push(objective(&state.x, &state.r));

    loop {
        if rr.sqrt() / d_norm <= opts.tol {
            // confirm against the true residual before stopping
            let true_r = residual(&state.x)?;
            let true_norm = norm2(&true_r);
            if true_norm / d_norm <= opts.tol {
                state.r = true_r;
                state.converged = true;
                break;
            }
            warn!("recurrence residual converged but true residual is {:e}; restarting", true_norm / d_norm);
            state.r = true_r;
            state.dx = state.r.iter().map(|v| -v).collect();
            rr = true_norm * true_norm;
            state.restarts += 1;
            continue;
        }
        if state.iterations >= opts.max_iter {
            return Err(SolverError::MaxIterations(Box::new(state)));
        }
        let mdx = op.apply(&state.dx)?;
        let curvature = dot(&state.dx, &mdx);
        if !(curvature > 0.0) {
            return Err(SolverError::NotPositiveDefinite { iteration: state.iterations, curvature });
        }
        let zeta = rr / curvature;
        axpy(zeta, &state.dx, &mut state.x);
        axpy(zeta, &mdx, &mut state.r);
        let rr_new = dot(&state.r, &state.r);
        let beta = rr_new / rr;
        for (p, r) in state.dx.iter_mut().zip(&state.r) {
            *p = -r + beta * *p;
        }
        rr = rr_new;
        state.iterations += 1;
        state.history.push(rr.sqrt() / d_norm);
        state.objective.push(objective(&state.x, &state.r));
        if state.iterations % 1000 == 0 {
            debug!("cg iteration {}: relative residual {:e}", state.iterations, rr.sqrt() / d_norm);
        }

        if opts.check_every > 0 && state.iterations % opts.check_every == 0 {
            let true_r = residual(&state.x)?;
            let true_norm = norm2(&true_r);
            let drift = true_r.iter().zip(&state.r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if drift > opts.drift_tol * true_norm {
                debug!("residual drift {:e} at iteration {}; restarting", drift / true_norm, state.iterations);
                state.r = true_r;
                state.dx = state.r.iter().map(|v| -v).collect();
                rr = true_norm * true_norm;
                state.restarts += 1;
            }
        }
    }
    info!(
        "cg converged in {} iterations, relative residual {:e}",
        state.iterations,
        state.history.last().copied().unwrap_or(0.0)
    );
    Ok(state)
}

impl ReducedOperator {
    /// Runs CG on `MX + d = 0`.
    pub fn solve(&self, opts: &CgOptions) -> Result<SolverState, SolverError> {
        cg_solve(self, &self.d, self.q, opts)
    }
}
