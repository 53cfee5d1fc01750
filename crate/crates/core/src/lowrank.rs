//! Matrix completion by nuclear-norm minimisation, solved with the augmented
//! Lagrange multiplier method, one spatial snapshot at a time.
//!
//! For a partially observed `M` with observed set Ω the problem is
//!
//! ```text
//! min ‖Y‖_*  s.t.  Y + E = M,  E = 0 on Ω
//! ```
//!
//! and each iteration performs
//!
//! ```text
//! U S Vᵀ  = svd(M − E_k + Λ_k/μ_k)
//! Y_{k+1} = U shrink_{1/μ_k}(S) Vᵀ
//! E_{k+1} = P_Ω̄(M − Y_{k+1} + Λ_k/μ_k)
//! Λ_{k+1} = Λ_k + μ_k (M − Y_{k+1} − E_{k+1})
//! μ_{k+1} = ρ μ_k
//! ```
//!
//! Unobserved entries of `M` are held at zero; `E` absorbs them.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WflabError};
use crate::model::{FieldTensor, MaskMode, ObservationMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlmParams {
    /// Initial penalty. `None` means `1/‖M‖₂`.
    pub mu0: Option<f64>,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AlmParams {
    fn default() -> Self {
        AlmParams {
            mu0: None,
            rho: 1.01,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

impl AlmParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(mu0) = self.mu0 {
            if !(mu0 > 0.0 && mu0.is_finite()) {
                return Err(WflabError::invalid(format!("mu0 must be > 0, got {mu0}")));
            }
        }
        if !(self.rho > 1.0 && self.rho.is_finite()) {
            return Err(WflabError::invalid(format!("rho must be > 1, got {}", self.rho)));
        }
        if !(self.tol > 0.0) {
            return Err(WflabError::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(WflabError::invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CompletionResult {
    pub completed: DMatrix<f64>,
    /// Discrepancy matrix; zero on the observed set.
    pub discrepancy: DMatrix<f64>,
    pub iterations: usize,
    /// `‖M − Y − E‖_F / ‖M‖_F` after each iteration.
    pub residual_trace: Vec<f64>,
    pub converged: bool,
}

pub fn soft_threshold(x: f64, eps: f64) -> f64 {
    debug_assert!(eps >= 0.0);
    if x > eps {
        x - eps
    } else if x < -eps {
        x + eps
    } else {
        0.0
    }
}

pub fn nuclear_norm(y: &DMatrix<f64>) -> Result<f64> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(WflabError::invalid("matrix has non-finite entries"));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let sv = y
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| WflabError::numerical("SVD did not converge"))?
        .singular_values;
    Ok(sv.iter().sum())
}

/// Proximal operator of `τ‖·‖_*`: shrink every singular value by `tau`.
pub fn singular_value_shrink(m: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| WflabError::numerical("SVD did not converge"))?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (r, &s) in svd.singular_values.iter().enumerate() {
        let shrunk = soft_threshold(s, tau);
        if shrunk > 0.0 {
            out += shrunk * u.column(r) * v_t.row(r);
        }
    }
    Ok(out)
}

fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    let sv = m
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| WflabError::numerical("SVD did not converge"))?
        .singular_values;
    Ok(sv.iter().cloned().fold(0.0, f64::max))
}

/// Complete `observed` on the pattern `mask` (`true` = observed). Values of
/// `observed` at unobserved positions are ignored.
pub fn alm_complete(
    observed: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    params: &AlmParams,
) -> Result<CompletionResult> {
    params.validate()?;
    let (n1, n2) = observed.shape();
    if n1 == 0 || n2 == 0 {
        return Err(WflabError::shape("matrix must have at least one row and column"));
    }
    if mask.shape() != (n1, n2) {
        return Err(WflabError::shape(format!(
            "mask is {:?}, matrix is {:?}",
            mask.shape(),
            (n1, n2)
        )));
    }
    if !mask.iter().any(|&o| o) {
        return Err(WflabError::NoObservations);
    }
    let m = DMatrix::from_fn(n1, n2, |r, c| if mask[(r, c)] { observed[(r, c)] } else { 0.0 });
    if m.iter().any(|v| !v.is_finite()) {
        return Err(WflabError::invalid("observed entries must be finite"));
    }

    if mask.iter().all(|&o| o) {
        return Ok(CompletionResult {
            completed: m,
            discrepancy: DMatrix::zeros(n1, n2),
            iterations: 0,
            residual_trace: Vec::new(),
            converged: true,
        });
    }

    let m_norm = m.norm();
    if m_norm == 0.0 {
        return Ok(CompletionResult {
            completed: DMatrix::zeros(n1, n2),
            discrepancy: DMatrix::zeros(n1, n2),
            iterations: 0,
            residual_trace: Vec::new(),
            converged: true,
        });
    }

    let mut mu = match params.mu0 {
        Some(v) => v,
        None => 1.0 / spectral_norm(&m)?,
    };
    let mut lambda = DMatrix::<f64>::zeros(n1, n2);
    let mut e = DMatrix::<f64>::zeros(n1, n2);
    let mut y = DMatrix::<f64>::zeros(n1, n2);
    let mut trace = Vec::new();
    let mut converged = false;

    for _ in 0..params.max_iter {
        let inv_mu = 1.0 / mu;
        y = singular_value_shrink(&(&m - &e + &lambda * inv_mu), inv_mu)?;

        e = &m - &y + &lambda * inv_mu;
        for (v, &o) in e.iter_mut().zip(mask.iter()) {
            if o {
                *v = 0.0;
            }
        }
        debug_assert!(e.iter().zip(mask.iter()).all(|(v, &o)| !o || *v == 0.0));

        let gap = &m - &y - &e;
        lambda += &gap * mu;
        mu *= params.rho;

        let residual = gap.norm() / m_norm;
        if !residual.is_finite() {
            return Err(WflabError::numerical(format!(
                "ALM residual became non-finite at iteration {}",
                trace.len() + 1
            )));
        }
        trace.push(residual);
        if residual <= params.tol {
            converged = true;
            break;
        }
    }

    Ok(CompletionResult {
        completed: y,
        discrepancy: e,
        iterations: trace.len(),
        residual_trace: trace,
        converged,
    })
}

/// Per-slice diagnostics from [`complete_time_series`].
#[derive(Debug, Clone, PartialEq)]
pub struct SliceReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

/// Complete every time snapshot independently. Observed entries are copied
/// through unchanged.
pub fn complete_time_series(
    field: &FieldTensor,
    mask: &ObservationMask,
    params: &AlmParams,
) -> Result<(FieldTensor, Vec<SliceReport>)> {
    if !field.grid().same_shape(mask.grid()) {
        return Err(WflabError::shape("mask grid differs from field grid"));
    }
    if mask.mode() != MaskMode::WholeHistory {
        return Err(WflabError::invalid(
            "snapshot completion expects a whole-history mask",
        ));
    }
    params.validate()?;
    let grid = *field.grid();
    let pattern = mask.slice_pattern(0);

    let solved: Vec<(DMatrix<f64>, SliceReport)> = (0..grid.n_t)
        .into_par_iter()
        .map(|it| {
            let slice = field.time_slice(it);
            let res = alm_complete(&slice, &pattern, params)
                .map_err(|e| e.with_context(format!("time index {it}")))?;
            let report = SliceReport {
                iterations: res.iterations,
                final_residual: res.residual_trace.last().copied().unwrap_or(0.0),
                converged: res.converged,
            };
            Ok((res.completed, report))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = field.clone();
    let mut reports = Vec::with_capacity(grid.n_t);
    for (it, (completed, report)) in solved.into_iter().enumerate() {
        for iz in 0..grid.n_z {
            for ix in 0..grid.n_x {
                if !pattern[(ix, iz)] {
                    out.set(ix, iz, it, completed[(ix, iz)]);
                }
            }
        }
        reports.push(report);
    }
    Ok((out, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sufficiency {
    Sufficient,
    Marginal,
    Insufficient,
}

/// Compare the observation count `m` with `C·n^{5/6}·r·ln n`,
/// `n = min(n1, n2)`. Counts at or above the bound are sufficient, counts in
/// `[bound/2, bound)` are marginal. A fully observed matrix is always
/// sufficient and `m = 0` never is.
pub fn sampling_sufficiency_advisory(n1: usize, n2: usize, r: usize, m: usize, c: f64) -> Sufficiency {
    if m == 0 {
        return Sufficiency::Insufficient;
    }
    if m >= n1 * n2 {
        return Sufficiency::Sufficient;
    }
    let bound = sampling_bound(n1, n2, r, c);
    let m = m as f64;
    if m >= bound {
        Sufficiency::Sufficient
    } else if m >= 0.5 * bound {
        Sufficiency::Marginal
    } else {
        Sufficiency::Insufficient
    }
}

pub fn sampling_bound(n1: usize, n2: usize, r: usize, c: f64) -> f64 {
    let n = n1.min(n2) as f64;
    c * n.powf(5.0 / 6.0) * r as f64 * n.ln()
}
