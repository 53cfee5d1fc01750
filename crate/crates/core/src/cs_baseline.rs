//! Compressive-sampling baseline: a separable Fourier dictionary over
//! `(t, x, z)` and Orthogonal Matching Pursuit.
//!
//! Coefficients use the same flat ordering as fields (time fastest), so the
//! dictionary acts as `B_z ⊗ B_x ⊗ B_t` in column-major Kronecker notation.
//! It is applied factor by factor and only materialised for small sizes.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WflabError};
use crate::model::{FieldTensor, ObservationMask};

/// Largest number of rows [`TensorDictionary::materialize`] will build.
pub const MATERIALIZE_CAP: usize = 4096;

/// Largest field (entries) accepted by [`cs_reconstruct`].
pub const RECONSTRUCT_CAP: usize = 32 * 32 * 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisDomain {
    Time,
    WavenumberX,
    WavenumberZ,
}

/// Unit-norm cosine/sine atoms sampled at `0..N`, ordered
/// `[cos ω₀, sin ω₁, cos ω₁, …, sin ω_{N/2−1}, cos ω_{N/2−1}, cos ω_{N/2}]`
/// with `ω_ℓ = 2πℓ/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis1D {
    pub length: usize,
    pub domain: BasisDomain,
    pub atoms: DMatrix<f64>,
    /// Euclidean norm of each raw (unnormalised) column.
    pub scales: Vec<f64>,
}

impl FourierBasis1D {
    /// Harmonic index ℓ and whether column `j` is a sine.
    pub fn harmonic(&self, j: usize) -> (usize, bool) {
        column_harmonic(self.length, j)
    }

    /// `ω_ℓ = 2πℓ/N` of column `j`.
    pub fn frequency(&self, j: usize) -> f64 {
        2.0 * PI * self.harmonic(j).0 as f64 / self.length as f64
    }

    /// Column `j` before normalisation.
    pub fn raw_column(&self, j: usize) -> Vec<f64> {
        self.atoms.column(j).iter().map(|v| v * self.scales[j]).collect()
    }
}

fn column_harmonic(n: usize, j: usize) -> (usize, bool) {
    if j == 0 {
        (0, false)
    } else if j == n - 1 {
        (n / 2, false)
    } else {
        (j.div_ceil(2), j % 2 == 1)
    }
}

pub fn build_basis(length: usize, domain: BasisDomain) -> Result<FourierBasis1D> {
    if length < 2 || !length.is_multiple_of(2) {
        return Err(WflabError::invalid(format!(
            "Fourier basis length must be even and >= 2, got {length}"
        )));
    }
    let mut atoms = DMatrix::zeros(length, length);
    let mut scales = vec![0.0; length];
    for j in 0..length {
        let (l, sine) = column_harmonic(length, j);
        let w = 2.0 * PI * l as f64 / length as f64;
        for t in 0..length {
            let arg = w * t as f64;
            atoms[(t, j)] = if sine { arg.sin() } else { arg.cos() };
        }
        let norm = atoms.column(j).norm();
        scales[j] = norm;
        atoms.column_mut(j).scale_mut(1.0 / norm);
    }
    Ok(FourierBasis1D {
        length,
        domain,
        atoms,
        scales,
    })
}

/// Separable dictionary over `(t, x, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDictionary {
    pub t: FourierBasis1D,
    pub x: FourierBasis1D,
    pub z: FourierBasis1D,
}

/// Multiplies mode `mode` (0 = t, 1 = x, 2 = z) of a flat `(n0, n1, n2)`
/// array by `m` (or its transpose).
fn mode_product(data: &[f64], dims: [usize; 3], mode: usize, m: &DMatrix<f64>, transpose: bool) -> Vec<f64> {
    let n = dims[mode];
    let stride: usize = dims[..mode].iter().product();
    let outer: usize = dims[mode + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for s in 0..stride {
            let base = s + o * stride * n;
            for r in 0..n {
                let mut acc = 0.0;
                for c in 0..n {
                    let coef = if transpose { m[(c, r)] } else { m[(r, c)] };
                    acc += coef * data[base + c * stride];
                }
                out[base + r * stride] = acc;
            }
        }
    }
    out
}

impl TensorDictionary {
    pub fn new(n_t: usize, n_x: usize, n_z: usize) -> Result<Self> {
        Ok(TensorDictionary {
            t: build_basis(n_t, BasisDomain::Time)?,
            x: build_basis(n_x, BasisDomain::WavenumberX)?,
            z: build_basis(n_z, BasisDomain::WavenumberZ)?,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.t.length, self.x.length, self.z.length]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(WflabError::shape(format!(
                "vector has {} entries, dictionary has {}",
                v.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// `D w`.
    pub fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_len(w)?;
        let dims = self.dims();
        let a = mode_product(w, dims, 0, &self.t.atoms, false);
        let b = mode_product(&a, dims, 1, &self.x.atoms, false);
        Ok(mode_product(&b, dims, 2, &self.z.atoms, false))
    }

    /// `Dᵀ r`.
    pub fn adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.check_len(r)?;
        let dims = self.dims();
        let a = mode_product(r, dims, 0, &self.t.atoms, true);
        let b = mode_product(&a, dims, 1, &self.x.atoms, true);
        Ok(mode_product(&b, dims, 2, &self.z.atoms, true))
    }

    /// Entry `(row, col)` of `D`.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let [nt, nx, _] = self.dims();
        let (rt, rx, rz) = (row % nt, (row / nt) % nx, row / (nt * nx));
        let (ct, cx, cz) = (col % nt, (col / nt) % nx, col / (nt * nx));
        self.t.atoms[(rt, ct)] * self.x.atoms[(rx, cx)] * self.z.atoms[(rz, cz)]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.entry(r, col)).collect()
    }

    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > MATERIALIZE_CAP {
            return Err(WflabError::CapExceeded(format!(
                "explicit dictionary would be {n}x{n}; the cap is {MATERIALIZE_CAP} rows"
            )));
        }
        Ok(DMatrix::from_fn(n, n, |r, c| self.entry(r, c)))
    }
}

/// Linear operator seen by OMP.
pub trait SensingOperator {
    fn n_rows(&self) -> usize;
    fn n_atoms(&self) -> usize;
    fn column(&self, j: usize) -> Vec<f64>;
    /// `Aᵀ r`.
    fn adjoint(&self, r: &[f64]) -> Result<Vec<f64>>;
}

impl SensingOperator for DMatrix<f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }

    fn n_atoms(&self) -> usize {
        self.ncols()
    }

    fn column(&self, j: usize) -> Vec<f64> {
        self.column(j).iter().copied().collect()
    }

    fn adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.nrows() {
            return Err(WflabError::shape("residual length differs from operator rows"));
        }
        Ok(self.tr_mul(&nalgebra::DVector::from_column_slice(r)).iter().copied().collect())
    }
}

/// Rows of a tensor dictionary kept by an observation pattern (`Φ D`).
pub struct SampledDictionary<'a> {
    pub dict: &'a TensorDictionary,
    pub rows: Vec<usize>,
}

impl SensingOperator for SampledDictionary<'_> {
    fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn n_atoms(&self) -> usize {
        self.dict.len()
    }

    fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|&r| self.dict.entry(r, j)).collect()
    }

    fn adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.rows.len() {
            return Err(WflabError::shape("residual length differs from sampled rows"));
        }
        let mut full = vec![0.0; self.dict.len()];
        for (&row, &v) in self.rows.iter().zip(r) {
            full[row] = v;
        }
        self.dict.adjoint(&full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmpParams {
    pub max_atoms: usize,
    /// Stop once `‖r‖₂ ≤ residual_tol · ‖x‖₂`.
    pub residual_tol: f64,
}

impl Default for OmpParams {
    fn default() -> Self {
        OmpParams {
            max_atoms: 64,
            residual_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    /// Atom indices in selection order.
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    /// `‖r‖₂` before the first and after every selection.
    pub residual_trace: Vec<f64>,
}

impl OmpResult {
    pub fn dense(&self, n_atoms: usize) -> Vec<f64> {
        let mut w = vec![0.0; n_atoms];
        for (&j, &c) in self.support.iter().zip(&self.coefficients) {
            w[j] = c;
        }
        w
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn omp_solve<A: SensingOperator + ?Sized>(op: &A, x: &[f64], params: &OmpParams) -> Result<OmpResult> {
    if params.max_atoms == 0 {
        return Err(WflabError::invalid("OMP max_atoms must be >= 1"));
    }
    if !(params.residual_tol >= 0.0) {
        return Err(WflabError::invalid("OMP residual_tol must be >= 0"));
    }
    if op.n_rows() == 0 {
        return Err(WflabError::NoObservations);
    }
    if x.len() != op.n_rows() {
        return Err(WflabError::shape(format!(
            "{} observations for an operator with {} rows",
            x.len(),
            op.n_rows()
        )));
    }
    let x_norm = norm(x);
    let stop = params.residual_tol * x_norm;
    let mut residual = x.to_vec();
    let mut trace = vec![x_norm];
    let mut support: Vec<usize> = Vec::new();
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut r_upper: Vec<Vec<f64>> = Vec::new();
    let limit = params.max_atoms.min(op.n_rows()).min(op.n_atoms());

    while support.len() < limit && *trace.last().unwrap() > stop {
        let corr = op.adjoint(&residual)?;
        let mut best = None;
        let mut best_val = 0.0;
        for (j, c) in corr.iter().enumerate() {
            if c.abs() > best_val && !support.contains(&j) {
                best_val = c.abs();
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        let step = support.len() + 1;
        let col = op.column(j);
        let col_norm = norm(&col);
        let mut v = col.clone();
        let mut coeffs = vec![0.0; q.len()];
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let proj = dot(qi, &v);
                coeffs[i] += proj;
                for (vv, qv) in v.iter_mut().zip(qi) {
                    *vv -= proj * qv;
                }
            }
        }
        let vn = norm(&v);
        if !(vn > 1e-10 * col_norm) {
            return Err(WflabError::numerical(format!(
                "OMP active set is rank deficient at step {step} (atom {j})"
            )));
        }
        for vv in &mut v {
            *vv /= vn;
        }
        coeffs.push(vn);
        let proj = dot(&v, &residual);
        for (rv, qv) in residual.iter_mut().zip(&v) {
            *rv -= proj * qv;
        }
        q.push(v);
        r_upper.push(coeffs);
        support.push(j);
        trace.push(norm(&residual));
    }

    // Back substitution: R c = Qᵀ x, with column j of R stored in r_upper[j].
    let qtx: Vec<f64> = q.iter().map(|qi| dot(qi, x)).collect();
    let n = support.len();
    let mut coefficients = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = qtx[i];
        for j in i + 1..n {
            acc -= r_upper[j][i] * coefficients[j];
        }
        coefficients[i] = acc / r_upper[i][i];
    }
    Ok(OmpResult {
        support,
        coefficients,
        residual_norm: *trace.last().unwrap(),
        residual_trace: trace,
    })
}

/// Result of a dictionary reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct CsReconstruction {
    pub field: FieldTensor,
    pub omp: OmpResult,
}

pub fn cs_reconstruct(field: &FieldTensor, mask: &ObservationMask, params: &OmpParams) -> Result<CsReconstruction> {
    let g = *field.grid();
    if !mask.grid().same_shape(&g) {
        return Err(WflabError::shape("mask grid differs from field grid"));
    }
    if g.len() > RECONSTRUCT_CAP {
        return Err(WflabError::CapExceeded(format!(
            "a {}x{}x{} grid exceeds the dictionary cap of {RECONSTRUCT_CAP} entries \
             (about 32x32x64); use the alm or bpfa method for grids of this size",
            g.n_x, g.n_z, g.n_t
        )));
    }
    let dict = TensorDictionary::new(g.n_t, g.n_x, g.n_z)
        .map_err(|e| e.with_context("the omp method needs even grid sizes along t, x and z"))?;
    let rows: Vec<usize> = (0..g.len()).filter(|&i| mask.is_observed_flat(i)).collect();
    let x: Vec<f64> = rows.iter().map(|&i| field.values()[i]).collect();
    let op = SampledDictionary { dict: &dict, rows };
    let omp = omp_solve(&op, &x, params)?;
    let values = dict.apply(&omp.dense(dict.len()))?;
    Ok(CsReconstruction {
        field: FieldTensor::from_vec(g, values)?,
        omp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_layout() {
        let b = build_basis(8, BasisDomain::Time).unwrap();
        assert_eq!(b.atoms.ncols(), 8);
        let expect = [(0, false), (1, true), (1, false), (2, true), (2, false), (3, true), (3, false), (4, false)];
        for (j, e) in expect.iter().enumerate() {
            assert_eq!(b.harmonic(j), *e);
            assert_eq!(b.frequency(j), 2.0 * PI * e.0 as f64 / 8.0);
        }
        let gram = b.atoms.transpose() * &b.atoms;
        assert!((gram - DMatrix::identity(8, 8)).abs().max() < 1e-12);
        assert!((b.scales[0] - 8f64.sqrt()).abs() < 1e-12);
        assert!((b.scales[1] - 2.0).abs() < 1e-12);
        assert!(build_basis(7, BasisDomain::Time).is_err());
        assert!(build_basis(0, BasisDomain::Time).is_err());
    }

    #[test]
    fn length_two_basis() {
        let b = build_basis(2, BasisDomain::WavenumberX).unwrap();
        assert_eq!(b.raw_column(0), vec![1.0, 1.0]);
        let c1 = b.raw_column(1);
        assert!((c1[0] - 1.0).abs() < 1e-15 && (c1[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn apply_and_adjoint_match_materialized() {
        let d = TensorDictionary::new(4, 2, 6).unwrap();
        let m = d.materialize().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..d.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let fast = d.apply(&w).unwrap();
        let slow = &m * nalgebra::DVector::from_column_slice(&w);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = d.adjoint(&fast).unwrap();
        for (a, b) in back.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(d.apply(&[0.0; 3]).is_err());
        assert!(TensorDictionary::new(32, 32, 8).unwrap().materialize().is_err());
    }

    #[test]
    fn omp_single_atom_and_zero() {
        let b = build_basis(16, BasisDomain::Time).unwrap();
        let x = b.raw_column(5);
        let res = omp_solve(&b.atoms, &x, &OmpParams::default()).unwrap();
        assert_eq!(res.support, vec![5]);
        assert!((res.coefficients[0] - b.scales[5]).abs() < 1e-12);
        assert!(res.residual_norm < 1e-12);
        let res = omp_solve(&b.atoms, &[0.0; 16], &OmpParams::default()).unwrap();
        assert!(res.support.is_empty());
    }

    #[test]
    fn omp_rank_deficiency_names_step() {
        let mut a = DMatrix::<f64>::zeros(3, 3);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        a[(0, 2)] = 1.0;
        a[(1, 2)] = -1.0;
        a[(2, 2)] = 1e-12;
        let x = [1.0, 2.0, 3.0];
        let err = omp_solve(&a, &x, &OmpParams::default()).unwrap_err();
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn residual_strictly_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(20, 40, |_, _| rng.random::<f64>() - 0.5);
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let res = omp_solve(&a, &x, &OmpParams { max_atoms: 20, residual_tol: 0.0 }).unwrap();
        for w in res.residual_trace.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn reconstruct_single_missing_harmonic() {
        let g = GridSpec::new(4, 4, 8, 1.0, 1.0, 1.0).unwrap();
        let f = FieldTensor::from_fn(g, |ix, iz, it| {
            (2.0 * PI * it as f64 / 8.0).cos() * (2.0 * PI * ix as f64 / 4.0).sin() * (PI * iz as f64).cos()
        });
        let mut obs = vec![true; 16];
        obs[6] = false;
        let mask = ObservationMask::whole_history(g, obs).unwrap();
        let rec = cs_reconstruct(&f, &mask, &OmpParams::default()).unwrap();
        for (a, b) in rec.field.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(rec.omp.support.len(), 1);
    }

    #[test]
    fn reconstruct_refuses_large_grid() {
        let g = GridSpec::new(64, 32, 64, 1.0, 1.0, 1.0).unwrap();
        let f = FieldTensor::zeros(g);
        let err = cs_reconstruct(&f, &ObservationMask::all_observed(g), &OmpParams::default()).unwrap_err();
        assert!(matches!(err, WflabError::CapExceeded(_)));
        assert!(err.to_string().contains("alm or bpfa"));
    }
}
