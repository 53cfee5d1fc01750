//! Beta process factor analysis (BPFA) for space-time inpainting.
//!
//! The field is cut into overlapping voxels of `m_x × m_z` points that keep
//! the whole time record, each voxel is modelled as `y_i = Σ_i (D w_i + ε_i)`
//! with `w_i = z_i ⊙ s_i`, and the posterior is explored with a Gibbs
//! sampler. Reconstructions of overlapping voxels are averaged uniformly.
//!
//! Gamma distributions are parameterised by shape and rate throughout.
//!
//! Within a voxel the entry order is time fastest, then local x, then local
//! z, mirroring the field layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WflabError};
use crate::model::{FieldTensor, GridSpec, MaskMode, ObservationMask};

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPartition {
    grid: GridSpec,
    pub m_x: usize,
    pub m_z: usize,
    pub stride_x: usize,
    pub stride_z: usize,
    origins: Vec<(usize, usize)>,
}

fn valid_strides(span: usize, block: usize) -> Vec<usize> {
    let gap = span - block;
    if gap == 0 {
        return vec![1];
    }
    (1..=block.min(gap)).filter(|s| gap.is_multiple_of(*s)).collect()
}

impl VoxelPartition {
    pub fn new(
        grid: &GridSpec,
        m_x: usize,
        m_z: usize,
        stride_x: usize,
        stride_z: usize,
    ) -> Result<Self> {
        grid.validate()?;
        for (axis, n, m, s) in [("x", grid.n_x, m_x, stride_x), ("z", grid.n_z, m_z, stride_z)] {
            if m == 0 || m > n {
                return Err(WflabError::invalid(format!(
                    "block size along {axis} must be in 1..={n}, got {m}"
                )));
            }
            if s == 0 || s > m {
                return Err(WflabError::invalid(format!(
                    "stride along {axis} must be in 1..={m} so every point is covered, got {s}"
                )));
            }
            if (n - m) % s != 0 {
                return Err(WflabError::invalid(format!(
                    "({n} - {m}) / {s} along {axis} is not an integer; valid strides: {:?}",
                    valid_strides(n, m)
                )));
            }
        }
        let nbx = (grid.n_x - m_x) / stride_x + 1;
        let nbz = (grid.n_z - m_z) / stride_z + 1;
        let mut origins = Vec::with_capacity(nbx * nbz);
        for bz in 0..nbz {
            for bx in 0..nbx {
                origins.push((bx * stride_x, bz * stride_z));
            }
        }
        Ok(VoxelPartition {
            grid: *grid,
            m_x,
            m_z,
            stride_x,
            stride_z,
            origins,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn n_total(&self) -> usize {
        self.origins.len()
    }

    /// Voxel length `P = m_x · m_z · n_t`.
    pub fn p(&self) -> usize {
        self.m_x * self.m_z * self.grid.n_t
    }

    pub fn origin(&self, i: usize) -> (usize, usize) {
        self.origins[i]
    }

    /// Flat field index of entry `q` of voxel `i`.
    pub fn flat_index(&self, i: usize, q: usize) -> usize {
        let n_t = self.grid.n_t;
        let (x0, z0) = self.origins[i];
        let it = q % n_t;
        let lx = (q / n_t) % self.m_x;
        let lz = q / (n_t * self.m_x);
        self.grid.index(x0 + lx, z0 + lz, it)
    }

    /// `(ix, iz, it)` of every entry of voxel `i`, in voxel order.
    pub fn block_index_map(&self, i: usize) -> Vec<(usize, usize, usize)> {
        let (x0, z0) = self.origins[i];
        let mut out = Vec::with_capacity(self.p());
        for lz in 0..self.m_z {
            for lx in 0..self.m_x {
                for it in 0..self.grid.n_t {
                    out.push((x0 + lx, z0 + lz, it));
                }
            }
        }
        out
    }

    /// Number of voxels covering each spatial point.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cov = vec![0; self.grid.n_points()];
        for &(x0, z0) in &self.origins {
            for lz in 0..self.m_z {
                for lx in 0..self.m_x {
                    cov[self.grid.point_index(x0 + lx, z0 + lz)] += 1;
                }
            }
        }
        cov
    }
}

/// Voxel data in lifted form: `Σ_iᵀ y_i` (zeros at missing entries) and the
/// diagonal of `Σ_iᵀ Σ_i` as 0/1 values.
#[derive(Debug, Clone)]
pub struct Voxels {
    partition: VoxelPartition,
    lifted: Vec<Vec<f64>>,
    obs: Vec<Vec<f64>>,
    n_obs: Vec<usize>,
}

pub fn extract_voxels(
    field: &FieldTensor,
    mask: &ObservationMask,
    partition: &VoxelPartition,
) -> Result<Voxels> {
    if !field.grid().same_shape(partition.grid()) || !mask.grid().same_shape(partition.grid()) {
        return Err(WflabError::shape("field, mask and partition grids differ"));
    }
    let p = partition.p();
    let mut lifted = Vec::with_capacity(partition.n_total());
    let mut obs = Vec::with_capacity(partition.n_total());
    let mut n_obs = Vec::with_capacity(partition.n_total());
    for i in 0..partition.n_total() {
        let mut y = vec![0.0; p];
        let mut o = vec![0.0; p];
        let mut count = 0;
        for q in 0..p {
            let idx = partition.flat_index(i, q);
            if mask.is_observed_flat(idx) {
                y[q] = field.values()[idx];
                o[q] = 1.0;
                count += 1;
            }
        }
        lifted.push(y);
        obs.push(o);
        n_obs.push(count);
    }
    Ok(Voxels {
        partition: partition.clone(),
        lifted,
        obs,
        n_obs,
    })
}

impl Voxels {
    pub fn partition(&self) -> &VoxelPartition {
        &self.partition
    }

    pub fn n_total(&self) -> usize {
        self.lifted.len()
    }

    pub fn p(&self) -> usize {
        self.partition.p()
    }

    /// `Σ_iᵀ y_i`.
    pub fn lifted(&self, i: usize) -> &[f64] {
        &self.lifted[i]
    }

    /// Diagonal of `Σ_iᵀ Σ_i`.
    pub fn obs(&self, i: usize) -> &[f64] {
        &self.obs[i]
    }

    /// `‖Σ_i‖₀`.
    pub fn n_observed(&self, i: usize) -> usize {
        self.n_obs[i]
    }

    /// Voxel entries kept by `Σ_i`.
    pub fn selector(&self, i: usize) -> Vec<usize> {
        (0..self.p()).filter(|&q| self.obs[i][q] != 0.0).collect()
    }

    /// `y_i`, the observed entries of voxel `i`.
    pub fn observed_values(&self, i: usize) -> Vec<f64> {
        self.selector(i).into_iter().map(|q| self.lifted[i][q]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpfaHyperparams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    #[serde(alias = "K")]
    pub k: usize,
    pub n_burnin: usize,
    pub n_samples: usize,
}

impl Default for BpfaHyperparams {
    fn default() -> Self {
        BpfaHyperparams {
            a: 1.0,
            b: 1.0,
            c: 1e-6,
            d: 1e-6,
            e: 1e-6,
            f: 1e-6,
            k: 512,
            n_burnin: 100,
            n_samples: 100,
        }
    }
}

impl BpfaHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("e", self.e),
            ("f", self.f),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(WflabError::invalid(format!("BPFA {name} must be > 0, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(WflabError::invalid("BPFA dictionary size K must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(WflabError::invalid("BPFA needs at least one posterior sample"));
        }
        Ok(())
    }

    /// Beta prior `(a/K, b(K−1)/K)` on each `π_k`.
    pub fn pi_prior(&self) -> (f64, f64) {
        let k = self.k as f64;
        (self.a / k, self.b * (k - 1.0) / k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    /// Dictionary atoms `d_k`, each of length `P`.
    pub d: Vec<Vec<f64>>,
    /// Support indicators, `z[i][k]`.
    pub z: Vec<Vec<bool>>,
    /// Weights, `s[i][k]`.
    pub s: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub gamma_s: f64,
    pub gamma_eps: f64,
}

impl GibbsState {
    pub fn k(&self) -> usize {
        self.d.len()
    }

    pub fn n_total(&self) -> usize {
        self.z.len()
    }

    pub fn weight(&self, i: usize, k: usize) -> f64 {
        if self.z[i][k] {
            self.s[i][k]
        } else {
            0.0
        }
    }

    /// `D (s_i ⊙ z_i)`.
    pub fn block_reconstruction(&self, i: usize) -> Vec<f64> {
        let p = self.d.first().map_or(0, Vec::len);
        let mut out = vec![0.0; p];
        for k in 0..self.k() {
            if self.z[i][k] {
                axpy(self.s[i][k], &self.d[k], &mut out);
            }
        }
        out
    }

    /// Number of atoms used by at least one voxel.
    pub fn active_atoms(&self) -> usize {
        (0..self.k()).filter(|&k| self.z.iter().any(|zi| zi[k])).count()
    }

    fn is_valid(&self) -> bool {
        self.gamma_s > 0.0
            && self.gamma_s.is_finite()
            && self.gamma_eps > 0.0
            && self.gamma_eps.is_finite()
            && self.pi.iter().all(|p| (0.0..=1.0).contains(p))
            && self.d.iter().flatten().all(|v| v.is_finite())
            && self.s.iter().flatten().all(|v| v.is_finite())
    }
}

const PHASE_INIT: u64 = 0;
const PHASE_D: u64 = 1;
const PHASE_Z: u64 = 2;
const PHASE_S: u64 = 3;
const PHASE_PI: u64 = 4;
const PHASE_GAMMA: u64 = 5;

/// Independent generator for one (sweep, phase, item) triple so that blocks
/// can be updated in any order with identical results.
fn stream_rng(seed: u64, sweep: usize, phase: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sweep as u64) << 4) | phase);
    rng.set_word_pos((item as u128) << 32);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `ln X` for `X ~ Gamma(shape, 1)`, stable for very small shapes.
fn ln_gamma_variate(rng: &mut ChaCha8Rng, shape: f64) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).expect("valid gamma").sample(rng).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("valid gamma").sample(rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        g.ln() + u.ln() / shape
    }
}

fn sample_beta(rng: &mut ChaCha8Rng, alpha: f64, beta: f64) -> f64 {
    let lx = ln_gamma_variate(rng, alpha);
    let ly = ln_gamma_variate(rng, beta);
    let d = ly - lx;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

fn sample_gamma(rng: &mut ChaCha8Rng, shape: f64, rate: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| WflabError::numerical(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `y -= alpha · (obs ⊙ x)`.
fn masked_sub(alpha: f64, obs: &[f64], x: &[f64], y: &mut [f64]) {
    for ((yv, xv), ov) in y.iter_mut().zip(x).zip(obs) {
        *yv -= alpha * ov * xv;
    }
}

fn masked_sq_norm(obs: &[f64], x: &[f64]) -> f64 {
    obs.iter().zip(x).map(|(o, v)| o * v * v).sum()
}

pub fn init_state(hyper: &BpfaHyperparams, partition: &VoxelPartition, seed: u64) -> Result<GibbsState> {
    hyper.validate()?;
    let p = partition.p();
    let n = partition.n_total();
    let kk = hyper.k;
    let mut rng = stream_rng(seed, 0, PHASE_INIT, 0);
    let sd = (1.0 / p as f64).sqrt();
    let d: Vec<Vec<f64>> = (0..kk)
        .map(|_| (0..p).map(|_| sd * normal(&mut rng)).collect())
        .collect();
    let (alpha, beta) = hyper.pi_prior();
    let pi: Vec<f64> = (0..kk).map(|_| sample_beta(&mut rng, alpha, beta)).collect();
    let z: Vec<Vec<bool>> = (0..n)
        .map(|_| pi.iter().map(|&pk| rng.random::<f64>() < pk).collect())
        .collect();
    let gamma_s = hyper.c / hyper.d;
    let gamma_eps = hyper.e / hyper.f;
    let s_sd = 1.0 / gamma_s.sqrt();
    let s: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..kk).map(|_| s_sd * normal(&mut rng)).collect())
        .collect();
    Ok(GibbsState {
        d,
        z,
        s,
        pi,
        gamma_s,
        gamma_eps,
    })
}

/// Gaussian with diagonal precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Residual `Σ_iᵀ y_i − Σ_iᵀ Σ_i D w_i` computed from scratch.
pub fn block_residual(state: &GibbsState, voxels: &Voxels, i: usize) -> Vec<f64> {
    let recon = state.block_reconstruction(i);
    voxels
        .lifted(i)
        .iter()
        .zip(voxels.obs(i))
        .zip(&recon)
        .map(|((y, o), r)| y - o * r)
        .collect()
}

fn check_state_shape(state: &GibbsState, voxels: &Voxels) -> Result<()> {
    if state.n_total() != voxels.n_total()
        || state.s.len() != voxels.n_total()
        || state.d.iter().any(|d| d.len() != voxels.p())
        || state.pi.len() != state.k()
    {
        return Err(WflabError::shape("Gibbs state does not match the voxel data"));
    }
    Ok(())
}

/// Conditional of `d_k` given everything else.
pub fn atom_conditional(state: &GibbsState, voxels: &Voxels, k: usize) -> Result<DiagGaussian> {
    check_state_shape(state, voxels)?;
    let p = voxels.p();
    let mut precision = vec![p as f64; p];
    let mut num = vec![0.0; p];
    for i in 0..voxels.n_total() {
        let w = state.weight(i, k);
        if w == 0.0 {
            continue;
        }
        let r = block_residual(state, voxels, i);
        let obs = voxels.obs(i);
        for q in 0..p {
            let x = r[q] + obs[q] * state.d[k][q] * w;
            precision[q] += state.gamma_eps * w * w * obs[q];
            num[q] += state.gamma_eps * w * x;
        }
    }
    let mean = num.iter().zip(&precision).map(|(n, pr)| n / pr).collect();
    Ok(DiagGaussian { mean, precision })
}

fn support_log_odds(pi: f64, gamma_eps: f64, s: f64, g: f64, dtx: f64) -> f64 {
    (pi.ln() - (1.0 - pi).ln()) - 0.5 * gamma_eps * (s * s * g - 2.0 * s * dtx)
}

fn support_prob_from_log_odds(pi: f64, log_odds: f64) -> f64 {
    if pi <= 0.0 {
        0.0
    } else if pi >= 1.0 {
        1.0
    } else if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    }
}

/// `P(z_ik = 1 | −)`.
pub fn support_probability(state: &GibbsState, voxels: &Voxels, i: usize, k: usize) -> Result<f64> {
    check_state_shape(state, voxels)?;
    let r = block_residual(state, voxels, i);
    let obs = voxels.obs(i);
    let g = masked_sq_norm(obs, &state.d[k]);
    let dtx = dot(&state.d[k], &r) + g * state.weight(i, k);
    let lo = support_log_odds(state.pi[k], state.gamma_eps, state.s[i][k], g, dtx);
    Ok(support_prob_from_log_odds(state.pi[k], lo))
}

fn weight_params(gamma_s: f64, gamma_eps: f64, z: bool, g: f64, dtx: f64) -> (f64, f64) {
    if z {
        let precision = gamma_s + gamma_eps * g;
        (gamma_eps * dtx / precision, precision)
    } else {
        (0.0, gamma_s)
    }
}

/// Conditional `(mean, precision)` of `s_ik`.
pub fn weight_conditional(state: &GibbsState, voxels: &Voxels, i: usize, k: usize) -> Result<(f64, f64)> {
    check_state_shape(state, voxels)?;
    let r = block_residual(state, voxels, i);
    let obs = voxels.obs(i);
    let g = masked_sq_norm(obs, &state.d[k]);
    let dtx = dot(&state.d[k], &r) + g * state.weight(i, k);
    Ok(weight_params(state.gamma_s, state.gamma_eps, state.z[i][k], g, dtx))
}

/// Beta conditional `(α, β)` of `π_k`.
pub fn pi_conditional(hyper: &BpfaHyperparams, state: &GibbsState, k: usize) -> (f64, f64) {
    let (alpha, beta) = hyper.pi_prior();
    let m = state.z.iter().filter(|zi| zi[k]).count() as f64;
    let n = state.n_total() as f64;
    (alpha + m, beta + n - m)
}

/// Gamma conditional `(shape, rate)` of `γ_s`.
pub fn gamma_s_conditional(hyper: &BpfaHyperparams, state: &GibbsState) -> (f64, f64) {
    let kn = (state.k() * state.n_total()) as f64;
    let ss: f64 = state.s.iter().flatten().map(|v| v * v).sum();
    (hyper.c + 0.5 * kn, hyper.d + 0.5 * ss)
}

/// Gamma conditional `(shape, rate)` of `γ_ε`.
pub fn gamma_eps_conditional(
    hyper: &BpfaHyperparams,
    state: &GibbsState,
    voxels: &Voxels,
) -> Result<(f64, f64)> {
    check_state_shape(state, voxels)?;
    let n_obs: usize = (0..voxels.n_total()).map(|i| voxels.n_observed(i)).sum();
    let rss: f64 = (0..voxels.n_total())
        .map(|i| block_residual(state, voxels, i).iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok((hyper.e + 0.5 * n_obs as f64, hyper.f + 0.5 * rss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub window: usize,
    pub sweep: usize,
    pub gamma_eps: f64,
    pub gamma_s: f64,
    pub active_atoms: usize,
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean: FieldTensor,
    /// Per-entry posterior variance of the recombined reconstruction.
    pub variance: FieldTensor,
    /// One row per sweep, burn-in included.
    pub trace: Vec<TraceRow>,
    pub n_burnin: usize,
}

impl PosteriorSummary {
    /// `γ_ε` of the retained samples.
    pub fn noise_precision_trace(&self) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|r| r.sweep >= self.n_burnin)
            .map(|r| r.gamma_eps)
            .collect()
    }

    pub fn active_atoms_trace(&self) -> Vec<usize> {
        self.trace
            .iter()
            .filter(|r| r.sweep >= self.n_burnin)
            .map(|r| r.active_atoms)
            .collect()
    }

    /// Time-averaged posterior variance at each spatial point.
    pub fn point_variance(&self) -> Vec<f64> {
        let g = *self.variance.grid();
        (0..g.n_points())
            .map(|p| {
                let (ix, iz) = g.point_coords(p);
                self.variance.history(ix, iz).iter().sum::<f64>() / g.n_t as f64
            })
            .collect()
    }
}

/// Gibbs sampler with incremental residual bookkeeping.
pub struct GibbsSampler<'a> {
    voxels: &'a Voxels,
    hyper: BpfaHyperparams,
    state: GibbsState,
    /// `R_i = Σ_iᵀ y_i − Σ_iᵀ Σ_i D w_i`.
    residual: Vec<Vec<f64>>,
    /// `G_ik = d_kᵀ Σ_iᵀ Σ_i d_k`.
    gram: Vec<Vec<f64>>,
    seed: u64,
    sweep: usize,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(voxels: &'a Voxels, hyper: BpfaHyperparams, seed: u64) -> Result<Self> {
        let state = init_state(&hyper, voxels.partition(), seed)?;
        Self::with_state(voxels, hyper, state, seed)
    }

    pub fn with_state(
        voxels: &'a Voxels,
        hyper: BpfaHyperparams,
        state: GibbsState,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        check_state_shape(&state, voxels)?;
        if state.k() != hyper.k {
            return Err(WflabError::shape(format!(
                "state has {} atoms, hyperparameters say K = {}",
                state.k(),
                hyper.k
            )));
        }
        let mut sampler = GibbsSampler {
            voxels,
            hyper,
            state,
            residual: Vec::new(),
            gram: Vec::new(),
            seed,
            sweep: 0,
        };
        sampler.refresh();
        Ok(sampler)
    }

    pub fn state(&self) -> &GibbsState {
        &self.state
    }

    pub fn residuals(&self) -> &[Vec<f64>] {
        &self.residual
    }

    /// Recompute residuals and masked atom energies from scratch.
    fn refresh(&mut self) {
        let voxels = self.voxels;
        let state = &self.state;
        self.residual = (0..voxels.n_total())
            .into_par_iter()
            .map(|i| block_residual(state, voxels, i))
            .collect();
        self.gram = (0..voxels.n_total())
            .into_par_iter()
            .map(|i| {
                let obs = voxels.obs(i);
                state.d.iter().map(|dk| masked_sq_norm(obs, dk)).collect()
            })
            .collect();
    }

    pub fn sample_dictionary(&mut self) {
        let p = self.voxels.p();
        let ge = self.state.gamma_eps;
        for k in 0..self.state.k() {
            let mut rng = stream_rng(self.seed, self.sweep, PHASE_D, k);
            let mut precision = vec![p as f64; p];
            let mut num = vec![0.0; p];
            let active: Vec<usize> = (0..self.state.n_total())
                .filter(|&i| self.state.z[i][k] && self.voxels.n_observed(i) > 0)
                .collect();
            let dk = &self.state.d[k];
            for &i in &active {
                let w = self.state.s[i][k];
                let obs = self.voxels.obs(i);
                let r = &self.residual[i];
                for q in 0..p {
                    let ow = obs[q] * w;
                    precision[q] += ge * ow * w;
                    num[q] += ge * w * (r[q] + ow * dk[q]);
                }
            }
            let new: Vec<f64> = (0..p)
                .map(|q| num[q] / precision[q] + normal(&mut rng) / precision[q].sqrt())
                .collect();
            let delta: Vec<f64> = new.iter().zip(dk).map(|(a, b)| a - b).collect();
            for &i in &active {
                let w = self.state.s[i][k];
                masked_sub(w, self.voxels.obs(i), &delta, &mut self.residual[i]);
            }
            for i in 0..self.state.n_total() {
                self.gram[i][k] = masked_sq_norm(self.voxels.obs(i), &new);
            }
            self.state.d[k] = new;
        }
    }

    pub fn sample_supports(&mut self) {
        let voxels = self.voxels;
        let (seed, sweep) = (self.seed, self.sweep);
        let d = &self.state.d;
        let pi = &self.state.pi;
        let ge = self.state.gamma_eps;
        self.state
            .z
            .par_iter_mut()
            .zip(self.state.s.par_iter())
            .zip(self.residual.par_iter_mut())
            .zip(self.gram.par_iter())
            .enumerate()
            .for_each(|(i, (((zi, si), ri), gi))| {
                let mut rng = stream_rng(seed, sweep, PHASE_Z, i);
                let obs = voxels.obs(i);
                let observed = voxels.n_observed(i) > 0;
                for k in 0..d.len() {
                    let w_old = if zi[k] { si[k] } else { 0.0 };
                    let dtx = if observed { dot(&d[k], ri) + gi[k] * w_old } else { 0.0 };
                    let lo = support_log_odds(pi[k], ge, si[k], gi[k], dtx);
                    let prob = support_prob_from_log_odds(pi[k], lo);
                    let u: f64 = rng.random();
                    let z_new = u < prob;
                    if z_new != zi[k] {
                        let w_new = if z_new { si[k] } else { 0.0 };
                        if observed {
                            masked_sub(w_new - w_old, obs, &d[k], ri);
                        }
                        zi[k] = z_new;
                    }
                }
            });
    }

    pub fn sample_weights(&mut self) {
        let voxels = self.voxels;
        let (seed, sweep) = (self.seed, self.sweep);
        let d = &self.state.d;
        let (gs, ge) = (self.state.gamma_s, self.state.gamma_eps);
        self.state
            .s
            .par_iter_mut()
            .zip(self.state.z.par_iter())
            .zip(self.residual.par_iter_mut())
            .zip(self.gram.par_iter())
            .enumerate()
            .for_each(|(i, (((si, zi), ri), gi))| {
                let mut rng = stream_rng(seed, sweep, PHASE_S, i);
                let obs = voxels.obs(i);
                let observed = voxels.n_observed(i) > 0;
                for k in 0..d.len() {
                    let eps = normal(&mut rng);
                    if zi[k] && observed {
                        let w_old = si[k];
                        let dtx = dot(&d[k], ri) + gi[k] * w_old;
                        let (mean, prec) = weight_params(gs, ge, true, gi[k], dtx);
                        let w_new = mean + eps / prec.sqrt();
                        masked_sub(w_new - w_old, obs, &d[k], ri);
                        si[k] = w_new;
                    } else {
                        let (mean, prec) = weight_params(gs, ge, zi[k], 0.0, 0.0);
                        si[k] = mean + eps / prec.sqrt();
                    }
                }
            });
    }

    pub fn sample_pi(&mut self) {
        let mut rng = stream_rng(self.seed, self.sweep, PHASE_PI, 0);
        for k in 0..self.state.k() {
            let (alpha, beta) = pi_conditional(&self.hyper, &self.state, k);
            self.state.pi[k] = sample_beta(&mut rng, alpha, beta);
        }
    }

    pub fn sample_precisions(&mut self) -> Result<()> {
        let mut rng = stream_rng(self.seed, self.sweep, PHASE_GAMMA, 0);
        let (shape, rate) = gamma_s_conditional(&self.hyper, &self.state);
        self.state.gamma_s = sample_gamma(&mut rng, shape, rate)?;
        let n_obs: usize = (0..self.voxels.n_total()).map(|i| self.voxels.n_observed(i)).sum();
        let rss: f64 = self
            .residual
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let shape = self.hyper.e + 0.5 * n_obs as f64;
        let rate = self.hyper.f + 0.5 * rss;
        self.state.gamma_eps = sample_gamma(&mut rng, shape, rate)?;
        Ok(())
    }

    /// One full sweep in the order D, Z, S, π, γ_s, γ_ε.
    pub fn step(&mut self) -> Result<TraceRow> {
        self.refresh();
        self.sample_dictionary();
        self.sample_supports();
        self.sample_weights();
        self.sample_pi();
        self.sample_precisions()?;
        if !self.state.is_valid() {
            return Err(WflabError::numerical(format!(
                "BPFA state diverged at sweep {}",
                self.sweep
            )));
        }
        let row = TraceRow {
            window: 0,
            sweep: self.sweep,
            gamma_eps: self.state.gamma_eps,
            gamma_s: self.state.gamma_s,
            active_atoms: self.state.active_atoms(),
        };
        self.sweep += 1;
        Ok(row)
    }

    /// Recombined reconstruction of the current state.
    pub fn reconstruction(&self) -> Vec<f64> {
        let part = self.voxels.partition();
        let grid = part.grid();
        let mut sum = vec![0.0; grid.len()];
        for i in 0..part.n_total() {
            let block = self.state.block_reconstruction(i);
            for (q, v) in block.iter().enumerate() {
                sum[part.flat_index(i, q)] += v;
            }
        }
        let cov = part.coverage();
        for (p, &c) in cov.iter().enumerate() {
            let (ix, iz) = grid.point_coords(p);
            let start = grid.index(ix, iz, 0);
            for v in &mut sum[start..start + grid.n_t] {
                *v /= c as f64;
            }
        }
        sum
    }

    /// Runs burn-in and sampling sweeps, accumulating the posterior mean and
    /// variance of the recombined reconstruction.
    pub fn run(&mut self) -> Result<PosteriorSummary> {
        let grid = *self.voxels.partition().grid();
        let mut trace = Vec::with_capacity(self.hyper.n_burnin + self.hyper.n_samples);
        let mut mean = vec![0.0; grid.len()];
        let mut m2 = vec![0.0; grid.len()];
        let mut count = 0.0;
        for n in 0..self.hyper.n_burnin + self.hyper.n_samples {
            trace.push(self.step()?);
            log::debug!("bpfa sweep {n}: gamma_eps {:.4e}", self.state.gamma_eps);
            if n >= self.hyper.n_burnin {
                let x = self.reconstruction();
                count += 1.0;
                for ((m, s), v) in mean.iter_mut().zip(m2.iter_mut()).zip(&x) {
                    let delta = v - *m;
                    *m += delta / count;
                    *s += delta * (v - *m);
                }
            }
        }
        let variance: Vec<f64> = m2.iter().map(|s| (s / count).max(0.0)).collect();
        Ok(PosteriorSummary {
            mean: FieldTensor::from_vec(grid, mean)?,
            variance: FieldTensor::from_vec(grid, variance)?,
            trace,
            n_burnin: self.hyper.n_burnin,
        })
    }
}

pub fn run_chain(
    field: &FieldTensor,
    mask: &ObservationMask,
    partition: &VoxelPartition,
    hyper: &BpfaHyperparams,
    seed: u64,
) -> Result<PosteriorSummary> {
    if mask.n_observed_entries() == 0 {
        return Err(WflabError::NoObservations);
    }
    let voxels = extract_voxels(field, mask, partition)?;
    GibbsSampler::new(&voxels, *hyper, seed)?.run()
}

/// Full BPFA configuration: prior, chain lengths and voxel geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpfaSettings {
    #[serde(flatten)]
    pub hyper: BpfaHyperparams,
    pub block_x: usize,
    pub block_z: usize,
    pub stride_x: usize,
    pub stride_z: usize,
    /// Process contiguous time windows of this length independently.
    pub time_chunk: Option<usize>,
    /// Centre and scale the observed data to unit variance before sampling;
    /// results are mapped back to the original units.
    pub standardize: bool,
}

impl Default for BpfaSettings {
    fn default() -> Self {
        BpfaSettings {
            hyper: BpfaHyperparams::default(),
            block_x: 4,
            block_z: 4,
            stride_x: 1,
            stride_z: 1,
            time_chunk: None,
            standardize: true,
        }
    }
}

fn time_window(field: &FieldTensor, start: usize, len: usize) -> Result<FieldTensor> {
    let g = *field.grid();
    let sub = GridSpec::new(g.n_x, g.n_z, len, g.dx, g.dz, g.dt)?;
    Ok(FieldTensor::from_fn(sub, |ix, iz, it| field.get(ix, iz, start + it)))
}

fn mask_window(mask: &ObservationMask, start: usize, len: usize) -> Result<ObservationMask> {
    let g = *mask.grid();
    let sub = GridSpec::new(g.n_x, g.n_z, len, g.dx, g.dz, g.dt)?;
    if mask.mode() == MaskMode::WholeHistory {
        ObservationMask::whole_history(sub, mask.observed_points().to_vec())
    } else {
        let mut entries = vec![false; sub.len()];
        for iz in 0..g.n_z {
            for ix in 0..g.n_x {
                for it in 0..len {
                    entries[sub.index(ix, iz, it)] = mask.is_observed(ix, iz, start + it);
                }
            }
        }
        ObservationMask::per_entry(sub, entries)
    }
}

/// Mean and standard deviation of the observed entries.
fn observed_moments(field: &FieldTensor, mask: &ObservationMask) -> (f64, f64) {
    let mut n = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (idx, v) in field.values().iter().enumerate() {
        if mask.is_observed_flat(idx) {
            n += 1.0;
            let delta = v - mean;
            mean += delta / n;
            m2 += delta * (v - mean);
        }
    }
    let sd = if n > 0.0 { (m2 / n).sqrt() } else { 0.0 };
    (mean, sd)
}

/// BPFA reconstruction with optional standardisation and time chunking.
pub fn reconstruct(
    field: &FieldTensor,
    mask: &ObservationMask,
    settings: &BpfaSettings,
    seed: u64,
) -> Result<PosteriorSummary> {
    let g = *field.grid();
    if !mask.grid().same_shape(&g) {
        return Err(WflabError::shape("mask grid differs from field grid"));
    }
    if mask.n_observed_entries() == 0 {
        return Err(WflabError::NoObservations);
    }
    let (shift, scale) = match observed_moments(field, mask) {
        (m, sd) if settings.standardize && sd > 0.0 => (m, sd),
        _ => (0.0, 1.0),
    };
    let work = if (shift, scale) == (0.0, 1.0) {
        field.clone()
    } else {
        FieldTensor::from_vec(g, field.values().iter().map(|v| (v - shift) / scale).collect())?
    };
    let mut summary = reconstruct_windows(&work, mask, settings, seed)?;
    if (shift, scale) != (0.0, 1.0) {
        for v in summary.mean.values_mut() {
            *v = *v * scale + shift;
        }
        for v in summary.variance.values_mut() {
            *v *= scale * scale;
        }
    }
    Ok(summary)
}

fn reconstruct_windows(
    field: &FieldTensor,
    mask: &ObservationMask,
    settings: &BpfaSettings,
    seed: u64,
) -> Result<PosteriorSummary> {
    let g = *field.grid();
    let chunk = match settings.time_chunk {
        Some(0) => return Err(WflabError::invalid("time_chunk must be >= 1")),
        Some(c) if c < g.n_t => c,
        _ => {
            let part = VoxelPartition::new(
                &g,
                settings.block_x,
                settings.block_z,
                settings.stride_x,
                settings.stride_z,
            )?;
            return run_chain(field, mask, &part, &settings.hyper, seed);
        }
    };
    let mut mean = FieldTensor::zeros(g);
    let mut variance = FieldTensor::zeros(g);
    let mut trace = Vec::new();
    for (w, start) in (0..g.n_t).step_by(chunk).enumerate() {
        let len = chunk.min(g.n_t - start);
        let f = time_window(field, start, len)?;
        let m = mask_window(mask, start, len)?;
        let part = VoxelPartition::new(
            f.grid(),
            settings.block_x,
            settings.block_z,
            settings.stride_x,
            settings.stride_z,
        )?;
        let sub_seed = seed.wrapping_add((w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let summary = run_chain(&f, &m, &part, &settings.hyper, sub_seed)
            .map_err(|e| e.with_context(format!("time window {w} starting at t index {start}")))?;
        for iz in 0..g.n_z {
            for ix in 0..g.n_x {
                mean.history_mut(ix, iz)[start..start + len]
                    .copy_from_slice(summary.mean.history(ix, iz));
                variance.history_mut(ix, iz)[start..start + len]
                    .copy_from_slice(summary.variance.history(ix, iz));
            }
        }
        trace.extend(summary.trace.into_iter().map(|r| TraceRow { window: w, ..r }));
    }
    Ok(PosteriorSummary {
        mean,
        variance,
        trace,
        n_burnin: settings.hyper.n_burnin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, nz: usize, nt: usize) -> GridSpec {
        GridSpec::new(nx, nz, nt, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn block_count_and_strides() {
        let p = VoxelPartition::new(&grid(10, 10, 3), 4, 4, 1, 1).unwrap();
        assert_eq!(p.n_total(), 49);
        assert_eq!(p.p(), 48);
        let p = VoxelPartition::new(&grid(10, 10, 1), 4, 4, 3, 2).unwrap();
        assert_eq!(p.n_total(), 3 * 4);
        let err = VoxelPartition::new(&grid(10, 10, 1), 4, 4, 4, 1).unwrap_err();
        assert!(err.to_string().contains("valid strides: [1, 2, 3]"), "{err}");
        assert!(p.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn block_index_map_matches_flat_index() {
        let g = grid(5, 4, 3);
        let p = VoxelPartition::new(&g, 2, 3, 1, 1).unwrap();
        for i in 0..p.n_total() {
            for (q, (ix, iz, it)) in p.block_index_map(i).into_iter().enumerate() {
                assert_eq!(p.flat_index(i, q), g.index(ix, iz, it));
            }
        }
    }

    #[test]
    fn selectors() {
        let g = grid(4, 4, 2);
        let f = FieldTensor::from_fn(g, |x, z, t| (x + 10 * z + 100 * t) as f64);
        let part = VoxelPartition::new(&g, 2, 2, 2, 2).unwrap();
        let full = extract_voxels(&f, &ObservationMask::all_observed(g), &part).unwrap();
        for i in 0..full.n_total() {
            assert_eq!(full.selector(i), (0..8).collect::<Vec<_>>());
        }
        let mut obs = vec![true; 16];
        for p in [0, 1, 4, 5] {
            obs[p] = false;
        }
        let mask = ObservationMask::whole_history(g, obs).unwrap();
        let v = extract_voxels(&f, &mask, &part).unwrap();
        assert_eq!(v.n_observed(0), 0);
        assert!(v.observed_values(0).is_empty());
        assert_eq!(v.n_observed(1), 8);
        assert_eq!(v.observed_values(1)[0], f.get(2, 0, 0));
    }

    #[test]
    fn init_prior_moments() {
        let part = VoxelPartition::new(&grid(4, 4, 8), 2, 2, 2, 2).unwrap();
        let hyper = BpfaHyperparams {
            k: 512,
            ..Default::default()
        };
        let st = init_state(&hyper, &part, 3).unwrap();
        let mean_norm: f64 =
            st.d.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 512.0;
        assert!((mean_norm - 1.0).abs() < 0.1, "{mean_norm}");
        assert_eq!(st, init_state(&hyper, &part, 3).unwrap());
        assert_ne!(st, init_state(&hyper, &part, 4).unwrap());
        let big = init_state(&hyper, &VoxelPartition::new(&grid(4, 4, 1), 1, 1, 1, 1).unwrap(), 9).unwrap();
        let mean_pi = big.pi.iter().sum::<f64>() / 512.0;
        let expected = 1.0 / 512.0;
        assert!(mean_pi < 10.0 * expected, "{mean_pi}");
        assert!(big.pi.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn beta_sampler_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20000;
        let m: f64 = (0..n).map(|_| sample_beta(&mut rng, 3.5, 7.5)).sum::<f64>() / n as f64;
        assert!((m - 3.5 / 11.0).abs() < 0.01, "{m}");
        let tiny: f64 = (0..n).map(|_| sample_beta(&mut rng, 0.01, 1.0)).sum::<f64>() / n as f64;
        assert!((tiny - 0.01 / 1.01).abs() < 0.004, "{tiny}");
    }

    #[test]
    fn pi_conditional_counts() {
        let hyper = BpfaHyperparams {
            k: 2,
            ..Default::default()
        };
        let st = GibbsState {
            d: vec![vec![0.0]; 2],
            z: (0..10).map(|i| vec![i < 3, true]).collect(),
            s: vec![vec![0.0; 2]; 10],
            pi: vec![0.5; 2],
            gamma_s: 1.0,
            gamma_eps: 1.0,
        };
        assert_eq!(pi_conditional(&hyper, &st, 0), (3.5, 7.5));
        assert_eq!(pi_conditional(&hyper, &st, 1), (10.5, 0.5));
        let (shape, rate) = gamma_s_conditional(&hyper, &st);
        assert_eq!(shape, 1e-6 + 10.0);
        assert_eq!(rate, 1e-6);
    }

    fn toy(seed: u64) -> (Voxels, GibbsState, BpfaHyperparams) {
        let g = grid(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FieldTensor::from_fn(g, |_, _, _| normal(&mut rng));
        let obs: Vec<bool> = (0..6).map(|p| p != 1 && p != 4).collect();
        let mask = ObservationMask::whole_history(g, obs).unwrap();
        let part = VoxelPartition::new(&g, 2, 1, 1, 1).unwrap();
        let voxels = extract_voxels(&f, &mask, &part).unwrap();
        let hyper = BpfaHyperparams {
            k: 3,
            ..Default::default()
        };
        let mut st = init_state(&hyper, &part, seed).unwrap();
        st.gamma_eps = 2.0;
        st.gamma_s = 0.7;
        st.pi = vec![0.3, 0.6, 0.9];
        for zi in &mut st.z {
            zi.iter_mut().enumerate().for_each(|(k, z)| *z = k != 1 || rng.random::<bool>());
        }
        (voxels, st, hyper)
    }

    #[test]
    fn incremental_residuals_stay_exact() {
        let (voxels, st, hyper) = toy(5);
        let mut sampler = GibbsSampler::with_state(&voxels, hyper, st, 11).unwrap();
        for _ in 0..5 {
            sampler.sample_dictionary();
            sampler.sample_supports();
            sampler.sample_weights();
            for i in 0..voxels.n_total() {
                let fresh = block_residual(sampler.state(), &voxels, i);
                for (a, b) in fresh.iter().zip(&sampler.residuals()[i]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            sampler.sample_pi();
            sampler.sample_precisions().unwrap();
        }
    }

    #[test]
    fn support_edge_cases() {
        let (voxels, mut st, _) = toy(6);
        st.pi[0] = 0.0;
        st.pi[2] = 1.0;
        assert_eq!(support_probability(&st, &voxels, 0, 0).unwrap(), 0.0);
        assert_eq!(support_probability(&st, &voxels, 0, 2).unwrap(), 1.0);
        st.s[1][1] = 0.0;
        let p = support_probability(&st, &voxels, 1, 1).unwrap();
        assert!((p - st.pi[1]).abs() < 1e-12);
    }

    #[test]
    fn inactive_atom_uses_prior() {
        let (voxels, mut st, _) = toy(7);
        for zi in &mut st.z {
            zi[0] = false;
        }
        let c = atom_conditional(&st, &voxels, 0).unwrap();
        assert!(c.mean.iter().all(|&m| m == 0.0));
        assert!(c.precision.iter().all(|&p| p == voxels.p() as f64));
        let (m, prec) = weight_conditional(&st, &voxels, 0, 0).unwrap();
        assert_eq!((m, prec), (0.0, st.gamma_s));
    }

    #[test]
    fn recombination_without_overlap_is_exact() {
        let g = grid(4, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FieldTensor::from_fn(g, |_, _, _| normal(&mut rng));
        let mut obs = vec![true; 16];
        obs[5] = false;
        let mask = ObservationMask::whole_history(g, obs).unwrap();
        let part = VoxelPartition::new(&g, 2, 2, 2, 2).unwrap();
        let voxels = extract_voxels(&f, &mask, &part).unwrap();
        let hyper = BpfaHyperparams {
            k: 4,
            n_burnin: 0,
            n_samples: 1,
            ..Default::default()
        };
        let mut sampler = GibbsSampler::new(&voxels, hyper, 1).unwrap();
        let summary = sampler.run().unwrap();
        for i in 0..part.n_total() {
            let block = sampler.state().block_reconstruction(i);
            for (q, v) in block.iter().enumerate() {
                assert_eq!(summary.mean.values()[part.flat_index(i, q)], *v);
            }
        }
        assert!(summary.variance.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chain_is_deterministic() {
        let g = grid(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FieldTensor::from_fn(g, |_, _, _| normal(&mut rng));
        let mask = ObservationMask::all_observed(g);
        let part = VoxelPartition::new(&g, 2, 2, 1, 1).unwrap();
        let hyper = BpfaHyperparams {
            k: 6,
            n_burnin: 3,
            n_samples: 3,
            ..Default::default()
        };
        let a = run_chain(&f, &mask, &part, &hyper, 8).unwrap();
        let b = run_chain(&f, &mask, &part, &hyper, 8).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.noise_precision_trace().len(), 3);
    }

    #[test]
    fn time_chunks_cover_record() {
        let g = grid(3, 3, 10);
        let f = FieldTensor::from_fn(g, |x, z, t| ((x + z) as f64 * 0.3 + t as f64 * 0.1).sin());
        let mut obs = vec![true; 9];
        obs[4] = false;
        let mask = ObservationMask::whole_history(g, obs).unwrap();
        let settings = BpfaSettings {
            hyper: BpfaHyperparams {
                k: 4,
                n_burnin: 2,
                n_samples: 2,
                ..Default::default()
            },
            block_x: 2,
            block_z: 2,
            time_chunk: Some(4),
            ..Default::default()
        };
        let s = reconstruct(&f, &mask, &settings, 1).unwrap();
        assert_eq!(s.trace.len(), 3 * 4);
        assert_eq!(s.trace.last().unwrap().window, 2);
        assert!(s.mean.is_finite());
    }
}
