//! Homogeneous 2D + time wind velocity fields simulated as stochastic waves.
//!
//! The target wavenumber-frequency spectrum combines a Davenport auto-PSD
//! with an exponential spatial coherence. Realizations are sums of
//! four-cosine groups per `(κx, κz, ω)` triple with independent uniform
//! phases:
//!
//! ```text
//! v(x,z,t) = Σ_ijk A_ijk [ cos(κx_i x + κz_j z + ω_k t + φ1)
//!                        + cos(κx_i x + κz_j z − ω_k t + φ2)
//!                        + cos(κx_i x − κz_j z + ω_k t + φ3)
//!                        + cos(κx_i x − κz_j z − ω_k t + φ4) ]
//! A_ijk = sqrt(4 S(κx_i, κz_j, ω_k) Δκx Δκz Δω)
//! ```
//!
//! Wavenumbers are `κ_i = i·Δκ, i = 1..N_κ`. Frequencies are shifted off the
//! origin, `ω_k = k·Δω + shift` for `k = 0..N_ω`, since the spectrum is
//! singular at `ω = 0`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WflabError};
use crate::model::{FieldTensor, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DavenportParams {
    /// Shear flow velocity u* (m/s).
    pub u_star: f64,
    /// Mean wind velocity at 10 m (m/s).
    pub u10: f64,
}

impl DavenportParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_star > 0.0 && self.u10 > 0.0) {
            return Err(WflabError::invalid(format!(
                "u_star and U10 must be > 0, got {} and {}",
                self.u_star, self.u10
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceParams {
    pub c1x: f64,
    pub c1z: f64,
}

impl CoherenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1x > 0.0 && self.c1z > 0.0) {
            return Err(WflabError::invalid(format!(
                "decay coefficients must be > 0, got {} and {}",
                self.c1x, self.c1z
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid {
    pub n_kx: usize,
    pub n_kz: usize,
    pub n_w: usize,
    /// rad/m
    pub dkx: f64,
    /// rad/m
    pub dkz: f64,
    /// rad/s
    pub dw: f64,
    /// Offset added to every frequency sample (rad/s).
    pub freq_shift: f64,
}

impl SpectralGrid {
    /// Grid with the usual half-step frequency shift.
    pub fn new(n_kx: usize, n_kz: usize, n_w: usize, dkx: f64, dkz: f64, dw: f64) -> Result<Self> {
        let g = SpectralGrid {
            n_kx,
            n_kz,
            n_w,
            dkx,
            dkz,
            dw,
            freq_shift: 0.5 * dw,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_kx == 0 || self.n_kz == 0 || self.n_w == 0 {
            return Err(WflabError::invalid("spectral grid counts must be >= 1"));
        }
        for (name, v) in [("dkx", self.dkx), ("dkz", self.dkz), ("dw", self.dw)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(WflabError::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.freq_shift > 0.0 && self.freq_shift.is_finite()) {
            return Err(WflabError::invalid(
                "freq_shift must be > 0 so the spectrum is never evaluated at ω = 0",
            ));
        }
        Ok(())
    }

    pub fn kx(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.dkx
    }

    pub fn kz(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.dkz
    }

    pub fn omega(&self, k: usize) -> f64 {
        k as f64 * self.dw + self.freq_shift
    }

    pub fn k_upper_x(&self) -> f64 {
        self.n_kx as f64 * self.dkx
    }

    pub fn k_upper_z(&self) -> f64 {
        self.n_kz as f64 * self.dkz
    }

    pub fn omega_upper(&self) -> f64 {
        self.n_w as f64 * self.dw
    }

    pub fn n_terms(&self) -> usize {
        self.n_kx * self.n_kz * self.n_w
    }

    /// Flat index of term `(i, j, k)`; frequency varies fastest.
    #[inline]
    pub fn term_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_kz + j) * self.n_w + k
    }

    /// Checks `dt ≤ π/ω_u`.
    pub fn check_time_step(&self, dt: f64) -> Result<()> {
        let limit = PI / self.omega_upper();
        if dt > limit * (1.0 + 1e-9) {
            return Err(WflabError::invalid(format!(
                "time step {dt} s exceeds π/ω_u = {limit} s"
            )));
        }
        Ok(())
    }
}

/// Davenport auto-PSD `S₀(ω)` in (m/s)² per rad/s.
pub fn davenport_psd(w: f64, p: &DavenportParams) -> Result<f64> {
    p.validate()?;
    if w == 0.0 {
        return Err(WflabError::Domain(
            "Davenport PSD is singular at ω = 0; evaluate on the shifted frequency grid".into(),
        ));
    }
    Ok(davenport_unchecked(w, p))
}

#[inline]
fn davenport_unchecked(w: f64, p: &DavenportParams) -> f64 {
    let x = 1200.0 * w / (2.0 * PI * p.u10);
    let x2 = x * x;
    2.0 * p.u_star * p.u_star * x2 / (w.abs() * (1.0 + x2).powf(4.0 / 3.0))
}

/// Spatial coherence between points separated by `(xi_x, xi_z)` metres.
pub fn coherence(
    xi_x: f64,
    xi_z: f64,
    w: f64,
    p: &DavenportParams,
    c: &CoherenceParams,
) -> Result<f64> {
    p.validate()?;
    c.validate()?;
    let radicand = c.c1x * c.c1x * xi_x * xi_x + c.c1z * c.c1z * xi_z * xi_z;
    if radicand < 0.0 || !radicand.is_finite() {
        return Err(WflabError::Domain(format!(
            "coherence radicand {radicand} is not a non-negative number"
        )));
    }
    Ok((-(w.abs() / (2.0 * PI * p.u10)) * radicand.sqrt()).exp())
}

/// Wavenumber-frequency PSD `S(κx, κz, ω)`: the 2D spatial Fourier transform
/// of `S₀(ω)·γ(ξx, ξz, ω)`, normalised by `(2π)⁻²`.
pub fn wavenumber_frequency_psd(
    kx: f64,
    kz: f64,
    w: f64,
    p: &DavenportParams,
    c: &CoherenceParams,
) -> Result<f64> {
    p.validate()?;
    c.validate()?;
    if w == 0.0 {
        return Err(WflabError::Domain(
            "wavenumber-frequency PSD is singular at ω = 0".into(),
        ));
    }
    Ok(wf_psd_unchecked(kx, kz, w, p, c))
}

#[inline]
fn wf_psd_unchecked(kx: f64, kz: f64, w: f64, p: &DavenportParams, c: &CoherenceParams) -> f64 {
    let a = w.abs() / (2.0 * PI * p.u10);
    let a2 = a * a;
    let q2 = (kx / c.c1x).powi(2) + (kz / c.c1z).powi(2);
    let x = 1200.0 * w / (2.0 * PI * p.u10);
    let x2 = x * x;
    let auto = x2 / (w.abs() * (1.0 + x2).powf(4.0 / 3.0));
    p.u_star * p.u_star / (PI * c.c1x * c.c1z * a2) * auto * (1.0 + q2 / a2).powf(-1.5)
}

/// Cosine amplitudes `A_ijk`, laid out by [`SpectralGrid::term_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct Amplitudes {
    pub grid: SpectralGrid,
    pub values: Vec<f64>,
}

impl Amplitudes {
    pub fn compute(sgrid: &SpectralGrid, p: &DavenportParams, c: &CoherenceParams) -> Result<Self> {
        sgrid.validate()?;
        p.validate()?;
        c.validate()?;
        let cell = sgrid.dkx * sgrid.dkz * sgrid.dw;
        let mut values = vec![0.0; sgrid.n_terms()];
        for i in 0..sgrid.n_kx {
            for j in 0..sgrid.n_kz {
                for k in 0..sgrid.n_w {
                    let s = wf_psd_unchecked(sgrid.kx(i), sgrid.kz(j), sgrid.omega(k), p, c);
                    values[sgrid.term_index(i, j, k)] = (4.0 * s * cell).sqrt();
                }
            }
        }
        Ok(Amplitudes {
            grid: *sgrid,
            values,
        })
    }

    pub fn zeros(sgrid: &SpectralGrid) -> Self {
        Amplitudes {
            grid: *sgrid,
            values: vec![0.0; sgrid.n_terms()],
        }
    }

    /// Point variance implied by the amplitudes: each of the four cosines of
    /// amplitude A contributes A²/2.
    pub fn variance(&self) -> f64 {
        self.values.iter().map(|a| 2.0 * a * a).sum()
    }
}

/// The four independent phase arrays, each laid out by
/// [`SpectralGrid::term_index`], values in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSet {
    pub grid: SpectralGrid,
    pub phases: [Vec<f64>; 4],
}

impl PhaseSet {
    /// Phases for realization `stream` of the run seeded with `seed`. Each
    /// realization has its own ChaCha stream, so any one of them can be
    /// regenerated without producing the others.
    pub fn generate(sgrid: &SpectralGrid, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let n = sgrid.n_terms();
        let mut draw = || -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() * 2.0 * PI).collect() };
        let phases = [draw(), draw(), draw(), draw()];
        PhaseSet {
            grid: *sgrid,
            phases,
        }
    }
}

/// Evaluate one realization on `grid` for given amplitudes and phases.
///
/// Grid point `(ix, iz)` sits at `x = ix·dx`, `z = iz·dz`, and time sample
/// `n` at `t = n·dt`.
pub fn synthesize(grid: &GridSpec, amps: &Amplitudes, phases: &PhaseSet) -> Result<FieldTensor> {
    grid.validate()?;
    let sg = &amps.grid;
    if phases.grid != *sg || phases.phases.iter().any(|p| p.len() != sg.n_terms()) {
        return Err(WflabError::shape("phase arrays do not match the spectral grid"));
    }
    if amps.values.len() != sg.n_terms() {
        return Err(WflabError::shape("amplitude array does not match the spectral grid"));
    }
    sg.check_time_step(grid.dt)?;

    let coeffs = frequency_coefficients(grid, amps, phases);
    let mut field = FieldTensor::zeros(*grid);
    match fft_length(grid, sg) {
        Some(len) => time_series_fft(grid, sg, &coeffs, len, &mut field),
        None => time_series_direct(grid, sg, &coeffs, &mut field),
    }
    Ok(field)
}

/// `C_k(x, z)` such that `v(x, z, t) = Re Σ_k C_k(x, z) e^{iω_k t}`, indexed
/// `[point * n_w + k]`.
fn frequency_coefficients(grid: &GridSpec, amps: &Amplitudes, phases: &PhaseSet) -> Vec<Complex64> {
    let sg = &amps.grid;
    let (n_kx, n_kz, n_w) = (sg.n_kx, sg.n_kz, sg.n_w);
    let unit: Vec<[Complex64; 4]> = (0..sg.n_terms())
        .map(|t| {
            let a = amps.values[t];
            std::array::from_fn(|q| Complex64::from_polar(a, phases.phases[q][t]))
        })
        .collect();
    let ez: Vec<Complex64> = (0..grid.n_z)
        .flat_map(|iz| {
            let z = iz as f64 * grid.dz;
            (0..n_kz).map(move |j| Complex64::from_polar(1.0, sg.kz(j) * z))
        })
        .collect();

    // G±[i][z][k] = Σ_j A (e^{i(κz z + φ)} + e^{i(−κz z + φ')})
    let partial: Vec<(Vec<Complex64>, Vec<Complex64>)> = (0..n_kx)
        .into_par_iter()
        .map(|i| {
            let mut plus = vec![Complex64::new(0.0, 0.0); grid.n_z * n_w];
            let mut minus = vec![Complex64::new(0.0, 0.0); grid.n_z * n_w];
            for iz in 0..grid.n_z {
                let row = &ez[iz * n_kz..(iz + 1) * n_kz];
                let p_out = &mut plus[iz * n_w..(iz + 1) * n_w];
                let m_out = &mut minus[iz * n_w..(iz + 1) * n_w];
                for (j, e) in row.iter().enumerate() {
                    let ec = e.conj();
                    let base = sg.term_index(i, j, 0);
                    for k in 0..n_w {
                        let u = &unit[base + k];
                        p_out[k] += e * u[0] + ec * u[2];
                        m_out[k] += e * u[1] + ec * u[3];
                    }
                }
            }
            (plus, minus)
        })
        .collect();

    let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.n_points() * n_w];
    coeffs
        .par_chunks_mut(n_w)
        .enumerate()
        .for_each(|(p, out)| {
            let (ix, iz) = grid.point_coords(p);
            let x = ix as f64 * grid.dx;
            for (i, (plus, minus)) in partial.iter().enumerate() {
                let ex = Complex64::from_polar(1.0, sg.kx(i) * x);
                let gp = &plus[iz * n_w..(iz + 1) * n_w];
                let gm = &minus[iz * n_w..(iz + 1) * n_w];
                for k in 0..n_w {
                    out[k] += ex * gp[k] + (ex * gm[k]).conj();
                }
            }
        });
    coeffs
}

/// FFT length `L` with `Δω·Δt·L = 2π`, when it is an integer large enough to
/// hold both the record and the frequency band.
fn fft_length(grid: &GridSpec, sg: &SpectralGrid) -> Option<usize> {
    let l = 2.0 * PI / (sg.dw * grid.dt);
    let rounded = l.round();
    if (l - rounded).abs() > 1e-9 * l || rounded < grid.n_t as f64 || rounded < sg.n_w as f64 {
        return None;
    }
    Some(rounded as usize)
}

fn time_series_fft(
    grid: &GridSpec,
    sg: &SpectralGrid,
    coeffs: &[Complex64],
    len: usize,
    field: &mut FieldTensor,
) {
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(len);
    let shift: Vec<Complex64> = (0..grid.n_t)
        .map(|n| Complex64::from_polar(1.0, sg.freq_shift * n as f64 * grid.dt))
        .collect();
    let n_t = grid.n_t;
    field
        .values_mut()
        .par_chunks_mut(n_t)
        .zip(coeffs.par_chunks(sg.n_w))
        .for_each(|(out, c)| {
            let mut buf = vec![Complex64::new(0.0, 0.0); len];
            buf[..sg.n_w].copy_from_slice(c);
            fft.process(&mut buf);
            for n in 0..n_t {
                out[n] = (shift[n] * buf[n]).re;
            }
        });
}

fn time_series_direct(grid: &GridSpec, sg: &SpectralGrid, coeffs: &[Complex64], field: &mut FieldTensor) {
    let n_t = grid.n_t;
    field
        .values_mut()
        .par_chunks_mut(n_t)
        .zip(coeffs.par_chunks(sg.n_w))
        .for_each(|(out, c)| {
            for (k, ck) in c.iter().enumerate() {
                let (mag, arg) = ck.to_polar();
                if mag == 0.0 {
                    continue;
                }
                let w = sg.omega(k);
                for (n, o) in out.iter_mut().enumerate() {
                    *o += mag * (w * n as f64 * grid.dt + arg).cos();
                }
            }
        });
}

pub fn simulate_realization(
    grid: &GridSpec,
    sgrid: &SpectralGrid,
    p: &DavenportParams,
    c: &CoherenceParams,
    phases: &PhaseSet,
) -> Result<FieldTensor> {
    let amps = Amplitudes::compute(sgrid, p, c)?;
    synthesize(grid, &amps, phases)
}

/// Everything needed to draw realizations on a spatial grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSetup {
    pub grid: GridSpec,
    pub spectral: SpectralGrid,
    pub davenport: DavenportParams,
    pub coherence: CoherenceParams,
}

#[derive(Debug, Clone)]
pub struct RealizationEnsemble {
    pub seed: u64,
    pub realizations: Vec<FieldTensor>,
}

/// Realization `r` uses phase stream `r` of `seed`.
pub fn simulate_ensemble(setup: &SimulationSetup, seed: u64, ensemble_size: usize) -> Result<RealizationEnsemble> {
    if ensemble_size == 0 {
        return Err(WflabError::invalid("ensemble_size must be >= 1"));
    }
    let amps = Amplitudes::compute(&setup.spectral, &setup.davenport, &setup.coherence)?;
    let realizations = (0..ensemble_size)
        .into_par_iter()
        .map(|r| {
            let phases = PhaseSet::generate(&setup.spectral, seed, r as u64);
            synthesize(&setup.grid, &amps, &phases)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RealizationEnsemble { seed, realizations })
}

/// Simulation parameters under their conventional names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    /// Total record length (s).
    #[serde(rename = "T0")]
    pub t0: f64,
    /// Upper cut-off frequency (rad/s).
    pub wu: f64,
    /// Time step (s).
    pub dt: f64,
    /// Frequency increment (rad/s).
    pub dw: f64,
    pub ku_x: f64,
    pub ku_z: f64,
    pub dk_x: f64,
    pub dk_z: f64,
    #[serde(rename = "C1x")]
    pub c1x: f64,
    #[serde(rename = "C1z")]
    pub c1z: f64,
    #[serde(rename = "U10")]
    pub u10: f64,
    pub u_star: f64,
    /// Frequency shift (rad/s); half a frequency step when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_shift: Option<f64>,
}

impl SimulationParams {
    /// The parameter set of the 100-point, 10 m spacing reference case.
    pub fn reference() -> Self {
        let wu = 8.0 * PI;
        let t0 = 511.62;
        SimulationParams {
            t0,
            wu,
            dt: 0.0125,
            dw: 2.0 * PI / t0,
            ku_x: PI,
            ku_z: PI,
            dk_x: 0.002,
            dk_z: 0.002,
            c1x: 7.0,
            c1z: 7.0,
            u10: 31.88,
            u_star: 1.691,
            freq_shift: None,
        }
    }

    pub fn davenport(&self) -> DavenportParams {
        DavenportParams {
            u_star: self.u_star,
            u10: self.u10,
        }
    }

    pub fn coherence(&self) -> CoherenceParams {
        CoherenceParams {
            c1x: self.c1x,
            c1z: self.c1z,
        }
    }

    fn count(name: &str, upper: f64, step: f64) -> Result<usize> {
        if !(upper > 0.0 && step > 0.0 && upper.is_finite() && step.is_finite()) {
            return Err(WflabError::invalid(format!(
                "{name}: cut-off and increment must be > 0"
            )));
        }
        let n = (upper / step).round();
        if n < 1.0 {
            return Err(WflabError::invalid(format!("{name}: fewer than one sample")));
        }
        Ok(n as usize)
    }

    pub fn spectral_grid(&self) -> Result<SpectralGrid> {
        let g = SpectralGrid {
            n_kx: Self::count("ku_x/dk_x", self.ku_x, self.dk_x)?,
            n_kz: Self::count("ku_z/dk_z", self.ku_z, self.dk_z)?,
            n_w: Self::count("wu/dw", self.wu, self.dw)?,
            dkx: self.dk_x,
            dkz: self.dk_z,
            dw: self.dw,
            freq_shift: self.freq_shift.unwrap_or(0.5 * self.dw),
        };
        g.validate()?;
        g.check_time_step(self.dt)?;
        Ok(g)
    }

    pub fn n_t(&self) -> Result<usize> {
        Self::count("T0/dt", self.t0, self.dt)
    }

    pub fn setup(&self, n_x: usize, n_z: usize, dx: f64, dz: f64) -> Result<SimulationSetup> {
        let davenport = self.davenport();
        let coherence = self.coherence();
        davenport.validate()?;
        coherence.validate()?;
        Ok(SimulationSetup {
            grid: GridSpec::new(n_x, n_z, self.n_t()?, dx, dz, self.dt)?,
            spectral: self.spectral_grid()?,
            davenport,
            coherence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ref_params() -> (DavenportParams, CoherenceParams) {
        (
            DavenportParams {
                u_star: 1.691,
                u10: 31.88,
            },
            CoherenceParams { c1x: 7.0, c1z: 7.0 },
        )
    }

    #[test]
    fn davenport_symmetry_and_decay() {
        let (p, _) = ref_params();
        for w in [0.01, 0.3, 1.0, 7.5, 25.0] {
            assert_eq!(davenport_psd(w, &p).unwrap(), davenport_psd(-w, &p).unwrap());
            assert!(davenport_psd(w, &p).unwrap() > 0.0);
        }
        // peak sits at (1200 ω / 2πU10)² = 3/5
        let peak = (0.6f64).sqrt() * 2.0 * PI * p.u10 / 1200.0;
        let mut prev = davenport_psd(peak, &p).unwrap();
        for i in 1..200 {
            let s = davenport_psd(peak + 0.1 * i as f64, &p).unwrap();
            assert!(s < prev);
            prev = s;
        }
        assert!(matches!(davenport_psd(0.0, &p), Err(WflabError::Domain(_))));
    }

    #[test]
    fn davenport_reference_value() {
        // x = 1200/(2π·31.88) = 5.99082...; 2u*²x²/(1+x²)^{4/3}, evaluated
        // independently with mpmath at 30 digits.
        let (p, _) = ref_params();
        let s = davenport_psd(1.0, &p).unwrap();
        assert_relative_eq!(s, 1.6714034982645461, max_relative = 1e-13);
    }

    #[test]
    fn coherence_limits() {
        let (p, c) = ref_params();
        for w in [0.0, 0.5, 3.0] {
            assert_eq!(coherence(0.0, 0.0, w, &p, &c).unwrap(), 1.0);
        }
        assert_eq!(coherence(25.0, 0.0, 0.0, &p, &c).unwrap(), 1.0);
        let a = coherence(10.0, 0.0, 1.0, &p, &c).unwrap();
        let b = coherence(20.0, 0.0, 1.0, &p, &c).unwrap();
        let d = coherence(10.0, 0.0, 2.0, &p, &c).unwrap();
        assert!(a > b && a > d && b > 0.0);
        // exp(-7·√200/(2π·31.88)), mpmath
        assert_relative_eq!(
            coherence(10.0, 10.0, 1.0, &p, &c).unwrap(),
            0.6100503482537007,
            max_relative = 1e-13
        );
    }

    #[test]
    fn wf_psd_even_and_reference() {
        let (p, c) = ref_params();
        let s = wavenumber_frequency_psd(0.1, 0.1, 1.0, &p, &c).unwrap();
        assert_eq!(s, wavenumber_frequency_psd(-0.1, 0.1, 1.0, &p, &c).unwrap());
        assert_eq!(s, wavenumber_frequency_psd(0.1, -0.1, 1.0, &p, &c).unwrap());
        assert_eq!(s, wavenumber_frequency_psd(0.1, 0.1, -1.0, &p, &c).unwrap());
        // mpmath, 30 digits
        assert_relative_eq!(s, 3.0070820228565949, max_relative = 1e-12);
        assert!(wavenumber_frequency_psd(0.1, 0.1, 0.0, &p, &c).is_err());
    }

    #[test]
    fn fft_and_direct_paths_agree() {
        let (p, c) = ref_params();
        let grid = GridSpec::new(3, 2, 64, 10.0, 10.0, 0.125).unwrap();
        let sg = SpectralGrid::new(4, 3, 32, 0.01, 0.01, PI / (32.0 * 0.125)).unwrap();
        assert_eq!(fft_length(&grid, &sg), Some(64));
        let amps = Amplitudes::compute(&sg, &p, &c).unwrap();
        let phases = PhaseSet::generate(&sg, 3, 0);
        let coeffs = frequency_coefficients(&grid, &amps, &phases);
        let mut a = FieldTensor::zeros(grid);
        let mut b = FieldTensor::zeros(grid);
        time_series_fft(&grid, &sg, &coeffs, 64, &mut a);
        time_series_direct(&grid, &sg, &coeffs, &mut b);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn time_step_limit() {
        let sg = SpectralGrid::new(2, 2, 8, 0.1, 0.1, PI).unwrap();
        assert!(sg.check_time_step(0.125).is_ok());
        assert!(sg.check_time_step(0.2).is_err());
    }

    #[test]
    fn phases_are_reproducible_and_uniform() {
        let sg = SpectralGrid::new(8, 8, 64, 0.1, 0.1, 0.1).unwrap();
        let a = PhaseSet::generate(&sg, 11, 4);
        let b = PhaseSet::generate(&sg, 11, 4);
        let other = PhaseSet::generate(&sg, 11, 5);
        assert_eq!(a, b);
        assert_ne!(a, other);
        let all: Vec<f64> = a.phases.iter().flatten().copied().collect();
        assert!(all.iter().all(|&v| (0.0..2.0 * PI).contains(&v)));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean - PI).abs() < 0.05);
    }

    #[test]
    fn reference_params_derive_grid() {
        let r = SimulationParams::reference();
        let sg = r.spectral_grid().unwrap();
        assert_eq!(sg.n_kx, 1571);
        assert_eq!(sg.n_kz, 1571);
        assert_eq!(sg.n_w, 2046);
        assert_eq!(r.n_t().unwrap(), 40930);
        let json = serde_json::to_string(&r).unwrap();
        for key in ["\"T0\"", "\"wu\"", "\"dk_x\"", "\"C1x\"", "\"U10\"", "\"u_star\""] {
            assert!(json.contains(key), "{key} missing from {json}");
        }
    }
}
