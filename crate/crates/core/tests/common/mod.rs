#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wflab::bpfa::{self, BpfaHyperparams, GibbsState, VoxelPartition, Voxels};
use wflab::spectral_sim::SimulationParams;
use wflab::{FieldTensor, GridSpec, ObservationMask};

/// Desk-scale simulation: `Δt = 0.125 s`, `ω_u = 8π`, `n_ω = n_t / 2`,
/// 64 wavenumbers per axis up to 0.32 rad/m.
pub fn desk_params(n_t: usize) -> SimulationParams {
    let mut p = SimulationParams::reference();
    p.dt = 0.125;
    p.wu = 8.0 * PI;
    p.t0 = n_t as f64 * p.dt;
    p.dw = 2.0 * PI / p.t0;
    p.ku_x = 0.32;
    p.ku_z = 0.32;
    p.dk_x = 0.005;
    p.dk_z = 0.005;
    p
}

/// Wavenumber-frequency PSD from the 2D transform of `e^{-a r}`:
/// `S = S₀(ω) a / (2π C1x C1z (a² + q²)^{3/2})`, `a = ω / 2πU10`,
/// `q² = (κx/C1x)² + (κz/C1z)²`.
pub fn oracle_wf_psd(kx: f64, kz: f64, w: f64, p: &SimulationParams) -> f64 {
    let x = 1200.0 * w / (2.0 * PI * p.u10);
    let s0 = 2.0 * p.u_star * p.u_star * x * x / (w * (1.0 + x * x).powf(4.0 / 3.0));
    let a = w / (2.0 * PI * p.u10);
    let q2 = (kx / p.c1x).powi(2) + (kz / p.c1z).powi(2);
    s0 * a / (2.0 * PI * p.c1x * p.c1z * (a * a + q2).powf(1.5))
}

/// Point variance of the cosine sum: four sign combinations per term, each
/// a cosine of amplitude `A = √(4 S Δκx Δκz Δω)` contributing `A²/2`.
pub fn oracle_point_variance(p: &SimulationParams) -> f64 {
    let n_k = (p.ku_x / p.dk_x).round() as usize;
    let n_w = (p.wu / p.dw).round() as usize;
    let shift = p.freq_shift.unwrap_or(0.5 * p.dw);
    let cell = p.dk_x * p.dk_z * p.dw;
    let mut total = 0.0;
    for k in 0..n_w {
        let w = k as f64 * p.dw + shift;
        for i in 0..n_k {
            for j in 0..n_k {
                let a2 = 4.0 * oracle_wf_psd((i + 1) as f64 * p.dk_x, (j + 1) as f64 * p.dk_z, w, p) * cell;
                total += 4.0 * a2 / 2.0;
            }
        }
    }
    total
}

/// One-sided target spectrum at the simulation frequencies, `(ω_k, S(ω_k))`.
pub fn oracle_auto_spectrum(p: &SimulationParams) -> Vec<(f64, f64)> {
    let n_k = (p.ku_x / p.dk_x).round() as usize;
    let n_w = (p.wu / p.dw).round() as usize;
    let shift = p.freq_shift.unwrap_or(0.5 * p.dw);
    let cell = p.dk_x * p.dk_z * p.dw;
    (0..n_w)
        .map(|k| {
            let w = k as f64 * p.dw + shift;
            let mut power = 0.0;
            for i in 0..n_k {
                for j in 0..n_k {
                    power += 2.0 * 4.0 * oracle_wf_psd((i + 1) as f64 * p.dk_x, (j + 1) as f64 * p.dk_z, w, p) * cell;
                }
            }
            (w, power / p.dw)
        })
        .collect()
}

/// Small BPFA problem with a random state, for checking conditionals.
pub struct ToyGibbs {
    pub hyper: BpfaHyperparams,
    pub field: FieldTensor,
    pub mask: ObservationMask,
    pub partition: VoxelPartition,
    pub voxels: Voxels,
    pub state: GibbsState,
}

const TOY_SHAPES: [(usize, usize, usize, usize, usize); 4] = [
    // n_x, n_z, n_t, m_x, m_z
    (3, 3, 1, 2, 2),
    (3, 2, 2, 2, 1),
    (2, 2, 3, 2, 1),
    (3, 2, 1, 2, 2),
];

pub fn toy_gibbs(seed: u64) -> ToyGibbs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_x, n_z, n_t, m_x, m_z) = TOY_SHAPES[rng.random_range(0..TOY_SHAPES.len())];
    let grid = GridSpec::new(n_x, n_z, n_t, 1.0, 1.0, 1.0).unwrap();
    let partition = VoxelPartition::new(&grid, m_x, m_z, 1, 1).unwrap();
    assert!(partition.p() <= 6 && partition.n_total() <= 4);
    let field = FieldTensor::from_fn(grid, |_, _, _| rng.sample::<f64, _>(StandardNormal));
    let entries: Vec<bool> = (0..grid.len()).map(|_| rng.random::<f64>() < 0.7).collect();
    let mask = ObservationMask::per_entry(grid, entries).unwrap();
    let k = rng.random_range(1..=3);
    let hyper = BpfaHyperparams {
        a: rng.random_range(0.5..2.0),
        b: rng.random_range(0.5..2.0),
        c: rng.random_range(0.5..2.0),
        d: rng.random_range(0.5..2.0),
        e: rng.random_range(0.5..2.0),
        f: rng.random_range(0.5..2.0),
        k,
        n_burnin: 1,
        n_samples: 1,
    };
    let voxels = bpfa::extract_voxels(&field, &mask, &partition).unwrap();
    let n = partition.n_total();
    let p = partition.p();
    let state = GibbsState {
        d: (0..k).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect(),
        z: (0..n).map(|_| (0..k).map(|_| rng.random::<bool>()).collect()).collect(),
        s: (0..n).map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect()).collect(),
        pi: (0..k).map(|_| rng.random_range(0.05..0.95)).collect(),
        gamma_s: rng.random_range(0.5..3.0),
        gamma_eps: rng.random_range(0.5..5.0),
    };
    ToyGibbs {
        hyper,
        field,
        mask,
        partition,
        voxels,
        state,
    }
}

fn ln_gamma_free_beta(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

fn ln_gamma_free_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    (shape - 1.0) * x.ln() - rate * x
}

/// Unnormalised log joint density, computed directly from the field, mask
/// and block origins.
pub fn log_joint(t: &ToyGibbs, s: &GibbsState) -> f64 {
    let h = &t.hyper;
    let p = t.partition.p();
    let kk = h.k;
    let n = t.partition.n_total();
    let mut rss = 0.0;
    let mut n_obs = 0usize;
    for i in 0..n {
        for q in 0..p {
            let idx = t.partition.flat_index(i, q);
            if !t.mask.is_observed_flat(idx) {
                continue;
            }
            let mut fit = 0.0;
            for k in 0..kk {
                if s.z[i][k] {
                    fit += s.d[k][q] * s.s[i][k];
                }
            }
            let r = t.field.values()[idx] - fit;
            rss += r * r;
            n_obs += 1;
        }
    }
    let mut lp = -0.5 * s.gamma_eps * rss + 0.5 * n_obs as f64 * s.gamma_eps.ln();
    for k in 0..kk {
        lp -= 0.5 * p as f64 * s.d[k].iter().map(|v| v * v).sum::<f64>();
        let alpha = h.a / kk as f64;
        let beta = h.b * (kk as f64 - 1.0) / kk as f64;
        lp += ln_gamma_free_beta(s.pi[k], alpha, beta);
    }
    for i in 0..n {
        for k in 0..kk {
            lp += 0.5 * s.gamma_s.ln() - 0.5 * s.gamma_s * s.s[i][k] * s.s[i][k];
            lp += if s.z[i][k] { s.pi[k].ln() } else { (1.0 - s.pi[k]).ln() };
        }
    }
    lp + ln_gamma_free_gamma(s.gamma_s, h.c, h.d) + ln_gamma_free_gamma(s.gamma_eps, h.e, h.f)
}

/// Worst-case discrepancies found by [`check_conditionals`].
#[derive(Debug, Default, Clone, Copy)]
pub struct ConditionalErrors {
    /// Relative FD gradient at the implemented mean, `d_k`.
    pub atom_grad: f64,
    /// Relative mismatch between FD curvature and implemented precision.
    pub atom_curv: f64,
    pub weight_grad: f64,
    pub weight_curv: f64,
    /// Relative mismatch of the Bernoulli log odds.
    pub support: f64,
    /// `true` when every Beta and Gamma parameter equals the hand count.
    pub counts_exact: bool,
    /// Relative mismatch of log-joint differences against the implemented
    /// Beta/Gamma log densities.
    pub conjugate_shape: f64,
}

fn fd_derivatives(f: impl Fn(f64) -> f64, x: f64, h: f64) -> (f64, f64) {
    let (fp, f0, fm) = (f(x + h), f(x), f(x - h));
    ((fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm) / (h * h))
}

/// Check all six conditionals on `n_configs` random toy problems.
pub fn check_conditionals(n_configs: usize, seed0: u64) -> ConditionalErrors {
    let mut e = ConditionalErrors {
        counts_exact: true,
        ..Default::default()
    };
    for c in 0..n_configs {
        let t = toy_gibbs(seed0 + c as u64);
        let h = t.hyper;
        let kk = h.k;
        let n = t.partition.n_total();
        let p = t.partition.p();

        for k in 0..kk {
            let cond = bpfa::atom_conditional(&t.state, &t.voxels, k).unwrap();
            let mut at_mean = t.state.clone();
            at_mean.d[k] = cond.mean.clone();
            for q in 0..p {
                let prec = cond.precision[q];
                let f = |x: f64| {
                    let mut s = at_mean.clone();
                    s.d[k][q] = x;
                    log_joint(&t, &s)
                };
                let (g, curv) = fd_derivatives(f, cond.mean[q], 1e-3 / prec.sqrt());
                let scale = prec * (cond.mean[q].abs() + 1.0 / prec.sqrt());
                e.atom_grad = e.atom_grad.max(g.abs() / scale);
                e.atom_curv = e.atom_curv.max((curv + prec).abs() / prec);
            }
        }

        for i in 0..n {
            for k in 0..kk {
                let (mean, prec) = bpfa::weight_conditional(&t.state, &t.voxels, i, k).unwrap();
                let f = |x: f64| {
                    let mut s = t.state.clone();
                    s.s[i][k] = x;
                    log_joint(&t, &s)
                };
                let (g, curv) = fd_derivatives(f, mean, 1e-3 / prec.sqrt());
                let scale = prec * (mean.abs() + 1.0 / prec.sqrt());
                e.weight_grad = e.weight_grad.max(g.abs() / scale);
                e.weight_curv = e.weight_curv.max((curv + prec).abs() / prec);

                let prob = bpfa::support_probability(&t.state, &t.voxels, i, k).unwrap();
                let mut on = t.state.clone();
                on.z[i][k] = true;
                let mut off = t.state.clone();
                off.z[i][k] = false;
                let expect = log_joint(&t, &on) - log_joint(&t, &off);
                let got = (prob / (1.0 - prob)).ln();
                e.support = e.support.max((got - expect).abs() / expect.abs().max(1.0));
            }
        }

        let alpha0 = h.a / kk as f64;
        let beta0 = h.b * (kk as f64 - 1.0) / kk as f64;
        for k in 0..kk {
            let m = (0..n).filter(|&i| t.state.z[i][k]).count() as f64;
            let (alpha, beta) = bpfa::pi_conditional(&h, &t.state, k);
            e.counts_exact &= alpha == alpha0 + m && beta == beta0 + n as f64 - m;
            let at = |x: f64| {
                let mut s = t.state.clone();
                s.pi[k] = x;
                log_joint(&t, &s)
            };
            let lhs = at(0.3) - at(0.6);
            let rhs = ln_gamma_free_beta(0.3, alpha, beta) - ln_gamma_free_beta(0.6, alpha, beta);
            e.conjugate_shape = e.conjugate_shape.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        }

        let ss: f64 = t.state.s.iter().flatten().map(|v| v * v).sum();
        let (shape, rate) = bpfa::gamma_s_conditional(&h, &t.state);
        e.counts_exact &= shape == h.c + 0.5 * (kk * n) as f64 && rate == h.d + 0.5 * ss;
        let at = |x: f64| {
            let mut s = t.state.clone();
            s.gamma_s = x;
            log_joint(&t, &s)
        };
        let lhs = at(0.7) - at(2.1);
        let rhs = ln_gamma_free_gamma(0.7, shape, rate) - ln_gamma_free_gamma(2.1, shape, rate);
        e.conjugate_shape = e.conjugate_shape.max((lhs - rhs).abs() / rhs.abs().max(1.0));

        let mut n_obs = 0usize;
        let mut rss = 0.0;
        for i in 0..n {
            for q in 0..p {
                let idx = t.partition.flat_index(i, q);
                if t.mask.is_observed_flat(idx) {
                    let fit: f64 = (0..kk).map(|k| t.state.weight(i, k) * t.state.d[k][q]).sum();
                    rss += (t.field.values()[idx] - fit).powi(2);
                    n_obs += 1;
                }
            }
        }
        let (shape, rate) = bpfa::gamma_eps_conditional(&h, &t.state, &t.voxels).unwrap();
        e.counts_exact &= shape == h.e + 0.5 * n_obs as f64;
        e.counts_exact &= (rate - (h.f + 0.5 * rss)).abs() <= 1e-12 * rate;
        let at = |x: f64| {
            let mut s = t.state.clone();
            s.gamma_eps = x;
            log_joint(&t, &s)
        };
        let lhs = at(0.7) - at(2.1);
        let rhs = ln_gamma_free_gamma(0.7, shape, rate) - ln_gamma_free_gamma(2.1, shape, rate);
        e.conjugate_shape = e.conjugate_shape.max((lhs - rhs).abs() / rhs.abs().max(1.0));
    }
    e
}
