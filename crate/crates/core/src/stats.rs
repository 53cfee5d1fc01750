//! Ensemble estimators and reconstruction diagnostics.
//!
//! Spectra are one-sided in angular frequency and normalised so that
//! `Σ S(ω_j) Δω` equals the (mean-removed, `1/N`) sample variance.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WflabError};
use crate::model::{FieldTensor, ObservationMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    /// Angular frequencies (rad/s).
    pub frequencies: Vec<f64>,
    pub density: Vec<f64>,
    pub n_ensemble: usize,
    pub point: Option<(usize, usize)>,
}

impl PsdEstimate {
    pub fn d_omega(&self) -> f64 {
        self.frequencies.get(1).copied().unwrap_or(0.0)
    }

    /// `Σ S Δω`.
    pub fn total_power(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.d_omega()
    }
}

fn check_records<R: AsRef<[f64]>>(records: &[R]) -> Result<usize> {
    let Some(first) = records.first() else {
        return Err(WflabError::invalid("at least one record is required"));
    };
    let n = first.as_ref().len();
    if n < 2 {
        return Err(WflabError::invalid("records need at least two samples"));
    }
    for (i, r) in records.iter().enumerate() {
        if r.as_ref().len() != n {
            return Err(WflabError::shape(format!(
                "record {i} has {} samples, record 0 has {n}",
                r.as_ref().len()
            )));
        }
    }
    Ok(n)
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(WflabError::invalid(format!("time step must be > 0, got {dt}")));
    }
    Ok(())
}

fn demean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Ensemble-averaged one-sided periodogram.
pub fn ensemble_psd<R: AsRef<[f64]>>(records: &[R], dt: f64) -> Result<PsdEstimate> {
    check_dt(dt)?;
    let n = check_records(records)?;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let half = n / 2;
    let d_omega = 2.0 * PI / (n as f64 * dt);
    let mut density = vec![0.0; half + 1];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for r in records {
        for (b, v) in buf.iter_mut().zip(demean(r.as_ref())) {
            *b = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (j, d) in density.iter_mut().enumerate() {
            let weight = if j == 0 || (n % 2 == 0 && j == half) { 1.0 } else { 2.0 };
            *d += weight * buf[j].norm_sqr();
        }
    }
    let norm = 1.0 / ((n * n) as f64 * d_omega * records.len() as f64);
    for d in &mut density {
        *d *= norm;
    }
    Ok(PsdEstimate {
        frequencies: (0..=half).map(|j| j as f64 * d_omega).collect(),
        density,
        n_ensemble: records.len(),
        point: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub lags: Vec<i64>,
    pub values: Vec<f64>,
}

impl CorrelationEstimate {
    pub fn at(&self, lag: i64) -> Option<f64> {
        self.lags.iter().position(|&l| l == lag).map(|i| self.values[i])
    }
}

/// Biased cross-correlation `R(k) = (1/N) Σ_t a_t b_{t+k}` of mean-removed
/// records, averaged over the ensemble and divided by the ensemble-averaged
/// standard deviations.
pub fn cross_correlation<R: AsRef<[f64]>>(a: &[R], b: &[R], max_lag: usize) -> Result<CorrelationEstimate> {
    let n = check_records(a)?;
    if check_records(b)? != n || a.len() != b.len() {
        return Err(WflabError::shape("both ensembles need equal counts and record lengths"));
    }
    let max_lag = max_lag.min(n - 1) as i64;
    let lags: Vec<i64> = (-max_lag..=max_lag).collect();
    let mut values = vec![0.0; lags.len()];
    let (mut va, mut vb) = (0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        let xa = demean(ra.as_ref());
        let xb = demean(rb.as_ref());
        va += variance(&xa);
        vb += variance(&xb);
        for (v, &k) in values.iter_mut().zip(&lags) {
            let mut acc = 0.0;
            for t in 0..n as i64 {
                let s = t + k;
                if (0..n as i64).contains(&s) {
                    acc += xa[t as usize] * xb[s as usize];
                }
            }
            *v += acc / n as f64;
        }
    }
    if va == 0.0 || vb == 0.0 {
        return Err(WflabError::Domain(
            "cross-correlation of a zero-variance record is undefined".into(),
        ));
    }
    let scale = 1.0 / (va * vb).sqrt();
    for v in &mut values {
        *v *= scale;
    }
    Ok(CorrelationEstimate { lags, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceEstimate {
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
}

/// Number of non-overlapping segments per record used by [`cross_coherence`].
pub const COHERENCE_SEGMENTS: usize = 8;

/// Magnitude-squared coherence from Hann-windowed segments pooled over the
/// ensemble.
pub fn cross_coherence<R: AsRef<[f64]>>(a: &[R], b: &[R], dt: f64) -> Result<CoherenceEstimate> {
    check_dt(dt)?;
    if a.len() < 2 {
        return Err(WflabError::invalid(
            "coherence needs an ensemble of at least two realizations; \
             for a single realization it is identically 1",
        ));
    }
    let n = check_records(a)?;
    if check_records(b)? != n || a.len() != b.len() {
        return Err(WflabError::shape("both ensembles need equal counts and record lengths"));
    }
    let seg = n / COHERENCE_SEGMENTS;
    if seg < 2 {
        return Err(WflabError::invalid(format!(
            "records of {n} samples are too short for {COHERENCE_SEGMENTS} segments"
        )));
    }
    let window: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(seg);
    let half = seg / 2;
    let mut sab = vec![Complex64::new(0.0, 0.0); half + 1];
    let mut saa = vec![0.0; half + 1];
    let mut sbb = vec![0.0; half + 1];
    let mut fa = vec![Complex64::new(0.0, 0.0); seg];
    let mut fb = vec![Complex64::new(0.0, 0.0); seg];
    for (ra, rb) in a.iter().zip(b) {
        for s in 0..COHERENCE_SEGMENTS {
            let xa = demean(&ra.as_ref()[s * seg..(s + 1) * seg]);
            let xb = demean(&rb.as_ref()[s * seg..(s + 1) * seg]);
            for i in 0..seg {
                fa[i] = Complex64::new(xa[i] * window[i], 0.0);
                fb[i] = Complex64::new(xb[i] * window[i], 0.0);
            }
            fft.process(&mut fa);
            fft.process(&mut fb);
            for j in 0..=half {
                sab[j] += fa[j].conj() * fb[j];
                saa[j] += fa[j].norm_sqr();
                sbb[j] += fb[j].norm_sqr();
            }
        }
    }
    let values = (0..=half)
        .map(|j| {
            let denom = saa[j] * sbb[j];
            if denom > 0.0 {
                (sab[j].norm_sqr() / denom).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let d_omega = 2.0 * PI / (seg as f64 * dt);
    Ok(CoherenceEstimate {
        frequencies: (0..=half).map(|j| j as f64 * d_omega).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPdf {
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

const MAX_BINS: usize = 10_000;

/// Shared bin edges from the Freedman–Diaconis rule on the pooled samples.
pub fn freedman_diaconis_edges(samples: &[&[f64]]) -> Result<Vec<f64>> {
    let mut pooled: Vec<f64> = samples.iter().flat_map(|s| s.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(WflabError::invalid("histogram needs at least one sample"));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(WflabError::invalid("histogram samples must be finite"));
    }
    pooled.sort_by(f64::total_cmp);
    let (lo, hi) = (pooled[0], pooled[pooled.len() - 1]);
    if hi == lo {
        return Ok(vec![lo - 0.5, lo + 0.5]);
    }
    let iqr = quantile(&pooled, 0.75) - quantile(&pooled, 0.25);
    let h = 2.0 * iqr / (pooled.len() as f64).cbrt();
    let bins = if h > 0.0 {
        (((hi - lo) / h).ceil() as usize).clamp(1, MAX_BINS)
    } else {
        1
    };
    Ok((0..=bins)
        .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 })
        .collect())
}

pub fn histogram(sample: &[f64], edges: &[f64]) -> Result<HistogramPdf> {
    if edges.len() < 2 {
        return Err(WflabError::invalid("histogram needs at least one bin"));
    }
    if sample.is_empty() {
        return Err(WflabError::invalid("histogram needs at least one sample"));
    }
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0usize; bins];
    for &v in sample {
        if !(lo..=hi).contains(&v) {
            return Err(WflabError::Domain(format!("sample {v} lies outside [{lo}, {hi}]")));
        }
        let j = edges[1..].partition_point(|&e| e <= v).min(bins - 1);
        counts[j] += 1;
    }
    let total = sample.len() as f64;
    Ok(HistogramPdf {
        bin_edges: edges.to_vec(),
        probabilities: counts.iter().map(|&c| c as f64 / total).collect(),
    })
}

/// Histograms of several samples over one shared set of bins.
pub fn shared_histograms(samples: &[&[f64]]) -> Result<Vec<HistogramPdf>> {
    let edges = freedman_diaconis_edges(samples)?;
    samples.iter().map(|s| histogram(s, &edges)).collect()
}

/// `H = (1/√2) ‖√p − √q‖₂`.
pub fn hellinger(p: &HistogramPdf, q: &HistogramPdf) -> Result<f64> {
    if p.bin_edges != q.bin_edges || p.probabilities.len() != q.probabilities.len() {
        return Err(WflabError::shape("Hellinger distance needs identical bin edges"));
    }
    let s: f64 = p
        .probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((s / 2.0).sqrt().min(1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(WflabError::shape("correlation needs two equal-length samples of size >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(WflabError::Domain("correlation of a constant sample is undefined".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Spatial point indices evaluated (points with missing entries).
    pub points: Vec<usize>,
    /// Time-averaged absolute error per point.
    pub l1: Vec<f64>,
    pub hellinger: Vec<f64>,
    /// Time-averaged posterior variance per point, when supplied.
    pub variance: Option<Vec<f64>>,
    /// Spearman correlation between `l1` and `variance`; `None` when either
    /// is constant or no variance was supplied.
    pub spearman: Option<f64>,
}

impl ErrorReport {
    pub fn median_l1(&self) -> f64 {
        median(&self.l1)
    }
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Diagnostics over the missing entries of `mask`.
pub fn error_report(
    truth: &FieldTensor,
    reconstruction: &FieldTensor,
    posterior_variance: Option<&FieldTensor>,
    mask: &ObservationMask,
) -> Result<ErrorReport> {
    let g = *truth.grid();
    if !reconstruction.grid().same_shape(&g)
        || !mask.grid().same_shape(&g)
        || posterior_variance.is_some_and(|v| !v.grid().same_shape(&g))
    {
        return Err(WflabError::shape("truth, reconstruction, variance and mask grids differ"));
    }
    let mut points = Vec::new();
    let mut l1 = Vec::new();
    let mut hell = Vec::new();
    let mut var = Vec::new();
    for p in 0..g.n_points() {
        let (ix, iz) = g.point_coords(p);
        let missing: Vec<usize> = (0..g.n_t).filter(|&it| !mask.is_observed(ix, iz, it)).collect();
        if missing.is_empty() {
            continue;
        }
        let t: Vec<f64> = missing.iter().map(|&it| truth.get(ix, iz, it)).collect();
        let r: Vec<f64> = missing.iter().map(|&it| reconstruction.get(ix, iz, it)).collect();
        let m = missing.len() as f64;
        l1.push(t.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / m);
        let h = shared_histograms(&[&t, &r])?;
        hell.push(hellinger(&h[0], &h[1])?);
        if let Some(v) = posterior_variance {
            var.push(missing.iter().map(|&it| v.get(ix, iz, it)).sum::<f64>() / m);
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(WflabError::invalid("error report needs at least one missing point"));
    }
    let (variance, rho) = if posterior_variance.is_some() {
        let rho = spearman(&l1, &var).ok();
        (Some(var), rho)
    } else {
        (None, None)
    };
    Ok(ErrorReport {
        points,
        l1,
        hellinger: hell,
        variance,
        spearman: rho,
    })
}

/// A gnuplot script plotting `series` (1-based column, title) against
/// column 1 of a comma-separated data file with a `#` comment line and a
/// header row.
pub fn gnuplot_script(data_file: &str, title: &str, xlabel: &str, ylabel: &str, series: &[(usize, &str)], log_y: bool) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str(&format!("set title '{title}'\n"));
    s.push_str(&format!("set xlabel '{xlabel}'\nset ylabel '{ylabel}'\n"));
    if log_y {
        s.push_str("set logscale y\n");
    }
    let plots: Vec<String> = series
        .iter()
        .map(|(col, label)| format!("'{data_file}' using 1:{col} with lines title '{label}'"))
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s
}
