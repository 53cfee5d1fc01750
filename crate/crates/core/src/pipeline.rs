//! Experiment configuration and the file-based pipeline behind the CLI.
//!
//! Output directory layout:
//!
//! ```text
//! config.json                      canonical config
//! manifest.json                    sha256 of every output, per stage
//! realizations/real_NNNN.wft       simulated or ingested fields
//! mask.csv | mask.wft              whole-history or per-entry mask
//! recon/<method>/real_NNNN.wft     reconstructions
//! recon/<method>/var_NNNN.wft      posterior variance (bpfa)
//! recon/<method>/diag_NNNN.csv     solver diagnostics
//! recon/<method>/params.json       method parameters
//! stats/<method>/*.csv             spectra, correlation, coherence
//! report/<method>/*                error tables, summary and gnuplot scripts
//! ```
//!
//! No file carries timestamps, so equal configs give byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpfa::{self, BpfaSettings};
use crate::cs_baseline::{cs_reconstruct, OmpParams};
use crate::error::{Result, WflabError};
use crate::io::{self, Cell, CsvTable, RawTensor};
use crate::lowrank::{complete_time_series, AlmParams};
use crate::model::{FieldTensor, GridSpec, MaskMode, ObservationMask};
use crate::spectral_sim::{simulate_ensemble, SimulationParams};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Alm,
    Bpfa,
    Omp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Alm => "alm",
            Method::Bpfa => "bpfa",
            Method::Omp => "omp",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = WflabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alm" => Ok(Method::Alm),
            "bpfa" => Ok(Method::Bpfa),
            "omp" => Ok(Method::Omp),
            _ => Err(WflabError::invalid(format!(
                "unknown method {s:?}; expected alm, bpfa or omp"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub n_x: usize,
    pub n_z: usize,
    /// Spacing (m).
    pub dx: f64,
    pub dz: f64,
}

impl Default for SpatialGrid {
    fn default() -> Self {
        SpatialGrid {
            n_x: 10,
            n_z: 10,
            dx: 10.0,
            dz: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub mode: MaskMode,
    /// Fraction of points (or entries) removed; the count is rounded.
    pub fraction: Option<f64>,
    /// Explicit `[ix, iz]` list of missing points; overrides `fraction`.
    pub missing: Option<Vec<[usize; 2]>>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mode: MaskMode::WholeHistory,
            fraction: Some(0.6),
            missing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    /// Points for spectra; the first two also form the correlation and
    /// coherence pair. Empty means the first two missing points.
    pub points: Vec<[usize; 2]>,
    pub max_lag: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            points: Vec::new(),
            max_lag: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlwtConfig {
    /// Four face files (`.wft` with dims `[n_taps, n_t]`, or CSV with one
    /// column per tap and one row per sample).
    pub faces: [PathBuf; 4],
    /// Layout JSON; the default tiling is used when absent.
    #[serde(default)]
    pub layout: Option<PathBuf>,
    /// Sampling frequency (Hz).
    #[serde(default = "default_sampling_hz")]
    pub sampling_hz: f64,
}

fn default_sampling_hz() -> f64 {
    625.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: SpatialGrid,
    pub simulation: SimulationParams,
    pub ensemble_size: usize,
    pub mask: MaskConfig,
    pub method: Method,
    pub alm: AlmParams,
    pub bpfa: BpfaSettings,
    pub omp: OmpParams,
    pub stats: StatsConfig,
    pub blwt: Option<BlwtConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            grid: SpatialGrid::default(),
            simulation: SimulationParams::reference(),
            ensemble_size: 50,
            mask: MaskConfig::default(),
            method: Method::Alm,
            alm: AlmParams::default(),
            bpfa: BpfaSettings::default(),
            omp: OmpParams::default(),
            stats: StatsConfig::default(),
            blwt: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| WflabError::from(e).with_context("parsing config"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| WflabError::from(e).with_context(format!("reading config {}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.with_context(format!("config {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(WflabError::invalid("ensemble_size must be >= 1"));
        }
        if !(self.grid.dx > 0.0 && self.grid.dz > 0.0) {
            return Err(WflabError::invalid("grid spacings must be > 0"));
        }
        self.alm.validate().map_err(|e| e.with_context("alm"))?;
        self.bpfa.hyper.validate().map_err(|e| e.with_context("bpfa"))?;
        if let Some(f) = self.mask.fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(WflabError::invalid(format!("mask.fraction must lie in (0, 1), got {f}")));
            }
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// First 16 hex digits of the sha256 of the canonical JSON.
    pub fn hash(&self) -> String {
        io::sha256_hex(self.canonical_json().as_bytes())[..16].to_string()
    }

    /// `(dx, dz, dt)` of fields in this experiment.
    pub fn spacing(&self) -> (f64, f64, f64) {
        let dt = match &self.blwt {
            Some(b) => 1.0 / b.sampling_hz,
            None => self.simulation.dt,
        };
        (self.grid.dx, self.grid.dz, dt)
    }
}

/// Independent seed for `(stage, index)` derived from the experiment seed.
pub fn derive_seed(seed: u64, stage: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

const STAGE_MASK: u64 = 1;
const STAGE_RECON: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub detail: String,
}

/// Record of every output and stage event in an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PipelineRun {
    pub stages: BTreeMap<String, Vec<OutputRecord>>,
    pub events: Vec<Event>,
}

impl PipelineRun {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join("manifest.json");
        if !path.exists() {
            return Ok(PipelineRun::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| WflabError::from(e).with_context(format!("{}", path.display())))
    }

    fn record(&mut self, out: &Path, stage: &str, files: &[PathBuf], event: Event) -> Result<()> {
        let mut recs = Vec::with_capacity(files.len());
        for f in files {
            let rel = f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/");
            recs.push(OutputRecord {
                path: rel,
                sha256: io::file_sha256(f)?,
            });
        }
        recs.sort_by(|a, b| a.path.cmp(&b.path));
        self.stages.insert(stage.to_string(), recs);
        self.events.retain(|e| e.stage != stage);
        self.events.push(event);
        self.events.sort_by(|a, b| a.stage.cmp(&b.stage));
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(out.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn files(&self) -> impl Iterator<Item = &OutputRecord> {
        self.stages.values().flatten()
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| WflabError::from(e).with_context(format!("creating {}", p.display())))
}

fn realization_path(out: &Path, r: usize) -> PathBuf {
    out.join("realizations").join(format!("real_{r:04}.wft"))
}

fn method_dir(out: &Path, kind: &str, method: Method) -> PathBuf {
    out.join(kind).join(method.name())
}

fn write_config(out: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    let p = out.join("config.json");
    fs::write(&p, config.canonical_json() + "\n")?;
    Ok(p)
}

/// Sorted realization files in `out/realizations`.
pub fn realization_files(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("realizations");
    let entries = fs::read_dir(&dir).map_err(|e| {
        WflabError::from(e).with_context(format!("{} (run simulate or ingest first)", dir.display()))
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wft"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(WflabError::invalid(format!("no realizations in {}", dir.display())));
    }
    Ok(files)
}

fn load_realizations(out: &Path, config: &ExperimentConfig) -> Result<Vec<FieldTensor>> {
    let (dx, dz, dt) = config.spacing();
    realization_files(out)?
        .iter()
        .map(|p| io::read_field(p, dx, dz, dt))
        .collect()
}

pub fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let g = config.grid;
    let setup = config
        .simulation
        .setup(g.n_x, g.n_z, g.dx, g.dz)
        .map_err(|e| e.with_context("simulation config"))?;
    info!(
        "simulating {} realizations on {}x{}x{} with {} spectral terms",
        config.ensemble_size,
        g.n_x,
        g.n_z,
        setup.grid.n_t,
        setup.spectral.n_terms()
    );
    let ensemble = simulate_ensemble(&setup, config.seed, config.ensemble_size)
        .map_err(|e| e.with_context("simulation"))?;
    let dir = out.join("realizations");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    ensure_dir(&dir)?;
    let mut files = vec![write_config(out, config)?];
    for (r, f) in ensemble.realizations.iter().enumerate() {
        let p = realization_path(out, r);
        io::write_field(&p, f)?;
        files.push(p);
    }
    let mut run = PipelineRun::load(out)?;
    run.record(
        out,
        "simulate",
        &files,
        Event {
            stage: "simulate".into(),
            config_hash: config.hash(),
            seed: config.seed,
            detail: format!("{} realizations, n_t = {}", config.ensemble_size, setup.grid.n_t),
        },
    )?;
    Ok(files)
}

/// Mask from `cfg` on `grid`; random choices draw from `seed`.
pub fn build_mask(grid: GridSpec, cfg: &MaskConfig, seed: u64) -> Result<ObservationMask> {
    if let Some(list) = &cfg.missing {
        if cfg.mode != MaskMode::WholeHistory {
            return Err(WflabError::invalid("an explicit missing list needs whole_history mode"));
        }
        let mut observed = vec![true; grid.n_points()];
        for &[ix, iz] in list {
            if ix >= grid.n_x || iz >= grid.n_z {
                return Err(WflabError::invalid(format!(
                    "missing point ({ix}, {iz}) outside the {}x{} grid",
                    grid.n_x, grid.n_z
                )));
            }
            let p = grid.point_index(ix, iz);
            if !observed[p] {
                return Err(WflabError::invalid(format!("missing point ({ix}, {iz}) listed twice")));
            }
            observed[p] = false;
        }
        return ObservationMask::whole_history(grid, observed);
    }
    let fraction = cfg
        .fraction
        .ok_or_else(|| WflabError::invalid("mask needs either fraction or missing"))?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(WflabError::invalid(format!("mask fraction must lie in (0, 1), got {fraction}")));
    }
    let total = match cfg.mode {
        MaskMode::WholeHistory => grid.n_points(),
        MaskMode::PerEntry => grid.len(),
    };
    let n_missing = (fraction * total as f64).round() as usize;
    if n_missing == 0 || n_missing == total {
        return Err(WflabError::invalid(format!(
            "mask fraction {fraction} removes {n_missing} of {total}; need at least one missing and one observed"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; total];
    for i in sample(&mut rng, total, n_missing) {
        keep[i] = false;
    }
    match cfg.mode {
        MaskMode::WholeHistory => ObservationMask::whole_history(grid, keep),
        MaskMode::PerEntry => ObservationMask::per_entry(grid, keep),
    }
}

fn write_any_mask(out: &Path, mask: &ObservationMask) -> Result<PathBuf> {
    let csv = out.join("mask.csv");
    let wft = out.join("mask.wft");
    for p in [&csv, &wft] {
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    match mask.mode() {
        MaskMode::WholeHistory => {
            io::write_mask(&csv, mask)?;
            Ok(csv)
        }
        MaskMode::PerEntry => {
            let g = *mask.grid();
            let vals = (0..g.len()).map(|i| mask.is_observed_flat(i) as u8 as f64).collect();
            io::write_tensor(&wft, &RawTensor::new(vec![g.n_z as u64, g.n_x as u64, g.n_t as u64], vals)?)?;
            Ok(wft)
        }
    }
}

pub fn load_mask(out: &Path, grid: GridSpec) -> Result<ObservationMask> {
    let csv = out.join("mask.csv");
    if csv.exists() {
        return io::read_mask(&csv, grid);
    }
    let wft = out.join("mask.wft");
    if wft.exists() {
        let t = io::read_tensor(&wft)?;
        let f = t.into_field(grid.dx, grid.dz, grid.dt)?;
        if !f.grid().same_shape(&grid) {
            return Err(WflabError::shape("mask.wft does not match the field grid"));
        }
        return ObservationMask::per_entry(grid, f.values().iter().map(|&v| v != 0.0).collect());
    }
    Err(WflabError::invalid(format!("no mask in {} (run mask first)", out.display())))
}

fn field_grid(out: &Path, config: &ExperimentConfig) -> Result<GridSpec> {
    let first = realization_files(out)?.remove(0);
    let (dx, dz, dt) = config.spacing();
    Ok(*io::read_field(&first, dx, dz, dt)?.grid())
}

pub fn cmd_mask(config: &ExperimentConfig, out: &Path) -> Result<ObservationMask> {
    let grid = field_grid(out, config)?;
    let seed = derive_seed(config.seed, STAGE_MASK, 0);
    let mask = build_mask(grid, &config.mask, seed).map_err(|e| e.with_context("mask config"))?;
    let p = write_any_mask(out, &mask)?;
    let mut run = PipelineRun::load(out)?;
    run.record(
        out,
        "mask",
        &[p],
        Event {
            stage: "mask".into(),
            config_hash: config.hash(),
            seed,
            detail: format!(
                "{} of {} points observed",
                mask.n_observed_points(),
                grid.n_points()
            ),
        },
    )?;
    Ok(mask)
}

/// Method output for one realization.
pub struct MethodOutput {
    pub field: FieldTensor,
    pub variance: Option<FieldTensor>,
    pub diagnostics: CsvTable,
}

pub fn reconstruct_one(
    config: &ExperimentConfig,
    method: Method,
    field: &FieldTensor,
    mask: &ObservationMask,
    seed: u64,
) -> Result<MethodOutput> {
    let meta = format!("config {} method {}", config.hash(), method.name());
    match method {
        Method::Alm => {
            let (recon, reports) = complete_time_series(field, mask, &config.alm)?;
            let mut diag = CsvTable::new(&meta, &["it", "iterations", "final_residual", "converged"]);
            for (it, r) in reports.iter().enumerate() {
                diag.row(&[it.into(), r.iterations.into(), r.final_residual.into(), (r.converged as usize).into()]);
            }
            Ok(MethodOutput {
                field: recon,
                variance: None,
                diagnostics: diag,
            })
        }
        Method::Bpfa => {
            let post = bpfa::reconstruct(field, mask, &config.bpfa, seed)?;
            let mut diag = CsvTable::new(
                &format!("{meta}; gamma precisions use the shape/rate parameterisation"),
                &["window", "sweep", "gamma_eps", "gamma_s", "active_atoms"],
            );
            for r in &post.trace {
                diag.row(&[r.window.into(), r.sweep.into(), r.gamma_eps.into(), r.gamma_s.into(), r.active_atoms.into()]);
            }
            Ok(MethodOutput {
                field: post.mean,
                variance: Some(post.variance),
                diagnostics: diag,
            })
        }
        Method::Omp => {
            let cs = cs_reconstruct(field, mask, &config.omp)?;
            let mut diag = CsvTable::new(&meta, &["step", "residual_norm", "atom"]);
            for (s, r) in cs.omp.residual_trace.iter().enumerate() {
                let atom = if s == 0 { -1 } else { cs.omp.support[s - 1] as i64 };
                diag.row(&[s.into(), (*r).into(), atom.into()]);
            }
            Ok(MethodOutput {
                field: cs.field,
                variance: None,
                diagnostics: diag,
            })
        }
    }
}

fn method_params_json(config: &ExperimentConfig, method: Method) -> Result<String> {
    let params = match method {
        Method::Alm => serde_json::to_value(config.alm)?,
        Method::Bpfa => serde_json::to_value(config.bpfa)?,
        Method::Omp => serde_json::to_value(config.omp)?,
    };
    let doc = serde_json::json!({
        "method": method.name(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "params": params,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

pub fn cmd_reconstruct(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let method = config.method;
    let truths = load_realizations(out, config)?;
    let mask = load_mask(out, *truths[0].grid())?;
    let dir = method_dir(out, "recon", method);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    ensure_dir(&dir)?;
    let params = dir.join("params.json");
    fs::write(&params, method_params_json(config, method)?)?;
    let mut files = vec![params];
    for (r, truth) in truths.iter().enumerate() {
        let seed = derive_seed(config.seed, STAGE_RECON, r as u64);
        info!("reconstructing realization {r} with {}", method.name());
        let res = reconstruct_one(config, method, truth, &mask, seed)
            .map_err(|e| e.with_context(format!("{} on realization {r}", method.name())))?;
        let p = dir.join(format!("real_{r:04}.wft"));
        io::write_field(&p, &res.field)?;
        files.push(p);
        if let Some(v) = &res.variance {
            let p = dir.join(format!("var_{r:04}.wft"));
            io::write_field(&p, v)?;
            files.push(p);
        }
        let p = dir.join(format!("diag_{r:04}.csv"));
        res.diagnostics.write(&p)?;
        files.push(p);
    }
    let stage = format!("reconstruct/{}", method.name());
    let mut run = PipelineRun::load(out)?;
    run.record(
        out,
        &stage,
        &files,
        Event {
            stage: stage.clone(),
            config_hash: config.hash(),
            seed: derive_seed(config.seed, STAGE_RECON, 0),
            detail: format!("{} realizations", truths.len()),
        },
    )?;
    Ok(files)
}

fn load_reconstructions(out: &Path, config: &ExperimentConfig, n: usize) -> Result<(Vec<FieldTensor>, Option<Vec<FieldTensor>>)> {
    let dir = method_dir(out, "recon", config.method);
    let (dx, dz, dt) = config.spacing();
    let mut recon = Vec::with_capacity(n);
    let mut var = Vec::new();
    for r in 0..n {
        let p = dir.join(format!("real_{r:04}.wft"));
        recon.push(io::read_field(&p, dx, dz, dt).map_err(|e| {
            e.with_context(format!("{} (run reconstruct --method {} first)", p.display(), config.method.name()))
        })?);
        let v = dir.join(format!("var_{r:04}.wft"));
        if v.exists() {
            var.push(io::read_field(&v, dx, dz, dt)?);
        }
    }
    let var = if var.len() == n { Some(var) } else { None };
    Ok((recon, var))
}

fn stats_points(config: &ExperimentConfig, mask: &ObservationMask) -> Result<Vec<(usize, usize)>> {
    let g = mask.grid();
    let pts: Vec<(usize, usize)> = if config.stats.points.is_empty() {
        let mut missing: Vec<(usize, usize)> = (0..g.n_points())
            .map(|p| g.point_coords(p))
            .filter(|&(ix, iz)| (0..g.n_t).any(|it| !mask.is_observed(ix, iz, it)))
            .collect();
        missing.truncate(2);
        missing
    } else {
        config.stats.points.iter().map(|&[ix, iz]| (ix, iz)).collect()
    };
    for &(ix, iz) in &pts {
        if ix >= g.n_x || iz >= g.n_z {
            return Err(WflabError::invalid(format!("stats point ({ix}, {iz}) outside grid")));
        }
    }
    if pts.is_empty() {
        return Err(WflabError::invalid("no stats points configured and no missing points"));
    }
    Ok(pts)
}

fn histories(fields: &[FieldTensor], (ix, iz): (usize, usize)) -> Vec<Vec<f64>> {
    fields.iter().map(|f| f.history(ix, iz).to_vec()).collect()
}

pub fn cmd_stats(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let truths = load_realizations(out, config)?;
    let grid = *truths[0].grid();
    let mask = load_mask(out, grid)?;
    let (recon, _) = load_reconstructions(out, config, truths.len())?;
    let pts = stats_points(config, &mask)?;
    let dir = method_dir(out, "stats", config.method);
    ensure_dir(&dir)?;
    let hash = config.hash();
    let mut files = Vec::new();

    let mut cols = vec!["omega_rad_s".to_string()];
    let mut spectra = Vec::new();
    for &(ix, iz) in &pts {
        for (label, set) in [("truth", &truths), ("recon", &recon)] {
            cols.push(format!("{label}_x{ix}_z{iz}"));
            spectra.push(stats::ensemble_psd(&histories(set, (ix, iz)), grid.dt)?);
        }
    }
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut psd = CsvTable::new(
        &format!("config {hash}; one-sided PSD, omega in rad/s, density in (m/s)^2 s/rad"),
        &col_refs,
    );
    for j in 0..spectra[0].frequencies.len() {
        let mut row: Vec<Cell> = vec![spectra[0].frequencies[j].into()];
        row.extend(spectra.iter().map(|s| Cell::from(s.density[j])));
        psd.row(&row);
    }
    let p = dir.join("psd.csv");
    psd.write(&p)?;
    files.push(p);

    if pts.len() >= 2 {
        let (a, b) = (pts[0], pts[1]);
        let pair = format!("x{}_z{}__x{}_z{}", a.0, a.1, b.0, b.1);
        let ct = stats::cross_correlation(&histories(&truths, a), &histories(&truths, b), config.stats.max_lag)?;
        let cr = stats::cross_correlation(&histories(&recon, a), &histories(&recon, b), config.stats.max_lag)?;
        let mut corr = CsvTable::new(
            &format!("config {hash}; normalised cross-correlation, lag in samples of dt = {} s", grid.dt),
            &["lag", &format!("truth_{pair}"), &format!("recon_{pair}")],
        );
        for (i, &lag) in ct.lags.iter().enumerate() {
            corr.row(&[lag.into(), ct.values[i].into(), cr.values[i].into()]);
        }
        let p = dir.join("correlation.csv");
        corr.write(&p)?;
        files.push(p);

        if truths.len() >= 2 {
            let kt = stats::cross_coherence(&histories(&truths, a), &histories(&truths, b), grid.dt)?;
            let kr = stats::cross_coherence(&histories(&recon, a), &histories(&recon, b), grid.dt)?;
            let mut coh = CsvTable::new(
                &format!("config {hash}; magnitude-squared coherence, omega in rad/s"),
                &["omega_rad_s", &format!("truth_{pair}"), &format!("recon_{pair}")],
            );
            for j in 0..kt.frequencies.len() {
                coh.row(&[kt.frequencies[j].into(), kt.values[j].into(), kr.values[j].into()]);
            }
            let p = dir.join("coherence.csv");
            coh.write(&p)?;
            files.push(p);
        }
    }

    let mut series: Vec<(usize, &str)> = Vec::new();
    for (i, c) in col_refs.iter().enumerate().skip(1) {
        series.push((i + 1, c));
    }
    let p = dir.join("psd.gp");
    fs::write(&p, stats::gnuplot_script("psd.csv", "Power spectral density", "omega (rad/s)", "S (m^2/s)", &series, true))?;
    files.push(p);

    let stage = format!("stats/{}", config.method.name());
    let mut run = PipelineRun::load(out)?;
    run.record(
        out,
        &stage,
        &files,
        Event {
            stage: stage.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            detail: format!("{} points, {} realizations", pts.len(), truths.len()),
        },
    )?;
    Ok(files)
}

/// Per-point errors averaged over realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub method: Method,
    pub config_hash: String,
    pub n_realizations: usize,
    pub n_missing_points: usize,
    pub median_l1: f64,
    pub mean_hellinger: f64,
    pub spearman_error_variance: Option<f64>,
}

/// Realization-averaged per-point ℓ1 error, Hellinger distance and
/// posterior variance over the missing points.
pub fn averaged_report(
    truths: &[FieldTensor],
    recon: &[FieldTensor],
    var: Option<&[FieldTensor]>,
    mask: &ObservationMask,
) -> Result<stats::ErrorReport> {
    let mut acc: Option<stats::ErrorReport> = None;
    for (r, (t, x)) in truths.iter().zip(recon).enumerate() {
        let rep = stats::error_report(t, x, var.map(|v| &v[r]), mask)?;
        acc = Some(match acc {
            None => rep,
            Some(mut a) => {
                for (s, v) in a.l1.iter_mut().zip(&rep.l1) {
                    *s += v;
                }
                for (s, v) in a.hellinger.iter_mut().zip(&rep.hellinger) {
                    *s += v;
                }
                if let (Some(av), Some(rv)) = (a.variance.as_mut(), rep.variance.as_ref()) {
                    for (s, v) in av.iter_mut().zip(rv) {
                        *s += v;
                    }
                }
                a
            }
        });
    }
    let mut a = acc.ok_or_else(|| WflabError::invalid("no realizations to report on"))?;
    let n = truths.len() as f64;
    a.l1.iter_mut().for_each(|v| *v /= n);
    a.hellinger.iter_mut().for_each(|v| *v /= n);
    if let Some(v) = a.variance.as_mut() {
        v.iter_mut().for_each(|x| *x /= n);
    }
    a.spearman = a.variance.as_ref().and_then(|v| stats::spearman(&a.l1, v).ok());
    Ok(a)
}

pub fn cmd_report(config: &ExperimentConfig, out: &Path) -> Result<ReportSummary> {
    let truths = load_realizations(out, config)?;
    let grid = *truths[0].grid();
    let mask = load_mask(out, grid)?;
    let (recon, var) = load_reconstructions(out, config, truths.len())?;
    let rep = averaged_report(&truths, &recon, var.as_deref(), &mask)?;
    let dir = method_dir(out, "report", config.method);
    ensure_dir(&dir)?;
    let hash = config.hash();
    let mut files = Vec::new();

    let mut errors = CsvTable::new(
        &format!("config {hash}; realization-averaged errors at missing points, l1 in m/s, variance in (m/s)^2"),
        &["ix", "iz", "l1", "hellinger", "variance"],
    );
    let mut evv = CsvTable::new(
        &format!("config {hash}; error vs posterior variance, l1 in m/s, variance in (m/s)^2"),
        &["l1", "variance"],
    );
    for (i, &p) in rep.points.iter().enumerate() {
        let (ix, iz) = grid.point_coords(p);
        let v = rep.variance.as_ref().map_or(f64::NAN, |v| v[i]);
        errors.row(&[ix.into(), iz.into(), rep.l1[i].into(), rep.hellinger[i].into(), v.into()]);
        evv.row(&[rep.l1[i].into(), v.into()]);
    }
    let p = dir.join("errors.csv");
    errors.write(&p)?;
    files.push(p);
    let p = dir.join("error_vs_variance.csv");
    evv.write(&p)?;
    files.push(p);

    let mut map = CsvTable::new(&format!("config {hash}; l1 error map in m/s, 0 at observed points"), &["ix", "iz", "l1"]);
    let mut per_point = vec![0.0; grid.n_points()];
    for (i, &p) in rep.points.iter().enumerate() {
        per_point[p] = rep.l1[i];
    }
    for iz in 0..grid.n_z {
        for ix in 0..grid.n_x {
            map.row(&[ix.into(), iz.into(), per_point[grid.point_index(ix, iz)].into()]);
        }
    }
    let p = dir.join("error_map.csv");
    map.write(&p)?;
    files.push(p);

    let (ix, iz) = grid.point_coords(rep.points[0]);
    let truth_h: Vec<f64> = truths.iter().flat_map(|f| f.history(ix, iz).iter().copied()).collect();
    let recon_h: Vec<f64> = recon.iter().flat_map(|f| f.history(ix, iz).iter().copied()).collect();
    let h = stats::shared_histograms(&[&truth_h, &recon_h])?;
    let mut pdf = CsvTable::new(
        &format!(
            "config {hash}; histogram at point ({ix}, {iz}) pooled over realizations, edges in m/s; hellinger {}",
            stats::hellinger(&h[0], &h[1])?
        ),
        &["bin_left", "bin_right", "truth", "recon"],
    );
    for j in 0..h[0].probabilities.len() {
        pdf.row(&[
            h[0].bin_edges[j].into(),
            h[0].bin_edges[j + 1].into(),
            h[0].probabilities[j].into(),
            h[1].probabilities[j].into(),
        ]);
    }
    let p = dir.join("pdf.csv");
    pdf.write(&p)?;
    files.push(p);

    let summary = ReportSummary {
        method: config.method,
        config_hash: hash,
        n_realizations: truths.len(),
        n_missing_points: rep.points.len(),
        median_l1: rep.median_l1(),
        mean_hellinger: rep.hellinger.iter().sum::<f64>() / rep.hellinger.len() as f64,
        spearman_error_variance: rep.spearman,
    };
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n")?;
    files.push(p);
    let p = dir.join("pdf.gp");
    fs::write(
        &p,
        stats::gnuplot_script("pdf.csv", "Histogram at first missing point", "velocity (m/s)", "probability", &[(3, "truth"), (4, "recon")], false),
    )?;
    files.push(p);
    let p = dir.join("error_vs_variance.gp");
    fs::write(
        &p,
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'l1 error (m/s)'\n\
         set ylabel 'posterior variance'\nplot 'error_vs_variance.csv' using 1:2 with points notitle\n",
    )?;
    files.push(p);

    let stage = format!("report/{}", config.method.name());
    let mut run = PipelineRun::load(out)?;
    run.record(
        out,
        &stage,
        &files,
        Event {
            stage: stage.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            detail: format!("median l1 {}", summary.median_l1),
        },
    )?;
    Ok(summary)
}

/// Where each face tap lands in the assembled grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlwtLayout {
    pub n_x: usize,
    pub n_z: usize,
    pub taps: Vec<TapPlacement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPlacement {
    pub face: usize,
    pub tap: usize,
    pub ix: usize,
    pub iz: usize,
}

impl BlwtLayout {
    /// Four 6×10 faces tiled 2×2 into 12×20: face `f` occupies
    /// `ix ∈ 6(f mod 2) + [0, 6)`, `iz ∈ 10⌊f/2⌋ + [0, 10)`, and tap `t` of a
    /// face sits at local `(t mod 6, ⌊t/6⌋)`.
    pub fn default_tiling() -> Self {
        let mut taps = Vec::with_capacity(240);
        for face in 0..4 {
            for tap in 0..60 {
                taps.push(TapPlacement {
                    face,
                    tap,
                    ix: 6 * (face % 2) + tap % 6,
                    iz: 10 * (face / 2) + tap / 6,
                });
            }
        }
        BlwtLayout { n_x: 12, n_z: 20, taps }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| WflabError::from(e).with_context(format!("reading layout {}", path.display())))?;
        let layout: BlwtLayout = serde_json::from_str(&text)?;
        layout.validate()?;
        Ok(layout)
    }

    /// Every grid cell receives exactly one tap.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_x * self.n_z];
        let mut taps = std::collections::BTreeSet::new();
        for t in &self.taps {
            if t.face >= 4 {
                return Err(WflabError::invalid(format!("layout face {} out of 0..4", t.face)));
            }
            if t.ix >= self.n_x || t.iz >= self.n_z {
                return Err(WflabError::invalid(format!("layout cell ({}, {}) outside grid", t.ix, t.iz)));
            }
            let cell = t.ix + self.n_x * t.iz;
            if seen[cell] {
                return Err(WflabError::invalid(format!("layout cell ({}, {}) assigned twice", t.ix, t.iz)));
            }
            if !taps.insert((t.face, t.tap)) {
                return Err(WflabError::invalid(format!("face {} tap {} placed twice", t.face, t.tap)));
            }
            seen[cell] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(WflabError::invalid(format!(
                "layout leaves cell ({}, {}) empty",
                c % self.n_x,
                c / self.n_x
            )));
        }
        Ok(())
    }
}

/// Face samples as `[n_taps][n_t]`.
pub type FaceData = Vec<Vec<f64>>;

pub fn read_face(path: &Path) -> Result<FaceData> {
    if !path.exists() {
        return Err(WflabError::invalid(format!("face file {} does not exist", path.display())));
    }
    if path.extension().is_some_and(|x| x == "csv") {
        let (_, rows) = io::read_numeric_csv(path)?;
        let n_taps = rows.first().map_or(0, Vec::len);
        let mut taps = vec![Vec::with_capacity(rows.len()); n_taps];
        for (n, row) in rows.iter().enumerate() {
            if row.len() != n_taps {
                return Err(WflabError::Format {
                    path: path.display().to_string(),
                    reason: format!("row {n} has {} columns, expected {n_taps}", row.len()),
                });
            }
            for (t, &v) in row.iter().enumerate() {
                taps[t].push(v);
            }
        }
        Ok(taps)
    } else {
        let t = io::read_tensor(path)?;
        if t.dims.len() != 2 {
            return Err(WflabError::Format {
                path: path.display().to_string(),
                reason: format!("face tensor needs dims [n_taps, n_t], got {:?}", t.dims),
            });
        }
        let n_t = t.dims[1] as usize;
        Ok(t.data.chunks(n_t.max(1)).map(<[f64]>::to_vec).collect())
    }
}

pub fn write_face(path: &Path, face: &FaceData) -> Result<()> {
    let n_t = face.first().map_or(0, Vec::len);
    let data: Vec<f64> = face.iter().flatten().copied().collect();
    io::write_tensor(path, &RawTensor::new(vec![face.len() as u64, n_t as u64], data)?)
}

/// Assembled BLWT field with its sampling metadata.
#[derive(Debug, Clone)]
pub struct BlwtField {
    pub field: FieldTensor,
    pub sampling_hz: f64,
    pub n_t: usize,
}

pub fn assemble_blwt(faces: &[FaceData; 4], layout: &BlwtLayout, sampling_hz: f64) -> Result<BlwtField> {
    layout.validate()?;
    if !(sampling_hz > 0.0 && sampling_hz.is_finite()) {
        return Err(WflabError::invalid("sampling frequency must be > 0"));
    }
    let lens: Vec<Option<usize>> = faces
        .iter()
        .map(|f| {
            let n = f.first().map(Vec::len)?;
            f.iter().all(|h| h.len() == n).then_some(n)
        })
        .collect();
    for (i, l) in lens.iter().enumerate() {
        if l.is_none_or(|n| n == 0) {
            return Err(WflabError::shape(format!("face {i} has empty or ragged tap histories")));
        }
    }
    let n_t = lens[0].unwrap();
    for (i, l) in lens.iter().enumerate().skip(1) {
        if *l != Some(n_t) {
            return Err(WflabError::shape(format!(
                "time axis of face {i} has {} samples but face 0 has {n_t}",
                l.unwrap()
            )));
        }
    }
    let grid = GridSpec::new(layout.n_x, layout.n_z, n_t, 1.0, 1.0, 1.0 / sampling_hz)?;
    let mut field = FieldTensor::zeros(grid);
    for t in &layout.taps {
        let hist = faces[t.face].get(t.tap).ok_or_else(|| {
            WflabError::invalid(format!("face {} has no tap {}", t.face, t.tap))
        })?;
        field.history_mut(t.ix, t.iz).copy_from_slice(hist);
    }
    Ok(BlwtField {
        field,
        sampling_hz,
        n_t,
    })
}

/// Split an assembled field back into its four faces.
pub fn split_blwt(field: &FieldTensor, layout: &BlwtLayout) -> Result<[FaceData; 4]> {
    layout.validate()?;
    let g = field.grid();
    if g.n_x != layout.n_x || g.n_z != layout.n_z {
        return Err(WflabError::shape("field grid does not match the layout"));
    }
    let mut faces: [FaceData; 4] = Default::default();
    for f in 0..4 {
        let n = layout.taps.iter().filter(|t| t.face == f).map(|t| t.tap + 1).max().unwrap_or(0);
        faces[f] = vec![Vec::new(); n];
    }
    for t in &layout.taps {
        faces[t.face][t.tap] = field.history(t.ix, t.iz).to_vec();
    }
    Ok(faces)
}

pub fn ingest_blwt(face_files: &[PathBuf], layout: &BlwtLayout, sampling_hz: f64) -> Result<BlwtField> {
    if face_files.len() != 4 {
        return Err(WflabError::invalid(format!("expected 4 face files, got {}", face_files.len())));
    }
    let mut faces: [FaceData; 4] = Default::default();
    for (i, p) in face_files.iter().enumerate() {
        faces[i] = read_face(p).map_err(|e| e.with_context(format!("face {i}")))?;
    }
    assemble_blwt(&faces, layout, sampling_hz)
}

/// Assemble the configured BLWT faces into `realizations/real_0000.wft`.
pub fn cmd_ingest(config: &ExperimentConfig, out: &Path) -> Result<BlwtField> {
    let b = config
        .blwt
        .as_ref()
        .ok_or_else(|| WflabError::invalid("config has no blwt section"))?;
    let layout = match &b.layout {
        Some(p) => BlwtLayout::load(p)?,
        None => BlwtLayout::default_tiling(),
    };
    if layout.n_x != config.grid.n_x || layout.n_z != config.grid.n_z {
        return Err(WflabError::invalid(format!(
            "layout is {}x{} but config grid is {}x{}",
            layout.n_x, layout.n_z, config.grid.n_x, config.grid.n_z
        )));
    }
    let assembled = ingest_blwt(&b.faces, &layout, b.sampling_hz)?;
    let dir = out.join("realizations");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    ensure_dir(&dir)?;
    let p = realization_path(out, 0);
    io::write_field(&p, &assembled.field)?;
    let meta = out.join("blwt.json");
    fs::write(
        &meta,
        serde_json::to_string_pretty(&serde_json::json!({
            "sampling_hz": assembled.sampling_hz,
            "n_t": assembled.n_t,
            "n_x": layout.n_x,
            "n_z": layout.n_z,
        }))? + "\n",
    )?;
    let files = vec![write_config(out, config)?, p, meta];
    let mut run = PipelineRun::load(out)?;
    run.record(
        out,
        "simulate",
        &files,
        Event {
            stage: "simulate".into(),
            config_hash: config.hash(),
            seed: config.seed,
            detail: format!("ingested 4 faces, n_t = {}", assembled.n_t),
        },
    )?;
    Ok(assembled)
}
