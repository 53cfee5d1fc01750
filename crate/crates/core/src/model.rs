//! Shared data model: sampling grids, space-time field tensors and
//! observation masks.
//!
//! Field values are stored flat with time varying fastest, then `x`, then
//! `z`:
//!
//! ```text
//! index(ix, iz, it) = it + n_t * (ix + n_x * iz)
//! ```
//!
//! so that every spatial point owns a contiguous time history. The same
//! ordering is used by [`vectorize`], by the binary tensor format and by the
//! voxel extraction in [`crate::bpfa`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WflabError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_z: usize,
    pub n_t: usize,
    /// Spacing in x (m).
    pub dx: f64,
    /// Spacing in z (m).
    pub dz: f64,
    /// Time step (s).
    pub dt: f64,
}

impl GridSpec {
    pub fn new(n_x: usize, n_z: usize, n_t: usize, dx: f64, dz: f64, dt: f64) -> Result<Self> {
        let grid = GridSpec {
            n_x,
            n_z,
            n_t,
            dx,
            dz,
            dt,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_z == 0 || self.n_t == 0 {
            return Err(WflabError::invalid(format!(
                "grid counts must be >= 1, got {}x{}x{}",
                self.n_x, self.n_z, self.n_t
            )));
        }
        for (name, v) in [("dx", self.dx), ("dz", self.dz), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(WflabError::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.n_x * self.n_z
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_z * self.n_t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.n_t as f64 * self.dt
    }

    pub fn extent_x(&self) -> f64 {
        (self.n_x - 1) as f64 * self.dx
    }

    pub fn extent_z(&self) -> f64 {
        (self.n_z - 1) as f64 * self.dz
    }

    #[inline]
    pub fn point_index(&self, ix: usize, iz: usize) -> usize {
        ix + self.n_x * iz
    }

    #[inline]
    pub fn index(&self, ix: usize, iz: usize, it: usize) -> usize {
        it + self.n_t * (ix + self.n_x * iz)
    }

    /// Inverse of [`GridSpec::point_index`].
    #[inline]
    pub fn point_coords(&self, p: usize) -> (usize, usize) {
        (p % self.n_x, p / self.n_x)
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.n_x == other.n_x && self.n_z == other.n_z && self.n_t == other.n_t
    }
}

/// Real-valued samples on an `(x, z, t)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTensor {
    grid: GridSpec,
    values: Vec<f64>,
}

impl FieldTensor {
    pub fn zeros(grid: GridSpec) -> Self {
        FieldTensor {
            values: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn from_vec(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(WflabError::shape(format!(
                "expected {} values for a {}x{}x{} grid, got {}",
                grid.len(),
                grid.n_x,
                grid.n_z,
                grid.n_t,
                values.len()
            )));
        }
        Ok(FieldTensor { grid, values })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for iz in 0..grid.n_z {
            for ix in 0..grid.n_x {
                for it in 0..grid.n_t {
                    values.push(f(ix, iz, it));
                }
            }
        }
        FieldTensor { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, ix: usize, iz: usize, it: usize) -> f64 {
        self.values[self.grid.index(ix, iz, it)]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iz: usize, it: usize, v: f64) {
        let i = self.grid.index(ix, iz, it);
        self.values[i] = v;
    }

    /// Time history at a spatial point.
    pub fn history(&self, ix: usize, iz: usize) -> &[f64] {
        let start = self.grid.index(ix, iz, 0);
        &self.values[start..start + self.grid.n_t]
    }

    pub fn history_mut(&mut self, ix: usize, iz: usize) -> &mut [f64] {
        let start = self.grid.index(ix, iz, 0);
        let n_t = self.grid.n_t;
        &mut self.values[start..start + n_t]
    }

    /// The `n_x × n_z` snapshot at time index `it`.
    pub fn time_slice(&self, it: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.grid.n_x, self.grid.n_z, |ix, iz| self.get(ix, iz, it))
    }

    pub fn set_time_slice(&mut self, it: usize, slice: &DMatrix<f64>) {
        for iz in 0..self.grid.n_z {
            for ix in 0..self.grid.n_x {
                self.set(ix, iz, it, slice[(ix, iz)]);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Flatten a field into a vector (t fastest, then x, then z).
pub fn vectorize(field: &FieldTensor) -> Result<Vec<f64>> {
    if field.values.len() != field.grid.len() {
        return Err(WflabError::shape("field storage does not match its grid"));
    }
    if !field.is_finite() {
        return Err(WflabError::invalid("field contains non-finite values"));
    }
    Ok(field.values.clone())
}

pub fn devectorize(grid: GridSpec, v: Vec<f64>) -> Result<FieldTensor> {
    FieldTensor::from_vec(grid, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Each spatial point is observed for its whole record or not at all.
    WholeHistory,
    /// Observation flags per `(x, z, t)` entry.
    PerEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    grid: GridSpec,
    observed: Vec<bool>,
    mode: MaskMode,
    per_entry: Option<Vec<bool>>,
}

impl ObservationMask {
    /// `observed` is indexed by [`GridSpec::point_index`].
    pub fn whole_history(grid: GridSpec, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != grid.n_points() {
            return Err(WflabError::shape(format!(
                "mask has {} points, grid has {}",
                observed.len(),
                grid.n_points()
            )));
        }
        if !observed.iter().any(|&o| o) {
            return Err(WflabError::NoObservations);
        }
        Ok(ObservationMask {
            grid,
            observed,
            mode: MaskMode::WholeHistory,
            per_entry: None,
        })
    }

    /// `entries` follows the field layout. A point counts as observed when
    /// any of its entries is.
    pub fn per_entry(grid: GridSpec, entries: Vec<bool>) -> Result<Self> {
        if entries.len() != grid.len() {
            return Err(WflabError::shape(format!(
                "per-entry mask has {} entries, grid has {}",
                entries.len(),
                grid.len()
            )));
        }
        let observed: Vec<bool> = entries
            .chunks(grid.n_t)
            .map(|h| h.iter().any(|&o| o))
            .collect();
        if !observed.iter().any(|&o| o) {
            return Err(WflabError::NoObservations);
        }
        Ok(ObservationMask {
            grid,
            observed,
            mode: MaskMode::PerEntry,
            per_entry: Some(entries),
        })
    }

    pub fn all_observed(grid: GridSpec) -> Self {
        ObservationMask {
            observed: vec![true; grid.n_points()],
            grid,
            mode: MaskMode::WholeHistory,
            per_entry: None,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn observed_points(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_point_observed(&self, ix: usize, iz: usize) -> bool {
        self.observed[self.grid.point_index(ix, iz)]
    }

    #[inline]
    pub fn is_observed(&self, ix: usize, iz: usize, it: usize) -> bool {
        match &self.per_entry {
            Some(e) => e[self.grid.index(ix, iz, it)],
            None => self.observed[self.grid.point_index(ix, iz)],
        }
    }

    /// Observation flag for a flat field index.
    #[inline]
    pub fn is_observed_flat(&self, idx: usize) -> bool {
        match &self.per_entry {
            Some(e) => e[idx],
            None => self.observed[idx / self.grid.n_t],
        }
    }

    pub fn n_observed_points(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn n_observed_entries(&self) -> usize {
        match &self.per_entry {
            Some(e) => e.iter().filter(|&&o| o).count(),
            None => self.n_observed_points() * self.grid.n_t,
        }
    }

    /// Point indices (see [`GridSpec::point_index`]) that are not observed.
    pub fn missing_points(&self) -> Vec<usize> {
        (0..self.grid.n_points())
            .filter(|&p| !self.observed[p])
            .collect()
    }

    pub fn observed_point_list(&self) -> Vec<usize> {
        (0..self.grid.n_points())
            .filter(|&p| self.observed[p])
            .collect()
    }

    /// `n_x × n_z` observation pattern at time `it`.
    pub fn slice_pattern(&self, it: usize) -> DMatrix<bool> {
        DMatrix::from_fn(self.grid.n_x, self.grid.n_z, |ix, iz| {
            self.is_observed(ix, iz, it)
        })
    }

    pub fn is_full(&self) -> bool {
        self.n_observed_entries() == self.grid.len()
    }
}

/// Flat field indices of the observed entries, in field order.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub grid: GridSpec,
    pub indices: Vec<usize>,
}

/// Gather observed entries of `field`. Returns the observed values in field
/// order together with the map needed to scatter them back.
pub fn apply_mask(field: &FieldTensor, mask: &ObservationMask) -> Result<(Vec<f64>, IndexMap)> {
    if !field.grid.same_shape(&mask.grid) {
        return Err(WflabError::shape("mask grid differs from field grid"));
    }
    let indices: Vec<usize> = (0..field.grid.len())
        .filter(|&i| mask.is_observed_flat(i))
        .collect();
    if indices.is_empty() {
        return Err(WflabError::NoObservations);
    }
    let values = indices.iter().map(|&i| field.values[i]).collect();
    Ok((
        values,
        IndexMap {
            grid: field.grid,
            indices,
        },
    ))
}

/// Inverse of [`apply_mask`]: observed values go back to their positions and
/// every other entry is set to `fill`.
pub fn scatter(values: &[f64], map: &IndexMap, fill: f64) -> Result<FieldTensor> {
    if values.len() != map.indices.len() {
        return Err(WflabError::shape(format!(
            "{} values for {} indices",
            values.len(),
            map.indices.len()
        )));
    }
    let mut out = vec![fill; map.grid.len()];
    for (&i, &v) in map.indices.iter().zip(values) {
        out[i] = v;
    }
    FieldTensor::from_vec(map.grid, out)
}
