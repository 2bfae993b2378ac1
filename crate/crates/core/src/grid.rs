//! Latitude-longitude grid conventions, latitude weights, neighborhood index
//! maps and static input fields.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Regular latitude-longitude grid. Row 0 is the northmost row; rows go
/// south in steps of `lat_step` degrees. Columns start at 0° longitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub north_lat: f64,
    pub lat_step: f64,
    pub lon_step: f64,
    /// Planet radius, used to convert zonal wavenumbers to wavelengths.
    pub radius_km: f64,
    pub south_pole_omitted: bool,
}

pub const EARTH_RADIUS_KM: f64 = 6371.0;

impl GridSpec {
    /// 0.25° global grid, 90°N first, south pole row dropped: 720 × 1440.
    pub fn quarter_degree() -> Self {
        GridSpec {
            rows: 720,
            cols: 1440,
            north_lat: 90.0,
            lat_step: 0.25,
            lon_step: 0.25,
            radius_km: EARTH_RADIUS_KM,
            south_pole_omitted: true,
        }
    }

    /// Desk-scale 4.5° grid with cell-centred rows 87.75°N ..= 87.75°S.
    pub fn desk() -> Self {
        GridSpec::centered(40, 80)
    }

    /// Global grid of `rows × cols` cells with latitudes at cell centres,
    /// symmetric about the equator.
    pub fn centered(rows: usize, cols: usize) -> Self {
        let lat_step = 180.0 / rows as f64;
        GridSpec {
            rows,
            cols,
            north_lat: 90.0 - lat_step / 2.0,
            lat_step,
            lon_step: 360.0 / cols as f64,
            radius_km: EARTH_RADIUS_KM,
            south_pole_omitted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(config(format!("grid extents {}×{} must be positive", self.rows, self.cols)));
        }
        if !(self.lat_step > 0.0 && self.lon_step > 0.0 && self.radius_km > 0.0) {
            return Err(config("grid steps and radius must be positive"));
        }
        if (self.cols as f64 * self.lon_step - 360.0).abs() > 1e-9 {
            return Err(config(format!(
                "{} columns of {}° do not span 360°",
                self.cols, self.lon_step
            )));
        }
        let south = self.latitude(self.rows - 1);
        if self.north_lat > 90.0 + 1e-9 || south < -90.0 - 1e-9 {
            return Err(config(format!("rows span {}° to {south}°", self.north_lat)));
        }
        Ok(())
    }

    /// Latitude of row `i` in degrees.
    pub fn latitude(&self, i: usize) -> f64 {
        self.north_lat - i as f64 * self.lat_step
    }

    /// Longitude of column `j` in degrees.
    pub fn longitude(&self, j: usize) -> f64 {
        j as f64 * self.lon_step
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Circumference of the latitude circle of row `i`, in km.
    pub fn circumference_km(&self, i: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.radius_km * self.latitude(i).to_radians().cos()
    }
}

/// Cosine-of-latitude weight of each row, unnormalized.
pub fn latitude_weights(spec: &GridSpec) -> Vec<f64> {
    (0..spec.rows).map(|i| spec.latitude(i).to_radians().cos()).collect()
}

/// Extents of the token grid as (depth, rows, cols).
pub type Extents = [usize; 3];

/// Neighborhood window: odd extents per (depth, rows, cols).
pub fn validate_window(window: Extents, grid: Extents) -> Result<()> {
    for a in 0..3 {
        if window[a] % 2 == 0 {
            return Err(config(format!("window extents {window:?} must be odd")));
        }
        if window[a] > grid[a] {
            return Err(config(format!("window {window:?} exceeds token grid {grid:?}")));
        }
    }
    Ok(())
}

fn bumped(center: usize, window: usize, extent: usize) -> impl Iterator<Item = usize> {
    let r = window / 2;
    let start = center.saturating_sub(r).min(extent - window);
    start..start + window
}

fn wrapped(center: usize, window: usize, extent: usize) -> impl Iterator<Item = usize> {
    let r = (window / 2) as isize;
    (-r..=r).map(move |o| (center as isize + o).rem_euclid(extent as isize) as usize)
}

/// Tokens attended by `center` as (depth, row, col) triples in
/// depth-major, row, column order. Columns wrap; depth and rows translate
/// the window to stay in bounds, so every set has the full window size.
pub fn neighborhood(center: Extents, window: Extents, grid: Extents) -> Result<Vec<Extents>> {
    validate_window(window, grid)?;
    if (0..3).any(|a| center[a] >= grid[a]) {
        return Err(config(format!("center {center:?} outside token grid {grid:?}")));
    }
    let mut out = Vec::with_capacity(window.iter().product());
    for d in bumped(center[0], window[0], grid[0]) {
        for r in bumped(center[1], window[1], grid[1]) {
            for c in wrapped(center[2], window[2], grid[2]) {
                out.push([d, r, c]);
            }
        }
    }
    Ok(out)
}

/// Flat token index of a (depth, row, col) triple.
pub fn flat_index(t: Extents, grid: Extents) -> usize {
    (t[0] * grid[1] + t[1]) * grid[2] + t[2]
}

/// Neighbor table: for every token in flat order, the flat indices of its
/// neighborhood, concatenated.
pub fn neighbor_table(window: Extents, grid: Extents) -> Result<Vec<usize>> {
    validate_window(window, grid)?;
    let mut table = Vec::with_capacity(grid.iter().product::<usize>() * window.iter().product::<usize>());
    for d in 0..grid[0] {
        for r in 0..grid[1] {
            for c in 0..grid[2] {
                for n in neighborhood([d, r, c], window, grid)? {
                    table.push(flat_index(n, grid));
                }
            }
        }
    }
    Ok(table)
}

pub const STATIC_CHANNELS: usize = 8;

/// Per-cell constant inputs, `[8, rows, cols]`: sin/cos latitude, sin/cos
/// longitude, land-sea mask, soil type, topography, elevation. The last
/// four are smooth synthetic stand-ins built from low-order harmonics.
pub fn static_fields(spec: &GridSpec) -> Vec<f64> {
    let n = spec.cells();
    let mut out = vec![0.0; STATIC_CHANNELS * n];
    for i in 0..spec.rows {
        let phi = spec.latitude(i).to_radians();
        for j in 0..spec.cols {
            let lam = spec.longitude(j).to_radians();
            let topo = 0.6 * (2.0 * lam).sin() * phi.cos()
                + 0.3 * (3.0 * phi).cos() * (lam + 0.7).cos()
                - 0.2 * (lam - 1.3).sin() * (2.0 * phi).sin();
            let land = if topo > 0.05 { 1.0 } else { 0.0 };
            let soil = 0.5 + 0.5 * (lam + 2.0 * phi).sin();
            let cell = i * spec.cols + j;
            let vals = [phi.sin(), phi.cos(), lam.sin(), lam.cos(), land, soil, topo, topo.max(0.0)];
            for (c, v) in vals.into_iter().enumerate() {
                out[c * n + cell] = v;
            }
        }
    }
    out
}

/// Rolls a `[channels, rows, cols]`-style array by `shift` columns:
/// output column `j` takes input column `j - shift`.
pub fn roll_columns(values: &[f64], cols: usize, shift: isize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (src_row, dst_row) in values.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        for (j, d) in dst_row.iter_mut().enumerate() {
            *d = src_row[(j as isize - shift).rem_euclid(cols as isize) as usize];
        }
    }
    out
}
