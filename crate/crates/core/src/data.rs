//! Gridded datasets: the WMD3 container, a synthetic generator with real
//! temporal dynamics, training windows and per-channel normalization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wm_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::grid::GridSpec;
use crate::model::ModelInput;

pub const MAGIC: &[u8; 4] = b"WMD3";
pub const VERSION: u32 = 1;

/// Channel inventory of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub surface_in: usize,
    pub surface_out: usize,
    pub atmos: usize,
    pub levels: usize,
}

impl Channels {
    pub fn of(cfg: &ModelConfig) -> Self {
        Channels {
            surface_in: cfg.surface_in,
            surface_out: cfg.surface_out,
            atmos: cfg.atmos,
            levels: cfg.levels,
        }
    }

    /// Values per time step for a grid of `cells` cells.
    pub fn values_per_time(&self, cells: usize) -> usize {
        (self.surface_out + self.atmos * self.levels) * cells
    }

    /// Number of 2D fields per time step.
    pub fn fields(&self) -> usize {
        self.surface_out + self.atmos * self.levels
    }

    /// Field names in storage order: `sfc<i>`, then `atm<c>_l<level>`.
    pub fn field_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.surface_out).map(|i| format!("sfc{i}")).collect();
        for c in 0..self.atmos {
            names.extend((0..self.levels).map(|l| format!("atm{c}_l{l}")));
        }
        names
    }
}

/// Gridded fields at one valid time: surface `[surface_out, H, W]` then
/// atmosphere `[atmos, levels, H, W]`, both flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherState {
    pub time: i64,
    pub surface: Vec<f64>,
    pub atmos: Vec<f64>,
}

impl WeatherState {
    /// Field `f` in the channel-major order surface channels, then each
    /// atmosphere channel's levels.
    pub fn field(&self, f: usize, cells: usize) -> &[f64] {
        let ns = self.surface.len() / cells;
        if f < ns {
            &self.surface[f * cells..(f + 1) * cells]
        } else {
            let g = f - ns;
            &self.atmos[g * cells..(g + 1) * cells]
        }
    }

    pub fn all_finite(&self) -> bool {
        self.surface.iter().chain(&self.atmos).all(|v| v.is_finite())
    }

    /// Model input from a normalized state: the leading `surface_in`
    /// surface channels and the full atmosphere.
    pub fn to_input(&self, cfg: &ModelConfig) -> Result<ModelInput> {
        let (h, w) = (cfg.grid.rows, cfg.grid.cols);
        let cells = h * w;
        if self.surface.len() != cfg.surface_out * cells || self.atmos.len() != cfg.atmos * cfg.levels * cells {
            return Err(CoreError::Shape(format!(
                "state with {} surface / {} atmosphere values does not fit the model",
                self.surface.len(),
                self.atmos.len()
            )));
        }
        Ok(ModelInput {
            time: self.time,
            surface: Tensor::new(self.surface[..cfg.surface_in * cells].to_vec(), &[cfg.surface_in, h, w])?,
            atmos: Tensor::new(self.atmos.clone(), &[cfg.atmos, cfg.levels, h, w])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub channels: Channels,
    pub states: Vec<WeatherState>,
}

impl Dataset {
    pub fn times(&self) -> Vec<i64> {
        self.states.iter().map(|s| s.time).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let cells = self.grid.cells();
        let c = &self.channels;
        if c.surface_in > c.surface_out {
            return Err(CoreError::Data("more surface inputs than surface channels".into()));
        }
        for (i, s) in self.states.iter().enumerate() {
            if s.surface.len() != c.surface_out * cells || s.atmos.len() != c.atmos * c.levels * cells {
                return Err(CoreError::Data(format!("time index {i} has wrong field sizes")));
            }
            if i > 0 && s.time != self.states[i - 1].time + 1 {
                return Err(CoreError::Data(format!(
                    "time axis not hourly at index {i}: {} after {}",
                    s.time,
                    self.states[i - 1].time
                )));
            }
            if !s.all_finite() {
                return Err(CoreError::Data(format!("non-finite value at hour {}", s.time)));
            }
        }
        Ok(())
    }

    /// State valid at hour `t`.
    pub fn at(&self, t: i64) -> Result<&WeatherState> {
        let first = self.states.first().ok_or_else(|| CoreError::Data("empty dataset".into()))?.time;
        let idx = t - first;
        if idx < 0 || idx as usize >= self.states.len() {
            return Err(CoreError::Data(format!(
                "hour {t} outside dataset span {first}..={}",
                first + self.states.len() as i64 - 1
            )));
        }
        Ok(&self.states[idx as usize])
    }

    /// Input at `t0` and targets at `t0 + dt` for each dt.
    pub fn window(&self, t0: i64, dts: &[u32]) -> Result<Sample> {
        let input = self.at(t0)?.clone();
        let targets = dts
            .iter()
            .map(|&dt| Ok((dt, self.at(t0 + dt as i64)?.clone())))
            .collect::<Result<_>>()?;
        Ok(Sample { input, targets })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let g = &self.grid;
        let c = &self.channels;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(g.rows as u64).to_le_bytes())?;
        w.write_all(&(g.cols as u64).to_le_bytes())?;
        for v in [g.north_lat, g.lat_step, g.lon_step, g.radius_km] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[u8::from(g.south_pole_omitted)])?;
        for v in [c.surface_in, c.surface_out, c.atmos, c.levels, self.states.len()] {
            w.write_all(&u32::try_from(v).map_err(|_| CoreError::Data("count exceeds u32".into()))?.to_le_bytes())?;
        }
        for s in &self.states {
            w.write_all(&s.time.to_le_bytes())?;
        }
        for s in &self.states {
            for v in s.surface.iter().chain(&s.atmos) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Dataset::read_from(&mut r).map_err(|e| match e {
            CoreError::Format(m) => CoreError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Format(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(CoreError::Format(format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(read_array(r)?) as usize;
        let cols = u64::from_le_bytes(read_array(r)?) as usize;
        let mut f = [0.0; 4];
        for v in &mut f {
            *v = f64::from_le_bytes(read_array(r)?);
        }
        let [flags] = read_array::<1>(r)?;
        let grid = GridSpec {
            rows,
            cols,
            north_lat: f[0],
            lat_step: f[1],
            lon_step: f[2],
            radius_km: f[3],
            south_pole_omitted: flags & 1 == 1,
        };
        grid.validate().map_err(|e| CoreError::Format(e.to_string()))?;
        let mut u = [0usize; 5];
        for v in &mut u {
            *v = u32::from_le_bytes(read_array(r)?) as usize;
        }
        let channels = Channels {
            surface_in: u[0],
            surface_out: u[1],
            atmos: u[2],
            levels: u[3],
        };
        let count = u[4];
        let times = (0..count)
            .map(|_| Ok(i64::from_le_bytes(read_array(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let cells = grid.cells();
        let ns = channels.surface_out * cells;
        let per = channels.values_per_time(cells);
        let mut buf = vec![0u8; per * 4];
        let mut states = Vec::with_capacity(count);
        for time in times {
            read_exact(r, &mut buf)?;
            let vals: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            states.push(WeatherState {
                time,
                surface: vals[..ns].to_vec(),
                atmos: vals[ns..].to_vec(),
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(CoreError::Format("trailing bytes after the last field".into()));
        }
        let ds = Dataset { grid, channels, states };
        ds.validate().map_err(|e| CoreError::Format(e.to_string()))?;
        Ok(ds)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::Format("truncated file".into())
        } else {
            CoreError::Io(e)
        }
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// Input state and `(dt, target)` pairs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: WeatherState,
    pub targets: Vec<(u32, WeatherState)>,
}

/// Settings of the synthetic atmosphere.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub grid: GridSpec,
    pub channels: Channels,
    pub hours: usize,
    pub seed: u64,
    /// First valid hour.
    pub start: i64,
    /// Freeze amplitudes and use one rotation rate, so every field is a
    /// rigid eastward rotation of its initial pattern.
    pub advection_only: bool,
}

impl GenConfig {
    pub fn desk(hours: usize, seed: u64) -> Self {
        let cfg = ModelConfig::desk();
        GenConfig {
            grid: cfg.grid,
            channels: Channels::of(&cfg),
            hours,
            seed,
            start: 0,
            advection_only: false,
        }
    }
}

const WAVENUMBERS: usize = 4;
const MERIDIONAL: usize = 3;
const AMPLITUDE_TIMESCALE_H: f64 = 96.0;

/// One field's modal state: amplitude pair per (zonal m, meridional n).
struct Modes {
    amp: Vec<[f64; 2]>,
    /// Eastward phase speed of each zonal wavenumber, radians per hour.
    omega: Vec<f64>,
    damping: Vec<f64>,
    scale: f64,
    offset: f64,
}

/// Deterministic toy atmosphere. Each 2D field is a sum of low-wavenumber
/// modes `cos(n·φ)·(a·cos(mλ') + b·sin(mλ'))`, `λ' = λ − ω_m t`, whose
/// amplitudes follow Ornstein-Uhlenbeck processes with diffusion-like
/// damping of higher wavenumbers. Fields at neighbouring levels share
/// most of their modes.
pub fn generate(gc: &GenConfig) -> Result<Dataset> {
    gc.grid.validate()?;
    let c = gc.channels;
    if gc.hours < 2 {
        return Err(CoreError::Data(format!("need at least 2 hours, got {}", gc.hours)));
    }
    if c.surface_out == 0 || c.atmos == 0 || c.levels == 0 || c.surface_in > c.surface_out {
        return Err(CoreError::Data(format!("degenerate channel inventory {c:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let nmodes = WAVENUMBERS * MERIDIONAL;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let base_omega: f64 = 2.0f64.to_radians();
    let mut fields: Vec<Modes> = Vec::with_capacity(c.fields());
    for f in 0..c.fields() {
        let amp = (0..nmodes).map(|k| {
            let m = k / MERIDIONAL + 1;
            let s = 1.0 / m as f64;
            [s * normal(&mut rng), s * normal(&mut rng)]
        });
        let amp: Vec<[f64; 2]> = amp.collect();
        let omega = (0..WAVENUMBERS)
            .map(|m| {
                if gc.advection_only {
                    base_omega
                } else {
                    base_omega * (0.5 + rng.random::<f64>()) / (1.0 + 0.3 * m as f64)
                }
            })
            .collect();
        let damping = (0..nmodes)
            .map(|k| {
                let m = (k / MERIDIONAL + 1) as f64;
                let n = (k % MERIDIONAL) as f64;
                (1.0 + 0.05 * (m * m + n * n)) / AMPLITUDE_TIMESCALE_H
            })
            .collect();
        let (scale, offset) = (0.5 + f as f64 % 3.0, 10.0 * (f % 4) as f64 - 5.0);
        fields.push(Modes { amp, omega, damping, scale, offset });
    }
    // Couple vertically adjacent atmosphere fields.
    for a in 0..c.atmos {
        for l in 1..c.levels {
            let cur = c.surface_out + a * c.levels + l;
            let prev_amp = fields[cur - 1].amp.clone();
            for (x, p) in fields[cur].amp.iter_mut().zip(prev_amp) {
                x[0] = 0.7 * p[0] + 0.3 * x[0];
                x[1] = 0.7 * p[1] + 0.3 * x[1];
            }
        }
    }

    let (rows, cols) = (gc.grid.rows, gc.grid.cols);
    let cells = rows * cols;
    let merid: Vec<Vec<f64>> = (0..MERIDIONAL)
        .map(|n| {
            (0..rows)
                .map(|i| {
                    let phi = gc.grid.latitude(i).to_radians();
                    (n as f64 * phi).cos() * phi.cos().max(0.0).sqrt()
                })
                .collect()
        })
        .collect();
    let zonal: Vec<Vec<(f64, f64)>> = (1..=WAVENUMBERS)
        .map(|m| {
            (0..cols)
                .map(|j| (m as f64 * gc.grid.longitude(j).to_radians()).sin_cos())
                .collect()
        })
        .collect();
    let mut states = Vec::with_capacity(gc.hours);
    for step in 0..gc.hours {
        let t = step as f64;
        let mut values = Vec::with_capacity(c.values_per_time(cells));
        for fm in &fields {
            let mut field = vec![0.0; cells];
            for (k, a) in fm.amp.iter().enumerate() {
                let m = k / MERIDIONAL + 1;
                let n = k % MERIDIONAL;
                let (sp, cp) = (fm.omega[m - 1] * t).sin_cos();
                // cos(mλ - p), sin(mλ - p) via the angle-difference identities.
                let row_wave: Vec<f64> = zonal[m - 1]
                    .iter()
                    .map(|&(sm, cm)| a[0] * (cm * cp + sm * sp) + a[1] * (sm * cp - cm * sp))
                    .collect();
                for (i, mu) in merid[n].iter().enumerate() {
                    for (v, wv) in field[i * cols..(i + 1) * cols].iter_mut().zip(&row_wave) {
                        *v += mu * wv;
                    }
                }
            }
            values.extend(field.iter().map(|v| fm.offset + fm.scale * v));
        }
        let ns = c.surface_out * cells;
        states.push(WeatherState {
            time: gc.start + step as i64,
            surface: values[..ns].to_vec(),
            atmos: values[ns..].to_vec(),
        });
        if !gc.advection_only {
            for fm in &mut fields {
                for (k, a) in fm.amp.iter_mut().enumerate() {
                    let rho = (-fm.damping[k]).exp();
                    let m = (k / MERIDIONAL + 1) as f64;
                    let kick = (1.0 - rho * rho).sqrt() / m;
                    a[0] = rho * a[0] + kick * normal(&mut rng);
                    a[1] = rho * a[1] + kick * normal(&mut rng);
                }
            }
        }
    }
    // Round through f32 so generated data equals what a reader sees.
    for s in &mut states {
        for v in s.surface.iter_mut().chain(s.atmos.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
    let ds = Dataset {
        grid: gc.grid,
        channels: c,
        states,
    };
    ds.validate()?;
    Ok(ds)
}

/// Name of the `k`-th operational source: "src-a", "src-b", ...
pub fn source_name(k: usize) -> String {
    let letter = (b'a' + (k % 26) as u8) as char;
    if k < 26 {
        format!("src-{letter}")
    } else {
        format!("src-{letter}{}", k / 26)
    }
}

/// Sibling path of a source file: `truth.wmd3` → `truth.src-a.wmd3`.
pub fn source_path(truth: &Path, name: &str) -> PathBuf {
    let stem = truth.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = truth.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    truth.with_file_name(format!("{stem}.{name}{ext}"))
}

/// An analysis of the truth: the truth plus a smooth, seeded error field
/// and a small grid-scale error, each scaled by the field's spread.
pub fn perturbed_source(truth: &Dataset, seed: u64, k: usize, magnitude: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + k as u64));
    let cells = truth.grid.cells();
    let cols = truth.grid.cols;
    let nf = truth.channels.fields();
    let spread: Vec<f64> = (0..nf)
        .map(|f| {
            let n = truth.states.len() * cells;
            let (mut s, mut s2) = (0.0, 0.0);
            for st in &truth.states {
                for v in st.field(f, cells) {
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / n as f64;
            (s2 / n as f64 - mean * mean).max(0.0).sqrt()
        })
        .collect();
    let mut out = truth.clone();
    for st in &mut out.states {
        let ns = st.surface.len();
        for f in 0..nf {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let m = rng.random_range(1..=3) as f64;
            let slot = if f * cells < ns {
                &mut st.surface[f * cells..(f + 1) * cells]
            } else {
                let g = f * cells - ns;
                &mut st.atmos[g..g + cells]
            };
            for (idx, v) in slot.iter_mut().enumerate() {
                let lam = (idx % cols) as f64 / cols as f64 * std::f64::consts::TAU;
                let smooth = a * (m * lam).cos() + b * (m * lam).sin();
                let white: f64 = StandardNormal.sample(&mut rng);
                let e = magnitude * spread[f] * (0.8 * smooth + 0.2 * white);
                *v = (*v + e) as f32 as f64;
            }
        }
    }
    out
}

/// Per-field mean and standard deviation, surface channels then each
/// atmosphere channel's levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let cells = ds.grid.cells();
        let nf = ds.channels.fields();
        if ds.states.is_empty() {
            return Err(CoreError::Data("cannot fit normalization on an empty dataset".into()));
        }
        let n = (ds.states.len() * cells) as f64;
        let mut mean = vec![0.0; nf];
        let mut std = vec![0.0; nf];
        for f in 0..nf {
            let mut s = 0.0;
            for st in &ds.states {
                for v in st.field(f, cells) {
                    s += v;
                }
            }
            let mu = s / n;
            let mut s2 = 0.0;
            for st in &ds.states {
                for v in st.field(f, cells) {
                    s2 += (v - mu) * (v - mu);
                }
            }
            mean[f] = mu;
            std[f] = (s2 / n).sqrt().max(1e-12);
        }
        Ok(Normalizer { mean, std })
    }

    fn map(&self, s: &WeatherState, cells: usize, g: impl Fn(f64, f64, f64) -> f64) -> WeatherState {
        let ns = s.surface.len() / cells;
        let apply = |vals: &[f64], first: usize| -> Vec<f64> {
            vals.iter()
                .enumerate()
                .map(|(i, v)| {
                    let f = first + i / cells;
                    g(*v, self.mean[f], self.std[f])
                })
                .collect()
        };
        WeatherState {
            time: s.time,
            surface: apply(&s.surface, 0),
            atmos: apply(&s.atmos, ns),
        }
    }

    pub fn normalize(&self, s: &WeatherState, cells: usize) -> WeatherState {
        self.map(s, cells, |v, m, sd| (v - m) / sd)
    }

    pub fn denormalize(&self, s: &WeatherState, cells: usize) -> WeatherState {
        self.map(s, cells, |v, m, sd| v * sd + m)
    }

    pub fn normalize_dataset(&self, ds: &Dataset) -> Dataset {
        let cells = ds.grid.cells();
        Dataset {
            grid: ds.grid,
            channels: ds.channels,
            states: ds.states.iter().map(|s| self.normalize(s, cells)).collect(),
        }
    }

    pub fn to_params(&self) -> Result<Vec<(String, Tensor)>> {
        let n = self.mean.len();
        Ok(vec![
            ("norm.mean".into(), Tensor::new(self.mean.clone(), &[n])?),
            ("norm.std".into(), Tensor::new(self.std.clone(), &[n])?),
        ])
    }

    pub fn from_params(params: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.to_vec())
                .ok_or_else(|| CoreError::Format(format!("normalizer lacks {name}")))
        };
        let (mean, std) = (get("norm.mean")?, get("norm.std")?);
        if mean.len() != std.len() {
            return Err(CoreError::Format("normalizer mean/std lengths differ".into()));
        }
        Ok(Normalizer { mean, std })
    }
}
