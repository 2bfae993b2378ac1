//! Latitude-weighted RMSE, zonal spectral power, blur score, ensemble
//! subset curves and scorecards.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{CoreError, Result};
use crate::grid::{latitude_weights, GridSpec};

/// Mean over times of the per-time latitude-weighted RMSE
/// `sqrt(Σ_ij w(i)·(p − t)² / (H·W))`. Each entry of `pred` and `truth` is
/// one `[H, W]` field.
pub fn latitude_rmse(pred: &[&[f64]], truth: &[&[f64]], weights: &[f64], cols: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(CoreError::Data("empty time axis".into()));
    }
    if pred.len() != truth.len() {
        return Err(CoreError::Shape(format!("{} predictions vs {} truths", pred.len(), truth.len())));
    }
    let cells = weights.len() * cols;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != cells || t.len() != cells {
            return Err(CoreError::Shape(format!(
                "fields of {} and {} values on a {}×{cols} grid",
                p.len(),
                t.len(),
                weights.len()
            )));
        }
        let mut s = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let mut row = 0.0;
            for j in 0..cols {
                let e = p[i * cols + j] - t[i * cols + j];
                row += e * e;
            }
            s += w * row;
        }
        total += (s / cells as f64).sqrt();
    }
    Ok(total / pred.len() as f64)
}

/// One-sided zonal power of a row: `P[0]` is zero (mean removed) and
/// `Σ_m P[m]` equals the row variance. `P[m]` for `1 ≤ m < W/2` doubles
/// `|X_m|²/W²` to fold in the negative frequency.
pub fn row_power(row: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = row.len();
    let mean = row.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = row.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let n2 = (n * n) as f64;
    (0..=n / 2)
        .map(|m| {
            if m == 0 {
                0.0
            } else if 2 * m == n {
                buf[m].norm_sqr() / n2
            } else {
                2.0 * buf[m].norm_sqr() / n2
            }
        })
        .collect()
}

/// Zonal spectral power at `wavelength_km`, averaged over rows with
/// latitude weights. Each row's wavenumbers map to wavelengths through
/// its circle circumference; the power is interpolated linearly in
/// log-wavelength. Rows that cannot resolve the wavelength (it falls
/// outside wavenumbers 1 ..= W/2) are skipped.
pub fn zonal_spectral_power(field: &[f64], spec: &GridSpec, wavelength_km: f64) -> Result<f64> {
    if field.len() != spec.cells() {
        return Err(CoreError::Shape(format!("field of {} values on a {}-cell grid", field.len(), spec.cells())));
    }
    if !(wavelength_km > 0.0) {
        return Err(CoreError::Data(format!("wavelength {wavelength_km} km")));
    }
    let weights = latitude_weights(spec);
    let mut planner = FftPlanner::new();
    let (mut acc, mut wsum) = (0.0, 0.0);
    let half = spec.cols / 2;
    for i in 0..spec.rows {
        let circ = spec.circumference_km(i);
        if !(circ > 0.0) || weights[i] <= 0.0 {
            continue;
        }
        let m_star = circ / wavelength_km;
        if m_star < 1.0 || m_star > half as f64 {
            continue;
        }
        let p = row_power(&field[i * spec.cols..(i + 1) * spec.cols], &mut planner);
        let lo = (m_star.floor() as usize).min(half);
        let value = if lo as f64 == m_star || lo == half {
            p[lo]
        } else {
            let hi = lo + 1;
            // Wavelength decreases with m, so interpolate on log(λ).
            let (l_lo, l_hi, l) = ((circ / lo as f64).ln(), (circ / hi as f64).ln(), wavelength_km.ln());
            let frac = (l_lo - l) / (l_lo - l_hi);
            p[lo] + frac * (p[hi] - p[lo])
        };
        acc += weights[i] * value;
        wsum += weights[i];
    }
    if wsum == 0.0 {
        return Err(CoreError::Data(format!(
            "no latitude row resolves a {wavelength_km} km wavelength"
        )));
    }
    Ok(acc / wsum)
}

/// `1 / sqrt(S)`; `None` stands for an unbounded score at zero power.
pub fn blur_score(power: f64) -> Result<Option<f64>> {
    if power < 0.0 || power.is_nan() {
        return Err(CoreError::Data(format!("negative spectral power {power}")));
    }
    Ok(if power == 0.0 { None } else { Some(1.0 / power.sqrt()) })
}

/// Blur score of the mean spectral power over several fields.
pub fn mean_blur(fields: &[&[f64]], spec: &GridSpec, wavelength_km: f64) -> Result<Option<f64>> {
    if fields.is_empty() {
        return Err(CoreError::Data("empty time axis".into()));
    }
    let mut s = 0.0;
    for f in fields {
        s += zonal_spectral_power(f, spec, wavelength_km)?;
    }
    blur_score(s / fields.len() as f64)
}

/// Wavelength playing the role of 500 km on Earth for a grid whose
/// resolution differs: the same number of grid spacings at the equator.
pub fn equivalent_wavelength_km(spec: &GridSpec) -> f64 {
    let reference = GridSpec::quarter_degree();
    let spacings = 500.0 / (reference.lon_step.to_radians() * reference.radius_km);
    spacings * spec.lon_step.to_radians() * spec.radius_km
}

/// Subset sizes 1, 2, 4, 8, 12, ..., 48, 51, truncated to `members`.
pub fn default_subset_sizes(members: usize) -> Vec<usize> {
    let mut sizes = vec![1, 2, 4];
    sizes.extend((8..=48).step_by(4));
    sizes.push(51);
    sizes.retain(|&k| k <= members);
    sizes
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub members: usize,
    pub rmse: f64,
    pub blur: Option<f64>,
}

/// Metrics of the mean of the first `k` members, for each `k`. Each
/// member and the truth are sequences of `[H, W]` fields.
pub fn ensemble_subset_curve(
    members: &[Vec<Vec<f64>>],
    truth: &[Vec<f64>],
    spec: &GridSpec,
    sizes: &[usize],
    wavelength_km: f64,
) -> Result<Vec<CurvePoint>> {
    if members.is_empty() {
        return Err(CoreError::Data("no ensemble members".into()));
    }
    let weights = latitude_weights(spec);
    let truth_refs: Vec<&[f64]> = truth.iter().map(Vec::as_slice).collect();
    sizes
        .iter()
        .map(|&k| {
            if k == 0 || k > members.len() {
                return Err(CoreError::Data(format!("subset size {k} with {} members", members.len())));
            }
            let mean: Vec<Vec<f64>> = (0..truth.len())
                .map(|t| {
                    let mut acc = members[0][t].clone();
                    for m in &members[1..k] {
                        for (a, v) in acc.iter_mut().zip(&m[t]) {
                            *a += v;
                        }
                    }
                    acc.iter().map(|v| v / k as f64).collect()
                })
                .collect();
            let refs: Vec<&[f64]> = mean.iter().map(Vec::as_slice).collect();
            Ok(CurvePoint {
                members: k,
                rmse: latitude_rmse(&refs, &truth_refs, &weights, spec.cols)?,
                blur: mean_blur(&refs, spec, wavelength_km)?,
            })
        })
        .collect()
}

/// `100 · (a − b) / b`, negative when `a` is better.
pub fn percent_difference(a: f64, b: f64) -> f64 {
    100.0 * (a - b) / b
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCell {
    pub variable: String,
    pub lead: i64,
    pub rmse_a: f64,
    pub rmse_b: f64,
    pub percent: f64,
}

/// Variable × lead-time grid of relative RMSE differences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scorecard {
    pub cells: Vec<ScoreCell>,
}

impl Scorecard {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable,lead_hours,rmse_a,rmse_b,percent_difference\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{},{}\n", c.variable, c.lead, c.rmse_a, c.rmse_b, c.percent));
        }
        s
    }
}

/// One forecast field sequence per (variable, lead).
pub struct ForecastSet<'a> {
    pub variable: &'a str,
    pub lead: i64,
    pub fields: Vec<&'a [f64]>,
}

/// Percent RMSE difference of `a` relative to `b` per (variable, lead).
/// Entries are matched by variable and lead; unmatched ones are ignored.
pub fn scorecard(a: &[ForecastSet], b: &[ForecastSet], truth: &[ForecastSet], spec: &GridSpec) -> Result<Scorecard> {
    let weights = latitude_weights(spec);
    let mut cells = Vec::new();
    for fa in a {
        let find = |set: &'_ [ForecastSet<'_>]| {
            set.iter().position(|f| f.variable == fa.variable && f.lead == fa.lead)
        };
        let (Some(ib), Some(it)) = (find(b), find(truth)) else {
            continue;
        };
        let (fb, ft) = (&b[ib], &truth[it]);
        let ra = latitude_rmse(&fa.fields, &ft.fields, &weights, spec.cols)?;
        let rb = latitude_rmse(&fb.fields, &ft.fields, &weights, spec.cols)?;
        cells.push(ScoreCell {
            variable: fa.variable.to_string(),
            lead: fa.lead,
            rmse_a: ra,
            rmse_b: rb,
            percent: percent_difference(ra, rb),
        });
    }
    if cells.is_empty() {
        return Err(CoreError::Data("forecast sets share no variable and lead time".into()));
    }
    Ok(Scorecard { cells })
}
