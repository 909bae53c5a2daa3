//! Synthetic predictor/predictand pairs with a known local linear link,
//! used to check training, attribution locality and the delta protocol.

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{haversine_unchecked, ChannelSpec, GridGeometry, GriddedField, LandMask, TargetField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    Absolute(f64),
    /// Multiple of the noiseless predictand standard deviation (pooled).
    RelativeToSignal(f64),
}

/// Anomaly structure of every predictor channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AnomalyModel {
    /// Gaussian smoothing length in km; 0 gives independent grid boxes.
    pub correlation_km: f64,
    /// When positive, each day is a random mix of this many fixed smooth
    /// patterns per channel instead of freshly smoothed noise.
    pub modes: usize,
}

/// Additive change applied to the causal channel (and so to the
/// predictand) on days from `start` on, per calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FutureShift {
    pub start: NaiveDate,
    pub per_month: [f64; 12],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub predictor_geometry: GridGeometry,
    pub channels: Vec<ChannelSpec>,
    pub causal_channel: usize,
    pub predictand_mask: LandMaskSpec,
    pub radius_km: f64,
    /// Explicit `(cell, weight)` stencils per location; drawn at random
    /// inside the radius when absent.
    pub stencils: Option<Vec<Vec<(usize, f64)>>>,
    pub noise: Noise,
    pub anomalies: AnomalyModel,
    /// Added to the predictand (e.g. a temperature climatology in degC).
    pub predictand_offset: f64,
    /// Amplitude of an annual cosine cycle added to every predictor channel.
    pub seasonal_amplitude: f64,
    pub start: NaiveDate,
    pub days: usize,
    pub future_shift: Option<FutureShift>,
}

/// Serializable form of a land mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandMaskSpec {
    pub geometry: GridGeometry,
    pub cells: Vec<bool>,
}

impl LandMaskSpec {
    pub fn to_mask(&self) -> Result<LandMask> {
        LandMask::new(self.geometry.clone(), self.cells.clone())
    }
}

impl From<&LandMask> for LandMaskSpec {
    fn from(m: &LandMask) -> Self {
        Self { geometry: m.geometry().clone(), cells: m.cells().to_vec() }
    }
}

/// Ground truth of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub causal_channel: usize,
    pub radius_km: f64,
    /// Per location `(predictor cell, weight)`, cells row-major.
    pub stencils: Vec<Vec<(usize, f64)>>,
    pub noise_std: f64,
}

impl SyntheticTruth {
    pub fn support_union(&self) -> Vec<usize> {
        let mut cells: Vec<usize> = self.stencils.iter().flat_map(|s| s.iter().map(|&(c, _)| c)).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }
}

pub struct SyntheticData {
    pub predictors: GriddedField,
    pub predictand: TargetField,
    pub truth: SyntheticTruth,
}

fn distances(geom: &GridGeometry) -> Vec<Vec<f64>> {
    (0..geom.len())
        .map(|i| (0..geom.len()).map(|j| haversine_unchecked(geom.center_of(i), geom.center_of(j))).collect())
        .collect()
}

/// Gaussian smoother normalized so unit-variance white noise stays unit variance.
fn smoother(geom: &GridGeometry, length_km: f64) -> Vec<Vec<f64>> {
    let d = distances(geom);
    d.iter()
        .map(|row| {
            let k: Vec<f64> = row.iter().map(|&x| (-(x * x) / (2.0 * length_km * length_km)).exp()).collect();
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            k.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn smooth_field(rng: &mut ChaCha8Rng, kernel: Option<&Vec<Vec<f64>>>, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    match kernel {
        None => raw,
        Some(k) => k.iter().map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum()).collect(),
    }
}

fn seasonal(d: NaiveDate) -> f64 {
    // coldest around mid-January, warmest mid-July
    -(2.0 * std::f64::consts::PI * (d.ordinal0() as f64 - 15.0) / 365.25).cos()
}

impl SyntheticSpec {
    fn random_stencils(&self, rng: &mut ChaCha8Rng, mask: &LandMask) -> Vec<Vec<(usize, f64)>> {
        let g = &self.predictor_geometry;
        (0..mask.len())
            .map(|loc| {
                let target = mask.location_center(loc);
                let cells: Vec<usize> = (0..g.len()).filter(|&i| haversine_unchecked(g.center_of(i), target) <= self.radius_km).collect();
                let w: Vec<f64> = cells.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                let sum: f64 = w.iter().sum();
                cells.into_iter().zip(w).map(|(c, w)| (c, w / sum)).collect()
            })
            .collect()
    }

    fn validate(&self, mask: &LandMask) -> Result<()> {
        if self.channels.is_empty() || self.causal_channel >= self.channels.len() {
            return Err(Error::Input(format!("causal channel {} not among {} channels", self.causal_channel, self.channels.len())));
        }
        if !(self.radius_km > 0.0 && self.radius_km.is_finite()) {
            return Err(Error::Input("locality radius must be positive".into()));
        }
        if self.days == 0 || mask.is_empty() || self.predictor_geometry.is_empty() {
            return Err(Error::Input("synthetic dataset needs days, locations and predictor cells".into()));
        }
        match self.noise {
            Noise::Absolute(s) | Noise::RelativeToSignal(s) if !(s >= 0.0 && s.is_finite()) => {
                return Err(Error::Input(format!("noise level {s} must be non-negative")))
            }
            _ => {}
        }
        if self.anomalies.correlation_km < 0.0 {
            return Err(Error::Input("correlation length must be non-negative".into()));
        }
        Ok(())
    }

    fn check_stencils(&self, stencils: &[Vec<(usize, f64)>], mask: &LandMask) -> Result<()> {
        if stencils.len() != mask.len() {
            return Err(Error::Input(format!("{} stencils for {} locations", stencils.len(), mask.len())));
        }
        let g = &self.predictor_geometry;
        for (loc, s) in stencils.iter().enumerate() {
            let target = mask.location_center(loc);
            for &(cell, w) in s {
                if cell >= g.len() || !w.is_finite() {
                    return Err(Error::Input(format!("location {loc}: invalid stencil entry ({cell}, {w})")));
                }
                let d = haversine_unchecked(g.center_of(cell), target);
                if d > self.radius_km * (1.0 + 1e-12) {
                    return Err(Error::Input(format!(
                        "location {loc}: support cell {cell} lies {d:.1} km away, beyond the {:.1} km radius",
                        self.radius_km
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let mask = spec.predictand_mask.to_mask()?;
    spec.validate(&mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stencils = match &spec.stencils {
        Some(s) => s.clone(),
        None => spec.random_stencils(&mut rng, &mask),
    };
    spec.check_stencils(&stencils, &mask)?;

    let g = &spec.predictor_geometry;
    let cells = g.len();
    let nch = spec.channels.len();
    let kernel = (spec.anomalies.correlation_km > 0.0).then(|| smoother(g, spec.anomalies.correlation_km));
    let modes: Vec<Vec<Vec<f64>>> = (0..nch)
        .map(|_| (0..spec.anomalies.modes).map(|_| smooth_field(&mut rng, kernel.as_ref(), cells)).collect())
        .collect();

    let times: Vec<NaiveDate> = (0..spec.days)
        .map(|d| spec.start.checked_add_days(chrono::Days::new(d as u64)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Input("synthetic time axis overflows the calendar".into()))?;

    let mut data = Vec::with_capacity(spec.days * nch * cells);
    for &day in &times {
        let cycle = spec.seasonal_amplitude * seasonal(day);
        let shift = spec.future_shift.filter(|f| day >= f.start).map(|f| f.per_month[day.month0() as usize]).unwrap_or(0.0);
        for (c, channel_modes) in modes.iter().enumerate() {
            let anomaly = if channel_modes.is_empty() {
                smooth_field(&mut rng, kernel.as_ref(), cells)
            } else {
                let k = channel_modes.len() as f64;
                let coef: Vec<f64> = channel_modes.iter().map(|_| rng.sample::<f64, _>(StandardNormal) / k.sqrt()).collect();
                (0..cells).map(|i| channel_modes.iter().zip(&coef).map(|(m, a)| a * m[i]).sum()).collect()
            };
            let extra = if c == spec.causal_channel { shift } else { 0.0 };
            data.extend(anomaly.into_iter().map(|a| a + cycle + extra));
        }
    }
    let predictors = GriddedField::new(data, g.clone(), spec.channels.clone(), times.clone())?;

    let offset = spec.causal_channel * cells;
    let mut y = Vec::with_capacity(spec.days * mask.len());
    for t in 0..spec.days {
        let causal = &predictors.sample(t)[offset..offset + cells];
        y.extend(stencils.iter().map(|s| s.iter().map(|&(cell, w)| w * causal[cell]).sum::<f64>()));
    }
    let noise_std = match spec.noise {
        Noise::Absolute(s) => s,
        Noise::RelativeToSignal(r) => {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            r * (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
        }
    };
    for v in y.iter_mut() {
        let e: f64 = if noise_std > 0.0 { noise_std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        *v += e + spec.predictand_offset;
    }
    let predictand = TargetField::new(y, times, mask)?;
    Ok(SyntheticData {
        predictors,
        predictand,
        truth: SyntheticTruth { causal_channel: spec.causal_channel, radius_km: spec.radius_km, stencils, noise_std },
    })
}

/// Predictand grid that refines `predictors` by `factor` over the same extent.
pub fn refined_geometry(predictors: &GridGeometry, factor: usize) -> Result<GridGeometry> {
    let res = predictors.resolution() / factor as f64;
    let lat0 = predictors.lats()[0] - predictors.resolution() / 2.0 + res / 2.0;
    let lon0 = predictors.lons()[0] - predictors.resolution() / 2.0 + res / 2.0;
    GridGeometry::regular(lat0, lon0, res, predictors.nlat() * factor, predictors.nlon() * factor)
}
