//! Grid-box standardization and the monthly mean/variance adjustment of
//! GCM predictors towards reanalysis moments.

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ChannelSpec, GridGeometry, GriddedField, Period};

/// Below this (relative to the cell magnitude) a standard deviation counts
/// as zero.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub geometry: GridGeometry,
    pub channels: Vec<ChannelSpec>,
    /// `[channel, lat, lon]`
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub period: Option<Period>,
}

fn moments<'a>(samples: impl Iterator<Item = &'a [f64]> + Clone, len: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let mut mean = vec![0.0; len];
    let mut n = 0usize;
    for s in samples.clone() {
        n += 1;
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; len];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n.max(1) as f64).sqrt()).collect();
    (mean, std, n)
}

fn cell_name(field_channels: &[ChannelSpec], geometry: &GridGeometry, i: usize) -> String {
    let per = geometry.len().max(1);
    let (c, cell) = (i / per, i % per);
    let (row, col) = geometry.row_col(cell);
    let p = geometry.center(row, col);
    format!("channel {} at lat {:.3} lon {:.3} (row {row}, col {col})", field_channels[c], p.lat, p.lon)
}

fn check_degenerate(std: &[f64], mean: &[f64], field: &GriddedField, what: &str) -> Result<()> {
    for (i, (&s, &m)) in std.iter().zip(mean).enumerate() {
        if s.is_nan() || s <= DEGENERATE_STD * m.abs().max(1.0) {
            return Err(Error::Preprocess(format!(
                "zero variance{what} in {}",
                cell_name(field.channels(), field.geometry(), i)
            )));
        }
    }
    Ok(())
}

/// Population mean and standard deviation per grid box over `period`
/// (the whole record when `None`).
pub fn fit_standardizer(predictors: &GriddedField, period: Option<Period>) -> Result<Standardizer> {
    let days: Vec<usize> = (0..predictors.ntime())
        .filter(|&t| period.map(|p| p.contains(predictors.times()[t])).unwrap_or(true))
        .collect();
    if days.is_empty() {
        return Err(Error::Input(match period {
            Some(p) => format!("no days of the record fall in {p}"),
            None => "cannot fit a standardizer on an empty record".into(),
        }));
    }
    let (mean, std, _) = moments(days.iter().map(|&t| predictors.sample(t)), predictors.sample_len());
    check_degenerate(&std, &mean, predictors, "")?;
    Ok(Standardizer {
        geometry: predictors.geometry().clone(),
        channels: predictors.channels().to_vec(),
        mean,
        std,
        period,
    })
}

fn check_layout(field: &GriddedField, geometry: &GridGeometry, channels: &[ChannelSpec], what: &str) -> Result<()> {
    if field.geometry() != geometry {
        return Err(Error::Input(format!("{what} was fitted on a different grid geometry")));
    }
    if field.channels() != channels {
        return Err(Error::Input(format!("{what} was fitted on different channels")));
    }
    Ok(())
}

impl Standardizer {
    pub fn apply(&self, predictors: &GriddedField) -> Result<GriddedField> {
        check_layout(predictors, &self.geometry, &self.channels, "standardizer")?;
        let n = predictors.sample_len();
        let data = predictors
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % n]) / self.std[i % n])
            .collect();
        predictors.with_data(data)
    }
}

pub fn apply_standardizer(predictors: &GriddedField, standardizer: &Standardizer) -> Result<GriddedField> {
    standardizer.apply(predictors)
}

/// Per calendar month moments, `mean[m][channel, lat, lon]` with m = 0 for January.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyMoments {
    pub geometry: GridGeometry,
    pub channels: Vec<ChannelSpec>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl MonthlyMoments {
    pub fn fit(field: &GriddedField, period: Option<Period>) -> Result<Self> {
        let mut mean = Vec::with_capacity(12);
        let mut std = Vec::with_capacity(12);
        for month in 1..=12u32 {
            let days: Vec<usize> = (0..field.ntime())
                .filter(|&t| {
                    let d = field.times()[t];
                    d.month() == month && period.map(|p| p.contains(d)).unwrap_or(true)
                })
                .collect();
            if days.is_empty() {
                return Err(Error::Input(format!("month {month} has no days to fit monthly moments")));
            }
            let (m, s, _) = moments(days.iter().map(|&t| field.sample(t)), field.sample_len());
            check_degenerate(&s, &m, field, &format!(" for month {month}"))?;
            mean.push(m);
            std.push(s);
        }
        Ok(Self { geometry: field.geometry().clone(), channels: field.channels().to_vec(), mean, std })
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != 12 || self.std.len() != 12 {
            return Err(Error::Input(format!("monthly moments need 12 months, found {}", self.mean.len())));
        }
        Ok(())
    }
}

/// `x' = mu_obs + (sd_obs / sd_gcm) (x - mu_gcm)` with the moments of the
/// day's calendar month, applied to every day of `gcm`.
pub fn adjust_gcm_monthly(gcm: &GriddedField, gcm_hist: &MonthlyMoments, obs: &MonthlyMoments) -> Result<GriddedField> {
    gcm_hist.check()?;
    obs.check()?;
    check_layout(gcm, &gcm_hist.geometry, &gcm_hist.channels, "GCM monthly moments")?;
    check_layout(gcm, &obs.geometry, &obs.channels, "observational monthly moments")?;
    let n = gcm.sample_len();
    let mut data = Vec::with_capacity(gcm.data().len());
    for t in 0..gcm.ntime() {
        let m = gcm.times()[t].month0() as usize;
        let (mg, sg, mo, so) = (&gcm_hist.mean[m], &gcm_hist.std[m], &obs.mean[m], &obs.std[m]);
        for (i, &x) in gcm.sample(t).iter().enumerate() {
            data.push(mo[i] + so[i] / sg[i] * (x - mg[i]));
        }
        debug_assert_eq!(data.len(), (t + 1) * n);
    }
    gcm.with_data(data)
}
