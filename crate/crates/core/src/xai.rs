//! Integrated Gradients attribution and its aggregation into accumulated
//! saliency maps (ASM, predictor space) and saliency dispersion maps (SDM,
//! predictand space).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{haversine_unchecked, GridGeometry, LandMask, Period};
use crate::nn::{Mode, ModelGraph, Scalar, Tensor};

pub const DEFAULT_IG_STEPS: usize = 50;
pub const SALIENCY_THRESHOLD: f64 = 0.1;
/// Interpolation points evaluated per forward/backward batch.
const IG_CHUNK: usize = 64;

/// Trapezoid weights for m + 1 equally spaced points on [0, 1].
pub fn trapezoid_weights(steps: usize) -> Vec<f64> {
    let m = steps as f64;
    (0..=steps).map(|k| if k == 0 || k == steps { 0.5 / m } else { 1.0 / m }).collect()
}

fn path_points<T: Scalar>(input: &[T], baseline: &[T], steps: usize, range: std::ops::Range<usize>) -> Vec<T> {
    let mut data = Vec::with_capacity(range.len() * input.len());
    for k in range {
        let a = k as f64 / steps as f64;
        data.extend(input.iter().zip(baseline).map(|(&x, &b)| {
            let (x, b) = (x.to_f64_lossy(), b.to_f64_lossy());
            T::from_f64_lossy(b + a * (x - b))
        }));
    }
    data
}

fn check_ig_args<T: Scalar>(model: &ModelGraph<T>, input: &[T], baseline: &[T], steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Input("integrated gradients needs at least one step".into()));
    }
    let n = model.input_shape().numel();
    if input.len() != n || baseline.len() != n {
        return Err(Error::Input(format!(
            "input has {} and baseline {} features, model expects {n}",
            input.len(),
            baseline.len()
        )));
    }
    Ok(())
}

/// Signed IG attribution of output `location` to every input feature.
pub fn integrated_gradients<T: Scalar>(model: &ModelGraph<T>, input: &[T], baseline: &[T], location: usize, steps: usize) -> Result<Vec<f64>> {
    let mut all = integrated_gradients_for(model, input, baseline, &[location], steps)?;
    Ok(all.attributions.pop().expect("one location"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgBatch {
    /// `attributions[i]` belongs to `locations[i]`
    pub locations: Vec<usize>,
    pub attributions: Vec<Vec<f64>>,
    /// F(x) - F(baseline) per location.
    pub output_delta: Vec<f64>,
}

impl IgBatch {
    /// Largest |sum IG - (F(x) - F(x'))| over the locations.
    pub fn completeness_gap(&self) -> f64 {
        self.attributions
            .iter()
            .zip(&self.output_delta)
            .map(|(a, d)| (a.iter().sum::<f64>() - d).abs())
            .fold(0.0, f64::max)
    }
}

/// IG for several output locations, sharing one forward pass per chunk of
/// interpolation points.
pub fn integrated_gradients_for<T: Scalar>(
    model: &ModelGraph<T>,
    input: &[T],
    baseline: &[T],
    locations: &[usize],
    steps: usize,
) -> Result<IgBatch> {
    check_ig_args(model, input, baseline, steps)?;
    let outputs = model.output_shape().numel();
    if let Some(&bad) = locations.iter().find(|&&l| l >= outputs) {
        return Err(Error::Input(format!("target location {bad} out of range (model has {outputs})")));
    }
    let weights = trapezoid_weights(steps);
    let nfeat = input.len();
    let mut grads = vec![vec![0.0f64; nfeat]; locations.len()];
    let mut f_first = vec![0.0; outputs];
    let mut f_last = vec![0.0; outputs];
    let mut start = 0;
    while start <= steps {
        let end = (start + IG_CHUNK).min(steps + 1);
        let batch = Tensor::from_vec(end - start, model.input_shape(), path_points(input, baseline, steps, start..end));
        let (out, tape) = model.forward(&batch, Mode::Eval)?;
        if start == 0 {
            f_first.iter_mut().zip(out.sample(0)).for_each(|(d, v)| *d = v.to_f64_lossy());
        }
        if end == steps + 1 {
            f_last.iter_mut().zip(out.sample(end - start - 1)).for_each(|(d, v)| *d = v.to_f64_lossy());
        }
        for (li, &loc) in locations.iter().enumerate() {
            let g = model.input_gradients_from_tape(&tape, outputs, loc)?;
            for s in 0..(end - start) {
                let w = weights[start + s];
                let gs = g.sample(s);
                if let Some(i) = gs.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Attribution(format!("non-finite gradient for location {loc} at feature {i}")));
                }
                for (acc, v) in grads[li].iter_mut().zip(gs) {
                    *acc += w * v.to_f64_lossy();
                }
            }
        }
        start = end;
    }
    let attributions = grads
        .into_iter()
        .map(|g| {
            g.into_iter()
                .zip(input.iter().zip(baseline))
                .map(|(gi, (&x, &b))| (x.to_f64_lossy() - b.to_f64_lossy()) * gi)
                .collect()
        })
        .collect();
    let output_delta = locations.iter().map(|&l| f_last[l] - f_first[l]).collect();
    Ok(IgBatch { locations: locations.to_vec(), attributions, output_delta })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SaliencyProvenance {
    pub model_id: String,
    pub baseline_id: String,
    pub steps: usize,
    /// Locations whose raw map was entirely zero.
    pub zero_locations: Vec<usize>,
}

/// Normalized, thresholded saliency of one day: `values[location, channel, lat, lon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyCube {
    pub day: chrono::NaiveDate,
    pub nlocation: usize,
    pub nchannel: usize,
    pub nlat: usize,
    pub nlon: usize,
    pub values: Vec<f64>,
    pub provenance: SaliencyProvenance,
}

impl SaliencyCube {
    pub fn map_len(&self) -> usize {
        self.nchannel * self.nlat * self.nlon
    }

    pub fn location(&self, loc: usize) -> &[f64] {
        let n = self.map_len();
        &self.values[loc * n..(loc + 1) * n]
    }

    fn same_layout(&self, other: &SaliencyCube) -> bool {
        (self.nlocation, self.nchannel, self.nlat, self.nlon) == (other.nlocation, other.nchannel, other.nlat, other.nlon)
    }
}

/// Absolute value, division by each location's maximum over all channels
/// and grid boxes, then values below the threshold set to zero.
pub fn normalize_threshold(
    raw: &[Vec<f64>],
    shape: (usize, usize, usize),
    day: chrono::NaiveDate,
    mut provenance: SaliencyProvenance,
) -> Result<SaliencyCube> {
    let (nchannel, nlat, nlon) = shape;
    let n = nchannel * nlat * nlon;
    let mut values = Vec::with_capacity(raw.len() * n);
    provenance.zero_locations.clear();
    for (loc, map) in raw.iter().enumerate() {
        if map.len() != n {
            return Err(Error::Input(format!("location {loc} map has {} values, expected {n}", map.len())));
        }
        if map.iter().any(|v| !v.is_finite()) {
            return Err(Error::Attribution(format!("non-finite raw attribution for location {loc}")));
        }
        let max = map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            provenance.zero_locations.push(loc);
            values.extend(std::iter::repeat_n(0.0, n));
            continue;
        }
        values.extend(map.iter().map(|v| {
            let s = v.abs() / max;
            if s < SALIENCY_THRESHOLD {
                0.0
            } else {
                s
            }
        }));
    }
    Ok(SaliencyCube { day, nlocation: raw.len(), nchannel, nlat, nlon, values, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            other => Err(Error::Input(format!("unknown aggregation '{other}' (expected mean or sum)"))),
        }
    }
}

fn check_cubes(cubes: &[SaliencyCube]) -> Result<&SaliencyCube> {
    let first = cubes.first().ok_or_else(|| Error::Input("no saliency cubes in the period".into()))?;
    if cubes.iter().any(|c| !c.same_layout(first)) {
        return Err(Error::Input("saliency cubes do not share one layout".into()));
    }
    Ok(first)
}

/// `[channel, lat, lon]` on the predictor grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsmField {
    pub nchannel: usize,
    pub nlat: usize,
    pub nlon: usize,
    pub values: Vec<f64>,
    pub days: usize,
    pub period: Option<Period>,
    pub aggregation: Aggregation,
}

impl AsmField {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.nlat * self.nlon;
        &self.values[c * n..(c + 1) * n]
    }
}

/// Per day the sum over target locations, then mean (or sum) over days.
pub fn accumulate_asm(cubes: &[SaliencyCube], aggregation: Aggregation, period: Option<Period>) -> Result<AsmField> {
    let first = check_cubes(cubes)?;
    let n = first.map_len();
    let mut values = vec![0.0; n];
    for cube in cubes {
        for loc in 0..cube.nlocation {
            for (acc, v) in values.iter_mut().zip(cube.location(loc)) {
                *acc += v;
            }
        }
    }
    if aggregation == Aggregation::Mean {
        values.iter_mut().for_each(|v| *v /= cubes.len() as f64);
    }
    Ok(AsmField {
        nchannel: first.nchannel,
        nlat: first.nlat,
        nlon: first.nlon,
        values,
        days: cubes.len(),
        period,
        aggregation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdmChannel {
    One(usize),
    /// Salience summed over channels before distance weighting.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdmOptions {
    pub channel: SdmChannel,
    /// Divide by the total salience of the map (a mean distance in km).
    pub normalized: bool,
    pub aggregation: Aggregation,
}

impl SdmOptions {
    pub fn channel(c: usize) -> Self {
        Self { channel: SdmChannel::One(c), normalized: false, aggregation: Aggregation::Mean }
    }
}

/// Per target location, km-weighted salience; one value per location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdmField {
    pub values: Vec<f64>,
    pub options: SdmOptions,
    pub days: usize,
    pub period: Option<Period>,
}

/// Great-circle distance from every target location to every predictor grid box center, `[location][cell]`.
pub fn distance_matrix(predictors: &GridGeometry, mask: &LandMask) -> Vec<Vec<f64>> {
    (0..mask.len())
        .map(|loc| {
            let target = mask.location_center(loc);
            (0..predictors.len()).map(|i| haversine_unchecked(predictors.center_of(i), target)).collect()
        })
        .collect()
}

pub fn compute_sdm(
    cubes: &[SaliencyCube],
    predictors: &GridGeometry,
    mask: &LandMask,
    options: SdmOptions,
    period: Option<Period>,
) -> Result<SdmField> {
    let first = check_cubes(cubes)?;
    if (first.nlat, first.nlon) != (predictors.nlat(), predictors.nlon()) {
        return Err(Error::Input("saliency cubes do not match the predictor geometry".into()));
    }
    if first.nlocation != mask.len() {
        return Err(Error::Input(format!(
            "saliency cubes cover {} locations, mask has {}",
            first.nlocation,
            mask.len()
        )));
    }
    let channels: Vec<usize> = match options.channel {
        SdmChannel::One(c) if c < first.nchannel => vec![c],
        SdmChannel::One(c) => return Err(Error::Input(format!("channel {c} not present in the saliency cubes"))),
        SdmChannel::All => (0..first.nchannel).collect(),
    };
    let dist = distance_matrix(predictors, mask);
    let cells = predictors.len();
    let mut values = vec![0.0; mask.len()];
    for cube in cubes {
        for (loc, acc) in values.iter_mut().enumerate() {
            let map = cube.location(loc);
            let mut weighted = 0.0;
            let mut total = 0.0;
            for i in 0..cells {
                let s: f64 = channels.iter().map(|&c| map[c * cells + i]).sum();
                weighted += s * dist[loc][i];
                total += s;
            }
            *acc += if options.normalized {
                if total > 0.0 {
                    weighted / total
                } else {
                    0.0
                }
            } else {
                weighted
            };
        }
    }
    if options.aggregation == Aggregation::Mean {
        values.iter_mut().for_each(|v| *v /= cubes.len() as f64);
    }
    Ok(SdmField { values, options, days: cubes.len(), period })
}
