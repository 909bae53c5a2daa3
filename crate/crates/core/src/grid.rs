//! Grid geometry, gridded predictor fields, land masks and great-circle
//! distances.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Mean Earth radius used by every distance computation in the crate.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LonConvention {
    /// Longitudes in [-180, 180].
    #[default]
    Signed,
    /// Longitudes in [0, 360].
    Positive,
}

impl LonConvention {
    pub fn normalize(self, lon: f64) -> f64 {
        match self {
            LonConvention::Signed => {
                let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
                // keep +180 as declared rather than folding it to -180
                if l == -180.0 && lon > 0.0 {
                    180.0
                } else {
                    l
                }
            }
            LonConvention::Positive => {
                let l = lon.rem_euclid(360.0);
                if l == 0.0 && lon > 0.0 {
                    360.0
                } else {
                    l
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Great-circle distance in km between two points given in degrees.
pub fn haversine_distance(a: LatLon, b: LatLon) -> Result<f64> {
    for p in [a, b] {
        if !p.lat.is_finite() || !p.lon.is_finite() {
            return Err(input_err!("non-finite coordinate ({}, {})", p.lat, p.lon));
        }
        if !(-90.0..=90.0).contains(&p.lat) {
            return Err(input_err!("latitude {} outside [-90, 90]", p.lat));
        }
    }
    Ok(haversine_unchecked(a, b))
}

/// Great-circle distance for points already known to be valid.
pub fn haversine_unchecked(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * h.sqrt().atan2((1.0 - h).sqrt()) * EARTH_RADIUS_KM
}

/// Regular or irregular lat-lon grid described by its gridbox centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry")]
pub struct GridGeometry {
    lats: Vec<f64>,
    lons: Vec<f64>,
    resolution: f64,
    #[serde(default)]
    lon_convention: LonConvention,
}

#[derive(Deserialize)]
struct RawGeometry {
    lats: Vec<f64>,
    lons: Vec<f64>,
    resolution: f64,
    #[serde(default)]
    lon_convention: LonConvention,
}

impl TryFrom<RawGeometry> for GridGeometry {
    type Error = crate::error::Error;

    fn try_from(r: RawGeometry) -> Result<Self> {
        Self::new(r.lats, r.lons, r.resolution, r.lon_convention)
    }
}

fn strictly_monotonic(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

impl GridGeometry {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>, resolution: f64, lon_convention: LonConvention) -> Result<Self> {
        if lats.iter().chain(&lons).any(|v| !v.is_finite()) {
            return Err(input_err!("grid coordinates must be finite"));
        }
        if lats.iter().any(|l| !(-90.0..=90.0).contains(l)) {
            return Err(input_err!("grid latitudes must lie in [-90, 90]"));
        }
        let lon_ok = match lon_convention {
            LonConvention::Signed => lons.iter().all(|l| (-180.0..=180.0).contains(l)),
            LonConvention::Positive => lons.iter().all(|l| (0.0..=360.0).contains(l)),
        };
        if !lon_ok {
            return Err(input_err!("grid longitudes outside the declared {:?} convention", lon_convention));
        }
        if !strictly_monotonic(&lats) || !strictly_monotonic(&lons) {
            return Err(input_err!("grid coordinates must be strictly monotonic"));
        }
        Ok(Self { lats, lons, resolution, lon_convention })
    }

    /// Regular grid with `nlat` rows starting at `lat0` (ascending) and `nlon`
    /// columns starting at `lon0`.
    pub fn regular(lat0: f64, lon0: f64, resolution: f64, nlat: usize, nlon: usize) -> Result<Self> {
        let lats = (0..nlat).map(|i| lat0 + resolution * i as f64).collect();
        let lons = (0..nlon).map(|j| lon0 + resolution * j as f64).collect();
        let last = lon0 + resolution * nlon.saturating_sub(1) as f64;
        let conv = if last > 180.0 { LonConvention::Positive } else { LonConvention::Signed };
        Self::new(lats, lons, resolution, conv)
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn lon_convention(&self) -> LonConvention {
        self.lon_convention
    }

    pub fn nlat(&self) -> usize {
        self.lats.len()
    }

    pub fn nlon(&self) -> usize {
        self.lons.len()
    }

    pub fn len(&self) -> usize {
        self.nlat() * self.nlon()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.nlat() && col < self.nlon());
        row * self.nlon() + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.nlon(), index % self.nlon())
    }

    pub fn center(&self, row: usize, col: usize) -> LatLon {
        LatLon::new(self.lats[row], self.lons[col])
    }

    pub fn center_of(&self, index: usize) -> LatLon {
        let (r, c) = self.row_col(index);
        self.center(r, c)
    }

    /// Row indices ordered north to south.
    pub fn rows_north_to_south(&self) -> Vec<usize> {
        let n = self.nlat();
        if n > 1 && self.lats[0] < self.lats[1] {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        }
    }

    /// Column indices ordered west to east.
    pub fn cols_west_to_east(&self) -> Vec<usize> {
        let n = self.nlon();
        if n > 1 && self.lons[0] > self.lons[1] {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        }
    }

    /// Diagonal extent of one gridbox at the given row, in km.
    pub fn gridbox_diagonal_km(&self, row: usize) -> f64 {
        let lat = self.lats[row];
        let half = self.resolution / 2.0;
        haversine_unchecked(
            LatLon::new((lat - half).max(-90.0), 0.0),
            LatLon::new((lat + half).min(90.0), self.resolution),
        )
    }
}

/// Kilometre distance from every gridbox center to `target`, row-major.
pub fn distance_field(geometry: &GridGeometry, target: LatLon) -> Result<Vec<f64>> {
    if geometry.is_empty() {
        return Err(input_err!("distance field over an empty geometry"));
    }
    if !target.lat.is_finite() || !target.lon.is_finite() || !(-90.0..=90.0).contains(&target.lat) {
        return Err(input_err!("invalid target ({}, {})", target.lat, target.lon));
    }
    let mut out = Vec::with_capacity(geometry.len());
    for r in 0..geometry.nlat() {
        for c in 0..geometry.nlon() {
            out.push(haversine_unchecked(geometry.center(r, c), target));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variable {
    Geopotential,
    SpecificHumidity,
    AirTemperature,
    ZonalWind,
    MeridionalWind,
    Other(String),
}

impl Variable {
    pub fn short_name(&self) -> &str {
        match self {
            Variable::Geopotential => "z",
            Variable::SpecificHumidity => "q",
            Variable::AirTemperature => "ta",
            Variable::ZonalWind => "ua",
            Variable::MeridionalWind => "va",
            Variable::Other(n) => n,
        }
    }

    pub fn from_short_name(s: &str) -> Self {
        match s {
            "z" => Variable::Geopotential,
            "q" => Variable::SpecificHumidity,
            "ta" => Variable::AirTemperature,
            "ua" => Variable::ZonalWind,
            "va" => Variable::MeridionalWind,
            other => Variable::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub variable: Variable,
    pub level_hpa: u32,
}

impl ChannelSpec {
    pub fn new(variable: Variable, level_hpa: u32) -> Self {
        Self { variable, level_hpa }
    }
}

impl std::fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.variable.short_name(), self.level_hpa)
    }
}

impl std::str::FromStr for ChannelSpec {
    type Err = crate::error::Error;

    /// Parses names such as `ta850` or `z500`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
        let (name, level) = s.split_at(split);
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(input_err!("bad channel name '{s}' (expected e.g. ta850)"));
        }
        let level = level.parse().map_err(|_| input_err!("bad pressure level in channel '{s}'"))?;
        Ok(Self::new(Variable::from_short_name(name), level))
    }
}

/// Daily predictor-space data laid out `[time, channel, lat, lon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    data: Vec<f64>,
    geometry: GridGeometry,
    channels: Vec<ChannelSpec>,
    times: Vec<NaiveDate>,
}

impl GriddedField {
    pub fn new(data: Vec<f64>, geometry: GridGeometry, channels: Vec<ChannelSpec>, times: Vec<NaiveDate>) -> Result<Self> {
        let expected = times.len() * channels.len() * geometry.len();
        if data.len() != expected {
            return Err(input_err!(
                "field has {} values, expected {} ({} days x {} channels x {}x{})",
                data.len(),
                expected,
                times.len(),
                channels.len(),
                geometry.nlat(),
                geometry.nlon()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(input_err!("non-finite value at flat index {i}"));
        }
        for (i, a) in channels.iter().enumerate() {
            if channels[..i].contains(a) {
                return Err(input_err!("duplicate channel {a}"));
            }
        }
        Ok(Self { data, geometry, channels, times })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn times(&self) -> &[NaiveDate] {
        &self.times
    }

    pub fn ntime(&self) -> usize {
        self.times.len()
    }

    pub fn nchannel(&self) -> usize {
        self.channels.len()
    }

    /// Values per day (channel x lat x lon).
    pub fn sample_len(&self) -> usize {
        self.channels.len() * self.geometry.len()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.ntime(), self.nchannel(), self.geometry.nlat(), self.geometry.nlon()]
    }

    pub fn sample(&self, t: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, c: usize, row: usize, col: usize) -> f64 {
        let g = &self.geometry;
        self.data[((t * self.nchannel() + c) * g.nlat() + row) * g.nlon() + col]
    }

    pub fn channel_index(&self, spec: &ChannelSpec) -> Option<usize> {
        self.channels.iter().position(|c| c == spec)
    }

    /// Same metadata, new values. Values must be finite and have the same length.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(data, self.geometry.clone(), self.channels.clone(), self.times.clone())
    }

    /// Subset of days for which `keep` returns true, preserving order.
    pub fn select_times(&self, mut keep: impl FnMut(NaiveDate) -> bool) -> Self {
        let n = self.sample_len();
        let mut data = Vec::new();
        let mut times = Vec::new();
        for (t, &d) in self.times.iter().enumerate() {
            if keep(d) {
                data.extend_from_slice(&self.data[t * n..(t + 1) * n]);
                times.push(d);
            }
        }
        Self { data, geometry: self.geometry.clone(), channels: self.channels.clone(), times }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Fractional position of `v` along a monotonic axis, clamped to the ends.
/// Returns (lower index, upper index, weight of upper).
fn axis_position(axis: &[f64], v: f64) -> (usize, usize, f64) {
    let n = axis.len();
    if n == 1 {
        return (0, 0, 0.0);
    }
    let ascending = axis[1] > axis[0];
    // work in ascending orientation
    let key = |i: usize| if ascending { axis[i] } else { axis[n - 1 - i] };
    let x = v;
    let map = |i: usize| if ascending { i } else { n - 1 - i };
    if x <= key(0) {
        return (map(0), map(0), 0.0);
    }
    if x >= key(n - 1) {
        let hi = map(n - 1);
        let lo = map(n - 2);
        return (lo, hi, 1.0);
    }
    // first index with key > x
    let (mut lo, mut hi) = (0usize, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if key(mid) <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (x - key(lo)) / (key(hi) - key(lo));
    (map(lo), map(hi), t)
}

fn within(axis: &[f64], v: f64) -> bool {
    let (a, b) = (axis[0], axis[axis.len() - 1]);
    v >= a.min(b) && v <= a.max(b)
}

/// Bilinear interpolation of every day and channel onto `dst`. Destination
/// cells beyond the source hull take the nearest edge row/column.
pub fn bilinear_regrid(src: &GriddedField, dst: &GridGeometry) -> Result<GriddedField> {
    let sg = src.geometry();
    if sg.is_empty() || dst.is_empty() {
        return Err(input_err!("regridding requires non-empty geometries"));
    }
    let conv = sg.lon_convention();
    let dst_lons: Vec<f64> = dst.lons().iter().map(|&l| conv.normalize(l)).collect();
    let any_lat = dst.lats().iter().any(|&l| within(sg.lats(), l));
    let any_lon = dst_lons.iter().any(|&l| within(sg.lons(), l));
    if !any_lat || !any_lon {
        return Err(input_err!("destination grid lies entirely outside the source domain"));
    }
    let rows: Vec<_> = dst.lats().iter().map(|&l| axis_position(sg.lats(), l)).collect();
    let cols: Vec<_> = dst_lons.iter().map(|&l| axis_position(sg.lons(), l)).collect();

    let (snlat, snlon) = (sg.nlat(), sg.nlon());
    let planes = src.ntime() * src.nchannel();
    let mut out = Vec::with_capacity(planes * dst.len());
    for p in 0..planes {
        let plane = &src.data()[p * snlat * snlon..(p + 1) * snlat * snlon];
        for &(r0, r1, tr) in &rows {
            for &(c0, c1, tc) in &cols {
                let v00 = plane[r0 * snlon + c0];
                let v01 = plane[r0 * snlon + c1];
                let v10 = plane[r1 * snlon + c0];
                let v11 = plane[r1 * snlon + c1];
                let top = v00 * (1.0 - tc) + v01 * tc;
                let bottom = v10 * (1.0 - tc) + v11 * tc;
                out.push(top * (1.0 - tr) + bottom * tr);
            }
        }
    }
    GriddedField::new(out, dst.clone(), src.channels().to_vec(), src.times().to_vec())
}

/// Boolean land mask over a predictand geometry with a fixed enumeration of
/// its true cells (north-west first, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LandMask {
    geometry: GridGeometry,
    cells: Vec<bool>,
    order: Vec<usize>,
}

impl LandMask {
    pub fn new(geometry: GridGeometry, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != geometry.len() {
            return Err(input_err!("mask has {} cells, geometry has {}", cells.len(), geometry.len()));
        }
        let mut order = Vec::new();
        let cols = geometry.cols_west_to_east();
        for r in geometry.rows_north_to_south() {
            for &c in &cols {
                let idx = geometry.index(r, c);
                if cells[idx] {
                    order.push(idx);
                }
            }
        }
        Ok(Self { geometry, cells, order })
    }

    pub fn all_land(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self::new(geometry, vec![true; n]).expect("sizes agree")
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Grid indices (row-major) of each location, in enumeration order.
    pub fn locations(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn location_center(&self, location: usize) -> LatLon {
        self.geometry.center_of(self.order[location])
    }
}

/// Daily predictand values laid out `[time, location]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetField {
    data: Vec<f64>,
    times: Vec<NaiveDate>,
    mask: LandMask,
}

impl TargetField {
    pub fn new(data: Vec<f64>, times: Vec<NaiveDate>, mask: LandMask) -> Result<Self> {
        if data.len() != times.len() * mask.len() {
            return Err(input_err!(
                "target field has {} values, expected {} days x {} locations",
                data.len(),
                times.len(),
                mask.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(input_err!("non-finite predictand value at flat index {i}"));
        }
        Ok(Self { data, times, mask })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn times(&self) -> &[NaiveDate] {
        &self.times
    }

    pub fn mask(&self) -> &LandMask {
        &self.mask
    }

    pub fn ntime(&self) -> usize {
        self.times.len()
    }

    pub fn nlocation(&self) -> usize {
        self.mask.len()
    }

    pub fn day(&self, t: usize) -> &[f64] {
        let n = self.nlocation();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn series(&self, location: usize) -> Vec<f64> {
        let n = self.nlocation();
        (0..self.ntime()).map(|t| self.data[t * n + location]).collect()
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(data, self.times.clone(), self.mask.clone())
    }

    pub fn select_times(&self, mut keep: impl FnMut(NaiveDate) -> bool) -> Self {
        let n = self.nlocation();
        let mut data = Vec::new();
        let mut times = Vec::new();
        for (t, &d) in self.times.iter().enumerate() {
            if keep(d) {
                data.extend_from_slice(&self.data[t * n..(t + 1) * n]);
                times.push(d);
            }
        }
        Self { data, times, mask: self.mask.clone() }
    }
}

/// Inclusive calendar date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Period {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(input_err!("period end {end} precedes start {start}"));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        d >= self.start && d <= self.end
    }

    /// Parses `YYYY-MM-DD..YYYY-MM-DD`.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| input_err!("period '{s}' must look like 1980-01-01..2005-12-31"))?;
        let parse = |x: &str| {
            NaiveDate::parse_from_str(x.trim(), "%Y-%m-%d").map_err(|e| input_err!("bad date '{x}': {e}"))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

impl std::fmt::Display for Period {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}
