//! Validation indices, bias/RMSE maps, regional aggregation and the
//! pseudo-reality delta-change report.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LandMask, LatLon, Period, TargetField};

/// Percentile by linear interpolation between order statistics,
/// `h = (n - 1) p / 100` on 0-indexed sorted samples.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Input(format!("percentile {p} outside [0, 100]")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("percentile of non-finite samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&s, p))
}

fn percentile_sorted(s: &[f64], p: f64) -> f64 {
    let h = (s.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[lo] + (h - lo as f64) * (s[lo + 1] - s[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValidationIndex {
    P02,
    Mean,
    P98,
    Rmse,
}

impl ValidationIndex {
    pub const DISTRIBUTIONAL: [ValidationIndex; 3] = [ValidationIndex::P02, ValidationIndex::Mean, ValidationIndex::P98];

    /// Statistic of a single series; RMSE needs two series and is rejected.
    pub fn of(self, series: &[f64]) -> Result<f64> {
        match self {
            ValidationIndex::P02 => percentile(series, 2.0),
            ValidationIndex::P98 => percentile(series, 98.0),
            ValidationIndex::Mean => {
                if series.is_empty() {
                    return Err(Error::Input("mean of an empty sample".into()));
                }
                Ok(series.iter().sum::<f64>() / series.len() as f64)
            }
            ValidationIndex::Rmse => Err(Error::Input("RMSE is not a single-series statistic".into())),
        }
    }
}

impl std::fmt::Display for ValidationIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ValidationIndex::P02 => "P02",
            ValidationIndex::Mean => "MEAN",
            ValidationIndex::P98 => "P98",
            ValidationIndex::Rmse => "RMSE",
        })
    }
}

impl std::str::FromStr for ValidationIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P02" => Ok(ValidationIndex::P02),
            "MEAN" => Ok(ValidationIndex::Mean),
            "P98" => Ok(ValidationIndex::P98),
            "RMSE" => Ok(ValidationIndex::Rmse),
            other => Err(Error::Input(format!("unknown index '{other}'"))),
        }
    }
}

fn aligned(pred: &TargetField, obs: &TargetField) -> Result<()> {
    if pred.times() != obs.times() {
        return Err(Error::Input("prediction and observation time axes differ".into()));
    }
    if pred.nlocation() != obs.nlocation() {
        return Err(Error::Input(format!(
            "prediction has {} locations, observation {}",
            pred.nlocation(),
            obs.nlocation()
        )));
    }
    if pred.ntime() == 0 {
        return Err(Error::Input("no days to evaluate".into()));
    }
    Ok(())
}

pub fn bias_map(pred: &TargetField, obs: &TargetField, index: ValidationIndex) -> Result<Vec<f64>> {
    aligned(pred, obs)?;
    (0..pred.nlocation()).map(|l| Ok(index.of(&pred.series(l))? - index.of(&obs.series(l))?)).collect()
}

pub fn rmse_map(pred: &TargetField, obs: &TargetField) -> Result<Vec<f64>> {
    aligned(pred, obs)?;
    let n = pred.nlocation();
    let mut acc = vec![0.0; n];
    for t in 0..pred.ntime() {
        for ((a, p), o) in acc.iter_mut().zip(pred.day(t)).zip(obs.day(t)) {
            *a += (p - o) * (p - o);
        }
    }
    Ok(acc.into_iter().map(|s| (s / pred.ntime() as f64).sqrt()).collect())
}

pub fn spatial_mean_abs(map: &[f64]) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    map.iter().map(|v| v.abs()).sum::<f64>() / map.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MonthFilter {
    Annual,
    /// A single calendar month, 1 = January.
    Month(u32),
    /// Any of the listed months (bit m-1 set for month m).
    Months(u16),
}

impl MonthFilter {
    pub const AUGUST: MonthFilter = MonthFilter::Month(8);
    pub const DECEMBER: MonthFilter = MonthFilter::Month(12);

    pub fn accepts(self, d: NaiveDate) -> bool {
        match self {
            MonthFilter::Annual => true,
            MonthFilter::Month(m) => d.month() == m,
            MonthFilter::Months(bits) => bits & (1 << d.month0()) != 0,
        }
    }
}

impl std::fmt::Display for MonthFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const NAMES: [&str; 12] = ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"];
        match *self {
            MonthFilter::Annual => f.write_str("annual"),
            MonthFilter::Month(m) => f.write_str(NAMES.get(m as usize - 1).copied().unwrap_or("?")),
            MonthFilter::Months(bits) => {
                let names: Vec<&str> = (0..12).filter(|m| bits & (1 << m) != 0).map(|m| NAMES[m]).collect();
                f.write_str(&names.join("+"))
            }
        }
    }
}

impl std::str::FromStr for MonthFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        const NAMES: [&str; 12] = ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"];
        let s = s.trim().to_ascii_lowercase();
        if s == "annual" {
            return Ok(MonthFilter::Annual);
        }
        let parts: Vec<&str> = s.split('+').collect();
        let mut bits = 0u16;
        for p in &parts {
            let m = NAMES
                .iter()
                .position(|n| n == p)
                .ok_or_else(|| Error::Input(format!("unknown month filter '{p}'")))?;
            bits |= 1 << m;
        }
        if parts.len() == 1 {
            Ok(MonthFilter::Month(bits.trailing_zeros() + 1))
        } else {
            Ok(MonthFilter::Months(bits))
        }
    }
}

fn filtered_days(field: &TargetField, period: Period, months: MonthFilter) -> Result<Vec<usize>> {
    let days: Vec<usize> = (0..field.ntime())
        .filter(|&t| {
            let d = field.times()[t];
            period.contains(d) && months.accepts(d)
        })
        .collect();
    if days.is_empty() {
        return Err(Error::Input(format!("no {months} days in {period}")));
    }
    Ok(days)
}

/// Index over the filtered future days minus index over the filtered
/// historical days, per location.
pub fn delta_change(
    series: &TargetField,
    hist: Period,
    future: Period,
    index: ValidationIndex,
    months: MonthFilter,
) -> Result<Vec<f64>> {
    if index == ValidationIndex::Rmse {
        return Err(Error::Input("delta change of RMSE is undefined".into()));
    }
    let h = filtered_days(series, hist, months)?;
    let f = filtered_days(series, future, months)?;
    (0..series.nlocation())
        .map(|l| {
            let pick = |days: &[usize]| days.iter().map(|&t| series.day(t)[l]).collect::<Vec<_>>();
            Ok(index.of(&pick(&f))? - index.of(&pick(&h))?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    /// Closed polygon as (lat, lon) vertices; the closing edge is implied.
    pub vertices: Vec<(f64, f64)>,
}

impl Region {
    /// Crossing-number test with a ray towards increasing longitude. Points
    /// on south or west edges count as inside, on north or east edges as
    /// outside, so adjacent regions never share a point.
    pub fn contains(&self, p: LatLon) -> bool {
        let v = &self.vertices;
        let (y, x) = (p.lat, p.lon);
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (yi, xi) = v[i];
            let (yj, xj) = v[j];
            if (yi > y) != (yj > y) {
                let x_cross = xi + (y - yi) / (yj - yi) * (xj - xi);
                if x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionSet {
    pub regions: Vec<Region>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        for r in &regions {
            if r.vertices.len() < 3 {
                return Err(Error::Input(format!("region {} needs at least three vertices", r.name)));
            }
            if r.vertices.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
                return Err(Error::Input(format!("region {} has non-finite vertices", r.name)));
            }
        }
        let mut names: Vec<&str> = regions.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate region names".into()));
        }
        Ok(Self { regions })
    }

    /// Region index per mask location (`None` when unassigned).
    pub fn membership(&self, mask: &LandMask) -> Result<Vec<Option<usize>>> {
        (0..mask.len())
            .map(|loc| {
                let p = mask.location_center(loc);
                let hits: Vec<usize> = (0..self.regions.len()).filter(|&r| self.regions[r].contains(p)).collect();
                match hits.as_slice() {
                    [] => Ok(None),
                    [r] => Ok(Some(*r)),
                    _ => Err(Error::Input(format!(
                        "location {loc} ({:.3}, {:.3}) lies in regions {} and {}",
                        p.lat,
                        p.lon,
                        self.regions[hits[0]].name,
                        self.regions[hits[1]].name
                    ))),
                }
            })
            .collect()
    }
}

/// Mean of `map` over each region's member locations; `None` for empty
/// regions. With `lat_weighted`, members are weighted by cos(latitude).
pub fn region_aggregate(map: &[f64], mask: &LandMask, regions: &RegionSet, lat_weighted: bool) -> Result<Vec<Option<f64>>> {
    if map.len() != mask.len() {
        return Err(Error::Input(format!("map has {} values, mask {} locations", map.len(), mask.len())));
    }
    let member = regions.membership(mask)?;
    let mut sum = vec![0.0; regions.regions.len()];
    let mut weight = vec![0.0; regions.regions.len()];
    for (loc, r) in member.iter().enumerate() {
        if let Some(r) = *r {
            let w = if lat_weighted { mask.location_center(loc).lat.to_radians().cos() } else { 1.0 };
            sum[r] += w * map[loc];
            weight[r] += w;
        }
    }
    Ok(sum.into_iter().zip(weight).map(|(s, w)| (w > 0.0).then(|| s / w)).collect())
}

pub const DEFAULT_DELTA_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub region: String,
    pub index: ValidationIndex,
    pub period: Period,
    pub months: MonthFilter,
    pub gcm: Option<f64>,
    pub model: Option<f64>,
}

impl DeltaRow {
    pub fn discrepancy(&self) -> Option<f64> {
        Some((self.model? - self.gcm?).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub threshold: f64,
    pub rows: Vec<DeltaRow>,
}

/// Regional deltas of one index, period and month filter for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalDeltas {
    pub index: ValidationIndex,
    pub period: Period,
    pub months: MonthFilter,
    pub values: Vec<Option<f64>>,
}

/// Computes regional deltas of `series` for every combination requested.
pub fn regional_deltas(
    series: &TargetField,
    regions: &RegionSet,
    hist: Period,
    futures: &[Period],
    indices: &[ValidationIndex],
    filters: &[MonthFilter],
) -> Result<Vec<RegionalDeltas>> {
    let mut out = Vec::new();
    for &period in futures {
        for &index in indices {
            for &months in filters {
                let delta = delta_change(series, hist, period, index, months)?;
                let values = region_aggregate(&delta, series.mask(), regions, false)?;
                out.push(RegionalDeltas { index, period, months, values });
            }
        }
    }
    Ok(out)
}

pub fn pseudo_reality_report(model: &[RegionalDeltas], gcm: &[RegionalDeltas], regions: &RegionSet, threshold: f64) -> Result<DeltaReport> {
    if model.len() != gcm.len() {
        return Err(Error::Input("model and GCM deltas cover different combinations".into()));
    }
    let mut rows = Vec::new();
    for (m, g) in model.iter().zip(gcm) {
        if (m.index, m.period, m.months) != (g.index, g.period, g.months) {
            return Err(Error::Input("model and GCM deltas are not in the same order".into()));
        }
        if m.values.len() != regions.regions.len() || g.values.len() != regions.regions.len() {
            return Err(Error::Input("delta vectors do not match the region set".into()));
        }
        for (r, region) in regions.regions.iter().enumerate() {
            rows.push(DeltaRow {
                region: region.name.clone(),
                index: m.index,
                period: m.period,
                months: m.months,
                gcm: g.values[r],
                model: m.values[r],
            });
        }
    }
    Ok(DeltaReport { threshold, rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    // shortest round-trip representation keeps the table lossless
    v.map(|x| format!("{x:?}")).unwrap_or_else(|| "NA".into())
}

impl DeltaReport {
    pub fn flagged(&self) -> Vec<&DeltaRow> {
        self.rows.iter().filter(|r| r.discrepancy().map(|d| d > self.threshold).unwrap_or(false)).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("# threshold\t{:?}\n", self.threshold);
        s.push_str("region\tindex\tperiod\tmonths\tgcm_delta\tmodel_delta\tflag\n");
        for r in &self.rows {
            let flag = match r.discrepancy() {
                None => "missing",
                Some(d) if d > self.threshold => "1",
                Some(_) => "0",
            };
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.region,
                r.index,
                r.period,
                r.months,
                fmt_opt(r.gcm),
                fmt_opt(r.model),
                flag
            ));
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::Input(format!("delta report: {m}"));
        let threshold = lines
            .next()
            .and_then(|l| l.strip_prefix("# threshold\t"))
            .ok_or_else(|| bad("missing threshold line"))?
            .parse::<f64>()
            .map_err(|e| bad(&e.to_string()))?;
        lines.next().ok_or_else(|| bad("missing header"))?;
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e: std::num::ParseFloatError| bad(&e.to_string()))
            }
        };
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(&format!("row has {} fields", f.len())));
            }
            rows.push(DeltaRow {
                region: f[0].to_string(),
                index: f[1].parse()?,
                period: Period::parse(f[2])?,
                months: f[3].parse()?,
                gcm: opt(f[4])?,
                model: opt(f[5])?,
            });
        }
        Ok(Self { threshold, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&hundred, 98.0).unwrap() - 98.02).abs() < 1e-12);
        assert_eq!(percentile(&hundred, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&hundred, 100.0).unwrap(), 100.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
    }

    fn field(days: &[(NaiveDate, Vec<f64>)], nloc: usize) -> TargetField {
        let g = GridGeometry::regular(0.0, 0.0, 1.0, 1, nloc).unwrap();
        TargetField::new(
            days.iter().flat_map(|(_, v)| v.clone()).collect(),
            days.iter().map(|(d, _)| *d).collect(),
            LandMask::all_land(g),
        )
        .unwrap()
    }

    fn d(y: i32, m: u32, dd: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, dd).unwrap()
    }

    #[test]
    fn rmse_and_bias_examples() {
        let obs = field(&[(d(2000, 1, 1), vec![0.0]), (d(2000, 1, 2), vec![0.0])], 1);
        let pred = field(&[(d(2000, 1, 1), vec![3.0]), (d(2000, 1, 2), vec![-4.0])], 1);
        assert!((rmse_map(&pred, &obs).unwrap()[0] - 12.5f64.sqrt()).abs() < 1e-15);
        let o = field(&[(d(2000, 1, 1), vec![1.0]), (d(2000, 1, 2), vec![3.0])], 1);
        let p2 = o.with_data(vec![2.0, 6.0]).unwrap();
        assert_eq!(bias_map(&p2, &o, ValidationIndex::Mean).unwrap(), vec![2.0]);
        assert!(bias_map(&p2, &o, ValidationIndex::Rmse).is_err());
        let shifted = field(&[(d(2001, 1, 1), vec![0.0]), (d(2001, 1, 2), vec![0.0])], 1);
        assert!(matches!(rmse_map(&shifted, &obs), Err(Error::Input(_))));
    }

    #[test]
    fn spatial_mean_abs_examples() {
        assert_eq!(spatial_mean_abs(&[0.0, 0.0]), 0.0);
        assert_eq!(spatial_mean_abs(&[-1.0, 1.0]), 1.0);
        assert_eq!(spatial_mean_abs(&[-2.0, 4.0]), 3.0);
    }

    #[test]
    fn month_filter_parsing() {
        assert_eq!("aug".parse::<MonthFilter>().unwrap(), MonthFilter::AUGUST);
        assert_eq!("annual".parse::<MonthFilter>().unwrap(), MonthFilter::Annual);
        let djf: MonthFilter = "dec+jan+feb".parse().unwrap();
        assert!(djf.accepts(d(2000, 1, 5)) && !djf.accepts(d(2000, 8, 5)));
        assert_eq!(djf.to_string().parse::<MonthFilter>().unwrap(), djf);
        assert!("foo".parse::<MonthFilter>().is_err());
    }

    #[test]
    fn delta_of_translation() {
        let mut days = Vec::new();
        for y in [2000, 2050] {
            for k in 0..40u64 {
                let day = d(y, 7, 20) + chrono::Days::new(k);
                let base = (k as f64 * 0.37).sin();
                days.push((day, vec![if y == 2050 { base + 2.0 } else { base }]));
            }
        }
        let f = field(&days, 1);
        let hist = Period::parse("2000-01-01..2000-12-31").unwrap();
        let fut = Period::parse("2050-01-01..2050-12-31").unwrap();
        for idx in ValidationIndex::DISTRIBUTIONAL {
            let v = delta_change(&f, hist, fut, idx, MonthFilter::AUGUST).unwrap();
            assert!((v[0] - 2.0).abs() < 1e-12);
            assert_eq!(delta_change(&f, hist, hist, idx, MonthFilter::Annual).unwrap(), vec![0.0]);
        }
        assert!(delta_change(&f, hist, fut, ValidationIndex::Mean, MonthFilter::DECEMBER).is_err());
    }

    fn square(name: &str, lat0: f64, lon0: f64, size: f64) -> Region {
        Region {
            name: name.into(),
            vertices: vec![(lat0, lon0), (lat0, lon0 + size), (lat0 + size, lon0 + size), (lat0 + size, lon0)],
        }
    }

    #[test]
    fn edge_rule_south_west_inclusive() {
        let r = square("a", 0.0, 0.0, 2.0);
        assert!(r.contains(LatLon::new(0.0, 1.0)));
        assert!(r.contains(LatLon::new(1.0, 0.0)));
        assert!(!r.contains(LatLon::new(2.0, 1.0)));
        assert!(!r.contains(LatLon::new(1.0, 2.0)));
        assert!(r.contains(LatLon::new(1.0, 1.0)));
    }

    #[test]
    fn partition_aggregation() {
        let g = GridGeometry::regular(0.5, 0.5, 1.0, 2, 4).unwrap();
        let mask = LandMask::all_land(g);
        let regions = RegionSet::new(vec![square("w", 0.0, 0.0, 2.0), square("e", 0.0, 2.0, 2.0), square("far", 50.0, 50.0, 1.0)]).unwrap();
        let member = regions.membership(&mask).unwrap();
        let map: Vec<f64> = member.iter().map(|m| m.unwrap() as f64).collect();
        let agg = region_aggregate(&map, &mask, &regions, false).unwrap();
        assert_eq!(agg, vec![Some(0.0), Some(1.0), None]);
        let uniform = region_aggregate(&[3.5; 8], &mask, &regions, true).unwrap();
        assert_eq!(uniform[0], Some(3.5));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let g = GridGeometry::regular(0.5, 0.5, 1.0, 1, 1).unwrap();
        let regions = RegionSet::new(vec![square("a", 0.0, 0.0, 2.0), square("b", 0.0, 0.0, 3.0)]).unwrap();
        assert!(regions.membership(&LandMask::all_land(g)).is_err());
    }

    fn deltas(values: Vec<Option<f64>>) -> Vec<RegionalDeltas> {
        vec![RegionalDeltas {
            index: ValidationIndex::Mean,
            period: Period::parse("2071-01-01..2100-12-31").unwrap(),
            months: MonthFilter::AUGUST,
            values,
        }]
    }

    #[test]
    fn report_flags_and_round_trips() {
        let regions = RegionSet::new(vec![square("a", 0.0, 0.0, 1.0), square("b", 5.0, 0.0, 1.0), square("c", 9.0, 0.0, 1.0)]).unwrap();
        let same = pseudo_reality_report(&deltas(vec![Some(1.0), Some(2.0), None]), &deltas(vec![Some(1.0), Some(2.0), None]), &regions, 2.0).unwrap();
        assert!(same.flagged().is_empty());
        let one = pseudo_reality_report(&deltas(vec![Some(1.0), Some(4.5), Some(0.1)]), &deltas(vec![Some(1.0), Some(2.0), Some(0.3)]), &regions, 2.0).unwrap();
        assert_eq!(one.flagged().len(), 1);
        assert_eq!(one.flagged()[0].region, "b");
        let back = DeltaReport::from_table(&one.to_table()).unwrap();
        assert_eq!(back, one);
        assert_eq!(DeltaReport::from_table(&same.to_table()).unwrap(), same);
    }
}
