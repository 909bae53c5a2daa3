//! Independent reference implementations used as test oracles. They are
//! deliberately written differently from the library code.
#![allow(dead_code)]

use chrono::{Datelike, NaiveDate};
use dsxai::grid::{GridGeometry, LandMask, TargetField};
use dsxai::models::{self, ArchitectureConfig};
use dsxai::nn::{LayerSpec, Mode, ModelGraph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance via the chord between unit vectors.
pub fn chord_distance_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let v = |lat: f64, lon: f64| {
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (a, b) = (v(lat1, lon1), v(lat2, lon2));
    let chord = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    2.0 * EARTH_RADIUS_KM * (chord / 2.0).min(1.0).asin()
}

/// Percentile from the definition: the value at fractional rank
/// `(n-1)p/100`, found by counting rather than sorting in place.
pub fn percentile_oracle(samples: &[f64], p: f64) -> f64 {
    let n = samples.len();
    let rank = (n - 1) as f64 * p / 100.0;
    let k = rank.floor() as usize;
    let frac = rank - k as f64;
    // k-th order statistic: the sample with fewer than k+1 values below it
    // and at least k+1 values at or below it
    let kth = |k: usize| -> f64 {
        *samples
            .iter()
            .find(|&&v| {
                let below = samples.iter().filter(|&&w| w < v).count();
                let at_or_below = samples.iter().filter(|&&w| w <= v).count();
                below <= k && k < at_or_below
            })
            .unwrap()
    };
    if k + 1 >= n {
        kth(n - 1)
    } else {
        let (a, b) = (kth(k), kth(k + 1));
        a + frac * (b - a)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn index_oracle(name: &str, v: &[f64]) -> f64 {
    match name {
        "P02" => percentile_oracle(v, 2.0),
        "P98" => percentile_oracle(v, 98.0),
        "MEAN" => mean(v),
        other => panic!("no oracle for {other}"),
    }
}

pub fn rmse_oracle(pred: &TargetField, obs: &TargetField) -> Vec<f64> {
    (0..pred.nlocation())
        .map(|l| {
            let p = pred.series(l);
            let o = obs.series(l);
            let mse = p.iter().zip(&o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
            mse.sqrt()
        })
        .collect()
}

pub fn bias_oracle(pred: &TargetField, obs: &TargetField, index: &str) -> Vec<f64> {
    (0..pred.nlocation()).map(|l| index_oracle(index, &pred.series(l)) - index_oracle(index, &obs.series(l))).collect()
}

/// Delta change by scanning dates one by one.
pub fn delta_oracle(
    field: &TargetField,
    hist: (NaiveDate, NaiveDate),
    future: (NaiveDate, NaiveDate),
    index: &str,
    months: &[u32],
) -> Vec<f64> {
    let pick = |(a, b): (NaiveDate, NaiveDate), l: usize| -> Vec<f64> {
        field
            .times()
            .iter()
            .enumerate()
            .filter(|(_, d)| **d >= a && **d <= b && (months.is_empty() || months.contains(&d.month())))
            .map(|(t, _)| field.day(t)[l])
            .collect()
    };
    (0..field.nlocation()).map(|l| index_oracle(index, &pick(future, l)) - index_oracle(index, &pick(hist, l))).collect()
}

/// Winding-number point-in-polygon on (lat, lon) vertices.
pub fn winding_contains(vertices: &[(f64, f64)], lat: f64, lon: f64) -> bool {
    let mut angle = 0.0;
    for i in 0..vertices.len() {
        let (a_lat, a_lon) = vertices[i];
        let (b_lat, b_lon) = vertices[(i + 1) % vertices.len()];
        let a = (a_lon - lon, a_lat - lat);
        let b = (b_lon - lon, b_lat - lat);
        angle += (a.0 * b.1 - a.1 * b.0).atan2(a.0 * b.0 + a.1 * b.1);
    }
    angle.abs() > std::f64::consts::PI
}

pub fn region_mean_oracle(map: &[f64], mask: &LandMask, polygon: &[(f64, f64)], lat_weighted: bool) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (loc, &v) in map.iter().enumerate() {
        let c = mask.location_center(loc);
        if winding_contains(polygon, c.lat, c.lon) {
            let w = if lat_weighted { (c.lat * std::f64::consts::PI / 180.0).cos() } else { 1.0 };
            num += w * v;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Central finite difference of `f` along coordinate `k`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, eps: f64) -> f64 {
    let mut p = x.to_vec();
    p[k] = x[k] + eps;
    let up = f(&p);
    p[k] = x[k] - eps;
    let down = f(&p);
    (up - down) / (2.0 * eps)
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn days_from(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    (0..n).map(|i| start + chrono::Duration::days(i as i64)).collect()
}

/// Random target field on a small all-land grid.
pub fn random_target(rng: &mut ChaCha8Rng, nlat: usize, nlon: usize, start: NaiveDate, days: usize) -> TargetField {
    let g = GridGeometry::regular(30.0, -100.0, 1.5, nlat, nlon).unwrap();
    let mask = LandMask::all_land(g);
    let data = (0..days * mask.len()).map(|_| rng.random_range(-5.0..25.0)).collect();
    TargetField::new(data, days_from(start, days), mask).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn probe_loss(g: &ModelGraph<f64>, x: &Tensor<f64>, probe: &[f64], mode: Mode) -> f64 {
    let (out, _) = g.forward(x, mode).unwrap();
    out.data.iter().zip(probe).map(|(a, b)| a * b).sum()
}

/// Worst relative error between analytic and central-difference gradients of
/// `sum(output * probe)` over `probes` random parameter and input coordinates.
pub fn graph_gradient_error(g: &ModelGraph<f64>, batch: usize, mode: Mode, probes: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape: Shape = g.input_shape();
    let x = Tensor::from_vec(batch, shape, (0..batch * shape.numel()).map(|_| r.random_range(-1.0..1.0)).collect());
    let probe: Vec<f64> = (0..batch * g.output_shape().numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, tape) = g.forward(&x, mode).unwrap();
    let (pg, ig) = g.backward(&tape, &Tensor::from_vec(batch, g.output_shape(), probe.clone()), true, true).unwrap();
    let (pg, ig) = (pg.unwrap().to_flat(), ig.unwrap().data);
    let flat = g.params().to_flat();
    let trainable: Vec<usize> =
        g.params().tensors.iter().flat_map(|t| std::iter::repeat_n(t.trainable, t.data.len())).enumerate().filter(|(_, t)| *t).map(|(i, _)| i).collect();
    let mut worst: f64 = 0.0;
    for i in 0..probes {
        let (analytic, fd) = if i % 2 == 0 && !trainable.is_empty() {
            let k = trainable[r.random_range(0..trainable.len())];
            let f = |p: &[f64]| {
                let mut gp = g.clone();
                gp.params_mut().load_flat(p).unwrap();
                probe_loss(&gp, &x, &probe, mode)
            };
            (pg[k], central_difference(&f, &flat, k, 1e-5))
        } else {
            let k = r.random_range(0..x.data.len());
            let f = |d: &[f64]| probe_loss(g, &Tensor::from_vec(batch, shape, d.to_vec()), &probe, mode);
            (ig[k], central_difference(&f, &x.data, k, 1e-5))
        };
        worst = worst.max(rel_error(analytic, fd));
    }
    worst
}

pub fn architecture_gradient_error(config: &ArchitectureConfig, probes: usize, seed: u64) -> f64 {
    let g = models::build::<f64>(config, seed).unwrap();
    graph_gradient_error(&g, 2, Mode::Train, probes, seed)
}

/// One hidden ReLU layer on a 2x4x4 input, biases perturbed off zero.
pub fn small_relu_net(seed: u64) -> ModelGraph<f64> {
    let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 32, units: 8 }, LayerSpec::Relu, LayerSpec::Dense { inputs: 8, units: 2 }];
    let mut g = ModelGraph::<f64>::build(Shape::grid(2, 4, 4), layers, seed).unwrap();
    let mut r = rng(seed);
    let flat: Vec<f64> = g.params().to_flat().iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
    g.params_mut().load_flat(&flat).unwrap();
    g
}

pub fn random_polygon(r: &mut impl Rng, lat: f64, lon: f64) -> Vec<(f64, f64)> {
    // star-shaped polygon with vertices sorted by angle
    let k = r.random_range(3..9);
    let mut angles: Vec<f64> = (0..k).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles
        .iter()
        .map(|a| {
            let radius = r.random_range(1.0..6.0);
            (lat + radius * a.sin(), lon + radius * a.cos())
        })
        .collect()
}
