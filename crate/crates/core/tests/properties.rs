mod common;

use chrono::{Datelike, NaiveDate};
use common::*;
use dsxai::evaluation::{self, Region, RegionSet, ValidationIndex};
use dsxai::grid::{bilinear_regrid, haversine_unchecked, ChannelSpec, GridGeometry, GriddedField, LandMask, LatLon, Period, TargetField, Variable};
use dsxai::io::artifacts::{self, Provenance};
use dsxai::io::container::Container;
use dsxai::io::synth::{self, AnomalyModel, LandMaskSpec, Noise, SyntheticSpec};
use dsxai::models::{self, Architecture, ArchitectureConfig, TargetGrid};
use dsxai::nn::{LayerSpec, Mode, ModelGraph, Padding, Shape, Tensor};
use dsxai::preprocess::{self, MonthlyMoments};
use dsxai::training;
use dsxai::xai::{self, Aggregation, SaliencyCube, SdmOptions};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2001, 1, 1).unwrap()
}

fn random_field(seed: u64, nlat: usize, nlon: usize, nchannel: usize, days: usize) -> GriddedField {
    let mut r = rng(seed);
    let g = GridGeometry::regular(30.0, -100.0, 2.0, nlat, nlon).unwrap();
    let channels = (0..nchannel).map(|c| ChannelSpec::new(Variable::AirTemperature, 1000 - 100 * c as u32)).collect();
    let data = (0..days * nchannel * nlat * nlon).map(|_| r.random_range(-4.0..12.0)).collect();
    GriddedField::new(data, g, channels, days_from(start(), days)).unwrap()
}

fn cube(seed: u64, day: NaiveDate, nlocation: usize, shape: (usize, usize, usize)) -> SaliencyCube {
    let mut r = rng(seed);
    let n = shape.0 * shape.1 * shape.2;
    let raw: Vec<Vec<f64>> = (0..nlocation).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    xai::normalize_threshold(&raw, shape, day, Default::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn haversine_is_a_metric(a in (-80.0..80.0f64, -180.0..180.0f64), b in (-80.0..80.0f64, -180.0..180.0f64), c in (-80.0..80.0f64, -180.0..180.0f64)) {
        let (a, b, c) = (LatLon::new(a.0, a.1), LatLon::new(b.0, b.1), LatLon::new(c.0, c.1));
        let ab = haversine_unchecked(a, b);
        prop_assert!((ab - haversine_unchecked(b, a)).abs() <= 1e-9 * ab.max(1.0));
        prop_assert_eq!(haversine_unchecked(a, a), 0.0);
        let (ac, cb) = (haversine_unchecked(a, c), haversine_unchecked(c, b));
        prop_assert!(ab <= (ac + cb) * (1.0 + 1e-9));
    }

    #[test]
    fn regrid_to_same_geometry_is_identity(seed in 0u64..1000, nlat in 1usize..6, nlon in 1usize..6) {
        let f = random_field(seed, nlat, nlon, 2, 3);
        let out = bilinear_regrid(&f, f.geometry()).unwrap();
        prop_assert!(out.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn predictor_container_round_trip(seed in 0u64..1000, nlat in 1usize..5, nlon in 1usize..5, days in 1usize..6) {
        // fields are stored as f32, so round values to f32 first
        let f = random_field(seed, nlat, nlon, 2, days);
        let f = f.with_data(f.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
        let bytes = artifacts::predictors_to_container(&f, &Provenance::new()).unwrap().to_bytes().unwrap();
        let back = artifacts::predictors_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert!(back.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.times(), f.times());
        prop_assert_eq!(back.geometry(), f.geometry());
        prop_assert_eq!(bytes, artifacts::predictors_to_container(&back, &Provenance::new()).unwrap().to_bytes().unwrap());
    }

    #[test]
    fn standardization_keeps_argmax_day(seed in 0u64..1000) {
        let f = random_field(seed, 3, 3, 2, 20);
        let s = preprocess::fit_standardizer(&f, None).unwrap();
        let z = s.apply(&f).unwrap();
        let n = f.sample_len();
        let argmax = |d: &[f64], i: usize| (0..20).max_by(|&a, &b| d[a * n + i].total_cmp(&d[b * n + i])).unwrap();
        for i in 0..n {
            prop_assert_eq!(argmax(f.data(), i), argmax(z.data(), i));
        }
    }

    #[test]
    fn standardizer_ignores_day_order(seed in 0u64..1000) {
        let f = random_field(seed, 2, 3, 2, 15);
        let n = f.sample_len();
        let mut order: Vec<usize> = (0..15).collect();
        order.shuffle(&mut rng(seed + 1));
        let data = order.iter().flat_map(|&t| f.data()[t * n..(t + 1) * n].to_vec()).collect();
        let g = GriddedField::new(data, f.geometry().clone(), f.channels().to_vec(), f.times().to_vec()).unwrap();
        let (a, b) = (preprocess::fit_standardizer(&f, None).unwrap(), preprocess::fit_standardizer(&g, None).unwrap());
        for (x, y) in a.mean.iter().zip(&b.mean).chain(a.std.iter().zip(&b.std)) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn gcm_adjustment_keeps_in_month_ranking(seed in 0u64..200) {
        let gcm = random_field(seed, 2, 2, 1, 365);
        let obs = random_field(seed + 7, 2, 2, 1, 365);
        let adj = preprocess::adjust_gcm_monthly(&gcm, &MonthlyMoments::fit(&gcm, None).unwrap(), &MonthlyMoments::fit(&obs, None).unwrap()).unwrap();
        let n = gcm.sample_len();
        for month in 1..=12 {
            let days: Vec<usize> = (0..365).filter(|&t| gcm.times()[t].month() == month).collect();
            for i in 0..n {
                for w in days.windows(2) {
                    let before = gcm.data()[w[0] * n + i] < gcm.data()[w[1] * n + i];
                    let after = adj.data()[w[0] * n + i] < adj.data()[w[1] * n + i];
                    prop_assert_eq!(before, after);
                }
            }
        }
    }

    #[test]
    fn normalize_ignores_positive_scale(seed in 0u64..1000, scale in 1e-3..1e3f64) {
        let mut r = rng(seed);
        let raw: Vec<Vec<f64>> = (0..3).map(|_| (0..12).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let scaled: Vec<Vec<f64>> = raw.iter().map(|m| m.iter().map(|v| v * scale).collect()).collect();
        let a = xai::normalize_threshold(&raw, (1, 3, 4), start(), Default::default()).unwrap();
        let b = xai::normalize_threshold(&scaled, (1, 3, 4), start(), Default::default()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            // a value sitting on the threshold may flip; everything else agrees
            prop_assert!((x - y).abs() <= 1e-12 || (x.max(*y) - xai::SALIENCY_THRESHOLD).abs() < 1e-9);
        }
    }

    #[test]
    fn asm_ignores_day_and_location_order(seed in 0u64..1000) {
        let shape = (2, 3, 3);
        let cubes: Vec<SaliencyCube> = (0..4).map(|d| cube(seed * 10 + d, start() + chrono::Duration::days(d as i64), 5, shape)).collect();
        let mut shuffled = cubes.clone();
        let mut r = rng(seed);
        shuffled.shuffle(&mut r);
        for c in shuffled.iter_mut() {
            let n = c.map_len();
            let mut locs: Vec<Vec<f64>> = c.values.chunks(n).map(<[f64]>::to_vec).collect();
            locs.shuffle(&mut r);
            c.values = locs.concat();
        }
        for agg in [Aggregation::Mean, Aggregation::Sum] {
            let a = xai::accumulate_asm(&cubes, agg, None).unwrap();
            let b = xai::accumulate_asm(&shuffled, agg, None).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sdm_raw_scales_and_ignores_zero_boxes(seed in 0u64..1000, k in 0.1..10.0f64) {
        let g = GridGeometry::regular(30.0, -100.0, 2.0, 3, 3).unwrap();
        let mask = LandMask::new(GridGeometry::regular(31.0, -99.0, 1.0, 2, 2).unwrap(), vec![true; 4]).unwrap();
        let c = cube(seed, start(), 4, (1, 3, 3));
        let mut scaled = c.clone();
        scaled.values.iter_mut().for_each(|v| *v *= k);
        let a = xai::compute_sdm(std::slice::from_ref(&c), &g, &mask, SdmOptions::channel(0), None).unwrap();
        let b = xai::compute_sdm(&[scaled], &g, &mask, SdmOptions::channel(0), None).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((k * x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
        // an extra column of zero-salience boxes to the east
        let wide = GridGeometry::regular(30.0, -100.0, 2.0, 3, 4).unwrap();
        let mut padded = c.clone();
        padded.nlon = 4;
        padded.values = c.values.chunks(3).flat_map(|row| [row[0], row[1], row[2], 0.0]).collect();
        let p = xai::compute_sdm(&[padded], &wide, &mask, SdmOptions::channel(0), None).unwrap();
        for (x, y) in a.values.iter().zip(&p.values) {
            prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn indices_are_translation_equivariant(seed in 0u64..1000, shift in -50.0..50.0f64) {
        let mut r = rng(seed);
        let pred = random_target(&mut r, 2, 2, start(), 30);
        let obs = random_target(&mut r, 2, 2, start(), 30);
        let moved = |f: &TargetField| f.with_data(f.data().iter().map(|v| v + shift).collect()).unwrap();
        for idx in ValidationIndex::DISTRIBUTIONAL {
            for l in 0..pred.nlocation() {
                let a = idx.of(&pred.series(l)).unwrap() + shift;
                let b = idx.of(&moved(&pred).series(l)).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
        let a = evaluation::rmse_map(&pred, &obs).unwrap();
        let b = evaluation::rmse_map(&moved(&pred), &moved(&obs)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn region_partition_recovers_domain_mean(seed in 0u64..1000, cut_lat in 31.0..35.0f64, cut_lon in -98.0..-93.0f64) {
        let mut r = rng(seed);
        let g = GridGeometry::regular(30.0, -100.0, 0.9, 7, 9).unwrap();
        let mask = LandMask::new(g.clone(), (0..g.len()).map(|_| r.random_bool(0.7)).collect()).unwrap();
        let map: Vec<f64> = (0..mask.len()).map(|_| r.random_range(-3.0..3.0)).collect();
        let quad = |name: &str, la: (f64, f64), lo: (f64, f64)| Region { name: name.into(), vertices: vec![(la.0, lo.0), (la.1, lo.0), (la.1, lo.1), (la.0, lo.1)] };
        let set = RegionSet::new(vec![
            quad("sw", (20.0, cut_lat), (-110.0, cut_lon)),
            quad("nw", (cut_lat, 45.0), (-110.0, cut_lon)),
            quad("se", (20.0, cut_lat), (cut_lon, -80.0)),
            quad("ne", (cut_lat, 45.0), (cut_lon, -80.0)),
        ]).unwrap();
        let means = evaluation::region_aggregate(&map, &mask, &set, false).unwrap();
        let member = set.membership(&mask).unwrap();
        let total: f64 = (0..4).map(|k| means[k].unwrap_or(0.0) * member.iter().filter(|m| **m == Some(k)).count() as f64).sum();
        prop_assert!(member.iter().all(Option::is_some));
        prop_assert!((total / mask.len() as f64 - mean(&map)).abs() <= 1e-12);
    }

    #[test]
    fn delta_with_hist_equal_future_is_zero(seed in 0u64..1000) {
        let f = random_target(&mut rng(seed), 2, 2, start(), 400);
        let p = Period::new(start(), start() + chrono::Duration::days(399)).unwrap();
        for idx in ValidationIndex::DISTRIBUTIONAL {
            for filter in [evaluation::MonthFilter::Annual, evaluation::MonthFilter::AUGUST] {
                prop_assert!(evaluation::delta_change(&f, p, p, idx, filter).unwrap().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded(n in 2usize..500, frac in 0.01..0.5f64, seed in 0u64..100) {
        use rand::SeedableRng;
        let split = |s| training::split_days(n, frac, &mut rand_chacha::ChaCha8Rng::seed_from_u64(s));
        let (train, val) = split(seed);
        prop_assert_eq!(split(seed), (train.clone(), val.clone()));
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(!val.is_empty() && !train.is_empty());
        prop_assert!(train.iter().all(|t| !val.contains(t)));
    }
}

fn random_net(seed: u64) -> ModelGraph<f64> {
    let layers = vec![
        LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, padding: Padding::Same },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 3 * 4 * 4, units: 6 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 6, units: 2 },
    ];
    let mut g = ModelGraph::<f64>::build(Shape::grid(2, 4, 4), layers, seed).unwrap();
    let mut r = rng(seed);
    let flat: Vec<f64> = g.params().to_flat().iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
    g.params_mut().load_flat(&flat).unwrap();
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ig_completeness(seed in 0u64..10_000) {
        let g = small_relu_net(seed);
        let mut r = rng(seed + 1);
        let x: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let batch = xai::integrated_gradients_for(&g, &x, &vec![0.0; 32], &[0, 1], 1024).unwrap();
        for (neuron, (attr, delta)) in batch.attributions.iter().zip(&batch.output_delta).enumerate() {
            let s: f64 = attr.iter().sum();
            // each kink on the path costs up to h * |dF/dalpha|, so scale by the steepest slope
            let slope = (0..=128)
                .map(|k| {
                    let p: Vec<f64> = x.iter().map(|v| v * k as f64 / 128.0).collect();
                    g.input_gradient(&p, neuron).unwrap().iter().zip(&x).map(|(d, v)| d * v).sum::<f64>().abs()
                })
                .fold(0.0, f64::max);
            prop_assert!((s - delta).abs() <= 1e-2 * delta.abs().max(slope) + 1e-6, "sum {s} vs delta {delta}, slope {slope}");
        }
    }

    #[test]
    fn eval_forward_is_pure(seed in 0u64..10_000) {
        let g = random_net(seed);
        let x = Tensor::from_vec(1, Shape::grid(2, 4, 4), (0..32).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect());
        let (a, _) = g.forward(&x, Mode::Eval).unwrap();
        let (b, _) = g.forward(&x, Mode::Eval).unwrap();
        prop_assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn linear_model_gradient_is_constant(seed in 0u64..10_000) {
        let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 12, units: 3 }];
        let g = ModelGraph::<f64>::build(Shape::grid(1, 3, 4), layers, seed).unwrap();
        let mut r = rng(seed);
        let (x, y): (Vec<f64>, Vec<f64>) = (0..12).map(|_| (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0))).unzip();
        for neuron in 0..3 {
            let (a, b) = (g.input_gradient(&x, neuron).unwrap(), g.input_gradient(&y, neuron).unwrap());
            prop_assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-12));
        }
    }

    #[test]
    fn relu_net_gradient_is_locally_constant(seed in 0u64..10_000) {
        let g = random_net(seed);
        let mut r = rng(seed + 3);
        let x: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + r.random_range(-1e-9..1e-9)).collect();
        let (a, b) = (g.input_gradient(&x, 0).unwrap(), g.input_gradient(&y, 0).unwrap());
        prop_assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-9));
    }

    #[test]
    fn parameter_store_round_trip(seed in 0u64..10_000) {
        let cfg = ArchitectureConfig::dense(Architecture::DeepEsd, (2, 8, 8), 3, 0.1);
        let model = models::build::<f32>(&cfg, seed).unwrap();
        let g = GridGeometry::regular(0.0, 0.0, 1.0, 8, 8).unwrap();
        let f = GriddedField::new(vec![0.5; 2 * 64 * 2].iter().enumerate().map(|(i, v)| v + i as f64).collect(), g.clone(), vec![ChannelSpec::new(Variable::AirTemperature, 850), ChannelSpec::new(Variable::Geopotential, 500)], days_from(start(), 2)).unwrap();
        let ck = artifacts::Checkpoint {
            config: cfg,
            model,
            standardizer: preprocess::fit_standardizer(&f, None).unwrap(),
            mask: LandMaskSpec { geometry: GridGeometry::regular(0.0, 0.0, 1.0, 1, 3).unwrap(), cells: vec![true; 3] },
        };
        let bytes = artifacts::checkpoint_to_container(&ck, &Provenance::new()).unwrap().to_bytes().unwrap();
        let back = artifacts::checkpoint_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        let (p, q) = (ck.model.params().to_flat(), back.model.params().to_flat());
        prop_assert!(p.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits()) && p.len() == q.len());
    }
}

#[test]
fn builders_match_mask_and_scale_monotonically() {
    let cells: Vec<usize> = (0..32 * 32).step_by(11).collect();
    let n = cells.len();
    for arch in [Architecture::DeepEsd, Architecture::Pan, Architecture::Unet] {
        let counts: Vec<usize> = [1.0, 0.5, 0.01]
            .iter()
            .map(|&s| {
                let cfg = match arch {
                    Architecture::Unet => ArchitectureConfig::unet((2, 16, 16), s, 2, TargetGrid { rows: 32, cols: 32, cells: cells.clone() }),
                    a => ArchitectureConfig::dense(a, (2, 16, 16), n, s),
                };
                let m = models::build::<f32>(&cfg, 0).unwrap();
                assert_eq!(m.output_shape().numel(), n, "{arch}");
                m.params().numel()
            })
            .collect();
        assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{arch}: {counts:?}");
    }
}

#[test]
fn synthetic_weights_recovered_by_least_squares() {
    let g = GridGeometry::regular(30.0, -100.0, 2.0, 4, 4).unwrap();
    let fine = synth::refined_geometry(&g, 2).unwrap();
    let mut cells = vec![false; fine.len()];
    for i in [9, 20, 42] {
        cells[i] = true;
    }
    let spec = SyntheticSpec {
        seed: 9,
        predictor_geometry: g.clone(),
        channels: vec![ChannelSpec::new(Variable::AirTemperature, 850), ChannelSpec::new(Variable::Geopotential, 500)],
        causal_channel: 1,
        predictand_mask: LandMaskSpec { geometry: fine, cells },
        radius_km: 450.0,
        stencils: None,
        noise: Noise::Absolute(0.0),
        anomalies: AnomalyModel::default(),
        predictand_offset: 0.0,
        seasonal_amplitude: 0.0,
        start: start(),
        days: 120,
        future_shift: None,
    };
    let d = synth::synth_generate(&spec).unwrap();
    let n = g.len();
    // regress every location on the whole causal channel
    let x = nalgebra::DMatrix::from_fn(spec.days, n, |t, i| d.predictors.sample(t)[n + i]);
    let svd = x.clone().svd(true, true);
    for (loc, stencil) in d.truth.stencils.iter().enumerate() {
        let y = nalgebra::DVector::from_fn(spec.days, |t, _| d.predictand.day(t)[loc]);
        let w = svd.solve(&y, 1e-12).unwrap();
        let mut expected = vec![0.0; n];
        for &(c, v) in stencil {
            expected[c] = v;
        }
        for i in 0..n {
            assert!((w[i] - expected[i]).abs() < 1e-8, "loc {loc} cell {i}: {} vs {}", w[i], expected[i]);
        }
    }
}
