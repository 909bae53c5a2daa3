//! Browser demo: great-circle distance fields and integrated-gradients
//! saliency of a freshly initialised network on a 16x16 predictor grid.

use chrono::NaiveDate;
use dsxai::grid::{haversine_unchecked, GridGeometry};
use dsxai::models::{self, Architecture, ArchitectureConfig};
use dsxai::nn::ModelGraph;
use dsxai::xai;
use wasm_bindgen::prelude::*;

const N: usize = 16;
const CHANNELS: usize = 2;

fn geometry() -> GridGeometry {
    GridGeometry::regular(20.0, -120.0, 2.0, N, N).expect("valid demo grid")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Grey PGM pixels expanded to RGBA with a blue-to-yellow ramp.
fn rgba(pgm: &[u8]) -> Vec<u8> {
    let start = pgm.len() - N * N;
    pgm[start..].iter().flat_map(|&v| [v, v, 255 - v, 255]).collect()
}

/// Distance in km from the clicked box to every box, as RGBA pixels, north up.
#[wasm_bindgen]
pub fn distance_field(row: usize, col: usize) -> Result<Vec<u8>, JsValue> {
    js(distance_pixels(row, col))
}

fn distance_pixels(row: usize, col: usize) -> Result<Vec<u8>, String> {
    let g = geometry();
    if row >= N || col >= N {
        return Err(err("cell outside the grid"));
    }
    let from = g.center(row, col);
    let d: Vec<f64> = (0..g.len()).map(|i| haversine_unchecked(from, g.center_of(i))).collect();
    Ok(rgba(&dsxai::io::render::render_heatmap(&d, &g).map_err(err)?))
}

/// A randomly initialised model with one output per predictor box.
#[wasm_bindgen]
pub struct Explainer {
    model: ModelGraph<f32>,
    input: Vec<f32>,
    last: Vec<f64>,
}

#[wasm_bindgen]
impl Explainer {
    #[wasm_bindgen(constructor)]
    pub fn new(architecture: &str, seed: u32) -> Result<Explainer, JsValue> {
        js(Self::build(architecture, seed))
    }

    /// Normalised saliency of output `(row, col)` summed over channels, as RGBA pixels.
    pub fn saliency(&mut self, row: usize, col: usize, steps: usize) -> Result<Vec<u8>, JsValue> {
        js(self.saliency_pixels(row, col, steps))
    }

    /// Saliency-weighted mean distance in km from `(row, col)` for the last map.
    pub fn weighted_distance_km(&self, row: usize, col: usize) -> f64 {
        let g = geometry();
        let total: f64 = self.last.iter().sum();
        if total == 0.0 || row >= N || col >= N {
            return 0.0;
        }
        let from = g.center(row, col);
        self.last.iter().enumerate().map(|(i, s)| s * haversine_unchecked(from, g.center_of(i))).sum::<f64>() / total
    }
}

impl Explainer {
    fn build(architecture: &str, seed: u32) -> Result<Explainer, String> {
        let arch: Architecture = architecture.parse().map_err(err)?;
        if arch == Architecture::Unet {
            return Err(err("the demo supports deepesd and pan"));
        }
        let config = ArchitectureConfig::dense(arch, (CHANNELS, N, N), N * N, 0.1);
        let model = models::build::<f32>(&config, seed as u64).map_err(err)?;
        let input = (0..CHANNELS * N * N)
            .map(|i| {
                let (c, r, k) = (i / (N * N), (i / N) % N, i % N);
                ((r as f32 * 0.7 + c as f32).sin() + (k as f32 * 0.45).cos()) * 0.8
            })
            .collect();
        Ok(Explainer { model, input, last: Vec::new() })
    }

    fn saliency_pixels(&mut self, row: usize, col: usize, steps: usize) -> Result<Vec<u8>, String> {
        let g = geometry();
        if row >= N || col >= N {
            return Err(err("cell outside the grid"));
        }
        let baseline = vec![0.0f32; self.input.len()];
        let loc = g.index(row, col);
        let ig = xai::integrated_gradients(&self.model, &self.input, &baseline, loc, steps).map_err(err)?;
        let cube = xai::normalize_threshold(&[ig], (CHANNELS, N, N), NaiveDate::MIN, Default::default()).map_err(err)?;
        let map = cube.location(0);
        self.last = (0..g.len()).map(|i| (0..CHANNELS).map(|c| map[c * g.len() + i]).sum()).collect();
        Ok(rgba(&dsxai::io::render::render_heatmap(&self.last, &g).map_err(err)?))
    }
}
