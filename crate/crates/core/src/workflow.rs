//! Command implementations behind the CLI. Every command reads a run-config,
//! writes its artifacts into `output_dir` and a `<command>.manifest.json`
//! recording seed, config hash and software version. On failure every file
//! written so far is removed.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{self, MonthFilter, Region, RegionSet, ValidationIndex};
use crate::grid::{ChannelSpec, GridGeometry, GriddedField, LandMask, Period};
use crate::io::artifacts::{self, Checkpoint, Provenance};
use crate::io::config::RunConfig;
use crate::io::container::{write_atomic, Container, NamedArray};
use crate::io::render;
use crate::io::synth::{self, AnomalyModel, FutureShift, LandMaskSpec, Noise, SyntheticSpec};
use crate::models::{self, Architecture, ArchitectureConfig, TargetGrid};
use crate::preprocess::{self, MonthlyMoments};
use crate::training::{self, TrainConfig};
use crate::xai::{self, Aggregation, SdmChannel, SdmOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Downscale,
    Evaluate,
    Explain,
    Delta,
    Render,
}

impl Command {
    pub const ALL: [Command; 7] =
        [Command::Synth, Command::Train, Command::Downscale, Command::Evaluate, Command::Explain, Command::Delta, Command::Render];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Downscale => "downscale",
            Command::Evaluate => "evaluate",
            Command::Explain => "explain",
            Command::Delta => "delta",
            Command::Render => "render",
        }
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            Command::Synth => &[
                "seed",
                "output_dir",
                "predictor_lat0_deg",
                "predictor_lon0_deg",
                "predictor_resolution_deg",
                "predictor_nlat",
                "predictor_nlon",
                "channels",
                "causal_channel",
                "upsampling_factor",
                "mask_row_start",
                "mask_row_end",
                "mask_col_start",
                "mask_col_end",
                "mask_stride",
                "radius_km",
                "noise_std",
                "noise_relative",
                "correlation_km",
                "anomaly_modes",
                "predictand_offset_degc",
                "seasonal_amplitude",
                "start_date",
                "days",
                "future_shift_start",
                "future_shift_per_month_degc",
            ],
            Command::Train => &[
                "seed",
                "output_dir",
                "predictors",
                "predictand",
                "architecture",
                "width_scale",
                "upsampling_factor",
                "train_period",
                "learning_rate",
                "batch_size",
                "max_epochs",
                "patience",
                "validation_fraction",
            ],
            Command::Downscale => &["seed", "output_dir", "model", "predictors", "period", "gcm_hist_period", "obs_predictors", "obs_period"],
            Command::Evaluate => &["seed", "output_dir", "prediction", "observation", "period"],
            Command::Explain => &[
                "seed",
                "output_dir",
                "model",
                "predictors",
                "period",
                "max_days",
                "ig_steps",
                "sdm_channel",
                "sdm_all_channels",
                "sdm_normalized",
                "aggregation",
            ],
            Command::Delta => &[
                "seed",
                "output_dir",
                "gcm",
                "model_prediction",
                "regions",
                "hist_period",
                "future_periods",
                "indices",
                "month_filters",
                "threshold_degc",
            ],
            Command::Render => &["seed", "output_dir", "input", "array", "channel", "day", "output"],
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown command '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub outputs: Vec<String>,
    pub summary: Vec<(String, String)>,
    /// Wall-clock time; the only field that differs between identical runs.
    pub created: String,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

/// Tracks written files so a failed run leaves nothing behind.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
    summary: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir, written: Vec::new(), summary: Vec::new() })
    }

    fn container(&mut self, name: &str, c: &Container) -> Result<()> {
        self.bytes(name, &c.to_bytes()?)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        write_atomic(&path, bytes)
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

pub fn run(command: Command, config: &RunConfig) -> Result<RunSummary> {
    config.check_known(command.keys())?;
    let seed: u64 = config.get_or("seed", 0)?;
    let mut out = Outputs::new(config.path("output_dir")?)?;
    let mut provenance = Provenance::new();
    provenance.insert("command".into(), command.name().into());
    provenance.insert("seed".into(), seed.to_string());
    provenance.insert("config_hash".into(), config.hash());
    provenance.insert("version".into(), VERSION.into());

    let result = match command {
        Command::Synth => synth_cmd(config, seed, &provenance, &mut out),
        Command::Train => train_cmd(config, seed, &provenance, &mut out),
        Command::Downscale => downscale_cmd(config, &provenance, &mut out),
        Command::Evaluate => evaluate_cmd(config, &provenance, &mut out),
        Command::Explain => explain_cmd(config, &provenance, &mut out),
        Command::Delta => delta_cmd(config, &provenance, &mut out),
        Command::Render => render_cmd(config, &mut out),
    }
    .and_then(|()| {
        let manifest = RunManifest {
            command: command.name().into(),
            version: VERSION.into(),
            seed,
            config_hash: config.hash(),
            outputs: out.written.iter().map(|p| p.display().to_string()).collect(),
            summary: out.summary.clone(),
            created: chrono::Utc::now().to_rfc3339(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
        let name = format!("{}.manifest.json", command.name());
        out.bytes(&name, json.as_bytes())?;
        Ok(RunSummary { manifest, manifest_path: out.dir.join(name) })
    });
    if result.is_err() {
        out.cleanup();
    }
    result
}

fn read_container(path: &Path) -> Result<Container> {
    Container::read(path)
}

fn date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Input(format!("bad date '{s}': {e}")))
}

fn opt_period(config: &RunConfig, key: &str) -> Result<Option<Period>> {
    config.opt_str(key).map(Period::parse).transpose()
}

fn in_period(period: Option<Period>) -> impl FnMut(NaiveDate) -> bool {
    move |d| period.map(|p| p.contains(d)).unwrap_or(true)
}

fn synth_cmd(config: &RunConfig, seed: u64, provenance: &Provenance, out: &mut Outputs) -> Result<()> {
    let geometry = GridGeometry::regular(
        config.get("predictor_lat0_deg")?,
        config.get("predictor_lon0_deg")?,
        config.get("predictor_resolution_deg")?,
        config.get("predictor_nlat")?,
        config.get("predictor_nlon")?,
    )?;
    let channels: Vec<ChannelSpec> = config.list("channels")?;
    let factor: usize = config.get_or("upsampling_factor", 1)?;
    if factor == 0 {
        return Err(Error::Input("upsampling_factor must be positive".into()));
    }
    let fine = synth::refined_geometry(&geometry, factor)?;
    let (r0, r1) = (config.get_or("mask_row_start", 0usize)?, config.get_or("mask_row_end", fine.nlat())?);
    let (c0, c1) = (config.get_or("mask_col_start", 0usize)?, config.get_or("mask_col_end", fine.nlon())?);
    let stride: usize = config.get_or("mask_stride", 1)?;
    if stride == 0 || r1 > fine.nlat() || c1 > fine.nlon() {
        return Err(Error::Input("mask window outside the predictand grid".into()));
    }
    let mut cells = vec![false; fine.len()];
    for r in (r0..r1).step_by(stride) {
        for c in (c0..c1).step_by(stride) {
            cells[fine.index(r, c)] = true;
        }
    }
    let noise_std: f64 = config.get_or("noise_std", 0.0)?;
    let noise = if config.get_or("noise_relative", false)? { Noise::RelativeToSignal(noise_std) } else { Noise::Absolute(noise_std) };
    let future_shift = match config.opt_str("future_shift_start") {
        None => None,
        Some(start) => {
            let v: Vec<f64> = config.list("future_shift_per_month_degc")?;
            let per_month: [f64; 12] = v
                .try_into()
                .map_err(|_| Error::Input("future_shift_per_month_degc needs 12 values".into()))?;
            Some(FutureShift { start: date(start)?, per_month })
        }
    };
    let spec = SyntheticSpec {
        seed,
        predictor_geometry: geometry,
        channels,
        causal_channel: config.get_or("causal_channel", 0)?,
        predictand_mask: LandMaskSpec { geometry: fine, cells },
        radius_km: config.get("radius_km")?,
        stencils: None,
        noise,
        anomalies: AnomalyModel { correlation_km: config.get_or("correlation_km", 0.0)?, modes: config.get_or("anomaly_modes", 0)? },
        predictand_offset: config.get_or("predictand_offset_degc", 0.0)?,
        seasonal_amplitude: config.get_or("seasonal_amplitude", 0.0)?,
        start: date(config.str("start_date")?)?,
        days: config.get("days")?,
        future_shift,
    };
    let data = synth::synth_generate(&spec)?;
    out.container("predictors.dsx", &artifacts::predictors_to_container(&data.predictors, provenance)?)?;
    out.container("predictand.dsx", &artifacts::predictand_to_container(&data.predictand, provenance)?)?;
    out.container("truth.dsx", &artifacts::truth_to_container(&data.truth, provenance)?)?;
    out.note("locations", data.predictand.nlocation());
    out.note("noise_std", data.truth.noise_std);
    Ok(())
}

/// Input/target grid for a UNET on `predictors` with the predictand `mask`.
fn unet_target(mask: &LandMask) -> TargetGrid {
    TargetGrid { rows: mask.geometry().nlat(), cols: mask.geometry().nlon(), cells: mask.locations().to_vec() }
}

fn train_cmd(config: &RunConfig, seed: u64, provenance: &Provenance, out: &mut Outputs) -> Result<()> {
    let predictors = artifacts::predictors_from_container(&read_container(&config.path("predictors")?)?)?;
    let predictand = artifacts::predictand_from_container(&read_container(&config.path("predictand")?)?)?;
    let period = opt_period(config, "train_period")?;
    let predictors = predictors.select_times(in_period(period));
    let predictand = predictand.select_times(in_period(period));
    let standardizer = preprocess::fit_standardizer(&predictors, period)?;
    let x = standardizer.apply(&predictors)?;

    let architecture: Architecture = config.str("architecture")?.parse()?;
    let scale: f64 = config.get_or("width_scale", 1.0)?;
    let g = predictors.geometry();
    let input = (predictors.nchannel(), g.nlat(), g.nlon());
    let arch = match architecture {
        Architecture::Unet => ArchitectureConfig::unet(input, scale, config.get("upsampling_factor")?, unet_target(predictand.mask())),
        other => ArchitectureConfig::dense(other, input, predictand.nlocation(), scale),
    };
    let model = models::build::<f32>(&arch, seed)?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        learning_rate: config.get_or("learning_rate", defaults.learning_rate)?,
        batch_size: config.get_or("batch_size", defaults.batch_size)?,
        max_epochs: config.get_or("max_epochs", defaults.max_epochs)?,
        patience: config.get_or("patience", defaults.patience)?,
        min_delta: 0.0,
        validation_fraction: config.get_or("validation_fraction", defaults.validation_fraction)?,
        seed,
    };
    let result = training::train(model, &x, &predictand, &tc)?;
    let best = result.log.best().cloned();
    let ck = Checkpoint { config: arch, model: result.model, standardizer, mask: LandMaskSpec::from(predictand.mask()) };
    out.container("model.dsx", &artifacts::checkpoint_to_container(&ck, provenance)?)?;
    out.bytes("training_log.tsv", result.log.to_table().as_bytes())?;
    out.note("epochs", result.log.epochs.len());
    out.note("stopped_early", result.log.stopped_early);
    if let Some(b) = best {
        out.note("best_epoch", b.epoch);
        out.note("best_val_loss", b.val_loss);
    }
    Ok(())
}

fn load_checkpoint(config: &RunConfig) -> Result<Checkpoint> {
    artifacts::checkpoint_from_container(&read_container(&config.path("model")?)?)
}

/// Standardized predictors for a checkpoint; refuses a different grid or channel set.
fn standardized_for(ck: &Checkpoint, predictors: &GriddedField) -> Result<GriddedField> {
    ck.standardizer
        .apply(predictors)
        .map_err(|e| Error::Input(format!("predictors do not match the model's standardization: {e}")))
}

fn downscale_cmd(config: &RunConfig, provenance: &Provenance, out: &mut Outputs) -> Result<()> {
    let ck = load_checkpoint(config)?;
    let mut predictors = artifacts::predictors_from_container(&read_container(&config.path("predictors")?)?)?;
    if let Some(obs_path) = config.opt_path("obs_predictors") {
        let obs = artifacts::predictors_from_container(&read_container(&obs_path)?)?;
        let gcm_hist = MonthlyMoments::fit(&predictors, opt_period(config, "gcm_hist_period")?)?;
        let obs_m = MonthlyMoments::fit(&obs, opt_period(config, "obs_period")?)?;
        predictors = preprocess::adjust_gcm_monthly(&predictors, &gcm_hist, &obs_m)?;
        out.note("gcm_adjusted", true);
    }
    let predictors = predictors.select_times(in_period(opt_period(config, "period")?));
    if predictors.ntime() == 0 {
        return Err(Error::Input("no predictor days in the requested period".into()));
    }
    let x = standardized_for(&ck, &predictors)?;
    let mask = ck.mask.to_mask()?;
    let pred = training::predict(&ck.model, &x, &mask)?;
    out.container("prediction.dsx", &artifacts::predictand_to_container(&pred, provenance)?)?;
    out.note("days", pred.ntime());
    Ok(())
}

fn evaluate_cmd(config: &RunConfig, provenance: &Provenance, out: &mut Outputs) -> Result<()> {
    let period = opt_period(config, "period")?;
    let pred = artifacts::predictand_from_container(&read_container(&config.path("prediction")?)?)?.select_times(in_period(period));
    let obs = artifacts::predictand_from_container(&read_container(&config.path("observation")?)?)?.select_times(in_period(period));
    if pred.mask() != obs.mask() {
        return Err(Error::Input("prediction and observation masks differ".into()));
    }
    let mut maps = Vec::new();
    let mut table = String::from("index\tspatial_mean_abs\n");
    for idx in ValidationIndex::DISTRIBUTIONAL {
        let m = evaluation::bias_map(&pred, &obs, idx)?;
        table.push_str(&format!("bias_{idx}\t{:?}\n", evaluation::spatial_mean_abs(&m)));
        maps.push((format!("bias_{idx}"), m));
    }
    let rmse = evaluation::rmse_map(&pred, &obs)?;
    let rmse_mean = evaluation::spatial_mean_abs(&rmse);
    table.push_str(&format!("RMSE\t{rmse_mean:?}\n"));
    maps.push(("RMSE".to_string(), rmse));
    let mask = LandMaskSpec::from(obs.mask());
    out.container("evaluation.dsx", &artifacts::maps_to_container(artifacts::KIND_EVALUATION, &maps, &mask, provenance)?)?;
    out.bytes("evaluation.tsv", table.as_bytes())?;
    out.note("rmse_spatial_mean", rmse_mean);
    Ok(())
}

fn explain_cmd(config: &RunConfig, provenance: &Provenance, out: &mut Outputs) -> Result<()> {
    let ck = load_checkpoint(config)?;
    let period = opt_period(config, "period")?;
    let predictors = artifacts::predictors_from_container(&read_container(&config.path("predictors")?)?)?.select_times(in_period(period));
    let max_days: usize = config.get_or("max_days", usize::MAX)?;
    let steps: usize = config.get_or("ig_steps", xai::DEFAULT_IG_STEPS)?;
    if predictors.ntime() == 0 {
        return Err(Error::Input("no predictor days in the requested period".into()));
    }
    let x = standardized_for(&ck, &predictors)?;
    let mask = ck.mask.to_mask()?;
    let locations: Vec<usize> = (0..mask.len()).collect();
    let baseline = vec![0.0f32; x.sample_len()];
    let g = x.geometry();
    let shape = (x.nchannel(), g.nlat(), g.nlon());
    let sal_prov = xai::SaliencyProvenance {
        model_id: provenance.get("config_hash").cloned().unwrap_or_default(),
        baseline_id: "zeros".into(),
        steps,
        zero_locations: Vec::new(),
    };
    let mut cubes = Vec::new();
    let mut table = String::from("day\tcompleteness_gap\tzero_locations\n");
    for t in 0..x.ntime().min(max_days) {
        let input: Vec<f32> = x.sample(t).iter().map(|&v| v as f32).collect();
        let ig = xai::integrated_gradients_for(&ck.model, &input, &baseline, &locations, steps)?;
        let cube = xai::normalize_threshold(&ig.attributions, shape, x.times()[t], sal_prov.clone())?;
        table.push_str(&format!("{}\t{:e}\t{}\n", x.times()[t], ig.completeness_gap(), cube.provenance.zero_locations.len()));
        cubes.push(cube);
    }
    let aggregation: Aggregation = config.get_or("aggregation", Aggregation::Mean)?;
    let channel = if config.get_or("sdm_all_channels", false)? {
        SdmChannel::All
    } else {
        let name = config.opt_str("sdm_channel");
        let idx = match name {
            None => 0,
            Some(n) => match n.parse::<usize>() {
                Ok(i) => i,
                Err(_) => x
                    .channel_index(&n.parse()?)
                    .ok_or_else(|| Error::Input(format!("channel {n} not among the predictors")))?,
            },
        };
        SdmChannel::One(idx)
    };
    let options = SdmOptions { channel, normalized: config.get_or("sdm_normalized", false)?, aggregation };
    let asm = xai::accumulate_asm(&cubes, aggregation, period)?;
    let sdm = xai::compute_sdm(&cubes, g, &mask, options, period)?;
    let zero_days = cubes.iter().filter(|c| c.provenance.zero_locations.len() == mask.len()).count();
    out.container("saliency.dsx", &artifacts::saliency_to_container(&cubes, provenance)?)?;
    out.container("asm.dsx", &artifacts::asm_to_container(&asm, g, x.channels(), provenance)?)?;
    out.container("sdm.dsx", &artifacts::sdm_to_container(&sdm, &ck.mask, provenance)?)?;
    out.bytes("explain.tsv", table.as_bytes())?;
    out.note("days", cubes.len());
    out.note("all_zero_days", zero_days);
    Ok(())
}

/// One region per line: `NAME lat,lon lat,lon lat,lon ...`.
pub fn parse_regions(text: &str) -> Result<RegionSet> {
    let mut regions = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map(|(a, _)| a).unwrap_or(raw).trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line").to_string();
        let vertices = parts
            .map(|p| {
                let (a, b) = p.split_once(',').ok_or_else(|| Error::Input(format!("regions line {}: bad vertex '{p}'", n + 1)))?;
                let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Input(format!("regions line {}: bad number '{s}'", n + 1)));
                Ok((parse(a)?, parse(b)?))
            })
            .collect::<Result<Vec<_>>>()?;
        regions.push(Region { name, vertices });
    }
    RegionSet::new(regions)
}

fn delta_cmd(config: &RunConfig, provenance: &Provenance, out: &mut Outputs) -> Result<()> {
    let gcm = artifacts::predictand_from_container(&read_container(&config.path("gcm")?)?)?;
    let model = artifacts::predictand_from_container(&read_container(&config.path("model_prediction")?)?)?;
    if gcm.mask() != model.mask() {
        return Err(Error::Input("GCM and model predictions use different masks".into()));
    }
    let regions_path = config.path("regions")?;
    let text = std::fs::read_to_string(&regions_path).map_err(|e| Error::Input(format!("cannot read {}: {e}", regions_path.display())))?;
    let regions = parse_regions(&text)?;
    let hist = Period::parse(config.str("hist_period")?)?;
    let futures: Vec<Period> = config.str("future_periods")?.split(',').map(Period::parse).collect::<Result<_>>()?;
    let indices: Vec<ValidationIndex> =
        if config.contains("indices") { config.list("indices")? } else { ValidationIndex::DISTRIBUTIONAL.to_vec() };
    let filters: Vec<MonthFilter> = if config.contains("month_filters") {
        config.list("month_filters")?
    } else {
        vec![MonthFilter::Annual, MonthFilter::AUGUST, MonthFilter::DECEMBER]
    };
    let threshold: f64 = config.get_or("threshold_degc", evaluation::DEFAULT_DELTA_THRESHOLD)?;
    let g = evaluation::regional_deltas(&gcm, &regions, hist, &futures, &indices, &filters)?;
    let m = evaluation::regional_deltas(&model, &regions, hist, &futures, &indices, &filters)?;
    let report = evaluation::pseudo_reality_report(&m, &g, &regions, threshold)?;
    let mut c = Container::new("delta");
    c.set_meta("report", &report)?;
    c.set_meta("provenance", provenance)?;
    out.container("delta.dsx", &c)?;
    out.bytes("delta_report.tsv", report.to_table().as_bytes())?;
    out.note("rows", report.rows.len());
    out.note("flagged", report.flagged().len());
    Ok(())
}

fn render_cmd(config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let c = read_container(&config.path("input")?)?;
    let channel: usize = config.get_or("channel", 0)?;
    let day: usize = config.get_or("day", 0)?;
    let image = match c.kind.as_str() {
        artifacts::KIND_ASM => {
            let (asm, g, _) = artifacts::asm_from_container(&c)?;
            if channel >= asm.nchannel {
                return Err(Error::Input(format!("channel {channel} out of range")));
            }
            render::render_heatmap(asm.channel(channel), &g)?
        }
        artifacts::KIND_SDM => {
            let (sdm, mask) = artifacts::sdm_from_container(&c)?;
            render::render_masked(&sdm.values, &mask.to_mask()?)?
        }
        artifacts::KIND_PREDICTORS => {
            let f = artifacts::predictors_from_container(&c)?;
            if day >= f.ntime() || channel >= f.nchannel() {
                return Err(Error::Input("day or channel out of range".into()));
            }
            let n = f.geometry().len();
            render::render_heatmap(&f.sample(day)[channel * n..(channel + 1) * n], f.geometry())?
        }
        artifacts::KIND_PREDICTAND => {
            let f = artifacts::predictand_from_container(&c)?;
            if day >= f.ntime() {
                return Err(Error::Input("day out of range".into()));
            }
            render::render_masked(f.day(day), f.mask())?
        }
        artifacts::KIND_EVALUATION => {
            let mask = c.meta::<LandMaskSpec>("mask")?.to_mask()?;
            let name = config.str("array")?;
            render::render_masked(&c.array(name)?.data.to_f64(), &mask)?
        }
        other => return Err(Error::Input(format!("cannot render a {other} container"))),
    };
    let name = config.opt_str("output").unwrap_or("heatmap.pgm").to_string();
    out.bytes(&name, &image)?;
    Ok(())
}

/// Writes a synthetic per-location array container, used by tests and demos.
pub fn location_container(kind: &str, values: &[f64], mask: &LandMask) -> Result<Container> {
    let mut c = Container::new(kind);
    c.set_meta("mask", &LandMaskSpec::from(mask))?;
    c.push(NamedArray::f32("values", vec![values.len()], values.iter().map(|&v| v as f32).collect())?);
    Ok(c)
}
