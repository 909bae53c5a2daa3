//! Typed views of containers: predictor and predictand fields, model
//! checkpoints, standardizers, saliency, ASM/SDM fields and synthetic truth.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::container::{ArrayData, Container, NamedArray};
use super::synth::{LandMaskSpec, SyntheticTruth};
use crate::error::{Error, Result};
use crate::grid::{ChannelSpec, GridGeometry, GriddedField, TargetField};
use crate::models::{self, ArchitectureConfig};
use crate::nn::ModelGraph;
use crate::preprocess::Standardizer;
use crate::xai::{AsmField, SaliencyCube, SaliencyProvenance, SdmField};

pub const KIND_PREDICTORS: &str = "predictors";
pub const KIND_PREDICTAND: &str = "predictand";
pub const KIND_MODEL: &str = "model";
pub const KIND_SALIENCY: &str = "saliency";
pub const KIND_ASM: &str = "asm";
pub const KIND_SDM: &str = "sdm";
pub const KIND_TRUTH: &str = "truth";
pub const KIND_EVALUATION: &str = "evaluation";

/// Free-form provenance stored with every artifact (seed, config hash, ...).
pub type Provenance = BTreeMap<String, String>;

fn with_provenance(c: &mut Container, provenance: &Provenance) -> Result<()> {
    c.set_meta("provenance", provenance)?;
    Ok(())
}

pub fn provenance_of(c: &Container) -> Provenance {
    c.meta("provenance").unwrap_or_default()
}

fn shape_check(a: &NamedArray, shape: &[usize]) -> Result<()> {
    if a.shape != shape {
        return Err(Error::Input(format!("array {} has shape {:?}, metadata implies {:?}", a.name, a.shape, shape)));
    }
    Ok(())
}

pub fn predictors_to_container(field: &GriddedField, provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new(KIND_PREDICTORS);
    c.set_meta("geometry", field.geometry())?;
    c.set_meta("channels", &field.channels())?;
    c.set_meta("times", &field.times())?;
    with_provenance(&mut c, provenance)?;
    let data = field.data().iter().map(|&v| v as f32).collect();
    c.push(NamedArray::f32("data", field.shape().to_vec(), data)?);
    Ok(c)
}

pub fn predictors_from_container(c: &Container) -> Result<GriddedField> {
    c.expect_kind(KIND_PREDICTORS)?;
    let geometry: GridGeometry = c.meta("geometry")?;
    let channels: Vec<ChannelSpec> = c.meta("channels")?;
    let times: Vec<NaiveDate> = c.meta("times")?;
    let a = c.array("data")?;
    shape_check(a, &[times.len(), channels.len(), geometry.nlat(), geometry.nlon()])?;
    GriddedField::new(a.data.to_f64(), geometry, channels, times)
}

pub fn predictand_to_container(field: &TargetField, provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new(KIND_PREDICTAND);
    c.set_meta("mask", &LandMaskSpec::from(field.mask()))?;
    c.set_meta("times", &field.times())?;
    with_provenance(&mut c, provenance)?;
    let data = field.data().iter().map(|&v| v as f32).collect();
    c.push(NamedArray::f32("data", vec![field.ntime(), field.nlocation()], data)?);
    Ok(c)
}

pub fn predictand_from_container(c: &Container) -> Result<TargetField> {
    c.expect_kind(KIND_PREDICTAND)?;
    let mask = c.meta::<LandMaskSpec>("mask")?.to_mask()?;
    let times: Vec<NaiveDate> = c.meta("times")?;
    let a = c.array("data")?;
    shape_check(a, &[times.len(), mask.len()])?;
    TargetField::new(a.data.to_f64(), times, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StandardizerMeta {
    geometry: GridGeometry,
    channels: Vec<ChannelSpec>,
    period: Option<crate::grid::Period>,
}

fn push_standardizer(c: &mut Container, s: &Standardizer) -> Result<()> {
    c.set_meta(
        "standardizer",
        &StandardizerMeta { geometry: s.geometry.clone(), channels: s.channels.clone(), period: s.period },
    )?;
    let shape = vec![s.channels.len(), s.geometry.nlat(), s.geometry.nlon()];
    c.push(NamedArray::f64("standardizer.mean", shape.clone(), s.mean.clone())?);
    c.push(NamedArray::f64("standardizer.std", shape, s.std.clone())?);
    Ok(())
}

fn read_standardizer(c: &Container) -> Result<Standardizer> {
    let meta: StandardizerMeta = c.meta("standardizer")?;
    let shape = [meta.channels.len(), meta.geometry.nlat(), meta.geometry.nlon()];
    let mean = c.array("standardizer.mean")?;
    let std = c.array("standardizer.std")?;
    shape_check(mean, &shape)?;
    shape_check(std, &shape)?;
    let std_v = std.data.to_f64();
    if std_v.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Input("stored standardizer has non-positive deviations".into()));
    }
    Ok(Standardizer { geometry: meta.geometry, channels: meta.channels, mean: mean.data.to_f64(), std: std_v, period: meta.period })
}

/// A trained network together with the predictor standardization it expects.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ArchitectureConfig,
    pub model: ModelGraph<f32>,
    pub standardizer: Standardizer,
    /// Predictand mask the outputs belong to.
    pub mask: LandMaskSpec,
}

pub fn checkpoint_to_container(ck: &Checkpoint, provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new(KIND_MODEL);
    c.set_meta("architecture", &ck.config)?;
    c.set_meta("mask", &ck.mask)?;
    with_provenance(&mut c, provenance)?;
    for t in &ck.model.params().tensors {
        c.push(NamedArray::f32(format!("param.{}", t.name), t.dims.clone(), t.data.clone())?);
    }
    push_standardizer(&mut c, &ck.standardizer)?;
    Ok(c)
}

pub fn checkpoint_from_container(c: &Container) -> Result<Checkpoint> {
    c.expect_kind(KIND_MODEL)?;
    let config: ArchitectureConfig = c.meta("architecture")?;
    let mask: LandMaskSpec = c.meta("mask")?;
    let mut model = models::build::<f32>(&config, 0).map_err(|e| Error::Input(format!("stored architecture: {e}")))?;
    let mut params = model.params().clone();
    for t in params.tensors.iter_mut() {
        let a = c.array(&format!("param.{}", t.name))?;
        shape_check(a, &t.dims)?;
        match &a.data {
            ArrayData::F32(v) => t.data = v.clone(),
            ArrayData::F64(_) => return Err(Error::Input(format!("parameter {} must be stored as f32", t.name))),
        }
    }
    model.replace_params(params)?;
    let standardizer = read_standardizer(c)?;
    Ok(Checkpoint { config, model, standardizer, mask })
}

pub fn standardizer_to_container(s: &Standardizer, provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new("standardizer");
    with_provenance(&mut c, provenance)?;
    push_standardizer(&mut c, s)?;
    Ok(c)
}

pub fn standardizer_from_container(c: &Container) -> Result<Standardizer> {
    c.expect_kind("standardizer")?;
    read_standardizer(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SaliencyMeta {
    days: Vec<NaiveDate>,
    provenance: Vec<SaliencyProvenance>,
}

/// All cubes share one layout; stored as `[day, location, channel, lat, lon]`.
pub fn saliency_to_container(cubes: &[SaliencyCube], provenance: &Provenance) -> Result<Container> {
    let first = cubes.first().ok_or_else(|| Error::Input("no saliency cubes to write".into()))?;
    let mut c = Container::new(KIND_SALIENCY);
    c.set_meta(
        "saliency",
        &SaliencyMeta { days: cubes.iter().map(|c| c.day).collect(), provenance: cubes.iter().map(|c| c.provenance.clone()).collect() },
    )?;
    with_provenance(&mut c, provenance)?;
    let mut data = Vec::with_capacity(cubes.len() * first.values.len());
    for cube in cubes {
        if cube.values.len() != first.values.len() {
            return Err(Error::Input("saliency cubes differ in layout".into()));
        }
        data.extend(cube.values.iter().map(|&v| v as f32));
    }
    let shape = vec![cubes.len(), first.nlocation, first.nchannel, first.nlat, first.nlon];
    c.push(NamedArray::f32("values", shape, data)?);
    Ok(c)
}

pub fn saliency_from_container(c: &Container) -> Result<Vec<SaliencyCube>> {
    c.expect_kind(KIND_SALIENCY)?;
    let meta: SaliencyMeta = c.meta("saliency")?;
    let a = c.array("values")?;
    if a.shape.len() != 5 || a.shape[0] != meta.days.len() || meta.provenance.len() != meta.days.len() {
        return Err(Error::Input("saliency array does not match its day list".into()));
    }
    let (nloc, nch, nlat, nlon) = (a.shape[1], a.shape[2], a.shape[3], a.shape[4]);
    let per = nloc * nch * nlat * nlon;
    let values = a.data.to_f64();
    Ok(meta
        .days
        .iter()
        .zip(meta.provenance)
        .enumerate()
        .map(|(i, (&day, provenance))| SaliencyCube {
            day,
            nlocation: nloc,
            nchannel: nch,
            nlat,
            nlon,
            values: values[i * per..(i + 1) * per].to_vec(),
            provenance,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AsmMeta {
    geometry: GridGeometry,
    channels: Vec<ChannelSpec>,
    days: usize,
    period: Option<crate::grid::Period>,
    aggregation: crate::xai::Aggregation,
}

pub fn asm_to_container(asm: &AsmField, geometry: &GridGeometry, channels: &[ChannelSpec], provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new(KIND_ASM);
    c.set_meta(
        "asm",
        &AsmMeta { geometry: geometry.clone(), channels: channels.to_vec(), days: asm.days, period: asm.period, aggregation: asm.aggregation },
    )?;
    with_provenance(&mut c, provenance)?;
    c.push(NamedArray::f32("values", vec![asm.nchannel, asm.nlat, asm.nlon], asm.values.iter().map(|&v| v as f32).collect())?);
    Ok(c)
}

/// The ASM field with its predictor geometry and channel list.
pub fn asm_from_container(c: &Container) -> Result<(AsmField, GridGeometry, Vec<ChannelSpec>)> {
    c.expect_kind(KIND_ASM)?;
    let meta: AsmMeta = c.meta("asm")?;
    let a = c.array("values")?;
    shape_check(a, &[meta.channels.len(), meta.geometry.nlat(), meta.geometry.nlon()])?;
    let asm = AsmField {
        nchannel: meta.channels.len(),
        nlat: meta.geometry.nlat(),
        nlon: meta.geometry.nlon(),
        values: a.data.to_f64(),
        days: meta.days,
        period: meta.period,
        aggregation: meta.aggregation,
    };
    Ok((asm, meta.geometry, meta.channels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SdmMeta {
    mask: LandMaskSpec,
    options: crate::xai::SdmOptions,
    days: usize,
    period: Option<crate::grid::Period>,
}

pub fn sdm_to_container(sdm: &SdmField, mask: &LandMaskSpec, provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new(KIND_SDM);
    c.set_meta("sdm", &SdmMeta { mask: mask.clone(), options: sdm.options, days: sdm.days, period: sdm.period })?;
    with_provenance(&mut c, provenance)?;
    c.push(NamedArray::f32("values", vec![sdm.values.len()], sdm.values.iter().map(|&v| v as f32).collect())?);
    Ok(c)
}

pub fn sdm_from_container(c: &Container) -> Result<(SdmField, LandMaskSpec)> {
    c.expect_kind(KIND_SDM)?;
    let meta: SdmMeta = c.meta("sdm")?;
    let a = c.array("values")?;
    let n = meta.mask.cells.iter().filter(|&&b| b).count();
    shape_check(a, &[n])?;
    Ok((SdmField { values: a.data.to_f64(), options: meta.options, days: meta.days, period: meta.period }, meta.mask))
}

pub fn truth_to_container(truth: &SyntheticTruth, provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new(KIND_TRUTH);
    c.set_meta("truth", truth)?;
    with_provenance(&mut c, provenance)?;
    Ok(c)
}

pub fn truth_from_container(c: &Container) -> Result<SyntheticTruth> {
    c.expect_kind(KIND_TRUTH)?;
    c.meta("truth")
}

/// Named per-location maps (bias, RMSE, ...) on one mask.
pub fn maps_to_container(kind: &str, maps: &[(String, Vec<f64>)], mask: &LandMaskSpec, provenance: &Provenance) -> Result<Container> {
    let mut c = Container::new(kind);
    c.set_meta("mask", mask)?;
    with_provenance(&mut c, provenance)?;
    for (name, v) in maps {
        c.push(NamedArray::f32(name.clone(), vec![v.len()], v.iter().map(|&x| x as f32).collect())?);
    }
    Ok(c)
}
