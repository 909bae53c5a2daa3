//! Binary PGM (P5) heatmaps, one pixel per grid box, north at the top.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, LandMask};

/// Min-max scales `values` (row-major on `geometry`) to 0..=255. A constant
/// field renders as 128.
pub fn render_heatmap(values: &[f64], geometry: &GridGeometry) -> Result<Vec<u8>> {
    if values.len() != geometry.len() {
        return Err(Error::Render(format!("field has {} values, grid has {} boxes", values.len(), geometry.len())));
    }
    let cells: Vec<Option<f64>> = values.iter().map(|&v| Some(v)).collect();
    encode(&cells, geometry)
}

/// Per-location values drawn on the mask grid; cells outside the mask are 0.
pub fn render_masked(values: &[f64], mask: &LandMask) -> Result<Vec<u8>> {
    if values.len() != mask.len() {
        return Err(Error::Render(format!("{} values for {} mask locations", values.len(), mask.len())));
    }
    let mut cells = vec![None; mask.geometry().len()];
    for (loc, &cell) in mask.locations().iter().enumerate() {
        cells[cell] = Some(values[loc]);
    }
    encode(&cells, mask.geometry())
}

fn encode(cells: &[Option<f64>], geometry: &GridGeometry) -> Result<Vec<u8>> {
    if let Some(i) = cells.iter().position(|v| v.map(|x| !x.is_finite()).unwrap_or(false)) {
        return Err(Error::Render(format!("non-finite value at grid box {i}")));
    }
    let (lo, hi) = cells.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pixel = |v: f64| -> u8 {
        if hi <= lo {
            128
        } else {
            (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
        }
    };
    let mut out = format!("P5\n{} {}\n255\n", geometry.nlon(), geometry.nlat()).into_bytes();
    let cols = geometry.cols_west_to_east();
    for r in geometry.rows_north_to_south() {
        for &c in &cols {
            out.push(cells[geometry.index(r, c)].map(pixel).unwrap_or(0));
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, bytes: &[u8]) -> Result<()> {
    super::container::write_atomic(path, bytes)
}

/// Width, height and pixels of a P5 image produced by this module.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let text_end = bytes
        .iter()
        .enumerate()
        .filter(|&(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| Error::Input("PGM header incomplete".into()))?;
    let header = std::str::from_utf8(&bytes[..text_end]).map_err(|_| Error::Input("PGM header not ASCII".into()))?;
    let mut it = header.split_whitespace();
    if it.next() != Some("P5") {
        return Err(Error::Input("not a binary PGM".into()));
    }
    let mut num = || -> Result<usize> { it.next().and_then(|v| v.parse().ok()).ok_or_else(|| Error::Input("bad PGM header".into())) };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 || bytes.len() - text_end != w * h {
        return Err(Error::Input("PGM size does not match its header".into()));
    }
    Ok((w, h, bytes[text_end..].to_vec()))
}
