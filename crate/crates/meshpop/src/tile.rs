//! Assembly of the 12-channel model input tile for one 10 km mesh cell and
//! one year, plus the on-disk tile container and its manifest.
//!
//! Channel order is fixed: natural colour [B4,B3,B2], false colour
//! [B7,B6,B5], indices [NDBI,NDVI,NDWI], then the log-rescaled NTL
//! triplicated across the last three channels.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::mesh::{Level, MeshCode, MeshError};
use crate::raster::{ndbi, ndvi, ndwi, ntl_log, AnnualComposite, Band, RasterError, RasterGrid};

/// Fixed channel names of the tile tensor, in stacking order.
pub const CHANNEL_NAMES: [&str; 12] = [
    "b4", "b3", "b2", "b7", "b6", "b5", "ndbi", "ndvi", "ndwi", "ntl", "ntl", "ntl",
];

#[derive(Debug, thiserror::Error)]
pub enum TileError {
    #[error("missing band {0:?} for year {1}")]
    MissingBand(Band, i32),
    #[error("mesh {mesh} bbox not fully covered by raster: {detail}")]
    IncompleteCoverage { mesh: String, detail: String },
    #[error("channel {0} has no valid pixels in tile")]
    EmptyChannel(&'static str),
    #[error("invalid tile: {0}")]
    Invalid(String),
    #[error("bad tile header: {0}")]
    Header(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy)]
pub struct TileOptions {
    /// Output side length in pixels.
    pub size: usize,
    /// Resampling for reflectance bands and indices.
    pub continuous: Resampling,
    /// Resampling for the NTL channel.
    pub ntl: Resampling,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions {
            size: 334,
            continuous: Resampling::Bilinear,
            ntl: Resampling::Nearest,
        }
    }
}

/// One model input sample: the stacked tensor plus optional label and split.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub mesh: MeshCode,
    pub year: i32,
    /// 12 × size × size, finite after the fill policy.
    pub tensor: Array3<f32>,
    /// log10 population per group, all components >= 0.
    pub label: Option<[f32; 3]>,
    pub split: Option<Split>,
}

impl TileSample {
    /// Check the structural invariants: shape, finiteness, NTL triplication
    /// and label non-negativity.
    pub fn validate(&self) -> Result<(), TileError> {
        let (c, h, w) = self.tensor.dim();
        if c != 12 || h != w || h == 0 {
            return Err(TileError::Invalid(format!(
                "tensor must be 12 x S x S, got {c} x {h} x {w}"
            )));
        }
        if self.mesh.level() != Level::L10km {
            return Err(TileError::Invalid(format!(
                "tile mesh must be L10km, got {:?}",
                self.mesh.level()
            )));
        }
        if !self.tensor.iter().all(|v| v.is_finite()) {
            return Err(TileError::Invalid("tensor contains non-finite values".into()));
        }
        let ntl = self.tensor.index_axis(ndarray::Axis(0), 9);
        for ch in 10..12 {
            if self.tensor.index_axis(ndarray::Axis(0), ch) != ntl {
                return Err(TileError::Invalid("NTL channels 10-12 differ".into()));
            }
        }
        if let Some(label) = &self.label {
            if label.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(TileError::Invalid(format!("negative label {label:?}")));
            }
        }
        Ok(())
    }
}

/// Smallest integer `r` such that `pred(r)` holds, assuming `pred` is
/// monotone (false ... false true ... true). `guess` only needs to be near
/// the boundary.
fn monotone_boundary(guess: i64, pred: impl Fn(i64) -> bool) -> i64 {
    let mut r = guess;
    while !pred(r) {
        r += 1;
    }
    while pred(r - 1) {
        r -= 1;
    }
    r
}

/// Crop a raster to the pixels whose centers lie inside the mesh bbox
/// (half-open). Errors if any required pixel-center position falls outside
/// the raster.
pub fn crop_to_mesh(g: &RasterGrid, mesh: &MeshCode) -> Result<RasterGrid, TileError> {
    if mesh.level() != Level::L10km {
        return Err(MeshError::Level {
            expected: Level::L10km,
            actual: mesh.level(),
        }
        .into());
    }
    let bbox = mesh.bbox();
    let (d_lat, d_lon) = g.pixel_size;
    let center_lat = |r: i64| g.origin.0 - (r as f64 + 0.5) * d_lat;
    let center_lon = |c: i64| g.origin.1 + (c as f64 + 0.5) * d_lon;

    // Rows run north to south: first row whose center is below lat_max,
    // then first row whose center is below lat_min (exclusive end).
    let r_first = monotone_boundary(
        ((g.origin.0 - bbox.lat_max) / d_lat - 0.5).floor() as i64,
        |r| center_lat(r) < bbox.lat_max,
    );
    let r_end = monotone_boundary(
        ((g.origin.0 - bbox.lat_min) / d_lat - 0.5).floor() as i64,
        |r| center_lat(r) < bbox.lat_min,
    );
    let c_first = monotone_boundary(
        ((bbox.lon_min - g.origin.1) / d_lon - 0.5).floor() as i64,
        |c| center_lon(c) >= bbox.lon_min,
    );
    let c_end = monotone_boundary(
        ((bbox.lon_max - g.origin.1) / d_lon - 0.5).floor() as i64,
        |c| center_lon(c) >= bbox.lon_max,
    );

    let rows = g.rows() as i64;
    let cols = g.cols() as i64;
    if r_first < 0 || r_end > rows || c_first < 0 || c_end > cols || r_first >= r_end || c_first >= c_end
    {
        return Err(TileError::IncompleteCoverage {
            mesh: mesh.to_string(),
            detail: format!(
                "needs rows {r_first}..{r_end} cols {c_first}..{c_end} of a {rows}x{cols} raster"
            ),
        });
    }

    let values = g
        .values
        .slice(ndarray::s![
            r_first as usize..r_end as usize,
            c_first as usize..c_end as usize
        ])
        .to_owned();
    Ok(RasterGrid {
        values,
        origin: (
            g.origin.0 - r_first as f64 * d_lat,
            g.origin.1 + c_first as f64 * d_lon,
        ),
        pixel_size: g.pixel_size,
        crs: g.crs.clone(),
    })
}

fn resample_values(
    values: ArrayView2<'_, f32>,
    out_rows: usize,
    out_cols: usize,
    method: Resampling,
) -> Array2<f32> {
    let (in_rows, in_cols) = values.dim();
    let row_scale = in_rows as f64 / out_rows as f64;
    let col_scale = in_cols as f64 / out_cols as f64;
    let mut out = Array2::zeros((out_rows, out_cols));
    for i in 0..out_rows {
        let y = ((i as f64 + 0.5) * row_scale - 0.5).clamp(0.0, (in_rows - 1) as f64);
        for j in 0..out_cols {
            let x = ((j as f64 + 0.5) * col_scale - 0.5).clamp(0.0, (in_cols - 1) as f64);
            out[[i, j]] = match method {
                Resampling::Nearest => values[[y.round() as usize, x.round() as usize]],
                Resampling::Bilinear => {
                    let y0 = y.floor() as usize;
                    let x0 = x.floor() as usize;
                    let y1 = (y0 + 1).min(in_rows - 1);
                    let x1 = (x0 + 1).min(in_cols - 1);
                    let fy = (y - y0 as f64) as f32;
                    let fx = (x - x0 as f64) as f32;
                    let top = values[[y0, x0]] * (1.0 - fx) + values[[y0, x1]] * fx;
                    let bottom = values[[y1, x0]] * (1.0 - fx) + values[[y1, x1]] * fx;
                    top * (1.0 - fy) + bottom * fy
                }
            };
        }
    }
    out
}

/// Resample a raster to `out_rows` x `out_cols` over the same extent.
pub fn resample(
    g: &RasterGrid,
    out_rows: usize,
    out_cols: usize,
    method: Resampling,
) -> Result<RasterGrid, TileError> {
    if out_rows == 0 || out_cols == 0 {
        return Err(TileError::Invalid("resample target must be at least 1x1".into()));
    }
    let values = resample_values(g.values.view(), out_rows, out_cols, method);
    Ok(RasterGrid {
        values,
        origin: g.origin,
        pixel_size: (
            g.pixel_size.0 * g.rows() as f64 / out_rows as f64,
            g.pixel_size.1 * g.cols() as f64 / out_cols as f64,
        ),
        crs: g.crs.clone(),
    })
}

/// Fill NaN pixels with the channel mean; a fully-NaN channel rejects the
/// tile.
fn fill_channel_mean(values: &mut Array2<f32>, name: &'static str) -> Result<(), TileError> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for v in values.iter() {
        if !v.is_nan() {
            sum += *v as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TileError::EmptyChannel(name));
    }
    let mean = (sum / count as f64) as f32;
    values.mapv_inplace(|v| if v.is_nan() { mean } else { v });
    Ok(())
}

/// Build the 12-channel tile for one mesh and year from that year's seven
/// band composites. Indices are computed on the native-resolution crops
/// before resampling; NTL is log-rescaled then resampled with the NTL
/// method; remaining NaNs are mean-filled per channel.
pub fn build_tile(
    composites: &[AnnualComposite],
    mesh: &MeshCode,
    year: i32,
    options: &TileOptions,
) -> Result<TileSample, TileError> {
    let mut by_band: BTreeMap<Band, &AnnualComposite> = BTreeMap::new();
    for c in composites {
        if c.year == year {
            by_band.insert(c.band, c);
        }
    }
    let band = |b: Band| by_band.get(&b).copied().ok_or(TileError::MissingBand(b, year));

    // Native-resolution crops of the six reflectance bands.
    let crops: BTreeMap<Band, RasterGrid> = {
        let mut m = BTreeMap::new();
        for b in [Band::B2, Band::B3, Band::B4, Band::B5, Band::B6, Band::B7] {
            m.insert(b, crop_to_mesh(&band(b)?.grid, mesh)?);
        }
        m
    };

    let size = options.size;
    let mut channels: Vec<Array2<f32>> = Vec::with_capacity(12);
    for b in [Band::B4, Band::B3, Band::B2, Band::B7, Band::B6, Band::B5] {
        channels.push(resample(&crops[&b], size, size, options.continuous)?.values);
    }
    // Indices at native resolution, then resampled like the bands. The
    // normalized difference of valid reflectance lies in [-1, 1]; slightly
    // negative scaled reflectance can push past it, so clamp.
    for index in [
        ndbi(&crops[&Band::B6], &crops[&Band::B5])?,
        ndvi(&crops[&Band::B5], &crops[&Band::B4])?,
        ndwi(&crops[&Band::B3], &crops[&Band::B5])?,
    ] {
        let mut v = resample(&index, size, size, options.continuous)?.values;
        v.mapv_inplace(|x| x.clamp(-1.0, 1.0));
        channels.push(v);
    }
    let ntl = {
        let cropped = crop_to_mesh(&band(Band::Ntl)?.grid, mesh)?;
        resample(&ntl_log(&cropped)?, size, size, options.ntl)?.values
    };
    channels.push(ntl);

    for (values, name) in channels.iter_mut().zip(CHANNEL_NAMES) {
        fill_channel_mean(values, name)?;
    }
    // Triplicate NTL bit-exactly.
    let ntl_filled = channels[9].clone();
    channels.push(ntl_filled.clone());
    channels.push(ntl_filled);

    let mut tensor = Array3::zeros((12, size, size));
    for (ch, values) in channels.into_iter().enumerate() {
        tensor.index_axis_mut(ndarray::Axis(0), ch).assign(&values);
    }
    let sample = TileSample {
        mesh: *mesh,
        year,
        tensor,
        label: None,
        split: None,
    };
    sample.validate()?;
    Ok(sample)
}

#[derive(Debug, Serialize, Deserialize)]
struct TileHeader {
    mesh: MeshCode,
    year: i32,
    channel_names: Vec<String>,
    shape: [usize; 3],
    dtype: String,
    byte_order: String,
}

/// Write a tile container: one line of JSON header, then the raw
/// little-endian float32 tensor in channel-row-column order. The write goes
/// through a temp file in the same directory and an atomic rename.
pub fn write_tile(sample: &TileSample, path: &Path) -> Result<(), TileError> {
    sample.validate()?;
    let (c, h, w) = sample.tensor.dim();
    let header = TileHeader {
        mesh: sample.mesh,
        year: sample.year,
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        shape: [c, h, w],
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        let tensor = sample
            .tensor
            .as_standard_layout();
        for v in tensor.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a tile container written by [`write_tile`].
pub fn read_tile(path: &Path) -> Result<TileSample, TileError> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        f.read_exact(&mut byte)
            .map_err(|_| TileError::Header("unterminated header line".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 16 {
            return Err(TileError::Header("header too large".into()));
        }
    }
    let header: TileHeader = serde_json::from_slice(&header_bytes)?;
    if header.dtype != "float32" || header.byte_order != "little" {
        return Err(TileError::Header(format!(
            "unsupported dtype/byte_order {}/{}",
            header.dtype, header.byte_order
        )));
    }
    let [c, h, w] = header.shape;
    let count = c * h * w;
    let mut payload = vec![0u8; count * 4];
    f.read_exact(&mut payload)
        .map_err(|_| TileError::Header("payload shorter than shape".into()))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let tensor = Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| TileError::Header(e.to_string()))?;
    let sample = TileSample {
        mesh: header.mesh,
        year: header.year,
        tensor,
        label: None,
        split: None,
    };
    sample.validate()?;
    Ok(sample)
}

/// Manifest row naming one tile file; paths are stored relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileManifestEntry {
    pub mesh: MeshCode,
    pub year: i32,
    pub path: PathBuf,
}

pub fn write_manifest(entries: &[TileManifestEntry], path: &Path) -> Result<(), TileError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::from("mesh,year,path\n");
    for e in entries {
        out.push_str(&format!("{},{},{}\n", e.mesh, e.year, e.path.display()));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a tile manifest, resolving paths against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<TileManifestEntry>, TileError> {
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines();
    match lines.next() {
        Some("mesh,year,path") => {}
        other => {
            return Err(TileError::Header(format!(
                "manifest header must be mesh,year,path, got {other:?}"
            )))
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (mesh, year, rel) = match (parts.next(), parts.next(), parts.next()) {
            (Some(m), Some(y), Some(p)) => (m, y, p),
            _ => {
                return Err(TileError::Header(format!("manifest line {}: {line:?}", i + 2)))
            }
        };
        entries.push(TileManifestEntry {
            mesh: MeshCode::parse(mesh)?,
            year: year
                .parse()
                .map_err(|e| TileError::Header(format!("manifest line {}: {e}", i + 2)))?,
            path: base.join(rel),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Source;

    fn mesh() -> MeshCode {
        MeshCode::parse("533945").unwrap()
    }

    /// Raster exactly covering the mesh bbox with `n` x `n` pixels.
    fn covering_raster(n: usize, f: impl Fn(usize, usize) -> f32) -> RasterGrid {
        let b = mesh().bbox();
        let values = Array2::from_shape_fn((n, n), |(r, c)| f(r, c));
        RasterGrid::new(
            values,
            (b.lat_max, b.lon_min),
            ((b.lat_max - b.lat_min) / n as f64, (b.lon_max - b.lon_min) / n as f64),
            "EPSG:4326",
        )
        .unwrap()
    }

    #[test]
    fn crop_of_exact_cover_is_identity() {
        let g = covering_raster(8, |r, c| (r * 8 + c) as f32);
        let out = crop_to_mesh(&g, &mesh()).unwrap();
        assert_eq!(out.values, g.values);
        assert!(out.same_geometry(&g));
    }

    #[test]
    fn crop_is_idempotent() {
        let b = mesh().bbox();
        // Larger raster extending one pixel beyond the bbox on each side.
        let n = 10usize;
        let d_lat = (b.lat_max - b.lat_min) / (n - 2) as f64;
        let d_lon = (b.lon_max - b.lon_min) / (n - 2) as f64;
        let g = RasterGrid::new(
            Array2::from_shape_fn((n, n), |(r, c)| (r * n + c) as f32),
            (b.lat_max + d_lat, b.lon_min - d_lon),
            (d_lat, d_lon),
            "EPSG:4326",
        )
        .unwrap();
        let once = crop_to_mesh(&g, &mesh()).unwrap();
        let twice = crop_to_mesh(&once, &mesh()).unwrap();
        assert_eq!(once.values, twice.values);
        assert_eq!(once.origin, twice.origin);
    }

    #[test]
    fn crop_outside_raster_errors() {
        let g = covering_raster(4, |_, _| 0.0);
        let far = MeshCode::parse("362545").unwrap();
        assert!(matches!(
            crop_to_mesh(&g, &far),
            Err(TileError::IncompleteCoverage { .. })
        ));
    }

    #[test]
    fn crop_partial_coverage_errors() {
        let b = mesh().bbox();
        // Covers only the southern half of the bbox.
        let g = RasterGrid::new(
            Array2::zeros((4, 8)),
            (b.lat_min + (b.lat_max - b.lat_min) / 2.0, b.lon_min),
            ((b.lat_max - b.lat_min) / 8.0, (b.lon_max - b.lon_min) / 8.0),
            "EPSG:4326",
        )
        .unwrap();
        assert!(matches!(
            crop_to_mesh(&g, &mesh()),
            Err(TileError::IncompleteCoverage { .. })
        ));
    }

    #[test]
    fn crop_requires_10km_mesh() {
        let g = covering_raster(4, |_, _| 0.0);
        let m1 = MeshCode::parse("53394500").unwrap();
        assert!(matches!(crop_to_mesh(&g, &m1), Err(TileError::Mesh(_))));
    }

    #[test]
    fn resample_constant_stays_constant() {
        let g = covering_raster(5, |_, _| 3.25);
        for method in [Resampling::Bilinear, Resampling::Nearest] {
            let out = resample(&g, 16, 16, method).unwrap();
            assert!(out.values.iter().all(|v| *v == 3.25));
        }
    }

    #[test]
    fn resample_identity_when_same_size() {
        let g = covering_raster(7, |r, c| (r * 31 + c) as f32);
        let out = resample(&g, 7, 7, Resampling::Bilinear).unwrap();
        for (a, b) in g.values.iter().zip(out.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_bilinear_ramp() {
        // [[0,1],[0,1]] upsampled: rows constant, columns monotone.
        let g = covering_raster(2, |_, c| c as f32);
        let out = resample(&g, 6, 6, Resampling::Bilinear).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert!((out.values[[i, j]] - out.values[[0, j]]).abs() < 1e-6, "row-constant");
                assert!(
                    out.values[[i, j]] <= out.values[[i, j + 1]] + 1e-6,
                    "column-monotone"
                );
            }
        }
        assert!(out.values[[0, 0]].abs() < 1e-6);
        assert!((out.values[[0, 5]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resample_bilinear_closed_form_oracle() {
        // 2x2 [[0,1],[2,3]] at 4x4: value(y,x) = bilinear of corner values
        // with y,x in input pixel coordinates.
        let g = covering_raster(2, |r, c| (2 * r + c) as f32);
        let out = resample(&g, 4, 4, Resampling::Bilinear).unwrap();
        for i in 0..4 {
            let y = ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            for j in 0..4 {
                let x = ((j as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let expect = (1.0 - y) * ((1.0 - x) * 0.0 + x * 1.0) + y * ((1.0 - x) * 2.0 + x * 3.0);
                assert!((out.values[[i, j]] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    fn composites(ntl_value: f32) -> Vec<AnnualComposite> {
        let mut out = Vec::new();
        for (band, value) in [
            (Band::B2, 0.10f32),
            (Band::B3, 0.20),
            (Band::B4, 0.30),
            (Band::B5, 0.40),
            (Band::B6, 0.25),
            (Band::B7, 0.15),
        ] {
            out.push(
                AnnualComposite::new(
                    2015,
                    band,
                    covering_raster(20, |_, _| value),
                    Source::Landsat8Sr,
                    &[2015],
                )
                .unwrap(),
            );
        }
        out.push(
            AnnualComposite::new(
                2015,
                Band::Ntl,
                covering_raster(3, |_, _| ntl_value),
                Source::ViirsNtl,
                &[2015],
            )
            .unwrap(),
        );
        out
    }

    #[test]
    fn build_tile_neutral_input() {
        let mut comps = Vec::new();
        for c in composites(0.0) {
            let zeroed = AnnualComposite {
                grid: c.grid.map(|_| 0.0),
                ..c
            };
            comps.push(zeroed);
        }
        let opts = TileOptions { size: 16, ..Default::default() };
        let tile = build_tile(&comps, &mesh(), 2015, &opts).unwrap();
        assert!(tile.tensor.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn build_tile_channels_and_triplication() {
        let opts = TileOptions { size: 16, ..Default::default() };
        let tile = build_tile(&composites(1.5), &mesh(), 2015, &opts).unwrap();
        assert_eq!(tile.tensor.dim(), (12, 16, 16));
        // constant bands: check stacking order b4,b3,b2,b7,b6,b5
        for (ch, expect) in [(0, 0.30f32), (1, 0.20), (2, 0.10), (3, 0.15), (4, 0.25), (5, 0.40)] {
            assert!(tile
                .tensor
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .all(|v| (*v - expect).abs() < 1e-7));
        }
        // ndbi = (0.25-0.40)/0.65, ndvi = (0.40-0.30)/0.70, ndwi = (0.20-0.40)/0.60
        for (ch, expect) in [(6, -0.15 / 0.65f32), (7, 0.10 / 0.70), (8, -0.20 / 0.60)] {
            assert!(tile
                .tensor
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .all(|v| (*v - expect).abs() < 1e-6));
        }
        let ntl = tile.tensor.index_axis(ndarray::Axis(0), 9);
        assert!(ntl.iter().all(|v| (*v - 2.5f32.ln()).abs() < 1e-6));
        for ch in [10, 11] {
            assert_eq!(tile.tensor.index_axis(ndarray::Axis(0), ch), ntl);
        }
    }

    #[test]
    fn build_tile_missing_band() {
        let mut comps = composites(1.0);
        comps.retain(|c| c.band != Band::B5);
        let opts = TileOptions { size: 8, ..Default::default() };
        assert!(matches!(
            build_tile(&comps, &mesh(), 2015, &opts),
            Err(TileError::MissingBand(Band::B5, 2015))
        ));
    }

    #[test]
    fn build_tile_deterministic() {
        let opts = TileOptions { size: 12, ..Default::default() };
        let a = build_tile(&composites(2.0), &mesh(), 2015, &opts).unwrap();
        let b = build_tile(&composites(2.0), &mesh(), 2015, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_tile_fills_nan_with_band_mean() {
        let mut comps = composites(1.0);
        // Poke NaN into one B4 pixel.
        for c in comps.iter_mut() {
            if c.band == Band::B4 {
                c.grid.values[[0, 0]] = f32::NAN;
            }
        }
        let opts = TileOptions { size: 10, ..Default::default() };
        let tile = build_tile(&comps, &mesh(), 2015, &opts).unwrap();
        assert!(tile.tensor.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn build_tile_rejects_all_nan_band() {
        let mut comps = composites(1.0);
        for c in comps.iter_mut() {
            if c.band == Band::B2 {
                c.grid.values.fill(f32::NAN);
            }
        }
        let opts = TileOptions { size: 10, ..Default::default() };
        assert!(matches!(
            build_tile(&comps, &mesh(), 2015, &opts),
            Err(TileError::EmptyChannel("b2"))
        ));
    }

    #[test]
    fn tile_file_round_trip() {
        let opts = TileOptions { size: 16, ..Default::default() };
        let tile = build_tile(&composites(1.5), &mesh(), 2015, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tile");
        write_tile(&tile, &path).unwrap();
        let back = read_tile(&path).unwrap();
        assert_eq!(back.mesh, tile.mesh);
        assert_eq!(back.year, tile.year);
        assert_eq!(back.tensor, tile.tensor);
    }

    #[test]
    fn manifest_round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("tiles.csv");
        let entries = vec![
            TileManifestEntry {
                mesh: mesh(),
                year: 2015,
                path: PathBuf::from("2015/533945.tile"),
            },
            TileManifestEntry {
                mesh: MeshCode::parse("533946").unwrap(),
                year: 2020,
                path: PathBuf::from("2020/533946.tile"),
            },
        ];
        write_manifest(&entries, &manifest).unwrap();
        let back = read_manifest(&manifest).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].path, dir.path().join("2015/533945.tile"));
        assert_eq!(back[1].mesh.to_string(), "533946");
    }
}
