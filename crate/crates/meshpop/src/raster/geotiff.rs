//! GeoTIFF reading and writing backed by the pure-Rust `tiff` crate.
//! Supports exactly what the pipeline needs: single-band north-up rasters
//! in a geographic CRS, float32 payload (integer payloads are widened on
//! read), nodata via the GDAL ascii tag.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::colortype::Gray32Float;
use tiff::encoder::TiffEncoder;
use tiff::tags::Tag;

use super::{RasterError, RasterGrid};

// GeoKey ids/values used in the GeoKeyDirectory.
const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const MODEL_TYPE_GEOGRAPHIC: u16 = 2;
const RASTER_PIXEL_IS_AREA: u16 = 1;

/// Write a single-band float32 GeoTIFF. Missing pixels are stored as NaN and
/// declared via the GDAL nodata tag.
pub fn save_raster(grid: &RasterGrid, path: &Path) -> Result<(), RasterError> {
    let epsg = parse_epsg(&grid.crs).ok_or_else(|| {
        RasterError::UnsupportedGeometry(format!("cannot encode CRS {:?} as EPSG geokey", grid.crs))
    })?;
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = TiffEncoder::new(file)?;
    let mut image = encoder.new_image::<Gray32Float>(grid.cols() as u32, grid.rows() as u32)?;
    let enc = image.encoder();
    // Pixel scale y is positive by convention; rows advance southwards.
    enc.write_tag(
        Tag::ModelPixelScaleTag,
        &[grid.pixel_size.1, grid.pixel_size.0, 0.0][..],
    )?;
    enc.write_tag(
        Tag::ModelTiepointTag,
        &[0.0, 0.0, 0.0, grid.origin.1, grid.origin.0, 0.0][..],
    )?;
    enc.write_tag(
        Tag::GeoKeyDirectoryTag,
        &[
            1u16, 1, 0, 3, // version, revision, minor, key count
            KEY_MODEL_TYPE, 0, 1, MODEL_TYPE_GEOGRAPHIC,
            KEY_RASTER_TYPE, 0, 1, RASTER_PIXEL_IS_AREA,
            KEY_GEOGRAPHIC_TYPE, 0, 1, epsg,
        ][..],
    )?;
    enc.write_tag(Tag::GdalNodata, "nan")?;
    let data = grid
        .values
        .as_slice()
        .expect("raster values are contiguous row-major");
    image.write_data(data)?;
    Ok(())
}

/// Load a single-band GeoTIFF, checking the CRS tag against `expected_crs`
/// and normalizing the declared nodata sentinel to NaN.
pub fn load_raster(path: &Path, expected_crs: &str) -> Result<RasterGrid, RasterError> {
    let file = BufReader::new(File::open(path)?);
    let mut decoder = Decoder::new(file)?;
    let (cols, rows) = decoder.dimensions()?;
    if rows == 0 || cols == 0 {
        return Err(RasterError::Invalid("empty raster".into()));
    }

    let found_crs = match decoder.find_tag(Tag::GeoKeyDirectoryTag)? {
        Some(value) => {
            let dir = value.into_u16_vec()?;
            geographic_epsg(&dir)
                .map(|v| format!("EPSG:{v}"))
                .unwrap_or_else(|| "unknown".to_string())
        }
        None => "missing".to_string(),
    };
    if found_crs != expected_crs {
        return Err(RasterError::Crs {
            expected: expected_crs.to_string(),
            found: found_crs,
        });
    }

    // Reject rotated/sheared transforms; accept the tiepoint+scale form only.
    if let Some(value) = decoder.find_tag(Tag::ModelTransformationTag)? {
        let m = value.into_f64_vec()?;
        if m.len() >= 16 && (m[1] != 0.0 || m[4] != 0.0) {
            return Err(RasterError::UnsupportedGeometry(
                "rotated affine transform".into(),
            ));
        }
    }
    let scale = decoder
        .find_tag(Tag::ModelPixelScaleTag)?
        .ok_or_else(|| RasterError::UnsupportedGeometry("missing ModelPixelScale tag".into()))?
        .into_f64_vec()?;
    let tiepoint = decoder
        .find_tag(Tag::ModelTiepointTag)?
        .ok_or_else(|| RasterError::UnsupportedGeometry("missing ModelTiepoint tag".into()))?
        .into_f64_vec()?;
    if scale.len() < 2 || tiepoint.len() < 6 {
        return Err(RasterError::UnsupportedGeometry("malformed geo tags".into()));
    }
    if tiepoint[0] != 0.0 || tiepoint[1] != 0.0 {
        return Err(RasterError::UnsupportedGeometry(
            "tiepoint must anchor the upper-left corner".into(),
        ));
    }

    let nodata: Option<f32> = decoder
        .get_tag_ascii_string(Tag::GdalNodata)
        .ok()
        .and_then(|s| s.trim().trim_end_matches('\0').parse().ok());

    let mut data: Vec<f32> = match decoder.read_image()? {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        other => {
            return Err(RasterError::Invalid(format!(
                "unsupported sample format {other:?}"
            )))
        }
    };
    if data.len() != rows as usize * cols as usize {
        return Err(RasterError::Invalid(format!(
            "expected a single band ({}x{} pixels), got {} samples",
            rows,
            cols,
            data.len()
        )));
    }
    if let Some(sentinel) = nodata {
        if !sentinel.is_nan() {
            for v in &mut data {
                if *v == sentinel {
                    *v = f32::NAN;
                }
            }
        }
    }

    let values = Array2::from_shape_vec((rows as usize, cols as usize), data)
        .expect("shape checked above");
    RasterGrid::new(
        values,
        (tiepoint[4], tiepoint[3]),
        (scale[1], scale[0]),
        expected_crs,
    )
}

fn parse_epsg(crs: &str) -> Option<u16> {
    crs.strip_prefix("EPSG:")?.parse().ok()
}

fn geographic_epsg(directory: &[u16]) -> Option<u16> {
    // Header is 4 shorts, then 4 shorts per key: id, location, count, value.
    directory[4..]
        .chunks(4)
        .find(|key| key.len() == 4 && key[0] == KEY_GEOGRAPHIC_TYPE && key[1] == 0)
        .map(|key| key[3])
}
