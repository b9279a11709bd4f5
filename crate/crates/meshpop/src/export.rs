//! Geospatial export of prediction records: GeoJSON (RFC 7946) with mesh
//! polygons, flat CSV, and an optional choropleth PNG of the aged rate.

use std::path::Path;

use serde_json::json;

use crate::predict::{write_predictions_csv, PredictionRecord};

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("nothing to export: records are empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    GeoJson,
    Csv,
}

/// Closed counterclockwise polygon ring of a mesh bbox, GeoJSON positions
/// ([lon, lat]).
fn bbox_ring(r: &PredictionRecord) -> Vec<[f64; 2]> {
    let b = r.mesh.bbox();
    vec![
        [b.lon_min, b.lat_min],
        [b.lon_max, b.lat_min],
        [b.lon_max, b.lat_max],
        [b.lon_min, b.lat_max],
        [b.lon_min, b.lat_min],
    ]
}

/// Write records as GeoJSON or CSV. Both carry every record field; GeoJSON
/// features carry the cell polygon.
pub fn export_geo(
    records: &[PredictionRecord],
    format: ExportFormat,
    path: &Path,
) -> Result<(), ExportError> {
    if records.is_empty() {
        return Err(ExportError::Empty);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    match format {
        ExportFormat::Csv => {
            write_predictions_csv(records, path)?;
        }
        ExportFormat::GeoJson => {
            let features: Vec<serde_json::Value> = records
                .iter()
                .map(|r| {
                    json!({
                        "type": "Feature",
                        "geometry": {
                            "type": "Polygon",
                            "coordinates": [bbox_ring(r)],
                        },
                        "properties": {
                            "mesh_code": r.mesh.to_string(),
                            "year": r.year,
                            "est_pop_0_14": r.est_pop_0_14,
                            "est_pop_15_64": r.est_pop_15_64,
                            "est_pop_65plus": r.est_pop_65p,
                            "aged_rate": r.aged_rate,
                        },
                    })
                })
                .collect();
            let doc = json!({"type": "FeatureCollection", "features": features});
            std::fs::write(path, serde_json::to_string(&doc)?)?;
        }
    }
    Ok(())
}

/// Sequential light-yellow to dark-red ramp over [0, 1].
pub fn ramp_color(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f32, b: f32| (a + (b - a) * t).round() as u8;
    [lerp(255.0, 189.0), lerp(255.0, 0.0), lerp(204.0, 38.0)]
}

/// Rasterize mesh cells colored by aged rate onto a plate-carree canvas.
pub fn render_choropleth(
    records: &[PredictionRecord],
    path: &Path,
    width: u32,
) -> Result<(), ExportError> {
    if records.is_empty() {
        return Err(ExportError::Empty);
    }
    let mut lat_min = f64::INFINITY;
    let mut lat_max = f64::NEG_INFINITY;
    let mut lon_min = f64::INFINITY;
    let mut lon_max = f64::NEG_INFINITY;
    for r in records {
        let b = r.mesh.bbox();
        lat_min = lat_min.min(b.lat_min);
        lat_max = lat_max.max(b.lat_max);
        lon_min = lon_min.min(b.lon_min);
        lon_max = lon_max.max(b.lon_max);
    }
    let scale = width as f64 / (lon_max - lon_min);
    let height = ((lat_max - lat_min) * scale).ceil().max(1.0) as u32;

    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([240, 240, 240]));
    for r in records {
        let b = r.mesh.bbox();
        let x0 = ((b.lon_min - lon_min) * scale).floor().max(0.0) as u32;
        let x1 = (((b.lon_max - lon_min) * scale).ceil() as u32).min(width);
        let y0 = ((lat_max - b.lat_max) * scale).floor().max(0.0) as u32;
        let y1 = (((lat_max - b.lat_min) * scale).ceil() as u32).min(height);
        let color = image::Rgb(ramp_color(r.aged_rate));
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, color);
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| ExportError::Image(e.to_string()))?;
    Ok(())
}
