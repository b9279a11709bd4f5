//! The in-memory raster type. North-up only: row 0 is the northernmost row
//! and latitude decreases with the row index. Missing data is always NaN in
//! memory; on-disk sentinels are normalized at load time.

use ndarray::Array2;

use super::RasterError;

/// Tolerance for comparing grid geometry (origins and pixel sizes in degrees).
const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    /// Pixel values, rows × cols, NaN = missing.
    pub values: Array2<f32>,
    /// (lat, lon) of the upper-left (north-west) corner in degrees.
    pub origin: (f64, f64),
    /// (d_lat, d_lon) pixel size magnitudes in degrees; rows advance south.
    pub pixel_size: (f64, f64),
    /// CRS identifier, e.g. "EPSG:4326".
    pub crs: String,
}

impl RasterGrid {
    pub fn new(
        values: Array2<f32>,
        origin: (f64, f64),
        pixel_size: (f64, f64),
        crs: impl Into<String>,
    ) -> Result<RasterGrid, RasterError> {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return Err(RasterError::Invalid("raster must be at least 1x1".into()));
        }
        if !(pixel_size.0 > 0.0 && pixel_size.1 > 0.0)
            || !pixel_size.0.is_finite()
            || !pixel_size.1.is_finite()
        {
            return Err(RasterError::Invalid(format!(
                "pixel size must be positive and finite, got {pixel_size:?}"
            )));
        }
        if !origin.0.is_finite() || !origin.1.is_finite() {
            return Err(RasterError::Invalid(format!("non-finite origin {origin:?}")));
        }
        Ok(RasterGrid {
            values,
            origin,
            pixel_size,
            crs: crs.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Latitude of a pixel's center.
    pub fn center_lat(&self, row: usize) -> f64 {
        self.origin.0 - (row as f64 + 0.5) * self.pixel_size.0
    }

    /// Longitude of a pixel's center.
    pub fn center_lon(&self, col: usize) -> f64 {
        self.origin.1 + (col as f64 + 0.5) * self.pixel_size.1
    }

    /// Outer extent as (lat_min, lat_max, lon_min, lon_max).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0 - self.rows() as f64 * self.pixel_size.0,
            self.origin.0,
            self.origin.1,
            self.origin.1 + self.cols() as f64 * self.pixel_size.1,
        )
    }

    pub fn same_geometry(&self, other: &RasterGrid) -> bool {
        self.values.dim() == other.values.dim()
            && (self.origin.0 - other.origin.0).abs() < GEOM_EPS
            && (self.origin.1 - other.origin.1).abs() < GEOM_EPS
            && (self.pixel_size.0 - other.pixel_size.0).abs() < GEOM_EPS
            && (self.pixel_size.1 - other.pixel_size.1).abs() < GEOM_EPS
            && self.crs == other.crs
    }

    pub(crate) fn require_same_geometry(&self, other: &RasterGrid) -> Result<(), RasterError> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(RasterError::GridMismatch(format!(
                "{}x{} at {:?}/{:?} vs {}x{} at {:?}/{:?}",
                self.rows(),
                self.cols(),
                self.origin,
                self.pixel_size,
                other.rows(),
                other.cols(),
                other.origin,
                other.pixel_size,
            )))
        }
    }

    /// Elementwise map preserving geometry metadata exactly.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> RasterGrid {
        RasterGrid {
            values: self.values.mapv(&f),
            origin: self.origin,
            pixel_size: self.pixel_size,
            crs: self.crs.clone(),
        }
    }

    /// Elementwise combination of two geometry-identical rasters.
    pub fn zip_map(
        &self,
        other: &RasterGrid,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<RasterGrid, RasterError> {
        self.require_same_geometry(other)?;
        let mut values = self.values.clone();
        values.zip_mut_with(&other.values, |a, &b| *a = f(*a, b));
        Ok(RasterGrid {
            values,
            origin: self.origin,
            pixel_size: self.pixel_size,
            crs: self.crs.clone(),
        })
    }
}
