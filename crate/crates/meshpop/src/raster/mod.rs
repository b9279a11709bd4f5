//! Georeferenced single-band rasters: ingestion, cloud-free annual
//! composites, radiometric scaling, spectral indices and NTL log-rescaling.

mod composite;
mod geotiff;
mod grid;
mod indices;

pub use composite::{cloud_mask_from_raster, cloudfree_annual_mean, AnnualComposite, Band, Scene, Source};
pub use geotiff::{load_raster, save_raster};
pub use grid::RasterGrid;
pub use indices::{apply_scale_offset, ndbi, ndvi, ndwi, ntl_log, EPS_DIV};

/// Default CRS identifier expected of all inputs.
pub const DEFAULT_CRS: &str = "EPSG:4326";

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("CRS mismatch: expected {expected}, found {found}")]
    Crs { expected: String, found: String },
    #[error("unsupported raster geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("grid geometry mismatch: {0}")]
    GridMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("tiff error: {0}")]
    Tiff(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<tiff::TiffError> for RasterError {
    fn from(e: tiff::TiffError) -> Self {
        RasterError::Tiff(e.to_string())
    }
}
