//! Radiometric scaling, the three normalized-difference indices, and the
//! night-time-light log transform. All kernels are elementwise, propagate
//! NaN, and preserve grid geometry exactly.

use super::{RasterError, RasterGrid};

/// Denominators smaller than this in magnitude yield the neutral index 0.
pub const EPS_DIV: f32 = 1e-12;

/// Negative NTL radiance within this tolerance of zero is clamped to zero.
const NTL_CLAMP_TOL: f32 = 1e-6;

/// v' = v * scale + offset. NaN stays NaN.
pub fn apply_scale_offset(
    g: &RasterGrid,
    scale: f32,
    offset: f32,
) -> Result<RasterGrid, RasterError> {
    if !scale.is_finite() || scale == 0.0 || !offset.is_finite() {
        return Err(RasterError::Domain(format!(
            "scale must be finite and nonzero, offset finite; got {scale}/{offset}"
        )));
    }
    Ok(g.map(|v| v * scale + offset))
}

#[inline]
pub(crate) fn normalized_difference_scalar(a: f32, b: f32) -> f32 {
    if a.is_nan() || b.is_nan() {
        return f32::NAN;
    }
    let denom = a + b;
    if denom.abs() < EPS_DIV {
        0.0
    } else {
        (a - b) / denom
    }
}

fn normalized_difference(a: &RasterGrid, b: &RasterGrid) -> Result<RasterGrid, RasterError> {
    a.zip_map(b, normalized_difference_scalar)
}

/// Built-up index: (B6 - B5) / (B6 + B5).
pub fn ndbi(b6: &RasterGrid, b5: &RasterGrid) -> Result<RasterGrid, RasterError> {
    normalized_difference(b6, b5)
}

/// Vegetation index: (B5 - B4) / (B5 + B4).
pub fn ndvi(b5: &RasterGrid, b4: &RasterGrid) -> Result<RasterGrid, RasterError> {
    normalized_difference(b5, b4)
}

/// Water index: (B3 - B5) / (B3 + B5).
pub fn ndwi(b3: &RasterGrid, b5: &RasterGrid) -> Result<RasterGrid, RasterError> {
    normalized_difference(b3, b5)
}

/// Night-time-light rescaling: v' = ln(1 + v). Radiance must be >= 0 up to
/// a small clamping tolerance; NaN is preserved.
pub fn ntl_log(g: &RasterGrid) -> Result<RasterGrid, RasterError> {
    if let Some(v) = g.values.iter().find(|v| **v < -NTL_CLAMP_TOL) {
        return Err(RasterError::Domain(format!(
            "negative NTL radiance {v} below clamping tolerance"
        )));
    }
    Ok(g.map(|v| if v.is_nan() { v } else { v.max(0.0).ln_1p() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn grid(values: Array2<f32>) -> RasterGrid {
        RasterGrid::new(values, (36.0, 139.0), (0.1, 0.1), "EPSG:4326").unwrap()
    }

    #[test]
    fn scale_offset_identity_and_landsat_case() {
        let g = grid(array![[10000.0, f32::NAN]]);
        let id = apply_scale_offset(&g, 1.0, 0.0).unwrap();
        assert_eq!(id.values[[0, 0]], 10000.0);
        let sr = apply_scale_offset(&g, 0.0000275, -0.2).unwrap();
        assert!((sr.values[[0, 0]] - 0.075).abs() < 1e-6);
        assert!(sr.values[[0, 1]].is_nan());
        assert!(apply_scale_offset(&g, 0.0, 0.0).is_err());
    }

    #[test]
    fn ndbi_direct_values() {
        let b6 = grid(array![[0.6, 0.4]]);
        let b5 = grid(array![[0.2, 0.4]]);
        let out = ndbi(&b6, &b5).unwrap();
        assert!((out.values[[0, 0]] - 0.5).abs() < 1e-7);
        assert_eq!(out.values[[0, 1]], 0.0);
    }

    #[test]
    fn ndbi_antisymmetric() {
        let a = grid(array![[0.9, 0.1, 0.33]]);
        let b = grid(array![[0.2, 0.8, 0.33]]);
        let ab = ndbi(&a, &b).unwrap();
        let ba = ndbi(&b, &a).unwrap();
        for (x, y) in ab.values.iter().zip(ba.values.iter()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn ndvi_direct_and_bounds() {
        let b5 = grid(array![[0.5]]);
        let b4 = grid(array![[0.3]]);
        let out = ndvi(&b5, &b4).unwrap();
        assert!((out.values[[0, 0]] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn ndwi_direct_and_boundary() {
        let b3 = grid(array![[0.8, 0.0]]);
        let b5 = grid(array![[0.2, 0.5]]);
        let out = ndwi(&b3, &b5).unwrap();
        assert!((out.values[[0, 0]] - 0.6).abs() < 1e-7);
        assert_eq!(out.values[[0, 1]], -1.0);
    }

    #[test]
    fn indices_zero_denominator_yields_zero() {
        let a = grid(array![[0.0, 1e-13]]);
        let b = grid(array![[0.0, -1e-13]]);
        let out = ndvi(&a, &b).unwrap();
        assert_eq!(out.values[[0, 0]], 0.0);
        assert_eq!(out.values[[0, 1]], 0.0);
    }

    #[test]
    fn indices_propagate_nan() {
        let a = grid(array![[f32::NAN]]);
        let b = grid(array![[0.5]]);
        assert!(ndbi(&a, &b).unwrap().values[[0, 0]].is_nan());
    }

    #[test]
    fn index_mismatched_grids_rejected() {
        let a = grid(array![[0.1]]);
        let mut b = grid(array![[0.2]]);
        b.pixel_size.0 *= 2.0;
        assert!(matches!(ndwi(&a, &b), Err(RasterError::GridMismatch(_))));
    }

    #[test]
    fn ntl_log_values() {
        let g = grid(array![[0.0, std::f32::consts::E - 1.0, 100.0, f32::NAN]]);
        let out = ntl_log(&g).unwrap();
        assert_eq!(out.values[[0, 0]], 0.0);
        assert!((out.values[[0, 1]] - 1.0).abs() < 1e-6);
        assert!((out.values[[0, 2]] - 101f32.ln()).abs() < 1e-6);
        assert!(out.values[[0, 3]].is_nan());
    }

    #[test]
    fn ntl_log_clamps_tiny_negatives_and_rejects_real_ones() {
        let tiny = grid(array![[-1e-7]]);
        assert_eq!(ntl_log(&tiny).unwrap().values[[0, 0]], 0.0);
        let bad = grid(array![[-0.5]]);
        assert!(matches!(ntl_log(&bad), Err(RasterError::Domain(_))));
    }
}
