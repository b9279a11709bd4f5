//! Cloud-free annual composites: per-pixel mean over unmasked observations.

use ndarray::Array2;

use super::{RasterError, RasterGrid};

/// Input channel of the tile stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Band {
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    Ntl,
}

impl Band {
    pub const ALL: [Band; 7] = [
        Band::B2,
        Band::B3,
        Band::B4,
        Band::B5,
        Band::B6,
        Band::B7,
        Band::Ntl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Band::B2 => "b2",
            Band::B3 => "b3",
            Band::B4 => "b4",
            Band::B5 => "b5",
            Band::B6 => "b6",
            Band::B7 => "b7",
            Band::Ntl => "ntl",
        }
    }

    pub fn parse(s: &str) -> Option<Band> {
        Band::ALL.into_iter().find(|b| b.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Landsat8Sr,
    ViirsNtl,
}

/// One band's cloud-free annual mean raster.
#[derive(Debug, Clone)]
pub struct AnnualComposite {
    pub year: i32,
    pub band: Band,
    pub grid: RasterGrid,
    pub source: Source,
}

impl AnnualComposite {
    pub fn new(
        year: i32,
        band: Band,
        grid: RasterGrid,
        source: Source,
        supported_years: &[i32],
    ) -> Result<AnnualComposite, RasterError> {
        let consistent = matches!(
            (band, source),
            (Band::Ntl, Source::ViirsNtl)
                | (Band::B2 | Band::B3 | Band::B4 | Band::B5 | Band::B6 | Band::B7, Source::Landsat8Sr)
        );
        if !consistent {
            return Err(RasterError::Domain(format!(
                "band {band:?} cannot come from source {source:?}"
            )));
        }
        if !supported_years.contains(&year) {
            return Err(RasterError::Domain(format!(
                "year {year} not in supported set {supported_years:?}"
            )));
        }
        Ok(AnnualComposite {
            year,
            band,
            grid,
            source,
        })
    }
}

/// One observation of a band: pixel values plus a cloud mask (true = cloud).
#[derive(Debug, Clone)]
pub struct Scene {
    pub values: RasterGrid,
    pub cloud: Array2<bool>,
}

/// Interpret a mask raster: any nonzero or missing pixel counts as cloud.
pub fn cloud_mask_from_raster(mask: &RasterGrid) -> Array2<bool> {
    mask.values.mapv(|v| v.is_nan() || v != 0.0)
}

/// Per-pixel arithmetic mean over scenes where the pixel is unmasked and
/// observed; pixels with zero valid observations come out NaN.
pub fn cloudfree_annual_mean(scenes: &[Scene]) -> Result<RasterGrid, RasterError> {
    let first = scenes
        .first()
        .ok_or_else(|| RasterError::Domain("need at least one scene".into()))?;
    let dim = first.values.values.dim();
    for scene in scenes {
        first.values.require_same_geometry(&scene.values)?;
        if scene.cloud.dim() != dim {
            return Err(RasterError::GridMismatch(format!(
                "cloud mask {:?} does not match scene {:?}",
                scene.cloud.dim(),
                dim
            )));
        }
    }

    let mut sum = Array2::<f64>::zeros(dim);
    let mut count = Array2::<u32>::zeros(dim);
    for scene in scenes {
        for ((s, c), (&v, &cloudy)) in sum
            .iter_mut()
            .zip(count.iter_mut())
            .zip(scene.values.values.iter().zip(scene.cloud.iter()))
        {
            if !cloudy && !v.is_nan() {
                *s += v as f64;
                *c += 1;
            }
        }
    }
    let values = ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|&s, &c| if c == 0 { f32::NAN } else { (s / c as f64) as f32 });
    RasterGrid::new(values, first.values.origin, first.values.pixel_size, first.values.crs.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid(values: Array2<f32>) -> RasterGrid {
        RasterGrid::new(values, (36.0, 139.0), (0.1, 0.1), "EPSG:4326").unwrap()
    }

    fn clear(dim: (usize, usize)) -> Array2<bool> {
        Array2::from_elem(dim, false)
    }

    #[test]
    fn single_clear_scene_is_identity() {
        let g = grid(array![[1.0, 2.0], [3.0, 4.0]]);
        let out = cloudfree_annual_mean(&[Scene {
            values: g.clone(),
            cloud: clear((2, 2)),
        }])
        .unwrap();
        assert_eq!(out.values, g.values);
        assert!(out.same_geometry(&g));
    }

    #[test]
    fn masked_scene_excluded_from_mean() {
        let a = grid(array![[2.0]]);
        let b = grid(array![[4.0]]);
        let out = cloudfree_annual_mean(&[
            Scene { values: a, cloud: clear((1, 1)) },
            Scene { values: b, cloud: array![[true]] },
        ])
        .unwrap();
        assert_eq!(out.values[[0, 0]], 2.0);
    }

    #[test]
    fn mean_of_three_valid_values() {
        let scenes: Vec<Scene> = [1.0f32, 2.0, 3.0]
            .iter()
            .map(|&v| Scene {
                values: grid(array![[v]]),
                cloud: clear((1, 1)),
            })
            .collect();
        let out = cloudfree_annual_mean(&scenes).unwrap();
        assert_eq!(out.values[[0, 0]], 2.0);
    }

    #[test]
    fn all_masked_pixel_is_nan() {
        let out = cloudfree_annual_mean(&[Scene {
            values: grid(array![[5.0, 6.0]]),
            cloud: array![[true, false]],
        }])
        .unwrap();
        assert!(out.values[[0, 0]].is_nan());
        assert_eq!(out.values[[0, 1]], 6.0);
    }

    #[test]
    fn nan_observation_treated_as_missing() {
        let out = cloudfree_annual_mean(&[
            Scene { values: grid(array![[f32::NAN]]), cloud: clear((1, 1)) },
            Scene { values: grid(array![[8.0]]), cloud: clear((1, 1)) },
        ])
        .unwrap();
        assert_eq!(out.values[[0, 0]], 8.0);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let a = grid(array![[1.0]]);
        let mut b = grid(array![[2.0]]);
        b.origin.1 += 1.0;
        let scenes = [
            Scene { values: a, cloud: clear((1, 1)) },
            Scene { values: b, cloud: clear((1, 1)) },
        ];
        assert!(matches!(
            cloudfree_annual_mean(&scenes),
            Err(RasterError::GridMismatch(_))
        ));
    }

    #[test]
    fn order_and_fully_masked_duplicates_do_not_matter() {
        let mk = |v: f32, cloudy: bool| Scene {
            values: grid(array![[v]]),
            cloud: array![[cloudy]],
        };
        let base = vec![mk(1.0, false), mk(5.0, false)];
        let mut reordered = vec![mk(5.0, false), mk(1.0, false), mk(99.0, true)];
        let a = cloudfree_annual_mean(&base).unwrap();
        let b = cloudfree_annual_mean(&reordered).unwrap();
        assert_eq!(a.values, b.values);
        reordered.push(mk(123.0, true));
        let c = cloudfree_annual_mean(&reordered).unwrap();
        assert_eq!(a.values, c.values);
    }

    #[test]
    fn band_source_consistency() {
        let g = grid(array![[1.0]]);
        assert!(AnnualComposite::new(2015, Band::Ntl, g.clone(), Source::Landsat8Sr, &[2015]).is_err());
        assert!(AnnualComposite::new(2015, Band::B3, g.clone(), Source::ViirsNtl, &[2015]).is_err());
        assert!(AnnualComposite::new(2013, Band::B3, g.clone(), Source::Landsat8Sr, &[2015]).is_err());
        assert!(AnnualComposite::new(2015, Band::Ntl, g, Source::ViirsNtl, &[2015]).is_ok());
    }
}
