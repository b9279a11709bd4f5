//! Japanese standard grid-square codes (WGS84) at the 80 km, 10 km and 1 km
//! levels, with bbox geometry and 1 km → 10 km label aggregation.
//!
//! Cells are indexed on the 1 km lattice: latitude steps of 30″ (1/120°) and
//! longitude steps of 45″ (1/80°). The primary (80 km) code is
//! `floor(lat·1.5)` and `floor(lon)−100`, the 10 km level subdivides 8×8 and
//! the 1 km level 10×10. All bounding boxes are half-open `[min, max)` so
//! every point maps to exactly one cell per level.

use std::collections::BTreeMap;
use std::fmt;

use crate::dataset::LabelRecord;

/// Latitude steps per degree on the 1 km lattice (30 arc-seconds each).
const LAT_STEPS_PER_DEG: i64 = 120;
/// Longitude steps per degree on the 1 km lattice (45 arc-seconds each).
const LON_STEPS_PER_DEG: i64 = 80;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("coordinate ({lat}, {lon}) outside envelope {envelope:?}")]
    Domain {
        lat: f64,
        lon: f64,
        envelope: GeoBox,
    },
    #[error("invalid mesh code {code:?}: {reason}")]
    Parse { code: String, reason: String },
    #[error("expected a {expected:?} mesh code, got {actual:?}")]
    Level { expected: Level, actual: Level },
    #[error("label records mix years {0} and {1}")]
    MixedYears(i32, i32),
}

/// Grid-square level. The digit count of the serialized code identifies it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    /// Primary cell, 40′ × 1° (4 digits).
    L80km,
    /// Secondary cell, 5′ × 7′30″ (6 digits).
    L10km,
    /// Basic grid square, 30″ × 45″ (8 digits).
    L1km,
}

impl Level {
    pub fn digits(self) -> usize {
        match self {
            Level::L80km => 4,
            Level::L10km => 6,
            Level::L1km => 8,
        }
    }

    /// Cell span in 1 km lattice steps (same count on both axes).
    fn span(self) -> i64 {
        match self {
            Level::L80km => 80,
            Level::L10km => 10,
            Level::L1km => 1,
        }
    }
}

/// A geographic bounding box in degrees, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl GeoBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Option<GeoBox> {
        let b = GeoBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        let finite = [lat_min, lat_max, lon_min, lon_max]
            .iter()
            .all(|v| v.is_finite());
        (finite && lat_min < lat_max && lon_min < lon_max).then_some(b)
    }

    /// Half-open containment: `[min, max)` on both axes.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.lat_min <= lat && lat < self.lat_max && self.lon_min <= lon && lon < self.lon_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.lat_min + self.lat_max),
            0.5 * (self.lon_min + self.lon_max),
        )
    }
}

/// Default coordinate envelope accepted by [`point_to_mesh`]; covers every
/// census mesh of Japan. Inclusive on all four bounds.
pub const JAPAN_ENVELOPE: GeoBox = GeoBox {
    lat_min: 20.0,
    lat_max: 46.0,
    lon_min: 122.0,
    lon_max: 154.0,
};

/// A standard grid-square code.
///
/// Stored as the cell's south-west corner on the 1 km lattice plus its
/// level; the digit string is derived on demand.
///
/// ```
/// use meshpop::mesh::{Level, MeshCode};
///
/// let m = MeshCode::parse("533945").unwrap();
/// assert_eq!(m.level(), Level::L10km);
/// assert_eq!(m.to_string(), "533945");
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeshCode {
    level: Level,
    /// South edge in 30″ steps from the equator; multiple of `level.span()`.
    lat_steps: i64,
    /// West edge in 45″ steps from the prime meridian; multiple of `level.span()`.
    lon_steps: i64,
}

impl MeshCode {
    pub fn level(&self) -> Level {
        self.level
    }

    /// Parse a plain digit string (4, 6 or 8 digits, no separators).
    pub fn parse(code: &str) -> Result<MeshCode, MeshError> {
        let err = |reason: &str| MeshError::Parse {
            code: code.to_string(),
            reason: reason.to_string(),
        };
        if !code.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("non-digit character"));
        }
        let level = match code.len() {
            4 => Level::L80km,
            6 => Level::L10km,
            8 => Level::L1km,
            _ => return Err(err("length must be 4, 6 or 8")),
        };
        let digit = |i: usize| (code.as_bytes()[i] - b'0') as i64;
        let p = digit(0) * 10 + digit(1);
        let u = digit(2) * 10 + digit(3);
        let mut lat = p * 80;
        let mut lon = (u + 100) * 80;
        if level >= Level::L10km {
            let (q, v) = (digit(4), digit(5));
            if q > 7 || v > 7 {
                return Err(err("10 km sub-index digits must be in 0..=7"));
            }
            lat += q * 10;
            lon += v * 10;
        }
        if level == Level::L1km {
            lat += digit(6);
            lon += digit(7);
        }
        Ok(MeshCode {
            level,
            lat_steps: lat,
            lon_steps: lon,
        })
    }

    fn from_steps(level: Level, lat_1km: i64, lon_1km: i64) -> MeshCode {
        let span = level.span();
        MeshCode {
            level,
            lat_steps: lat_1km.div_euclid(span) * span,
            lon_steps: lon_1km.div_euclid(span) * span,
        }
    }

    /// The cell's bounding box, half-open `[min, max)` on both axes.
    pub fn bbox(&self) -> GeoBox {
        let span = self.level.span();
        GeoBox {
            lat_min: lat_edge(self.lat_steps),
            lat_max: lat_edge(self.lat_steps + span),
            lon_min: lon_edge(self.lon_steps),
            lon_max: lon_edge(self.lon_steps + span),
        }
    }

    /// Parent cell one level up, or a `Level` error for 80 km cells.
    pub fn parent(&self) -> Result<MeshCode, MeshError> {
        let parent_level = match self.level {
            Level::L1km => Level::L10km,
            Level::L10km => Level::L80km,
            Level::L80km => {
                return Err(MeshError::Level {
                    expected: Level::L1km,
                    actual: Level::L80km,
                })
            }
        };
        Ok(MeshCode::from_steps(
            parent_level,
            self.lat_steps,
            self.lon_steps,
        ))
    }

    /// The 100 basic grid squares tiling a 10 km cell, in code order.
    pub fn children_1km(&self) -> Result<Vec<MeshCode>, MeshError> {
        if self.level != Level::L10km {
            return Err(MeshError::Level {
                expected: Level::L10km,
                actual: self.level,
            });
        }
        let mut out = Vec::with_capacity(100);
        for r in 0..10 {
            for w in 0..10 {
                out.push(MeshCode {
                    level: Level::L1km,
                    lat_steps: self.lat_steps + r,
                    lon_steps: self.lon_steps + w,
                });
            }
        }
        Ok(out)
    }
}

// Mesh codes cross serialization boundaries as plain digit strings.
impl serde::Serialize for MeshCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for MeshCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        MeshCode::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for MeshCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.lat_steps / 80;
        let u = self.lon_steps / 80 - 100;
        write!(f, "{p:02}{u:02}")?;
        if self.level >= Level::L10km {
            write!(f, "{}{}", (self.lat_steps % 80) / 10, (self.lon_steps % 80) / 10)?;
        }
        if self.level == Level::L1km {
            write!(f, "{}{}", self.lat_steps % 10, self.lon_steps % 10)?;
        }
        Ok(())
    }
}

fn lat_edge(steps: i64) -> f64 {
    steps as f64 / LAT_STEPS_PER_DEG as f64
}

fn lon_edge(steps: i64) -> f64 {
    steps as f64 / LON_STEPS_PER_DEG as f64
}

/// Largest `n` with `edge(n) <= value`, where `edge` is the f64 division the
/// bbox code uses. The floor of the product alone can land one cell off when
/// `value` sits on (or within one ulp of) a cell edge; the correction loops
/// re-anchor against `edge` itself so containment holds exactly.
fn quantize(value: f64, steps_per_deg: i64, edge: fn(i64) -> f64) -> i64 {
    let mut n = (value * steps_per_deg as f64).floor() as i64;
    while edge(n + 1) <= value {
        n += 1;
    }
    while edge(n) > value {
        n -= 1;
    }
    n
}

/// Map a WGS84 point to the grid square containing it at `level`, accepting
/// only points inside [`JAPAN_ENVELOPE`].
///
/// ```
/// use meshpop::mesh::{point_to_mesh, Level};
///
/// let m = point_to_mesh(35.7, 139.7, Level::L10km).unwrap();
/// assert_eq!(m.to_string(), "533945");
/// ```
pub fn point_to_mesh(lat: f64, lon: f64, level: Level) -> Result<MeshCode, MeshError> {
    point_to_mesh_in(&JAPAN_ENVELOPE, lat, lon, level)
}

/// [`point_to_mesh`] with a caller-supplied coordinate envelope.
pub fn point_to_mesh_in(
    envelope: &GeoBox,
    lat: f64,
    lon: f64,
    level: Level,
) -> Result<MeshCode, MeshError> {
    let inside = lat.is_finite()
        && lon.is_finite()
        && (envelope.lat_min..=envelope.lat_max).contains(&lat)
        && (envelope.lon_min..=envelope.lon_max).contains(&lon);
    if !inside {
        return Err(MeshError::Domain {
            lat,
            lon,
            envelope: *envelope,
        });
    }
    let lat_1km = quantize(lat, LAT_STEPS_PER_DEG, lat_edge);
    let lon_1km = quantize(lon, LON_STEPS_PER_DEG, lon_edge);
    Ok(MeshCode::from_steps(level, lat_1km, lon_1km))
}

/// Sum 1 km label records into their 10 km parents.
///
/// Children absent from the input contribute zero; a parent is emitted only
/// when at least one child is present. Output is sorted by mesh code.
pub fn aggregate_labels(records: &[LabelRecord]) -> Result<Vec<LabelRecord>, MeshError> {
    let mut year: Option<i32> = None;
    let mut sums: BTreeMap<MeshCode, [u64; 3]> = BTreeMap::new();
    for rec in records {
        if rec.mesh.level() != Level::L1km {
            return Err(MeshError::Level {
                expected: Level::L1km,
                actual: rec.mesh.level(),
            });
        }
        match year {
            None => year = Some(rec.year),
            Some(y) if y != rec.year => return Err(MeshError::MixedYears(y, rec.year)),
            _ => {}
        }
        let parent = rec.mesh.parent()?;
        let entry = sums.entry(parent).or_insert([0; 3]);
        entry[0] += rec.pop_0_14;
        entry[1] += rec.pop_15_64;
        entry[2] += rec.pop_65p;
    }
    let year = year.unwrap_or_default();
    Ok(sums
        .into_iter()
        .map(|(mesh, [a, b, c])| LabelRecord {
            mesh,
            year,
            pop_0_14: a,
            pop_15_64: b,
            pop_65p: c,
        })
        .collect())
}
