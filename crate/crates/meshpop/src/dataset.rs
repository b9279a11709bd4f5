//! Census label ingestion, the log10 label transform, the stratified
//! 8:1:1 mesh split, and deterministic batch ordering.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::MeshCode;

/// Exact header required of a label CSV.
pub const LABEL_CSV_HEADER: &str = "mesh_code,year,pop_0_14,pop_15_64,pop_65plus";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("{path}: line {line}: negative population count {value}")]
    NegativeCount { path: String, line: u64, value: i64 },
    #[error("duplicate label record for mesh {mesh} year {year}")]
    Duplicate { mesh: String, year: i32 },
    #[error("stratified split needs at least 10 distinct meshes, got {0}")]
    TooFewMeshes(usize),
    #[error("missing tile for mesh {mesh} year {year}: {path}")]
    MissingTile { mesh: String, year: i32, path: PathBuf },
    #[error("no label for mesh {mesh} year {year}")]
    MissingLabel { mesh: String, year: i32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tile(#[from] crate::tile::TileError),
}

/// One mesh cell's population counts for one census year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub mesh: MeshCode,
    pub year: i32,
    pub pop_0_14: u64,
    pub pop_15_64: u64,
    pub pop_65p: u64,
}

impl LabelRecord {
    pub fn total(&self) -> u64 {
        self.pop_0_14 + self.pop_15_64 + self.pop_65p
    }
}

/// Parse and validate a label CSV. The header must match
/// [`LABEL_CSV_HEADER`] exactly and each (mesh, year) pair may appear once.
pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>, DataError> {
    let display = path.display().to_string();
    let parse_err = |line: u64, msg: String| DataError::Parse {
        path: display.clone(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(1, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != LABEL_CSV_HEADER {
        return Err(parse_err(
            1,
            format!("header must be {LABEL_CSV_HEADER:?}, got {header:?}"),
        ));
    }

    let mut seen: BTreeSet<(MeshCode, i32)> = BTreeSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 5 {
            return Err(parse_err(line, format!("expected 5 fields, got {}", record.len())));
        }
        let mesh = MeshCode::parse(&record[0]).map_err(|e| parse_err(line, e.to_string()))?;
        let year: i32 = record[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("year: {e}")))?;
        let mut counts = [0u64; 3];
        for (slot, field) in counts.iter_mut().zip(record.iter().skip(2)) {
            let value: i64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(line, format!("count: {e}")))?;
            if value < 0 {
                return Err(DataError::NegativeCount {
                    path: display.clone(),
                    line,
                    value,
                });
            }
            *slot = value as u64;
        }
        if !seen.insert((mesh, year)) {
            return Err(DataError::Duplicate {
                mesh: mesh.to_string(),
                year,
            });
        }
        out.push(LabelRecord {
            mesh,
            year,
            pop_0_14: counts[0],
            pop_15_64: counts[1],
            pop_65p: counts[2],
        });
    }
    Ok(out)
}

/// The model's label transform: per group, `log10(max(count, 1))`.
///
/// ```
/// use meshpop::dataset::{to_label_vector, LabelRecord};
/// use meshpop::mesh::MeshCode;
///
/// let r = LabelRecord {
///     mesh: MeshCode::parse("533945").unwrap(),
///     year: 2015,
///     pop_0_14: 1000,
///     pop_15_64: 10000,
///     pop_65p: 100,
/// };
/// assert_eq!(to_label_vector(&r), [3.0, 4.0, 2.0]);
/// ```
pub fn to_label_vector(r: &LabelRecord) -> [f32; 3] {
    let f = |c: u64| (c.max(1) as f64).log10() as f32;
    [f(r.pop_0_14), f(r.pop_15_64), f(r.pop_65p)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic mesh → split assignment, stratified over deciles of the
/// year-averaged total population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub decile_bounds: Vec<f64>,
    pub assignment: BTreeMap<MeshCode, Split>,
}

impl SplitManifest {
    pub fn meshes_in(&self, split: Split) -> Vec<MeshCode> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitManifest, DataError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// Assign every distinct mesh to train/val/test with an 8:1:1 ratio inside
/// each decile bucket of the averaged total population. A mesh present in
/// only one census year contributes its single total to the average.
/// Remainders go to train.
pub fn stratified_split(records: &[LabelRecord], seed: u64) -> Result<SplitManifest, DataError> {
    let mut totals: BTreeMap<MeshCode, (f64, u32)> = BTreeMap::new();
    for r in records {
        let e = totals.entry(r.mesh).or_insert((0.0, 0));
        e.0 += r.total() as f64;
        e.1 += 1;
    }
    let n = totals.len();
    if n < 10 {
        return Err(DataError::TooFewMeshes(n));
    }

    // Sort by averaged total, ties broken by mesh code so the bucketing is
    // reproducible regardless of input order.
    let mut meshes: Vec<(MeshCode, f64)> = totals
        .into_iter()
        .map(|(m, (sum, years))| (m, sum / years as f64))
        .collect();
    meshes.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));

    let bucket_start = |k: usize| k * n / 10;
    let decile_bounds: Vec<f64> = (1..10).map(|k| meshes[bucket_start(k)].1).collect();

    let mut rng = split_rng(seed);
    let mut assignment = BTreeMap::new();
    for k in 0..10 {
        let mut bucket: Vec<MeshCode> = meshes[bucket_start(k)..bucket_start(k + 1)]
            .iter()
            .map(|(m, _)| *m)
            .collect();
        bucket.shuffle(&mut rng);
        let tenth = bucket.len() / 10;
        for (i, mesh) in bucket.into_iter().enumerate() {
            let split = if i < tenth {
                Split::Val
            } else if i < 2 * tenth {
                Split::Test
            } else {
                Split::Train
            };
            assignment.insert(mesh, split);
        }
    }
    Ok(SplitManifest {
        seed,
        decile_bounds,
        assignment,
    })
}

/// A sample the batch iterator can load: a tile on disk plus its optional
/// transformed label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRef {
    pub mesh: MeshCode,
    pub year: i32,
    pub path: PathBuf,
    pub label: Option<[f32; 3]>,
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&epoch.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// Load one batch of tiles into a stacked (N, 12, S, S) tensor plus the
/// (N, 3) label matrix when labels are required. Files are read in
/// parallel; order follows `samples`.
pub fn load_batch(
    samples: &[&SampleRef],
    require_labels: bool,
) -> Result<(ndarray::Array4<f32>, Option<ndarray::Array2<f32>>), DataError> {
    use rayon::prelude::*;

    assert!(!samples.is_empty(), "empty batch");
    let tiles: Vec<crate::tile::TileSample> = samples
        .par_iter()
        .map(|s| {
            if !s.path.exists() {
                return Err(DataError::MissingTile {
                    mesh: s.mesh.to_string(),
                    year: s.year,
                    path: s.path.clone(),
                });
            }
            Ok(crate::tile::read_tile(&s.path)?)
        })
        .collect::<Result<_, _>>()?;

    let (c, h, w) = tiles[0].tensor.dim();
    let mut x = ndarray::Array4::zeros((samples.len(), c, h, w));
    for (i, (tile, sample)) in tiles.iter().zip(samples).enumerate() {
        if tile.tensor.dim() != (c, h, w) {
            return Err(DataError::Parse {
                path: sample.path.display().to_string(),
                line: 0,
                msg: format!("tile shape {:?} differs from {:?}", tile.tensor.dim(), (c, h, w)),
            });
        }
        x.index_axis_mut(ndarray::Axis(0), i).assign(&tile.tensor);
    }
    let labels = if require_labels {
        let mut y = ndarray::Array2::zeros((samples.len(), 3));
        for (i, s) in samples.iter().enumerate() {
            let label = s.label.ok_or_else(|| DataError::MissingLabel {
                mesh: s.mesh.to_string(),
                year: s.year,
            })?;
            for g in 0..3 {
                y[[i, g]] = label[g];
            }
        }
        Some(y)
    } else {
        None
    };
    Ok((x, labels))
}

/// Seeded permutation of `samples` for one epoch, chopped into consecutive
/// batches. The last batch may be short; `(seed, epoch)` fully determine
/// the order.
pub fn iterate_batches<'a>(
    samples: &'a [SampleRef],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Vec<&'a SampleRef>> + 'a {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    let chunks: Vec<Vec<&SampleRef>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| &samples[i]).collect())
        .collect();
    chunks.into_iter()
}
