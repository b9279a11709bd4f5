//! Back-transform of model outputs into estimated population counts and the
//! aged-population rate, plus the predictions CSV.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRef;
use crate::mesh::MeshCode;
use crate::model::Model;
use crate::train::{predict_all, TrainError};

pub const PREDICTIONS_CSV_HEADER: &str =
    "mesh_code,year,est_pop_0_14,est_pop_15_64,est_pop_65plus,aged_rate";

/// One mesh cell's estimated demographic composition. Counts are
/// 10^(model output) per group, kept as floats; `aged_rate` is the 65+
/// estimate over the three-group sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mesh: MeshCode,
    pub year: i32,
    pub est_pop_0_14: f32,
    pub est_pop_15_64: f32,
    pub est_pop_65p: f32,
    pub aged_rate: f32,
}

/// Convert eval-mode outputs (log10 counts, >= 0) into records aligned with
/// `samples`.
pub fn predictions_from_outputs(
    samples: &[SampleRef],
    outputs: &Array2<f32>,
) -> Vec<PredictionRecord> {
    assert_eq!(samples.len(), outputs.nrows());
    samples
        .iter()
        .zip(outputs.rows())
        .map(|(s, row)| {
            let count = |g: usize| 10f64.powf(row[g] as f64) as f32;
            let (a, b, c) = (count(0), count(1), count(2));
            let sum = a as f64 + b as f64 + c as f64;
            // outputs >= 0 force counts >= 1, so the sum is positive
            let aged_rate = if sum > 0.0 { (c as f64 / sum) as f32 } else { f32::NAN };
            PredictionRecord {
                mesh: s.mesh,
                year: s.year,
                est_pop_0_14: a,
                est_pop_15_64: b,
                est_pop_65p: c,
                aged_rate,
            }
        })
        .collect()
}

/// Deterministic eval-mode inference over one year's tiles.
pub fn predict_year(
    model: &Model<f32>,
    samples: &[SampleRef],
    batch_size: usize,
) -> Result<Vec<PredictionRecord>, TrainError> {
    let outputs = predict_all(model, samples, batch_size)?;
    Ok(predictions_from_outputs(samples, &outputs))
}

/// Write the predictions CSV. Float formatting round-trips f32 exactly.
pub fn write_predictions_csv(records: &[PredictionRecord], path: &Path) -> Result<(), std::io::Error> {
    let mut out = String::from(PREDICTIONS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mesh, r.year, r.est_pop_0_14, r.est_pop_15_64, r.est_pop_65p, r.aged_rate
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>, String> {
    let content = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = content.lines();
    match lines.next() {
        Some(h) if h == PREDICTIONS_CSV_HEADER => {}
        other => return Err(format!("bad predictions header {other:?}")),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format!("line {}: expected 6 fields", i + 2));
        }
        let parse_f = |s: &str| s.parse::<f32>().map_err(|e| format!("line {}: {e}", i + 2));
        records.push(PredictionRecord {
            mesh: MeshCode::parse(fields[0]).map_err(|e| e.to_string())?,
            year: fields[1].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
            est_pop_0_14: parse_f(fields[2])?,
            est_pop_15_64: parse_f(fields[3])?,
            est_pop_65p: parse_f(fields[4])?,
            aged_rate: parse_f(fields[5])?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::path::PathBuf;

    fn sample(code: &str) -> SampleRef {
        SampleRef {
            mesh: MeshCode::parse(code).unwrap(),
            year: 2022,
            path: PathBuf::from("x.tile"),
            label: None,
        }
    }

    #[test]
    fn back_transform_powers_of_ten() {
        let samples = vec![sample("533945")];
        let out = array![[2.0f32, 3.0, 2.0]];
        let recs = predictions_from_outputs(&samples, &out);
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert!((r.est_pop_0_14 - 100.0).abs() < 1e-3);
        assert!((r.est_pop_15_64 - 1000.0).abs() < 1e-2);
        assert!((r.est_pop_65p - 100.0).abs() < 1e-3);
        assert!((r.aged_rate - 100.0 / 1200.0).abs() < 1e-6);
    }

    #[test]
    fn zero_log_counts_give_unit_counts() {
        let samples = vec![sample("533945")];
        let out = array![[0.0f32, 0.0, 0.0]];
        let r = &predictions_from_outputs(&samples, &out)[0];
        assert_eq!(r.est_pop_0_14, 1.0);
        assert!((r.aged_rate - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn back_transform_is_monotone() {
        let samples = vec![sample("533945"), sample("533946")];
        let out = array![[1.0f32, 2.0, 1.5], [1.1, 2.1, 1.6]];
        let recs = predictions_from_outputs(&samples, &out);
        assert!(recs[1].est_pop_0_14 > recs[0].est_pop_0_14);
        assert!(recs[1].est_pop_15_64 > recs[0].est_pop_15_64);
        assert!(recs[1].est_pop_65p > recs[0].est_pop_65p);
    }

    #[test]
    fn aged_rate_in_unit_interval() {
        let samples: Vec<SampleRef> = (0..5).map(|i| sample(&format!("53394{i}"))).collect();
        let out = array![
            [0.0f32, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [0.0, 0.0, 3.0],
            [1.0, 2.0, 3.0],
            [4.0, 4.0, 4.0]
        ];
        for r in predictions_from_outputs(&samples, &out) {
            assert!((0.0..=1.0).contains(&r.aged_rate), "{}", r.aged_rate);
        }
    }

    #[test]
    fn csv_round_trip_lossless() {
        let samples = vec![sample("533945"), sample("533946")];
        let out = array![[0.123f32, 2.71, 1.41], [3.3333, 0.0001, 2.0]];
        let recs = predictions_from_outputs(&samples, &out);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_predictions_csv(&recs, &path).unwrap();
        let back = read_predictions_csv(&path).unwrap();
        assert_eq!(recs, back);
    }
}
