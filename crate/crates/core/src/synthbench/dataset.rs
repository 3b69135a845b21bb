//! JSON Lines datasets, one candidate set per line:
//!
//! ```text
//! {"image_id": "...", "V": 11,
//!  "points": [{"x_mm": .., "y_mm": .., "score": .., "is_tp": true, "gt_index": 3}, ..],
//!  "discs": [{"x_mm": .., "y_mm": ..}, ..]}
//! ```
//!
//! `discs` holds the true position of every disc, including ones without a
//! detection. It may be omitted, in which case discs are taken from the TP
//! points.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{DiscCandidate, Point2D};
use crate::lookonce::{CandidateSet, GroundTruth, PointTruth};

#[derive(Debug, Serialize, Deserialize)]
struct PointRecord {
    x_mm: f64,
    y_mm: f64,
    #[serde(default = "default_score")]
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    is_tp: Option<bool>,
    #[serde(default)]
    gt_index: Option<usize>,
}

fn default_score() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
struct DiscRecord {
    x_mm: f64,
    y_mm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseRecord {
    image_id: String,
    #[serde(rename = "V")]
    v: usize,
    points: Vec<PointRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    discs: Vec<DiscRecord>,
}

fn to_record(cs: &CandidateSet) -> CaseRecord {
    let flags = cs.truth.as_ref().map(|t| &t.flags);
    let points = cs
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| PointRecord {
            x_mm: p.position.x,
            y_mm: p.position.y,
            score: p.score,
            is_tp: flags.map(|f| f[i].is_tp),
            gt_index: flags.and_then(|f| f[i].gt_index),
        })
        .collect();
    let discs: Vec<DiscRecord> = cs
        .truth
        .as_ref()
        .map(|t| t.discs.iter().map(|d| DiscRecord { x_mm: d.x, y_mm: d.y }).collect())
        .unwrap_or_default();
    CaseRecord { image_id: cs.image_id.clone(), v: discs.len(), points, discs }
}

fn from_record(rec: CaseRecord) -> Result<CandidateSet> {
    let labelled = rec.points.iter().any(|p| p.is_tp.is_some());
    let points: Vec<DiscCandidate> =
        rec.points.iter().map(|p| DiscCandidate::new(Point2D::new(p.x_mm, p.y_mm), p.score)).collect();
    let truth = if labelled {
        let flags: Vec<PointTruth> = rec
            .points
            .iter()
            .map(|p| {
                let is_tp = p.is_tp.ok_or_else(|| Error::Config("is_tp missing on some points".into()))?;
                Ok(PointTruth { is_tp, gt_index: if is_tp { p.gt_index } else { None } })
            })
            .collect::<Result<_>>()?;
        let discs = if rec.discs.is_empty() {
            let mut discs = vec![None; rec.v];
            for (p, f) in points.iter().zip(&flags) {
                if let Some(i) = f.gt_index {
                    let slot = discs
                        .get_mut(i)
                        .ok_or_else(|| Error::Config(format!("gt_index {i} out of range for V = {}", rec.v)))?;
                    slot.get_or_insert(p.position);
                }
            }
            discs
                .into_iter()
                .enumerate()
                .map(|(i, d)| d.ok_or_else(|| Error::Config(format!("no position for disc {i}; add `discs`"))))
                .collect::<Result<_>>()?
        } else {
            if rec.discs.len() != rec.v {
                return Err(Error::Config(format!("V = {} but {} discs listed", rec.v, rec.discs.len())));
            }
            rec.discs.iter().map(|d| Point2D::new(d.x_mm, d.y_mm)).collect()
        };
        Some(GroundTruth { flags, discs })
    } else {
        None
    };
    let cs = CandidateSet { image_id: rec.image_id, points, truth };
    cs.validate()?;
    Ok(cs)
}

/// One JSON object per set, newline terminated.
pub fn write_jsonl(sets: &[CandidateSet], out: &mut impl Write) -> Result<()> {
    for cs in sets {
        serde_json::to_writer(&mut *out, &to_record(cs))?;
        out.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(sets: &[CandidateSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    write_jsonl(sets, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a dataset; blank lines are skipped, errors carry the 1-based line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: CaseRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        sets.push(from_record(rec).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{generate_dataset, SynthConfig};

    #[test]
    fn round_trip_preserves_sets() {
        let cfg = SynthConfig { drop_tp_probability: 0.2, fp_count: 3, ..Default::default() };
        let sets = generate_dataset(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/data.jsonl");
        save_jsonl(&sets, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), sets);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"image_id":"a","V":1,"points":[{"x_mm":1,"y_mm":2,"score":0.5,"is_tp":true,"gt_index":0}]}"#;
        fs::write(&path, format!("{good}\n\n{{not json\n")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn discs_default_to_tp_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let line = r#"{"image_id":"a","V":2,"points":[{"x_mm":1,"y_mm":2,"is_tp":true,"gt_index":1},{"x_mm":0,"y_mm":0,"is_tp":true,"gt_index":0},{"x_mm":50,"y_mm":9,"is_tp":false,"gt_index":null}]}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        let cs = &load_jsonl(&path).unwrap()[0];
        let t = cs.truth.as_ref().unwrap();
        assert_eq!(t.discs, vec![Point2D::new(0.0, 0.0), Point2D::new(1.0, 2.0)]);
        assert_eq!(cs.points[2].score, 1.0);
    }
}
