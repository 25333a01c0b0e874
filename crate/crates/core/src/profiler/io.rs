use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LatencyProfile, OptimalPoints, Sample, SIGMA};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    layer_id: usize,
    channels: usize,
    median_ns: f64,
    iqr_ns: f64,
    flagged: bool,
}

#[derive(Serialize, Deserialize)]
struct PointRow {
    layer_id: usize,
    channel_count: usize,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    // Written explicitly so an empty table still carries its header.
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Writes `layer_id,channels,median_ns,iqr_ns,flagged`.
pub fn write_profiles_csv(path: &Path, profiles: &[LatencyProfile]) -> Result<()> {
    let rows = profiles.iter().flat_map(|p| {
        p.samples.iter().map(move |s| ProfileRow {
            layer_id: p.layer,
            channels: s.channels,
            median_ns: s.median_ns,
            iqr_ns: s.iqr_ns,
            flagged: s.flagged,
        })
    });
    write_rows(path, &["layer_id", "channels", "median_ns", "iqr_ns", "flagged"], rows)
}

/// Reads per-layer samples back. Input shapes are not part of the CSV and
/// come back zeroed; callers that need them keep the structured record.
pub fn read_profiles_csv(path: &Path) -> Result<Vec<LatencyProfile>> {
    let mut out: Vec<LatencyProfile> = Vec::new();
    for row in read_rows::<ProfileRow>(path)? {
        if out.last().map_or(true, |p| p.layer != row.layer_id) {
            if out.iter().any(|p| p.layer == row.layer_id) {
                return Err(Error::Format(format!("{}: layer {} is not contiguous", path.display(), row.layer_id)));
            }
            out.push(LatencyProfile {
                layer: row.layer_id,
                input: [0; 3],
                stride: 0,
                samples: Vec::new(),
            });
        }
        out.last_mut().unwrap().samples.push(Sample {
            channels: row.channels,
            median_ns: row.median_ns,
            iqr_ns: row.iqr_ns,
            flagged: row.flagged,
        });
    }
    for p in &out {
        p.validate()?;
    }
    Ok(out)
}

/// Writes `layer_id,channel_count`, one row per optimal point.
pub fn write_points_csv(path: &Path, points: &[OptimalPoints]) -> Result<()> {
    let rows = points.iter().flat_map(|p| {
        p.points.iter().map(move |&c| PointRow {
            layer_id: p.layer,
            channel_count: c,
        })
    });
    write_rows(path, &["layer_id", "channel_count"], rows)
}

/// Reads points for layers `0..layers`; layers without rows get no points.
pub fn read_points_csv(path: &Path, layers: usize) -> Result<Vec<OptimalPoints>> {
    let mut out: Vec<OptimalPoints> = (0..layers)
        .map(|layer| OptimalPoints {
            layer,
            points: Vec::new(),
            sigma: SIGMA,
        })
        .collect();
    for row in read_rows::<PointRow>(path)? {
        let p = out
            .get_mut(row.layer_id)
            .ok_or_else(|| Error::Format(format!("{}: layer {} out of range", path.display(), row.layer_id)))?;
        if row.channel_count == 0 || p.points.last().is_some_and(|&l| l >= row.channel_count) {
            return Err(Error::Format(format!(
                "{}: layer {} points must be positive and strictly increasing",
                path.display(),
                row.layer_id
            )));
        }
        p.points.push(row.channel_count);
    }
    Ok(out)
}
