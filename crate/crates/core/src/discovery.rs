//! Snapping pruned layer widths to latency-optimal channel counts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::profiler::{NetworkProfile, OptimalPoints};

/// The point nearest `width`, ties going to the larger point. No points
/// leaves the width unchanged.
pub fn nearest_point(width: usize, points: &[usize]) -> Result<usize> {
    if width < 1 {
        return Err(Error::Param("width must be at least 1".into()));
    }
    Ok(points
        .iter()
        .copied()
        .min_by(|&a, &b| a.abs_diff(width).cmp(&b.abs_diff(width)).then(b.cmp(&a)))
        .unwrap_or(width))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OptimalPoint,
    FisherFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    pub teacher: usize,
    pub fisher: usize,
    pub chosen: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerChoice>,
}

impl StudentSpec {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        s.spec.validate()?;
        Ok(s)
    }
}

/// Snaps every prunable width of `fisher` to its layer's nearest optimal
/// point; the rest of the architecture comes from `teacher`.
pub fn discover(teacher: &NetworkSpec, fisher: &NetworkSpec, points: &[OptimalPoints]) -> Result<StudentSpec> {
    if !fisher.is_reduction_of(teacher) {
        return Err(Error::Spec("fisher spec is not a width reduction of the teacher".into()));
    }
    let (tw, fw) = (teacher.widths(), fisher.widths());
    if points.len() != tw.len() || points.iter().enumerate().any(|(i, p)| p.layer != i) {
        return Err(Error::Spec(format!(
            "optimal points cover {} layers; the network has {}",
            points.len(),
            tw.len()
        )));
    }
    let mut layers = Vec::with_capacity(tw.len());
    for (l, ((&t, &f), p)) in tw.iter().zip(&fw).zip(points).enumerate() {
        if let Some(&bad) = p.points.iter().find(|&&c| c < 1 || c > t) {
            return Err(Error::Spec(format!("layer {l}: point {bad} outside 1..={t}")));
        }
        layers.push(LayerChoice {
            layer: l,
            teacher: t,
            fisher: f,
            chosen: nearest_point(f, &p.points)?,
            origin: if p.points.is_empty() { Origin::FisherFallback } else { Origin::OptimalPoint },
        });
    }
    let widths: Vec<usize> = layers.iter().map(|c| c.chosen).collect();
    Ok(StudentSpec {
        spec: teacher.with_widths(&widths)?,
        layers,
    })
}

/// Predicted latency: each prunable layer's profiled median at the spec's
/// width, plus the profiled cost of everything else.
pub fn estimate_latency(spec: &NetworkSpec, profile: &NetworkProfile) -> Result<f64> {
    let widths = spec.widths();
    if profile.layers.is_empty() || profile.layers.len() != widths.len() {
        return Err(Error::Param(format!(
            "profile covers {} layers; the spec has {}",
            profile.layers.len(),
            widths.len()
        )));
    }
    let mut total = profile.fixed_ns;
    for (p, &w) in profile.layers.iter().zip(&widths) {
        total += p.latency_at(w)?;
    }
    Ok(total)
}
