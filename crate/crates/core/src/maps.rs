//! Per-location information maps.

use crate::error::{Error, Result};

/// Which of the three information quantities a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Total,
    Decision,
    Redundant,
}

impl MapKind {
    pub fn name(&self) -> &'static str {
        match self {
            MapKind::Total => "total",
            MapKind::Decision => "decision",
            MapKind::Redundant => "redundant",
        }
    }
}

/// Per-spatial-location information estimates (nats) for one sample.
#[derive(Debug, Clone)]
pub struct InfoMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub kind: MapKind,
    pub sample_id: usize,
}

impl InfoMap {
    pub fn new(values: Vec<f64>, height: usize, width: usize, kind: MapKind, sample_id: usize) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "info map {height}x{width} with {} values",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "info_map" });
        }
        Ok(InfoMap { values, height, width, kind, sample_id })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}
