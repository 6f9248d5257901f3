use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError, ModelInput};
use crate::confidence::{decode_confidence, reliability};
use crate::dsl::{tokens_match, DialogueExample};

/// ECE and accuracy of greedy decodes at each temperature tried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureCurve {
    pub points: Vec<TemperaturePoint>,
    pub best: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePoint {
    pub temperature: f64,
    pub ece: f64,
    pub accuracy: f64,
}

/// `(sequence confidence, exact match)` of the greedy decode of every
/// example, in input order. Unterminated decodes count as incorrect.
pub fn confidence_pairs(model: &Model, examples: &[DialogueExample], max_len: usize) -> Vec<(f64, bool)> {
    examples
        .par_iter()
        .map(|ex| {
            let d = model.decode_greedy(&ModelInput::parse(ex), max_len);
            let correct = d.terminated && tokens_match(&d.tokens, ex.gold.tokens());
            (decode_confidence(&d), correct)
        })
        .collect()
}

/// Picks the grid temperature with the lowest expected calibration error
/// on `examples`; ties keep the earlier grid point.
pub fn tune_temperature(
    model: &Model,
    examples: &[DialogueExample],
    grid: &[f64],
    n_bins: usize,
    max_len: usize,
) -> Result<TemperatureCurve, ModelError> {
    if grid.is_empty() {
        return Err(ModelError::InvalidParameter("empty temperature grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let m = model.with_temperature(t)?;
        let pairs = confidence_pairs(&m, examples, max_len);
        let report = reliability(&pairs, n_bins)
            .map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
        let hits = pairs.iter().filter(|(_, c)| *c).count();
        points.push(TemperaturePoint {
            temperature: t,
            ece: report.ece,
            accuracy: hits as f64 / pairs.len() as f64,
        });
    }
    let best = points
        .iter()
        .fold(None::<TemperaturePoint>, |acc, p| match acc {
            Some(a) if a.ece <= p.ece => Some(a),
            _ => Some(*p),
        })
        .map(|p| p.temperature)
        .expect("grid is non-empty");
    Ok(TemperatureCurve { points, best })
}
