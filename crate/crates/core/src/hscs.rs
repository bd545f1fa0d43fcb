//! Honest-score client selection.
//!
//! The server scores every client by how well its candidate model does on
//! the classes the current global model is worst at, keeps the top scorers
//! and averages only their gradients.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{ids, mean_of, AggregationInput, AggregationOutput, AGGREGATE_ID};
use crate::dataset::EvalSet;
use crate::error::{Error, Result};
use crate::model::{apply_update, evaluate_per_class, GradientVector, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorKind {
    /// Per-class accuracy of the global model.
    Performance,
    /// One minus the performance vector.
    Risk,
    /// Per-class accuracy of one client's candidate model.
    Accuracy,
}

/// A length-C vector over classes tagged with its meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVector {
    pub values: Vec<f64>,
    pub kind: VectorKind,
}

impl ClassVector {
    /// Rejects values outside `[0, 1]`.
    pub fn new(values: Vec<f64>, kind: VectorKind) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("class vector entry {v} outside [0, 1]")));
        }
        Ok(ClassVector { values, kind })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn expect_kind(v: &ClassVector, kind: VectorKind) -> Result<()> {
    if v.kind != kind {
        return Err(Error::invalid(format!("expected a {kind:?} vector, got {:?}", v.kind)));
    }
    Ok(())
}

/// `1 - perf`, componentwise.
pub fn risk_vector(perf: &ClassVector) -> Result<ClassVector> {
    expect_kind(perf, VectorKind::Performance)?;
    Ok(ClassVector {
        values: perf.values.iter().map(|p| 1.0 - p).collect(),
        kind: VectorKind::Risk,
    })
}

/// Per-class contributions `acc[c] × risk[c]`.
pub fn honest_score_terms(acc: &ClassVector, risk: &ClassVector) -> Result<Vec<f64>> {
    expect_kind(acc, VectorKind::Accuracy)?;
    expect_kind(risk, VectorKind::Risk)?;
    if acc.len() != risk.len() {
        return Err(Error::invalid(format!(
            "accuracy vector has {} classes, risk vector {}",
            acc.len(),
            risk.len()
        )));
    }
    Ok(acc.values.iter().zip(&risk.values).map(|(a, r)| a * r).collect())
}

/// Dot product of a client's accuracy vector with the risk vector.
pub fn honest_score(acc: &ClassVector, risk: &ClassVector) -> Result<f64> {
    Ok(honest_score_terms(acc, risk)?.iter().sum())
}

/// Honest scores of one round and the clients that made the cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestScoreBoard {
    /// Ascending client ids; `scores[k]` belongs to `client_ids[k]`.
    pub client_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub selected: BTreeSet<usize>,
    pub select_count: usize,
}

impl HonestScoreBoard {
    pub fn score_of(&self, client: usize) -> Option<f64> {
        self.client_ids
            .iter()
            .position(|&c| c == client)
            .map(|k| self.scores[k])
    }
}

/// Keeps the `select_count` highest-scoring clients; on equal scores the
/// lower client id wins.
pub fn select_clients(scores: &[(usize, f64)], select_count: usize) -> Result<HonestScoreBoard> {
    if select_count > scores.len() {
        return Err(Error::invalid(format!(
            "cannot select {select_count} of {} clients",
            scores.len()
        )));
    }
    if let Some((id, s)) = scores.iter().find(|(_, s)| s.is_nan()) {
        return Err(Error::invalid(format!("client {id} has a NaN honest score {s}")));
    }
    let mut by_id = scores.to_vec();
    by_id.sort_by_key(|&(id, _)| id);
    if by_id.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("duplicate client id in honest scores"));
    }
    let mut ranked = by_id.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(HonestScoreBoard {
        client_ids: by_id.iter().map(|&(id, _)| id).collect(),
        scores: by_id.iter().map(|&(_, s)| s).collect(),
        selected: ranked[..select_count].iter().map(|&(id, _)| id).collect(),
        select_count,
    })
}

/// Everything the server computed while selecting, for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBoard {
    pub performance: ClassVector,
    pub risk: ClassVector,
    /// One accuracy vector per client, in ascending client id order.
    pub accuracy: Vec<ClassVector>,
    pub scores: HonestScoreBoard,
}

impl SelectionBoard {
    /// `acc[c] × risk[c]` for the client at position `k`.
    pub fn terms(&self, k: usize) -> Vec<f64> {
        self.accuracy[k]
            .values
            .iter()
            .zip(&self.risk.values)
            .map(|(a, r)| a * r)
            .collect()
    }
}

fn class_vector(state: &ModelState, eval: &EvalSet, kind: VectorKind) -> Result<ClassVector> {
    let acc = evaluate_per_class(state, &eval.data)?;
    Ok(ClassVector {
        values: acc.accuracy,
        kind,
    })
}

/// Scores every client on the evaluation set against the global model's risk
/// vector, keeps the top `select_count` and returns the plain mean of their
/// gradients. A client's candidate model is `global + g_i`.
pub fn hscs_aggregate(
    input: &AggregationInput,
    global: &ModelState,
    eval: &EvalSet,
    select_count: usize,
) -> Result<(AggregationOutput, SelectionBoard)> {
    let sorted = input.sorted()?;
    if eval.data.is_empty() {
        return Err(Error::invalid("honest scoring needs a non-empty evaluation set"));
    }
    if select_count == 0 || select_count > sorted.len() {
        return Err(Error::invalid(format!(
            "select count {select_count} must be in 1..={}",
            sorted.len()
        )));
    }
    if sorted[0].len() != global.parameter_count() {
        return Err(Error::invalid(format!(
            "gradients have {} values, model has {}",
            sorted[0].len(),
            global.parameter_count()
        )));
    }

    let performance = class_vector(global, eval, VectorKind::Performance)?;
    let risk = risk_vector(&performance)?;
    let accuracy = sorted
        .par_iter()
        .map(|g| {
            let candidate = apply_update(global, g, 1.0)?;
            class_vector(&candidate, eval, VectorKind::Accuracy)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = sorted
        .iter()
        .zip(&accuracy)
        .map(|(g, acc)| Ok((g.client_id, honest_score(acc, &risk)?)))
        .collect::<Result<Vec<_>>>()?;
    let board = select_clients(&scores, select_count)?;

    let chosen: Vec<&GradientVector> = sorted
        .iter()
        .copied()
        .filter(|g| board.selected.contains(&g.client_id))
        .collect();
    let weight = 1.0 / select_count as f64;
    let output = AggregationOutput {
        aggregate: GradientVector::new(AGGREGATE_ID, mean_of(&chosen)),
        client_ids: ids(&sorted),
        weights: sorted
            .iter()
            .map(|g| if board.selected.contains(&g.client_id) { weight } else { 0.0 })
            .collect(),
        selected: board.selected.clone(),
        weights_informational: false,
        fallback_to_server: false,
    };
    Ok((
        output,
        SelectionBoard {
            performance,
            risk,
            accuracy,
            scores: board,
        },
    ))
}
