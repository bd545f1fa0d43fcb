//! Aggregation rules over one round of client gradients.
//!
//! Every rule first orders gradients by client id, so results do not depend
//! on the order in which updates arrived and sums are always taken in the
//! same order.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientVector;
use crate::numerics::{dot, norm, squared_distance};

/// Client id carried by aggregated (server-side) vectors.
pub const AGGREGATE_ID: usize = usize::MAX;

/// Arguments of an aggregation rule.
#[derive(Debug, Clone, Copy)]
pub struct AggregationInput<'a> {
    pub gradients: &'a [GradientVector],
    /// Root-dataset gradient, used by FLTrust only.
    pub server_gradient: Option<&'a GradientVector>,
    /// Number of adversaries the server assumes.
    pub byzantine_count: usize,
}

impl<'a> AggregationInput<'a> {
    pub fn new(gradients: &'a [GradientVector], byzantine_count: usize) -> Self {
        AggregationInput {
            gradients,
            server_gradient: None,
            byzantine_count,
        }
    }

    pub fn with_server_gradient(mut self, server: &'a GradientVector) -> Self {
        self.server_gradient = Some(server);
        self
    }

    /// Validates shapes and returns the gradients sorted by client id.
    pub(crate) fn sorted(&self) -> Result<Vec<&'a GradientVector>> {
        let Some(first) = self.gradients.first() else {
            return Err(Error::invalid("aggregation needs at least one gradient"));
        };
        let dim = first.len();
        if let Some(g) = self.gradients.iter().find(|g| g.len() != dim) {
            return Err(Error::invalid(format!(
                "client {} sent {} values, expected {dim}",
                g.client_id,
                g.len()
            )));
        }
        if let Some(g) = self.gradients.iter().find(|g| g.values.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!(
                "client {} sent non-finite values",
                g.client_id
            )));
        }
        let n = self.gradients.len();
        if 2 * self.byzantine_count >= n && self.byzantine_count > 0 {
            return Err(Error::invalid(format!(
                "assumed adversary count {} must be below half of {n} clients",
                self.byzantine_count
            )));
        }
        let mut sorted: Vec<&GradientVector> = self.gradients.iter().collect();
        sorted.sort_by_key(|g| g.client_id);
        if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
            return Err(Error::invalid("duplicate client id in aggregation input"));
        }
        Ok(sorted)
    }
}

/// Result of an aggregation rule.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutput {
    pub aggregate: GradientVector,
    /// Client ids in ascending order; `weights[k]` belongs to `client_ids[k]`.
    pub client_ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub selected: BTreeSet<usize>,
    /// The rule is not a convex combination of the inputs (median, trimmed
    /// mean); `weights` only records who took part.
    pub weights_informational: bool,
    /// FLTrust found no client with positive trust and returned the server
    /// gradient; all client weights are zero.
    pub fallback_to_server: bool,
}

impl AggregationOutput {
    pub fn weight_of(&self, client: usize) -> Option<f64> {
        self.client_ids
            .iter()
            .position(|&c| c == client)
            .map(|k| self.weights[k])
    }
}

pub(crate) fn mean_of(gradients: &[&GradientVector]) -> Vec<f64> {
    let dim = gradients[0].len();
    let mut sum = vec![0.0; dim];
    for g in gradients {
        for (s, v) in sum.iter_mut().zip(&g.values) {
            *s += v;
        }
    }
    let n = gradients.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

pub(crate) fn ids(sorted: &[&GradientVector]) -> Vec<usize> {
    sorted.iter().map(|g| g.client_id).collect()
}

/// Unweighted mean of all gradients.
pub fn fed_avg(input: &AggregationInput) -> Result<AggregationOutput> {
    let sorted = input.sorted()?;
    let n = sorted.len();
    Ok(AggregationOutput {
        aggregate: GradientVector::new(AGGREGATE_ID, mean_of(&sorted)),
        client_ids: ids(&sorted),
        weights: vec![1.0 / n as f64; n],
        selected: sorted.iter().map(|g| g.client_id).collect(),
        weights_informational: false,
        fallback_to_server: false,
    })
}

/// Krum scores of the sorted gradients: the sum of squared distances to the
/// `n - f - 2` nearest other gradients.
pub fn krum_scores(sorted: &[&GradientVector], byzantine_count: usize) -> Vec<f64> {
    let n = sorted.len();
    let neighbours = n - byzantine_count - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(&sorted[i].values, &sorted[j].values);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..neighbours].iter().sum()
        })
        .collect()
}

/// Selects the single gradient with the lowest Krum score (lowest client id
/// on ties).
pub fn krum(input: &AggregationInput) -> Result<AggregationOutput> {
    let sorted = input.sorted()?;
    let n = sorted.len();
    let f = input.byzantine_count;
    if n < f + 3 {
        return Err(Error::invalid(format!(
            "Krum requires n >= f + 3, got n = {n}, f = {f}"
        )));
    }
    let scores = krum_scores(&sorted, f);
    let mut best = 0;
    for (k, s) in scores.iter().enumerate().skip(1) {
        if *s < scores[best] {
            best = k;
        }
    }
    let mut weights = vec![0.0; n];
    weights[best] = 1.0;
    Ok(AggregationOutput {
        aggregate: GradientVector::new(AGGREGATE_ID, sorted[best].values.clone()),
        client_ids: ids(&sorted),
        weights,
        selected: [sorted[best].client_id].into(),
        weights_informational: false,
        fallback_to_server: false,
    })
}

/// Median of each coordinate (mean of the two middle values for even n).
pub fn coordinate_median(input: &AggregationInput) -> Result<AggregationOutput> {
    let sorted = input.sorted()?;
    let n = sorted.len();
    let dim = sorted[0].len();
    let mut column = vec![0.0; n];
    let aggregate = (0..dim)
        .map(|j| {
            for (slot, g) in column.iter_mut().zip(&sorted) {
                *slot = g.values[j];
            }
            column.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        })
        .collect();
    Ok(AggregationOutput {
        aggregate: GradientVector::new(AGGREGATE_ID, aggregate),
        client_ids: ids(&sorted),
        weights: vec![1.0 / n as f64; n],
        selected: sorted.iter().map(|g| g.client_id).collect(),
        weights_informational: true,
        fallback_to_server: false,
    })
}

/// Per coordinate, drops the `floor(trim_fraction × n)` largest and smallest
/// values and averages the rest. Kept values are summed in client order, so a
/// zero trim reproduces [`fed_avg`] bit for bit.
pub fn trimmed_mean(input: &AggregationInput, trim_fraction: f64) -> Result<AggregationOutput> {
    let sorted = input.sorted()?;
    let n = sorted.len();
    if !(0.0..=1.0).contains(&trim_fraction) {
        return Err(Error::invalid(format!(
            "trim fraction {trim_fraction} outside [0, 1]"
        )));
    }
    let k = ((trim_fraction * n as f64) + 1e-9).floor() as usize;
    if 2 * k >= n {
        return Err(Error::invalid(format!(
            "trimming {k} values from each end leaves nothing of {n}"
        )));
    }
    let dim = sorted[0].len();
    let kept = (n - 2 * k) as f64;
    let mut ranked: Vec<(f64, usize)> = vec![(0.0, 0); n];
    let mut keep = vec![true; n];
    let aggregate = (0..dim)
        .map(|j| {
            if k == 0 {
                return sorted.iter().map(|g| g.values[j]).sum::<f64>() / kept;
            }
            for (pos, (slot, g)) in ranked.iter_mut().zip(&sorted).enumerate() {
                *slot = (g.values[j], pos);
            }
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keep.iter_mut().for_each(|x| *x = true);
            for &(_, pos) in ranked[..k].iter().chain(&ranked[n - k..]) {
                keep[pos] = false;
            }
            sorted
                .iter()
                .zip(&keep)
                .filter(|(_, &kp)| kp)
                .map(|(g, _)| g.values[j])
                .sum::<f64>()
                / kept
        })
        .collect();
    Ok(AggregationOutput {
        aggregate: GradientVector::new(AGGREGATE_ID, aggregate),
        client_ids: ids(&sorted),
        weights: vec![1.0 / n as f64; n],
        selected: sorted.iter().map(|g| g.client_id).collect(),
        weights_informational: k > 0,
        fallback_to_server: false,
    })
}

/// FLTrust: trust = ReLU(cosine to the server gradient); client gradients are
/// rescaled to the server gradient's norm and averaged with trust weights.
pub fn fl_trust(input: &AggregationInput) -> Result<AggregationOutput> {
    let sorted = input.sorted()?;
    let server = input
        .server_gradient
        .ok_or_else(|| Error::invalid("FLTrust requires a server gradient"))?;
    let dim = sorted[0].len();
    if server.len() != dim {
        return Err(Error::invalid(format!(
            "server gradient has {} values, expected {dim}",
            server.len()
        )));
    }
    let server_norm = norm(&server.values);
    if !(server_norm > 0.0) || !server_norm.is_finite() {
        return Err(Error::invalid("FLTrust server gradient is zero or non-finite"));
    }

    let mut trust = Vec::with_capacity(sorted.len());
    let mut scale = Vec::with_capacity(sorted.len());
    for g in &sorted {
        let gn = norm(&g.values);
        if gn > 0.0 {
            let cosine = dot(&g.values, &server.values) / (gn * server_norm);
            trust.push(cosine.max(0.0));
            scale.push(server_norm / gn);
        } else {
            trust.push(0.0);
            scale.push(0.0);
        }
    }
    let total: f64 = trust.iter().sum();
    if total <= 0.0 {
        return Ok(AggregationOutput {
            aggregate: GradientVector::new(AGGREGATE_ID, server.values.clone()),
            client_ids: ids(&sorted),
            weights: vec![0.0; sorted.len()],
            selected: BTreeSet::new(),
            weights_informational: false,
            fallback_to_server: true,
        });
    }

    let mut aggregate = vec![0.0; dim];
    for ((g, &t), &s) in sorted.iter().zip(&trust).zip(&scale) {
        if t == 0.0 {
            continue;
        }
        let coef = t * s;
        for (a, v) in aggregate.iter_mut().zip(&g.values) {
            *a += coef * v;
        }
    }
    aggregate.iter_mut().for_each(|a| *a /= total);
    let weights: Vec<f64> = trust.iter().map(|t| t / total).collect();
    let selected = sorted
        .iter()
        .zip(&trust)
        .filter(|(_, &t)| t > 0.0)
        .map(|(g, _)| g.client_id)
        .collect();
    Ok(AggregationOutput {
        aggregate: GradientVector::new(AGGREGATE_ID, aggregate),
        client_ids: ids(&sorted),
        weights,
        selected,
        weights_informational: false,
        fallback_to_server: false,
    })
}

/// Aggregation rule names accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    #[serde(rename = "fedavg")]
    FedAvg,
    Krum,
    Median,
    TrimmedMean,
    #[serde(rename = "fltrust")]
    FlTrust,
    Hscsfl,
}

impl RuleName {
    pub const ALL: [RuleName; 6] = [
        RuleName::FedAvg,
        RuleName::Krum,
        RuleName::Median,
        RuleName::TrimmedMean,
        RuleName::FlTrust,
        RuleName::Hscsfl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleName::FedAvg => "fedavg",
            RuleName::Krum => "krum",
            RuleName::Median => "median",
            RuleName::TrimmedMean => "trimmed_mean",
            RuleName::FlTrust => "fltrust",
            RuleName::Hscsfl => "hscsfl",
        }
    }
}

impl fmt::Display for RuleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleName::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown aggregation rule {s:?} (expected fedavg | krum | median | trimmed_mean | fltrust | hscsfl)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(rows: &[&[f64]]) -> Vec<GradientVector> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| GradientVector::new(i, r.to_vec()))
            .collect()
    }

    #[test]
    fn fed_avg_examples() {
        let g = grads(&[&[1.0, 3.0], &[3.0, 5.0]]);
        let out = fed_avg(&AggregationInput::new(&g, 0)).unwrap();
        assert_eq!(out.aggregate.values, vec![2.0, 4.0]);
        assert_eq!(out.weights, vec![0.5, 0.5]);

        let one = grads(&[&[0.3, -0.7]]);
        assert_eq!(fed_avg(&AggregationInput::new(&one, 0)).unwrap().aggregate.values, vec![0.3, -0.7]);

        let same = grads(&[&[0.1, 0.2], &[0.1, 0.2], &[0.1, 0.2]]);
        let out = fed_avg(&AggregationInput::new(&same, 0)).unwrap();
        for (a, b) in out.aggregate.values.iter().zip([0.1, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(fed_avg(&AggregationInput::new(&[], 0)).is_err());
    }

    #[test]
    fn input_validation() {
        let bad = vec![GradientVector::new(0, vec![1.0]), GradientVector::new(1, vec![1.0, 2.0])];
        assert!(fed_avg(&AggregationInput::new(&bad, 0)).is_err());
        let dup = vec![GradientVector::new(0, vec![1.0]), GradientVector::new(0, vec![2.0])];
        assert!(fed_avg(&AggregationInput::new(&dup, 0)).is_err());
        let g = grads(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        assert!(fed_avg(&AggregationInput::new(&g, 2)).is_err());
        let nan = grads(&[&[f64::NAN]]);
        assert!(fed_avg(&AggregationInput::new(&nan, 0)).is_err());
    }

    #[test]
    fn krum_ignores_outlier() {
        let g = grads(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[50.0, -50.0]]);
        let out = krum(&AggregationInput::new(&g, 1)).unwrap();
        assert_eq!(out.selected, [0].into());
        assert_eq!(out.weights, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(out.aggregate.values, vec![1.0, 1.0]);
    }

    #[test]
    fn krum_identical_inputs_pick_client_zero() {
        let g = grads(&[&[2.0], &[2.0], &[2.0], &[2.0]]);
        let out = krum(&AggregationInput::new(&g, 1)).unwrap();
        assert_eq!(out.selected, [0].into());
    }

    #[test]
    fn krum_requires_enough_clients() {
        let g = grads(&[&[1.0], &[2.0], &[3.0]]);
        let err = krum(&AggregationInput::new(&g, 1)).unwrap_err();
        assert!(err.to_string().contains("n >= f + 3"));
    }

    #[test]
    fn median_examples() {
        let g = grads(&[&[1.0], &[3.0], &[2.0]]);
        let out = coordinate_median(&AggregationInput::new(&g, 0)).unwrap();
        assert_eq!(out.aggregate.values, vec![2.0]);
        assert!(out.weights_informational);
        let g = grads(&[&[4.0], &[1.0], &[3.0], &[2.0]]);
        assert_eq!(coordinate_median(&AggregationInput::new(&g, 0)).unwrap().aggregate.values, vec![2.5]);
    }

    #[test]
    fn trimmed_mean_examples() {
        let g = grads(&[&[1.0], &[2.0], &[3.0], &[4.0], &[10.0]]);
        let out = trimmed_mean(&AggregationInput::new(&g, 1), 0.2).unwrap();
        assert_eq!(out.aggregate.values, vec![3.0]);

        let g = grads(&[&[0.1, 0.7], &[0.2, -0.3], &[0.33, 0.01]]);
        let input = AggregationInput::new(&g, 0);
        assert_eq!(trimmed_mean(&input, 0.0).unwrap().aggregate, fed_avg(&input).unwrap().aggregate);
        assert!(trimmed_mean(&input, 0.7).is_err());
    }

    #[test]
    fn fl_trust_clips_opposed_client() {
        let g = grads(&[&[2.0, 0.0], &[-1.0, 0.0]]);
        let server = GradientVector::new(AGGREGATE_ID, vec![1.0, 0.0]);
        let out = fl_trust(&AggregationInput::new(&g, 0).with_server_gradient(&server)).unwrap();
        assert_eq!(out.aggregate.values, vec![1.0, 0.0]);
        assert_eq!(out.weights, vec![1.0, 0.0]);
        assert_eq!(out.selected, [0].into());
    }

    #[test]
    fn fl_trust_equal_clients_are_uniform() {
        let g = grads(&[&[0.5, -1.0], &[0.5, -1.0], &[0.5, -1.0]]);
        let server = GradientVector::new(AGGREGATE_ID, vec![0.5, -1.0]);
        let out = fl_trust(&AggregationInput::new(&g, 0).with_server_gradient(&server)).unwrap();
        for (a, b) in out.aggregate.values.iter().zip(&server.values) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in out.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fl_trust_falls_back_when_nobody_is_trusted() {
        let g = grads(&[&[-1.0, 0.0], &[0.0, 0.0]]);
        let server = GradientVector::new(AGGREGATE_ID, vec![1.0, 0.0]);
        let out = fl_trust(&AggregationInput::new(&g, 0).with_server_gradient(&server)).unwrap();
        assert!(out.fallback_to_server);
        assert_eq!(out.aggregate.values, server.values);
        assert!(out.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn fl_trust_needs_a_usable_server_gradient() {
        let g = grads(&[&[1.0, 0.0]]);
        assert!(fl_trust(&AggregationInput::new(&g, 0)).is_err());
        let zero = GradientVector::new(AGGREGATE_ID, vec![0.0, 0.0]);
        assert!(fl_trust(&AggregationInput::new(&g, 0).with_server_gradient(&zero)).is_err());
    }

    #[test]
    fn rule_names_round_trip() {
        for r in RuleName::ALL {
            assert_eq!(r.as_str().parse::<RuleName>().unwrap(), r);
        }
        assert!("bulyan".parse::<RuleName>().is_err());
    }
}
