//! Normalization, fusion, ranking and prune-set selection.
//!
//! The fused importance of layer `i` is
//! `alpha * sigmoid(l_diff) + (1 - alpha) * l_sim / 2`; the `k` layers with
//! the smallest importance form the prune set.

use std::cmp::Ordering;

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::metrics::{all_layer_metrics, MetricKind, RawLayerMetrics};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerScore {
    pub layer_index: usize,
    pub l_sim: f64,
    pub l_diff: f64,
    pub i_sim: f64,
    pub i_diff: f64,
    pub importance: f64,
    pub alpha: f64,
    pub metric_kind: MetricKind,
    pub degenerate_token_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub total_layers: usize,
    pub k: usize,
    /// Sorted ascending.
    pub pruned_indices: Vec<usize>,
    /// Every layer index, least important first.
    pub ranking: Vec<usize>,
    pub alpha: f64,
    pub metric_kind: MetricKind,
    pub calibration_fingerprint: String,
    /// Indexed by layer.
    pub scores: Vec<LayerScore>,
    /// Adjacent ranking pairs whose fused importance is exactly equal.
    pub tie_break_events: usize,
    /// Layers whose sigmoid-normalized difference rounded to 1.0.
    pub saturation_count: usize,
    /// Layers withheld from pruning; they sit at the tail of `ranking`.
    pub excluded: Vec<usize>,
}

impl PruningPlan {
    pub fn keep_count(&self) -> usize {
        self.total_layers - self.k
    }

    /// `k == L`: every decoder layer is removed.
    pub fn is_full_prune(&self) -> bool {
        self.k == self.total_layers
    }

    pub fn is_pruned(&self, layer: usize) -> bool {
        self.pruned_indices.binary_search(&layer).is_ok()
    }

    /// Checks the structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let l = self.total_layers;
        if self.ranking.len() != l || self.scores.len() != l {
            return Err(Error::Plan(format!(
                "total_layers={l} but ranking has {} entries and scores {}",
                self.ranking.len(),
                self.scores.len()
            )));
        }
        check_permutation(&self.ranking, l)?;
        for (i, s) in self.scores.iter().enumerate() {
            if s.layer_index != i {
                return Err(Error::Plan(format!(
                    "score record {i} is labelled layer {}",
                    s.layer_index
                )));
            }
        }
        if self.k > l {
            return Err(Error::Plan(format!("k={} exceeds {l} layers", self.k)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Plan(format!("alpha={} outside [0, 1]", self.alpha)));
        }
        if self.pruned_indices.len() != self.k
            || self.pruned_indices.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Plan(format!(
                "pruned_indices {:?} is not a sorted set of size k={}",
                self.pruned_indices, self.k
            )));
        }
        let mut prefix = self.ranking[..self.k].to_vec();
        prefix.sort_unstable();
        if prefix != self.pruned_indices {
            return Err(Error::Plan(format!(
                "pruned_indices {:?} are not the first {} entries of ranking {:?}",
                self.pruned_indices, self.k, self.ranking
            )));
        }
        let candidates = l - self.excluded.len();
        let mut tail = self.ranking[candidates..].to_vec();
        tail.sort_unstable();
        let mut excluded = self.excluded.clone();
        excluded.sort_unstable();
        if tail != excluded || self.k > candidates {
            return Err(Error::Plan(format!(
                "excluded layers {:?} must occupy the tail of the ranking and never be pruned",
                self.excluded
            )));
        }
        for segment in [&self.ranking[..candidates], &self.ranking[candidates..]] {
            for w in segment.windows(2) {
                let (a, b) = (&self.scores[w[0]], &self.scores[w[1]]);
                if rank_key(a, b) == Ordering::Greater {
                    return Err(Error::Plan(format!(
                        "ranking not ascending in importance at layers {} -> {}",
                        w[0], w[1]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Logistic sigmoid of a non-negative difference magnitude.
pub fn normalize_diff(l_diff: f64) -> Result<f64> {
    if !l_diff.is_finite() || l_diff < 0.0 {
        return Err(Error::Value(format!(
            "difference metric must be finite and >= 0, got {l_diff}"
        )));
    }
    Ok(1.0 / (1.0 + (-l_diff).exp()))
}

pub fn normalize_sim(l_sim: f64) -> Result<f64> {
    if !(0.0..=2.0).contains(&l_sim) {
        return Err(Error::Value(format!(
            "cosine dissimilarity must lie in [0, 2], got {l_sim}"
        )));
    }
    Ok(l_sim / 2.0)
}

pub fn fuse(i_diff: f64, i_sim: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("alpha", alpha), ("i_diff", i_diff), ("i_sim", i_sim)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Value(format!("{name}={v} outside [0, 1]")));
        }
    }
    Ok(alpha * i_diff + (1.0 - alpha) * i_sim)
}

pub fn score_layer(raw: &RawLayerMetrics, alpha: f64) -> Result<LayerScore> {
    let i_sim = normalize_sim(raw.l_sim)?;
    let i_diff = normalize_diff(raw.l_diff)?;
    let importance = fuse(i_diff, i_sim, alpha)?;
    Ok(LayerScore {
        layer_index: raw.layer_index,
        l_sim: raw.l_sim,
        l_diff: raw.l_diff,
        i_sim,
        i_diff,
        importance,
        alpha,
        metric_kind: raw.metric_kind,
        degenerate_token_count: raw.degenerate_token_count,
    })
}

// Importance, then raw difference, then index.
fn rank_key(a: &LayerScore, b: &LayerScore) -> Ordering {
    a.importance
        .total_cmp(&b.importance)
        .then(a.l_diff.total_cmp(&b.l_diff))
        .then(a.layer_index.cmp(&b.layer_index))
}

fn check_permutation(indices: &[usize], l: usize) -> Result<()> {
    let mut seen = vec![false; l];
    for &i in indices {
        if i >= l {
            return Err(Error::Plan(format!("layer index {i} out of range for {l} layers")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Plan(format!("layer index {i} appears twice")));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Plan(format!("layer index {missing} missing")));
    }
    Ok(())
}

/// Layer indices in ascending order of importance. Ties fall back to the raw
/// difference magnitude and then to the layer index.
pub fn rank_layers(scores: &[LayerScore]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Plan("no layers to rank".into()));
    }
    let indices: Vec<usize> = scores.iter().map(|s| s.layer_index).collect();
    check_permutation(&indices, scores.len())?;
    let mut order: Vec<&LayerScore> = scores.iter().collect();
    order.sort_by(|a, b| rank_key(a, b));
    Ok(order.into_iter().map(|s| s.layer_index).collect())
}

/// The first `k` entries of `ranking`, sorted ascending.
pub fn select_prune_set(ranking: &[usize], k: usize) -> Result<Vec<usize>> {
    if k > ranking.len() {
        return Err(Error::Plan(format!(
            "cannot prune {k} of {} layers",
            ranking.len()
        )));
    }
    let mut p = ranking[..k].to_vec();
    p.sort_unstable();
    Ok(p)
}

/// Assembles a plan from precomputed raw metrics (one per layer, any order).
pub fn plan_from_metrics(
    raw: &[RawLayerMetrics],
    alpha: f64,
    k: usize,
    excluded: &[usize],
    calibration_fingerprint: &str,
) -> Result<PruningPlan> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Value(format!("alpha={alpha} outside [0, 1]")));
    }
    let mut scores = raw
        .iter()
        .map(|r| score_layer(r, alpha))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by_key(|s| s.layer_index);
    let l = scores.len();
    let metric_kind = scores
        .first()
        .map(|s| s.metric_kind)
        .ok_or_else(|| Error::Plan("no layers to rank".into()))?;

    let mut excluded: Vec<usize> = excluded.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    if let Some(&bad) = excluded.iter().find(|&&e| e >= l) {
        return Err(Error::Plan(format!("excluded layer {bad} out of range for {l} layers")));
    }
    let full = rank_layers(&scores)?;
    let (mut ranking, tail): (Vec<usize>, Vec<usize>) =
        full.iter().partition(|i| excluded.binary_search(i).is_err());
    let candidates = ranking.len();
    ranking.extend(tail);
    if k > candidates {
        return Err(Error::Plan(format!(
            "cannot prune {k} layers: only {candidates} of {l} are candidates"
        )));
    }
    let pruned_indices = select_prune_set(&ranking, k)?;

    let tie_break_events = ranking
        .windows(2)
        .filter(|w| scores[w[0]].importance == scores[w[1]].importance)
        .count();
    let saturation_count = scores.iter().filter(|s| s.i_diff == 1.0).count();

    Ok(PruningPlan {
        total_layers: l,
        k,
        pruned_indices,
        ranking,
        alpha,
        metric_kind,
        calibration_fingerprint: calibration_fingerprint.to_string(),
        scores,
        tie_break_events,
        saturation_count,
        excluded,
    })
}

/// Scores every layer of `boundaries`, ranks and selects `k` to prune.
pub fn build_plan(
    boundaries: &BoundarySet,
    alpha: f64,
    kind: MetricKind,
    k: usize,
) -> Result<PruningPlan> {
    build_plan_excluding(boundaries, alpha, kind, k, &[])
}

pub fn build_plan_excluding(
    boundaries: &BoundarySet,
    alpha: f64,
    kind: MetricKind,
    k: usize,
    excluded: &[usize],
) -> Result<PruningPlan> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Value(format!("alpha={alpha} outside [0, 1]")));
    }
    if k > boundaries.layer_count() {
        return Err(Error::Plan(format!(
            "cannot prune {k} of {} layers",
            boundaries.layer_count()
        )));
    }
    let raw = all_layer_metrics(boundaries, kind)?;
    plan_from_metrics(&raw, alpha, k, excluded, &boundaries.content_fingerprint())
}
