//! Ternary search for the fusion weight `alpha` that minimizes perplexity of
//! the pruned model.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::metrics::{all_layer_metrics, MetricKind};
use crate::scoring::{plan_from_metrics, PruningPlan};
use crate::toymodel::{CalibrationSet, ToyModel};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub k: usize,
    pub metric_kind: MetricKind,
    pub excluded: Vec<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iterations: 20,
            k: 0,
            metric_kind: MetricKind::Mssd,
            excluded: Vec::new(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        // epsilon >= 1 would skip the loop and leave alpha* undefined
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// One loop iteration. `left`/`right` are the bounds the midpoints were
/// computed from; `best_*` is the running best after this iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub left: f64,
    pub right: f64,
    pub m1: f64,
    pub m2: f64,
    pub ppl1: f64,
    pub ppl2: f64,
    pub best_alpha: f64,
    pub best_ppl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTrace {
    pub iterations: Vec<IterationRecord>,
    pub best_alpha: f64,
    pub best_ppl: f64,
    pub evaluations: usize,
    pub final_left: f64,
    pub final_right: f64,
}

const LOG_HEADER: &str = "# iter\tleft\tright\tm1\tm2\tppl1\tppl2\tbest_alpha\tbest_ppl";

impl SearchTrace {
    /// Tab-separated, one iteration per line, floats in shortest round-trip form.
    pub fn to_log(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for (i, r) in self.iterations.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                i + 1,
                r.left,
                r.right,
                r.m1,
                r.m2,
                r.ppl1,
                r.ppl2,
                r.best_alpha,
                r.best_ppl
            );
        }
        let _ = writeln!(
            out,
            "# final\tleft={}\tright={}\tbest_alpha={}\tbest_ppl={}\tevaluations={}",
            self.final_left, self.final_right, self.best_alpha, self.best_ppl, self.evaluations
        );
        out
    }

    /// Reads back the iteration lines of [`SearchTrace::to_log`].
    pub fn parse_log_iterations(text: &str) -> Result<Vec<IterationRecord>> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 9 {
                return Err(Error::Format(format!(
                    "trace line {}: expected 9 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let v = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| {
                        Error::Format(format!("trace line {}: {f:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            records.push(IterationRecord {
                left: v[0],
                right: v[1],
                m1: v[2],
                m2: v[3],
                ppl1: v[4],
                ppl2: v[5],
                best_alpha: v[6],
                best_ppl: v[7],
            });
        }
        Ok(records)
    }
}

fn checked_eval<F>(objective: &mut F, alpha: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let value = objective(alpha)?;
    if !value.is_finite() {
        return Err(Error::Search { alpha, value });
    }
    Ok(value)
}

/// Shrinks `[0, 1]` by discarding the third next to the worse midpoint until
/// the interval is at most `epsilon` wide or `max_iterations` is reached.
pub fn ternary_search<F>(mut objective: F, config: &SearchConfig) -> Result<SearchTrace>
where
    F: FnMut(f64) -> Result<f64>,
{
    config.validate()?;
    let (mut left, mut right) = (0.0f64, 1.0f64);
    let mut best_alpha = f64::NAN;
    let mut best_ppl = f64::INFINITY;
    let mut iterations = Vec::new();
    let mut evaluations = 0;

    while right - left > config.epsilon && iterations.len() < config.max_iterations {
        let m1 = left + (right - left) / 3.0;
        let m2 = right - (right - left) / 3.0;
        let ppl1 = checked_eval(&mut objective, m1)?;
        let ppl2 = checked_eval(&mut objective, m2)?;
        evaluations += 2;

        if ppl1 < best_ppl {
            best_ppl = ppl1;
            best_alpha = m1;
        }
        if ppl2 < best_ppl {
            best_ppl = ppl2;
            best_alpha = m2;
        }
        iterations.push(IterationRecord {
            left,
            right,
            m1,
            m2,
            ppl1,
            ppl2,
            best_alpha,
            best_ppl,
        });

        if ppl1 > ppl2 {
            left = m1;
        } else {
            right = m2;
        }
    }

    Ok(SearchTrace {
        iterations,
        best_alpha,
        best_ppl,
        evaluations,
        final_left: left,
        final_right: right,
    })
}

/// Outcome of a full search: the plan at the best alpha plus the trace.
#[derive(Debug, Clone)]
pub struct AlphaSearch {
    pub plan: PruningPlan,
    pub trace: SearchTrace,
    /// Distinct prune sets whose perplexity was actually computed.
    pub distinct_evaluations: usize,
}

/// Generic driver: `capture` is called exactly once; `evaluate` receives each
/// candidate plan and returns its perplexity. Evaluations are memoized on the
/// realized prune set, since different alphas often select the same layers.
pub fn search_alpha<C, E>(capture: C, mut evaluate: E, config: &SearchConfig) -> Result<AlphaSearch>
where
    C: FnOnce() -> Result<BoundarySet>,
    E: FnMut(&PruningPlan) -> Result<f64>,
{
    config.validate()?;
    let boundaries = capture()?;
    let raw = all_layer_metrics(&boundaries, config.metric_kind)?;
    let fingerprint = boundaries.content_fingerprint();
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();

    let trace = ternary_search(
        |alpha| {
            let plan = plan_from_metrics(&raw, alpha, config.k, &config.excluded, &fingerprint)?;
            if let Some(&ppl) = cache.get(&plan.pruned_indices) {
                return Ok(ppl);
            }
            let ppl = evaluate(&plan)?;
            cache.insert(plan.pruned_indices.clone(), ppl);
            Ok(ppl)
        },
        config,
    )?;
    let plan = plan_from_metrics(
        &raw,
        trace.best_alpha,
        config.k,
        &config.excluded,
        &fingerprint,
    )?;
    Ok(AlphaSearch {
        plan,
        trace,
        distinct_evaluations: cache.len(),
    })
}

/// Scores on `scoring` (captured once) and evaluates perplexity on `search`.
pub fn search_alpha_for_model(
    model: &ToyModel,
    scoring: &CalibrationSet,
    search: &CalibrationSet,
    config: &SearchConfig,
) -> Result<AlphaSearch> {
    search_alpha(
        || model.forward_capture(scoring).map(|(b, _)| b),
        |plan| model.perplexity(Some(plan), search),
        config,
    )
}
