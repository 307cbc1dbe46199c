//! Summary statistics over periodic evaluations of several instances.
//!
//! `X[l][τ]` is the mean evaluation return of instance `l` at its `τ`-th
//! evaluation. Every function orders instances by id before reducing, so
//! the order records arrive in never changes a result.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// One periodic evaluation of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance: usize,
    /// Environment steps taken before the evaluation.
    pub step: u64,
    pub mean: f64,
    pub returns: Vec<f64>,
}

impl EvalRecord {
    pub fn new(instance: usize, step: u64, returns: Vec<f64>) -> Self {
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        Self {
            instance,
            step,
            mean,
            returns,
        }
    }
}

/// Records arranged as an instance × evaluation grid with a shared step
/// axis.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub instances: Vec<usize>,
    pub steps: Vec<u64>,
    /// `values[l][τ]`.
    pub values: Vec<Vec<f64>>,
}

impl EvalTable {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self, HarnessError> {
        if records.is_empty() {
            return Err(HarnessError::Stats("no evaluation records".into()));
        }
        let mut by_instance: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
        for r in records {
            if !r.mean.is_finite() {
                return Err(HarnessError::Stats(format!(
                    "instance {} step {}: non-finite mean",
                    r.instance, r.step
                )));
            }
            if by_instance.entry(r.instance).or_default().insert(r.step, r.mean).is_some() {
                return Err(HarnessError::Stats(format!(
                    "instance {} has two evaluations at step {}",
                    r.instance, r.step
                )));
            }
        }
        let mut iter = by_instance.iter();
        let (first_id, first) = iter.next().expect("non-empty");
        let steps: Vec<u64> = first.keys().copied().collect();
        for (id, evals) in iter {
            if !evals.keys().copied().eq(steps.iter().copied()) {
                return Err(HarnessError::Stats(format!(
                    "ragged records: instance {id} evaluated at {} steps, instance {first_id} at {}",
                    evals.len(),
                    steps.len()
                )));
            }
        }
        Ok(Self {
            instances: by_instance.keys().copied().collect(),
            steps,
            values: by_instance.values().map(|e| e.values().copied().collect()).collect(),
        })
    }

    /// Cross-instance mean per evaluation.
    pub fn mean_curve(&self) -> Vec<f64> {
        let m = self.values.len() as f64;
        (0..self.steps.len())
            .map(|t| self.values.iter().map(|row| row[t]).sum::<f64>() / m)
            .collect()
    }

    /// Population standard deviation across instances per evaluation.
    pub fn std_curve(&self) -> Vec<f64> {
        let means = self.mean_curve();
        let m = self.values.len() as f64;
        means
            .iter()
            .enumerate()
            .map(|(t, mu)| (self.values.iter().map(|row| (row[t] - mu).powi(2)).sum::<f64>() / m).sqrt())
            .collect()
    }
}

/// `max_τ mean_l X[l][τ]` and the first `τ` attaining it.
pub fn best_average(records: &[EvalRecord]) -> Result<(f64, usize), HarnessError> {
    let table = EvalTable::from_records(records)?;
    Ok(argmax(&table.mean_curve()))
}

/// `sqrt(mean_l (X[l][τ] − mean_l X[l][τ])²)`.
pub fn std_at(records: &[EvalRecord], tau: usize) -> Result<f64, HarnessError> {
    let table = EvalTable::from_records(records)?;
    table
        .std_curve()
        .get(tau)
        .copied()
        .ok_or_else(|| HarnessError::Stats(format!("evaluation index {tau} out of range")))
}

/// `max_l max_τ X[l][τ]`.
pub fn best_instance(records: &[EvalRecord]) -> Result<f64, HarnessError> {
    let table = EvalTable::from_records(records)?;
    Ok(table.values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Step of the first evaluation whose cross-instance mean reaches
/// `reference`, or `None` if none does.
pub fn steps_to_reference(records: &[EvalRecord], reference: f64) -> Result<Option<u64>, HarnessError> {
    let table = EvalTable::from_records(records)?;
    Ok(table
        .mean_curve()
        .iter()
        .position(|m| *m >= reference)
        .map(|t| table.steps[t]))
}

/// Per instance, the step of its first evaluation reaching `reference`.
pub fn instance_steps_to_reference(
    records: &[EvalRecord],
    reference: f64,
) -> Result<Vec<(usize, Option<u64>)>, HarnessError> {
    let table = EvalTable::from_records(records)?;
    Ok(table
        .instances
        .iter()
        .zip(&table.values)
        .map(|(id, row)| (*id, row.iter().position(|x| *x >= reference).map(|t| table.steps[t])))
        .collect())
}

/// Median with unreached entries counted as infinitely late. `None` when
/// the median itself is unreached.
pub fn median_steps(steps: &[Option<u64>]) -> Option<f64> {
    if steps.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = steps.iter().map(|s| s.map_or(f64::INFINITY, |x| x as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    med.is_finite().then_some(med)
}

fn argmax(values: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.iter().enumerate() {
        if *v > best.0 {
            best = (*v, i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub reference: f64,
    pub steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_average: f64,
    /// Step of the evaluation attaining the best average.
    pub best_average_step: u64,
    pub std_at_best: f64,
    pub best_instance: f64,
    pub references: Vec<ReferencePoint>,
}

impl RunSummary {
    pub fn from_records(records: &[EvalRecord], references: &[f64]) -> Result<Self, HarnessError> {
        let table = EvalTable::from_records(records)?;
        let (best, tau) = argmax(&table.mean_curve());
        Ok(Self {
            best_average: best,
            best_average_step: table.steps[tau],
            std_at_best: table.std_curve()[tau],
            best_instance: best_instance(records)?,
            references: references
                .iter()
                .map(|r| {
                    Ok(ReferencePoint {
                        reference: *r,
                        steps: steps_to_reference(records, *r)?,
                    })
                })
                .collect::<Result<_, HarnessError>>()?,
        })
    }
}

/// How quickly a candidate reaches the baseline's best average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexity {
    pub baseline: String,
    pub candidate: String,
    /// The baseline's best average.
    pub reference: f64,
    /// Step at which the baseline attains it.
    pub baseline_steps: u64,
    /// First step the candidate's cross-instance mean reaches it. This is
    /// the sample complexity.
    pub candidate_mean_curve_steps: Option<u64>,
    /// Per-instance first-reach steps of the candidate, for spread only:
    /// instances are evaluated on different start states, so a single
    /// instance may never reach a cross-instance mean even when the mean
    /// curve does.
    pub candidate_instance_steps: Vec<Option<u64>>,
    pub candidate_median_steps: Option<f64>,
}

impl SampleComplexity {
    pub fn compare(
        baseline_name: &str,
        baseline: &[EvalRecord],
        candidate_name: &str,
        candidate: &[EvalRecord],
    ) -> Result<Self, HarnessError> {
        let summary = RunSummary::from_records(baseline, &[])?;
        let per_instance: Vec<Option<u64>> = instance_steps_to_reference(candidate, summary.best_average)?
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        Ok(Self {
            baseline: baseline_name.to_string(),
            candidate: candidate_name.to_string(),
            reference: summary.best_average,
            baseline_steps: summary.best_average_step,
            candidate_mean_curve_steps: steps_to_reference(candidate, summary.best_average)?,
            candidate_median_steps: median_steps(&per_instance),
            candidate_instance_steps: per_instance,
        })
    }

    /// Candidate mean-curve steps over baseline steps; `None` if
    /// unreached. A baseline that peaks at its first evaluation counts as
    /// one step.
    pub fn ratio(&self) -> Option<f64> {
        self.candidate_mean_curve_steps
            .map(|m| m.max(1) as f64 / self.baseline_steps.max(1) as f64)
    }
}
