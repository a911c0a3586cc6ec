//! Rank statistics and the grouped correlation engine.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::store::RunRecord;

/// Groups with fewer samples than this are not reported.
pub const MIN_GROUP_SIZE: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("input contains NaN or infinite values")]
    NonFinite,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {MIN_GROUP_SIZE} samples, got {0}")]
    TooFewSamples(usize),
    #[error("input is constant; correlation undefined")]
    ConstantInput,
    #[error("empty input")]
    Empty,
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
}

/// 1-based ranks with ties replaced by the mean of the ranks they span.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector<T> {
    pub ranks: Vec<T>,
}

impl<T: Real> RankVector<T> {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

pub fn rank_average_ties<T: Real>(x: &[T]) -> Result<RankVector<T>, StatsError> {
    if x.is_empty() {
        return Err(StatsError::Empty);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![T::zero(); x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = T::from_usize_lossy(start + 1 + end) / T::lit(2.0);
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    Ok(RankVector { ranks })
}

fn pearson<T: Real>(x: &[T], y: &[T]) -> Result<T, StatsError> {
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(StatsError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).max(-T::one()).min(T::one()))
}

/// Spearman correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Result<T, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < MIN_GROUP_SIZE {
        return Err(StatsError::TooFewSamples(x.len()));
    }
    let rx = rank_average_ties(x)?;
    let ry = rank_average_ties(y)?;
    pearson(&rx.ranks, &ry.ranks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    TestAccuracy,
    /// `train_accuracy - test_accuracy`.
    GeneralizationGap,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::TestAccuracy, Target::GeneralizationGap];

    pub fn name(self) -> &'static str {
        match self {
            Target::TestAccuracy => "test_accuracy",
            Target::GeneralizationGap => "generalization_gap",
        }
    }

    pub fn value(self, r: &RunRecord) -> f64 {
        match self {
            Target::TestAccuracy => r.test_accuracy,
            Target::GeneralizationGap => r.generalization_gap(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Target::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| StatsError::UnknownTarget(s.to_string()))
    }
}

/// Values of the grouping keys, in the order the keys were requested.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize)]
pub struct GroupKey(pub Vec<(String, String)>);

impl GroupKey {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(_, v)| v.as_str())
    }
}

/// Numeric-aware comparison: values that both parse as numbers compare
/// numerically, everything else by string.
fn cmp_value(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> Ordering {
        for ((ka, va), (kb, vb)) in self.0.iter().zip(&other.0) {
            let o = ka.cmp(kb).then_with(|| cmp_value(va, vb));
            if o != Ordering::Equal {
                return o;
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One run record with the model-level metric values computed for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub record: RunRecord,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationCell {
    pub group_key: GroupKey,
    pub metric_id: String,
    pub target: Target,
    pub rho: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCell {
    pub group_key: GroupKey,
    pub metric_id: String,
    pub target: Target,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupedCorrelations {
    pub cells: Vec<CorrelationCell>,
    pub skipped: Vec<SkippedCell>,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("record {model_id}@{epoch} has no value for group key {key:?}")]
pub struct MissingGroupKey {
    pub model_id: String,
    pub epoch: u32,
    pub key: String,
}

pub fn group_key_of(r: &RunRecord, group_by: &[String]) -> Result<GroupKey, MissingGroupKey> {
    group_by
        .iter()
        .map(|k| {
            r.group_value(k).map(|v| (k.clone(), v)).ok_or_else(|| MissingGroupKey {
                model_id: r.model_id.clone(),
                epoch: r.epoch,
                key: k.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(GroupKey)
}

/// Spearman correlation of every requested metric with every target, within
/// each group of records sharing the `group_by` values.
///
/// Cells are ordered by group key, then metric id, then target name. Groups
/// with fewer than [`MIN_GROUP_SIZE`] samples, observations lacking the
/// metric, and constant columns are reported in `skipped` instead.
pub fn grouped_correlations(
    observations: &[Observation],
    group_by: &[String],
    metrics: &[String],
    targets: &[Target],
) -> Result<GroupedCorrelations, MissingGroupKey> {
    let mut groups: BTreeMap<GroupKey, Vec<&Observation>> = BTreeMap::new();
    for o in observations {
        groups.entry(group_key_of(&o.record, group_by)?).or_default().push(o);
    }
    let mut metric_ids: Vec<&String> = metrics.iter().collect();
    metric_ids.sort();
    metric_ids.dedup();
    let mut target_list: Vec<Target> = targets.to_vec();
    target_list.sort_by_key(|t| t.name());
    target_list.dedup();

    let mut out = GroupedCorrelations::default();
    for (key, mut members) in groups {
        // canonical sample order so results do not depend on input order
        members.sort_by(|a, b| {
            a.record
                .model_id
                .cmp(&b.record.model_id)
                .then(a.record.epoch.cmp(&b.record.epoch))
                .then(a.record.weights_path.cmp(&b.record.weights_path))
        });
        for metric in &metric_ids {
            for &target in &target_list {
                let (xs, ys): (Vec<f64>, Vec<f64>) = members
                    .iter()
                    .filter_map(|o| o.metrics.get(*metric).map(|&m| (m, target.value(&o.record))))
                    .unzip();
                let n = xs.len();
                let skip = |reason: String| SkippedCell {
                    group_key: key.clone(),
                    metric_id: (*metric).clone(),
                    target,
                    n,
                    reason,
                };
                if n < MIN_GROUP_SIZE {
                    out.skipped.push(skip(format!("only {n} samples")));
                    continue;
                }
                match spearman(&xs, &ys) {
                    Ok(rho) => out.cells.push(CorrelationCell {
                        group_key: key.clone(),
                        metric_id: (*metric).clone(),
                        target,
                        rho,
                        n,
                    }),
                    Err(e) => out.skipped.push(skip(e.to_string())),
                }
            }
        }
    }
    for s in &out.skipped {
        warn!(
            "skipped correlation group={:?} metric={} target={} n={}: {}",
            s.group_key.0, s.metric_id, s.target, s.n, s.reason
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(model: &str, epoch: u32, train: f64, test: f64) -> RunRecord {
        RunRecord {
            model_id: model.into(),
            epoch,
            optimizer: "sgd".into(),
            dataset: "toy".into(),
            hyperparams: BTreeMap::new(),
            train_accuracy: train,
            test_accuracy: test,
            weights_path: format!("{model}_{epoch}.gprb"),
        }
    }

    fn obs(model: &str, epoch: u32, train: f64, test: f64, metric: f64) -> Observation {
        Observation {
            record: record(model, epoch, train, test),
            metrics: BTreeMap::from([("E_L2".to_string(), metric)]),
        }
    }

    #[test]
    fn ranks_simple() {
        assert_eq!(rank_average_ties(&[10.0, 30.0, 20.0]).unwrap().ranks, vec![1.0, 3.0, 2.0]);
        assert_eq!(rank_average_ties(&[5.0, 5.0]).unwrap().ranks, vec![1.5, 1.5]);
        assert_eq!(rank_average_ties(&[1.0, 2.0, 2.0, 4.0]).unwrap().ranks, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn ranks_reject_bad_input() {
        assert_eq!(rank_average_ties::<f64>(&[]), Err(StatsError::Empty));
        assert_eq!(rank_average_ties(&[1.0, f64::NAN]), Err(StatsError::NonFinite));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(StatsError::LengthMismatch(3, 2)));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooFewSamples(2)));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(StatsError::ConstantInput));
    }

    #[test]
    fn spearman_f32() {
        assert_eq!(spearman(&[1.0f32, 5.0, 3.0], &[0.1, 0.9, 0.5]).unwrap(), 1.0);
    }

    #[test]
    fn single_group_perfect() {
        let o: Vec<Observation> = (0..3)
            .map(|i| obs(&format!("m{i}"), 1, 0.9, 0.5 + 0.1 * i as f64, 0.5 + 0.1 * i as f64))
            .collect();
        let g = grouped_correlations(&o, &[], &["E_L2".into()], &[Target::TestAccuracy]).unwrap();
        assert_eq!(g.cells.len(), 1);
        assert_eq!(g.cells[0].rho, 1.0);
        assert_eq!(g.cells[0].n, 3);
    }

    #[test]
    fn grouped_by_epoch() {
        let mut o = Vec::new();
        for epoch in [2, 10] {
            for i in 0..4 {
                o.push(obs(&format!("m{i}"), epoch, 1.0, 0.9 - 0.1 * i as f64, i as f64));
            }
        }
        let g = grouped_correlations(&o, &["epoch".into()], &["E_L2".into()], &[Target::TestAccuracy]).unwrap();
        assert_eq!(g.cells.len(), 2);
        assert_eq!(g.cells[0].group_key.get("epoch"), Some("2"));
        assert_eq!(g.cells[1].group_key.get("epoch"), Some("10"));
        assert!(g.cells.iter().all(|c| c.rho == -1.0));
    }

    #[test]
    fn small_and_constant_groups_skipped() {
        let mut o = vec![obs("a", 1, 0.9, 0.5, 1.0), obs("b", 1, 0.9, 0.6, 2.0)];
        for i in 0..3 {
            o.push(obs(&format!("c{i}"), 2, 0.9, 0.5, i as f64));
        }
        let g = grouped_correlations(&o, &["epoch".into()], &["E_L2".into()], &Target::ALL).unwrap();
        assert!(g.cells.is_empty());
        assert_eq!(g.skipped.len(), 4);
    }

    #[test]
    fn missing_group_key() {
        let o = vec![obs("a", 1, 0.9, 0.5, 1.0)];
        let err = grouped_correlations(&o, &["lr".into()], &["E_L2".into()], &Target::ALL).unwrap_err();
        assert_eq!(err.key, "lr");
    }

    #[test]
    fn cell_order_is_lexicographic() {
        let mut o = Vec::new();
        for i in 0..4 {
            let mut x = obs(&format!("m{i}"), 1, 0.95, 0.5 + 0.1 * i as f64, i as f64);
            x.metrics.insert("F_p".into(), -(i as f64));
            o.push(x);
        }
        let g = grouped_correlations(&o, &[], &["E_L2".into(), "F_p".into()], &Target::ALL).unwrap();
        let order: Vec<(String, &str)> = g.cells.iter().map(|c| (c.metric_id.clone(), c.target.name())).collect();
        assert_eq!(
            order,
            vec![
                ("E_L2".into(), "generalization_gap"),
                ("E_L2".into(), "test_accuracy"),
                ("F_p".into(), "generalization_gap"),
                ("F_p".into(), "test_accuracy"),
            ]
        );
        assert_eq!(g.cells[0].rho, -1.0);
        assert_eq!(g.cells[1].rho, 1.0);
    }

    #[test]
    fn group_key_numeric_order() {
        let a = GroupKey(vec![("epoch".into(), "9".into())]);
        let b = GroupKey(vec![("epoch".into(), "10".into())]);
        assert!(a < b);
        let c = GroupKey(vec![("opt".into(), "adam".into())]);
        let d = GroupKey(vec![("opt".into(), "sgd".into())]);
        assert!(c < d);
    }
}
