//! Container probing and manifest-wide evaluation: metrics per record,
//! grouped rank correlations, and the CSV and SVG report bundle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{probe_model, MetricId, MetricsError, ModelProbe};
use crate::report::{line_chart_svg, scatter_svg, Series};
use crate::stats::{group_key_of, grouped_correlations, GroupKey, GroupedCorrelations, MissingGroupKey, Observation, Target};
use crate::store::{decode_container, read_manifest, resolve_weights_path, StoreError};
use crate::Model;

pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const SCATTER_DIR: &str = "scatter";
pub const EVOLUTION_DIR: &str = "evolution";
/// Largest tolerated fraction of failing records.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    MissingGroupKey(#[from] MissingGroupKey),
    #[error("{failed} of {total} records failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Probes a container held in memory. Stored tensors are evaluated in `f64`.
pub fn probe_bytes(bytes: &[u8], use_lrf: bool) -> Result<ModelProbe<f64>, PipelineError> {
    let tensors: Vec<_> = decode_container(bytes)?.iter().map(|t| t.to_f64()).collect();
    Ok(probe_model(&tensors, use_lrf)?)
}

pub fn probe_container(path: impl AsRef<Path>, use_lrf: bool) -> Result<ModelProbe<f64>, PipelineError> {
    let bytes = fs::read(path).map_err(StoreError::from)?;
    probe_bytes(&bytes, use_lrf)
}

fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Model metrics keyed by container content hash and LRF flag. Failures
/// are cached as their error message.
#[derive(Debug, Default, Clone)]
pub struct MetricCache {
    entries: HashMap<(String, bool), Result<Model, String>>,
}

impl MetricCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    pub manifest: PathBuf,
    pub group_by: Vec<String>,
    pub metrics: Vec<MetricId>,
    pub targets: Vec<Target>,
    /// Replaces every requested metric by its LRF variant.
    pub lrf: bool,
    pub out_dir: PathBuf,
    /// Worker threads for metric computation; `0` is automatic.
    pub threads: usize,
}

impl EvaluateOptions {
    /// All four metrics against both targets, ungrouped.
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            group_by: Vec::new(),
            metrics: MetricId::all(false),
            targets: Target::ALL.to_vec(),
            lrf: false,
            out_dir: out_dir.into(),
            threads: 0,
        }
    }

    fn metric_ids(&self) -> Vec<MetricId> {
        let set: BTreeSet<MetricId> = self
            .metrics
            .iter()
            .map(|m| MetricId::new(m.kind, m.lrf || self.lrf))
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub correlations_csv: PathBuf,
    pub scatter_svgs: Vec<PathBuf>,
    pub evolution_svgs: Vec<PathBuf>,
    pub correlations: GroupedCorrelations,
    pub records: usize,
    pub failed: usize,
}

pub fn evaluate(opts: &EvaluateOptions) -> Result<ReportBundle, PipelineError> {
    evaluate_with_cache(opts, &mut MetricCache::new())
}

/// [`evaluate`] reusing and extending `cache`.
pub fn evaluate_with_cache(opts: &EvaluateOptions, cache: &mut MetricCache) -> Result<ReportBundle, PipelineError> {
    let records = read_manifest(&opts.manifest)?;
    let metric_ids = opts.metric_ids();
    let flags: BTreeSet<bool> = metric_ids.iter().map(|m| m.lrf).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;

    let paths: BTreeSet<PathBuf> = records.iter().map(|r| resolve_weights_path(&opts.manifest, r)).collect();
    let loaded: BTreeMap<PathBuf, Result<(String, Vec<u8>), String>> = pool.install(|| {
        paths
            .par_iter()
            .map(|p| {
                let res = fs::read(p)
                    .map(|bytes| (content_hash(&bytes), bytes))
                    .map_err(|e| format!("{}: {e}", p.display()));
                (p.clone(), res)
            })
            .collect()
    });

    let mut jobs: BTreeMap<(String, bool), &[u8]> = BTreeMap::new();
    for (hash, bytes) in loaded.values().filter_map(|r| r.as_ref().ok()) {
        for &flag in &flags {
            let key = (hash.clone(), flag);
            if !cache.entries.contains_key(&key) {
                jobs.insert(key, bytes.as_slice());
            }
        }
    }
    let computed: Vec<((String, bool), Result<Model, String>)> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(key, bytes)| {
                let res = probe_bytes(bytes, key.1).map(|p| p.model).map_err(|e| e.to_string());
                (key, res)
            })
            .collect()
    });
    cache.entries.extend(computed);

    let mut observations = Vec::with_capacity(records.len());
    let mut failed = 0usize;
    for r in &records {
        let path = resolve_weights_path(&opts.manifest, r);
        let metrics = match &loaded[&path] {
            Err(e) => Err(e.clone()),
            Ok((hash, _)) => metric_ids
                .iter()
                .map(|id| {
                    cache.entries[&(hash.clone(), id.lrf)]
                        .as_ref()
                        .map(|m| (id.to_string(), m.value(id.kind)))
                        .map_err(Clone::clone)
                })
                .collect::<Result<BTreeMap<_, _>, _>>(),
        };
        match metrics {
            Ok(metrics) => observations.push(Observation {
                record: r.clone(),
                metrics,
            }),
            Err(e) => {
                warn!("record {}@{} skipped: {e}", r.model_id, r.epoch);
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * records.len() as f64 {
        return Err(PipelineError::TooManyFailures {
            failed,
            total: records.len(),
        });
    }

    let metric_names: Vec<String> = metric_ids.iter().map(|m| m.to_string()).collect();
    let correlations = grouped_correlations(&observations, &opts.group_by, &metric_names, &opts.targets)?;
    fs::create_dir_all(&opts.out_dir)?;
    let correlations_csv = opts.out_dir.join(CORRELATIONS_FILE);
    write_correlations_csv(&correlations_csv, &opts.group_by, &correlations)?;
    let scatter_svgs = write_scatters(&opts.out_dir, &opts.group_by, &observations, &correlations)?;
    let evolution_svgs = write_evolutions(&opts.out_dir, &opts.group_by, &correlations)?;
    info!(
        "evaluated {} records ({} failed), {} correlation cells",
        records.len(),
        failed,
        correlations.cells.len()
    );
    Ok(ReportBundle {
        correlations_csv,
        scatter_svgs,
        evolution_svgs,
        correlations,
        records: records.len(),
        failed,
    })
}

/// Header: group keys, then `metric_id,target,rho,n`; one row per cell in
/// the order of `correlations.cells`.
pub fn write_correlations_csv(path: &Path, group_by: &[String], c: &GroupedCorrelations) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = group_by.iter().map(String::as_str).collect();
    header.extend(["metric_id", "target", "rho", "n"]);
    w.write_record(&header)?;
    for cell in &c.cells {
        let mut row: Vec<String> = cell.group_key.values().map(str::to_string).collect();
        row.push(cell.metric_id.clone());
        row.push(cell.target.name().to_string());
        row.push(format!("{:?}", cell.rho));
        row.push(cell.n.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn slug(parts: &[(String, String)]) -> String {
    if parts.is_empty() {
        return "all".into();
    }
    parts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-,".contains(c) { c } else { '_' })
        .collect()
}

fn write_scatters(
    out: &Path,
    group_by: &[String],
    observations: &[Observation],
    c: &GroupedCorrelations,
) -> Result<Vec<PathBuf>, PipelineError> {
    let mut members: BTreeMap<GroupKey, Vec<&Observation>> = BTreeMap::new();
    for o in observations {
        members.entry(group_key_of(&o.record, group_by)?).or_default().push(o);
    }
    let dir = out.join(SCATTER_DIR);
    if !c.cells.is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let mut paths = Vec::with_capacity(c.cells.len());
    for cell in &c.cells {
        let group = members.get(&cell.group_key).map(Vec::as_slice).unwrap_or(&[]);
        let points: Vec<(f64, f64)> = group
            .iter()
            .filter_map(|o| o.metrics.get(&cell.metric_id).map(|&m| (m, cell.target.value(&o.record))))
            .collect();
        let label = slug(&cell.group_key.0);
        let title = format!("{label}: rho = {:.4} (n = {})", cell.rho, cell.n);
        let svg = scatter_svg(&title, &cell.metric_id, cell.target.name(), &points);
        let path = dir.join(format!("{label}__{}__{}.svg", cell.metric_id, cell.target.name()));
        fs::write(&path, svg)?;
        paths.push(path);
    }
    Ok(paths)
}

/// One chart per target and per combination of the non-epoch group keys,
/// with one rho-versus-epoch curve per metric. Written only when `epoch` is
/// a group key.
fn write_evolutions(out: &Path, group_by: &[String], c: &GroupedCorrelations) -> Result<Vec<PathBuf>, PipelineError> {
    if !group_by.iter().any(|k| k == "epoch") {
        return Ok(Vec::new());
    }
    type ChartKey = (Vec<(String, String)>, &'static str);
    let mut charts: BTreeMap<ChartKey, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for cell in &c.cells {
        let Some(epoch) = cell.group_key.get("epoch").and_then(|e| e.parse::<f64>().ok()) else {
            continue;
        };
        let rest: Vec<(String, String)> = cell.group_key.0.iter().filter(|(k, _)| k != "epoch").cloned().collect();
        charts
            .entry((rest, cell.target.name()))
            .or_default()
            .entry(cell.metric_id.clone())
            .or_default()
            .push((epoch, cell.rho));
    }
    let dir = out.join(EVOLUTION_DIR);
    if !charts.is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let mut paths = Vec::with_capacity(charts.len());
    for ((rest, target), by_metric) in charts {
        let series: Vec<Series> = by_metric
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { name, points }
            })
            .collect();
        let label = slug(&rest);
        let svg = line_chart_svg(&format!("{label}: rho vs {target}"), "epoch", "spearman rho", &series);
        let path = dir.join(format!("{label}__{target}.svg"));
        fs::write(&path, svg)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{Matrix, WeightTensor};
    use crate::store::{encode_container, write_container, write_manifest, RunRecord, StoredTensor};

    fn container(scale: f64) -> Vec<StoredTensor> {
        let m = Matrix::from_fn(4, 6, |i, j| if i == j { scale * (i + 1) as f64 } else { 0.0 });
        vec![WeightTensor::from_matrix("w", m).unwrap().into()]
    }

    fn record(id: &str, epoch: u32, test: f64, path: &str) -> RunRecord {
        RunRecord {
            model_id: id.into(),
            epoch,
            optimizer: "sgd".into(),
            dataset: "d".into(),
            hyperparams: BTreeMap::new(),
            train_accuracy: 1.0,
            test_accuracy: test,
            weights_path: path.into(),
        }
    }

    #[test]
    fn probe_bytes_matches_container_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.gprb");
        write_container(&path, &container(1.0)).unwrap();
        let bytes = encode_container(&container(1.0)).unwrap();
        assert_eq!(probe_container(&path, false).unwrap(), probe_bytes(&bytes, false).unwrap());
    }

    #[test]
    fn shared_containers_are_probed_once() {
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in [1.0, 2.0, 3.0].iter().enumerate() {
            write_container(dir.path().join(format!("c{i}.gprb")), &container(*s)).unwrap();
        }
        // same bytes under a second name
        write_container(dir.path().join("copy.gprb"), &container(1.0)).unwrap();
        let records = vec![
            record("a", 1, 0.5, "c0.gprb"),
            record("b", 1, 0.6, "c1.gprb"),
            record("c", 1, 0.7, "c2.gprb"),
            record("d", 1, 0.4, "copy.gprb"),
        ];
        let manifest = dir.path().join("m.jsonl");
        write_manifest(&manifest, &records).unwrap();
        let mut cache = MetricCache::new();
        let opts = EvaluateOptions::new(&manifest, dir.path().join("out"));
        let bundle = evaluate_with_cache(&opts, &mut cache).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(bundle.failed, 0);
        // SQ_p and E_L2 are scale invariant, so constant over these containers
        assert_eq!(bundle.correlations.cells.len(), 4);
        assert_eq!(bundle.correlations.skipped.len(), 4);
        assert_eq!(bundle.scatter_svgs.len(), 4);
        assert!(bundle.evolution_svgs.is_empty());
    }

    #[test]
    fn failures_over_threshold() {
        let dir = tempfile::tempdir().unwrap();
        write_container(dir.path().join("ok.gprb"), &container(1.0)).unwrap();
        let mut records: Vec<RunRecord> = (0..9).map(|i| record(&format!("m{i}"), 0, 0.5, "ok.gprb")).collect();
        records.push(record("bad", 0, 0.5, "missing.gprb"));
        let manifest = dir.path().join("m.jsonl");
        write_manifest(&manifest, &records).unwrap();
        let opts = EvaluateOptions::new(&manifest, dir.path().join("out"));
        assert_eq!(evaluate(&opts).unwrap().failed, 1);
        records.push(record("bad2", 0, 0.5, "missing.gprb"));
        write_manifest(&manifest, &records).unwrap();
        assert!(matches!(
            evaluate(&opts),
            Err(PipelineError::TooManyFailures { failed: 2, total: 11 })
        ));
    }

    #[test]
    fn csv_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in [1.0, 2.0, 3.0].iter().enumerate() {
            write_container(dir.path().join(format!("c{i}.gprb")), &container(*s)).unwrap();
        }
        let records: Vec<RunRecord> = (0..3)
            .map(|i| record(&format!("m{i}"), 2, 0.5 + 0.1 * i as f64, &format!("c{i}.gprb")))
            .collect();
        let manifest = dir.path().join("m.jsonl");
        write_manifest(&manifest, &records).unwrap();
        let mut opts = EvaluateOptions::new(&manifest, dir.path().join("out"));
        opts.group_by = vec!["epoch".into()];
        opts.metrics = vec!["F_p".parse().unwrap()];
        opts.targets = vec![Target::TestAccuracy];
        let bundle = evaluate(&opts).unwrap();
        let text = fs::read_to_string(&bundle.correlations_csv).unwrap();
        assert_eq!(text, "epoch,metric_id,target,rho,n\n2,F_p,test_accuracy,1.0,3\n");
        assert_eq!(bundle.evolution_svgs.len(), 1);
    }

    #[test]
    fn slugs() {
        assert_eq!(slug(&[]), "all");
        assert_eq!(slug(&[("lr".into(), "0.1".into()), ("opt".into(), "a/b".into())]), "lr=0.1,opt=a_b");
    }
}
