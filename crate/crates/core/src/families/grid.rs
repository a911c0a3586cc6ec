//! Cartesian hyperparameter grids of toy training runs.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::toy::{train_toy, ToyTrainConfig, MANIFEST_NAME};
use super::FamilyError;
use crate::store::{write_manifest, RunRecord};

/// Upper bound on the number of cells in one grid.
pub const MAX_GRID_CELLS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub wds: Vec<f64>,
    pub widths: Vec<usize>,
    /// Initialization seeds; the data seed comes from `base`.
    pub seeds: Vec<u64>,
    /// Settings shared by every cell.
    pub base: ToyTrainConfig,
}

impl GridSpec {
    /// 5 learning rates x 3 weight decays x 2 widths over the given seeds.
    pub fn default_lists(base: ToyTrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            lrs: vec![0.001, 0.003, 0.01, 0.03, 0.1],
            wds: vec![0.0, 1e-4, 1e-3],
            widths: vec![24, 32],
            seeds,
            base,
        }
    }

    pub fn cells(&self) -> Vec<ToyTrainConfig> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &wd in &self.wds {
                for &hidden in &self.widths {
                    for &seed in &self.seeds {
                        out.push(ToyTrainConfig {
                            hidden,
                            lr,
                            weight_decay: wd,
                            init_seed: seed,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), FamilyError> {
        let lens = [self.lrs.len(), self.wds.len(), self.widths.len(), self.seeds.len()];
        if lens.contains(&0) {
            return Err(FamilyError::InvalidConfig("grid option lists must be non-empty".into()));
        }
        let total = lens.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).unwrap_or(usize::MAX);
        if total > MAX_GRID_CELLS {
            return Err(FamilyError::InvalidConfig(format!(
                "grid has {total} cells, limit is {MAX_GRID_CELLS}"
            )));
        }
        self.base.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub manifest: PathBuf,
    pub records: usize,
    /// `(model_id, error)` for cells that failed or diverged.
    pub failed: Vec<(String, String)>,
}

/// Trains every grid cell into `out_dir/<model_id>/` and merges the
/// per-cell manifests into `out_dir/manifest.jsonl`. A failing cell is
/// logged and does not abort the grid; a diverged cell keeps the records of
/// its completed epochs. `threads == 0` uses the default pool size.
pub fn grid_family(spec: &GridSpec, out_dir: &Path, threads: usize) -> Result<GridOutcome, FamilyError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let cells = spec.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FamilyError::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<Vec<RunRecord>, FamilyError>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cfg| {
                let id = cfg.model_id();
                let res = train_toy(cfg, &out_dir.join(&id));
                (id, res)
            })
            .collect()
    });

    let mut merged = Vec::new();
    let mut failed = Vec::new();
    for (id, res) in results {
        let records = match res {
            Ok(r) => r,
            Err(FamilyError::DivergenceDetected { epoch, records }) => {
                warn!("grid cell {id} diverged in epoch {epoch}; keeping {} records", records.len());
                failed.push((id.clone(), format!("diverged in epoch {epoch}")));
                records
            }
            Err(e) => {
                warn!("grid cell {id} failed: {e}");
                failed.push((id, e.to_string()));
                continue;
            }
        };
        merged.extend(records.into_iter().map(|mut r| {
            r.weights_path = format!("{id}/{}", r.weights_path);
            r
        }));
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &merged)?;
    info!("grid wrote {} records from {} cells", merged.len(), cells.len());
    Ok(GridOutcome {
        manifest,
        records: merged.len(),
        failed,
    })
}
