//! Pairing-strategy × temperature grid over joint training runs.

use serde::{Deserialize, Serialize};

use super::{train_joint, TrainConfig};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::pairing::PairStrategy;

/// Outcome of one `(strategy, temperature)` cell averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: PairStrategy,
    pub temperature: f64,
    pub seeds: Vec<u64>,
    /// Mean held-out understanding accuracy over the seeds that finished.
    pub au_accuracy: Option<f64>,
    /// Mean held-out execution success rate over the seeds that finished.
    pub ee_success: Option<f64>,
    /// Mean final-epoch MI lower bound on the train stream.
    pub mi_lower_bound: Option<f64>,
    /// One message per seed that failed or diverged.
    pub failures: Vec<String>,
}

impl AblationCell {
    pub fn failed(&self) -> bool {
        self.au_accuracy.is_none() || self.ee_success.is_none()
    }
}

/// Rows are strategies, columns temperatures, each in the order requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub strategies: Vec<PairStrategy>,
    pub temperatures: Vec<f64>,
    pub cells: Vec<Vec<AblationCell>>,
}

/// Grid specification for [`run_ablation`].
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub strategies: Vec<PairStrategy>,
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads for independent cells; `None` lets the pool decide.
    pub threads: Option<usize>,
}

impl AblationTable {
    pub fn cell(&self, strategy: PairStrategy, temperature: f64) -> Option<&AblationCell> {
        let r = self.strategies.iter().position(|&s| s == strategy)?;
        let c = self.temperatures.iter().position(|&t| t == temperature)?;
        Some(&self.cells[r][c])
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().flatten().all(|c| !c.failed())
    }

    /// Delimited text: one row per strategy, an understanding and an
    /// execution column per temperature, values in percent. Failed cells
    /// read `failed`.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["strategy".to_string()];
        for t in &self.temperatures {
            header.push(format!("au_tau_{t}"));
        }
        for t in &self.temperatures {
            header.push(format!("ee_tau_{t}"));
        }
        let mut out = header.join(",");
        out.push('\n');
        let pct = |v: Option<f64>| {
            v.map_or_else(|| "failed".to_string(), |x| format!("{:.1}", 100.0 * x))
        };
        for (s, row) in self.strategies.iter().zip(&self.cells) {
            let mut fields = vec![s.label().to_string()];
            fields.extend(row.iter().map(|c| pct(c.au_accuracy)));
            fields.extend(row.iter().map(|c| pct(c.ee_success)));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn run_cell(
    ds: &Dataset,
    base: &TrainConfig,
    strategy: PairStrategy,
    tau: f64,
    seeds: &[u64],
) -> AblationCell {
    let (mut au, mut ee, mut mi, mut failures) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &seed in seeds {
        let cfg = TrainConfig {
            strategy,
            align_temperature: tau,
            seed,
            ..base.clone()
        };
        match train_joint(ds, &cfg) {
            Ok(run) => {
                if let Some(msg) = run.divergence {
                    failures.push(format!("seed {seed}: {msg}"));
                    continue;
                }
                match run.metrics.last() {
                    Some(last) => {
                        au.extend(last.au_accuracy);
                        ee.extend(last.ee_success);
                        mi.extend(last.mi_lower_bound);
                    }
                    None => failures.push(format!("seed {seed}: no epochs were run")),
                }
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    AblationCell {
        strategy,
        temperature: tau,
        seeds: seeds.to_vec(),
        au_accuracy: mean(&au),
        ee_success: mean(&ee),
        mi_lower_bound: mean(&mi),
        failures,
    }
}

/// Runs one joint training per `(strategy, temperature, seed)`. A failing
/// cell is recorded in the table and the rest of the grid still runs.
pub fn run_ablation(
    ds: &Dataset,
    base: &TrainConfig,
    grid: &AblationGrid,
) -> Result<AblationTable> {
    if grid.strategies.is_empty() || grid.temperatures.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Config(
            "ablation grid needs at least one strategy, temperature and seed".into(),
        ));
    }
    let jobs: Vec<(PairStrategy, f64)> = grid
        .strategies
        .iter()
        .flat_map(|&s| grid.temperatures.iter().map(move |&t| (s, t)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = grid.threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start ablation workers: {e}")))?;
    let flat: Vec<AblationCell> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(s, t)| run_cell(ds, base, s, t, &grid.seeds))
            .collect()
    });
    let cols = grid.temperatures.len();
    let cells = flat.chunks(cols).map(|c| c.to_vec()).collect();
    Ok(AblationTable {
        strategies: grid.strategies.clone(),
        temperatures: grid.temperatures.clone(),
        cells,
    })
}
