//! Cross-product sweeps over budgets, K, methods and seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use orso::orchestrator::Method;
use orso::sandbox::Grid;
use orso::{GeneratorSpec, RunSummary};
use rayon::prelude::*;

use crate::config::{LoadedConfig, RunOverrides};
use crate::output::{self, mean_se, CURVE_HEADER, SUMMARY_HEADER};
use crate::GeneratorSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub budget: u64,
    pub k: usize,
    pub algo: Method,
    pub seed: u64,
}

impl Job {
    pub fn id(&self) -> String {
        format!("b{}-k{}-{}-s{}", self.budget, self.k, self.algo, self.seed)
    }

    fn overrides(&self) -> RunOverrides {
        RunOverrides {
            algo: Some(self.algo),
            budget: Some(self.budget),
            k: Some(self.k),
            seed: Some(self.seed),
            record_wall_time: false,
        }
    }
}

pub fn jobs(cfg: &LoadedConfig) -> Vec<Job> {
    let s = &cfg.config.sweep;
    let mut out = Vec::new();
    for &budget in &s.budgets {
        for &k in &s.k {
            for &algo in &s.algos {
                for &seed in &s.seeds {
                    out.push(Job { budget, k, algo, seed });
                }
            }
        }
    }
    out
}

/// Best-so-far and regret samples across seeds, per step.
type Steps = BTreeMap<u64, (Vec<f64>, Vec<f64>)>;

struct Completed {
    summary: RunSummary,
    curve: Vec<(u64, f64, f64)>,
}

pub struct SweepOutcome {
    pub completed: usize,
    pub failed: usize,
}

/// Runs every job on a pool of `workers` threads. Each run writes its own
/// directory under `runs/`; the tables are merged afterwards on this thread.
pub fn run_sweep(
    cfg: &LoadedConfig,
    grid: &Grid,
    generator: &GeneratorSpec,
    source: &GeneratorSource,
    out: &Path,
    workers: usize,
) -> Result<SweepOutcome, String> {
    let jobs = jobs(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| format!("cannot start worker pool: {e}"))?;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| format!("cannot create {}: {e}", runs_dir.display()))?;

    let results: Vec<(Job, Result<Completed, String>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let result = (|| {
                    let run_cfg = cfg.run_config(&job.overrides()).map_err(|e| e.to_string())?;
                    let mut run = crate::execute(cfg, &run_cfg, grid, generator, source)?;
                    let dir = runs_dir.join(job.id());
                    fs::create_dir_all(&dir)
                        .and_then(|_| output::write_run(&dir, &mut run))
                        .map_err(|e| format!("writing {}: {e}", dir.display()))?;
                    let curve = output::curve(&run.records, run.summary.j_ref);
                    Ok(Completed {
                        summary: run.summary,
                        curve,
                    })
                })();
                if let Err(e) = &result {
                    log::warn!("run {} failed: {e}", job.id());
                }
                (*job, result)
            })
            .collect()
    });

    let io = |e: std::io::Error| format!("writing sweep tables: {e}");
    let mut table = format!("{SUMMARY_HEADER}\n");
    let mut failures = String::from("budget,k,algo,seed,error\n");
    let mut curves = format!("budget,k,algo,seed,{CURVE_HEADER}\n");
    let mut groups: BTreeMap<(u64, usize, &str), Steps> = BTreeMap::new();
    let mut failed = 0;
    for (job, result) in &results {
        match result {
            Ok(done) => {
                table.push_str(&output::summary_row(&done.summary));
                table.push('\n');
                let group = groups.entry((job.budget, job.k, job.algo.name())).or_default();
                for &(step, best, regret) in &done.curve {
                    let _ = writeln!(
                        curves,
                        "{},{},{},{},{step},{best},{regret}",
                        job.budget, job.k, job.algo, job.seed
                    );
                    let cell = group.entry(step).or_default();
                    cell.0.push(best);
                    cell.1.push(regret);
                }
            }
            Err(e) => {
                failed += 1;
                let msg = e.replace(['\n', ','], " ");
                let _ = writeln!(failures, "{},{},{},{},{msg}", job.budget, job.k, job.algo, job.seed);
            }
        }
    }
    let mut aggregate = String::from("budget,k,algo,step,n,mean_best_so_far,se_best_so_far,mean_regret,se_regret\n");
    for ((budget, k, algo), steps) in &groups {
        for (step, (best, regret)) in steps {
            let (mb, sb) = mean_se(best);
            let (mr, sr) = mean_se(regret);
            let _ = writeln!(aggregate, "{budget},{k},{algo},{step},{},{mb},{sb},{mr},{sr}", best.len());
        }
    }
    fs::write(out.join("sweep.csv"), table).map_err(io)?;
    fs::write(out.join("failures.csv"), failures).map_err(io)?;
    fs::write(out.join("curves.csv"), curves).map_err(io)?;
    fs::write(out.join("aggregate.csv"), aggregate).map_err(io)?;
    Ok(SweepOutcome {
        completed: results.len() - failed,
        failed,
    })
}
