//! Seed sweeps over one experiment.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use structured_marl::builtin::{resolve_experiment, Experiment};
use structured_marl::coupling::CouplingGraphs;
use structured_marl::mastac::{train_with_checkpoints, AgentCheckpoints, Precision, RunRecord, Variant};

/// Environment variable capping the number of seeds trained at once.
pub const THREADS_ENV: &str = "STRUCTURED_MARL_THREADS";

/// What to train and where to put the results.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    /// Builtin name or path of a JSON configuration.
    pub env: String,
    pub graphs: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub kappa: Option<usize>,
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub precision: Option<Precision>,
    pub out: PathBuf,
}

impl ExperimentSpec {
    pub fn new(env: &str, seeds: Vec<u64>, out: impl Into<PathBuf>) -> Self {
        Self { env: env.to_string(), graphs: None, variant: None, kappa: None, seeds, epochs: None, precision: None, out: out.into() }
    }

    /// The experiment with every override of this spec applied.
    pub fn resolve(&self) -> Result<Experiment> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        let mut exp = resolve_experiment(&self.env)?;
        if let Some(path) = &self.graphs {
            let g = CouplingGraphs::from_file(path)?;
            if g.n_agents != exp.graphs.n_agents {
                bail!("graph file has {} agents, {} needs {}", g.n_agents, exp.name, exp.graphs.n_agents);
            }
            exp.graphs = g;
        }
        exp.train.variant = match (self.variant, self.kappa) {
            (Some(v), None) => v,
            (None, Some(k)) | (Some(Variant::Kappa(_)), Some(k)) => Variant::Kappa(k),
            (Some(v), Some(_)) => bail!("--kappa conflicts with variant {v}"),
            (None, None) => exp.train.variant,
        };
        if let Some(e) = self.epochs {
            exp.train.epochs = e;
        }
        if let Some(p) = self.precision {
            exp.train.precision = p;
        }
        exp.train.validate()?;
        exp.build_env()?;
        Ok(exp)
    }
}

/// `a..b` (inclusive), `a,b,c` or a single seed.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().with_context(|| format!("bad seed range `{text}`"))?;
        let b: u64 = b.trim_start_matches('=').trim().parse().with_context(|| format!("bad seed range `{text}`"))?;
        if b < a {
            bail!("empty seed range `{text}`");
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        bail!("duplicate seeds in `{text}`");
    }
    Ok(seeds)
}

/// Worker count from [`THREADS_ENV`], else the available parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Outcome of one seed; failures keep their diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: std::result::Result<(RunRecord, Vec<AgentCheckpoints>), String>,
}

impl SeedRun {
    pub fn record(&self) -> Option<&RunRecord> {
        self.outcome.as_ref().ok().map(|(r, _)| r)
    }
}

/// Trains every seed, at most `threads` at a time; results are in seed-list order.
pub fn run_seeds(exp: &Experiment, seeds: &[u64], threads: usize) -> Result<Vec<SeedRun>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    Ok(pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let mut cfg = exp.train.clone();
                cfg.seed = seed;
                let outcome = exp
                    .build_env()
                    .and_then(|env| train_with_checkpoints(env.as_ref(), &cfg))
                    .map_err(|e| e.to_string());
                SeedRun { seed, outcome }
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..14").unwrap(), (0..15).collect::<Vec<_>>());
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("4, 1,9").unwrap(), vec![4, 1, 9]);
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn overrides() {
        let mut spec = ExperimentSpec::new("warehouse9", vec![0], "/tmp/unused");
        spec.kappa = Some(2);
        spec.epochs = Some(12);
        let exp = spec.resolve().unwrap();
        assert_eq!(exp.train.variant, Variant::Kappa(2));
        assert_eq!(exp.train.epochs, 12);
        spec.variant = Some(Variant::UndecomposedQ);
        assert!(spec.resolve().is_err());
        spec.seeds.clear();
        spec.kappa = None;
        assert!(spec.resolve().is_err());
    }
}
