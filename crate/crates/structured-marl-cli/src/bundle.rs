//! Aggregated results of a seed sweep and their file renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use structured_marl::builtin::Experiment;
use structured_marl::env::RNG_NAME;
use structured_marl::mastac::RunRecord;

use crate::sweep::SeedRun;

/// Share of the final epochs in the summary statistic.
pub const FINAL_FRACTION: f64 = 0.2;

pub const CSV_HEADER: [&str; 6] = ["run_id", "variant", "seed", "epoch", "episode_return", "smoothed_return"];

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { n, mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub epoch: usize,
    pub episode_return: Stat,
    pub smoothed_return: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub run_id: String,
    pub failed: Option<String>,
    pub final_fraction_mean: Option<f64>,
    pub max_abs_reward: Option<f64>,
    pub updates: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metadata {
    pub config_hash: String,
    pub rng: String,
    pub library_version: String,
    pub cli_version: String,
    pub experiment: Experiment,
}

/// Per-seed records, their aggregate and the run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultBundle {
    pub runs: Vec<SeedRun>,
    /// Per-epoch statistics over the seeds that finished.
    pub aggregate: Vec<AggregateRow>,
    /// Across-seed statistic of each seed's final-fraction mean.
    pub final_fraction: Option<Stat>,
    pub metadata: Metadata,
}

/// SHA-256 of the canonical JSON of the experiment.
pub fn config_hash(exp: &Experiment) -> String {
    let text = serde_json::to_string(exp).expect("experiment serializes");
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn run_id(exp: &Experiment, seed: u64) -> String {
    format!("{}-{}-s{seed}", exp.name, exp.train.variant)
}

impl ResultBundle {
    pub fn new(exp: &Experiment, runs: Vec<SeedRun>) -> Self {
        let done: Vec<&RunRecord> = runs.iter().filter_map(SeedRun::record).collect();
        let k = done.iter().map(|r| r.episode_return.len()).min().unwrap_or(0);
        let aggregate = (0..k)
            .map(|e| {
                let ep: Vec<f64> = done.iter().map(|r| r.episode_return[e]).collect();
                let sm: Vec<f64> = done.iter().map(|r| r.smoothed_return[e]).collect();
                AggregateRow { epoch: e, episode_return: Stat::of(&ep).expect("nonempty"), smoothed_return: Stat::of(&sm).expect("nonempty") }
            })
            .collect();
        let finals: Vec<f64> = done.iter().filter_map(|r| r.final_fraction_mean(FINAL_FRACTION)).collect();
        let metadata = Metadata {
            config_hash: config_hash(exp),
            rng: RNG_NAME.to_string(),
            library_version: structured_marl::VERSION.to_string(),
            cli_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: exp.clone(),
        };
        Self { runs, aggregate, final_fraction: Stat::of(&finals), metadata }
    }

    pub fn failed_seeds(&self) -> Vec<u64> {
        self.runs.iter().filter(|r| r.outcome.is_err()).map(|r| r.seed).collect()
    }

    pub fn summaries(&self) -> Vec<SeedSummary> {
        self.runs
            .iter()
            .map(|r| {
                let rec = r.record();
                SeedSummary {
                    seed: r.seed,
                    run_id: run_id(&self.metadata.experiment, r.seed),
                    failed: r.outcome.as_ref().err().cloned(),
                    final_fraction_mean: rec.and_then(|x| x.final_fraction_mean(FINAL_FRACTION)),
                    max_abs_reward: rec.map(|x| x.max_abs_reward),
                    updates: rec.map(|x| x.updates),
                }
            })
            .collect()
    }

    /// One row per epoch per finished seed.
    pub fn runs_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        let exp = &self.metadata.experiment;
        let variant = exp.train.variant.to_string();
        for run in &self.runs {
            if let Some(rec) = run.record() {
                let id = run_id(exp, run.seed);
                for e in 0..rec.episode_return.len() {
                    w.write_record([
                        id.clone(),
                        variant.clone(),
                        run.seed.to_string(),
                        e.to_string(),
                        rec.episode_return[e].to_string(),
                        rec.smoothed_return[e].to_string(),
                    ])?;
                }
            }
        }
        Ok(w.into_inner()?)
    }

    pub fn aggregate_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "n_seeds", "mean_episode_return", "std_episode_return", "mean_smoothed_return", "std_smoothed_return"])?;
        for row in &self.aggregate {
            w.write_record([
                row.epoch.to_string(),
                row.episode_return.n.to_string(),
                row.episode_return.mean.to_string(),
                row.episode_return.std.to_string(),
                row.smoothed_return.mean.to_string(),
                row.smoothed_return.std.to_string(),
            ])?;
        }
        Ok(w.into_inner()?)
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            metadata: &'a Metadata,
            seeds: Vec<SeedSummary>,
            failed_seeds: Vec<u64>,
            final_fraction: f64,
            final_fraction_stat: Option<Stat>,
            epochs_recorded: usize,
        }
        let s = Summary {
            metadata: &self.metadata,
            seeds: self.summaries(),
            failed_seeds: self.failed_seeds(),
            final_fraction: FINAL_FRACTION,
            final_fraction_stat: self.final_fraction,
            epochs_recorded: self.aggregate.len(),
        };
        Ok(serde_json::to_string_pretty(&s)? + "\n")
    }

    pub fn svg(&self) -> String {
        let exp = &self.metadata.experiment;
        svg_chart(&format!("{} {} smoothed return, mean ± std over seeds", exp.name, exp.train.variant), &self.aggregate)
    }

    /// Writes `runs.csv`, `aggregate.csv`, `curve.svg`, `bundle.json` and the
    /// per-agent checkpoints under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("runs.csv"), self.runs_csv()?)?;
        fs::write(dir.join("aggregate.csv"), self.aggregate_csv()?)?;
        fs::write(dir.join("curve.svg"), self.svg())?;
        fs::write(dir.join("bundle.json"), self.summary_json()?)?;
        for run in &self.runs {
            if let Ok((_, checkpoints)) = &run.outcome {
                let sub = dir.join("checkpoints").join(format!("seed{}", run.seed));
                fs::create_dir_all(&sub)?;
                for c in checkpoints {
                    for (tag, net) in [("actor", &c.actor), ("critic", &c.critic), ("target_actor", &c.target_actor), ("target_critic", &c.target_critic)] {
                        fs::write(sub.join(format!("agent{}_{tag}.json", c.agent)), serde_json::to_string(net)?)?;
                    }
                }
            }
        }
        Ok(())
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const MAX_POINTS: usize = 1000;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Polyline of the mean with a shaded ±std band.
pub fn svg_chart(title: &str, rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    if rows.is_empty() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">no data</text>"#, WIDTH / 2.0, HEIGHT / 2.0);
        out.push_str("</svg>\n");
        return out;
    }
    let step = rows.len().div_ceil(MAX_POINTS).max(1);
    let picked: Vec<&AggregateRow> = rows.iter().step_by(step).chain(rows.last()).collect();
    let lo = picked.iter().map(|r| r.smoothed_return.mean - r.smoothed_return.std).fold(f64::INFINITY, f64::min);
    let hi = picked.iter().map(|r| r.smoothed_return.mean + r.smoothed_return.std).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let last = rows.last().map(|r| r.epoch).unwrap_or(0).max(1) as f64;
    let x = |e: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * e as f64 / last;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>"#,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for (v, pos) in [(lo, y(lo)), (hi, y(hi))] {
        let _ = writeln!(out, r#"<text x="{}" y="{pos:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">epoch (0 to {})</text>"#, WIDTH / 2.0, HEIGHT - 20.0, last);
    let mut band = String::new();
    for r in &picked {
        let _ = write!(band, "{:.2},{:.2} ", x(r.epoch), y(r.smoothed_return.mean + r.smoothed_return.std));
    }
    for r in picked.iter().rev() {
        let _ = write!(band, "{:.2},{:.2} ", x(r.epoch), y(r.smoothed_return.mean - r.smoothed_return.std));
    }
    let _ = writeln!(out, r#"<polygon points="{}" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#, band.trim_end());
    let line: Vec<String> = picked.iter().map(|r| format!("{:.2},{:.2}", x(r.epoch), y(r.smoothed_return.mean))).collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, line.join(" "));
    out.push_str("</svg>\n");
    out
}
