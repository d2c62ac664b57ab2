use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use structured_marl::coupling::{derive_index_sets, AgentSet, CouplingGraphs, TimeVaryingIndexSets};
use structured_marl::dependency::{
    deps_records, kappa_dependency, value_dependency, value_dependency_fixed_point, vd_edges_one_based, DependencySets, DepsRecord,
};
use structured_marl::fixtures;
use structured_marl::mabn::FoldedMabn;
use structured_marl::mastac::{Precision, Variant};
use structured_marl::suites::{run_suite, run_variance_lab, VarianceLabConfig, SUITE_NAMES};
use structured_marl_cli::{parse_seeds, run_seeds, thread_count, ExperimentSpec, ResultBundle};

#[derive(Parser, Debug)]
#[command(name = "structured-marl", version, about = "Dependency inspection, structured actor-critic training and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-agent I_Q, I_GD and I_Qhat of a coupling-graph file or fixture name.
    Deps {
        #[arg(long)]
        graphs: String,
        /// Add κ-truncated value sets.
        #[arg(long)]
        kappa: Option<usize>,
        /// Finite-horizon sets I_Q(0, T) instead of the fixed point.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Train one variant over a list of seeds and write CSV, SVG and JSON results.
    Train {
        /// Builtin name or JSON configuration file.
        #[arg(long)]
        env: String,
        /// exact | kappa:K | undecq | undecqhat
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        kappa: Option<usize>,
        /// Coupling-graph file replacing the configured graphs.
        #[arg(long)]
        graphs: Option<PathBuf>,
        /// `a..b` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        epochs: Option<usize>,
        /// f32 | f64
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite and print its JSON verdict.
    Verify {
        #[arg(long)]
        suite: String,
        /// Shrink the dependency sets first; the theorem1 suite must then fail.
        #[arg(long)]
        mutate: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare global and decomposed policy-gradient estimators on the tabular lab instance.
    VarianceLab {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_graphs(name_or_path: &str) -> Result<CouplingGraphs> {
    if Path::new(name_or_path).exists() {
        return Ok(CouplingGraphs::from_file(name_or_path)?);
    }
    fixtures::by_name(name_or_path).with_context(|| format!("`{name_or_path}` is neither a file nor a fixture name"))
}

fn one_based(s: &AgentSet) -> Vec<usize> {
    s.iter().map(|j| j + 1).collect()
}

fn cmd_deps(graphs: &str, kappa: Option<usize>, horizon: Option<usize>) -> Result<String> {
    let g = load_graphs(graphs)?;
    let idx = derive_index_sets(&g)?;
    let (records, vd) = match horizon {
        None => (deps_records(&g, kappa)?, value_dependency_fixed_point(&idx)),
        Some(t) => {
            let vd = value_dependency(&TimeVaryingIndexSets::constant(&idx, t), 0, t)?;
            let d = DependencySets::from_value_dependency(&vd);
            let kap = kappa.map(|k| kappa_dependency(&FoldedMabn::build(&idx), k));
            let records: Vec<DepsRecord> = (0..g.n_agents)
                .map(|i| DepsRecord {
                    agent: i + 1,
                    i_q: one_based(&d.i_q[i]),
                    i_gd: one_based(&d.i_gd[i]),
                    i_qhat: one_based(&d.i_qhat[i]),
                    kappa,
                    i_q_kappa: kap.as_ref().map(|k| one_based(&k.sets[i])),
                })
                .collect();
            (records, vd)
        }
    };
    let report = json!({
        "n_agents": g.n_agents,
        "horizon": horizon,
        "agents": records,
        "vd_edges": vd_edges_one_based(&vd),
        "vd_complete": vd.is_complete(),
        "vd_strongly_connected_components": vd.strongly_connected_components(),
    });
    Ok(serde_json::to_string_pretty(&report)? + "\n")
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_train(spec: &ExperimentSpec) -> Result<bool> {
    let exp = spec.resolve()?;
    let threads = thread_count()?;
    eprintln!(
        "training {} ({}) for {} epochs on seeds {:?} with {} worker(s)",
        exp.name, exp.train.variant, exp.train.epochs, spec.seeds, threads
    );
    let runs = run_seeds(&exp, &spec.seeds, threads)?;
    let bundle = ResultBundle::new(&exp, runs);
    bundle.write(&spec.out)?;
    for s in bundle.summaries() {
        match (&s.failed, s.final_fraction_mean) {
            (Some(err), _) => eprintln!("seed {}: FAILED: {err}", s.seed),
            (None, Some(f)) => eprintln!("seed {}: final-20% mean episode return {f:.4}", s.seed),
            (None, None) => eprintln!("seed {}: no epochs recorded", s.seed),
        }
    }
    if let Some(st) = bundle.final_fraction {
        eprintln!("final-20% over {} seed(s): {:.4} ± {:.4}", st.n, st.mean, st.std);
    }
    eprintln!("results written to {}", spec.out.display());
    Ok(bundle.failed_seeds().len() < spec.seeds.len())
}

fn parse_precision(text: &str) -> Result<Precision> {
    match text.to_ascii_lowercase().as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => bail!("unknown precision `{other}` (expected f32 or f64)"),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Deps { graphs, kappa, horizon } => {
            print!("{}", cmd_deps(&graphs, kappa, horizon)?);
            Ok(true)
        }
        Command::Train { env, variant, kappa, graphs, seeds, epochs, precision, out } => {
            let spec = ExperimentSpec {
                env,
                graphs,
                variant,
                kappa,
                seeds: parse_seeds(&seeds)?,
                epochs,
                precision: precision.as_deref().map(parse_precision).transpose()?,
                out,
            };
            cmd_train(&spec)
        }
        Command::Verify { suite, mutate, out } => {
            if !SUITE_NAMES.contains(&suite.as_str()) {
                bail!("unknown suite `{suite}` (expected one of {})", SUITE_NAMES.join(", "));
            }
            let report = run_suite(&suite, mutate)?;
            emit(&(serde_json::to_string_pretty(&report)? + "\n"), out.as_deref())?;
            Ok(report.passed)
        }
        Command::VarianceLab { config, out } => {
            let cfg: VarianceLabConfig = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => VarianceLabConfig::default(),
            };
            let outcome = run_variance_lab(&cfg)?;
            emit(&(serde_json::to_string_pretty(&outcome)? + "\n"), out.as_deref())?;
            Ok(outcome.sign_holds && outcome.within_bounds)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
