//! Experiment harness for evolving and analyzing DFJSS dispatching rules.
//!
//! Exit codes: 0 success, 2 config error, 3 io error, 4 runtime error.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ExperimentConfig;
use error::CliError;
use transgp::gp::test_seed_list;
use transgp::neural::{TrainConfig, TransformerConfig};
use transgp::sim::{stock_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "transgp",
    about = "Evolve, train, and analyze dispatching heuristics for dynamic flexible job shops",
    version
)]
struct Cli {
    /// Experiment config file (TOML); flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sampling temperature for guided mutation and generation.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Task-switch probability for TGP and guided mutation.
    #[arg(long, global = true)]
    task_switch_prob: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one seeded instance under a heuristic or handcrafted rules.
    Simulate {
        /// Scenario config TOML (defaults to the stock <Fmean-0.85-8> shop).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Heuristic JSON file.
        #[arg(long)]
        heuristic: Option<PathBuf>,
        /// Handcrafted pair such as SPT+NIQ.
        #[arg(long)]
        rule: Option<String>,
    },
    /// Run GP / TGP / TransGP evolution and write run artifacts.
    Evolve {
        /// GP, TGP, or TransGP (overrides the config file).
        #[arg(long)]
        method: Option<String>,
        /// Stock scenario index 1..=3.
        #[arg(long)]
        scenario: Option<usize>,
        /// Independent runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Sequencing model file (TransGP).
        #[arg(long)]
        model_sequencing: Option<PathBuf>,
        /// Routing model file (TransGP).
        #[arg(long)]
        model_routing: Option<PathBuf>,
        /// Population size override.
        #[arg(long)]
        pop_size: Option<usize>,
        /// Generation count override.
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Harvest elite rules from run directories into dataset files.
    Collect {
        /// Run directories (each with archive.tgpdata and manifest.json).
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        #[arg(long, default_value_t = 20)]
        last_gens: usize,
    },
    /// Train the sequencing and routing models from dataset files.
    Train {
        #[arg(long)]
        dataset_sequencing: PathBuf,
        #[arg(long)]
        dataset_routing: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Model width (d_model); feedforward width follows as 4x.
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Evaluate the 4x2 handcrafted rule grid on a scenario.
    Baseline {
        #[arg(long)]
        scenario: Option<usize>,
        /// Held-out seeds to average over.
        #[arg(long, default_value_t = 30)]
        test_seeds: usize,
        #[arg(long, default_value_t = 124)]
        num_jobs: usize,
    },
    /// Sample complete rule pairs from trained models and evaluate them.
    PureTrans {
        #[arg(long)]
        model_sequencing: PathBuf,
        #[arg(long)]
        model_routing: PathBuf,
        #[arg(long)]
        scenario: Option<usize>,
        /// Number of sampled pairs.
        #[arg(long, default_value_t = 30)]
        samples: usize,
    },
    /// Size / usage / similarity / pattern reports over heuristic files or
    /// run directories.
    Analyze {
        inputs: Vec<PathBuf>,
    },
    /// Wilcoxon rank-sum significance of B against A per task.
    Stats {
        a: PathBuf,
        b: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }

    // Experiment-level config: file, then flag overrides.
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(t) = cli.temperature {
        if t <= 0.0 {
            return Err(CliError::Config("temperature must be positive".into()));
        }
        cfg.guided.temperature = t;
    }
    if let Some(p) = cli.task_switch_prob {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::Config("task switch probability must be in [0, 1]".into()));
        }
        cfg.guided.task_switch_prob = p;
        cfg.evo.task_switch_prob = p;
    }

    match cli.command {
        Command::Simulate {
            scenario,
            heuristic,
            rule,
        } => {
            let scenario_cfg = match scenario {
                Some(path) => ScenarioConfig::load(&path)?,
                None => ScenarioConfig::default(),
            };
            let seed = cli.seed.unwrap_or(scenario_cfg.seed);
            let out = cli.out.unwrap_or_else(|| PathBuf::from("simulation.csv"));
            let objective = commands::cmd_simulate(
                &scenario_cfg,
                seed,
                heuristic.as_deref(),
                rule.as_deref(),
                &out,
            )?;
            println!(
                "{} = {objective} on {} (seed {seed}) -> {}",
                scenario_cfg.task.objective.name(),
                scenario_cfg.task.id(),
                out.display()
            );
        }
        Command::Evolve {
            method,
            scenario,
            runs,
            model_sequencing,
            model_routing,
            pop_size,
            generations,
        } => {
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = scenario {
                cfg.scenario = s;
                cfg.tasks.clear();
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(p) = model_sequencing {
                cfg.model_sequencing = Some(p);
            }
            if let Some(p) = model_routing {
                cfg.model_routing = Some(p);
            }
            if let Some(p) = pop_size {
                cfg.evo.pop_size = p;
            }
            if let Some(g) = generations {
                cfg.evo.generations = g;
            }
            let dir = commands::cmd_evolve(&cfg)?;
            println!(
                "{} x{} runs on {} -> {}",
                cfg.method,
                cfg.runs,
                cfg.scenario,
                dir.display()
            );
        }
        Command::Collect {
            run_dirs,
            top_k,
            last_gens,
        } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("elites"));
            commands::cmd_collect(&run_dirs, top_k, last_gens, &out)?;
        }
        Command::Train {
            dataset_sequencing,
            dataset_routing,
            epochs,
            batch_size,
            learning_rate,
            d_model,
            heads,
            layers,
        } => {
            let mut mcfg = TransformerConfig::default();
            if let Some(d) = d_model {
                mcfg.d_model = d;
                mcfg.d_ff = 4 * d;
            }
            if let Some(h) = heads {
                mcfg.heads = h;
            }
            if let Some(l) = layers {
                mcfg.layers = l;
            }
            let mut tcfg = TrainConfig {
                seed: cfg.master_seed,
                ..TrainConfig::default()
            };
            if let Some(e) = epochs {
                tcfg.epochs = e;
            }
            if let Some(b) = batch_size {
                tcfg.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                tcfg.learning_rate = lr;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("models"));
            commands::cmd_train(&dataset_sequencing, &dataset_routing, &mcfg, &tcfg, &out)?;
        }
        Command::Baseline {
            scenario,
            test_seeds,
            num_jobs,
        } => {
            let tasks = match scenario {
                Some(s) => stock_scenario(s)
                    .ok_or_else(|| CliError::Config(format!("unknown scenario {s}")))?,
                None => cfg.resolve_tasks()?,
            };
            let seeds_list = test_seed_list(cfg.master_seed, test_seeds);
            let out = cli.out.unwrap_or_else(|| PathBuf::from("baseline.csv"));
            let rows = commands::cmd_baseline(&tasks, &seeds_list, num_jobs, &out)?;
            for (task, values) in rows {
                let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
                println!("{task}: best handcrafted mean {best}");
            }
            println!("-> {}", out.display());
        }
        Command::PureTrans {
            model_sequencing,
            model_routing,
            scenario,
            samples,
        } => {
            let tasks = match scenario {
                Some(s) => stock_scenario(s)
                    .ok_or_else(|| CliError::Config(format!("unknown scenario {s}")))?,
                None => cfg.resolve_tasks()?,
            };
            let seeds_list = test_seed_list(cfg.master_seed, cfg.evo.test_seed_count);
            let out = cli.out.unwrap_or_else(|| PathBuf::from("pure_trans.csv"));
            commands::cmd_pure_trans(
                &model_sequencing,
                &model_routing,
                &tasks,
                samples,
                &seeds_list,
                &cfg.evo,
                &cfg.guided,
                cfg.master_seed,
                &out,
            )?;
            println!("-> {}", out.display());
        }
        Command::Analyze { inputs } => {
            if inputs.is_empty() {
                return Err(CliError::Config("no inputs to analyze".into()));
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("analysis"));
            commands::cmd_analyze(&inputs, &out)?;
            println!("-> {}", out.display());
        }
        Command::Stats { a, b } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("stats.csv"));
            let table = commands::cmd_stats(&a, &b, &out)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
