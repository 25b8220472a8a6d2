//! Subcommand implementations and experiment plumbing.
//!
//! Directory layout for evolution experiments:
//! `out/<method>/s<scenario>/run<k>/{log.csv, best_task<j>.json, archive.tgpdata, manifest.json}`
//! plus `test_performance.csv` / `test_summary.csv` at the method level.
//! Every seed is derived from the experiment master seed and recorded in the
//! manifests, so rerunning with the same config reproduces the artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use transgp::analysis;
use transgp::dataset::{collect_elites, EliteDataset, EliteRecord, RuleKind};
use transgp::expr::{ExprTree, Heuristic, Token};
use transgp::gp::{
    run_evolution, test_heuristic, test_seed_list, EvoConfig, EvolutionLog, RankedEntry,
    StandardMutation, TaskTagMutation, VariationOperator,
};
use transgp::guided::{
    pure_trans_baseline, GuidedConfig, GuidedModels, GuidedVariation,
};
use transgp::neural::{load_params, save_params, train, TrainConfig, TransformerConfig};
use transgp::seeds::{self, domain};
use transgp::sim::{
    audit, generate_instance, run_simulation_with, stock_scenario, write_result_csv, RouteRule,
    ScenarioConfig, SeqRule, TaskSpec,
};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Stock scenario index (1..=3); ignored when `tasks` is nonempty.
    pub scenario: usize,
    /// Custom task list overriding the stock scenario.
    pub tasks: Vec<TaskSpec>,
    pub method: String,
    pub runs: usize,
    pub master_seed: u64,
    pub out: PathBuf,
    pub model_sequencing: Option<PathBuf>,
    pub model_routing: Option<PathBuf>,
    pub evo: EvoConfig,
    pub guided: GuidedConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: 2,
            tasks: Vec::new(),
            method: "GP".into(),
            runs: 1,
            master_seed: 42,
            out: PathBuf::from("out"),
            model_sequencing: None,
            model_routing: None,
            evo: EvoConfig::default(),
            guided: GuidedConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve_tasks(&self) -> Result<Vec<TaskSpec>, CliError> {
        if !self.tasks.is_empty() {
            return Ok(self.tasks.clone());
        }
        stock_scenario(self.scenario)
            .ok_or_else(|| CliError::Config(format!("unknown scenario {}", self.scenario)))
    }

    fn scenario_label(&self) -> String {
        if self.tasks.is_empty() {
            format!("s{}", self.scenario)
        } else {
            "custom".into()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Runs the configured evolution method for `runs` independent seeds and
/// writes all per-run artifacts plus the cross-run test performance tables.
pub fn cmd_evolve(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let tasks = cfg.resolve_tasks()?;
    match cfg.method.as_str() {
        "GP" => evolve_runs(cfg, &tasks, &StandardMutation),
        "TGP" => evolve_runs(cfg, &tasks, &TaskTagMutation),
        "TransGP" => {
            let seq_path = cfg.model_sequencing.as_ref().ok_or_else(|| {
                CliError::Config("method TransGP requires model_sequencing".into())
            })?;
            let route_path = cfg.model_routing.as_ref().ok_or_else(|| {
                CliError::Config("method TransGP requires model_routing".into())
            })?;
            if !seq_path.exists() || !route_path.exists() {
                return Err(CliError::Config(format!(
                    "model file missing: {} / {}",
                    seq_path.display(),
                    route_path.display()
                )));
            }
            let models = GuidedModels {
                sequencing: load_params(seq_path)?,
                routing: load_params(route_path)?,
            };
            let varop = GuidedVariation {
                models: &models,
                gcfg: cfg.guided.clone(),
            };
            evolve_runs(cfg, &tasks, &varop)
        }
        other => Err(CliError::Config(format!(
            "unknown method {other}; expected GP, TGP, or TransGP"
        ))),
    }
}

fn evolve_runs(
    cfg: &ExperimentConfig,
    tasks: &[TaskSpec],
    varop: &dyn VariationOperator,
) -> Result<PathBuf, CliError> {
    let method_dir = cfg.out.join(&cfg.method).join(cfg.scenario_label());
    fs::create_dir_all(&method_dir)?;
    let test_seeds = test_seed_list(cfg.master_seed, cfg.evo.test_seed_count);

    let mut perf_rows = String::from("run,task_id,test_value\n");
    let mut per_task_values: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];

    for run in 0..cfg.runs {
        let run_seed = seeds::derive(cfg.master_seed, domain::RUN, run as u64);
        let log = run_evolution(&cfg.evo, tasks, varop, run_seed)?;
        let run_dir = method_dir.join(format!("run{run}"));
        fs::create_dir_all(&run_dir)?;

        let mut log_csv = Vec::new();
        log.write_csv(&mut log_csv)?;
        write_file(&run_dir.join("log.csv"), &String::from_utf8(log_csv).unwrap())?;

        // Full archive dump for later elite harvesting.
        let archive = collect_elites(std::slice::from_ref(&log), usize::MAX, log.archive.len())?;
        archive
            .save(&run_dir.join("archive.tgpdata"))
            .map_err(CliError::from)?;

        for (t, best) in log.best.iter().enumerate() {
            let value = test_heuristic(&best.heuristic, &tasks[t], &test_seeds, cfg.evo.num_jobs);
            perf_rows.push_str(&format!("{run},{},{value}\n", tasks[t].id()));
            per_task_values[t].push(value);
            let json = best.heuristic.to_json();
            write_file(
                &run_dir.join(format!("best_task{t}.json")),
                &serde_json::to_string_pretty(&json).unwrap(),
            )?;
        }

        let manifest = serde_json::json!({
            "method": cfg.method,
            "scenario": cfg.scenario_label(),
            "tasks": tasks.iter().map(|t| t.id()).collect::<Vec<_>>(),
            "run_index": run,
            "master_seed": cfg.master_seed,
            "run_seed": run_seed,
            "generation_seeds": log.generation_seeds,
            "test_seeds": test_seeds,
            "evo": cfg.evo,
            "guided": cfg.guided,
        });
        write_file(
            &run_dir.join("manifest.json"),
            &serde_json::to_string_pretty(&manifest).unwrap(),
        )?;
    }

    write_file(&method_dir.join("test_performance.csv"), &perf_rows)?;
    let mut summary = String::from("task_id,mean,std,runs\n");
    for (t, values) in per_task_values.iter().enumerate() {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        summary.push_str(&format!(
            "{},{mean},{},{}\n",
            tasks[t].id(),
            sample_std(values, mean),
            values.len()
        ));
    }
    write_file(&method_dir.join("test_summary.csv"), &summary)?;
    Ok(method_dir)
}

/// Rebuilds one run's ranked archive from its on-disk dump. Records were
/// written per (generation, task) in rank order, so grouping preserves it.
fn load_run_log(run_dir: &Path) -> Result<EvolutionLog, CliError> {
    let manifest_path = run_dir.join("manifest.json");
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::Io(format!("{}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| CliError::Runtime(format!("{}: {e}", manifest_path.display())))?;
    let task_ids: Vec<String> = manifest["tasks"]
        .as_array()
        .ok_or_else(|| CliError::Runtime("manifest has no task list".into()))?
        .iter()
        .map(|v| v.as_str().unwrap_or_default().to_string())
        .collect();
    let tasks: Vec<TaskSpec> = task_ids
        .iter()
        .map(|id| parse_task_id(id))
        .collect::<Result<_, _>>()?;

    let archive_file = EliteDataset::load(&run_dir.join("archive.tgpdata"))?;
    let max_gen = archive_file
        .records
        .iter()
        .map(|r| r.generation)
        .max()
        .ok_or_else(|| CliError::Runtime(format!("{}: empty archive", run_dir.display())))?;

    // archive[generation][task]: sequencing/routing records pair up by
    // position within each (generation, task) group.
    let mut archive: Vec<Vec<Vec<RankedEntry>>> =
        vec![vec![Vec::new(); tasks.len()]; max_gen + 1];
    let mut halves: BTreeMap<(usize, usize), (Vec<EliteRecord>, Vec<EliteRecord>)> =
        BTreeMap::new();
    for record in &archive_file.records {
        let t = task_ids
            .iter()
            .position(|id| *id == record.task_id)
            .ok_or_else(|| CliError::Runtime(format!("unknown task id {}", record.task_id)))?;
        let entry = halves.entry((record.generation, t)).or_default();
        match record.rule_kind {
            RuleKind::Sequencing => entry.0.push(record.clone()),
            RuleKind::Routing => entry.1.push(record.clone()),
        }
    }
    for ((g, t), (seqs, routes)) in halves {
        if seqs.len() != routes.len() {
            return Err(CliError::Runtime(format!(
                "archive mismatch at generation {g} task {t}"
            )));
        }
        archive[g][t] = seqs
            .iter()
            .zip(&routes)
            .map(|(s, r)| {
                Ok(RankedEntry {
                    fitness: s.fitness,
                    heuristic: Heuristic::new(
                        ExprTree::from_prefix_tokens(&s.tokens)
                            .map_err(|e| CliError::Runtime(e.to_string()))?,
                        ExprTree::from_prefix_tokens(&r.tokens)
                            .map_err(|e| CliError::Runtime(e.to_string()))?,
                    ),
                })
            })
            .collect::<Result<_, CliError>>()?;
    }
    Ok(EvolutionLog {
        tasks,
        stats: Vec::new(),
        archive,
        best: Vec::new(),
        generation_seeds: Vec::new(),
    })
}

/// Parses a `<obj-util-mach>` task id.
pub fn parse_task_id(id: &str) -> Result<TaskSpec, CliError> {
    let inner = id
        .strip_prefix('<')
        .and_then(|s| s.strip_suffix('>'))
        .ok_or_else(|| CliError::Runtime(format!("bad task id {id}")))?;
    let parts: Vec<&str> = inner.split('-').collect();
    if parts.len() != 3 {
        return Err(CliError::Runtime(format!("bad task id {id}")));
    }
    let objective = transgp::sim::Objective::from_name(parts[0])
        .ok_or_else(|| CliError::Runtime(format!("bad objective in {id}")))?;
    let util: f64 = parts[1]
        .parse()
        .map_err(|_| CliError::Runtime(format!("bad utilization in {id}")))?;
    let mach: usize = parts[2]
        .parse()
        .map_err(|_| CliError::Runtime(format!("bad machine count in {id}")))?;
    Ok(TaskSpec::new(objective, util, mach))
}

/// Harvests elites from run directories into deduplicated sequencing and
/// routing dataset files (`<out>_sequencing.tgpdata`, `<out>_routing.tgpdata`).
pub fn cmd_collect(
    run_dirs: &[PathBuf],
    top_k: usize,
    last_gens: usize,
    out_prefix: &Path,
) -> Result<(usize, usize, usize, usize), CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("no run directories given".into()));
    }
    let logs: Vec<EvolutionLog> = run_dirs
        .iter()
        .map(|d| load_run_log(d))
        .collect::<Result<_, _>>()?;
    let harvest = collect_elites(&logs, top_k, last_gens)?;
    let mut counts = (0, 0, 0, 0);
    for (kind, suffix, pre, post) in [
        (RuleKind::Sequencing, "sequencing", &mut counts.0, &mut counts.1),
        (RuleKind::Routing, "routing", &mut counts.2, &mut counts.3),
    ] {
        let ds = harvest.of_kind(kind);
        *pre = ds.len();
        let deduped = ds.dedup();
        *post = deduped.len();
        let path = out_prefix.with_file_name(format!(
            "{}_{suffix}.tgpdata",
            out_prefix
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "elites".into())
        ));
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        deduped.save(&path)?;
        println!(
            "{suffix}: {} records pre-dedup, {} post-dedup -> {}",
            *pre,
            *post,
            path.display()
        );
    }
    Ok(counts)
}

/// Trains one model per rule kind from dataset files and writes the model
/// binaries plus per-epoch loss CSVs.
pub fn cmd_train(
    dataset_sequencing: &Path,
    dataset_routing: &Path,
    mcfg: &TransformerConfig,
    tcfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), CliError> {
    fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::new();
    for (path, name) in [
        (dataset_sequencing, "sequencing"),
        (dataset_routing, "routing"),
    ] {
        let ds = EliteDataset::load(path)?;
        let (params, history) = train::<f32>(&ds, mcfg, tcfg)?;
        let model_path = out_dir.join(format!("{name}.tgpm"));
        save_params(&params, &model_path)?;
        let mut csv = String::from("epoch,mean_loss\n");
        for (e, l) in history.iter().enumerate() {
            csv.push_str(&format!("{e},{l}\n"));
        }
        write_file(&out_dir.join(format!("{name}_loss.csv")), &csv)?;
        println!(
            "{name}: {} records, {} epochs, loss {} -> {}",
            ds.len(),
            history.len(),
            history.last().unwrap(),
            model_path.display()
        );
        outputs.push(model_path);
    }
    Ok((outputs[0].clone(), outputs[1].clone()))
}

pub const SEQ_RULE_NAMES: [&str; 4] = ["SPT", "LPT", "EDD", "FIFO"];
pub const ROUTE_RULE_NAMES: [&str; 2] = ["NIQ", "WIQ"];

pub fn parse_rule_pair(pair: &str) -> Result<(SeqRule<'static>, RouteRule<'static>), CliError> {
    let (seq, route) = pair
        .split_once('+')
        .ok_or_else(|| CliError::Config(format!("rule pair must look like SPT+NIQ, got {pair}")))?;
    let seq = match seq {
        "SPT" => SeqRule::Spt,
        "LPT" => SeqRule::Lpt,
        "EDD" => SeqRule::Edd,
        "FIFO" => SeqRule::Fifo,
        other => return Err(CliError::Config(format!("unknown sequencing rule {other}"))),
    };
    let route = match route {
        "NIQ" => RouteRule::Niq,
        "WIQ" => RouteRule::Wiq,
        other => return Err(CliError::Config(format!("unknown routing rule {other}"))),
    };
    Ok((seq, route))
}

/// Mean objective of a handcrafted rule pair over the test seeds.
pub fn handcrafted_mean(
    task: &TaskSpec,
    seq: SeqRule,
    route: RouteRule,
    test_seeds: &[u64],
    num_jobs: usize,
) -> Result<f64, CliError> {
    let cfg = ScenarioConfig {
        num_jobs,
        ..ScenarioConfig::for_task(task.clone())
    };
    let mut total = 0.0;
    for &s in test_seeds {
        let inst = generate_instance(&cfg, s)?;
        total += run_simulation_with(&inst, seq, route).objective_value;
    }
    Ok(total / test_seeds.len() as f64)
}

/// Evaluates the 4x2 handcrafted grid over the scenario tasks and writes the
/// wide-format table. Returns (task ids, 8 columns of means per task).
pub fn cmd_baseline(
    tasks: &[TaskSpec],
    test_seeds: &[u64],
    num_jobs: usize,
    out: &Path,
) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let mut header = String::from("task_id");
    for route in ROUTE_RULE_NAMES {
        for seq in SEQ_RULE_NAMES {
            header.push_str(&format!(",{seq}+{route}"));
        }
    }
    header.push('\n');
    let mut rows = Vec::new();
    let mut csv = header;
    for task in tasks {
        let mut values = Vec::new();
        let mut line = task.id();
        for route_name in ROUTE_RULE_NAMES {
            for seq_name in SEQ_RULE_NAMES {
                let (seq, route) = parse_rule_pair(&format!("{seq_name}+{route_name}"))?;
                let mean = handcrafted_mean(task, seq, route, test_seeds, num_jobs)?;
                values.push(mean);
                line.push_str(&format!(",{mean}"));
            }
        }
        csv.push_str(&line);
        csv.push('\n');
        rows.push((task.id(), values));
    }
    write_file(out, &csv)?;
    Ok(rows)
}

/// Generation-only baseline over the scenario tasks.
#[allow(clippy::too_many_arguments)]
pub fn cmd_pure_trans(
    model_sequencing: &Path,
    model_routing: &Path,
    tasks: &[TaskSpec],
    n: usize,
    test_seeds: &[u64],
    evo: &EvoConfig,
    gcfg: &GuidedConfig,
    master_seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let models = GuidedModels {
        sequencing: load_params(model_sequencing)?,
        routing: load_params(model_routing)?,
    };
    let mut csv = String::from("task_id,samples,min,mean,std,max\n");
    for (t, task) in tasks.iter().enumerate() {
        let stats = pure_trans_baseline(
            &models,
            task,
            n,
            test_seeds,
            evo.max_depth,
            evo.num_jobs,
            gcfg,
            seeds::derive(master_seed, domain::SAMPLE, t as u64),
        )?;
        csv.push_str(&format!(
            "{},{n},{},{},{},{}\n",
            task.id(),
            stats.min,
            stats.mean,
            stats.std,
            stats.max
        ));
    }
    write_file(out, &csv)?;
    Ok(())
}

/// One labeled heuristic for the analysis reports.
pub struct LabeledHeuristic {
    pub label: String,
    pub heuristic: Heuristic,
}

pub fn load_heuristic_file(path: &Path) -> Result<Heuristic, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Heuristic::from_json(&value).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Accepts heuristic JSON files or run directories (which contribute their
/// `best_task*.json` files).
pub fn gather_heuristics(inputs: &[PathBuf]) -> Result<Vec<LabeledHeuristic>, CliError> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .map(|n| {
                            let n = n.to_string_lossy();
                            n.starts_with("best_task") && n.ends_with(".json")
                        })
                        .unwrap_or(false)
                })
                .collect();
            entries.sort();
            if entries.is_empty() {
                return Err(CliError::Io(format!(
                    "{}: no best_task*.json files",
                    input.display()
                )));
            }
            for path in entries {
                out.push(LabeledHeuristic {
                    label: format!(
                        "{}/{}",
                        input.file_name().unwrap_or_default().to_string_lossy(),
                        path.file_stem().unwrap_or_default().to_string_lossy()
                    ),
                    heuristic: load_heuristic_file(&path)?,
                });
            }
        } else {
            out.push(LabeledHeuristic {
                label: input
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .to_string(),
                heuristic: load_heuristic_file(input)?,
            });
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no heuristics to analyze".into()));
    }
    Ok(out)
}

/// Emits the size, usage, similarity, and pattern reports for a set of
/// heuristics.
pub fn cmd_analyze(inputs: &[PathBuf], out_dir: &Path) -> Result<(), CliError> {
    let items = gather_heuristics(inputs)?;
    fs::create_dir_all(out_dir)?;

    // Size table.
    let mut size_csv = String::from("label,sequencing_size,routing_size,total\n");
    for item in &items {
        size_csv.push_str(&format!(
            "{},{},{},{}\n",
            item.label,
            item.heuristic.sequencing.size(),
            item.heuristic.routing.size(),
            item.heuristic.size()
        ));
    }
    let totals: Vec<f64> = items.iter().map(|i| i.heuristic.size() as f64).collect();
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    size_csv.push_str(&format!("mean,,,{mean}\nstd,,,{}\n", sample_std(&totals, mean)));
    write_file(&out_dir.join("size.csv"), &size_csv)?;

    // Usage heatmap matrix: tokens x (label, rule kind).
    let mut usage_csv = String::from("token");
    for item in &items {
        usage_csv.push_str(&format!(",{}:sequencing,{}:routing", item.label, item.label));
    }
    usage_csv.push('\n');
    let all_tokens: Vec<Token> = transgp::expr::FUNCTIONS
        .iter()
        .chain(transgp::expr::TERMINALS.iter())
        .copied()
        .collect();
    for tok in &all_tokens {
        usage_csv.push_str(tok.name());
        for item in &items {
            let s = analysis::usage_counts(&item.heuristic.sequencing);
            let r = analysis::usage_counts(&item.heuristic.routing);
            usage_csv.push_str(&format!(
                ",{},{}",
                s.get(tok).copied().unwrap_or(0),
                r.get(tok).copied().unwrap_or(0)
            ));
        }
        usage_csv.push('\n');
    }
    write_file(&out_dir.join("usage.csv"), &usage_csv)?;

    // Pairwise similarity, one row per pair per rule kind.
    let mut sim_csv = String::from("a,b,rule_kind,jaccard,size_similarity\n");
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            for (kind, tree_i, tree_j) in [
                (
                    "sequencing",
                    &items[i].heuristic.sequencing,
                    &items[j].heuristic.sequencing,
                ),
                (
                    "routing",
                    &items[i].heuristic.routing,
                    &items[j].heuristic.routing,
                ),
            ] {
                let jac = analysis::jaccard(
                    &analysis::terminal_set(tree_i),
                    &analysis::terminal_set(tree_j),
                );
                let size_sim = analysis::size_similarity(tree_i.size(), tree_j.size())
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                sim_csv.push_str(&format!(
                    "{},{},{kind},{jac},{size_sim}\n",
                    items[i].label, items[j].label
                ));
            }
        }
    }
    write_file(&out_dir.join("similarity.csv"), &sim_csv)?;

    // Pattern tables per rule kind, with a depth-capped display column.
    for (kind, pick) in [
        ("sequencing", true),
        ("routing", false),
    ] {
        let corpus: Vec<ExprTree> = items
            .iter()
            .map(|i| {
                if pick {
                    i.heuristic.sequencing.clone()
                } else {
                    i.heuristic.routing.clone()
                }
            })
            .collect();
        let table = analysis::mine_patterns(&corpus, 10);
        let mut csv = String::from("rank,pattern,pattern_full,frequency,coverage_percent\n");
        for (rank, row) in table.rows.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{:.2}\n",
                rank + 1,
                row.pattern.infix_string_capped(2).replace(',', ";"),
                row.pattern.infix_string().replace(',', ";"),
                row.frequency,
                row.coverage
            ));
        }
        let top_total: f64 = table.rows.iter().map(|r| r.coverage).sum();
        csv.push_str(&format!("total,,,,{top_total:.2}\n"));
        write_file(&out_dir.join(format!("patterns_{kind}.csv")), &csv)?;
    }
    Ok(())
}

/// Parses a `test_performance.csv` into per-task value lists.
fn load_performance(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Runtime(format!("{}: empty", path.display())))?;
    if header != "run,task_id,test_value" {
        return Err(CliError::Runtime(format!(
            "{}: expected test_performance header",
            path.display()
        )));
    }
    let mut map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CliError::Runtime(format!("{}: bad row {line}", path.display())));
        }
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| CliError::Runtime(format!("{}: bad value in {line}", path.display())))?;
        map.entry(fields[1].to_string()).or_default().push(value);
    }
    Ok(map)
}

/// Pairwise significance of B against A per task: `^` when B is
/// significantly better (lower objective), `v` when significantly worse,
/// `=` otherwise. Two-sided Wilcoxon rank-sum at 0.05.
pub fn cmd_stats(a: &Path, b: &Path, out: &Path) -> Result<String, CliError> {
    let pa = load_performance(a)?;
    let pb = load_performance(b)?;
    let label = format!(
        "{} vs {}",
        a.file_stem().unwrap_or_default().to_string_lossy(),
        b.file_stem().unwrap_or_default().to_string_lossy()
    );
    let mut csv = String::from("pair,task_id,u_statistic,p_value,verdict\n");
    for (task, values_a) in &pa {
        let values_b = pb
            .get(task)
            .ok_or_else(|| CliError::Runtime(format!("task {task} missing from {}", b.display())))?;
        let result = analysis::wilcoxon_rank_sum(values_a, values_b)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let mean_a = values_a.iter().sum::<f64>() / values_a.len() as f64;
        let mean_b = values_b.iter().sum::<f64>() / values_b.len() as f64;
        let verdict = if result.p_value < 0.05 && mean_b < mean_a {
            "^"
        } else if result.p_value < 0.05 && mean_b > mean_a {
            "v"
        } else {
            "="
        };
        csv.push_str(&format!(
            "{label},{task},{},{},{verdict}\n",
            result.statistic, result.p_value
        ));
    }
    write_file(out, &csv)?;
    Ok(csv)
}

/// Simulates one instance under a heuristic file or a handcrafted rule pair,
/// audits the schedule, and writes the per-job CSV.
pub fn cmd_simulate(
    scenario: &ScenarioConfig,
    seed: u64,
    heuristic: Option<&Path>,
    rule_pair: Option<&str>,
    out: &Path,
) -> Result<f64, CliError> {
    let inst = generate_instance(scenario, seed)?;
    let h;
    let (seq, route) = match (heuristic, rule_pair) {
        (Some(path), None) => {
            h = load_heuristic_file(path)?;
            (SeqRule::Tree(&h.sequencing), RouteRule::Tree(&h.routing))
        }
        (None, Some(pair)) => parse_rule_pair(pair)?,
        _ => {
            return Err(CliError::Config(
                "provide exactly one of --heuristic or --rule".into(),
            ))
        }
    };
    let result = run_simulation_with(&inst, seq, route);
    let violations = audit(&inst, &result);
    if !violations.is_empty() {
        return Err(CliError::Runtime(format!(
            "schedule audit failed: {}",
            violations.join("; ")
        )));
    }
    let mut buf = Vec::new();
    write_result_csv(&result, &mut buf)?;
    write_file(out, &String::from_utf8(buf).unwrap())?;
    Ok(result.objective_value)
}
