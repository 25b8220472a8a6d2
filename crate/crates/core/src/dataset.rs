//! Elite-heuristic corpus construction.
//!
//! Sequence models train on the token sequences of elite rules harvested from
//! evolution archives: per run, task, and generation (over a trailing window)
//! the top individuals contribute their sequencing and routing rules as
//! separate records, each tagged with the task-conditioning vector. Records
//! deduplicate on (rule kind, token sequence).
//!
//! The on-disk format is line-delimited UTF-8 with the header
//! `TGPDATA v1 R=18 maxlen=<n>`; each line carries rule kind, task id,
//! fitness, run, generation, the embedding values, and the token ids,
//! comma-separated.

use std::path::Path;

use thiserror::Error;

use crate::expr::{ExprTree, Token, VOCAB_SIZE};
use crate::gp::EvolutionLog;
use crate::sim::{Objective, TaskSpec};

/// Task-conditioning vector length: objective one-hot plus two scalars.
pub const D_TASK: usize = 5;

/// `[onehot(Fmax), onehot(Fmean), onehot(Tmean), util_level, mach_num / 10]`.
pub fn task_embedding(task: &TaskSpec) -> [f64; D_TASK] {
    let mut e = [0.0; D_TASK];
    match task.objective {
        Objective::Fmax => e[0] = 1.0,
        Objective::Fmean => e[1] = 1.0,
        Objective::Tmean => e[2] = 1.0,
    }
    e[3] = task.util_level;
    e[4] = task.mach_num as f64 / 10.0;
    e
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RuleKind {
    Sequencing,
    Routing,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Sequencing => "sequencing",
            RuleKind::Routing => "routing",
        }
    }

    pub fn from_name(s: &str) -> Option<RuleKind> {
        match s {
            "sequencing" => Some(RuleKind::Sequencing),
            "routing" => Some(RuleKind::Routing),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unrecognized dataset header: {0}")]
    FormatVersionMismatch(String),
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("run {run} has only {have} generations, need {need}")]
    InsufficientGenerations { run: usize, have: usize, need: usize },
}

/// One elite rule: a bracketed token sequence plus its provenance and
/// task conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct EliteRecord {
    pub rule_kind: RuleKind,
    /// Includes the leading `START` and trailing `END`.
    pub tokens: Vec<Token>,
    pub task_id: String,
    pub embedding: [f64; D_TASK],
    pub fitness: f64,
    pub generation: usize,
    pub run: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EliteDataset {
    pub records: Vec<EliteRecord>,
    /// At least the length of the longest record.
    pub max_len: usize,
}

impl EliteDataset {
    pub fn new(records: Vec<EliteRecord>) -> EliteDataset {
        let max_len = records.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
        EliteDataset { records, max_len }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one rule kind, as their own dataset.
    pub fn of_kind(&self, kind: RuleKind) -> EliteDataset {
        EliteDataset::new(
            self.records
                .iter()
                .filter(|r| r.rule_kind == kind)
                .cloned()
                .collect(),
        )
    }

    /// Keeps the first occurrence per (rule kind, token sequence), preserving
    /// order otherwise.
    pub fn dedup(&self) -> EliteDataset {
        let mut seen = std::collections::HashSet::new();
        let records: Vec<EliteRecord> = self
            .records
            .iter()
            .filter(|r| seen.insert((r.rule_kind, r.tokens.clone())))
            .cloned()
            .collect();
        EliteDataset::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::new();
        out.push_str(&format!("TGPDATA v1 R={VOCAB_SIZE} maxlen={}\n", self.max_len));
        for r in &self.records {
            let emb: Vec<String> = r.embedding.iter().map(|v| v.to_string()).collect();
            let ids: Vec<String> = r.tokens.iter().map(|t| t.id().to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.rule_kind.name(),
                r.task_id,
                r.fitness,
                r.run,
                r.generation,
                emb.join(","),
                ids.join(",")
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EliteDataset, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| DatasetError::FormatVersionMismatch("empty file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4
            || parts[0] != "TGPDATA"
            || parts[1] != "v1"
            || parts[2] != format!("R={VOCAB_SIZE}")
        {
            return Err(DatasetError::FormatVersionMismatch(header.to_string()));
        }
        let max_len: usize = parts[3]
            .strip_prefix("maxlen=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::FormatVersionMismatch(header.to_string()))?;

        let mut records = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: String| DatasetError::Malformed {
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 5 + D_TASK + 3 {
                return Err(malformed("too few fields".into()));
            }
            let rule_kind = RuleKind::from_name(fields[0])
                .ok_or_else(|| malformed("unknown rule kind".into()))?;
            let task_id = fields[1].to_string();
            let fitness: f64 = fields[2]
                .parse()
                .map_err(|_| malformed("bad fitness".into()))?;
            let run: usize = fields[3].parse().map_err(|_| malformed("bad run".into()))?;
            let generation: usize = fields[4]
                .parse()
                .map_err(|_| malformed("bad generation".into()))?;
            let mut embedding = [0.0; D_TASK];
            for (i, e) in embedding.iter_mut().enumerate() {
                *e = fields[5 + i]
                    .parse()
                    .map_err(|_| malformed("bad embedding value".into()))?;
            }
            let tokens: Vec<Token> = fields[5 + D_TASK..]
                .iter()
                .map(|s| {
                    s.parse::<u16>()
                        .ok()
                        .and_then(Token::from_id)
                        .ok_or_else(|| malformed("bad token id".into()))
                })
                .collect::<Result<_, _>>()?;
            // Every stored sequence must parse into a valid tree.
            ExprTree::from_prefix_tokens(&tokens)
                .map_err(|e| malformed(format!("invalid token sequence: {e}")))?;
            records.push(EliteRecord {
                rule_kind,
                tokens,
                task_id,
                embedding,
                fitness,
                generation,
                run,
            });
        }
        let longest = records.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
        if max_len < longest {
            return Err(DatasetError::FormatVersionMismatch(format!(
                "header maxlen {max_len} below longest record {longest}"
            )));
        }
        Ok(EliteDataset { records, max_len })
    }
}

/// Harvests the top `top_k` individuals per run, task, and generation over
/// each run's final `last_gens` generations. Each individual contributes one
/// sequencing and one routing record; before dedup the per-kind record count
/// is `runs * tasks * last_gens * top_k` (less when a subpopulation is
/// smaller than `top_k`).
pub fn collect_elites(
    run_logs: &[EvolutionLog],
    top_k: usize,
    last_gens: usize,
) -> Result<EliteDataset, DatasetError> {
    for (run, log) in run_logs.iter().enumerate() {
        if log.archive.len() < last_gens {
            return Err(DatasetError::InsufficientGenerations {
                run,
                have: log.archive.len(),
                need: last_gens,
            });
        }
    }
    let mut records = Vec::new();
    for (run, log) in run_logs.iter().enumerate() {
        let window_start = log.archive.len() - last_gens;
        for (g, generation) in log.archive.iter().enumerate().skip(window_start) {
            for (t, ranked) in generation.iter().enumerate() {
                let task = &log.tasks[t];
                let embedding = task_embedding(task);
                for entry in ranked.iter().take(top_k) {
                    for (kind, tree) in [
                        (RuleKind::Sequencing, &entry.heuristic.sequencing),
                        (RuleKind::Routing, &entry.heuristic.routing),
                    ] {
                        records.push(EliteRecord {
                            rule_kind: kind,
                            tokens: tree.to_prefix_tokens(),
                            task_id: task.id(),
                            embedding,
                            fitness: entry.fitness,
                            generation: g,
                            run,
                        });
                    }
                }
            }
        }
    }
    Ok(EliteDataset::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Heuristic;
    use crate::gp::RankedEntry;
    use crate::sim::TaskSpec;

    fn leaf_heuristic(a: Token, b: Token) -> Heuristic {
        Heuristic::new(ExprTree::leaf(a), ExprTree::leaf(b))
    }

    fn synthetic_log(tasks: Vec<TaskSpec>, gens: usize, per_task: usize) -> EvolutionLog {
        let terminals = crate::expr::TERMINALS;
        let archive = (0..gens)
            .map(|g| {
                (0..tasks.len())
                    .map(|t| {
                        (0..per_task)
                            .map(|r| RankedEntry {
                                fitness: (g * 100 + t * 10 + r) as f64,
                                heuristic: leaf_heuristic(
                                    terminals[(g + r) % terminals.len()],
                                    terminals[(g + r + t) % terminals.len()],
                                ),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        EvolutionLog {
            tasks,
            stats: Vec::new(),
            archive,
            best: Vec::new(),
            generation_seeds: Vec::new(),
        }
    }

    #[test]
    fn embedding_examples() {
        let e = task_embedding(&TaskSpec::new(Objective::Fmean, 0.85, 8));
        assert_eq!(e, [0.0, 1.0, 0.0, 0.85, 0.8]);
        let e = task_embedding(&TaskSpec::new(Objective::Fmax, 0.75, 6));
        assert_eq!(e, [1.0, 0.0, 0.0, 0.75, 0.6]);
    }

    #[test]
    fn embeddings_distinct_over_stock_tasks() {
        let mut seen = Vec::new();
        for s in 1..=3 {
            for task in crate::sim::stock_scenario(s).unwrap() {
                let e = task_embedding(&task);
                assert!(!seen.contains(&e));
                seen.push(e);
            }
        }
    }

    #[test]
    fn collect_counts_match_recipe() {
        let tasks = crate::sim::stock_scenario(2).unwrap();
        // 3 runs x 3 tasks x 20 generations x top 20 = 3,600 per rule kind.
        let logs: Vec<EvolutionLog> = (0..3)
            .map(|_| synthetic_log(tasks.clone(), 25, 30))
            .collect();
        let ds = collect_elites(&logs, 20, 20).unwrap();
        assert_eq!(ds.of_kind(RuleKind::Sequencing).len(), 3600);
        assert_eq!(ds.of_kind(RuleKind::Routing).len(), 3600);
    }

    #[test]
    fn collect_small_and_clamped() {
        let tasks = vec![TaskSpec::new(Objective::Fmean, 0.85, 8)];
        let log = synthetic_log(tasks.clone(), 1, 5);
        // 1 run x 1 task x 1 gen x top 2 -> 2 records per kind.
        let ds = collect_elites(std::slice::from_ref(&log), 2, 1).unwrap();
        assert_eq!(ds.of_kind(RuleKind::Sequencing).len(), 2);
        // top_k larger than the subpopulation takes everything, no error.
        let ds = collect_elites(&[log], 50, 1).unwrap();
        assert_eq!(ds.of_kind(RuleKind::Sequencing).len(), 5);
    }

    #[test]
    fn collect_requires_enough_generations() {
        let tasks = vec![TaskSpec::new(Objective::Fmean, 0.85, 8)];
        let log = synthetic_log(tasks, 3, 2);
        assert!(matches!(
            collect_elites(&[log], 2, 10),
            Err(DatasetError::InsufficientGenerations { have: 3, need: 10, .. })
        ));
    }

    #[test]
    fn dedup_drops_repeats_and_is_idempotent() {
        let task = TaskSpec::new(Objective::Fmean, 0.85, 8);
        let record = EliteRecord {
            rule_kind: RuleKind::Sequencing,
            tokens: ExprTree::leaf(Token::Pt).to_prefix_tokens(),
            task_id: task.id(),
            embedding: task_embedding(&task),
            fitness: 1.0,
            generation: 0,
            run: 0,
        };
        let ds = EliteDataset::new(vec![record.clone(), record.clone(), record.clone()]);
        let deduped = ds.dedup();
        assert_eq!(deduped.len(), 1);
        assert_eq!(deduped.dedup(), deduped);

        // All-distinct dataset is unchanged.
        let mut other = record.clone();
        other.tokens = ExprTree::leaf(Token::Wiq).to_prefix_tokens();
        let distinct = EliteDataset::new(vec![record.clone(), other]);
        assert_eq!(distinct.dedup(), distinct);

        // Same tokens under a different kind is not a duplicate.
        let mut routing = record.clone();
        routing.rule_kind = RuleKind::Routing;
        let mixed = EliteDataset::new(vec![record, routing]);
        assert_eq!(mixed.dedup().len(), 2);
    }

    #[test]
    fn save_load_round_trip() {
        let tasks = crate::sim::stock_scenario(1).unwrap();
        let log = synthetic_log(tasks, 4, 6);
        let ds = collect_elites(&[log], 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("elites.tgpdata");
        ds.save(&path).unwrap();
        let loaded = EliteDataset::load(&path).unwrap();
        assert_eq!(ds, loaded);

        // Empty dataset round-trips too.
        let empty = EliteDataset::new(Vec::new());
        let path2 = dir.path().join("empty.tgpdata");
        empty.save(&path2).unwrap();
        assert_eq!(EliteDataset::load(&path2).unwrap(), empty);
    }

    #[test]
    fn corrupt_header_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tgpdata");
        std::fs::write(&path, "TGPDATA v2 R=18 maxlen=5\n").unwrap();
        assert!(matches!(
            EliteDataset::load(&path),
            Err(DatasetError::FormatVersionMismatch(_))
        ));
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(
            EliteDataset::load(&path),
            Err(DatasetError::FormatVersionMismatch(_))
        ));
    }

    #[test]
    fn invalid_token_sequences_are_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad_tokens.tgpdata");
        // Body "ADD PT" is an unfinished expression.
        std::fs::write(
            &path,
            "TGPDATA v1 R=18 maxlen=4\nsequencing,<Fmean-0.85-8>,1,0,0,0,1,0,0.85,0.8,0,2,11,1\n",
        )
        .unwrap();
        assert!(matches!(
            EliteDataset::load(&path),
            Err(DatasetError::Malformed { .. })
        ));
    }
}
