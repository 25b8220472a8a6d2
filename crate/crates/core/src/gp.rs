//! Multitask evolutionary engine.
//!
//! A population of heuristic individuals, each tagged with one task, evolves
//! by per-task elitism plus tournament selection and mutation. Mutation is
//! the sole variation operator; the operator itself is a plug-in
//! ([`VariationOperator`]) so the same generation loop drives plain GP,
//! task-tagged GP, and model-guided variation.
//!
//! Fitness is the task objective on a per-generation instance shared by all
//! individuals of that task; the instance seed rotates every generation.
//! Objective scales differ across tasks, so fitness is only ever compared
//! within a task.
//!
//! Determinism: all randomness is derived from the run seed via [`crate::seeds`];
//! offspring are produced from per-slot seeds, so parallel and serial
//! evaluation yield identical populations.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{random_tree, GrowMethod, Heuristic};
use crate::seeds::{self, domain};
use crate::sim::{generate_instance, run_simulation, Instance, ScenarioConfig, SimError, TaskSpec};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("no individuals assigned to task {0}")]
    EmptySubpopulation(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One population member: a heuristic assigned to a task. `fitness` is the
/// task objective (lower is better) on the current generation's instance and
/// is unset until evaluated.
#[derive(Clone, Debug)]
pub struct Individual {
    pub heuristic: Heuristic,
    /// Index into the run's task list.
    pub task: usize,
    pub fitness: Option<f64>,
}

impl Individual {
    fn fitness_or_inf(&self) -> f64 {
        self.fitness.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub elites_per_task: usize,
    pub max_depth: usize,
    /// Ramped half-and-half initial depth range, inclusive.
    pub init_depth: (usize, usize),
    /// Depth cap for subtrees grown by standard mutation.
    pub mutation_depth: usize,
    /// Probability of reassigning the task tag during task-tagged mutation.
    pub task_switch_prob: f64,
    pub test_seed_count: usize,
    /// Jobs per simulated instance.
    pub num_jobs: usize,
}

impl Default for EvoConfig {
    fn default() -> EvoConfig {
        EvoConfig {
            pop_size: 600,
            generations: 50,
            tournament_size: 5,
            elites_per_task: 4,
            max_depth: 8,
            init_depth: (2, 6),
            mutation_depth: 4,
            task_switch_prob: 0.1,
            test_seed_count: 30,
            num_jobs: 124,
        }
    }
}

impl EvoConfig {
    pub fn scenario_for(&self, task: &TaskSpec) -> ScenarioConfig {
        ScenarioConfig {
            num_jobs: self.num_jobs,
            ..ScenarioConfig::for_task(task.clone())
        }
    }

    fn validate(&self, task_count: usize) -> Result<(), GpError> {
        if task_count == 0 {
            return Err(GpError::InvalidConfig("task list is empty".into()));
        }
        if self.pop_size % task_count != 0 {
            return Err(GpError::InvalidConfig(format!(
                "population size {} is not divisible by task count {task_count}",
                self.pop_size
            )));
        }
        if self.tournament_size == 0 {
            return Err(GpError::InvalidConfig("tournament size must be >= 1".into()));
        }
        if self.elites_per_task * task_count > self.pop_size {
            return Err(GpError::InvalidConfig(
                "elites per task exceed the population".into(),
            ));
        }
        if self.init_depth.0 > self.init_depth.1 || self.init_depth.1 > self.max_depth {
            return Err(GpError::InvalidConfig("bad init depth range".into()));
        }
        Ok(())
    }
}

/// Ramped half-and-half: depth drawn uniformly from the configured range,
/// grow/full with equal probability, independently per rule tree.
fn ramped_tree<R: Rng + ?Sized>(cfg: &EvoConfig, rng: &mut R) -> crate::expr::ExprTree {
    let method = if rng.random_bool(0.5) {
        GrowMethod::Grow
    } else {
        GrowMethod::Full
    };
    random_tree(cfg.init_depth.0, cfg.init_depth.1, method, rng)
}

/// Balanced initial population: individual `i` is assigned task `i % tasks`.
pub fn init_population(
    cfg: &EvoConfig,
    tasks: &[TaskSpec],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Individual>, GpError> {
    cfg.validate(tasks.len())?;
    Ok((0..cfg.pop_size)
        .map(|i| Individual {
            heuristic: Heuristic::new(ramped_tree(cfg, rng), ramped_tree(cfg, rng)),
            task: i % tasks.len(),
            fitness: None,
        })
        .collect())
}

/// Evaluates every individual on its task's shared instance for this
/// generation. One instance per task, seeded from
/// `derive(generation_seed, INSTANCE, task_index)`.
pub fn evaluate_population(
    pop: &mut [Individual],
    tasks: &[TaskSpec],
    cfg: &EvoConfig,
    generation_seed: u64,
) -> Result<(), GpError> {
    let mut instances: HashMap<usize, Instance> = HashMap::new();
    for t in 0..tasks.len() {
        if pop.iter().any(|ind| ind.task == t) {
            let seed = seeds::derive(generation_seed, domain::INSTANCE, t as u64);
            instances.insert(t, generate_instance(&cfg.scenario_for(&tasks[t]), seed)?);
        }
    }
    pop.par_iter_mut().for_each(|ind| {
        let inst = &instances[&ind.task];
        ind.fitness = Some(run_simulation(inst, &ind.heuristic).objective_value);
    });
    Ok(())
}

/// Tournament selection within one task's subpopulation: `k` uniform draws
/// with replacement, minimum fitness wins, ties go to the lowest population
/// index.
pub fn tournament_select<'a>(
    pop: &'a [Individual],
    task: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<&'a Individual, GpError> {
    let subpop: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].task == task).collect();
    if subpop.is_empty() {
        return Err(GpError::EmptySubpopulation(task));
    }
    let mut best: Option<usize> = None;
    for _ in 0..k {
        let idx = subpop[rng.random_range(0..subpop.len())];
        debug_assert_eq!(pop[idx].task, task, "fitness compared across tasks");
        best = Some(match best {
            None => idx,
            Some(b) => {
                let (fb, fi) = (pop[b].fitness_or_inf(), pop[idx].fitness_or_inf());
                if fi < fb || (fi == fb && idx < b) {
                    idx
                } else {
                    b
                }
            }
        });
    }
    Ok(&pop[best.expect("k >= 1")])
}

/// Standard subtree mutation: pick one of the two rules with equal
/// probability, pick a uniform node, and replace its subtree with a grown
/// tree whose depth keeps the whole rule within `max_depth`.
pub fn standard_mutation(
    parent: &Individual,
    cfg: &EvoConfig,
    rng: &mut ChaCha8Rng,
) -> Individual {
    let mutate_sequencing = rng.random_bool(0.5);
    let tree = if mutate_sequencing {
        &parent.heuristic.sequencing
    } else {
        &parent.heuristic.routing
    };
    let k = rng.random_range(0..tree.size());
    let node_depth = tree.node_depths()[k];
    let budget = cfg.mutation_depth.min(cfg.max_depth - node_depth);
    let replacement = random_tree(0, budget, GrowMethod::Grow, rng);
    let mutated = tree
        .replace_subtree(k, &replacement)
        .expect("mutation point is in range");
    let heuristic = if mutate_sequencing {
        Heuristic::new(mutated, parent.heuristic.routing.clone())
    } else {
        Heuristic::new(parent.heuristic.sequencing.clone(), mutated)
    };
    Individual {
        heuristic,
        task: parent.task,
        fitness: None,
    }
}

/// Task-tagged mutation: standard mutation, then with probability
/// `task_switch_prob` the offspring is reassigned uniformly to one of the
/// other tasks.
pub fn tgp_mutation(
    parent: &Individual,
    cfg: &EvoConfig,
    tasks: &[TaskSpec],
    rng: &mut ChaCha8Rng,
) -> Individual {
    let mut child = standard_mutation(parent, cfg, rng);
    if tasks.len() >= 2 && rng.random_bool(cfg.task_switch_prob) {
        let pick = rng.random_range(0..tasks.len() - 1);
        child.task = if pick >= parent.task { pick + 1 } else { pick };
    }
    child
}

/// Variation plug-in shared by the GP, TGP, and model-guided drivers.
pub trait VariationOperator: Sync {
    fn name(&self) -> &'static str;

    fn vary(
        &self,
        parent: &Individual,
        cfg: &EvoConfig,
        tasks: &[TaskSpec],
        rng: &mut ChaCha8Rng,
    ) -> Individual;

    /// Produces one offspring per (parent, seed) pair. Offspring are
    /// independent, so the default fans out over a thread pool; per-slot
    /// seeds keep the result identical to a serial pass.
    fn vary_batch(
        &self,
        parents: &[Individual],
        cfg: &EvoConfig,
        tasks: &[TaskSpec],
        slot_seeds: &[u64],
    ) -> Vec<Individual> {
        parents
            .par_iter()
            .zip(slot_seeds.par_iter())
            .map(|(parent, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.vary(parent, cfg, tasks, &mut rng)
            })
            .collect()
    }
}

/// Plain GP mutation, no task switching.
pub struct StandardMutation;

impl VariationOperator for StandardMutation {
    fn name(&self) -> &'static str {
        "GP"
    }

    fn vary(
        &self,
        parent: &Individual,
        cfg: &EvoConfig,
        _tasks: &[TaskSpec],
        rng: &mut ChaCha8Rng,
    ) -> Individual {
        standard_mutation(parent, cfg, rng)
    }
}

/// Task-tagged GP mutation.
pub struct TaskTagMutation;

impl VariationOperator for TaskTagMutation {
    fn name(&self) -> &'static str {
        "TGP"
    }

    fn vary(
        &self,
        parent: &Individual,
        cfg: &EvoConfig,
        tasks: &[TaskSpec],
        rng: &mut ChaCha8Rng,
    ) -> Individual {
        tgp_mutation(parent, cfg, tasks, rng)
    }
}

/// Per-generation, per-task snapshot for the log CSV.
#[derive(Clone, Debug, Serialize)]
pub struct GenTaskStats {
    pub generation: usize,
    pub task_id: String,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_size: usize,
    pub mean_size: f64,
    pub wall_ms: u64,
}

/// One archived individual: fitness on its generation's shared instance.
#[derive(Clone, Debug)]
pub struct RankedEntry {
    pub fitness: f64,
    pub heuristic: Heuristic,
}

/// Everything a run leaves behind: per-generation stats, per-generation
/// ranked subpopulations (the elite-harvest source), final best heuristics
/// per task, and the seeds needed for exact replay.
pub struct EvolutionLog {
    pub tasks: Vec<TaskSpec>,
    pub stats: Vec<GenTaskStats>,
    /// `archive[generation][task]` is the task subpopulation sorted by
    /// ascending fitness.
    pub archive: Vec<Vec<Vec<RankedEntry>>>,
    /// Final-generation best per task.
    pub best: Vec<RankedEntry>,
    pub generation_seeds: Vec<u64>,
}

impl EvolutionLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "generation,task_id,best_fitness,mean_fitness,best_size,mean_size,wall_ms"
        )?;
        for s in &self.stats {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.generation,
                s.task_id,
                s.best_fitness,
                s.mean_fitness,
                s.best_size,
                s.mean_size,
                s.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Runs the full generation loop with the given variation operator.
///
/// Per generation: evaluate on fresh per-task instances, record stats and the
/// ranked archive, copy the per-task elites, and fill the remaining slots by
/// round-robin parent task, tournament selection, and variation. All seeds
/// derive from `run_seed`.
pub fn run_evolution(
    cfg: &EvoConfig,
    tasks: &[TaskSpec],
    varop: &dyn VariationOperator,
    run_seed: u64,
) -> Result<EvolutionLog, GpError> {
    cfg.validate(tasks.len())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::derive(run_seed, domain::INIT, 0));
    let mut pop = init_population(cfg, tasks, &mut init_rng)?;

    let mut log = EvolutionLog {
        tasks: tasks.to_vec(),
        stats: Vec::new(),
        archive: Vec::new(),
        best: Vec::new(),
        generation_seeds: Vec::new(),
    };

    for g in 0..cfg.generations {
        let started = Instant::now();
        let gen_seed = seeds::derive(run_seed, domain::GENERATION, g as u64);
        log.generation_seeds.push(gen_seed);
        evaluate_population(&mut pop, tasks, cfg, gen_seed)?;

        // Ranked archive per task: ascending fitness, ties by population index.
        let mut generation_archive: Vec<Vec<RankedEntry>> = Vec::with_capacity(tasks.len());
        for t in 0..tasks.len() {
            let mut members: Vec<&Individual> = pop.iter().filter(|i| i.task == t).collect();
            members.sort_by(|a, b| a.fitness_or_inf().total_cmp(&b.fitness_or_inf()));
            generation_archive.push(
                members
                    .iter()
                    .map(|i| RankedEntry {
                        fitness: i.fitness_or_inf(),
                        heuristic: i.heuristic.clone(),
                    })
                    .collect(),
            );
        }

        let wall_ms = started.elapsed().as_millis() as u64;
        for (t, task) in tasks.iter().enumerate() {
            let ranked = &generation_archive[t];
            let n = ranked.len().max(1) as f64;
            log.stats.push(GenTaskStats {
                generation: g,
                task_id: task.id(),
                best_fitness: ranked.first().map_or(f64::INFINITY, |e| e.fitness),
                mean_fitness: ranked.iter().map(|e| e.fitness).sum::<f64>() / n,
                best_size: ranked.first().map_or(0, |e| e.heuristic.size()),
                mean_size: ranked.iter().map(|e| e.heuristic.size() as f64).sum::<f64>() / n,
                wall_ms,
            });
        }
        log.archive.push(generation_archive);

        if g + 1 == cfg.generations {
            break;
        }

        // Next generation: per-task elites, then offspring.
        let mut next: Vec<Individual> = Vec::with_capacity(cfg.pop_size);
        for t in 0..tasks.len() {
            let mut members: Vec<&Individual> = pop.iter().filter(|i| i.task == t).collect();
            members.sort_by(|a, b| a.fitness_or_inf().total_cmp(&b.fitness_or_inf()));
            for elite in members.iter().take(cfg.elites_per_task) {
                next.push((*elite).clone());
            }
        }

        let remainder = cfg.pop_size - next.len();
        let mut sel_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(run_seed, domain::SELECT, g as u64));
        let mut parents: Vec<Individual> = Vec::with_capacity(remainder);
        let mut slot_seeds: Vec<u64> = Vec::with_capacity(remainder);
        for slot in 0..remainder {
            let parent_task = slot % tasks.len();
            let parent = tournament_select(&pop, parent_task, cfg.tournament_size, &mut sel_rng)?;
            parents.push(parent.clone());
            slot_seeds.push(seeds::derive(
                run_seed,
                domain::OFFSPRING,
                ((g as u64) << 32) | slot as u64,
            ));
        }
        next.extend(varop.vary_batch(&parents, cfg, tasks, &slot_seeds));
        debug_assert_eq!(next.len(), cfg.pop_size);
        pop = next;
    }

    if let Some(last) = log.archive.last() {
        for ranked in last {
            log.best.push(
                ranked
                    .first()
                    .cloned()
                    .expect("every task retains at least its elites"),
            );
        }
    }
    Ok(log)
}

/// Mean objective of a heuristic over fresh instances seeded by `test_seeds`.
pub fn test_heuristic(h: &Heuristic, task: &TaskSpec, test_seeds: &[u64], num_jobs: usize) -> f64 {
    let cfg = ScenarioConfig {
        num_jobs,
        ..ScenarioConfig::for_task(task.clone())
    };
    let total: f64 = test_seeds
        .par_iter()
        .map(|&s| {
            let inst = generate_instance(&cfg, s).expect("valid test scenario");
            run_simulation(&inst, h).objective_value
        })
        .sum();
    total / test_seeds.len() as f64
}

/// The standard held-out seed list for a master seed.
pub fn test_seed_list(master: u64, count: usize) -> Vec<u64> {
    (0..count)
        .map(|i| seeds::derive(master, domain::TEST, i as u64))
        .collect()
}
