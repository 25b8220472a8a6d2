//! Model-guided variation.
//!
//! Guided mutation keeps a parent rule's pre-order prefix up to a mutation
//! point and regenerates everything from that point to the end of the tree,
//! sampling token by token from the sequence model. A grammar stack masks
//! the logits so only tokens that keep the prefix well-formed (and within
//! the depth cap) can be drawn; sampling uses temperature-scaled softmax.
//! The same loop with an empty kept prefix generates complete rules for the
//! generation-only baseline.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{task_embedding, D_TASK};
use crate::expr::{ExprError, ExprTree, Heuristic, PrefixStack, Token, TokenSet};
use crate::gp::{standard_mutation, EvoConfig, Individual, VariationOperator};
use crate::neural::{next_token_logits, NeuralError, Scalar, TransformerParams};
use crate::seeds::{self, domain};
use crate::sim::TaskSpec;

#[derive(Debug, Error)]
pub enum GuidedError {
    #[error("regeneration exceeded {max_tokens} tokens in each of {attempts} attempts")]
    RegenerationOverflow { max_tokens: usize, attempts: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidedConfig {
    /// Softmax temperature; higher flattens the sampling distribution.
    pub temperature: f64,
    pub task_switch_prob: f64,
    pub max_regen_tokens: usize,
    pub max_retries: usize,
}

impl Default for GuidedConfig {
    fn default() -> GuidedConfig {
        GuidedConfig {
            temperature: 1.0,
            task_switch_prob: 0.1,
            max_regen_tokens: 511,
            max_retries: 5,
        }
    }
}

/// The trained rule models used during evolution.
pub struct GuidedModels {
    pub sequencing: TransformerParams<f32>,
    pub routing: TransformerParams<f32>,
}

/// Masked softmax probabilities at a given temperature: invalid tokens get
/// probability exactly zero. Returned dense over the 18 wire ids.
pub fn masked_probabilities<F: Scalar>(
    logits: &Array1<F>,
    valid: &TokenSet,
    temperature: f64,
) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(!valid.is_empty(), "valid token set must be nonempty");
    let mut max_valid = f64::NEG_INFINITY;
    for t in valid.iter() {
        max_valid = max_valid.max(logits[t.id() as usize].to_f64().unwrap());
    }
    let mut probs = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for t in valid.iter() {
        let l = logits[t.id() as usize].to_f64().unwrap();
        let e = ((l - max_valid) / temperature).exp();
        probs[t.id() as usize] = e;
        sum += e;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    probs
}

/// Samples one token from the temperature-scaled softmax over the valid set.
/// A token outside `valid` is never returned.
pub fn masked_sample<F: Scalar>(
    logits: &Array1<F>,
    valid: &TokenSet,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Token {
    let probs = masked_probabilities(logits, valid, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = None;
    for (id, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        chosen = Some(Token::from_id(id as u16).unwrap());
        if u < acc {
            break;
        }
    }
    let tok = chosen.expect("valid set is nonempty");
    assert!(valid.contains(tok), "sampled token escaped the mask");
    tok
}

/// One step of a generation trace: the sampled token with its probability
/// and the two highest-probability alternatives.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub step: usize,
    pub generated: Token,
    pub prob: f64,
    pub top1: (Token, f64),
    pub top2: (Token, f64),
}

/// Completes a partial pre-order body (`kept`, without `START`) into a full
/// tree, asking `next` for each token. `next` receives the running bracketed
/// sequence, the valid-token mask, and the step index. Fails if more than
/// `max_tokens` tokens are generated.
pub fn complete_prefix(
    kept: &[Token],
    max_depth: usize,
    max_tokens: usize,
    mut next: impl FnMut(&[Token], &TokenSet, usize) -> Token,
) -> Result<ExprTree, GuidedError> {
    let mut stack = PrefixStack::new(max_depth);
    let mut seq = Vec::with_capacity(kept.len() + 8);
    seq.push(Token::Start);
    for &t in kept {
        stack.consume(t)?;
        seq.push(t);
    }
    let mut step = 0usize;
    while !stack.is_complete() {
        if step >= max_tokens {
            return Err(GuidedError::RegenerationOverflow {
                max_tokens,
                attempts: 1,
            });
        }
        let valid = stack.valid_next_tokens();
        let tok = next(&seq, &valid, step);
        stack.consume(tok)?;
        seq.push(tok);
        step += 1;
    }
    // The stack is empty, so only END is valid; append it and parse.
    seq.push(Token::End);
    Ok(ExprTree::from_prefix_tokens(&seq)?)
}

fn model_completion<F: Scalar>(
    params: &TransformerParams<F>,
    kept: &[Token],
    e_task: &[f64; D_TASK],
    max_depth: usize,
    gcfg: &GuidedConfig,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<ExprTree, GuidedError> {
    for attempt in 0..gcfg.max_retries.max(1) {
        if let Some(t) = trace.as_deref_mut() {
            t.clear();
        }
        let result = complete_prefix(kept, max_depth, gcfg.max_regen_tokens, |seq, valid, step| {
            let logits = next_token_logits(params, seq, e_task).expect("sequence within max_len");
            let tok = masked_sample(&logits, valid, gcfg.temperature, rng);
            if let Some(t) = trace.as_deref_mut() {
                let probs = masked_probabilities(&logits, valid, gcfg.temperature);
                let mut ranked: Vec<(usize, f64)> = probs
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|(_, p)| *p > 0.0)
                    .collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let top1 = ranked[0];
                let top2 = *ranked.get(1).unwrap_or(&ranked[0]);
                t.push(TraceStep {
                    step: step + 1,
                    generated: tok,
                    prob: probs[tok.id() as usize],
                    top1: (Token::from_id(top1.0 as u16).unwrap(), top1.1),
                    top2: (Token::from_id(top2.0 as u16).unwrap(), top2.1),
                });
            }
            tok
        });
        match result {
            Err(GuidedError::RegenerationOverflow { .. }) if attempt + 1 < gcfg.max_retries => {}
            other => {
                return other.map_err(|e| match e {
                    GuidedError::RegenerationOverflow { max_tokens, .. } => {
                        GuidedError::RegenerationOverflow {
                            max_tokens,
                            attempts: gcfg.max_retries,
                        }
                    }
                    e => e,
                })
            }
        }
    }
    Err(GuidedError::RegenerationOverflow {
        max_tokens: gcfg.max_regen_tokens,
        attempts: gcfg.max_retries,
    })
}

/// Keeps pre-order nodes `[0, k)` of `tree` and regenerates from the
/// mutation point to the end of the rule under grammar masking.
pub fn regenerate_suffix<F: Scalar>(
    params: &TransformerParams<F>,
    tree: &ExprTree,
    k: usize,
    e_task: &[f64; D_TASK],
    max_depth: usize,
    gcfg: &GuidedConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ExprTree, GuidedError> {
    if k >= tree.size() {
        return Err(GuidedError::Expr(ExprError::IndexOutOfRange {
            index: k,
            size: tree.size(),
        }));
    }
    model_completion(params, &tree.nodes()[..k], e_task, max_depth, gcfg, rng, None)
}

/// Same as [`regenerate_suffix`] but records the per-step generation trace.
#[allow(clippy::too_many_arguments)]
pub fn regenerate_suffix_traced<F: Scalar>(
    params: &TransformerParams<F>,
    tree: &ExprTree,
    k: usize,
    e_task: &[f64; D_TASK],
    max_depth: usize,
    gcfg: &GuidedConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ExprTree, Vec<TraceStep>), GuidedError> {
    if k >= tree.size() {
        return Err(GuidedError::Expr(ExprError::IndexOutOfRange {
            index: k,
            size: tree.size(),
        }));
    }
    let mut trace = Vec::new();
    let tree = model_completion(
        params,
        &tree.nodes()[..k],
        e_task,
        max_depth,
        gcfg,
        rng,
        Some(&mut trace),
    )?;
    Ok((tree, trace))
}

/// Samples a complete rule from the model (empty kept prefix).
pub fn generate_full_rule<F: Scalar>(
    params: &TransformerParams<F>,
    e_task: &[f64; D_TASK],
    max_depth: usize,
    gcfg: &GuidedConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ExprTree, GuidedError> {
    model_completion(params, &[], e_task, max_depth, gcfg, rng, None)
}

/// Model-guided mutation: optionally shift the task focus, pick one rule,
/// pick a uniform mutation point, and regenerate the suffix with the
/// matching model under the (possibly switched) task embedding. Falls back
/// to standard mutation if regeneration overflows.
pub fn guided_mutation(
    parent: &Individual,
    models: &GuidedModels,
    tasks: &[TaskSpec],
    ecfg: &EvoConfig,
    gcfg: &GuidedConfig,
    rng: &mut ChaCha8Rng,
) -> Individual {
    let mut task = parent.task;
    if tasks.len() >= 2 && rng.random_bool(gcfg.task_switch_prob) {
        let pick = rng.random_range(0..tasks.len() - 1);
        task = if pick >= parent.task { pick + 1 } else { pick };
    }
    let e_task = task_embedding(&tasks[task]);
    let mutate_sequencing = rng.random_bool(0.5);
    let (model, tree) = if mutate_sequencing {
        (&models.sequencing, &parent.heuristic.sequencing)
    } else {
        (&models.routing, &parent.heuristic.routing)
    };
    let k = rng.random_range(0..tree.size());
    match regenerate_suffix(model, tree, k, &e_task, ecfg.max_depth, gcfg, rng) {
        Ok(mutated) => {
            let heuristic = if mutate_sequencing {
                Heuristic::new(mutated, parent.heuristic.routing.clone())
            } else {
                Heuristic::new(parent.heuristic.sequencing.clone(), mutated)
            };
            Individual {
                heuristic,
                task,
                fitness: None,
            }
        }
        Err(e) => {
            log::warn!("guided mutation fell back to standard mutation: {e}");
            let mut fallback = standard_mutation(parent, ecfg, rng);
            fallback.task = task;
            fallback
        }
    }
}

/// [`VariationOperator`] adapter for the evolution loop.
pub struct GuidedVariation<'a> {
    pub models: &'a GuidedModels,
    pub gcfg: GuidedConfig,
}

impl VariationOperator for GuidedVariation<'_> {
    fn name(&self) -> &'static str {
        "TransGP"
    }

    fn vary(
        &self,
        parent: &Individual,
        cfg: &EvoConfig,
        tasks: &[TaskSpec],
        rng: &mut ChaCha8Rng,
    ) -> Individual {
        guided_mutation(parent, self.models, tasks, cfg, &self.gcfg, rng)
    }
}

/// Summary statistics for generation-only sampling.
#[derive(Clone, Debug)]
pub struct BaselineStats {
    pub min: f64,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl BaselineStats {
    pub fn from_values(values: Vec<f64>) -> BaselineStats {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        BaselineStats {
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            mean,
            std,
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            values,
        }
    }
}

/// Generation-only baseline: sample `n` (sequencing, routing) pairs from the
/// trained models and evaluate each on the task's test seeds.
#[allow(clippy::too_many_arguments)]
pub fn pure_trans_baseline(
    models: &GuidedModels,
    task: &TaskSpec,
    n: usize,
    test_seeds: &[u64],
    max_depth: usize,
    num_jobs: usize,
    gcfg: &GuidedConfig,
    sample_seed: u64,
) -> Result<BaselineStats, GuidedError> {
    let e_task = task_embedding(task);
    let pairs: Vec<Heuristic> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeds::derive(sample_seed, domain::SAMPLE, i as u64));
            let sequencing =
                generate_full_rule(&models.sequencing, &e_task, max_depth, gcfg, &mut rng)?;
            let routing = generate_full_rule(&models.routing, &e_task, max_depth, gcfg, &mut rng)?;
            Ok(Heuristic::new(sequencing, routing))
        })
        .collect::<Result<_, GuidedError>>()?;
    let values: Vec<f64> = pairs
        .iter()
        .map(|h| crate::gp::test_heuristic(h, task, test_seeds, num_jobs))
        .collect();
    Ok(BaselineStats::from_values(values))
}
