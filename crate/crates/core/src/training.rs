//! Residual glancing training.
//!
//! Each step runs the transition chain twice: a prediction pass (no
//! gradients) that yields per-transition distributions, argmax predictions
//! and diffusion intermediate targets, then a learning pass in which part of
//! each transition's input rows are overwritten with embeddings of
//! intermediate-target tokens the previous transition failed to predict.
//! Only non-glanced positions contribute to each transition's loss, and a
//! mu-fraction of the glanced tokens is fused into the next transition's
//! input.
//!
//! Randomness policy: one seeded stream, drawn in a fixed documented order
//! (per step: batch indices, then per pair in batch order, per transition
//! t = T..1: the RGS subset, then the schedule subset). All other work is
//! deterministic, so training is bit-reproducible under a fixed seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, RngState};
use crate::diffusion::{
    d3pm_posterior, intermediate_target, interpolation_normalizers, posterior_full,
    posterior_simplified, select_gamma, CategoricalSeqDist, D3pmKind, DiffusionSchedule,
    ProcessKind,
};
use crate::error::{Error, Result};
use crate::eval::accuracy_metrics;
use crate::model::{HiddenSeq, Mode, ModelConfig, TransformerModel};
use crate::optim::{adam_step, AdamState, LrSchedule};
use crate::scalar::Scalar;
use crate::synthdata::{merge_modalities, ModalityRule, SequencePair, Vocabulary, MASK};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Regimen {
    /// Diffusion targets + residual glancing (the default pipeline).
    Standard,
    /// Middle readout trained on the merged two-modality target, final
    /// readout on the original target; no glancing.
    ModalityGrowing,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Steps during which every transition targets the final data sequence.
    pub target_warmup_steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_regimen")]
    pub regimen: Regimen,
}

fn default_regimen() -> Regimen {
    Regimen::Standard
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be >= 1".into()));
        }
        if self.target_warmup_steps > self.total_steps {
            return Err(Error::Config("target_warmup_steps exceeds total_steps".into()));
        }
        Ok(())
    }
}

/// One training pair in token-id space.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// Target under the merged rule (modality-growing regimen).
    pub merged_tgt: Option<Vec<usize>>,
}

/// Encodes value pairs to token ids; with a merge map, also attaches each
/// pair's merged target.
pub fn encode_pairs(
    pairs: &[SequencePair],
    vocab: &Vocabulary,
    merge: Option<(&BTreeMap<String, String>, &[ModalityRule])>,
) -> Result<Vec<EncodedPair>> {
    let merged = match merge {
        Some((map, rules)) => Some(merge_modalities(pairs, map, rules)?),
        None => None,
    };
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(EncodedPair {
                src: vocab.encode(&p.source)?,
                tgt: vocab.encode(&p.target)?,
                merged_tgt: match &merged {
                    Some(m) => Some(vocab.encode(&m[i].target)?),
                    None => None,
                },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Glancing primitives
// ---------------------------------------------------------------------------

/// Positions chosen for glancing, their target tokens, and the complement
/// loss mask. `glanced` and `loss_mask == true` positions partition the
/// sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlanceOutcome {
    pub glanced_positions: Vec<usize>,
    pub glanced_tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl GlanceOutcome {
    pub fn empty(n: usize) -> Self {
        GlanceOutcome { glanced_positions: vec![], glanced_tokens: vec![], loss_mask: vec![true; n] }
    }

    pub fn new(y_star: &[usize], positions: Vec<usize>) -> Self {
        let mut loss_mask = vec![true; y_star.len()];
        let glanced_tokens = positions
            .iter()
            .map(|&p| {
                loss_mask[p] = false;
                y_star[p]
            })
            .collect();
        GlanceOutcome { glanced_positions: positions, glanced_tokens, loss_mask }
    }
}

/// Number of tokens to glance: floor(alpha * hamming distance), clamped to
/// the sequence length.
pub fn glancing_count(y_star: &[usize], y_hat: &[usize], alpha: f64) -> usize {
    assert_eq!(y_star.len(), y_hat.len(), "glancing_count: length mismatch");
    let d = y_star.iter().zip(y_hat).filter(|(a, b)| a != b).count();
    ((alpha * d as f64).floor() as usize).min(y_star.len())
}

/// Uniform subset of `count` positions where the intermediate target
/// disagrees with the previous transition's prediction (sorted).
pub fn rgs_positions<R: Rng>(
    y_star_tm1: &[usize],
    y_hat_t: &[usize],
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert_eq!(y_star_tm1.len(), y_hat_t.len(), "rgs_positions: length mismatch");
    let candidates: Vec<usize> =
        (0..y_star_tm1.len()).filter(|&i| y_star_tm1[i] != y_hat_t[i]).collect();
    sample_subset(&candidates, count, rng)
}

fn sample_subset<R: Rng>(items: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    let k = count.min(items.len());
    let mut v = items.to_vec();
    for i in 0..k {
        let j = rng.gen_range(i..v.len());
        v.swap(i, j);
    }
    v.truncate(k);
    v.sort_unstable();
    v
}

/// Glanced-row content: token embedding plus the positional embedding of the
/// destination row (matching how the initial decoder state is built).
fn glance_row<S: Scalar>(emb: &Tensor<S>, pos: &Tensor<S>, token: usize, position: usize) -> Vec<S> {
    emb.row(token).iter().zip(pos.row(position)).map(|(&e, &p)| e + p).collect()
}

/// Overwrites the glanced positions' rows with their token embeddings;
/// all other rows are untouched.
pub fn apply_glance<S: Scalar>(
    h: &HiddenSeq<S>,
    outcome: &GlanceOutcome,
    emb: &Tensor<S>,
    pos: &Tensor<S>,
) -> HiddenSeq<S> {
    let mut states = h.states.clone();
    for (&p, &tok) in outcome.glanced_positions.iter().zip(&outcome.glanced_tokens) {
        states.row_mut(p).copy_from_slice(&glance_row(emb, pos, tok, p));
    }
    HiddenSeq { states, step: h.step }
}

/// The mu-subset of an outcome's glanced tokens fused into the next
/// transition's input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedulePick {
    pub positions: Vec<usize>,
    pub tokens: Vec<usize>,
}

/// Uniformly picks floor(mu * S) of the glanced tokens.
pub fn pick_schedule_subset<R: Rng>(outcome: &GlanceOutcome, mu: f64, rng: &mut R) -> SchedulePick {
    let count = (mu * outcome.glanced_positions.len() as f64).floor() as usize;
    let positions = sample_subset(&outcome.glanced_positions, count, rng);
    let tokens = positions
        .iter()
        .map(|p| {
            let idx = outcome.glanced_positions.iter().position(|q| q == p).expect("subset");
            outcome.glanced_tokens[idx]
        })
        .collect();
    SchedulePick { positions, tokens }
}

/// Fuses a mu-subset of the glanced tokens into the next transition's input
/// state; `mu = 0` is a no-op, `mu = 1` fuses every glanced position.
pub fn schedule_glance<S: Scalar, R: Rng>(
    h_next: &HiddenSeq<S>,
    outcome: &GlanceOutcome,
    mu: f64,
    rng: &mut R,
    emb: &Tensor<S>,
    pos: &Tensor<S>,
) -> (HiddenSeq<S>, SchedulePick) {
    let pick = pick_schedule_subset(outcome, mu, rng);
    let mut states = h_next.states.clone();
    for (&p, &tok) in pick.positions.iter().zip(&pick.tokens) {
        states.row_mut(p).copy_from_slice(&glance_row(emb, pos, tok, p));
    }
    (HiddenSeq { states, step: h_next.step }, pick)
}

/// Mean negative log-probability of the target tokens over loss-mask
/// positions; glanced positions are excluded. An empty mask yields 0.
pub fn transition_loss<S: Scalar>(
    dist: &CategoricalSeqDist<S>,
    y_star: &[usize],
    outcome: &GlanceOutcome,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &t) in y_star.iter().enumerate() {
        if outcome.loss_mask[i] {
            total -= dist.row(i)[t].as_f64().max(1e-300).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Weighted sum of per-transition losses, ordered t = 1..=T (final readout
/// first) to match the lambda layout.
pub fn total_loss(per_transition: &[f64], lambdas: &[f64]) -> Result<f64> {
    if per_transition.len() != lambdas.len() {
        return Err(Error::Dimension(format!(
            "total_loss: {} losses vs {} lambdas",
            per_transition.len(),
            lambdas.len()
        )));
    }
    Ok(per_transition.iter().zip(lambdas).map(|(l, w)| l * w).sum())
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub total_loss: f64,
    /// Ordered t = 1..=T (final readout first).
    pub per_transition_loss: Vec<f64>,
    /// Mean glanced-token count per transition (same order).
    pub mean_glanced: Vec<f64>,
    pub alpha: f64,
    pub empty_mask_events: u64,
}

/// Per-pair plan computed by the prediction pass.
struct PairPlan {
    /// Index i holds transition t = T - i (chain order).
    y_stars: Vec<Vec<usize>>,
    outcomes: Vec<GlanceOutcome>,
    picks: Vec<Option<SchedulePick>>,
}

pub struct Trainer<S: Scalar> {
    pub model: TransformerModel<S>,
    pub adam: AdamState<S>,
    pub schedule: DiffusionSchedule,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
    pub step: u64,
    pub empty_mask_events: u64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: TransformerModel<S>, schedule: DiffusionSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        if model.cfg.mode == Mode::Nar && model.cfg.transitions != schedule.steps {
            return Err(Error::Config(format!(
                "model transitions {} != schedule steps {}",
                model.cfg.transitions, schedule.steps
            )));
        }
        if cfg.regimen == Regimen::ModalityGrowing
            && (model.cfg.mode != Mode::Nar || model.cfg.transitions != 2 || model.cfg.shared_transitions)
        {
            return Err(Error::Config("modality growing wants a stacked NAR model with T = 2".into()));
        }
        if schedule.kind == ProcessKind::MdpFull && schedule.gammas.is_none() {
            return Err(Error::Config("full-form process needs fixed per-step gammas".into()));
        }
        let adam = AdamState::new(&model.params, 0.0);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { model, adam, schedule, cfg, rng, step: 0, empty_mask_events: 0 })
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.cfg.seed, stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    pub fn alpha(&self) -> f64 {
        self.schedule.alpha_at(self.step, self.cfg.total_steps)
    }

    fn in_warmup(&self) -> bool {
        self.step < self.cfg.target_warmup_steps
    }

    /// Draws batch indices (uniform with replacement) from the documented
    /// stream order.
    pub fn sample_batch_indices(&mut self, data_len: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.rng.gen_range(0..data_len)).collect()
    }

    /// One optimizer step over a batch. Dispatches on mode and regimen.
    pub fn train_step(&mut self, batch: &[EncodedPair]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let metrics = match (self.model.cfg.mode, self.cfg.regimen) {
            (Mode::Ar, _) => self.ar_step(batch)?,
            (Mode::Nar, Regimen::ModalityGrowing) => self.growing_step(batch)?,
            (Mode::Nar, Regimen::Standard) => self.glancing_step(batch)?,
        };
        if !metrics.total_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} at step {}",
                metrics.total_loss, metrics.step
            )));
        }
        let inv = S::of_f64(1.0 / batch.len() as f64);
        for p in self.model.params.iter_mut() {
            p.grad.scale_inplace(inv);
        }
        self.adam.lr = self.cfg.lr.lr_at(self.step + 1, self.model.cfg.d_model);
        adam_step(&mut self.model.params, &mut self.adam)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Prediction pass + glancing plan for one pair (consumes RNG in the
    /// documented order).
    fn plan_pair(&mut self, pair: &EncodedPair) -> Result<PairPlan> {
        let t_total = self.model.cfg.transitions;
        let alpha = self.alpha();
        let mu = self.schedule.mu();
        let vocab = self.model.cfg.vocab_size;

        // prediction pass, no gradients
        let chain = self.model.nar_forward(&pair.src)?;
        let dist_for_t = |t: usize| &chain[t_total - t].1; // p(Y_{t-1} | Y_t)
        let yhat_level: Vec<Vec<usize>> =
            (1..=t_total).map(|t| dist_for_t(t).probs().argmax_rows()).collect();
        // prediction for level t as seen by transition t's residual rule;
        // the topmost conditioning is the decoder input copy itself
        let cond_for_t = |t: usize| -> Vec<usize> {
            if t == t_total {
                match self.schedule.kind {
                    // the absorbing chain's terminal state is all-mask
                    ProcessKind::D3pmAbsorbing => vec![MASK; pair.src.len()],
                    _ => pair.src.clone(),
                }
            } else {
                yhat_level[t].clone() // argmax p(Y_t | Y_{t+1})
            }
        };

        let mut y_stars = Vec::with_capacity(t_total);
        let mut outcomes = Vec::with_capacity(t_total);
        let mut picks = Vec::with_capacity(t_total);
        for t in (1..=t_total).rev() {
            let y_star = if t == 1 || self.in_warmup() {
                pair.tgt.clone()
            } else {
                let cond = cond_for_t(t);
                match self.schedule.kind {
                    ProcessKind::MdpSimplified => {
                        let p_tm2 = dist_for_t(t - 1);
                        let gamma = match &self.schedule.gammas {
                            Some(gs) => gs[t - 2],
                            None => select_gamma(
                                p_tm2,
                                &pair.tgt,
                                &cond,
                                &self.schedule.gamma_presets,
                                self.schedule.keep_fraction,
                            )?,
                        };
                        intermediate_target(&posterior_simplified(p_tm2, &pair.tgt, gamma)?)
                    }
                    ProcessKind::MdpFull => {
                        let gammas = self.schedule.gammas.as_ref().expect("validated");
                        let p_tm2 = dist_for_t(t - 1);
                        let p_tm1 = dist_for_t(t);
                        let zt = interpolation_normalizers(p_tm1, &pair.tgt, gammas[t - 1])?;
                        intermediate_target(&posterior_full(
                            p_tm2,
                            p_tm1,
                            &pair.tgt,
                            &cond,
                            gammas[t - 2],
                            self.schedule.omega(t),
                            &zt,
                        )?)
                    }
                    ProcessKind::D3pmAbsorbing => intermediate_target(&d3pm_posterior::<f64>(
                        &pair.tgt,
                        &cond,
                        t,
                        t_total,
                        D3pmKind::Absorbing,
                        vocab,
                        MASK,
                    )?),
                    ProcessKind::D3pmUniform => intermediate_target(&d3pm_posterior::<f64>(
                        &pair.tgt,
                        &cond,
                        t,
                        t_total,
                        D3pmKind::Uniform,
                        vocab,
                        MASK,
                    )?),
                }
            };

            // residual glancing: count from own prediction, candidates from
            // the previous transition's prediction
            let y_hat_own = &yhat_level[t - 1];
            let count = glancing_count(&y_star, y_hat_own, alpha);
            let positions = rgs_positions(&y_star, &cond_for_t(t), count, &mut self.rng);
            let outcome = GlanceOutcome::new(&y_star, positions);
            let pick = if t > 1 { Some(pick_schedule_subset(&outcome, mu, &mut self.rng)) } else { None };
            y_stars.push(y_star);
            outcomes.push(outcome);
            picks.push(pick);
        }
        Ok(PairPlan { y_stars, outcomes, picks })
    }

    /// Whether the prediction pass can be skipped (no glancing and all
    /// targets are the data sequence).
    fn plain_targets_only(&self) -> bool {
        self.alpha() == 0.0 && (self.model.cfg.transitions == 1 || self.in_warmup())
    }

    fn glancing_step(&mut self, batch: &[EncodedPair]) -> Result<StepMetrics> {
        let t_total = self.model.cfg.transitions;
        let lambdas = self.schedule.lambdas();
        let mut per_t_loss = vec![0.0; t_total];
        let mut glanced = vec![0.0; t_total];
        let mut total = 0.0;
        let mut empty_events = 0u64;

        let plans: Vec<PairPlan> = if self.plain_targets_only() {
            batch
                .iter()
                .map(|p| PairPlan {
                    y_stars: (0..t_total).map(|_| p.tgt.clone()).collect(),
                    outcomes: (0..t_total).map(|_| GlanceOutcome::empty(p.tgt.len())).collect(),
                    picks: (0..t_total).map(|_| None).collect(),
                })
                .collect()
        } else {
            batch.iter().map(|p| self.plan_pair(p)).collect::<Result<_>>()?
        };

        for (pair, plan) in batch.iter().zip(&plans) {
            let mut tape = Tape::new(&self.model.params);
            let enc = self.model.encode_on(&mut tape, &pair.src)?;
            let mut h = self.model.embed_with_pos(&mut tape, &pair.src)?;
            let mut terms = Vec::with_capacity(t_total);
            for (i, t) in (1..=t_total).rev().enumerate() {
                let outcome = &plan.outcomes[i];
                let h_in = if outcome.glanced_positions.is_empty() {
                    h
                } else {
                    let rows = self.model.glance_rows(
                        &mut tape,
                        &outcome.glanced_tokens,
                        &outcome.glanced_positions,
                    )?;
                    tape.replace_rows(h, &outcome.glanced_positions, rows)?
                };
                let (h_next, logits) = self.model.transition_on(&mut tape, h_in, enc, t)?;
                let loss = tape.masked_ce(logits, &plan.y_stars[i], &outcome.loss_mask)?;
                // lambdas are indexed by level t-1
                terms.push((loss, S::of_f64(lambdas[t - 1])));
                per_t_loss[t - 1] += tape.value(loss).item().as_f64();
                glanced[t - 1] += outcome.glanced_positions.len() as f64;
                h = match &plan.picks[i] {
                    Some(pick) if !pick.positions.is_empty() => {
                        let rows =
                            self.model.glance_rows(&mut tape, &pick.tokens, &pick.positions)?;
                        tape.replace_rows(h_next, &pick.positions, rows)?
                    }
                    _ => h_next,
                };
            }
            let root = tape.weighted_sum(&terms);
            total += tape.value(root).item().as_f64();
            tape.backward(root)?;
            empty_events += tape.empty_mask_events as u64;
            for (pid, g) in tape.into_leaf_grads() {
                self.model.params[pid].grad.add_assign(&g);
            }
        }

        let b = batch.len() as f64;
        self.empty_mask_events += empty_events;
        Ok(StepMetrics {
            step: self.step,
            lr: self.cfg.lr.lr_at(self.step + 1, self.model.cfg.d_model),
            total_loss: total / b,
            per_transition_loss: per_t_loss.iter().map(|l| l / b).collect(),
            mean_glanced: glanced.iter().map(|g| g / b).collect(),
            alpha: self.alpha(),
            empty_mask_events: self.empty_mask_events,
        })
    }

    fn growing_step(&mut self, batch: &[EncodedPair]) -> Result<StepMetrics> {
        let lambdas = self.schedule.lambdas();
        let mut per_t_loss = vec![0.0; 2];
        let mut total = 0.0;
        for pair in batch {
            let middle_tgt = pair.merged_tgt.as_ref().unwrap_or(&pair.tgt);
            let mask = vec![true; pair.tgt.len()];
            let mut tape = Tape::new(&self.model.params);
            let enc = self.model.encode_on(&mut tape, &pair.src)?;
            let h = self.model.embed_with_pos(&mut tape, &pair.src)?;
            let (h1, logits_mid) = self.model.transition_on(&mut tape, h, enc, 2)?;
            let (_h0, logits_fin) = self.model.transition_on(&mut tape, h1, enc, 1)?;
            let l_mid = tape.masked_ce(logits_mid, middle_tgt, &mask)?;
            let l_fin = tape.masked_ce(logits_fin, &pair.tgt, &mask)?;
            per_t_loss[1] += tape.value(l_mid).item().as_f64();
            per_t_loss[0] += tape.value(l_fin).item().as_f64();
            let root =
                tape.weighted_sum(&[(l_fin, S::of_f64(lambdas[0])), (l_mid, S::of_f64(lambdas[1]))]);
            total += tape.value(root).item().as_f64();
            tape.backward(root)?;
            for (pid, g) in tape.into_leaf_grads() {
                self.model.params[pid].grad.add_assign(&g);
            }
        }
        let b = batch.len() as f64;
        Ok(StepMetrics {
            step: self.step,
            lr: self.cfg.lr.lr_at(self.step + 1, self.model.cfg.d_model),
            total_loss: total / b,
            per_transition_loss: per_t_loss.iter().map(|l| l / b).collect(),
            mean_glanced: vec![0.0; 2],
            alpha: 0.0,
            empty_mask_events: self.empty_mask_events,
        })
    }

    fn ar_step(&mut self, batch: &[EncodedPair]) -> Result<StepMetrics> {
        let mut total = 0.0;
        for pair in batch {
            let mask = vec![true; pair.tgt.len()];
            let mut tape = Tape::new(&self.model.params);
            let enc = self.model.encode_on(&mut tape, &pair.src)?;
            let mut dec_in = Vec::with_capacity(pair.tgt.len());
            dec_in.push(crate::synthdata::BOS);
            dec_in.extend_from_slice(&pair.tgt[..pair.tgt.len() - 1]);
            let logits = self.model.ar_logits_on(&mut tape, enc, &dec_in)?;
            let loss = tape.masked_ce(logits, &pair.tgt, &mask)?;
            total += tape.value(loss).item().as_f64();
            tape.backward(loss)?;
            for (pid, g) in tape.into_leaf_grads() {
                self.model.params[pid].grad.add_assign(&g);
            }
        }
        let b = batch.len() as f64;
        Ok(StepMetrics {
            step: self.step,
            lr: self.cfg.lr.lr_at(self.step + 1, self.model.cfg.d_model),
            total_loss: total / b,
            per_transition_loss: vec![total / b],
            mean_glanced: vec![0.0],
            alpha: 0.0,
            empty_mask_events: self.empty_mask_events,
        })
    }
}

// ---------------------------------------------------------------------------
// Training loop with metrics/checkpoint emission
// ---------------------------------------------------------------------------

/// Data handed to the loop: encoded training pairs plus raw validation pairs
/// for closest-target evaluation.
pub struct TrainData<'a> {
    pub train: Vec<EncodedPair>,
    pub val: &'a [SequencePair],
    pub vocab: &'a Vocabulary,
    pub rules: &'a [ModalityRule],
}

/// Runs the full loop, writing `metrics.csv`, `eval.csv` and checkpoints
/// into `run_dir`. Returns the final step metrics.
pub fn run_training<S: Scalar>(
    run_dir: &Path,
    data: &TrainData,
    model_cfg: ModelConfig,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    log: bool,
) -> Result<StepMetrics> {
    fs::create_dir_all(run_dir)?;
    let model = TransformerModel::<S>::new(model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, schedule, cfg)?;
    let t_total = if trainer.model.cfg.mode == Mode::Ar { 1 } else { trainer.model.cfg.transitions };

    let mut metrics_file = fs::File::create(run_dir.join("metrics.csv"))?;
    let loss_cols: Vec<String> = (0..t_total).map(|t| format!("loss_t{t}")).collect();
    let s_cols: Vec<String> = (0..t_total).map(|t| format!("glanced_t{t}")).collect();
    writeln!(metrics_file, "step,lr,total_loss,{},{},alpha,empty_mask_events", loss_cols.join(","), s_cols.join(","))?;
    let mut eval_file = fs::File::create(run_dir.join("eval.csv"))?;
    writeln!(eval_file, "step,val_number_accuracy,val_sequence_accuracy")?;

    let mut last = None;
    for _ in 0..trainer.cfg.total_steps {
        let idxs = trainer.sample_batch_indices(data.train.len());
        let batch: Vec<EncodedPair> = idxs.iter().map(|&i| data.train[i].clone()).collect();
        let m = trainer.train_step(&batch)?;
        let losses: Vec<String> = m.per_transition_loss.iter().map(|l| format!("{l:.6}")).collect();
        let counts: Vec<String> = m.mean_glanced.iter().map(|g| format!("{g:.3}")).collect();
        writeln!(
            metrics_file,
            "{},{:.8},{:.6},{},{},{:.4},{}",
            m.step,
            m.lr,
            m.total_loss,
            losses.join(","),
            counts.join(","),
            m.alpha,
            m.empty_mask_events
        )?;
        let step_now = trainer.step;
        if trainer.cfg.eval_every > 0 && step_now % trainer.cfg.eval_every == 0 && !data.val.is_empty() {
            let (num_acc, seq_acc) = quick_val_accuracy(&trainer.model, data)?;
            writeln!(eval_file, "{step_now},{num_acc:.3},{seq_acc:.3}")?;
            if log {
                eprintln!(
                    "step {step_now}: loss {:.4} val num/seq acc {num_acc:.1}/{seq_acc:.1}",
                    m.total_loss
                );
            }
        }
        if trainer.cfg.checkpoint_every > 0 && step_now % trainer.cfg.checkpoint_every == 0 {
            let ck = Checkpoint::from_model(&trainer.model, step_now, Some(trainer.rng_state()));
            ck.save(&run_dir.join(format!("checkpoint_step{step_now}.json")))?;
        }
        last = Some(m);
    }
    let ck = Checkpoint::from_model(&trainer.model, trainer.step, Some(trainer.rng_state()));
    ck.save(&run_dir.join("checkpoint_final.json"))?;
    Ok(last.expect("at least one step"))
}

/// Closest-target accuracy on up to 200 validation pairs.
fn quick_val_accuracy<S: Scalar>(model: &TransformerModel<S>, data: &TrainData) -> Result<(f64, f64)> {
    let n = data.val.len().min(200);
    let mut outputs = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for p in &data.val[..n] {
        let src_ids = data.vocab.encode(&p.source)?;
        let out_ids = match model.cfg.mode {
            Mode::Nar => model.decode_argmax(&src_ids)?,
            Mode::Ar => model.ar_decode(&src_ids)?,
        };
        let out_vals: Vec<i64> =
            data.vocab.decode(&out_ids).into_iter().map(|v| v.unwrap_or(i64::MIN)).collect();
        outputs.push(out_vals);
        sources.push(p.source.clone());
    }
    let m = accuracy_metrics(&outputs, &sources, data.rules);
    Ok((m.number_accuracy, m.sequence_accuracy))
}
