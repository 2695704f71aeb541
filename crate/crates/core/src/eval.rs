//! Evaluation: closest-target accuracy metrics, the mean negative
//! log-likelihood metric (nats per token), iteration sweeps for shared
//! models, and the AR-vs-NAR latency benchmark.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mode, TransformerModel};
use crate::scalar::Scalar;
use crate::synthdata::{apply_rule, ModalityRule, SequencePair, Vocabulary};

pub const MCA_PROB_FLOOR: f64 = 1e-12;

/// Hamming distance over equal-length value sequences.
fn hamming(a: &[i64], b: &[i64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// The rule whose target is closest (Hamming) to the output; ties break to
/// the lowest rule index. Returns (rule index, closest target, distance).
pub fn closest_target(
    output: &[i64],
    source: &[i64],
    rules: &[ModalityRule],
) -> (usize, Vec<i64>, usize) {
    assert!(!rules.is_empty(), "closest_target needs at least one rule");
    let mut best: Option<(usize, Vec<i64>, usize)> = None;
    for (idx, rule) in rules.iter().enumerate() {
        let tgt = apply_rule(source, rule);
        let d = hamming(output, &tgt);
        match &best {
            Some((_, _, bd)) if *bd <= d => {}
            _ => best = Some((idx, tgt, d)),
        }
    }
    best.expect("non-empty rules")
}

#[derive(Clone, Debug, Serialize)]
pub struct ModalityShare {
    pub id: String,
    pub percent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AccuracyReport {
    /// Percentage of tokens matching the closest target.
    pub number_accuracy: f64,
    /// Percentage of outputs equal to some rule target exactly.
    pub sequence_accuracy: f64,
    /// Share of outputs whose closest target carries each modality.
    pub modality_distribution: Vec<ModalityShare>,
    pub pairs: usize,
    /// Set when called on an empty output list (metrics forced to 0).
    pub empty_input: bool,
}

/// Table-style metrics: per-token match rate against the closest target,
/// exact-sequence match rate, and the empirical closest-modality shares.
pub fn accuracy_metrics(
    outputs: &[Vec<i64>],
    sources: &[Vec<i64>],
    rules: &[ModalityRule],
) -> AccuracyReport {
    assert_eq!(outputs.len(), sources.len(), "accuracy_metrics: unaligned lists");
    if outputs.is_empty() {
        return AccuracyReport {
            number_accuracy: 0.0,
            sequence_accuracy: 0.0,
            modality_distribution: vec![],
            pairs: 0,
            empty_input: true,
        };
    }
    let mut token_matches = 0usize;
    let mut tokens = 0usize;
    let mut exact = 0usize;
    let mut counts = vec![0usize; rules.len()];
    for (out, src) in outputs.iter().zip(sources) {
        let (idx, _tgt, dist) = closest_target(out, src, rules);
        counts[idx] += 1;
        tokens += out.len();
        token_matches += out.len() - dist;
        if dist == 0 {
            exact += 1;
        }
    }
    let n = outputs.len() as f64;
    AccuracyReport {
        number_accuracy: 100.0 * token_matches as f64 / tokens.max(1) as f64,
        sequence_accuracy: 100.0 * exact as f64 / n,
        modality_distribution: rules
            .iter()
            .zip(&counts)
            .map(|(r, &c)| ModalityShare { id: r.id.clone(), percent: 100.0 * c as f64 / n })
            .collect(),
        pairs: outputs.len(),
        empty_input: false,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct McaReport {
    pub nats_per_token: f64,
    /// Count of target tokens whose probability hit the floor.
    pub floor_hits: u64,
    pub pairs: usize,
}

/// Which readout the likelihood is evaluated at.
#[derive(Clone, Copy, Debug)]
pub enum Readout {
    /// The final readout (the Y_0 distribution).
    Final,
    /// Stacked models: the readout of transition t (the Y_{t-1} level).
    Level(usize),
    /// Shared models: the readout after k block applications.
    Iteration(usize),
}

/// Dataset mean of the per-pair mean negative log-likelihood of the true
/// target under the factorized readout distribution.
pub fn mca<S: Scalar>(
    model: &TransformerModel<S>,
    srcs: &[Vec<usize>],
    tgts: &[Vec<usize>],
    readout: Readout,
) -> Result<McaReport> {
    if model.cfg.mode != Mode::Nar {
        return Err(Error::Config("mca is defined for NAR models".into()));
    }
    if srcs.len() != tgts.len() || srcs.is_empty() {
        return Err(Error::Data("mca: need equal-length non-empty src/tgt lists".into()));
    }
    let mut total = 0.0;
    let mut floor_hits = 0u64;
    for (src, tgt) in srcs.iter().zip(tgts) {
        let dist = match readout {
            Readout::Final => {
                let chain = model.nar_forward(src)?;
                chain.into_iter().last().expect("chain").1
            }
            Readout::Level(t) => {
                let chain = model.nar_forward(src)?;
                if t < 1 || t > model.cfg.transitions {
                    return Err(Error::Config(format!("level {t} outside [1, T]")));
                }
                chain.into_iter().nth(model.cfg.transitions - t).expect("chain").1
            }
            Readout::Iteration(k) => {
                let dists = model.iterative_forward(src, k)?;
                dists.into_iter().last().expect("k >= 1")
            }
        };
        let mut pair_nll = 0.0;
        for (i, &t) in tgt.iter().enumerate() {
            let p = dist.row(i)[t].as_f64();
            if p < MCA_PROB_FLOOR {
                floor_hits += 1;
                pair_nll -= MCA_PROB_FLOOR.ln();
            } else {
                pair_nll -= p.ln();
            }
        }
        total += pair_nll / tgt.len() as f64;
    }
    Ok(McaReport { nats_per_token: total / srcs.len() as f64, floor_hits, pairs: srcs.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationPoint {
    pub k: usize,
    pub sequence_accuracy: f64,
    pub number_accuracy: f64,
    pub mca_nats: f64,
}

/// Sequence accuracy and the likelihood metric for k = 1..=k_max block
/// applications of a shared-transitions model.
pub fn iteration_sweep<S: Scalar>(
    model: &TransformerModel<S>,
    pairs: &[SequencePair],
    vocab: &Vocabulary,
    rules: &[ModalityRule],
    k_max: usize,
) -> Result<Vec<IterationPoint>> {
    if k_max < 1 {
        return Err(Error::Config("k_max must be >= 1".into()));
    }
    let srcs: Vec<Vec<usize>> =
        pairs.iter().map(|p| vocab.encode(&p.source)).collect::<Result<_>>()?;
    let tgts: Vec<Vec<usize>> =
        pairs.iter().map(|p| vocab.encode(&p.target)).collect::<Result<_>>()?;
    let sources: Vec<Vec<i64>> = pairs.iter().map(|p| p.source.clone()).collect();
    let mut out = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut outputs = Vec::with_capacity(pairs.len());
        for src in &srcs {
            let ids = model.iterative_decode(src, k)?;
            outputs.push(vocab.decode(&ids).into_iter().map(|v| v.unwrap_or(i64::MIN)).collect());
        }
        let acc = accuracy_metrics(&outputs, &sources, rules);
        let m = mca(model, &srcs, &tgts, Readout::Iteration(k))?;
        out.push(IterationPoint {
            k,
            sequence_accuracy: acc.sequence_accuracy,
            number_accuracy: acc.number_accuracy,
            mca_nats: m.nats_per_token,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub nar_mean_s: f64,
    pub nar_std_s: f64,
    pub ar_mean_s: f64,
    pub ar_std_s: f64,
    /// ar_mean / nar_mean.
    pub ratio: f64,
    pub sequences: usize,
    pub batch_size: usize,
    pub warmup_sequences: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Wall-clock seconds per sequence for one-pass NAR decoding vs AR greedy
/// decoding over the same sources; warm-up sequences are excluded from the
/// statistics.
pub fn latency_bench<S: Scalar>(
    nar_model: &TransformerModel<S>,
    ar_model: &TransformerModel<S>,
    srcs: &[Vec<usize>],
    batch_size: usize,
) -> Result<LatencyReport> {
    if srcs.is_empty() {
        return Err(Error::Data("latency_bench: no sequences".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let warmup = srcs.len().min(5);
    let mut nar_times = Vec::with_capacity(srcs.len());
    let mut ar_times = Vec::with_capacity(srcs.len());
    for (i, src) in srcs.iter().enumerate() {
        let t0 = Instant::now();
        let out = nar_model.decode_argmax(src)?;
        let dt = t0.elapsed().as_secs_f64();
        debug_assert_eq!(out.len(), src.len());
        if i >= warmup {
            nar_times.push(dt);
        }
    }
    for (i, src) in srcs.iter().enumerate() {
        let t0 = Instant::now();
        let out = ar_model.ar_decode(src)?;
        let dt = t0.elapsed().as_secs_f64();
        debug_assert_eq!(out.len(), src.len());
        if i >= warmup {
            ar_times.push(dt);
        }
    }
    let (nar_mean, nar_std) = mean_std(&nar_times);
    let (ar_mean, ar_std) = mean_std(&ar_times);
    Ok(LatencyReport {
        nar_mean_s: nar_mean,
        nar_std_s: nar_std,
        ar_mean_s: ar_mean,
        ar_std_s: ar_std,
        ratio: ar_mean / nar_mean,
        sequences: nar_times.len(),
        batch_size,
        warmup_sequences: warmup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::DatasetSpec;

    fn rules() -> Vec<ModalityRule> {
        DatasetSpec::desk_scale(0).rules
    }

    #[test]
    fn closest_target_exact_tie_and_single() {
        let rules = rules();
        let src = vec![10, 20, 30, 40];
        let t1 = apply_rule(&src, &rules[0]);
        let (idx, tgt, d) = closest_target(&t1, &src, &rules);
        assert_eq!((idx, d), (0, 0));
        assert_eq!(tgt, t1);
        // rule-I odd positions with rule-II even positions: distance 2 to
        // both, tie resolves to the lower index
        let mixed = vec![10 + 500, 20 + 500, 30 + 500, 40 + 500];
        let (idx2, _, d2) = closest_target(&mixed, &src, &rules);
        assert_eq!((idx2, d2), (0, 2));
        // single rule configured -> always that rule
        let (idx3, _, _) = closest_target(&mixed, &src, &rules[1..2]);
        assert_eq!(idx3, 0);
    }

    #[test]
    fn accuracy_on_exact_balanced_outputs() {
        let rules = rules();
        let sources: Vec<Vec<i64>> = (0..40).map(|i| vec![1 + i % 50, 2 + i % 50]).collect();
        let outputs: Vec<Vec<i64>> = sources
            .iter()
            .enumerate()
            .map(|(i, s)| apply_rule(s, &rules[i % 4]))
            .collect();
        let rep = accuracy_metrics(&outputs, &sources, &rules);
        assert_eq!(rep.number_accuracy, 100.0);
        assert_eq!(rep.sequence_accuracy, 100.0);
        let total: f64 = rep.modality_distribution.iter().map(|m| m.percent).sum();
        assert!((total - 100.0).abs() < 0.1);
        for m in &rep.modality_distribution {
            assert_eq!(m.percent, 25.0);
        }
    }

    #[test]
    fn mixed_modality_outputs_zero_sequence_accuracy() {
        let rules = rules();
        let sources: Vec<Vec<i64>> = (0..10).map(|i| vec![1 + i, 2 + i, 3 + i, 4 + i]).collect();
        // odd positions from rule I, even from rule II: never an exact target
        let outputs: Vec<Vec<i64>> = sources
            .iter()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(i, &v)| if i % 2 == 0 { v + 500 } else { v + 500 })
                    .collect()
            })
            .collect();
        let rep = accuracy_metrics(&outputs, &sources, &rules);
        assert_eq!(rep.sequence_accuracy, 0.0);
        assert!(rep.number_accuracy > 0.0);
        assert!(rep.sequence_accuracy <= rep.number_accuracy);
    }

    #[test]
    fn empty_input_reports_zeros_with_flag() {
        let rep = accuracy_metrics(&[], &[], &rules());
        assert!(rep.empty_input);
        assert_eq!(rep.number_accuracy, 0.0);
        assert_eq!(rep.sequence_accuracy, 0.0);
        assert!(rep.modality_distribution.is_empty());
    }

    fn nar_model(vocab: usize, shared: bool) -> TransformerModel<f64> {
        TransformerModel::new(
            ModelConfig {
                enc_layers: 1,
                dec_layers: if shared { 1 } else { 2 },
                transitions: 2,
                d_model: 8,
                heads: 2,
                ffn_dim: 12,
                shared_transitions: shared,
                mode: Mode::Nar,
                vocab_size: vocab,
                max_len: 8,
            },
            41,
        )
        .unwrap()
    }

    #[test]
    fn mca_uniform_and_point_mass() {
        // uniform distribution gives ln(vocab); a model is not needed for
        // that identity, so check via a crafted model on the floor instead
        let vocab = 12;
        let model = nar_model(vocab, false);
        let srcs = vec![vec![4, 5, 6], vec![7, 8, 9]];
        let tgts = vec![vec![5, 6, 7], vec![8, 9, 10]];
        let m = mca(&model, &srcs, &tgts, Readout::Final).unwrap();
        assert!(m.nats_per_token > 0.0);
        // random init stays in the vicinity of uniform
        assert!((m.nats_per_token - (vocab as f64).ln()).abs() < 1.5);
        // order invariance
        let srcs_r = vec![srcs[1].clone(), srcs[0].clone()];
        let tgts_r = vec![tgts[1].clone(), tgts[0].clone()];
        let m2 = mca(&model, &srcs_r, &tgts_r, Readout::Final).unwrap();
        assert!((m.nats_per_token - m2.nats_per_token).abs() < 1e-9);
        // level variant matches final for t = 1
        let m3 = mca(&model, &srcs, &tgts, Readout::Level(1)).unwrap();
        assert_eq!(m.nats_per_token, m3.nats_per_token);
    }

    #[test]
    fn mca_rejects_ar_models() {
        let mut cfg = nar_model(12, false).cfg.clone();
        cfg.mode = Mode::Ar;
        let ar = TransformerModel::<f64>::new(cfg, 1).unwrap();
        assert!(mca(&ar, &[vec![1]], &[vec![2]], Readout::Final).is_err());
    }

    #[test]
    fn iteration_sweep_shapes_and_k1_matches_single_application() {
        let spec = DatasetSpec {
            num_train: 0,
            num_val: 0,
            num_test: 6,
            seq_len: 4,
            value_range: (1, 30),
            rules: rules(),
            merge_map: None,
            seed: 2,
        };
        let ds = crate::synthdata::generate_dataset(&spec).unwrap();
        let vocab = Vocabulary::from_spec(&spec);
        let model = nar_model(vocab.size(), true);
        let curve = iteration_sweep(&model, &ds.test, &vocab, &spec.rules, 3).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(curve[0].k, 1);
        // untrained model: near-chance flat curve, metrics defined
        for p in &curve {
            assert!(p.mca_nats.is_finite());
            assert!(p.sequence_accuracy >= 0.0 && p.sequence_accuracy <= 100.0);
        }
        // k = 1 equals the single-application readout metric
        let srcs: Vec<Vec<usize>> =
            ds.test.iter().map(|p| vocab.encode(&p.source).unwrap()).collect();
        let tgts: Vec<Vec<usize>> =
            ds.test.iter().map(|p| vocab.encode(&p.target).unwrap()).collect();
        let m1 = mca(&model, &srcs, &tgts, Readout::Iteration(1)).unwrap();
        assert_eq!(curve[0].mca_nats, m1.nats_per_token);
    }

    #[test]
    fn latency_bench_reports_and_batch_flag() {
        let vocab = 16;
        let nar = nar_model(vocab, false);
        let mut ar_cfg = nar.cfg.clone();
        ar_cfg.mode = Mode::Ar;
        let ar = TransformerModel::<f64>::new(ar_cfg, 3).unwrap();
        let srcs: Vec<Vec<usize>> = (0..12).map(|i| vec![4 + i % 8, 5, 6, 7, 8, 9]).collect();
        let rep = latency_bench(&nar, &ar, &srcs, 1).unwrap();
        assert_eq!(rep.batch_size, 1);
        assert_eq!(rep.sequences, 12 - rep.warmup_sequences);
        assert!(rep.nar_mean_s > 0.0 && rep.ar_mean_s > 0.0);
        assert!(rep.ratio > 0.0);
        assert!(latency_bench(&nar, &ar, &[], 1).is_err());
    }
}
