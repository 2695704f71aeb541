//! Central finite-difference verification of the reverse-mode gradients.
//!
//! The numeric side re-evaluates the forward loss at wiggled parameter
//! values only, so it is independent of the tape's backward path.

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{Mode, TransformerModel};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub elements_checked: usize,
}

/// Forward-only chain loss covering every parameterized block: the mean
/// cross-entropy of `tgt` under every readout (NAR) or the teacher-forced
/// cross-entropy (AR).
pub fn chain_loss<S: Scalar>(model: &TransformerModel<S>, src: &[usize], tgt: &[usize]) -> Result<f64> {
    let (mut tape, root) = chain_loss_tape(model, src, tgt)?;
    let v = tape.value(root).item().as_f64();
    tape.empty_mask_events = 0;
    Ok(v)
}

/// Runs the chain loss and populates `param.grad` on the model.
pub fn chain_loss_backward<S: Scalar>(
    model: &mut TransformerModel<S>,
    src: &[usize],
    tgt: &[usize],
) -> Result<f64> {
    let (v, grads) = {
        let (mut tape, root) = chain_loss_tape(model, src, tgt)?;
        tape.backward(root)?;
        let v = tape.value(root).item().as_f64();
        (v, tape.into_leaf_grads())
    };
    for p in model.params.iter_mut() {
        p.zero_grad();
    }
    for (pid, g) in grads {
        model.params[pid].grad.add_assign(&g);
    }
    Ok(v)
}

fn chain_loss_tape<'m, S: Scalar>(
    model: &'m TransformerModel<S>,
    src: &[usize],
    tgt: &[usize],
) -> Result<(Tape<'m, S>, usize)> {
    let mut tape = Tape::new(&model.params);
    let mask = vec![true; tgt.len()];
    let root = match model.cfg.mode {
        Mode::Nar => {
            let enc = model.encode_on(&mut tape, src)?;
            let mut h = model.embed_with_pos(&mut tape, src)?;
            let mut terms = Vec::new();
            for t in (1..=model.cfg.transitions).rev() {
                let (h_next, logits) = model.transition_on(&mut tape, h, enc, t)?;
                let loss = tape.masked_ce(logits, tgt, &mask)?;
                terms.push((loss, S::one()));
                h = h_next;
            }
            tape.weighted_sum(&terms)
        }
        Mode::Ar => {
            let enc = model.encode_on(&mut tape, src)?;
            let mut dec_in = Vec::with_capacity(tgt.len());
            dec_in.push(crate::synthdata::BOS);
            dec_in.extend_from_slice(&tgt[..tgt.len() - 1]);
            let logits = model.ar_logits_on(&mut tape, enc, &dec_in)?;
            tape.masked_ce(logits, tgt, &mask)?
        }
    };
    Ok((tape, root))
}

/// Checks every parameter element of the model against central differences
/// of the chain loss. Elements where both gradients are ~0 are skipped.
pub fn finite_diff_check<S: Scalar>(
    model: &mut TransformerModel<S>,
    src: &[usize],
    tgt: &[usize],
    eps: f64,
) -> Result<GradCheckResult> {
    chain_loss_backward(model, src, tgt)?;
    let analytic: Vec<Vec<f64>> =
        model.params.iter().map(|p| p.grad.data().iter().map(|v| v.as_f64()).collect()).collect();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for pid in 0..model.params.len() {
        for j in 0..analytic[pid].len() {
            let orig = model.params[pid].value.data()[j];
            model.params[pid].value.data_mut()[j] = orig + S::of_f64(eps);
            let lp = chain_loss(model, src, tgt)?;
            model.params[pid].value.data_mut()[j] = orig - S::of_f64(eps);
            let lm = chain_loss(model, src, tgt)?;
            model.params[pid].value.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[pid][j];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-7 {
                continue;
            }
            checked += 1;
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", model.params[pid].name, j);
            }
        }
    }
    Ok(GradCheckResult { max_rel_err: max_rel, worst_param: worst, elements_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_cfg(mode: Mode, transitions: usize, shared: bool) -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: if shared { 1 } else { transitions },
            transitions,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            shared_transitions: shared,
            mode,
            vocab_size: 11,
            max_len: 8,
        }
    }

    #[test]
    fn nar_stacked_chain_passes_finite_differences() {
        let mut m = TransformerModel::<f64>::new(tiny_cfg(Mode::Nar, 2, false), 21).unwrap();
        let r = finite_diff_check(&mut m, &[1, 4, 9], &[2, 7, 5], 1e-4).unwrap();
        assert!(r.elements_checked > 500, "checked {}", r.elements_checked);
        assert!(r.max_rel_err < 1e-4, "worst {} at {}", r.max_rel_err, r.worst_param);
    }

    #[test]
    fn nar_shared_chain_passes_finite_differences() {
        let mut m = TransformerModel::<f64>::new(tiny_cfg(Mode::Nar, 3, true), 22).unwrap();
        let r = finite_diff_check(&mut m, &[10, 2], &[3, 3], 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-4, "worst {} at {}", r.max_rel_err, r.worst_param);
    }

    #[test]
    fn ar_chain_passes_finite_differences() {
        let mut m = TransformerModel::<f64>::new(tiny_cfg(Mode::Ar, 1, false), 23).unwrap();
        let r = finite_diff_check(&mut m, &[5, 6, 7], &[8, 9, 10], 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-4, "worst {} at {}", r.max_rel_err, r.worst_param);
    }
}
