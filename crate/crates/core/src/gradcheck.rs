//! Finite-difference check of the full training loss against the tape.
//!
//! Quantisation is frozen at the base point (`z_q = z_q0 + (z_e − z_e0)`),
//! so the loss is smooth in every network parameter. Dropout is off.

use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::model::{MuserModel, Quantization};
use crate::tokenizer::CpSequence;
use muser_numerics::{ParamId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGradCheck {
    /// Largest `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub probes: usize,
    pub params: usize,
}

fn loss_at(model: &MuserModel, seqs: &[CpSequence], z_e0: &muser_numerics::Tensor, z_q0: &muser_numerics::Tensor) -> Result<f64> {
    let batch = model.batch(seqs)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Quantization::Frozen { z_e0, z_q0 })?;
    let v = tape.value(out.total).item();
    if !v.is_finite() {
        return Err(MuserError::NonFinite("gradcheck loss".into()));
    }
    Ok(v)
}

/// Compares parameter gradients with central differences at up to
/// `per_param` evenly spaced coordinates of every parameter tensor.
pub fn model_grad_check(model: &MuserModel, seqs: &[CpSequence], eps: f64, per_param: usize) -> Result<ModelGradCheck> {
    let batch = model.batch(seqs)?;
    let (z_e0, z_q0) = {
        let mut tape = Tape::new();
        let z_e = model.encode(&mut tape, &batch.tokens, batch.m, batch.n)?;
        let z_e0 = tape.value(z_e).clone();
        let z_q0 = model.codebook.quantize(&z_e0)?.z_q;
        (z_e0, z_q0)
    };
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Quantization::Frozen { z_e0: &z_e0, z_q0: &z_q0 })?;
    tape.backward(out.total)?;
    let grads = tape.param_grads(model.store.len());

    let mut probe = model.clone();
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut report = ModelGradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        probes: 0,
        params: ids.len(),
    };
    for id in ids {
        let len = model.store.get(id).len();
        let n = per_param.clamp(1, len);
        let zeros = vec![0.0; len];
        let analytic = grads.get(id).unwrap_or(&zeros);
        for c in (0..n).map(|i| i * len / n) {
            let x0 = model.store.get(id).data()[c];
            probe.store.get_mut(id).data_mut()[c] = x0 + eps;
            let fp = loss_at(&probe, seqs, &z_e0, &z_q0)?;
            probe.store.get_mut(id).data_mut()[c] = x0 - eps;
            let fm = loss_at(&probe, seqs, &z_e0, &z_q0)?;
            probe.store.get_mut(id).data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic[c] - numeric).abs() / analytic[c].abs().max(1.0);
            report.probes += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = model.store.name(id).to_string();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CondMode, DecoderMode, DrMode};
    use crate::model::tests::{tiny_config, toy_sequence};

    #[test]
    fn tiny_model_gradients_agree() {
        let model = MuserModel::new(tiny_config(), 0).unwrap();
        let r = model_grad_check(&model, &[toy_sequence(0), toy_sequence(2)], 1e-6, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.probes >= r.params);
    }

    #[test]
    fn alternative_configurations_agree() {
        for (dr, cond, dec) in [
            (DrMode::Mean, CondMode::CrossAttention, DecoderMode::GlobalElement),
            (DrMode::Transformer, CondMode::Concat, DecoderMode::GlobalElement),
            (DrMode::Transformer, CondMode::CrossAttention, DecoderMode::GlobalOnly),
            (DrMode::Mean, CondMode::Concat, DecoderMode::GlobalOnly),
            (DrMode::Transformer, CondMode::CrossAttention, DecoderMode::ElementOnly),
        ] {
            let mut c = tiny_config();
            c.dr_mode = dr;
            c.cond_mode = cond;
            c.decoders = dec;
            let model = MuserModel::new(c, 1).unwrap();
            let r = model_grad_check(&model, &[toy_sequence(1), toy_sequence(3)], 1e-6, 1).unwrap();
            assert!(r.max_rel_error < 1e-4, "{dr:?} {cond:?} {dec:?}: {r:?}");
        }
    }
}
