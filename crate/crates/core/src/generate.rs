//! Autoregressive decoding from a latent sequence, prior-driven generation
//! and element transfer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::med::slice_range;
use crate::model::{Conditioning, MuserModel};
use crate::prior::PriorModel;
use crate::sampling::sample_token;
use crate::tokenizer::{CpSequence, CpToken};
use crate::vocab::{Emotion, Family, TokenType, NUM_ELEMENTS};
use muser_numerics::{Tape, Tensor};

/// Decodes tokens conditioned on `z_q` (`N × L`). With an emotion the first
/// token is fixed to it. Each step samples the family first, then the
/// active types of that family; the rest stay empty.
pub fn decode_tokens<R: Rng + ?Sized>(
    model: &MuserModel,
    z_q: &Tensor,
    emotion: Option<Emotion>,
    max_len: usize,
    rng: &mut R,
) -> Result<CpSequence> {
    let n = model.config.seq_len;
    if z_q.rows() != n || z_q.cols() != model.latent_size() {
        return Err(MuserError::data(format!(
            "latent is {}×{}, model expects {n}×{}",
            z_q.rows(),
            z_q.cols(),
            model.latent_size()
        )));
    }
    let min_len = if emotion.is_some() { 2 } else { 1 };
    if max_len < min_len || max_len > n {
        return Err(MuserError::config(format!("max_len {max_len} outside {min_len}..={n}")));
    }
    let mut tokens: Vec<CpToken> = emotion.map(CpToken::emotion).into_iter().collect();
    let mut seen_metric = false;
    loop {
        let t = tokens.len();
        let mut prefix = tokens.clone();
        prefix.push(CpToken::EOS);
        let len = t + 1;

        let mut tape = Tape::inference();
        let memory = tape.constant(z_q.clone());
        let aligned = tape.constant(z_q.slice_rows(0, len));
        let cond = Conditioning {
            memory,
            memory_len: n,
            aligned,
        };
        let h = model.decode_global(&mut tape, &prefix, 1, len, cond)?;
        let mut families: Vec<usize> = prefix.iter().map(|k| k.get(TokenType::Family)).collect();

        let fam_logits = model.decode_element(&mut tape, TokenType::Family, h, aligned, &families, 1, len)?;
        let mut row = tape.value(fam_logits).row(t).to_vec();
        row[Family::Emotion as usize] = f64::NEG_INFINITY;
        if !seen_metric {
            row[Family::Note as usize] = f64::NEG_INFINITY;
        }
        let family = if t + 1 >= max_len {
            Family::Eos
        } else {
            let i = sample_token(&row, model.config.sampling.get(TokenType::Family), rng)?;
            Family::from_index(i).expect("family logits cover four families")
        };
        if family == Family::Eos {
            tokens.push(CpToken::EOS);
            break;
        }

        let mut token = CpToken::EOS;
        token.set(TokenType::Family, family as usize);
        families[t] = family as usize;
        for &eps in family.active_types() {
            let lg = model.decode_element(&mut tape, eps, h, aligned, &families, 1, len)?;
            let mut row = tape.value(lg).row(t).to_vec();
            if family.required_types().contains(&eps) {
                row[0] = f64::NEG_INFINITY;
            }
            token.set(eps, sample_token(&row, model.config.sampling.get(eps), rng)?);
        }
        seen_metric |= family == Family::Metric;
        tokens.push(token);
    }
    Ok(CpSequence { tokens, emotion })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sequence: CpSequence,
    pub codes: Vec<usize>,
}

/// Samples codes from the prior under `emotion` and decodes them.
pub fn generate(model: &MuserModel, prior: &PriorModel, emotion: Emotion, max_len: usize, seed: u64) -> Result<Generated> {
    prior.check_compatible(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = prior.sample(emotion, prior.config.prior_sampling, &mut rng)?;
    let z_q = model.codebook.lookup(&codes)?;
    let sequence = decode_tokens(model, &z_q, Some(emotion), max_len, &mut rng)?;
    Ok(Generated { sequence, codes })
}

/// `z_q_A` with the slices of `elements` replaced by those of `z_q_B`.
pub fn assemble_transfer(z_a: &Tensor, z_b: &Tensor, elements: &[TokenType], l: usize) -> Result<Tensor> {
    if z_a.shape() != z_b.shape() {
        return Err(MuserError::data("transfer latents differ in shape"));
    }
    if z_a.cols() != NUM_ELEMENTS * l {
        return Err(MuserError::data(format!("latent width {} is not 7·{l}", z_a.cols())));
    }
    let mut out = z_a.clone();
    for &eps in elements {
        let (a, b) = slice_range(eps, l)?;
        for r in 0..out.rows() {
            out.row_mut(r)[a..b].copy_from_slice(&z_b.row(r)[a..b]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub elements: Vec<TokenType>,
    /// Token count of each piece up to and including EOS.
    pub len_a: usize,
    pub len_b: usize,
    /// Positions of B's codes past its EOS replaced by its EOS code.
    pub padded: Option<usize>,
    /// Element names taken from each source, in latent order.
    pub provenance: Vec<(TokenType, char)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub sequence: CpSequence,
    pub z_q: Tensor,
    pub report: TransferReport,
}

fn freeze_after(codes: &mut [usize], len: usize) -> usize {
    let last = codes[len - 1];
    codes[len..].iter_mut().for_each(|c| *c = last);
    codes.len() - len
}

/// Decodes a hybrid of `a` and `b`: the slices of `elements` come from `b`,
/// everything else and the emotion from `a`. When `b` is the shorter piece
/// its codes after EOS repeat the EOS code, so no padding reaches `a`'s
/// content; `a` is never altered.
pub fn element_transfer(
    model: &MuserModel,
    a: &CpSequence,
    b: &CpSequence,
    elements: &[TokenType],
    seed: u64,
) -> Result<Transfer> {
    for &e in elements {
        if !e.is_element() {
            return Err(MuserError::data(format!("{} cannot be transferred", e.name())));
        }
    }
    let q = model.quantize_sequences(&[a.clone(), b.clone()])?;
    let mut codes_b = q[1].0.clone();
    let len_of = |s: &CpSequence| s.eos_position().map_or(s.len(), |p| p + 1);
    let (len_a, len_b) = (len_of(a), len_of(b));
    let padded = (len_b < len_a).then(|| freeze_after(&mut codes_b, len_b));
    let z_a = &q[0].1;
    let z_b = model.codebook.lookup(&codes_b)?;
    let z_q = assemble_transfer(z_a, &z_b, elements, model.config.latent_per_element)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequence = decode_tokens(model, &z_q, a.emotion, model.config.seq_len, &mut rng)?;
    let provenance = TokenType::ELEMENTS
        .iter()
        .map(|e| (*e, if elements.contains(e) { 'B' } else { 'A' }))
        .collect();
    Ok(Transfer {
        sequence,
        z_q,
        report: TransferReport {
            elements: elements.to_vec(),
            len_a,
            len_b,
            padded,
            provenance,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, toy_sequence};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn decoded_sequences_are_well_formed() {
        let model = MuserModel::new(tiny_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = model.config.seq_len;
        for i in 0..30 {
            let codes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..model.codebook.size())).collect();
            let z = model.codebook.lookup(&codes).unwrap();
            let emotion = if i % 3 == 0 { None } else { Some(Emotion::ALL[i % 4]) };
            let s = decode_tokens(&model, &z, emotion, n, &mut rng).unwrap();
            s.validate(&model.vocab).unwrap();
            assert!(s.len() <= n);
            for tok in &s.tokens {
                let fam = tok.family().unwrap();
                for t in TokenType::ELEMENTS.into_iter().skip(1) {
                    if !fam.active_types().contains(&t) {
                        assert_eq!(tok.get(t), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn eos_forced_at_the_length_limit() {
        let model = MuserModel::new(tiny_config(), 1).unwrap();
        let z = model.codebook.lookup(&vec![0; model.config.seq_len]).unwrap();
        let s = decode_tokens(&model, &z, Some(Emotion::Q1), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.tokens, vec![CpToken::emotion(Emotion::Q1), CpToken::EOS]);
        assert!(decode_tokens(&model, &z, None, 99, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let model = MuserModel::new(tiny_config(), 2).unwrap();
        let prior = PriorModel::new(tiny_config(), 3).unwrap();
        let a = generate(&model, &prior, Emotion::Q3, 8, 11).unwrap();
        let b = generate(&model, &prior, Emotion::Q3, 8, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequence.tokens[0], CpToken::emotion(Emotion::Q3));
    }

    #[test]
    fn mismatched_prior_rejected() {
        let model = MuserModel::new(tiny_config(), 2).unwrap();
        let mut c = tiny_config();
        c.codebook_size = 16;
        let prior = PriorModel::new(c, 3).unwrap();
        assert!(generate(&model, &prior, Emotion::Q3, 8, 11).is_err());
    }

    #[test]
    fn empty_transfer_keeps_a() {
        let model = MuserModel::new(tiny_config(), 4).unwrap();
        let mut a = toy_sequence(0);
        a.tokens.remove(3);
        let b = toy_sequence(5);
        let t = element_transfer(&model, &a, &b, &[], 0).unwrap();
        let za = &model.quantize_sequences(&[a]).unwrap()[0].1;
        assert_eq!(&t.z_q, za);
        assert_eq!(t.report.padded, None);
        assert_eq!((t.report.len_a, t.report.len_b), (5, 6));
    }

    #[test]
    fn shorter_piece_is_frozen_after_eos() {
        let model = MuserModel::new(tiny_config(), 5).unwrap();
        let a = toy_sequence(0);
        let mut b = toy_sequence(1);
        b.tokens.remove(4);
        let t = element_transfer(&model, &a, &b, &[TokenType::Velocity], 0).unwrap();
        assert_eq!(t.report.len_b, 5);
        assert_eq!(t.report.padded, Some(3));
        let (lo, hi) = slice_range(TokenType::Velocity, 2).unwrap();
        for r in 5..8 {
            assert_eq!(&t.z_q.row(r)[lo..hi], &t.z_q.row(4)[lo..hi]);
        }
    }

    proptest! {
        #[test]
        fn slices_come_from_their_source(seed in 0u64..1000, mask in 0u8..128) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = 3;
            let za = Tensor::randn(&[5, 7 * l], 1.0, &mut rng);
            let zb = Tensor::randn(&[5, 7 * l], 1.0, &mut rng);
            let set: Vec<TokenType> = TokenType::ELEMENTS.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, e)| *e).collect();
            let out = assemble_transfer(&za, &zb, &set, l).unwrap();
            for eps in TokenType::ELEMENTS {
                let (lo, hi) = slice_range(eps, l).unwrap();
                let src = if set.contains(&eps) { &zb } else { &za };
                for r in 0..5 {
                    prop_assert_eq!(&out.row(r)[lo..hi], &src.row(r)[lo..hi]);
                }
            }
        }
    }
}
