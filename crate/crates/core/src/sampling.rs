//! Temperature plus nucleus (top-ρ) sampling.

use rand::Rng;

use crate::config::SamplingPolicy;
use crate::error::{MuserError, Result};
use muser_numerics::tape::softmax_in_place;

/// Probabilities left after tempering with `τ` and truncating to the
/// smallest descending-probability prefix whose mass reaches `ρ`.
/// Entries with `-∞` logits are excluded.
pub fn nucleus_distribution(logits: &[f64], policy: SamplingPolicy) -> Result<Vec<f64>> {
    let SamplingPolicy { tau, rho } = policy;
    if !(tau > 0.0) || !(rho > 0.0 && rho <= 1.0) {
        return Err(MuserError::config(format!("invalid sampling policy τ={tau} ρ={rho}")));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(MuserError::NonFinite("sampling logits".into()));
    }
    if logits.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(MuserError::data("all logits are -inf"));
    }
    let mut p: Vec<f64> = logits.iter().map(|v| v / tau).collect();
    softmax_in_place(&mut p);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut keep = vec![false; p.len()];
    let mut mass = 0.0;
    for &i in &order {
        if p[i] <= 0.0 && mass > 0.0 {
            break;
        }
        keep[i] = true;
        mass += p[i];
        if mass >= rho {
            break;
        }
    }
    let mut out: Vec<f64> = p.iter().zip(&keep).map(|(v, k)| if *k { *v } else { 0.0 }).collect();
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    } else {
        // Underflow at tiny τ: everything sits on the top symbol.
        out.iter_mut().for_each(|v| *v = 0.0);
        out[order[0]] = 1.0;
    }
    Ok(out)
}

pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], policy: SamplingPolicy, rng: &mut R) -> Result<usize> {
    let p = nucleus_distribution(logits, policy)?;
    let mut u = rng.gen::<f64>();
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return Ok(i);
            }
            u -= w;
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_nucleus_case() {
        let p = nucleus_distribution(&[2.0, 1.0, 0.0], SamplingPolicy::new(1.0, 0.9)).unwrap();
        // softmax(2,1,0) = (e², e, 1)/(e²+e+1); keep {0,1}; renormalise over e²+e.
        let e = std::f64::consts::E;
        assert!((p[0] - e * e / (e * e + e)).abs() < 1e-12);
        assert!((p[1] - e / (e * e + e)).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
        assert!((p[0] - 0.731).abs() < 1e-3);
    }

    #[test]
    fn full_mass_keeps_support() {
        let p = nucleus_distribution(&[0.0, 0.0, 0.0, 0.0], SamplingPolicy::new(1.0, 1.0)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn tiny_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let i = sample_token(&[0.1, 0.3, 0.2], SamplingPolicy::new(1e-6, 1.0), &mut rng).unwrap();
            assert_eq!(i, 1);
        }
    }

    #[test]
    fn masked_entries_never_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0];
        for _ in 0..100 {
            let i = sample_token(&logits, SamplingPolicy::new(1.0, 1.0), &mut rng).unwrap();
            assert!(i == 1 || i == 3);
        }
        assert!(sample_token(&[f64::NEG_INFINITY; 3], SamplingPolicy::new(1.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn empirical_frequencies_follow_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 3];
        let trials = 20_000;
        for _ in 0..trials {
            counts[sample_token(&[2.0, 1.0, 0.0], SamplingPolicy::new(1.0, 0.9), &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        assert!((counts[0] as f64 / trials as f64 - 0.731).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn top_symbol_always_kept(logits in prop::collection::vec(-10.0f64..10.0, 1..20), rho in 0.01f64..1.0, tau in 0.1f64..5.0) {
            let p = nucleus_distribution(&logits, SamplingPolicy::new(tau, rho)).unwrap();
            let top = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            prop_assert!(p[top] > 0.0);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
