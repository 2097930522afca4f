//! Central-difference gradient checking.

use crate::error::{NumericsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates of each input to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    All,
    /// At most this many evenly spaced coordinates per input.
    Sample(usize),
}

fn coordinates(len: usize, probe: Probe) -> Vec<usize> {
    match probe {
        Probe::All => (0..len).collect(),
        Probe::Sample(n) if n >= len => (0..len).collect(),
        Probe::Sample(n) => {
            let n = n.max(1);
            (0..n).map(|i| i * len / n).collect()
        }
    }
}

/// Builds `f` once on a fresh tape for the analytic gradient, then again for
/// every probed coordinate at `x ± eps`. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, probe: Probe) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-8, 1e-4]"
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(NumericsError::NonFinite("grad_check probe"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(NumericsError::NonFinite("grad_check base point"));
    }
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe_inputs = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = tape.grad(*var).unwrap_or(&zeros).to_vec();
        for c in coordinates(inputs[i].len(), probe) {
            let x0 = inputs[i].data()[c];
            probe_inputs[i].data_mut()[c] = x0 + eps;
            let fp = eval(&probe_inputs)?;
            probe_inputs[i].data_mut()[c] = x0 - eps;
            let fm = eval(&probe_inputs)?;
            probe_inputs[i].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic[c] - numeric).abs() / analytic[c].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(Tensor::randn(t.shape(y), 1.0, &mut rng));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Worst relative error of every tape primitive on small random inputs,
/// probing all coordinates. Each case reduces its output with fixed random
/// weights so every coordinate has its own slope.
pub fn primitive_suite(eps: f64, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::attention::AttnLayout;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let a = randn(&[3, 4]);
    let b = randn(&[3, 4]);
    let row = randn(&[1, 4]);
    let wide = randn(&[3, 5]);
    let tall = randn(&[5, 2]);
    let blocks = randn(&[6, 5]);
    let side = randn(&[3, 2]);
    let extra = randn(&[2, 5]);
    let table = randn(&[4, 3]);
    let ln = [randn(&[3, 6]), randn(&[1, 6]), randn(&[1, 6])];
    let frozen = randn(&[3, 4]);
    let attn = |q_len: usize, kv_len: usize, rng: &mut dyn FnMut(&[usize]) -> Tensor| {
        [rng(&[2 * q_len, 4]), rng(&[2 * kv_len, 4]), rng(&[2 * kv_len, 6])]
    };
    let causal_in = attn(5, 5, &mut randn);
    let cross_in = attn(4, 6, &mut randn);
    let offset: Vec<f64> = frozen.data().iter().zip(a.data()).map(|(q, z)| q - z).collect();

    type Case<'a> = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>);
    let cases: Vec<Case> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, x| { let y = t.add(x[0], x[1])?; weighted_sum(t, y, 1) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, x| { let y = t.sub(x[0], x[1])?; weighted_sum(t, y, 2) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, x| { let y = t.mul(x[0], x[1])?; weighted_sum(t, y, 3) })),
        ("add_row", vec![a.clone(), row], Box::new(|t, x| { let y = t.add_row(x[0], x[1])?; weighted_sum(t, y, 4) })),
        ("scale", vec![a.clone()], Box::new(|t, x| { let y = t.scale(x[0], -2.5); weighted_sum(t, y, 5) })),
        ("tanh", vec![a.clone()], Box::new(|t, x| { let y = t.tanh(x[0]); weighted_sum(t, y, 6) })),
        ("elu", vec![a.clone()], Box::new(|t, x| { let y = t.elu(x[0]); weighted_sum(t, y, 7) })),
        ("abs", vec![a.clone()], Box::new(|t, x| { let y = t.abs(x[0]); weighted_sum(t, y, 8) })),
        ("dropout", vec![a.clone()], Box::new(|t, x| { let y = t.dropout(x[0], 0.5); weighted_sum(t, y, 9) })),
        ("matmul", vec![wide.clone(), tall], Box::new(|t, x| { let y = t.matmul(x[0], x[1])?; weighted_sum(t, y, 10) })),
        ("transpose", vec![wide.clone()], Box::new(|t, x| { let y = t.transpose(x[0])?; weighted_sum(t, y, 11) })),
        ("transpose_blocks", vec![blocks], Box::new(|t, x| { let y = t.transpose_blocks(x[0], 3)?; weighted_sum(t, y, 12) })),
        ("slice_cols", vec![wide.clone()], Box::new(|t, x| { let y = t.slice_cols(x[0], 1, 4)?; weighted_sum(t, y, 13) })),
        ("slice_rows", vec![wide.clone()], Box::new(|t, x| { let y = t.slice_rows(x[0], 1, 3)?; weighted_sum(t, y, 14) })),
        ("concat_cols", vec![wide.clone(), side], Box::new(|t, x| { let y = t.concat_cols(&[x[0], x[1], x[0]])?; weighted_sum(t, y, 15) })),
        ("concat_rows", vec![wide.clone(), extra], Box::new(|t, x| { let y = t.concat_rows(&[x[1], x[0]])?; weighted_sum(t, y, 16) })),
        ("reshape", vec![wide.clone()], Box::new(|t, x| { let y = t.reshape(x[0], &[5, 3])?; weighted_sum(t, y, 17) })),
        ("gather", vec![table], Box::new(|t, x| { let y = t.gather(x[0], &[2, 0, 2, 3])?; weighted_sum(t, y, 18) })),
        ("sum", vec![wide.clone()], Box::new(|t, x| { let y = t.tanh(x[0]); Ok(t.sum(y)) })),
        ("mean", vec![wide], Box::new(|t, x| { let y = t.tanh(x[0]); Ok(t.mean(y)) })),
        ("layer_norm", ln.to_vec(), Box::new(|t, x| { let y = t.layer_norm(x[0], x[1], x[2])?; weighted_sum(t, y, 19) })),
        ("softmax", vec![ln[0].clone()], Box::new(|t, x| { let y = t.softmax(x[0]); weighted_sum(t, y, 20) })),
        ("cross_entropy", vec![ln[0].clone()], Box::new(|t, x| t.cross_entropy(x[0], &[Some(1), None, Some(5)]))),
        (
            "straight_through",
            vec![a.clone()],
            Box::new(move |t, x| {
                // Move the quantised value with the input so differences see a slope.
                let shifted: Vec<f64> = t.value(x[0]).data().iter().zip(&offset).map(|(z, o)| z + o).collect();
                let q = Tensor::from_rows(3, 4, shifted);
                let y = t.straight_through(x[0], &q)?;
                let y = t.tanh(y);
                weighted_sum(t, y, 21)
            }),
        ),
        (
            "linear_attention(causal)",
            causal_in.to_vec(),
            Box::new(|t, x| {
                let layout = AttnLayout { batch: 2, q_len: 5, kv_len: 5, heads: 2, causal: true };
                let y = t.linear_attention(x[0], x[1], x[2], layout)?;
                weighted_sum(t, y, 22)
            }),
        ),
        (
            "linear_attention(cross)",
            cross_in.to_vec(),
            Box::new(|t, x| {
                let layout = AttnLayout { batch: 2, q_len: 4, kv_len: 6, heads: 2, causal: false };
                let y = t.linear_attention(x[0], x[1], x[2], layout)?;
                weighted_sum(t, y, 23)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, grad_check(|t, x| f(t, x), &inputs, eps, Probe::All)?)))
        .collect()
}
