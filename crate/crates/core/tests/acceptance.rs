//! Acceptance suite: one pass/fail line per criterion.
//!
//! `cargo test -p muser --test acceptance` runs everything; numbers after
//! `--` select criteria, e.g. `cargo test -p muser --test acceptance -- 2 4`.
//! The process exits non-zero when any selected criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use muser::checkpoint::{self, Dtype};
use muser::config::{ModelConfig, Preset, RunConfig, SamplingPolicy, StackDims, TrainConfig};
use muser::eval::{bar_level, histogram_emd, n_pitch_classes, pitch_range, polyphony, silhouette, value_histogram};
use muser::generate::{assemble_transfer, element_transfer, generate};
use muser::gradcheck::model_grad_check;
use muser::med::{element_distance_matrix, latent_distance_matrix, regularization_loss, sign_agreement, DistanceMatrix};
use muser::midi::write_midi_bytes;
use muser::model::{MuserModel, Quantization};
use muser::prior::PriorModel;
use muser::score::{NoteEvent, Score};
use muser::synth::{synthetic_corpus, SynthOptions};
use muser::tokenizer::{detokenize, tokenize, CpSequence};
use muser::train::Trainer;
use muser::vocab::{Emotion, TokenType, VocabPreset, Vocabulary, NUM_ELEMENTS};
use muser::vq::Codebook;
use muser_numerics::{Tape, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Models from the disentanglement run, reused by later criteria.
struct Trained {
    model: MuserModel,
    held_out: Vec<CpSequence>,
    agreement: f64,
    control: f64,
    seconds: f64,
    control_seconds: f64,
}

#[derive(Default)]
struct Shared {
    trained: Option<Trained>,
}

const DISENTANGLE_STEPS: usize = 1000;
const TRAIN_BUDGET_S: f64 = 900.0;

fn small_desk(seq_len: usize, alpha: f64) -> ModelConfig {
    let mut c = ModelConfig::preset(Preset::Desk);
    c.seq_len = seq_len;
    c.alpha = alpha;
    c
}

// ---------------------------------------------------------------------------
// 1. gradients

fn c1_gradients(_: &mut Shared) -> Check {
    let start = Instant::now();
    let prims = muser_numerics::gradcheck::primitive_suite(1e-6, 1).map_err(e2s)?;
    let (worst_name, worst_prim) = prims
        .iter()
        .fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let config = small_desk(16, 0.1);
    let vocab = config.vocabulary();
    let model = MuserModel::new(config, 3).map_err(e2s)?;
    let opts = SynthOptions {
        bars: 2,
        max_len: 16,
        ..SynthOptions::default()
    };
    let seqs = synthetic_corpus(2, &vocab, &opts, 5).map_err(e2s)?;
    let full = model_grad_check(&model, &seqs, 1e-6, 2).map_err(e2s)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(prims.len() >= 20, || format!("only {} primitives checked", prims.len()))?;
    ensure(worst_prim < 1e-4, || format!("primitive {worst_name}: {worst_prim:.3e}"))?;
    ensure(full.max_rel_error < 1e-4, || format!("model loss: {:.3e} at {}", full.max_rel_error, full.worst_param))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} primitives max {worst_prim:.1e}; desk loss (m=2, N=16, {} probes) {:.1e}; {secs:.1} s",
        prims.len(),
        full.probes,
        full.max_rel_error
    ))
}

// ---------------------------------------------------------------------------
// 2. quantization

fn c2_quantize(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows = 0usize;
    let mut ties = 0usize;
    for inst in 0..1000 {
        let k = rng.gen_range(2..=64);
        let dim = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=20);
        // Small integer grids make exact ties common.
        let integer = inst % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| if integer { rng.gen_range(-2..=2) as f64 } else { rng.gen_range(-1.0..1.0) };
        let emb: Vec<f64> = (0..k * dim).map(|_| draw(&mut rng)).collect();
        let z: Vec<f64> = (0..n * dim).map(|_| draw(&mut rng)).collect();
        let book = Codebook::from_embeddings(Tensor::from_rows(k, dim, emb.clone()), 0.99, 1e-5);
        let got = book.quantize(&Tensor::from_rows(n, dim, z.clone())).map_err(e2s)?;
        for r in 0..n {
            let x = &z[r * dim..(r + 1) * dim];
            let dists: Vec<f64> = (0..k)
                .map(|c| x.iter().zip(&emb[c * dim..(c + 1) * dim]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|d| *d == best).unwrap();
            if dists.iter().filter(|d| **d == best).count() > 1 {
                ties += 1;
            }
            ensure(got.codes[r] == first, || format!("instance {inst} row {r}: code {} vs oracle {first}", got.codes[r]))?;
            ensure(got.z_q.row(r) == &emb[first * dim..(first + 1) * dim], || format!("instance {inst} row {r}: z_q is not the code row"))?;
            rows += 1;
        }
    }
    ensure(ties > 0, || "no ties exercised".into())?;
    Ok(format!("1000 instances, {rows} rows ({ties} ties) match the exhaustive argmin: 100%"))
}

// ---------------------------------------------------------------------------
// 3. EMA

fn c3_ema(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = [[0.0, 0.0], [4.0, 4.0], [-4.0, 3.0]];
    let per = 200;
    let mut data = Vec::new();
    for c in &centers {
        for _ in 0..per {
            data.push(c[0] + rng.gen_range(-0.5..0.5));
            data.push(c[1] + rng.gen_range(-0.5..0.5));
        }
    }
    let means: Vec<[f64; 2]> = (0..3)
        .map(|c| {
            let pts = &data[c * per * 2..(c + 1) * per * 2];
            let sx: f64 = pts.iter().step_by(2).sum();
            let sy: f64 = pts.iter().skip(1).step_by(2).sum();
            [sx / per as f64, sy / per as f64]
        })
        .collect();
    let z = Tensor::from_rows(3 * per, 2, data.clone());
    // One sample of each cluster seeds the codebook.
    let init: Vec<f64> = (0..3).flat_map(|c| data[c * per * 2..c * per * 2 + 2].to_vec()).collect();
    let mut book = Codebook::from_embeddings(Tensor::from_rows(3, 2, init), 0.99, 1e-5);
    let dist = |book: &Codebook| -> f64 {
        (0..3)
            .map(|c| {
                let row = book.embeddings.row(c);
                (row[0] - means[c][0]).abs().max((row[1] - means[c][1]).abs())
            })
            .fold(0.0, f64::max)
    };
    let mut reached = None;
    for step in 1..=500 {
        let codes = book.quantize(&z).map_err(e2s)?.codes;
        book.ema_update(&z, &codes).map_err(e2s)?;
        if dist(&book) <= 1e-2 {
            reached = Some(step);
            break;
        }
    }
    match reached {
        Some(s) => Ok(format!("K=3, γ=0.99: L∞ distance to cluster means ≤ 1e-2 after {s} updates ({:.1e})", dist(&book))),
        None => Err(format!("still {:.3e} from the cluster means after 500 updates", dist(&book))),
    }
}

// ---------------------------------------------------------------------------
// 4. regularization

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Direct double loop over `(i, j, t)` for every element.
fn reg_oracle(xs: &[Vec<Vec<usize>>], zs: &[Vec<Vec<f64>>]) -> (f64, bool) {
    let mut total = 0.0;
    let mut aligned = true;
    for (x, z) in xs.iter().zip(zs) {
        let (m, n) = (x.len(), x[0].len());
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                for t in 0..n {
                    let target = sgn(x[i][t] as f64 - x[j][t] as f64);
                    let d = ((z[i][t] - z[j][t]).tanh() - target).abs();
                    aligned &= d == 0.0;
                    s += d;
                }
            }
        }
        total += s / (m * m * n) as f64;
    }
    (total, aligned)
}

fn c4_regularization(_: &mut Shared) -> Check {
    let me = DistanceMatrix {
        m: 2,
        n: 1,
        data: vec![0.0, 2.0, -2.0, 0.0],
    };
    let mr = DistanceMatrix {
        m: 2,
        n: 1,
        data: vec![0.0; 4],
    };
    let hand = regularization_loss(&[(me, mr)]).map_err(e2s)?;
    ensure((hand - 0.5).abs() <= 1e-12, || format!("hand case gave {hand}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut zeros = 0;
    for inst in 0..1000 {
        let m = rng.gen_range(1..=5);
        let n = rng.gen_range(1..=8);
        let elems = rng.gen_range(1..=NUM_ELEMENTS);
        let mode = inst % 4;
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for _ in 0..elems {
            let x: Vec<Vec<usize>> = (0..m).map(|_| (0..n).map(|_| rng.gen_range(0..4)).collect()).collect();
            let z: Vec<Vec<f64>> = match mode {
                // Saturated copies of the tokens: every entry aligned.
                0 => x.iter().map(|r| r.iter().map(|&v| 40.0 * v as f64).collect()).collect(),
                // Same, with one entry of one sequence nudged.
                1 => {
                    let mut z: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|&v| 40.0 * v as f64).collect()).collect();
                    let (i, t) = (rng.gen_range(0..m), rng.gen_range(0..n));
                    z[i][t] += 10.0;
                    z
                }
                _ => (0..m).map(|_| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect(),
            };
            xs.push(x);
            zs.push(z);
        }
        let pairs: Vec<(DistanceMatrix, DistanceMatrix)> = xs
            .iter()
            .zip(&zs)
            .map(|(x, z)| Ok((element_distance_matrix(x)?, latent_distance_matrix(z)?)))
            .collect::<muser::Result<_>>()
            .map_err(e2s)?;
        let got = regularization_loss(&pairs).map_err(e2s)?;
        let (want, aligned) = reg_oracle(&xs, &zs);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || format!("instance {inst}: {got} vs oracle {want}"))?;
        ensure(got >= 0.0, || format!("instance {inst}: negative loss {got}"))?;
        ensure((got == 0.0) == aligned, || format!("instance {inst}: loss {got}, aligned {aligned}"))?;
        if mode == 0 {
            ensure(got == 0.0, || format!("instance {inst}: aligned case gave {got}"))?;
        }
        zeros += usize::from(got == 0.0);
    }
    Ok(format!("hand case {hand}; 1000 random instances within {worst:.1e} of the oracle, {zeros} zero-loss cases all aligned"))
}

// ---------------------------------------------------------------------------
// 5. disentanglement

/// Held-out sign agreement averaged over the elements that have nonzero
/// token differences.
fn held_out_agreement(model: &MuserModel, held: &[CpSequence]) -> Result<(f64, Vec<Option<f64>>), String> {
    let z = model.reduced_latents(held).map_err(e2s)?;
    let batch = model.batch(held).map_err(e2s)?;
    let mut per = Vec::new();
    for (k, eps) in TokenType::ELEMENTS.iter().enumerate() {
        let zr: Vec<Vec<f64>> = (0..batch.m).map(|i| z[k].row(i).to_vec()).collect();
        let me = element_distance_matrix(&batch.element_rows(*eps)).map_err(e2s)?;
        let mr = latent_distance_matrix(&zr).map_err(e2s)?;
        let (agree, total) = sign_agreement(&me, &mr);
        per.push((total > 0).then(|| agree as f64 / total as f64));
    }
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err("no element has nonzero differences".into());
    }
    Ok((vals.iter().sum::<f64>() / vals.len() as f64, per))
}

fn train_disentangle(alpha: f64) -> Result<(MuserModel, Vec<CpSequence>, f64, f64), String> {
    let config = small_desk(32, alpha);
    let vocab = config.vocabulary();
    let opts = SynthOptions::default();
    let corpus = synthetic_corpus(64, &vocab, &opts, 0).map_err(e2s)?;
    let held = synthetic_corpus(16, &vocab, &opts, 99).map_err(e2s)?;
    let mut trainer = Trainer::new(MuserModel::new(config, 1).map_err(e2s)?, TrainConfig::preset(Preset::Desk));
    let start = Instant::now();
    trainer.fit(&corpus, DISENTANGLE_STEPS, |_, _| {}).map_err(e2s)?;
    let secs = start.elapsed().as_secs_f64();
    let model = trainer.into_model();
    let (agreement, per) = held_out_agreement(&model, &held)?;
    let shown: Vec<String> = per.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.2}"))).collect();
    eprintln!("    α={alpha}: agreement {agreement:.3} per element [{}] after {secs:.0} s", shown.join(" "));
    Ok((model, held, agreement, secs))
}

fn trained(shared: &mut Shared) -> Result<&Trained, String> {
    if shared.trained.is_none() {
        let (model, held_out, agreement, seconds) = train_disentangle(0.1)?;
        let (_, _, control, control_seconds) = train_disentangle(0.0)?;
        shared.trained = Some(Trained {
            model,
            held_out,
            agreement,
            control,
            seconds,
            control_seconds,
        });
    }
    Ok(shared.trained.as_ref().unwrap())
}

fn c5_disentanglement(shared: &mut Shared) -> Check {
    let t = trained(shared)?;
    let line = format!(
        "64 synthetic sequences, {DISENTANGLE_STEPS} steps: α=0.1 agreement {:.3} ({:.0} s), α=0 control {:.3} ({:.0} s)",
        t.agreement, t.seconds, t.control, t.control_seconds
    );
    ensure(t.seconds <= TRAIN_BUDGET_S, || format!("{line}; α=0.1 run over the 15 min budget"))?;
    ensure(t.agreement >= 0.85, || format!("{line}; agreement below 0.85"))?;
    ensure(t.control <= 0.60, || format!("{line}; control above 0.60"))?;
    Ok(line)
}

// ---------------------------------------------------------------------------
// 6. overfit

fn eval_loss(model: &MuserModel, seqs: &[CpSequence]) -> Result<f64, String> {
    let batch = model.batch(seqs).map_err(e2s)?;
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &batch, Quantization::Nearest).map_err(e2s)?;
    Ok(tape.value(out.total).item())
}

fn c6_overfit(_: &mut Shared) -> Check {
    let config = small_desk(32, 0.1);
    let seqs = synthetic_corpus(8, &config.vocabulary(), &SynthOptions::default(), 6).map_err(e2s)?;
    let model = MuserModel::new(config, 6).map_err(e2s)?;
    let before = eval_loss(&model, &seqs)?;
    let mut trainer = Trainer::new(model, TrainConfig::preset(Preset::Desk));
    let start = Instant::now();
    trainer.fit(&seqs, 2000, |_, _| {}).map_err(e2s)?;
    let secs = start.elapsed().as_secs_f64();
    let model = trainer.into_model();
    let after = eval_loss(&model, &seqs)?;
    let acc = model.teacher_forced_accuracy(&seqs).map_err(e2s)?;
    let worst = acc.iter().cloned().fold(1.0, f64::min);
    let shown: Vec<String> = acc.iter().map(|a| format!("{a:.3}")).collect();
    let line = format!("8 sequences, 2000 steps ({secs:.0} s): accuracy [{}], loss {before:.3} → {after:.4}", shown.join(" "));
    ensure(worst >= 0.95, || format!("{line}; a head is below 95%"))?;
    ensure(after < before, || format!("{line}; loss did not decrease"))?;
    Ok(line)
}

// ---------------------------------------------------------------------------
// 7. metrics

/// `(pitch, onset step, duration steps)` at 120 ticks per step.
fn grid_score(notes: &[(u8, u64, u64)]) -> Score {
    let mut s = Score::default();
    s.notes = notes.iter().map(|&(p, on, d)| NoteEvent::new(p, on * 120, d * 120, 80)).collect();
    s
}

/// Brute force on grid steps: every step is scanned for sounding notes.
fn metrics_oracle(notes: &[(u8, u64, u64)]) -> [f64; 3] {
    let pr = (notes.iter().map(|n| n.0).max().unwrap() - notes.iter().map(|n| n.0).min().unwrap()) as f64;
    let npc = notes.iter().map(|n| n.0 % 12).collect::<BTreeSet<_>>().len() as f64;
    let end = notes.iter().map(|n| n.1 + n.2.max(1)).max().unwrap();
    let (mut sounding, mut steps) = (0u64, 0u64);
    for t in 0..end {
        let k = notes.iter().filter(|n| n.1 <= t && t < n.1 + n.2.max(1)).count() as u64;
        if k > 0 {
            sounding += k;
            steps += 1;
        }
    }
    [pr, npc, sounding as f64 / steps as f64]
}

fn bar_oracle(notes: &[(u8, u64, u64)]) -> [f64; 3] {
    let last_bar = notes.iter().map(|n| n.1 / 16).max().unwrap();
    let mut sums = [0.0; 3];
    let mut bars = 0.0;
    for b in 0..=last_bar {
        let in_bar: Vec<_> = notes.iter().copied().filter(|n| n.1 / 16 == b).collect();
        if in_bar.is_empty() {
            continue;
        }
        let m = metrics_oracle(&in_bar);
        for k in 0..3 {
            sums[k] += m[k];
        }
        bars += 1.0;
    }
    sums.map(|s| s / bars)
}

fn library_metrics(s: &Score) -> Result<[f64; 6], String> {
    Ok([
        pitch_range(s).map_err(e2s)?,
        n_pitch_classes(s).map_err(e2s)?,
        polyphony(s).map_err(e2s)?,
        bar_level(pitch_range, s).map_err(e2s)?,
        bar_level(n_pitch_classes, s).map_err(e2s)?,
        bar_level(polyphony, s).map_err(e2s)?,
    ])
}

type Crafted = (&'static [(u8, u64, u64)], [f64; 6]);

/// Hand-computed `[PR, NPC, POLY, B-PR, B-NPC, B-POLY]`.
const CRAFTED: [Crafted; 20] = [
    (&[(60, 0, 1)], [0.0, 1.0, 1.0, 0.0, 1.0, 1.0]),
    (&[(60, 0, 1), (67, 1, 1), (72, 2, 1)], [12.0, 2.0, 1.0, 12.0, 2.0, 1.0]),
    (&[(60, 0, 4), (64, 0, 4), (67, 0, 4)], [7.0, 3.0, 3.0, 7.0, 3.0, 3.0]),
    (&[(60, 0, 2), (62, 1, 2)], [2.0, 2.0, 4.0 / 3.0, 2.0, 2.0, 4.0 / 3.0]),
    (&[(60, 0, 1), (62, 3, 2)], [2.0, 2.0, 1.0, 2.0, 2.0, 1.0]),
    (&[(60, 0, 1), (64, 4, 1), (60, 16, 1), (72, 20, 1)], [12.0, 2.0, 1.0, 8.0, 1.5, 1.0]),
    (&[(60, 14, 4), (64, 16, 2)], [4.0, 2.0, 1.5, 0.0, 1.0, 1.0]),
    (
        &[(60, 0, 1), (61, 1, 1), (62, 2, 1), (63, 3, 1), (64, 4, 1), (65, 5, 1), (66, 6, 1), (67, 7, 1), (68, 8, 1), (69, 9, 1), (70, 10, 1), (71, 11, 1)],
        [11.0, 12.0, 1.0, 11.0, 12.0, 1.0],
    ),
    (&[(48, 0, 8), (60, 0, 8), (72, 0, 8), (84, 0, 8)], [36.0, 1.0, 4.0, 36.0, 1.0, 4.0]),
    (&[(60, 0, 1), (67, 48, 1)], [7.0, 2.0, 1.0, 0.0, 1.0, 1.0]),
    (&[(60, 0, 4), (62, 2, 4), (64, 4, 4)], [4.0, 3.0, 1.5, 4.0, 3.0, 1.5]),
    (&[(60, 0, 2), (64, 0, 2), (67, 4, 2)], [7.0, 3.0, 1.5, 7.0, 3.0, 1.5]),
    (
        &[(60, 0, 16), (72, 0, 16), (62, 16, 1), (50, 32, 1), (55, 33, 1), (59, 34, 1)],
        [22.0, 4.0, 1.8, 7.0, 5.0 / 3.0, 4.0 / 3.0],
    ),
    (&[(60, 0, 4), (60, 2, 4)], [0.0, 1.0, 4.0 / 3.0, 0.0, 1.0, 4.0 / 3.0]),
    (&[(48, 0, 32), (60, 16, 1), (62, 17, 1), (64, 18, 1)], [16.0, 3.0, 35.0 / 32.0, 2.0, 2.0, 1.0]),
    (&[(21, 0, 1), (108, 1, 1)], [87.0, 2.0, 1.0, 87.0, 2.0, 1.0]),
    (&[(60, 0, 2), (63, 0, 2), (66, 0, 2), (69, 0, 2), (72, 8, 2)], [12.0, 4.0, 2.5, 12.0, 4.0, 2.5]),
    (&[(60, 0, 1), (62, 16, 1), (64, 32, 1), (65, 48, 1)], [5.0, 4.0, 1.0, 0.0, 1.0, 1.0]),
    (&[(60, 16, 2), (67, 16, 2), (64, 17, 1)], [7.0, 3.0, 2.5, 7.0, 3.0, 2.5]),
    (
        &[(60, 0, 4), (64, 0, 4), (65, 16, 2), (69, 18, 2), (72, 20, 4), (76, 20, 4)],
        [16.0, 4.0, 5.0 / 3.0, 7.5, 3.0, 1.75],
    ),
];

fn c7_metrics(_: &mut Shared) -> Check {
    for (idx, (notes, want)) in CRAFTED.iter().enumerate() {
        let got = library_metrics(&grid_score(notes))?;
        let brute = metrics_oracle(notes);
        let brute_bar = bar_oracle(notes);
        for k in 0..6 {
            let exact = k < 2;
            let ok = if exact { got[k] == want[k] } else { (got[k] - want[k]).abs() <= 1e-9 };
            ensure(ok, || format!("crafted score {idx}, metric {k}: {} vs hand {}", got[k], want[k]))?;
            let other = if k < 3 { brute[k] } else { brute_bar[k - 3] };
            ensure((other - want[k]).abs() <= 1e-9, || format!("crafted score {idx}, metric {k}: hand value {} disagrees with brute force {other}", want[k]))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..200 {
        let count = rng.gen_range(1..40);
        let notes: Vec<(u8, u64, u64)> = (0..count)
            .map(|_| (rng.gen_range(30..100), rng.gen_range(0..96), rng.gen_range(1..24)))
            .collect();
        let got = library_metrics(&grid_score(&notes))?;
        ensure(got[3] <= got[0], || format!("random score {i}: B-PR {} > PR {}", got[3], got[0]))?;
        ensure(got[4] <= got[1], || format!("random score {i}: B-NPC {} > NPC {}", got[4], got[1]))?;
        let brute = metrics_oracle(&notes);
        let brute_bar = bar_oracle(&notes);
        for k in 0..6 {
            let other = if k < 3 { brute[k] } else { brute_bar[k - 3] };
            ensure((got[k] - other).abs() <= 1e-9, || format!("random score {i}, metric {k}: {} vs brute force {other}", got[k]))?;
        }
    }
    Ok("20 crafted scores match hand values; 200 random scores match brute force with B-PR ≤ PR and B-NPC ≤ NPC".into())
}

// ---------------------------------------------------------------------------
// 8. silhouette

fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..points.len() {
        let own = labels.iter().filter(|&&l| l == labels[i]).count();
        if own == 1 {
            continue;
        }
        let mean_to = |c: usize| {
            let (mut s, mut k) = (0.0, 0);
            for j in 0..points.len() {
                if labels[j] == c && j != i {
                    s += d(&points[i], &points[j]);
                    k += 1;
                }
            }
            s / k as f64
        };
        let a = mean_to(labels[i]);
        let b = clusters.iter().filter(|&&c| c != labels[i]).map(|&c| mean_to(c)).fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / points.len() as f64
}

fn c8_silhouette(_: &mut Shared) -> Check {
    let hand = silhouette(&[vec![0.0], vec![1.0], vec![10.0]], &[0, 0, 1]).map_err(e2s)?;
    ensure((hand - 0.5963).abs() <= 1e-4, || format!("hand case {hand}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut singleton_sets = 0;
    for inst in 0..100 {
        let n = rng.gen_range(3..30);
        let dim = rng.gen_range(1..5);
        let k = rng.gen_range(2..=n.min(5));
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        // Every third set gets a cluster of exactly one point.
        if inst % 3 == 0 {
            labels = labels.iter().map(|&l| if l == k - 1 { 0 } else { l }).collect();
            labels[n - 1] = k - 1;
        }
        let points: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..dim).map(|_| l as f64 * 2.0 + rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let counts = labels.iter().fold(vec![0; k], |mut c, &l| {
            c[l] += 1;
            c
        });
        singleton_sets += usize::from(counts.contains(&1));
        let got = silhouette(&points, &labels).map_err(e2s)?;
        let want = silhouette_oracle(&points, &labels);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || format!("set {inst}: {got} vs oracle {want}"))?;
    }
    ensure(singleton_sets >= 30, || format!("only {singleton_sets} sets had singleton clusters"))?;
    Ok(format!("hand case {hand:.4}; 100 random sets ({singleton_sets} with singletons) within {worst:.1e} of the oracle"))
}

// ---------------------------------------------------------------------------
// 9. transfer

fn c9_transfer(shared: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = 3;
    for trial in 0..20 {
        let n = rng.gen_range(1..12);
        let za = Tensor::from_rows(n, 7 * l, (0..n * 7 * l).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let zb = Tensor::from_rows(n, 7 * l, (0..n * 7 * l).map(|_| rng.gen_range(-1.0..1.0)).collect());
        for mask in 0u32..128 {
            let set: Vec<TokenType> = (0..7).filter(|b| mask >> b & 1 == 1).map(|b| TokenType::ELEMENTS[b]).collect();
            let z = assemble_transfer(&za, &zb, &set, l).map_err(e2s)?;
            for r in 0..n {
                for (k, eps) in TokenType::ELEMENTS.iter().enumerate() {
                    let src = if set.contains(eps) { &zb } else { &za };
                    let same = z.row(r)[k * l..(k + 1) * l].iter().zip(&src.row(r)[k * l..(k + 1) * l]).all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure(same, || format!("trial {trial}, set {set:?}: slice {} of row {r} differs from its source", eps.name()))?;
                }
            }
            if mask == 0 {
                ensure(z == za, || format!("trial {trial}: empty transfer changed z_q_A"))?;
            }
        }
    }

    let t = trained(shared)?;
    let model = &t.model;
    let vocab = &model.vocab;
    let high: Vec<&CpSequence> = t.held_out.iter().filter(|s| matches!(s.emotion, Some(Emotion::Q1 | Emotion::Q2))).collect();
    let low: Vec<&CpSequence> = t.held_out.iter().filter(|s| matches!(s.emotion, Some(Emotion::Q3 | Emotion::Q4))).collect();
    let size = vocab.size(TokenType::Velocity);
    let empty = element_transfer(model, high[0], low[0], &[], 0).map_err(e2s)?;
    let q_a = &model.quantize_sequences(&[high[0].clone()]).map_err(e2s)?[0].1;
    ensure(&empty.z_q == q_a, || "end-to-end empty transfer differs from z_q_A".into())?;
    let mut closer = 0;
    for trial in 0..20 {
        let (a, b) = if trial % 2 == 0 {
            (high[rng.gen_range(0..high.len())], low[rng.gen_range(0..low.len())])
        } else {
            (low[rng.gen_range(0..low.len())], high[rng.gen_range(0..high.len())])
        };
        let out = element_transfer(model, a, b, &[TokenType::Velocity], trial).map_err(e2s)?;
        let h = value_histogram(&out.sequence, TokenType::Velocity, size);
        let to_b = histogram_emd(&h, &value_histogram(b, TokenType::Velocity, size)).map_err(e2s)?;
        let to_a = histogram_emd(&h, &value_histogram(a, TokenType::Velocity, size)).map_err(e2s)?;
        closer += usize::from(to_b < to_a);
    }
    let line = format!("slices bitwise from their sources for all 128 sets × 20 pairs, ∅ gives z_q_A; velocity transfer closer to donor in {closer}/20");
    ensure(closer >= 14, || format!("{line}; below 70%"))?;
    Ok(line)
}

// ---------------------------------------------------------------------------
// 10. determinism and round trips

fn random_grid_score(rng: &mut ChaCha8Rng, vocab: &Vocabulary) -> Score {
    let (lo, hi) = vocab.pitch_range();
    let mut used = BTreeSet::new();
    let mut s = Score::default();
    for _ in 0..rng.gen_range(1..24) {
        let pitch = rng.gen_range(lo..=hi);
        let step = rng.gen_range(0..64u64);
        if !used.insert((step, pitch)) {
            continue;
        }
        let units = vocab.duration_table()[rng.gen_range(0..vocab.duration_table().len())] as u64;
        // Onsets are jittered by less than half a step.
        let jitter = rng.gen_range(-59i64..=59);
        let onset = (step as i64 * 120 + jitter).max(0) as u64;
        s.notes.push(NoteEvent::new(pitch, onset, units * 120, rng.gen_range(1..=127)));
    }
    s
}

fn c10_determinism(shared: &mut Shared) -> Check {
    let vocab = Vocabulary::new(VocabPreset::Desk);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut notes = 0;
    for i in 0..50 {
        let score = random_grid_score(&mut rng, &vocab);
        let (seq, report) = tokenize(&score, Some(Emotion::ALL[i % 4]), &vocab, 4096).map_err(e2s)?;
        ensure(report.truncated_bars == 0 && report.truncated_tokens == 0, || format!("score {i} was truncated"))?;
        let (back, _) = detokenize(&seq, &vocab);
        let key = |n: &NoteEvent| ((n.onset as f64 / 120.0).round() as u64, n.pitch);
        let mut want: Vec<&NoteEvent> = score.notes.iter().collect();
        let mut got: Vec<&NoteEvent> = back.notes.iter().collect();
        want.sort_by_key(|n| key(n));
        got.sort_by_key(|n| key(n));
        ensure(want.len() == got.len(), || format!("score {i}: {} notes became {}", want.len(), got.len()))?;
        let unit = back.grid_unit();
        for (w, g) in want.iter().zip(&got) {
            ensure(w.pitch == g.pitch, || format!("score {i}: pitch {} became {}", w.pitch, g.pitch))?;
            ensure((w.onset as f64 - g.onset as f64).abs() <= unit / 2.0, || format!("score {i}: onset {} became {}", w.onset, g.onset))?;
            ensure((w.end() as f64 - g.end() as f64).abs() <= unit / 2.0, || format!("score {i}: end {} became {}", w.end(), g.end()))?;
        }
        notes += want.len();
    }

    let t = trained(shared)?;
    let model = &t.model;
    let prior = PriorModel::new(model.config.clone(), 10).map_err(e2s)?;
    let render = |seed| -> Result<Vec<u8>, String> {
        let g = generate(model, &prior, Emotion::Q2, model.config.seq_len, seed).map_err(e2s)?;
        write_midi_bytes(&detokenize(&g.sequence, &model.vocab).0).map_err(e2s)
    };
    let first = render(7)?;
    ensure(first == render(7)?, || "generate with a fixed seed is not byte-identical".into())?;

    let bytes = checkpoint::model_bytes(model, 1, None, Dtype::F64).map_err(e2s)?;
    let (loaded, _) = checkpoint::model_from_container(checkpoint::decode(&bytes).map_err(e2s)?).map_err(e2s)?;
    ensure(checkpoint::model_bytes(&loaded, 1, None, Dtype::F64).map_err(e2s)? == bytes, || "checkpoint bytes changed on reload".into())?;
    for seq in t.held_out.iter().take(4) {
        let z = &model.quantize_sequences(std::slice::from_ref(seq)).map_err(e2s)?[0].1;
        let z2 = &loaded.quantize_sequences(std::slice::from_ref(seq)).map_err(e2s)?[0].1;
        let a = model.logits_for(&seq.tokens, z).map_err(e2s)?;
        let b = loaded.logits_for(&seq.tokens, z2).map_err(e2s)?;
        let same = a.iter().zip(&b).all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        ensure(same, || "logits differ after a checkpoint round trip".into())?;
    }
    Ok(format!(
        "50 random scores ({notes} notes) round-trip pitch exactly and timing within half a step; generate is byte-identical; checkpoint logits bitwise equal"
    ))
}

// ---------------------------------------------------------------------------
// 11. paper preset

fn c11_paper_preset(_: &mut Shared) -> Check {
    let from_file = RunConfig::from_toml("preset = \"paper\"\n").map_err(e2s)?;
    ensure(from_file == RunConfig::preset(Preset::Paper), || "config file with `preset = paper` differs from the preset".into())?;
    let m = &from_file.model;
    let t = &from_file.train;
    let stacks = [m.encoder, m.global_decoder, m.element_decoder, m.dr, m.prior];
    let table_stacks = [
        StackDims::new(8, 8, 128, 512),
        StackDims::new(4, 8, 256, 1024),
        StackDims::new(2, 8, 256, 1024),
        StackDims::new(4, 4, 1024, 4096),
        StackDims::new(8, 8, 256, 1024),
    ];
    let mut checked = 0;
    let mut check = |name: &str, ok: bool| -> Result<(), String> {
        checked += 1;
        ensure(ok, || format!("{name} differs from the published value"))
    };
    for (i, (got, want)) in stacks.iter().zip(&table_stacks).enumerate() {
        check(&format!("stack {i} layers"), got.layers == want.layers)?;
        check(&format!("stack {i} heads"), got.heads == want.heads)?;
        check(&format!("stack {i} hidden"), got.hidden == want.hidden)?;
        check(&format!("stack {i} ff"), got.ff == want.ff)?;
    }
    check("L", m.latent_size() == 112)?;
    check("l", m.latent_per_element == 16)?;
    check("batch size", t.batch_size == 16)?;
    check("pre-training lr", t.lr == 1e-4)?;
    check("fine-tuning lr", t.finetune_lr == 1e-5)?;
    check("dropout", m.dropout == 0.1)?;
    check("alpha", m.alpha == 0.1)?;
    check("beta", m.beta == 0.25)?;
    check("sequence length", m.seq_len == 1024)?;

    let vocab = m.vocabulary();
    let sizes = [4, 18, 56, 135, 87, 18, 42, 5];
    let embed = [32, 64, 128, 256, 512, 128, 128, 128];
    let policies = [(1.0, 0.90), (1.2, 1.00), (1.2, 0.90), (1.0, 0.99), (1.0, 0.90), (2.0, 0.90), (5.0, 1.00)];
    for (k, ty) in TokenType::ALL.iter().enumerate() {
        check(&format!("{} vocabulary size", ty.name()), vocab.size(*ty) == sizes[k])?;
        check(&format!("{} embedding size", ty.name()), m.embeddings.as_array()[k] == embed[k])?;
    }
    for (k, ty) in TokenType::ELEMENTS.iter().enumerate() {
        let (tau, rho) = policies[k];
        check(&format!("{} sampling policy", ty.name()), m.sampling.get(*ty) == SamplingPolicy::new(tau, rho))?;
    }
    Ok(format!("{checked} published hyperparameters, vocabulary sizes and (τ, ρ) pairs match field for field"))
}

// ---------------------------------------------------------------------------

type Criterion = (usize, &'static str, fn(&mut Shared) -> Check);

const CRITERIA: [Criterion; 11] = [
    (1, "gradient fidelity", c1_gradients),
    (2, "quantization oracle", c2_quantize),
    (3, "EMA convergence", c3_ema),
    (4, "regularization math", c4_regularization),
    (5, "disentanglement trainability", c5_disentanglement),
    (6, "overfit sanity", c6_overfit),
    (7, "metrics oracles", c7_metrics),
    (8, "silhouette oracle", c8_silhouette),
    (9, "element-transfer structure", c9_transfer),
    (10, "determinism and round trips", c10_determinism),
    (11, "paper-preset fidelity", c11_paper_preset),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(&mut shared))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
