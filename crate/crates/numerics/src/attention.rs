//! Kernelized (linear) attention with feature map `φ(x) = elu(x) + 1`.
//!
//! For each query row `t`:
//!
//! ```text
//! out_t = φ(q_t)ᵀ S_t / max(φ(q_t)ᵀ z_t, 1e-8)
//! S_t = Σ_s φ(k_s) v_sᵀ,   z_t = Σ_s φ(k_s)
//! ```
//!
//! where the sums run over `s ≤ t` when causal and over all key rows
//! otherwise. Rows are packed as `batch × len`; heads split the feature
//! columns evenly.

use crate::error::{NumericsError, Result};

pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnLayout {
    pub fn self_attention(batch: usize, len: usize, heads: usize, causal: bool) -> Self {
        Self {
            batch,
            q_len: len,
            kv_len: len,
            heads,
            causal,
        }
    }

    pub(crate) fn validate(&self, d: usize, dv: usize) -> Result<()> {
        if self.q_len == 0 || self.kv_len == 0 {
            return Err(NumericsError::EmptySequence);
        }
        if self.causal && self.q_len != self.kv_len {
            return Err(NumericsError::InvalidArgument(format!(
                "causal attention needs equal query/key lengths ({} vs {})",
                self.q_len, self.kv_len
            )));
        }
        if self.heads == 0 || d % self.heads != 0 || dv % self.heads != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "{} heads do not divide widths {d}/{dv}",
                self.heads
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn feature_map(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
fn feature_map_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

struct HeadView {
    dh: usize,
    dvh: usize,
    d: usize,
    dv: usize,
}

impl HeadView {
    fn load(&self, src: &[f64], row: usize, head: usize, out: &mut [f64]) {
        let off = row * self.d + head * self.dh;
        for (o, &x) in out.iter_mut().zip(&src[off..off + self.dh]) {
            *o = feature_map(x);
        }
    }

    fn v_row<'a>(&self, v: &'a [f64], row: usize, head: usize) -> &'a [f64] {
        let off = row * self.dv + head * self.dvh;
        &v[off..off + self.dvh]
    }
}

/// Forward pass. `q` and `k` are `rows × d`, `v` is `rows × dv`.
pub fn forward(q: &[f64], k: &[f64], v: &[f64], d: usize, dv: usize, layout: AttnLayout) -> Vec<f64> {
    let AttnLayout {
        batch,
        q_len,
        kv_len,
        heads,
        causal,
    } = layout;
    let hv = HeadView {
        dh: d / heads,
        dvh: dv / heads,
        d,
        dv,
    };
    let (dh, dvh) = (hv.dh, hv.dvh);
    let mut out = vec![0.0; batch * q_len * dv];
    let mut state = vec![0.0; dh * dvh];
    let mut norm = vec![0.0; dh];
    let mut phi_q = vec![0.0; dh];
    let mut phi_k = vec![0.0; dh];

    for b in 0..batch {
        for h in 0..heads {
            state.iter_mut().for_each(|x| *x = 0.0);
            norm.iter_mut().for_each(|x| *x = 0.0);
            let mut absorb = |s: usize, state: &mut [f64], norm: &mut [f64]| {
                let row = b * kv_len + s;
                hv.load(k, row, h, &mut phi_k);
                let vr = hv.v_row(v, row, h);
                for a in 0..dh {
                    norm[a] += phi_k[a];
                    let sa = &mut state[a * dvh..(a + 1) * dvh];
                    for (sc, &vc) in sa.iter_mut().zip(vr) {
                        *sc += phi_k[a] * vc;
                    }
                }
            };
            if !causal {
                for s in 0..kv_len {
                    absorb(s, &mut state, &mut norm);
                }
            }
            for t in 0..q_len {
                if causal {
                    absorb(t, &mut state, &mut norm);
                }
                let row = b * q_len + t;
                hv.load(q, row, h, &mut phi_q);
                let den = phi_q
                    .iter()
                    .zip(&norm)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .max(DENOM_FLOOR);
                let o = &mut out[row * dv + h * dvh..row * dv + (h + 1) * dvh];
                for a in 0..dh {
                    let w = phi_q[a] / den;
                    for (oc, &sc) in o.iter_mut().zip(&state[a * dvh..(a + 1) * dvh]) {
                        *oc += w * sc;
                    }
                }
            }
        }
    }
    out
}

/// Vector-Jacobian product. Returns `(dq, dk, dv)`.
pub fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    dv: usize,
    layout: AttnLayout,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnLayout {
        batch,
        q_len,
        kv_len,
        heads,
        causal,
    } = layout;
    let hv = HeadView {
        dh: d / heads,
        dvh: dv / heads,
        d,
        dv,
    };
    let (dh, dvh) = (hv.dh, hv.dvh);
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];

    let mut state = vec![0.0; dh * dvh];
    let mut norm = vec![0.0; dh];
    let mut phi_q = vec![0.0; dh];
    let mut phi_k = vec![0.0; dh];
    let mut num = vec![0.0; dvh];
    // Per-query upstream terms, kept for the key/value pass.
    let mut dnum_all = vec![0.0; q_len * dvh];
    let mut dden_all = vec![0.0; q_len];
    let mut g_state = vec![0.0; dh * dvh];
    let mut g_norm = vec![0.0; dh];

    for b in 0..batch {
        for h in 0..heads {
            state.iter_mut().for_each(|x| *x = 0.0);
            norm.iter_mut().for_each(|x| *x = 0.0);
            let absorb = |s: usize, state: &mut [f64], norm: &mut [f64], phi_k: &mut [f64]| {
                let row = b * kv_len + s;
                hv.load(k, row, h, phi_k);
                let vr = hv.v_row(v, row, h);
                for a in 0..dh {
                    norm[a] += phi_k[a];
                    for (sc, &vc) in state[a * dvh..(a + 1) * dvh].iter_mut().zip(vr) {
                        *sc += phi_k[a] * vc;
                    }
                }
            };
            if !causal {
                for s in 0..kv_len {
                    absorb(s, &mut state, &mut norm, &mut phi_k);
                }
            }
            // Pass 1: query gradients and per-query upstream terms.
            for t in 0..q_len {
                if causal {
                    absorb(t, &mut state, &mut norm, &mut phi_k);
                }
                let row = b * q_len + t;
                hv.load(q, row, h, &mut phi_q);
                let den_raw: f64 = phi_q.iter().zip(&norm).map(|(a, b)| a * b).sum();
                let den = den_raw.max(DENOM_FLOOR);
                num.iter_mut().for_each(|x| *x = 0.0);
                for a in 0..dh {
                    for (nc, &sc) in num.iter_mut().zip(&state[a * dvh..(a + 1) * dvh]) {
                        *nc += phi_q[a] * sc;
                    }
                }
                let g = &grad_out[row * dv + h * dvh..row * dv + (h + 1) * dvh];
                let dnum = &mut dnum_all[t * dvh..(t + 1) * dvh];
                let mut g_dot_out = 0.0;
                for c in 0..dvh {
                    dnum[c] = g[c] / den;
                    g_dot_out += g[c] * num[c] / den;
                }
                let dden = if den_raw > DENOM_FLOOR {
                    -g_dot_out / den
                } else {
                    0.0
                };
                dden_all[t] = dden;
                let qoff = row * d + h * dh;
                for a in 0..dh {
                    let mut acc = dden * norm[a];
                    for (sc, dc) in state[a * dvh..(a + 1) * dvh].iter().zip(dnum.iter()) {
                        acc += sc * dc;
                    }
                    gq[qoff + a] += acc * feature_map_grad(q[qoff + a]);
                }
            }
            // Pass 2: key/value gradients through the (suffix-)summed state gradient.
            g_state.iter_mut().for_each(|x| *x = 0.0);
            g_norm.iter_mut().for_each(|x| *x = 0.0);
            let mut fold_query = |t: usize, g_state: &mut [f64], g_norm: &mut [f64]| {
                let row = b * q_len + t;
                hv.load(q, row, h, &mut phi_q);
                let dnum = &dnum_all[t * dvh..(t + 1) * dvh];
                for a in 0..dh {
                    g_norm[a] += dden_all[t] * phi_q[a];
                    for (gs, &dc) in g_state[a * dvh..(a + 1) * dvh].iter_mut().zip(dnum) {
                        *gs += phi_q[a] * dc;
                    }
                }
            };
            if !causal {
                for t in 0..q_len {
                    fold_query(t, &mut g_state, &mut g_norm);
                }
            }
            for s in (0..kv_len).rev() {
                if causal {
                    fold_query(s, &mut g_state, &mut g_norm);
                }
                let row = b * kv_len + s;
                hv.load(k, row, h, &mut phi_k);
                let vr = hv.v_row(v, row, h);
                let koff = row * d + h * dh;
                let voff = row * dv + h * dvh;
                for a in 0..dh {
                    let gs = &g_state[a * dvh..(a + 1) * dvh];
                    let mut acc = g_norm[a];
                    for (c, &g) in gs.iter().enumerate() {
                        acc += g * vr[c];
                        gv[voff + c] += phi_k[a] * g;
                    }
                    gk[koff + a] += acc * feature_map_grad(k[koff + a]);
                }
            }
        }
    }
    (gq, gk, gv)
}
