//! Scalar-loop reference implementations used as test oracles.
//!
//! Everything here works on `Vec<Vec<f64>>` with explicit loops and shares
//! no code with the library kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use dflat::attention::AttentionConfig;
use dflat::model::DecoderShape;
use dflat::params::ParameterStore;
use dflat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mat_of(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.len(), "oracle and library sizes differ");
    flat.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) * inv * gain[k] + bias[k])
                .collect()
        })
        .collect()
}

/// `(p, 2k) = sin(p / 10000^(2k/d))`, `(p, 2k+1) = cos(...)`.
pub fn sinusoid(n: usize, d: usize) -> Mat {
    (0..n)
        .map(|p| {
            (0..d)
                .map(|c| {
                    let k = (c / 2) as f64;
                    let angle = p as f64 / 10000f64.powf(2.0 * k / d as f64);
                    if c % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// One head of the attention rule: for every query `i`,
/// `z_prev[i][slice] + Σ_t softmax_t(q_i·k_t / √d_m) · (x_t W_v)` with
/// `q_i = (z_prev[i] + z_q[i]) W_q` and `k_t = (x_t + p_t) W_k`.
pub struct HeadWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

pub fn head_increment(query_in: &Mat, keys_in: &Mat, values_in: &Mat, hw: &HeadWeights) -> (Mat, Mat) {
    let dm = hw.wq[0].len();
    let q = mul(query_in, &hw.wq);
    let k = mul(keys_in, &hw.wk);
    let v = mul(values_in, &hw.wv);
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for qi in &q {
        let scores: Vec<f64> = k.iter().map(|kt| dot(qi, kt) / (dm as f64).sqrt()).collect();
        let a = softmax(&scores);
        let mut o = vec![0.0; dm];
        for (t, at) in a.iter().enumerate() {
            for c in 0..dm {
                o[c] += at * v[t][c];
            }
        }
        out.push(o);
        weights.push(a);
    }
    (out, weights)
}

pub fn single_head(z_prev: &Mat, z_q: &Mat, tokens: &Mat, pos: &Mat, hw: &HeadWeights, head: usize) -> Mat {
    let dm = hw.wq[0].len();
    let (inc, _) = head_increment(&add(z_prev, z_q), &add(tokens, pos), tokens, hw);
    inc.iter()
        .zip(z_prev)
        .map(|(r, zp)| (0..dm).map(|c| r[c] + zp[head * dm + c]).collect())
        .collect()
}

pub fn concat_cols(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn multi_head(z_prev: &Mat, z_q: &Mat, tokens: &Mat, pos: &Mat, heads: &[HeadWeights], wo: &Mat) -> Mat {
    let parts: Vec<Mat> = heads
        .iter()
        .enumerate()
        .map(|(h, hw)| single_head(z_prev, z_q, tokens, pos, hw, h))
        .collect();
    mul(&concat_cols(&parts), wo)
}

/// `Z_r[i] = Σ_j softmax_j(O_r[i]·O_c[j]/√d) O_c[j] + O_r[i]` and the mirror
/// for columns over the same scores.
pub fn interactive(o_r: &Mat, o_c: &Mat) -> (Mat, Mat) {
    let d = o_r[0].len() as f64;
    let s: Mat = o_r.iter().map(|r| o_c.iter().map(|c| dot(r, c) / d.sqrt()).collect()).collect();
    let mut z_r = o_r.clone();
    for i in 0..o_r.len() {
        let a = softmax(&s[i]);
        for j in 0..o_c.len() {
            for k in 0..o_r[0].len() {
                z_r[i][k] += a[j] * o_c[j][k];
            }
        }
    }
    let mut z_c = o_c.clone();
    for j in 0..o_c.len() {
        let col: Vec<f64> = (0..o_r.len()).map(|i| s[i][j]).collect();
        let a = softmax(&col);
        for i in 0..o_r.len() {
            for k in 0..o_c[0].len() {
                z_c[j][k] += a[i] * o_r[i][k];
            }
        }
    }
    (z_r, z_c)
}

pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64], g: &[f64], b: &[f64]) -> Mat {
    let hidden: Mat = mul(x, w1)
        .into_iter()
        .map(|r| r.iter().zip(b1).map(|(v, c)| (v + c).max(0.0)).collect())
        .collect();
    let y: Mat = mul(&hidden, w2)
        .into_iter()
        .map(|r| r.iter().zip(b2).map(|(v, c)| v + c).collect())
        .collect();
    layer_norm(&add(x, &y), g, b)
}

/// Residual-free grouped increment: query `i` of group `⌊i·G/n_q⌋` sees only
/// the tokens of that group's lines.
#[allow(clippy::too_many_arguments)]
pub fn grouped_oracle(
    zp: &Mat,
    zq: &Mat,
    tok: &Mat,
    pos: &Mat,
    heads: &[HeadWeights],
    lines: usize,
    per_line: usize,
    groups: usize,
) -> Mat {
    let n_q = zp.len();
    let per_group = lines / groups * per_line;
    let mut parts = Vec::new();
    for hw in heads {
        let mut rows = Vec::new();
        for i in 0..n_q {
            let g = i * groups / n_q;
            let range = g * per_group..(g + 1) * per_group;
            let q = add(&vec![zp[i].clone()], &vec![zq[i].clone()]);
            let keys = add(&tok[range.clone()].to_vec(), &pos[range.clone()].to_vec());
            let (inc, _) = head_increment(&q, &keys, &tok[range].to_vec(), hw);
            rows.push(inc[0].clone());
        }
        parts.push(rows);
    }
    concat_cols(&parts)
}

/// Residual-free pooled increment: window means of tokens, codes of each
/// window's first member.
#[allow(clippy::too_many_arguments)]
pub fn pooled_oracle(
    zp: &Mat,
    zq: &Mat,
    tok: &Mat,
    pos: &Mat,
    heads: &[HeadWeights],
    lines: usize,
    per_line: usize,
    window: usize,
) -> Mat {
    let d = tok[0].len();
    let mut p_tok = Vec::new();
    let mut p_pos = Vec::new();
    for line in 0..lines {
        let mut start = 0;
        while start < per_line {
            let end = (start + window).min(per_line);
            let mut mean = vec![0.0; d];
            for t in start..end {
                for k in 0..d {
                    mean[k] += tok[line * per_line + t][k];
                }
            }
            p_tok.push(mean.iter().map(|v| v / (end - start) as f64).collect::<Vec<_>>());
            p_pos.push(pos[line * per_line + start].clone());
            start = end;
        }
    }
    let query_in = add(zp, zq);
    let keys = add(&p_tok, &p_pos);
    let parts: Vec<Mat> = heads.iter().map(|hw| head_increment(&query_in, &keys, &p_tok, hw).0).collect();
    concat_cols(&parts)
}

/// One decoder layer (attention, `W^O`, LN1, FFN with LN2) over an explicit
/// token order, reading weights from `store` under `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn layer_oracle(
    store: &ParameterStore,
    prefix: &str,
    cfg: &AttentionConfig,
    z_prev: &Mat,
    z_q: &Mat,
    tokens: &Mat,
    pos: &Mat,
    lines: usize,
    per_line: usize,
) -> Mat {
    let p = |name: &str| store.by_name(&format!("{prefix}.{name}")).clone();
    let heads: Vec<HeadWeights> = (0..cfg.heads)
        .map(|h| HeadWeights {
            wq: mat(&p(&format!("head{h}.wq"))),
            wk: mat(&p(&format!("head{h}.wk"))),
            wv: mat(&p(&format!("head{h}.wv"))),
        })
        .collect();
    let wo = mat(&p("wo"));
    let mixed = if cfg.group_pool {
        let g = grouped_oracle(z_prev, z_q, tokens, pos, &heads, lines, per_line, cfg.groups);
        let pl = pooled_oracle(z_prev, z_q, tokens, pos, &heads, lines, per_line, cfg.pool_window);
        mul(&add(&add(z_prev, &g), &pl), &wo)
    } else {
        multi_head(z_prev, z_q, tokens, pos, &heads, &wo)
    };
    let v = |name: &str| p(name).data().to_vec();
    let normed = layer_norm(&mixed, &v("ln1.gain"), &v("ln1.bias"));
    ffn(
        &normed,
        &mat(&p("ffn.w1")),
        &v("ffn.b1"),
        &mat(&p("ffn.w2")),
        &v("ffn.b2"),
        &v("ln2.gain"),
        &v("ln2.bias"),
    )
}

/// Perturbs every parameter so gains, biases and queries are non-trivial.
pub fn jitter(store: &mut ParameterStore, seed: u64) {
    let mut rng = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Full row/column decoder from `S_o` (row-major cells) to the dense map.
pub fn decoder_oracle(store: &ParameterStore, shape: DecoderShape, cfg: &AttentionConfig, interactive_on: bool, s_o: &Mat) -> Mat {
    let DecoderShape { h, w, out_h, out_w } = shape;
    let d = cfg.d;
    let base_r = sinusoid(h, d);
    let base_c = sinusoid(w, d);
    // Row flattening: token t is cell (t / w, t % w) with row code t / w.
    let row_tokens: Mat = (0..h * w).map(|t| s_o[(t / w) * w + t % w].clone()).collect();
    let row_pos: Mat = (0..h * w).map(|t| base_r[t / w].clone()).collect();
    // Column flattening: token t is cell (t % h, t / h) with column code t / h.
    let col_tokens: Mat = (0..h * w).map(|t| s_o[(t % h) * w + t / h].clone()).collect();
    let col_pos: Mat = (0..h * w).map(|t| base_c[t / h].clone()).collect();
    let zq_r = mat(store.by_name("row.queries"));
    let zq_c = mat(store.by_name("col.queries"));
    let mut z_r = vec![vec![0.0; d]; out_h];
    let mut z_c = vec![vec![0.0; d]; out_w];
    for l in 0..cfg.layers {
        let o_r = layer_oracle(store, &format!("row.layer{l}"), cfg, &z_r, &zq_r, &row_tokens, &row_pos, h, w);
        let o_c = layer_oracle(store, &format!("col.layer{l}"), cfg, &z_c, &zq_c, &col_tokens, &col_pos, w, h);
        (z_r, z_c) = if interactive_on { interactive(&o_r, &o_c) } else { (o_r, o_c) };
    }
    let mut s = Vec::new();
    for i in 0..out_h {
        for j in 0..out_w {
            s.push(z_r[i].iter().zip(&z_c[j]).map(|(a, b)| a + b).collect());
        }
    }
    s
}
