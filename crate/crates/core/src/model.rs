//! Forecasting network: graph attention over the slot graph, multi-scale
//! dilated temporal convolution, fusion, layer norm and a two-layer MLP
//! head, with hand-written reverse-mode gradients.
//!
//! All matrices are row-major `[out][in]`. Per window the model maps an
//! `N x w` block to `N` one-step-ahead predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{PgmaError, Result};
use crate::graph::{Adjacency, NodeEmbeddings};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_sensors: usize,
    pub window: usize,
    /// `d`: input projection and node embedding width.
    pub embed_dim: usize,
    /// `d'`: graph attention output width.
    pub graph_dim: usize,
    /// `C`: output channels per kernel size.
    pub conv_channels: usize,
    pub kernel_sizes: [usize; 3],
    pub dilation: usize,
    /// Width of the learned reduction applied to the flattened conv output.
    pub temporal_dim: usize,
    pub mlp_hidden: usize,
    pub n_slots: usize,
    /// When false the temporal branch is removed and `h = h^s`.
    pub temporal: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_sensors", self.n_sensors),
            ("window", self.window),
            ("embed_dim", self.embed_dim),
            ("graph_dim", self.graph_dim),
            ("conv_channels", self.conv_channels),
            ("dilation", self.dilation),
            ("temporal_dim", self.temporal_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("n_slots", self.n_slots),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PgmaError::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel_sizes.contains(&0) {
            return Err(PgmaError::Config("kernel sizes must be positive".into()));
        }
        if self.temporal && self.window <= self.dilation * (self.max_kernel() - 1) {
            return Err(PgmaError::Config(format!(
                "window {} is not longer than the receptive field {} of the temporal module",
                self.window,
                self.dilation * (self.max_kernel() - 1)
            )));
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1)
    }

    /// Length each kernel output is truncated to.
    pub fn conv_len(&self) -> usize {
        self.window - self.dilation * (self.max_kernel() - 1)
    }

    /// Flattened conv feature width `3 C L_out`.
    pub fn conv_features(&self) -> usize {
        3 * self.conv_channels * self.conv_len()
    }

    /// Width of the fused feature `[h^t || h^s]`.
    pub fn fused_dim(&self) -> usize {
        if self.temporal {
            self.temporal_dim + self.graph_dim
        } else {
            self.graph_dim
        }
    }
}

/// Every trainable tensor. Gradients use the same struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    pub attn_w: Vec<f64>,
    pub attn_a: Vec<f64>,
    pub conv_w: [Vec<f64>; 3],
    pub conv_b: [Vec<f64>; 3],
    pub reduce_w: Vec<f64>,
    pub reduce_b: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub mlp_w1: Vec<f64>,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Vec<f64>,
    pub mlp_b2: Vec<f64>,
    pub embeddings: NodeEmbeddings,
}

fn uniform(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, d, dp, c) = (cfg.window, cfg.embed_dim, cfg.graph_dim, cfg.conv_channels);
        let f = cfg.fused_dim();
        let h = cfg.mlp_hidden;
        let conv_w = cfg.kernel_sizes.map(|k| uniform(&mut rng, c * k, k));
        let (reduce_w, reduce_b) = if cfg.temporal {
            (
                uniform(&mut rng, cfg.temporal_dim * cfg.conv_features(), cfg.conv_features()),
                vec![0.0; cfg.temporal_dim],
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let mut params = ModelParams {
            proj_w: uniform(&mut rng, d * w, w),
            proj_b: vec![0.0; d],
            attn_w: uniform(&mut rng, dp * d, d),
            attn_a: uniform(&mut rng, 2 * dp, 2 * dp),
            conv_w,
            conv_b: [vec![0.0; c], vec![0.0; c], vec![0.0; c]],
            reduce_w,
            reduce_b,
            ln_gain: vec![1.0; f],
            ln_bias: vec![0.0; f],
            mlp_w1: uniform(&mut rng, h * f, f),
            mlp_b1: vec![0.0; h],
            mlp_w2: uniform(&mut rng, h, h),
            mlp_b2: vec![0.0],
            embeddings: NodeEmbeddings::init(cfg.n_sensors, d, cfg.n_slots, &mut rng),
        };
        // small positive bias keeps hidden units alive at the start
        params.mlp_b1.iter_mut().for_each(|b| *b = 0.01);
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visits every tensor with a stable name, embeddings last.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[f64])) {
        f("proj_w", &self.proj_w);
        f("proj_b", &self.proj_b);
        f("attn_w", &self.attn_w);
        f("attn_a", &self.attn_a);
        for (k, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            f(CONV_W_NAMES[k], w);
            f(CONV_B_NAMES[k], b);
        }
        f("reduce_w", &self.reduce_w);
        f("reduce_b", &self.reduce_b);
        f("ln_gain", &self.ln_gain);
        f("ln_bias", &self.ln_bias);
        f("mlp_w1", &self.mlp_w1);
        f("mlp_b1", &self.mlp_b1);
        f("mlp_w2", &self.mlp_w2);
        f("mlp_b2", &self.mlp_b2);
        for (s, m) in self.embeddings.slots.iter().enumerate() {
            f(&format!("embedding[{s}]"), m);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<f64>)) {
        f("proj_w", &mut self.proj_w);
        f("proj_b", &mut self.proj_b);
        f("attn_w", &mut self.attn_w);
        f("attn_a", &mut self.attn_a);
        for (k, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            f(CONV_W_NAMES[k], w);
            f(CONV_B_NAMES[k], b);
        }
        f("reduce_w", &mut self.reduce_w);
        f("reduce_b", &mut self.reduce_b);
        f("ln_gain", &mut self.ln_gain);
        f("ln_bias", &mut self.ln_bias);
        f("mlp_w1", &mut self.mlp_w1);
        f("mlp_b1", &mut self.mlp_b1);
        f("mlp_w2", &mut self.mlp_w2);
        f("mlp_b2", &mut self.mlp_b2);
        for (s, m) in self.embeddings.slots.iter_mut().enumerate() {
            f(&format!("embedding[{s}]"), m);
        }
    }

    /// Applies `f(param, other)` element-wise over matching tensors.
    pub fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        let mut flat = Vec::new();
        other.for_each(|_, t| flat.push(t.to_vec()));
        let mut it = flat.into_iter();
        self.for_each_mut(|_, t| {
            let o = it.next().expect("matching tensor layout");
            t.iter_mut().zip(o).for_each(|(a, b)| f(a, b));
        });
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        self.zip_mut(other, |a, b| *a += b);
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v *= c));
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|_, t| s += t.iter().map(|v| v * v).sum::<f64>());
        s.sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.for_each(|name, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        bad
    }

    /// Checks tensor lengths against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (w, d, dp, c) = (cfg.window, cfg.embed_dim, cfg.graph_dim, cfg.conv_channels);
        let f = cfg.fused_dim();
        let h = cfg.mlp_hidden;
        let (rw, rb) = if cfg.temporal {
            (cfg.temporal_dim * cfg.conv_features(), cfg.temporal_dim)
        } else {
            (0, 0)
        };
        let expected = [
            ("proj_w", self.proj_w.len(), d * w),
            ("proj_b", self.proj_b.len(), d),
            ("attn_w", self.attn_w.len(), dp * d),
            ("attn_a", self.attn_a.len(), 2 * dp),
            ("conv_w2", self.conv_w[0].len(), c * cfg.kernel_sizes[0]),
            ("conv_w3", self.conv_w[1].len(), c * cfg.kernel_sizes[1]),
            ("conv_w5", self.conv_w[2].len(), c * cfg.kernel_sizes[2]),
            ("conv_b2", self.conv_b[0].len(), c),
            ("conv_b3", self.conv_b[1].len(), c),
            ("conv_b5", self.conv_b[2].len(), c),
            ("reduce_w", self.reduce_w.len(), rw),
            ("reduce_b", self.reduce_b.len(), rb),
            ("ln_gain", self.ln_gain.len(), f),
            ("ln_bias", self.ln_bias.len(), f),
            ("mlp_w1", self.mlp_w1.len(), h * f),
            ("mlp_b1", self.mlp_b1.len(), h),
            ("mlp_w2", self.mlp_w2.len(), h),
            ("mlp_b2", self.mlp_b2.len(), 1),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(PgmaError::Shape(format!(
                    "parameter {name} has {got} entries, expected {want}"
                )));
            }
        }
        let emb = &self.embeddings;
        if emb.n_nodes != cfg.n_sensors
            || emb.dim != d
            || emb.n_slots() != cfg.n_slots
            || emb.slots.iter().any(|m| m.len() != cfg.n_sensors * d)
        {
            return Err(PgmaError::Shape("node embeddings do not match the model".into()));
        }
        Ok(())
    }
}

const CONV_W_NAMES: [&str; 3] = ["conv_w_small", "conv_w_mid", "conv_w_large"];
const CONV_B_NAMES: [&str; 3] = ["conv_b_small", "conv_b_mid", "conv_b_large"];

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = m x + b` for an `rows x cols` matrix.
fn affine(m: &[f64], x: &[f64], b: Option<&[f64]>, rows: usize, out: &mut [f64]) {
    let cols = x.len();
    for r in 0..rows {
        let acc = dot(&m[r * cols..(r + 1) * cols], x);
        out[r] = acc + b.map_or(0.0, |b| b[r]);
    }
}

/// `out += m^T g`.
fn affine_t_acc(m: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += w * gr;
        }
    }
}

/// `dm += g x^T`.
fn outer_acc(dm: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (d, &xv) in dm[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += gr * xv;
        }
    }
}

fn leaky(u: f64) -> f64 {
    if u > 0.0 {
        u
    } else {
        LEAKY_SLOPE * u
    }
}

/// `x'_i = P window_i + b`, the sensor-shared input projection.
pub fn project_input(window: &[f64], proj_w: &[f64], proj_b: &[f64], w: usize) -> Result<Vec<f64>> {
    let d = proj_b.len();
    if window.len() % w != 0 || proj_w.len() != d * w {
        return Err(PgmaError::Shape(format!(
            "projection expects rows of length {w} and a {d} x {w} matrix"
        )));
    }
    let n = window.len() / w;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        affine(proj_w, &window[i * w..(i + 1) * w], Some(proj_b), d, &mut out[i * d..(i + 1) * d]);
    }
    Ok(out)
}

/// One softmax entry of node `i` over `j in N(i) + {i}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionEntry {
    pub source: usize,
    /// Pre-activation `a^T [v_i || v_j]`.
    pub score: f64,
    /// LeakyReLU logit `e_ij`.
    pub logit: f64,
    pub alpha: f64,
}

/// Attention of one slot graph. `entries[i][0]` is always the self entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub n: usize,
    /// `V = W M`, one `d'` row per node.
    pub projected: Vec<f64>,
    pub entries: Vec<Vec<AttentionEntry>>,
}

impl Attention {
    pub fn alpha(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i].iter().find(|e| e.source == j).map(|e| e.alpha)
    }
}

/// Attention coefficients from slot embeddings `m` (`N x d`): `v = W m`,
/// `e_ij = LeakyReLU(a^T [v_i || v_j])`, softmax over `N(i) + {i}`.
pub fn attention_coefficients(
    m: &[f64],
    adj: &Adjacency,
    attn_w: &[f64],
    attn_a: &[f64],
) -> Result<Attention> {
    let n = adj.n;
    let dp = attn_a.len() / 2;
    if n == 0 || m.len() % n != 0 || attn_a.len() != 2 * dp {
        return Err(PgmaError::Shape("attention inputs are inconsistent".into()));
    }
    let d = m.len() / n;
    if attn_w.len() != dp * d {
        return Err(PgmaError::Shape(format!(
            "attention transform has {} entries, expected {dp} x {d}",
            attn_w.len()
        )));
    }
    let mut projected = vec![0.0; n * dp];
    for i in 0..n {
        affine(attn_w, &m[i * d..(i + 1) * d], None, dp, &mut projected[i * dp..(i + 1) * dp]);
    }
    let (a_dst, a_src) = attn_a.split_at(dp);
    let dst_part: Vec<f64> = (0..n).map(|i| dot(a_dst, &projected[i * dp..(i + 1) * dp])).collect();
    let src_part: Vec<f64> = (0..n).map(|j| dot(a_src, &projected[j * dp..(j + 1) * dp])).collect();
    let entries = (0..n)
        .map(|i| {
            let mut list: Vec<AttentionEntry> = std::iter::once(i)
                .chain(adj.in_neighbors(i).iter().copied())
                .map(|j| {
                    let score = dst_part[i] + src_part[j];
                    AttentionEntry {
                        source: j,
                        score,
                        logit: leaky(score),
                        alpha: 0.0,
                    }
                })
                .collect();
            // neighbors by descending score so every later sum runs in an
            // order that does not depend on node numbering
            list[1..].sort_by(|a, b| b.score.total_cmp(&a.score).then(a.source.cmp(&b.source)));
            let max = list.iter().map(|e| e.logit).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in list.iter_mut() {
                e.alpha = (e.logit - max).exp();
                z += e.alpha;
            }
            list.iter_mut().for_each(|e| e.alpha /= z);
            list
        })
        .collect();
    Ok(Attention {
        n,
        projected,
        entries,
    })
}

/// `h^s_i = ReLU(sum_j alpha_ij W x'_j)` over `N(i) + {i}`.
pub fn graph_attention_forward(xp: &[f64], att: &Attention, attn_w: &[f64]) -> Result<Vec<f64>> {
    let n = att.n;
    if xp.len() % n != 0 {
        return Err(PgmaError::Shape("node features do not split into N rows".into()));
    }
    let d = xp.len() / n;
    let dp = attn_w.len() / d.max(1);
    if attn_w.len() != dp * d {
        return Err(PgmaError::Shape("attention transform does not match feature width".into()));
    }
    let (_, agg) = graph_aggregate(xp, att, attn_w, d, dp);
    Ok(agg.into_iter().map(|v| v.max(0.0)).collect())
}

/// Returns `(W x', pre-ReLU aggregate)`.
fn graph_aggregate(
    xp: &[f64],
    att: &Attention,
    attn_w: &[f64],
    d: usize,
    dp: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = att.n;
    let mut z = vec![0.0; n * dp];
    for j in 0..n {
        affine(attn_w, &xp[j * d..(j + 1) * d], None, dp, &mut z[j * dp..(j + 1) * dp]);
    }
    let mut agg = vec![0.0; n * dp];
    for (i, list) in att.entries.iter().enumerate() {
        let out = &mut agg[i * dp..(i + 1) * dp];
        for e in list {
            for (o, &zv) in out.iter_mut().zip(&z[e.source * dp..(e.source + 1) * dp]) {
                *o += e.alpha * zv;
            }
        }
    }
    (z, agg)
}

/// Valid-mode causal dilated convolution
/// `y(t) = sum_s f(s) x(t - q s)`, `t = q (c - 1) .. L - 1`.
pub fn dilated_conv(x: &[f64], f: &[f64], q: usize) -> Result<Vec<f64>> {
    let c = f.len();
    let reach = q * c.saturating_sub(1);
    if c == 0 || x.len() <= reach {
        return Err(PgmaError::Shape(format!(
            "sequence of length {} is too short for receptive field {}",
            x.len(),
            reach + 1
        )));
    }
    Ok((reach..x.len())
        .map(|t| f.iter().enumerate().map(|(s, &fs)| fs * x[t - q * s]).sum())
        .collect())
}

/// Pre-activation conv features of one sensor, laid out
/// `[kernel][channel][position]` and truncated to the most recent `L_out`.
fn conv_preact(x: &[f64], params: &ModelParams, cfg: &ModelConfig, out: &mut [f64]) {
    let (c, q, lout) = (cfg.conv_channels, cfg.dilation, cfg.conv_len());
    let base = q * (cfg.max_kernel() - 1);
    for (kb, &ks) in cfg.kernel_sizes.iter().enumerate() {
        for ch in 0..c {
            let f = &params.conv_w[kb][ch * ks..(ch + 1) * ks];
            let bias = params.conv_b[kb][ch];
            let dst = &mut out[(kb * c + ch) * lout..(kb * c + ch + 1) * lout];
            for (tau, o) in dst.iter_mut().enumerate() {
                let t = base + tau;
                let mut acc = bias;
                for (s, &fs) in f.iter().enumerate() {
                    acc += fs * x[t - q * s];
                }
                *o = acc;
            }
        }
    }
}

/// Multi-scale temporal features `h^t` of every sensor: each kernel bank's
/// output truncated to the most recent `L_out` steps, concatenated over
/// channels, then ReLU. Returns `N x 3 C L_out`.
pub fn temporal_module_forward(
    window: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let w = cfg.window;
    if window.len() % w != 0 || cfg.window <= cfg.dilation * (cfg.max_kernel() - 1) {
        return Err(PgmaError::Shape("window shorter than the temporal receptive field".into()));
    }
    let n = window.len() / w;
    let fdim = cfg.conv_features();
    let mut out = vec![0.0; n * fdim];
    for i in 0..n {
        conv_preact(&window[i * w..(i + 1) * w], params, cfg, &mut out[i * fdim..(i + 1) * fdim]);
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(out)
}

/// Layer norm and MLP head parameters, borrowed from [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct Head<'a> {
    pub ln_gain: &'a [f64],
    pub ln_bias: &'a [f64],
    pub mlp_w1: &'a [f64],
    pub mlp_b1: &'a [f64],
    pub mlp_w2: &'a [f64],
    pub mlp_b2: f64,
}

impl<'a> Head<'a> {
    pub fn of(params: &'a ModelParams) -> Self {
        Head {
            ln_gain: &params.ln_gain,
            ln_bias: &params.ln_bias,
            mlp_w1: &params.mlp_w1,
            mlp_b1: &params.mlp_b1,
            mlp_w2: &params.mlp_w2,
            mlp_b2: params.mlp_b2[0],
        }
    }
}

struct HeadTrace {
    xhat: Vec<f64>,
    inv_std: f64,
    normed: Vec<f64>,
    hidden_pre: Vec<f64>,
    out: f64,
}

fn head_forward(h: &[f64], head: &Head) -> HeadTrace {
    let f = h.len();
    let mean = h.iter().sum::<f64>() / f as f64;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat: Vec<f64> = h.iter().map(|v| (v - mean) * inv_std).collect();
    let normed: Vec<f64> = xhat
        .iter()
        .zip(head.ln_gain.iter().zip(head.ln_bias))
        .map(|(x, (g, b))| g * x + b)
        .collect();
    let hid = head.mlp_b1.len();
    let mut hidden_pre = vec![0.0; hid];
    affine(head.mlp_w1, &normed, Some(head.mlp_b1), hid, &mut hidden_pre);
    let out = head
        .mlp_w2
        .iter()
        .zip(&hidden_pre)
        .map(|(w, z)| w * z.max(0.0))
        .sum::<f64>()
        + head.mlp_b2;
    HeadTrace {
        xhat,
        inv_std,
        normed,
        hidden_pre,
        out,
    }
}

/// `X_hat_i = MLP(LayerNorm([h^t_i || h^s_i]))`. `ht` is the reduced
/// temporal feature (`N x temporal_dim`) or empty when the temporal branch
/// is disabled.
pub fn fuse_and_predict(hs: &[f64], ht: &[f64], n: usize, head: &Head) -> Result<Vec<f64>> {
    if n == 0 || hs.len() % n != 0 || ht.len() % n != 0 {
        return Err(PgmaError::Shape("fused features do not split into N rows".into()));
    }
    let (ds, dt) = (hs.len() / n, ht.len() / n);
    if head.ln_gain.len() != ds + dt || head.mlp_w1.len() != head.mlp_b1.len() * (ds + dt) {
        return Err(PgmaError::Shape(format!(
            "head expects fused width {}, got {}",
            head.ln_gain.len(),
            ds + dt
        )));
    }
    let mut fused = Vec::with_capacity(ds + dt);
    Ok((0..n)
        .map(|i| {
            fused.clear();
            fused.extend_from_slice(&ht[i * dt..(i + 1) * dt]);
            fused.extend_from_slice(&hs[i * ds..(i + 1) * ds]);
            head_forward(&fused, head).out
        })
        .collect())
}

/// Intermediates of one window's forward pass.
pub struct ForwardTrace {
    slot: usize,
    /// `x'`, `N x d`.
    pub projected: Vec<f64>,
    /// `W x'`, `N x d'`.
    transformed: Vec<f64>,
    /// Pre-ReLU graph aggregate, `N x d'`.
    aggregate: Vec<f64>,
    /// Pre-ReLU conv features, `N x 3 C L_out`.
    conv: Vec<f64>,
    /// Reduced temporal features, `N x temporal_dim`.
    reduced: Vec<f64>,
    heads: Vec<HeadTrace>,
    pub prediction: Vec<f64>,
}

impl ForwardTrace {
    pub fn slot(&self) -> usize {
        self.slot
    }

    /// `h^s`, `N x d'`.
    pub fn spatial(&self) -> Vec<f64> {
        self.aggregate.iter().map(|v| v.max(0.0)).collect()
    }

    /// `h^t` before the reduction, `N x 3 C L_out`.
    pub fn temporal(&self) -> Vec<f64> {
        self.conv.iter().map(|v| v.max(0.0)).collect()
    }

    /// Reduced temporal features, `N x temporal_dim` (empty without the
    /// temporal branch).
    pub fn reduced_temporal(&self) -> &[f64] {
        &self.reduced
    }

    /// Signs of every ReLU pre-activation in the window, for locating
    /// non-differentiable points in gradient checks.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.aggregate
            .iter()
            .chain(&self.conv)
            .chain(self.heads.iter().flat_map(|h| h.hidden_pre.iter()))
            .map(|&v| v > 0.0)
            .collect()
    }
}

/// Accumulated `dL/dalpha` for one slot, aligned with `Attention::entries`.
#[derive(Debug, Clone)]
pub struct AlphaGrad {
    pub entries: Vec<Vec<f64>>,
}

impl AlphaGrad {
    pub fn zeros(att: &Attention) -> Self {
        AlphaGrad {
            entries: att.entries.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    fn add(&mut self, other: &AlphaGrad) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Model bound to its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }

    /// Attention of every slot for the given slot graphs.
    pub fn attention(&self, graphs: &[Adjacency]) -> Result<Vec<Attention>> {
        if graphs.len() != self.config.n_slots {
            return Err(PgmaError::Shape(format!(
                "{} graphs for {} slots",
                graphs.len(),
                self.config.n_slots
            )));
        }
        graphs
            .iter()
            .zip(&self.params.embeddings.slots)
            .map(|(g, m)| attention_coefficients(m, g, &self.params.attn_w, &self.params.attn_a))
            .collect()
    }

    /// Forward pass of one `N x w` window through the graph of `slot`.
    pub fn forward(&self, window: &[f64], slot: usize, att: &[Attention]) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let p = &self.params;
        let (n, w, d, dp) = (cfg.n_sensors, cfg.window, cfg.embed_dim, cfg.graph_dim);
        if window.len() != n * w {
            return Err(PgmaError::Shape(format!(
                "window has {} values, expected {n} x {w}",
                window.len()
            )));
        }
        let att = att
            .get(slot)
            .ok_or_else(|| PgmaError::Shape(format!("slot {slot} out of range")))?;
        let projected = project_input(window, &p.proj_w, &p.proj_b, w)?;
        let (transformed, aggregate) = graph_aggregate(&projected, att, &p.attn_w, d, dp);

        let (conv, reduced) = if cfg.temporal {
            let fdim = cfg.conv_features();
            let td = cfg.temporal_dim;
            let mut conv = vec![0.0; n * fdim];
            let mut reduced = vec![0.0; n * td];
            let mut act = vec![0.0; fdim];
            for i in 0..n {
                let pre = &mut conv[i * fdim..(i + 1) * fdim];
                conv_preact(&window[i * w..(i + 1) * w], p, cfg, pre);
                act.iter_mut().zip(pre.iter()).for_each(|(a, v)| *a = v.max(0.0));
                affine(&p.reduce_w, &act, Some(&p.reduce_b), td, &mut reduced[i * td..(i + 1) * td]);
            }
            (conv, reduced)
        } else {
            (Vec::new(), Vec::new())
        };

        let head = Head::of(p);
        let td = if cfg.temporal { cfg.temporal_dim } else { 0 };
        let mut fused = Vec::with_capacity(cfg.fused_dim());
        let heads: Vec<HeadTrace> = (0..n)
            .map(|i| {
                fused.clear();
                fused.extend_from_slice(&reduced[i * td..(i + 1) * td]);
                fused.extend(aggregate[i * dp..(i + 1) * dp].iter().map(|v| v.max(0.0)));
                head_forward(&fused, &head)
            })
            .collect();
        let prediction = heads.iter().map(|h| h.out).collect();
        Ok(ForwardTrace {
            slot,
            projected,
            transformed,
            aggregate,
            conv,
            reduced,
            heads,
            prediction,
        })
    }

    pub fn predict(&self, window: &[f64], slot: usize, att: &[Attention]) -> Result<Vec<f64>> {
        Ok(self.forward(window, slot, att)?.prediction)
    }

    /// Backpropagates `dL/dX_hat` of one window into `grads` (everything
    /// except the attention path) and `alpha_grads[slot]`.
    pub fn backward(
        &self,
        window: &[f64],
        trace: &ForwardTrace,
        att: &[Attention],
        pred_grad: &[f64],
        grads: &mut ModelParams,
        alpha_grads: &mut [AlphaGrad],
    ) -> Result<()> {
        let cfg = &self.config;
        let p = &self.params;
        let (n, w, d, dp) = (cfg.n_sensors, cfg.window, cfg.embed_dim, cfg.graph_dim);
        if pred_grad.len() != n {
            return Err(PgmaError::Shape("prediction gradient length differs from N".into()));
        }
        let td = if cfg.temporal { cfg.temporal_dim } else { 0 };
        let f = cfg.fused_dim();
        let hid = cfg.mlp_hidden;
        let fdim = if cfg.temporal { cfg.conv_features() } else { 0 };

        let mut d_agg = vec![0.0; n * dp];
        let mut d_hidden = vec![0.0; hid];
        let mut d_normed = vec![0.0; f];
        let mut d_fused = vec![0.0; f];
        let mut d_act = vec![0.0; fdim];
        let mut act = vec![0.0; fdim];
        for i in 0..n {
            let g = pred_grad[i];
            if g == 0.0 {
                continue;
            }
            let ht = &trace.heads[i];
            // output layer
            grads.mlp_b2[0] += g;
            for k in 0..hid {
                let z = ht.hidden_pre[k];
                grads.mlp_w2[k] += g * z.max(0.0);
                d_hidden[k] = if z > 0.0 { g * p.mlp_w2[k] } else { 0.0 };
                grads.mlp_b1[k] += d_hidden[k];
            }
            outer_acc(&mut grads.mlp_w1, &d_hidden, &ht.normed);
            d_normed.iter_mut().for_each(|v| *v = 0.0);
            affine_t_acc(&p.mlp_w1, &d_hidden, &mut d_normed);
            // layer norm
            let mut mean_dx = 0.0;
            let mut mean_dx_x = 0.0;
            for k in 0..f {
                grads.ln_gain[k] += d_normed[k] * ht.xhat[k];
                grads.ln_bias[k] += d_normed[k];
                let dx = d_normed[k] * p.ln_gain[k];
                d_fused[k] = dx;
                mean_dx += dx;
                mean_dx_x += dx * ht.xhat[k];
            }
            mean_dx /= f as f64;
            mean_dx_x /= f as f64;
            for k in 0..f {
                d_fused[k] = ht.inv_std * (d_fused[k] - mean_dx - ht.xhat[k] * mean_dx_x);
            }
            // spatial half
            for k in 0..dp {
                let pre = trace.aggregate[i * dp + k];
                d_agg[i * dp + k] = if pre > 0.0 { d_fused[td + k] } else { 0.0 };
            }
            // temporal half
            if cfg.temporal {
                let d_red = &d_fused[..td];
                let conv = &trace.conv[i * fdim..(i + 1) * fdim];
                act.iter_mut().zip(conv).for_each(|(a, v)| *a = v.max(0.0));
                outer_acc(&mut grads.reduce_w, d_red, &act);
                grads.reduce_b.iter_mut().zip(d_red).for_each(|(b, g)| *b += g);
                d_act.iter_mut().for_each(|v| *v = 0.0);
                affine_t_acc(&p.reduce_w, d_red, &mut d_act);
                self.conv_backward(&window[i * w..(i + 1) * w], conv, &d_act, grads);
            }
        }

        // graph aggregation: agg_i = sum_j alpha_ij z_j
        let att_s = &att[trace.slot];
        let ag = &mut alpha_grads[trace.slot];
        let mut d_z = vec![0.0; n * dp];
        for (i, list) in att_s.entries.iter().enumerate() {
            let gi = &d_agg[i * dp..(i + 1) * dp];
            for (e, da) in list.iter().zip(ag.entries[i].iter_mut()) {
                let zj = &trace.transformed[e.source * dp..(e.source + 1) * dp];
                *da += dot(gi, zj);
                for (dz, &g) in d_z[e.source * dp..(e.source + 1) * dp].iter_mut().zip(gi) {
                    *dz += e.alpha * g;
                }
            }
        }
        let mut d_xp = vec![0.0; d];
        for j in 0..n {
            let gz = &d_z[j * dp..(j + 1) * dp];
            outer_acc(&mut grads.attn_w, gz, &trace.projected[j * d..(j + 1) * d]);
            d_xp.iter_mut().for_each(|v| *v = 0.0);
            affine_t_acc(&p.attn_w, gz, &mut d_xp);
            outer_acc(&mut grads.proj_w, &d_xp, &window[j * w..(j + 1) * w]);
            grads.proj_b.iter_mut().zip(&d_xp).for_each(|(b, g)| *b += g);
        }
        Ok(())
    }

    fn conv_backward(&self, x: &[f64], pre: &[f64], d_act: &[f64], grads: &mut ModelParams) {
        let cfg = &self.config;
        let (c, q, lout) = (cfg.conv_channels, cfg.dilation, cfg.conv_len());
        let base = q * (cfg.max_kernel() - 1);
        for (kb, &ks) in cfg.kernel_sizes.iter().enumerate() {
            for ch in 0..c {
                let off = (kb * c + ch) * lout;
                let df = &mut grads.conv_w[kb][ch * ks..(ch + 1) * ks];
                let mut db = 0.0;
                for tau in 0..lout {
                    if pre[off + tau] <= 0.0 {
                        continue;
                    }
                    let g = d_act[off + tau];
                    db += g;
                    let t = base + tau;
                    for (s, dfs) in df.iter_mut().enumerate() {
                        *dfs += g * x[t - q * s];
                    }
                }
                grads.conv_b[kb][ch] += db;
            }
        }
    }

    /// Pushes accumulated `dL/dalpha` of every slot through the softmax,
    /// LeakyReLU and `V = W M` into `attn_a`, `attn_w` and the embeddings.
    pub fn attention_backward(
        &self,
        att: &[Attention],
        alpha_grads: &[AlphaGrad],
        grads: &mut ModelParams,
    ) {
        let d = self.config.embed_dim;
        let dp = self.config.graph_dim;
        let (a_dst, a_src) = self.params.attn_a.split_at(dp);
        for (s, (att_s, ag)) in att.iter().zip(alpha_grads).enumerate() {
            let n = att_s.n;
            let mut d_v = vec![0.0; n * dp];
            let mut d_a = vec![0.0; 2 * dp];
            for (i, (list, dalpha)) in att_s.entries.iter().zip(&ag.entries).enumerate() {
                let weighted: f64 = list.iter().zip(dalpha).map(|(e, g)| e.alpha * g).sum();
                for (e, &g) in list.iter().zip(dalpha) {
                    let d_logit = e.alpha * (g - weighted);
                    let d_score = if e.score > 0.0 { d_logit } else { LEAKY_SLOPE * d_logit };
                    if d_score == 0.0 {
                        continue;
                    }
                    let j = e.source;
                    let vi = &att_s.projected[i * dp..(i + 1) * dp];
                    let vj = &att_s.projected[j * dp..(j + 1) * dp];
                    for k in 0..dp {
                        d_a[k] += d_score * vi[k];
                        d_a[dp + k] += d_score * vj[k];
                        d_v[i * dp + k] += d_score * a_dst[k];
                        d_v[j * dp + k] += d_score * a_src[k];
                    }
                }
            }
            grads.attn_a.iter_mut().zip(&d_a).for_each(|(g, v)| *g += v);
            let m = &self.params.embeddings.slots[s];
            let dm = &mut grads.embeddings.slots[s];
            for i in 0..n {
                let gv = &d_v[i * dp..(i + 1) * dp];
                outer_acc(&mut grads.attn_w, gv, &m[i * d..(i + 1) * d]);
                affine_t_acc(&self.params.attn_w, gv, &mut dm[i * d..(i + 1) * d]);
            }
        }
    }

    /// Mean squared error over `batch[indices]` and its gradient. With
    /// `threads > 1` windows are split into contiguous chunks whose partial
    /// gradients are summed in chunk order.
    pub fn loss_and_grad(
        &self,
        batch: &WindowBatch,
        indices: &[usize],
        slots: &[usize],
        graphs: &[Adjacency],
        threads: usize,
    ) -> Result<(f64, ModelParams)> {
        let att = self.attention(graphs)?;
        let n = self.config.n_sensors;
        let scale = 1.0 / (indices.len() * n) as f64;

        let run = |chunk: &[usize]| -> Result<(f64, ModelParams, Vec<AlphaGrad>)> {
            let mut grads = self.params.zeros_like();
            let mut ag: Vec<AlphaGrad> = att.iter().map(AlphaGrad::zeros).collect();
            let mut loss = 0.0;
            let mut dpred = vec![0.0; n];
            for &b in chunk {
                let window = batch.window(b);
                let trace = self.forward(window, slots[b], &att)?;
                for ((dp, &p), &t) in dpred.iter_mut().zip(&trace.prediction).zip(batch.target(b)) {
                    let r = p - t;
                    loss += r * r;
                    *dp = 2.0 * r * scale;
                }
                self.backward(window, &trace, &att, &dpred, &mut grads, &mut ag)?;
            }
            Ok((loss, grads, ag))
        };

        let (loss, mut grads, ag) = if threads > 1 && indices.len() > 1 {
            use rayon::prelude::*;
            let chunk = indices.len().div_ceil(threads);
            let parts: Vec<_> = indices
                .par_chunks(chunk)
                .map(run)
                .collect::<Result<Vec<_>>>()?;
            let mut it = parts.into_iter();
            let (mut loss, mut grads, mut ag) = it.next().expect("at least one chunk");
            for (l, g, a) in it {
                loss += l;
                grads.add_assign(&g);
                ag.iter_mut().zip(&a).for_each(|(x, y)| x.add(y));
            }
            (loss, grads, ag)
        } else {
            run(indices)?
        };
        self.attention_backward(&att, &ag, &mut grads);
        Ok((loss * scale, grads))
    }

    /// Mean squared error over `batch[indices]` without gradients.
    pub fn loss(
        &self,
        batch: &WindowBatch,
        indices: &[usize],
        slots: &[usize],
        graphs: &[Adjacency],
    ) -> Result<f64> {
        let att = self.attention(graphs)?;
        let mut loss = 0.0;
        for &b in indices {
            let pred = self.predict(batch.window(b), slots[b], &att)?;
            loss += pred
                .iter()
                .zip(batch.target(b))
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
        }
        Ok(loss / (indices.len() * self.config.n_sensors) as f64)
    }
}
