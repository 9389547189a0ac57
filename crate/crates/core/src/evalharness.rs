//! Seeded toy GQA transformer and the metrics used to compare compressed
//! caches against the full cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{attend, ModelShape};
use crate::cachestore::{
    CacheRows, CompressedCache, HeadCache, KvRows, LayerKv, ModelKvCache, ReferenceContinuation,
};
use crate::error::{Error, Result};
use crate::numkit::{cosine, dot, softmax_into, Matrix};
use crate::queries::{content_vectors, sample_content, QueryStrategy};
use crate::rope::RopeConfig;
use crate::seeds::stream_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub shape: ModelShape,
    pub vocab: usize,
    pub hidden: usize,
    pub rope: RopeConfig,
    pub seed: u64,
    /// Extra gain on the query and key projections.
    pub weight_scale: f64,
    /// Standard deviation of the query and key projection biases.
    #[serde(default)]
    pub qk_bias: f64,
}

impl ToyModelConfig {
    pub const DEFAULT_WEIGHT_SCALE: f64 = 0.15;
    pub const DEFAULT_QK_BIAS: f64 = 2.0;

    pub fn new(shape: ModelShape, vocab: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            shape,
            vocab,
            hidden: shape.num_q_heads * shape.head_dim,
            rope: RopeConfig::new(shape.head_dim, RopeConfig::DEFAULT_THETA)?,
            seed,
            weight_scale: Self::DEFAULT_WEIGHT_SCALE,
            qk_bias: Self::DEFAULT_QK_BIAS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 4 layers, 4 query heads, 2 KV heads, head_dim 16, vocab 64.
    pub fn toy(seed: u64) -> Self {
        Self::new(
            ModelShape::new(4, 4, 2, 16).expect("valid toy shape"),
            64,
            seed,
        )
        .expect("valid toy config")
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.rope.validate()?;
        if self.hidden != self.shape.num_q_heads * self.shape.head_dim {
            return Err(Error::InvalidConfig(format!(
                "hidden {} must equal num_q_heads x head_dim = {}",
                self.hidden,
                self.shape.num_q_heads * self.shape.head_dim
            )));
        }
        if self.rope.head_dim != self.shape.head_dim {
            return Err(Error::InvalidConfig(
                "rope head_dim vs shape head_dim".into(),
            ));
        }
        if self.vocab < 8 {
            return Err(Error::InvalidConfig(format!(
                "vocab {} is below 8",
                self.vocab
            )));
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite()) {
            return Err(Error::InvalidConfig("weight_scale must be positive".into()));
        }
        if !(self.qk_bias >= 0.0 && self.qk_bias.is_finite()) {
            return Err(Error::InvalidConfig("qk_bias must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self::toy(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// `hidden × (h_q·d)`
    pub wq: Matrix,
    /// `hidden × (h_kv·d)`
    pub wk: Matrix,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    /// `(h_q·d) × hidden`
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    /// `hidden × 4·hidden`
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub unembed: Matrix,
}

const RMS_EPS: f64 = 1e-6;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn build_toy_model(config: &ToyModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let s = config.shape;
    let h = config.hidden;
    let (qd, kvd, ff) = (
        s.num_q_heads * s.head_dim,
        s.num_kv_heads * s.head_dim,
        4 * h,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 0));
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let embed = gaussian(&mut rng, config.vocab, h, 1.0);
    let layers = (0..s.num_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; h],
            wq: gaussian(&mut rng, h, qd, config.weight_scale * fan(h)),
            wk: gaussian(&mut rng, h, kvd, config.weight_scale * fan(h)),
            bq: gaussian(&mut rng, 1, qd, config.qk_bias).into_vec(),
            bk: gaussian(&mut rng, 1, kvd, config.qk_bias).into_vec(),
            wv: gaussian(&mut rng, h, kvd, fan(h)),
            wo: gaussian(&mut rng, qd, h, fan(qd)),
            ffn_norm: vec![1.0; h],
            w1: gaussian(&mut rng, h, ff, fan(h)),
            w2: gaussian(&mut rng, ff, h, fan(ff)),
        })
        .collect();
    let unembed = gaussian(&mut rng, h, config.vocab, fan(h));
    Ok(ToyModel {
        config: config.clone(),
        embed,
        layers,
        final_norm: vec![1.0; h],
        unembed,
    })
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// Row vector times matrix.
fn vecmat(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wij;
            }
        }
    }
    out
}

fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut out = vecmat(x, w);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn ffn(layer: &LayerWeights, x: &[f64]) -> Vec<f64> {
    let f = rms_norm(x, &layer.ffn_norm);
    let inner: Vec<f64> = vecmat(&f, &layer.w1).into_iter().map(silu).collect();
    vecmat(&inner, &layer.w2)
}

/// Growable key/value rows of one KV head during decoding.
#[derive(Debug, Clone)]
struct GrowKv {
    keys: Vec<f64>,
    values: Vec<f64>,
    d: usize,
}

impl GrowKv {
    fn from_rows(rows: &KvRows) -> Self {
        Self {
            keys: rows.keys.as_slice().to_vec(),
            values: rows.values.as_slice().to_vec(),
            d: rows.keys.cols(),
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.d
    }

    fn push(&mut self, k: &[f64], v: &[f64]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }
}

/// Everything one decode step produces.
struct StepOutput {
    logits: Vec<f64>,
    /// Post-residual hidden state after each block.
    hidden: Vec<Vec<f64>>,
    /// `[layer][q_head]` RoPE-encoded query.
    queries: Vec<Vec<Vec<f64>>>,
}

/// Teacher-forced decode results.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// `T × vocab`
    pub logits: Matrix,
    /// Per layer, `T × hidden`.
    pub hidden: Vec<Matrix>,
    /// `[layer][q_head]`, `T × d`.
    pub queries: Vec<Vec<Matrix>>,
}

impl ToyModel {
    pub fn shape(&self) -> ModelShape {
        self.config.shape
    }

    fn check_token(&self, t: u32) -> Result<()> {
        if t as usize >= self.config.vocab {
            return Err(Error::IndexOutOfRange {
                index: t as usize,
                len: self.config.vocab,
            });
        }
        Ok(())
    }

    /// One token through every layer, attending over `state` plus itself.
    fn step(&self, state: &mut [Vec<GrowKv>], token: u32, position: usize) -> Result<StepOutput> {
        self.check_token(token)?;
        let s = self.shape();
        let d = s.head_dim;
        let g = s.group_size();
        let scale = 1.0 / (d as f64).sqrt();
        let rope = &self.config.rope;
        let mut x = self.embed.row(token as usize).to_vec();
        let mut hidden = Vec::with_capacity(s.num_layers);
        let mut queries = Vec::with_capacity(s.num_layers);

        for (layer, heads) in self.layers.iter().zip(state.iter_mut()) {
            let a = rms_norm(&x, &layer.attn_norm);
            let mut q = affine(&a, &layer.wq, &layer.bq);
            let mut k = affine(&a, &layer.wk, &layer.bk);
            let v = vecmat(&a, &layer.wv);
            for chunk in q.chunks_mut(d).chain(k.chunks_mut(d)) {
                rope.apply_in_place(chunk, position)?;
            }
            for (j, head) in heads.iter_mut().enumerate() {
                head.push(&k[j * d..(j + 1) * d], &v[j * d..(j + 1) * d]);
            }
            let mut attn = vec![0.0; s.num_q_heads * d];
            let mut scores = Vec::new();
            let mut probs = Vec::new();
            for hq in 0..s.num_q_heads {
                let head = &heads[hq / g];
                let qh = &q[hq * d..(hq + 1) * d];
                let n = head.len();
                scores.resize(n, 0.0);
                probs.resize(n, 0.0);
                for (r, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(qh, &head.keys[r * d..(r + 1) * d]) * scale;
                }
                softmax_into(&scores, &mut probs);
                let out = &mut attn[hq * d..(hq + 1) * d];
                for (r, &p) in probs.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&head.values[r * d..(r + 1) * d]) {
                        *o += p * vv;
                    }
                }
            }
            let o = vecmat(&attn, &layer.wo);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let f = ffn(layer, &x);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
            hidden.push(x.clone());
            queries.push(q.chunks(d).map(<[f64]>::to_vec).collect());
        }
        let logits = vecmat(&rms_norm(&x, &self.final_norm), &self.unembed);
        Ok(StepOutput {
            logits,
            hidden,
            queries,
        })
    }

    fn empty_state(&self) -> Vec<Vec<GrowKv>> {
        let s = self.shape();
        vec![
            vec![
                GrowKv {
                    keys: Vec::new(),
                    values: Vec::new(),
                    d: s.head_dim,
                };
                s.num_kv_heads
            ];
            s.num_layers
        ]
    }

    /// Full-sequence causal forward computing every projection up front;
    /// returns `len × vocab` logits.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig(
                "forward needs at least one token".into(),
            ));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let s = self.shape();
        let (d, n) = (s.head_dim, tokens.len());
        let rope = &self.config.rope;
        let mut x = Matrix::from_fn(n, self.config.hidden, |i, j| {
            self.embed.get(tokens[i] as usize, j)
        });
        for layer in &self.layers {
            let mut q_heads = vec![Matrix::zeros(n, d); s.num_q_heads];
            let mut k_heads = vec![Matrix::zeros(n, d); s.num_kv_heads];
            let mut v_heads = vec![Matrix::zeros(n, d); s.num_kv_heads];
            for i in 0..n {
                let a = rms_norm(x.row(i), &layer.attn_norm);
                let q = affine(&a, &layer.wq, &layer.bq);
                let k = affine(&a, &layer.wk, &layer.bk);
                let v = vecmat(&a, &layer.wv);
                for (h, qh) in q_heads.iter_mut().enumerate() {
                    qh.row_mut(i).copy_from_slice(&q[h * d..(h + 1) * d]);
                    rope.apply_in_place(qh.row_mut(i), i)?;
                }
                for h in 0..s.num_kv_heads {
                    k_heads[h]
                        .row_mut(i)
                        .copy_from_slice(&k[h * d..(h + 1) * d]);
                    rope.apply_in_place(k_heads[h].row_mut(i), i)?;
                    v_heads[h]
                        .row_mut(i)
                        .copy_from_slice(&v[h * d..(h + 1) * d]);
                }
            }
            let mut attn = Matrix::zeros(n, s.num_q_heads * d);
            for (hq, qh) in q_heads.iter().enumerate() {
                let kv = s.kv_head_of(hq);
                for i in 0..n {
                    let out = attend(
                        &qh.slice_rows(i, i + 1),
                        &k_heads[kv].slice_rows(0, i + 1),
                        &v_heads[kv].slice_rows(0, i + 1),
                        d,
                    )?;
                    attn.row_mut(i)[hq * d..(hq + 1) * d].copy_from_slice(out.output.row(0));
                }
            }
            for i in 0..n {
                let o = vecmat(attn.row(i), &layer.wo);
                let row = x.row_mut(i);
                for (xi, oi) in row.iter_mut().zip(&o) {
                    *xi += oi;
                }
                let f = ffn(layer, row);
                for (xi, fi) in row.iter_mut().zip(&f) {
                    *xi += fi;
                }
            }
        }
        let mut logits = Matrix::zeros(n, self.config.vocab);
        for i in 0..n {
            let l = vecmat(&rms_norm(x.row(i), &self.final_norm), &self.unembed);
            logits.row_mut(i).copy_from_slice(&l);
        }
        Ok(logits)
    }

    /// Runs the context through the model, recording post-RoPE keys, values
    /// and queries at positions `0..N`. Returns the cache and `N × vocab`
    /// logits.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(ModelKvCache, Matrix)> {
        if tokens.len() < 2 {
            return Err(Error::InvalidConfig(
                "prefill needs at least 2 tokens".into(),
            ));
        }
        let s = self.shape();
        let (n, d) = (tokens.len(), s.head_dim);
        let mut state = self.empty_state();
        let mut queries = vec![vec![Matrix::zeros(n, d); s.num_q_heads]; s.num_layers];
        let mut logits = Matrix::zeros(n, self.config.vocab);
        for (i, &t) in tokens.iter().enumerate() {
            let out = self.step(&mut state, t, i)?;
            logits.row_mut(i).copy_from_slice(&out.logits);
            for (l, qs) in out.queries.iter().enumerate() {
                for (h, q) in qs.iter().enumerate() {
                    queries[l][h].row_mut(i).copy_from_slice(q);
                }
            }
        }
        let positions: Vec<i64> = (0..n as i64).collect();
        let layers = state
            .into_iter()
            .zip(queries)
            .map(|(heads, queries)| {
                let kv_heads = heads
                    .into_iter()
                    .map(|h| {
                        HeadCache::new(
                            Matrix::from_vec(n, d, h.keys)?,
                            Matrix::from_vec(n, d, h.values)?,
                            positions.clone(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerKv { kv_heads, queries })
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = ModelKvCache {
            shape: s,
            rope: self.config.rope,
            positions,
            layers,
            reference: None,
            toy_model: Some(self.config.clone()),
        };
        Ok((cache, logits))
    }

    /// Feeds `tokens` at positions `start_position..` on top of `rows`,
    /// appending each step's own keys and values.
    pub fn decode_teacher_forced(
        &self,
        rows: &CacheRows,
        start_position: usize,
        tokens: &[u32],
    ) -> Result<DecodeOutput> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("decode needs T >= 1".into()));
        }
        let s = self.shape();
        if rows.len() != s.num_layers || rows.iter().any(|l| l.len() != s.num_kv_heads) {
            return Err(Error::DimensionMismatch("cache grid vs model shape".into()));
        }
        if rows.iter().flatten().any(|r| r.keys.cols() != s.head_dim) {
            return Err(Error::DimensionMismatch("cache head_dim vs model".into()));
        }
        let mut state: Vec<Vec<GrowKv>> = rows
            .iter()
            .map(|l| l.iter().map(GrowKv::from_rows).collect())
            .collect();
        let t_len = tokens.len();
        let mut logits = Matrix::zeros(t_len, self.config.vocab);
        let mut hidden = vec![Matrix::zeros(t_len, self.config.hidden); s.num_layers];
        let mut queries = vec![vec![Matrix::zeros(t_len, s.head_dim); s.num_q_heads]; s.num_layers];
        for (t, &tok) in tokens.iter().enumerate() {
            let out = self.step(&mut state, tok, start_position + t)?;
            logits.row_mut(t).copy_from_slice(&out.logits);
            for l in 0..s.num_layers {
                hidden[l].row_mut(t).copy_from_slice(&out.hidden[l]);
                for h in 0..s.num_q_heads {
                    queries[l][h].row_mut(t).copy_from_slice(&out.queries[l][h]);
                }
            }
        }
        Ok(DecodeOutput {
            logits,
            hidden,
            queries,
        })
    }

    /// Ancestral sampling of `len` tokens, seeded.
    pub fn sample_tokens(&self, len: usize, seed: u64) -> Result<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.empty_state();
        let mut tokens = Vec::with_capacity(len);
        if len == 0 {
            return Ok(tokens);
        }
        let mut tok = rng.random_range(0..self.config.vocab as u32);
        let mut probs = vec![0.0; self.config.vocab];
        for i in 0..len {
            tokens.push(tok);
            if i + 1 == len {
                break;
            }
            let out = self.step(&mut state, tok, i)?;
            softmax_into(&out.logits, &mut probs);
            let mut u: f64 = rng.random();
            tok = (self.config.vocab - 1) as u32;
            for (j, &p) in probs.iter().enumerate() {
                if u < p {
                    tok = j as u32;
                    break;
                }
                u -= p;
            }
        }
        Ok(tokens)
    }
}

/// Samples `context_len + continuation` tokens from the model, prefills the
/// context and records the full-cache continuation logits.
pub fn generate_toy_cache(
    config: &ToyModelConfig,
    context_len: usize,
    continuation: usize,
) -> Result<ModelKvCache> {
    if continuation == 0 {
        return Err(Error::InvalidConfig(
            "continuation length must be >= 1".into(),
        ));
    }
    let model = build_toy_model(config)?;
    let tokens = model.sample_tokens(context_len + continuation, stream_seed(config.seed, 1))?;
    let (mut cache, _) = model.prefill(&tokens[..context_len])?;
    let cont = tokens[context_len..].to_vec();
    let decoded = model.decode_teacher_forced(&cache.rows(), context_len, &cont)?;
    cache.reference = Some(ReferenceContinuation {
        tokens: cont,
        logits: Some(decoded.logits),
    });
    Ok(cache)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; row.len()];
    let lse = softmax_into(row, &mut p);
    row.iter().map(|x| x - lse).collect()
}

/// Per-row `KL(softmax(p) ‖ softmax(q))`.
pub fn kl_per_row(p_logits: &Matrix, q_logits: &Matrix) -> Result<Vec<f64>> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::DimensionMismatch(format!(
            "logits {:?} vs {:?}",
            p_logits.shape(),
            q_logits.shape()
        )));
    }
    Ok((0..p_logits.rows())
        .map(|i| {
            let lp = log_softmax(p_logits.row(i));
            let lq = log_softmax(q_logits.row(i));
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            kl.max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlStats {
    pub kl_mean: f64,
    pub kl_per_token: Vec<f64>,
    /// `max / mean`; 0 when the mean is 0.
    pub kl_max_over_mean: f64,
    /// Share of the total carried by the 5 largest tokens; 0 when the total is 0.
    pub kl_top5_fraction: f64,
}

pub fn kl_stats(per_token: Vec<f64>) -> Result<KlStats> {
    if per_token.is_empty() {
        return Err(Error::InvalidConfig("no tokens".into()));
    }
    if per_token.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("per-token KL"));
    }
    let total: f64 = per_token.iter().sum();
    let mean = total / per_token.len() as f64;
    let max = per_token.iter().copied().fold(0.0, f64::max);
    let mut sorted = per_token.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top5: f64 = sorted.iter().take(5).sum();
    Ok(KlStats {
        kl_mean: mean,
        kl_max_over_mean: if mean > 0.0 { max / mean } else { 0.0 },
        kl_top5_fraction: if total > 0.0 {
            (top5 / total).min(1.0)
        } else {
            0.0
        },
        kl_per_token: per_token,
    })
}

/// KL of the compressed-cache logits from the full-cache logits.
pub fn kl_report(logits_compressed: &Matrix, logits_full: &Matrix) -> Result<KlStats> {
    kl_stats(kl_per_row(logits_full, logits_compressed)?)
}

/// Per-layer hidden-state MSE between two decodes, averaged over steps.
pub fn layer_mse(full: &DecodeOutput, compressed: &DecodeOutput) -> Result<Vec<f64>> {
    if full.hidden.len() != compressed.hidden.len() {
        return Err(Error::DimensionMismatch("layer counts differ".into()));
    }
    full.hidden
        .iter()
        .zip(&compressed.hidden)
        .map(|(a, b)| {
            let diff = a.sub(b)?;
            Ok(diff.frobenius_sq() / (a.rows() * a.cols()) as f64)
        })
        .collect()
}

pub fn layer_error_profile(
    model: &ToyModel,
    full: &ModelKvCache,
    compressed: &CompressedCache,
    continuation: &[u32],
) -> Result<Vec<f64>> {
    let n = full.context_len();
    let a = model.decode_teacher_forced(&full.rows(), n, continuation)?;
    let b = model.decode_teacher_forced(&compressed.rows(), n, continuation)?;
    layer_mse(&a, &b)
}

/// Source of predicted future queries for [`attn_cosine_horizons`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FutureProxy {
    /// Content vectors chosen by a sampling strategy.
    Strategy {
        strategy: QueryStrategy,
        n_s: usize,
        seed: u64,
    },
    /// The true future query itself.
    Exact,
}

/// Cosine between the true attention row of each future query and the
/// prediction from the proxy, over the full cache.
///
/// For a strategy, the prediction at future position `p` is the mean
/// attention row of its content vectors rotated to `p`. Near covers offsets
/// `0..near_t`, far covers `far_t − near_t..far_t`; both average over layers,
/// query heads and offsets.
pub fn attn_cosine_horizons(
    cache: &ModelKvCache,
    future_queries: &[Vec<Matrix>],
    proxy: FutureProxy,
    near_t: usize,
    far_t: usize,
) -> Result<(f64, f64)> {
    if near_t == 0 || far_t == 0 || near_t > far_t {
        return Err(Error::InvalidConfig(format!(
            "horizons must satisfy 1 <= near ({near_t}) <= far ({far_t})"
        )));
    }
    let s = cache.shape;
    let n = cache.context_len();
    let d = s.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    if future_queries.len() != s.num_layers
        || future_queries
            .iter()
            .any(|l| l.len() != s.num_q_heads || l.iter().any(|q| q.rows() < far_t))
    {
        return Err(Error::DimensionMismatch(format!(
            "future queries must cover {far_t} steps for every layer and query head"
        )));
    }
    let rope = &cache.rope;

    let attention_row = |q: &[f64], keys: &Matrix, out: &mut [f64]| {
        let scores: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) * scale).collect();
        softmax_into(&scores, out);
    };

    let mut near_sum = 0.0;
    let mut far_sum = 0.0;
    let mut count = 0usize;
    for (l, layer) in cache.layers.iter().enumerate() {
        let contents: Option<Vec<Matrix>> = match proxy {
            FutureProxy::Strategy {
                strategy,
                n_s,
                seed,
            } => {
                let c = layer
                    .queries
                    .iter()
                    .map(|q| content_vectors(q, &cache.positions, rope))
                    .collect::<Result<Vec<_>>>()?;
                Some(sample_content(&c, n_s, strategy, stream_seed(seed, l))?)
            }
            FutureProxy::Exact => None,
        };
        for hq in 0..s.num_q_heads {
            let keys = &layer.kv_heads[s.kv_head_of(hq)].keys;
            let mut truth = vec![0.0; n];
            let mut pred = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            let mut cos_at = |t: usize| -> Result<f64> {
                let pos = n + t;
                attention_row(future_queries[l][hq].row(t), keys, &mut truth);
                pred.fill(0.0);
                match &contents {
                    Some(c) => {
                        let set = &c[hq];
                        for row in set.iter_rows() {
                            let mut q = row.to_vec();
                            rope.apply_in_place(&mut q, pos)?;
                            attention_row(&q, keys, &mut tmp);
                            for (p, t) in pred.iter_mut().zip(&tmp) {
                                *p += t;
                            }
                        }
                        let inv = 1.0 / set.rows().max(1) as f64;
                        pred.iter_mut().for_each(|p| *p *= inv);
                    }
                    None => {
                        let mut q = future_queries[l][hq].row(t).to_vec();
                        rope.invert_in_place(&mut q, pos)?;
                        rope.apply_in_place(&mut q, pos)?;
                        attention_row(&q, keys, &mut pred);
                    }
                }
                Ok(cosine(&truth, &pred))
            };
            let mut near = 0.0;
            let mut far = 0.0;
            for i in 0..near_t {
                near += cos_at(i)?;
                far += cos_at(far_t - near_t + i)?;
            }
            near_sum += near / near_t as f64;
            far_sum += far / near_t as f64;
            count += 1;
        }
    }
    Ok((near_sum / count as f64, far_sum / count as f64))
}

/// Static per-head difficulty from mean compress-zone value norms; an
/// ablation signal, not a selectable allocation policy.
pub fn value_norm_signal(cache: &ModelKvCache, retain: usize) -> Result<Vec<Vec<f64>>> {
    let n = cache.context_len();
    if retain == 0 || retain >= n {
        return Err(Error::InvalidRetain { m: retain, n });
    }
    Ok(cache
        .layers
        .iter()
        .map(|layer| {
            layer
                .kv_heads
                .iter()
                .map(|h| {
                    let rows = n - retain;
                    (0..rows)
                        .map(|i| crate::numkit::norm(h.values.row(i)))
                        .sum::<f64>()
                        / rows as f64
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kl_mean: f64,
    pub kl_per_token: Vec<f64>,
    pub layer_mse_profile: Vec<f64>,
    pub kl_max_over_mean: f64,
    pub kl_top5_fraction: f64,
    pub attn_cos_near: f64,
    pub attn_cos_far: f64,
    /// Last-layer over first-layer hidden MSE; 0 when the first layer is exact.
    pub layer_compounding: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub strategy: QueryStrategy,
    pub n_s: usize,
    pub near_t: usize,
    pub far_t: usize,
    pub seed: u64,
}

impl EvalOptions {
    /// Near horizon `T/4`, far horizon `T`.
    pub fn for_continuation(t: usize, n_s: usize, seed: u64) -> Self {
        Self {
            strategy: QueryStrategy::Uniform,
            n_s,
            near_t: (t / 4).max(1),
            far_t: t,
            seed,
        }
    }
}

/// Decodes the reference continuation under both caches and collects every
/// metric.
pub fn evaluate(
    model: &ToyModel,
    full: &ModelKvCache,
    compressed: &CompressedCache,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let reference = full
        .reference
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("full cache has no reference continuation".into()))?;
    if compressed.context_len != full.context_len() || compressed.shape != full.shape {
        return Err(Error::DimensionMismatch(
            "compressed cache does not match the full cache".into(),
        ));
    }
    let n = full.context_len();
    let a = model.decode_teacher_forced(&full.rows(), n, &reference.tokens)?;
    let b = model.decode_teacher_forced(&compressed.rows(), n, &reference.tokens)?;
    let kl = kl_report(&b.logits, &a.logits)?;
    let profile = layer_mse(&a, &b)?;
    let n_s = options.n_s.min(n);
    let (near, far) = attn_cosine_horizons(
        full,
        &a.queries,
        FutureProxy::Strategy {
            strategy: options.strategy,
            n_s,
            seed: options.seed,
        },
        options.near_t,
        options.far_t.min(reference.tokens.len()),
    )?;
    let first = profile.first().copied().unwrap_or(0.0);
    let last = profile.last().copied().unwrap_or(0.0);
    Ok(EvalReport {
        kl_mean: kl.kl_mean,
        kl_per_token: kl.kl_per_token,
        layer_mse_profile: profile,
        kl_max_over_mean: kl.kl_max_over_mean,
        kl_top5_fraction: kl.kl_top5_fraction,
        attn_cos_near: near,
        attn_cos_far: far,
        layer_compounding: if first > 0.0 { last / first } else { 0.0 },
    })
}
