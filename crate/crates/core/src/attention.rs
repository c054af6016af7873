//! Multi-head attention and compositional attention.
//!
//! Both variants are written in terms of two separable stages:
//!
//! * **search**: a query-key softmax over the tokens, one per search
//!   (or head), producing an `N×N` weighting;
//! * **retrieval**: a value projection read out through a search.
//!
//! Multi-head attention pairs search `i` rigidly with retrieval `i`.
//! Compositional attention runs every search against every one of `R`
//! shared retrievals and lets a second, per-token softmax (the *value
//! scores*) pick a soft mixture of retrievals for each search.
//!
//! Inputs are `[N, d]` or batched `[B, N, d]`.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, Linear};
use crate::rng::Rng;
use crate::tensor::{Mask, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MultiHead,
    CompositionalDot,
    CompositionalMlp,
}

impl Variant {
    pub fn is_compositional(self) -> bool {
        !matches!(self, Variant::MultiHead)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: Variant,
    /// Model width.
    pub d: usize,
    /// Query/key width of each search.
    pub d_k: usize,
    /// Value width of each retrieval.
    pub d_v: usize,
    /// Retrieval query/key width (compositional only).
    pub d_r: usize,
    /// Heads for multi-head, searches for compositional.
    pub searches: usize,
    /// Shared retrievals; ignored for multi-head.
    pub retrievals: usize,
    #[serde(default)]
    pub mask_diagonal: bool,
    #[serde(default)]
    pub bias: bool,
    /// Dropout on the search weights during training.
    #[serde(default)]
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [("d", self.d), ("d_k", self.d_k), ("d_v", self.d_v), ("d_r", self.d_r)];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::contract(format!("attention width {name} must be positive")));
        }
        if self.searches == 0 {
            return Err(Error::contract("attention needs at least one search/head"));
        }
        if self.variant.is_compositional() && self.retrievals == 0 {
            return Err(Error::contract("compositional attention needs at least one retrieval"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Number of value projections: `h` for multi-head, `R` otherwise.
    pub fn value_count(&self) -> usize {
        match self.variant {
            Variant::MultiHead => self.searches,
            _ => self.retrievals,
        }
    }
}

/// Projection weights of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// Per search: `d×d_k`.
    pub query: Vec<Linear>,
    /// Per search: `d×d_k`.
    pub key: Vec<Linear>,
    /// Per retrieval (per head for multi-head): `d×d_v`.
    pub value: Vec<Linear>,
    /// `(S·d_v)×d`.
    pub output: Linear,
    /// Compositional-dot, per search: `d×d_r`.
    pub retrieval_query: Vec<Linear>,
    /// Compositional-dot, shared across searches: `d_v×d_r`.
    pub retrieval_key: Option<Linear>,
    /// Compositional-MLP, per search: token half of the linear scorer, `d×1`.
    pub score_query: Vec<Linear>,
    /// Compositional-MLP, per search: retrieval half of the scorer, `d_v×1`.
    pub score_key: Vec<Linear>,
}

impl AttentionWeights {
    pub fn init(config: &AttentionConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut query = Vec::with_capacity(c.searches);
        let mut key = Vec::with_capacity(c.searches);
        for i in 0..c.searches {
            query.push(Linear::new(
                store,
                &format!("{prefix}.search.{i}.query"),
                c.d,
                c.d_k,
                c.bias,
                rng,
            )?);
            key.push(Linear::new(
                store,
                &format!("{prefix}.search.{i}.key"),
                c.d,
                c.d_k,
                c.bias,
                rng,
            )?);
        }
        let value = (0..c.value_count())
            .map(|j| Linear::new(store, &format!("{prefix}.retrieval.{j}.value"), c.d, c.d_v, c.bias, rng))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(store, &format!("{prefix}.output"), c.searches * c.d_v, c.d, c.bias, rng)?;

        let mut w = AttentionWeights {
            query,
            key,
            value,
            output,
            retrieval_query: Vec::new(),
            retrieval_key: None,
            score_query: Vec::new(),
            score_key: Vec::new(),
        };
        match c.variant {
            Variant::MultiHead => {}
            Variant::CompositionalDot => {
                for i in 0..c.searches {
                    w.retrieval_query.push(Linear::new(
                        store,
                        &format!("{prefix}.search.{i}.retrieval_query"),
                        c.d,
                        c.d_r,
                        c.bias,
                        rng,
                    )?);
                }
                w.retrieval_key = Some(Linear::new(
                    store,
                    &format!("{prefix}.retrieval_key"),
                    c.d_v,
                    c.d_r,
                    c.bias,
                    rng,
                )?);
            }
            Variant::CompositionalMlp => {
                // The scorer is linear, so a bias would cancel in the softmax.
                for i in 0..c.searches {
                    w.score_query.push(Linear::new(
                        store,
                        &format!("{prefix}.search.{i}.score_query"),
                        c.d,
                        1,
                        false,
                        rng,
                    )?);
                    w.score_key.push(Linear::new(
                        store,
                        &format!("{prefix}.search.{i}.score_key"),
                        c.d_v,
                        1,
                        false,
                        rng,
                    )?);
                }
            }
        }
        Ok(w)
    }

    fn check(&self, config: &AttentionConfig) -> Result<()> {
        let bad = |what: &str| Error::contract(format!("attention weights do not match config: {what}"));
        if self.query.len() != config.searches || self.key.len() != config.searches {
            return Err(bad("search count"));
        }
        if self.value.len() != config.value_count() {
            return Err(bad("retrieval count"));
        }
        let ok = self
            .query
            .iter()
            .chain(&self.key)
            .all(|l| l.fan_in() == config.d && l.fan_out() == config.d_k)
            && self
                .value
                .iter()
                .all(|l| l.fan_in() == config.d && l.fan_out() == config.d_v)
            && self.output.fan_in() == config.searches * config.d_v
            && self.output.fan_out() == config.d;
        if !ok {
            return Err(bad("projection shapes"));
        }
        match config.variant {
            Variant::MultiHead => Ok(()),
            Variant::CompositionalDot => {
                let rk = self
                    .retrieval_key
                    .as_ref()
                    .ok_or_else(|| bad("missing retrieval key"))?;
                let ok = self.retrieval_query.len() == config.searches
                    && self
                        .retrieval_query
                        .iter()
                        .all(|l| l.fan_in() == config.d && l.fan_out() == config.d_r)
                    && rk.fan_in() == config.d_v
                    && rk.fan_out() == config.d_r;
                if ok {
                    Ok(())
                } else {
                    Err(bad("retrieval query/key shapes"))
                }
            }
            Variant::CompositionalMlp => {
                let ok = self.score_query.len() == config.searches
                    && self.score_key.len() == config.searches
                    && self
                        .score_query
                        .iter()
                        .all(|l| l.fan_in() == config.d && l.fan_out() == 1)
                    && self
                        .score_key
                        .iter()
                        .all(|l| l.fan_in() == config.d_v && l.fan_out() == 1);
                if ok {
                    Ok(())
                } else {
                    Err(Error::dim(
                        "value_scores_mlp",
                        &[config.d + config.d_v, 1],
                        &[
                            self.score_query.first().map_or(0, Linear::fan_in)
                                + self.score_key.first().map_or(0, Linear::fan_in),
                            1,
                        ],
                    ))
                }
            }
        }
    }
}

/// Activations recorded during one forward pass, for analysis.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub batch: usize,
    pub tokens: usize,
    pub searches: usize,
    pub retrievals: usize,
    /// `[batch, searches, tokens, tokens]`, post-softmax.
    pub search_weights: Vec<f64>,
    /// `[batch, tokens, searches, retrievals]`, post-softmax; `None` for
    /// multi-head, whose pairing is the fixed identity.
    value_scores: Option<Vec<f64>>,
    /// `[batch, tokens, d]`.
    pub output: Vec<f64>,
}

impl AttentionTrace {
    /// Assembles a trace from raw buffers, checking their lengths.
    pub fn from_parts(
        batch: usize,
        tokens: usize,
        searches: usize,
        retrievals: usize,
        search_weights: Vec<f64>,
        value_scores: Option<Vec<f64>>,
        output: Vec<f64>,
    ) -> Result<Self> {
        if search_weights.len() != batch * searches * tokens * tokens {
            return Err(Error::contract(
                "search weights do not match [batch, searches, tokens, tokens]",
            ));
        }
        if let Some(v) = &value_scores {
            if v.len() != batch * tokens * searches * retrievals {
                return Err(Error::contract(
                    "value scores do not match [batch, tokens, searches, retrievals]",
                ));
            }
        } else if searches != retrievals {
            return Err(Error::contract(
                "an implicit identity pairing needs as many retrievals as searches",
            ));
        }
        Ok(AttentionTrace {
            batch,
            tokens,
            searches,
            retrievals,
            search_weights,
            value_scores,
            output,
        })
    }

    /// True when the value scores are the implicit multi-head identity.
    pub fn implicit_identity(&self) -> bool {
        self.value_scores.is_none()
    }

    /// `[batch, tokens, searches, retrievals]` value scores, materialising
    /// the identity pairing for multi-head traces.
    pub fn value_scores(&self) -> Cow<'_, [f64]> {
        match &self.value_scores {
            Some(v) => Cow::Borrowed(v),
            None => {
                let (s, r) = (self.searches, self.retrievals);
                let mut v = vec![0.0; self.batch * self.tokens * s * r];
                for (k, cell) in v.iter_mut().enumerate() {
                    if (k / r) % s == k % r {
                        *cell = 1.0;
                    }
                }
                Cow::Owned(v)
            }
        }
    }

    pub fn search_row(&self, batch: usize, search: usize, token: usize) -> &[f64] {
        let n = self.tokens;
        let start = ((batch * self.searches + search) * n + token) * n;
        &self.search_weights[start..start + n]
    }

    pub fn score_row(&self, batch: usize, token: usize, search: usize) -> Vec<f64> {
        let r = self.retrievals;
        let start = ((batch * self.tokens + token) * self.searches + search) * r;
        self.value_scores()[start..start + r].to_vec()
    }
}

/// Leading shape of `x` as `(batch, tokens)`; 2-D inputs count as batch 1.
fn batch_dims(x: &Tensor, d: usize) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, w] if w == d => Ok((1, n)),
        [b, n, w] if w == d => Ok((b, n)),
        _ => Err(Error::dim("attention input", x.shape(), &[0, d])),
    }
}

/// `Softmax((X Wq)(X Wk)ᵀ · scale)` over the key axis, diagonal excluded
/// when masked. `[.., N, d] → [.., N, N]`.
pub fn search(x: &Tensor, query: &Linear, key: &Linear, scale: f64, mask_diagonal: bool) -> Result<Tensor> {
    let n = x.shape()[x.rank().saturating_sub(2)];
    if mask_diagonal && n < 2 {
        return Err(Error::DegenerateSlice {
            axis: x.rank() - 1,
            slice: 0,
        });
    }
    let q = query.forward(x)?;
    let k = key.forward(x)?;
    let logits = q.matmul(&k.transpose_last2()?)?.scale(scale);
    let mask = mask_diagonal.then(|| Mask::off_diagonal(n));
    logits.softmax(logits.rank() - 1, mask.as_ref())
}

/// Every search read through every retrieval: for search `i` returns
/// `[B, N, R, d_v]` holding `Retrieval_ij = Search_i · (X W_vj)` at `[.., j, ..]`.
pub fn retrieve_all(searches: &[Tensor], x: &Tensor, value: &[Linear]) -> Result<Vec<Tensor>> {
    let r = value.len();
    let d_v = value
        .first()
        .ok_or_else(|| Error::contract("retrieve_all needs at least one value projection"))?
        .fan_out();
    if value.iter().any(|v| v.fan_out() != d_v) {
        return Err(Error::contract("all value projections must share d_v"));
    }
    // All R value projections side by side: [.., N, R·d_v]. Row-major, this
    // is already the [.., N, R, d_v] layout of the result.
    let values = if value.iter().all(|v| v.bias.is_none()) {
        let weights: Vec<Tensor> = value.iter().map(|v| v.weight.clone()).collect();
        x.matmul(&Tensor::concat(&weights, 1)?)?
    } else {
        let parts = value.iter().map(|v| v.forward(x)).collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts, x.rank() - 1)?
    };
    searches
        .iter()
        .map(|s| {
            let joined = s.matmul(&values)?;
            let mut shape = joined.shape().to_vec();
            shape.pop();
            shape.extend([r, d_v]);
            joined.reshape(&shape)
        })
        .collect()
}

/// Dot-product value scores: per token and search, a softmax over the
/// retrievals of `(X W̄q_i) · (Retrieval_ij W̄k) / √d_r`. Each result is
/// `[B, N, R]`.
pub fn value_scores_dot(
    x: &Tensor,
    retrievals: &[Tensor],
    retrieval_query: &[Linear],
    retrieval_key: &Linear,
) -> Result<Vec<Tensor>> {
    let d_r = retrieval_key.fan_out();
    if retrieval_query.len() != retrievals.len() {
        return Err(Error::contract("one retrieval query per search is required"));
    }
    retrievals
        .iter()
        .zip(retrieval_query)
        .map(|(ret, rq)| {
            let sh = ret.shape().to_vec();
            let r = sh[sh.len() - 2];
            if r == 0 {
                return Err(Error::contract("value scores need at least one retrieval"));
            }
            let q = rq.forward(x)?;
            let logits = if retrieval_key.bias.is_none() {
                // (Ret W̄k)·Q̄ == Ret·(W̄k Q̄): project the query once per
                // token instead of projecting every retrieval.
                let qk = q.matmul(&retrieval_key.weight.transpose_last2()?)?;
                let mut s = qk.shape().to_vec();
                s.push(1);
                ret.matmul(&qk.reshape(&s)?)?
            } else {
                let mut qs = q.shape().to_vec();
                qs.push(1);
                retrieval_key.forward(ret)?.matmul(&q.reshape(&qs)?)?
            };
            let logits = logits.reshape(&sh[..sh.len() - 1])?.scale(1.0 / (d_r as f64).sqrt());
            logits.softmax(logits.rank() - 1, None)
        })
        .collect()
}

/// Linear-scorer value scores: logit `w_x·x_n + w_r·Retrieval_ij[n]`,
/// softmax over `j`.
pub fn value_scores_mlp(
    x: &Tensor,
    retrievals: &[Tensor],
    score_query: &[Linear],
    score_key: &[Linear],
) -> Result<Vec<Tensor>> {
    if score_query.len() != retrievals.len() || score_key.len() != retrievals.len() {
        return Err(Error::contract("one linear scorer per search is required"));
    }
    retrievals
        .iter()
        .zip(score_query.iter().zip(score_key))
        .map(|(ret, (sq, sk))| {
            let sh = ret.shape().to_vec();
            let d_v = sh[sh.len() - 1];
            if sk.fan_in() != d_v || sq.fan_in() != x.shape()[x.rank() - 1] {
                return Err(Error::dim(
                    "value_scores_mlp",
                    &[x.shape()[x.rank() - 1] + d_v, 1],
                    &[sq.fan_in() + sk.fan_in(), 1],
                ));
            }
            let token_part = sq.forward(x)?;
            let ret_part = sk.forward(ret)?.reshape(&sh[..sh.len() - 1])?;
            let logits = ret_part.add(&token_part)?;
            logits.softmax(logits.rank() - 1, None)
        })
        .collect()
}

/// Standard multi-head attention: `Concat(head_1..head_h) W^o` with
/// `head_i = Search_i · (X W_vi)`.
pub fn multi_head_attention(
    x: &Tensor,
    weights: &AttentionWeights,
    config: &AttentionConfig,
) -> Result<(Tensor, AttentionTrace)> {
    if config.variant != Variant::MultiHead {
        return Err(Error::contract(
            "multi_head_attention called with a compositional config",
        ));
    }
    forward(x, weights, config, None, None)
}

/// Compositional attention with learned value scores.
pub fn compositional_attention(
    x: &Tensor,
    weights: &AttentionWeights,
    config: &AttentionConfig,
) -> Result<(Tensor, AttentionTrace)> {
    if !config.variant.is_compositional() {
        return Err(Error::contract(
            "compositional_attention called with a multi-head config",
        ));
    }
    forward(x, weights, config, None, None)
}

/// Compositional attention with the value-score softmax replaced by a
/// fixed `S×R` matrix shared by every token.
pub fn compositional_attention_with_scores(
    x: &Tensor,
    weights: &AttentionWeights,
    config: &AttentionConfig,
    scores: &[f64],
) -> Result<(Tensor, AttentionTrace)> {
    if !config.variant.is_compositional() {
        return Err(Error::contract("score override needs a compositional config"));
    }
    if scores.len() != config.searches * config.retrievals {
        return Err(Error::dim(
            "score override",
            &[scores.len()],
            &[config.searches, config.retrievals],
        ));
    }
    forward(x, weights, config, Some(scores), None)
}

/// Variant dispatch. With `train_rng`, dropout is applied to the search
/// weights (the trace records them before dropout).
pub fn attention(
    x: &Tensor,
    weights: &AttentionWeights,
    config: &AttentionConfig,
    train_rng: Option<&mut Rng>,
) -> Result<(Tensor, AttentionTrace)> {
    forward(x, weights, config, None, train_rng)
}

fn forward(
    x: &Tensor,
    weights: &AttentionWeights,
    config: &AttentionConfig,
    fixed_scores: Option<&[f64]>,
    train_rng: Option<&mut Rng>,
) -> Result<(Tensor, AttentionTrace)> {
    config.validate()?;
    weights.check(config)?;
    let (batch, n) = batch_dims(x, config.d)?;
    let input_shape = x.shape().to_vec();
    let x = x.reshape(&[batch, n, config.d])?;
    let s_count = config.searches;
    let scale = 1.0 / (config.d_k as f64).sqrt();

    let mut searches = Vec::with_capacity(s_count);
    let mut search_trace = Vec::with_capacity(batch * s_count * n * n);
    for i in 0..s_count {
        let s = search(&x, &weights.query[i], &weights.key[i], scale, config.mask_diagonal)?;
        searches.push(s);
    }
    // [B, S, N, N] layout for the trace.
    for b in 0..batch {
        for s in &searches {
            search_trace.extend_from_slice(&s.data()[b * n * n..(b + 1) * n * n]);
        }
    }
    if let Some(rng) = train_rng {
        if config.dropout > 0.0 {
            searches = searches
                .iter()
                .map(|s| dropout(s, config.dropout, rng))
                .collect::<Result<Vec<_>>>()?;
        }
    }

    let (heads, value_scores) = match config.variant {
        Variant::MultiHead => {
            let heads = searches
                .iter()
                .zip(&weights.value)
                .map(|(s, v)| s.matmul(&v.forward(&x)?))
                .collect::<Result<Vec<_>>>()?;
            (heads, None)
        }
        Variant::CompositionalDot | Variant::CompositionalMlp => {
            let r_count = config.retrievals;
            let retrievals = retrieve_all(&searches, &x, &weights.value)?;
            let scores = match fixed_scores {
                Some(fixed) => fixed
                    .chunks(r_count)
                    .map(|row| {
                        let data: Vec<f64> = row.iter().copied().cycle().take(batch * n * r_count).collect();
                        Tensor::from_vec(&[batch, n, r_count], data)
                    })
                    .collect::<Result<Vec<_>>>()?,
                None if config.variant == Variant::CompositionalDot => {
                    let rk = weights.retrieval_key.as_ref().expect("checked above");
                    value_scores_dot(&x, &retrievals, &weights.retrieval_query, rk)?
                }
                None => value_scores_mlp(&x, &retrievals, &weights.score_query, &weights.score_key)?,
            };
            let mut trace = vec![0.0; batch * n * s_count * r_count];
            for (i, sc) in scores.iter().enumerate() {
                let d = sc.data();
                for bn in 0..batch * n {
                    let dst = (bn * s_count + i) * r_count;
                    trace[dst..dst + r_count].copy_from_slice(&d[bn * r_count..(bn + 1) * r_count]);
                }
            }
            let heads = scores
                .iter()
                .zip(&retrievals)
                .map(|(sc, ret)| {
                    let mixed = sc.reshape(&[batch, n, 1, r_count])?.matmul(ret)?;
                    mixed.reshape(&[batch, n, config.d_v])
                })
                .collect::<Result<Vec<_>>>()?;
            (heads, Some(trace))
        }
    };

    let joined = Tensor::concat(&heads, 2)?;
    let out = weights.output.forward(&joined)?;
    let trace = AttentionTrace {
        batch,
        tokens: n,
        searches: s_count,
        retrievals: config.value_count(),
        search_weights: search_trace,
        value_scores,
        output: out.to_vec(),
    };
    let out = out.reshape(&input_shape)?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn config(variant: Variant, d: usize, dk: usize, s: usize, r: usize, mask: bool) -> AttentionConfig {
        AttentionConfig {
            variant,
            d,
            d_k: dk,
            d_v: dk,
            d_r: dk,
            searches: s,
            retrievals: r,
            mask_diagonal: mask,
            bias: false,
            dropout: 0.0,
        }
    }

    fn random_x(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn mat(t: &Tensor) -> Vec<Vec<f64>> {
        let c = t.shape()[1];
        t.to_vec().chunks(c).map(<[f64]>::to_vec).collect()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut c = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        c
    }

    fn softmax_row(logits: &[f64], keep: impl Fn(usize) -> bool) -> Vec<f64> {
        let z: f64 = (0..logits.len()).filter(|&j| keep(j)).map(|j| logits[j].exp()).sum();
        (0..logits.len())
            .map(|j| if keep(j) { logits[j].exp() / z } else { 0.0 })
            .collect()
    }

    /// Direct loop evaluation of one search (no max-shift, no batching).
    fn search_oracle(x: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], mask: bool) -> Vec<Vec<f64>> {
        let q = matmul(x, wq);
        let k = matmul(x, wk);
        let dk = wq[0].len() as f64;
        (0..x.len())
            .map(|i| {
                let logits: Vec<f64> = (0..x.len())
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                    .collect();
                softmax_row(&logits, |j| !mask || j != i)
            })
            .collect()
    }

    /// Triple-loop compositional attention, written from the equations.
    fn compositional_oracle(x: &[Vec<f64>], w: &AttentionWeights, c: &AttentionConfig) -> Vec<Vec<f64>> {
        let n = x.len();
        let searches: Vec<_> = (0..c.searches)
            .map(|i| search_oracle(x, &mat(&w.query[i].weight), &mat(&w.key[i].weight), c.mask_diagonal))
            .collect();
        let values: Vec<_> = w.value.iter().map(|v| matmul(x, &mat(&v.weight))).collect();
        let mut concat = vec![Vec::new(); n];
        for i in 0..c.searches {
            let ret: Vec<Vec<Vec<f64>>> = values.iter().map(|v| matmul(&searches[i], v)).collect();
            for t in 0..n {
                let logits: Vec<f64> = (0..c.retrievals)
                    .map(|j| match c.variant {
                        Variant::CompositionalDot => {
                            let qb = matmul(&[x[t].clone()], &mat(&w.retrieval_query[i].weight))[0].clone();
                            let kb = matmul(&[ret[j][t].clone()], &mat(&w.retrieval_key.as_ref().unwrap().weight))[0]
                                .clone();
                            qb.iter().zip(&kb).map(|(a, b)| a * b).sum::<f64>() / (c.d_r as f64).sqrt()
                        }
                        _ => {
                            let wq = w.score_query[i].weight.to_vec();
                            let wk = w.score_key[i].weight.to_vec();
                            x[t].iter().zip(&wq).map(|(a, b)| a * b).sum::<f64>()
                                + ret[j][t].iter().zip(&wk).map(|(a, b)| a * b).sum::<f64>()
                        }
                    })
                    .collect();
                let sc = softmax_row(&logits, |_| true);
                for e in 0..c.d_v {
                    concat[t].push((0..c.retrievals).map(|j| sc[j] * ret[j][t][e]).sum());
                }
            }
        }
        matmul(&concat, &mat(&w.output.weight))
    }

    fn setup(c: &AttentionConfig, seed: u64) -> (AttentionWeights, ParamStore, Rng) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let w = AttentionWeights::init(c, &mut store, "attn", &mut rng).unwrap();
        (w, store, rng)
    }

    #[test]
    fn zero_search_weights_give_uniform_rows() {
        let c = config(Variant::MultiHead, 4, 2, 1, 1, false);
        let (w, _, mut rng) = setup(&c, 1);
        w.query[0].weight.data_mut().fill(0.0);
        let x = random_x(&mut rng, &[5, 4]);
        let s = search(&x, &w.query[0], &w.key[0], 1.0, false).unwrap();
        assert!(s.to_vec().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let s = search(&x, &w.query[0], &w.key[0], 1.0, true).unwrap().to_vec();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 0.0 } else { 0.25 };
                assert!((s[i * 5 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn search_matches_formula_oracle() {
        let c = config(Variant::MultiHead, 4, 3, 1, 1, true);
        let (w, _, mut rng) = setup(&c, 2);
        let x = random_x(&mut rng, &[3, 4]);
        let got = search(&x, &w.query[0], &w.key[0], 1.0 / 3f64.sqrt(), true)
            .unwrap()
            .to_vec();
        let want = search_oracle(&mat(&x), &mat(&w.query[0].weight), &mat(&w.key[0].weight), true);
        for i in 0..3 {
            assert_eq!(got[i * 3 + i], 0.0);
            for j in 0..3 {
                assert_relative_eq!(got[i * 3 + j], want[i][j], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn search_is_permutation_equivariant() {
        let c = config(Variant::MultiHead, 4, 3, 1, 1, true);
        let (w, _, mut rng) = setup(&c, 3);
        let x = random_x(&mut rng, &[4, 4]);
        let perm = [2, 0, 3, 1];
        let xv = x.to_vec();
        let px: Vec<f64> = perm.iter().flat_map(|&p| xv[p * 4..p * 4 + 4].to_vec()).collect();
        let px = Tensor::from_vec(&[4, 4], px).unwrap();
        let a = search(&x, &w.query[0], &w.key[0], 0.5, true).unwrap().to_vec();
        let b = search(&px, &w.query[0], &w.key[0], 0.5, true).unwrap().to_vec();
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(b[i * 4 + j], a[perm[i] * 4 + perm[j]], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn masked_search_on_single_token_is_degenerate() {
        let c = config(Variant::MultiHead, 4, 2, 1, 1, true);
        let (w, _, mut rng) = setup(&c, 4);
        let x = random_x(&mut rng, &[1, 4]);
        assert!(matches!(
            search(&x, &w.query[0], &w.key[0], 1.0, true),
            Err(Error::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn multi_head_single_head_collapse() {
        let c = config(Variant::MultiHead, 3, 3, 1, 1, false);
        let (w, _, mut rng) = setup(&c, 5);
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        w.output.weight.data_mut().copy_from_slice(&eye);
        let x = random_x(&mut rng, &[4, 3]);
        let (out, trace) = multi_head_attention(&x, &w, &c).unwrap();
        let s = search_oracle(&mat(&x), &mat(&w.query[0].weight), &mat(&w.key[0].weight), false);
        let want = matmul(&s, &matmul(&mat(&x), &mat(&w.value[0].weight)));
        for (g, e) in out.to_vec().iter().zip(want.iter().flatten()) {
            assert_relative_eq!(*g, *e, epsilon = 1e-13);
        }
        assert!(trace.implicit_identity());
        assert_eq!(trace.value_scores().as_ref(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn multi_head_matches_loop_oracle() {
        let c = config(Variant::MultiHead, 4, 2, 2, 0, true);
        let (w, _, mut rng) = setup(&c, 6);
        let x = random_x(&mut rng, &[3, 4]);
        let (out, _) = multi_head_attention(&x, &w, &c).unwrap();
        let xm = mat(&x);
        let mut concat = vec![Vec::new(); 3];
        for h in 0..2 {
            let s = search_oracle(&xm, &mat(&w.query[h].weight), &mat(&w.key[h].weight), true);
            let head = matmul(&s, &matmul(&xm, &mat(&w.value[h].weight)));
            for t in 0..3 {
                concat[t].extend(&head[t]);
            }
        }
        let want = matmul(&concat, &mat(&w.output.weight));
        for (g, e) in out.to_vec().iter().zip(want.iter().flatten()) {
            assert_relative_eq!(*g, *e, epsilon = 1e-13);
        }
    }

    #[test]
    fn zero_values_annihilate() {
        let c = config(Variant::MultiHead, 4, 2, 2, 0, false);
        let (w, _, mut rng) = setup(&c, 7);
        for v in &w.value {
            v.weight.data_mut().fill(0.0);
        }
        let (out, _) = multi_head_attention(&random_x(&mut rng, &[3, 4]), &w, &c).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_identity_layout_for_multi_head() {
        let c = config(Variant::MultiHead, 4, 2, 3, 0, false);
        let (w, _, mut rng) = setup(&c, 8);
        let (_, trace) = multi_head_attention(&random_x(&mut rng, &[2, 5, 4]), &w, &c).unwrap();
        for b in 0..2 {
            for t in 0..5 {
                for s in 0..3 {
                    let row = trace.score_row(b, t, s);
                    let want: Vec<f64> = (0..3).map(|r| if r == s { 1.0 } else { 0.0 }).collect();
                    assert_eq!(row, want);
                }
            }
        }
    }

    #[test]
    fn single_search_single_retrieval_is_plain_retrieval() {
        let c = config(Variant::CompositionalDot, 4, 2, 1, 1, true);
        let (w, _, mut rng) = setup(&c, 9);
        let x = random_x(&mut rng, &[3, 4]);
        let s = search(&x, &w.query[0], &w.key[0], 1.0 / 2f64.sqrt(), true).unwrap();
        let ret = retrieve_all(std::slice::from_ref(&s), &x, &w.value).unwrap();
        assert_eq!(ret[0].shape(), &[3, 1, 2]);
        let plain = s.matmul(&w.value[0].forward(&x).unwrap()).unwrap();
        assert_eq!(ret[0].to_vec(), plain.to_vec());
    }

    #[test]
    fn uniform_search_averages_other_values() {
        let c = config(Variant::CompositionalDot, 4, 2, 1, 2, true);
        let (w, _, mut rng) = setup(&c, 10);
        w.query[0].weight.data_mut().fill(0.0);
        let x = random_x(&mut rng, &[4, 4]);
        let s = search(&x, &w.query[0], &w.key[0], 1.0, true).unwrap();
        let ret = retrieve_all(std::slice::from_ref(&s), &x, &w.value).unwrap()[0].to_vec();
        for j in 0..2 {
            let v = mat(&w.value[j].forward(&x).unwrap());
            for t in 0..4 {
                for e in 0..2 {
                    let mean: f64 = (0..4).filter(|&u| u != t).map(|u| v[u][e]).sum::<f64>() / 3.0;
                    assert_relative_eq!(ret[(t * 2 + j) * 2 + e], mean, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn retrieve_all_matches_double_loop() {
        let c = config(Variant::CompositionalDot, 5, 3, 2, 3, true);
        let (w, _, mut rng) = setup(&c, 11);
        let x = random_x(&mut rng, &[4, 5]);
        let xm = mat(&x);
        let searches: Vec<Tensor> = (0..2)
            .map(|i| search(&x, &w.query[i], &w.key[i], 1.0 / 3f64.sqrt(), true).unwrap())
            .collect();
        let ret = retrieve_all(&searches, &x, &w.value).unwrap();
        for i in 0..2 {
            let s = search_oracle(&xm, &mat(&w.query[i].weight), &mat(&w.key[i].weight), true);
            let got = ret[i].to_vec();
            for j in 0..3 {
                let want = matmul(&s, &matmul(&xm, &mat(&w.value[j].weight)));
                for t in 0..4 {
                    for e in 0..3 {
                        assert_relative_eq!(got[(t * 3 + j) * 3 + e], want[t][e], epsilon = 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn value_scores_single_retrieval_and_zero_query() {
        let c = config(Variant::CompositionalDot, 4, 2, 2, 1, true);
        let (w, _, mut rng) = setup(&c, 12);
        let (_, trace) = compositional_attention(&random_x(&mut rng, &[3, 4]), &w, &c).unwrap();
        assert!(trace.value_scores().iter().all(|&v| v == 1.0));

        let c = config(Variant::CompositionalDot, 4, 2, 2, 4, true);
        let (w, _, mut rng) = setup(&c, 13);
        for rq in &w.retrieval_query {
            rq.weight.data_mut().fill(0.0);
        }
        let (_, trace) = compositional_attention(&random_x(&mut rng, &[3, 4]), &w, &c).unwrap();
        assert!(trace.value_scores().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn value_scores_dot_match_per_token_oracle() {
        let c = config(Variant::CompositionalDot, 4, 3, 2, 4, true);
        let (w, _, mut rng) = setup(&c, 14);
        let x = random_x(&mut rng, &[3, 4]);
        let xm = mat(&x);
        let (_, trace) = compositional_attention(&x, &w, &c).unwrap();
        let rk = mat(&w.retrieval_key.as_ref().unwrap().weight);
        for i in 0..2 {
            let s = search_oracle(&xm, &mat(&w.query[i].weight), &mat(&w.key[i].weight), true);
            let qb = matmul(&xm, &mat(&w.retrieval_query[i].weight));
            for t in 0..3 {
                let logits: Vec<f64> = (0..4)
                    .map(|j| {
                        let ret = matmul(&s, &matmul(&xm, &mat(&w.value[j].weight)));
                        let kb = matmul(&[ret[t].clone()], &rk)[0].clone();
                        qb[t].iter().zip(&kb).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt()
                    })
                    .collect();
                let want = softmax_row(&logits, |_| true);
                let got = trace.score_row(0, t, i);
                for j in 0..4 {
                    assert_relative_eq!(got[j], want[j], epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn value_scores_mlp_cases() {
        let c = config(Variant::CompositionalMlp, 4, 2, 2, 3, true);
        let (w, _, mut rng) = setup(&c, 15);
        for l in w.score_query.iter().chain(&w.score_key) {
            l.weight.data_mut().fill(0.0);
        }
        let (_, trace) = compositional_attention(&random_x(&mut rng, &[3, 4]), &w, &c).unwrap();
        assert!(trace.value_scores().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let c1 = config(Variant::CompositionalMlp, 4, 2, 2, 1, true);
        let (w1, _, mut rng) = setup(&c1, 16);
        let (_, trace) = compositional_attention(&random_x(&mut rng, &[3, 4]), &w1, &c1).unwrap();
        assert!(trace.value_scores().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn value_scores_mlp_two_retrievals_is_a_sigmoid() {
        // With two options the softmax is sigmoid(l0 - l1); the token half
        // of the scorer cancels.
        let c = config(Variant::CompositionalMlp, 2, 2, 1, 2, true);
        let (w, _, _) = setup(&c, 17);
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        w.query[0].weight.data_mut().fill(0.0);
        // V_0 = X, V_1 = 2X.
        w.value[0].weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        w.value[1].weight.data_mut().copy_from_slice(&[2.0, 0.0, 0.0, 2.0]);
        w.score_query[0].weight.data_mut().copy_from_slice(&[5.0, -3.0]);
        w.score_key[0].weight.data_mut().copy_from_slice(&[1.0, 0.5]);
        let (_, trace) = compositional_attention(&x, &w, &c).unwrap();
        // Masked 2-token search: token 0 reads token 1 and vice versa.
        // Token 0: Ret_0 = [0,1], Ret_1 = [0,2]; logits differ by -0.5.
        let p0 = 1.0 / (1.0 + 0.5f64.exp());
        // Token 1: Ret_0 = [1,0], Ret_1 = [2,0]; logits differ by -1.
        let p1 = 1.0 / (1.0 + 1f64.exp());
        assert_relative_eq!(trace.score_row(0, 0, 0)[0], p0, epsilon = 1e-15);
        assert_relative_eq!(trace.score_row(0, 1, 0)[0], p1, epsilon = 1e-15);
    }

    #[test]
    fn compositional_matches_triple_loop_oracle() {
        for variant in [Variant::CompositionalDot, Variant::CompositionalMlp] {
            let c = config(variant, 6, 3, 2, 4, true);
            let (w, _, mut rng) = setup(&c, 18);
            let x = random_x(&mut rng, &[4, 6]);
            let (out, trace) = compositional_attention(&x, &w, &c).unwrap();
            let want = compositional_oracle(&mat(&x), &w, &c);
            for (g, e) in out.to_vec().iter().zip(want.iter().flatten()) {
                assert_relative_eq!(*g, *e, epsilon = 1e-12);
            }
            assert_eq!(trace.value_scores().len(), 4 * 2 * 4);
        }
    }

    #[test]
    fn identity_and_permutation_overrides_reduce_to_multi_head() {
        let c = config(Variant::CompositionalDot, 6, 3, 3, 3, true);
        let (w, _, mut rng) = setup(&c, 19);
        let x = random_x(&mut rng, &[2, 5, 6]);
        for perm in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let mut scores = vec![0.0; 9];
            for (i, &p) in perm.iter().enumerate() {
                scores[i * 3 + p] = 1.0;
            }
            let (comp, _) = compositional_attention_with_scores(&x, &w, &c, &scores).unwrap();
            let mh_cfg = AttentionConfig {
                variant: Variant::MultiHead,
                ..c.clone()
            };
            let mh_w = AttentionWeights {
                value: perm.iter().map(|&p| w.value[p].clone()).collect(),
                retrieval_query: Vec::new(),
                retrieval_key: None,
                ..w.clone()
            };
            let (mh, _) = multi_head_attention(&x, &mh_w, &mh_cfg).unwrap();
            for (a, b) in comp.to_vec().iter().zip(mh.to_vec()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_forward_equals_per_instance() {
        let c = config(Variant::CompositionalDot, 4, 2, 2, 3, true);
        let (w, _, mut rng) = setup(&c, 20);
        let x = random_x(&mut rng, &[3, 4, 4]);
        let (out, _) = compositional_attention(&x, &w, &c).unwrap();
        let xv = x.to_vec();
        for b in 0..3 {
            let xb = Tensor::from_vec(&[4, 4], xv[b * 16..(b + 1) * 16].to_vec()).unwrap();
            let (ob, _) = compositional_attention(&xb, &w, &c).unwrap();
            for (g, e) in out.to_vec()[b * 16..(b + 1) * 16].iter().zip(ob.to_vec()) {
                assert_relative_eq!(*g, e, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = config(Variant::CompositionalDot, 4, 2, 2, 0, true);
        assert!(c.validate().is_err());
        c.retrievals = 2;
        c.d_r = 0;
        assert!(c.validate().is_err());
        let mh = config(Variant::MultiHead, 4, 2, 2, 0, true);
        assert!(mh.validate().is_ok());
    }

    #[test]
    fn mismatched_input_width_is_a_dimension_error() {
        let c = config(Variant::MultiHead, 4, 2, 1, 1, false);
        let (w, _, mut rng) = setup(&c, 21);
        let x = random_x(&mut rng, &[3, 5]);
        assert!(matches!(attention(&x, &w, &c, None), Err(Error::Dimension { .. })));
    }
}
