//! Post-hoc analyses: value-score statistics, retrieval specialization,
//! analytic cost accounting and the multi-head reduction check.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::attention::{
    compositional_attention_with_scores, multi_head_attention, AttentionConfig, AttentionTrace, AttentionWeights,
    Variant,
};
use crate::error::{Error, Result};
use crate::model::{EncoderKind, ModelConfig, TaskModel};
use crate::rng::Rng;
use crate::task::{sample_batch, Combo, OodSplit, TaskInstance, TaskSpec};
use crate::tensor::{no_grad, ParamStore, Tensor};

/// A forward trace together with the instances that produced it.
#[derive(Debug, Clone)]
pub struct TracedBatch {
    pub trace: AttentionTrace,
    pub instances: Vec<TaskInstance>,
}

/// Runs `batches` fresh batches drawn from `pool` (all combinations when
/// `None`) through the model without recording gradients.
pub fn collect_traces(
    model: &TaskModel,
    spec: &TaskSpec,
    rng: &mut Rng,
    batches: usize,
    batch_size: usize,
    pool: Option<&[Combo]>,
) -> Result<Vec<TracedBatch>> {
    (0..batches)
        .map(|_| {
            let batch = sample_batch(spec, rng, batch_size, pool)?;
            let (_, trace) = no_grad(|| model.forward(&batch.inputs, None))?;
            Ok(TracedBatch {
                trace,
                instances: batch.instances,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// By the ground-truth retrieval a token prefers for the task search
    /// that each model search is aligned with.
    Retrieval,
    /// By the token's full preference combination.
    Combo,
}

/// Mean and variance of the `S×R` value scores within one group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub key: String,
    /// Contributing (token, search) rows per model search.
    pub counts: Vec<usize>,
    /// `S×R`; a row with zero count is NaN.
    pub mean: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueScoreStats {
    pub grouping: Grouping,
    pub searches: usize,
    pub retrievals: usize,
    /// Set when the traces came from multi-head attention, whose pairing is
    /// the fixed identity rather than a learned score.
    pub implicit_identity: bool,
    /// Model search → task search used for retrieval grouping.
    pub search_map: Vec<usize>,
    pub groups: Vec<GroupStats>,
}

impl ValueScoreStats {
    pub fn group(&self, key: &str) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.key == key)
    }
}

/// Group key for a preference combination, e.g. `"2-1"`.
pub fn combo_key(combo: &[usize]) -> String {
    combo.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

#[derive(Default)]
struct Acc {
    counts: Vec<usize>,
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
}

/// Aggregates value scores over every token of every traced batch.
///
/// `search_map[i]` names the task search whose preference labels model
/// search `i` under [`Grouping::Retrieval`]; by default search `i` maps to
/// task search `i mod S_task`.
pub fn aggregate_value_scores(
    batches: &[TracedBatch],
    grouping: Grouping,
    search_map: Option<&[usize]>,
) -> Result<ValueScoreStats> {
    let first = batches
        .first()
        .ok_or_else(|| Error::contract("no traces to aggregate"))?;
    let (s, r) = (first.trace.searches, first.trace.retrievals);
    let task_searches = first
        .instances
        .first()
        .map(|i| i.prefs.first().map_or(0, Vec::len))
        .ok_or_else(|| Error::contract("traced batch without instances"))?;
    let map: Vec<usize> = match search_map {
        Some(m) => m.to_vec(),
        None => (0..s).map(|i| i % task_searches).collect(),
    };
    if map.len() != s || map.iter().any(|&t| t >= task_searches) {
        return Err(Error::contract(format!(
            "search map {map:?} does not map {s} model searches onto {task_searches} task searches"
        )));
    }
    let implicit_identity = first.trace.implicit_identity();
    let mut groups: BTreeMap<Vec<usize>, Acc> = BTreeMap::new();
    for tb in batches {
        let t = &tb.trace;
        if t.searches != s || t.retrievals != r || t.implicit_identity() != implicit_identity {
            return Err(Error::contract(
                "traces from different architectures cannot be aggregated together",
            ));
        }
        if tb.instances.len() != t.batch {
            return Err(Error::contract("trace batch size differs from its instance count"));
        }
        let scores = t.value_scores();
        for (b, inst) in tb.instances.iter().enumerate() {
            for (n, prefs) in inst.prefs.iter().enumerate() {
                for i in 0..s {
                    let key = match grouping {
                        Grouping::Retrieval => vec![prefs[map[i]]],
                        Grouping::Combo => prefs.clone(),
                    };
                    let acc = groups.entry(key).or_insert_with(|| Acc {
                        counts: vec![0; s],
                        sum: vec![vec![0.0; r]; s],
                        sum_sq: vec![vec![0.0; r]; s],
                    });
                    let start = ((b * t.tokens + n) * s + i) * r;
                    acc.counts[i] += 1;
                    for (j, &v) in scores[start..start + r].iter().enumerate() {
                        acc.sum[i][j] += v;
                        acc.sum_sq[i][j] += v * v;
                    }
                }
            }
        }
    }
    let groups = groups
        .into_iter()
        .map(|(key, acc)| {
            let mut mean = vec![vec![f64::NAN; r]; s];
            let mut variance = vec![vec![f64::NAN; r]; s];
            for i in 0..s {
                let c = acc.counts[i];
                if c == 0 {
                    continue;
                }
                for j in 0..r {
                    let m = acc.sum[i][j] / c as f64;
                    mean[i][j] = m;
                    variance[i][j] = (acc.sum_sq[i][j] / c as f64 - m * m).max(0.0);
                }
            }
            GroupStats {
                key: combo_key(&key),
                counts: acc.counts,
                mean,
                variance,
            }
        })
        .collect();
    Ok(ValueScoreStats {
        grouping,
        searches: s,
        retrievals: r,
        implicit_identity,
        search_map: map,
        groups,
    })
}

/// Count-weighted `S×R` mean over the combination groups whose key is in
/// `combos`. Fails if none of them occurred.
pub fn pooled_matrix(stats: &ValueScoreStats, combos: &[Combo]) -> Result<Vec<Vec<f64>>> {
    if stats.grouping != Grouping::Combo {
        return Err(Error::contract(
            "pooling over combinations needs combination-grouped stats",
        ));
    }
    let (s, r) = (stats.searches, stats.retrievals);
    let mut sum = vec![vec![0.0; r]; s];
    let mut counts = vec![0usize; s];
    for combo in combos {
        if let Some(g) = stats.group(&combo_key(combo)) {
            for i in 0..s {
                if g.counts[i] == 0 {
                    continue;
                }
                counts[i] += g.counts[i];
                for j in 0..r {
                    sum[i][j] += g.mean[i][j] * g.counts[i] as f64;
                }
            }
        }
    }
    if counts.contains(&0) {
        return Err(Error::contract(
            "none of the requested combinations appear in the statistics",
        ));
    }
    Ok(sum
        .into_iter()
        .zip(counts)
        .map(|(row, c)| row.into_iter().map(|v| v / c as f64).collect())
        .collect())
}

pub fn frobenius_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)))
        .sum::<f64>()
        .sqrt()
}

/// Distance between the pooled train-combination and held-out-combination
/// value-score matrices.
#[derive(Debug, Clone, Serialize)]
pub struct SplitContrast {
    pub train: Vec<Vec<f64>>,
    pub held_out: Vec<Vec<f64>>,
    pub frobenius: f64,
}

pub fn split_contrast(stats: &ValueScoreStats, split: &OodSplit) -> Result<SplitContrast> {
    let train = pooled_matrix(stats, &split.train)?;
    let held_out = pooled_matrix(stats, &split.test)?;
    let frobenius = frobenius_distance(&train, &held_out);
    Ok(SplitContrast {
        train,
        held_out,
        frobenius,
    })
}

/// Exact maximum-weight assignment of rows to distinct columns (the
/// smaller side is matched completely). Dynamic programming over subsets
/// of the larger side, so that side may have at most
/// [`MAX_ASSIGNMENT_SIDE`] entries. Returns, for each row, its column
/// (`None` when rows outnumber columns and the row is left over) and the
/// total weight.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Result<(Vec<Option<usize>>, f64)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if weights.iter().any(|w| w.len() != cols) {
        return Err(Error::contract("assignment weights must be rectangular"));
    }
    if rows == 0 || cols == 0 {
        return Ok((vec![None; rows], 0.0));
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| weights[i][j]).collect()).collect();
        let (col_to_row, total) = max_weight_assignment(&transposed)?;
        let mut out = vec![None; rows];
        for (j, i) in col_to_row.iter().enumerate() {
            if let Some(i) = i {
                out[*i] = Some(j);
            }
        }
        return Ok((out, total));
    }
    if cols > MAX_ASSIGNMENT_SIDE {
        return Err(Error::contract(format!(
            "assignment over {cols} slots exceeds the exact solver's limit of {MAX_ASSIGNMENT_SIDE}"
        )));
    }
    // best[mask] = best weight assigning the first popcount(mask) rows to
    // exactly the columns in mask.
    let full = 1usize << cols;
    let mut best = vec![f64::NEG_INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        let row = mask.count_ones() as usize;
        if row >= rows || best[mask] == f64::NEG_INFINITY {
            continue;
        }
        for (j, &w) in weights[row].iter().enumerate() {
            let bit = 1 << j;
            if mask & bit != 0 {
                continue;
            }
            let next = mask | bit;
            let cand = best[mask] + w;
            // Strict improvement keeps the lexicographically first optimum.
            if cand > best[next] {
                best[next] = cand;
                choice[next] = j;
            }
        }
    }
    let (mut mask, total) = (0..full)
        .filter(|m| m.count_ones() as usize == rows)
        .map(|m| (m, best[m]))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let mut out = vec![None; rows];
    for row in (0..rows).rev() {
        let j = choice[mask];
        out[row] = Some(j);
        mask &= !(1 << j);
    }
    Ok((out, total))
}

pub const MAX_ASSIGNMENT_SIDE: usize = 20;

/// Alignment of ground-truth retrieval labels with learned retrieval
/// slots. `quality` is the assigned share of the total mass: 1 for a
/// permutation matrix, `1/R` for uniform scores. This metric is a
/// construction of this library, not a published measure.
#[derive(Debug, Clone, Serialize)]
pub struct Specialization {
    /// `assignment[g]` = learned slot matched to ground-truth label `g`.
    pub assignment: Vec<Option<usize>>,
    pub quality: f64,
    /// Ground truth (rows) × learned slot (columns).
    pub matrix: Vec<Vec<f64>>,
}

pub fn specialization_score(matrix: &[Vec<f64>]) -> Result<Specialization> {
    let total: f64 = matrix.iter().flatten().sum();
    let (assignment, assigned) = max_weight_assignment(matrix)?;
    Ok(Specialization {
        assignment,
        quality: if total > 0.0 { assigned / total } else { 0.0 },
        matrix: matrix.to_vec(),
    })
}

/// Ground-truth label × learned retrieval matrix from retrieval-grouped
/// stats, averaging the rows of all model searches (count weighted).
/// Labels that never occurred are left as zero rows.
pub fn label_matrix(stats: &ValueScoreStats, labels: usize) -> Result<Vec<Vec<f64>>> {
    if stats.grouping != Grouping::Retrieval {
        return Err(Error::contract("label matrix needs retrieval-grouped stats"));
    }
    let r = stats.retrievals;
    let mut out = vec![vec![0.0; r]; labels];
    for (g, row) in out.iter_mut().enumerate() {
        let Some(group) = stats.group(&g.to_string()) else {
            continue;
        };
        let n: usize = group.counts.iter().sum();
        for (i, &c) in group.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for j in 0..r {
                row[j] += group.mean[i][j] * c as f64 / n as f64;
            }
        }
    }
    Ok(out)
}

/// Chooses which task search each model search tracks: the assignment
/// maximising the summed specialization quality of the per-pair label
/// matrices.
pub fn align_searches(batches: &[TracedBatch], labels: usize) -> Result<Vec<usize>> {
    let first = batches.first().ok_or_else(|| Error::contract("no traces to align"))?;
    let s_model = first.trace.searches;
    let s_task = first.instances.first().map_or(0, |i| i.prefs[0].len());
    let mut quality = vec![vec![0.0; s_task]; s_model];
    for (i, row) in quality.iter_mut().enumerate() {
        for (t, q) in row.iter_mut().enumerate() {
            let mut map: Vec<usize> = (0..s_model).map(|k| k % s_task).collect();
            map[i] = t;
            let stats = aggregate_value_scores(batches, Grouping::Retrieval, Some(&map))?;
            // Only search i's rows matter here.
            let r = stats.retrievals;
            let mut m = vec![vec![0.0; r]; labels];
            for (g, mrow) in m.iter_mut().enumerate() {
                if let Some(group) = stats.group(&g.to_string()) {
                    if group.counts[i] > 0 {
                        mrow.clone_from(&group.mean[i]);
                    }
                }
            }
            *q = specialization_score(&m)?.quality;
        }
    }
    let (assign, _) = max_weight_assignment(&quality)?;
    Ok(assign
        .iter()
        .enumerate()
        .map(|(i, a)| a.unwrap_or(i % s_task))
        .collect())
}

/// Closed-form cost accounting for one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub variant: Variant,
    /// Exact number of attention parameters implied by the shapes.
    pub exact_parameters: usize,
    /// Query/key/value projection parameters only.
    pub projection_parameters: usize,
    /// `3h` (multi-head) or `2s + r` (compositional): projection
    /// parameters in units of `d·d_head`.
    pub params_coeff: usize,
    /// `2h` or `s(1 + r)`: the `N²` cost in units of `N²·d_head`.
    pub quad_cost_coeff: usize,
    pub tokens: usize,
    /// Multiply-accumulates of one forward pass over `tokens` tokens.
    pub forward_macs: u64,
    /// `N²` part of `forward_macs`.
    pub quadratic_macs: u64,
    /// Cost of covering all `h²` search–retrieval pairings, for `h` equal
    /// to the configured search (head) count.
    pub pairing_coverage: PairingCoverage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairingCoverage {
    pub h: usize,
    /// Heads multi-head attention needs for `h²` distinct pairings.
    pub multi_head_heads: usize,
    pub multi_head_params_coeff: usize,
    pub multi_head_quad_coeff: usize,
    pub compositional_params_coeff: usize,
    pub compositional_quad_coeff: usize,
}

pub fn params_coeff(variant: Variant, searches: usize, retrievals: usize) -> usize {
    match variant {
        Variant::MultiHead => 3 * searches,
        _ => 2 * searches + retrievals,
    }
}

pub fn quad_cost_coeff(variant: Variant, searches: usize, retrievals: usize) -> usize {
    match variant {
        Variant::MultiHead => 2 * searches,
        _ => searches * (1 + retrievals),
    }
}

/// Attention parameters implied by the configured shapes.
pub fn attention_parameters(c: &AttentionConfig) -> usize {
    let b = usize::from(c.bias);
    let (s, r) = (c.searches, c.value_count());
    let qk = 2 * s * (c.d * c.d_k + b * c.d_k);
    let v = r * (c.d * c.d_v + b * c.d_v);
    let out = s * c.d_v * c.d + b * c.d;
    let extra = match c.variant {
        Variant::MultiHead => 0,
        Variant::CompositionalDot => s * (c.d * c.d_r + b * c.d_r) + c.d_v * c.d_r + b * c.d_r,
        Variant::CompositionalMlp => s * (c.d + c.d_v),
    };
    qk + v + out + extra
}

/// Every parameter of a [`TaskModel`], from the configuration alone.
pub fn task_model_parameters(c: &ModelConfig, input_width: usize) -> usize {
    let d = c.d;
    let encoder = match c.encoder {
        EncoderKind::Linear => input_width * d + d,
        EncoderKind::Mlp => input_width * d + d + d * d,
    };
    let norm = if c.layer_norm { 2 * d } else { 0 };
    let readout_in = if c.self_concat { 2 * d } else { d };
    let readout = readout_in + usize::from(c.readout_bias);
    encoder + attention_parameters(&c.attention_config()) + norm + readout
}

pub fn complexity_report(c: &AttentionConfig, tokens: usize) -> Result<ComplexityReport> {
    c.validate()?;
    let (s, r) = (c.searches, c.value_count());
    let n = tokens as u64;
    let (d, dk, dv, dr) = (c.d as u64, c.d_k as u64, c.d_v as u64, c.d_r as u64);
    let (s64, r64) = (s as u64, r as u64);
    let projections = n * d * (2 * s64 * dk + r64 * dv);
    let output = n * s64 * dv * d;
    let (quadratic, linear_extra) = match c.variant {
        Variant::MultiHead => (s64 * n * n * (dk + dv), 0),
        Variant::CompositionalDot => (
            s64 * n * n * dk + s64 * r64 * n * n * dv,
            // retrieval queries, retrieval keys, score dots, score mixing
            s64 * n * d * dr + s64 * r64 * n * dv * dr + s64 * r64 * n * dr + s64 * r64 * n * dv,
        ),
        Variant::CompositionalMlp => (
            s64 * n * n * dk + s64 * r64 * n * n * dv,
            s64 * n * d + s64 * r64 * n * dv + s64 * r64 * n * dv,
        ),
    };
    let h = s;
    Ok(ComplexityReport {
        variant: c.variant,
        exact_parameters: attention_parameters(c),
        projection_parameters: 2 * s * c.d * c.d_k + r * c.d * c.d_v,
        params_coeff: params_coeff(c.variant, s, r),
        quad_cost_coeff: quad_cost_coeff(c.variant, s, r),
        tokens,
        forward_macs: projections + output + quadratic + linear_extra,
        quadratic_macs: quadratic,
        pairing_coverage: PairingCoverage {
            h,
            multi_head_heads: h * h,
            multi_head_params_coeff: params_coeff(Variant::MultiHead, h * h, h * h),
            multi_head_quad_coeff: quad_cost_coeff(Variant::MultiHead, h * h, h * h),
            compositional_params_coeff: params_coeff(Variant::CompositionalDot, h, h),
            compositional_quad_coeff: quad_cost_coeff(Variant::CompositionalDot, h, h),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    Identity,
    Random,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionTrial {
    pub permutation: Vec<usize>,
    pub tokens: usize,
    pub batch: usize,
    pub max_abs_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionReport {
    pub heads: usize,
    pub d: usize,
    pub tolerance: f64,
    pub corrupted: bool,
    pub max_abs_deviation: f64,
    pub passed: bool,
    pub trials: Vec<ReductionTrial>,
}

pub const REDUCTION_TOLERANCE: f64 = 1e-10;

/// Compositional attention with its value scores pinned to a permutation
/// `π` against multi-head attention whose head `i` uses value projection
/// `π(i)`, on random weights and inputs. With `corrupt`, the multi-head
/// branch gets a perturbed output projection (a negative control that
/// must fail).
pub fn reduction_test(
    trials: usize,
    heads: usize,
    d: usize,
    mode: PermutationMode,
    corrupt: bool,
    rng: &mut Rng,
) -> Result<ReductionReport> {
    if heads == 0 || d == 0 {
        return Err(Error::contract("reduction test needs positive heads and width"));
    }
    let d_head = (d / heads).max(1);
    let mut report = ReductionReport {
        heads,
        d,
        tolerance: REDUCTION_TOLERANCE,
        corrupted: corrupt,
        max_abs_deviation: 0.0,
        passed: true,
        trials: Vec::with_capacity(trials),
    };
    for _ in 0..trials {
        let tokens = 2 + rng.below(7);
        let batch = 1 + rng.below(3);
        let config = AttentionConfig {
            variant: Variant::CompositionalDot,
            d,
            d_k: d_head,
            d_v: d_head,
            d_r: d_head,
            searches: heads,
            retrievals: heads,
            mask_diagonal: rng.below(2) == 1,
            bias: false,
            dropout: 0.0,
        };
        let mut store = ParamStore::new();
        let weights = AttentionWeights::init(&config, &mut store, "attn", rng)?;
        let mut perm: Vec<usize> = (0..heads).collect();
        if mode == PermutationMode::Random {
            rng.shuffle(&mut perm);
        }
        let mut scores = vec![0.0; heads * heads];
        for (i, &p) in perm.iter().enumerate() {
            scores[i * heads + p] = 1.0;
        }
        let x = Tensor::from_vec(
            &[batch, tokens, d],
            (0..batch * tokens * d).map(|_| rng.normal()).collect(),
        )?;
        let (comp, _) = no_grad(|| compositional_attention_with_scores(&x, &weights, &config, &scores))?;

        let mh_config = AttentionConfig {
            variant: Variant::MultiHead,
            ..config.clone()
        };
        let mut output = weights.output.clone();
        if corrupt {
            let w = output.weight.to_vec();
            let mut w2 = w.clone();
            w2[0] += 1e-3;
            output.weight = Tensor::from_vec(output.weight.shape(), w2)?;
        }
        let mh_weights = AttentionWeights {
            query: weights.query.clone(),
            key: weights.key.clone(),
            value: perm.iter().map(|&p| weights.value[p].clone()).collect(),
            output,
            retrieval_query: Vec::new(),
            retrieval_key: None,
            score_query: Vec::new(),
            score_key: Vec::new(),
        };
        let (mh, _) = no_grad(|| multi_head_attention(&x, &mh_weights, &mh_config))?;
        let dev = comp
            .to_vec()
            .iter()
            .zip(mh.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.max_abs_deviation = report.max_abs_deviation.max(dev);
        report.trials.push(ReductionTrial {
            permutation: perm,
            tokens,
            batch,
            max_abs_deviation: dev,
        });
    }
    report.passed = report.max_abs_deviation < REDUCTION_TOLERANCE;
    Ok(report)
}

/// Writes an `S×R` matrix as CSV: one row per search, one column per
/// retrieval, with a `search` index column.
pub fn matrix_csv(matrix: &[Vec<f64>]) -> String {
    let cols = matrix.first().map_or(0, Vec::len);
    let mut out = String::from("search");
    for j in 0..cols {
        out.push_str(&format!(",retrieval_{j}"));
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
