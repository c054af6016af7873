//! Fixed-seed verification suites: finite-difference gradients,
//! generator/oracle agreement, the multi-head reduction and structural
//! invariants. Each returns a serializable report with a pass flag.

use serde::Serialize;

use crate::analysis::{
    attention_parameters, complexity_report, reduction_test, task_model_parameters, PermutationMode, ReductionReport,
};
use crate::attention::{attention, AttentionConfig, AttentionTrace, AttentionWeights, Variant};
use crate::error::Result;
use crate::model::{EncoderKind, ModelConfig, TaskModel};
use crate::oracle::oracle_targets;
use crate::rng::Rng;
use crate::task::{sample_batch, sample_instance, TaskSpec};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::{no_grad, ParamStore, Tensor};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Worst deviations of the attention normalisation invariants seen over a
/// set of traces.
#[derive(Debug, Clone, Default, Serialize)]
pub struct NormalizationCheck {
    pub traces: usize,
    /// max |Σ_j w_ij − 1| over all search rows.
    pub search_row_error: f64,
    /// max |Σ_r s_r − 1| over all value-score rows.
    pub score_row_error: f64,
    /// Largest diagonal search weight under masking (must be exactly 0).
    pub masked_diagonal_max: f64,
}

impl NormalizationCheck {
    pub fn observe(&mut self, trace: &AttentionTrace, masked: bool) {
        self.traces += 1;
        for b in 0..trace.batch {
            for s in 0..trace.searches {
                for t in 0..trace.tokens {
                    let row = trace.search_row(b, s, t);
                    self.search_row_error = self.search_row_error.max((row.iter().sum::<f64>() - 1.0).abs());
                    if masked {
                        self.masked_diagonal_max = self.masked_diagonal_max.max(row[t].abs());
                    }
                }
            }
        }
        let r = trace.retrievals;
        for row in trace.value_scores().chunks(r) {
            self.score_row_error = self.score_row_error.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    pub fn passed(&self) -> bool {
        self.search_row_error <= ROW_SUM_TOLERANCE
            && self.score_row_error <= ROW_SUM_TOLERANCE
            && self.masked_diagonal_max == 0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub config: AttentionConfig,
    pub tokens: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<GradCase>,
    pub max_rel_error: f64,
    pub normalization: NormalizationCheck,
    pub passed: bool,
}

const PICK_SR: [usize; 3] = [1, 2, 4];
const PICK_D: [usize; 2] = [8, 16];
const PICK_N: [usize; 3] = [2, 4, 8];
const PICK_HEAD: [usize; 2] = [2, 4];

/// Finite-difference check of one attention layer (all weights and the
/// input) on a random linear functional of its output.
pub fn grad_check_attention(
    config: &AttentionConfig,
    tokens: usize,
    rng: &mut Rng,
) -> Result<(GradCase, AttentionTrace)> {
    let mut store = ParamStore::new();
    let weights = AttentionWeights::init(config, &mut store, "attn", rng)?;
    let batch = 2;
    let x = store.add(
        "input",
        Tensor::parameter(
            &[batch, tokens, config.d],
            (0..batch * tokens * config.d).map(|_| rng.normal()).collect(),
        )?,
    )?;
    // Unit-variance functional of the output, scaled so its value is O(1)
    // and finite-difference roundoff stays far below the tolerance.
    let numel = batch * tokens * config.d;
    let scale = 1.0 / (numel as f64).sqrt();
    let probe = Tensor::from_vec(
        &[batch, tokens, config.d],
        (0..numel).map(|_| rng.normal() * scale).collect(),
    )?;
    let (_, trace) = no_grad(|| attention(&x, &weights, config, None))?;
    let f = || -> Result<Tensor> { Ok(attention(&x, &weights, config, None)?.0.mul(&probe)?.sum()) };
    let report = grad_check(f, &store.named(), GRADCHECK_STEP, GRADCHECK_TOLERANCE)?;
    let worst = report
        .params
        .iter()
        .fold(None::<&crate::tensor::gradcheck::ParamGradError>, |acc, p| match acc {
            Some(a) if a.max_rel_error >= p.max_rel_error => Some(a),
            _ => Some(p),
        })
        .map(|p| p.name.clone())
        .unwrap_or_default();
    Ok((
        GradCase {
            config: config.clone(),
            tokens,
            max_rel_error: report.max_rel_error,
            worst_param: worst,
            passed: report.passed,
        },
        trace,
    ))
}

/// A random small attention configuration of `variant`.
pub fn random_attention_config(variant: Variant, rng: &mut Rng) -> AttentionConfig {
    let searches = PICK_SR[rng.below(3)];
    let retrievals = match variant {
        Variant::MultiHead => searches,
        _ => PICK_SR[rng.below(3)],
    };
    AttentionConfig {
        variant,
        d: PICK_D[rng.below(2)],
        d_k: PICK_HEAD[rng.below(2)],
        d_v: PICK_HEAD[rng.below(2)],
        d_r: PICK_HEAD[rng.below(2)],
        searches,
        retrievals,
        mask_diagonal: rng.below(4) != 0,
        bias: rng.below(2) == 1,
        dropout: 0.0,
    }
}

/// `per_variant` random configurations for each attention variant.
pub fn gradcheck_suite(per_variant: usize, seed: u64) -> Result<GradSuiteReport> {
    let mut rng = Rng::new(seed);
    let mut report = GradSuiteReport {
        step: GRADCHECK_STEP,
        tolerance: GRADCHECK_TOLERANCE,
        cases: Vec::new(),
        max_rel_error: 0.0,
        normalization: NormalizationCheck::default(),
        passed: true,
    };
    for variant in [Variant::MultiHead, Variant::CompositionalDot, Variant::CompositionalMlp] {
        for _ in 0..per_variant {
            let config = random_attention_config(variant, &mut rng);
            let tokens = PICK_N[rng.below(3)];
            let (case, trace) = grad_check_attention(&config, tokens, &mut rng)?;
            report.normalization.observe(&trace, config.mask_diagonal);
            report.max_rel_error = report.max_rel_error.max(case.max_rel_error);
            report.passed &= case.passed;
            report.cases.push(case);
        }
    }
    report.passed &= report.normalization.passed();
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRegime {
    pub searches: usize,
    pub retrievals: usize,
    pub instances: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSuiteReport {
    pub regimes: Vec<OracleRegime>,
    pub passed: bool,
}

pub const ORACLE_REGIMES: [(usize, usize); 3] = [(2, 4), (4, 8), (4, 16)];

/// Generator targets against the exhaustive oracle, compared bit for bit.
pub fn oracle_suite(instances: usize, objects: usize, seed: u64) -> Result<OracleSuiteReport> {
    let mut regimes = Vec::new();
    for (k, &(s, r)) in ORACLE_REGIMES.iter().enumerate() {
        let mut rng = Rng::with_stream(seed, k as u64);
        let spec = TaskSpec::new(s, r, objects, &mut rng)?;
        let mut regime = OracleRegime {
            searches: s,
            retrievals: r,
            instances,
            mismatches: 0,
            first_mismatch: None,
        };
        for i in 0..instances {
            let inst = sample_instance(&spec, &mut rng, None)?;
            let expected = oracle_targets(&inst.z, &inst.z_tilde, &inst.prefs, &inst.alpha);
            let equal =
                expected.len() == inst.y.len() && expected.iter().zip(&inst.y).all(|(a, b)| a.to_bits() == b.to_bits());
            if !equal {
                regime.mismatches += 1;
                regime.first_mismatch.get_or_insert(i);
            }
        }
        regimes.push(regime);
    }
    let passed = regimes.iter().all(|r| r.mismatches == 0);
    Ok(OracleSuiteReport { regimes, passed })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionSuiteReport {
    pub runs: Vec<ReductionReport>,
    /// Corrupted output projection; must fail.
    pub negative_control: ReductionReport,
    pub passed: bool,
}

pub const REDUCTION_HEADS: [usize; 4] = [1, 2, 4, 8];

pub fn reduction_suite(trials: usize, d: usize, seed: u64) -> Result<ReductionSuiteReport> {
    let mut rng = Rng::new(seed);
    let mut runs = Vec::new();
    for &h in &REDUCTION_HEADS {
        runs.push(reduction_test(trials, h, d, PermutationMode::Random, false, &mut rng)?);
    }
    let negative_control = reduction_test(trials.min(10), 4, d, PermutationMode::Random, true, &mut rng)?;
    let passed = runs.iter().all(|r| r.passed) && !negative_control.passed;
    Ok(ReductionSuiteReport {
        runs,
        negative_control,
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AccountingMismatch {
    pub variant: Variant,
    pub searches: usize,
    pub retrievals: usize,
    pub d: usize,
    pub closed_form: usize,
    pub counted: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantSuiteReport {
    pub accounting_configs: usize,
    pub accounting_mismatches: Vec<AccountingMismatch>,
    /// Dominant coefficients at the published anchor points.
    pub coefficient_anchors_ok: bool,
    pub normalization: NormalizationCheck,
    pub passed: bool,
}

/// Model configuration used by the accounting sweep: head widths `d/S`.
pub fn sweep_model_config(variant: Variant, searches: usize, retrievals: usize, d: usize) -> ModelConfig {
    let head = (d / searches).max(1);
    ModelConfig {
        variant,
        d,
        d_k: head,
        d_v: head,
        d_r: head,
        searches,
        retrievals,
        self_concat: true,
        encoder: EncoderKind::Mlp,
        layer_norm: false,
        attention_bias: false,
        readout_bias: false,
        dropout: 0.0,
    }
}

/// Closed-form parameter counts against the built models over
/// `(S, R, d) ∈ {1..8}² × {16, 64}`, coefficient anchors, and
/// normalisation of traced task models.
pub fn invariant_suite(seed: u64) -> Result<InvariantSuiteReport> {
    let mut rng = Rng::new(seed);
    let mut configs = 0;
    let mut mismatches = Vec::new();
    for variant in [Variant::MultiHead, Variant::CompositionalDot, Variant::CompositionalMlp] {
        for s in 1..=8 {
            for r in 1..=8 {
                if variant == Variant::MultiHead && r != s {
                    continue;
                }
                for d in [16, 64] {
                    let mut cfg = sweep_model_config(variant, s, r, d);
                    cfg.attention_bias = (s + r) % 2 == 0;
                    cfg.readout_bias = s % 2 == 1;
                    cfg.layer_norm = r % 3 == 0;
                    cfg.self_concat = d == 64;
                    let width = s + r + s * r;
                    let model = TaskModel::new(&cfg, width, &mut rng)?;
                    configs += 1;
                    let counted = model.parameter_count().total;
                    let closed = task_model_parameters(&cfg, width);
                    let attn_closed = attention_parameters(&cfg.attention_config());
                    let mut attn_store = ParamStore::new();
                    AttentionWeights::init(&cfg.attention_config(), &mut attn_store, "attn", &mut rng)?;
                    let attn_counted = attn_store.count().total;
                    if counted != closed || attn_closed != attn_counted {
                        mismatches.push(AccountingMismatch {
                            variant,
                            searches: s,
                            retrievals: r,
                            d,
                            closed_form: closed,
                            counted,
                        });
                    }
                }
            }
        }
    }

    let anchor = |variant, s, r| -> Result<(usize, usize)> {
        let c = sweep_model_config(variant, s, r, 64).attention_config();
        let rep = complexity_report(&c, 8)?;
        Ok((rep.params_coeff, rep.quad_cost_coeff))
    };
    let coefficient_anchors_ok = anchor(Variant::MultiHead, 8, 8)? == (24, 16)
        && anchor(Variant::CompositionalDot, 8, 8)? == (24, 72)
        && anchor(Variant::CompositionalDot, 4, 1)?.0 == 9;

    let mut normalization = NormalizationCheck::default();
    for variant in [Variant::MultiHead, Variant::CompositionalDot, Variant::CompositionalMlp] {
        let spec = TaskSpec::new(2, 4, 8, &mut rng)?;
        let model = TaskModel::new(&sweep_model_config(variant, 2, 4, 32), spec.input_width(), &mut rng)?;
        let batch = sample_batch(&spec, &mut rng, 16, None)?;
        let (_, trace) = no_grad(|| model.forward(&batch.inputs, None))?;
        normalization.observe(&trace, true);
    }

    let passed = mismatches.is_empty() && coefficient_anchors_ok && normalization.passed();
    Ok(InvariantSuiteReport {
        accounting_configs: configs,
        accounting_mismatches: mismatches,
        coefficient_anchors_ok,
        normalization,
        passed,
    })
}
