//! Finite-difference suite over every differentiable operation, the layers
//! and the full training loss of each model variant.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saits_tensor::{
    check_gradients, select, CustomOp, GradCheckOptions, GradCheckReport, Tape, Tensor, TensorError, Var,
    MASK_SENTINEL,
};

use crate::config::{Objective, SaitsConfig, Variant};
use crate::error::{Result, SaitsError};
use crate::model::{joint_loss, SaitsModel};
use crate::nn::{Ctx, EncoderLayer, FeedForward, LayerDims, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::training::{apply_mit_mask, unmasked_batch};

type LossFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> saits_tensor::Result<Var<'t>>>;

/// A named scalar function of some input tensors.
pub struct GradCase {
    pub name: String,
    inputs: Vec<Tensor>,
    f: LossFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> saits_tensor::Result<Var<'t>> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            f: Box::new(f),
        }
    }

    pub fn run(&self, opts: GradCheckOptions) -> Result<CaseResult> {
        let report = check_gradients(&self.inputs, opts, |t, v| (self.f)(t, v))?;
        Ok(CaseResult {
            name: self.name.clone(),
            report,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.report.checked).sum()
    }
}

pub fn run_cases(cases: &[GradCase], opts: GradCheckOptions) -> Result<SuiteReport> {
    let cases = cases.iter().map(|c| c.run(opts)).collect::<Result<_>>()?;
    Ok(SuiteReport { cases })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values pushed at least `gap` away from zero, so kinks of ReLU and
/// absolute value stay outside the difference stencil.
fn away_from_zero(t: Tensor, gap: f64) -> Tensor {
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Weighted sum so each output element gets a distinct upstream gradient.
fn probe<'t>(tape: &'t Tape, x: Var<'t>, weights: &Tensor) -> saits_tensor::Result<Var<'t>> {
    Ok(x.mul(tape.constant(weights.clone()))?.sum())
}

fn to_tensor_error(e: SaitsError) -> TensorError {
    match e {
        SaitsError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// One case per differentiable tensor operation.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let a = random(r, &[2, 3, 4]);
    let row = random(r, &[4]);
    let col = random(r, &[3, 1]);
    let w234 = random(r, &[2, 3, 4]);
    let kinked = away_from_zero(random(r, &[3, 5]), 0.05);
    let w35 = random(r, &[3, 5]);
    let lhs = random(r, &[2, 3, 4, 5]);
    let rhs = random(r, &[2, 3, 5, 2]);
    let w_mat = random(r, &[2, 3, 4, 2]);
    let shared = random(r, &[5, 3]);
    let w_flat = random(r, &[2, 3, 4, 3]);
    let scores = random(r, &[2, 4, 4]);
    let w_scores = random(r, &[2, 4, 4]);
    let b = random(r, &[2, 3, 2]);
    let w_cat = random(r, &[2, 3, 6]);
    let w_perm = random(r, &[3, 4, 2]);
    let w_mean = random(r, &[2, 4]);
    let gain = random(r, &[4]);
    let bias = random(r, &[4]);
    let est = random(r, &[2, 4, 3]);
    let target = random(r, &[2, 4, 3]);
    let other = random(r, &[2, 4, 3]);
    let w_est = random(r, &[2, 4, 3]);
    let mask = Tensor::from_fn([2, 4, 3], |i| (i % 3 != 0) as u8 as f64);
    let diag = {
        let mut m = Tensor::zeros([4, 4]);
        (0..4).for_each(|i| m.set(&[i, i], MASK_SENTINEL));
        m
    };

    let mut cases = Vec::new();
    let (w, x) = (w234.clone(), a.clone());
    cases.push(GradCase::new("add (broadcast)", vec![x, row.clone()], move |t, v| probe(t, v[0].add(v[1])?, &w)));
    let w = w234.clone();
    cases.push(GradCase::new("sub (broadcast)", vec![a.clone(), col.clone()], move |t, v| probe(t, v[0].sub(v[1])?, &w)));
    let w = w234.clone();
    cases.push(GradCase::new("mul (broadcast)", vec![a.clone(), col], move |t, v| probe(t, v[0].mul(v[1])?, &w)));
    let w = w35.clone();
    cases.push(GradCase::new("relu", vec![kinked.clone()], move |t, v| probe(t, v[0].relu(), &w)));
    let w = w35.clone();
    cases.push(GradCase::new("sigmoid", vec![kinked.clone()], move |t, v| probe(t, v[0].sigmoid(), &w)));
    let w = w35.clone();
    cases.push(GradCase::new("abs", vec![kinked.clone()], move |t, v| probe(t, v[0].abs(), &w)));
    let w = w35;
    cases.push(GradCase::new("affine", vec![kinked.clone()], move |t, v| probe(t, v[0].affine(-2.5, 0.5), &w)));
    cases.push(GradCase::new("sum / mean", vec![kinked], |_, v| v[0].sum().add(v[0].mean())));
    let w = w_mat;
    cases.push(GradCase::new("matmul (batched)", vec![lhs.clone(), rhs], move |t, v| probe(t, v[0].matmul(v[1])?, &w)));
    let w = w_flat;
    cases.push(GradCase::new("matmul (shared rhs)", vec![lhs, shared], move |t, v| probe(t, v[0].matmul(v[1])?, &w)));
    let w = w_scores.clone();
    cases.push(GradCase::new("softmax", vec![scores.clone()], move |t, v| probe(t, v[0].softmax_last(None)?, &w)));
    let w = w_scores;
    cases.push(GradCase::new("softmax (diagonal mask)", vec![scores], move |t, v| {
        probe(t, v[0].softmax_last(Some(&diag))?, &w)
    }));
    let w = w_cat;
    cases.push(GradCase::new("concat", vec![a.clone(), b], move |t, v| probe(t, v[0].concat_last(v[1])?, &w)));
    let w = w_perm.clone();
    cases.push(GradCase::new("permute", vec![a.clone()], move |t, v| probe(t, v[0].permute(&[1, 2, 0])?, &w)));
    let w = w_perm.reshape([3, 2, 4]).expect("same size");
    cases.push(GradCase::new("transpose", vec![a.clone()], move |t, v| {
        probe(t, v[0].reshape(&[3, 2, 4])?.transpose_last2()?.transpose_last2()?, &w)
    }));
    let w = w_mean;
    cases.push(GradCase::new("mean_axis", vec![a.clone()], move |t, v| probe(t, v[0].mean_axis(1)?, &w)));
    let w = w234;
    cases.push(GradCase::new("layer_norm", vec![a, gain, bias], move |t, v| {
        probe(t, v[0].layer_norm(v[1], v[2], 1e-5)?, &w)
    }));
    let (tg, m) = (target, mask.clone());
    cases.push(GradCase::new("masked_mae", vec![est.clone()], move |_, v| v[0].masked_mae(&tg, &m)));
    let (w, m) = (w_est.clone(), mask.clone());
    cases.push(GradCase::new("select", vec![est.clone(), other], move |t, v| probe(t, select(&m, v[0], v[1])?, &w)));
    let (w, factor) = (w_est, mask.map(|m| 1.25 * m));
    cases.push(GradCase::new("mul_const", vec![est], move |t, v| probe(t, v[0].mul_const(factor.clone())?, &w)));
    cases
}

/// Cases for each layer, differentiating with respect to its input and
/// every parameter.
pub fn layer_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = LayerDims {
        d_model: 6,
        d_ffn: 5,
        n_heads: 2,
        d_k: 3,
        d_v: 2,
    };
    let x = random(&mut rng, &[2, 4, dims.d_model]);
    let weights = random(&mut rng, &[2, 4, dims.d_model]);
    let mut cases = Vec::new();

    let mut layer_case = |name: &str,
                          build: &dyn Fn(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn for<'t> Fn(&Ctx<'t>, Var<'t>) -> Result<Var<'t>>>,
                          rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let forward = build(&mut store, rng);
        // Random non-trivial values in place of the deterministic init.
        for t in store.values_mut() {
            *t = random(rng, t.shape());
        }
        let mut inputs = vec![x.clone()];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let w = weights.clone();
        cases.push(GradCase::new(name, inputs, move |tape, v| {
            let cx = Ctx::eval(tape, v[1..].to_vec());
            let y = forward(&cx, v[0]).map_err(to_tensor_error)?;
            probe(tape, y, &w)
        }));
    };

    layer_case(
        "linear",
        &|s, r| {
            let l = Linear::new(s, "l", 6, 6, true, r);
            Box::new(move |cx, x| l.forward(cx, x))
        },
        &mut rng,
    );
    layer_case(
        "layer norm",
        &|s, _| {
            let l = LayerNorm::new(s, "ln", 6);
            Box::new(move |cx, x| l.forward(cx, x))
        },
        &mut rng,
    );
    layer_case(
        "diagonally-masked multi-head attention",
        &|s, r| {
            let l = MultiHeadAttention::new(s, "mha", 6, 2, 3, 2, r);
            Box::new(move |cx, x| Ok(l.forward(cx, x, true)?.values))
        },
        &mut rng,
    );
    layer_case(
        "attention weights",
        &|s, r| {
            let l = MultiHeadAttention::new(s, "mha", 6, 2, 3, 2, r);
            Box::new(move |cx, x| {
                let w = l.forward(cx, x, true)?.weights.mean_axis(1)?;
                let spread = Tensor::from_fn([4, 6], |i| 0.3 * i as f64 - 2.0);
                Ok(w.matmul(cx.constant(spread))?)
            })
        },
        &mut rng,
    );
    layer_case(
        "feed-forward",
        &|s, r| {
            let l = FeedForward::new(s, "ffn", 6, 5, r);
            Box::new(move |cx, x| l.forward(cx, x))
        },
        &mut rng,
    );
    layer_case(
        "encoder layer",
        &|s, r| {
            let l = EncoderLayer::new(s, "enc", dims, r);
            Box::new(move |cx, x| Ok(l.forward(cx, x, true, 0.0)?.values))
        },
        &mut rng,
    );
    cases
}

/// Full training loss of `variant` with respect to every parameter, on a
/// `[2, T, D]` batch with natural and artificial gaps.
pub fn model_case(config: &SaitsConfig, seed: u64) -> Result<GradCase> {
    if config.dropout > 0.0 {
        return Err(SaitsError::GradCheckRefused(format!(
            "dropout {} makes the loss stochastic; set it to 0",
            config.dropout
        )));
    }
    let model = SaitsModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(9);
    let shape = [2, config.n_steps, config.n_features];
    let x = random(&mut rng, &shape);
    let m = Tensor::from_fn(shape, |_| (rng.gen::<f64>() > 0.2) as u8 as f64);
    let x = x.zip_map(&m, |v, k| v * k)?;
    let objective = config.variant.objective();
    let batch = match objective {
        Objective::OrtOnly => unmasked_batch(&x, &m)?,
        _ => apply_mit_mask(&x, &m, config.mit_rate, &mut rng)?,
    };
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let lambda = config.mit_weight;
    Ok(GradCase::new(
        format!("{} loss ({} parameters)", config.variant, model.num_parameters()),
        inputs,
        move |tape, v| {
            let cx = Ctx::eval(tape, v.to_vec());
            let out = model.forward(&cx, &batch.x_hat, &batch.m_hat).map_err(to_tensor_error)?;
            let loss = joint_loss(&out, &batch.x, &batch.m_hat, &batch.indicating, lambda, objective)
                .map_err(to_tensor_error)?;
            Ok(loss.total)
        },
    ))
}

pub fn model_cases(base: &SaitsConfig, variants: &[Variant], seed: u64) -> Result<Vec<GradCase>> {
    variants
        .iter()
        .map(|&v| model_case(&base.clone().with_variant(v), seed))
        .collect()
}

/// Square whose backward rule returns `x` instead of `2x`.
#[derive(Debug)]
struct CorruptedSquare;

impl CustomOp for CorruptedSquare {
    fn name(&self) -> &str {
        "corrupted_square"
    }

    fn forward(&self, inputs: &[&Tensor]) -> saits_tensor::Result<Tensor> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.zip_map(inputs[0], |g, x| g * x).expect("same shape")]
    }
}

/// A case that must fail; used to show the suite catches a wrong rule.
pub fn corrupted_case() -> GradCase {
    let x = Tensor::new([3], vec![0.5, -1.5, 2.0]).expect("valid");
    GradCase::new("corrupted square (negative control)", vec![x], |t, v| {
        Ok(t.custom(Rc::new(CorruptedSquare), &[v[0]])?.sum())
    })
}

/// Ops, layers and the full loss of every variant.
pub fn full_suite(base: &SaitsConfig, seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = op_cases(seed);
    cases.extend(layer_cases(seed));
    cases.extend(model_cases(base, &Variant::ALL, seed)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_and_layers_pass() {
        let mut cases = op_cases(1);
        cases.extend(layer_cases(1));
        let report = run_cases(&cases, GradCheckOptions::default()).unwrap();
        for c in &report.cases {
            assert!(c.report.passed(), "{}: {:?}", c.name, &c.report.failures[..c.report.failures.len().min(3)]);
        }
    }

    #[test]
    fn corrupted_rule_fails() {
        let r = corrupted_case().run(GradCheckOptions::default()).unwrap();
        assert!(!r.report.passed());
    }

    #[test]
    fn dropout_is_refused() {
        let cfg = SaitsConfig {
            dropout: 0.1,
            ..SaitsConfig::gradcheck(4, 3)
        };
        assert!(matches!(model_case(&cfg, 0), Err(SaitsError::GradCheckRefused(_))));
    }
}
