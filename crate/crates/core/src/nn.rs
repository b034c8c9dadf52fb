//! Layers shared by every model variant: linear maps, layer normalization,
//! inverted dropout, sinusoidal positional encoding, diagonally-masked
//! multi-head self-attention, the position-wise feed-forward network and the
//! post-norm encoder layer.
//!
//! Parameters live in a [`ParamStore`] owned by the model. A forward pass
//! binds them onto a fresh [`Tape`] through a [`Ctx`]; layers only hold
//! [`ParamId`]s.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use saits_tensor::{Tape, Tensor, Var, MASK_SENTINEL};

use crate::error::{Result, SaitsError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let (idx, old) = self.params.insert_full(name.clone(), value);
        assert!(old.is_none(), "duplicate parameter name {name}");
        ParamId(idx)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    /// Record every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.values().map(|t| tape.param(t.clone())).collect()
    }

    /// Record every parameter as a constant (no gradient bookkeeping).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.values().map(|t| tape.constant(t.clone())).collect()
    }
}

/// Xavier/Glorot uniform initialization for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.gen_range(-limit..limit))
}

/// Bound parameters plus the train/eval switch for one forward pass.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t> Ctx<'t> {
    /// Evaluation mode: dropout is the identity.
    pub fn eval(tape: &'t Tape, params: Vec<Var<'t>>) -> Self {
        Self {
            tape,
            params,
            dropout_rng: None,
        }
    }

    /// Training mode: dropout draws its masks from `rng`.
    pub fn train(tape: &'t Tape, params: Vec<Var<'t>>, rng: ChaCha8Rng) -> Self {
        Self {
            tape,
            params,
            dropout_rng: Some(RefCell::new(rng)),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1 / (1 - p)`. Identity in evaluation mode.
    pub fn dropout(&self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(SaitsError::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = &self.dropout_rng else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let factor = Tensor::from_fn(x.shape(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        Ok(x.mul_const(factor)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self { weight, bias }
    }

    /// `x W + b` over the last axis.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(cx.param(self.weight))?;
        Ok(match self.bias {
            Some(b) => y.add(cx.param(b))?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::ones([dim])),
            bias: store.register(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(cx.param(self.gain), cx.param(self.bias), LAYER_NORM_EPS)?)
    }
}

/// Sinusoidal positional encoding, `[steps, d_model]`.
///
/// Even columns hold `sin(pos / 10000^(2i/d_model))`, odd columns the cosine
/// of the same argument.
pub fn positional_encoding(steps: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(SaitsError::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    if steps == 0 {
        return Err(SaitsError::Config("positional encoding needs steps > 0".into()));
    }
    Ok(Tensor::from_fn([steps, d_model], |flat| {
        let (pos, col) = (flat / d_model, flat % d_model);
        let pair = (col / 2) * 2;
        let angle = pos as f64 / 10000f64.powf(pair as f64 / d_model as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Additive `[steps, steps]` mask with the sentinel on the diagonal.
pub fn diagonal_mask(steps: usize) -> Tensor {
    Tensor::from_fn([steps, steps], |i| {
        if i / steps == i % steps {
            MASK_SENTINEL
        } else {
            0.0
        }
    })
}

/// Attention values plus the weights that produced them.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t> {
    pub values: Var<'t>,
    /// `[B, h, T, T]`, rows indexed by query step.
    pub weights: Var<'t>,
}

/// Scaled dot-product attention over `[B, h, T, ·]` inputs. With `diag_mask`
/// on, no step may attend to itself.
pub fn diag_masked_self_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    diag_mask: bool,
) -> Result<AttentionOutput<'t>> {
    let shape = q.shape();
    if shape.len() < 2 {
        return Err(saits_tensor::TensorError::Rank {
            op: "attention",
            min: 2,
            shape,
        }
        .into());
    }
    let steps = shape[shape.len() - 2];
    let d_k = shape[shape.len() - 1];
    if diag_mask && steps < 2 {
        return Err(SaitsError::DegenerateSequence(steps));
    }
    let scores = q.matmul(k.transpose_last2()?)?.scale(1.0 / (d_k as f64).sqrt());
    let mask = diag_mask.then(|| diagonal_mask(steps));
    let weights = scores.softmax_last(mask.as_ref())?;
    Ok(AttentionOutput {
        values: weights.matmul(v)?,
        weights,
    })
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Projections carry no bias terms.
        Self {
            w_q: Linear::new(store, &format!("{name}.w_q"), d_model, n_heads * d_k, false, rng),
            w_k: Linear::new(store, &format!("{name}.w_k"), d_model, n_heads * d_k, false, rng),
            w_v: Linear::new(store, &format!("{name}.w_v"), d_model, n_heads * d_v, false, rng),
            w_o: Linear::new(store, &format!("{name}.w_o"), n_heads * d_v, d_model, false, rng),
            n_heads,
            d_k,
            d_v,
        }
    }

    fn split_heads<'t>(&self, x: Var<'t>, batch: usize, steps: usize, width: usize) -> Result<Var<'t>> {
        Ok(x.reshape(&[batch, steps, self.n_heads, width])?
            .permute(&[0, 2, 1, 3])?)
    }

    /// `x: [B, T, d_model]` to values `[B, T, d_model]` and per-head
    /// weights `[B, h, T, T]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, diag_mask: bool) -> Result<AttentionOutput<'t>> {
        let shape = x.shape();
        let [batch, steps, _] = shape[..] else {
            return Err(saits_tensor::TensorError::Rank {
                op: "multi-head attention",
                min: 3,
                shape,
            }
            .into());
        };
        let q = self.split_heads(self.w_q.forward(cx, x)?, batch, steps, self.d_k)?;
        let k = self.split_heads(self.w_k.forward(cx, x)?, batch, steps, self.d_k)?;
        let v = self.split_heads(self.w_v.forward(cx, x)?, batch, steps, self.d_v)?;
        let att = diag_masked_self_attention(q, k, v, diag_mask)?;
        let merged = att
            .values
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch, steps, self.n_heads * self.d_v])?;
        Ok(AttentionOutput {
            values: self.w_o.forward(cx, merged)?,
            weights: att.weights,
        })
    }
}

/// `ReLU(x W1 + b1) W2 + b2`, applied per position.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.w_1"), d_model, d_ffn, true, rng),
            outer: Linear::new(store, &format!("{name}.w_2"), d_ffn, d_model, true, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.outer.forward(cx, self.inner.forward(cx, x)?.relu())
    }
}

/// Post-norm encoder layer:
/// `y = LN(x + Dropout(MHA(x)))`, `out = LN(y + Dropout(FFN(y)))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dims: LayerDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                dims.d_model,
                dims.n_heads,
                dims.d_k,
                dims.d_v,
                rng,
            ),
            attention_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dims.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.d_model, dims.d_ffn, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dims.d_model),
        }
    }

    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        diag_mask: bool,
        dropout: f64,
    ) -> Result<AttentionOutput<'t>> {
        let att = self.attention.forward(cx, x, diag_mask)?;
        let y = self
            .attention_norm
            .forward(cx, x.add(cx.dropout(att.values, dropout)?)?)?;
        let f = self.ffn.forward(cx, y)?;
        let out = self.ffn_norm.forward(cx, y.add(cx.dropout(f, dropout)?)?)?;
        Ok(AttentionOutput {
            values: out,
            weights: att.weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(6, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 0.84147).abs() < 1e-5);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 3).is_err());
    }

    #[test]
    fn two_step_diag_attention_is_swap() {
        let tape = Tape::new();
        let mut r = rng();
        let q = tape.constant(Tensor::from_fn([1, 1, 2, 3], |_| r.gen_range(-5.0..5.0)));
        let k = tape.constant(Tensor::from_fn([1, 1, 2, 3], |_| r.gen_range(-5.0..5.0)));
        let v = tape.constant(Tensor::from_fn([1, 1, 2, 3], |_| r.gen_range(-5.0..5.0)));
        let out = diag_masked_self_attention(q, k, v, true).unwrap();
        let w = out.weights.value();
        assert!(w.get(&[0, 0, 0, 0]) < 1e-300 && w.get(&[0, 0, 1, 1]) < 1e-300);
        assert_eq!(w.get(&[0, 0, 0, 1]), 1.0);
        assert_eq!(w.get(&[0, 0, 1, 0]), 1.0);
    }

    #[test]
    fn single_step_with_diag_mask_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 1, 2]));
        assert!(matches!(
            diag_masked_self_attention(x, x, x, true),
            Err(SaitsError::DegenerateSequence(1))
        ));
        assert!(diag_masked_self_attention(x, x, x, false).is_ok());
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros([2, 1, 5, 3]));
        let v = tape.constant(Tensor::ones([2, 1, 5, 3]));
        let w = diag_masked_self_attention(z, z, v, false).unwrap().weights.value();
        assert!(w.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn three_step_diag_attention_matches_two_entry_softmax() {
        let tape = Tape::new();
        let mut r = rng();
        let q = tape.constant(Tensor::from_fn([1, 1, 3, 2], |_| r.gen_range(-2.0..2.0)));
        let k = tape.constant(Tensor::from_fn([1, 1, 3, 2], |_| r.gen_range(-2.0..2.0)));
        let v = tape.constant(Tensor::from_fn([1, 1, 3, 2], |_| r.gen_range(-2.0..2.0)));
        let (qv, kv) = (q.value(), k.value());
        let w = diag_masked_self_attention(q, k, v, true).unwrap().weights.value();
        for i in 0..3 {
            let score = |j: usize| {
                (0..2).map(|c| qv.get(&[0, 0, i, c]) * kv.get(&[0, 0, j, c])).sum::<f64>() / 2f64.sqrt()
            };
            let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            let z: f64 = others.iter().map(|&j| score(j).exp()).sum();
            for &j in &others {
                assert!((w.get(&[0, 0, i, j]) - score(j).exp() / z).abs() < 1e-12);
            }
            assert!(w.get(&[0, 0, i, i]) < 1e-300);
        }
    }

    #[test]
    fn mha_shapes_and_zero_input() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut store, "mha", 16, 1, 8, 8, &mut r);
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store.bind(&tape));
        let x = tape.constant(Tensor::zeros([2, 5, 16]));
        let out = mha.forward(&cx, x, true).unwrap();
        assert_eq!(out.values.shape(), vec![2, 5, 16]);
        assert_eq!(out.weights.shape(), vec![2, 1, 5, 5]);
        assert!(out.values.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_identity_and_zero() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let ffn = FeedForward::new(&mut store, "ffn", 3, 3, &mut r);
        let eye = Tensor::from_fn([3, 3], |i| (i / 3 == i % 3) as u8 as f64);
        *store.by_name_mut("ffn.w_1.weight").unwrap() = eye.clone();
        *store.by_name_mut("ffn.w_2.weight").unwrap() = eye;
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store.bind(&tape));
        let x = Tensor::from_fn([1, 4, 3], |i| i as f64 * 0.5);
        let y = ffn.forward(&cx, tape.constant(x.clone())).unwrap().value();
        assert_eq!(y, x);

        for t in store.values_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store.bind(&tape));
        let y = ffn.forward(&cx, tape.constant(x)).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_rate_is_validated_and_eval_is_identity() {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, vec![]);
        let x = tape.constant(Tensor::ones([4]));
        assert!(cx.dropout(x, 1.0).is_err());
        assert_eq!(cx.dropout(x, 0.5).unwrap().id(), x.id());
    }
}
