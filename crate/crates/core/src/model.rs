//! SAITS and its ablation family.
//!
//! A DMSA block embeds `Concat(X̂, M̂)` to `d_model`, adds the positional
//! encoding, runs `N` encoder layers and projects back to `D` features. SAITS
//! chains two blocks: the second one sees the input with its gaps filled by
//! the first block's estimate. The two representations are blended by
//! per-position weights `η` computed from the second block's averaged
//! attention map and the missing mask.
//!
//! Whatever the variant, the imputed output keeps every observed input value
//! bit-for-bit and only fills the gaps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saits_tensor::{select, Tape, Tensor, Var};

use crate::config::{Objective, SaitsConfig, Variant};
use crate::error::{Result, SaitsError};
use crate::nn::{positional_encoding, Ctx, EncoderLayer, LayerDims, Linear, ParamStore};

/// Output projection of a block back to `D` features.
#[derive(Clone, Debug)]
enum Head {
    /// `z W + b`.
    Linear(Linear),
    /// `ReLU(z W_β + b_β) W_γ + b_γ`.
    Deep { hidden: Linear, out: Linear },
}

#[derive(Clone, Debug)]
struct DmsaBlock {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    head: Head,
}

struct BlockOutput<'t> {
    repr: Var<'t>,
    /// Per-head weights of the last layer, `[B, h, T, T]`.
    last_weights: Var<'t>,
    /// Per-head weights of every layer in order.
    all_weights: Vec<Var<'t>>,
}

impl DmsaBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &SaitsConfig, deep_head: bool, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.n_features;
        let dims = LayerDims {
            d_model: cfg.d_model,
            d_ffn: cfg.d_ffn,
            n_heads: cfg.n_heads,
            d_k: cfg.d_k,
            d_v: cfg.d_v,
        };
        let embed = Linear::new(store, &format!("{name}.embed"), 2 * d, cfg.d_model, true, rng);
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layers.{i}"), dims, rng))
            .collect();
        let head = if deep_head {
            Head::Deep {
                hidden: Linear::new(store, &format!("{name}.head.hidden"), cfg.d_model, d, true, rng),
                out: Linear::new(store, &format!("{name}.head.out"), d, d, true, rng),
            }
        } else {
            Head::Linear(Linear::new(store, &format!("{name}.head"), cfg.d_model, d, true, rng))
        };
        Self { embed, layers, head }
    }

    fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        mask: Var<'t>,
        pe: Var<'t>,
        diag_mask: bool,
        dropout: f64,
    ) -> Result<BlockOutput<'t>> {
        let e = self.embed.forward(cx, x.concat_last(mask)?)?.add(pe)?;
        let mut h = cx.dropout(e, dropout)?;
        let mut all_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(cx, h, diag_mask, dropout)?;
            h = out.values;
            all_weights.push(out.weights);
        }
        let repr = match &self.head {
            Head::Linear(l) => l.forward(cx, h)?,
            Head::Deep { hidden, out } => out.forward(cx, hidden.forward(cx, h)?.relu())?,
        };
        Ok(BlockOutput {
            repr,
            last_weights: *all_weights.last().expect("n_layers > 0 is validated"),
            all_weights,
        })
    }
}

/// Learned blend `(1 − η) ⊙ a + η ⊙ b` with
/// `η = Sigmoid(Concat(Â, M̂) W_η + b_η)` and `Â` the head-averaged weights.
#[derive(Clone, Debug)]
struct WeightedCombination {
    gate: Linear,
}

struct Combined<'t> {
    repr: Var<'t>,
    eta: Var<'t>,
    attention: Var<'t>,
}

impl WeightedCombination {
    fn new(store: &mut ParamStore, name: &str, cfg: &SaitsConfig, rng: &mut ChaCha8Rng) -> Self {
        let gate = Linear::new(
            store,
            &format!("{name}.gate"),
            cfg.n_steps + cfg.n_features,
            cfg.n_features,
            true,
            rng,
        );
        Self { gate }
    }

    fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        first: Var<'t>,
        second: Var<'t>,
        weights: Var<'t>,
        mask: Var<'t>,
    ) -> Result<Combined<'t>> {
        let attention = weights.mean_axis(1)?;
        let eta = self.gate.forward(cx, attention.concat_last(mask)?)?.sigmoid();
        let repr = eta.affine(-1.0, 1.0).mul(first)?.add(eta.mul(second)?)?;
        Ok(Combined { repr, eta, attention })
    }
}

#[derive(Clone, Debug)]
enum Architecture {
    /// One stack of encoder layers; also `saits_1block`.
    Single(DmsaBlock),
    Double {
        first: DmsaBlock,
        second: DmsaBlock,
        combine: Option<WeightedCombination>,
    },
    Triple {
        blocks: [DmsaBlock; 3],
        /// Empty for the residual variant, two stages for the cascade.
        combine: Vec<WeightedCombination>,
    },
}

/// Forward-pass products. Optional fields are absent for variants that do
/// not compute them.
#[derive(Clone, Debug)]
pub struct ForwardOutput<'t> {
    /// Learned representation of the first block, `X̃₁`.
    pub first: Var<'t>,
    /// `X̂′`: observed inputs kept, gaps taken from `X̃₁`.
    pub first_filled: Var<'t>,
    /// Learned representation of the second block, `X̃₂`.
    pub second: Option<Var<'t>>,
    /// Final learned representation (`X̃₃` for SAITS).
    pub combined: Var<'t>,
    /// `X̂_c`: observed inputs kept, gaps taken from `combined`.
    pub imputed: Var<'t>,
    /// Combining weights `η` of the last weighted combination.
    pub combining_weights: Option<Var<'t>>,
    /// Head-averaged attention `Â` feeding `η`, `[B, T, T]`.
    pub attention: Option<Var<'t>>,
    /// Every representation entering the reconstruction loss.
    pub representations: Vec<Var<'t>>,
    /// Per-head attention weights of every encoder layer, block by block.
    pub layer_weights: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct SaitsModel {
    config: SaitsConfig,
    params: ParamStore,
    arch: Architecture,
    pos_enc: Tensor,
}

impl SaitsModel {
    /// Build a freshly initialized model. Initialization is a pure function
    /// of `(config, seed)`.
    pub fn new(config: SaitsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let arch = match cfg.variant {
            Variant::Transformer | Variant::TransformerOrtOnly | Variant::TransformerMitOnly => {
                Architecture::Single(DmsaBlock::new(&mut store, "encoder", cfg, false, &mut rng))
            }
            Variant::Saits1Block => {
                Architecture::Single(DmsaBlock::new(&mut store, "block1", cfg, false, &mut rng))
            }
            Variant::Saits | Variant::SaitsNoDiag | Variant::SaitsR2 | Variant::SaitsResidual => {
                let first = DmsaBlock::new(&mut store, "block1", cfg, false, &mut rng);
                let second = DmsaBlock::new(&mut store, "block2", cfg, true, &mut rng);
                let combine = matches!(cfg.variant, Variant::Saits | Variant::SaitsNoDiag)
                    .then(|| WeightedCombination::new(&mut store, "combine", cfg, &mut rng));
                Architecture::Double { first, second, combine }
            }
            Variant::Saits3Residual | Variant::Saits3Cascade => {
                let blocks = [
                    DmsaBlock::new(&mut store, "block1", cfg, false, &mut rng),
                    DmsaBlock::new(&mut store, "block2", cfg, true, &mut rng),
                    DmsaBlock::new(&mut store, "block3", cfg, true, &mut rng),
                ];
                let combine = if cfg.variant == Variant::Saits3Cascade {
                    vec![
                        WeightedCombination::new(&mut store, "combine1", cfg, &mut rng),
                        WeightedCombination::new(&mut store, "combine2", cfg, &mut rng),
                    ]
                } else {
                    Vec::new()
                };
                Architecture::Triple { blocks, combine }
            }
        };
        let pos_enc = positional_encoding(cfg.n_steps, cfg.d_model)?;
        Ok(Self {
            config,
            params: store,
            arch,
            pos_enc,
        })
    }

    /// Same architecture with externally supplied parameters. Names and
    /// shapes must match the configuration exactly.
    pub fn from_params(config: SaitsConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(SaitsError::Manifest(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((want_name, want), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if want_name != got_name || want.shape() != got.shape() {
                return Err(SaitsError::Manifest(format!(
                    "parameter `{got_name}` {:?} where `{want_name}` {:?} was expected",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &SaitsConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        let s = t.shape();
        if s.len() != 3 || s[1] != self.config.n_steps || s[2] != self.config.n_features {
            return Err(SaitsError::InputShape {
                got: s.to_vec(),
                steps: self.config.n_steps,
                features: self.config.n_features,
            });
        }
        Ok(())
    }

    /// Run the model on `x_hat` (zeros at missing positions) with its
    /// missing mask `m_hat`, both `[B, T, D]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x_hat: &Tensor, m_hat: &Tensor) -> Result<ForwardOutput<'t>> {
        self.check_input(x_hat)?;
        if m_hat.shape() != x_hat.shape() {
            return Err(SaitsError::InputShape {
                got: m_hat.shape().to_vec(),
                steps: self.config.n_steps,
                features: self.config.n_features,
            });
        }
        let cfg = &self.config;
        let diag = cfg.diagonal_mask_enabled();
        let p = cfg.dropout;
        let x = cx.constant(x_hat.clone());
        let mask = cx.constant(m_hat.clone());
        let pe = cx.constant(self.pos_enc.clone());
        // Observed values stay, gaps come from `estimate`.
        let fill = |estimate: Var<'t>| select(m_hat, x, estimate);

        let out = match &self.arch {
            Architecture::Single(block) => {
                let b = block.forward(cx, x, mask, pe, diag, p)?;
                let filled = fill(b.repr)?;
                ForwardOutput {
                    first: b.repr,
                    first_filled: filled,
                    second: None,
                    combined: b.repr,
                    imputed: filled,
                    combining_weights: None,
                    attention: None,
                    representations: vec![b.repr],
                    layer_weights: b.all_weights,
                }
            }
            Architecture::Double { first, second, combine } => {
                let b1 = first.forward(cx, x, mask, pe, diag, p)?;
                let x_prime = fill(b1.repr)?;
                let b2 = second.forward(cx, x_prime, mask, pe, diag, p)?;
                let (combined, eta, attention, representations) = match (cfg.variant, combine) {
                    (_, Some(c)) => {
                        let c = c.forward(cx, b1.repr, b2.repr, b2.last_weights, mask)?;
                        (c.repr, Some(c.eta), Some(c.attention), vec![b1.repr, b2.repr, c.repr])
                    }
                    (Variant::SaitsR2, None) => (b2.repr, None, None, vec![b2.repr]),
                    _ => {
                        let sum = b1.repr.add(b2.repr)?;
                        (sum, None, None, vec![b1.repr, b2.repr, sum])
                    }
                };
                ForwardOutput {
                    first: b1.repr,
                    first_filled: x_prime,
                    second: Some(b2.repr),
                    combined,
                    imputed: fill(combined)?,
                    combining_weights: eta,
                    attention,
                    representations,
                    layer_weights: [b1.all_weights, b2.all_weights].concat(),
                }
            }
            Architecture::Triple { blocks, combine } => {
                let b1 = blocks[0].forward(cx, x, mask, pe, diag, p)?;
                let x_prime = fill(b1.repr)?;
                let b2 = blocks[1].forward(cx, x_prime, mask, pe, diag, p)?;
                if combine.is_empty() {
                    // Block 3 reads the gaps filled by block 2; output is the sum of all three.
                    let b3 = blocks[2].forward(cx, fill(b2.repr)?, mask, pe, diag, p)?;
                    let sum = b1.repr.add(b2.repr)?.add(b3.repr)?;
                    ForwardOutput {
                        first: b1.repr,
                        first_filled: x_prime,
                        second: Some(b2.repr),
                        combined: sum,
                        imputed: fill(sum)?,
                        combining_weights: None,
                        attention: None,
                        representations: vec![b1.repr, b2.repr, b3.repr, sum],
                        layer_weights: [b1.all_weights, b2.all_weights, b3.all_weights].concat(),
                    }
                } else {
                    // The first blend imputes block 3's input; block 3 and the first
                    // blend are blended again.
                    let c1 = combine[0].forward(cx, b1.repr, b2.repr, b2.last_weights, mask)?;
                    let b3 = blocks[2].forward(cx, fill(c1.repr)?, mask, pe, diag, p)?;
                    let c2 = combine[1].forward(cx, c1.repr, b3.repr, b3.last_weights, mask)?;
                    ForwardOutput {
                        first: b1.repr,
                        first_filled: x_prime,
                        second: Some(b2.repr),
                        combined: c2.repr,
                        imputed: fill(c2.repr)?,
                        combining_weights: Some(c2.eta),
                        attention: Some(c2.attention),
                        representations: vec![b1.repr, b2.repr, c1.repr, b3.repr, c2.repr],
                        layer_weights: [b1.all_weights, b2.all_weights, b3.all_weights].concat(),
                    }
                }
            }
        };
        Ok(out)
    }

    /// Evaluation-mode imputation in chunks of `batch` samples. Returns the
    /// imputed tensor `X̂_c` and the final representation.
    pub fn impute(&self, x: &Tensor, mask: &Tensor, batch: usize) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let batch = batch.max(1);
        let mut imputed = Vec::with_capacity(x.numel());
        let mut combined = Vec::with_capacity(x.numel());
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let xb = x.narrow0(start, len)?;
            let mb = mask.narrow0(start, len)?;
            let tape = Tape::new();
            let cx = Ctx::eval(&tape, self.params.bind_frozen(&tape));
            let out = self.forward(&cx, &xb, &mb)?;
            imputed.extend_from_slice(out.imputed.value().data());
            combined.extend_from_slice(out.combined.value().data());
            start += len;
        }
        Ok((
            Tensor::new(x.shape().to_vec(), imputed)?,
            Tensor::new(x.shape().to_vec(), combined)?,
        ))
    }
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss<'t> {
    /// `L_ORT + λ · L_MIT` (or the single active term).
    pub total: Var<'t>,
    pub ort: Option<Var<'t>>,
    pub mit: Option<Var<'t>>,
}

/// Joint objective:
/// `L_ORT = mean_r ℓ(r, X, M̂)` over the model's representations,
/// `L_MIT = ℓ(X̂_c, X, I)`, `L = L_ORT + λ · L_MIT`.
///
/// `transformer_ort_only` keeps only `L_ORT`; `transformer_mit_only` keeps
/// only `L_MIT`. An empty `M̂` drops the reconstruction term; an empty `I`
/// is an error whenever the imputation term carries weight.
pub fn joint_loss<'t>(
    out: &ForwardOutput<'t>,
    target: &Tensor,
    m_hat: &Tensor,
    indicating: &Tensor,
    mit_weight: f64,
    objective: Objective,
) -> Result<JointLoss<'t>> {
    let ort = if objective != Objective::MitOnly && m_hat.sum() > 0.0 {
        let mut acc: Option<Var<'t>> = None;
        for r in &out.representations {
            let term = r.masked_mae(target, m_hat)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        acc.map(|a| a.scale(1.0 / out.representations.len() as f64))
    } else {
        None
    };
    let mit_needed = match objective {
        Objective::Joint => mit_weight > 0.0,
        Objective::MitOnly => true,
        Objective::OrtOnly => false,
    };
    let mit = if mit_needed {
        Some(out.imputed.masked_mae(target, indicating)?)
    } else {
        None
    };
    let total = match (objective, ort, mit) {
        (Objective::MitOnly, _, Some(m)) => m,
        (_, Some(o), Some(m)) => o.add(m.scale(mit_weight))?,
        (_, Some(o), None) => o,
        (_, None, Some(m)) => m.scale(mit_weight),
        (_, None, None) => return Err(saits_tensor::TensorError::EmptyMask.into()),
    };
    Ok(JointLoss { total, ort, mit })
}
