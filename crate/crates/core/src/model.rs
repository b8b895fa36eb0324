//! Residual encoder with CTC heads at a chosen set of layers.
//!
//! Each encoder layer is
//!
//! ```text
//! u   = h + conv3(h)                     width-3 depth-wise temporal mixing
//! out = u + W2 silu(W1 u + b1) + b2      position-wise feed-forward
//! ```
//!
//! A frontend linear map lifts `F`-dimensional features to width `D`. Heads
//! sit after the layers listed in [`ModelConfig::head_layers`]; for the
//! self-conditioned variants every head below the last one adds
//! `Linear(softmax(logits))` back into the hidden sequence before the next
//! layer runs.

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, CtcError, Posteriorgram};
use crate::nn::{Matrix, NnError, NodeId, ParamId, ParamSet, ParamTensor, Tape};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("head {head}: {source}")]
    Ctc {
        head: usize,
        #[source]
        source: CtcError,
    },
}

impl ModelError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, ModelError::Ctc { source: CtcError::Infeasible { .. }, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Ctc,
    InterCtc,
    ScCtc,
    HcCtc,
}

impl ModelVariant {
    pub fn conditions(self) -> bool {
        matches!(self, ModelVariant::ScCtc | ModelVariant::HcCtc)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Ctc => "ctc",
            ModelVariant::InterCtc => "inter-ctc",
            ModelVariant::ScCtc => "sc-ctc",
            ModelVariant::HcCtc => "hc-ctc",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ctc" => Ok(Self::Ctc),
            "inter-ctc" => Ok(Self::InterCtc),
            "sc-ctc" => Ok(Self::ScCtc),
            "hc-ctc" => Ok(Self::HcCtc),
            other => Err(format!("unknown model variant {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of encoder layers `K`.
    pub layers: usize,
    /// Hidden width `D`.
    pub hidden: usize,
    /// Inner width of the feed-forward block.
    pub ff_hidden: usize,
    /// Input feature dimension `F`.
    pub feature_dim: usize,
    /// 1-based layer indices carrying a CTC head; sorted, ends with `layers`.
    pub head_layers: Vec<usize>,
    pub variant: ModelVariant,
    /// Vocabulary level used by each head.
    pub head_levels: Vec<usize>,
    /// `|V_k|` for each head (blank excluded).
    pub head_vocab_sizes: Vec<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.ff_hidden == 0 || self.feature_dim == 0 {
            return err("layers, hidden, ff_hidden and feature_dim must be positive".into());
        }
        let heads = &self.head_layers;
        if heads.last() != Some(&self.layers) {
            return err(format!("head layers {heads:?} must include the last layer {}", self.layers));
        }
        if heads.windows(2).any(|w| w[0] >= w[1]) || heads[0] == 0 {
            return err(format!("head layers {heads:?} must be strictly increasing from 1"));
        }
        if self.head_levels.len() != heads.len() || self.head_vocab_sizes.len() != heads.len() {
            return err("one vocabulary level and size per head is required".into());
        }
        if self.head_vocab_sizes.iter().any(|&v| v == 0) {
            return err("head vocabularies must be non-empty".into());
        }
        let single = heads.len() == 1;
        if (self.variant == ModelVariant::Ctc) != single {
            return err(format!(
                "variant {} requires {} head(s), got {:?}",
                self.variant,
                if self.variant == ModelVariant::Ctc { "exactly one" } else { "two or more" },
                heads
            ));
        }
        if self.variant == ModelVariant::HcCtc {
            if self.head_vocab_sizes.windows(2).any(|w| w[0] > w[1])
                || self.head_levels.windows(2).any(|w| w[0] > w[1])
            {
                return err("hc-ctc head vocabularies must grow with depth".into());
            }
        } else if self.head_levels.windows(2).any(|w| w[0] != w[1])
            || self.head_vocab_sizes.windows(2).any(|w| w[0] != w[1])
        {
            return err(format!("{} heads must share one vocabulary level", self.variant));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.head_layers.len()
    }

    pub fn last_head(&self) -> usize {
        self.head_layers.len() - 1
    }

    /// Whether head `h` (index into `head_layers`) feeds back into the encoder.
    pub fn head_conditions(&self, h: usize) -> bool {
        self.variant.conditions() && h + 1 < self.head_layers.len()
    }

    pub fn to_meta(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_meta(meta: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(meta).map_err(|e| ModelError::Config(format!("checkpoint metadata: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    conv: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug)]
struct HeadIds {
    w: ParamId,
    b: ParamId,
    cond: Option<(ParamId, ParamId)>,
}

/// Parameter layout plus the forward/backward logic for one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    frontend: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    heads: Vec<HeadIds>,
}

fn layer_names(k: usize) -> [String; 5] {
    [
        format!("layer{k}.conv"),
        format!("layer{k}.ff1.w"),
        format!("layer{k}.ff1.b"),
        format!("layer{k}.ff2.w"),
        format!("layer{k}.ff2.b"),
    ]
}

impl Model {
    /// Enumerate tensor names and shapes in layout order.
    fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (f, d, h) = (cfg.feature_dim, cfg.hidden, cfg.ff_hidden);
        let mut specs = vec![("frontend.w".to_string(), vec![f, d]), ("frontend.b".to_string(), vec![d])];
        for k in 1..=cfg.layers {
            let [conv, w1, b1, w2, b2] = layer_names(k);
            specs.push((conv, vec![3, d]));
            specs.push((w1, vec![d, h]));
            specs.push((b1, vec![h]));
            specs.push((w2, vec![h, d]));
            specs.push((b2, vec![d]));
        }
        for (i, (&k, &v)) in cfg.head_layers.iter().zip(&cfg.head_vocab_sizes).enumerate() {
            specs.push((format!("head{k}.w"), vec![d, v + 1]));
            specs.push((format!("head{k}.b"), vec![v + 1]));
            if cfg.head_conditions(i) {
                specs.push((format!("cond{k}.w"), vec![v + 1, d]));
                specs.push((format!("cond{k}.b"), vec![d]));
            }
        }
        specs
    }

    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut idx = 0usize;
        let mut next = || {
            idx += 1;
            ParamId(idx - 1)
        };
        let frontend = (next(), next());
        let layers = (0..config.layers)
            .map(|_| LayerIds {
                conv: next(),
                ff1_w: next(),
                ff1_b: next(),
                ff2_w: next(),
                ff2_b: next(),
            })
            .collect();
        let heads = (0..config.num_heads())
            .map(|i| HeadIds {
                w: next(),
                b: next(),
                cond: config.head_conditions(i).then(|| (next(), next())),
            })
            .collect();
        Ok(Self {
            config,
            frontend,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape) in Self::tensor_specs(&self.config) {
            let t = if shape.len() == 1 {
                ParamTensor::zeros(&shape)
            } else {
                ParamTensor::glorot(&shape, rng)
            };
            p.push(name, t);
        }
        p
    }

    /// Check that `params` has exactly this model's layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), ModelError> {
        let specs = Self::tensor_specs(&self.config);
        if specs.len() != params.len()
            || specs
                .iter()
                .zip(params.iter())
                .any(|((n, s), (pn, t))| n != pn || s.as_slice() != t.shape())
        {
            return Err(ModelError::Config(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(())
    }

    /// Build parameters for this model from another model's parameters.
    ///
    /// Tensors present in both layouts with equal shapes are copied.
    /// Missing conditioning projections start at zero, so the new model
    /// initially computes the same final posteriors as the source; missing
    /// heads are freshly initialized.
    pub fn cross_initialize<R: rand::Rng + ?Sized>(&self, source: &ParamSet, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape) in Self::tensor_specs(&self.config) {
            let t = match source.by_name(&name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    let mut t = t.clone();
                    t.zero_grad();
                    t
                }
                _ if name.starts_with("cond") || shape.len() == 1 => ParamTensor::zeros(&shape),
                _ => ParamTensor::glorot(&shape, rng),
            };
            p.push(name, t);
        }
        p
    }

    /// Forward pass. `features` is `T x F`.
    pub fn forward(&self, params: &ParamSet, features: &Matrix) -> Result<ModelOutputs, ModelError> {
        let cfg = &self.config;
        if features.cols() != cfg.feature_dim {
            return Err(ModelError::Config(format!(
                "feature dimension {} does not match model input {}",
                features.cols(),
                cfg.feature_dim
            )));
        }
        debug_assert!(self.check_params(params).is_ok());
        let mut tape = Tape::new();
        tape.set_scope("frontend");
        let x = tape.input(features.clone())?;
        let fw = tape.param(params, self.frontend.0)?;
        let fb = tape.param(params, self.frontend.1)?;
        let mut h = tape.linear(x, fw, Some(fb))?;

        let mut head_logits = Vec::with_capacity(cfg.num_heads());
        let mut posteriorgrams = Vec::with_capacity(cfg.num_heads());
        let mut next_head = 0;
        for (k, ids) in self.layers.iter().enumerate() {
            tape.set_scope(format!("layer{}", k + 1));
            h = encoder_layer(&mut tape, params, ids, h)?;
            if cfg.head_layers.get(next_head) == Some(&(k + 1)) {
                let head = &self.heads[next_head];
                tape.set_scope(format!("head{}", k + 1));
                let w = tape.param(params, head.w)?;
                let b = tape.param(params, head.b)?;
                let logits = tape.linear(h, w, Some(b))?;
                let lp = tape.log_softmax(logits)?;
                posteriorgrams.push(
                    Posteriorgram::new(tape.value(lp).clone(), cfg.head_levels[next_head])
                        .map_err(|e| ModelError::Ctc { head: next_head, source: e })?,
                );
                head_logits.push(logits);
                if let Some((cw, cb)) = head.cond {
                    let probs = tape.softmax(logits)?;
                    let cw = tape.param(params, cw)?;
                    let cb = tape.param(params, cb)?;
                    let proj = tape.linear(probs, cw, Some(cb))?;
                    h = tape.add(h, proj)?;
                }
                next_head += 1;
            }
        }
        Ok(ModelOutputs {
            tape,
            head_logits,
            posteriorgrams,
        })
    }

    /// Back-propagate per-head logit gradients into `params`' gradients.
    pub fn backward(
        &self,
        outputs: &ModelOutputs,
        params: &mut ParamSet,
        logit_grads: Vec<(usize, Matrix)>,
    ) -> Result<(), ModelError> {
        let seeds: Vec<(NodeId, Matrix)> = logit_grads
            .into_iter()
            .map(|(h, g)| (outputs.head_logits[h], g))
            .collect();
        outputs.tape.backward(params, &seeds)?;
        Ok(())
    }
}

/// One residual encoder block on the tape.
fn encoder_layer(tape: &mut Tape, params: &ParamSet, ids: &LayerIds, h: NodeId) -> Result<NodeId, NnError> {
    let kernel = tape.param(params, ids.conv)?;
    let mixed = tape.temporal_conv3(h, kernel)?;
    let u = tape.add(h, mixed)?;
    let w1 = tape.param(params, ids.ff1_w)?;
    let b1 = tape.param(params, ids.ff1_b)?;
    let a = tape.linear(u, w1, Some(b1))?;
    let s = tape.silu(a)?;
    let w2 = tape.param(params, ids.ff2_w)?;
    let b2 = tape.param(params, ids.ff2_b)?;
    let f = tape.linear(s, w2, Some(b2))?;
    tape.add(u, f)
}

/// Standalone encoder block, for inspection and tests: returns the output of
/// layer `k` (1-based) applied to `h_prev`.
pub fn encoder_layer_forward(model: &Model, params: &ParamSet, k: usize, h_prev: &Matrix) -> Result<Matrix, ModelError> {
    let ids = model
        .layers
        .get(k.wrapping_sub(1))
        .ok_or_else(|| ModelError::Config(format!("no layer {k}")))?;
    if h_prev.cols() != model.config.hidden {
        return Err(ModelError::Config("hidden width mismatch".into()));
    }
    let mut tape = Tape::new();
    tape.set_scope(format!("layer{k}"));
    let h = tape.input(h_prev.clone())?;
    let out = encoder_layer(&mut tape, params, ids, h)?;
    Ok(tape.value(out).clone())
}

/// Result of [`Model::forward`]: one posteriorgram per head plus the tape
/// needed for the backward pass.
#[derive(Debug)]
pub struct ModelOutputs {
    tape: Tape,
    head_logits: Vec<NodeId>,
    posteriorgrams: Vec<Posteriorgram>,
}

impl ModelOutputs {
    pub fn posteriorgrams(&self) -> &[Posteriorgram] {
        &self.posteriorgrams
    }

    pub fn last(&self) -> &Posteriorgram {
        self.posteriorgrams.last().expect("at least one head")
    }

    pub fn num_heads(&self) -> usize {
        self.posteriorgrams.len()
    }
}

/// Loss value and the logit gradients to feed [`Model::backward`].
#[derive(Clone, Debug)]
pub struct HeadLoss {
    pub loss: f64,
    pub per_head: Vec<Option<f64>>,
    pub logit_grads: Vec<(usize, Matrix)>,
}

impl HeadLoss {
    pub fn scale(&mut self, factor: f64) {
        self.loss *= factor;
        for (_, g) in &mut self.logit_grads {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Equal-weight mean of CTC losses over the heads that have a target.
///
/// `targets[h] = None` excludes head `h` from the objective entirely.
pub fn weighted_head_loss(outputs: &ModelOutputs, targets: &[Option<&[usize]>]) -> Result<HeadLoss, ModelError> {
    if targets.len() != outputs.num_heads() {
        return Err(ModelError::Config(format!(
            "{} targets for {} heads",
            targets.len(),
            outputs.num_heads()
        )));
    }
    let active = targets.iter().filter(|t| t.is_some()).count();
    if active == 0 {
        return Err(ModelError::Config("no head has a target".into()));
    }
    let weight = 1.0 / active as f64;
    let mut loss = 0.0;
    let mut per_head = vec![None; targets.len()];
    let mut logit_grads = Vec::with_capacity(active);
    for (h, target) in targets.iter().enumerate() {
        let Some(target) = target else { continue };
        let r = ctc_loss(&outputs.posteriorgrams[h], target).map_err(|e| ModelError::Ctc { head: h, source: e })?;
        per_head[h] = Some(r.loss);
        loss += r.loss;
        let mut g = r.logit_grads;
        if active > 1 {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= weight);
        }
        logit_grads.push((h, g));
    }
    if active > 1 {
        loss *= weight;
    }
    Ok(HeadLoss {
        loss,
        per_head,
        logit_grads,
    })
}

/// Mean CTC loss over all heads, one target per head.
pub fn intermediate_loss(outputs: &ModelOutputs, targets: &[Vec<usize>]) -> Result<HeadLoss, ModelError> {
    let t: Vec<Option<&[usize]>> = targets.iter().map(|t| Some(t.as_slice())).collect();
    weighted_head_loss(outputs, &t)
}
