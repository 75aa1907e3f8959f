//! Parameter-efficient adaptation methods over a shared frozen model.
//!
//! Eight methods share one attachment mechanism: full fine-tuning, LoRA,
//! vanilla soft prompt tuning (encoder / decoder / entire), deep prompt
//! tuning, residual prompt tuning, language prompt tuning, their
//! composition, and whole-model tuning with soft prompts. [`attach`]
//! partitions every parameter into exactly one of {frozen, trainable} and
//! produces a [`ParamAccount`] whose symbolic formula is checked against a
//! live enumeration. Adapter parameters are appended after the base set, so
//! [`AttachedAdapter::detach`] is a truncation that provably restores the
//! base model for every frozen-base method.

mod account;

pub use account::{account_presets, symbolic_account, ParamAccount, PresetReport, PresetRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, HasParams, NodeId};
use crate::model::{AttnKind, ForwardAdapter, Model, Proj, ProjSite, Side};
use crate::tensor::{seed_for, ParamId, ParamStore, Tensor};

/// Initialization scale for prompt matrices and LoRA A factors.
const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fft,
    Lora,
    VanillaSpt,
    Dpt,
    ResPt,
    Lpt,
    Spt4Asr,
    WholeModelSpt,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Fft => "FFT",
            Method::Lora => "LoRA",
            Method::VanillaSpt => "Vanilla SPT",
            Method::Dpt => "+ DPT",
            Method::ResPt => "+ ResPT",
            Method::Lpt => "+ LPT",
            Method::Spt4Asr => "SPT4ASR",
            Method::WholeModelSpt => "Whole model SPT",
        }
    }

    pub fn all() -> [Method; 8] {
        [
            Method::Fft,
            Method::Lora,
            Method::VanillaSpt,
            Method::Dpt,
            Method::ResPt,
            Method::Lpt,
            Method::Spt4Asr,
            Method::WholeModelSpt,
        ]
    }

    /// Frozen-base methods can be detached back into the pristine model.
    pub fn mutates_base(self) -> bool {
        matches!(self, Method::Fft | Method::WholeModelSpt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPosition {
    Encoder,
    Decoder,
    Entire,
}

impl PromptPosition {
    pub fn label(self) -> &'static str {
        match self {
            PromptPosition::Encoder => "Encoder",
            PromptPosition::Decoder => "Decoder",
            PromptPosition::Entire => "Entire",
        }
    }
}

/// Declarative description of one tuning method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub method: Method,
    /// which side(s) receive input-level prompts (SPT variants)
    pub position: PromptPosition,
    pub n_enc: usize,
    pub n_dec: usize,
    /// per-block deep prompt length; deep prompts overwrite existing
    /// prompt slots, so `n_deep <= n` on every prompted side
    pub n_deep: usize,
    /// shared reparameterization MLP bottleneck; `None` resolves to e/2
    pub respt_bottleneck: Option<usize>,
    pub lpt_hidden: usize,
    /// ordered languages fed to language prompt tuning; empty resolves to
    /// every language registered on the model
    pub lpt_langs: Vec<String>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<Proj>,
    /// reserved decoder budget for target tokens; the Table-2 context rule
    /// rejects specs where prompts + prefix + budget exceed the decoder
    pub target_budget: usize,
    pub seed: u64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            method: Method::VanillaSpt,
            position: PromptPosition::Entire,
            n_enc: 128,
            n_dec: 128,
            n_deep: 64,
            respt_bottleneck: None,
            lpt_hidden: 512,
            lpt_langs: Vec::new(),
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: vec![Proj::Q, Proj::V],
            target_budget: 130,
            seed: 0,
        }
    }
}

impl AdapterSpec {
    pub fn new(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn with_position(mut self, position: PromptPosition) -> Self {
        self.position = position;
        self
    }

    pub fn with_prompt_len(mut self, n: usize) -> Self {
        self.n_enc = n;
        self.n_dec = n;
        self
    }

    /// Effective input-prompt lengths per side under `position`.
    pub fn prompt_lens(&self) -> (usize, usize) {
        if !self.uses_prompts() {
            return (0, 0);
        }
        match self.position {
            PromptPosition::Encoder => (self.n_enc, 0),
            PromptPosition::Decoder => (0, self.n_dec),
            PromptPosition::Entire => (self.n_enc, self.n_dec),
        }
    }

    pub fn uses_prompts(&self) -> bool {
        !matches!(self.method, Method::Fft | Method::Lora)
    }

    pub fn uses_deep(&self) -> bool {
        matches!(self.method, Method::Dpt | Method::Spt4Asr)
    }

    pub fn uses_respt(&self) -> bool {
        matches!(self.method, Method::ResPt | Method::Spt4Asr)
    }

    pub fn uses_lpt(&self) -> bool {
        matches!(self.method, Method::Lpt | Method::Spt4Asr)
    }

    pub fn uses_lora(&self) -> bool {
        matches!(self.method, Method::Lora)
    }

    pub fn base_trainable(&self) -> bool {
        self.method.mutates_base()
    }

    pub fn resolved_bottleneck(&self, d_model: usize) -> usize {
        self.respt_bottleneck.unwrap_or(d_model / 2)
    }

    fn validate(&self, model: &Model) -> Result<()> {
        let config = model.config();
        if self.method == Method::Spt4Asr && self.position != PromptPosition::Entire {
            return Err(Error::Config(
                "spt4asr composes prompts on both sides; position must be entire".into(),
            ));
        }
        let (n_enc, n_dec) = self.prompt_lens();
        if self.uses_deep() && self.n_deep > 0 {
            if n_enc == 0 && n_dec == 0 {
                return Err(Error::Config(
                    "deep prompts overwrite vanilla prompt slots; enable vanilla prompts first"
                        .into(),
                ));
            }
            for (side, n) in [("encoder", n_enc), ("decoder", n_dec)] {
                if n > 0 && self.n_deep > n {
                    return Err(Error::Config(format!(
                        "n_deep {} exceeds {side} prompt length {n}; deep prompts overwrite \
                         existing prompt slots",
                        self.n_deep
                    )));
                }
            }
        }
        if self.uses_prompts() && n_enc == 0 && n_dec == 0 {
            return Err(Error::Config("prompt method with zero prompt length on every side".into()));
        }
        if self.uses_lora() {
            if self.lora_rank == 0 {
                return Err(Error::Config("lora_rank must be >= 1".into()));
            }
            if self.lora_alpha <= 0.0 {
                return Err(Error::Config("lora_alpha must be > 0".into()));
            }
            if self.lora_targets.is_empty() {
                return Err(Error::Config("lora_targets must be nonempty".into()));
            }
        }
        if self.uses_lpt() {
            for lang in &self.lpt_langs {
                model.tokens().lid_of(lang)?;
            }
        }
        if n_dec > 0 {
            let needed = n_dec + 4 + self.target_budget;
            let limit = config.max_target_positions;
            if needed > limit {
                return Err(Error::DecoderContextLimit { needed, limit });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LoraPair {
    a: ParamId,
    b: ParamId,
}

/// A tuning method attached to a model: the parameter partition is set, the
/// prompt bank and LoRA factors exist, and the account is verified.
#[derive(Debug)]
pub struct AttachedAdapter {
    model: Model,
    spec: AdapterSpec,
    p_enc: Option<ParamId>,
    p_dec: Option<ParamId>,
    p_deep_enc: Vec<ParamId>,
    p_deep_dec: Vec<ParamId>,
    respt: Option<MlpIds>,
    lpt: Option<MlpIds>,
    lpt_langs: Vec<String>,
    lora: Vec<(ProjSite, LoraPair)>,
    account: ParamAccount,
}

/// Attaches a tuning method. Frozen-base methods leave every base parameter
/// with `trainable == false`; FFT and whole-model SPT keep the base
/// trainable. Adapter parameters are always trainable and appended after
/// the base set.
pub fn attach(mut model: Model, spec: AdapterSpec) -> Result<AttachedAdapter> {
    spec.validate(&model)?;
    let e = model.config().d_model;
    let seed = spec.seed;

    model.store_mut().set_all_trainable(spec.base_trainable());

    let (n_enc, n_dec) = spec.prompt_lens();
    let new_param = |store: &mut ParamStore, name: String, rows: usize, cols: usize, zero: bool| {
        let t = if zero {
            Tensor::zeros(rows, cols)
        } else {
            Tensor::gaussian(rows, cols, ADAPTER_INIT_STD, seed_for(seed, &name))
        };
        store.insert(name, t, true)
    };

    let p_enc = if n_enc > 0 {
        Some(new_param(model.store_mut(), "adapter.prompt.encoder".into(), n_enc, e, false)?)
    } else {
        None
    };
    let p_dec = if n_dec > 0 {
        Some(new_param(model.store_mut(), "adapter.prompt.decoder".into(), n_dec, e, false)?)
    } else {
        None
    };

    let mut p_deep_enc = Vec::new();
    let mut p_deep_dec = Vec::new();
    if spec.uses_deep() && spec.n_deep > 0 {
        if n_enc > 0 {
            for i in 0..model.config().n_enc_blocks {
                p_deep_enc.push(new_param(
                    model.store_mut(),
                    format!("adapter.prompt.deep.encoder.block{i}"),
                    spec.n_deep,
                    e,
                    false,
                )?);
            }
        }
        if n_dec > 0 {
            for i in 0..model.config().n_dec_blocks {
                p_deep_dec.push(new_param(
                    model.store_mut(),
                    format!("adapter.prompt.deep.decoder.block{i}"),
                    spec.n_deep,
                    e,
                    false,
                )?);
            }
        }
    }

    // Bottleneck MLPs start as identities: Gaussian input layer, zero
    // output layer, residual skip applied at use sites.
    let mlp = |store: &mut ParamStore, prefix: &str, hidden: usize| -> Result<MlpIds> {
        let fc1_w = new_param(store, format!("{prefix}.fc1.weight"), e, hidden, false)?;
        let fc1_b = store.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(1, hidden), true)?;
        let fc2_w = store.insert(format!("{prefix}.fc2.weight"), Tensor::zeros(hidden, e), true)?;
        let fc2_b = store.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(1, e), true)?;
        Ok(MlpIds { fc1_w, fc1_b, fc2_w, fc2_b })
    };

    let respt = if spec.uses_respt() {
        let b = spec.resolved_bottleneck(e);
        Some(mlp(model.store_mut(), "adapter.respt", b)?)
    } else {
        None
    };
    let lpt = if spec.uses_lpt() {
        Some(mlp(model.store_mut(), "adapter.lpt", spec.lpt_hidden)?)
    } else {
        None
    };
    let lpt_langs = if spec.uses_lpt() {
        if spec.lpt_langs.is_empty() { model.langs() } else { spec.lpt_langs.clone() }
    } else {
        Vec::new()
    };

    let mut lora = Vec::new();
    if spec.uses_lora() {
        let r = spec.lora_rank;
        let mut sites: Vec<(Side, usize, AttnKind, &str)> = Vec::new();
        for block in 0..model.config().n_enc_blocks {
            sites.push((Side::Encoder, block, AttnKind::SelfAttn, "encoder"));
        }
        for block in 0..model.config().n_dec_blocks {
            sites.push((Side::Decoder, block, AttnKind::SelfAttn, "decoder"));
            sites.push((Side::Decoder, block, AttnKind::CrossAttn, "decoder"));
        }
        for (side, block, kind, side_name) in sites {
            let kind_name = match kind {
                AttnKind::SelfAttn => {
                    if side == Side::Encoder {
                        "attn"
                    } else {
                        "self_attn"
                    }
                }
                AttnKind::CrossAttn => "cross_attn",
            };
            for &proj in &spec.lora_targets {
                let tag = match proj {
                    Proj::Q => "q_proj",
                    Proj::K => "k_proj",
                    Proj::V => "v_proj",
                    Proj::O => "o_proj",
                };
                let prefix = format!("adapter.lora.{side_name}.block{block}.{kind_name}.{tag}");
                let a = new_param(model.store_mut(), format!("{prefix}.a"), r, e, false)?;
                let b = model.store_mut().insert(format!("{prefix}.b"), Tensor::zeros(e, r), true)?;
                lora.push((ProjSite { side, block, kind, proj }, LoraPair { a, b }));
            }
        }
    }

    let account = account::build_account(&model, &spec)?;
    Ok(AttachedAdapter {
        model,
        spec,
        p_enc,
        p_dec,
        p_deep_enc,
        p_deep_dec,
        respt,
        lpt,
        lpt_langs,
        lora,
        account,
    })
}

impl AttachedAdapter {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn account(&self) -> &ParamAccount {
        &self.account
    }

    /// Recomputes the account from the live parameter partition and checks
    /// it against the symbolic formula.
    pub fn count_params(&self) -> Result<ParamAccount> {
        account::build_account(&self.model, &self.spec)
    }

    /// Drops the adapter and restores the base model. Rejected for methods
    /// that mutated the base.
    pub fn detach(self) -> Result<Model> {
        if self.spec.method.mutates_base() {
            return Err(Error::InvalidArg(format!(
                "detach: {} mutated the base model",
                self.spec.method.label()
            )));
        }
        let mut model = self.model;
        let base_len = model.base_param_len();
        model.store_mut().truncate(base_len);
        model.store_mut().set_all_trainable(true);
        Ok(model)
    }

    /// The reparameterization `P + MLP(P)` with the shared bottleneck MLP,
    /// applied when residual prompt tuning is active.
    fn maybe_respt(&self, g: &mut Graph, prompts: NodeId) -> Result<NodeId> {
        let Some(mlp) = &self.respt else { return Ok(prompts) };
        let refined = self.mlp_forward(g, mlp, prompts)?;
        g.add(prompts, refined)
    }

    fn mlp_forward(&self, g: &mut Graph, mlp: &MlpIds, x: NodeId) -> Result<NodeId> {
        let fc1_w = g.param(self.model.store(), mlp.fc1_w);
        let fc1_b = g.param(self.model.store(), mlp.fc1_b);
        let fc2_w = g.param(self.model.store(), mlp.fc2_w);
        let fc2_b = g.param(self.model.store(), mlp.fc2_b);
        let h = g.affine(x, fc1_w, fc1_b)?;
        let h = g.gelu(h)?;
        g.affine(h, fc2_w, fc2_b)
    }

    /// Language prompt rows: the language-id embedding rows passed through
    /// the trainable language encoder with a residual skip, in `lpt_langs`
    /// order.
    fn lang_prompt_rows(&self, g: &mut Graph) -> Result<Option<NodeId>> {
        let Some(mlp) = &self.lpt else { return Ok(None) };
        let ids: Vec<usize> = self
            .lpt_langs
            .iter()
            .map(|lang| self.model.tokens().lid_of(lang))
            .collect::<Result<_>>()?;
        let embed = g.param(self.model.store(), self.model.embed_id());
        let rows = g.embedding_lookup(embed, &ids)?;
        let encoded = self.mlp_forward(g, mlp, rows)?;
        Ok(Some(g.add(rows, encoded)?))
    }

    /// Overwrites the first `n_deep` prompt slots of a block output with a
    /// fresh learned matrix; remaining rows pass through unchanged.
    fn deep_inject(&self, g: &mut Graph, prompt: ParamId, hidden: NodeId) -> Result<NodeId> {
        let fresh = g.param(self.model.store(), prompt);
        let fresh = self.maybe_respt(g, fresh)?;
        let n_deep = g.value(fresh).rows();
        let total = g.value(hidden).rows();
        let rest = g.slice_rows(hidden, n_deep, total - n_deep)?;
        g.concat_rows(&[fresh, rest])
    }

    // ── convenience forwards ────────────────────────────────────────

    pub fn encode(&self, g: &mut Graph, feats: &Tensor) -> Result<NodeId> {
        self.model.encode(g, feats, self)
    }

    pub fn decode_forward(
        &self,
        g: &mut Graph,
        memory: NodeId,
        prefix: &[usize],
        targets: &[usize],
    ) -> Result<crate::model::DecodeOutput> {
        self.model.decode_forward(g, memory, prefix, targets, self)
    }

    pub fn greedy_decode(&self, feats: &Tensor, lang: &str, max_new: usize) -> Result<Vec<usize>> {
        self.model.greedy_decode(feats, self, lang, max_new)
    }
}

impl HasParams for AttachedAdapter {
    fn params(&self) -> &ParamStore {
        self.model.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.store_mut()
    }
}

impl ForwardAdapter for AttachedAdapter {
    fn encoder_prompts(&self, g: &mut Graph, _model: &Model) -> Result<Option<NodeId>> {
        let mut parts = Vec::new();
        if let Some(lang_rows) = self.lang_prompt_rows(g)? {
            parts.push(lang_rows);
        }
        if let Some(p_enc) = self.p_enc {
            let prompts = g.param(self.model.store(), p_enc);
            parts.push(self.maybe_respt(g, prompts)?);
        }
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts[0])),
            _ => Ok(Some(g.concat_rows(&parts)?)),
        }
    }

    fn decoder_prompts(&self, g: &mut Graph, _model: &Model) -> Result<Option<NodeId>> {
        let Some(p_dec) = self.p_dec else { return Ok(None) };
        let prompts = g.param(self.model.store(), p_dec);
        Ok(Some(self.maybe_respt(g, prompts)?))
    }

    fn block_output(
        &self,
        g: &mut Graph,
        _model: &Model,
        side: Side,
        block: usize,
        hidden: NodeId,
    ) -> Result<NodeId> {
        let prompt = match side {
            Side::Encoder => self.p_deep_enc.get(block),
            Side::Decoder => self.p_deep_dec.get(block),
        };
        match prompt {
            Some(&p) => self.deep_inject(g, p, hidden),
            None => Ok(hidden),
        }
    }

    fn projection(&self, g: &mut Graph, model: &Model, site: ProjSite, x: NodeId) -> Result<NodeId> {
        let base = model.base_projection(g, site, x)?;
        let Some((_, pair)) = self.lora.iter().find(|(s, _)| *s == site) else {
            return Ok(base);
        };
        // W·x + (α/r)·B·(A·x), in row-major form x·Aᵀ·Bᵀ
        let a = g.param(self.model.store(), pair.a);
        let b = g.param(self.model.store(), pair.b);
        let xa = g.matmul_nt(x, a)?;
        let xab = g.matmul_nt(xa, b)?;
        let scaled = g.scale(xab, self.spec.lora_alpha / self.spec.lora_rank as f64)?;
        g.add(base, scaled)
    }
}
