//! Whisper-shaped encoder-decoder transformer at configurable scale.
//!
//! The encoder consumes a projected feature sequence with learned positional
//! embeddings; the decoder is steered by a special-token prefix
//! (start-of-transcript, language id, task, no-timestamps) and predicts text
//! tokens autoregressively. The output projection is the token embedding
//! matrix transposed (weight tying). Soft prompts and LoRA enter through the
//! [`ForwardAdapter`] hooks in [`forward`].

mod forward;

pub use forward::{AttnKind, DecodeOutput, ForwardAdapter, NoAdapter, Proj, ProjSite, Side};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{seed_for, ParamId, ParamStore, Tensor};

/// Initialization scale for all weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Architecture dimensions. Parameter count is a pure function of this
/// struct (checked by the accountant in `peft::account`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// embedding width `e`
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    /// feed-forward width = `ffn_mult * d_model`
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// raw feature dimension before the affine frontend
    pub d_feat: usize,
    pub max_source_positions: usize,
    pub max_target_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: the whole experiment grid runs in minutes on CPU.
    pub fn toy(seed: u64) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            ffn_mult: 4,
            vocab_size: 64,
            d_feat: 16,
            max_source_positions: 512,
            max_target_positions: 384,
            seed,
        }
    }

    /// Whisper-small dimensions, used by the accountant only.
    pub fn whisper_small_preset() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_enc_blocks: 12,
            n_dec_blocks: 12,
            ffn_mult: 4,
            vocab_size: 51865,
            d_feat: 80,
            max_source_positions: 1500,
            max_target_positions: 448,
            seed: 0,
        }
    }

    /// Whisper-medium dimensions, used by the accountant only.
    pub fn whisper_medium_preset() -> Self {
        Self {
            d_model: 1024,
            n_heads: 16,
            n_enc_blocks: 24,
            n_dec_blocks: 24,
            ffn_mult: 4,
            vocab_size: 51865,
            d_feat: 80,
            max_source_positions: 1500,
            max_target_positions: 448,
            seed: 0,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self, n_langs: usize) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.n_enc_blocks,
            self.n_dec_blocks,
            self.ffn_mult,
            self.vocab_size,
            self.d_feat,
            self.max_source_positions,
            self.max_target_positions,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let special = SPECIAL_TOKEN_COUNT + n_langs;
        if self.vocab_size < special + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for {special} special tokens plus 2 text tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Count of non-language special tokens: SOT, EOT, TRANSCRIBE,
/// NOTIMESTAMPS, PREV.
pub const SPECIAL_TOKEN_COUNT: usize = 5;

/// Special-token vocabulary layout. Text tokens occupy `[0, first_special)`,
/// specials sit at the top of the vocabulary, language ids last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialTokenMap {
    pub sot: usize,
    pub eot: usize,
    pub transcribe: usize,
    pub notimestamps: usize,
    pub prev: usize,
    /// language name → token id, in registration order
    pub lid: Vec<(String, usize)>,
    pub first_special: usize,
}

impl SpecialTokenMap {
    pub fn new(vocab_size: usize, langs: &[String]) -> Result<Self> {
        let special = SPECIAL_TOKEN_COUNT + langs.len();
        if vocab_size < special + 2 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} too small for {special} special tokens plus 2 text tokens"
            )));
        }
        let first_special = vocab_size - special;
        let mut lid = Vec::with_capacity(langs.len());
        for (i, lang) in langs.iter().enumerate() {
            if langs[..i].contains(lang) {
                return Err(Error::Config(format!("duplicate language {lang}")));
            }
            lid.push((lang.clone(), first_special + SPECIAL_TOKEN_COUNT + i));
        }
        Ok(Self {
            sot: first_special,
            eot: first_special + 1,
            transcribe: first_special + 2,
            notimestamps: first_special + 3,
            prev: first_special + 4,
            lid,
            first_special,
        })
    }

    pub fn lid_of(&self, lang: &str) -> Result<usize> {
        self.lid
            .iter()
            .find(|(name, _)| name == lang)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn is_text(&self, token: usize) -> bool {
        token < self.first_special
    }

    /// The decoder input prefix `[SOT, LID(lang), TRANSCRIBE, NOTIMESTAMPS]`.
    /// The preceding previous-context slot stays empty; decoder soft prompts
    /// occupy it when an adapter is attached.
    pub fn decoder_prefix(&self, lang: &str) -> Result<Vec<usize>> {
        Ok(vec![self.sot, self.lid_of(lang)?, self.transcribe, self.notimestamps])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
}

impl AttnParams {
    pub fn of(&self, proj: Proj) -> (ParamId, ParamId) {
        match proj {
            Proj::Q => (self.q_w, self.q_b),
            Proj::K => (self.k_w, self.k_b),
            Proj::V => (self.v_w, self.v_b),
            Proj::O => (self.o_w, self.o_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncBlockParams {
    pub ln1: LnParams,
    pub attn: AttnParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct DecBlockParams {
    pub ln1: LnParams,
    pub self_attn: AttnParams,
    pub ln2: LnParams,
    pub cross_attn: AttnParams,
    pub ln3: LnParams,
    pub ffn: FfnParams,
}

/// The model: config, token map, and the parameter store. Adapters append
/// their parameters after `base_param_len`, so detaching is a truncate.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    tokens: SpecialTokenMap,
    store: ParamStore,
    pub(crate) frontend_w: ParamId,
    pub(crate) frontend_b: ParamId,
    pub(crate) enc_pos: ParamId,
    pub(crate) dec_pos: ParamId,
    pub(crate) embed: ParamId,
    pub(crate) enc_blocks: Vec<EncBlockParams>,
    pub(crate) dec_blocks: Vec<DecBlockParams>,
    pub(crate) enc_ln_post: LnParams,
    pub(crate) dec_ln_post: LnParams,
    base_param_len: usize,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let t = Tensor::gaussian(rows, cols, INIT_STD, seed_for(self.seed, &name));
        self.store.insert(name, t, true)
    }

    fn zeros(&mut self, name: String, cols: usize) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(1, cols), true)
    }

    fn ln(&mut self, prefix: &str, e: usize) -> Result<LnParams> {
        let gain = self.store.insert(format!("{prefix}.gain"), Tensor::full(1, e, 1.0), true)?;
        let bias = self.zeros(format!("{prefix}.bias"), e)?;
        Ok(LnParams { gain, bias })
    }

    fn attn(&mut self, prefix: &str, e: usize) -> Result<AttnParams> {
        let proj = |tag: &str, init: &mut Self| -> Result<(ParamId, ParamId)> {
            let w = init.weight(format!("{prefix}.{tag}_proj.weight"), e, e)?;
            let b = init.zeros(format!("{prefix}.{tag}_proj.bias"), e)?;
            Ok((w, b))
        };
        let (q_w, q_b) = proj("q", self)?;
        let (k_w, k_b) = proj("k", self)?;
        let (v_w, v_b) = proj("v", self)?;
        let (o_w, o_b) = proj("o", self)?;
        Ok(AttnParams { q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b })
    }

    fn ffn(&mut self, prefix: &str, e: usize, f: usize) -> Result<FfnParams> {
        let w1 = self.weight(format!("{prefix}.fc1.weight"), e, f)?;
        let b1 = self.zeros(format!("{prefix}.fc1.bias"), f)?;
        let w2 = self.weight(format!("{prefix}.fc2.weight"), f, e)?;
        let b2 = self.zeros(format!("{prefix}.fc2.bias"), e)?;
        Ok(FfnParams { w1, b1, w2, b2 })
    }
}

impl Model {
    /// Builds a model with every parameter trainable. Weights are seeded
    /// Gaussian (std 0.02) keyed by parameter name, layer-norm gains start
    /// at 1, all biases at 0.
    pub fn build(config: ModelConfig, langs: &[String]) -> Result<Self> {
        config.validate(langs.len())?;
        let tokens = SpecialTokenMap::new(config.vocab_size, langs)?;
        let e = config.d_model;
        let f = config.ffn_width();
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed: config.seed };

        let frontend_w = init.weight("frontend.weight".into(), config.d_feat, e)?;
        let frontend_b = init.zeros("frontend.bias".into(), e)?;
        let enc_pos = init.weight("encoder.pos_embed".into(), config.max_source_positions, e)?;
        let dec_pos = init.weight("decoder.pos_embed".into(), config.max_target_positions, e)?;
        let embed = init.weight("decoder.token_embed".into(), config.vocab_size, e)?;

        let mut enc_blocks = Vec::with_capacity(config.n_enc_blocks);
        for i in 0..config.n_enc_blocks {
            let p = format!("encoder.block{i}");
            enc_blocks.push(EncBlockParams {
                ln1: init.ln(&format!("{p}.ln1"), e)?,
                attn: init.attn(&format!("{p}.attn"), e)?,
                ln2: init.ln(&format!("{p}.ln2"), e)?,
                ffn: init.ffn(&format!("{p}.ffn"), e, f)?,
            });
        }
        let enc_ln_post = init.ln("encoder.ln_post", e)?;

        let mut dec_blocks = Vec::with_capacity(config.n_dec_blocks);
        for i in 0..config.n_dec_blocks {
            let p = format!("decoder.block{i}");
            dec_blocks.push(DecBlockParams {
                ln1: init.ln(&format!("{p}.ln1"), e)?,
                self_attn: init.attn(&format!("{p}.self_attn"), e)?,
                ln2: init.ln(&format!("{p}.ln2"), e)?,
                cross_attn: init.attn(&format!("{p}.cross_attn"), e)?,
                ln3: init.ln(&format!("{p}.ln3"), e)?,
                ffn: init.ffn(&format!("{p}.ffn"), e, f)?,
            });
        }
        let dec_ln_post = init.ln("decoder.ln_post", e)?;

        let base_param_len = store.len();
        Ok(Self {
            config,
            tokens,
            store,
            frontend_w,
            frontend_b,
            enc_pos,
            dec_pos,
            embed,
            enc_blocks,
            dec_blocks,
            enc_ln_post,
            dec_ln_post,
            base_param_len,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn langs(&self) -> Vec<String> {
        self.tokens.lid.iter().map(|(name, _)| name.clone()).collect()
    }

    pub fn tokens(&self) -> &SpecialTokenMap {
        &self.tokens
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Store length right after the base build; adapter parameters always
    /// live past this index.
    pub fn base_param_len(&self) -> usize {
        self.base_param_len
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    /// Total base parameter count, as counted from the live store.
    pub fn base_param_count(&self) -> u64 {
        self.store
            .iter()
            .take(self.base_param_len)
            .map(|(_, p)| p.tensor.numel() as u64)
            .sum()
    }

    /// Symbolic base parameter count: a pure function of the config.
    pub fn symbolic_base_count(config: &ModelConfig) -> u64 {
        let e = config.d_model as u64;
        let f = config.ffn_width() as u64;
        let attn = 4 * (e * e + e);
        let ln = 2 * e;
        let ffn = e * f + f + f * e + e;
        let enc_block = ln + attn + ln + ffn;
        let dec_block = ln + attn + ln + attn + ln + ffn;
        (config.d_feat as u64) * e + e
            + (config.max_source_positions as u64) * e
            + (config.max_target_positions as u64) * e
            + (config.vocab_size as u64) * e
            + (config.n_enc_blocks as u64) * enc_block
            + (config.n_dec_blocks as u64) * dec_block
            + 2 * ln
    }
}

impl crate::graph::HasParams for Model {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = Model::build(ModelConfig::toy(7), &langs(&["A", "B"])).unwrap();
        let b = Model::build(ModelConfig::toy(7), &langs(&["A", "B"])).unwrap();
        for ((_, pa), (_, pb)) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.values(), pb.tensor.values());
        }
        let c = Model::build(ModelConfig::toy(8), &langs(&["A", "B"])).unwrap();
        let differs = a
            .store()
            .iter()
            .zip(c.store().iter())
            .any(|((_, pa), (_, pc))| pa.tensor.values() != pc.tensor.values());
        assert!(differs);
    }

    #[test]
    fn build_rejects_indivisible_heads() {
        let mut config = ModelConfig::toy(0);
        config.d_model = 63;
        assert!(Model::build(config, &langs(&["A"])).is_err());
    }

    #[test]
    fn live_count_matches_symbolic_count() {
        let model = Model::build(ModelConfig::toy(1), &langs(&["A", "B", "C"])).unwrap();
        assert_eq!(model.base_param_count(), Model::symbolic_base_count(model.config()));
    }

    #[test]
    fn all_params_start_trainable() {
        let model = Model::build(ModelConfig::toy(2), &langs(&["A"])).unwrap();
        assert!(model.store().iter().all(|(_, p)| p.trainable));
    }

    #[test]
    fn special_tokens_are_distinct_and_top_of_vocab() {
        let map = SpecialTokenMap::new(64, &langs(&["A", "B", "C"])).unwrap();
        let mut ids = vec![map.sot, map.eot, map.transcribe, map.notimestamps, map.prev];
        ids.extend(map.lid.iter().map(|(_, id)| *id));
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
        assert!(ids.iter().all(|&id| id < 64));
        assert_eq!(map.first_special, 64 - 8);
        assert!(map.is_text(map.first_special - 1));
        assert!(!map.is_text(map.sot));
    }

    #[test]
    fn decoder_prefix_is_four_tokens_with_lang_slot() {
        let map = SpecialTokenMap::new(64, &langs(&["A", "B"])).unwrap();
        let ga = map.decoder_prefix("A").unwrap();
        assert_eq!(ga.len(), 4);
        assert_eq!(ga, vec![map.sot, map.lid_of("A").unwrap(), map.transcribe, map.notimestamps]);
        let gb = map.decoder_prefix("B").unwrap();
        assert_eq!(gb[1], map.lid_of("B").unwrap());
        assert_eq!(ga[0], gb[0]);
        assert!(map.decoder_prefix("Klingon").is_err());
    }

    #[test]
    fn no_separate_output_projection_exists() {
        let model = Model::build(ModelConfig::toy(3), &langs(&["A"])).unwrap();
        assert!(model.store().id_of("decoder.output_proj.weight").is_none());
        assert!(model.store().id_of("decoder.token_embed").is_some());
    }
}
