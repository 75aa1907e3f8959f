//! Forward passes: encoder, decoder, and greedy decoding.
//!
//! Adapters plug in through [`ForwardAdapter`]: input-level prompt rows,
//! per-block output injection, and projection wrapping (LoRA). The base
//! model is the trivial implementation [`NoAdapter`] — with it,
//! `decode_forward` is exactly the standard architecture forward.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

use super::{AttnParams, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AttnKind {
    SelfAttn,
    CrossAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

/// Identifies one linear projection inside one attention module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProjSite {
    pub side: Side,
    pub block: usize,
    pub kind: AttnKind,
    pub proj: Proj,
}

/// Hooks an adapter uses to participate in the forward pass. Every method
/// defaults to the base-model behavior.
pub trait ForwardAdapter {
    /// Rows concatenated ahead of the projected feature sequence.
    fn encoder_prompts(&self, _g: &mut Graph, _model: &Model) -> Result<Option<NodeId>> {
        Ok(None)
    }

    /// Rows inserted into the previous-context slot ahead of the embedded
    /// decoder prefix.
    fn decoder_prompts(&self, _g: &mut Graph, _model: &Model) -> Result<Option<NodeId>> {
        Ok(None)
    }

    /// Rewrites a block output (deep prompt injection). Must preserve the
    /// sequence length.
    fn block_output(
        &self,
        _g: &mut Graph,
        _model: &Model,
        _side: Side,
        _block: usize,
        hidden: NodeId,
    ) -> Result<NodeId> {
        Ok(hidden)
    }

    /// Computes one attention projection (LoRA wraps this).
    fn projection(&self, g: &mut Graph, model: &Model, site: ProjSite, x: NodeId) -> Result<NodeId> {
        model.base_projection(g, site, x)
    }
}

/// The unadapted base model.
pub struct NoAdapter;

impl ForwardAdapter for NoAdapter {}

/// Decoder forward output plus the row layout needed for loss masks.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOutput {
    pub logits: NodeId,
    /// soft prompt rows ahead of the embedded tokens
    pub prompt_rows: usize,
    /// special-token prefix rows (the sequence `g`)
    pub prefix_rows: usize,
    pub target_rows: usize,
}

impl DecodeOutput {
    pub fn total_rows(&self) -> usize {
        self.prompt_rows + self.prefix_rows + self.target_rows
    }

    /// Rows whose predictions are scored: the last prefix row through the
    /// last target row, predicting `y_1..y_T` then end-of-transcript.
    pub fn loss_layout(&self, targets: &[usize], eot: usize) -> (Vec<usize>, Vec<bool>) {
        let total = self.total_rows();
        let first = self.prompt_rows + self.prefix_rows - 1;
        let mut target_ids = vec![0usize; total];
        let mut mask = vec![false; total];
        for (i, &t) in targets.iter().enumerate() {
            target_ids[first + i] = t;
            mask[first + i] = true;
        }
        target_ids[first + targets.len()] = eot;
        mask[first + targets.len()] = true;
        (target_ids, mask)
    }
}

impl Model {
    pub(crate) fn base_projection(
        &self,
        g: &mut Graph,
        site: ProjSite,
        x: NodeId,
    ) -> Result<NodeId> {
        let attn = self.attn_params(site);
        let (w, b) = attn.of(site.proj);
        let wn = g.param(self.store(), w);
        let bn = g.param(self.store(), b);
        g.affine(x, wn, bn)
    }

    pub(crate) fn attn_params(&self, site: ProjSite) -> &AttnParams {
        match (site.side, site.kind) {
            (Side::Encoder, AttnKind::SelfAttn) => &self.enc_blocks[site.block].attn,
            (Side::Decoder, AttnKind::SelfAttn) => &self.dec_blocks[site.block].self_attn,
            (Side::Decoder, AttnKind::CrossAttn) => &self.dec_blocks[site.block].cross_attn,
            (Side::Encoder, AttnKind::CrossAttn) => {
                unreachable!("encoder has no cross attention")
            }
        }
    }

    fn attention(
        &self,
        g: &mut Graph,
        adapter: &dyn ForwardAdapter,
        side: Side,
        block: usize,
        kind: AttnKind,
        q_in: NodeId,
        kv_in: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let heads = self.config().n_heads;
        let dh = self.config().head_dim();
        let site = |proj| ProjSite { side, block, kind, proj };
        let q = adapter.projection(g, self, site(Proj::Q), q_in)?;
        let k = adapter.projection(g, self, site(Proj::K), kv_in)?;
        let v = adapter.projection(g, self, site(Proj::V), kv_in)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let scores = if causal { g.causal_mask_add(scores)? } else { scores };
            let attn = g.softmax(scores)?;
            ctx.push(g.matmul(attn, vh)?);
        }
        let joined = g.concat_cols(&ctx)?;
        adapter.projection(g, self, site(Proj::O), joined)
    }

    fn ffn(&self, g: &mut Graph, ffn: &super::FfnParams, x: NodeId) -> Result<NodeId> {
        let w1 = g.param(self.store(), ffn.w1);
        let b1 = g.param(self.store(), ffn.b1);
        let w2 = g.param(self.store(), ffn.w2);
        let b2 = g.param(self.store(), ffn.b2);
        let h = g.affine(x, w1, b1)?;
        let h = g.gelu(h)?;
        g.affine(h, w2, b2)
    }

    fn ln(&self, g: &mut Graph, ln: &super::LnParams, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.store(), ln.gain);
        let bias = g.param(self.store(), ln.bias);
        g.layer_norm(x, gain, bias)
    }

    /// Encoder forward. Prompt rows (when the adapter provides them) occupy
    /// rows `[0, n)` of the memory; projected features with positional
    /// embeddings occupy `[n, n+l)`. Self-attention is bidirectional over
    /// all rows, and the returned memory keeps the prompt rows so
    /// cross-attention sees them.
    pub fn encode(
        &self,
        g: &mut Graph,
        feats: &Tensor,
        adapter: &dyn ForwardAdapter,
    ) -> Result<NodeId> {
        let l = feats.rows();
        if feats.cols() != self.config().d_feat {
            return Err(Error::Config(format!(
                "feature dim {} does not match d_feat {}",
                feats.cols(),
                self.config().d_feat
            )));
        }
        let max = self.config().max_source_positions;
        if l > max {
            return Err(Error::EncoderLengthLimit { needed: l, limit: max });
        }
        let prompts = adapter.encoder_prompts(g, self)?;
        let n = prompts.map(|p| g.value(p).rows()).unwrap_or(0);
        if n + l > max {
            return Err(Error::EncoderLengthLimit { needed: n + l, limit: max });
        }

        let x = g.input(feats)?;
        let fw = g.param(self.store(), self.frontend_w);
        let fb = g.param(self.store(), self.frontend_b);
        let mut h = g.affine(x, fw, fb)?;
        let pos_table = g.param(self.store(), self.enc_pos);
        let pos = g.slice_rows(pos_table, 0, l)?;
        h = g.add(h, pos)?;
        if let Some(p) = prompts {
            h = g.concat_rows(&[p, h])?;
        }

        for (block, params) in self.enc_blocks.iter().enumerate() {
            let a = self.ln(g, &params.ln1, h)?;
            let attn = self.attention(
                g,
                adapter,
                Side::Encoder,
                block,
                AttnKind::SelfAttn,
                a,
                a,
                false,
            )?;
            h = g.add(h, attn)?;
            let f_in = self.ln(g, &params.ln2, h)?;
            let f = self.ffn(g, &params.ffn, f_in)?;
            h = g.add(h, f)?;
            h = adapter.block_output(g, self, Side::Encoder, block, h)?;
        }
        self.ln(g, &self.enc_ln_post, h)
    }

    /// Decoder forward over `[prompts; embed(prefix); embed(targets)]` with
    /// causal self-attention and full cross-attention over the memory.
    /// Logits are emitted for every row through the tied embedding matrix.
    pub fn decode_forward(
        &self,
        g: &mut Graph,
        memory: NodeId,
        prefix: &[usize],
        targets: &[usize],
        adapter: &dyn ForwardAdapter,
    ) -> Result<DecodeOutput> {
        let prompts = adapter.decoder_prompts(g, self)?;
        let n = prompts.map(|p| g.value(p).rows()).unwrap_or(0);
        let needed = n + prefix.len() + targets.len();
        let limit = self.config().max_target_positions;
        if needed > limit {
            return Err(Error::DecoderContextLimit { needed, limit });
        }

        let tokens: Vec<usize> = prefix.iter().chain(targets).copied().collect();
        let embed = g.param(self.store(), self.embed);
        let mut h = g.embedding_lookup(embed, &tokens)?;
        let pos_table = g.param(self.store(), self.dec_pos);
        let pos = g.slice_rows(pos_table, 0, tokens.len())?;
        h = g.add(h, pos)?;
        if let Some(p) = prompts {
            h = g.concat_rows(&[p, h])?;
        }

        for (block, params) in self.dec_blocks.iter().enumerate() {
            let a = self.ln(g, &params.ln1, h)?;
            let self_attn = self.attention(
                g,
                adapter,
                Side::Decoder,
                block,
                AttnKind::SelfAttn,
                a,
                a,
                true,
            )?;
            h = g.add(h, self_attn)?;
            let c = self.ln(g, &params.ln2, h)?;
            let cross = self.attention(
                g,
                adapter,
                Side::Decoder,
                block,
                AttnKind::CrossAttn,
                c,
                memory,
                false,
            )?;
            h = g.add(h, cross)?;
            let f_in = self.ln(g, &params.ln3, h)?;
            let f = self.ffn(g, &params.ffn, f_in)?;
            h = g.add(h, f)?;
            h = adapter.block_output(g, self, Side::Decoder, block, h)?;
        }
        let h = self.ln(g, &self.dec_ln_post, h)?;
        // tied output projection: logits = h · Eᵀ
        let logits = g.matmul_nt(h, embed)?;
        Ok(DecodeOutput {
            logits,
            prompt_rows: n,
            prefix_rows: prefix.len(),
            target_rows: targets.len(),
        })
    }

    /// Greedy decoding: encode once, then append the argmax token until
    /// end-of-transcript, `max_new_tokens`, or the decoder context limit.
    /// Ties break toward the lowest token id. Returns text tokens only.
    pub fn greedy_decode(
        &self,
        feats: &Tensor,
        adapter: &dyn ForwardAdapter,
        lang: &str,
        max_new_tokens: usize,
    ) -> Result<Vec<usize>> {
        if max_new_tokens == 0 {
            return Err(Error::InvalidArg("max_new_tokens must be >= 1".into()));
        }
        let prefix = self.tokens().decoder_prefix(lang)?;
        let memory = {
            let mut g = Graph::new();
            let node = self.encode(&mut g, feats, adapter)?;
            g.value(node).clone()
        };

        let mut produced: Vec<usize> = Vec::new();
        loop {
            let mut g = Graph::new();
            let mem = g.input(&memory)?;
            let out = self.decode_forward(&mut g, mem, &prefix, &produced, adapter)?;
            let logits = g.value(out.logits);
            let last = logits.row(out.total_rows() - 1);
            let next = argmax_lowest(last);
            if next == self.tokens().eot {
                break;
            }
            produced.push(next);
            if produced.len() == max_new_tokens {
                break;
            }
            let next_rows = out.total_rows() + 1;
            if next_rows > self.config().max_target_positions {
                break;
            }
        }
        Ok(produced.into_iter().filter(|&t| self.tokens().is_text(t)).collect())
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Reduction;
    use crate::model::ModelConfig;
    use crate::tensor::seed_for;

    fn toy_model(seed: u64) -> Model {
        Model::build(ModelConfig::toy(seed), &["A".into(), "B".into()]).unwrap()
    }

    fn feats(rows: usize, seed: u64) -> Tensor {
        Tensor::gaussian(rows, 16, 1.0, seed)
    }

    /// Fixed prompt rows fed through the adapter hooks, for shape tests.
    struct FixedPrompts {
        enc: Option<Tensor>,
        dec: Option<Tensor>,
    }

    impl ForwardAdapter for FixedPrompts {
        fn encoder_prompts(&self, g: &mut Graph, _m: &Model) -> Result<Option<NodeId>> {
            self.enc.as_ref().map(|t| g.input(t)).transpose()
        }

        fn decoder_prompts(&self, g: &mut Graph, _m: &Model) -> Result<Option<NodeId>> {
            self.dec.as_ref().map(|t| g.input(t)).transpose()
        }
    }

    #[test]
    fn encoder_memory_rows_are_prompt_plus_feature_count() {
        let model = toy_model(1);
        let adapter =
            FixedPrompts { enc: Some(Tensor::gaussian(128, 64, 0.02, 5)), dec: None };
        let mut g = Graph::new();
        let mem = model.encode(&mut g, &feats(100, 2), &adapter).unwrap();
        assert_eq!(g.value(mem).shape(), &[228, 64]);

        let mut g2 = Graph::new();
        let mem2 = model.encode(&mut g2, &feats(10, 3), &NoAdapter).unwrap();
        assert_eq!(g2.value(mem2).shape(), &[10, 64]);
    }

    #[test]
    fn encoder_rejects_length_overflow() {
        let model = toy_model(1);
        let adapter =
            FixedPrompts { enc: Some(Tensor::gaussian(500, 64, 0.02, 5)), dec: None };
        let err = model.encode(&mut Graph::new(), &feats(100, 2), &adapter).unwrap_err();
        assert!(err.to_string().contains("512"), "{err}");
    }

    #[test]
    fn decoder_input_rows_follow_prompt_prefix_target_layout() {
        let model = toy_model(2);
        let adapter = FixedPrompts {
            enc: None,
            dec: Some(Tensor::gaussian(128, 64, 0.02, 6)),
        };
        let mut g = Graph::new();
        let mem = model.encode(&mut g, &feats(12, 4), &adapter).unwrap();
        let prefix = model.tokens().decoder_prefix("A").unwrap();
        let y: Vec<usize> = (0..30).map(|i| i % 40).collect();
        let out = model.decode_forward(&mut g, mem, &prefix, &y, &adapter).unwrap();
        assert_eq!(out.total_rows(), 162);
        assert_eq!(g.value(out.logits).shape(), &[162, 64]);
    }

    #[test]
    fn decoder_context_limit_matches_table_footnote() {
        // 256 prompt rows with a 130-token budget exceed 384 positions.
        let model = toy_model(2);
        let adapter = FixedPrompts {
            enc: None,
            dec: Some(Tensor::gaussian(256, 64, 0.02, 6)),
        };
        let mut g = Graph::new();
        let mem = model.encode(&mut g, &feats(12, 4), &adapter).unwrap();
        let prefix = model.tokens().decoder_prefix("A").unwrap();
        let y: Vec<usize> = vec![0; 130];
        let err = model.decode_forward(&mut g, mem, &prefix, &y, &adapter).unwrap_err();
        assert!(err.to_string().starts_with("decoder context limit"), "{err}");
    }

    #[test]
    fn causality_perturbing_a_target_only_changes_later_rows() {
        let model = toy_model(3);
        let x = feats(8, 7);
        let prefix = model.tokens().decoder_prefix("A").unwrap();
        let y: Vec<usize> = vec![3, 9, 14, 21, 2];
        let run = |y: &[usize]| {
            let mut g = Graph::new();
            let mem = model.encode(&mut g, &x, &NoAdapter).unwrap();
            let out = model.decode_forward(&mut g, mem, &prefix, y, &NoAdapter).unwrap();
            g.value(out.logits).clone()
        };
        let base = run(&y);
        let mut y2 = y.clone();
        y2[2] = 33; // perturb y_3, which sits at row 4 + 2
        let perturbed = run(&y2);
        let changed_row = 4 + 2;
        for row in 0..changed_row {
            assert_eq!(base.row(row), perturbed.row(row), "row {row} changed");
        }
        let diff = (0..base.cols())
            .any(|c| base.at(changed_row, c) != perturbed.at(changed_row, c));
        assert!(diff, "perturbed target should change its own row's logits");
    }

    #[test]
    fn weight_tying_gradient_flows_from_both_uses_of_the_embedding() {
        let mut model = toy_model(4);
        let x = feats(6, 8);
        let prefix = model.tokens().decoder_prefix("A").unwrap();
        let y = vec![1, 2, 3];
        let eot = model.tokens().eot;
        let mut g = Graph::new();
        let mem = model.encode(&mut g, &x, &NoAdapter).unwrap();
        let out = model.decode_forward(&mut g, mem, &prefix, &y, &NoAdapter).unwrap();
        let (targets, mask) = out.loss_layout(&y, eot);
        let loss = g
            .masked_cross_entropy(out.logits, &targets, &mask, Reduction::Mean)
            .unwrap();
        let embed = model.embed_id();
        g.backward(loss, model.store_mut()).unwrap();
        let grad = model.store().get(embed).tensor.grad().unwrap();
        assert!(grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn greedy_decode_is_deterministic_and_respects_bounds() {
        let model = toy_model(5);
        let x = feats(10, 9);
        let a = model.greedy_decode(&x, &NoAdapter, "A", 20).unwrap();
        let b = model.greedy_decode(&x, &NoAdapter, "A", 20).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 20);
        let one = model.greedy_decode(&x, &NoAdapter, "A", 1).unwrap();
        assert!(one.len() <= 1);
        assert!(model.greedy_decode(&x, &NoAdapter, "A", 0).is_err());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // End-to-end NLL gradient check on a tiny config, all parameters
        // trainable, sampling a handful of coordinates per tensor.
        let mut config = ModelConfig::toy(11);
        config.d_model = 16;
        config.n_heads = 2;
        config.ffn_mult = 2;
        config.vocab_size = 32;
        config.d_feat = 6;
        let mut model = Model::build(config, &["A".into()]).unwrap();
        let x = Tensor::gaussian(4, 6, 1.0, seed_for(11, "fd-feats"));
        let prefix = model.tokens().decoder_prefix("A").unwrap();
        let y = vec![1, 5, 9];
        let eot = model.tokens().eot;
        let err = crate::graph::finite_diff_check(
            &mut model,
            |g, m: &Model| {
                let mem = m.encode(g, &x, &NoAdapter)?;
                let out = m.decode_forward(g, mem, &prefix, &y, &NoAdapter)?;
                let (targets, mask) = out.loss_layout(&y, eot);
                g.masked_cross_entropy(out.logits, &targets, &mask, Reduction::Mean)
            },
            1e-5,
            6,
            17,
        )
        .unwrap();
        assert!(err < 1e-4, "full-model finite-diff relative error {err}");
    }

    #[test]
    fn backward_populates_grads_for_all_trainable_params() {
        let mut model = toy_model(6);
        let x = feats(5, 10);
        let prefix = model.tokens().decoder_prefix("B").unwrap();
        let y = vec![2, 4];
        let eot = model.tokens().eot;
        let mut g = Graph::new();
        let mem = model.encode(&mut g, &x, &NoAdapter).unwrap();
        let out = model.decode_forward(&mut g, mem, &prefix, &y, &NoAdapter).unwrap();
        let (targets, mask) = out.loss_layout(&y, eot);
        let loss = g
            .masked_cross_entropy(out.logits, &targets, &mask, Reduction::Mean)
            .unwrap();
        g.backward(loss, model.store_mut()).unwrap();
        for (_, p) in model.store().iter() {
            assert!(p.tensor.grad().is_some(), "missing grad on {}", p.name);
        }
    }
}
