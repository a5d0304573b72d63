//! Toy trainable text encoder for description conditioning.
//!
//! Replaces a pretrained language model at desk scale: an embedding table,
//! learned positions, and one self-attention layer, trained jointly with the
//! denoiser. Padded positions stay exact zero vectors.

use std::collections::HashMap;

use lcad_grad::nn::{Graph, LayerNorm, Linear, ParamStore};
use lcad_grad::{ops, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token table: palette color names, shape nouns, articles, punctuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        assert_eq!(tokens[PAD], "<pad>");
        assert_eq!(tokens[UNK], "<unk>");
        assert!(tokens.len() <= 64, "vocabulary capped at 64 tokens");
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn standard() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<unk>", "a", "an", "the", ",", ".", "image", "colorful"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for shape in ["circle", "square", "triangle"] {
            tokens.push(shape.into());
        }
        for color in [
            "red", "green", "blue", "yellow", "orange", "purple", "pink", "brown", "black",
            "white", "gray",
        ] {
            tokens.push(color.into());
        }
        Self::from_tokens(tokens)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Canonical surface split shared by the tokenizer and the description
/// grammar: whitespace-separated words, punctuation as its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if matches!(ch, ',' | '.' | '!' | '?' | ';' | ':') {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Lowercase-ASCII text to a fixed-length id sequence (truncate / PAD).
pub fn tokenize(vocab: &Vocabulary, text: &str, n_tok: usize) -> Result<Vec<usize>> {
    if !text.is_ascii() || text.chars().any(|c| c.is_ascii_uppercase()) {
        return Err(Error::Text(format!("text must be lowercase ASCII: {text:?}")));
    }
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::Text("empty text".into()));
    }
    let mut ids: Vec<usize> = words
        .iter()
        .map(|w| vocab.id_of(w).unwrap_or(UNK))
        .collect();
    ids.truncate(n_tok);
    ids.resize(n_tok, PAD);
    Ok(ids)
}

/// Encoded description sequence bound to a tape.
pub struct TextEmbedding {
    /// `[n_tok, d_text]`; padded rows are exact zeros.
    pub seq: Var,
    /// keep-mask: true at real tokens, false at PAD.
    pub pad_keep: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TextEncoderConfig {
    pub n_tok: usize,
    pub d_text: usize,
    pub heads: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { n_tok: 12, d_text: 64, heads: 2 }
    }
}

pub const PARAM_PREFIX: &str = "text.";

pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    vocab_size: usize,
    pub(crate) emb: lcad_grad::ParamId,
    pos: lcad_grad::ParamId,
    ln_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_out: LayerNorm,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        cfg: TextEncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.d_text;
        assert!(d.is_multiple_of(cfg.heads));
        let emb = store.add(
            "text.emb",
            Tensor::randn_scaled([vocab_size, d], 0.02, rng),
            true,
        );
        let pos = store.add(
            "text.pos",
            Tensor::randn_scaled([cfg.n_tok, d], 0.02, rng),
            true,
        );
        let ln_attn = LayerNorm::new(store, "text.ln_attn", d);
        let wq = Linear::new_no_bias(store, "text.wq", d, d, rng);
        let wk = Linear::new_no_bias(store, "text.wk", d, d, rng);
        let wv = Linear::new_no_bias(store, "text.wv", d, d, rng);
        let wo = Linear::new_no_bias(store, "text.wo", d, d, rng);
        let ln_out = LayerNorm::new(store, "text.ln_out", d);
        Self { cfg, vocab_size, emb, pos, ln_attn, wq, wk, wv, wo, ln_out }
    }

    pub fn encode(&self, g: &Graph, tokens: &[usize]) -> Result<TextEmbedding> {
        if tokens.len() != self.cfg.n_tok {
            return Err(Error::Text(format!(
                "expected {} tokens, got {}",
                self.cfg.n_tok,
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Text(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let tape = g.tape;
        let emb = g.p(self.emb);
        let x = ops::embedding(tape, &emb, tokens);
        let pos = g.p(self.pos);
        let x = ops::add(tape, &x, &pos);

        let xn = self.ln_attn.forward(g, &x);
        let q = self.wq.forward(g, &xn);
        let k = self.wk.forward(g, &xn);
        let v = self.wv.forward(g, &xn);
        let dh = self.cfg.d_text / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.cfg.heads);
        for hi in 0..self.cfg.heads {
            let qh = ops::slice_cols(tape, &q, hi * dh, dh);
            let kh = ops::slice_cols(tape, &k, hi * dh, dh);
            let vh = ops::slice_cols(tape, &v, hi * dh, dh);
            let kt = ops::transpose2d(tape, &kh);
            let scores = ops::matmul(tape, &qh, &kt);
            let scores = ops::mul_scalar(tape, &scores, scale);
            let weights = ops::masked_softmax_rows(tape, &scores, Some(&keep));
            head_outs.push(ops::matmul(tape, &weights, &vh));
        }
        let head_refs: Vec<&Var> = head_outs.iter().collect();
        let merged = ops::concat_cols(tape, &head_refs);
        let attn = self.wo.forward(g, &merged);
        let x = ops::add(tape, &x, &attn);
        let x = self.ln_out.forward(g, &x);
        let seq = ops::mask_rows(tape, &x, &keep);
        Ok(TextEmbedding { seq, pad_keep: keep })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcad_grad::fd::{finite_diff_grad, rel_err};
    use lcad_grad::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn encoder() -> (ParamStore, TextEncoder, Vocabulary) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let vocab = Vocabulary::standard();
        let enc = TextEncoder::new(&mut store, vocab.size(), TextEncoderConfig::default(), &mut rng);
        (store, enc, vocab)
    }

    #[test]
    fn tokenize_pads_and_maps_unknowns() {
        let vocab = Vocabulary::standard();
        let ids = tokenize(&vocab, "a red circle", 12).unwrap();
        assert_eq!(ids.len(), 12);
        assert_eq!(ids[0], vocab.id_of("a").unwrap());
        assert_eq!(ids[1], vocab.id_of("red").unwrap());
        assert_eq!(ids[2], vocab.id_of("circle").unwrap());
        assert!(ids[3..].iter().all(|&t| t == PAD));

        let ids = tokenize(&vocab, "a crimson circle", 12).unwrap();
        assert_eq!(ids[1], UNK);

        assert!(tokenize(&vocab, "", 12).is_err());
        assert!(tokenize(&vocab, "A Red Circle", 12).is_err());

        // commas split off as their own token
        let ids = tokenize(&vocab, "a red circle, a blue square", 12).unwrap();
        assert_eq!(ids[3], vocab.id_of(",").unwrap());
        assert_eq!(ids[5], vocab.id_of("blue").unwrap());
    }

    #[test]
    fn encode_is_deterministic_and_zeroes_pads() {
        let (store, enc, vocab) = encoder();
        let ids = tokenize(&vocab, "a red circle", 12).unwrap();
        let run = || {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            enc.encode(&g, &ids).unwrap().seq.value().clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
        let d = enc.cfg.d_text;
        for row in 3..12 {
            assert!(a.data()[row * d..(row + 1) * d].iter().all(|&v| v == 0.0));
        }
        // all-PAD input: every row zero, no NaNs
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let out = enc.encode(&g, &vec![PAD; 12]).unwrap();
        assert!(out.seq.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_out_of_vocab_ids() {
        let (store, enc, _) = encoder();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let mut ids = vec![PAD; 12];
        ids[0] = 999;
        assert!(enc.encode(&g, &ids).is_err());
    }

    #[test]
    fn embedding_gradient_matches_central_differences() {
        let (store, enc, vocab) = encoder();
        let ids = tokenize(&vocab, "a red circle, a blue square", 12).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let probe = Tensor::randn([12, 64], &mut rng);
        let emb_id = store.id_of("text.emb").unwrap();
        // analytic
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let out = enc.encode(&g, &ids).unwrap();
        let p = tape.constant(probe.clone());
        let weighted = ops::mul(&tape, &out.seq, &p);
        let loss = ops::sum_all(&tape, &weighted);
        let grads = tape.backward(&loss);
        let emb_var = g.p(enc.emb);
        let analytic = grads.get(&emb_var).unwrap().clone();
        // numeric, h = 1e-4 per the contract
        let x0 = store.get(emb_id).clone();
        let mut store = store;
        let numeric = finite_diff_grad(&x0, 1e-4, |xt| {
            store.set(emb_id, xt.clone());
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let out = enc.encode(&g, &ids).unwrap();
            out.seq.value().mul(&probe).sum()
        });
        store.set(emb_id, x0);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "embedding grad rel err {err:.3e}");
    }

    #[test]
    fn swapping_tokens_changes_the_output() {
        let (store, enc, vocab) = encoder();
        let a = tokenize(&vocab, "a red circle", 12).unwrap();
        let mut b = a.clone();
        b.swap(1, 2); // "a circle red"
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let ea = enc.encode(&g, &a).unwrap();
        let eb = enc.encode(&g, &b).unwrap();
        assert!(ea.seq.value().max_abs_diff(eb.seq.value()) > 1e-6);
    }

    #[test]
    fn initial_row_norms_are_bounded() {
        let (store, enc, vocab) = encoder();
        let ids = tokenize(&vocab, "a red circle, a blue square, a green triangle", 12).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let out = enc.encode(&g, &ids).unwrap();
        let d = enc.cfg.d_text;
        for row in 0..12 {
            let norm: f64 = out.seq.value().data()[row * d..(row + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!(norm <= 10.0, "row {row} norm {norm}");
        }
    }
}
