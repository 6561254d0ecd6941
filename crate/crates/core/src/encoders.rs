//! Frozen text and image encoders.
//!
//! Small pre-seeded transformers stand in for a pretrained joint embedding
//! model: the text side consumes hashed token ids and pools at the final
//! end-of-sequence position, the image side consumes 8x8 patches and pools
//! by token mean. Both stay frozen for the entire pipeline; conditioning
//! gradients flow through their operations into upstream inputs, never into
//! their weights.
//!
//! The text encoder exposes two equivalent paths: a pure convenience path for
//! plain strings, and an on-tape path over caller-assembled embedding rows so
//! learned pseudo-tokens can be spliced into the sequence.

use crate::autodiff::{Tape, Tensor, Var};
use crate::clients::{token_hash, tokenize, EncoderClient};
use crate::error::{Error, Result};
use crate::params::{ParamBindings, Parameterized};
use crate::util::rng_for;
use image::RgbImage;

/// Token id of the beginning-of-sequence marker.
pub const BOS_ID: usize = 0;
/// Token id of the end-of-sequence marker.
pub const EOS_ID: usize = 1;
/// Content tokens hash into ids `2 .. 2 + CONTENT_BUCKETS`.
pub const CONTENT_BUCKETS: usize = 256;
const VOCAB: usize = 2 + CONTENT_BUCKETS;

/// Hard cap on sequence length, special tokens included.
pub const MAX_SEQ_LEN: usize = 77;

/// Pre-norm transformer block: single-head self-attention plus a two-layer
/// feed-forward, both with residual connections.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    dim: usize,
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TransformerLayer {
    pub fn init(dim: usize, seed: u64, tag: &str, index: u64) -> Self {
        let mut rng = rng_for(seed, &format!("layer/{tag}"), index);
        let std = 1.0 / (dim as f64).sqrt();
        let hidden = 2 * dim;
        Self {
            dim,
            ln1_g: Tensor::vector(vec![1.0; dim]),
            ln1_b: Tensor::zeros(vec![dim]),
            wq: Tensor::randn(vec![dim, dim], std, &mut rng),
            wk: Tensor::randn(vec![dim, dim], std, &mut rng),
            wv: Tensor::randn(vec![dim, dim], std, &mut rng),
            wo: Tensor::randn(vec![dim, dim], std, &mut rng),
            ln2_g: Tensor::vector(vec![1.0; dim]),
            ln2_b: Tensor::zeros(vec![dim]),
            w1: Tensor::randn(vec![dim, hidden], std, &mut rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::randn(vec![hidden, dim], 1.0 / (hidden as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(vec![dim]),
        }
    }

    /// Runs the block over [n, dim] rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        prefix: &str,
        x: Var,
        trainable: bool,
    ) -> Var {
        let b = |tape: &mut Tape, binds: &mut ParamBindings, name: &str, t: &Tensor| {
            binds.bind(tape, &format!("{prefix}/{name}"), t, trainable)
        };
        let ln1_g = b(tape, binds, "ln1_g", &self.ln1_g);
        let ln1_b = b(tape, binds, "ln1_b", &self.ln1_b);
        let h = tape.layer_norm(x, ln1_g, ln1_b, 1e-5);
        let wq = b(tape, binds, "wq", &self.wq);
        let wk = b(tape, binds, "wk", &self.wk);
        let wv = b(tape, binds, "wv", &self.wv);
        let wo = b(tape, binds, "wo", &self.wo);
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        let ctx = tape.matmul(attn, v);
        let proj = tape.matmul(ctx, wo);
        let x1 = tape.add(x, proj);

        let ln2_g = b(tape, binds, "ln2_g", &self.ln2_g);
        let ln2_b = b(tape, binds, "ln2_b", &self.ln2_b);
        let h2 = tape.layer_norm(x1, ln2_g, ln2_b, 1e-5);
        let w1 = b(tape, binds, "w1", &self.w1);
        let b1 = b(tape, binds, "b1", &self.b1);
        let w2 = b(tape, binds, "w2", &self.w2);
        let b2 = b(tape, binds, "b2", &self.b2);
        let m = tape.matmul(h2, w1);
        let m = tape.add_bias_row(m, b1);
        let m = tape.silu(m);
        let m = tape.matmul(m, w2);
        let m = tape.add_bias_row(m, b2);
        tape.add(x1, m)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}/ln1_g"), &self.ln1_g);
        f(&format!("{prefix}/ln1_b"), &self.ln1_b);
        f(&format!("{prefix}/wq"), &self.wq);
        f(&format!("{prefix}/wk"), &self.wk);
        f(&format!("{prefix}/wv"), &self.wv);
        f(&format!("{prefix}/wo"), &self.wo);
        f(&format!("{prefix}/ln2_g"), &self.ln2_g);
        f(&format!("{prefix}/ln2_b"), &self.ln2_b);
        f(&format!("{prefix}/w1"), &self.w1);
        f(&format!("{prefix}/b1"), &self.b1);
        f(&format!("{prefix}/w2"), &self.w2);
        f(&format!("{prefix}/b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}/ln1_g"), &mut self.ln1_g);
        f(&format!("{prefix}/ln1_b"), &mut self.ln1_b);
        f(&format!("{prefix}/wq"), &mut self.wq);
        f(&format!("{prefix}/wk"), &mut self.wk);
        f(&format!("{prefix}/wv"), &mut self.wv);
        f(&format!("{prefix}/wo"), &mut self.wo);
        f(&format!("{prefix}/ln2_g"), &mut self.ln2_g);
        f(&format!("{prefix}/ln2_b"), &mut self.ln2_b);
        f(&format!("{prefix}/w1"), &mut self.w1);
        f(&format!("{prefix}/b1"), &mut self.b1);
        f(&format!("{prefix}/w2"), &mut self.w2);
        f(&format!("{prefix}/b2"), &mut self.b2);
    }
}

/// Result of running the text encoder over a sequence.
pub struct TextEncoding {
    /// Final hidden states, [n, dim]; the cross-attention context.
    pub hidden: Var,
    /// Hidden state at the final (end-of-sequence) position, [1, dim].
    pub pooled: Var,
}

/// Frozen toy text encoder with hashed vocabulary.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    dim: usize,
    token_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<TransformerLayer>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

impl TextEncoder {
    pub fn init(dim: usize, depth: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "text-encoder/emb", 0);
        Self {
            dim,
            token_emb: Tensor::randn(vec![VOCAB, dim], 0.02, &mut rng),
            pos_emb: Tensor::randn(vec![MAX_SEQ_LEN, dim], 0.02, &mut rng),
            layers: (0..depth)
                .map(|i| TransformerLayer::init(dim, seed, "text-encoder", i as u64))
                .collect(),
            lnf_g: Tensor::vector(vec![1.0; dim]),
            lnf_b: Tensor::zeros(vec![dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Token ids for a text: BOS, hashed content tokens, EOS.
    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS_ID];
        for tok in tokenize(text) {
            ids.push(2 + (token_hash(&tok) % CONTENT_BUCKETS as u64) as usize);
        }
        ids.push(EOS_ID);
        if ids.len() > MAX_SEQ_LEN {
            return Err(Error::Encoder(format!(
                "text tokenizes to {} ids, exceeding the {MAX_SEQ_LEN} limit",
                ids.len()
            )));
        }
        Ok(ids)
    }

    /// Embedding row for one token id, without positional information.
    pub fn embedding_row(&self, id: usize) -> Tensor {
        assert!(id < VOCAB, "token id out of range");
        Tensor::vector(self.token_emb.data[id * self.dim..(id + 1) * self.dim].to_vec())
    }

    /// Embedding rows for a token id sequence, [n, dim].
    pub fn embedding_rows(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            assert!(id < VOCAB, "token id out of range");
            data.extend_from_slice(&self.token_emb.data[id * self.dim..(id + 1) * self.dim]);
        }
        Tensor::new(vec![ids.len(), self.dim], data)
    }

    /// Runs the encoder over caller-provided embedding rows on a tape.
    ///
    /// Positional embeddings are added here, so rows must arrive without
    /// them. Gradients flow through into any gradient-bearing rows; the
    /// encoder weights themselves bind as constants.
    pub fn encode_rows(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        rows: Var,
    ) -> Result<TextEncoding> {
        let (n, d) = tape.value(rows).dims2();
        if d != self.dim {
            return Err(Error::Encoder(format!(
                "sequence dim {d} does not match encoder dim {}",
                self.dim
            )));
        }
        if n == 0 || n > MAX_SEQ_LEN {
            return Err(Error::Encoder(format!(
                "sequence length {n} outside 1..={MAX_SEQ_LEN}"
            )));
        }
        let pos = Tensor::new(
            vec![n, self.dim],
            self.pos_emb.data[..n * self.dim].to_vec(),
        );
        let pos = tape.constant(pos);
        let mut x = tape.add(rows, pos);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, binds, &format!("text-encoder/layer{i}"), x, false);
        }
        let g = tape.constant(self.lnf_g.clone());
        let b = tape.constant(self.lnf_b.clone());
        let hidden = tape.layer_norm(x, g, b, 1e-5);
        let pooled = tape.slice_rows(hidden, n - 1, 1);
        Ok(TextEncoding { hidden, pooled })
    }

    /// Pure path for plain strings: returns (hidden, pooled) tensors.
    pub fn encode_text(&self, text: &str) -> Result<(Tensor, Tensor)> {
        let ids = self.token_ids(text)?;
        self.encode_ids(&ids)
    }

    /// Pure path for explicit token ids.
    pub fn encode_ids(&self, ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::inference();
        let mut binds = ParamBindings::new();
        let rows = tape.constant(self.embedding_rows(ids));
        let enc = self.encode_rows(&mut tape, &mut binds, rows)?;
        Ok((tape.value(enc.hidden).clone(), tape.value(enc.pooled).clone()))
    }
}

impl Parameterized for TextEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("text-encoder/token_emb", &self.token_emb);
        f("text-encoder/pos_emb", &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("text-encoder/layer{i}"), f);
        }
        f("text-encoder/lnf_g", &self.lnf_g);
        f("text-encoder/lnf_b", &self.lnf_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("text-encoder/token_emb", &mut self.token_emb);
        f("text-encoder/pos_emb", &mut self.pos_emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("text-encoder/layer{i}"), f);
        }
        f("text-encoder/lnf_g", &mut self.lnf_g);
        f("text-encoder/lnf_b", &mut self.lnf_b);
    }
}

/// Result of encoding an image.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// Patch token states, [m, dim]; the visual tokens.
    pub tokens: Tensor,
    /// Token-mean global embedding, [dim].
    pub global: Tensor,
}

/// Frozen toy image encoder over 8x8 patches of a 32x32 image.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    dim: usize,
    image_size: u32,
    patch: u32,
    patch_proj: Tensor,
    patch_bias: Tensor,
    pos_emb: Tensor,
    layers: Vec<TransformerLayer>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

impl ImageEncoder {
    pub fn init(dim: usize, depth: usize, seed: u64) -> Self {
        let image_size = 32;
        let patch = 8;
        let grid = (image_size / patch) as usize;
        let tokens = grid * grid;
        let patch_feats = (patch * patch * 3) as usize;
        let mut rng = rng_for(seed, "image-encoder/emb", 0);
        Self {
            dim,
            image_size,
            patch,
            patch_proj: Tensor::randn(
                vec![patch_feats, dim],
                1.0 / (patch_feats as f64).sqrt(),
                &mut rng,
            ),
            patch_bias: Tensor::zeros(vec![dim]),
            pos_emb: Tensor::randn(vec![tokens, dim], 0.02, &mut rng),
            layers: (0..depth)
                .map(|i| TransformerLayer::init(dim, seed, "image-encoder", i as u64))
                .collect(),
            lnf_g: Tensor::vector(vec![1.0; dim]),
            lnf_b: Tensor::zeros(vec![dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Side length of the images this encoder accepts.
    pub fn image_size(&self) -> usize {
        self.image_size as usize
    }

    /// Number of visual tokens per image.
    pub fn token_count(&self) -> usize {
        let grid = (self.image_size / self.patch) as usize;
        grid * grid
    }

    /// Flattened patch pixels scaled to [-1, 1], [m, patch*patch*3].
    fn patch_features(&self, image: &RgbImage) -> Result<Tensor> {
        if image.dimensions() != (self.image_size, self.image_size) {
            return Err(Error::Encoder(format!(
                "expected a {0}x{0} image, got {1}x{2}",
                self.image_size,
                image.width(),
                image.height()
            )));
        }
        let grid = self.image_size / self.patch;
        let pf = (self.patch * self.patch * 3) as usize;
        let mut data = vec![0.0; (grid * grid) as usize * pf];
        for py in 0..grid {
            for px in 0..grid {
                let token = (py * grid + px) as usize;
                let mut k = 0;
                for y in 0..self.patch {
                    for x in 0..self.patch {
                        let pixel = image.get_pixel(px * self.patch + x, py * self.patch + y);
                        for c in 0..3 {
                            data[token * pf + k] = pixel.0[c] as f64 / 127.5 - 1.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![(grid * grid) as usize, pf], data))
    }

    /// Encodes an image into visual tokens and a global embedding.
    pub fn encode(&self, image: &RgbImage) -> Result<ImageEncoding> {
        let feats = self.patch_features(image)?;
        let mut tape = Tape::inference();
        let mut binds = ParamBindings::new();
        let feats = tape.constant(feats);
        let proj = tape.constant(self.patch_proj.clone());
        let bias = tape.constant(self.patch_bias.clone());
        let x = tape.matmul(feats, proj);
        let x = tape.add_bias_row(x, bias);
        let pos = tape.constant(self.pos_emb.clone());
        let mut x = tape.add(x, pos);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&mut tape, &mut binds, &format!("image-encoder/layer{i}"), x, false);
        }
        let g = tape.constant(self.lnf_g.clone());
        let b = tape.constant(self.lnf_b.clone());
        let hidden = tape.layer_norm(x, g, b, 1e-5);
        let global = tape.mean_rows(hidden);
        Ok(ImageEncoding {
            tokens: tape.value(hidden).clone(),
            global: tape.value(global).clone(),
        })
    }
}

impl Parameterized for ImageEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("image-encoder/patch_proj", &self.patch_proj);
        f("image-encoder/patch_bias", &self.patch_bias);
        f("image-encoder/pos_emb", &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("image-encoder/layer{i}"), f);
        }
        f("image-encoder/lnf_g", &self.lnf_g);
        f("image-encoder/lnf_b", &self.lnf_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("image-encoder/patch_proj", &mut self.patch_proj);
        f("image-encoder/patch_bias", &mut self.patch_bias);
        f("image-encoder/pos_emb", &mut self.pos_emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("image-encoder/layer{i}"), f);
        }
        f("image-encoder/lnf_g", &mut self.lnf_g);
        f("image-encoder/lnf_b", &mut self.lnf_b);
    }
}

/// The frozen encoder pair used across training, inference and evaluation.
#[derive(Debug, Clone)]
pub struct FrozenEncoders {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl FrozenEncoders {
    pub fn init(dim: usize, depth: usize, seed: u64) -> Self {
        Self {
            text: TextEncoder::init(dim, depth, seed),
            image: ImageEncoder::init(dim, depth, seed),
        }
    }
}

impl Parameterized for FrozenEncoders {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.text.visit_params(f);
        self.image.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.text.visit_params_mut(f);
        self.image.visit_params_mut(f);
    }
}

/// Joint-embedding client view over the frozen encoders: pooled text and
/// global image vectors, unit-normalized.
pub struct ToyClipClient<'a> {
    encoders: &'a FrozenEncoders,
}

impl<'a> ToyClipClient<'a> {
    pub fn new(encoders: &'a FrozenEncoders) -> Self {
        Self { encoders }
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

impl EncoderClient for ToyClipClient<'_> {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        Ok(unit(self.encoders.image.encode(image)?.global.data))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let (_, pooled) = self.encoders.text.encode_text(text)?;
        Ok(unit(pooled.data))
    }

    fn dim(&self) -> usize {
        self.encoders.text.dim()
    }
}
