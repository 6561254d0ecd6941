//! Denoising network: a small U-Net over [-1, 1] pixel latents with
//! timestep conditioning and text cross-attention.
//!
//! Every attention projection is a named adapter site, so the low-rank
//! bank can hook the same weights that [`crate::adapters::merge`] folds.

use crate::adapters::{AdapterBank, Route, SiteWeights};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBindings, Parameterized};
use crate::util::rng_for;
use serde::{Deserialize, Serialize};

/// Shape of the denoiser.
///
/// `channels` are the widths at full, half and quarter resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: [usize; 3],
    pub cond_dim: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: [16, 32, 48],
            cond_dim: 64,
            time_dim: 32,
            time_hidden: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.cond_dim == 0 || self.time_hidden == 0 {
            return Err(Error::Config("denoiser widths must be nonzero".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_dim {} must be even and at least 2",
                self.time_dim
            )));
        }
        Ok(())
    }
}

/// Which parameter groups record gradients during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DenoiserTrainFlags {
    pub base: bool,
    pub adapters: bool,
}

impl DenoiserTrainFlags {
    pub const NONE: Self = Self { base: false, adapters: false };
    pub const BASE: Self = Self { base: true, adapters: false };
    pub const ADAPTERS: Self = Self { base: false, adapters: true };
}

/// Sinusoidal features for an integer timestep, shaped [1, dim].
pub fn time_features(t: usize, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "time feature dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        let angle = t as f64 * freq;
        data[i] = angle.sin();
        data[half + i] = angle.cos();
    }
    Tensor::new(vec![1, dim], data)
}

fn gauss(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor {
    Tensor::randn(shape, std, &mut rng_for(seed, name, 0))
}

/// Residual block: norm/silu/conv, timestep bias, norm/silu/conv, skip.
#[derive(Debug, Clone)]
struct ResBlock {
    stride: usize,
    n1_g: Tensor,
    n1_b: Tensor,
    conv1_w: Tensor,
    conv1_b: Tensor,
    time_w: Tensor,
    time_b: Tensor,
    n2_g: Tensor,
    n2_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    skip: Option<(Tensor, Tensor)>,
}

impl ResBlock {
    fn init(cin: usize, cout: usize, stride: usize, time_hidden: usize, seed: u64, name: &str) -> Self {
        let conv_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let skip = if cin != cout || stride != 1 {
            Some((
                gauss(seed, &format!("{name}/skip-w"), vec![cout, cin, 1, 1], conv_std(cin)),
                Tensor::zeros(vec![cout]),
            ))
        } else {
            None
        };
        Self {
            stride,
            n1_g: Tensor::new(vec![cin], vec![1.0; cin]),
            n1_b: Tensor::zeros(vec![cin]),
            conv1_w: gauss(seed, &format!("{name}/conv1-w"), vec![cout, cin, 3, 3], conv_std(cin * 9)),
            conv1_b: Tensor::zeros(vec![cout]),
            time_w: gauss(seed, &format!("{name}/time-w"), vec![time_hidden, cout], conv_std(time_hidden)),
            time_b: Tensor::zeros(vec![cout]),
            n2_g: Tensor::new(vec![cout], vec![1.0; cout]),
            n2_b: Tensor::zeros(vec![cout]),
            conv2_w: gauss(seed, &format!("{name}/conv2-w"), vec![cout, cout, 3, 3], conv_std(cout * 9)),
            conv2_b: Tensor::zeros(vec![cout]),
            skip,
        }
    }

    /// `temb` is the shared [1, time_hidden] trunk activation.
    fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        prefix: &str,
        x: Var,
        temb: Var,
        trainable: bool,
    ) -> Var {
        let shape = tape.value(x).shape.clone();
        let (h, w) = (shape[1], shape[2]);
        let p = |tape: &mut Tape, binds: &mut ParamBindings, field: &str, t: &Tensor| {
            binds.bind(tape, &format!("{prefix}/{field}"), t, trainable)
        };

        let n1g = p(tape, binds, "n1-g", &self.n1_g);
        let n1b = p(tape, binds, "n1-b", &self.n1_b);
        let tok = tape.chw_to_tokens(x);
        let tok = tape.layer_norm(tok, n1g, n1b, 1e-5);
        let hmap = tape.tokens_to_chw(tok, h, w);
        let hmap = tape.silu(hmap);
        let c1w = p(tape, binds, "conv1-w", &self.conv1_w);
        let c1b = p(tape, binds, "conv1-b", &self.conv1_b);
        let mut hmap = tape.conv2d(hmap, c1w, c1b, self.stride, 1);

        let tw = p(tape, binds, "time-w", &self.time_w);
        let tb = p(tape, binds, "time-b", &self.time_b);
        let tproj = tape.matmul(temb, tw);
        let tproj = tape.add_bias_row(tproj, tb);
        let cout = self.conv1_b.numel();
        let tproj = tape.reshape(tproj, vec![cout]);
        hmap = tape.add_channel_bias(hmap, tproj);

        let (oh, ow) = {
            let s = &tape.value(hmap).shape;
            (s[1], s[2])
        };
        let n2g = p(tape, binds, "n2-g", &self.n2_g);
        let n2b = p(tape, binds, "n2-b", &self.n2_b);
        let tok = tape.chw_to_tokens(hmap);
        let tok = tape.layer_norm(tok, n2g, n2b, 1e-5);
        let hmap = tape.tokens_to_chw(tok, oh, ow);
        let hmap = tape.silu(hmap);
        let c2w = p(tape, binds, "conv2-w", &self.conv2_w);
        let c2b = p(tape, binds, "conv2-b", &self.conv2_b);
        let hmap = tape.conv2d(hmap, c2w, c2b, 1, 1);

        let shortcut = match &self.skip {
            Some((sw, sb)) => {
                let swv = p(tape, binds, "skip-w", sw);
                let sbv = p(tape, binds, "skip-b", sb);
                tape.conv2d(x, swv, sbv, self.stride, 0)
            }
            None => x,
        };
        tape.add(shortcut, hmap)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}/n1-g"), &self.n1_g);
        f(&format!("{prefix}/n1-b"), &self.n1_b);
        f(&format!("{prefix}/conv1-w"), &self.conv1_w);
        f(&format!("{prefix}/conv1-b"), &self.conv1_b);
        f(&format!("{prefix}/time-w"), &self.time_w);
        f(&format!("{prefix}/time-b"), &self.time_b);
        f(&format!("{prefix}/n2-g"), &self.n2_g);
        f(&format!("{prefix}/n2-b"), &self.n2_b);
        f(&format!("{prefix}/conv2-w"), &self.conv2_w);
        f(&format!("{prefix}/conv2-b"), &self.conv2_b);
        if let Some((sw, sb)) = &self.skip {
            f(&format!("{prefix}/skip-w"), sw);
            f(&format!("{prefix}/skip-b"), sb);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}/n1-g"), &mut self.n1_g);
        f(&format!("{prefix}/n1-b"), &mut self.n1_b);
        f(&format!("{prefix}/conv1-w"), &mut self.conv1_w);
        f(&format!("{prefix}/conv1-b"), &mut self.conv1_b);
        f(&format!("{prefix}/time-w"), &mut self.time_w);
        f(&format!("{prefix}/time-b"), &mut self.time_b);
        f(&format!("{prefix}/n2-g"), &mut self.n2_g);
        f(&format!("{prefix}/n2-b"), &mut self.n2_b);
        f(&format!("{prefix}/conv2-w"), &mut self.conv2_w);
        f(&format!("{prefix}/conv2-b"), &mut self.conv2_b);
        if let Some((sw, sb)) = &mut self.skip {
            f(&format!("{prefix}/skip-w"), sw);
            f(&format!("{prefix}/skip-b"), sb);
        }
    }
}

const SITE_KINDS: [&str; 8] = [
    "self/q", "self/k", "self/v", "self/out",
    "cross/q", "cross/k", "cross/v", "cross/out",
];

/// Attention block: self-attention over spatial tokens, then cross-attention
/// into the condition tokens. All eight projections are adapter sites.
#[derive(Debug, Clone)]
struct AttnBlock {
    ln1_g: Tensor,
    ln1_b: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    // Projections indexed like SITE_KINDS.
    proj: Vec<Tensor>,
}

impl AttnBlock {
    fn init(c: usize, cond_dim: usize, seed: u64, block: &str) -> Self {
        let proj = SITE_KINDS
            .iter()
            .map(|kind| {
                let d_in = Self::input_dim(kind, c, cond_dim);
                gauss(
                    seed,
                    &format!("denoiser/attn/{block}/{kind}"),
                    vec![d_in, c],
                    1.0 / (d_in as f64).sqrt(),
                )
            })
            .collect();
        Self {
            ln1_g: Tensor::new(vec![c], vec![1.0; c]),
            ln1_b: Tensor::zeros(vec![c]),
            ln2_g: Tensor::new(vec![c], vec![1.0; c]),
            ln2_b: Tensor::zeros(vec![c]),
            proj,
        }
    }

    fn input_dim(kind: &str, c: usize, cond_dim: usize) -> usize {
        // Cross-attention keys and values read the condition tokens.
        if kind == "cross/k" || kind == "cross/v" {
            cond_dim
        } else {
            c
        }
    }

    fn kind_index(kind: &str) -> Option<usize> {
        SITE_KINDS.iter().position(|k| *k == kind)
    }

    #[allow(clippy::too_many_arguments)]
    fn projected(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        block: &str,
        kind: &str,
        x: Var,
        adapters: Option<(&AdapterBank, Route)>,
        train: DenoiserTrainFlags,
    ) -> Result<Var> {
        let idx = Self::kind_index(kind).expect("known projection kind");
        let site = format!("{block}/{kind}");
        let w = binds.bind(tape, &format!("denoiser/attn/{site}"), &self.proj[idx], train.base);
        let y = tape.matmul(x, w);
        match adapters {
            Some((bank, route)) => bank.apply(tape, binds, &site, x, y, route, train.adapters),
            None => Ok(y),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        block: &str,
        x: Var,
        cond: Var,
        adapters: Option<(&AdapterBank, Route)>,
        train: DenoiserTrainFlags,
    ) -> Result<Var> {
        let shape = tape.value(x).shape.clone();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let scale = 1.0 / (c as f64).sqrt();
        let base = format!("denoiser/attn/{block}");

        let mut tokens = tape.chw_to_tokens(x);
        let g1 = binds.bind(tape, &format!("{base}/ln1-g"), &self.ln1_g, train.base);
        let b1 = binds.bind(tape, &format!("{base}/ln1-b"), &self.ln1_b, train.base);
        let normed = tape.layer_norm(tokens, g1, b1, 1e-5);
        let q = self.projected(tape, binds, block, "self/q", normed, adapters, train)?;
        let k = self.projected(tape, binds, block, "self/k", normed, adapters, train)?;
        let v = self.projected(tape, binds, block, "self/v", normed, adapters, train)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        let mixed = tape.matmul(probs, v);
        let out = self.projected(tape, binds, block, "self/out", mixed, adapters, train)?;
        tokens = tape.add(tokens, out);

        let g2 = binds.bind(tape, &format!("{base}/ln2-g"), &self.ln2_g, train.base);
        let b2 = binds.bind(tape, &format!("{base}/ln2-b"), &self.ln2_b, train.base);
        let normed = tape.layer_norm(tokens, g2, b2, 1e-5);
        let q = self.projected(tape, binds, block, "cross/q", normed, adapters, train)?;
        let k = self.projected(tape, binds, block, "cross/k", cond, adapters, train)?;
        let v = self.projected(tape, binds, block, "cross/v", cond, adapters, train)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        let mixed = tape.matmul(probs, v);
        let out = self.projected(tape, binds, block, "cross/out", mixed, adapters, train)?;
        tokens = tape.add(tokens, out);

        Ok(tape.tokens_to_chw(tokens, h, w))
    }

    fn visit(&self, base: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{base}/ln1-g"), &self.ln1_g);
        f(&format!("{base}/ln1-b"), &self.ln1_b);
        f(&format!("{base}/ln2-g"), &self.ln2_g);
        f(&format!("{base}/ln2-b"), &self.ln2_b);
        for (i, kind) in SITE_KINDS.iter().enumerate() {
            f(&format!("{base}/{kind}"), &self.proj[i]);
        }
    }

    fn visit_mut(&mut self, base: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{base}/ln1-g"), &mut self.ln1_g);
        f(&format!("{base}/ln1-b"), &mut self.ln1_b);
        f(&format!("{base}/ln2-g"), &mut self.ln2_g);
        f(&format!("{base}/ln2-b"), &mut self.ln2_b);
        for (i, kind) in SITE_KINDS.iter().enumerate() {
            f(&format!("{base}/{kind}"), &mut self.proj[i]);
        }
    }
}

const ATTN_BLOCKS: [&str; 3] = ["d1", "mid", "u1"];

/// The denoiser. Predicts the noise component of a noised latent given the
/// timestep and the condition token sequence.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time_w1: Tensor,
    time_b1: Tensor,
    stem_w: Tensor,
    stem_b: Tensor,
    d1: ResBlock,
    d1_attn: AttnBlock,
    d2: ResBlock,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    u1: ResBlock,
    u1_attn: AttnBlock,
    u2: ResBlock,
    out_n_g: Tensor,
    out_n_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl Denoiser {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1, c2] = cfg.channels;
        let th = cfg.time_hidden;
        Ok(Self {
            time_w1: gauss(seed, "denoiser/time/w1", vec![cfg.time_dim, th], 1.0 / (cfg.time_dim as f64).sqrt()),
            time_b1: Tensor::zeros(vec![th]),
            stem_w: gauss(seed, "denoiser/stem/w", vec![c0, 3, 3, 3], 1.0 / 27f64.sqrt()),
            stem_b: Tensor::zeros(vec![c0]),
            d1: ResBlock::init(c0, c1, 2, th, seed, "denoiser/d1"),
            d1_attn: AttnBlock::init(c1, cfg.cond_dim, seed, "d1"),
            d2: ResBlock::init(c1, c2, 2, th, seed, "denoiser/d2"),
            mid1: ResBlock::init(c2, c2, 1, th, seed, "denoiser/mid1"),
            mid_attn: AttnBlock::init(c2, cfg.cond_dim, seed, "mid"),
            mid2: ResBlock::init(c2, c2, 1, th, seed, "denoiser/mid2"),
            u1: ResBlock::init(c2 + c1, c1, 1, th, seed, "denoiser/u1"),
            u1_attn: AttnBlock::init(c1, cfg.cond_dim, seed, "u1"),
            u2: ResBlock::init(c1 + c0, c0, 1, th, seed, "denoiser/u2"),
            out_n_g: Tensor::new(vec![c0], vec![1.0; c0]),
            out_n_b: Tensor::zeros(vec![c0]),
            out_w: gauss(seed, "denoiser/out/w", vec![3, c0, 3, 3], 1.0 / ((c0 * 9) as f64).sqrt()),
            out_b: Tensor::zeros(vec![3]),
            cfg,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Adapter site names with their (d_in, d_out) shapes, in canonical order.
    pub fn adapter_site_shapes(&self) -> Vec<(String, (usize, usize))> {
        let [_, c1, c2] = self.cfg.channels;
        let mut out = Vec::new();
        for block in ATTN_BLOCKS {
            let c = if block == "mid" { c2 } else { c1 };
            for kind in SITE_KINDS {
                let d_in = AttnBlock::input_dim(kind, c, self.cfg.cond_dim);
                out.push((format!("{block}/{kind}"), (d_in, c)));
            }
        }
        out
    }

    /// Low-rank bank shaped for this denoiser.
    pub fn adapter_bank(&self, rank: usize, scaling: f64, seed: u64) -> AdapterBank {
        AdapterBank::init(&self.adapter_site_shapes(), rank, scaling, seed)
    }

    /// One denoising prediction on the tape.
    ///
    /// `z_t` is a [3, s, s] latent, `cond` a [n, cond_dim] token matrix.
    /// With `adapters` the routed low-rank pairs hook every attention
    /// projection; `train` picks which groups bind as trainable leaves.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        z_t: Var,
        t: usize,
        cond: Var,
        adapters: Option<(&AdapterBank, Route)>,
        train: DenoiserTrainFlags,
    ) -> Result<Var> {
        let s = self.cfg.image_size;
        let zs = tape.value(z_t).shape.clone();
        if zs != vec![3, s, s] {
            return Err(Error::Input(format!(
                "latent shape {zs:?} does not match denoiser input [3, {s}, {s}]"
            )));
        }
        let (_, cdim) = tape.value(cond).dims2();
        if cdim != self.cfg.cond_dim {
            return Err(Error::Input(format!(
                "condition width {cdim} does not match denoiser cond_dim {}",
                self.cfg.cond_dim
            )));
        }

        let tf = tape.constant(time_features(t, self.cfg.time_dim));
        let w1 = binds.bind(tape, "denoiser/time/w1", &self.time_w1, train.base);
        let b1 = binds.bind(tape, "denoiser/time/b1", &self.time_b1, train.base);
        let temb = tape.matmul(tf, w1);
        let temb = tape.add_bias_row(temb, b1);
        let temb = tape.silu(temb);

        let sw = binds.bind(tape, "denoiser/stem/w", &self.stem_w, train.base);
        let sb = binds.bind(tape, "denoiser/stem/b", &self.stem_b, train.base);
        let h0 = tape.conv2d(z_t, sw, sb, 1, 1);

        let d1 = self.d1.forward(tape, binds, "denoiser/d1", h0, temb, train.base);
        let d1 = self.d1_attn.forward(tape, binds, "d1", d1, cond, adapters, train)?;
        let d2 = self.d2.forward(tape, binds, "denoiser/d2", d1, temb, train.base);

        let m = self.mid1.forward(tape, binds, "denoiser/mid1", d2, temb, train.base);
        let m = self.mid_attn.forward(tape, binds, "mid", m, cond, adapters, train)?;
        let m = self.mid2.forward(tape, binds, "denoiser/mid2", m, temb, train.base);

        let up = tape.upsample2x(m);
        let cat = tape.concat_channels(up, d1);
        let u = self.u1.forward(tape, binds, "denoiser/u1", cat, temb, train.base);
        let u = self.u1_attn.forward(tape, binds, "u1", u, cond, adapters, train)?;

        let up = tape.upsample2x(u);
        let cat = tape.concat_channels(up, h0);
        let u = self.u2.forward(tape, binds, "denoiser/u2", cat, temb, train.base);

        let og = binds.bind(tape, "denoiser/out/n-g", &self.out_n_g, train.base);
        let ob = binds.bind(tape, "denoiser/out/n-b", &self.out_n_b, train.base);
        let tok = tape.chw_to_tokens(u);
        let tok = tape.layer_norm(tok, og, ob, 1e-5);
        let u = tape.tokens_to_chw(tok, s, s);
        let u = tape.silu(u);
        let ow = binds.bind(tape, "denoiser/out/w", &self.out_w, train.base);
        let obias = binds.bind(tape, "denoiser/out/b", &self.out_b, train.base);
        Ok(tape.conv2d(u, ow, obias, 1, 1))
    }

    /// Plain prediction without gradient recording.
    pub fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        adapters: Option<(&AdapterBank, Route)>,
    ) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut binds = ParamBindings::new();
        let z = tape.constant(z_t.clone());
        let c = tape.constant(cond.clone());
        let out = self.forward(&mut tape, &mut binds, z, t, c, adapters, DenoiserTrainFlags::NONE)?;
        Ok(tape.value(out).clone())
    }

    fn attn_block(&self, block: &str) -> Option<&AttnBlock> {
        match block {
            "d1" => Some(&self.d1_attn),
            "mid" => Some(&self.mid_attn),
            "u1" => Some(&self.u1_attn),
            _ => None,
        }
    }

    fn attn_block_mut(&mut self, block: &str) -> Option<&mut AttnBlock> {
        match block {
            "d1" => Some(&mut self.d1_attn),
            "mid" => Some(&mut self.mid_attn),
            "u1" => Some(&mut self.u1_attn),
            _ => None,
        }
    }
}

impl SiteWeights for Denoiser {
    fn site_weight(&self, site: &str) -> Result<&Tensor> {
        let err = || Error::Adapter(format!("unknown adapter site '{site}'"));
        let (block, kind) = site.split_once('/').ok_or_else(err)?;
        let blk = self.attn_block(block).ok_or_else(err)?;
        let idx = AttnBlock::kind_index(kind).ok_or_else(err)?;
        Ok(&blk.proj[idx])
    }

    fn site_weight_mut(&mut self, site: &str) -> Result<&mut Tensor> {
        let err = || Error::Adapter(format!("unknown adapter site '{site}'"));
        let (block, kind) = site.split_once('/').ok_or_else(err)?;
        let blk = self.attn_block_mut(block).ok_or_else(err)?;
        let idx = AttnBlock::kind_index(kind).ok_or_else(err)?;
        Ok(&mut blk.proj[idx])
    }
}

impl Parameterized for Denoiser {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("denoiser/time/w1", &self.time_w1);
        f("denoiser/time/b1", &self.time_b1);
        f("denoiser/stem/w", &self.stem_w);
        f("denoiser/stem/b", &self.stem_b);
        self.d1.visit("denoiser/d1", f);
        self.d1_attn.visit("denoiser/attn/d1", f);
        self.d2.visit("denoiser/d2", f);
        self.mid1.visit("denoiser/mid1", f);
        self.mid_attn.visit("denoiser/attn/mid", f);
        self.mid2.visit("denoiser/mid2", f);
        self.u1.visit("denoiser/u1", f);
        self.u1_attn.visit("denoiser/attn/u1", f);
        self.u2.visit("denoiser/u2", f);
        f("denoiser/out/n-g", &self.out_n_g);
        f("denoiser/out/n-b", &self.out_n_b);
        f("denoiser/out/w", &self.out_w);
        f("denoiser/out/b", &self.out_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("denoiser/time/w1", &mut self.time_w1);
        f("denoiser/time/b1", &mut self.time_b1);
        f("denoiser/stem/w", &mut self.stem_w);
        f("denoiser/stem/b", &mut self.stem_b);
        self.d1.visit_mut("denoiser/d1", f);
        self.d1_attn.visit_mut("denoiser/attn/d1", f);
        self.d2.visit_mut("denoiser/d2", f);
        self.mid1.visit_mut("denoiser/mid1", f);
        self.mid_attn.visit_mut("denoiser/attn/mid", f);
        self.mid2.visit_mut("denoiser/mid2", f);
        self.u1.visit_mut("denoiser/u1", f);
        self.u1_attn.visit_mut("denoiser/attn/u1", f);
        self.u2.visit_mut("denoiser/u2", f);
        f("denoiser/out/n-g", &mut self.out_n_g);
        f("denoiser/out/n-b", &mut self.out_n_b);
        f("denoiser/out/w", &mut self.out_w);
        f("denoiser/out/b", &mut self.out_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, grad_close};
    use crate::params::{params_hash, params_to_map};
    use crate::taxonomy::EmotionLabel;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            channels: [4, 6, 8],
            cond_dim: 10,
            time_dim: 8,
            time_hidden: 12,
        }
    }

    fn tiny() -> Denoiser {
        Denoiser::init(tiny_cfg(), 11).unwrap()
    }

    fn inputs() -> (Tensor, Tensor) {
        let mut rng = rng_for(99, "unet-test", 0);
        let z = Tensor::randn(vec![3, 8, 8], 1.0, &mut rng);
        let cond = Tensor::randn(vec![3, 10], 1.0, &mut rng);
        (z, cond)
    }

    fn loss_value(
        d: &Denoiser,
        z: &Tensor,
        t: usize,
        cond: &Tensor,
        adapters: Option<(&AdapterBank, Route)>,
    ) -> f64 {
        let mut tape = Tape::inference();
        let mut binds = ParamBindings::new();
        let zv = tape.constant(z.clone());
        let cv = tape.constant(cond.clone());
        let out = d
            .forward(&mut tape, &mut binds, zv, t, cv, adapters, DenoiserTrainFlags::NONE)
            .unwrap();
        let sq = tape.mul(out, out);
        let loss = tape.mean_all(sq);
        tape.value(loss).data[0]
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let mut c = tiny_cfg();
        c.image_size = 10;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.time_dim = 7;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.channels[1] = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn time_features_basics() {
        let f0 = time_features(0, 8);
        assert_eq!(f0.shape, vec![1, 8]);
        for i in 0..4 {
            assert_eq!(f0.data[i], 0.0);
            assert_eq!(f0.data[4 + i], 1.0);
        }
        let fa = time_features(3, 8);
        let fb = time_features(4, 8);
        assert!(fa.data.iter().zip(&fb.data).any(|(a, b)| a != b));
    }

    #[test]
    fn forward_shape_and_determinism() {
        let d = tiny();
        let (z, cond) = inputs();
        let a = d.predict(&z, 5, &cond, None).unwrap();
        assert_eq!(a.shape, vec![3, 8, 8]);
        let b = d.predict(&z, 5, &cond, None).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn recording_matches_inference_bitwise() {
        let d = tiny();
        let (z, cond) = inputs();
        let plain = d.predict(&z, 3, &cond, None).unwrap();
        let mut tape = Tape::new();
        let mut binds = ParamBindings::new();
        let zv = tape.leaf(z.clone(), true);
        let cv = tape.constant(cond.clone());
        let out = d
            .forward(&mut tape, &mut binds, zv, 3, cv, None, DenoiserTrainFlags::BASE)
            .unwrap();
        assert_eq!(tape.value(out).data, plain.data);
        assert!(!binds.is_empty());
    }

    #[test]
    fn timestep_and_condition_change_output() {
        let d = tiny();
        let (z, cond) = inputs();
        let a = d.predict(&z, 0, &cond, None).unwrap();
        let b = d.predict(&z, 60, &cond, None).unwrap();
        assert!(a.data.iter().zip(&b.data).any(|(x, y)| (x - y).abs() > 1e-9));
        let mut cond2 = cond.clone();
        for v in &mut cond2.data {
            *v = -*v;
        }
        let c = d.predict(&z, 0, &cond2, None).unwrap();
        assert!(a.data.iter().zip(&c.data).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn site_table_covers_all_attention_projections() {
        let d = tiny();
        let sites = d.adapter_site_shapes();
        assert_eq!(sites.len(), 24);
        for (name, (d_in, d_out)) in &sites {
            let w = d.site_weight(name).unwrap();
            assert_eq!(w.shape, vec![*d_in, *d_out], "site {name}");
        }
        assert_eq!(
            sites.iter().filter(|(n, _)| n.ends_with("cross/k")).count(),
            3
        );
        assert!(d.site_weight("d3/self/q").is_err());
        assert!(d.site_weight("mid/zig/q").is_err());
    }

    #[test]
    fn fresh_adapters_leave_output_unchanged() {
        let d = tiny();
        let bank = d.adapter_bank(2, 1.0, 7);
        let (z, cond) = inputs();
        for label in [EmotionLabel::Awe, EmotionLabel::Fear] {
            let plain = d.predict(&z, 9, &cond, None).unwrap();
            let routed = d.predict(&z, 9, &cond, Some((&bank, Route::new(label)))).unwrap();
            assert_eq!(plain.data, routed.data);
        }
    }

    #[test]
    fn merged_weights_match_adapter_forward() {
        let mut d = tiny();
        let mut bank = d.adapter_bank(2, 1.0, 7);
        let mut rng = rng_for(5, "merge-test", 0);
        bank.visit_params_mut(&mut |_, t| {
            *t = Tensor::randn(t.shape.clone(), 0.1, &mut rng);
        });
        let (z, cond) = inputs();
        let route = Route::new(EmotionLabel::Sadness);
        let hooked = d.predict(&z, 4, &cond, Some((&bank, route))).unwrap();
        let before = params_hash(&d);

        let guard = crate::adapters::merge(&bank, &mut d, route).unwrap();
        let merged = d.predict(&z, 4, &cond, None).unwrap();
        for (a, b) in hooked.data.iter().zip(&merged.data) {
            assert!((a - b).abs() < 1e-9, "merged forward drifted: {a} vs {b}");
        }
        crate::adapters::unmerge(guard, &mut d).unwrap();
        assert_eq!(params_hash(&d), before);
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        let d = tiny();
        let (z, cond) = inputs();
        let t = 7;

        let mut tape = Tape::new();
        let mut binds = ParamBindings::new();
        let zv = tape.constant(z.clone());
        let cv = tape.constant(cond.clone());
        let out = d
            .forward(&mut tape, &mut binds, zv, t, cv, None, DenoiserTrainFlags::BASE)
            .unwrap();
        let sq = tape.mul(out, out);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();

        let by_name: std::collections::BTreeMap<&str, Var> =
            binds.entries().iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let checks = [
            ("denoiser/stem/w", 0),
            ("denoiser/time/w1", 3),
            ("denoiser/d1/conv1-w", 5),
            ("denoiser/d1/time-w", 1),
            ("denoiser/attn/d1/self/q", 2),
            ("denoiser/attn/mid/cross/k", 0),
            ("denoiser/mid1/n1-g", 1),
            ("denoiser/u1/skip-w", 4),
            ("denoiser/u2/conv2-b", 0),
            ("denoiser/out/w", 6),
        ];
        for (name, coord) in checks {
            let var = by_name[name];
            let analytic = grads.get(var).expect(name).data[coord];
            let mut probe = d.clone();
            let mut base = f64::NAN;
            probe.visit_params_mut(&mut |n, t| {
                if n == name {
                    base = t.data[coord];
                }
            });
            assert!(base.is_finite(), "param {name} not found");
            let numeric = central_difference(&[base], 0, &mut |x: &[f64]| {
                let mut m = probe.clone();
                m.visit_params_mut(&mut |n, t| {
                    if n == name {
                        t.data[coord] = x[0];
                    }
                });
                loss_value(&m, &z, t, &cond, None)
            });
            assert!(
                grad_close(analytic, numeric),
                "{name}[{coord}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences_and_stay_isolated() {
        let d = tiny();
        let mut bank = d.adapter_bank(2, 1.0, 3);
        let mut rng = rng_for(21, "unet-adapter-fd", 0);
        bank.visit_params_mut(&mut |_, t| {
            *t = Tensor::randn(t.shape.clone(), 0.1, &mut rng);
        });
        let (z, cond) = inputs();
        let t = 2;
        let route = Route::new(EmotionLabel::Anger);

        let mut tape = Tape::new();
        let mut binds = ParamBindings::new();
        let zv = tape.constant(z.clone());
        let cv = tape.constant(cond.clone());
        let out = d
            .forward(
                &mut tape,
                &mut binds,
                zv,
                t,
                cv,
                Some((&bank, route)),
                DenoiserTrainFlags::ADAPTERS,
            )
            .unwrap();
        let sq = tape.mul(out, out);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();

        // Only routed adapter pairs are bound: 24 sites x 2 pairs x 2 tensors.
        assert_eq!(binds.len(), 96);
        for (name, _) in binds.entries() {
            assert!(name.starts_with("adapters/"), "unexpected bind {name}");
            assert!(
                name.contains("/emotion/anger/") || name.contains("/polarity/negative/"),
                "non-routed pair bound: {name}"
            );
        }

        let by_name: std::collections::BTreeMap<&str, Var> =
            binds.entries().iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let checks = [
            ("adapters/d1/self/q/emotion/anger/a", 1),
            ("adapters/d1/self/q/emotion/anger/b", 2),
            ("adapters/mid/cross/k/polarity/negative/a", 0),
            ("adapters/mid/cross/k/polarity/negative/b", 3),
            ("adapters/u1/cross/out/emotion/anger/b", 0),
        ];
        for (name, coord) in checks {
            let var = by_name[name];
            let analytic = grads.get(var).expect(name).data[coord];
            let mut base = f64::NAN;
            bank.visit_params(&mut |n, t| {
                if n == name {
                    base = t.data[coord];
                }
            });
            assert!(base.is_finite(), "adapter param {name} not found");
            let numeric = central_difference(&[base], 0, &mut |x: &[f64]| {
                let mut b = bank.clone();
                b.visit_params_mut(&mut |n, t| {
                    if n == name {
                        t.data[coord] = x[0];
                    }
                });
                loss_value(&d, &z, t, &cond, Some((&b, route)))
            });
            assert!(
                grad_close(analytic, numeric),
                "{name}[{coord}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn param_map_round_trip() {
        let d = tiny();
        let map = params_to_map(&d);
        assert!(map.contains_key("denoiser/attn/u1/cross/out"));
        assert!(map.contains_key("denoiser/u1/skip-w"));
        assert!(!map.contains_key("denoiser/mid1/skip-w"));
        let mut other = Denoiser::init(tiny_cfg(), 999).unwrap();
        assert_ne!(params_hash(&other), params_hash(&d));
        crate::params::load_params_from_map(&mut other, &map).unwrap();
        assert_eq!(params_hash(&other), params_hash(&d));
    }

    #[test]
    fn rejects_misshapen_inputs() {
        let d = tiny();
        let cond = Tensor::zeros(vec![3, 10]);
        let bad_z = Tensor::zeros(vec![3, 4, 4]);
        assert!(d.predict(&bad_z, 0, &cond, None).is_err());
        let z = Tensor::zeros(vec![3, 8, 8]);
        let bad_cond = Tensor::zeros(vec![3, 9]);
        assert!(d.predict(&z, 0, &bad_cond, None).is_err());
    }
}
