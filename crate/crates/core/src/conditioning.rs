//! Emotion conditioning: a learnable mapper from one-hot emotions to
//! descriptor vectors, single-query attention that grounds a descriptor in an
//! image's visual tokens, and assembly of the resulting pseudo-token into a
//! frozen-text-encoder sequence whose hidden states condition the denoiser.

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoders::{TextEncoder, BOS_ID, EOS_ID};
use crate::error::Result;
use crate::params::{ParamBindings, Parameterized};
use crate::taxonomy::{EmotionLabel, OneHotEmotion, EMOTION_COUNT};
use crate::util::rng_for;

/// Two fully connected layers lifting a one-hot emotion into the text
/// embedding space.
#[derive(Debug, Clone)]
pub struct EmotionMapper {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl EmotionMapper {
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "mapper", 0);
        Self {
            w1: Tensor::randn(
                vec![EMOTION_COUNT, hidden],
                1.0 / (EMOTION_COUNT as f64).sqrt(),
                &mut rng,
            ),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::randn(vec![hidden, dim], 1.0 / (hidden as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(vec![dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w2.shape[1]
    }

    /// Descriptor for an emotion, [1, dim], on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        onehot: &OneHotEmotion,
        trainable: bool,
    ) -> Var {
        let x = tape.constant(Tensor::new(
            vec![1, EMOTION_COUNT],
            onehot.as_slice().to_vec(),
        ));
        let w1 = binds.bind(tape, "mapper/w1", &self.w1, trainable);
        let b1 = binds.bind(tape, "mapper/b1", &self.b1, trainable);
        let w2 = binds.bind(tape, "mapper/w2", &self.w2, trainable);
        let b2 = binds.bind(tape, "mapper/b2", &self.b2, trainable);
        let h = tape.matmul(x, w1);
        let h = tape.add_bias_row(h, b1);
        let h = tape.tanh(h);
        let e = tape.matmul(h, w2);
        tape.add_bias_row(e, b2)
    }

    /// Pure descriptor for an emotion, [1, dim].
    pub fn descriptor(&self, label: EmotionLabel) -> Tensor {
        let mut tape = Tape::inference();
        let mut binds = ParamBindings::new();
        let e = self.forward(&mut tape, &mut binds, &label.one_hot(), false);
        tape.value(e).clone()
    }
}

impl Parameterized for EmotionMapper {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("mapper/w1", &self.w1);
        f("mapper/b1", &self.b1);
        f("mapper/w2", &self.w2);
        f("mapper/b2", &self.b2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("mapper/w1", &mut self.w1);
        f("mapper/b1", &mut self.b1);
        f("mapper/w2", &mut self.w2);
        f("mapper/b2", &mut self.b2);
    }
}

/// Single-query cross-attention that pools visual tokens under an emotion
/// descriptor:
///
/// ```text
/// out = softmax(e Wq (v Wk)^T / sqrt(d)) (v Wv)
/// ```
///
/// With a single visual token the softmax collapses to 1, so the output is
/// exactly that token's value projection.
#[derive(Debug, Clone)]
pub struct VisualAttention {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
}

impl VisualAttention {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "visual-attention", 0);
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            wq: Tensor::randn(vec![dim, dim], std, &mut rng),
            wk: Tensor::randn(vec![dim, dim], std, &mut rng),
            wv: Tensor::randn(vec![dim, dim], std, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape[0]
    }

    /// Grounded descriptor, [1, dim]. `descriptor` is [1, dim], `v_tokens`
    /// is [m, dim].
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        descriptor: Var,
        v_tokens: Var,
        trainable: bool,
    ) -> Var {
        let dim = self.dim();
        let wq = binds.bind(tape, "visual-attention/wq", &self.wq, trainable);
        let wk = binds.bind(tape, "visual-attention/wk", &self.wk, trainable);
        let wv = binds.bind(tape, "visual-attention/wv", &self.wv, trainable);
        let q = tape.matmul(descriptor, wq);
        let k = tape.matmul(v_tokens, wk);
        let v = tape.matmul(v_tokens, wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (dim as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        tape.matmul(attn, v)
    }

    /// Pure value projection of a single visual token, [1, dim]; the exact
    /// single-token reduction of [`forward`].
    pub fn project_single(&self, v: &Tensor) -> Tensor {
        assert_eq!(v.shape, vec![1, self.dim()], "expected one visual token");
        let dim = self.dim();
        Tensor::new(
            vec![1, dim],
            crate::autodiff::mm(&v.data, &self.wv.data, 1, dim, dim),
        )
    }
}

impl Parameterized for VisualAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("visual-attention/wq", &self.wq);
        f("visual-attention/wk", &self.wk);
        f("visual-attention/wv", &self.wv);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("visual-attention/wq", &mut self.wq);
        f("visual-attention/wk", &mut self.wk);
        f("visual-attention/wv", &mut self.wv);
    }
}

/// Which conditioning components receive gradients this pass.
#[derive(Debug, Clone, Copy)]
pub struct ConditionTrainFlags {
    pub mapper: bool,
    pub attention: bool,
}

impl ConditionTrainFlags {
    pub const ALL: Self = Self { mapper: true, attention: true };
    pub const NONE: Self = Self { mapper: false, attention: false };
}

/// A built condition on the tape.
pub struct Condition {
    /// Text-encoder hidden states over the pseudo-token sequence, [n, dim];
    /// the cross-attention context for the denoiser.
    pub tokens: Var,
    /// Hidden state at the end-of-sequence position, [1, dim]; the pooled
    /// vector used by the semantic alignment loss.
    pub pooled: Var,
    /// Emotion descriptor before grounding, [1, dim].
    pub descriptor: Var,
    /// Grounded pseudo-token spliced between the sequence markers, [1, dim].
    pub pseudo: Var,
}

/// Builds the emotion condition for one sample: descriptor -> grounded
/// pseudo-token -> frozen text encoder over [BOS, pseudo, EOS].
pub fn build_condition(
    tape: &mut Tape,
    binds: &mut ParamBindings,
    mapper: &EmotionMapper,
    attention: &VisualAttention,
    text: &TextEncoder,
    label: EmotionLabel,
    v_tokens: &Tensor,
    train: ConditionTrainFlags,
) -> Result<Condition> {
    let v = tape.constant(v_tokens.clone());
    let descriptor = mapper.forward(tape, binds, &label.one_hot(), train.mapper);
    let pseudo = attention.forward(tape, binds, descriptor, v, train.attention);
    let bos = tape.constant(text.embedding_row(BOS_ID));
    let eos = tape.constant(text.embedding_row(EOS_ID));
    let rows = tape.stack_rows(&[bos, pseudo, eos]);
    let enc = text.encode_rows(tape, binds, rows)?;
    Ok(Condition {
        tokens: enc.hidden,
        pooled: enc.pooled,
        descriptor,
        pseudo,
    })
}

/// Condition hidden states for the empty sequence [BOS, EOS]: the
/// unconditional context used for base training and guidance.
pub fn null_condition(text: &TextEncoder) -> Result<(Tensor, Tensor)> {
    text.encode_ids(&[BOS_ID, EOS_ID])
}
