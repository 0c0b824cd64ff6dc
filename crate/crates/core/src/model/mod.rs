//! The encoder: two strided TDNN layers (x4 temporal downsampling), six
//! transformer encoder layers each topped with a dilated convolution, a
//! linear projection to unit-norm frame embeddings, and the pair-input
//! wiring used for verification.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, PRSM_MAGIC, PRSM_VERSION};

use crate::features::{FeatureMatrix, HOP_SECONDS};
use crate::numerics::{BufId, NumericsError, ParamBindings, Params, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Receptive-field bounds on the conv path, in seconds each side.
const RF_MIN_S: f64 = 1.3;
const RF_MAX_S: f64 = 1.5;

pub const MIN_INPUT_FRAMES: usize = 8;
/// Zero padding inserted between paired utterances; generous against the
/// ~1.42 s one-sided conv receptive field so the conv paths never touch.
pub const PAIR_PAD_SECONDS: f64 = 3.0;
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub tdnn_kernel: usize,
    pub tdnn_stride: usize,
    pub encoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub dilation_schedule: Vec<usize>,
    pub embedding_dim: usize,
    /// Activity streams emitted by the diarization head.
    pub diar_streams: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 140,
            tdnn_kernel: 5,
            tdnn_stride: 2,
            encoder_layers: 6,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            conv_kernel: 3,
            dilation_schedule: vec![1, 2, 4, 8, 9, 10],
            embedding_dim: 32,
            diar_streams: 4,
        }
    }
}

impl ModelConfig {
    /// Toy-scale config used across tests and the experiment drivers.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            model_dim: 32,
            ffn_dim: 128,
            ..ModelConfig::default()
        }
    }

    /// Conv-path receptive field in input frames: the center frame plus the
    /// per-layer reaches scaled by the temporal jump accumulated below them.
    pub fn receptive_field_frames(&self) -> usize {
        let tdnn_reach = (self.tdnn_kernel - 1) * 1 + (self.tdnn_kernel - 1) * self.tdnn_stride;
        let jump = self.tdnn_stride * self.tdnn_stride;
        let conv_reach: usize = self
            .dilation_schedule
            .iter()
            .map(|d| (self.conv_kernel - 1) * d * jump)
            .sum();
        1 + tdnn_reach + conv_reach
    }

    pub fn receptive_field_seconds(&self) -> f64 {
        (self.receptive_field_frames() - 1) as f64 / 2.0 * HOP_SECONDS
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.dilation_schedule.len() != self.encoder_layers {
            return Err(ModelError::BadConfig(format!(
                "dilation schedule has {} entries for {} layers",
                self.dilation_schedule.len(),
                self.encoder_layers
            )));
        }
        if self.conv_kernel % 2 == 0 || self.tdnn_kernel % 2 == 0 {
            return Err(ModelError::BadConfig("kernels must be odd".into()));
        }
        let rf = self.receptive_field_seconds();
        if !(RF_MIN_S..=RF_MAX_S).contains(&rf) {
            return Err(ModelError::BadConfig(format!(
                "conv receptive field +-{rf:.3} s outside [+-{RF_MIN_S}, +-{RF_MAX_S}] s"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn pair_pad_frames(&self) -> usize {
        (PAIR_PAD_SECONDS / HOP_SECONDS).round() as usize
    }

    /// Output length after the two strided TDNN layers.
    pub fn output_frames(&self, input_frames: usize) -> usize {
        input_frames
            .div_ceil(self.tdnn_stride)
            .div_ceil(self.tdnn_stride)
    }

    /// Trunk parameters, seeded fan-in-scaled uniform init.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xbeef);
        let mut params = Params::new();
        let d = self.model_dim;
        let conv = |p: &mut Params, name: &str, k: usize, c_in: usize, c_out: usize,
                        rng: &mut ChaCha8Rng| {
            let bound = (1.0 / (k * c_in) as f64).sqrt();
            p.insert(&format!("{name}.w"), Tensor::uniform(vec![k, c_in, c_out], bound, rng));
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![c_out]));
        };
        let linear = |p: &mut Params, name: &str, d_in: usize, d_out: usize,
                          rng: &mut ChaCha8Rng| {
            let bound = (1.0 / d_in as f64).sqrt();
            p.insert(&format!("{name}.w"), Tensor::uniform(vec![d_in, d_out], bound, rng));
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![d_out]));
        };
        let norm = |p: &mut Params, name: &str, dim: usize| {
            p.insert(&format!("{name}.g"), Tensor::filled(vec![dim], 1.0));
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![dim]));
        };

        conv(&mut params, "tdnn1", self.tdnn_kernel, self.input_dim, d, &mut rng);
        conv(&mut params, "tdnn2", self.tdnn_kernel, d, d, &mut rng);
        for l in 0..self.encoder_layers {
            let pfx = format!("layer{l}");
            linear(&mut params, &format!("{pfx}.attn.q"), d, d, &mut rng);
            linear(&mut params, &format!("{pfx}.attn.k"), d, d, &mut rng);
            linear(&mut params, &format!("{pfx}.attn.v"), d, d, &mut rng);
            linear(&mut params, &format!("{pfx}.attn.o"), d, d, &mut rng);
            norm(&mut params, &format!("{pfx}.ln1"), d);
            linear(&mut params, &format!("{pfx}.ffn.1"), d, self.ffn_dim, &mut rng);
            linear(&mut params, &format!("{pfx}.ffn.2"), self.ffn_dim, d, &mut rng);
            norm(&mut params, &format!("{pfx}.ln2"), d);
            conv(&mut params, &format!("{pfx}.conv"), self.conv_kernel, d, d, &mut rng);
            norm(&mut params, &format!("{pfx}.ln3"), d);
        }
        linear(&mut params, "proj", d, self.embedding_dim, &mut rng);
        params
    }

    /// Verification head: one unit-length class direction per speaker.
    pub fn init_ams_head(&self, n_classes: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xa5);
        Tensor::uniform(vec![n_classes, self.embedding_dim], 1.0, &mut rng)
    }

    /// Diarization head: linear from trunk features to activity logits.
    pub fn init_diar_head(&self, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xd1);
        let bound = (1.0 / self.model_dim as f64).sqrt();
        (
            Tensor::uniform(vec![self.model_dim, self.diar_streams], bound, &mut rng),
            Tensor::zeros(vec![self.diar_streams]),
        )
    }
}

/// Whether self-attention runs globally or is replaced by the identity map
/// (conv-path isolation for tests and diagnostics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    Identity,
}

/// Tape handles produced by one encoder pass.
pub struct EncodeOut {
    /// Trunk features before the embedding projection, [T' x model_dim].
    pub trunk: BufId,
    /// Unit-norm frame embeddings, [T' x embedding_dim].
    pub embeddings: BufId,
    pub frames_out: usize,
}

/// Run the encoder over a stacked T x 140 input already on the tape.
pub fn encode(
    tape: &mut Tape,
    p: &ParamBindings,
    cfg: &ModelConfig,
    input: BufId,
    mode: AttentionMode,
) -> Result<EncodeOut, ModelError> {
    let frames_in = tape.rows(input);
    if frames_in < MIN_INPUT_FRAMES {
        return Err(ModelError::InputTooShort {
            frames: frames_in,
            min: MIN_INPUT_FRAMES,
        });
    }

    // TDNN stack: strided conv + bias + relu, twice
    let mut x = input;
    for name in ["tdnn1", "tdnn2"] {
        let c = tape.conv1d(x, p.get(&format!("{name}.w"))?, cfg.tdnn_stride, 1)?;
        let cb = tape.add_bias(c, p.get(&format!("{name}.b"))?);
        x = tape.relu(cb);
    }

    for l in 0..cfg.encoder_layers {
        let pfx = format!("layer{l}");
        // self-attention sublayer (post-norm residual)
        let attn_out = match mode {
            AttentionMode::Full => attention(tape, p, cfg, &pfx, x)?,
            AttentionMode::Identity => x,
        };
        let res1 = tape.add(x, attn_out);
        x = tape.layer_norm_rows(res1, p.get(&format!("{pfx}.ln1.g"))?, p.get(&format!("{pfx}.ln1.b"))?);

        // feed-forward sublayer
        let h = tape.matmul(x, p.get(&format!("{pfx}.ffn.1.w"))?);
        let h = tape.add_bias(h, p.get(&format!("{pfx}.ffn.1.b"))?);
        let h = tape.relu(h);
        let h = tape.matmul(h, p.get(&format!("{pfx}.ffn.2.w"))?);
        let h = tape.add_bias(h, p.get(&format!("{pfx}.ffn.2.b"))?);
        let res2 = tape.add(x, h);
        x = tape.layer_norm_rows(res2, p.get(&format!("{pfx}.ln2.g"))?, p.get(&format!("{pfx}.ln2.b"))?);

        // dilated convolution on top of the encoder layer
        let c = tape.conv1d(x, p.get(&format!("{pfx}.conv.w"))?, 1, cfg.dilation_schedule[l])?;
        let c = tape.add_bias(c, p.get(&format!("{pfx}.conv.b"))?);
        let res3 = tape.add(x, c);
        x = tape.layer_norm_rows(res3, p.get(&format!("{pfx}.ln3.g"))?, p.get(&format!("{pfx}.ln3.b"))?);
    }

    let e = tape.matmul(x, p.get("proj.w")?);
    let e = tape.add_bias(e, p.get("proj.b")?);
    let y = tape.l2_normalize_rows(e);
    Ok(EncodeOut {
        trunk: x,
        embeddings: y,
        frames_out: tape.rows(y),
    })
}

fn attention(
    tape: &mut Tape,
    p: &ParamBindings,
    cfg: &ModelConfig,
    pfx: &str,
    x: BufId,
) -> Result<BufId, ModelError> {
    let q = tape.matmul(x, p.get(&format!("{pfx}.attn.q.w"))?);
    let q = tape.add_bias(q, p.get(&format!("{pfx}.attn.q.b"))?);
    let k = tape.matmul(x, p.get(&format!("{pfx}.attn.k.w"))?);
    let k = tape.add_bias(k, p.get(&format!("{pfx}.attn.k.b"))?);
    let v = tape.matmul(x, p.get(&format!("{pfx}.attn.v.w"))?);
    let v = tape.add_bias(v, p.get(&format!("{pfx}.attn.v.b"))?);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&heads);
    let o = tape.matmul(merged, p.get(&format!("{pfx}.attn.o.w"))?);
    Ok(tape.add_bias(o, p.get(&format!("{pfx}.attn.o.b"))?))
}

/// Unit-norm frame embeddings with optional label alignment.
#[derive(Debug, Clone)]
pub struct FrameEmbeddings {
    pub y: Tensor,
    pub frames: usize,
    pub dim: usize,
}

/// Inference-style forward over one feature matrix.
pub fn forward(
    cfg: &ModelConfig,
    params: &Params,
    features: &FeatureMatrix,
) -> Result<FrameEmbeddings, ModelError> {
    let mut tape = Tape::new();
    let bindings = bind_inference(&mut tape, params);
    let input = tape.constant(
        vec![features.frames, FeatureMatrix::input_dim()],
        features.stacked(),
    );
    let out = encode(&mut tape, &bindings, cfg, input, AttentionMode::Full)?;
    Ok(FrameEmbeddings {
        y: Tensor::new(
            vec![out.frames_out, cfg.embedding_dim],
            tape.value(out.embeddings).to_vec(),
        )?,
        frames: out.frames_out,
        dim: cfg.embedding_dim,
    })
}

/// Inference forward that also evaluates the diarization head.
pub fn forward_with_diar_head(
    cfg: &ModelConfig,
    params: &Params,
    features: &FeatureMatrix,
) -> Result<(FrameEmbeddings, Tensor), ModelError> {
    let mut tape = Tape::new();
    let bindings = bind_inference(&mut tape, params);
    let input = tape.constant(
        vec![features.frames, FeatureMatrix::input_dim()],
        features.stacked(),
    );
    let out = encode(&mut tape, &bindings, cfg, input, AttentionMode::Full)?;
    let logits = diar_logits(&mut tape, &bindings, out.trunk)?;
    let activities = tape.sigmoid(logits);
    let emb = FrameEmbeddings {
        y: Tensor::new(
            vec![out.frames_out, cfg.embedding_dim],
            tape.value(out.embeddings).to_vec(),
        )?,
        frames: out.frames_out,
        dim: cfg.embedding_dim,
    };
    let act = Tensor::new(
        vec![out.frames_out, cfg.diar_streams],
        tape.value(activities).to_vec(),
    )?;
    Ok((emb, act))
}

/// Activity logits from trunk features.
pub fn diar_logits(
    tape: &mut Tape,
    p: &ParamBindings,
    trunk: BufId,
) -> Result<BufId, ModelError> {
    let h = tape.matmul(trunk, p.get("diar.w")?);
    Ok(tape.add_bias(h, p.get("diar.b")?))
}

/// Bind parameters as constants (no gradients tracked).
pub fn bind_inference(tape: &mut Tape, params: &Params) -> ParamBindings {
    ParamBindings::from_pairs(
        params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.input(t)))
            .collect(),
    )
}

/// Which side of a paired input an output frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSide {
    First,
    Pad,
    Second,
}

/// Frame assembly for a paired input: concatenated features and the
/// downsampled output ranges of each side.
pub struct PairLayout {
    pub features: FeatureMatrix,
    pub frames1: usize,
    pub frames2: usize,
    pub sides: Vec<PairSide>,
    pub range1: std::ops::Range<usize>,
    pub range2: std::ops::Range<usize>,
}

/// Zero margin placed before the first and after the second utterance: one
/// conv-path receptive field, rounded up onto the x4 grid. With it, both
/// utterances see all-zero surroundings through the conv path no matter
/// which slot they occupy, which is what makes score(a,b)=score(b,a) and
/// pooled(a)=pooled(a) for identical inputs hold.
pub const PAIR_MARGIN_FRAMES: usize = 144;

/// Concatenate [margin | utt1 | 3 s pad | utt2 | margin] and classify each
/// output frame by the majority of its input window.
///
/// The inter-utterance pad is stretched by up to 3 frames so the second
/// utterance starts on the x4 downsampling grid; without that, order-swapped
/// pairs would sample the strided convolutions at different phases.
pub fn pair_layout(cfg: &ModelConfig, f1: &FeatureMatrix, f2: &FeatureMatrix) -> PairLayout {
    let margin = PAIR_MARGIN_FRAMES;
    let pad = cfg.pair_pad_frames()
        + (DOWNSAMPLE - (margin + f1.frames) % DOWNSAMPLE) % DOWNSAMPLE;
    let lead = FeatureMatrix::zero_pad(margin);
    let zero = FeatureMatrix::zero_pad(pad);
    let tail = FeatureMatrix::zero_pad(margin);
    let features = FeatureMatrix::concat(&[&lead, f1, &zero, f2, &tail]);
    let t_total = features.frames;
    let t_out = cfg.output_frames(t_total);
    let start1 = margin;
    let start2 = margin + f1.frames + pad;
    let mut sides = Vec::with_capacity(t_out);
    for t in 0..t_out {
        let start = t * DOWNSAMPLE;
        let end = (start + DOWNSAMPLE).min(t_total);
        let mut counts = [0usize; 3]; // first, pad/margins, second
        for i in start..end {
            let side = if (start1..start1 + f1.frames).contains(&i) {
                0
            } else if (start2..start2 + f2.frames).contains(&i) {
                2
            } else {
                1
            };
            counts[side] += 1;
        }
        let span = end - start;
        let side = if counts[0] * 2 > span {
            PairSide::First
        } else if counts[2] * 2 > span {
            PairSide::Second
        } else {
            PairSide::Pad
        };
        sides.push(side);
    }
    let r1_start = sides
        .iter()
        .position(|s| *s == PairSide::First)
        .unwrap_or(0);
    let r1_end = sides
        .iter()
        .rposition(|s| *s == PairSide::First)
        .map(|i| i + 1)
        .unwrap_or(r1_start);
    let r2_start = sides
        .iter()
        .position(|s| *s == PairSide::Second)
        .unwrap_or(t_out);
    let r2_end = sides
        .iter()
        .rposition(|s| *s == PairSide::Second)
        .map(|i| i + 1)
        .unwrap_or(r2_start);
    PairLayout {
        features,
        frames1: f1.frames,
        frames2: f2.frames,
        sides,
        range1: r1_start..r1_end,
        range2: r2_start..r2_end,
    }
}

/// Tape handles for a pair forward: frame embeddings plus the two pooled,
/// re-normalized utterance vectors.
pub struct PairOut {
    pub encode: EncodeOut,
    pub pooled1: BufId,
    pub pooled2: BufId,
}

pub fn forward_pair_on_tape(
    tape: &mut Tape,
    p: &ParamBindings,
    cfg: &ModelConfig,
    layout: &PairLayout,
    mode: AttentionMode,
) -> Result<PairOut, ModelError> {
    let input = tape.constant(
        vec![layout.features.frames, FeatureMatrix::input_dim()],
        layout.features.stacked(),
    );
    let out = encode(tape, p, cfg, input, mode)?;
    let pool = |tape: &mut Tape, r: &std::ops::Range<usize>| -> BufId {
        let sliced = tape.slice_rows(out.embeddings, r.start, r.len());
        let mean = tape.row_mean(sliced);
        tape.l2_normalize_rows(mean)
    };
    let pooled1 = pool(tape, &layout.range1);
    let pooled2 = pool(tape, &layout.range2);
    Ok(PairOut {
        encode: out,
        pooled1,
        pooled2,
    })
}

/// Pooled embeddings for both utterances of a pair (inference).
pub fn forward_pair(
    cfg: &ModelConfig,
    params: &Params,
    f1: &FeatureMatrix,
    f2: &FeatureMatrix,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let layout = pair_layout(cfg, f1, f2);
    let mut tape = Tape::new();
    let bindings = bind_inference(&mut tape, params);
    let out = forward_pair_on_tape(&mut tape, &bindings, cfg, &layout, AttentionMode::Full)?;
    Ok((
        tape.value(out.pooled1).to_vec(),
        tape.value(out.pooled2).to_vec(),
    ))
}

/// Cosine similarity of the context-conditioned pooled pair embeddings.
pub fn score_pair(
    cfg: &ModelConfig,
    params: &Params,
    f1: &FeatureMatrix,
    f2: &FeatureMatrix,
) -> Result<f64, ModelError> {
    let (p1, p2) = forward_pair(cfg, params, f1, f2)?;
    Ok(p1.iter().zip(&p2).map(|(a, b)| a * b).sum())
}

/// Majority label of each length-4 input window; ties resolve to the
/// smallest label, silence wins only when it is the strict majority.
pub fn downsample_labels(labels: &[usize], t_out: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(t_out);
    for t in 0..t_out {
        let start = t * DOWNSAMPLE;
        let end = (start + DOWNSAMPLE).min(labels.len());
        let window = &labels[start..end.max(start)];
        let mut best = crate::datasim::NO_SPEAKER;
        let mut best_count = 0usize;
        let mut seen: Vec<(usize, usize)> = Vec::new();
        for &l in window {
            let entry = seen.iter_mut().find(|(k, _)| *k == l);
            match entry {
                Some((_, c)) => *c += 1,
                None => seen.push((l, 1)),
            }
        }
        seen.sort_by_key(|&(l, _)| l);
        for (l, c) in seen {
            if c > best_count {
                best = l;
                best_count = c;
            }
        }
        out.push(best);
    }
    out
}

/// Downsampled activity: a speaker is active in an output frame when active
/// in at least half of the corresponding input frames.
pub fn downsample_activity(activity: &[f64], t_in: usize, n_speakers: usize, t_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_out * n_speakers];
    for t in 0..t_out {
        let start = t * DOWNSAMPLE;
        let end = (start + DOWNSAMPLE).min(t_in);
        let span = (end - start).max(1);
        for s in 0..n_speakers {
            let active: f64 = (start..end).map(|i| activity[i * n_speakers + s]).sum();
            if active * 2.0 >= span as f64 {
                out[t * n_speakers + s] = 1.0;
            }
        }
    }
    out
}

/// Count input positions that can influence a fixed central output of the
/// conv-only path (attention replaced by identity, all-ones kernels).
pub fn conv_path_impulse_support(cfg: &ModelConfig, probe_frames: usize) -> usize {
    let run = |input: &[f64]| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(vec![input.len(), 1], input.to_vec());
        let tdnn_w = tape.constant(
            vec![cfg.tdnn_kernel, 1, 1],
            vec![1.0; cfg.tdnn_kernel],
        );
        let mut cur = tape.conv1d(x, tdnn_w, cfg.tdnn_stride, 1).unwrap();
        cur = tape.conv1d(cur, tdnn_w, cfg.tdnn_stride, 1).unwrap();
        let conv_w = tape.constant(
            vec![cfg.conv_kernel, 1, 1],
            vec![1.0; cfg.conv_kernel],
        );
        for &d in &cfg.dilation_schedule {
            cur = tape.conv1d(cur, conv_w, 1, d).unwrap();
        }
        tape.value(cur).to_vec()
    };
    let zeros = vec![0.0; probe_frames];
    let base = run(&zeros);
    let mid_out = base.len() / 2;
    let mut count = 0;
    for p in 0..probe_frames {
        let mut input = zeros.clone();
        input[p] = 1.0;
        let out = run(&input);
        if out[mid_out] != base[mid_out] {
            count += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_features(frames: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acoustic = (0..frames * 40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phonetic = (0..frames * 100).map(|_| rng.gen_range(-0.1..0.1)).collect();
        FeatureMatrix::new(acoustic, phonetic, frames)
    }

    #[test]
    fn default_receptive_field_is_285_frames() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.receptive_field_frames(), 285);
        assert!((cfg.receptive_field_seconds() - 1.42).abs() < 1e-9);
        cfg.validate().unwrap();
    }

    #[test]
    fn receptive_field_outside_band_rejected() {
        let cfg = ModelConfig {
            dilation_schedule: vec![1, 1, 1, 1, 1, 1],
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
    }

    #[test]
    fn measured_conv_path_support_matches_formula() {
        let cfg = ModelConfig::toy();
        assert_eq!(conv_path_impulse_support(&cfg, 600), 285);
    }

    #[test]
    fn output_length_is_ceil_t_over_4() {
        let cfg = ModelConfig::toy();
        assert_eq!(cfg.output_frames(400), 100);
        assert_eq!(cfg.output_frames(401), 101);
        // through the real forward as well
        let params = cfg.init_params(0);
        for frames in [64, 65, 66, 67] {
            let emb = forward(&cfg, &params, &random_features(frames, 1)).unwrap();
            assert_eq!(emb.frames, frames.div_ceil(4));
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let cfg = ModelConfig::toy();
        let params = cfg.init_params(4);
        let emb = forward(&cfg, &params, &random_features(100, 2)).unwrap();
        for t in 0..emb.frames {
            let norm: f64 = emb.y.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn too_short_input_rejected() {
        let cfg = ModelConfig::toy();
        let params = cfg.init_params(0);
        let err = forward(&cfg, &params, &random_features(7, 0)).unwrap_err();
        assert!(matches!(err, ModelError::InputTooShort { frames: 7, min: 8 }));
    }

    #[test]
    fn pair_gap_is_exactly_three_seconds() {
        // 3 s + 4 s utterances: 3.0 s of zeros in between (300 frames at the
        // 10 ms hop), plus the fixed zero margins at both ends
        let cfg = ModelConfig::toy();
        let layout = pair_layout(&cfg, &random_features(300, 1), &random_features(400, 2));
        assert_eq!(
            layout.features.frames,
            300 + 300 + 400 + 2 * PAIR_MARGIN_FRAMES
        );
        let gap_start = PAIR_MARGIN_FRAMES + 300;
        for t in gap_start..gap_start + 300 {
            assert!(layout.features.acoustic_row(t).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn identical_utterances_pool_identically() {
        let cfg = ModelConfig::toy();
        let params = cfg.init_params(9);
        let f = random_features(96, 3);
        let (p1, p2) = forward_pair(&cfg, &params, &f, &f).unwrap();
        let cos: f64 = p1.iter().zip(&p2).map(|(a, b)| a * b).sum();
        assert!(cos >= 0.999, "cosine {cos}");
    }

    #[test]
    fn score_is_symmetric_under_order_swap() {
        let cfg = ModelConfig::toy();
        let params = cfg.init_params(11);
        for seed in 0..3 {
            let a = random_features(150, seed * 2 + 1);
            let b = random_features(173, seed * 2 + 2);
            let ab = score_pair(&cfg, &params, &a, &b).unwrap();
            let ba = score_pair(&cfg, &params, &b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-5, "ab {ab} vs ba {ba}");
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn self_score_is_near_one() {
        let cfg = ModelConfig::toy();
        let params = cfg.init_params(13);
        let f = random_features(120, 8);
        let s = score_pair(&cfg, &params, &f, &f).unwrap();
        assert!(s >= 0.999);
    }

    #[test]
    fn conv_path_never_leaks_across_the_pair_pad() {
        // with attention replaced by identity, zeroing the second utterance
        // cannot change the first utterance's pooled embedding at all
        let cfg = ModelConfig::toy();
        let params = cfg.init_params(21);
        let f1 = random_features(150, 31);
        let f2 = random_features(150, 32);
        let zero2 = FeatureMatrix::zero_pad(150);

        let pooled1_with = |second: &FeatureMatrix| {
            let layout = pair_layout(&cfg, &f1, second);
            let mut tape = Tape::new();
            let bindings = bind_inference(&mut tape, &params);
            let out =
                forward_pair_on_tape(&mut tape, &bindings, &cfg, &layout, AttentionMode::Identity)
                    .unwrap();
            tape.value(out.pooled1).to_vec()
        };
        let a = pooled1_with(&f2);
        let b = pooled1_with(&zero2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn downsampled_labels_take_window_majority() {
        use crate::datasim::NO_SPEAKER;
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1, 2, 2, NO_SPEAKER, NO_SPEAKER, 3];
        let down = downsample_labels(&labels, 4);
        assert_eq!(down, vec![0, 1, 2, 3]);
    }

    #[test]
    fn missing_param_is_reported_by_name() {
        let cfg = ModelConfig::toy();
        let mut params = cfg.init_params(0);
        // drop the projection to simulate an incompatible checkpoint
        let mut broken = Params::new();
        for (name, t) in params.iter_mut() {
            if name != "proj.w" {
                broken.insert(name, t.clone());
            }
        }
        let err = forward(&cfg, &broken, &random_features(32, 0)).unwrap_err();
        assert!(matches!(err, ModelError::Numerics(NumericsError::UnknownParam(ref n)) if n == "proj.w"));
    }
}
