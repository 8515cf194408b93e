//! Hierarchical transformer over token sequences.
//!
//! Embeddings (token + age + segment + position) are cut into overlapping
//! windows; a shared transformer stack (the extractor) summarizes each window by
//! the first position of its last layer, and a second stack (the aggregator)
//! attends over the window summaries. The patient representation is the
//! aggregator's first position.

use std::ops::Range;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{config_err, data_err, usage_err, Result};
use crate::synth::{TokenSequence, MAX_AGE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub extractor_layers: usize,
    pub aggregator_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub max_len: usize,
    pub window: usize,
    pub stride: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Small configuration used for desk-scale runs.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            extractor_layers: 2,
            aggregator_layers: 2,
            hidden: 16,
            heads: 2,
            intermediate: 32,
            dropout: 0.1,
            attention_dropout: 0.1,
            max_len: 48,
            window: 16,
            stride: 8,
            vocab_size,
        }
    }

    /// Reference full-size configuration.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            extractor_layers: 4,
            aggregator_layers: 4,
            hidden: 150,
            heads: 6,
            intermediate: 108,
            dropout: 0.2,
            attention_dropout: 0.3,
            max_len: 1220,
            window: 50,
            stride: 30,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(config_err(format!(
                "encoder.hidden ({}) must be a positive multiple of encoder.heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.window == 0 || self.window > self.max_len {
            return Err(config_err(format!(
                "encoder.window ({}) must lie in 1..=max_len ({})",
                self.window, self.max_len
            )));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(config_err(format!(
                "encoder.stride ({}) must lie in 1..=window ({})",
                self.stride, self.window
            )));
        }
        if self.extractor_layers == 0 || self.aggregator_layers == 0 || self.intermediate == 0 {
            return Err(config_err("encoder layer counts and intermediate size must be >= 1"));
        }
        for (k, p) in [("encoder.dropout", self.dropout), ("encoder.attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(config_err(format!("{k} must lie in [0, 1)")));
            }
        }
        if self.vocab_size < 4 {
            return Err(config_err("encoder.vocab_size must cover the special tokens"));
        }
        Ok(())
    }

    pub fn num_segments(&self) -> usize {
        segment_count(self.max_len, self.window, self.stride)
    }
}

fn segment_count(max_len: usize, window: usize, stride: usize) -> usize {
    (max_len - window).div_ceil(stride) + 1
}

/// Window `k` covers positions `[k·stride, k·stride + window)`; the last window
/// may extend past `max_len`, in which case its tail is padding.
pub fn slide_windows(max_len: usize, window: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 || window > max_len {
        return Err(config_err(format!("window {window} must lie in 1..=max_len ({max_len})")));
    }
    if stride == 0 || stride > window {
        return Err(config_err(format!("stride {stride} must lie in 1..=window ({window})")));
    }
    Ok((0..segment_count(max_len, window, stride))
        .map(|k| k * stride..k * stride + window)
        .collect())
}

/// Randomness and mode for one forward pass.
pub struct Mode<'r> {
    pub train: bool,
    pub rng: &'r mut dyn RngCore,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token: ParamId,
    age: ParamId,
    segment: ParamId,
    position: ParamId,
    extractor: Vec<Block>,
    extractor_ln: (ParamId, ParamId),
    segment_index: ParamId,
    aggregator: Vec<Block>,
    aggregator_ln: (ParamId, ParamId),
}

pub(crate) fn normal(rng: &mut dyn RngCore, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
}

pub(crate) fn xavier(rng: &mut dyn RngCore, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

/// Registers `{prefix}.w` and `{prefix}.b` for a `fan_in → fan_out` layer.
pub(crate) fn register_linear(
    params: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut dyn RngCore,
) -> Result<()> {
    params.add(format!("{prefix}.w"), xavier(rng, fan_in, fan_out))?;
    params.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn register_ln(params: &mut ParamStore, prefix: &str, n: usize) -> Result<()> {
    params.add(format!("{prefix}.g"), Tensor::full(&[n], 1.0))?;
    params.add(format!("{prefix}.b"), Tensor::zeros(&[n]))?;
    Ok(())
}

pub(crate) fn lookup(params: &ParamStore, name: &str) -> Result<ParamId> {
    params
        .id(name)
        .ok_or_else(|| data_err(format!("missing parameter `{name}`")))
}

pub(crate) fn lookup_pair(params: &ParamStore, prefix: &str, a: &str, b: &str) -> Result<(ParamId, ParamId)> {
    Ok((
        lookup(params, &format!("{prefix}.{a}"))?,
        lookup(params, &format!("{prefix}.{b}"))?,
    ))
}

pub(crate) fn linear(tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let w = tape.param(w);
    let b = tape.param(b);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn layer_norm(tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
    let g = tape.param(g);
    let b = tape.param(b);
    tape.layer_norm(x, g, b)
}

impl Block {
    fn register(params: &mut ParamStore, prefix: &str, c: &EncoderConfig, rng: &mut dyn RngCore) -> Result<()> {
        let h = c.hidden;
        register_ln(params, &format!("{prefix}.ln1"), h)?;
        for n in ["q", "k", "v", "o"] {
            register_linear(params, &format!("{prefix}.attn.{n}"), h, h, rng)?;
        }
        register_ln(params, &format!("{prefix}.ln2"), h)?;
        register_linear(params, &format!("{prefix}.ffn.in"), h, c.intermediate, rng)?;
        register_linear(params, &format!("{prefix}.ffn.out"), c.intermediate, h, rng)?;
        Ok(())
    }

    fn bind(params: &ParamStore, prefix: &str) -> Result<Self> {
        let wb = |n: &str| lookup_pair(params, &format!("{prefix}.{n}"), "w", "b");
        let gb = |n: &str| lookup_pair(params, &format!("{prefix}.{n}"), "g", "b");
        Ok(Self {
            ln1: gb("ln1")?,
            wq: wb("attn.q")?,
            wk: wb("attn.k")?,
            wv: wb("attn.v")?,
            wo: wb("attn.o")?,
            ln2: gb("ln2")?,
            ff1: wb("ffn.in")?,
            ff2: wb("ffn.out")?,
        })
    }

    /// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        c: &EncoderConfig,
        groups: &[Range<usize>],
        key_mask: Option<&[bool]>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let h = layer_norm(tape, x, self.ln1)?;
        let q = linear(tape, h, self.wq)?;
        let k = linear(tape, h, self.wk)?;
        let v = linear(tape, h, self.wv)?;
        let attn_drop = if mode.train && c.attention_dropout > 0.0 {
            Some((c.attention_dropout, &mut *mode.rng))
        } else {
            None
        };
        let a = tape.attention(q, k, v, c.heads, groups.to_vec(), key_mask.map(<[bool]>::to_vec), attn_drop)?;
        let o = linear(tape, a, self.wo)?;
        let o = tape.dropout(o, c.dropout, mode.train, &mut mode.rng)?;
        let x = tape.add(x, o)?;
        let h = layer_norm(tape, x, self.ln2)?;
        let f = linear(tape, h, self.ff1)?;
        let f = tape.relu(f);
        let f = linear(tape, f, self.ff2)?;
        let f = tape.dropout(f, c.dropout, mode.train, &mut mode.rng)?;
        tape.add(x, f)
    }
}

impl Encoder {
    /// Registers freshly initialized encoder parameters (prefix `enc.`).
    pub fn register(config: &EncoderConfig, params: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        params.add("enc.emb.token", normal(rng, &[config.vocab_size, h], 0.5))?;
        params.add("enc.emb.age", normal(rng, &[MAX_AGE + 1, h], 0.5))?;
        params.add("enc.emb.segment", normal(rng, &[2, h], 0.5))?;
        params.add("enc.emb.position", normal(rng, &[config.max_len, h], 0.5))?;
        for l in 0..config.extractor_layers {
            Block::register(params, &format!("enc.ext.{l}"), config, rng)?;
        }
        register_ln(params, "enc.ext.ln_f", h)?;
        params.add("enc.agg.segment_index", normal(rng, &[config.num_segments(), h], 0.5))?;
        for l in 0..config.aggregator_layers {
            Block::register(params, &format!("enc.agg.{l}"), config, rng)?;
        }
        register_ln(params, "enc.agg.ln_f", h)?;
        Self::bind(config, params)
    }

    /// Resolves parameter handles from an existing store.
    pub fn bind(config: &EncoderConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let expect = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = lookup(params, name)?;
            if params.get(id).shape() != shape {
                return Err(data_err(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let h = config.hidden;
        Ok(Self {
            token: expect("enc.emb.token", &[config.vocab_size, h])?,
            age: expect("enc.emb.age", &[MAX_AGE + 1, h])?,
            segment: expect("enc.emb.segment", &[2, h])?,
            position: expect("enc.emb.position", &[config.max_len, h])?,
            extractor: (0..config.extractor_layers)
                .map(|l| Block::bind(params, &format!("enc.ext.{l}")))
                .collect::<Result<_>>()?,
            extractor_ln: lookup_pair(params, "enc.ext.ln_f", "g", "b")?,
            segment_index: expect("enc.agg.segment_index", &[config.num_segments(), h])?,
            aggregator: (0..config.aggregator_layers)
                .map(|l| Block::bind(params, &format!("enc.agg.{l}")))
                .collect::<Result<_>>()?,
            aggregator_ln: lookup_pair(params, "enc.agg.ln_f", "g", "b")?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() != self.config.max_len {
            return Err(usage_err(format!(
                "sequence length {} differs from encoder max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    fn embed_rows(&self, tape: &mut Tape, seq: &TokenSequence, rows: Range<usize>) -> Result<Var> {
        let tok = tape.param(self.token);
        let age = tape.param(self.age);
        let seg = tape.param(self.segment);
        let pos = tape.param(self.position);
        let t = tape.embedding(tok, &seq.tokens[rows.clone()])?;
        let a = tape.embedding(age, &seq.ages[rows.clone()])?;
        let s = tape.embedding(seg, &seq.segments[rows.clone()])?;
        let p = tape.embedding(pos, &seq.positions[rows])?;
        let x = tape.add(t, a)?;
        let x = tape.add(x, s)?;
        tape.add(x, p)
    }

    /// Sum of the four embeddings for every position, `[max_len, hidden]`.
    pub fn embed(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        self.check_sequence(seq)?;
        self.embed_rows(tape, seq, 0..seq.len())
    }

    fn extractor_stack(
        &self,
        tape: &mut Tape,
        x: Var,
        groups: &[Range<usize>],
        key_mask: Option<&[bool]>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let mut x = x;
        for b in &self.extractor {
            x = b.forward(tape, x, &self.config, groups, key_mask, mode)?;
        }
        layer_norm(tape, x, self.extractor_ln)
    }

    /// Summarizes one window `[window, hidden]` as row 0 of the last extractor
    /// layer, `[1, hidden]`. Returns `None` when every position is masked.
    pub fn extract_segment(&self, tape: &mut Tape, segment: Var, mask: &[bool], mode: &mut Mode) -> Result<Option<Var>> {
        let rows = tape.value(segment).rows();
        if mask.len() != rows {
            return Err(usage_err("segment mask length differs from segment rows"));
        }
        if !mask.iter().any(|m| *m) {
            return Ok(None);
        }
        let y = self.extractor_stack(tape, segment, &[0..rows], Some(mask), mode)?;
        Ok(Some(tape.slice_rows(y, 0..1)?))
    }

    /// Attends over window summaries `[k, hidden]` (inactive ones masked) and
    /// returns the first position of the last aggregator layer, `[1, hidden]`.
    pub fn aggregate(&self, tape: &mut Tape, segments: Var, active: &[bool], mode: &mut Mode) -> Result<Var> {
        let k = tape.value(segments).rows();
        if active.len() != k {
            return Err(usage_err("activity flags differ from segment count"));
        }
        if !active.iter().any(|a| *a) {
            return Err(data_err("no active segment to aggregate"));
        }
        if k > self.config.num_segments() {
            return Err(usage_err(format!("{k} segments exceed the configured {}", self.config.num_segments())));
        }
        let idx = tape.param(self.segment_index);
        let ids: Vec<usize> = (0..k).collect();
        let e = tape.embedding(idx, &ids)?;
        let mut x = tape.add(segments, e)?;
        for b in &self.aggregator {
            x = b.forward(tape, x, &self.config, &[0..k], Some(active), mode)?;
        }
        let x = layer_norm(tape, x, self.aggregator_ln)?;
        tape.slice_rows(x, 0..1)
    }

    /// Patient representation `[1, hidden]`.
    ///
    /// The mask of an encoded sequence is a prefix of ones, so each window is
    /// trimmed to its unmasked prefix and all windows are run as one batch with
    /// per-window attention groups. Masked keys receive exactly zero attention
    /// weight, which makes this identical to running every full window with
    /// masking; windows with no unmasked position are inactive and dropped.
    pub fn forward(&self, tape: &mut Tape, seq: &TokenSequence, mode: &mut Mode) -> Result<Var> {
        self.check_sequence(seq)?;
        let active = seq.active_len();
        if active == 0 || !seq.mask[..active].iter().all(|m| *m) {
            return Err(data_err("sequence mask must be a non-empty prefix of ones"));
        }
        let c = &self.config;
        let x = self.embed_rows(tape, seq, 0..active)?;
        let x = tape.dropout(x, c.dropout, mode.train, &mut mode.rng)?;
        let mut parts = Vec::new();
        let mut groups = Vec::new();
        let mut offset = 0;
        for w in slide_windows(c.max_len, c.window, c.stride)? {
            if w.start >= active {
                break;
            }
            let end = w.end.min(active);
            parts.push(if w.start == 0 && end == active {
                x
            } else {
                tape.slice_rows(x, w.start..end)?
            });
            groups.push(offset..offset + end - w.start);
            offset += end - w.start;
        }
        let batch = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let y = self.extractor_stack(tape, batch, &groups, None, mode)?;
        let heads: Vec<Var> = groups
            .iter()
            .map(|g| tape.slice_rows(y, g.start..g.start + 1))
            .collect::<Result<_>>()?;
        let summaries = if heads.len() == 1 { heads[0] } else { tape.concat_rows(&heads)? };
        let flags = vec![true; heads.len()];
        self.aggregate(tape, summaries, &flags, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(slide_windows(1220, 50, 30).unwrap().len(), 40);
        assert_eq!(slide_windows(64, 64, 8).unwrap(), vec![0..64]);
        assert_eq!(slide_windows(48, 16, 16).unwrap(), vec![0..16, 16..32, 32..48]);
        let w = slide_windows(50, 16, 8).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w.last().unwrap().clone(), 40..56);
        assert!(slide_windows(10, 11, 2).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::desk(100);
        c.validate().unwrap();
        EncoderConfig::reference(100).validate().unwrap();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
