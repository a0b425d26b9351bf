//! Turns a sample's modalities into model-ready sequences.
//!
//! In prefix mode the conditioning is part of the decoded sequence:
//!
//! ```text
//! [BOS, IMG×m, SEP, NAME×n, SEP, TGT…, EOS]
//!   0   1..m   m+1  0..n-1  n    0..
//! ```
//!
//! Each modality segment restarts its positions at zero, BOS holds position
//! zero of the first segment, and a separator sits one past the last position
//! of the segment it closes. The target restarts at zero as well. An absent
//! modality drops its segment and separator; with no conditioning at all the
//! layout is `[BOS, TGT…, EOS]` with continuous positions.
//!
//! The pseudo-self and context-attention baselines keep the conditioning out
//! of the decoded sequence and hand it to the layers as a separate
//! [`CondSequence`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::Vocab;
use crate::vision::ImageInput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    Mantis,
    PseudoSelf,
    ContextAttn,
    Unconditional,
}

impl CondMode {
    pub fn name(self) -> &'static str {
        match self {
            CondMode::Mantis => "mantis",
            CondMode::PseudoSelf => "pseudo_self",
            CondMode::ContextAttn => "context_attn",
            CondMode::Unconditional => "unconditional",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mantis" => Some(CondMode::Mantis),
            "pseudo_self" => Some(CondMode::PseudoSelf),
            "context_attn" => Some(CondMode::ContextAttn),
            "unconditional" => Some(CondMode::Unconditional),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Bos,
    Img,
    Sep,
    Name,
    Tgt,
    Eos,
    Pad,
}

/// One position of a sequence: a vocabulary token, or the `k`-th image of the
/// sample (image tokens have no id).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    Image(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub images: Vec<ImageInput>,
    pub name_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

impl ConditioningBundle {
    fn validate(&self, v: &Vocab) -> Result<()> {
        for &id in self.name_ids.iter().chain(&self.target_ids) {
            if v.is_special(id) {
                return Err(Error::Contract(format!("conditioning text contains special id {}", id)));
            }
            if id as usize >= v.len() {
                return Err(Error::Index { op: "bundle", id: id as usize, bound: v.len() });
            }
        }
        Ok(())
    }
}

/// A single assembled sequence. `attention_mask` is `len × len`, row-major.
/// `loss_mask[i]` refers to predicting position `i + 1` from position `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub slots: Vec<Slot>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub loss_mask: Vec<bool>,
    pub segment_labels: Vec<Segment>,
}

impl SequenceBatch {
    /// Causal sequence with the default loss mask (predictions of TGT and EOS).
    pub fn from_parts(slots: Vec<Slot>, position_ids: Vec<usize>, segment_labels: Vec<Segment>) -> Self {
        assert!(slots.len() == position_ids.len() && slots.len() == segment_labels.len(), "ragged sequence parts");
        let t = slots.len();
        let mut attention_mask = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                attention_mask[i * t + j] = true;
            }
        }
        let loss_mask = (0..t).map(|i| i + 1 < t && matches!(segment_labels[i + 1], Segment::Tgt | Segment::Eos)).collect();
        Self { slots, position_ids, attention_mask, loss_mask, segment_labels }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    #[inline]
    pub fn attends(&self, i: usize, j: usize) -> bool {
        self.attention_mask[i * self.len() + j]
    }

    /// Next-token id for every position (`None` when the next slot is an
    /// image or the sequence ends).
    pub fn targets(&self) -> Vec<Option<u32>> {
        (0..self.len())
            .map(|i| match self.slots.get(i + 1) {
                Some(Slot::Token(id)) => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// Also trains on predicting the conditioning name tokens.
    pub fn with_name_loss(mut self) -> Self {
        for i in 0..self.len().saturating_sub(1) {
            if self.segment_labels[i + 1] == Segment::Name {
                self.loss_mask[i] = true;
            }
        }
        self
    }

    /// Appends one generated target token; its position continues the target
    /// segment (or starts it at zero right after a separator).
    pub fn push_target(&mut self, id: u32) {
        let t = self.len();
        let position = match self.segment_labels.last() {
            Some(Segment::Sep) | None => 0,
            Some(_) => self.position_ids[t - 1] + 1,
        };
        let mut mask = vec![false; (t + 1) * (t + 1)];
        for i in 0..t {
            mask[i * (t + 1)..i * (t + 1) + t].copy_from_slice(&self.attention_mask[i * t..(i + 1) * t]);
        }
        if t > 0 {
            let last = self.attention_mask[(t - 1) * t..t * t].to_vec();
            mask[t * (t + 1)..t * (t + 1) + t].copy_from_slice(&last);
        }
        mask[t * (t + 1) + t] = true;
        self.attention_mask = mask;
        if let Some(prev) = self.loss_mask.last_mut() {
            *prev = true;
        }
        self.loss_mask.push(false);
        self.slots.push(Slot::Token(id));
        self.position_ids.push(position);
        self.segment_labels.push(Segment::Tgt);
    }
}

/// Conditioning vectors handed to the baseline mechanisms:
/// `[IMG×m, SEP, NAME×n]`, positioned as in the prefix layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CondSequence {
    pub slots: Vec<Slot>,
    pub position_ids: Vec<usize>,
    pub segment_labels: Vec<Segment>,
    /// `false` marks a column no query may attend (modality dropout).
    pub attendable: Vec<bool>,
}

impl CondSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Everything one sample contributes to a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub text: SequenceBatch,
    pub cond: Option<CondSequence>,
    /// Images referenced by `Slot::Image(k)` in either sequence.
    pub images: Vec<ImageInput>,
}

fn check_lengths(b: &ConditioningBundle, cfg: &ModelConfig) -> Result<()> {
    let m = b.images.len();
    if m > cfg.max_images {
        return Err(Error::Overflow { what: "image segment", needed: m, limit: cfg.max_images });
    }
    // BOS + images + SEP must fit the position table
    if m > 0 && m + 2 > cfg.max_pos {
        return Err(Error::Overflow { what: "image segment", needed: m + 2, limit: cfg.max_pos });
    }
    let n = b.name_ids.len();
    let name_span = if m == 0 { n + 2 } else { n + 1 };
    if n > 0 && name_span > cfg.max_pos {
        return Err(Error::Overflow { what: "name segment", needed: name_span, limit: cfg.max_pos });
    }
    let tgt_span = if m == 0 && n == 0 { b.target_ids.len() + 2 } else { b.target_ids.len() + 1 };
    if tgt_span > cfg.max_pos {
        return Err(Error::Overflow { what: "target segment", needed: tgt_span, limit: cfg.max_pos });
    }
    Ok(())
}

fn prefix_layout(b: &ConditioningBundle, v: &Vocab, cfg: &ModelConfig, with_eos: bool) -> Result<SequenceBatch> {
    b.validate(v)?;
    check_lengths(b, cfg)?;
    let (m, n) = (b.images.len(), b.name_ids.len());
    let mut slots = vec![Slot::Token(v.bos_id)];
    let mut pos = vec![0];
    let mut labels = vec![Segment::Bos];
    // position of the next token in the current segment
    let mut next = 1;
    if m > 0 {
        for k in 0..m {
            slots.push(Slot::Image(k));
            pos.push(next);
            labels.push(Segment::Img);
            next += 1;
        }
        slots.push(Slot::Token(v.sep_id));
        pos.push(next);
        labels.push(Segment::Sep);
        next = 0;
    }
    if n > 0 {
        for &id in &b.name_ids {
            slots.push(Slot::Token(id));
            pos.push(next);
            labels.push(Segment::Name);
            next += 1;
        }
        slots.push(Slot::Token(v.sep_id));
        pos.push(next);
        labels.push(Segment::Sep);
        next = 0;
    }
    for &id in &b.target_ids {
        slots.push(Slot::Token(id));
        pos.push(next);
        labels.push(Segment::Tgt);
        next += 1;
    }
    if with_eos {
        slots.push(Slot::Token(v.eos_id));
        pos.push(next);
        labels.push(Segment::Eos);
    }
    Ok(SequenceBatch::from_parts(slots, pos, labels))
}

/// Prefix-conditioned training sequence.
pub fn build_prefix(b: &ConditioningBundle, v: &Vocab, cfg: &ModelConfig) -> Result<SequenceBatch> {
    if b.target_ids.is_empty() {
        return Err(Error::Contract("training samples need a non-empty target".into()));
    }
    prefix_layout(b, v, cfg, true)
}

/// The prefix a generation run starts from: the training layout without
/// target tokens and EOS.
pub fn build_generation_prefix(b: &ConditioningBundle, v: &Vocab, cfg: &ModelConfig) -> Result<SequenceBatch> {
    let stripped = ConditioningBundle { images: b.images.clone(), name_ids: b.name_ids.clone(), target_ids: Vec::new() };
    prefix_layout(&stripped, v, cfg, false)
}

/// Whether modality dropout removes the text path of this sample. The
/// generator is advanced exactly once per call regardless of the outcome.
fn draw_text_drop(has_images: bool, has_name: bool, p_text: f64, rng: &mut impl Rng) -> bool {
    let u: f64 = rng.gen();
    // never leave a sample without any conditioning
    has_images && has_name && u < p_text
}

fn mask_columns(sb: &mut SequenceBatch, cols: &[usize]) {
    let t = sb.len();
    for i in 0..t {
        for &j in cols {
            sb.attention_mask[i * t + j] = false;
        }
    }
}

/// Name positions and the separator that closes the name segment.
fn name_path(labels: &[Segment]) -> Vec<usize> {
    let mut cols = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if *l == Segment::Name {
            cols.push(i);
        } else if *l == Segment::Sep && i > 0 && labels[i - 1] == Segment::Name {
            cols.push(i);
        }
    }
    cols
}

/// With probability `p_text` makes the name segment (and its separator)
/// unattendable. Shapes and positions are unchanged.
pub fn apply_modality_dropout(sb: &SequenceBatch, p_text: f64, rng: &mut impl Rng) -> SequenceBatch {
    let has_images = sb.segment_labels.contains(&Segment::Img);
    let has_name = sb.segment_labels.contains(&Segment::Name);
    let mut out = sb.clone();
    if draw_text_drop(has_images, has_name, p_text, rng) {
        let cols = name_path(&sb.segment_labels);
        mask_columns(&mut out, &cols);
    }
    out
}

impl ModelInput {
    /// Modality dropout for any mode: one draw per sample, applied to
    /// whichever sequence carries the name tokens.
    pub fn with_modality_dropout(&self, p_text: f64, rng: &mut impl Rng) -> ModelInput {
        match &self.cond {
            None => ModelInput { text: apply_modality_dropout(&self.text, p_text, rng), cond: None, images: self.images.clone() },
            Some(c) => {
                let has_images = c.segment_labels.contains(&Segment::Img);
                let has_name = c.segment_labels.contains(&Segment::Name);
                let mut cond = c.clone();
                if draw_text_drop(has_images, has_name, p_text, rng) {
                    let (labels, attendable) = (&cond.segment_labels, &mut cond.attendable);
                    for (i, l) in labels.iter().enumerate() {
                        if *l == Segment::Name || (*l == Segment::Sep && labels.get(i + 1) == Some(&Segment::Name)) {
                            attendable[i] = false;
                        }
                    }
                }
                ModelInput { text: self.text.clone(), cond: Some(cond), images: self.images.clone() }
            }
        }
    }
}

/// Inputs for the pseudo-self and context-attention baselines: the
/// conditioning sequence plus the bare `[BOS, TGT…, EOS]` text.
pub fn make_pseudo_self_inputs(b: &ConditioningBundle, v: &Vocab, cfg: &ModelConfig) -> Result<(CondSequence, SequenceBatch)> {
    let text_only = ConditioningBundle { images: Vec::new(), name_ids: Vec::new(), target_ids: b.target_ids.clone() };
    let text = build_prefix(&text_only, v, cfg)?;
    let cond = cond_sequence(b, v, cfg)?;
    Ok((cond, text))
}

fn cond_sequence(b: &ConditioningBundle, v: &Vocab, cfg: &ModelConfig) -> Result<CondSequence> {
    b.validate(v)?;
    check_lengths(b, cfg)?;
    let (m, n) = (b.images.len(), b.name_ids.len());
    let mut slots = Vec::with_capacity(m + n + 1);
    let mut pos = Vec::with_capacity(m + n + 1);
    let mut labels = Vec::with_capacity(m + n + 1);
    for k in 0..m {
        slots.push(Slot::Image(k));
        pos.push(k + 1);
        labels.push(Segment::Img);
    }
    if m > 0 && n > 0 {
        slots.push(Slot::Token(v.sep_id));
        pos.push(m + 1);
        labels.push(Segment::Sep);
    }
    for (k, &id) in b.name_ids.iter().enumerate() {
        slots.push(Slot::Token(id));
        pos.push(k);
        labels.push(Segment::Name);
    }
    let attendable = vec![true; slots.len()];
    Ok(CondSequence { slots, position_ids: pos, segment_labels: labels, attendable })
}

/// Mode-dependent assembly of one training sample.
pub fn prepare(b: &ConditioningBundle, v: &Vocab, cfg: &ModelConfig) -> Result<ModelInput> {
    match cfg.cond_mode {
        CondMode::Mantis => Ok(ModelInput { text: build_prefix(b, v, cfg)?, cond: None, images: b.images.clone() }),
        CondMode::PseudoSelf | CondMode::ContextAttn => {
            let (cond, text) = make_pseudo_self_inputs(b, v, cfg)?;
            Ok(ModelInput { text, cond: Some(cond), images: b.images.clone() })
        }
        CondMode::Unconditional => {
            let bare = ConditioningBundle { images: Vec::new(), name_ids: Vec::new(), target_ids: b.target_ids.clone() };
            Ok(ModelInput { text: build_prefix(&bare, v, cfg)?, cond: None, images: Vec::new() })
        }
    }
}

/// Mode-dependent starting point for generation.
pub fn prepare_generation(b: &ConditioningBundle, v: &Vocab, cfg: &ModelConfig) -> Result<ModelInput> {
    let bare = ConditioningBundle { images: Vec::new(), name_ids: Vec::new(), target_ids: Vec::new() };
    match cfg.cond_mode {
        CondMode::Mantis => Ok(ModelInput { text: build_generation_prefix(b, v, cfg)?, cond: None, images: b.images.clone() }),
        CondMode::PseudoSelf | CondMode::ContextAttn => Ok(ModelInput {
            text: build_generation_prefix(&bare, v, cfg)?,
            cond: Some(cond_sequence(b, v, cfg)?),
            images: b.images.clone(),
        }),
        CondMode::Unconditional => Ok(ModelInput { text: build_generation_prefix(&bare, v, cfg)?, cond: None, images: Vec::new() }),
    }
}
