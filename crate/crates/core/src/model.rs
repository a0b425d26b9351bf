//! Miniature pre-norm GPT-style decoder with the three conditioning
//! mechanisms and batched generation.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Tape, Var};
use crate::conditioner::{prepare_generation, CondMode, ConditioningBundle, ModelInput, Slot};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::Vocab;
use crate::vision::{ImageProjector, VisionConfig};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab_size: usize,
    /// Size of the position table; bounds the longest single segment.
    pub max_pos: usize,
    pub cond_mode: CondMode,
    pub max_images: usize,
    pub image_size: usize,
    pub vision_channels: [usize; 2],
    pub proj_bias: bool,
    pub tied_head: bool,
    /// Dropout on embeddings and residual branches in training mode.
    pub dropout: f64,
}

impl ModelConfig {
    /// A small configuration for tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 16,
            vocab_size,
            max_pos: 32,
            cond_mode: CondMode::Mantis,
            max_images: 3,
            image_size: 24,
            vision_channels: [4, 8],
            proj_bias: true,
            tied_head: true,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.max_pos < 2 {
            return bad("layers, vocab_size must be positive and max_pos at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.image_size < 4 || self.vision_channels.contains(&0) {
            return bad("image_size must be at least 4 and conv channels positive".into());
        }
        Ok(())
    }

    pub fn vision(&self) -> VisionConfig {
        VisionConfig { image_size: self.image_size, channels: self.vision_channels, out_dim: self.dim, proj_bias: self.proj_bias }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Greedy, k: 1, temperature: 1.0, max_new_tokens: 48, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || self.k == 0 {
            return Err(Error::Config(format!("temperature must be > 0 and k >= 1 (got {}, {})", self.temperature, self.k)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc: (ParamId, ParamId),
    proj: (ParamId, ParamId),
}

/// Per-layer projections of the conditioning vectors into that layer's keys
/// and values, mixed in through a gate that starts closed.
#[derive(Clone, Debug)]
struct PseudoSelf {
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    gate: ParamId,
}

/// Cross-attention sublayer appended after a block.
#[derive(Clone, Debug)]
struct ContextAttn {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Registers fresh parameters, or looks them up by name in a loaded store.
struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: Option<&'a mut dyn RngCore>,
}

impl<T: Float> Builder<'_, T> {
    fn param(&mut self, name: &str, shape: Vec<usize>, init: Init, decay: bool) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let t = match init {
                    // uniform with the requested standard deviation
                    Init::Normal(std) => {
                        let a = std * 3f64.sqrt();
                        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-a..a)))
                    }
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, T::one()),
                };
                Ok(self.store.add(name, t, decay))
            }
            None => {
                let id = self.store.find(name).ok_or_else(|| Error::Contract(format!("missing parameter {}", name)))?;
                if self.store.get(id).value.shape() != shape.as_slice() {
                    return Err(Error::shape(
                        "load",
                        format!("parameter {} has shape {:?}, config expects {:?}", name, self.store.get(id).value.shape(), shape),
                    ));
                }
                Ok(id)
            }
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, w: Init) -> Result<(ParamId, ParamId)> {
        Ok((
            self.param(&format!("{}.weight", name), vec![fan_in, fan_out], w, true)?,
            self.param(&format!("{}.bias", name), vec![fan_out], Init::Zeros, false)?,
        ))
    }

    fn layernorm(&mut self, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.param(&format!("{}.gain", name), vec![d], Init::Ones, false)?,
            self.param(&format!("{}.bias", name), vec![d], Init::Zeros, false)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: Option<ParamId>,
    vision: Option<ImageProjector>,
    pseudo: Vec<PseudoSelf>,
    context: Vec<ContextAttn>,
}

/// Output of a batched forward pass; rows are `batch × t_max`, sample-major.
pub struct Forward {
    pub logits: Var,
    pub t_max: usize,
    pub lens: Vec<usize>,
}

impl<T: Float> Model<T> {
    /// Fresh model. The shared decoder is initialized first, so models that
    /// differ only in `cond_mode` start from identical decoder weights.
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let parts = Self::build(config, &mut store, Some(rng))?;
        Ok(parts.finish(store))
    }

    /// Rebinds a model onto loaded parameters; every expected tensor must be
    /// present with the configured shape.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut store = store;
        let parts = Self::build(config, &mut store, None)?;
        let expected = parts.count;
        if expected != store.len() {
            return Err(Error::Contract(format!("store holds {} tensors, config expects {}", store.len(), expected)));
        }
        Ok(parts.finish(store))
    }

    fn build<'a>(config: ModelConfig, store: &'a mut ParamStore<T>, rng: Option<&'a mut dyn RngCore>) -> Result<Parts> {
        let (d, v, l) = (config.dim, config.vocab_size, config.layers);
        let mut b = Builder { store, rng };
        let resid = Init::Normal(INIT_STD / (2.0 * l as f64).sqrt());
        let tok_emb = b.param("tok_emb", vec![v, d], Init::Normal(INIT_STD), true)?;
        let pos_emb = b.param("pos_emb", vec![config.max_pos, d], Init::Normal(INIT_STD), true)?;
        let mut blocks = Vec::with_capacity(l);
        for i in 0..l {
            let p = |s: &str| format!("blocks.{}.{}", i, s);
            blocks.push(Block {
                ln1: b.layernorm(&p("ln1"), d)?,
                q: b.linear(&p("attn.q"), d, d, Init::Normal(INIT_STD))?,
                k: b.linear(&p("attn.k"), d, d, Init::Normal(INIT_STD))?,
                v: b.linear(&p("attn.v"), d, d, Init::Normal(INIT_STD))?,
                o: b.linear(&p("attn.o"), d, d, resid)?,
                ln2: b.layernorm(&p("ln2"), d)?,
                fc: b.linear(&p("mlp.fc"), d, 4 * d, Init::Normal(INIT_STD))?,
                proj: b.linear(&p("mlp.proj"), 4 * d, d, resid)?,
            });
        }
        let ln_f = b.layernorm("ln_f", d)?;
        let head = if config.tied_head { None } else { Some(b.param("head.weight", vec![v, d], Init::Normal(INIT_STD), true)?) };

        let vision = match config.cond_mode {
            CondMode::Unconditional => None,
            _ => Some(match b.rng.as_deref_mut() {
                Some(rng) => {
                    let mut rng = rng;
                    ImageProjector::new(config.vision(), b.store, &mut rng)
                }
                None => ImageProjector::attach(config.vision(), b.store)?,
            }),
        };
        let mut pseudo = Vec::new();
        let mut context = Vec::new();
        // fan-in scaled: uniform on ±1/√D
        let fan_in = Init::Normal(1.0 / (3.0 * d as f64).sqrt());
        match config.cond_mode {
            CondMode::PseudoSelf => {
                for i in 0..l {
                    let p = |s: &str| format!("pseudo.{}.{}", i, s);
                    pseudo.push(PseudoSelf {
                        k: b.linear(&p("k"), d, d, fan_in)?,
                        v: b.linear(&p("v"), d, d, fan_in)?,
                        gate: b.param(&p("gate"), vec![d], Init::Zeros, false)?,
                    });
                }
            }
            CondMode::ContextAttn => {
                for i in 0..l {
                    let p = |s: &str| format!("context.{}.{}", i, s);
                    context.push(ContextAttn {
                        q: b.linear(&p("q"), d, d, fan_in)?,
                        k: b.linear(&p("k"), d, d, fan_in)?,
                        v: b.linear(&p("v"), d, d, fan_in)?,
                        o: b.linear(&p("o"), d, d, Init::Zeros)?,
                    });
                }
            }
            CondMode::Mantis | CondMode::Unconditional => {}
        }
        let count = b.store.len();
        Ok(Parts { config, tok_emb, pos_emb, blocks, ln_f, head, vision, pseudo, context, count })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameter ids belonging to the image encoder and projection.
    pub fn vision_params(&self) -> Vec<ParamId> {
        self.vision.as_ref().map(|v| v.param_ids()).unwrap_or_default()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model::from_store(self.config.clone(), self.store.cast()).expect("cast preserves layout")
    }

    /// Batched forward pass over assembled inputs. Passing `rng` enables
    /// training-mode dropout.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        inputs: &[&ModelInput],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        let (h, t_max, lens) = self.hidden(tape, bind, inputs, rng)?;
        let logits = self.head(tape, bind, h)?;
        Ok(Forward { logits, t_max, lens })
    }

    /// Logits at the last position of every input, `[batch × V]`.
    pub fn forward_last(&self, tape: &mut Tape<T>, bind: &mut Binding, inputs: &[&ModelInput]) -> Result<Var> {
        let (h, t_max, lens) = self.hidden(tape, bind, inputs, None)?;
        let picks: Vec<(usize, usize)> = lens.iter().enumerate().map(|(b, &l)| (0, b * t_max + l - 1)).collect();
        let last = tape.gather_rows(&[h], &picks)?;
        self.head(tape, bind, last)
    }

    /// Logits `[T × V]` of a single input in eval mode.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut bind = Binding::new(&self.store);
        let out = self.forward(&mut tape, &mut bind, &[input], None)?;
        tape.tensor(out.logits)
            .data()
            .get(..input.text.len() * self.config.vocab_size)
            .map(|d| Tensor::new(vec![input.text.len(), self.config.vocab_size], d.to_vec()))
            .expect("single input fills the batch")
    }

    /// Mean masked next-token loss over the batch.
    pub fn loss(&self, tape: &mut Tape<T>, bind: &mut Binding, inputs: &[&ModelInput], rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let out = self.forward(tape, bind, inputs, rng)?;
        let mut targets = vec![0usize; inputs.len() * out.t_max];
        let mut mask = vec![false; inputs.len() * out.t_max];
        for (b, inp) in inputs.iter().enumerate() {
            for (i, t) in inp.text.targets().into_iter().enumerate() {
                if let (Some(t), true) = (t, inp.text.loss_mask[i]) {
                    targets[b * out.t_max + i] = t as usize;
                    mask[b * out.t_max + i] = true;
                }
            }
        }
        tape.masked_cross_entropy(out.logits, &targets, &mask)
    }

    fn head(&self, tape: &mut Tape<T>, bind: &mut Binding, h: Var) -> Result<Var> {
        let w = bind.var(tape, &self.store, self.head.unwrap_or(self.tok_emb));
        tape.matmul_bt(h, w)
    }

    fn p(&self, tape: &mut Tape<T>, bind: &mut Binding, id: ParamId) -> Var {
        bind.var(tape, &self.store, id)
    }

    fn lin(&self, tape: &mut Tape<T>, bind: &mut Binding, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (self.p(tape, bind, w), self.p(tape, bind, b));
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<T>, bind: &mut Binding, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let (g, b) = (self.p(tape, bind, g), self.p(tape, bind, b));
        tape.layernorm(x, g, b, T::of(LN_EPS))
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = T::of(1.0 / (1.0 - p));
                let mask = (0..tape.value(x).len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Embeddings for a list of slots given as `(sample, slot, position)`.
    fn embed(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        slots: &[Option<(usize, Slot, usize)>],
        img_rows: Option<(Var, &[usize])>,
    ) -> Result<Var> {
        let tok = self.p(tape, bind, self.tok_emb);
        let mut picks = Vec::with_capacity(slots.len());
        let mut pos = Vec::with_capacity(slots.len());
        for s in slots {
            match *s {
                None => {
                    picks.push((0, 0));
                    pos.push(0);
                }
                Some((b, slot, p)) => {
                    if p >= self.config.max_pos {
                        return Err(Error::Index { op: "position embedding", id: p, bound: self.config.max_pos });
                    }
                    pos.push(p);
                    picks.push(match slot {
                        Slot::Token(id) => (0, id as usize),
                        Slot::Image(k) => {
                            let (_, offsets) = img_rows.ok_or_else(|| Error::Contract("image slot in an unconditional model".into()))?;
                            (1, offsets[b] + k)
                        }
                    });
                }
            }
        }
        let srcs: Vec<Var> = std::iter::once(tok).chain(img_rows.map(|(v, _)| v)).collect();
        let x = match tape.gather_rows(&srcs, &picks) {
            Err(Error::Index { op: "gather_rows", id, bound }) => return Err(Error::Index { op: "token embedding", id, bound }),
            other => other?,
        };
        let pe = self.p(tape, bind, self.pos_emb);
        let pe = tape.embedding(pe, &pos)?;
        tape.add(x, pe)
    }

    fn hidden(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        inputs: &[&ModelInput],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, usize, Vec<usize>)> {
        if inputs.is_empty() {
            return Err(Error::Contract("forward needs at least one input".into()));
        }
        let cfg = &self.config;
        let bsz = inputs.len();
        let lens: Vec<usize> = inputs.iter().map(|i| i.text.len()).collect();
        if lens.contains(&0) {
            return Err(Error::Contract("empty sequence".into()));
        }
        let t_max = *lens.iter().max().unwrap();

        // all images of the batch, encoded in one pass
        let mut offsets = Vec::with_capacity(bsz);
        let mut all_imgs = Vec::new();
        for inp in inputs {
            offsets.push(all_imgs.len());
            if inp.images.len() > cfg.max_images {
                return Err(Error::Overflow { what: "images", needed: inp.images.len(), limit: cfg.max_images });
            }
            all_imgs.extend(inp.images.iter());
        }
        let img_var = match (&self.vision, all_imgs.is_empty()) {
            (Some(vis), false) => Some(vis.encode_on_tape(tape, bind, &self.store, &all_imgs)?),
            _ => None,
        };
        let img_rows = img_var.map(|v| (v, offsets.as_slice()));

        let mut slots = Vec::with_capacity(bsz * t_max);
        let mut allowed = vec![false; bsz * t_max * t_max];
        for (b, inp) in inputs.iter().enumerate() {
            let sb = &inp.text;
            let l = sb.len();
            for i in 0..t_max {
                if i < l {
                    slots.push(Some((b, sb.slots[i], sb.position_ids[i])));
                    let row = &mut allowed[(b * t_max + i) * t_max..][..t_max];
                    row[..l].copy_from_slice(&sb.attention_mask[i * l..(i + 1) * l]);
                } else {
                    slots.push(None);
                    allowed[(b * t_max + i) * t_max + i] = true;
                }
            }
        }
        let mask = AttnMask::new(bsz, t_max, t_max, allowed.clone())?;
        let x = self.embed(tape, bind, &slots, img_rows)?;
        let mut x = self.dropout(tape, x, &mut rng)?;

        // conditioning sequence for the baseline mechanisms
        let cond = if self.pseudo.is_empty() && self.context.is_empty() { None } else { self.cond_inputs(tape, bind, inputs, &lens, t_max, img_rows)? };

        for (li, blk) in self.blocks.iter().enumerate() {
            let h = self.norm(tape, bind, x, blk.ln1)?;
            let q = self.lin(tape, bind, h, blk.q)?;
            let k = self.lin(tape, bind, h, blk.k)?;
            let v = self.lin(tape, bind, h, blk.v)?;
            let mut a = tape.attention(q, k, v, cfg.heads, &mask)?;
            if let (Some(ps), Some(c)) = (self.pseudo.get(li), cond.as_ref()) {
                let kc = self.lin(tape, bind, c.x, ps.k)?;
                let vc = self.lin(tape, bind, c.x, ps.v)?;
                let kj = tape.concat_seq(kc, k, bsz)?;
                let vj = tape.concat_seq(vc, v, bsz)?;
                let joint = tape.attention(q, kj, vj, cfg.heads, &c.joint_mask)?;
                let diff = tape.sub(joint, a)?;
                let gate = self.p(tape, bind, ps.gate);
                let gated = tape.mul_row(diff, gate)?;
                a = tape.add(a, gated)?;
            }
            let o = self.lin(tape, bind, a, blk.o)?;
            let o = self.dropout(tape, o, &mut rng)?;
            x = tape.add(x, o)?;
            let h = self.norm(tape, bind, x, blk.ln2)?;
            let m = self.lin(tape, bind, h, blk.fc)?;
            let m = tape.gelu(m);
            let m = self.lin(tape, bind, m, blk.proj)?;
            let m = self.dropout(tape, m, &mut rng)?;
            x = tape.add(x, m)?;
            if let (Some(ca), Some(c)) = (self.context.get(li), cond.as_ref()) {
                let q = self.lin(tape, bind, x, ca.q)?;
                let k = self.lin(tape, bind, c.x, ca.k)?;
                let v = self.lin(tape, bind, c.x, ca.v)?;
                let a = tape.attention(q, k, v, cfg.heads, &c.cross_mask)?;
                let o = self.lin(tape, bind, a, ca.o)?;
                // rows without any conditioning key contribute nothing
                let o = match &c.row_gate {
                    Some(g) => tape.mul_const(o, g.clone())?,
                    None => o,
                };
                x = tape.add(x, o)?;
            }
        }
        let h = self.norm(tape, bind, x, self.ln_f)?;
        Ok((h, t_max, lens))
    }

    fn cond_inputs(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        inputs: &[&ModelInput],
        lens: &[usize],
        t_max: usize,
        img_rows: Option<(Var, &[usize])>,
    ) -> Result<Option<CondBatch<T>>> {
        let bsz = inputs.len();
        let c_max = inputs.iter().map(|i| i.cond.as_ref().map_or(0, |c| c.len())).max().unwrap_or(0);
        if c_max == 0 {
            return Ok(None);
        }
        let mut slots = Vec::with_capacity(bsz * c_max);
        let mut attendable = vec![false; bsz * c_max];
        for (b, inp) in inputs.iter().enumerate() {
            let c = inp.cond.as_ref();
            for j in 0..c_max {
                match c.filter(|c| j < c.len()) {
                    Some(c) => {
                        slots.push(Some((b, c.slots[j], c.position_ids[j])));
                        attendable[b * c_max + j] = c.attendable[j];
                    }
                    None => slots.push(None),
                }
            }
        }
        let x = self.embed(tape, bind, &slots, img_rows)?;

        let k_len = c_max + t_max;
        let mut joint = vec![false; bsz * t_max * k_len];
        let mut cross = vec![false; bsz * t_max * c_max];
        let mut gate = vec![T::zero(); bsz * t_max * self.config.dim];
        let mut any_gated = false;
        for (b, inp) in inputs.iter().enumerate() {
            let l = lens[b];
            let sb = &inp.text;
            let keys = &attendable[b * c_max..(b + 1) * c_max];
            let has_key = keys.iter().any(|a| *a);
            for i in 0..t_max {
                let row = &mut joint[(b * t_max + i) * k_len..][..k_len];
                if i < l {
                    row[..c_max].copy_from_slice(keys);
                    row[c_max..c_max + l].copy_from_slice(&sb.attention_mask[i * l..(i + 1) * l]);
                    cross[(b * t_max + i) * c_max..][..c_max].copy_from_slice(keys);
                } else {
                    row[c_max + i] = true;
                }
                if i < l && has_key {
                    gate[(b * t_max + i) * self.config.dim..][..self.config.dim].fill(T::one());
                } else {
                    any_gated = true;
                }
            }
        }
        Ok(Some(CondBatch {
            x,
            joint_mask: AttnMask::new(bsz, t_max, k_len, joint)?,
            cross_mask: AttnMask::new(bsz, t_max, c_max, cross)?,
            row_gate: any_gated.then_some(gate),
        }))
    }

    /// Generates a continuation for one bundle.
    pub fn generate(&self, b: &ConditioningBundle, g: &GenerationConfig, v: &Vocab) -> Result<Vec<u32>> {
        Ok(self.generate_batch(std::slice::from_ref(b), g, v)?.remove(0))
    }

    /// Generates for many bundles at once. Each sample draws from its own
    /// generator seeded with `g.seed`, so results do not depend on batching.
    pub fn generate_batch(&self, bundles: &[ConditioningBundle], g: &GenerationConfig, v: &Vocab) -> Result<Vec<Vec<u32>>> {
        g.validate()?;
        if v.len() != self.config.vocab_size {
            return Err(Error::Contract(format!("vocabulary has {} ids, model expects {}", v.len(), self.config.vocab_size)));
        }
        let mut states: Vec<ModelInput> = bundles.iter().map(|b| prepare_generation(b, v, &self.config)).collect::<Result<_>>()?;
        let mut rngs: Vec<ChaCha8Rng> = bundles.iter().map(|_| ChaCha8Rng::seed_from_u64(g.seed)).collect();
        let mut outputs = vec![Vec::new(); bundles.len()];
        let mut active: Vec<usize> = (0..bundles.len()).collect();
        let banned = [v.bos_id, v.sep_id, v.pad_id];
        let vocab = self.config.vocab_size;
        for _ in 0..g.max_new_tokens {
            // a target segment longer than the position table ends generation
            active.retain(|&i| states[i].text.position_ids.last().map_or(true, |p| *p + 1 < self.config.max_pos));
            if active.is_empty() {
                break;
            }
            let mut tape = Tape::inference();
            let mut bind = Binding::new(&self.store);
            let refs: Vec<&ModelInput> = active.iter().map(|&i| &states[i]).collect();
            let logits = self.forward_last(&mut tape, &mut bind, &refs)?;
            let logits = tape.value(logits).to_vec();
            let mut still = Vec::with_capacity(active.len());
            for (row, &i) in active.iter().enumerate() {
                let mut l: Vec<f64> = logits[row * vocab..(row + 1) * vocab].iter().map(|x| x.as_f64()).collect();
                for &b in &banned {
                    l[b as usize] = f64::NEG_INFINITY;
                }
                let next = match g.strategy {
                    Strategy::Greedy => argmax(&l),
                    Strategy::TopK => sample_top_k(&l, g.k, g.temperature, &mut rngs[i]),
                };
                if next == v.eos_id {
                    continue;
                }
                outputs[i].push(next);
                states[i].text.push_target(next);
                still.push(i);
            }
            active = still;
        }
        Ok(outputs)
    }
}

struct CondBatch<T> {
    x: Var,
    joint_mask: AttnMask,
    cross_mask: AttnMask,
    row_gate: Option<Vec<T>>,
}

struct Parts {
    config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: Option<ParamId>,
    vision: Option<ImageProjector>,
    pseudo: Vec<PseudoSelf>,
    context: Vec<ContextAttn>,
    count: usize,
}

impl Parts {
    fn finish<T: Float>(self, store: ParamStore<T>) -> Model<T> {
        Model {
            config: self.config,
            store,
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks,
            ln_f: self.ln_f,
            head: self.head,
            vision: self.vision,
            pseudo: self.pseudo,
            context: self.context,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_top_k(logits: &[f64], k: usize, temperature: f64, rng: &mut impl Rng) -> u32 {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps lower ids first among equal logits
    order.sort_by(|a, b| logits[*b].partial_cmp(&logits[*a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k.min(logits.len()));
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (w, &i) in weights.iter().zip(&order) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    order[0] as u32
}
