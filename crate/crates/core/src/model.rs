//! Pre-LN transformer encoder–decoder with learned positions and a tied
//! output projection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tagmt_tensor::checkpoint::{write_atomic, Checkpoint};
use tagmt_tensor::rng::{rng_fork, stream_id, StreamRng};
use tagmt_tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

use crate::tokenizer::{EOS, PAD};
use crate::{Error, Result};

const NEG_INF: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub activation: Activation,
    pub label_smoothing: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            vocab_size: 4096,
            max_positions: 64,
            dropout: 0.1,
            tie_embeddings: true,
            activation: Activation::Gelu,
            label_smoothing: 0.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.max_positions == 0 || self.vocab_size < 4 {
            return fail("d_ff, max_positions and vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("dropout and label_smoothing must lie in [0, 1)".into());
        }
        if self.init_std <= 0.0 {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn count_params(&self) -> usize {
        let (d, f, v, p) = (self.d_model, self.d_ff, self.vocab_size, self.max_positions);
        let norm = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let enc = self.n_enc_layers * (2 * norm + attn + ffn);
        let dec = self.n_dec_layers * (3 * norm + 2 * attn + ffn);
        let out = if self.tie_embeddings { 0 } else { v * d };
        v * d + 2 * p * d + enc + dec + 2 * norm + out
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy)]
struct Ffn {
    inner: Linear,
    outer: Linear,
}

#[derive(Clone, Copy)]
struct EncLayer {
    attn_norm: Norm,
    attn: Attention,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy)]
struct DecLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Clone)]
struct Layout {
    embed: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    out: Option<ParamId>,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
}

/// Builds the parameter table in a fixed order, or looks the names up in
/// an existing store.
struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    init: Option<(&'a mut StreamRng, Normal<f64>)>,
}

impl<T: Real> Builder<'_, T> {
    fn tensor(&mut self, name: String, shape: &[usize], fill: Fill) -> Result<ParamId> {
        if self.init.is_none() {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| Error::Model(format!("checkpoint lacks parameter {name}")))?;
            if self.store.get(id).shape() != shape {
                return Err(Error::Model(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    self.store.get(id).shape()
                )));
            }
            return Ok(id);
        }
        let n: usize = shape.iter().product();
        let t = match fill {
            Fill::Zero => Tensor::zeros(shape),
            Fill::One => Tensor::full(shape, T::one()),
            Fill::Normal => {
                let (rng, normal) = self.init.as_mut().expect("init mode");
                let data = (0..n).map(|_| T::from_f64(normal.sample(*rng))).collect();
                Tensor::new(shape.to_vec(), data)?
            }
        };
        Ok(self.store.add(name, t))
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(format!("{name}.weight"), &[i, o], Fill::Normal)?,
            b: self.tensor(format!("{name}.bias"), &[o], Fill::Zero)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.tensor(format!("{name}.gain"), &[d], Fill::One)?,
            b: self.tensor(format!("{name}.bias"), &[d], Fill::Zero)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Result<Ffn> {
        Ok(Ffn {
            inner: self.linear(&format!("{name}.in"), d, f)?,
            outer: self.linear(&format!("{name}.out"), f, d)?,
        })
    }

    fn layout(&mut self, c: &ModelConfig) -> Result<Layout> {
        let d = c.d_model;
        let embed = self.tensor("embed.weight".into(), &[c.vocab_size, d], Fill::Normal)?;
        let enc_pos = self.tensor("enc.pos".into(), &[c.max_positions, d], Fill::Normal)?;
        let dec_pos = self.tensor("dec.pos".into(), &[c.max_positions, d], Fill::Normal)?;
        let mut enc = Vec::new();
        for l in 0..c.n_enc_layers {
            let p = format!("enc.{l}");
            enc.push(EncLayer {
                attn_norm: self.norm(&format!("{p}.attn_norm"), d)?,
                attn: self.attention(&format!("{p}.attn"), d)?,
                ffn_norm: self.norm(&format!("{p}.ffn_norm"), d)?,
                ffn: self.ffn(&format!("{p}.ffn"), d, c.d_ff)?,
            });
        }
        let enc_norm = self.norm("enc.final_norm", d)?;
        let mut dec = Vec::new();
        for l in 0..c.n_dec_layers {
            let p = format!("dec.{l}");
            dec.push(DecLayer {
                self_norm: self.norm(&format!("{p}.self_norm"), d)?,
                self_attn: self.attention(&format!("{p}.self_attn"), d)?,
                cross_norm: self.norm(&format!("{p}.cross_norm"), d)?,
                cross_attn: self.attention(&format!("{p}.cross_attn"), d)?,
                ffn_norm: self.norm(&format!("{p}.ffn_norm"), d)?,
                ffn: self.ffn(&format!("{p}.ffn"), d, c.d_ff)?,
            });
        }
        let dec_norm = self.norm("dec.final_norm", d)?;
        let out = if c.tie_embeddings {
            None
        } else {
            Some(self.tensor("out.weight".into(), &[c.vocab_size, d], Fill::Normal)?)
        };
        Ok(Layout {
            embed,
            enc_pos,
            dec_pos,
            out,
            enc,
            enc_norm,
            dec,
            dec_norm,
        })
    }
}

#[derive(Clone, Copy)]
enum Fill {
    Zero,
    One,
    Normal,
}

/// Padded id matrices. Sequences are expected to end in `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[size × src_len]`, row-major, right-padded with `<pad>`.
    pub src: Vec<u32>,
    /// `[size × tgt_len]`, row-major, right-padded with `<pad>`.
    pub tgt: Vec<u32>,
}

fn pad_rows(rows: &[&[u32]]) -> (usize, Vec<u32>) {
    let len = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(1);
    let mut out = vec![PAD; rows.len() * len];
    for (i, r) in rows.iter().enumerate() {
        out[i * len..i * len + r.len()].copy_from_slice(r);
    }
    (len, out)
}

impl Batch {
    pub fn new(pairs: &[(&[u32], &[u32])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let (src_len, src) = pad_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let (tgt_len, tgt) = pad_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        Ok(Batch {
            size: pairs.len(),
            src_len,
            tgt_len,
            src,
            tgt,
        })
    }

    pub fn from_vecs(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        let refs: Vec<(&[u32], &[u32])> = pairs
            .iter()
            .map(|(s, t)| (s.as_slice(), t.as_slice()))
            .collect();
        Self::new(&refs)
    }

    /// Non-pad target positions, i.e. the tokens the loss averages over.
    pub fn n_tokens(&self) -> usize {
        self.tgt.iter().filter(|&&t| t != PAD).count()
    }

    /// Target shifted right by one with `<eos>` as start symbol.
    fn decoder_input(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.tgt.len());
        for row in self.tgt.chunks(self.tgt_len) {
            out.push(EOS);
            out.extend_from_slice(&row[..self.tgt_len - 1]);
        }
        out
    }
}

/// Transformer weights plus the config that shapes them.
#[derive(Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Encoder output for incremental decoding: cross-attention keys and
/// values per decoder layer, `[B, H, Ts, dh]`, plus the key mask.
#[derive(Clone)]
pub struct EncoderOut<T> {
    pub batch: usize,
    pub src_len: usize,
    src_pad: Vec<bool>,
    cross_k: Vec<Tensor<T>>,
    cross_v: Vec<Tensor<T>>,
}

/// Self-attention cache of a partially decoded batch.
#[derive(Clone)]
pub struct DecoderState<T> {
    pub pos: usize,
    self_k: Vec<Option<Tensor<T>>>,
    self_v: Vec<Option<Tensor<T>>>,
}

/// Rows `rows` of a tensor along axis 0.
fn gather_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let stride = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row gather keeps shape consistent")
}

impl<T: Real> EncoderOut<T> {
    /// Reorders or repeats batch entries, e.g. to expand for beams.
    pub fn select(&self, rows: &[usize]) -> Self {
        let src_pad = rows
            .iter()
            .flat_map(|&r| {
                self.src_pad[r * self.src_len..(r + 1) * self.src_len]
                    .iter()
                    .copied()
            })
            .collect();
        EncoderOut {
            batch: rows.len(),
            src_len: self.src_len,
            src_pad,
            cross_k: self.cross_k.iter().map(|t| gather_rows(t, rows)).collect(),
            cross_v: self.cross_v.iter().map(|t| gather_rows(t, rows)).collect(),
        }
    }
}

impl<T: Real> DecoderState<T> {
    pub fn select(&self, rows: &[usize]) -> Self {
        let g = |v: &Vec<Option<Tensor<T>>>| {
            v.iter()
                .map(|t| t.as_ref().map(|t| gather_rows(t, rows)))
                .collect()
        };
        DecoderState {
            pos: self.pos,
            self_k: g(&self.self_k),
            self_v: g(&self.self_v),
        }
    }
}

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    config: &'a ModelConfig,
    rng: Option<&'a mut StreamRng>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.config.dropout > 0.0 => {
                Ok(self.tape.dropout(x, self.config.dropout, rng)?)
            }
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let (w, b) = (self.p(l.w), self.p(l.b));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (self.p(n.g), self.p(n.b));
        Ok(self.tape.layer_norm(x, g, b, LN_EPS)?)
    }

    /// `[B, T, d]` → `[B, H, T, dh]`.
    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let r = self.tape.reshape(x, &[s[0], s[1], h, dh])?;
        Ok(self.tape.permute(r, &[0, 2, 1, 3])?)
    }

    fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let p = self.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(p, &[s[0], s[2], s[1] * s[3]])?)
    }

    /// Scaled dot-product attention over split heads, then the output
    /// projection.
    fn attend(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>, o: Linear) -> Result<Var> {
        let scores = self.tape.matmul_t(q, k)?;
        let scale = T::from_f64(1.0 / (self.config.head_dim() as f64).sqrt());
        let mut scores = self.tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = self.tape.add(scores, m)?;
        }
        let probs = self.tape.softmax(scores, 3)?;
        let ctx = self.tape.matmul(probs, v)?;
        let merged = self.merge_heads(ctx)?;
        self.linear(merged, o)
    }

    fn ffn(&mut self, x: Var, f: Ffn) -> Result<Var> {
        let h = self.linear(x, f.inner)?;
        let h = match self.config.activation {
            Activation::Gelu => self.tape.gelu(h),
            Activation::Relu => self.tape.relu(h),
        };
        self.linear(h, f.outer)
    }

    /// Token plus position embeddings for `ids` (`[B, T]`) starting at
    /// position `start`.
    fn embed(
        &mut self,
        ids: &[u32],
        b: usize,
        t: usize,
        table: ParamId,
        pos: ParamId,
        start: usize,
    ) -> Result<Var> {
        let e = self.p(table);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = self.tape.embedding(e, &ids, &[b, t])?;
        let p = self.p(pos);
        let pos_ids: Vec<usize> = (start..start + t).collect();
        let pe = self.tape.embedding(p, &pos_ids, &[t])?;
        let x = self.tape.add(tok, pe)?;
        self.dropout(x)
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        let y = self.dropout(y)?;
        Ok(self.tape.add(x, y)?)
    }
}

/// Additive key mask `[B, H, Tq, Tk]` hiding pad keys.
fn key_mask<T: Real>(pad: &[bool], b: usize, h: usize, tq: usize, tk: usize) -> Tensor<T> {
    let neg = T::from_f64(NEG_INF);
    let mut data = Vec::with_capacity(b * h * tq * tk);
    for bi in 0..b {
        let row: Vec<T> = pad[bi * tk..(bi + 1) * tk]
            .iter()
            .map(|&p| if p { neg } else { T::zero() })
            .collect();
        for _ in 0..h * tq {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(vec![b, h, tq, tk], data).expect("mask shape")
}

fn causal_mask<T: Real>(t: usize) -> Tensor<T> {
    let neg = T::from_f64(NEG_INF);
    let data = (0..t * t)
        .map(|i| if i % t > i / t { neg } else { T::zero() })
        .collect();
    Tensor::new(vec![t, t], data).expect("mask shape")
}

impl<T: Real> Model<T> {
    /// Fresh weights: N(0, init_std) matrices and embeddings, unit norm
    /// gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_fork(seed, stream_id("model-init", 0));
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let layout = Builder {
            store: &mut params,
            init: Some((&mut rng, normal)),
        }
        .layout(&config)?;
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    fn check_lengths(&self, len: usize, what: &str) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::Model(format!(
                "{what} length {len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            Some(i) => Err(Error::Model(format!(
                "token id {i} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn ctx<'a>(&'a self, tape: &'a mut Tape<T>, rng: Option<&'a mut StreamRng>) -> Ctx<'a, T> {
        Ctx {
            tape,
            params: &self.params,
            config: &self.config,
            rng,
        }
    }

    fn encoder(&self, cx: &mut Ctx<'_, T>, src: &[u32], b: usize, ts: usize) -> Result<Var> {
        let c = &self.config;
        let pad: Vec<bool> = src.iter().map(|&i| i == PAD).collect();
        let mask = cx.tape.constant(key_mask(&pad, b, c.n_heads, ts, ts));
        let mut x = cx.embed(src, b, ts, self.layout.embed, self.layout.enc_pos, 0)?;
        for l in &self.layout.enc {
            let h = cx.norm(x, l.attn_norm)?;
            let q = cx.linear(h, l.attn.q)?;
            let k = cx.linear(h, l.attn.k)?;
            let v = cx.linear(h, l.attn.v)?;
            let (q, k, v) = (cx.split_heads(q)?, cx.split_heads(k)?, cx.split_heads(v)?);
            let a = cx.attend(q, k, v, Some(mask), l.attn.o)?;
            x = cx.residual(x, a)?;
            let h = cx.norm(x, l.ffn_norm)?;
            let f = cx.ffn(h, l.ffn)?;
            x = cx.residual(x, f)?;
        }
        cx.norm(x, self.layout.enc_norm)
    }

    fn project_out(&self, cx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        let w = cx.p(self.layout.out.unwrap_or(self.layout.embed));
        Ok(cx.tape.matmul_t(h, w)?)
    }

    /// Logits `[B, Tt, V]` under teacher forcing. Dropout is active iff
    /// `rng` is given.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let c = &self.config;
        self.check_lengths(batch.src_len, "source")?;
        self.check_lengths(batch.tgt_len, "target")?;
        self.check_ids(&batch.src)?;
        self.check_ids(&batch.tgt)?;
        let (b, ts, tt) = (batch.size, batch.src_len, batch.tgt_len);
        let mut cx = self.ctx(tape, rng);
        let memory = self.encoder(&mut cx, &batch.src, b, ts)?;
        let src_pad: Vec<bool> = batch.src.iter().map(|&i| i == PAD).collect();
        let cross_mask = cx.tape.constant(key_mask(&src_pad, b, c.n_heads, tt, ts));
        let causal = cx.tape.constant(causal_mask(tt));
        let dec_in = batch.decoder_input();
        let mut x = cx.embed(&dec_in, b, tt, self.layout.embed, self.layout.dec_pos, 0)?;
        for l in &self.layout.dec {
            let h = cx.norm(x, l.self_norm)?;
            let q = cx.linear(h, l.self_attn.q)?;
            let k = cx.linear(h, l.self_attn.k)?;
            let v = cx.linear(h, l.self_attn.v)?;
            let (q, k, v) = (cx.split_heads(q)?, cx.split_heads(k)?, cx.split_heads(v)?);
            let a = cx.attend(q, k, v, Some(causal), l.self_attn.o)?;
            x = cx.residual(x, a)?;
            let h = cx.norm(x, l.cross_norm)?;
            let q = cx.linear(h, l.cross_attn.q)?;
            let k = cx.linear(memory, l.cross_attn.k)?;
            let v = cx.linear(memory, l.cross_attn.v)?;
            let (q, k, v) = (cx.split_heads(q)?, cx.split_heads(k)?, cx.split_heads(v)?);
            let a = cx.attend(q, k, v, Some(cross_mask), l.cross_attn.o)?;
            x = cx.residual(x, a)?;
            let h = cx.norm(x, l.ffn_norm)?;
            let f = cx.ffn(h, l.ffn)?;
            x = cx.residual(x, f)?;
        }
        let h = cx.norm(x, self.layout.dec_norm)?;
        self.project_out(&mut cx, h)
    }

    /// Mean token cross entropy over non-pad target positions.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        if batch.n_tokens() == 0 {
            return Err(Error::Model("target batch contains only padding".into()));
        }
        let logits = self.forward_logits(tape, batch, rng)?;
        let targets: Vec<usize> = batch.tgt.iter().map(|&t| t as usize).collect();
        Ok(tape.cross_entropy_smoothed(
            logits,
            &targets,
            PAD as usize,
            self.config.label_smoothing,
        )?)
    }

    /// Loss value without recording gradients.
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::inference();
        let l = self.loss(&mut tape, batch, None)?;
        Ok(tape.value(l).item().as_f64())
    }

    /// Runs the encoder once for incremental decoding.
    pub fn encode(&self, src: &[Vec<u32>]) -> Result<EncoderOut<T>> {
        let rows: Vec<&[u32]> = src.iter().map(Vec::as_slice).collect();
        if rows.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let (ts, ids) = pad_rows(&rows);
        self.check_lengths(ts, "source")?;
        self.check_ids(&ids)?;
        let b = rows.len();
        let mut tape = Tape::inference();
        let mut cx = self.ctx(&mut tape, None);
        let memory = self.encoder(&mut cx, &ids, b, ts)?;
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for l in &self.layout.dec {
            let k = cx.linear(memory, l.cross_attn.k)?;
            let v = cx.linear(memory, l.cross_attn.v)?;
            let (k, v) = (cx.split_heads(k)?, cx.split_heads(v)?);
            cross_k.push(cx.tape.value(k).clone());
            cross_v.push(cx.tape.value(v).clone());
        }
        Ok(EncoderOut {
            batch: b,
            src_len: ts,
            src_pad: ids.iter().map(|&i| i == PAD).collect(),
            cross_k,
            cross_v,
        })
    }

    pub fn start_state(&self) -> DecoderState<T> {
        DecoderState {
            pos: 0,
            self_k: vec![None; self.layout.dec.len()],
            self_v: vec![None; self.layout.dec.len()],
        }
    }

    /// Feeds one token per batch entry and returns next-token logits
    /// `[B, V]`. The first call should feed `<eos>`, the start symbol.
    pub fn step(
        &self,
        enc: &EncoderOut<T>,
        state: &mut DecoderState<T>,
        tokens: &[u32],
    ) -> Result<Tensor<T>> {
        let c = &self.config;
        let b = enc.batch;
        if tokens.len() != b {
            return Err(Error::Model(format!(
                "{} tokens for a batch of {b}",
                tokens.len()
            )));
        }
        self.check_lengths(state.pos + 1, "target")?;
        self.check_ids(tokens)?;
        let mut tape = Tape::inference();
        let mut cx = self.ctx(&mut tape, None);
        let cross_mask = cx
            .tape
            .constant(key_mask(&enc.src_pad, b, c.n_heads, 1, enc.src_len));
        let mut x = cx.embed(
            tokens,
            b,
            1,
            self.layout.embed,
            self.layout.dec_pos,
            state.pos,
        )?;
        for (i, l) in self.layout.dec.iter().enumerate() {
            let h = cx.norm(x, l.self_norm)?;
            let q = cx.linear(h, l.self_attn.q)?;
            let k = cx.linear(h, l.self_attn.k)?;
            let v = cx.linear(h, l.self_attn.v)?;
            let (q, mut k, mut v) = (cx.split_heads(q)?, cx.split_heads(k)?, cx.split_heads(v)?);
            if let (Some(pk), Some(pv)) = (&state.self_k[i], &state.self_v[i]) {
                let (pk, pv) = (cx.tape.constant(pk.clone()), cx.tape.constant(pv.clone()));
                k = cx.tape.concat(&[pk, k], 2)?;
                v = cx.tape.concat(&[pv, v], 2)?;
            }
            state.self_k[i] = Some(cx.tape.value(k).clone());
            state.self_v[i] = Some(cx.tape.value(v).clone());
            let a = cx.attend(q, k, v, None, l.self_attn.o)?;
            x = cx.residual(x, a)?;
            let h = cx.norm(x, l.cross_norm)?;
            let q = cx.linear(h, l.cross_attn.q)?;
            let q = cx.split_heads(q)?;
            let k = cx.tape.constant(enc.cross_k[i].clone());
            let v = cx.tape.constant(enc.cross_v[i].clone());
            let a = cx.attend(q, k, v, Some(cross_mask), l.cross_attn.o)?;
            x = cx.residual(x, a)?;
            let h = cx.norm(x, l.ffn_norm)?;
            let f = cx.ffn(h, l.ffn)?;
            x = cx.residual(x, f)?;
        }
        let h = cx.norm(x, self.layout.dec_norm)?;
        let h = cx.tape.reshape(h, &[b, c.d_model])?;
        let logits = self.project_out(&mut cx, h)?;
        state.pos += 1;
        Ok(tape.value(logits).clone())
    }

    pub fn to_checkpoint(&self, tokenizer_hash: &str) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new();
        ck.meta
            .insert("config".into(), serde_json::to_string(&self.config)?);
        ck.meta
            .insert("tokenizer_sha256".into(), tokenizer_hash.to_string());
        ck.meta.insert("precision_bits".into(), T::BITS.to_string());
        for (_, name, t) in self.params.iter() {
            ck.tensors.push((name.to_string(), t.clone()));
        }
        Ok(ck)
    }

    /// Rebuilds a model from checkpoint tensors; returns it with the
    /// recorded tokenizer hash.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, String)> {
        let config: ModelConfig = serde_json::from_str(
            ck.meta
                .get("config")
                .ok_or_else(|| Error::Model("checkpoint has no model config".into()))?,
        )?;
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in &ck.tensors {
            params.add(name.clone(), t.clone());
        }
        let layout = Builder {
            store: &mut params,
            init: None,
        }
        .layout(&config)?;
        if params.count() != config.count_params() {
            return Err(Error::Model(
                "checkpoint holds parameters the config does not describe".into(),
            ));
        }
        if !params.all_finite() {
            return Err(Error::Model(
                "checkpoint contains non-finite weights".into(),
            ));
        }
        let hash = ck.meta.get("tokenizer_sha256").cloned().unwrap_or_default();
        Ok((
            Model {
                config,
                params,
                layout,
            },
            hash,
        ))
    }

    /// Writes the checkpoint plus a JSON sidecar (`<path>.manifest.json`)
    /// with the config and tokenizer hash.
    pub fn save(&self, path: &Path, tokenizer_hash: &str) -> Result<()> {
        self.to_checkpoint(tokenizer_hash)?.save(path)?;
        let mut manifest = BTreeMap::new();
        manifest.insert("config", serde_json::to_value(&self.config)?);
        manifest.insert("tokenizer_sha256", tokenizer_hash.into());
        manifest.insert("parameters", self.count_params().into());
        let text = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&sidecar_path(path), text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let ck = Checkpoint::load(path).map_err(|e| match e {
            tagmt_tensor::TensorError::Io(io) => Error::io(path, io),
            other => other.into(),
        })?;
        Self::from_checkpoint(&ck)
    }

    /// Names subject to weight decay: everything except norms and biases.
    pub fn decays(name: &str) -> bool {
        !(name.contains("norm") || name.ends_with(".bias"))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
