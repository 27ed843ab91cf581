//! Autoregressive generation: greedy, ancestral sampling and beam search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tagmt_tensor::rng::{rng_fork, sample_categorical, StreamRng};
use tagmt_tensor::Real;

use crate::model::{DecoderState, EncoderOut, Model};
use crate::tokenizer::{SubwordModel, EOS, PAD, UNK};
use crate::{Error, Result};

/// Inputs decoded together in one batched pass.
const CHUNK: usize = 32;
/// Below this temperature sampling is replaced by argmax.
const MIN_TEMPERATURE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
    Beam,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample),
            "beam" => Ok(DecodeMode::Beam),
            _ => Err(Error::Config(format!("unknown decode mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    pub temperature: f64,
    pub beam_size: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_new_tokens: 50,
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            beam_size: 4,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn sample(temperature: f64) -> Self {
        DecodeConfig {
            mode: DecodeMode::Sample,
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.mode == DecodeMode::Sample && self.temperature <= 0.0 {
            return Err(Error::Config(
                "sampling temperature must be positive".into(),
            ));
        }
        if self.mode == DecodeMode::Beam && self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One generated output with its truncation flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<u32>,
    /// Output hit the length limit before `<eos>`.
    pub truncated: bool,
    /// Input was cut to fit the model's positions.
    pub input_truncated: bool,
}

/// Anything that maps tagged inputs to outputs. Item `i` of a batch must
/// draw its randomness from `rng_fork(seed, i)`.
pub trait Translator: Sync {
    fn generate_batch(
        &self,
        inputs: &[String],
        config: &DecodeConfig,
        seed: u64,
    ) -> Result<Vec<Generation>>;
}

/// A model and its tokenizer, ready to translate.
pub struct ModelTranslator<'a, T: Real> {
    pub model: &'a Model<T>,
    pub tokenizer: &'a SubwordModel,
}

impl<'a, T: Real> ModelTranslator<'a, T> {
    pub fn new(model: &'a Model<T>, tokenizer: &'a SubwordModel) -> Self {
        ModelTranslator { model, tokenizer }
    }

    fn suppressed(&self, id: usize) -> bool {
        id == PAD as usize
            || id == UNK as usize
            || (id > UNK as usize && id < self.tokenizer.special_tokens().len())
    }

    /// Log-probabilities of one logit row with pad, unk and language tags
    /// removed, at temperature `temp`.
    fn log_probs(&self, row: &[T], temp: f64) -> Vec<f64> {
        let mut v: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if self.suppressed(i) {
                    f64::NEG_INFINITY
                } else {
                    x.as_f64() / temp
                }
            })
            .collect();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        for x in &mut v {
            *x -= lse;
        }
        v
    }

    fn argmax(&self, row: &[T]) -> u32 {
        let mut best = None;
        for (i, &x) in row.iter().enumerate() {
            if self.suppressed(i) {
                continue;
            }
            if best.is_none_or(|(_, b)| x > b) {
                best = Some((i, x));
            }
        }
        best.map(|(i, _)| i as u32).unwrap_or(EOS)
    }

    fn prepare(&self, text: &str) -> (Vec<u32>, bool) {
        let mut ids = self.tokenizer.encode(text);
        let max = self.model.config.max_positions;
        if ids.len() > max {
            ids.truncate(max - 1);
            ids.push(EOS);
            return (ids, true);
        }
        (ids, false)
    }

    fn step_limit(&self, config: &DecodeConfig) -> usize {
        config.max_new_tokens.min(self.model.config.max_positions)
    }

    fn finish(&self, ids: Vec<u32>, truncated: bool, input_truncated: bool) -> Result<Generation> {
        Ok(Generation {
            text: self.tokenizer.decode(&ids)?,
            ids,
            truncated,
            input_truncated,
        })
    }

    /// Greedy or sampled decoding of several inputs in one batch.
    fn run_chunk(
        &self,
        srcs: &[(Vec<u32>, bool)],
        rngs: &mut [StreamRng],
        config: &DecodeConfig,
    ) -> Result<Vec<Generation>> {
        let n = srcs.len();
        let mut enc = self
            .model
            .encode(&srcs.iter().map(|s| s.0.clone()).collect::<Vec<_>>())?;
        let mut state = self.model.start_state();
        let mut active: Vec<usize> = (0..n).collect();
        let mut last = vec![EOS; n];
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let greedy = config.mode == DecodeMode::Greedy || config.temperature < MIN_TEMPERATURE;
        let v = self.model.config.vocab_size;
        for _ in 0..self.step_limit(config) {
            let toks: Vec<u32> = active.iter().map(|&i| last[i]).collect();
            let logits = self.model.step(&enc, &mut state, &toks)?;
            let mut keep = Vec::with_capacity(active.len());
            for (row, &i) in active.iter().enumerate() {
                let lr = &logits.data()[row * v..(row + 1) * v];
                let tok = if greedy {
                    self.argmax(lr)
                } else {
                    let probs: Vec<f64> = self
                        .log_probs(lr, config.temperature)
                        .iter()
                        .map(|x| x.exp())
                        .collect();
                    sample_categorical(&probs, &mut rngs[i])? as u32
                };
                if tok == EOS {
                    done[i] = true;
                } else {
                    out[i].push(tok);
                    last[i] = tok;
                    keep.push(row);
                }
            }
            if keep.is_empty() {
                break;
            }
            if keep.len() < active.len() {
                enc = enc.select(&keep);
                state = state.select(&keep);
                active = keep.iter().map(|&r| active[r]).collect();
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, ids)| self.finish(ids, !done[i], srcs[i].1))
            .collect()
    }

    fn run_beam(&self, src: &(Vec<u32>, bool), config: &DecodeConfig) -> Result<Generation> {
        let enc1: EncoderOut<T> = self.model.encode(std::slice::from_ref(&src.0))?;
        let k = config.beam_size;
        let v = self.model.config.vocab_size;
        let norm = |len: usize, score: f64| score / (len.max(1) as f64).powf(config.length_penalty);
        let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        let mut state: DecoderState<T> = self.model.start_state();
        let mut enc = enc1.clone();
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        for _ in 0..self.step_limit(config) {
            let toks: Vec<u32> = beams
                .iter()
                .map(|(ids, _)| ids.last().copied().unwrap_or(EOS))
                .collect();
            let logits = self.model.step(&enc, &mut state, &toks)?;
            let mut cand: Vec<(f64, usize, u32)> = Vec::with_capacity(beams.len() * v);
            for (b, (_, score)) in beams.iter().enumerate() {
                let lp = self.log_probs(&logits.data()[b * v..(b + 1) * v], 1.0);
                for (t, &x) in lp.iter().enumerate() {
                    if x.is_finite() {
                        cand.push((score + x, b, t as u32));
                    }
                }
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            let mut parents = Vec::new();
            for (score, b, t) in cand.into_iter().take(k) {
                let ids = &beams[b].0;
                if t == EOS {
                    finished.push((ids.clone(), norm(ids.len() + 1, score)));
                } else {
                    let mut ids = ids.clone();
                    ids.push(t);
                    next.push((ids, score));
                    parents.push(b);
                }
            }
            if finished.len() >= k || next.is_empty() {
                beams.clear();
                break;
            }
            state = state.select(&parents);
            enc = enc1.select(&vec![0; parents.len()]);
            beams = next;
        }
        let truncated = finished.is_empty();
        if truncated {
            finished = beams
                .into_iter()
                .map(|(ids, s)| (ids.clone(), norm(ids.len(), s)))
                .collect();
        }
        let mut best: Option<&(Vec<u32>, f64)> = None;
        for f in &finished {
            if best.is_none_or(|b| f.1 > b.1) {
                best = Some(f);
            }
        }
        let ids = best.map(|b| b.0.clone()).unwrap_or_default();
        self.finish(ids, truncated, src.1)
    }

    /// Translates one input using `rng` for sampling.
    pub fn generate(
        &self,
        input: &str,
        config: &DecodeConfig,
        rng: &mut StreamRng,
    ) -> Result<Generation> {
        config.validate()?;
        let src = self.prepare(input);
        if config.mode == DecodeMode::Beam {
            return self.run_beam(&src, config);
        }
        let mut one = [rng.clone()];
        let g = self.run_chunk(std::slice::from_ref(&src), &mut one, config)?;
        *rng = one[0].clone();
        Ok(g.into_iter().next().expect("one output per input"))
    }
}

impl<T: Real> Translator for ModelTranslator<'_, T> {
    /// Order-preserving; chunks run in parallel on the current rayon pool,
    /// so results do not depend on the thread count.
    fn generate_batch(
        &self,
        inputs: &[String],
        config: &DecodeConfig,
        seed: u64,
    ) -> Result<Vec<Generation>> {
        config.validate()?;
        let srcs: Vec<(Vec<u32>, bool)> = inputs.iter().map(|s| self.prepare(s)).collect();
        let chunks: Vec<Result<Vec<Generation>>> = srcs
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let base = c * CHUNK;
                if config.mode == DecodeMode::Beam {
                    return chunk.iter().map(|s| self.run_beam(s, config)).collect();
                }
                let mut rngs: Vec<StreamRng> = (0..chunk.len())
                    .map(|i| rng_fork(seed, (base + i) as u64))
                    .collect();
                self.run_chunk(chunk, &mut rngs, config)
            })
            .collect();
        let mut out = Vec::with_capacity(inputs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LangTag;
    use crate::model::ModelConfig;
    use crate::tokenizer::train_subword;

    fn setup() -> (Model<f64>, SubwordModel) {
        let langs = [LangTag::new("sy1").unwrap(), LangTag::new("sy2").unwrap()];
        let tok = train_subword(["a b c d e f", "b c d a"], 3 + 2 + 256 + 4, &langs).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            vocab_size: tok.vocab_size(),
            max_positions: 24,
            dropout: 0.0,
            init_std: 0.5,
            ..Default::default()
        };
        (Model::init(cfg, 4).unwrap(), tok)
    }

    #[test]
    fn never_emits_pad_or_tags() {
        let (m, tok) = setup();
        let t = ModelTranslator::new(&m, &tok);
        let inputs: Vec<String> = (0..6).map(|i| format!("<sy2> a b {i}")).collect();
        for g in t
            .generate_batch(&inputs, &DecodeConfig::sample(1.0), 3)
            .unwrap()
        {
            assert!(g
                .ids
                .iter()
                .all(|&i| i as usize >= tok.special_tokens().len()));
            assert!(g.ids.len() <= 24);
        }
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let (m, tok) = setup();
        let t = ModelTranslator::new(&m, &tok);
        let inputs = vec!["<sy1> a b c".to_string(), "<sy2> d e".to_string()];
        let g = t
            .generate_batch(&inputs, &DecodeConfig::greedy(), 0)
            .unwrap();
        let s = t
            .generate_batch(&inputs, &DecodeConfig::sample(1e-5), 0)
            .unwrap();
        assert_eq!(g, s);
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let (m, tok) = setup();
        let t = ModelTranslator::new(&m, &tok);
        let beam = DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 1,
            ..Default::default()
        };
        for input in ["<sy1> a b c", "<sy2> f", "<sy1> c c d a"] {
            let mut r = rng_fork(0, 0);
            let g = t.generate(input, &DecodeConfig::greedy(), &mut r).unwrap();
            let b = t.generate(input, &beam, &mut r).unwrap();
            assert_eq!(g.ids, b.ids);
        }
    }

    #[test]
    fn batch_matches_single_generation() {
        let (m, tok) = setup();
        let t = ModelTranslator::new(&m, &tok);
        let inputs: Vec<String> = ["<sy1> a b c", "<sy2> d", "<sy1> e f a b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cfg = DecodeConfig::sample(1.0);
        let batch = t.generate_batch(&inputs, &cfg, 42).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            let mut r = rng_fork(42, i as u64);
            assert_eq!(t.generate(input, &cfg, &mut r).unwrap(), batch[i]);
        }
    }

    #[test]
    fn identical_inputs_identical_greedy_outputs() {
        let (m, tok) = setup();
        let t = ModelTranslator::new(&m, &tok);
        let inputs = vec!["<sy1> a b".to_string(); 5];
        let out = t
            .generate_batch(&inputs, &DecodeConfig::greedy(), 1)
            .unwrap();
        assert!(out.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn output_limit_sets_truncated_flag() {
        let (m, tok) = setup();
        let t = ModelTranslator::new(&m, &tok);
        let cfg = DecodeConfig {
            max_new_tokens: 1,
            ..Default::default()
        };
        let g = t.generate_batch(&["<sy1> a".to_string()], &cfg, 0).unwrap();
        assert!(g[0].ids.len() <= 1);
        assert_eq!(g[0].truncated, g[0].ids.len() == 1);
    }
}
