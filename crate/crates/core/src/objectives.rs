//! Training examples for the three finetuning settings: tagged
//! translation, online backtranslation and denoising reconstruction.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tagmt_tensor::rng::{rng_fork, stream_id, StreamRng};

use crate::corpus::{Direction, LangTag, MonoStore, ParallelPair};
use crate::decode::{DecodeConfig, DecodeMode, Translator};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FinetuneSetting {
    #[default]
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "bt")]
    Bt,
    #[serde(rename = "btrec")]
    BtRec,
}

impl FinetuneSetting {
    pub const ALL: [FinetuneSetting; 3] = [
        FinetuneSetting::Base,
        FinetuneSetting::Bt,
        FinetuneSetting::BtRec,
    ];

    pub fn uses_bt(self) -> bool {
        self != FinetuneSetting::Base
    }

    pub fn uses_rec(self) -> bool {
        self == FinetuneSetting::BtRec
    }

    /// Column label as used in reports.
    pub fn label(self) -> &'static str {
        match self {
            FinetuneSetting::Base => "BASE",
            FinetuneSetting::Bt => "BT",
            FinetuneSetting::BtRec => "BT&REC",
        }
    }
}

impl fmt::Display for FinetuneSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneSetting::Base => "base",
            FinetuneSetting::Bt => "bt",
            FinetuneSetting::BtRec => "btrec",
        })
    }
}

impl FromStr for FinetuneSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(FinetuneSetting::Base),
            "bt" => Ok(FinetuneSetting::Bt),
            "btrec" | "bt_rec" | "bt&rec" | "bt-rec" => Ok(FinetuneSetting::BtRec),
            _ => Err(Error::Config(format!(
                "unknown setting {s:?} (base, bt, btrec)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BtConfig {
    /// Sentences per language per round; entry `r` applies to round `r`,
    /// the last entry to all later rounds.
    pub num_bt: Vec<usize>,
    pub num_sample: usize,
    /// First epoch (1-based) that runs a BT round.
    pub start_epoch: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for BtConfig {
    fn default() -> Self {
        BtConfig {
            num_bt: vec![500],
            num_sample: 2,
            start_epoch: 2,
            temperature: 1.0,
            max_new_tokens: 50,
        }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bt.is_empty() || self.num_bt.contains(&0) {
            return Err(Error::Config("num_bt entries must be at least 1".into()));
        }
        if self.num_sample == 0
            || self.start_epoch == 0
            || self.temperature <= 0.0
            || self.max_new_tokens == 0
        {
            return Err(Error::Config(
                "num_sample, start_epoch, max_new_tokens must be at least 1 and temperature positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_bt_for_round(&self, round: usize) -> usize {
        self.num_bt[round.min(self.num_bt.len() - 1)]
    }

    fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            ..DecodeConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecConfig {
    pub num_rec: usize,
    pub n_swaps: usize,
    pub p_del: f64,
}

impl Default for RecConfig {
    fn default() -> Self {
        RecConfig {
            num_rec: 50,
            n_swaps: 2,
            p_del: 0.2,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_del) {
            return Err(Error::Config(format!(
                "p_del {} outside [0, 1)",
                self.p_del
            )));
        }
        Ok(())
    }
}

/// A source string that starts with `<code> ` and its target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedExample {
    pub input: String,
    pub target: String,
}

impl TaggedExample {
    pub fn new(tag: &LangTag, payload: &str, target: &str) -> Self {
        TaggedExample {
            input: format!("{} {payload}", tag.token()),
            target: target.to_string(),
        }
    }

    /// The tag language and payload, if the input is well formed.
    pub fn split_tag(&self) -> Option<(LangTag, &str)> {
        let rest = self.input.strip_prefix('<')?;
        let (code, payload) = rest.split_once("> ")?;
        Some((LangTag::new(code).ok()?, payload))
    }
}

/// Unordered language pair whose two directions are left out.
pub type Exclusion = (LangTag, LangTag);

fn excluded(a: &LangTag, b: &LangTag, exclusions: &[Exclusion]) -> bool {
    exclusions
        .iter()
        .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
}

/// All ordered pairs of distinct languages except excluded pairs, sorted.
pub fn build_directions(langs: &[LangTag], exclusions: &[Exclusion]) -> Result<Vec<Direction>> {
    let set: BTreeSet<&LangTag> = langs.iter().collect();
    if set.len() < 2 {
        return Err(Error::Config(
            "at least two distinct languages are required".into(),
        ));
    }
    let mut out = Vec::new();
    for &a in &set {
        for &b in &set {
            if a != b && !excluded(a, b, exclusions) {
                out.push(Direction::new(a.clone(), b.clone())?);
            }
        }
    }
    Ok(out)
}

/// `<tgt> src` → `tgt_text`.
pub fn format_translation(pair: &ParallelPair) -> TaggedExample {
    TaggedExample::new(&pair.direction.tgt, &pair.src_text, &pair.tgt_text)
}

/// Word-level corruption: `n_swaps` swaps of two distinct random
/// positions, then independent deletion with probability `p_del`. At
/// least one token always survives.
pub fn noise<R: Rng + ?Sized>(sentence: &str, n_swaps: usize, p_del: f64, rng: &mut R) -> String {
    let mut toks: Vec<&str> = sentence.split_whitespace().collect();
    let n = toks.len();
    if n == 0 {
        return String::new();
    }
    if n >= 2 {
        for _ in 0..n_swaps {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            toks.swap(i, j);
        }
    }
    let keep: Vec<bool> = (0..n)
        .map(|_| p_del == 0.0 || rng.random::<f64>() >= p_del)
        .collect();
    if keep.iter().any(|&k| k) {
        toks.iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(t, _)| *t)
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        toks[rng.random_range(0..n)].to_string()
    }
}

/// Training-split monolingual sentences of `lang` (empty if none).
fn mono_pool<'a>(mono: &'a MonoStore, lang: &LangTag) -> Vec<&'a str> {
    mono.train_texts(lang)
}

/// For each language with monolingual data, `num_rec` sentences drawn with
/// replacement and noised: `<m> noisy` → original.
pub fn make_rec_examples(
    mono: &MonoStore,
    langs: &[LangTag],
    cfg: &RecConfig,
    rng: &mut StreamRng,
) -> Vec<TaggedExample> {
    let mut out = Vec::new();
    for lang in langs {
        let pool = mono_pool(mono, lang);
        if pool.is_empty() {
            log::warn!("no monolingual data for {lang}; skipped in reconstruction");
            continue;
        }
        for _ in 0..cfg.num_rec {
            let y = pool[rng.random_range(0..pool.len())];
            let x = noise(y, cfg.n_swaps, cfg.p_del, rng);
            out.push(TaggedExample::new(lang, &x, y));
        }
    }
    out
}

/// A backtranslated example with its pivot language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BtExample {
    pub example: TaggedExample,
    pub pivot: LangTag,
}

/// For each language `m` with monolingual data, `num_bt` sentences `y`
/// drawn with replacement; each is translated into a uniformly chosen pivot
/// `s` (`num_sample` sampled candidates, one kept uniformly) and emitted as
/// `<m> x̂` → `y`.
///
/// Sentence `j` (counted across languages) draws pivot and pick from its own
/// stream, and candidate `c` is item `j·num_sample + c` of one
/// generation batch, so the result does not depend on thread count.
pub fn make_bt_examples(
    translator: &dyn Translator,
    mono: &MonoStore,
    langs: &[LangTag],
    exclusions: &[Exclusion],
    cfg: &BtConfig,
    num_bt: usize,
    seed: u64,
) -> Result<Vec<BtExample>> {
    cfg.validate()?;
    struct Job<'a> {
        lang: &'a LangTag,
        pivot: LangTag,
        y: &'a str,
        pick: usize,
    }
    let mut jobs = Vec::new();
    for (li, lang) in langs.iter().enumerate() {
        let pool = mono_pool(mono, lang);
        if pool.is_empty() {
            log::warn!("no monolingual data for {lang}; skipped in backtranslation");
            continue;
        }
        let pivots: Vec<&LangTag> = langs
            .iter()
            .filter(|s| *s != lang && !excluded(lang, s, exclusions))
            .collect();
        if pivots.is_empty() {
            return Err(Error::Config(format!(
                "no eligible pivot language for {lang}"
            )));
        }
        let mut draw = rng_fork(seed, stream_id("bt-draw", li as u64));
        for _ in 0..num_bt {
            let y = pool[draw.random_range(0..pool.len())];
            let mut r = rng_fork(seed, stream_id("bt-sentence", jobs.len() as u64));
            let pivot = pivots[r.random_range(0..pivots.len())].clone();
            let pick = r.random_range(0..cfg.num_sample);
            jobs.push(Job {
                lang,
                pivot,
                y,
                pick,
            });
        }
    }
    let inputs: Vec<String> = jobs
        .iter()
        .flat_map(|j| std::iter::repeat_n(format!("{} {}", j.pivot.token(), j.y), cfg.num_sample))
        .collect();
    let outputs = translator.generate_batch(
        &inputs,
        &cfg.decode_config(),
        stream_id("bt-generate", seed),
    )?;
    if outputs.len() != inputs.len() {
        return Err(Error::Model(format!(
            "{} outputs for {} inputs",
            outputs.len(),
            inputs.len()
        )));
    }
    Ok(jobs
        .into_iter()
        .enumerate()
        .map(|(i, j)| BtExample {
            example: TaggedExample::new(j.lang, &outputs[i * cfg.num_sample + j.pick].text, j.y),
            pivot: j.pivot,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Bt,
    Rec,
}

/// One line of the BT/REC audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub input: String,
    pub target: String,
    pub kind: ExampleKind,
    pub pivot: Option<LangTag>,
    pub round: usize,
}

pub fn append_audit(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
