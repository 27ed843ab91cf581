//! Artificial languages with exact translation functions.
//!
//! A sentence is a sequence of concept ids. Each language renders concept
//! `c` as `prefix + base36(perm[c])` and then reorders the words with its
//! rule, so every pair of languages is related by a known bijection.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use tagmt_tensor::rng::{rng_fork, stream_id};

use crate::corpus::{
    Direction, LangTag, MonoSentence, MonoStore, ParallelPair, ParallelStore, Split,
};
use crate::{Error, Result};

/// Word-order permutation applied after lexical lookup. Every rule is its
/// own inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReorderRule {
    Identity,
    SwapAdjacentPairs,
    ReverseWindows(usize),
}

impl ReorderRule {
    pub fn apply<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        let mut out = xs.to_vec();
        match *self {
            ReorderRule::Identity => {}
            ReorderRule::SwapAdjacentPairs => {
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
            }
            ReorderRule::ReverseWindows(k) => {
                for w in out.chunks_mut(k.max(1)) {
                    w.reverse();
                }
            }
        }
        out
    }
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReorderRule::Identity => f.write_str("identity"),
            ReorderRule::SwapAdjacentPairs => f.write_str("swap_adjacent_pairs"),
            ReorderRule::ReverseWindows(k) => write!(f, "reverse_windows({k})"),
        }
    }
}

impl FromStr for ReorderRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "identity" => return Ok(ReorderRule::Identity),
            "swap_adjacent_pairs" => return Ok(ReorderRule::SwapAdjacentPairs),
            _ => {}
        }
        let k = s
            .strip_prefix("reverse_windows(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 2)
            .ok_or_else(|| Error::Config(format!("unknown reorder rule {s:?}")))?;
        Ok(ReorderRule::ReverseWindows(k))
    }
}

impl TryFrom<String> for ReorderRule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReorderRule> for String {
    fn from(r: ReorderRule) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLangSpec {
    pub code: LangTag,
    pub lexicon_seed: u64,
    pub surface_prefix: String,
    pub reorder_rule: ReorderRule,
    pub concept_vocab_size: usize,
}

impl SyntheticLangSpec {
    pub fn new(
        code: LangTag,
        surface_prefix: &str,
        reorder_rule: ReorderRule,
        lexicon_seed: u64,
    ) -> Self {
        SyntheticLangSpec {
            code,
            lexicon_seed,
            surface_prefix: surface_prefix.to_string(),
            reorder_rule,
            concept_vocab_size: 200,
        }
    }

    /// Surface word of every concept.
    pub fn lexicon(&self) -> Vec<String> {
        let mut perm: Vec<u32> = (0..self.concept_vocab_size as u32).collect();
        perm.shuffle(&mut rng_fork(self.lexicon_seed, stream_id("lexicon", 0)));
        perm.iter()
            .map(|&p| format!("{}{}", self.surface_prefix, base36(p)))
            .collect()
    }
}

fn base36(mut n: u32) -> String {
    const DIGITS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";
    let mut out = Vec::new();
    loop {
        out.push(DIGITS[(n % 36) as usize]);
        n /= 36;
        if n == 0 {
            break;
        }
    }
    out.reverse();
    String::from_utf8(out).expect("ascii digits")
}

const PREFIXES: [&str; 12] = [
    "ka", "mo", "ti", "ve", "bu", "do", "li", "re", "sa", "fu", "ne", "pi",
];

/// Specs for `langs` with distinct two-letter prefixes and rules cycling
/// through identity, pair swaps and reversed triples.
pub fn default_specs(langs: &[LangTag], seed: u64) -> Result<Vec<SyntheticLangSpec>> {
    if langs.len() > PREFIXES.len() {
        return Err(Error::Config(format!(
            "at most {} synthetic languages",
            PREFIXES.len()
        )));
    }
    let rules = [
        ReorderRule::Identity,
        ReorderRule::SwapAdjacentPairs,
        ReorderRule::ReverseWindows(3),
    ];
    Ok(langs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            SyntheticLangSpec::new(
                l.clone(),
                PREFIXES[i],
                rules[i % rules.len()],
                stream_id("lexicon-seed", seed ^ i as u64),
            )
        })
        .collect())
}

/// Exact translation between the synthetic languages.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    specs: Vec<SyntheticLangSpec>,
    lexicons: Vec<Vec<String>>,
    index: HashMap<String, (usize, u32)>,
}

impl GroundTruth {
    pub fn new(specs: Vec<SyntheticLangSpec>) -> Result<Self> {
        if specs.len() < 2 {
            return Err(Error::Config(
                "at least two synthetic languages are required".into(),
            ));
        }
        let mut codes = HashSet::new();
        for (i, s) in specs.iter().enumerate() {
            if s.concept_vocab_size == 0 {
                return Err(Error::Config(format!(
                    "{}: empty concept vocabulary",
                    s.code
                )));
            }
            if s.surface_prefix.is_empty()
                || !s.surface_prefix.chars().all(|c| c.is_ascii_lowercase())
            {
                return Err(Error::Config(format!(
                    "{}: prefix must be lowercase ascii letters",
                    s.code
                )));
            }
            if !codes.insert(&s.code) {
                return Err(Error::Config(format!("duplicate language {}", s.code)));
            }
            for t in &specs[..i] {
                if t.surface_prefix.starts_with(&s.surface_prefix)
                    || s.surface_prefix.starts_with(&t.surface_prefix)
                {
                    return Err(Error::Config(format!(
                        "prefixes {:?} and {:?} are not prefix-free",
                        t.surface_prefix, s.surface_prefix
                    )));
                }
            }
        }
        let lexicons: Vec<Vec<String>> = specs.iter().map(SyntheticLangSpec::lexicon).collect();
        let mut index = HashMap::new();
        for (li, lex) in lexicons.iter().enumerate() {
            for (c, w) in lex.iter().enumerate() {
                index.insert(w.clone(), (li, c as u32));
            }
        }
        Ok(GroundTruth {
            specs,
            lexicons,
            index,
        })
    }

    pub fn specs(&self) -> &[SyntheticLangSpec] {
        &self.specs
    }

    pub fn languages(&self) -> Vec<LangTag> {
        self.specs.iter().map(|s| s.code.clone()).collect()
    }

    fn lang_index(&self, lang: &LangTag) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| &s.code == lang)
            .ok_or_else(|| Error::Config(format!("{lang} is not a synthetic language")))
    }

    pub fn render(&self, lang: &LangTag, concepts: &[u32]) -> Result<String> {
        let li = self.lang_index(lang)?;
        let lex = &self.lexicons[li];
        let words = concepts
            .iter()
            .map(|&c| lex.get(c as usize).map(String::as_str))
            .collect::<Option<Vec<&str>>>()
            .ok_or_else(|| Error::Config(format!("concept outside the {lang} vocabulary")))?;
        Ok(self.specs[li].reorder_rule.apply(&words).join(" "))
    }

    /// Concept sequence of a well-formed sentence of `lang`.
    pub fn parse(&self, lang: &LangTag, text: &str) -> Option<Vec<u32>> {
        let li = self.lang_index(lang).ok()?;
        let surface = text
            .split_whitespace()
            .map(|w| match self.index.get(w) {
                Some(&(l, c)) if l == li => Some(c),
                _ => None,
            })
            .collect::<Option<Vec<u32>>>()?;
        Some(self.specs[li].reorder_rule.apply(&surface))
    }

    pub fn translate(&self, text: &str, from: &LangTag, to: &LangTag) -> Option<String> {
        self.render(to, &self.parse(from, text)?).ok()
    }

    /// Language whose prefix the token carries.
    pub fn language_of_token(&self, token: &str) -> Option<&LangTag> {
        self.specs
            .iter()
            .find(|s| token.starts_with(&s.surface_prefix))
            .map(|s| &s.code)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.specs)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::new(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tagmt_tensor::checkpoint::write_atomic(path, self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Fraction of outputs not in `expected`: an output is on target when more
/// than half of its tokens carry the expected prefix.
pub fn off_target_rate(
    outputs: &[impl AsRef<str>],
    expected: &LangTag,
    truth: &GroundTruth,
) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let off = outputs
        .iter()
        .filter(|o| {
            let toks: Vec<&str> = o.as_ref().split_whitespace().collect();
            let hits = toks
                .iter()
                .filter(|t| truth.language_of_token(t) == Some(expected))
                .count();
            2 * hits <= toks.len()
        })
        .count();
    off as f64 / outputs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Training pairs per direction for regular languages.
    pub n_parallel_per_direction: usize,
    pub n_dev_per_direction: usize,
    pub n_test_per_direction: usize,
    pub n_mono_per_lang: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Language whose directions get `1/low_resource_divisor` of the
    /// training pairs.
    pub low_resource: Option<LangTag>,
    pub low_resource_divisor: usize,
    /// Concept ranks follow a Zipf law with this exponent; 0 is uniform.
    pub zipf_exponent: f64,
    /// Concept-level bigram grammar shared by all languages: each concept
    /// may be followed by this many Zipf-drawn successors. 0 draws every
    /// concept independently.
    pub successors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_parallel_per_direction: 1000,
            n_dev_per_direction: 40,
            n_test_per_direction: 100,
            n_mono_per_lang: 1000,
            min_len: 3,
            max_len: 8,
            low_resource: None,
            low_resource_divisor: 20,
            zipf_exponent: 1.0,
            successors: 4,
            seed: 13,
        }
    }
}

impl SynthConfig {
    pub fn train_pairs(&self, d: &Direction) -> usize {
        match &self.low_resource {
            Some(l) if &d.src == l || &d.tgt == l => {
                (self.n_parallel_per_direction / self.low_resource_divisor.max(1)).max(1)
            }
            _ => self.n_parallel_per_direction,
        }
    }
}

/// Parallel data for every ordered pair of languages (train, dev and test
/// splits), monolingual training data per language, and the ground truth.
/// Sentence lengths are uniform over the range; the first concept is
/// Zipf-distributed and each next one a uniform pick among the current
/// concept's successors.
pub fn gen_synthetic(
    specs: &[SyntheticLangSpec],
    config: &SynthConfig,
) -> Result<(ParallelStore, MonoStore, GroundTruth)> {
    if config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::Config(format!(
            "bad sentence length range {}..={}",
            config.min_len, config.max_len
        )));
    }
    let truth = GroundTruth::new(specs.to_vec())?;
    if let Some(l) = &config.low_resource {
        truth.lang_index(l)?;
    }
    let vocab = specs
        .iter()
        .map(|s| s.concept_vocab_size)
        .min()
        .unwrap_or(0);
    if config.zipf_exponent.is_nan() || config.zipf_exponent < 0.0 {
        return Err(Error::Config(format!(
            "zipf exponent {} is negative",
            config.zipf_exponent
        )));
    }
    let zipf =
        Zipf::new(vocab as f64, config.zipf_exponent).map_err(|e| Error::Config(e.to_string()))?;
    let draw = |rng: &mut tagmt_tensor::rng::StreamRng| {
        (zipf.sample(rng) as u32 - 1).min(vocab as u32 - 1)
    };
    let mut grammar_rng = rng_fork(config.seed, stream_id("synth-grammar", 0));
    let next: Vec<Vec<u32>> = (0..vocab)
        .map(|_| {
            (0..config.successors)
                .map(|_| draw(&mut grammar_rng))
                .collect()
        })
        .collect();
    let sample = |rng: &mut tagmt_tensor::rng::StreamRng| -> Vec<u32> {
        let n = rng.random_range(config.min_len..=config.max_len);
        let mut out = vec![draw(rng)];
        while out.len() < n {
            let succ = &next[*out.last().expect("non-empty") as usize];
            out.push(if succ.is_empty() {
                draw(rng)
            } else {
                succ[rng.random_range(0..succ.len())]
            });
        }
        out
    };
    let mut parallel = ParallelStore::new();
    for (di, a) in specs.iter().enumerate() {
        for b in specs {
            if a.code == b.code {
                continue;
            }
            let dir = Direction::new(a.code.clone(), b.code.clone())?;
            let mut rng = rng_fork(config.seed, stream_id(&format!("synth:{dir}"), di as u64));
            let counts = [
                (Split::Train, config.train_pairs(&dir)),
                (Split::Dev, config.n_dev_per_direction),
                (Split::Test, config.n_test_per_direction),
            ];
            for (split, n) in counts {
                for _ in 0..n {
                    let c = sample(&mut rng);
                    parallel.push(ParallelPair {
                        direction: dir.clone(),
                        src_text: truth.render(&a.code, &c)?,
                        tgt_text: truth.render(&b.code, &c)?,
                        domain: "synthetic".into(),
                        split,
                    });
                }
            }
        }
    }
    let mut mono = MonoStore::new();
    for (li, s) in specs.iter().enumerate() {
        let mut rng = rng_fork(config.seed, stream_id("synth-mono", li as u64));
        for _ in 0..config.n_mono_per_lang {
            let c = sample(&mut rng);
            mono.push(
                s.code.clone(),
                MonoSentence {
                    text: truth.render(&s.code, &c)?,
                    split: Split::Train,
                },
            );
        }
    }
    Ok((parallel, mono, truth))
}
