//! Parallel and monolingual corpora: loading, cleaning, splitting and
//! per-direction counts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tagmt_tensor::rng::{rng_fork, stream_id};
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

/// Three-character lowercase language code such as `ibo` or `sy1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangTag(String);

impl LangTag {
    pub fn new(code: &str) -> Result<Self> {
        let ok = code.len() == 3
            && code.starts_with(|c: char| c.is_ascii_lowercase())
            && code
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit());
        if !ok {
            return Err(Error::Config(format!(
                "language code {code:?} must be three lowercase ASCII letters or digits"
            )));
        }
        Ok(LangTag(code.to_string()))
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    /// Surface form used in model input, e.g. `<eng>`.
    pub fn token(&self) -> String {
        format!("<{}>", self.0)
    }
}

impl fmt::Display for LangTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LangTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LangTag::new(s.trim())
    }
}

impl TryFrom<String> for LangTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LangTag::new(&s)
    }
}

impl From<LangTag> for String {
    fn from(t: LangTag) -> String {
        t.0
    }
}

/// Parses a comma-separated language list.
pub fn parse_langs(s: &str) -> Result<Vec<LangTag>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// An ordered translation pair `src → tgt`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub src: LangTag,
    pub tgt: LangTag,
}

impl Direction {
    pub fn new(src: LangTag, tgt: LangTag) -> Result<Self> {
        if src == tgt {
            return Err(Error::Config(format!(
                "direction {src}-{tgt} has src = tgt"
            )));
        }
        Ok(Direction { src, tgt })
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = Error;
    /// Accepts `src-tgt` (also `src>tgt` and `src→tgt`).
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .or_else(|| s.split_once('>'))
            .or_else(|| s.split_once('→'))
            .ok_or_else(|| Error::Config(format!("direction {s:?} is not of the form src-tgt")))?;
        Direction::new(a.parse()?, b.parse()?)
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub direction: Direction,
    pub src_text: String,
    pub tgt_text: String,
    pub domain: String,
    #[serde(default)]
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoSentence {
    pub text: String,
    #[serde(default)]
    pub split: Split,
}

/// Sentence pairs grouped by direction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelStore {
    groups: BTreeMap<Direction, Vec<ParallelPair>>,
}

impl ParallelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pair: ParallelPair) {
        self.groups
            .entry(pair.direction.clone())
            .or_default()
            .push(pair);
    }

    pub fn extend(&mut self, other: ParallelStore) {
        for pair in other.into_pairs() {
            self.push(pair);
        }
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn directions(&self) -> impl Iterator<Item = &Direction> {
        self.groups.keys()
    }

    pub fn direction(&self, d: &Direction) -> &[ParallelPair] {
        self.groups.get(d).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pairs(&self) -> impl Iterator<Item = &ParallelPair> {
        self.groups.values().flatten()
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &ParallelPair> {
        self.pairs().filter(move |p| p.split == split)
    }

    pub fn into_pairs(self) -> impl Iterator<Item = ParallelPair> {
        self.groups.into_values().flatten()
    }

    pub fn count(&self, d: &Direction, split: Option<Split>) -> usize {
        self.direction(d)
            .iter()
            .filter(|p| split.is_none_or(|s| p.split == s))
            .count()
    }

    /// Languages appearing on either side, sorted.
    pub fn languages(&self) -> Vec<LangTag> {
        let set: BTreeSet<LangTag> = self
            .groups
            .keys()
            .flat_map(|d| [d.src.clone(), d.tgt.clone()])
            .collect();
        set.into_iter().collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, self.pairs())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut store = ParallelStore::new();
        for pair in read_jsonl::<ParallelPair>(path)? {
            store.push(pair);
        }
        Ok(store)
    }
}

impl FromIterator<ParallelPair> for ParallelStore {
    fn from_iter<I: IntoIterator<Item = ParallelPair>>(iter: I) -> Self {
        let mut s = ParallelStore::new();
        for p in iter {
            s.push(p);
        }
        s
    }
}

/// Monolingual sentences grouped by language.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MonoStore {
    groups: BTreeMap<LangTag, Vec<MonoSentence>>,
}

#[derive(Serialize, Deserialize)]
struct MonoRecord {
    lang: LangTag,
    text: String,
    #[serde(default)]
    split: Split,
}

impl MonoStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, lang: LangTag, sentence: MonoSentence) {
        self.groups.entry(lang).or_default().push(sentence);
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn languages(&self) -> impl Iterator<Item = &LangTag> {
        self.groups.keys()
    }

    pub fn sentences(&self, lang: &LangTag) -> &[MonoSentence] {
        self.groups.get(lang).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Training-split texts of one language.
    pub fn train_texts(&self, lang: &LangTag) -> Vec<&str> {
        self.sentences(lang)
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.text.as_str())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LangTag, &MonoSentence)> {
        self.groups
            .iter()
            .flat_map(|(l, v)| v.iter().map(move |s| (l, s)))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let records = self.iter().map(|(l, s)| MonoRecord {
            lang: l.clone(),
            text: s.text.clone(),
            split: s.split,
        });
        write_jsonl(path, records)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut store = MonoStore::new();
        for r in read_jsonl::<MonoRecord>(path)? {
            store.push(
                r.lang,
                MonoSentence {
                    text: r.text,
                    split: r.split,
                },
            );
        }
        Ok(store)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParallelFormat {
    /// `src TAB tgt`, exactly one tab per line.
    Tsv2,
    /// One JSON object per line with `src`, `tgt` and optional `domain`.
    Jsonl,
}

impl FromStr for ParallelFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv2" | "tsv" => Ok(ParallelFormat::Tsv2),
            "jsonl" => Ok(ParallelFormat::Jsonl),
            _ => Err(Error::Config(format!("unknown parallel format {s:?}"))),
        }
    }
}

/// Line accounting from a load.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub loaded: usize,
    pub malformed: usize,
}

#[derive(Deserialize)]
struct JsonPair {
    src: Option<String>,
    tgt: Option<String>,
    domain: Option<String>,
}

/// Reads one parallel file. Malformed lines are counted, not fatal; lines
/// that are not valid UTF-8 count as malformed.
pub fn load_parallel(
    path: &Path,
    direction: &Direction,
    format: ParallelFormat,
) -> Result<(ParallelStore, LoadReport)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let default_domain = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into());
    let mut store = ParallelStore::new();
    let mut report = LoadReport::default();
    for raw in BufReader::new(file).split(b'\n') {
        let raw = raw.map_err(|e| Error::io(path, e))?;
        report.lines += 1;
        let Ok(line) = String::from_utf8(raw) else {
            report.malformed += 1;
            continue;
        };
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() && format == ParallelFormat::Jsonl {
            report.lines -= 1;
            continue;
        }
        let parsed = match format {
            ParallelFormat::Tsv2 => {
                let fields: Vec<&str> = line.split('\t').collect();
                (fields.len() == 2).then(|| {
                    (
                        fields[0].to_string(),
                        fields[1].to_string(),
                        default_domain.clone(),
                    )
                })
            }
            ParallelFormat::Jsonl => serde_json::from_str::<JsonPair>(line).ok().and_then(|j| {
                Some((
                    j.src?,
                    j.tgt?,
                    j.domain.unwrap_or_else(|| default_domain.clone()),
                ))
            }),
        };
        match parsed {
            Some((src, tgt, domain)) if !src.trim().is_empty() && !tgt.trim().is_empty() => {
                store.push(ParallelPair {
                    direction: direction.clone(),
                    src_text: src,
                    tgt_text: tgt,
                    domain,
                    split: Split::Train,
                });
                report.loaded += 1;
            }
            _ => report.malformed += 1,
        }
    }
    if report.loaded == 0 {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok((store, report))
}

/// Reads a monolingual file, one sentence per line. Blank and non-UTF-8
/// lines are counted as malformed.
pub fn load_mono(path: &Path, lang: &LangTag) -> Result<(MonoStore, LoadReport)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut store = MonoStore::new();
    let mut report = LoadReport::default();
    for raw in BufReader::new(file).split(b'\n') {
        let raw = raw.map_err(|e| Error::io(path, e))?;
        report.lines += 1;
        match String::from_utf8(raw) {
            Ok(line) if !line.trim().is_empty() => {
                store.push(
                    lang.clone(),
                    MonoSentence {
                        text: line.trim_end_matches('\r').to_string(),
                        split: Split::Train,
                    },
                );
                report.loaded += 1;
            }
            _ => report.malformed += 1,
        }
    }
    if report.loaded == 0 {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok((store, report))
}

/// NFC normalization, trimming and collapsing of internal whitespace.
/// Diacritics are kept.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub max_len: usize,
    pub min_len: usize,
    pub dedup: bool,
    /// Alignment-confidence threshold of the upstream source filter.
    /// Recorded in reports only; never applied here.
    pub opus_confidence_threshold: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            max_len: 50,
            min_len: 2,
            dedup: true,
            opus_confidence_threshold: 1.5,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "cleaning bounds need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    fn verdict(&self, text: &str) -> Option<DropReason> {
        let n = token_count(text);
        if n > self.max_len {
            Some(DropReason::TooLong)
        } else if n < self.min_len {
            Some(DropReason::TooShort)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DropReason {
    TooLong,
    TooShort,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DropCounts {
    pub input: usize,
    pub kept: usize,
    pub too_long: usize,
    pub too_short: usize,
    pub duplicate: usize,
}

impl DropCounts {
    fn add(&mut self, o: &DropCounts) {
        self.input += o.input;
        self.kept += o.kept;
        self.too_long += o.too_long;
        self.too_short += o.too_short;
        self.duplicate += o.duplicate;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CleanReport {
    pub by_direction: BTreeMap<String, DropCounts>,
    pub total: DropCounts,
    pub max_len: usize,
    pub min_len: usize,
    pub opus_confidence_threshold: f64,
}

impl CleanReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "direction",
            "input",
            "kept",
            "too_long",
            "too_short",
            "duplicate",
        ])?;
        let rows = self
            .by_direction
            .iter()
            .map(|(d, c)| (d.as_str(), c))
            .chain(std::iter::once(("total", &self.total)));
        for (d, c) in rows {
            w.write_record([
                d.to_string(),
                c.input.to_string(),
                c.kept.to_string(),
                c.too_long.to_string(),
                c.too_short.to_string(),
                c.duplicate.to_string(),
            ])?;
        }
        csv_string(w)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "cleaning: tokens in [{}, {}], opus threshold {} (metadata only)\n",
            self.min_len, self.max_len, self.opus_confidence_threshold
        );
        s.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "direction", "input", "kept", "too_long", "too_short", "duplicate"
        ));
        let rows = self
            .by_direction
            .iter()
            .map(|(d, c)| (d.as_str(), c))
            .chain(std::iter::once(("total", &self.total)));
        for (d, c) in rows {
            s.push_str(&format!(
                "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
                d, c.input, c.kept, c.too_long, c.too_short, c.duplicate
            ));
        }
        s
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Normalizes, length-filters and (optionally) deduplicates every
/// direction. Split labels are preserved.
pub fn clean(
    store: &ParallelStore,
    config: &CleaningConfig,
) -> Result<(ParallelStore, CleanReport)> {
    config.validate()?;
    let mut out = ParallelStore::new();
    let mut report = CleanReport {
        max_len: config.max_len,
        min_len: config.min_len,
        opus_confidence_threshold: config.opus_confidence_threshold,
        ..Default::default()
    };
    for (dir, pairs) in &store.groups {
        let mut counts = DropCounts::default();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for p in pairs {
            counts.input += 1;
            let src = normalize_text(&p.src_text);
            let tgt = normalize_text(&p.tgt_text);
            let verdict = config.verdict(&src).or_else(|| config.verdict(&tgt));
            match verdict {
                Some(DropReason::TooLong) => counts.too_long += 1,
                Some(DropReason::TooShort) => counts.too_short += 1,
                None => {
                    if config.dedup && !seen.insert((src.clone(), tgt.clone())) {
                        counts.duplicate += 1;
                        continue;
                    }
                    counts.kept += 1;
                    out.push(ParallelPair {
                        src_text: src,
                        tgt_text: tgt,
                        ..p.clone()
                    });
                }
            }
        }
        report.total.add(&counts);
        report.by_direction.insert(dir.to_string(), counts);
    }
    Ok((out, report))
}

/// Monolingual counterpart of [`clean`]; the report is keyed by language.
pub fn clean_mono(store: &MonoStore, config: &CleaningConfig) -> Result<(MonoStore, CleanReport)> {
    config.validate()?;
    let mut out = MonoStore::new();
    let mut report = CleanReport {
        max_len: config.max_len,
        min_len: config.min_len,
        opus_confidence_threshold: config.opus_confidence_threshold,
        ..Default::default()
    };
    for (lang, sentences) in &store.groups {
        let mut counts = DropCounts::default();
        let mut seen = HashSet::new();
        for s in sentences {
            counts.input += 1;
            let text = normalize_text(&s.text);
            match config.verdict(&text) {
                Some(DropReason::TooLong) => counts.too_long += 1,
                Some(DropReason::TooShort) => counts.too_short += 1,
                None => {
                    if config.dedup && !seen.insert(text.clone()) {
                        counts.duplicate += 1;
                        continue;
                    }
                    counts.kept += 1;
                    out.push(
                        lang.clone(),
                        MonoSentence {
                            text,
                            split: s.split,
                        },
                    );
                }
            }
        }
        report.total.add(&counts);
        report.by_direction.insert(lang.to_string(), counts);
    }
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dev_per_direction: usize,
    pub test_per_direction: usize,
    pub seed: u64,
    pub stratify_by_domain: bool,
}

impl SplitSpec {
    pub fn new(dev: usize, test: usize, seed: u64) -> Self {
        SplitSpec {
            dev_per_direction: dev,
            test_per_direction: test,
            seed,
            stratify_by_domain: true,
        }
    }
}

/// Relabels every record as train, dev or test. Held-out records are drawn
/// per direction and, when stratifying, equally (±1) from each domain.
pub fn split(store: &ParallelStore, spec: &SplitSpec) -> Result<ParallelStore> {
    let held = spec.dev_per_direction + spec.test_per_direction;
    for (dir, pairs) in &store.groups {
        if held >= pairs.len() {
            return Err(Error::InsufficientPairs {
                direction: dir.to_string(),
                needed: held,
                available: pairs.len(),
            });
        }
    }
    let mut out = ParallelStore::new();
    for (dir, pairs) in &store.groups {
        let mut rng = rng_fork(spec.seed, stream_id(&format!("split:{dir}"), 0));
        let mut labels = vec![Split::Train; pairs.len()];
        let groups: Vec<Vec<usize>> = if spec.stratify_by_domain {
            let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, p) in pairs.iter().enumerate() {
                by_domain.entry(p.domain.as_str()).or_default().push(i);
            }
            by_domain.into_values().collect()
        } else {
            vec![(0..pairs.len()).collect()]
        };
        let mut pools: Vec<Vec<usize>> = groups
            .into_iter()
            .map(|mut g| {
                g.shuffle(&mut rng);
                g
            })
            .collect();
        for (label, n) in [
            (Split::Test, spec.test_per_direction),
            (Split::Dev, spec.dev_per_direction),
        ] {
            for idx in draw_balanced(&mut pools, n, &mut rng) {
                labels[idx] = label;
            }
        }
        for (p, label) in pairs.iter().zip(labels) {
            out.push(ParallelPair {
                split: label,
                ..p.clone()
            });
        }
    }
    Ok(out)
}

/// Takes `n` items from the front of the pools, as evenly as the pool sizes
/// allow; which pools receive the remainder is random.
fn draw_balanced(pools: &mut [Vec<usize>], n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pools.len()).collect();
    order.shuffle(rng);
    let mut quota = vec![0usize; pools.len()];
    let mut remaining = n;
    // round-robin so that quotas differ by at most one among non-exhausted pools
    while remaining > 0 {
        let mut progressed = false;
        for &g in &order {
            if remaining == 0 {
                break;
            }
            if quota[g] < pools[g].len() {
                quota[g] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut taken = Vec::with_capacity(n);
    for (g, q) in quota.into_iter().enumerate() {
        taken.extend(pools[g].drain(..q));
    }
    taken
}

/// Square table of pair counts, rows = source, columns = target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DirectionCountTable {
    pub langs: Vec<LangTag>,
    pub counts: BTreeMap<(LangTag, LangTag), usize>,
}

impl DirectionCountTable {
    pub fn get(&self, src: &LangTag, tgt: &LangTag) -> usize {
        self.counts
            .get(&(src.clone(), tgt.clone()))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn to_text(&self) -> String {
        let width = self
            .counts
            .values()
            .map(|c| c.to_string().len())
            .max()
            .unwrap_or(1)
            .max(3);
        let mut s = format!("{:<5}", "");
        for l in &self.langs {
            s.push_str(&format!(" {:>width$}", l.code()));
        }
        s.push('\n');
        for a in &self.langs {
            s.push_str(&format!("{:<5}", a.code()));
            for b in &self.langs {
                if a == b {
                    s.push_str(&format!(" {:>width$}", "-"));
                } else {
                    s.push_str(&format!(" {:>width$}", self.get(a, b)));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["src".to_string()];
        header.extend(self.langs.iter().map(|l| l.code().to_string()));
        w.write_record(&header)?;
        for a in &self.langs {
            let mut row = vec![a.code().to_string()];
            row.extend(self.langs.iter().map(|b| self.get(a, b).to_string()));
            w.write_record(&row)?;
        }
        csv_string(w)
    }
}

/// Per-direction pair counts over all splits.
pub fn stats(store: &ParallelStore) -> DirectionCountTable {
    let langs = store.languages();
    let counts = store
        .groups
        .iter()
        .map(|(d, v)| ((d.src.clone(), d.tgt.clone()), v.len()))
        .collect();
    DirectionCountTable { langs, counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(s: &str) -> Direction {
        s.parse().unwrap()
    }

    fn pair(d: &str, src: &str, tgt: &str, domain: &str) -> ParallelPair {
        ParallelPair {
            direction: dir(d),
            src_text: src.into(),
            tgt_text: tgt.into(),
            domain: domain.into(),
            split: Split::Train,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, content: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn lang_tag_validation() {
        assert!(LangTag::new("eng").is_ok());
        assert!(LangTag::new("sy1").is_ok());
        assert!(LangTag::new("EN").is_err());
        assert!(LangTag::new("1ab").is_err());
        assert_eq!(LangTag::new("fon").unwrap().token(), "<fon>");
        assert!("eng-eng".parse::<Direction>().is_err());
    }

    #[test]
    fn tsv_line_loads_one_pair() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "a.tsv", "bonjour\thello\n".as_bytes());
        let (store, report) = load_parallel(&p, &dir("fra-eng"), ParallelFormat::Tsv2).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(report.malformed, 0);
        let only = store.pairs().next().unwrap();
        assert_eq!(
            (only.src_text.as_str(), only.tgt_text.as_str()),
            ("bonjour", "hello")
        );
    }

    #[test]
    fn tsv_extra_tab_is_malformed() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "a.tsv", "a b\tc d\nx\ty\tz\n".as_bytes());
        let (store, report) = load_parallel(&p, &dir("fra-eng"), ParallelFormat::Tsv2).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(report.malformed, 1);
    }

    #[test]
    fn invalid_utf8_line_is_malformed() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "a.tsv", b"ok one\tok two\n\xff\xfe\tbad\n");
        let (store, report) = load_parallel(&p, &dir("fra-eng"), ParallelFormat::Tsv2).unwrap();
        assert_eq!((store.len(), report.malformed), (1, 1));
    }

    #[test]
    fn jsonl_missing_target_counted() {
        let d = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 0..100 {
            if i == 17 || i == 58 {
                body.push_str(&format!("{{\"src\": \"s {i}\"}}\n"));
            } else {
                body.push_str(&format!(
                    "{{\"src\": \"s {i}\", \"tgt\": \"t {i}\", \"domain\": \"web\"}}\n"
                ));
            }
        }
        let p = write(&d, "a.jsonl", body.as_bytes());
        let (store, report) = load_parallel(&p, &dir("ibo-eng"), ParallelFormat::Jsonl).unwrap();
        assert_eq!(store.len(), 98);
        assert_eq!(report.malformed, 2);
        assert!(store.pairs().all(|p| p.domain == "web"));
    }

    #[test]
    fn empty_and_missing_files() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "a.tsv", b"no tab here\n");
        assert!(matches!(
            load_parallel(&p, &dir("fra-eng"), ParallelFormat::Tsv2),
            Err(Error::EmptyCorpus(_))
        ));
        let missing = d.path().join("nope.tsv");
        assert!(matches!(
            load_parallel(&missing, &dir("fra-eng"), ParallelFormat::Tsv2),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn clean_drops_by_reason() {
        let long = vec!["w"; 51].join(" ");
        let store: ParallelStore = [
            pair("ibo-eng", &long, "a b", "d"),
            pair("ibo-eng", "hi", "yo", "d"),
            pair("ibo-eng", "a  b ", "c d", "d"),
            pair("ibo-eng", "a b", " c d", "d"),
            pair("ibo-eng", "e f", "g h", "d"),
        ]
        .into_iter()
        .collect();
        let (out, report) = clean(&store, &CleaningConfig::default()).unwrap();
        let c = &report.by_direction["ibo-eng"];
        assert_eq!((c.too_long, c.too_short, c.duplicate, c.kept), (1, 1, 1, 2));
        assert_eq!(out.len(), 2);
        assert!(report.to_csv().unwrap().contains("ibo-eng,5,2,1,1,1"));
    }

    #[test]
    fn normalization_keeps_diacritics() {
        // decomposed u + combining dot below composes to ụ
        assert_eq!(normalize_text("  Daalu\u{323}   maka "), "Daalụ maka");
    }

    #[test]
    fn split_counts_and_determinism() {
        let store: ParallelStore = (0..1000)
            .map(|i| pair("fon-fra", &format!("s {i}"), &format!("t {i}"), "d"))
            .collect();
        let spec = SplitSpec::new(30, 30, 5);
        let a = split(&store, &spec).unwrap();
        let b = split(&store, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs_in(Split::Train).count(), 940);
        assert_eq!(a.pairs_in(Split::Dev).count(), 30);
        assert_eq!(a.pairs_in(Split::Test).count(), 30);
    }

    #[test]
    fn split_stratifies_by_domain() {
        let store: ParallelStore = (0..1000)
            .map(|i| {
                pair(
                    "fon-fra",
                    &format!("s {i}"),
                    "t x",
                    if i < 500 { "bible" } else { "news" },
                )
            })
            .collect();
        let out = split(&store, &SplitSpec::new(0, 30, 1)).unwrap();
        let bible = out
            .pairs_in(Split::Test)
            .filter(|p| p.domain == "bible")
            .count();
        assert_eq!(bible, 15);
    }

    #[test]
    fn split_seeds_change_membership() {
        let store: ParallelStore = (0..1000)
            .map(|i| pair("fon-fra", &format!("s {i}"), "t x", "d"))
            .collect();
        let test_set = |seed| -> BTreeSet<String> {
            split(&store, &SplitSpec::new(30, 30, seed))
                .unwrap()
                .pairs_in(Split::Test)
                .map(|p| p.src_text.clone())
                .collect()
        };
        assert_ne!(test_set(1), test_set(2));
    }

    #[test]
    fn split_insufficient_names_direction() {
        let store: ParallelStore = (0..10)
            .map(|i| pair("fon-fra", &format!("s {i}"), "t", "d"))
            .collect();
        let err = split(&store, &SplitSpec::new(5, 5, 0)).unwrap_err();
        assert!(err.to_string().contains("fon-fra"), "{err}");
    }

    #[test]
    fn stats_tables() {
        assert_eq!(stats(&ParallelStore::new()).total(), 0);
        let store: ParallelStore = (0..3)
            .map(|i| pair("fra-eng", &format!("{i} a"), "b c", "d"))
            .collect();
        let t = stats(&store);
        let (fra, eng) = (LangTag::new("fra").unwrap(), LangTag::new("eng").unwrap());
        assert_eq!(t.get(&fra, &eng), 3);
        assert_eq!(t.get(&eng, &fra), 0);
        assert_eq!(t.total(), store.len());
        assert!(t.to_csv().unwrap().starts_with("src,eng,fra\n"));
    }

    #[test]
    fn jsonl_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let store: ParallelStore = [
            pair("ibo-eng", "a b", "c d", "x"),
            pair("eng-ibo", "e f", "g h", "y"),
        ]
        .into_iter()
        .collect();
        let p = d.path().join("p.jsonl");
        store.write_jsonl(&p).unwrap();
        assert_eq!(ParallelStore::read_jsonl(&p).unwrap(), store);
    }
}
