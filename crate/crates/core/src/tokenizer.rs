//! Byte-level BPE shared by the model and by subword-level metrics.
//!
//! Id layout: `<pad>`, `<eos>`, `<unk>`, one `<code>` per language, the
//! 256 single bytes, then one id per merge in merge order.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::LangTag;
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

const PAD_SURFACE: &str = "<pad>";
const EOS_SURFACE: &str = "<eos>";
const UNK_SURFACE: &str = "<unk>";
const UNK_RENDER: &str = "⁇";
const SPACE_MARK: &str = "▁";
const HEADER: &str = "tagmt-bpe v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordModel {
    specials: Vec<String>,
    /// Byte strings of ids `specials.len()..`.
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    special_ids: HashMap<String, u32>,
}

/// Trims and NFC-normalizes text before encoding.
pub fn normalize(s: &str) -> String {
    s.nfc().collect::<String>().trim().to_string()
}

/// Splits before every space: `"ab cd"` → `["ab", " cd"]`.
fn chunks(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < text.len() {
            i += 1;
            if i == text.len() || text[i] == b' ' {
                let c = &text[start..i];
                start = i;
                return Some(c);
            }
        }
        None
    })
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

fn special_surfaces(langs: &[LangTag]) -> Result<Vec<String>> {
    let mut out = vec![
        PAD_SURFACE.to_string(),
        EOS_SURFACE.to_string(),
        UNK_SURFACE.to_string(),
    ];
    let mut seen = BTreeSet::new();
    for l in langs {
        if !seen.insert(l.clone()) {
            return Err(Error::Tokenizer(format!("language {l} listed twice")));
        }
        out.push(l.token());
    }
    Ok(out)
}

struct Word {
    syms: Vec<u32>,
    freq: i64,
}

fn pairs_of(syms: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    syms.windows(2).map(|w| (w[0], w[1]))
}

fn merge_in_place(syms: &mut Vec<u32>, pair: (u32, u32), new: u32) {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

type HeapEntry = (i64, Reverse<(Vec<u8>, Vec<u8>)>, (u32, u32));

/// Learns merges from `texts` until `vocab_size` pieces exist or no pair
/// occurs twice. Leading language tags in the texts are not learned from.
pub fn train_subword<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
    langs: &[LangTag],
) -> Result<SubwordModel> {
    let specials = special_surfaces(langs)?;
    let base = specials.len() + 256;
    if vocab_size <= base {
        return Err(Error::Tokenizer(format!(
            "vocab_size {vocab_size} must exceed {} specials + 256 bytes",
            specials.len()
        )));
    }
    let mut model = SubwordModel::from_parts(specials, Vec::new())?;

    let mut freq: HashMap<Vec<u8>, i64> = HashMap::new();
    let mut any = false;
    for t in texts {
        let norm = normalize(t);
        let body = model.strip_tags(&norm).1;
        if body.is_empty() {
            continue;
        }
        any = true;
        for c in chunks(body.as_bytes()) {
            *freq.entry(c.to_vec()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Tokenizer("training corpus is empty".into()));
    }
    // sorted so that word indices (and hence everything below) are reproducible
    let mut types: Vec<(Vec<u8>, i64)> = freq.into_iter().collect();
    types.sort();
    let byte0 = model.specials.len() as u32;
    let mut words: Vec<Word> = types
        .into_iter()
        .map(|(b, f)| Word {
            syms: b.iter().map(|&x| byte0 + x as u32).collect(),
            freq: f,
        })
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in pairs_of(&w.syms) {
            *counts.entry(p).or_default() += w.freq;
            where_.entry(p).or_default().insert(wi);
        }
    }
    let key = |m: &SubwordModel, p: (u32, u32)| -> (Vec<u8>, Vec<u8>) {
        (m.bytes_of(p.0).to_vec(), m.bytes_of(p.1).to_vec())
    };
    let mut heap: BinaryHeap<HeapEntry> = counts
        .iter()
        .map(|(&p, &c)| (c, Reverse(key(&model, p)), p))
        .collect();
    let surfaces: Vec<Vec<u8>> = model
        .specials
        .iter()
        .map(|s| s.as_bytes().to_vec())
        .collect();
    let mut banned: HashSet<(u32, u32)> = HashSet::new();

    while model.vocab_size() < vocab_size {
        let Some((c, Reverse((l, r)), pair)) = heap.pop() else {
            break;
        };
        let cur = counts.get(&pair).copied().unwrap_or(0);
        if cur != c || banned.contains(&pair) {
            if cur > 0 && !banned.contains(&pair) {
                heap.push((cur, Reverse((l, r)), pair));
            }
            continue;
        }
        if c < 2 {
            break;
        }
        let mut merged = l;
        merged.extend_from_slice(&r);
        if surfaces.iter().any(|s| contains(&merged, s)) {
            banned.insert(pair);
            continue;
        }
        let new_id = model.push_merge(pair, merged);
        let affected = where_.remove(&pair).unwrap_or_default();
        let mut touched: BTreeSet<(u32, u32)> = BTreeSet::new();
        for wi in affected {
            let w = &mut words[wi];
            if !pairs_of(&w.syms).any(|p| p == pair) {
                continue;
            }
            for p in pairs_of(&w.syms) {
                *counts.get_mut(&p).expect("counted pair") -= w.freq;
                touched.insert(p);
            }
            merge_in_place(&mut w.syms, pair, new_id);
            for p in pairs_of(&w.syms) {
                *counts.entry(p).or_default() += w.freq;
                where_.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        counts.remove(&pair);
        for p in touched {
            if p == pair || banned.contains(&p) {
                continue;
            }
            match counts.get(&p).copied() {
                Some(c) if c > 0 => heap.push((c, Reverse(key(&model, p)), p)),
                Some(_) => {
                    counts.remove(&p);
                }
                None => {}
            }
        }
    }
    Ok(model)
}

impl SubwordModel {
    fn from_parts(specials: Vec<String>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let special_ids = specials
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let mut m = SubwordModel {
            pieces: (0..=255u8).map(|b| vec![b]).collect(),
            specials,
            merges: Vec::new(),
            ranks: HashMap::new(),
            special_ids,
        };
        let byte0 = m.specials.len() as u32;
        for (a, b) in merges {
            let next = m.vocab_size() as u32;
            if a < byte0 || b < byte0 || a >= next || b >= next {
                return Err(Error::Tokenizer(format!(
                    "merge ({a}, {b}) refers to an unknown piece"
                )));
            }
            let mut bytes = m.bytes_of(a).to_vec();
            bytes.extend_from_slice(m.bytes_of(b));
            m.push_merge((a, b), bytes);
        }
        Ok(m)
    }

    fn push_merge(&mut self, pair: (u32, u32), bytes: Vec<u8>) -> u32 {
        let id = self.vocab_size() as u32;
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        self.pieces.push(bytes);
        id
    }

    fn bytes_of(&self, id: u32) -> &[u8] {
        &self.pieces[id as usize - self.specials.len()]
    }

    pub fn vocab_size(&self) -> usize {
        self.specials.len() + self.pieces.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special_tokens(&self) -> &[String] {
        &self.specials
    }

    /// Languages with a tag token, in id order.
    pub fn languages(&self) -> Vec<LangTag> {
        self.specials[3..]
            .iter()
            .map(|s| LangTag::new(&s[1..s.len() - 1]).expect("registered tag"))
            .collect()
    }

    pub fn lang_id(&self, lang: &LangTag) -> Option<u32> {
        self.special_ids.get(&lang.token()).copied()
    }

    /// The language whose tag token has this id, if any.
    pub fn lang_of(&self, id: u32) -> Option<LangTag> {
        let i = id as usize;
        (3..self.specials.len()).contains(&i).then(|| {
            LangTag::new(&self.specials[i][1..self.specials[i].len() - 1]).expect("registered tag")
        })
    }

    /// Id of a special surface such as `<eng>` or of a single piece string
    /// as rendered by [`SubwordModel::piece`].
    pub fn id_of(&self, piece: &str) -> Option<u32> {
        if let Some(&id) = self.special_ids.get(piece) {
            return Some(id);
        }
        (self.specials.len()..self.vocab_size())
            .map(|i| i as u32)
            .find(|&i| self.piece(i).ok().as_deref() == Some(piece))
    }

    /// Splits leading language tags off `text`. The single space after a
    /// tag belongs to the tag.
    fn strip_tags<'t>(&self, mut text: &'t str) -> (Vec<u32>, &'t str) {
        let mut tags = Vec::new();
        while text.starts_with('<') {
            let Some(end) = text.find('>') else { break };
            match self.special_ids.get(&text[..=end]) {
                Some(&id) if id > UNK => {
                    tags.push(id);
                    text = &text[end + 1..];
                    text = text.strip_prefix(' ').unwrap_or(text);
                }
                _ => break,
            }
        }
        (tags, text)
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let byte0 = self.specials.len() as u32;
        let mut syms: Vec<u32> = chunk.iter().map(|&b| byte0 + b as u32).collect();
        loop {
            let best = pairs_of(&syms)
                .filter_map(|p| self.ranks.get(&p).map(|&r| (r, p)))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_in_place(&mut syms, pair, byte0 + 256 + rank);
        }
        out.extend(syms);
    }

    fn encode_body(&self, text: &str) -> Vec<u32> {
        let norm = normalize(text);
        let (mut ids, body) = self.strip_tags(&norm);
        for c in chunks(body.as_bytes()) {
            self.encode_chunk(c, &mut ids);
        }
        ids
    }

    /// Token ids followed by `<eos>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode_body(text);
        ids.push(EOS);
        ids
    }

    /// Display strings of the pieces of `text`, without `<eos>`.
    pub fn encode_pieces(&self, text: &str) -> Vec<String> {
        self.encode_body(text)
            .into_iter()
            .map(|id| self.piece(id).expect("encoder emits valid ids"))
            .collect()
    }

    /// Display string of one id: specials verbatim, spaces as `▁`, and
    /// pieces that are not valid UTF-8 as `<0xNN>` per byte.
    pub fn piece(&self, id: u32) -> Result<String> {
        let i = id as usize;
        if i >= self.vocab_size() {
            return Err(Error::Tokenizer(format!(
                "id {id} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        if i < self.specials.len() {
            return Ok(self.specials[i].clone());
        }
        let bytes = self.bytes_of(id);
        Ok(match std::str::from_utf8(bytes) {
            Ok(s) => s.replace(' ', SPACE_MARK),
            Err(_) => bytes.iter().fold(String::new(), |mut s, b| {
                let _ = write!(s, "<0x{b:02X}>");
                s
            }),
        })
    }

    /// Text of `ids` up to the first `<eos>`. `<pad>` is dropped, `<unk>`
    /// renders as `⁇`, language tags as `<code>` followed by one space.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut buf: Vec<u8> = Vec::new();
        let flush = |buf: &mut Vec<u8>, out: &mut String| {
            out.push_str(&String::from_utf8_lossy(buf));
            buf.clear();
        };
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(Error::Tokenizer(format!(
                    "id {id} out of range for vocabulary of {}",
                    self.vocab_size()
                )));
            }
            match id {
                EOS => break,
                PAD => {}
                UNK => {
                    flush(&mut buf, &mut out);
                    out.push_str(UNK_RENDER);
                }
                _ if (id as usize) < self.specials.len() => {
                    flush(&mut buf, &mut out);
                    if !out.is_empty() && !out.ends_with(' ') {
                        out.push(' ');
                    }
                    out.push_str(&self.specials[id as usize]);
                    out.push(' ');
                }
                _ => buf.extend_from_slice(self.bytes_of(id)),
            }
        }
        flush(&mut buf, &mut out);
        Ok(out.trim_end_matches(' ').to_string())
    }

    /// Serialized text form; loading it back reproduces it byte for byte.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER}\nvocab_size {}\nspecials {}\n",
            self.vocab_size(),
            self.specials.len()
        );
        for sp in &self.specials {
            let _ = writeln!(s, "{sp}");
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        let _ = writeln!(s, "pieces {}", self.pieces.len());
        for (i, p) in self.pieces.iter().enumerate() {
            let _ = writeln!(s, "{} {}", i + self.specials.len(), hex::encode(p));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Tokenizer(format!("malformed model file: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("header"));
        }
        let mut field = |name: &str| -> Result<usize> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(name))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(name))
        };
        let vocab_size = field("vocab_size ")?;
        let n_special = field("specials ")?;
        let mut lines = text.lines().skip(3);
        let specials: Vec<String> = lines.by_ref().take(n_special).map(str::to_string).collect();
        if specials.len() != n_special
            || specials.get(..3)
                != Some(&[PAD_SURFACE.into(), EOS_SURFACE.into(), UNK_SURFACE.into()][..])
        {
            return Err(bad("special tokens"));
        }
        let n_merges: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("merges"))?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let l = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (a, b) = l.split_once(' ').ok_or_else(|| bad("merge line"))?;
            merges.push((
                a.parse().map_err(|_| bad("merge id"))?,
                b.parse().map_err(|_| bad("merge id"))?,
            ));
        }
        let model = SubwordModel::from_parts(specials, merges)?;
        let n_pieces: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("pieces "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("pieces"))?;
        if n_pieces != model.pieces.len() || vocab_size != model.vocab_size() {
            return Err(bad("vocabulary size disagrees with merges"));
        }
        for (i, p) in model.pieces.iter().enumerate() {
            let want = format!("{} {}", i + model.specials.len(), hex::encode(p));
            if lines.next() != Some(want.as_str()) {
                return Err(bad("piece table disagrees with merges"));
            }
        }
        for (l, _) in model.specials[3..].iter().zip(0..) {
            LangTag::new(l.trim_start_matches('<').trim_end_matches('>'))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tagmt_tensor::checkpoint::write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// sha256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
