//! Corpus-level BLEU, chrF and TER, their subword-piece variants, and
//! per-direction evaluation reports.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{csv_string, Direction};
use crate::tokenizer::SubwordModel;
use crate::{Error, Result};

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
pub const TER_MAX_SHIFT: usize = 10;

fn check_lengths<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, candidate n-grams, reference n-grams) for one order.
fn overlap<T: Eq + Hash>(hyp: &[T], r: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let rc = ngram_counts(r, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matched,
        hyp.len().saturating_sub(n - 1),
        r.len().saturating_sub(n - 1),
    )
}

/// Corpus BLEU in [0, 100] over pre-tokenized segments.
///
/// Orders with no candidate n-grams are left out of the geometric mean; a
/// present order with no matches is smoothed to `1 / (2^k · total)` where
/// `k` counts such orders so far. No matches at any order scores 0.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let mut correct = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
        let rf: Vec<&str> = rf.iter().map(AsRef::as_ref).collect();
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let (m, t, _) = overlap(&h, &rf, n);
            correct[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if c == 0 || correct.iter().all(|&m| m == 0) {
        return Ok(0.0);
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if total[n] == 0 {
            continue;
        }
        let p = if correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok((100.0 * bp * (log_sum / orders as f64).exp()).min(100.0))
}

fn whitespace_tokens(texts: &[impl AsRef<str>]) -> Vec<Vec<&str>> {
    texts
        .iter()
        .map(|t| t.as_ref().split_whitespace().collect())
        .collect()
}

/// BLEU over whitespace tokens of raw text.
pub fn bleu_text(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<f64> {
    bleu(&whitespace_tokens(hyps), &whitespace_tokens(refs), 4)
}

fn pieces(texts: &[impl AsRef<str>], sp: &SubwordModel) -> Vec<Vec<String>> {
    texts.iter().map(|t| sp.encode_pieces(t.as_ref())).collect()
}

/// BLEU over subword pieces of the shared model.
pub fn spbleu(
    hyps: &[impl AsRef<str>],
    refs: &[impl AsRef<str>],
    sp: &SubwordModel,
) -> Result<f64> {
    bleu(&pieces(hyps, sp), &pieces(refs, sp), 4)
}

/// Corpus chrF in [0, 100]: character n-grams of the text with whitespace
/// removed, precision and recall averaged over orders, then F-beta.
pub fn chrf(
    hyps: &[impl AsRef<str>],
    refs: &[impl AsRef<str>],
    n: usize,
    beta: f64,
) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let mut m = vec![0usize; n];
    let mut h_tot = vec![0usize; n];
    let mut r_tot = vec![0usize; n];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        for k in 1..=n {
            let (mk, hk, rk) = overlap(&h, &r, k);
            m[k - 1] += mk;
            h_tot[k - 1] += hk;
            r_tot[k - 1] += rk;
        }
    }
    let mean = |den: &[usize]| {
        let v: Vec<f64> = (0..n)
            .filter(|&k| den[k] > 0)
            .map(|k| m[k] as f64 / den[k] as f64)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (p, r) = (mean(&h_tot), mean(&r_tot));
    if p + r == 0.0 {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    Ok(100.0 * (1.0 + b2) * p * r / (b2 * p + r))
}

/// chrF over the concatenated piece strings, so the word-boundary marker
/// takes part in the character n-grams.
pub fn spchrf(
    hyps: &[impl AsRef<str>],
    refs: &[impl AsRef<str>],
    sp: &SubwordModel,
) -> Result<f64> {
    let join = |t: &[Vec<String>]| t.iter().map(|p| p.concat()).collect::<Vec<_>>();
    chrf(
        &join(&pieces(hyps, sp)),
        &join(&pieces(refs, sp)),
        CHRF_ORDER,
        CHRF_BETA,
    )
}

fn edit_distance<T: PartialEq>(a: &[T], b: &[T], row: &mut Vec<usize>) -> usize {
    row.clear();
    row.extend(0..=b.len());
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = up;
        }
    }
    row[b.len()]
}

fn contains_run<T: PartialEq>(hay: &[T], needle: &[T]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Edits for one segment: greedy block shifts, then word edit distance.
///
/// Each round tries every phrase of up to [`TER_MAX_SHIFT`] tokens that
/// occurs in the reference, at every destination, and applies the one with
/// the lowest resulting distance (first in (start, length, destination)
/// order on ties) if it beats the current distance by more than the shift
/// cost.
pub fn ter_edits<T: PartialEq + Clone>(hyp: &[T], r: &[T]) -> usize {
    let mut row = Vec::new();
    let mut cur: Vec<T> = hyp.to_vec();
    let mut dist = edit_distance(&cur, r, &mut row);
    let mut shifts = 0;
    let mut cand: Vec<T> = Vec::with_capacity(cur.len());
    loop {
        let mut best: Option<(usize, Vec<T>)> = None;
        let n = cur.len();
        for i in 0..n {
            for len in 1..=TER_MAX_SHIFT.min(n - i) {
                let phrase = &cur[i..i + len];
                if !contains_run(r, phrase) {
                    break;
                }
                for k in 0..=n - len {
                    if k == i {
                        continue;
                    }
                    cand.clear();
                    let rest = cur[..i].iter().chain(&cur[i + len..]);
                    let mut rest = rest.cloned();
                    cand.extend(rest.by_ref().take(k));
                    cand.extend_from_slice(phrase);
                    cand.extend(rest);
                    let d = edit_distance(&cand, r, &mut row);
                    if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, cand.clone()));
                    }
                }
            }
        }
        match best {
            Some((d, s)) if d + 1 < dist => {
                cur = s;
                dist = d;
                shifts += 1;
            }
            _ => return shifts + dist,
        }
    }
}

fn ter_tokens<T: PartialEq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::Metric("empty reference segment".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| ter_edits(h, r)).sum();
    let words: usize = refs.iter().map(Vec::len).sum();
    Ok(100.0 * edits as f64 / words as f64)
}

/// Corpus TER over whitespace tokens: total edits over total reference
/// words, times 100.
pub fn ter(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<f64> {
    ter_tokens(&whitespace_tokens(hyps), &whitespace_tokens(refs))
}

/// TER over subword pieces.
pub fn spter(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>], sp: &SubwordModel) -> Result<f64> {
    ter_tokens(&pieces(hyps, sp), &pieces(refs, sp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeta {
    pub tokenizer_sha256: String,
    pub bleu_smoothing: String,
    pub chrf_order: usize,
    pub chrf_beta: f64,
    pub ter_max_shift: usize,
    pub sp_variants: String,
}

impl MetricMeta {
    pub fn new(sp: &SubwordModel) -> Self {
        MetricMeta {
            tokenizer_sha256: sp.hash(),
            bleu_smoothing: "exp".into(),
            chrf_order: CHRF_ORDER,
            chrf_beta: CHRF_BETA,
            ter_max_shift: TER_MAX_SHIFT,
            sp_variants: "chrF and TER computed on subword pieces of the evaluation tokenizer"
                .into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: String,
    pub test_size: usize,
    pub spbleu: f64,
    pub spchrf: f64,
    pub spter: f64,
    pub bleu: f64,
    pub chrf: f64,
    pub ter: f64,
    pub meta: MetricMeta,
}

/// Scores one direction's hypotheses against references.
pub fn score_direction(
    direction: &Direction,
    hyps: &[impl AsRef<str>],
    refs: &[impl AsRef<str>],
    sp: &SubwordModel,
) -> Result<EvalReport> {
    check_lengths(hyps, refs)?;
    let report = EvalReport {
        direction: direction.to_string(),
        test_size: refs.len(),
        spbleu: spbleu(hyps, refs, sp)?,
        spchrf: spchrf(hyps, refs, sp)?,
        spter: spter(hyps, refs, sp)?,
        bleu: bleu_text(hyps, refs)?,
        chrf: chrf(hyps, refs, CHRF_ORDER, CHRF_BETA)?,
        ter: ter(hyps, refs)?,
        meta: MetricMeta::new(sp),
    };
    let scores = [
        report.spbleu,
        report.spchrf,
        report.spter,
        report.bleu,
        report.chrf,
        report.ter,
    ];
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score for {direction}")));
    }
    Ok(report)
}

/// Two-decimal score cell, e.g. `21.84`.
pub fn cell(x: f64) -> String {
    format!("{x:.2}")
}

/// `with (without)` cell, e.g. `34.89 (12.27)`.
pub fn paired_cell(with: f64, without: f64) -> String {
    format!("{} ({})", cell(with), cell(without))
}

/// Table of reports, one row per direction.
pub fn reports_to_text(reports: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>8} {:>8} {:>8}\n",
        "direction", "n", "spBLEU", "spCHRF", "spTER"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<10} {:>6} {:>8} {:>8} {:>8}\n",
            r.direction,
            r.test_size,
            cell(r.spbleu),
            cell(r.spchrf),
            cell(r.spter)
        ));
    }
    if let Some(r) = reports.first() {
        s.push_str(&format!(
            "tokenizer {} | BLEU smoothing {} | chrF n={} beta={} | TER max shift {} | {}\n",
            &r.meta.tokenizer_sha256[..r.meta.tokenizer_sha256.len().min(12)],
            r.meta.bleu_smoothing,
            r.meta.chrf_order,
            r.meta.chrf_beta,
            r.meta.ter_max_shift,
            r.meta.sp_variants
        ));
    }
    s
}

/// Rows of `with` paired against `without`, matched by direction.
pub fn paired_table(with: &[EvalReport], without: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<10} {:>16} {:>16} {:>16}\n",
        "direction", "spBLEU", "spCHRF", "spTER"
    );
    for w in with {
        if let Some(o) = without.iter().find(|o| o.direction == w.direction) {
            s.push_str(&format!(
                "{:<10} {:>16} {:>16} {:>16}\n",
                w.direction,
                paired_cell(w.spbleu, o.spbleu),
                paired_cell(w.spchrf, o.spchrf),
                paired_cell(w.spter, o.spter)
            ));
        }
    }
    s
}

pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "direction",
        "test_size",
        "spbleu",
        "spchrf",
        "spter",
        "bleu",
        "chrf",
        "ter",
        "tokenizer_sha256",
        "bleu_smoothing",
        "chrf_order",
        "chrf_beta",
    ])?;
    for r in reports {
        w.write_record([
            r.direction.clone(),
            r.test_size.to_string(),
            cell(r.spbleu),
            cell(r.spchrf),
            cell(r.spter),
            cell(r.bleu),
            cell(r.chrf),
            cell(r.ter),
            r.meta.tokenizer_sha256.clone(),
            r.meta.bleu_smoothing.clone(),
            r.meta.chrf_order.to_string(),
            r.meta.chrf_beta.to_string(),
        ])?;
    }
    csv_string(w)
}

pub fn reports_to_jsonl(reports: &[EvalReport]) -> Result<String> {
    let mut s = String::new();
    for r in reports {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}
