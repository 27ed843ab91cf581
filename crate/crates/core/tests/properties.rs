use std::collections::BTreeMap;

use proptest::prelude::*;
use tagmt::corpus::{
    clean, parse_langs, split, stats, CleaningConfig, Direction, LangTag, MonoSentence, MonoStore,
    ParallelPair, ParallelStore, Split, SplitSpec,
};
use tagmt::decode::{DecodeConfig, Generation, ModelTranslator, Translator};
use tagmt::harness::{default_specs, GroundTruth};
use tagmt::metrics::{bleu, bleu_text, chrf, ter};
use tagmt::model::{Model, ModelConfig};
use tagmt::objectives::{make_bt_examples, make_rec_examples, noise, BtConfig, RecConfig};
use tagmt::tokenizer::{normalize, train_subword, SubwordModel, PAD, UNK};
use tagmt_tensor::rng::rng_fork;

fn langs() -> Vec<LangTag> {
    parse_langs("aaa,bbb,ccc").unwrap()
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "la", "lo", "mi", "ta", "tam", "ka", "xo", "é", "ñu", "zz",
    ])
    .prop_map(String::from)
}

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..max).prop_map(|w| w.join(" "))
}

fn store_strategy() -> impl Strategy<Value = ParallelStore> {
    let dirs = ["aaa-bbb", "bbb-aaa", "aaa-ccc"];
    prop::collection::vec((0..dirs.len(), sentence(8), sentence(8), 0..2usize), 0..60).prop_map(
        move |rows| {
            rows.into_iter()
                .map(|(d, s, t, dom)| ParallelPair {
                    direction: dirs[d].parse::<Direction>().unwrap(),
                    src_text: s,
                    tgt_text: t,
                    domain: format!("dom{dom}"),
                    split: Split::Train,
                })
                .collect()
        },
    )
}

fn key(p: &ParallelPair) -> (String, String, String, String) {
    (
        p.direction.to_string(),
        p.src_text.clone(),
        p.tgt_text.clone(),
        p.domain.clone(),
    )
}

fn multiset(store: &ParallelStore) -> BTreeMap<(String, String, String, String), usize> {
    let mut m = BTreeMap::new();
    for p in store.pairs() {
        *m.entry(key(p)).or_insert(0) += 1;
    }
    m
}

fn trained_tokenizer() -> SubwordModel {
    let corpus = [
        "la lo mi ta tam ka xo",
        "tam tam ka ka xo la",
        "ñu é zz la lo la lo",
        "the quick brown fox jumps over the lazy dog",
    ];
    train_subword(corpus.iter().copied(), 300, &langs()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clean_is_idempotent(store in store_strategy(), max_len in 2usize..8, dedup in any::<bool>()) {
        let c = CleaningConfig { max_len, min_len: 2, dedup, ..CleaningConfig::default() };
        let (once, _) = clean(&store, &c).unwrap();
        let (twice, _) = clean(&once, &c).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn split_partitions_the_store(store in store_strategy(), dev in 0usize..3, test in 0usize..3, seed in 0u64..1000) {
        let spec = SplitSpec::new(dev, test, seed);
        match split(&store, &spec) {
            Ok(out) => {
                prop_assert_eq!(multiset(&out), multiset(&store));
                for d in out.directions() {
                    prop_assert_eq!(out.count(d, Some(Split::Dev)), dev);
                    prop_assert_eq!(out.count(d, Some(Split::Test)), test);
                    let total = out.count(d, None);
                    prop_assert_eq!(out.count(d, Some(Split::Train)), total - dev - test);
                }
                prop_assert_eq!(split(&store, &spec).unwrap(), out);
            }
            Err(tagmt::Error::InsufficientPairs { .. }) => {
                prop_assert!(store.directions().any(|d| store.count(d, None) <= dev + test));
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn stats_total_is_store_size(store in store_strategy()) {
        let t = stats(&store);
        prop_assert_eq!(t.total(), store.len());
    }

    #[test]
    fn tokenizer_round_trips_any_text(s in "\\PC{0,40}") {
        let tok = trained_tokenizer();
        let ids = tok.encode(&s);
        prop_assert!(!ids.contains(&UNK));
        let ids: Vec<u32> = ids.into_iter().filter(|&i| i != tagmt::tokenizer::EOS).collect();
        prop_assert_eq!(tok.decode(&ids).unwrap(), normalize(&s));
    }

    #[test]
    fn tokenizer_training_is_deterministic(texts in prop::collection::vec(sentence(10), 1..12), extra in 0usize..60) {
        let a = train_subword(texts.iter().map(String::as_str), 270 + extra, &langs()).unwrap();
        let b = train_subword(texts.iter().map(String::as_str), 270 + extra, &langs()).unwrap();
        prop_assert_eq!(a.merges(), b.merges());
        prop_assert_eq!(a.to_text(), b.to_text());
        for id in a.special_tokens().len() as u32..a.vocab_size() as u32 {
            let piece = a.piece(id).unwrap();
            for sp in a.special_tokens() {
                prop_assert!(!piece.contains(sp.as_str()), "{piece} contains {sp}");
            }
        }
    }

    #[test]
    fn metrics_ignore_segment_order(
        pairs in prop::collection::vec((sentence(7), sentence(7)), 1..8),
        rot in 0usize..8,
    ) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let mut hp = h.clone();
        let mut rp = r.clone();
        hp.rotate_left(k);
        rp.rotate_left(k);
        prop_assert!((bleu_text(&h, &r).unwrap() - bleu_text(&hp, &rp).unwrap()).abs() < 1e-9);
        prop_assert!((chrf(&h, &r, 6, 2.0).unwrap() - chrf(&hp, &rp, 6, 2.0).unwrap()).abs() < 1e-9);
        prop_assert!((ter(&h, &r).unwrap() - ter(&hp, &rp).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn metric_ranges_and_duplication(pairs in prop::collection::vec((sentence(7), sentence(7)), 1..8)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let b = bleu_text(&h, &r).unwrap();
        let c = chrf(&h, &r, 6, 2.0).unwrap();
        let t = ter(&h, &r).unwrap();
        prop_assert!((0.0..=100.0).contains(&b));
        prop_assert!((0.0..=100.0).contains(&c));
        prop_assert!(t >= 0.0);
        let h2: Vec<String> = h.iter().chain(&h).cloned().collect();
        let r2: Vec<String> = r.iter().chain(&r).cloned().collect();
        prop_assert!((chrf(&h2, &r2, 6, 2.0).unwrap() - c).abs() < 1e-9);
        prop_assert!((ter(&h2, &r2).unwrap() - t).abs() < 1e-9);
    }

    // Exp smoothing depends on corpus totals, so BLEU is duplication
    // invariant only when every order has a match.
    #[test]
    fn unsmoothed_bleu_ignores_duplication(
        pairs in prop::collection::vec((sentence(4), sentence(9), word()), 1..6),
    ) {
        let r: Vec<String> = pairs.iter().map(|(a, b, _)| format!("{a} x y z {b}")).collect();
        let h: Vec<String> = pairs.iter().zip(&r).map(|((_, _, w), r)| format!("{r} {w}")).collect();
        let b = bleu_text(&h, &r).unwrap();
        let h2: Vec<String> = h.iter().chain(&h).cloned().collect();
        let r2: Vec<String> = r.iter().chain(&r).cloned().collect();
        prop_assert!((bleu_text(&h2, &r2).unwrap() - b).abs() < 1e-9);
    }

    #[test]
    fn identical_corpus_scores_perfectly(segs in prop::collection::vec(sentence(9), 1..8)) {
        let toks: Vec<Vec<&str>> = segs.iter().map(|s| s.split_whitespace().collect()).collect();
        prop_assert!((bleu(&toks, &toks, 4).unwrap() - 100.0).abs() <= 1e-9);
        prop_assert!((chrf(&segs, &segs, 6, 2.0).unwrap() - 100.0).abs() <= 1e-9);
        prop_assert_eq!(ter(&segs, &segs).unwrap(), 0.0);
    }

    #[test]
    fn noise_keeps_a_sub_multiset(s in sentence(12), swaps in 0usize..4, p in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = rng_fork(seed, 0);
        let out = noise(&s, swaps, p, &mut rng);
        let mut avail: BTreeMap<&str, isize> = BTreeMap::new();
        for t in s.split_whitespace() {
            *avail.entry(t).or_insert(0) += 1;
        }
        prop_assert!(!out.is_empty());
        for t in out.split_whitespace() {
            let c = avail.get_mut(t).unwrap();
            *c -= 1;
            prop_assert!(*c >= 0);
        }
    }

    #[test]
    fn noise_without_deletion_is_a_permutation(s in sentence(12), swaps in 0usize..5, seed in any::<u64>()) {
        let mut rng = rng_fork(seed, 1);
        let out = noise(&s, swaps, 0.0, &mut rng);
        let mut a: Vec<&str> = s.split_whitespace().collect();
        let mut b: Vec<&str> = out.split_whitespace().collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn single_token_survives_noise(w in word(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = rng_fork(seed, 2);
        prop_assert_eq!(noise(&w, 3, p, &mut rng), w);
    }

    #[test]
    fn ground_truth_round_trips(seed in 0u64..50, concepts in prop::collection::vec(0u32..200, 1..10)) {
        let langs = parse_langs("sy1,sy2,sy3,sy4").unwrap();
        let truth = GroundTruth::new(default_specs(&langs, seed).unwrap()).unwrap();
        for a in &langs {
            let text = truth.render(a, &concepts).unwrap();
            prop_assert_eq!(truth.parse(a, &text).unwrap(), concepts.clone());
            for b in &langs {
                let there = truth.translate(&text, a, b).unwrap();
                prop_assert_eq!(truth.translate(&there, b, a).unwrap(), text.clone());
            }
        }
    }
}

/// Reverses the words of the payload.
struct Reverser;

impl Translator for Reverser {
    fn generate_batch(
        &self,
        inputs: &[String],
        _: &DecodeConfig,
        _: u64,
    ) -> tagmt::Result<Vec<Generation>> {
        Ok(inputs
            .iter()
            .map(|s| {
                let payload = s.split_once("> ").map(|x| x.1).unwrap_or(s);
                Generation {
                    text: payload
                        .split_whitespace()
                        .rev()
                        .collect::<Vec<_>>()
                        .join(" "),
                    ids: Vec::new(),
                    truncated: false,
                    input_truncated: false,
                }
            })
            .collect())
    }
}

fn mono_of(sentences: &[(usize, String)]) -> MonoStore {
    let l = langs();
    let mut m = MonoStore::new();
    for (i, s) in sentences {
        m.push(
            l[i % l.len()].clone(),
            MonoSentence {
                text: s.clone(),
                split: Split::Train,
            },
        );
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bt_targets_are_monolingual_sentences(
        sents in prop::collection::vec((0usize..3, sentence(6)), 3..20),
        num_bt in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mono = mono_of(&sents);
        let l = langs();
        let cfg = BtConfig { num_bt: vec![num_bt], ..BtConfig::default() };
        let out = make_bt_examples(&Reverser, &mono, &l, &[], &cfg, num_bt, seed).unwrap();
        let again = make_bt_examples(&Reverser, &mono, &l, &[], &cfg, num_bt, seed).unwrap();
        prop_assert_eq!(&out, &again);
        for bt in &out {
            let (tag, payload) = bt.example.split_tag().unwrap();
            prop_assert!(mono.train_texts(&tag).contains(&bt.example.target.as_str()));
            prop_assert_ne!(&bt.pivot, &tag);
            let expected: Vec<&str> = bt.example.target.split_whitespace().rev().collect();
            prop_assert_eq!(payload, expected.join(" "));
        }
    }

    #[test]
    fn rec_targets_are_monolingual_sentences(
        sents in prop::collection::vec((0usize..3, sentence(6)), 3..20),
        n in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mono = mono_of(&sents);
        let cfg = RecConfig { num_rec: n, ..RecConfig::default() };
        let out = make_rec_examples(&mono, &langs(), &cfg, &mut rng_fork(seed, 0));
        let present = langs().iter().filter(|l| !mono.train_texts(l).is_empty()).count();
        prop_assert_eq!(out.len(), n * present);
        for ex in &out {
            let (tag, _) = ex.split_tag().unwrap();
            prop_assert!(mono.train_texts(&tag).contains(&ex.target.as_str()));
        }
    }
}

fn tiny_model(tok: &SubwordModel) -> Model<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_positions: 16,
        vocab_size: tok.vocab_size(),
        ..ModelConfig::default()
    };
    Model::init(cfg, 3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_never_emits_pad_or_tags(inputs in prop::collection::vec(sentence(6), 1..4), temp in 0.5f64..2.0, seed in any::<u64>()) {
        let tok = trained_tokenizer();
        let model = tiny_model(&tok);
        let tr = ModelTranslator::new(&model, &tok);
        let tagged: Vec<String> = inputs.iter().map(|s| format!("<bbb> {s}")).collect();
        let specials = tok.special_tokens().len() as u32;
        for cfg in [DecodeConfig { max_new_tokens: 8, ..DecodeConfig::greedy() }, DecodeConfig { max_new_tokens: 8, ..DecodeConfig::sample(temp) }] {
            let a = tr.generate_batch(&tagged, &cfg, seed).unwrap();
            let b = tr.generate_batch(&tagged, &cfg, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for g in &a {
                prop_assert!(g.ids.iter().all(|&i| i != PAD && i != UNK && !(UNK < i && i < specials)));
            }
        }
    }
}
