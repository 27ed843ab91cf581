//! Runs BASE, BT and BT&REC on four synthetic languages, one of them
//! low-resource, and prints the spBLEU table.
//!
//!     cargo run --release -p tagmt --example synth_compare -- [seed] [overrides.json]
//!
//! The optional JSON object is merged over the `desk` preset, with an
//! optional `"synth"` key merged over the corpus settings.

use std::time::Instant;

use serde_json::Value;
use tagmt::corpus::{parse_langs, Split};
use tagmt::harness::{
    compare_settings, default_specs, gen_synthetic, ExperimentConfig, RunOptions, SynthConfig,
};
use tagmt::objectives::FinetuneSetting;
use tagmt::tokenizer::train_subword;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(13);
    let mut over: Value = match args.get(2) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Value::Object(Default::default()),
    };
    let synth_over = over.as_object_mut().and_then(|o| o.remove("synth"));
    let settings: Vec<FinetuneSetting> =
        match over.as_object_mut().and_then(|o| o.remove("settings")) {
            Some(v) => serde_json::from_value(v)?,
            None => FinetuneSetting::ALL.to_vec(),
        };
    let out_dir = over
        .as_object_mut()
        .and_then(|o| o.remove("out_dir"))
        .and_then(|v| v.as_str().map(std::path::PathBuf::from));
    let concepts = over
        .as_object_mut()
        .and_then(|o| o.remove("concepts"))
        .and_then(|v| v.as_u64());
    let vocab = over
        .as_object_mut()
        .and_then(|o| o.remove("vocab"))
        .and_then(|v| v.as_u64())
        .unwrap_or(2000);

    let langs = parse_langs("sy1,sy2,sy3,sy4")?;
    let mut synth = serde_json::to_value(SynthConfig {
        low_resource: Some(langs[3].clone()),
        seed,
        ..SynthConfig::default()
    })?;
    if let Some(s) = synth_over {
        merge(&mut synth, s);
    }
    let synth: SynthConfig = serde_json::from_value(synth)?;
    let (parallel, mono, truth) = {
        let mut specs = default_specs(&langs, seed)?;
        for s in specs.iter_mut() {
            s.concept_vocab_size = concepts.unwrap_or(200) as usize;
        }
        gen_synthetic(&specs, &synth)?
    };

    let mut texts: Vec<&str> = parallel
        .pairs_in(Split::Train)
        .flat_map(|p| [p.src_text.as_str(), p.tgt_text.as_str()])
        .collect();
    texts.extend(mono.iter().map(|(_, s)| s.text.as_str()));
    let tok = train_subword(texts, vocab as usize, &langs)?;

    let mut cfg = serde_json::to_value(ExperimentConfig {
        languages: langs,
        seed,
        ..ExperimentConfig::preset("desk")?
    })?;
    merge(&mut cfg, over);
    let cfg: ExperimentConfig = serde_json::from_value(cfg)?;

    let start = Instant::now();
    let opts = RunOptions {
        truth: Some(&truth),
        out_dir,
        ..RunOptions::default()
    };
    let (table, _) = compare_settings::<f32>(&cfg, &settings, &parallel, &mono, &tok, &opts)?;
    print!("{}", table.to_text());
    println!("seconds: {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}
