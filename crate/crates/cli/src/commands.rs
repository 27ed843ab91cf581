//! Command implementations and the CLI error type.

use std::fmt;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tagmt::corpus::{
    self, clean, clean_mono, load_mono, load_parallel, parse_langs, CleaningConfig, Direction,
    LangTag, LoadReport, MonoStore, ParallelFormat, ParallelStore, Split, SplitSpec,
};
use tagmt::decode::{DecodeConfig, DecodeMode, ModelTranslator, Translator};
use tagmt::harness::{
    compare_settings, default_specs, evaluate_direction, gen_synthetic, run_experiment,
    ComparisonTable, ExperimentConfig, GroundTruth, RunOptions, SynthConfig,
};
use tagmt::metrics::{paired_cell, reports_to_csv, reports_to_text, EvalReport};
use tagmt::model::Model;
use tagmt::objectives::{build_directions, FinetuneSetting};
use tagmt::tokenizer::{train_subword, SubwordModel};
use tagmt_tensor::Real;

use crate::config::{layer, FileConfig};
use crate::manifest::RunManifest;
use crate::svg::grouped_bars;
use crate::{
    Cli, Command, CompareArgs, DataCmd, DecodeFlags, EvaluateArgs, ExperimentFlags, PrepareArgs,
    ReportArgs, SplitArgs, StatsArgs, SynthArgs, SynthCmd, TokTrainArgs, TokenizerCmd, TrainArgs,
    TranslateArgs,
};

const DEFAULT_SEED: u64 = 13;
const DEFAULT_VOCAB: usize = 8000;

#[derive(Debug)]
pub struct CliError {
    pub class: String,
    pub message: String,
    usage: bool,
}

impl CliError {
    pub fn usage(class: &str, message: impl Into<String>) -> Self {
        CliError {
            class: class.into(),
            message: message.into(),
            usage: true,
        }
    }

    pub fn runtime(class: &str, message: impl Into<String>) -> Self {
        CliError {
            class: class.into(),
            message: message.into(),
            usage: false,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let usage = e.kind() == std::io::ErrorKind::NotFound;
        CliError {
            class: "io".into(),
            message: format!("{}: {e}", path.display()),
            usage,
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.usage {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.class, self.message)
    }
}

impl From<tagmt::Error> for CliError {
    fn from(e: tagmt::Error) -> Self {
        let usage = match &e {
            tagmt::Error::Config(_) => true,
            tagmt::Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        CliError {
            class: e.class().into(),
            message: e.to_string().replace('\n', " "),
            usage,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::runtime("json", e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Global options after the config file is read.
struct Ctx {
    seed: u64,
    config_path: Option<PathBuf>,
    file: FileConfig,
}

impl Ctx {
    fn manifest(&self, command: &str, resolved: Value) -> Result<RunManifest> {
        RunManifest::new(command, self.config_path.as_deref(), resolved, self.seed)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    if let Some(n) = cli.workers.or(file.workers) {
        if n == 0 {
            return Err(CliError::usage("config", "--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime("workers", e.to_string()))?;
    }
    let ctx = Ctx {
        seed,
        config_path: cli.config.clone(),
        file,
    };
    match cli.command {
        Command::Data(DataCmd::Prepare(a)) => data_prepare(&ctx, a),
        Command::Data(DataCmd::Stats(a)) => data_stats(&ctx, a),
        Command::Data(DataCmd::Split(a)) => data_split(&ctx, a),
        Command::Tokenizer(TokenizerCmd::Train(a)) => tokenizer_train(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Translate(a) => translate(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Synth(SynthCmd::Generate(a)) => synth_generate(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime("io", format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(
            "io",
            format!("{}: no such file or directory", path.display()),
        ))
    }
}

/// Splits `key=path`.
fn key_path(s: &str, what: &str) -> Result<(String, PathBuf)> {
    let (k, p) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage("usage", format!("expected {what}=PATH, got {s:?}")))?;
    Ok((k.trim().to_string(), PathBuf::from(p)))
}

fn parse_direction(s: &str) -> Result<Direction> {
    s.parse::<Direction>()
        .map_err(|e| CliError::usage("usage", e.to_string()))
}

fn format_of(path: &Path) -> ParallelFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => ParallelFormat::Jsonl,
        _ => ParallelFormat::Tsv2,
    }
}

/// Drops `None` entries so absent flags do not override anything.
fn flags(pairs: Vec<(&str, Option<Value>)>) -> Value {
    let mut m = Map::new();
    for (k, v) in pairs {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    }
    Value::Object(m)
}

struct DataDir {
    parallel: ParallelStore,
    mono: MonoStore,
}

fn load_data_dir(dir: &Path) -> Result<DataDir> {
    let p = dir.join("parallel.jsonl");
    require_file(&p)?;
    let parallel = ParallelStore::read_jsonl(&p)?;
    let m = dir.join("mono.jsonl");
    let mono = if m.exists() {
        MonoStore::read_jsonl(&m)?
    } else {
        MonoStore::new()
    };
    Ok(DataDir { parallel, mono })
}

fn data_prepare(ctx: &Ctx, a: PrepareArgs) -> Result<()> {
    let cleaning: CleaningConfig = layer(
        &CleaningConfig::default(),
        ctx.file.section("cleaning"),
        flags(vec![
            ("max_len", a.max_len.map(Value::from)),
            ("min_len", a.min_len.map(Value::from)),
            ("dedup", a.no_dedup.then_some(Value::Bool(false))),
        ]),
        "cleaning",
    )?;
    cleaning.validate()?;
    let mut parallel = ParallelStore::new();
    let mut loads: Vec<(String, LoadReport)> = Vec::new();
    for spec in &a.parallel {
        let (dir, path) = key_path(spec, "SRC-TGT")?;
        let dir = parse_direction(&dir)?;
        require_file(&path)?;
        let (store, rep) = load_parallel(&path, &dir, format_of(&path))?;
        log::info!(
            "{dir}: loaded {} of {} lines from {}",
            rep.loaded,
            rep.lines,
            path.display()
        );
        loads.push((format!("{dir} {}", path.display()), rep));
        parallel.extend(store);
    }
    let mut mono = MonoStore::new();
    for spec in &a.mono {
        let (lang, path) = key_path(spec, "LANG")?;
        let lang: LangTag = lang
            .parse()
            .map_err(|e: tagmt::Error| CliError::usage("usage", e.to_string()))?;
        require_file(&path)?;
        let (store, rep) = load_mono(&path, &lang)?;
        loads.push((format!("{lang} {}", path.display()), rep));
        for (l, s) in store.iter() {
            mono.push(l.clone(), s.clone());
        }
    }
    let (parallel, report) = clean(&parallel, &cleaning)?;
    create_dir(&a.out)?;
    parallel.write_jsonl(&a.out.join("parallel.jsonl"))?;
    let mut text = report.to_text();
    let mut csv = report.to_csv()?;
    if !mono.is_empty() {
        let (mono, mreport) = clean_mono(&mono, &cleaning)?;
        mono.write_jsonl(&a.out.join("mono.jsonl"))?;
        text.push_str(&mreport.to_text());
        write(&a.out.join("clean_report_mono.csv"), &mreport.to_csv()?)?;
    }
    csv.truncate(csv.trim_end().len());
    csv.push('\n');
    write(&a.out.join("clean_report.csv"), &csv)?;
    write(&a.out.join("clean_report.txt"), &text)?;
    let loads_json: Vec<Value> = loads
        .iter()
        .map(|(s, r)| json!({"source": s, "report": r}))
        .collect();
    write(
        &a.out.join("load_report.json"),
        &(serde_json::to_string_pretty(&loads_json)? + "\n"),
    )?;
    print!("{text}");
    let mut m = ctx.manifest(
        "data prepare",
        json!({"cleaning": cleaning, "parallel": a.parallel, "mono": a.mono}),
    )?;
    m.hash_dir(&a.out)?;
    m.write(&a.out)?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(CliError::usage(
            "usage",
            format!("unknown split {s:?} (train, dev or test)"),
        )),
    }
}

fn data_stats(ctx: &Ctx, a: StatsArgs) -> Result<()> {
    let data = load_data_dir(&a.data)?;
    let store: ParallelStore = match a.split.as_deref().map(parse_split).transpose()? {
        Some(split) => data.parallel.pairs_in(split).cloned().collect(),
        None => data.parallel,
    };
    let table = corpus::stats(&store);
    print!("{}", table.to_text());
    if let Some(csv) = &a.csv {
        write(csv, &table.to_csv()?)?;
        let dir = csv
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut m = ctx.manifest("data stats", json!({"data": a.data, "split": a.split}))?;
        m.add_file(&csv.file_name().unwrap_or_default().to_string_lossy(), csv)?;
        m.write(dir)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SplitSection {
    dev_per_direction: usize,
    test_per_direction: usize,
    stratify_by_domain: bool,
}

fn data_split(ctx: &Ctx, a: SplitArgs) -> Result<()> {
    let base = SplitSection {
        dev_per_direction: 100,
        test_per_direction: 200,
        stratify_by_domain: true,
    };
    let s: SplitSection = layer(
        &base,
        ctx.file.section("split"),
        flags(vec![
            ("dev_per_direction", a.dev.map(Value::from)),
            ("test_per_direction", a.test.map(Value::from)),
            (
                "stratify_by_domain",
                a.no_stratify.then_some(Value::Bool(false)),
            ),
        ]),
        "split",
    )?;
    let spec = SplitSpec {
        stratify_by_domain: s.stratify_by_domain,
        ..SplitSpec::new(s.dev_per_direction, s.test_per_direction, ctx.seed)
    };
    let data = load_data_dir(&a.data)?;
    let out_store = corpus::split(&data.parallel, &spec)?;
    let out = a.out.unwrap_or_else(|| a.data.clone());
    create_dir(&out)?;
    out_store.write_jsonl(&out.join("parallel.jsonl"))?;
    if !data.mono.is_empty() {
        data.mono.write_jsonl(&out.join("mono.jsonl"))?;
    }
    let mut text = String::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        let part: ParallelStore = out_store.pairs_in(split).cloned().collect();
        text.push_str(&format!("[{split}]\n{}", corpus::stats(&part).to_text()));
    }
    write(&out.join("split_stats.txt"), &text)?;
    print!("{text}");
    let mut m = ctx.manifest("data split", serde_json::to_value(&spec)?)?;
    m.hash_dir(&out)?;
    m.write(&out)?;
    Ok(())
}

fn union_langs(data: &DataDir) -> Vec<LangTag> {
    let mut langs = data.parallel.languages();
    langs.extend(data.mono.languages().cloned());
    langs.sort();
    langs.dedup();
    langs
}

fn tokenizer_train(ctx: &Ctx, a: TokTrainArgs) -> Result<()> {
    #[derive(Serialize, Deserialize)]
    struct TokSection {
        vocab_size: usize,
    }
    let sec: TokSection = layer(
        &TokSection {
            vocab_size: DEFAULT_VOCAB,
        },
        ctx.file.section("tokenizer"),
        flags(vec![("vocab_size", a.vocab_size.map(Value::from))]),
        "tokenizer",
    )?;
    let data = load_data_dir(&a.data)?;
    let langs = match &a.langs {
        Some(s) => parse_langs(s)?,
        None => union_langs(&data),
    };
    let mut texts: Vec<&str> = data
        .parallel
        .pairs_in(Split::Train)
        .flat_map(|p| [p.src_text.as_str(), p.tgt_text.as_str()])
        .collect();
    for l in data.mono.languages() {
        texts.extend(data.mono.train_texts(l));
    }
    let tok = train_subword(texts, sec.vocab_size, &langs)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    tok.save(&a.out)?;
    println!(
        "vocab {} ({} merges) sha256 {}",
        tok.vocab_size(),
        tok.num_merges(),
        tok.hash()
    );
    let mut m = ctx.manifest(
        "tokenizer train",
        json!({"vocab_size": sec.vocab_size, "languages": langs, "data": a.data}),
    )?;
    m.add_file(
        &a.out.file_name().unwrap_or_default().to_string_lossy(),
        &a.out,
    )?;
    let mut side = a.out.as_os_str().to_owned();
    side.push(".manifest.json");
    let side = PathBuf::from(side);
    write(&side, &(serde_json::to_string_pretty(&m)? + "\n"))?;
    Ok(())
}

/// Experiment config after preset, file and flag layering.
struct Resolved {
    preset: String,
    precision: u32,
    config: ExperimentConfig,
}

fn list_u(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage("usage", format!("bad number {x:?} in {s:?}")))
        })
        .collect()
}

fn resolve_experiment(
    ctx: &Ctx,
    f: &ExperimentFlags,
    setting: Option<&str>,
    data_langs: &[LangTag],
) -> Result<Resolved> {
    let preset = f
        .preset
        .clone()
        .or_else(|| ctx.file.preset.clone())
        .unwrap_or_else(|| "desk".into());
    let base = ExperimentConfig::preset(&preset).map_err(CliError::from)?;
    let setting = setting
        .map(|s| {
            s.parse::<FinetuneSetting>()
                .map_err(|e| CliError::usage("usage", e.to_string()))
        })
        .transpose()?;
    let langs = f.langs.as_deref().map(parse_langs).transpose()?;
    let exclusions = f
        .exclude
        .iter()
        .map(|s| {
            let d = parse_direction(s)?;
            Ok(json!([d.src, d.tgt]))
        })
        .collect::<Result<Vec<Value>>>()?;
    let num_bt = f.num_bt.as_deref().map(list_u).transpose()?;
    let bt = flags(vec![
        ("num_bt", num_bt.map(|v| json!(v))),
        ("num_sample", f.num_sample.map(Value::from)),
        ("start_epoch", f.start_epoch.map(Value::from)),
    ]);
    let flag_value = flags(vec![
        ("languages", langs.map(|l| json!(l))),
        (
            "exclusions",
            (!exclusions.is_empty()).then_some(Value::Array(exclusions)),
        ),
        ("setting", setting.map(|s| json!(s))),
        ("epochs", f.epochs.map(Value::from)),
        ("optimizer", f.lr.map(|lr| json!({ "lr": lr }))),
        (
            "schedule",
            f.warmup_steps.map(|w| json!({ "warmup_steps": w })),
        ),
        ("batch_size_sentences", f.batch_size.map(Value::from)),
        ("accumulation_factor", f.accumulation.map(Value::from)),
        ("patience_evals", f.patience.map(Value::from)),
        ("eval_every_steps", f.eval_every.map(Value::from)),
        (
            "bt",
            bt.as_object().is_some_and(|m| !m.is_empty()).then_some(bt),
        ),
        ("rec", f.num_rec.map(|n| json!({ "num_rec": n }))),
        ("seed", Some(Value::from(ctx.seed))),
    ]);
    let file_section = ctx.file.section("experiment");
    let file_has_exclusions = file_section.get("exclusions").is_some();
    let mut config: ExperimentConfig = layer(&base, file_section, flag_value, "experiment")?;
    if config.languages.is_empty() {
        config.languages = data_langs.to_vec();
    }
    if f.exclude.is_empty() && !file_has_exclusions {
        config.exclusions = ExperimentConfig::default_exclusions(&config.languages);
    }
    let precision = f.precision.or(ctx.file.precision).unwrap_or(32);
    if precision != 32 && precision != 64 {
        return Err(CliError::usage(
            "config",
            format!("precision must be 32 or 64, got {precision}"),
        ));
    }
    Ok(Resolved {
        preset,
        precision,
        config,
    })
}

/// Values implied by the config that are worth showing next to it.
fn derived(config: &ExperimentConfig) -> Value {
    let first_bt = config.bt.num_bt.first().copied().unwrap_or(0);
    let directions = build_directions(&config.languages, &config.exclusions)
        .map(|d| d.len())
        .ok();
    json!({
        "effective_batch_sentences": config.batch_size_sentences * config.accumulation_factor,
        "bt_rec_ratio": format!("{}:{}", first_bt, config.rec.num_rec),
        "first_bt_epoch": config.bt.start_epoch,
        "directions": directions,
    })
}

fn find_tokenizer(explicit: Option<&Path>, data: Option<&Path>) -> Result<PathBuf> {
    let path = match (explicit, data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join("tokenizer.txt"),
        (None, None) => return Err(CliError::usage("usage", "--tokenizer is required")),
    };
    require_file(&path)?;
    Ok(path)
}

fn find_truth(explicit: Option<&Path>, data: &Path) -> Result<Option<GroundTruth>> {
    match explicit {
        Some(p) => {
            require_file(p)?;
            Ok(Some(GroundTruth::load(p)?))
        }
        None => {
            let p = data.join("truth.json");
            Ok(if p.exists() {
                Some(GroundTruth::load(&p)?)
            } else {
                None
            })
        }
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let data = a.data.as_deref().map(load_data_dir).transpose()?;
    let data_langs = data.as_ref().map(union_langs).unwrap_or_default();
    let r = resolve_experiment(ctx, &a.exp, a.setting.as_deref(), &data_langs)?;
    let view = json!({
        "preset": r.preset,
        "precision": r.precision,
        "experiment": r.config,
        "derived": derived(&r.config),
    });
    if a.dry_run {
        if !r.config.languages.is_empty() {
            r.config.validate()?;
        }
        println!("{}", serde_json::to_string_pretty(&view)?);
        return Ok(());
    }
    r.config.validate()?;
    let (Some(data), Some(data_dir)) = (data, a.data.as_deref()) else {
        return Err(CliError::usage("usage", "--data is required"));
    };
    let out = a
        .out
        .ok_or_else(|| CliError::usage("usage", "--out is required"))?;
    let tok = SubwordModel::load(&find_tokenizer(a.tokenizer.as_deref(), Some(data_dir))?)?;
    let truth = find_truth(a.truth.as_deref(), data_dir)?;
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        resume: a.resume,
        truth: truth.as_ref(),
        ..RunOptions::default()
    };
    let summary = if r.precision == 64 {
        train_summary(run_experiment::<f64>(
            &r.config,
            &data.parallel,
            &data.mono,
            &tok,
            &opts,
        )?)
    } else {
        train_summary(run_experiment::<f32>(
            &r.config,
            &data.parallel,
            &data.mono,
            &tok,
            &opts,
        )?)
    };
    println!("{summary}");
    let mut m = ctx.manifest("train", view)?;
    m.hash_dir(&out)?;
    m.write(&out)?;
    Ok(())
}

fn train_summary<T: Real>(out: tagmt::harness::RunOutput<T>) -> String {
    let evals = out.log.evals();
    let best = evals.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let steps = out.log.loss_trace().last().map(|s| s.0 + 1).unwrap_or(0);
    format!(
        "{}: {steps} steps, {} evals, best dev loss {best:.4}",
        out.config.setting.label(),
        evals.len()
    )
}

fn decode_config(ctx: &Ctx, d: &DecodeFlags) -> Result<DecodeConfig> {
    let mode: DecodeMode = d
        .mode
        .parse()
        .map_err(|e: tagmt::Error| CliError::usage("usage", e.to_string()))?;
    let c: DecodeConfig = layer(
        &DecodeConfig::default(),
        ctx.file.section("decode"),
        flags(vec![
            ("mode", Some(json!(mode))),
            ("beam_size", d.beam_size.map(Value::from)),
            ("temperature", d.temperature.map(Value::from)),
            ("max_new_tokens", d.max_new_tokens.map(Value::from)),
        ]),
        "decode",
    )?;
    c.validate()?;
    Ok(c)
}

/// A run directory (`best.ckpt` + `tokenizer.txt`) or a checkpoint file.
fn model_paths(model: &Path, tokenizer: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    let (ckpt, dir) = if model.is_dir() {
        (model.join("best.ckpt"), model.to_path_buf())
    } else {
        (
            model.to_path_buf(),
            model.parent().map(Path::to_path_buf).unwrap_or_default(),
        )
    };
    require_file(&ckpt)?;
    let tok = match tokenizer {
        Some(t) => t.to_path_buf(),
        None => dir.join("tokenizer.txt"),
    };
    require_file(&tok)?;
    Ok((ckpt, tok))
}

fn load_model<T: Real>(ckpt: &Path, tok: &SubwordModel) -> Result<Model<T>> {
    let (model, hash) = Model::<T>::load(ckpt)?;
    if hash != tok.hash() {
        return Err(CliError::usage(
            "config",
            "checkpoint was trained with a different tokenizer",
        ));
    }
    Ok(model)
}

fn translate(ctx: &Ctx, a: TranslateArgs) -> Result<()> {
    let decode = decode_config(ctx, &a.decode)?;
    let (ckpt, tok_path) = model_paths(&a.model, a.tokenizer.as_deref())?;
    let tok = SubwordModel::load(&tok_path)?;
    let model = load_model::<f32>(&ckpt, &tok)?;
    let to =
        a.to.as_deref()
            .map(|s| {
                s.parse::<LangTag>()
                    .map_err(|e| CliError::usage("usage", e.to_string()))
            })
            .transpose()?;
    let text = if a.input.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin()
            .lock()
            .read_to_string(&mut s)
            .map_err(|e| CliError::runtime("io", e.to_string()))?;
        s
    } else {
        read(&a.input)?
    };
    let mut inputs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let tagged = line.starts_with('<') && line.split_once("> ").is_some();
        inputs.push(match (&to, tagged) {
            (Some(t), false) => format!("{} {line}", t.token()),
            (None, false) => {
                return Err(CliError::usage(
                    "usage",
                    "input line has no target tag; pass --to LANG",
                ));
            }
            (_, true) => line.to_string(),
        });
    }
    let outs = ModelTranslator::new(&model, &tok).generate_batch(&inputs, &decode, ctx.seed)?;
    let mut text = String::new();
    for g in &outs {
        text.push_str(&g.text);
        text.push('\n');
    }
    match &a.out {
        Some(p) => {
            write(p, &text)?;
            let dir = p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            let mut m = ctx.manifest(
                "translate",
                json!({"model": a.model, "decode": decode, "to": a.to}),
            )?;
            m.add_file(&p.file_name().unwrap_or_default().to_string_lossy(), p)?;
            m.write(dir)?;
        }
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())
                .map_err(|e| CliError::runtime("io", e.to_string()))?;
        }
    }
    Ok(())
}

/// Test pairs for one direction, all labelled as the test split.
fn load_test(path: &Path, dir: &Direction) -> Result<ParallelStore> {
    require_file(path)?;
    if path.is_dir() {
        let data = load_data_dir(path)?;
        let pairs: ParallelStore = data
            .parallel
            .direction(dir)
            .iter()
            .filter(|p| p.split == Split::Test)
            .cloned()
            .collect();
        if pairs.is_empty() {
            return Err(CliError::runtime(
                "empty_corpus",
                format!("no test pairs for {dir} in {}", path.display()),
            ));
        }
        return Ok(pairs);
    }
    let (store, rep) = load_parallel(path, dir, format_of(path))?;
    if rep.malformed > 0 {
        log::warn!(
            "{}: {} malformed lines skipped",
            path.display(),
            rep.malformed
        );
    }
    Ok(store
        .into_pairs()
        .map(|mut p| {
            p.split = Split::Test;
            p
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    report: EvalReport,
    off_target: Option<f64>,
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let decode = decode_config(ctx, &a.decode)?;
    let dir = parse_direction(&a.direction)?;
    let (ckpt, tok_path) = model_paths(&a.model, a.tokenizer.as_deref())?;
    let tok = SubwordModel::load(&tok_path)?;
    let model = load_model::<f32>(&ckpt, &tok)?;
    let store = load_test(&a.test, &dir)?;
    let truth = if a.test.is_dir() {
        find_truth(a.truth.as_deref(), &a.test)?
    } else {
        match &a.truth {
            Some(p) => {
                require_file(p)?;
                Some(GroundTruth::load(p)?)
            }
            None => None,
        }
    };
    let eval = evaluate_direction(
        &model,
        &tok,
        &store,
        &dir,
        Split::Test,
        &decode,
        truth.as_ref(),
    )?;
    let out = a.out.unwrap_or_else(|| {
        let base = if a.model.is_dir() {
            a.model.clone()
        } else {
            ckpt.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        base.join(format!("eval-{dir}"))
    });
    create_dir(&out)?;
    let rf = ReportFile {
        report: eval.report.clone(),
        off_target: eval.off_target,
    };
    write(
        &out.join("report.json"),
        &(serde_json::to_string_pretty(&rf)? + "\n"),
    )?;
    write(
        &out.join("report.csv"),
        &reports_to_csv(std::slice::from_ref(&eval.report))?,
    )?;
    let mut text = reports_to_text(std::slice::from_ref(&eval.report));
    if let Some(o) = eval.off_target {
        text.push_str(&format!("off-target rate {o:.4}\n"));
    }
    write(&out.join("report.txt"), &text)?;
    write(
        &out.join("hypotheses.txt"),
        &(eval.hypotheses.join("\n") + "\n"),
    )?;
    print!("{text}");
    let mut m = ctx.manifest(
        "evaluate",
        json!({"model": a.model, "test": a.test, "direction": dir.to_string(), "decode": decode}),
    )?;
    m.hash_dir(&out)?;
    m.write(&out)?;
    Ok(())
}

fn synth_generate(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let langs = parse_langs(&a.langs)?;
    let low = a
        .low_resource
        .as_deref()
        .map(|s| {
            s.parse::<LangTag>()
                .map_err(|e| CliError::usage("usage", e.to_string()))
        })
        .transpose()?;
    if let Some(l) = &low {
        if !langs.contains(l) {
            return Err(CliError::usage(
                "usage",
                format!("low-resource language {l} is not in --langs"),
            ));
        }
    }
    let mut section = ctx.file.section("synth");
    let file_concepts = section.as_object_mut().and_then(|m| m.remove("concepts"));
    let concepts = match (a.concepts, file_concepts) {
        (Some(c), _) => c,
        (None, Some(v)) => v
            .as_u64()
            .ok_or_else(|| CliError::usage("config", "`synth.concepts` must be an integer"))?
            as usize,
        (None, None) => 200,
    };
    let cfg: SynthConfig = layer(
        &SynthConfig::default(),
        section,
        flags(vec![
            ("low_resource", low.map(|l| json!(l))),
            ("n_parallel_per_direction", a.n_parallel.map(Value::from)),
            ("n_dev_per_direction", a.n_dev.map(Value::from)),
            ("n_test_per_direction", a.n_test.map(Value::from)),
            ("n_mono_per_lang", a.n_mono.map(Value::from)),
            ("seed", Some(Value::from(ctx.seed))),
        ]),
        "synth",
    )?;
    let mut specs = default_specs(&langs, ctx.seed)?;
    for s in specs.iter_mut() {
        s.concept_vocab_size = concepts;
    }
    let (parallel, mono, truth) = gen_synthetic(&specs, &cfg)?;
    create_dir(&a.out)?;
    parallel.write_jsonl(&a.out.join("parallel.jsonl"))?;
    mono.write_jsonl(&a.out.join("mono.jsonl"))?;
    truth.save(&a.out.join("truth.json"))?;
    let test_dir = a.out.join("test");
    create_dir(&test_dir)?;
    for d in parallel.directions() {
        let mut tsv = String::new();
        for p in parallel
            .direction(d)
            .iter()
            .filter(|p| p.split == Split::Test)
        {
            tsv.push_str(&format!("{}\t{}\n", p.src_text, p.tgt_text));
        }
        write(&test_dir.join(format!("{d}.tsv")), &tsv)?;
    }
    let train: ParallelStore = parallel.pairs_in(Split::Train).cloned().collect();
    let stats = corpus::stats(&train).to_text();
    write(&a.out.join("stats.txt"), &stats)?;
    print!("{stats}");
    let mut m = ctx.manifest(
        "synth generate",
        json!({"synth": cfg, "concepts": concepts, "languages": langs}),
    )?;
    m.hash_dir(&a.out)?;
    m.write(&a.out)?;
    Ok(())
}

fn compare(ctx: &Ctx, a: CompareArgs) -> Result<()> {
    let data_dir = a
        .data
        .clone()
        .ok_or_else(|| CliError::usage("usage", "--data is required"))?;
    let data = load_data_dir(&data_dir)?;
    let r = resolve_experiment(ctx, &a.exp, None, &union_langs(&data))?;
    r.config.validate()?;
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => list_u(s)?.into_iter().map(|x| x as u64).collect(),
        None => vec![ctx.seed],
    };
    let tok = SubwordModel::load(&find_tokenizer(a.tokenizer.as_deref(), Some(&data_dir))?)?;
    let truth = find_truth(a.truth.as_deref(), &data_dir)?;
    create_dir(&a.out)?;
    let mut tables = Vec::new();
    for &seed in &seeds {
        let cfg = ExperimentConfig {
            seed,
            ..r.config.clone()
        };
        let seed_dir = a.out.join(format!("seed-{seed}"));
        let opts = RunOptions {
            out_dir: Some(seed_dir.clone()),
            truth: truth.as_ref(),
            ..RunOptions::default()
        };
        let (table, runs) = if r.precision == 64 {
            compare_settings::<f64>(
                &cfg,
                &FinetuneSetting::ALL,
                &data.parallel,
                &data.mono,
                &tok,
                &opts,
            )?
        } else {
            compare_settings::<f32>(
                &cfg,
                &FinetuneSetting::ALL,
                &data.parallel,
                &data.mono,
                &tok,
                &opts,
            )?
        };
        write(
            &seed_dir.join("comparison.json"),
            &(table.to_json()? + "\n"),
        )?;
        write(&seed_dir.join("comparison.txt"), &table.to_text())?;
        for run in &runs {
            let reports: Vec<EvalReport> = run.evals.values().map(|e| e.report.clone()).collect();
            let dir = seed_dir.join(run.setting.to_string());
            write(&dir.join("test_reports.csv"), &reports_to_csv(&reports)?)?;
            for (d, e) in &run.evals {
                write(
                    &dir.join(format!("test-{d}.hyp")),
                    &(e.hypotheses.join("\n") + "\n"),
                )?;
            }
        }
        log::info!("seed {seed}:\n{}", table.to_text());
        tables.push(table);
    }
    let median = ComparisonTable::median(&tables)?;
    write(&a.out.join("comparison.json"), &(median.to_json()? + "\n"))?;
    write(&a.out.join("comparison.csv"), &median.to_csv()?)?;
    write(&a.out.join("comparison.txt"), &median.to_text())?;
    write(&a.out.join("chart.csv"), &median.chart_csv()?)?;
    print!("{}", median.to_text());
    let mut m = ctx.manifest(
        "compare",
        json!({"preset": r.preset, "precision": r.precision, "seeds": seeds, "experiment": r.config}),
    )?;
    m.hash_dir(&a.out)?;
    m.write(&a.out)?;
    Ok(())
}

/// `BT&REC (BASE)` and `BT (BASE)` cells when those settings are present.
fn paired_text(t: &ComparisonTable) -> Option<String> {
    let base = t
        .settings
        .iter()
        .position(|&s| s == FinetuneSetting::Base)?;
    let others: Vec<usize> = (0..t.settings.len()).filter(|&i| i != base).collect();
    if others.is_empty() {
        return None;
    }
    let w = t
        .directions
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(9);
    let mut s = format!("{:<w$}", "direction");
    for &i in &others {
        s.push_str(&format!(
            " {:>16}",
            format!("{} (BASE)", t.settings[i].label())
        ));
    }
    s.push('\n');
    for (d, name) in t.directions.iter().enumerate() {
        s.push_str(&format!("{name:<w$}"));
        for &i in &others {
            s.push_str(&format!(
                " {:>16}",
                paired_cell(t.spbleu[d][i], t.spbleu[d][base])
            ));
        }
        s.push('\n');
    }
    Some(s)
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    if a.comparison.is_none() && a.evals.is_empty() {
        return Err(CliError::usage(
            "usage",
            "nothing to report: pass --comparison or --eval",
        ));
    }
    create_dir(&a.out)?;
    if let Some(p) = &a.comparison {
        let t = ComparisonTable::from_json(&read(p)?)?;
        let series: Vec<String> = t.settings.iter().map(|s| s.label().to_string()).collect();
        write(
            &a.out.join("chart.svg"),
            &grouped_bars(
                "spBLEU per direction",
                "spBLEU",
                &t.directions,
                &series,
                &t.spbleu,
            ),
        )?;
        write(&a.out.join("table.txt"), &t.to_text())?;
        write(&a.out.join("table.csv"), &t.to_csv()?)?;
        if let Some(pt) = paired_text(&t) {
            write(&a.out.join("paired.txt"), &pt)?;
        }
        print!("{}", t.to_text());
    }
    if !a.evals.is_empty() {
        let mut reports = Vec::new();
        for p in &a.evals {
            let rf: ReportFile = serde_json::from_str(&read(p)?)
                .map_err(|e| CliError::usage("format", format!("{}: {e}", p.display())))?;
            reports.push(rf.report);
        }
        let groups: Vec<String> = reports.iter().map(|r| r.direction.clone()).collect();
        let values: Vec<Vec<f64>> = reports.iter().map(|r| vec![r.spbleu, r.spchrf]).collect();
        write(
            &a.out.join("eval_chart.svg"),
            &grouped_bars(
                "Scores per direction",
                "score",
                &groups,
                &["spBLEU".into(), "spCHRF".into()],
                &values,
            ),
        )?;
        write(&a.out.join("eval_table.txt"), &reports_to_text(&reports))?;
        write(&a.out.join("eval_table.csv"), &reports_to_csv(&reports)?)?;
        print!("{}", reports_to_text(&reports));
    }
    let mut m = ctx.manifest(
        "report",
        json!({"comparison": a.comparison, "evals": a.evals}),
    )?;
    m.hash_dir(&a.out)?;
    m.write(&a.out)?;
    Ok(())
}
