//! Epoch loop for the BASE, BT and BT&REC settings.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tagmt_tensor::checkpoint::{write_atomic, Checkpoint};
use tagmt_tensor::rng::{rng_fork, stream_id};
use tagmt_tensor::{ParamStore, Real, Tape};

use crate::corpus::{Direction, LangTag, MonoStore, ParallelStore, Split};
use crate::decode::{DecodeConfig, ModelTranslator, Translator};
use crate::harness::synthetic::{off_target_rate, GroundTruth};
use crate::model::{Batch, Model, ModelConfig};
use crate::objectives::{
    append_audit, build_directions, format_translation, make_bt_examples, make_rec_examples,
    AuditRecord, BtConfig, ExampleKind, Exclusion, FinetuneSetting, RecConfig, TaggedExample,
};
use crate::optim::{lr_at, Accumulator, AdamW, AdamWConfig, ScheduleConfig};
use crate::tokenizer::{SubwordModel, EOS};
use crate::{metrics, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub languages: Vec<LangTag>,
    pub exclusions: Vec<Exclusion>,
    pub setting: FinetuneSetting,
    pub epochs: usize,
    pub bt: BtConfig,
    pub rec: RecConfig,
    pub optimizer: AdamWConfig,
    /// `total_steps = 0` stands for the number of optimizer steps the run
    /// will take.
    pub schedule: ScheduleConfig,
    pub batch_size_sentences: usize,
    pub accumulation_factor: usize,
    pub eval_every_steps: u64,
    pub patience_evals: usize,
    pub seed: u64,
    /// `vocab_size` is overwritten with the tokenizer's.
    pub model: ModelConfig,
    /// Dev sentences per direction decoded at the end of each epoch.
    pub monitor_sentences: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            languages: Vec::new(),
            exclusions: Vec::new(),
            setting: FinetuneSetting::Base,
            epochs: 3,
            bt: BtConfig::default(),
            rec: RecConfig::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig {
                warmup_steps: 0,
                total_steps: 0,
            },
            batch_size_sentences: 32,
            accumulation_factor: 1,
            eval_every_steps: 100,
            patience_evals: 100,
            seed: 13,
            model: ModelConfig::default(),
            monitor_sentences: 0,
        }
    }
}

pub const PRESETS: [&str; 3] = ["desk", "paper-baseline", "paper-final"];

impl ExperimentConfig {
    /// Named hyperparameter sets. `desk` is sized for a laptop CPU and the
    /// synthetic languages; the `paper-*` presets carry the published
    /// finetuning settings.
    pub fn preset(name: &str) -> Result<Self> {
        let base = ExperimentConfig::default();
        match name {
            "desk" => Ok(ExperimentConfig {
                epochs: 15,
                bt: BtConfig {
                    num_bt: vec![500],
                    start_epoch: 5,
                    max_new_tokens: 24,
                    ..BtConfig::default()
                },
                rec: RecConfig {
                    num_rec: 100,
                    ..RecConfig::default()
                },
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    clip_norm: Some(1.0),
                    ..AdamWConfig::default()
                },
                schedule: ScheduleConfig {
                    warmup_steps: 100,
                    total_steps: 0,
                },
                batch_size_sentences: 32,
                eval_every_steps: 100,
                patience_evals: 100,
                model: ModelConfig {
                    d_model: 64,
                    n_heads: 4,
                    n_enc_layers: 2,
                    n_dec_layers: 2,
                    d_ff: 128,
                    max_positions: 32,
                    dropout: 0.1,
                    ..ModelConfig::default()
                },
                monitor_sentences: 20,
                ..base
            }),
            "paper-baseline" => Ok(ExperimentConfig {
                epochs: 3,
                bt: BtConfig {
                    num_bt: vec![500],
                    num_sample: 2,
                    start_epoch: 2,
                    ..BtConfig::default()
                },
                rec: RecConfig::default(),
                optimizer: AdamWConfig {
                    lr: 5e-4,
                    ..AdamWConfig::default()
                },
                batch_size_sentences: 32,
                accumulation_factor: 8,
                patience_evals: 100,
                ..base
            }),
            "paper-final" => Ok(ExperimentConfig {
                epochs: 6,
                bt: BtConfig {
                    num_bt: vec![100, 50, 10],
                    num_sample: 2,
                    start_epoch: 4,
                    ..BtConfig::default()
                },
                rec: RecConfig::default(),
                optimizer: AdamWConfig {
                    lr: 3e-6,
                    ..AdamWConfig::default()
                },
                batch_size_sentences: 64,
                accumulation_factor: 64,
                patience_evals: 100,
                ..base
            }),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?} (one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// `{eng, fra}` when both are present, otherwise nothing.
    pub fn default_exclusions(langs: &[LangTag]) -> Vec<Exclusion> {
        let find = |c: &str| langs.iter().find(|l| l.code() == c).cloned();
        match (find("eng"), find("fra")) {
            (Some(e), Some(f)) => vec![(e, f)],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<&LangTag> = self.languages.iter().collect();
        if distinct.len() < 2 || distinct.len() != self.languages.len() {
            return Err(Error::Config(
                "languages must list at least two distinct tags".into(),
            ));
        }
        for (a, b) in &self.exclusions {
            if !distinct.contains(a) || !distinct.contains(b) {
                return Err(Error::Config(format!(
                    "exclusion {a}-{b} names an unknown language"
                )));
            }
        }
        if self.epochs == 0
            || self.batch_size_sentences == 0
            || self.accumulation_factor == 0
            || self.patience_evals == 0
        {
            return Err(Error::Config(
                "epochs, batch_size_sentences, accumulation_factor and patience_evals must be at least 1".into(),
            ));
        }
        if self.schedule.total_steps != 0 {
            self.schedule.validate()?;
        }
        self.bt.validate()?;
        self.rec.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }

    /// BT round index of `epoch` (1-based), if the epoch runs one.
    pub fn bt_round(&self, epoch: usize) -> Option<usize> {
        (self.setting.uses_bt() && epoch >= self.bt.start_epoch)
            .then(|| epoch - self.bt.start_epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub direction: String,
    pub spbleu: f64,
    pub off_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        seed: u64,
        config_hash: String,
        setting: FinetuneSetting,
        total_steps: u64,
    },
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
        lr: f64,
        tokens: usize,
    },
    Eval {
        step: u64,
        epoch: usize,
        dev_loss: f64,
        best_dev_loss: f64,
        improved: bool,
    },
    Round {
        epoch: usize,
        round: usize,
        kind: ExampleKind,
        requested: usize,
        examples: usize,
    },
    Epoch {
        epoch: usize,
        step: u64,
        scores: Vec<DirectionScore>,
    },
    Clock {
        epoch: usize,
        seconds: f64,
    },
    Stop {
        step: u64,
        epoch: usize,
        reason: String,
    },
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    /// `(step, loss)` for every optimizer step.
    pub fn loss_trace(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { step, loss, .. } => Some((*step, *loss)),
                _ => None,
            })
            .collect()
    }

    pub fn rounds(&self) -> Vec<(usize, ExampleKind, usize)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Round {
                    epoch,
                    kind,
                    requested,
                    ..
                } => Some((*epoch, *kind, *requested)),
                _ => None,
            })
            .collect()
    }

    pub fn evals(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { step, dev_loss, .. } => Some((*step, *dev_loss)),
                _ => None,
            })
            .collect()
    }

    /// Per-direction monitor scores recorded at the end of `epoch`.
    pub fn epoch_scores(&self, epoch: usize) -> Option<&[DirectionScore]> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Epoch {
                epoch: e, scores, ..
            } if *e == epoch => Some(scores.as_slice()),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(RunLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Where and how a run persists itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Receives `config.json`, `runlog.jsonl`, `audit.jsonl`, `best.ckpt`
    /// and the epoch checkpoint directory `last/`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last` when it exists.
    pub resume: bool,
    /// Return after this epoch's checkpoint has been written.
    pub stop_after_epoch: Option<usize>,
    /// Enables off-target rates in the epoch-end monitor.
    pub truth: Option<&'a GroundTruth>,
}

/// Result of [`run_experiment`]: the lowest-dev-loss weights and the log.
pub struct RunOutput<T: Real> {
    pub model: Model<T>,
    pub log: RunLog,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    epoch_done: usize,
    step: u64,
    best_dev_loss: f64,
    since_best: usize,
    stopped: bool,
    audit_lines: usize,
}

type Encoded = (Vec<u32>, Vec<u32>);

fn encode_side(tok: &SubwordModel, text: &str, max: usize) -> Vec<u32> {
    let mut ids = tok.encode(text);
    if ids.len() > max {
        ids.truncate(max - 1);
        ids.push(EOS);
    }
    ids
}

fn encode_examples(tok: &SubwordModel, ex: &[TaggedExample], max: usize) -> Vec<Encoded> {
    ex.iter()
        .map(|e| {
            (
                encode_side(tok, &e.input, max),
                encode_side(tok, &e.target, max),
            )
        })
        .collect()
}

/// Token-weighted mean loss over `data` without dropout.
pub fn dev_loss<T: Real>(model: &Model<T>, data: &[Encoded], batch_size: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = Batch::from_vecs(chunk)?;
        let k = batch.n_tokens();
        sum += model.eval_loss(&batch)? * k as f64;
        n += k;
    }
    if n == 0 {
        return Err(Error::Model("no dev tokens".into()));
    }
    Ok(sum / n as f64)
}

fn derived_seed(seed: u64, label: &str, idx: u64) -> u64 {
    rng_fork(seed, stream_id(label, idx)).next_u64()
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

struct Plan {
    directions: Vec<Direction>,
    train: Vec<TaggedExample>,
    dev: Vec<Encoded>,
    monitor: Vec<(Direction, Vec<String>, Vec<String>)>,
    mono_langs: usize,
}

fn plan(
    config: &ExperimentConfig,
    parallel: &ParallelStore,
    mono: &MonoStore,
    tok: &SubwordModel,
) -> Result<Plan> {
    config.validate()?;
    for l in &config.languages {
        if tok.lang_id(l).is_none() {
            return Err(Error::Config(format!("tokenizer has no tag for {l}")));
        }
    }
    let directions = build_directions(&config.languages, &config.exclusions)?;
    let wanted: BTreeSet<&Direction> = directions.iter().collect();
    let train: Vec<TaggedExample> = parallel
        .pairs_in(Split::Train)
        .filter(|p| wanted.contains(&p.direction))
        .map(format_translation)
        .collect();
    if train.is_empty() {
        return Err(Error::EmptyCorpus(
            "no training pairs for the configured directions".into(),
        ));
    }
    for d in &directions {
        if parallel.count(d, Some(Split::Train)) == 0 {
            log::warn!("direction {d} has no training pairs");
        }
    }
    let dev_ex: Vec<TaggedExample> = parallel
        .pairs_in(Split::Dev)
        .filter(|p| wanted.contains(&p.direction))
        .map(format_translation)
        .collect();
    if dev_ex.is_empty() {
        log::warn!("no dev pairs; early stopping disabled and the last weights are kept");
    }
    let dev = encode_examples(tok, &dev_ex, config.model.max_positions);
    let mut monitor = Vec::new();
    if config.monitor_sentences > 0 {
        for d in &directions {
            let pairs: Vec<_> = parallel
                .direction(d)
                .iter()
                .filter(|p| p.split == Split::Dev)
                .take(config.monitor_sentences)
                .collect();
            if !pairs.is_empty() {
                monitor.push((
                    d.clone(),
                    pairs.iter().map(|p| format_translation(p).input).collect(),
                    pairs.iter().map(|p| p.tgt_text.clone()).collect(),
                ));
            }
        }
    }
    let mono_langs = config
        .languages
        .iter()
        .filter(|l| !mono.train_texts(l).is_empty())
        .count();
    if config.setting.uses_bt() && mono_langs == 0 {
        return Err(Error::Config(format!(
            "setting {} needs monolingual data",
            config.setting
        )));
    }
    Ok(Plan {
        directions,
        train,
        dev,
        monitor,
        mono_langs,
    })
}

/// Optimizer steps of a run that is not stopped early.
fn count_steps(config: &ExperimentConfig, n_train: usize, mono_langs: usize) -> u64 {
    (1..=config.epochs)
        .map(|e| {
            let mut n = n_train;
            if let Some(r) = config.bt_round(e) {
                n += config.bt.num_bt_for_round(r) * mono_langs;
                if config.setting.uses_rec() {
                    n += config.rec.num_rec * mono_langs;
                }
            }
            ceil_div(
                ceil_div(n, config.batch_size_sentences),
                config.accumulation_factor,
            ) as u64
        })
        .sum()
}

fn monitor_scores<T: Real>(
    model: &Model<T>,
    tok: &SubwordModel,
    monitor: &[(Direction, Vec<String>, Vec<String>)],
    truth: Option<&GroundTruth>,
) -> Result<Vec<DirectionScore>> {
    let translator = ModelTranslator::new(model, tok);
    let mut out = Vec::new();
    for (d, inputs, refs) in monitor {
        let hyps: Vec<String> = translator
            .generate_batch(inputs, &DecodeConfig::greedy(), 0)?
            .into_iter()
            .map(|g| g.text)
            .collect();
        out.push(DirectionScore {
            direction: d.to_string(),
            spbleu: metrics::spbleu(&hyps, refs, tok)?,
            off_target: truth.map(|t| off_target_rate(&hyps, &d.tgt, t)),
        });
    }
    Ok(out)
}

struct Persist {
    dir: PathBuf,
}

impl Persist {
    fn last(&self) -> PathBuf {
        self.dir.join("last")
    }
    fn audit(&self) -> PathBuf {
        self.dir.join("audit.jsonl")
    }
    fn runlog(&self) -> PathBuf {
        self.dir.join("runlog.jsonl")
    }

    fn save_epoch<T: Real>(
        &self,
        model: &Model<T>,
        best: &ParamStore<T>,
        opt: &AdamW<T>,
        state: &TrainState,
        log: &RunLog,
        tok_hash: &str,
    ) -> Result<()> {
        let last = self.last();
        fs::create_dir_all(&last).map_err(|e| Error::io(&last, e))?;
        model
            .to_checkpoint(tok_hash)?
            .save(&last.join("params.ckpt"))?;
        params_checkpoint(best).save(&last.join("best_params.ckpt"))?;
        opt.state_checkpoint(&model.params)?
            .save(&last.join("optim.ckpt"))?;
        log.save(&last.join("runlog.jsonl"))?;
        write_atomic(
            &last.join("state.json"),
            serde_json::to_string_pretty(state)?.as_bytes(),
        )?;
        log.save(&self.runlog())
    }
}

fn params_checkpoint<T: Real>(p: &ParamStore<T>) -> Checkpoint<T> {
    let mut ck = Checkpoint::new();
    for (_, name, t) in p.iter() {
        ck.tensors.push((name.to_string(), t.clone()));
    }
    ck
}

fn restore_params<T: Real>(p: &mut ParamStore<T>, ck: &Checkpoint<T>) -> Result<()> {
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        let name = p.name(id).to_string();
        let t = ck
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        if t.shape() != p.get(id).shape() {
            return Err(Error::Format(format!("shape mismatch for {name}")));
        }
        *p.get_mut(id) = t.clone();
    }
    Ok(())
}

fn truncate_lines(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text.split_inclusive('\n').take(keep).collect();
    write_atomic(path, kept.as_bytes())?;
    Ok(())
}

/// Trains one setting end to end. Translation pairs of the training split
/// form every epoch; from `bt.start_epoch` each epoch adds one BT round
/// (and one REC round under BT&REC) generated with the current weights,
/// shuffled into the same stream. Dev loss is evaluated every
/// `eval_every_steps` optimizer steps and at each epoch end; training
/// stops after `patience_evals` evaluations without improvement, and the
/// returned model holds the best weights seen.
pub fn run_experiment<T: Real>(
    config: &ExperimentConfig,
    parallel: &ParallelStore,
    mono: &MonoStore,
    tok: &SubwordModel,
    opts: &RunOptions,
) -> Result<RunOutput<T>> {
    let mut config = config.clone();
    config.model.vocab_size = tok.vocab_size();
    let plan = plan(&config, parallel, mono, tok)?;
    let planned = count_steps(&config, plan.train.len(), plan.mono_langs);
    if config.schedule.total_steps == 0 {
        config.schedule.total_steps = planned.max(config.schedule.warmup_steps);
    }
    config.schedule.validate()?;
    let max_len = config.model.max_positions;
    let tok_hash = tok.hash();

    let mut model = Model::<T>::init(config.model.clone(), config.seed)?;
    let mut opt = AdamW::new(config.optimizer.clone(), &model.params, Model::<T>::decays)?;
    let mut acc = Accumulator::<T>::new(config.accumulation_factor)?;
    let mut best = model.params.clone();
    let mut state = TrainState {
        epoch_done: 0,
        step: 0,
        best_dev_loss: f64::INFINITY,
        since_best: 0,
        stopped: false,
        audit_lines: 0,
    };
    let mut log = RunLog::default();

    let persist = opts.out_dir.as_ref().map(|d| Persist { dir: d.clone() });
    if let Some(p) = &persist {
        fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
        let last = p.last();
        if opts.resume && last.join("state.json").exists() {
            let s = fs::read_to_string(last.join("state.json")).map_err(|e| Error::io(&last, e))?;
            state = serde_json::from_str(&s)?;
            let ck = Checkpoint::<T>::load(&last.join("params.ckpt"))?;
            let (m, h) = Model::<T>::from_checkpoint(&ck)?;
            if m.config != model.config || h != tok_hash {
                return Err(Error::Config(
                    "checkpoint does not match the configuration".into(),
                ));
            }
            model = m;
            restore_params(
                &mut best,
                &Checkpoint::load(&last.join("best_params.ckpt"))?,
            )?;
            opt.restore(&Checkpoint::load(&last.join("optim.ckpt"))?, &model.params)?;
            log = RunLog::load(&last.join("runlog.jsonl"))?;
            truncate_lines(&p.audit(), state.audit_lines)?;
            log::info!(
                "resuming after epoch {} at step {}",
                state.epoch_done,
                state.step
            );
        } else {
            let _ = fs::remove_file(p.audit());
            write_atomic(
                &p.dir.join("config.json"),
                serde_json::to_string_pretty(&config)?.as_bytes(),
            )?;
            write_atomic(&p.dir.join("tokenizer.txt"), tok.to_text().as_bytes())?;
        }
    }
    if state.epoch_done == 0 && log.records.is_empty() {
        log.push(LogRecord::Start {
            seed: config.seed,
            config_hash: config.hash(),
            setting: config.setting,
            total_steps: config.schedule.total_steps,
        });
    }
    log::info!(
        "{}: {} directions, {} training pairs, {} planned steps, {} parameters",
        config.setting,
        plan.directions.len(),
        plan.train.len(),
        planned,
        model.count_params()
    );

    let evaluate = |model: &Model<T>,
                    state: &mut TrainState,
                    best: &mut ParamStore<T>,
                    log: &mut RunLog,
                    epoch: usize|
     -> Result<()> {
        if plan.dev.is_empty() {
            *best = model.params.clone();
            return Ok(());
        }
        let dl = dev_loss(model, &plan.dev, 64)?;
        let improved = dl < state.best_dev_loss;
        if improved {
            state.best_dev_loss = dl;
            state.since_best = 0;
            *best = model.params.clone();
        } else {
            state.since_best += 1;
            if state.since_best >= config.patience_evals {
                state.stopped = true;
            }
        }
        log.push(LogRecord::Eval {
            step: state.step,
            epoch,
            dev_loss: dl,
            best_dev_loss: state.best_dev_loss,
            improved,
        });
        Ok(())
    };

    for epoch in state.epoch_done + 1..=config.epochs {
        if state.stopped {
            break;
        }
        let clock = Instant::now();
        let mut stream = plan.train.clone();
        let mut audit = Vec::new();
        if let Some(round) = config.bt_round(epoch) {
            let num = config.bt.num_bt_for_round(round);
            let translator = ModelTranslator::new(&model, tok);
            let bts = make_bt_examples(
                &translator,
                mono,
                &config.languages,
                &config.exclusions,
                &config.bt,
                num,
                derived_seed(config.seed, "bt-round", epoch as u64),
            )?;
            log.push(LogRecord::Round {
                epoch,
                round,
                kind: ExampleKind::Bt,
                requested: num,
                examples: bts.len(),
            });
            for b in bts {
                audit.push(AuditRecord {
                    input: b.example.input.clone(),
                    target: b.example.target.clone(),
                    kind: ExampleKind::Bt,
                    pivot: Some(b.pivot),
                    round,
                });
                stream.push(b.example);
            }
            if config.setting.uses_rec() {
                let mut rng = rng_fork(config.seed, stream_id("rec-round", epoch as u64));
                let recs = make_rec_examples(mono, &config.languages, &config.rec, &mut rng);
                log.push(LogRecord::Round {
                    epoch,
                    round,
                    kind: ExampleKind::Rec,
                    requested: config.rec.num_rec,
                    examples: recs.len(),
                });
                for r in recs {
                    audit.push(AuditRecord {
                        input: r.input.clone(),
                        target: r.target.clone(),
                        kind: ExampleKind::Rec,
                        pivot: None,
                        round,
                    });
                    stream.push(r);
                }
            }
        }
        if let Some(p) = &persist {
            if !audit.is_empty() {
                append_audit(&p.audit(), &audit)?;
                state.audit_lines += audit.len();
            }
        }
        stream.shuffle(&mut rng_fork(
            config.seed,
            stream_id("shuffle", epoch as u64),
        ));
        let encoded = encode_examples(tok, &stream, max_len);
        let n_batches = ceil_div(encoded.len(), config.batch_size_sentences);
        let (mut loss_sum, mut tok_sum) = (0.0, 0usize);
        let mut evaluated_at = None;
        for (b, chunk) in encoded.chunks(config.batch_size_sentences).enumerate() {
            let batch = Batch::from_vecs(chunk)?;
            let n = batch.n_tokens();
            let mut tape = Tape::new();
            let mut rng = rng_fork(
                config.seed,
                stream_id(&format!("dropout:{epoch}"), b as u64),
            );
            let loss = model.loss(&mut tape, &batch, Some(&mut rng))?;
            loss_sum += tape.value(loss).item().as_f64() * n as f64;
            tok_sum += n;
            let grads = tape.backward(loss, &model.params)?;
            acc.accumulate(&grads, n);
            if !(acc.ready() || b + 1 == n_batches) {
                continue;
            }
            let lr = lr_at(&config.schedule, config.optimizer.lr, state.step);
            opt.update(&mut model.params, &acc.flush()?, lr)?;
            state.step += 1;
            log.push(LogRecord::Step {
                step: state.step,
                epoch,
                loss: loss_sum / tok_sum.max(1) as f64,
                lr,
                tokens: tok_sum,
            });
            (loss_sum, tok_sum) = (0.0, 0);
            if config.eval_every_steps > 0 && state.step.is_multiple_of(config.eval_every_steps) {
                evaluate(&model, &mut state, &mut best, &mut log, epoch)?;
                evaluated_at = Some(state.step);
                if state.stopped {
                    break;
                }
            }
        }
        if evaluated_at != Some(state.step) {
            evaluate(&model, &mut state, &mut best, &mut log, epoch)?;
        }
        if !plan.monitor.is_empty() {
            let scores = monitor_scores(&model, tok, &plan.monitor, opts.truth)?;
            for s in &scores {
                log::debug!(
                    "epoch {epoch} {}: spBLEU {:.2} off-target {:?}",
                    s.direction,
                    s.spbleu,
                    s.off_target
                );
            }
            log.push(LogRecord::Epoch {
                epoch,
                step: state.step,
                scores,
            });
        }
        log.push(LogRecord::Clock {
            epoch,
            seconds: clock.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch} done at step {} (best dev loss {:.4})",
            state.step,
            state.best_dev_loss
        );
        state.epoch_done = epoch;
        if let Some(p) = &persist {
            p.save_epoch(&model, &best, &opt, &state, &log, &tok_hash)?;
        }
        if opts.stop_after_epoch == Some(epoch) {
            model.params = best;
            return Ok(RunOutput { model, log, config });
        }
    }
    log.push(LogRecord::Stop {
        step: state.step,
        epoch: state.epoch_done,
        reason: if state.stopped {
            "early_stop"
        } else {
            "epochs_done"
        }
        .into(),
    });
    model.params = best;
    if let Some(p) = &persist {
        model.save(&p.dir.join("best.ckpt"), &tok_hash)?;
        log.save(&p.runlog())?;
    }
    Ok(RunOutput { model, log, config })
}
