//! Test-split evaluation and the BASE / BT / BT&REC comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tagmt_tensor::Real;

use crate::corpus::{Direction, MonoStore, ParallelStore, Split};
use crate::decode::{DecodeConfig, ModelTranslator, Translator};
use crate::harness::synthetic::{off_target_rate, GroundTruth};
use crate::harness::train::{run_experiment, ExperimentConfig, RunLog, RunOptions};
use crate::metrics::{cell, score_direction, EvalReport};
use crate::model::Model;
use crate::objectives::{build_directions, format_translation, FinetuneSetting};
use crate::tokenizer::SubwordModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionEval {
    pub report: EvalReport,
    pub off_target: Option<f64>,
    pub hypotheses: Vec<String>,
}

/// Decodes the `split` pairs of `direction` and scores them.
pub fn evaluate_direction<T: Real>(
    model: &Model<T>,
    tok: &SubwordModel,
    parallel: &ParallelStore,
    direction: &Direction,
    split: Split,
    decode: &DecodeConfig,
    truth: Option<&GroundTruth>,
) -> Result<DirectionEval> {
    let pairs: Vec<_> = parallel
        .direction(direction)
        .iter()
        .filter(|p| p.split == split)
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no {split} pairs for {direction}"
        )));
    }
    let inputs: Vec<String> = pairs.iter().map(|p| format_translation(p).input).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.tgt_text.as_str()).collect();
    let hyps: Vec<String> = ModelTranslator::new(model, tok)
        .generate_batch(&inputs, decode, 0)?
        .into_iter()
        .map(|g| g.text)
        .collect();
    Ok(DirectionEval {
        report: score_direction(direction, &hyps, &refs, tok)?,
        off_target: truth.map(|t| off_target_rate(&hyps, &direction.tgt, t)),
        hypotheses: hyps,
    })
}

/// spBLEU (and off-target rate, for synthetic data) per direction and
/// setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub settings: Vec<FinetuneSetting>,
    pub directions: Vec<String>,
    /// `spbleu[d][s]` for direction `d` under setting `s`.
    pub spbleu: Vec<Vec<f64>>,
    pub off_target: Option<Vec<Vec<f64>>>,
}

impl ComparisonTable {
    pub fn get(&self, direction: &str, setting: FinetuneSetting) -> Option<f64> {
        let d = self.directions.iter().position(|x| x == direction)?;
        let s = self.settings.iter().position(|&x| x == setting)?;
        Some(self.spbleu[d][s])
    }

    /// Cellwise median of tables with the same shape (mean of the middle
    /// two for even counts).
    pub fn median(tables: &[ComparisonTable]) -> Result<ComparisonTable> {
        let first = tables
            .first()
            .ok_or_else(|| Error::Config("no tables to combine".into()))?;
        if tables
            .iter()
            .any(|t| t.settings != first.settings || t.directions != first.directions)
        {
            return Err(Error::Config("tables differ in shape".into()));
        }
        let med = |get: &dyn Fn(&ComparisonTable) -> f64| {
            let mut v: Vec<f64> = tables.iter().map(get).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        };
        let shape = |f: &dyn Fn(&ComparisonTable, usize, usize) -> f64| -> Vec<Vec<f64>> {
            (0..first.directions.len())
                .map(|d| {
                    (0..first.settings.len())
                        .map(|s| med(&|t| f(t, d, s)))
                        .collect()
                })
                .collect()
        };
        let off_target = if tables.iter().all(|t| t.off_target.is_some()) {
            Some(shape(&|t, d, s| {
                t.off_target.as_ref().expect("checked")[d][s]
            }))
        } else {
            None
        };
        Ok(ComparisonTable {
            settings: first.settings.clone(),
            directions: first.directions.clone(),
            spbleu: shape(&|t, d, s| t.spbleu[d][s]),
            off_target,
        })
    }

    /// Aligned text: one row per direction, one spBLEU column per setting.
    pub fn to_text(&self) -> String {
        let w = self
            .directions
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(9);
        let mut out = format!("{:<w$}", "direction");
        for s in &self.settings {
            write!(out, " {:>8}", s.label()).expect("string write");
        }
        if self.off_target.is_some() {
            for s in &self.settings {
                write!(out, " {:>12}", format!("off:{}", s.label())).expect("string write");
            }
        }
        out.push('\n');
        for (d, name) in self.directions.iter().enumerate() {
            write!(out, "{name:<w$}").expect("string write");
            for v in &self.spbleu[d] {
                write!(out, " {:>8}", cell(*v)).expect("string write");
            }
            if let Some(off) = &self.off_target {
                for v in &off[d] {
                    write!(out, " {:>12}", format!("{v:.3}")).expect("string write");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Wide CSV: `direction,BASE,BT,BT&REC[,off_target_*]`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["direction".to_string()];
        header.extend(self.settings.iter().map(|s| s.label().to_string()));
        if self.off_target.is_some() {
            header.extend(
                self.settings
                    .iter()
                    .map(|s| format!("off_target_{}", s.label())),
            );
        }
        w.write_record(&header)?;
        for (d, name) in self.directions.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(self.spbleu[d].iter().map(|v| format!("{v:.4}")));
            if let Some(off) = &self.off_target {
                row.extend(off[d].iter().map(|v| format!("{v:.4}")));
            }
            w.write_record(&row)?;
        }
        crate::corpus::csv_string(w)
    }

    /// Long-form chart data: `direction,setting,spbleu`.
    pub fn chart_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["direction", "setting", "spbleu"])?;
        for (d, name) in self.directions.iter().enumerate() {
            for (s, setting) in self.settings.iter().enumerate() {
                w.write_record([
                    name.as_str(),
                    setting.label(),
                    &format!("{:.4}", self.spbleu[d][s]),
                ])?;
            }
        }
        crate::corpus::csv_string(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub struct SettingRun {
    pub setting: FinetuneSetting,
    pub evals: BTreeMap<String, DirectionEval>,
    pub log: RunLog,
}

/// Trains `config` once per setting (everything else unchanged) and
/// evaluates every direction on the test split with greedy decoding.
/// Each setting's artifacts go to `out_dir/<setting>` when `out_dir` is
/// set.
pub fn compare_settings<T: Real>(
    config: &ExperimentConfig,
    settings: &[FinetuneSetting],
    parallel: &ParallelStore,
    mono: &MonoStore,
    tok: &SubwordModel,
    opts: &RunOptions,
) -> Result<(ComparisonTable, Vec<SettingRun>)> {
    if settings.is_empty() {
        return Err(Error::Config("no settings to compare".into()));
    }
    let directions = build_directions(&config.languages, &config.exclusions)?;
    let mut runs = Vec::new();
    for &setting in settings {
        let cfg = ExperimentConfig {
            setting,
            ..config.clone()
        };
        let run_opts = RunOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(setting.to_string())),
            ..opts.clone()
        };
        let out = run_experiment::<T>(&cfg, parallel, mono, tok, &run_opts)?;
        let mut evals = BTreeMap::new();
        for d in &directions {
            let e = evaluate_direction(
                &out.model,
                tok,
                parallel,
                d,
                Split::Test,
                &DecodeConfig::greedy(),
                opts.truth,
            )?;
            log::info!("{setting} {d}: spBLEU {:.2}", e.report.spbleu);
            evals.insert(d.to_string(), e);
        }
        runs.push(SettingRun {
            setting,
            evals,
            log: out.log,
        });
    }
    let names: Vec<String> = directions.iter().map(Direction::to_string).collect();
    let table = ComparisonTable {
        settings: settings.to_vec(),
        spbleu: names
            .iter()
            .map(|d| runs.iter().map(|r| r.evals[d].report.spbleu).collect())
            .collect(),
        off_target: opts.truth.map(|_| {
            names
                .iter()
                .map(|d| {
                    runs.iter()
                        .map(|r| r.evals[d].off_target.unwrap_or(0.0))
                        .collect()
                })
                .collect()
        }),
        directions: names,
    };
    Ok((table, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(v: f64) -> ComparisonTable {
        ComparisonTable {
            settings: FinetuneSetting::ALL.to_vec(),
            directions: vec!["sy1-sy2".into(), "sy2-sy1".into()],
            spbleu: vec![vec![v, v + 1.0, v + 2.0], vec![0.0, 0.0, 0.0]],
            off_target: None,
        }
    }

    #[test]
    fn table_shape_and_rendering() {
        let t = table(10.0);
        let text = t.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("BT&REC"));
        assert!(text.contains("11.00"));
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("direction,BASE,BT,BT&REC\n"));
        assert_eq!(t.chart_csv().unwrap().lines().count(), 7);
        assert_eq!(t.get("sy1-sy2", FinetuneSetting::Bt), Some(11.0));
        assert_eq!(
            ComparisonTable::from_json(&t.to_json().unwrap()).unwrap(),
            t
        );
    }

    #[test]
    fn median_of_three() {
        let m = ComparisonTable::median(&[table(1.0), table(9.0), table(4.0)]).unwrap();
        assert_eq!(m.spbleu[0], [4.0, 5.0, 6.0]);
        let m = ComparisonTable::median(&[table(1.0), table(3.0)]).unwrap();
        assert_eq!(m.spbleu[0][0], 2.0);
    }
}
