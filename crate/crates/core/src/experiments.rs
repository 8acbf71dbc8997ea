//! Ablation and stage-count exploration harnesses.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::check_stage_count;
use crate::error::{Error, Result};
use crate::evaluation::{average_reports, evaluate_model, EvalConfig, MetricReport, WindowSplits};
use crate::model::{Mgnet, ModelConfig, Variant};
use crate::training::{fit, EpochRecord, TrainConfig};

/// Shared settings for every row of a table.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub dataset: String,
    pub variant: String,
    pub k: usize,
    #[serde(rename = "mse_0.5")]
    pub mse_05: Option<f64>,
    #[serde(rename = "mse_1.0")]
    pub mse_10: Option<f64>,
    #[serde(rename = "mse_1.5")]
    pub mse_15: Option<f64>,
    pub c_mse: f64,
    pub cf_mse: f64,
    pub seeds: String,
}

impl ExperimentRow {
    pub fn from_report(dataset: &str, variant: &str, k: usize, seeds: &[u64], r: &MetricReport) -> Self {
        Self {
            dataset: dataset.to_string(),
            variant: variant.to_string(),
            k,
            mse_05: r.mse_at(0.5),
            mse_10: r.mse_at(1.0),
            mse_15: r.mse_at(1.5),
            c_mse: r.c_mse,
            cf_mse: r.cf_mse,
            seeds: seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mse_05, self.mse_10, self.mse_15]
            .iter()
            .flatten()
            .chain([&self.c_mse, &self.cf_mse])
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
    /// Checkpoint paths behind each row, one per seed.
    pub checkpoints: Vec<Vec<PathBuf>>,
}

impl ExperimentTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

pub fn write_train_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains `model` once per seed, saves each best checkpoint under `dir` and
/// returns the seed-averaged test report.
pub fn train_and_evaluate(
    spec: &ExperimentSpec,
    model: &ModelConfig,
    data: &WindowSplits,
    dir: &Path,
) -> Result<(MetricReport, Vec<PathBuf>)> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut reports = Vec::new();
    let mut paths = Vec::new();
    for &seed in &spec.seeds {
        let run_dir = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&run_dir)?;
        let mut m = Mgnet::new(model.clone(), DType::F32, seed)?;
        let train = TrainConfig { seed, ..spec.train.clone() };
        let outcome = fit(&mut m, &data.train, &data.val, &train, &mut |_| {})?;
        let path = run_dir.join("model.safetensors");
        outcome.best.save(&path)?;
        write_train_log(&run_dir.join("train_log.csv"), &outcome.history)?;
        reports.push(evaluate_model(&m, &data.test, &spec.eval)?);
        paths.push(path);
    }
    Ok((average_reports(&reports)?, paths))
}

/// The four component combinations, each trained with the shared seeds.
pub fn run_ablation(spec: &ExperimentSpec, data: &WindowSplits) -> Result<ExperimentTable> {
    spec.model.clone().with_variant(Variant::Full).validate()?;
    let mut table = ExperimentTable::default();
    for v in Variant::ALL {
        let cfg = spec.model.clone().with_variant(v);
        log::info!("ablation: training {}", v.label());
        let dir = spec.out_dir.join(format!("ablation_{}", slug(v.label())));
        let (report, paths) = train_and_evaluate(spec, &cfg, data, &dir)?;
        table.rows.push(ExperimentRow::from_report(
            &spec.dataset,
            v.label(),
            cfg.goal_count(),
            &spec.seeds,
            &report,
        ));
        table.checkpoints.push(paths);
    }
    Ok(table)
}

/// One full-model row per stage count; every `k` is checked before training.
pub fn run_exploration(spec: &ExperimentSpec, data: &WindowSplits, ks: &[usize]) -> Result<ExperimentTable> {
    if ks.is_empty() {
        return Err(Error::Config("no stage counts given".into()));
    }
    for &k in ks {
        check_stage_count(spec.model.pred_len, k)?;
    }
    let mut table = ExperimentTable::default();
    for &k in ks {
        let cfg = ModelConfig {
            goals: k,
            ..spec.model.clone().with_variant(Variant::Full)
        };
        log::info!("exploration: training k={k}");
        let dir = spec.out_dir.join(format!("explore_k{k}"));
        let (report, paths) = train_and_evaluate(spec, &cfg, data, &dir)?;
        table
            .rows
            .push(ExperimentRow::from_report(&spec.dataset, Variant::Full.label(), k, &spec.seeds, &report));
        table.checkpoints.push(paths);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_k_rejected_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            dataset: "synthetic".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0],
            out_dir: dir.path().to_path_buf(),
        };
        let empty = WindowSplits {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        assert!(matches!(run_exploration(&spec, &empty, &[1, 4]), Err(Error::Config(_))));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let table = ExperimentTable {
            rows: vec![ExperimentRow {
                dataset: "d".into(),
                variant: "BL".into(),
                k: 1,
                mse_05: Some(1.0),
                mse_10: Some(2.0),
                mse_15: None,
                c_mse: 3.0,
                cf_mse: 4.0,
                seeds: "0;1".into(),
            }],
            checkpoints: vec![vec![]],
        };
        let p = dir.path().join("t.csv");
        table.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("dataset,variant,k,mse_0.5,mse_1.0,mse_1.5,c_mse,cf_mse,seeds"));
        assert_eq!(lines.next(), Some("d,BL,1,1.0,2.0,,3.0,4.0,0;1"));
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("BL+AT+ES"), "bl_at_es");
    }
}
