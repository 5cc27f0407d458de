//! The five subcommands as library functions.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cleargcd_core::datagen::{
    generate_dataset, make_gcd_split, swap_backgrounds, Dataset, GcdSplit, ShortcutSpec,
};
use cleargcd_core::eval::{hungarian_accuracy, predict_from_probs, EvalReport};
use cleargcd_core::gradcheck::{run_suite, seeded_fault, LossCheck};
use cleargcd_core::model::Model;
use cleargcd_core::trainer::{train_run, EpochRecord, Probe, RunOutput};
use cleargcd_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::dataset_io::{read_dataset, write_dataset};
use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(path))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

/// The dataset and split a config describes.
pub fn build_data(config: &RunConfig) -> Result<(Dataset, GcdSplit), CliError> {
    let d = &config.data;
    let dataset = generate_dataset(&d.spec())?;
    let split = make_gcd_split(
        &dataset,
        d.known_fraction(),
        d.labeled_fraction,
        d.split_seed(),
    )?;
    Ok((dataset, split))
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (dataset, split) = build_data(config)?;
    write_dataset(out, &dataset, &split)?;
    write_file(&out.join(RESOLVED_CONFIG), config.resolved_json())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub no_sva: bool,
    pub no_ssr: bool,
    /// Log real elapsed milliseconds; otherwise `wall_ms` is 0 so logs
    /// stay byte-identical across runs.
    pub record_wall_time: bool,
}

impl TrainOptions {
    pub fn apply(&self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        if self.no_sva {
            c.sva.enabled = false;
        }
        if self.no_ssr {
            c.ssr.enabled = false;
        }
        c
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsLine {
    pub epoch: usize,
    pub step: u64,
    pub l_rep_u: f64,
    pub l_rep_s: f64,
    pub l_cls_u: f64,
    pub l_cls_s: f64,
    pub h_mean_entropy: f64,
    pub l_kl: f64,
    pub l_ssr_pos: f64,
    pub l_ssr_neg: f64,
    pub total: f64,
    pub probe_all: f64,
    pub probe_old: f64,
    pub probe_new: f64,
    pub shortcut_gap: f64,
    pub wall_ms: u64,
}

impl MetricsLine {
    fn new(r: &EpochRecord, wall_ms: u64) -> Self {
        let p = &r.parts;
        let probe = r.probe.expect("the cli always probes");
        Self {
            epoch: r.epoch,
            step: r.step,
            l_rep_u: p.l_rep_u,
            l_rep_s: p.l_rep_s,
            l_cls_u: p.l_cls_u,
            l_cls_s: p.l_cls_s,
            h_mean_entropy: p.h_mean_entropy,
            l_kl: p.l_kl,
            l_ssr_pos: p.l_ssr_pos,
            l_ssr_neg: p.l_ssr_neg,
            total: r.total,
            probe_all: probe.all,
            probe_old: probe.old,
            probe_new: probe.new,
            shortcut_gap: probe.shortcut_gap,
            wall_ms,
        }
    }
}

pub struct TrainOutcome {
    pub run: RunOutput,
    pub config: RunConfig,
    pub config_sha256: String,
}

/// Trains on `split` and writes `config.resolved.json`, `metrics.jsonl`,
/// `steps.jsonl` and `checkpoint/` under `out`.
pub fn train_on(
    config: &RunConfig,
    options: TrainOptions,
    spec: &ShortcutSpec,
    split: &GcdSplit,
    out: &Path,
) -> Result<TrainOutcome, CliError> {
    let config = options.apply(config);
    let input = spec.image_len();
    let settings = config.settings(split.num_classes, input);
    settings.validate()?;
    make_dir(out)?;
    let resolved = config.resolved_json();
    let config_sha256 = sha256_hex(resolved.as_bytes());
    write_file(&out.join(RESOLVED_CONFIG), &resolved)?;

    let probe = Probe::from_split(split, spec, config.eval.probe_size, config.eval.probe_seed)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;
    let mut io_error = None;
    let start = Instant::now();
    let run = train_run(&settings, &split.training_data(), Some(&probe), |record| {
        let wall_ms = if options.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let line =
            serde_json::to_string(&MetricsLine::new(record, wall_ms)).expect("metrics serialize");
        log::info!(
            "epoch {} total {:.4} all {:.3} new {:.3} gap {:.3}",
            record.epoch,
            record.total,
            record.probe.map_or(0.0, |p| p.all),
            record.probe.map_or(0.0, |p| p.new),
            record.probe.map_or(0.0, |p| p.shortcut_gap),
        );
        if io_error.is_none() {
            if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
                io_error = Some(e);
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(CliError::io(&metrics_path)(e));
    }

    let mut steps = String::new();
    for s in &run.steps {
        steps.push_str(&serde_json::to_string(s).expect("steps serialize"));
        steps.push('\n');
    }
    write_file(&out.join("steps.jsonl"), steps)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        dims: *run.model.dims(),
        num_classes: split.num_classes,
        param_count: run.model.dims().param_count(),
        train_seed: config.train.seed,
        data_seed: spec.seed,
        tau_s: config.loss.tau_s,
        config_sha256: config_sha256.clone(),
    };
    write_checkpoint(&out.join("checkpoint"), &run.model, &meta)?;
    Ok(TrainOutcome {
        run,
        config,
        config_sha256,
    })
}

pub fn train(
    config: &RunConfig,
    options: TrainOptions,
    data_dir: &Path,
    out: &Path,
) -> Result<TrainOutcome, CliError> {
    let (dataset, split) = read_dataset(data_dir)?;
    if dataset.spec != config.data.spec() {
        log::warn!(
            "dataset in {} differs from the config's data section; using the dataset",
            data_dir.display()
        );
    }
    train_on(config, options, &dataset.spec, &split, out)
}

/// `EvalReport` fields plus provenance of the scored checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    #[serde(flatten)]
    pub report: EvalReport,
    /// All-class accuracy on the background-swapped copy of `D_u`.
    pub acc_all_swapped: f64,
    pub swap_seed: u64,
    pub config_sha256: String,
    pub checkpoint: String,
}

/// Scores `model` on all of `D_u` and on its background-swapped copy.
pub fn evaluate_split(
    model: &Model,
    tau_s: f64,
    spec: &ShortcutSpec,
    split: &GcdSplit,
    swap_seed: u64,
) -> Result<(EvalReport, f64), CliError> {
    let truths = split.unlabeled_truth();
    let clean: Vec<&Tensor> = split.unlabeled.iter().map(|s| &s.image).collect();
    let swapped_samples = swap_backgrounds(spec, &split.unlabeled, swap_seed)?;
    let swapped: Vec<&Tensor> = swapped_samples.iter().map(|s| &s.image).collect();
    let k = split.num_classes;
    let preds = predict_from_probs(&model.probabilities(&clean, tau_s)?);
    let mut report = hungarian_accuracy(&preds, &truths, &split.known_classes, k)?;
    let preds = predict_from_probs(&model.probabilities(&swapped, tau_s)?);
    let swapped = hungarian_accuracy(&preds, &truths, &split.known_classes, k)?;
    report.shortcut_gap = Some(report.acc_all - swapped.acc_all);
    Ok((report, swapped.acc_all))
}

pub fn eval(
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    swap_seed: u64,
) -> Result<EvalDocument, CliError> {
    let (model, meta) = read_checkpoint(checkpoint)?;
    let (dataset, split) = read_dataset(data_dir)?;
    if meta.num_classes != split.num_classes || meta.dims.input != dataset.spec.image_len() {
        return Err(CliError::Failed(format!(
            "checkpoint expects {} classes of {}-value images, data has {} of {}",
            meta.num_classes,
            meta.dims.input,
            split.num_classes,
            dataset.spec.image_len()
        )));
    }
    let (report, acc_all_swapped) =
        evaluate_split(&model, meta.tau_s, &dataset.spec, &split, swap_seed)?;
    let doc = EvalDocument {
        report,
        acc_all_swapped,
        swap_seed,
        config_sha256: meta.config_sha256,
        checkpoint: checkpoint.display().to_string(),
    };
    let mut json = serde_json::to_string_pretty(&doc).expect("report serializes");
    json.push('\n');
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    write_file(out, json)?;
    Ok(doc)
}

/// Runs the finite-difference suite, optionally with a seeded wrong
/// backward rule.
pub fn gradcheck(
    instances: usize,
    seed: u64,
    fault_seed: Option<u64>,
) -> Result<Vec<LossCheck>, CliError> {
    Ok(run_suite(instances, seed, fault_seed.map(seeded_fault))?)
}

pub fn gradcheck_table(checks: &[LossCheck]) -> String {
    let mut s = String::from("loss               instances  failed  max_rel_error  result\n");
    for c in checks {
        let _ = writeln!(
            s,
            "{:<18} {:>9}  {:>6}  {:>13.3e}  {}",
            c.name,
            c.instances,
            c.failed_instances,
            c.max_rel_error,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Components,
    ReplaceCount,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Baseline,
    Sva,
    Ssr,
    Full,
}

impl Components {
    pub const ALL: [Components; 4] = [Self::Baseline, Self::Sva, Self::Ssr, Self::Full];

    fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Sva => "sva",
            Self::Ssr => "ssr",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Component names, replace counts or `β` values; components default
    /// to all four rows.
    #[serde(default)]
    pub values: Vec<serde_json::Value>,
    pub seeds: Vec<u64>,
}

/// One sweep setting: its label and the config it runs.
#[derive(Debug, Clone)]
pub struct Setting {
    pub label: String,
    pub config: RunConfig,
}

fn bad_value(i: usize, detail: impl Into<String>) -> CliError {
    CliError::Config {
        path: format!("values[{i}]"),
        detail: detail.into(),
    }
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            detail: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Expands the axis into settings derived from `base`.
    pub fn settings(&self, base: &RunConfig) -> Result<Vec<Setting>, CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config {
                path: "seeds".into(),
                detail: "at least one seed is required".into(),
            });
        }
        let mut out = Vec::new();
        match self.axis {
            Axis::Components => {
                let rows: Vec<Components> = if self.values.is_empty() {
                    Components::ALL.to_vec()
                } else {
                    self.values
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            serde_json::from_value(v.clone())
                                .map_err(|e| bad_value(i, e.to_string()))
                        })
                        .collect::<Result<_, _>>()?
                };
                for row in rows {
                    let mut config = base.clone();
                    config.sva.enabled = matches!(row, Components::Sva | Components::Full);
                    config.ssr.enabled = matches!(row, Components::Ssr | Components::Full);
                    out.push(Setting {
                        label: row.name().into(),
                        config,
                    });
                }
            }
            Axis::ReplaceCount => {
                for (i, v) in self.values.iter().enumerate() {
                    let m = v.as_u64().ok_or_else(|| {
                        bad_value(i, "replace_count must be a non-negative integer")
                    })?;
                    let mut config = base.clone();
                    config.sva.mask.replace_count = m as usize;
                    out.push(Setting {
                        label: format!("m={m}"),
                        config,
                    });
                }
            }
            Axis::Beta => {
                for (i, v) in self.values.iter().enumerate() {
                    let b = v
                        .as_f64()
                        .ok_or_else(|| bad_value(i, "beta must be a number"))?;
                    let mut config = base.clone();
                    config.loss.beta = b;
                    out.push(Setting {
                        label: format!("beta={b}"),
                        config,
                    });
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Config {
                path: "values".into(),
                detail: "the sweep has no settings".into(),
            });
        }
        for s in &out {
            s.config.validate().map_err(|e| match e {
                CliError::Config { path, detail } => CliError::Config {
                    path,
                    detail: format!("{detail} (setting {})", s.label),
                },
                other => other,
            })?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    /// A seed, or `mean` for the per-setting average.
    pub seed: String,
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub shortcut_gap: f64,
}

impl AblationRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}\n",
            self.setting, self.seed, self.acc_all, self.acc_old, self.acc_new, self.shortcut_gap
        )
    }
}

pub const CSV_HEADER: &str = "setting,seed,acc_all,acc_old,acc_new,shortcut_gap\n";

/// Every `(setting, seed)` cell trains in `out/<setting>/seed-<seed>/`; the
/// seed replaces the data, split and training seeds. Writes `ablation.csv`
/// with one row per cell followed by one mean row per setting.
pub fn ablate(
    config: &RunConfig,
    sweep: &SweepSpec,
    out: &Path,
) -> Result<Vec<AblationRow>, CliError> {
    let settings = sweep.settings(config)?;
    make_dir(out)?;
    write_file(&out.join(RESOLVED_CONFIG), config.resolved_json())?;
    let mut sweep_json = serde_json::to_string_pretty(sweep).expect("sweep serializes");
    sweep_json.push('\n');
    write_file(&out.join("sweep.json"), sweep_json)?;

    let mut rows = Vec::new();
    let mut means = Vec::new();
    for setting in &settings {
        let mut cells = Vec::new();
        for &seed in &sweep.seeds {
            let mut c = setting.config.clone();
            c.data.seed = seed;
            c.data.split_seed = None;
            c.train.seed = seed;
            let (dataset, split) = build_data(&c)?;
            let dir: PathBuf = out.join(&setting.label).join(format!("seed-{seed}"));
            let outcome = train_on(&c, TrainOptions::default(), &dataset.spec, &split, &dir)?;
            let (report, _) = evaluate_split(
                &outcome.run.model,
                c.loss.tau_s,
                &dataset.spec,
                &split,
                c.eval.probe_seed,
            )?;
            log::info!(
                "{} seed {seed}: all {:.3} old {:.3} new {:.3} gap {:.3}",
                setting.label,
                report.acc_all,
                report.acc_old,
                report.acc_new,
                report.shortcut_gap.unwrap_or(0.0)
            );
            cells.push(AblationRow {
                setting: setting.label.clone(),
                seed: seed.to_string(),
                acc_all: report.acc_all,
                acc_old: report.acc_old,
                acc_new: report.acc_new,
                shortcut_gap: report.shortcut_gap.unwrap_or(0.0),
            });
        }
        let n = cells.len() as f64;
        let mean = |f: fn(&AblationRow) -> f64| cells.iter().map(f).sum::<f64>() / n;
        means.push(AblationRow {
            setting: setting.label.clone(),
            seed: "mean".into(),
            acc_all: mean(|r| r.acc_all),
            acc_old: mean(|r| r.acc_old),
            acc_new: mean(|r| r.acc_new),
            shortcut_gap: mean(|r| r.shortcut_gap),
        });
        rows.extend(cells);
    }
    rows.extend(means);
    let mut csv = String::from(CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv());
    }
    write_file(&out.join("ablation.csv"), csv)?;
    Ok(rows)
}

/// Reads `CLEARGCD_THREADS`. Every kernel is single-threaded, so any
/// positive value is accepted and the effective count stays 1.
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("CLEARGCD_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config {
                path: "CLEARGCD_THREADS".into(),
                detail: format!("`{v}` is not a positive integer"),
            }),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_specs_expand() {
        let base = RunConfig::default();
        let s = SweepSpec::parse(r#"{"axis": "components", "seeds": [0, 1]}"#).unwrap();
        let labels: Vec<String> = s
            .settings(&base)
            .unwrap()
            .into_iter()
            .map(|s| s.label)
            .collect();
        assert_eq!(labels, ["baseline", "sva", "ssr", "full"]);
        let s =
            SweepSpec::parse(r#"{"axis": "beta", "values": [0, 0.25, 0.5, 1.0], "seeds": [0]}"#)
                .unwrap();
        let settings = s.settings(&base).unwrap();
        assert_eq!(settings.len(), 4);
        assert_eq!(settings[1].config.loss.beta, 0.25);
        let s = SweepSpec::parse(r#"{"axis": "replace_count", "values": [2, 6], "seeds": [0]}"#)
            .unwrap();
        assert_eq!(
            s.settings(&base).unwrap()[1].config.sva.mask.replace_count,
            6
        );
    }

    #[test]
    fn bad_sweeps_are_config_errors() {
        let code = |text: &str| match SweepSpec::parse(text)
            .and_then(|s| s.settings(&RunConfig::default()))
        {
            Err(e) => e.exit_code(),
            Ok(_) => 0,
        };
        assert_eq!(
            code(r#"{"axis": "temperature", "values": [1], "seeds": [0]}"#),
            2
        );
        assert_eq!(
            code(r#"{"axis": "beta", "values": ["x"], "seeds": [0]}"#),
            2
        );
        assert_eq!(code(r#"{"axis": "beta", "values": [0.5], "seeds": []}"#), 2);
        assert_eq!(
            code(r#"{"axis": "replace_count", "values": [99], "seeds": [0]}"#),
            2
        );
        assert_eq!(
            code(r#"{"axis": "components", "values": ["both"], "seeds": [0]}"#),
            2
        );
    }

    #[test]
    fn table_marks_failures() {
        let checks = gradcheck(1, 0, None).unwrap();
        let table = gradcheck_table(&checks);
        assert_eq!(table.lines().count(), checks.len() + 1);
        assert!(!table.contains("FAIL"));
    }
}
