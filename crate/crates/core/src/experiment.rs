//! Run directories and experiment orchestration.
//!
//! A run directory holds
//!
//! ```text
//! config.echo            the config text exactly as given
//! config.resolved.toml   the effective config (defaults and overrides applied)
//! run.json               fingerprint, seed, normalization stats, descriptor hashes
//! metrics.jsonl          one line per pretraining epoch
//! checkpoints/           epoch_NNNN.ckpt (gated) and final.ckpt
//! reports/               EvalReport JSON files
//! traces/augs.jsonl      per-view augmentation traces (optional)
//! ```
//!
//! Every artifact carries the config fingerprint; [`verify_run`] recomputes
//! it from `config.resolved.toml` and checks them all.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{channel_stats, AugConfig};
use crate::config::{parse_config_str, RunConfig};
use crate::data::{load_manifest, DatasetManifest, EvalReport, ManifestFormat};
use crate::downstream::{
    load_task_labels, run_downstream, run_face_verification, DownstreamMode, TaskLabel,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Encoder};
use crate::pretrain::{EpochStats, PretrainData, Pretrainer, Strategies, ViewTrace};
use crate::store::FrameStore;
use crate::synth::{generate_corpus, load_labels, FrameLabel};

pub const CONFIG_ECHO: &str = "config.echo";
pub const CONFIG_RESOLVED: &str = "config.resolved.toml";
pub const RUN_INFO: &str = "run.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
pub const REPORTS: &str = "reports";
pub const TRACES: &str = "traces";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Manifest, pixels and labels for a run.
pub struct LoadedData {
    pub manifest: DatasetManifest,
    pub store: FrameStore,
    /// Generator labels, present for synthetic corpora.
    pub synth_labels: Option<BTreeMap<String, FrameLabel>>,
    pub task_labels: Option<BTreeMap<String, TaskLabel>>,
}

fn task_labels_from_synth(labels: &BTreeMap<String, FrameLabel>) -> BTreeMap<String, TaskLabel> {
    labels
        .values()
        .map(|l| {
            (
                l.key.clone(),
                TaskLabel {
                    key: l.key.clone(),
                    expression_class: Some(l.expression_class),
                    valence: Some(l.valence),
                    arousal: Some(l.arousal),
                },
            )
        })
        .collect()
}

/// Loads the configured manifest or generates the synthetic corpus.
/// `labels_override` replaces `data.labels`.
pub fn load_data(cfg: &RunConfig, labels_override: Option<&Path>) -> Result<LoadedData> {
    let labels_path = labels_override.or(cfg.data.labels.as_deref());
    let Some(mpath) = &cfg.data.manifest else {
        let corpus = generate_corpus(&cfg.data.synthetic)?;
        let store = FrameStore::load(&corpus.manifest, None, Some(&corpus.labels))?;
        let task = match labels_path {
            Some(p) => load_task_labels(p)?,
            None => task_labels_from_synth(&corpus.labels),
        };
        return Ok(LoadedData {
            manifest: corpus.manifest,
            store,
            synth_labels: Some(corpus.labels),
            task_labels: Some(task),
        });
    };
    let fmt = ManifestFormat::from_path(mpath).ok_or_else(|| {
        Error::Validation(format!("{}: manifest must be .csv or .jsonl", mpath.display()))
    })?;
    let manifest = load_manifest(mpath, fmt)?;
    let is_csv = |p: &Path| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (synth, task) = match labels_path {
        Some(p) if !is_csv(p) => match load_labels(p) {
            Ok(l) => {
                let t = task_labels_from_synth(&l);
                (Some(l), Some(t))
            }
            Err(_) => (None, Some(load_task_labels(p)?)),
        },
        Some(p) => (None, Some(load_task_labels(p)?)),
        None => (None, None),
    };
    let root = cfg
        .data
        .image_root
        .clone()
        .or_else(|| mpath.parent().map(Path::to_path_buf));
    let store = FrameStore::load(&manifest, root.as_deref(), synth.as_ref())?;
    Ok(LoadedData {
        manifest,
        store,
        synth_labels: synth,
        task_labels: task,
    })
}

/// The augmentation config with normalization statistics filled in from
/// the corpus when the config leaves them unset.
pub fn resolve_normalization(aug: &AugConfig, store: &FrameStore) -> AugConfig {
    let mut out = aug.clone();
    if out.mean.is_none() || out.std.is_none() {
        let (m, s) = channel_stats(store.images());
        out.mean.get_or_insert(m);
        out.std.get_or_insert(s);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_fingerprint: String,
    pub seed: u64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub records: usize,
    pub descriptor_hash_start: Option<String>,
    pub descriptor_hash_end: Option<String>,
    pub epochs_completed: usize,
}

#[derive(Serialize, Deserialize)]
struct MetricsLine {
    config_fingerprint: String,
    #[serde(flatten)]
    stats: EpochStats,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    config_fingerprint: String,
    #[serde(flatten)]
    trace: ViewTrace,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout and writes both config files.
    pub fn create(root: &Path, cfg: &RunConfig, echo: &str) -> Result<Self> {
        for d in [CHECKPOINTS, REPORTS] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let dir = RunDir {
            root: root.to_path_buf(),
        };
        dir.write(CONFIG_ECHO, echo)?;
        dir.write(CONFIG_RESOLVED, &cfg.to_toml())?;
        Ok(dir)
    }

    pub fn open(root: &Path) -> Self {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root.join(CHECKPOINTS).join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINTS).join(FINAL_CHECKPOINT)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join(REPORTS).join(format!("{name}.json"))
    }

    pub fn write_report(&self, name: &str, report: &EvalReport) -> Result<PathBuf> {
        let p = self.report_path(name);
        fs::write(&p, report.to_json()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Writes a report produced under `cfg`. When `cfg` differs from the
    /// run's own config it is stored next to the report as
    /// `<name>.config.toml`, which `verify_run` checks the report against.
    pub fn write_report_for(&self, name: &str, report: &EvalReport, cfg: &RunConfig) -> Result<PathBuf> {
        let side = self.report_config_path(name);
        if cfg.fingerprint() != self.config()?.fingerprint() {
            fs::write(&side, cfg.to_toml()).map_err(|e| Error::io(&side, e))?;
        } else if side.exists() {
            fs::remove_file(&side).map_err(|e| Error::io(&side, e))?;
        }
        self.write_report(name, report)
    }

    pub fn report_config_path(&self, name: &str) -> PathBuf {
        self.root.join(REPORTS).join(format!("{name}.config.toml"))
    }

    /// Effective config of an existing run.
    pub fn config(&self) -> Result<RunConfig> {
        let p = self.root.join(CONFIG_RESOLVED);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        parse_config_str(&text, Vec::new(), None)
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainOptions {
    pub trace_augmentations: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub history: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub info: RunInfo,
}

/// Pretrains an encoder into `dir`.
pub fn pretrain_run(cfg: &RunConfig, data: &LoadedData, dir: &RunDir, opts: PretrainOptions) -> Result<PretrainSummary> {
    let fp = cfg.fingerprint();
    let mut setup = cfg.pretrain_setup();
    setup.aug = resolve_normalization(&cfg.augmentation, &data.store);
    let pdata = PretrainData::new(&setup, &data.manifest, &data.store, data.synth_labels.as_ref())?;
    let hash_start = pdata.descriptor_hash();
    let mut trainer = Pretrainer::new(&setup, &pdata)?;
    let metrics = dir.root.join(METRICS);
    let _ = fs::remove_file(&metrics);
    let mut trace_out = if opts.trace_augmentations {
        let p = dir.root.join(TRACES);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        let p = p.join("augs.jsonl");
        Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
    } else {
        None
    };
    let mut history = Vec::with_capacity(cfg.pretrain.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=cfg.pretrain.epochs {
        let stats = trainer.run_epoch(epoch, &mut |b| {
            if let Some((w, p)) = trace_out.as_mut() {
                for t in &b.traces {
                    let line = serde_json::to_string(&TraceLine {
                        config_fingerprint: fp.clone(),
                        trace: t.clone(),
                    })
                    .expect("trace serializes");
                    writeln!(w, "{line}").map_err(|e| Error::io(&*p, e))?;
                }
            }
            Ok(())
        })?;
        log::info!(
            "epoch {epoch}: loss {:.4} (l1 {:.4}, l2 {:.4}) top1 {:.3} lr {:.2e}",
            stats.loss,
            stats.l1,
            stats.l2,
            stats.top1,
            stats.lr
        );
        let line = serde_json::to_string(&MetricsLine {
            config_fingerprint: fp.clone(),
            stats: stats.clone(),
        })
        .expect("metrics serialize");
        append_line(&metrics, &line)?;
        if trainer.policy.should_save(epoch, stats.top1) {
            let p = dir.checkpoint_path(epoch);
            trainer.encoder.to_checkpoint(&fp, epoch).save(&p)?;
            checkpoints.push(p);
        }
        history.push(stats);
    }
    if let Some((mut w, p)) = trace_out {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    let hash_end = pdata.descriptor_hash();
    if hash_start != hash_end {
        return Err(Error::Contract("frozen descriptor changed during pretraining".into()));
    }
    let final_checkpoint = dir.final_checkpoint();
    trainer
        .encoder
        .to_checkpoint(&fp, cfg.pretrain.epochs)
        .save(&final_checkpoint)?;
    let info = RunInfo {
        config_fingerprint: fp,
        seed: cfg.seed,
        mean: setup.aug.mean_or_default(),
        std: setup.aug.std_or_default(),
        records: data.manifest.len(),
        descriptor_hash_start: hash_start,
        descriptor_hash_end: hash_end,
        epochs_completed: history.len(),
    };
    dir.write(RUN_INFO, &serde_json::to_string_pretty(&info).expect("run info serializes"))?;
    Ok(PretrainSummary {
        history,
        checkpoints,
        final_checkpoint,
        info,
    })
}

pub fn load_encoder(checkpoint: &Path) -> Result<Encoder> {
    Encoder::from_checkpoint(&Checkpoint::load(checkpoint)?)
}

/// Downstream probe or finetune of a checkpoint with the config's
/// `downstream` section (`mode` overrides it).
pub fn probe_run(
    cfg: &RunConfig,
    data: &LoadedData,
    encoder: Encoder,
    mode: Option<DownstreamMode>,
) -> Result<EvalReport> {
    let labels = data
        .task_labels
        .as_ref()
        .ok_or_else(|| Error::Validation("downstream evaluation needs labels (data.labels or --labels)".into()))?;
    let mut ds = cfg.downstream.clone();
    if let Some(m) = mode {
        ds.mode = m;
    }
    let aug = resolve_normalization(&cfg.augmentation, &data.store);
    let out = run_downstream(encoder, &data.manifest, &data.store, labels, &ds, &aug, cfg.seed, &cfg.fingerprint())?;
    let mut report = out.report;
    report.label = Some(format!("{:?}", ds.mode).to_ascii_lowercase());
    Ok(report)
}

pub fn eval_fr_run(cfg: &RunConfig, data: &LoadedData, encoder: &Encoder) -> Result<EvalReport> {
    let aug = resolve_normalization(&cfg.augmentation, &data.store);
    run_face_verification(
        encoder,
        &data.manifest,
        &data.store,
        &cfg.downstream.fr,
        &aug,
        cfg.seed,
        &cfg.fingerprint(),
    )
}

/// One row of an experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRow {
    pub label: String,
    /// Strategy toggles by name; unnamed toggles keep the base value.
    #[serde(default)]
    pub toggles: BTreeMap<String, bool>,
    /// Dotted-key overrides, e.g. `"loss.n_fn" = 2`.
    #[serde(default)]
    pub set: BTreeMap<String, toml::Value>,
}

/// Matrix file: a base config plus rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    /// Base config path, relative to the matrix file.
    pub base: PathBuf,
    /// Also run the face-verification probe per row.
    #[serde(default = "yes")]
    pub face_verification: bool,
    #[serde(rename = "row")]
    pub rows: Vec<MatrixRow>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub strategies: Strategies,
    pub config_fingerprint: String,
    pub reports: Vec<EvalReport>,
    pub error: Option<String>,
}

/// Row configs built from the base text; all rows are validated before
/// anything runs.
pub fn matrix_configs(base_text: &str, base_dir: Option<&Path>, rows: &[MatrixRow]) -> Result<Vec<(String, RunConfig)>> {
    if rows.is_empty() {
        return Err(Error::Validation("matrix has no rows".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for row in rows {
        if !seen.insert(row.label.clone()) {
            return Err(Error::Validation(format!("duplicate matrix row label {:?}", row.label)));
        }
        let mut value: toml::Value = toml::from_str(base_text).map_err(|e| Error::Parse {
            line: 0,
            message: e.message().to_string(),
        })?;
        for (k, v) in &row.set {
            set_dotted(&mut value, k, v.clone())
                .map_err(|e| Error::Validation(format!("row {:?}: {e}", row.label)))?;
        }
        let text = toml::to_string(&value).expect("toml value serializes");
        let mut cfg = parse_config_str(&text, std::env::vars(), base_dir)
            .map_err(|e| Error::Validation(format!("row {:?}: {e}", row.label)))?;
        for (name, on) in &row.toggles {
            cfg.pretrain
                .strategies
                .set(name, *on)
                .map_err(|e| Error::Validation(format!("row {:?}: {e}", row.label)))?;
        }
        cfg.validate()
            .map_err(|e| Error::Validation(format!("row {:?}: {e}", row.label)))?;
        out.push((row.label.clone(), cfg));
    }
    Ok(out)
}

fn set_dotted(root: &mut toml::Value, key: &str, v: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed dotted key"));
    }
    let mut node = root;
    for seg in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "crosses a scalar"))?
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(key, "crosses a scalar"))?
        .insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

/// Runs every row (pretrain, downstream probe, optionally FR) under
/// `out_dir/<label>`, then writes `matrix.json` and `matrix.csv`.
pub fn run_matrix(matrix_path: &Path, out_dir: &Path) -> Result<Vec<RowResult>> {
    let text = fs::read_to_string(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
    let spec: MatrixSpec = toml::from_str(&text).map_err(|e| Error::Validation(format!(
        "{}: {}",
        matrix_path.display(),
        e.message()
    )))?;
    let base_dir = matrix_path.parent().unwrap_or(Path::new("."));
    let base_path = base_dir.join(&spec.base);
    let base_text = fs::read_to_string(&base_path).map_err(|e| Error::io(&base_path, e))?;
    let base_cfg_dir = base_path.parent().map(Path::to_path_buf);
    let configs = matrix_configs(&base_text, base_cfg_dir.as_deref(), &spec.rows)?;
    run_matrix_configs(&configs, out_dir, spec.face_verification)
}

pub fn run_matrix_configs(configs: &[(String, RunConfig)], out_dir: &Path, face_verification: bool) -> Result<Vec<RowResult>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::new();
    for (label, cfg) in configs {
        log::info!("matrix row {label}: {:?}", cfg.pretrain.strategies);
        let mut res = RowResult {
            label: label.clone(),
            strategies: cfg.pretrain.strategies,
            config_fingerprint: cfg.fingerprint(),
            reports: Vec::new(),
            error: None,
        };
        let run = || -> Result<Vec<EvalReport>> {
            let dir = RunDir::create(&out_dir.join(label), cfg, &cfg.to_toml())?;
            let data = load_data(cfg, None)?;
            let summary = pretrain_run(cfg, &data, &dir, PretrainOptions::default())?;
            let enc = load_encoder(&summary.final_checkpoint)?;
            let mut reports = Vec::new();
            let mut r = probe_run(cfg, &data, enc.clone(), None)?;
            r.label = Some(label.clone());
            dir.write_report("downstream", &r)?;
            reports.push(r);
            if face_verification {
                let mut r = eval_fr_run(cfg, &data, &enc)?;
                r.label = Some(label.clone());
                dir.write_report("fr", &r)?;
                reports.push(r);
            }
            Ok(reports)
        };
        match run() {
            Ok(r) => res.reports = r,
            Err(e) => {
                log::error!("matrix row {label} failed: {e}");
                res.error = Some(e.to_string());
            }
        }
        results.push(res);
    }
    write_matrix_table(&results, out_dir)?;
    Ok(results)
}

fn write_matrix_table(results: &[RowResult], out_dir: &Path) -> Result<()> {
    let p = out_dir.join("matrix.json");
    fs::write(&p, serde_json::to_string_pretty(results).expect("results serialize"))
        .map_err(|e| Error::io(&p, e))?;
    let mut cols: Vec<String> = Vec::new();
    for r in results {
        for rep in &r.reports {
            for k in rep.metrics.keys() {
                let c = format!("{:?}.{k}", rep.task).to_ascii_lowercase();
                if !cols.contains(&c) {
                    cols.push(c);
                }
            }
        }
    }
    let p = out_dir.join("matrix.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
    let mut header = vec![
        "label".to_string(),
        "timeaug".into(),
        "hardneg".into(),
        "faceswap".into(),
        "maskfn".into(),
        "config_fingerprint".into(),
    ];
    header.extend(cols.iter().cloned());
    header.push("error".into());
    let csv_err = |e: csv::Error| Error::Validation(format!("{}: {e}", p.display()));
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        let s = r.strategies;
        let mut row = vec![
            r.label.clone(),
            s.timeaug.to_string(),
            s.hardneg.to_string(),
            s.faceswap.to_string(),
            s.maskfn.to_string(),
            r.config_fingerprint.clone(),
        ];
        for c in &cols {
            let v = r.reports.iter().find_map(|rep| {
                let prefix = format!("{:?}.", rep.task).to_ascii_lowercase();
                c.strip_prefix(&prefix).and_then(|k| rep.metrics.get(k))
            });
            row.push(v.map_or(String::new(), |x| format!("{x}")));
        }
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub config_fingerprint: String,
    pub artifacts_checked: usize,
    pub mismatches: Vec<String>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recomputes the run's fingerprint and checks it against every
/// checkpoint, report, metrics line and trace line.
pub fn verify_run(root: &Path) -> Result<VerifyOutcome> {
    let dir = RunDir::open(root);
    let fp = dir.config()?.fingerprint();
    let mut checked = 0;
    let mut bad = Vec::new();
    let mut check = |what: String, got: &str, want: &str| {
        checked += 1;
        if got != want {
            bad.push(format!("{what}: fingerprint {got} != {want}"));
        }
    };
    let list = |sub: &str, ext: &str| -> Result<Vec<PathBuf>> {
        let d = root.join(sub);
        if !d.is_dir() {
            return Ok(Vec::new());
        }
        let mut v: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(|e| Error::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .collect();
        v.sort();
        Ok(v)
    };
    for p in list(CHECKPOINTS, "ckpt")? {
        let ck = Checkpoint::load(&p)?;
        check(p.display().to_string(), &ck.header.config_fingerprint, &fp);
    }
    for p in list(REPORTS, "json")? {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r = EvalReport::from_json(&text)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let side = dir.report_config_path(stem);
        if side.exists() {
            let t = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let want = parse_config_str(&t, Vec::new(), None)?.fingerprint();
            check(format!("{} (config {})", p.display(), side.display()), &r.config_fingerprint, &want);
        } else {
            check(p.display().to_string(), &r.config_fingerprint, &fp);
        }
    }
    for (name, p) in [(METRICS, root.join(METRICS)), ("augs.jsonl", root.join(TRACES).join("augs.jsonl"))] {
        if !p.exists() {
            continue;
        }
        let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&p, e))?;
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("{name}: {e}"),
            })?;
            let got = v.get("config_fingerprint").and_then(|x| x.as_str()).unwrap_or("<missing>");
            check(format!("{name}:{}", i + 1), got, &fp);
        }
    }
    let info = root.join(RUN_INFO);
    if info.exists() {
        let text = fs::read_to_string(&info).map_err(|e| Error::io(&info, e))?;
        let ri: RunInfo = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        check(RUN_INFO.to_string(), &ri.config_fingerprint, &fp);
        if ri.descriptor_hash_start != ri.descriptor_hash_end {
            bad.push("run.json: descriptor hash changed during pretraining".into());
        }
    }
    Ok(VerifyOutcome {
        config_fingerprint: fp,
        artifacts_checked: checked,
        mismatches: bad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
seed = 3
[data.synthetic]
n_identities = 4
videos_per_id = 2
duration_s = 2.0
fps = 4.0
[augmentation]
resize = 64
crop = 56
[model]
width = 4
proj_dim = 16
[pretrain]
batch_size = 8
epochs = 2
steps_per_epoch = 1
checkpoint_every = 1
checkpoint_acc_gate = 0.0
descriptor_width = 4
[downstream]
epochs = 1
batch_size = 16
[downstream.fr]
pairs = 20
"#;

    #[test]
    fn run_directory_round_trip_and_verify() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = parse_config_str(TINY, Vec::new(), None).unwrap();
        let dir = RunDir::create(tmp.path(), &cfg, TINY).unwrap();
        let data = load_data(&cfg, None).unwrap();
        let s = pretrain_run(&cfg, &data, &dir, PretrainOptions { trace_augmentations: true }).unwrap();
        assert_eq!(s.history.len(), 2);
        assert_eq!(s.checkpoints.len(), 2);
        assert_eq!(fs::read_to_string(tmp.path().join(CONFIG_ECHO)).unwrap(), TINY);
        let enc = load_encoder(&s.final_checkpoint).unwrap();
        let r = probe_run(&cfg, &data, enc.clone(), None).unwrap();
        dir.write_report("probe", &r).unwrap();
        let fr = eval_fr_run(&cfg, &data, &enc).unwrap();
        dir.write_report("fr", &fr).unwrap();
        let v = verify_run(tmp.path()).unwrap();
        assert!(v.ok(), "{:?}", v.mismatches);
        assert!(v.artifacts_checked >= 3 + 2 + 2 + 1);

        let mut other = r.clone();
        other.config_fingerprint = "deadbeef".into();
        dir.write_report("tampered", &other).unwrap();
        let v = verify_run(tmp.path()).unwrap();
        assert_eq!(v.mismatches.len(), 1);
    }

    #[test]
    fn matrix_validates_rows_before_running() {
        let rows = vec![
            MatrixRow {
                label: "a".into(),
                toggles: [("timeaug".to_string(), false)].into_iter().collect(),
                set: BTreeMap::new(),
            },
            MatrixRow {
                label: "b".into(),
                toggles: [("teleport".to_string(), true)].into_iter().collect(),
                set: BTreeMap::new(),
            },
        ];
        assert!(matrix_configs(TINY, None, &rows).unwrap_err().is_validation());

        let rows = vec![
            MatrixRow {
                label: "base".into(),
                toggles: Strategies::names().iter().map(|n| (n.to_string(), false)).collect(),
                set: BTreeMap::new(),
            },
            MatrixRow {
                label: "nfn".into(),
                toggles: BTreeMap::new(),
                set: [("pretrain.batch_size".to_string(), toml::Value::Integer(16))]
                    .into_iter()
                    .collect(),
            },
        ];
        let cfgs = matrix_configs(TINY, None, &rows).unwrap();
        assert_eq!(cfgs[0].1.pretrain.strategies, Strategies::NONE);
        assert_eq!(cfgs[1].1.pretrain.batch_size, 16);
        assert_ne!(cfgs[0].1.fingerprint(), cfgs[1].1.fingerprint());
    }
}
