//! Downstream evaluation: linear-probe (frozen backbone) and finetune heads
//! for expression classification and valence/arousal regression, and the
//! L2-distance face-verification probe.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_downstream_view, AugConfig};
use crate::data::{DatasetManifest, EvalReport, EvalTask};
use crate::embedding::{l2_distance, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{
    accuracy, argmax, balanced_softmax_ce_grad, calibrate_threshold, ccc, ccc_loss_grad, macro_f1,
    rmse, verification_accuracy,
};
use crate::model::{embedding_to_tensor, images_to_tensor, Encoder, Head, HeadSpec};
use crate::nn::Tensor;
use crate::optim::{cosine, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, rng};
use crate::store::FrameStore;

const SPLIT_STREAM: u64 = 0x5917;
const HEAD_STREAM: u64 = 0x4EAD;
const TRAIN_STREAM: u64 = 0x7A11;
const PAIR_STREAM: u64 = 0xFA1E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DownstreamMode {
    Freeze,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DownstreamTask {
    ExprCls,
    VaReg,
}

impl DownstreamTask {
    pub fn eval_task(self) -> EvalTask {
        match self {
            DownstreamTask::ExprCls => EvalTask::ExprCls,
            DownstreamTask::VaReg => EvalTask::VaReg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub mode: DownstreamMode,
    pub task: DownstreamTask,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Defaults to one more than the largest training label.
    pub num_classes: Option<usize>,
    /// Per-class counts for the balanced softmax; defaults to the training
    /// split's counts.
    pub class_counts: Option<Vec<f64>>,
    /// Share of identities held out for testing when `folds` < 2.
    pub test_fraction: f64,
    /// Identity-disjoint cross-validation folds; 0 or 1 uses a single
    /// held-out split.
    pub folds: usize,
    pub fr: FrConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            mode: DownstreamMode::Freeze,
            task: DownstreamTask::ExprCls,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            weight_decay: 5e-4,
            lr: 1e-4,
            epochs: 20,
            num_classes: None,
            class_counts: None,
            test_fraction: 0.25,
            folds: 1,
            fr: FrConfig::default(),
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        let s = "downstream";
        if self.batch_size < 2 {
            return Err(Error::config(format!("{s}.batch_size"), "must be >= 2"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("{s}.lr"), "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{s}.weight_decay"), "must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{s}.epochs"), "must be >= 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("{s}.test_fraction"), "must be in (0, 1)"));
        }
        if self.num_classes == Some(0) {
            return Err(Error::config(format!("{s}.num_classes"), "must be >= 1"));
        }
        if let Some(c) = &self.class_counts {
            if c.is_empty() || c.iter().any(|&n| !(n >= 1.0)) {
                return Err(Error::config(format!("{s}.class_counts"), "counts must be >= 1"));
            }
            if let Some(n) = self.num_classes {
                if n != c.len() {
                    return Err(Error::config(
                        format!("{s}.class_counts"),
                        format!("{} counts for {n} classes", c.len()),
                    ));
                }
            }
        }
        self.fr.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrConfig {
    /// Pairs sampled for verification, half same-identity.
    pub pairs: usize,
    /// Neighbours voted in identification mode.
    pub k: usize,
}

impl Default for FrConfig {
    fn default() -> Self {
        FrConfig { pairs: 400, k: 5 }
    }
}

impl FrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs < 4 {
            return Err(Error::config("downstream.fr.pairs", "must be >= 4"));
        }
        if self.k == 0 {
            return Err(Error::config("downstream.fr.k", "must be >= 1"));
        }
        Ok(())
    }
}

/// Supervision for one frame; each task reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLabel {
    pub key: String,
    #[serde(default)]
    pub expression_class: Option<usize>,
    #[serde(default)]
    pub valence: Option<f64>,
    #[serde(default)]
    pub arousal: Option<f64>,
}

/// Reads labels from CSV (`key,expression_class,valence,arousal`, empty
/// cells allowed) or JSON lines (the synthetic sidecar parses directly).
pub fn load_task_labels(path: &Path) -> Result<BTreeMap<String, TaskLabel>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut out = BTreeMap::new();
    if is_csv {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        for (i, row) in rdr.deserialize::<TaskLabel>().enumerate() {
            let l = row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            out.insert(l.key.clone(), l);
        }
    } else {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: TaskLabel = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            out.insert(l.key.clone(), l);
        }
    }
    Ok(out)
}

enum Targets {
    Class(Vec<usize>),
    Va(Vec<(f64, f64)>),
}

fn targets_for(
    task: DownstreamTask,
    manifest: &DatasetManifest,
    labels: &BTreeMap<String, TaskLabel>,
    positions: &[usize],
) -> Result<Targets> {
    let get = |p: usize| {
        let key = manifest.record(p).key();
        labels
            .get(&key)
            .ok_or_else(|| Error::Validation(format!("no label for record {key}")))
    };
    match task {
        DownstreamTask::ExprCls => positions
            .iter()
            .map(|&p| {
                let l = get(p)?;
                l.expression_class
                    .ok_or_else(|| Error::Validation(format!("record {} has no expression class", l.key)))
            })
            .collect::<Result<_>>()
            .map(Targets::Class),
        DownstreamTask::VaReg => positions
            .iter()
            .map(|&p| {
                let l = get(p)?;
                match (l.valence, l.arousal) {
                    (Some(v), Some(a)) if v.is_finite() && a.is_finite() => Ok((v, a)),
                    _ => Err(Error::Validation(format!("record {} has no valence/arousal", l.key))),
                }
            })
            .collect::<Result<_>>()
            .map(Targets::Va),
    }
}

/// Identity-disjoint split into (train, test) record positions.
pub fn identity_split(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ids: Vec<&str> = manifest.identities().collect();
    if ids.len() < 2 {
        return Err(Error::Validation("downstream split needs at least 2 identities".into()));
    }
    ids.shuffle(&mut rng(derive_seed(seed, &[SPLIT_STREAM])));
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let test: BTreeSet<&str> = ids[..n_test].iter().copied().collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (p, r) in manifest.records().iter().enumerate() {
        if test.contains(r.identity_id.as_str()) {
            held.push(p);
        } else {
            train.push(p);
        }
    }
    Ok((train, held))
}

fn eval_views(manifest: &DatasetManifest, store: &FrameStore, aug: &AugConfig, positions: &[usize]) -> Result<Vec<Image>> {
    let mut r = rng(0);
    positions
        .iter()
        .map(|&p| Ok(augment_downstream_view(store.view(manifest, p), aug, false, &mut r)?.image))
        .collect()
}

pub struct DownstreamOutcome {
    pub report: EvalReport,
    pub encoder: Encoder,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub epoch_losses: Vec<f64>,
}

/// Identity-disjoint k-fold splits; every record is tested exactly once.
pub fn identity_folds(manifest: &DatasetManifest, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut ids: Vec<&str> = manifest.identities().collect();
    if folds < 2 || folds > ids.len() {
        return Err(Error::Validation(format!(
            "{folds} folds for {} identities",
            ids.len()
        )));
    }
    ids.shuffle(&mut rng(derive_seed(seed, &[SPLIT_STREAM])));
    let fold_of: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(j, id)| (*id, j % folds)).collect();
    Ok((0..folds)
        .map(|f| {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (p, r) in manifest.records().iter().enumerate() {
                if fold_of[r.identity_id.as_str()] == f {
                    test.push(p);
                } else {
                    train.push(p);
                }
            }
            (train, test)
        })
        .collect())
}

struct FoldCtx<'a> {
    manifest: &'a DatasetManifest,
    store: &'a FrameStore,
    aug: &'a AugConfig,
    cfg: &'a DownstreamConfig,
    targets: &'a Targets,
}

/// Trains a head on `train` (and the backbone when finetuning); returns
/// the head and per-epoch mean losses.
fn fit_fold(
    ctx: &FoldCtx<'_>,
    encoder: &mut Encoder,
    cached: Option<&EmbeddingMatrix>,
    train: &[usize],
    head_spec: HeadSpec,
    counts: &[f64],
    seed: u64,
) -> Result<(Head, Vec<f64>)> {
    let cfg = ctx.cfg;
    let finetune = cached.is_none();
    let mut head = Head::new(head_spec, derive_seed(seed, &[HEAD_STREAM]))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut order: Vec<usize> = train.to_vec();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cosine(cfg.lr, epoch, cfg.epochs);
        let mut r = rng(derive_seed(seed, &[TRAIN_STREAM, epoch as u64]));
        order.shuffle(&mut r);
        let (mut loss_sum, mut n_batches) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let x = match cached {
                Some(f) => embedding_to_tensor(&f.select(idx)),
                None => {
                    let imgs = idx
                        .iter()
                        .map(|&p| {
                            Ok(augment_downstream_view(ctx.store.view(ctx.manifest, p), ctx.aug, true, &mut r)?.image)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    encoder.backbone.forward_train(&images_to_tensor(&imgs)?)?
                }
            };
            let out = head.net.forward_train(&x)?;
            let Some((loss, grad)) = head_loss(&out, ctx.targets, idx, counts)? else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("downstream loss {loss} at epoch {epoch}")));
            }
            head.net.zero_grad();
            let dx = head.net.backward(&grad)?;
            if finetune {
                encoder.backbone.zero_grad();
                encoder.backbone.backward(&dx)?;
                let mut params = encoder.backbone.params_mut();
                params.extend(head.net.params_mut());
                opt.step(&mut params, lr)?;
            } else {
                opt.step(&mut head.net.params_mut(), lr)?;
            }
            loss_sum += loss;
            n_batches += 1;
        }
        epoch_losses.push(if n_batches > 0 { loss_sum / n_batches as f64 } else { f64::NAN });
    }
    head.net.clear_cache();
    encoder.backbone.clear_cache();
    Ok((head, epoch_losses))
}

/// Trains a three-layer head (and, when finetuning, the backbone) on the
/// training identities and reports metrics on the held-out identities.
/// With `folds >= 2` every identity is held out once and metrics are
/// computed on the pooled predictions.
#[allow(clippy::too_many_arguments)]
pub fn run_downstream(
    encoder: Encoder,
    manifest: &DatasetManifest,
    store: &FrameStore,
    labels: &BTreeMap<String, TaskLabel>,
    cfg: &DownstreamConfig,
    aug: &AugConfig,
    seed: u64,
    config_fingerprint: &str,
) -> Result<DownstreamOutcome> {
    cfg.validate()?;
    if store.len() != manifest.len() {
        return Err(Error::Validation(format!(
            "{} images for {} manifest records",
            store.len(),
            manifest.len()
        )));
    }
    let all: Vec<usize> = (0..manifest.len()).collect();
    let targets = targets_for(cfg.task, manifest, labels, &all)?;
    let splits = if cfg.folds >= 2 {
        identity_folds(manifest, cfg.folds, seed)?
    } else {
        vec![identity_split(manifest, cfg.test_fraction, seed)?]
    };
    let classes = match &targets {
        Targets::Class(y) => {
            let c = cfg
                .num_classes
                .or(cfg.class_counts.as_ref().map(Vec::len))
                .unwrap_or_else(|| y.iter().max().map_or(1, |m| m + 1));
            if let Some(&bad) = y.iter().find(|&&l| l >= c) {
                return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
            }
            c
        }
        Targets::Va(_) => 2,
    };
    let head_spec = match cfg.task {
        DownstreamTask::ExprCls => HeadSpec::classifier(encoder.spec.feature_dim(), classes),
        DownstreamTask::VaReg => HeadSpec::regressor(encoder.spec.feature_dim()),
    };
    let finetune = cfg.mode == DownstreamMode::Finetune;
    let before = encoder.backbone.state_hash();
    let ctx = FoldCtx {
        manifest,
        store,
        aug,
        cfg,
        targets: &targets,
    };
    let cached = if finetune {
        None
    } else {
        Some(encoder.encode(&eval_views(manifest, store, aug, &all)?)?)
    };
    let mut frozen = encoder;
    frozen.backbone.set_trainable(finetune);
    let mut last = None;
    let mut preds: Vec<(usize, Vec<f64>)> = Vec::with_capacity(manifest.len());
    let mut epoch_losses = Vec::new();
    for (f, (train, test)) in splits.iter().enumerate() {
        let counts = match (&targets, &cfg.class_counts) {
            (Targets::Class(_), Some(cc)) => cc.clone(),
            (Targets::Class(y), None) => {
                let mut n = vec![0.0f64; classes];
                for &p in train {
                    n[y[p]] += 1.0;
                }
                n.into_iter().map(|v| v.max(1.0)).collect()
            }
            (Targets::Va(_), _) => Vec::new(),
        };
        let fold_seed = derive_seed(seed, &[f as u64]);
        let mut enc = frozen.clone();
        let (head, losses) = fit_fold(&ctx, &mut enc, cached.as_ref(), train, head_spec.clone(), &counts, fold_seed)?;
        let feats = match &cached {
            Some(c) => c.select(test),
            None => enc.encode(&eval_views(manifest, store, aug, test)?)?,
        };
        let out = head.net.forward_eval(&embedding_to_tensor(&feats))?;
        let k = out.shape()[1];
        for (p, row) in test.iter().zip(out.data().chunks(k)) {
            preds.push((*p, row.iter().map(|&v| v as f64).collect()));
        }
        epoch_losses.extend(losses);
        last = Some(enc);
    }
    let mut encoder = last.expect("at least one split");
    encoder.backbone.set_trainable(true);
    let after = encoder.backbone.state_hash();
    if !finetune && before != after {
        return Err(Error::Contract("frozen backbone changed during probing".into()));
    }

    let mut metrics = BTreeMap::new();
    match &targets {
        Targets::Class(y) => {
            let p: Vec<usize> = preds.iter().map(|(_, r)| argmax(r)).collect();
            let t: Vec<usize> = preds.iter().map(|(i, _)| y[*i]).collect();
            metrics.insert("f1".to_string(), macro_f1(&p, &t, classes)?);
            metrics.insert("acc".to_string(), accuracy(&p, &t)?);
        }
        Targets::Va(y) => {
            let pv: Vec<f64> = preds.iter().map(|(_, r)| r[0]).collect();
            let pa: Vec<f64> = preds.iter().map(|(_, r)| r[1]).collect();
            let tv: Vec<f64> = preds.iter().map(|(i, _)| y[*i].0).collect();
            let ta: Vec<f64> = preds.iter().map(|(i, _)| y[*i].1).collect();
            metrics.insert("ccc_v".to_string(), ccc(&pv, &tv)?);
            metrics.insert("ccc_a".to_string(), ccc(&pa, &ta)?);
            metrics.insert("rmse_v".to_string(), rmse(&pv, &tv)?);
            metrics.insert("rmse_a".to_string(), rmse(&pa, &ta)?);
        }
    }
    let report = EvalReport::new(cfg.task.eval_task(), metrics, config_fingerprint, seed)?;
    Ok(DownstreamOutcome {
        report,
        encoder,
        backbone_hash_before: before,
        backbone_hash_after: after,
        epoch_losses,
    })
}

/// Mean batch loss and its gradient on the head output; `None` when a
/// regression batch has a constant target.
fn head_loss(out: &Tensor, targets: &Targets, idx: &[usize], counts: &[f64]) -> Result<Option<(f64, Tensor)>> {
    let b = idx.len();
    let k = out.shape()[1];
    let rows: Vec<Vec<f64>> = out
        .data()
        .chunks(k)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let mut grad = vec![0f32; b * k];
    let loss = match targets {
        Targets::Class(y) => {
            let mut total = 0.0;
            for (i, &t) in idx.iter().enumerate() {
                let (l, g) = balanced_softmax_ce_grad(&rows[i], y[t], counts)?;
                total += l;
                for (c, gv) in g.iter().enumerate() {
                    grad[i * k + c] = (gv / b as f64) as f32;
                }
            }
            total / b as f64
        }
        Targets::Va(y) => {
            let pv: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            let pa: Vec<f64> = rows.iter().map(|r| r[1]).collect();
            let tv: Vec<f64> = idx.iter().map(|&i| y[i].0).collect();
            let ta: Vec<f64> = idx.iter().map(|&i| y[i].1).collect();
            let constant = |t: &[f64]| t.iter().all(|v| *v == t[0]);
            if constant(&tv) || constant(&ta) {
                log::warn!("skipping regression batch with constant targets");
                return Ok(None);
            }
            let (l, gv, ga) = ccc_loss_grad(&pv, &pa, &tv, &ta)?;
            for i in 0..b {
                grad[i * 2] = gv[i] as f32;
                grad[i * 2 + 1] = ga[i] as f32;
            }
            l
        }
    };
    Ok(Some((loss, Tensor::new(vec![b, k], grad)?)))
}

/// Balanced verification pairs `(a, b, same_identity)`, alternating same
/// and different. Same-identity pairs prefer different videos.
pub fn sample_verification_pairs(manifest: &DatasetManifest, n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize, bool)>> {
    if manifest.num_identities() < 2 {
        return Err(Error::Validation("verification needs at least 2 identities".into()));
    }
    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (p, r) in manifest.records().iter().enumerate() {
        by_id.entry(r.identity_id.as_str()).or_default().push(p);
    }
    let ids: Vec<&str> = by_id.keys().copied().collect();
    let mut r = rng(derive_seed(seed, &[PAIR_STREAM]));
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let same = pairs.len() % 2 == 0;
        let ia = ids[r.gen_range(0..ids.len())];
        let a = by_id[ia][r.gen_range(0..by_id[ia].len())];
        if same {
            let va = &manifest.record(a).video_id;
            let others: Vec<usize> = by_id[ia]
                .iter()
                .copied()
                .filter(|&p| &manifest.record(p).video_id != va)
                .collect();
            let pool: Vec<usize> = if others.is_empty() {
                by_id[ia].iter().copied().filter(|&p| p != a).collect()
            } else {
                others
            };
            if pool.is_empty() {
                continue;
            }
            pairs.push((a, pool[r.gen_range(0..pool.len())], true));
        } else {
            let ib = loop {
                let c = ids[r.gen_range(0..ids.len())];
                if c != ia {
                    break c;
                }
            };
            pairs.push((a, by_id[ib][r.gen_range(0..by_id[ib].len())], false));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub accuracy: f64,
    pub threshold: f64,
}

/// Thresholded L2 verification on paired embeddings: even-indexed pairs
/// calibrate the threshold, odd-indexed pairs are scored.
pub fn verify_pairs(a: &EmbeddingMatrix, b: &EmbeddingMatrix, same: &[bool]) -> Result<Verification> {
    if same.len() < 2 || a.rows() != same.len() || b.rows() != same.len() {
        return Err(Error::Argument(format!(
            "need >= 2 pairs with matching embeddings, got {} / {} / {}",
            a.rows(),
            b.rows(),
            same.len()
        )));
    }
    let d: Vec<f64> = (0..same.len()).map(|i| l2_distance(a.row(i), b.row(i))).collect();
    let (mut dc, mut sc, mut dt, mut st) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..d.len() {
        if i % 2 == 0 {
            dc.push(d[i]);
            sc.push(same[i]);
        } else {
            dt.push(d[i]);
            st.push(same[i]);
        }
    }
    let threshold = calibrate_threshold(&dc, &sc)?;
    Ok(Verification {
        accuracy: verification_accuracy(&dt, &st, threshold)?,
        threshold,
    })
}

/// Face verification with the frozen backbone on L2-normalized features.
pub fn knn_face_verification(encoder: &Encoder, pairs: &[(Image, Image, bool)], aug: &AugConfig) -> Result<Verification> {
    if pairs.len() < 2 {
        return Err(Error::Argument("face verification needs at least 2 pairs".into()));
    }
    let prep = |img: &Image| -> Image {
        let span = aug.resize - aug.crop;
        img.resize(aug.resize, aug.resize)
            .crop(span / 2, span / 2, aug.crop, aug.crop)
            .expect("crop fits inside resize")
            .normalize(aug.mean_or_default(), aug.std_or_default())
    };
    let a: Vec<Image> = pairs.iter().map(|p| prep(&p.0)).collect();
    let b: Vec<Image> = pairs.iter().map(|p| prep(&p.1)).collect();
    let fa = encoder.encode(&a)?.l2_normalized()?;
    let fb = encoder.encode(&b)?.l2_normalized()?;
    let same: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    verify_pairs(&fa, &fb, &same)
}

/// Leave-one-video-out nearest-neighbour identification: each frame is
/// matched by majority vote of its `k` nearest frames from other videos.
pub fn knn_identification(features: &EmbeddingMatrix, identities: &[String], videos: &[String], k: usize) -> Result<f64> {
    let n = features.rows();
    if n != identities.len() || n != videos.len() || n < 2 || k == 0 {
        return Err(Error::Argument("knn identification needs matching inputs and k >= 1".into()));
    }
    let mut hits = 0usize;
    let mut scored = 0usize;
    for i in 0..n {
        let mut nn: Vec<(f64, usize)> = (0..n)
            .filter(|&j| videos[j] != videos[i])
            .map(|j| (l2_distance(features.row(i), features.row(j)), j))
            .collect();
        if nn.is_empty() {
            continue;
        }
        nn.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for &(_, j) in nn.iter().take(k) {
            *votes.entry(identities[j].as_str()).or_default() += 1;
        }
        let best = votes.iter().max_by_key(|(_, c)| **c).map(|(id, _)| *id);
        scored += 1;
        hits += (best == Some(identities[i].as_str())) as usize;
    }
    if scored == 0 {
        return Err(Error::Argument("no frame has neighbours in another video".into()));
    }
    Ok(hits as f64 / scored as f64)
}

/// FR report over sampled pairs of the manifest: verification accuracy,
/// its threshold and k-NN identification accuracy.
pub fn run_face_verification(
    encoder: &Encoder,
    manifest: &DatasetManifest,
    store: &FrameStore,
    cfg: &FrConfig,
    aug: &AugConfig,
    seed: u64,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    let pairs = sample_verification_pairs(manifest, cfg.pairs, seed)?;
    let imgs: Vec<(Image, Image, bool)> = pairs
        .iter()
        .map(|&(a, b, s)| (store.image(a).clone(), store.image(b).clone(), s))
        .collect();
    let v = knn_face_verification(encoder, &imgs, aug)?;
    let all: Vec<usize> = (0..manifest.len()).collect();
    let feats = encoder.encode(&eval_views(manifest, store, aug, &all)?)?.l2_normalized()?;
    let ids: Vec<String> = manifest.records().iter().map(|r| r.identity_id.clone()).collect();
    let vids: Vec<String> = manifest.records().iter().map(|r| r.video_id.clone()).collect();
    let id_acc = knn_identification(&feats, &ids, &vids, cfg.k)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("acc".to_string(), v.accuracy);
    metrics.insert("threshold".to_string(), v.threshold);
    metrics.insert("knn_id_acc".to_string(), id_acc);
    EvalReport::new(EvalTask::FrKnn, metrics, config_fingerprint, seed)
}
