//! Self-supervised pretraining: batch assembly, the optimization loop,
//! instance top-1 tracking and the checkpoint policy.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_pretrain_view, AugConfig, AugOp};
use crate::batch::{BatchLayout, ContrastiveBatch, ViewMeta, ViewRole};
use crate::contrastive::{
    cosine_similarity_matrix, dual_contrastive_loss_grad, maskfn_select_from_features,
    similarity_extrema, top1_accuracy, FnSelection, LossConfig, LossTerms,
};
use crate::data::DatasetManifest;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::face_ops::crop_regions;
use crate::model::{tensor_to_embedding, Encoder, EncoderSpec, FrozenDescriptor};
use crate::nn::Tensor;
use crate::optim::{constant_then_cosine, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, rng};
use crate::store::FrameStore;
use crate::synth::FrameLabel;
use crate::temporal::{has_hard_negative, has_positive, sample_hard_negative, sample_positive, TemporalConfig};

const BATCH_STREAM: u64 = 0xBA7C;
const DESCRIPTOR_STREAM: u64 = 0xDE5C;
const ENCODER_STREAM: u64 = 0xE4C0;

/// Strategy toggles; all off is the plain two-view instance-discrimination
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Strategies {
    pub timeaug: bool,
    pub hardneg: bool,
    pub faceswap: bool,
    pub maskfn: bool,
}

impl Default for Strategies {
    fn default() -> Self {
        Strategies::ALL
    }
}

impl Strategies {
    pub const ALL: Strategies = Strategies {
        timeaug: true,
        hardneg: true,
        faceswap: true,
        maskfn: true,
    };
    pub const NONE: Strategies = Strategies {
        timeaug: false,
        hardneg: false,
        faceswap: false,
        maskfn: false,
    };

    pub fn names() -> [&'static str; 4] {
        ["timeaug", "hardneg", "faceswap", "maskfn"]
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        match name {
            "timeaug" => self.timeaug = on,
            "hardneg" => self.hardneg = on,
            "faceswap" => self.faceswap = on,
            "maskfn" => self.maskfn = on,
            _ => {
                return Err(Error::Validation(format!(
                    "unknown strategy toggle {name:?} (expected one of {:?})",
                    Strategies::names()
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Anchor groups per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub cosine_start_epoch: usize,
    pub epochs: usize,
    /// Batches per epoch; defaults to one pass over the eligible anchors.
    pub steps_per_epoch: Option<usize>,
    pub checkpoint_every: usize,
    pub checkpoint_acc_gate: f64,
    pub strategies: Strategies,
    /// Base width of the frozen random eye/mouth descriptor.
    pub descriptor_width: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 256,
            lr: 3e-4,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Adam,
            cosine_start_epoch: 10,
            epochs: 200,
            steps_per_epoch: None,
            checkpoint_every: 5,
            checkpoint_acc_gate: 0.60,
            strategies: Strategies::ALL,
            descriptor_width: 16,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = "pretrain";
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
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config(format!("{s}.steps_per_epoch"), "must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config(format!("{s}.checkpoint_every"), "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.checkpoint_acc_gate) {
            return Err(Error::config(format!("{s}.checkpoint_acc_gate"), "must be in [0, 1]"));
        }
        if self.descriptor_width == 0 {
            return Err(Error::config(format!("{s}.descriptor_width"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything pretraining reads from the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSetup {
    pub pretrain: PretrainConfig,
    pub temporal: TemporalConfig,
    pub aug: AugConfig,
    pub loss: LossConfig,
    pub encoder: EncoderSpec,
    pub seed: u64,
}

impl PretrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.temporal.validate()?;
        self.aug.validate()?;
        self.loss.validate_for_batch(self.pretrain.batch_size)?;
        self.encoder.validate("model.encoder")
    }

    /// False negatives per anchor actually used (zero when MaskFN is off).
    pub fn effective_n_fn(&self) -> usize {
        if self.pretrain.strategies.maskfn {
            self.loss.n_fn
        } else {
            0
        }
    }
}

/// Manifest, pixels and per-record caches shared by every batch.
pub struct PretrainData<'a> {
    pub manifest: &'a DatasetManifest,
    pub store: &'a FrameStore,
    pub labels: Option<&'a BTreeMap<String, FrameLabel>>,
    /// Eligible anchor positions per video, for videos with at least one.
    pub anchors: Vec<Vec<usize>>,
    /// Descriptor `z^cat` of each record's un-augmented frame.
    pub zcat: Option<EmbeddingMatrix>,
    pub descriptor: Option<FrozenDescriptor>,
}

impl<'a> PretrainData<'a> {
    pub fn new(
        setup: &PretrainSetup,
        manifest: &'a DatasetManifest,
        store: &'a FrameStore,
        labels: Option<&'a BTreeMap<String, FrameLabel>>,
    ) -> Result<Self> {
        if store.len() != manifest.len() {
            return Err(Error::Validation(format!(
                "{} images for {} manifest records",
                store.len(),
                manifest.len()
            )));
        }
        let st = setup.pretrain.strategies;
        let anchors: Vec<Vec<usize>> = manifest
            .pretraining_videos()
            .into_iter()
            .map(|v| {
                manifest
                    .video(v)
                    .frames
                    .clone()
                    .filter(|&p| {
                        (!st.timeaug || has_positive(manifest, p, &setup.temporal))
                            && (!st.hardneg || has_hard_negative(manifest, p, &setup.temporal))
                    })
                    .collect::<Vec<_>>()
            })
            .filter(|a| !a.is_empty())
            .collect();
        if anchors.len() < setup.pretrain.batch_size {
            return Err(Error::Batch(format!(
                "only {} videos have eligible anchors, batch_size is {}",
                anchors.len(),
                setup.pretrain.batch_size
            )));
        }
        let (zcat, descriptor) = if setup.effective_n_fn() > 0 {
            let d = FrozenDescriptor::random(
                setup.pretrain.descriptor_width,
                derive_seed(setup.seed, &[DESCRIPTOR_STREAM]),
            );
            let face = &setup.aug.face;
            let crops = (0..manifest.len())
                .map(|p| {
                    let (e, m, _) = crop_regions(
                        store.image(p),
                        &manifest.record(p).landmarks,
                        face.margin_frac,
                        face.crop_size,
                    )?;
                    Ok((e, m))
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(d.describe_many(&crops)?), Some(d))
        } else {
            (None, None)
        };
        Ok(PretrainData {
            manifest,
            store,
            labels,
            anchors,
            zcat,
            descriptor,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.iter().map(Vec::len).sum()
    }

    pub fn steps_per_epoch(&self, cfg: &PretrainConfig) -> usize {
        cfg.steps_per_epoch
            .unwrap_or_else(|| self.num_anchors().div_ceil(cfg.batch_size))
    }

    pub fn descriptor_hash(&self) -> Option<String> {
        self.descriptor.as_ref().map(FrozenDescriptor::state_hash)
    }
}

/// Augmentation trace of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTrace {
    pub epoch: usize,
    pub step: usize,
    pub view: usize,
    pub group: usize,
    pub role: ViewRole,
    pub key: String,
    pub ops: Vec<AugOp>,
}

#[derive(Debug, Clone)]
pub struct BuiltBatch {
    pub batch: ContrastiveBatch,
    pub fns: FnSelection,
    pub traces: Vec<ViewTrace>,
    pub maskfn_called: bool,
    pub swap_attempts: usize,
    pub swaps: usize,
    pub swap_failures: usize,
}

/// Assembles one batch deterministically from `(seed, epoch, step)`.
pub fn build_batch(
    setup: &PretrainSetup,
    data: &PretrainData<'_>,
    epoch: usize,
    step: usize,
) -> Result<BuiltBatch> {
    let st = setup.pretrain.strategies;
    let m = data.manifest;
    let b = setup.pretrain.batch_size;
    if data.anchors.len() < b {
        return Err(Error::Batch(format!(
            "only {} videos have eligible anchors, batch_size is {b}",
            data.anchors.len()
        )));
    }
    let mut r = rng(derive_seed(setup.seed, &[BATCH_STREAM, epoch as u64, step as u64]));
    let videos = sample(&mut r, data.anchors.len(), b).into_vec();
    let anchors: Vec<usize> = videos
        .iter()
        .map(|&v| data.anchors[v][r.gen_range(0..data.anchors[v].len())])
        .collect();

    let mut views: Vec<ViewMeta> = Vec::new();
    let mut images = Vec::new();
    let mut traces = Vec::new();
    let (mut swap_attempts, mut swaps, mut swap_failures) = (0, 0, 0);
    for (g, &a) in anchors.iter().enumerate() {
        let mut gr = rng(derive_seed(
            setup.seed,
            &[BATCH_STREAM, epoch as u64, step as u64, 1 + g as u64],
        ));
        let pos = if st.timeaug {
            sample_positive(m, a, &setup.temporal, &mut gr)?
        } else {
            a
        };
        let partner = if st.faceswap {
            random_other_identity(m, a, &mut gr)
        } else {
            None
        };
        let hard = if st.hardneg {
            Some(sample_hard_negative(m, a, &setup.temporal, &mut gr)?)
        } else {
            None
        };

        let mut push = |role: ViewRole, src: usize, partner: Option<usize>, prefix: Vec<AugOp>, gr: &mut _| -> Result<()> {
            let out = augment_pretrain_view(
                data.store.view(m, src),
                role,
                partner.map(|p| data.store.view(m, p)),
                &setup.aug,
                gr,
            )?;
            if partner.is_some() {
                swap_attempts += out
                    .ops
                    .iter()
                    .filter(|o| matches!(o, AugOp::FaceSwap { .. } | AugOp::FaceSwapFailed { .. }))
                    .count();
            }
            swaps += out.swapped() as usize;
            swap_failures += out.swap_failed() as usize;
            let view = views.len();
            views.push(ViewMeta {
                role,
                group: g,
                source: src,
                source_key: data.store.key(src).to_string(),
                swap_partner: if out.swapped() { partner } else { None },
            });
            let mut ops = prefix;
            ops.extend(out.ops);
            traces.push(ViewTrace {
                epoch,
                step,
                view,
                group: g,
                role,
                key: data.store.key(src).to_string(),
                ops,
            });
            images.push(out.image);
            Ok(())
        };
        push(ViewRole::Anchor, a, None, Vec::new(), &mut gr)?;
        let prefix = if st.timeaug {
            vec![AugOp::TimeAug {
                from: data.store.key(a).to_string(),
                to: data.store.key(pos).to_string(),
                dt: m.record(pos).timestamp_s - m.record(a).timestamp_s,
            }]
        } else {
            Vec::new()
        };
        push(ViewRole::Positive, pos, partner, prefix, &mut gr)?;
        if let Some(h) = hard {
            push(ViewRole::HardNegative, h, None, Vec::new(), &mut gr)?;
        }
    }
    let layout = BatchLayout::new(views)?;
    let n_fn = setup.effective_n_fn();
    let (fns, maskfn_called) = if n_fn > 0 {
        let zcat = data
            .zcat
            .as_ref()
            .ok_or_else(|| Error::Contract("MaskFN enabled without descriptor features".into()))?;
        let sources: Vec<usize> = layout.views().iter().map(|v| v.source).collect();
        (maskfn_select_from_features(&zcat.select(&sources), &layout, n_fn)?, true)
    } else {
        (FnSelection::empty(layout.groups().len()), false)
    };
    Ok(BuiltBatch {
        batch: ContrastiveBatch::new(layout, images)?,
        fns,
        traces,
        maskfn_called,
        swap_attempts,
        swaps,
        swap_failures,
    })
}

fn random_other_identity(m: &DatasetManifest, anchor: usize, r: &mut crate::rng::Rng) -> Option<usize> {
    let id = &m.record(anchor).identity_id;
    if m.num_identities() < 2 {
        return None;
    }
    loop {
        let p = r.gen_range(0..m.len());
        if &m.record(p).identity_id != id {
            return Some(p);
        }
    }
}

/// Save decision with a latching accuracy gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointPolicy {
    pub every: usize,
    pub gate: f64,
    pub latched: bool,
}

impl CheckpointPolicy {
    pub fn new(every: usize, gate: f64) -> Self {
        CheckpointPolicy {
            every,
            gate,
            latched: false,
        }
    }

    pub fn should_save(&mut self, epoch: usize, top1: f64) -> bool {
        checkpoint_policy(epoch, top1, self.every, self.gate, &mut self.latched)
    }
}

/// True iff the gate has been reached (now or earlier) and `epoch` is a
/// multiple of `every`.
pub fn checkpoint_policy(epoch: usize, top1: f64, every: usize, gate: f64, latched: &mut bool) -> bool {
    if top1 >= gate {
        *latched = true;
    }
    *latched && epoch % every == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub top1: f64,
    pub lr: f64,
    pub steps: usize,
    pub swap_attempts: usize,
    pub swaps: usize,
    pub swap_failures: usize,
    pub maskfn_calls: usize,
    pub fn_selected: usize,
    /// Share of selected false negatives whose expression class matches the
    /// anchor's, when labels are available.
    pub fn_class_precision: Option<f64>,
    /// SHA-256 over the epoch's batch record keys in order.
    pub keys_digest: String,
    #[serde(skip)]
    pub batch_keys: Vec<Vec<String>>,
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub terms: LossTerms,
    pub top1: f64,
}

/// Forward, loss, backward and parameter update on one batch.
pub fn train_step(
    encoder: &mut Encoder,
    optimizer: &mut Optimizer,
    built: &BuiltBatch,
    loss: &LossConfig,
    lr: f64,
) -> Result<StepStats> {
    let layout = &built.batch.layout;
    let z = encoder.forward_train(&built.batch.images)?;
    let e = tensor_to_embedding(&z);
    let e = match e {
        Ok(e) => e,
        Err(err) => return Err(diverged(layout, None, &err.to_string())),
    };
    let (terms, grad) = dual_contrastive_loss_grad(&e, layout, &built.fns, loss)?;
    let s = cosine_similarity_matrix(&e)?;
    if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(diverged(layout, Some(similarity_extrema(&s)), "non-finite loss"));
    }
    let top1 = top1_accuracy(&s, layout, &built.fns);
    encoder.zero_grad();
    let dz = Tensor::new(z.shape().to_vec(), grad.iter().map(|&g| g as f32).collect())?;
    encoder.backward(&dz)?;
    optimizer.step(&mut encoder.params_mut(), lr)?;
    Ok(StepStats { terms, top1 })
}

fn diverged(layout: &BatchLayout, extrema: Option<(f64, f64)>, what: &str) -> Error {
    let keys = layout.source_keys().join(",");
    let ext = extrema.map_or("n/a".to_string(), |(lo, hi)| format!("[{lo:.6}, {hi:.6}]"));
    Error::Diverged(format!("{what}; similarity range {ext}; batch keys {keys}"))
}

/// Stateful pretraining run.
pub struct Pretrainer<'s, 'd> {
    pub setup: &'s PretrainSetup,
    pub data: &'s PretrainData<'d>,
    pub encoder: Encoder,
    pub optimizer: Optimizer,
    pub policy: CheckpointPolicy,
}

impl<'s, 'd> Pretrainer<'s, 'd> {
    pub fn new(setup: &'s PretrainSetup, data: &'s PretrainData<'d>) -> Result<Self> {
        setup.validate()?;
        let encoder = Encoder::new(&setup.encoder, derive_seed(setup.seed, &[ENCODER_STREAM]))?;
        Ok(Pretrainer {
            setup,
            data,
            encoder,
            optimizer: Optimizer::new(setup.pretrain.optimizer, setup.pretrain.weight_decay),
            policy: CheckpointPolicy::new(
                setup.pretrain.checkpoint_every,
                setup.pretrain.checkpoint_acc_gate,
            ),
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let p = &self.setup.pretrain;
        constant_then_cosine(p.lr, epoch, p.cosine_start_epoch, p.epochs)
    }

    /// Runs epoch `epoch` (1-based); `on_batch` sees every batch before its
    /// optimization step.
    pub fn run_epoch(
        &mut self,
        epoch: usize,
        on_batch: &mut dyn FnMut(&BuiltBatch) -> Result<()>,
    ) -> Result<EpochStats> {
        let lr = self.lr(epoch);
        let steps = self.data.steps_per_epoch(&self.setup.pretrain);
        let mut sums = LossTerms {
            total: 0.0,
            l1: 0.0,
            l2: 0.0,
        };
        let mut top1 = 0.0;
        let (mut swap_attempts, mut swaps, mut swap_failures, mut maskfn_calls, mut fn_selected) =
            (0, 0, 0, 0, 0);
        let (mut fn_hits, mut fn_labeled) = (0usize, 0usize);
        let mut digest = Sha256::new();
        let mut batch_keys = Vec::with_capacity(steps);
        for step in 0..steps {
            let built = build_batch(self.setup, self.data, epoch, step)?;
            on_batch(&built)?;
            let keys: Vec<String> = built
                .batch
                .layout
                .views()
                .iter()
                .map(|v| v.source_key.clone())
                .collect();
            for k in &keys {
                digest.update(k.as_bytes());
                digest.update([0u8]);
            }
            batch_keys.push(keys);
            swap_attempts += built.swap_attempts;
            swaps += built.swaps;
            swap_failures += built.swap_failures;
            maskfn_calls += built.maskfn_called as usize;
            fn_selected += built.fns.total_selected();
            if let Some(labels) = self.data.labels {
                let views = built.batch.layout.views();
                let class = |v: usize| labels.get(&views[v].source_key).map(|l| l.expression_class);
                for (g, grp) in built.batch.layout.groups().iter().enumerate() {
                    for &l in built.fns.selected(g) {
                        if let (Some(a), Some(b)) = (class(grp.anchor), class(l)) {
                            fn_labeled += 1;
                            fn_hits += (a == b) as usize;
                        }
                    }
                }
            }
            let s = train_step(&mut self.encoder, &mut self.optimizer, &built, &self.setup.loss, lr)?;
            sums.total += s.terms.total;
            sums.l1 += s.terms.l1;
            sums.l2 += s.terms.l2;
            top1 += s.top1;
        }
        let n = steps as f64;
        Ok(EpochStats {
            epoch,
            loss: sums.total / n,
            l1: sums.l1 / n,
            l2: sums.l2 / n,
            top1: top1 / n,
            lr,
            steps,
            swap_attempts,
            swaps,
            swap_failures,
            maskfn_calls,
            fn_selected,
            fn_class_precision: (fn_labeled > 0).then(|| fn_hits as f64 / fn_labeled as f64),
            keys_digest: hex::encode(digest.finalize()),
            batch_keys,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusSpec};

    fn tiny_setup(strategies: Strategies) -> PretrainSetup {
        PretrainSetup {
            pretrain: PretrainConfig {
                batch_size: 8,
                epochs: 2,
                steps_per_epoch: Some(1),
                strategies,
                descriptor_width: 4,
                ..PretrainConfig::default()
            },
            temporal: TemporalConfig::default(),
            aug: AugConfig {
                resize: 64,
                crop: 56,
                ..AugConfig::default()
            },
            loss: LossConfig::default(),
            encoder: EncoderSpec {
                width: 4,
                proj_dim: 16,
                ..EncoderSpec::default()
            },
            seed: 7,
        }
    }

    fn corpus() -> crate::synth::SyntheticCorpus {
        generate_corpus(&CorpusSpec {
            n_identities: 4,
            videos_per_id: 2,
            duration_s: 4.0,
            fps: 2.0,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn checkpoint_policy_examples() {
        let mut latched = false;
        assert!(checkpoint_policy(15, 0.65, 5, 0.6, &mut latched));
        assert!(!checkpoint_policy(16, 0.65, 5, 0.6, &mut latched));
        let mut p = CheckpointPolicy::new(5, 0.6);
        assert!(!p.should_save(10, 0.5));
        assert!(!p.should_save(12, 0.61));
        assert!(p.should_save(20, 0.55));
        let mut fresh = CheckpointPolicy::new(5, 0.6);
        assert!(!fresh.should_save(20, 0.55));
    }

    #[test]
    fn batch_roles_and_determinism() {
        let c = corpus();
        let store = FrameStore::load(&c.manifest, None, Some(&c.labels)).unwrap();
        let setup = tiny_setup(Strategies::ALL);
        let data = PretrainData::new(&setup, &c.manifest, &store, Some(&c.labels)).unwrap();
        let a = build_batch(&setup, &data, 1, 0).unwrap();
        let b = build_batch(&setup, &data, 1, 0).unwrap();
        assert_eq!(a.batch.layout, b.batch.layout);
        assert_eq!(a.batch.images, b.batch.images);
        assert_eq!(a.fns, b.fns);
        assert!(a.maskfn_called);
        let views = a.batch.layout.views();
        let mut videos = std::collections::BTreeSet::new();
        for grp in a.batch.layout.groups() {
            let ra = c.manifest.record(views[grp.anchor].source);
            let rp = c.manifest.record(views[grp.positive].source);
            let rh = c.manifest.record(views[grp.hard_negative.unwrap()].source);
            assert!(videos.insert(ra.video_id.clone()));
            assert_eq!(ra.video_id, rp.video_id);
            assert!((ra.timestamp_s - rp.timestamp_s).abs() <= 1.0 + 1e-9);
            assert_eq!(ra.identity_id, rh.identity_id);
            assert!(rh.video_id != ra.video_id || (ra.timestamp_s - rh.timestamp_s).abs() >= 3.0 - 1e-9);
        }
        for t in &a.traces {
            assert!(crate::augment::trace_in_order(&t.ops));
        }
    }

    #[test]
    fn baseline_batch_has_no_strategy_paths() {
        let c = corpus();
        let store = FrameStore::load(&c.manifest, None, Some(&c.labels)).unwrap();
        let setup = tiny_setup(Strategies::NONE);
        let data = PretrainData::new(&setup, &c.manifest, &store, None).unwrap();
        assert!(data.zcat.is_none());
        let bb = build_batch(&setup, &data, 1, 0).unwrap();
        assert!(!bb.maskfn_called);
        assert_eq!(bb.batch.len(), 16);
        assert!(!bb.batch.layout.has_hard_negatives());
        for grp in bb.batch.layout.groups() {
            let v = bb.batch.layout.views();
            assert_eq!(v[grp.anchor].source, v[grp.positive].source);
        }
        for t in &bb.traces {
            assert!(t.ops.iter().all(|o| !matches!(
                o,
                AugOp::TimeAug { .. } | AugOp::FaceSwap { .. } | AugOp::FaceSwapFailed { .. }
            )));
        }
    }

    #[test]
    fn epochs_run_and_repeat_exactly() {
        let c = corpus();
        let store = FrameStore::load(&c.manifest, None, Some(&c.labels)).unwrap();
        let setup = tiny_setup(Strategies::ALL);
        let data = PretrainData::new(&setup, &c.manifest, &store, Some(&c.labels)).unwrap();
        let run = || {
            let mut t = Pretrainer::new(&setup, &data).unwrap();
            t.run_epoch(1, &mut |_| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.loss.is_finite());
        assert_eq!(a.keys_digest, b.keys_digest);
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.maskfn_calls, 1);
        assert_eq!(a.fn_selected, 8);
        assert!(a.fn_class_precision.is_some());
    }

    #[test]
    fn too_few_videos_is_a_batch_error() {
        let c = corpus();
        let store = FrameStore::load(&c.manifest, None, Some(&c.labels)).unwrap();
        let mut setup = tiny_setup(Strategies::NONE);
        setup.pretrain.batch_size = 9;
        assert!(matches!(
            PretrainData::new(&setup, &c.manifest, &store, None),
            Err(Error::Batch(_))
        ));
    }
}
