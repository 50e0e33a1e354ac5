//! Encoder backbones, projection head, the frozen region descriptor,
//! downstream heads and checkpoints.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic   b"EXPRCLCK"
//! u32     schema version
//! u64     header length in bytes
//! header  JSON: encoder spec, config fingerprint, epoch, tensor lengths
//! blobs   f32 tensors: backbone state then projection state, each layer in
//!         order as weight, [bias], or gamma, beta, running mean, running var
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::Descriptor;
use crate::embedding::{norm, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{BatchNorm, Conv2d, Layer, Linear, MaxPool, Param, Residual, Sequential, Tensor};
use crate::rng::{derive_seed, rng, Rng};

pub const MIN_INPUT: usize = 56;
const EVAL_CHUNK: usize = 64;
const MAGIC: &[u8; 8] = b"EXPRCLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Backbone {
    Residual50,
    Residual18,
    SmallCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WeightsInit {
    RandomSeeded,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub backbone: Backbone,
    /// Base channel count of `SMALL_CNN` (feature_dim = 8 × width).
    pub width: usize,
    pub proj_dim: usize,
    pub weights_init: WeightsInit,
    pub weights_path: Option<PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            backbone: Backbone::SmallCnn,
            width: 16,
            proj_dim: 128,
            weights_init: WeightsInit::RandomSeeded,
            weights_path: None,
        }
    }
}

impl EncoderSpec {
    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            Backbone::SmallCnn => 8 * self.width,
            Backbone::Residual18 => 512,
            Backbone::Residual50 => 2048,
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if self.proj_dim < 8 {
            return Err(Error::config(
                format!("{section}.proj_dim"),
                format!("must be >= 8, got {}", self.proj_dim),
            ));
        }
        if self.backbone == Backbone::SmallCnn && self.width == 0 {
            return Err(Error::config(format!("{section}.width"), "must be positive"));
        }
        if self.weights_init == WeightsInit::File && self.weights_path.is_none() {
            return Err(Error::config(
                format!("{section}.weights_path"),
                "required when weights_init = \"FILE\"",
            ));
        }
        Ok(())
    }
}

fn conv_bn_relu(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, r: &mut Rng) -> [Layer; 3] {
    [
        Layer::Conv(Conv2d::new(cin, cout, k, stride, pad, false, r)),
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::relu(),
    ]
}

fn basic_block(cin: usize, cout: usize, stride: usize, r: &mut Rng) -> Layer {
    let main = vec![
        Layer::Conv(Conv2d::new(cin, cout, 3, stride, 1, false, r)),
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::relu(),
        Layer::Conv(Conv2d::new(cout, cout, 3, 1, 1, false, r)),
        Layer::BatchNorm(BatchNorm::new(cout)),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            Layer::Conv(Conv2d::new(cin, cout, 1, stride, 0, false, r)),
            Layer::BatchNorm(BatchNorm::new(cout)),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual(Box::new(Residual::new(main, shortcut)))
}

fn bottleneck(cin: usize, mid: usize, stride: usize, r: &mut Rng) -> Layer {
    let cout = 4 * mid;
    let main = vec![
        Layer::Conv(Conv2d::new(cin, mid, 1, 1, 0, false, r)),
        Layer::BatchNorm(BatchNorm::new(mid)),
        Layer::relu(),
        Layer::Conv(Conv2d::new(mid, mid, 3, stride, 1, false, r)),
        Layer::BatchNorm(BatchNorm::new(mid)),
        Layer::relu(),
        Layer::Conv(Conv2d::new(mid, cout, 1, 1, 0, false, r)),
        Layer::BatchNorm(BatchNorm::new(cout)),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            Layer::Conv(Conv2d::new(cin, cout, 1, stride, 0, false, r)),
            Layer::BatchNorm(BatchNorm::new(cout)),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual(Box::new(Residual::new(main, shortcut)))
}

/// Backbone ending in global average pooling: `[n, 3, s, s] → [n, feature_dim]`.
pub fn build_backbone(spec: &EncoderSpec, seed: u64) -> Sequential {
    let mut r = rng(seed);
    let mut layers = Vec::new();
    match spec.backbone {
        Backbone::SmallCnn => {
            let w = spec.width;
            layers.extend(conv_bn_relu(3, w, 5, 2, 2, &mut r));
            layers.extend(conv_bn_relu(w, 2 * w, 3, 2, 1, &mut r));
            layers.extend(conv_bn_relu(2 * w, 4 * w, 3, 2, 1, &mut r));
            layers.extend(conv_bn_relu(4 * w, 8 * w, 3, 2, 1, &mut r));
        }
        Backbone::Residual18 => {
            layers.extend(conv_bn_relu(3, 64, 7, 2, 3, &mut r));
            layers.push(Layer::MaxPool(MaxPool::new(3, 2, 1)));
            let mut cin = 64;
            for (i, cout) in [64, 128, 256, 512].into_iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                layers.push(basic_block(cin, cout, stride, &mut r));
                layers.push(basic_block(cout, cout, 1, &mut r));
                cin = cout;
            }
        }
        Backbone::Residual50 => {
            layers.extend(conv_bn_relu(3, 64, 7, 2, 3, &mut r));
            layers.push(Layer::MaxPool(MaxPool::new(3, 2, 1)));
            let mut cin = 64;
            for (i, (mid, blocks)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
                for b in 0..blocks {
                    let stride = if i > 0 && b == 0 { 2 } else { 1 };
                    layers.push(bottleneck(cin, mid, stride, &mut r));
                    cin = 4 * mid;
                }
            }
        }
    }
    layers.push(Layer::gap());
    Sequential::new(layers)
}

/// Two-layer MLP projection.
pub fn build_projection(feature_dim: usize, proj_dim: usize, seed: u64) -> Sequential {
    let mut r = rng(seed);
    Sequential::new(vec![
        Layer::Linear(Linear::new(feature_dim, feature_dim, &mut r)),
        Layer::relu(),
        Layer::Linear(Linear::new(feature_dim, proj_dim, &mut r)),
    ])
}

/// Stacks square images of one size into `[n, 3, s, s]`.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let s = first.width();
    if first.height() != s || s < MIN_INPUT {
        return Err(Error::Argument(format!(
            "encoder input must be square and at least {MIN_INPUT} px, got {}x{}",
            first.width(),
            first.height()
        )));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    for (i, img) in images.iter().enumerate() {
        if img.width() != s || img.height() != s {
            return Err(Error::Argument(format!(
                "image {i} is {}x{}, batch is {s}x{s}",
                img.width(),
                img.height()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 3, s, s], data)
}

pub fn tensor_to_embedding(t: &Tensor) -> Result<EmbeddingMatrix> {
    let (n, d) = match t.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::Argument(format!("expected a [n, d] tensor, got {s:?}"))),
    };
    EmbeddingMatrix::new(n, d, t.data().iter().map(|&v| v as f64).collect())
}

pub fn embedding_to_tensor(e: &EmbeddingMatrix) -> Tensor {
    Tensor::new(
        vec![e.rows(), e.dim()],
        e.data().iter().map(|&v| v as f32).collect(),
    )
    .expect("shape matches")
}

/// Backbone plus projection head.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub backbone: Sequential,
    pub projection: Sequential,
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate("model.encoder")?;
        let mut enc = Encoder {
            spec: spec.clone(),
            backbone: build_backbone(spec, derive_seed(seed, &[1])),
            projection: build_projection(spec.feature_dim(), spec.proj_dim, derive_seed(seed, &[2])),
        };
        if spec.weights_init == WeightsInit::File {
            let path = spec.weights_path.as_ref().expect("validated");
            let ck = Checkpoint::load(path)?;
            if ck.header.encoder.backbone != spec.backbone
                || ck.header.encoder.feature_dim() != spec.feature_dim()
            {
                return Err(Error::Checkpoint(format!(
                    "{} holds a different backbone",
                    path.display()
                )));
            }
            enc.load_blobs(&ck.blobs, &ck.header)?;
        }
        Ok(enc)
    }

    /// Backbone features in eval mode, one row per image.
    pub fn encode(&self, images: &[Image]) -> Result<EmbeddingMatrix> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let f = self.backbone.forward_eval(&images_to_tensor(chunk)?)?;
            let e = tensor_to_embedding(&f)?;
            rows.extend((0..e.rows()).map(|i| e.row(i).to_vec()));
        }
        if rows.is_empty() {
            return Err(Error::Argument("empty image batch".into()));
        }
        EmbeddingMatrix::from_rows(&rows)
    }

    /// Projected, L2-normalized embeddings in eval mode.
    pub fn project(&self, features: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if features.dim() != self.spec.feature_dim() {
            return Err(Error::Argument(format!(
                "projection expects {} features, got {}",
                self.spec.feature_dim(),
                features.dim()
            )));
        }
        let z = self.projection.forward_eval(&embedding_to_tensor(features))?;
        tensor_to_embedding(&z)?.l2_normalized()
    }

    /// Training forward through backbone and projection; returns raw
    /// (unnormalized) projections.
    pub fn forward_train(&mut self, images: &[Image]) -> Result<Tensor> {
        let h = self.backbone.forward_train(&images_to_tensor(images)?)?;
        self.projection.forward_train(&h)
    }

    pub fn backward(&mut self, dz: &Tensor) -> Result<()> {
        let dh = self.projection.backward(dz)?;
        self.backbone.backward(&dh)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.projection.zero_grad();
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.projection.params_mut());
        p
    }

    pub fn state_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.backbone.state_hash());
        h.update(self.projection.state_hash());
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self, config_fingerprint: &str, epoch: usize) -> Checkpoint {
        let b = self.backbone.state();
        let p = self.projection.state();
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_VERSION,
            encoder: self.spec.clone(),
            config_fingerprint: config_fingerprint.to_string(),
            epoch,
            backbone_tensors: b.iter().map(Vec::len).collect(),
            projection_tensors: p.iter().map(Vec::len).collect(),
        };
        Checkpoint {
            header,
            blobs: b.into_iter().chain(p).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut spec = ck.header.encoder.clone();
        spec.weights_init = WeightsInit::RandomSeeded;
        spec.weights_path = None;
        let mut enc = Encoder::new(&spec, 0)?;
        enc.spec = ck.header.encoder.clone();
        enc.load_blobs(&ck.blobs, &ck.header)?;
        Ok(enc)
    }

    fn load_blobs(&mut self, blobs: &[Vec<f32>], header: &CheckpointHeader) -> Result<()> {
        let nb = header.backbone_tensors.len();
        if blobs.len() != nb + header.projection_tensors.len() {
            return Err(Error::Checkpoint("tensor count does not match header".into()));
        }
        self.backbone.load_state(&blobs[..nb])?;
        self.projection.load_state(&blobs[nb..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub encoder: EncoderSpec,
    pub config_fingerprint: String,
    pub epoch: usize,
    pub backbone_tensors: Vec<usize>,
    pub projection_tensors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for blob in &self.blobs {
            for v in blob {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(u4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported schema version {version}")));
        }
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u8b).map_err(|_| bad("truncated"))?;
        let hlen = u64::from_le_bytes(u8b) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&hbuf).map_err(|e| bad(&format!("header: {e}")))?;
        let mut blobs = Vec::new();
        for &len in header.backbone_tensors.iter().chain(&header.projection_tensors) {
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
            blobs.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { header, blobs })
    }
}

/// Frozen convolutional descriptor of eye and mouth crops.
///
/// Each crop is standardized per channel before encoding, so the descriptor
/// responds to region structure rather than overall skin tone.
#[derive(Debug, Clone)]
pub struct FrozenDescriptor {
    net: Sequential,
}

impl FrozenDescriptor {
    /// Seeded random `SMALL_CNN` backbone, frozen.
    pub fn random(width: usize, seed: u64) -> Self {
        let spec = EncoderSpec {
            width,
            ..EncoderSpec::default()
        };
        Self::freeze(build_backbone(&spec, seed))
    }

    pub fn freeze(mut net: Sequential) -> Self {
        net.set_trainable(false);
        FrozenDescriptor { net }
    }

    /// Wraps a network as is; `describe` refuses it while it is trainable.
    pub fn wrap(net: Sequential) -> Self {
        FrozenDescriptor { net }
    }

    pub fn state_hash(&self) -> String {
        self.net.state_hash()
    }

    fn check_frozen(&self) -> Result<()> {
        if self.net.is_trainable() {
            return Err(Error::Contract("descriptor encoder is not frozen".into()));
        }
        Ok(())
    }

    /// Globally averaged features of each crop.
    pub fn region_features(&self, crops: &[Image]) -> Result<EmbeddingMatrix> {
        self.check_frozen()?;
        let std: Vec<Image> = crops.iter().map(standardize).collect();
        let mut rows = Vec::with_capacity(crops.len());
        for chunk in std.chunks(EVAL_CHUNK) {
            let e = tensor_to_embedding(&self.net.forward_eval(&images_to_tensor(chunk)?)?)?;
            rows.extend((0..e.rows()).map(|i| e.row(i).to_vec()));
        }
        EmbeddingMatrix::from_rows(&rows)
    }

    /// `z^cat` for many crop pairs at once.
    pub fn describe_many(&self, pairs: &[(Image, Image)]) -> Result<EmbeddingMatrix> {
        let crops: Vec<Image> = pairs
            .iter()
            .flat_map(|(e, m)| [e.clone(), m.clone()])
            .collect();
        let f = self.region_features(&crops)?;
        let rows = (0..pairs.len())
            .map(|i| concat_normalized(f.row(2 * i), f.row(2 * i + 1)))
            .collect::<Result<Vec<_>>>()?;
        EmbeddingMatrix::from_rows(&rows)
    }
}

fn standardize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let p = out.plane_mut(c);
        let n = p.len() as f32;
        let mean = p.iter().sum::<f32>() / n;
        let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var.sqrt() + 1e-3);
        for v in p.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn concat_normalized(ze: &[f64], zm: &[f64]) -> Result<Vec<f64>> {
    let (ne, nm) = (norm(ze), norm(zm));
    if ne == 0.0 || nm == 0.0 {
        return Err(Error::Numeric("descriptor produced a zero feature vector".into()));
    }
    Ok(ze.iter().map(|v| v / ne).chain(zm.iter().map(|v| v / nm)).collect())
}

impl Descriptor for FrozenDescriptor {
    fn describe(&self, eye: &Image, mouth: &Image) -> Result<Vec<f64>> {
        let f = self.region_features(&[eye.clone(), mouth.clone()])?;
        concat_normalized(f.row(0), f.row(1))
    }
}

/// `z^cat = concat(normalize(z^e), normalize(z^m))`.
pub fn descriptor_features(eye: &Image, mouth: &Image, descriptor: &FrozenDescriptor) -> Result<Vec<f64>> {
    descriptor.describe(eye, mouth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HeadKind {
    Classifier,
    RegressorVa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub in_dim: usize,
    pub hidden: (usize, usize),
    pub out_dim: usize,
}

impl HeadSpec {
    pub fn classifier(in_dim: usize, classes: usize) -> Self {
        HeadSpec {
            kind: HeadKind::Classifier,
            in_dim,
            hidden: (in_dim, (in_dim / 2).max(1)),
            out_dim: classes,
        }
    }

    pub fn regressor(in_dim: usize) -> Self {
        HeadSpec {
            kind: HeadKind::RegressorVa,
            in_dim,
            hidden: (in_dim, (in_dim / 2).max(1)),
            out_dim: 2,
        }
    }
}

/// Three-layer MLP head; regression outputs pass through tanh.
#[derive(Debug, Clone)]
pub struct Head {
    pub spec: HeadSpec,
    pub net: Sequential,
}

impl Head {
    pub fn new(spec: HeadSpec, seed: u64) -> Result<Self> {
        if spec.kind == HeadKind::RegressorVa && spec.out_dim != 2 {
            return Err(Error::Argument("VA regressor must output 2 values".into()));
        }
        if spec.out_dim == 0 {
            return Err(Error::Argument("head needs at least one output".into()));
        }
        let mut r = rng(seed);
        let (h1, h2) = spec.hidden;
        let mut layers = vec![
            Layer::Linear(Linear::new(spec.in_dim, h1, &mut r)),
            Layer::relu(),
            Layer::Linear(Linear::new(h1, h2, &mut r)),
            Layer::relu(),
            Layer::Linear(Linear::new(h2, spec.out_dim, &mut r)),
        ];
        if spec.kind == HeadKind::RegressorVa {
            layers.push(Layer::tanh());
        }
        Ok(Head {
            spec,
            net: Sequential::new(layers),
        })
    }
}

/// Eval-mode head output: `[n, C]` logits or `[n, 2]` valence/arousal.
pub fn head_forward(head: &Head, features: &EmbeddingMatrix) -> Result<Tensor> {
    if features.dim() != head.spec.in_dim {
        return Err(Error::Argument(format!(
            "head expects {} features, got {}",
            head.spec.in_dim,
            features.dim()
        )));
    }
    head.net.forward_eval(&embedding_to_tensor(features))
}
