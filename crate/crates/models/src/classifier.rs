//! Crop classifier: a small residual network trained with cross-entropy.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::Optimizer;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use foodlens_core::raster::rgb_to_planar;

use crate::error::{ModelError, Result};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::nn::{global_avg_pool, scalar, stack_planar, BackboneConfig, Linear, ResNet};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::{adam, cosine_lr, ensure_finite, shuffled, EpochLog, TrainLog};

pub const CHECKPOINT_FORMAT: &str = "foodlens-classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierHyper {
    /// Crops are resized to `input_size x input_size`.
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Random horizontal and vertical flips during training.
    pub flip_augment: bool,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self {
            input_size: 32,
            backbone: BackboneConfig {
                widths: vec![16, 32, 48],
                blocks_per_stage: 1,
                stem_stride: 2,
            },
            epochs: 6,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            flip_augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCrop {
    pub image: RgbImage,
    pub category: String,
}

struct ClassifierNet {
    backbone: ResNet,
    head: Linear,
}

impl ClassifierNet {
    fn new(ps: &mut ParamStore, hyper: &ClassifierHyper, n_classes: usize) -> Result<Self> {
        let backbone = ResNet::new(ps, "backbone", 3, &hyper.backbone)?;
        let head = Linear::new(ps, "head", hyper.backbone.out_channels(), n_classes, 1.0)?;
        Ok(Self { backbone, head })
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&global_avg_pool(&self.backbone.forward(x)?)?)
    }
}

/// Mean cross-entropy of `logits (N, n)` against class indices.
fn batch_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::loss::cross_entropy(logits, targets)?)
}

#[derive(Serialize, Deserialize)]
struct Header {
    label_set: Vec<String>,
    hyper: ClassifierHyper,
    seed: u64,
    log: TrainLog,
}

pub struct ClassifierModel {
    params: ParamStore,
    net: ClassifierNet,
    label_set: Vec<String>,
    hyper: ClassifierHyper,
    seed: u64,
    log: TrainLog,
}

impl std::fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("label_set", &self.label_set)
            .field("hyper", &self.hyper)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

fn planar(crop: &RgbImage, size: usize) -> Vec<f32> {
    rgb_to_planar(crop, size, size).into_iter().map(|v| v - 0.5).collect()
}

/// Mirrors a planar CHW buffer in place.
pub(crate) fn flip_planar(data: &mut [f32], channels: usize, size: usize, horizontal: bool) {
    for c in 0..channels {
        let plane = &mut data[c * size * size..(c + 1) * size * size];
        if horizontal {
            for row in plane.chunks_mut(size) {
                row.reverse();
            }
        } else {
            for y in 0..size / 2 {
                for x in 0..size {
                    plane.swap(y * size + x, (size - 1 - y) * size + x);
                }
            }
        }
    }
}

struct Encoded {
    inputs: Vec<Vec<f32>>,
    targets: Vec<u32>,
}

fn encode(crops: &[LabeledCrop], label_set: &[String], size: usize) -> Result<Encoded> {
    let mut inputs = Vec::with_capacity(crops.len());
    let mut targets = Vec::with_capacity(crops.len());
    for crop in crops {
        if crop.image.width() == 0 || crop.image.height() == 0 {
            return Err(ModelError::InvalidInput("zero-area crop".into()));
        }
        let idx = label_set
            .iter()
            .position(|l| *l == crop.category)
            .ok_or_else(|| ModelError::InvalidInput(format!("category {:?} not in the label set", crop.category)))?;
        inputs.push(planar(&crop.image, size));
        targets.push(idx as u32);
    }
    Ok(Encoded { inputs, targets })
}

pub fn train_classifier(
    label_set: &[String],
    train: &[LabeledCrop],
    val: &[LabeledCrop],
    hyper: &ClassifierHyper,
    seed: u64,
) -> Result<ClassifierModel> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet("classifier received no crops".into()));
    }
    if label_set.len() < 2 {
        return Err(ModelError::InvalidInput("classifier needs at least two categories".into()));
    }
    if hyper.batch_size == 0 || hyper.input_size == 0 {
        return Err(ModelError::InvalidInput("batch_size and input_size must be positive".into()));
    }
    for label in label_set {
        if !train.iter().any(|c| &c.category == label) {
            return Err(ModelError::InvalidInput(format!("category {label:?} has no training crop")));
        }
    }
    let size = hyper.input_size;
    let train_data = encode(train, label_set, size)?;
    let val_data = encode(val, label_set, size)?;

    let mut params = ParamStore::seeded(seed, DType::F32);
    let net = ClassifierNet::new(&mut params, hyper, label_set.len())?;
    let mut opt = adam(params.vars(), hyper.learning_rate, 0.9, hyper.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let mut log = TrainLog::default();

    for epoch in 0..hyper.epochs {
        opt.set_learning_rate(cosine_lr(hyper.learning_rate, 0.05, epoch, hyper.epochs));
        let order = shuffled(train_data.inputs.len(), &mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut x = train_data.inputs[i].clone();
                if hyper.flip_augment {
                    if rng.random_bool(0.5) {
                        flip_planar(&mut x, 3, size, true);
                    }
                    if rng.random_bool(0.5) {
                        flip_planar(&mut x, 3, size, false);
                    }
                }
                inputs.push(x);
            }
            let x = stack_planar(&inputs, 3, size, size, DType::F32)?;
            let targets: Vec<u32> = batch.iter().map(|&i| train_data.targets[i]).collect();
            let t = Tensor::new(targets, &Device::Cpu)?;
            let loss = batch_loss(&net.logits(&x)?, &t)?;
            let value = ensure_finite("train-classifier", epoch, step, scalar(&loss)?)?;
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let mut entry = EpochLog {
            epoch,
            train_loss: total / count as f64,
            val_loss: None,
            val_metric: None,
            aux_loss: None,
        };
        if !val_data.inputs.is_empty() {
            let (loss, acc) = evaluate(&net, &val_data, size, hyper.batch_size)?;
            entry.val_loss = Some(loss);
            entry.val_metric = Some(acc);
        }
        log::info!(
            "classifier epoch {epoch}: train loss {:.4}, val loss {:?}, val accuracy {:?}",
            entry.train_loss,
            entry.val_loss,
            entry.val_metric
        );
        log.push(entry);
    }

    Ok(ClassifierModel {
        params,
        net,
        label_set: label_set.to_vec(),
        hyper: hyper.clone(),
        seed,
        log,
    })
}

fn evaluate(net: &ClassifierNet, data: &Encoded, size: usize, batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for (inputs, targets) in data.inputs.chunks(batch).zip(data.targets.chunks(batch)) {
        let x = stack_planar(inputs, 3, size, size, DType::F32)?;
        let logits = net.logits(&x)?;
        let t = Tensor::new(targets, &Device::Cpu)?;
        loss += scalar(&batch_loss(&logits, &t)?)? * inputs.len() as f64;
        let pred: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
        correct += pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    }
    let n = data.inputs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

impl ClassifierModel {
    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn hyper(&self) -> &ClassifierHyper {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Softmax probabilities over the label set for each crop.
    pub fn probabilities(&self, crops: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let size = self.hyper.input_size;
        let mut inputs = Vec::with_capacity(crops.len());
        for crop in crops {
            if crop.width() == 0 || crop.height() == 0 {
                return Err(ModelError::InvalidInput("zero-area crop".into()));
            }
            inputs.push(planar(crop, size));
        }
        let x = stack_planar(&inputs, 3, size, size, self.params.dtype())?;
        let probs = candle_nn::ops::softmax_last_dim(&self.net.logits(&x)?)?;
        Ok(probs.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// Predicted category and its softmax confidence.
    pub fn classify(&self, crop: &RgbImage) -> Result<(String, f64)> {
        let probs = self.probabilities(&[crop])?.remove(0);
        let (idx, &conf) = probs
            .iter()
            .enumerate()
            .fold((0, &f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
        Ok((self.label_set[idx].clone(), conf))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            label_set: self.label_set.clone(),
            hyper: self.hyper.clone(),
            seed: self.seed,
            log: self.log.clone(),
        };
        save_checkpoint(path, CHECKPOINT_FORMAT, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (Header, _) = load_checkpoint(path, CHECKPOINT_FORMAT)?;
        let mut params = ParamStore::from_tensors(tensors, DType::F32);
        let net = ClassifierNet::new(&mut params, &header.hyper, header.label_set.len())?;
        Ok(Self {
            params,
            net,
            label_set: header.label_set,
            hyper: header.hyper,
            seed: header.seed,
            log: header.log,
        })
    }
}

/// Backprop versus finite differences for the classifier loss on a tiny f64
/// network with random inputs and labels.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let hyper = ClassifierHyper {
        input_size: 8,
        backbone: BackboneConfig {
            widths: vec![3, 4],
            blocks_per_stage: 1,
            stem_stride: 1,
        },
        ..ClassifierHyper::default()
    };
    let n_classes = 5;
    let mut params = ParamStore::seeded(seed, DType::F64);
    let net = ClassifierNet::new(&mut params, &hyper, n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x: Vec<f64> = (0..4 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(x, (4, 3, 8, 8), &Device::Cpu)?;
    let t: Vec<u32> = (0..4).map(|_| rng.random_range(0..n_classes as u32)).collect();
    let t = Tensor::new(t, &Device::Cpu)?;
    check_gradients(&params, || batch_loss(&net.logits(&x)?, &t), 6, 1e-6, seed)
}
