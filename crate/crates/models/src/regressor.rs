//! Portion regressor on four-channel RGB-Distribution crops, trained with L1.
//!
//! The network sees the resized crop. The distribution channel is resized so
//! that its total is preserved, which keeps the integrated energy readable
//! from the channel mean regardless of the original crop size. Global average
//! pooled conv features are concatenated with the four channel means before
//! the head.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use foodlens_core::raster::{resize_bilinear, rgb_to_planar};
use foodlens_core::RgbDistributionImage;

use crate::classifier::flip_planar;
use crate::error::{ModelError, Result};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::nn::{global_avg_pool, scalar, stack_planar, BackboneConfig, Linear, ResNet};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::{adam, cosine_lr, ensure_finite, shuffled, EpochLog, TrainLog};

pub const CHECKPOINT_FORMAT: &str = "foodlens-regressor";

/// Which input channels the regressor is allowed to see; masked channels are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMask {
    #[default]
    RgbDistribution,
    RgbOnly,
    DistributionOnly,
}

impl ChannelMask {
    pub const ALL: [ChannelMask; 3] = [
        ChannelMask::RgbDistribution,
        ChannelMask::RgbOnly,
        ChannelMask::DistributionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelMask::RgbDistribution => "rgb_distribution",
            ChannelMask::RgbOnly => "rgb_only",
            ChannelMask::DistributionOnly => "distribution_only",
        }
    }

    fn keeps_rgb(self) -> bool {
        self != ChannelMask::DistributionOnly
    }

    fn keeps_distribution(self) -> bool {
        self != ChannelMask::RgbOnly
    }
}

impl std::fmt::Display for ChannelMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ChannelMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ChannelMask::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown channel mask {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorHyper {
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub flip_augment: bool,
    pub channels: ChannelMask,
}

impl Default for RegressorHyper {
    fn default() -> Self {
        Self {
            input_size: 32,
            backbone: BackboneConfig {
                widths: vec![16, 32, 48],
                blocks_per_stage: 1,
                stem_stride: 2,
            },
            hidden: 64,
            epochs: 25,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            flip_augment: true,
            channels: ChannelMask::RgbDistribution,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortionSample {
    pub image: RgbDistributionImage,
    pub kcal: f64,
}

struct RegressorNet {
    backbone: ResNet,
    hidden: Linear,
    out: Linear,
    direct: Linear,
}

impl RegressorNet {
    fn new(ps: &mut ParamStore, hyper: &RegressorHyper) -> Result<Self> {
        let backbone = ResNet::new(ps, "backbone", 4, &hyper.backbone)?;
        let c = hyper.backbone.out_channels() + 4;
        let hidden = Linear::new(ps, "head.hidden", c, hyper.hidden, 1.0)?;
        let out = Linear::new(ps, "head.out", hyper.hidden, 1, 0.5)?;
        let direct = Linear::new(ps, "head.direct", 4, 1, 0.5)?;
        Ok(Self {
            backbone,
            hidden,
            out,
            direct,
        })
    }

    /// Normalized portion for a batch `(N, 4, S, S)`; returns `(N,)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let means = x.mean(3)?.mean(2)?;
        let feats = global_avg_pool(&self.backbone.forward(x)?)?;
        let h = self.hidden.forward(&Tensor::cat(&[&feats, &means], 1)?)?.relu()?;
        let y = (self.out.forward(&h)? + self.direct.forward(&means)?)?;
        Ok(y.squeeze(1)?)
    }
}

/// Fixed input normalization, measured on the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    /// Multiplies the resized distribution channel (already divided by 255).
    pub distribution_gain: f64,
    /// Regression targets are `kcal / kcal_norm`.
    pub kcal_norm: f64,
}

/// Planar `(4, S, S)` network input for one image.
fn encode(img: &RgbDistributionImage, size: usize, mask: ChannelMask, gain: f64) -> Vec<f32> {
    let mut out = if mask.keeps_rgb() {
        rgb_to_planar(img.rgb(), size, size).into_iter().map(|v| v - 0.5).collect()
    } else {
        vec![0.0; 3 * size * size]
    };
    if mask.keeps_distribution() {
        out.extend(resized_distribution(img, size).into_iter().map(|v| (v as f64 * gain) as f32));
    } else {
        out.extend(std::iter::repeat_n(0.0, size * size));
    }
    out
}

/// Distribution channel resized to `size x size`, scaled so its sum is
/// unchanged, then divided by 255.
pub fn resized_distribution(img: &RgbDistributionImage, size: usize) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.distribution().as_raw();
    let total: f64 = src.iter().map(|&v| v as f64).sum();
    let mut out = if w == size && h == size {
        src.clone()
    } else {
        resize_bilinear(src, w, h, size, size)
    };
    let resized: f64 = out.iter().map(|&v| v as f64).sum();
    let factor = if resized > 0.0 { total / resized } else { 0.0 };
    let factor = (factor / foodlens_core::fusion::RGB_RANGE as f64) as f32;
    out.iter_mut().for_each(|v| *v *= factor);
    out
}

fn measure_scaling(samples: &[PortionSample], size: usize) -> InputScaling {
    let n = samples.len() as f64;
    let mean_dist: f64 = samples
        .iter()
        .map(|s| {
            let d = resized_distribution(&s.image, size);
            d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
        })
        .sum::<f64>()
        / n;
    let mean_kcal = samples.iter().map(|s| s.kcal).sum::<f64>() / n;
    InputScaling {
        distribution_gain: if mean_dist > 0.0 { 1.0 / mean_dist } else { 1.0 },
        kcal_norm: if mean_kcal > 0.0 { mean_kcal } else { 1.0 },
    }
}

fn l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.abs()?.mean_all()?)
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: RegressorHyper,
    scaling: InputScaling,
    seed: u64,
    log: TrainLog,
}

pub struct RegressorModel {
    params: ParamStore,
    net: RegressorNet,
    hyper: RegressorHyper,
    scaling: InputScaling,
    seed: u64,
    log: TrainLog,
}

impl std::fmt::Debug for RegressorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegressorModel")
            .field("hyper", &self.hyper)
            .field("scaling", &self.scaling)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

fn validate_samples(samples: &[PortionSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if !(s.kcal.is_finite() && s.kcal >= 0.0) {
            return Err(ModelError::InvalidInput(format!("sample {i}: kcal must be finite and >= 0, got {}", s.kcal)));
        }
        if s.image.width() == 0 || s.image.height() == 0 {
            return Err(ModelError::InvalidInput(format!("sample {i}: zero-area image")));
        }
    }
    Ok(())
}

pub fn train_regressor(
    train: &[PortionSample],
    val: &[PortionSample],
    hyper: &RegressorHyper,
    seed: u64,
) -> Result<RegressorModel> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet("regressor received no samples".into()));
    }
    if hyper.batch_size == 0 || hyper.input_size == 0 {
        return Err(ModelError::InvalidInput("batch_size and input_size must be positive".into()));
    }
    validate_samples(train)?;
    validate_samples(val)?;
    let size = hyper.input_size;
    let scaling = measure_scaling(train, size);
    let enc = |s: &PortionSample| encode(&s.image, size, hyper.channels, scaling.distribution_gain);
    let inputs: Vec<Vec<f32>> = train.iter().map(enc).collect();
    let targets: Vec<f32> = train.iter().map(|s| (s.kcal / scaling.kcal_norm) as f32).collect();
    let val_inputs: Vec<Vec<f32>> = val.iter().map(enc).collect();

    let mut params = ParamStore::seeded(seed, DType::F32);
    let net = RegressorNet::new(&mut params, hyper)?;
    let mut opt = adam(params.vars(), hyper.learning_rate, 0.9, hyper.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_ee0d_9e55);
    let mut log = TrainLog::default();

    for epoch in 0..hyper.epochs {
        opt.set_learning_rate(cosine_lr(hyper.learning_rate, 0.02, epoch, hyper.epochs));
        let order = shuffled(inputs.len(), &mut rng);
        let mut abs_sum = 0.0;
        for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut x = inputs[i].clone();
                if hyper.flip_augment {
                    if rng.random_bool(0.5) {
                        flip_planar(&mut x, 4, size, true);
                    }
                    if rng.random_bool(0.5) {
                        flip_planar(&mut x, 4, size, false);
                    }
                }
                xs.push(x);
            }
            let x = stack_planar(&xs, 4, size, size, DType::F32)?;
            let t = Tensor::new(batch.iter().map(|&i| targets[i]).collect::<Vec<_>>(), &Device::Cpu)?;
            let loss = l1(&net.forward(&x)?, &t)?;
            let value = ensure_finite("train-regressor", epoch, step, scalar(&loss)?)?;
            opt.backward_step(&loss)?;
            abs_sum += value * batch.len() as f64;
        }
        let train_mae = abs_sum / inputs.len() as f64 * scaling.kcal_norm;
        let val_mae = if val.is_empty() {
            None
        } else {
            let preds = predict_raw(&net, &val_inputs, size, hyper.batch_size, DType::F32)?;
            let err: f64 = preds
                .iter()
                .zip(val)
                .map(|(p, s)| (p * scaling.kcal_norm).max(0.0) - s.kcal)
                .map(f64::abs)
                .sum();
            Some(err / val.len() as f64)
        };
        log::info!(
            "regressor[{}] epoch {epoch}: train MAE {train_mae:.3} kcal, val MAE {val_mae:?}",
            hyper.channels
        );
        log.push(EpochLog {
            epoch,
            train_loss: train_mae,
            val_loss: val_mae,
            val_metric: val_mae,
            aux_loss: None,
        });
    }

    Ok(RegressorModel {
        params,
        net,
        hyper: hyper.clone(),
        scaling,
        seed,
        log,
    })
}

fn predict_raw(net: &RegressorNet, inputs: &[Vec<f32>], size: usize, batch: usize, dtype: DType) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let x = stack_planar(chunk, 4, size, size, dtype)?;
        out.extend(net.forward(&x)?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

impl RegressorModel {
    pub fn hyper(&self) -> &RegressorHyper {
        &self.hyper
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Portion estimates in kcal; negative raw outputs are clamped to 0.
    pub fn estimate_batch(&self, images: &[&RgbDistributionImage]) -> Result<Vec<f64>> {
        let size = self.hyper.input_size;
        let mut inputs = Vec::with_capacity(images.len());
        for img in images {
            if img.width() == 0 || img.height() == 0 {
                return Err(ModelError::InvalidInput("zero-area RGB-Distribution image".into()));
            }
            inputs.push(encode(img, size, self.hyper.channels, self.scaling.distribution_gain));
        }
        let raw = predict_raw(&self.net, &inputs, size, self.hyper.batch_size, self.params.dtype())?;
        Ok(raw
            .into_iter()
            .map(|r| {
                let kcal = r * self.scaling.kcal_norm;
                if kcal < 0.0 {
                    log::debug!("regressor output {kcal:.3} kcal clamped to 0");
                    0.0
                } else {
                    kcal
                }
            })
            .collect())
    }

    pub fn estimate_portion(&self, img: &RgbDistributionImage) -> Result<f64> {
        Ok(self.estimate_batch(&[img])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            hyper: self.hyper.clone(),
            scaling: self.scaling,
            seed: self.seed,
            log: self.log.clone(),
        };
        save_checkpoint(path, CHECKPOINT_FORMAT, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (Header, _) = load_checkpoint(path, CHECKPOINT_FORMAT)?;
        let mut params = ParamStore::from_tensors(tensors, DType::F32);
        let net = RegressorNet::new(&mut params, &header.hyper)?;
        Ok(Self {
            params,
            net,
            hyper: header.hyper,
            scaling: header.scaling,
            seed: header.seed,
            log: header.log,
        })
    }
}

/// Backprop versus finite differences for the L1 regression loss on a tiny
/// f64 network with random four-channel inputs.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let hyper = RegressorHyper {
        input_size: 8,
        backbone: BackboneConfig {
            widths: vec![3, 4],
            blocks_per_stage: 1,
            stem_stride: 1,
        },
        hidden: 5,
        ..RegressorHyper::default()
    };
    let mut params = ParamStore::seeded(seed, DType::F64);
    let net = RegressorNet::new(&mut params, &hyper)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x: Vec<f64> = (0..4 * 4 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(x, (4, 4, 8, 8), &Device::Cpu)?;
    let t: Vec<f64> = (0..4).map(|_| rng.random_range(2.0..4.0)).collect();
    let t = Tensor::new(t, &Device::Cpu)?;
    check_gradients(&params, || l1(&net.forward(&x)?, &t), 6, 1e-6, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use foodlens_core::{fuse_rgbd, EnergyMap};
    use image::{Rgb, RgbImage};

    /// A crop whose map holds `units` on an `s x s` square.
    fn sample(s: u32, units: f32, color: [u8; 3]) -> PortionSample {
        let img = RgbImage::from_pixel(s, s, Rgb(color));
        let map = EnergyMap::from_values(s, s, vec![units; (s * s) as usize], 0.01).unwrap();
        let kcal = foodlens_core::integrate_energy(&map);
        PortionSample {
            image: fuse_rgbd(&img, &map, 300.0).unwrap(),
            kcal,
        }
    }

    fn dataset(n: usize, seed: u64) -> Vec<PortionSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = rng.random_range(8..24);
                let u = [100.0, 250.0][rng.random_range(0..2)];
                sample(s, u, if u > 200.0 { [200, 60, 40] } else { [40, 160, 60] })
            })
            .collect()
    }

    fn tiny() -> RegressorHyper {
        RegressorHyper {
            input_size: 16,
            backbone: BackboneConfig {
                widths: vec![8, 8],
                blocks_per_stage: 1,
                stem_stride: 2,
            },
            hidden: 16,
            epochs: 1,
            batch_size: 8,
            ..RegressorHyper::default()
        }
    }

    #[test]
    fn resize_preserves_distribution_mass() {
        let s = sample(13, 120.0, [1, 2, 3]);
        let d = resized_distribution(&s.image, 32);
        let total: f64 = d.iter().map(|&v| v as f64).sum::<f64>() * 255.0;
        let orig: f64 = s.image.distribution().as_raw().iter().map(|&v| v as f64).sum();
        assert!((total - orig).abs() / orig < 1e-5);
    }

    #[test]
    fn channel_masks_zero_the_hidden_inputs() {
        let s = sample(10, 50.0, [255, 255, 255]);
        let rgb = encode(&s.image, 8, ChannelMask::RgbOnly, 1.0);
        assert!(rgb[3 * 64..].iter().all(|&v| v == 0.0));
        let dist = encode(&s.image, 8, ChannelMask::DistributionOnly, 1.0);
        assert!(dist[..3 * 64].iter().all(|&v| v == 0.0));
        assert!(dist[3 * 64..].iter().all(|&v| v > 0.0));
        assert_eq!("rgb_only".parse::<ChannelMask>().unwrap(), ChannelMask::RgbOnly);
    }

    #[test]
    fn smoke_training_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train_regressor(&[], &[], &tiny(), 0),
            Err(ModelError::EmptyTrainingSet(_))
        ));
        let data = dataset(8, 1);
        let model = train_regressor(&data, &[], &tiny(), 3).unwrap();
        assert!(model.log().epochs[0].train_loss.is_finite());
        let path = dir.path().join("reg.safetensors");
        model.save(&path).unwrap();
        let loaded = RegressorModel::load(&path).unwrap();
        for s in &data {
            let a = model.estimate_portion(&s.image).unwrap();
            assert!(a.is_finite() && a >= 0.0);
            assert_eq!(a, loaded.estimate_portion(&s.image).unwrap());
            assert_eq!(a, model.estimate_portion(&s.image).unwrap());
        }
    }

    #[test]
    fn learns_portions_from_the_distribution_channel() {
        let hyper = RegressorHyper { epochs: 25, ..tiny() };
        let train = dataset(160, 4);
        let val = dataset(40, 5);
        let model = train_regressor(&train, &val, &hyper, 9).unwrap();
        let mean = val.iter().map(|s| s.kcal).sum::<f64>() / val.len() as f64;
        let mae = model.log().last().unwrap().val_metric.unwrap();
        assert!(mae <= 0.15 * mean, "val MAE {mae} vs mean {mean}");
    }

    #[test]
    fn constant_target_is_fit() {
        let mut train = dataset(32, 6);
        for s in &mut train {
            s.kcal = 50.0;
        }
        let hyper = RegressorHyper { epochs: 15, ..tiny() };
        let model = train_regressor(&train, &[], &hyper, 2).unwrap();
        let mae = model.log().last().unwrap().train_loss;
        assert!(mae < 5.0, "train MAE {mae}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let report = gradient_check(8).unwrap();
        assert!(report.checked > 20);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
