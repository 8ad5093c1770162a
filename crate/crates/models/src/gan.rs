//! Conditional GAN that maps a scene image to its energy-distribution map.
//!
//! The generator is an encoder-decoder with skip connections plus a
//! full-resolution stem whose features feed the output head; it predicts the
//! map divided by a fixed `map_norm` with a linear output. Dropout in the innermost decoder layer is the noise
//! source and is active only during training. The discriminator scores
//! overlapping patches of the channel-concatenated (image, map) pair.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use foodlens_core::raster::rgb_to_planar;
use foodlens_core::{DatasetManifest, EatingOccasionRecord, EnergyMap};

use crate::classifier::flip_planar;
use crate::error::{ModelError, Result};
use crate::nn::{bce_with_logits, dropout, leaky_relu, scalar, stack_planar, Conv2d, Upsample2x};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::{adam, cosine_lr, ensure_finite, shuffled, EpochLog, TrainLog};

pub const CHECKPOINT_FORMAT: &str = "foodlens-energy-gan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanHyper {
    /// Number of stride-2 encoder levels; inputs are padded to a multiple of `2^depth`.
    pub depth: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub disc_width: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    /// Weight of the L1 reconstruction term.
    pub lambda: f64,
    pub flip_augment: bool,
    /// Map value corresponding to a generator output of 1; measured from the
    /// training maps when unset.
    pub map_norm: Option<f64>,
}

impl Default for GanHyper {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 16,
            max_width: 64,
            disc_width: 16,
            dropout: 0.5,
            epochs: 20,
            batch_size: 8,
            learning_rate: 2e-3,
            beta1: 0.5,
            lambda: 100.0,
            flip_augment: true,
            map_norm: None,
        }
    }
}

impl GanHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidInput(m.to_string()));
        if self.depth == 0 || self.base_width == 0 || self.max_width == 0 || self.disc_width == 0 {
            return bad("GAN depth and widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("GAN dropout must lie in [0, 1)");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if let Some(n) = self.map_norm {
            if !(n.is_finite() && n > 0.0) {
                return bad("map_norm must be positive");
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(self.max_width)
    }
}

/// One training pair: scene image and its groundtruth map.
#[derive(Debug, Clone, PartialEq)]
pub struct GanSample {
    pub image: RgbImage,
    pub map: EnergyMap,
}

/// Loads image/map pairs; every record must reference a groundtruth map.
pub fn gan_samples<'a>(
    manifest: &DatasetManifest,
    records: impl IntoIterator<Item = &'a EatingOccasionRecord>,
) -> Result<Vec<GanSample>> {
    records
        .into_iter()
        .map(|r| {
            let map = manifest.load_energy_map(r)?.ok_or_else(|| {
                ModelError::InvalidInput(format!("record {} has no groundtruth energy map", r.image_id))
            })?;
            Ok(GanSample {
                image: manifest.load_image(r)?,
                map,
            })
        })
        .collect()
}

struct Generator {
    stem: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Upsample2x>,
    head: Conv2d,
    out: Conv2d,
    dropout: f64,
}

impl Generator {
    fn new(ps: &mut ParamStore, h: &GanHyper) -> Result<Self> {
        let stem = Conv2d::new(ps, "gen.stem", 3, h.base_width, 3, 1, 1, 1.0)?;
        let mut down = Vec::new();
        let mut c = h.base_width;
        for level in 0..h.depth {
            let w = h.width(level);
            down.push(Conv2d::new(ps, &format!("gen.down{level}"), c, w, 4, 2, 1, 1.0)?);
            c = w;
        }
        let mut up = Vec::new();
        for level in (0..h.depth).rev() {
            let c_in = if level + 1 == h.depth {
                h.width(level)
            } else {
                2 * h.width(level)
            };
            let c_out = if level == 0 { h.base_width } else { h.width(level - 1) };
            up.push(Upsample2x::new(ps, &format!("gen.up{level}"), c_in, c_out)?);
        }
        let head = Conv2d::new(ps, "gen.head", 2 * h.base_width, h.base_width, 1, 1, 0, 1.0)?;
        let out = Conv2d::new(ps, "gen.out", h.base_width, 1, 1, 1, 0, 0.5)?;
        Ok(Self {
            stem,
            down,
            up,
            head,
            out,
            dropout: h.dropout,
        })
    }

    /// Normalized map for padded inputs `(N, 3, H, W)`; unbounded, clamped at
    /// zero only at inference.
    fn forward(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.down.len());
        let stem = leaky_relu(&self.stem.forward(x)?, 0.2)?;
        let mut h = stem.clone();
        for (i, conv) in self.down.iter().enumerate() {
            h = conv.forward(&h)?;
            h = if i + 1 == self.down.len() {
                h.relu()?
            } else {
                leaky_relu(&h, 0.2)?
            };
            skips.push(h.clone());
        }
        let mut rng = rng;
        let depth = self.down.len();
        for (k, up) in self.up.iter().enumerate() {
            let level = depth - 1 - k;
            let input = if k == 0 {
                h.clone()
            } else {
                Tensor::cat(&[&h, &skips[level]], 1)?
            };
            h = up.forward(&input)?.relu()?;
            if k == 0 {
                if let Some(r) = rng.as_deref_mut() {
                    h = dropout(&h, self.dropout, r)?;
                }
            }
        }
        let h = leaky_relu(&self.head.forward(&Tensor::cat(&[&h, &stem], 1)?)?, 0.2)?;
        self.out.forward(&h)
    }
}

struct Discriminator {
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl Discriminator {
    fn new(ps: &mut ParamStore, h: &GanHyper) -> Result<Self> {
        let w = h.disc_width;
        let convs = vec![
            Conv2d::new(ps, "disc.c0", 4, w, 4, 2, 1, 1.0)?,
            Conv2d::new(ps, "disc.c1", w, 2 * w, 4, 2, 1, 1.0)?,
            Conv2d::new(ps, "disc.c2", 2 * w, 2 * w, 3, 1, 1, 1.0)?,
        ];
        let out = Conv2d::new(ps, "disc.out", 2 * w, 1, 3, 1, 1, 0.5)?;
        Ok(Self { convs, out })
    }

    /// Patch logits for image `x` and normalized map `y`.
    fn forward(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut h = Tensor::cat(&[x, &(y - 0.5)?], 1)?;
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?, 0.2)?;
        }
        self.out.forward(&h)
    }
}

fn padded_size(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Zero-pads a planar `(C, h, w)` buffer to `(C, ph, pw)` at the bottom/right.
fn pad_planar(data: &[f32], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    if h == ph && w == pw {
        return data.to_vec();
    }
    let mut out = vec![0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &data[(ch * h + y) * w..(ch * h + y + 1) * w];
            out[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    out
}

fn image_input(img: &RgbImage, ph: usize, pw: usize) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar: Vec<f32> = rgb_to_planar(img, w, h).into_iter().map(|v| v - 0.5).collect();
    pad_planar(&planar, 3, h, w, ph, pw)
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: GanHyper,
    map_norm: f64,
    energy_scale: f64,
    seed: u64,
    log: TrainLog,
}

/// Trained generator plus the constants needed to turn its output into an
/// [`EnergyMap`].
pub struct GeneratorModel {
    params: ParamStore,
    net: Generator,
    hyper: GanHyper,
    map_norm: f64,
    energy_scale: f64,
    seed: u64,
    log: TrainLog,
}

impl std::fmt::Debug for GeneratorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorModel")
            .field("hyper", &self.hyper)
            .field("map_norm", &self.map_norm)
            .field("energy_scale", &self.energy_scale)
            .finish_non_exhaustive()
    }
}

struct Prepared {
    x: Vec<Vec<f32>>,
    y: Vec<Vec<f32>>,
    height: usize,
    width: usize,
}

fn prepare(samples: &[GanSample], map_norm: f64, multiple: usize, dims: (u32, u32)) -> Result<Prepared> {
    let (w, h) = (dims.0 as usize, dims.1 as usize);
    let (ph, pw) = (padded_size(h, multiple), padded_size(w, multiple));
    let mut x = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.image.dimensions() != dims || s.map.dimensions() != dims {
            return Err(ModelError::InvalidInput(format!(
                "GAN sample {i}: image {:?} and map {:?} must both be {dims:?}",
                s.image.dimensions(),
                s.map.dimensions()
            )));
        }
        x.push(image_input(&s.image, ph, pw));
        let norm: Vec<f32> = s.map.values().iter().map(|&v| (v as f64 / map_norm) as f32).collect();
        y.push(pad_planar(&norm, 1, h, w, ph, pw));
    }
    Ok(Prepared {
        x,
        y,
        height: ph,
        width: pw,
    })
}

pub fn train_energy_gan(train: &[GanSample], val: &[GanSample], hyper: &GanHyper, seed: u64) -> Result<GeneratorModel> {
    hyper.validate()?;
    let first = train
        .first()
        .ok_or_else(|| ModelError::EmptyTrainingSet("GAN received no image/map pairs".into()))?;
    let energy_scale = first.map.energy_scale();
    if train.iter().any(|s| s.map.energy_scale() != energy_scale) {
        return Err(ModelError::InvalidInput("training maps disagree on energy_scale".into()));
    }
    let map_norm = match hyper.map_norm {
        Some(n) => n,
        None => {
            let max = train.iter().map(|s| s.map.max_value() as f64).fold(0.0, f64::max);
            if max > 0.0 {
                max
            } else {
                1.0
            }
        }
    };
    let dims = first.image.dimensions();
    let multiple = 1usize << hyper.depth;
    let data = prepare(train, map_norm, multiple, dims)?;
    let val_data = prepare(val, map_norm, multiple, dims)?;
    let (ph, pw) = (data.height, data.width);

    let mut gen_params = ParamStore::seeded(seed, DType::F32);
    let gen = Generator::new(&mut gen_params, hyper)?;
    let mut disc_params = ParamStore::seeded(seed ^ 0xd15c_0000, DType::F32);
    let disc = Discriminator::new(&mut disc_params, hyper)?;
    let mut opt_g = adam(gen_params.vars(), hyper.learning_rate, hyper.beta1, 0.0)?;
    let mut opt_d = adam(disc_params.vars(), hyper.learning_rate, hyper.beta1, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a4e_5eed);
    let mut log = TrainLog::default();

    for epoch in 0..hyper.epochs {
        let lr = cosine_lr(hyper.learning_rate, 0.1, epoch, hyper.epochs);
        opt_g.set_learning_rate(lr);
        opt_d.set_learning_rate(lr);
        let order = shuffled(data.x.len(), &mut rng);
        let (mut g_sum, mut d_sum, mut n) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for &i in batch {
                let (mut x, mut y) = (data.x[i].clone(), data.y[i].clone());
                if hyper.flip_augment && ph == pw && rng.random_bool(0.5) {
                    flip_planar(&mut x, 3, ph, true);
                    flip_planar(&mut y, 1, ph, true);
                }
                xs.push(x);
                ys.push(y);
            }
            let x = stack_planar(&xs, 3, ph, pw, DType::F32)?;
            let y = stack_planar(&ys, 1, ph, pw, DType::F32)?;
            let fake = gen.forward(&x, Some(&mut rng))?;

            let real_logits = disc.forward(&x, &y)?;
            let fake_logits = disc.forward(&x, &fake.detach())?;
            let d_loss = (bce_with_logits(&real_logits, &real_logits.ones_like()?)?
                + bce_with_logits(&fake_logits, &fake_logits.zeros_like()?)?)?;
            let d_value = ensure_finite("train-energy-gan", epoch, step, scalar(&d_loss)?)?;
            opt_d.backward_step(&d_loss)?;

            let adv_logits = disc.forward(&x, &fake)?;
            let adv = bce_with_logits(&adv_logits, &adv_logits.ones_like()?)?;
            let l1 = (&fake - &y)?.abs()?.mean_all()?;
            let g_loss = (adv + (l1 * hyper.lambda)?)?;
            let g_value = ensure_finite("train-energy-gan", epoch, step, scalar(&g_loss)?)?;
            opt_g.backward_step(&g_loss)?;

            g_sum += g_value * batch.len() as f64;
            d_sum += d_value * batch.len() as f64;
            n += batch.len();
        }
        let val_l1 = if val_data.x.is_empty() {
            None
        } else {
            Some(mean_l1(&gen, &val_data, hyper.batch_size)? * map_norm)
        };
        let entry = EpochLog {
            epoch,
            train_loss: g_sum / n as f64,
            val_loss: None,
            val_metric: val_l1,
            aux_loss: Some(d_sum / n as f64),
        };
        log::info!(
            "energy-gan epoch {epoch}: G {:.4}, D {:.4}, val L1 {:?}",
            entry.train_loss,
            d_sum / n as f64,
            val_l1
        );
        log.push(entry);
    }

    Ok(GeneratorModel {
        params: gen_params,
        net: gen,
        hyper: hyper.clone(),
        map_norm,
        energy_scale,
        seed,
        log,
    })
}

/// Mean absolute error of the normalized maps, padded border included.
fn mean_l1(gen: &Generator, data: &Prepared, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (xs, ys) in data.x.chunks(batch).zip(data.y.chunks(batch)) {
        let x = stack_planar(xs, 3, data.height, data.width, DType::F32)?;
        let y = stack_planar(ys, 1, data.height, data.width, DType::F32)?;
        let fake = gen.forward(&x, None)?.relu()?;
        count += y.elem_count();
        total += scalar(&(fake - y)?.abs()?.sum_all()?)?;
    }
    Ok(total / count as f64)
}

impl GeneratorModel {
    pub fn hyper(&self) -> &GanHyper {
        &self.hyper
    }

    pub fn map_norm(&self) -> f64 {
        self.map_norm
    }

    pub fn energy_scale(&self) -> f64 {
        self.energy_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Deterministic map for `image`; same size as the input, values >= 0.
    pub fn generate_energy_map(&self, image: &RgbImage) -> Result<EnergyMap> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w == 0 || h == 0 {
            return Err(ModelError::InvalidInput("empty image".into()));
        }
        let multiple = 1usize << self.hyper.depth;
        let (ph, pw) = (padded_size(h, multiple), padded_size(w, multiple));
        let x = stack_planar(&[image_input(image, ph, pw)], 3, ph, pw, self.params.dtype())?;
        let out = self
            .net
            .forward(&x, None)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let norm = self.map_norm as f32;
        let mut values = Vec::with_capacity(w * h);
        for row in out.chunks(pw).take(h) {
            values.extend(row[..w].iter().map(|&v| (v * norm).max(0.0)));
        }
        Ok(EnergyMap::from_values(w as u32, h as u32, values, self.energy_scale)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            hyper: self.hyper.clone(),
            map_norm: self.map_norm,
            energy_scale: self.energy_scale,
            seed: self.seed,
            log: self.log.clone(),
        };
        save_checkpoint(path, CHECKPOINT_FORMAT, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (Header, _) = load_checkpoint(path, CHECKPOINT_FORMAT)?;
        let mut params = ParamStore::from_tensors(tensors, DType::F32);
        let net = Generator::new(&mut params, &header.hyper)?;
        Ok(Self {
            params,
            net,
            hyper: header.hyper,
            map_norm: header.map_norm,
            energy_scale: header.energy_scale,
            seed: header.seed,
            log: header.log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use foodlens_core::{generate_scene, SceneConfig};

    fn samples(n: usize, seed: u64) -> Vec<GanSample> {
        let cfg = SceneConfig {
            image_size: [32, 32],
            size_range: [8, 14],
            items_per_scene: [1, 2],
            ..SceneConfig::default()
        };
        (0..n)
            .map(|i| {
                let s = generate_scene(&cfg, seed + i as u64).unwrap();
                GanSample {
                    image: s.image,
                    map: s.energy_map,
                }
            })
            .collect()
    }

    fn tiny(epochs: usize) -> GanHyper {
        GanHyper {
            depth: 3,
            base_width: 8,
            max_width: 16,
            disc_width: 8,
            epochs,
            batch_size: 2,
            ..GanHyper::default()
        }
    }

    #[test]
    fn smoke_training_writes_a_reloadable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let train = samples(4, 0);
        let model = train_energy_gan(&train, &[], &tiny(2), 1).unwrap();
        assert_eq!(model.log().epochs.len(), 2);
        for e in &model.log().epochs {
            assert!(e.train_loss.is_finite() && e.aux_loss.unwrap().is_finite());
        }
        let path = dir.path().join("gan.safetensors");
        model.save(&path).unwrap();
        let loaded = GeneratorModel::load(&path).unwrap();
        let a = model.generate_energy_map(&train[0].image).unwrap();
        assert_eq!(a, loaded.generate_energy_map(&train[0].image).unwrap());
        assert_eq!(a, model.generate_energy_map(&train[0].image).unwrap());
        assert_eq!(a.energy_scale(), train[0].map.energy_scale());
    }

    #[test]
    fn output_matches_input_shape_with_padding() {
        let model = train_energy_gan(&samples(2, 5), &[], &tiny(1), 2).unwrap();
        let img = RgbImage::from_pixel(21, 13, image::Rgb([10, 200, 30]));
        let map = model.generate_energy_map(&img).unwrap();
        assert_eq!(map.dimensions(), (21, 13));
        assert!(map.values().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn empty_training_set_and_missing_maps_are_rejected() {
        assert!(matches!(
            train_energy_gan(&[], &[], &tiny(1), 0),
            Err(ModelError::EmptyTrainingSet(_))
        ));
        let mut m = DatasetManifest::new(vec!["a".into()], Vec::new(), ".");
        m.records.push(EatingOccasionRecord {
            image_id: "x".into(),
            image_path: "x.png".into(),
            energy_map_path: None,
            energy_scale: 1.0,
            annotations: Vec::new(),
        });
        let recs = m.records.clone();
        assert!(gan_samples(&m, &recs).is_err());
    }

    #[test]
    fn padding_round_trip() {
        let data: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let p = pad_planar(&data, 1, 2, 3, 4, 4);
        assert_eq!(&p[..4], &[0.0, 1.0, 2.0, 0.0]);
        assert_eq!(&p[4..8], &[3.0, 4.0, 5.0, 0.0]);
        assert!(p[8..].iter().all(|&v| v == 0.0));
    }
}
