//! Small layer set on top of candle tensors.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = ps.get(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], Init::Kaiming { fan_in, gain })?;
        let bias = ps.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// 3x3 convolution followed by nearest-neighbour 2x upsampling.
#[derive(Debug, Clone)]
pub struct Upsample2x {
    conv: Conv2d,
}

impl Upsample2x {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, name, c_in, c_out, 3, 1, 1, 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(x)?.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64) -> Result<Self> {
        let weight = ps.get(&format!("{name}.weight"), &[d_out, d_in], Init::Kaiming { fan_in: d_in, gain })?;
        let bias = ps.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Two 3x3 convolutions with an identity (or 1x1 projection) shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, 1.0)?;
        // Second conv starts small so a fresh block is close to the identity.
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, 0.25)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(ps, &format!("{name}.proj"), c_in, c_out, 1, stride, 0, 1.0)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Depth and width of a small residual backbone.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Channel width per stage; every stage after the first halves the resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stride of the 3x3 stem convolution.
    pub stem_stride: usize,
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.stem_stride << self.widths.len().saturating_sub(1)
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.blocks_per_stage == 0 || self.stem_stride == 0 {
            return Err(crate::error::ModelError::InvalidInput(format!("invalid backbone {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    stem: Conv2d,
    blocks: Vec<ResidualBlock>,
}

impl ResNet {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv2d::new(ps, &format!("{name}.stem"), c_in, cfg.widths[0], 3, cfg.stem_stride, 1, 1.0)?;
        let mut blocks = Vec::new();
        let mut c = cfg.widths[0];
        for (s, &w) in cfg.widths.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(ps, &format!("{name}.s{s}.b{b}"), c, w, stride)?);
                c = w;
            }
        }
        Ok(Self { stem, blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

/// Written as `(1 - slope) * relu(x) + slope * x`, whose backward pass is
/// several times cheaper on CPU than the fused op.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(((x.relu()? * (1.0 - slope))? + (x * slope)?)?)
}

/// Global average pool over the spatial dims: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Element-wise `log(1 + exp(x))`, computed without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?)
}

/// Mean binary cross-entropy on logits: `max(x, 0) - x t + log(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let t = logits.relu()? - (logits * targets)?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((t? + soft)?.mean_all()?)
}

/// Summed smooth-L1 (Huber with transition `beta`).
pub fn smooth_l1_sum(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    let diff = (pred - target)?.abs()?;
    let quad = (diff.sqr()? * (0.5 / beta))?;
    let lin = diff.affine(1.0, -0.5 * beta)?;
    let small = diff.lt(beta)?;
    Ok(small.where_cond(&quad, &lin)?.sum_all()?)
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let n = x.elem_count();
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random_bool(keep) { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Stacks planar CHW images into an `(N, C, H, W)` tensor.
pub fn stack_planar(images: &[Vec<f32>], channels: usize, height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * channels * height * width);
    for img in images {
        assert_eq!(img.len(), channels * height * width, "planar image size");
        data.extend_from_slice(img);
    }
    Ok(Tensor::from_vec(data, (images.len(), channels, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
