//! Four-channel RGB-Distribution inputs for portion regression.

use image::RgbImage;

use crate::energy::{EnergyMap, MapRaster};
use crate::error::{Error, Result};

/// Upper end of the RGB value range the distribution channel is mapped onto.
pub const RGB_RANGE: f32 = 255.0;

/// An RGB crop paired with its energy-map crop.
///
/// The distribution channel holds `value / map_max * 255`, where `map_max` is a
/// fixed global maximum, so magnitudes stay comparable across crops.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbDistributionImage {
    rgb: RgbImage,
    distribution: MapRaster,
    energy_scale: f64,
    map_max: f64,
}

impl RgbDistributionImage {
    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }

    pub fn channels(&self) -> usize {
        4
    }

    pub fn rgb(&self) -> &RgbImage {
        &self.rgb
    }

    pub fn distribution(&self) -> &MapRaster {
        &self.distribution
    }

    pub fn energy_scale(&self) -> f64 {
        self.energy_scale
    }

    pub fn map_max(&self) -> f64 {
        self.map_max
    }

    /// kcal represented by one unit of the distribution channel on one pixel.
    pub fn kcal_per_channel_unit(&self) -> f64 {
        self.map_max * self.energy_scale / RGB_RANGE as f64
    }

    /// Value of channel `c` (0..4) at `(x, y)`; RGB as 0..=255.
    pub fn channel_value(&self, c: usize, x: u32, y: u32) -> f32 {
        match c {
            0..=2 => self.rgb.get_pixel(x, y).0[c] as f32,
            3 => self.distribution.get_pixel(x, y).0[0],
            _ => panic!("channel {c} out of range"),
        }
    }
}

/// Stacks an RGB crop with its map crop into a four-channel image.
pub fn fuse_rgbd(rgb_crop: &RgbImage, map_crop: &EnergyMap, map_max: f64) -> Result<RgbDistributionImage> {
    if rgb_crop.dimensions() != map_crop.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "rgb crop {:?} vs map crop {:?}",
            rgb_crop.dimensions(),
            map_crop.dimensions()
        )));
    }
    if !(map_max.is_finite() && map_max > 0.0) {
        return Err(Error::InvalidArgument(format!("global map maximum must be positive, got {map_max}")));
    }
    let factor = (RGB_RANGE as f64 / map_max) as f32;
    let (w, h) = map_crop.dimensions();
    let values = map_crop.values().iter().map(|v| v * factor).collect();
    Ok(RgbDistributionImage {
        rgb: rgb_crop.clone(),
        distribution: MapRaster::from_raw(w, h, values).expect("sized buffer"),
        energy_scale: map_crop.energy_scale(),
        map_max,
    })
}

/// Absolute portion error `|gt - pred|`.
pub fn l1_loss(pred: f64, gt: f64) -> f64 {
    (gt - pred).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn rgb_untouched_and_shape() {
        let rgb = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 80, 7]));
        let map = EnergyMap::from_values(5, 3, (0..15).map(|v| v as f32).collect(), 0.01).unwrap();
        let f = fuse_rgbd(&rgb, &map, 300.0).unwrap();
        assert_eq!(f.rgb(), &rgb);
        assert_eq!((f.width(), f.height(), f.channels()), (5, 3, 4));
        assert_eq!(f.channel_value(3, 4, 2), 14.0 * (255.0f64 / 300.0) as f32);
    }

    #[test]
    fn zero_map_zero_channel() {
        let rgb = RgbImage::new(4, 4);
        let f = fuse_rgbd(&rgb, &EnergyMap::zeros(4, 4, 1.0).unwrap(), 10.0).unwrap();
        assert!(f.distribution().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn global_scale_is_linear() {
        let rgb = RgbImage::new(2, 2);
        let a = EnergyMap::from_values(2, 2, vec![10.0, 20.0, 30.0, 0.0], 1.0).unwrap();
        let b = EnergyMap::from_values(2, 2, vec![20.0, 40.0, 60.0, 0.0], 1.0).unwrap();
        let (fa, fb) = (fuse_rgbd(&rgb, &a, 100.0).unwrap(), fuse_rgbd(&rgb, &b, 100.0).unwrap());
        for (x, y) in fa.distribution().iter().zip(fb.distribution().iter()) {
            assert_eq!(*y, 2.0 * x);
        }
    }

    #[test]
    fn mismatch_rejected() {
        let rgb = RgbImage::new(4, 3);
        assert!(fuse_rgbd(&rgb, &EnergyMap::zeros(3, 4, 1.0).unwrap(), 1.0).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(5.0, 5.0), 0.0);
        assert_eq!(l1_loss(90.0, 100.0), 10.0);
    }

    proptest! {
        #[test]
        fn l1_symmetric_and_triangle(a in -1e4f64..1e4, b in -1e4f64..1e4, c in -1e4f64..1e4) {
            prop_assert_eq!(l1_loss(a, b), l1_loss(b, a));
            prop_assert_eq!(l1_loss(a, a), 0.0);
            prop_assert!(l1_loss(a, c) <= l1_loss(a, b) + l1_loss(b, c) + 1e-9);
        }
    }
}
