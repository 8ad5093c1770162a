//! Energy distribution maps.
//!
//! A map is a single-channel raster aligned pixel-to-pixel with its scene
//! image. Stored values are in map units; one unit on one pixel represents
//! `energy_scale` kcal. On disk maps are 16-bit grayscale PNGs.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::raster::crop_buffer;

pub type MapRaster = ImageBuffer<Luma<f32>, Vec<f32>>;

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    raster: MapRaster,
    energy_scale: f64,
}

impl EnergyMap {
    pub fn new(raster: MapRaster, energy_scale: f64) -> Result<Self> {
        if !(energy_scale.is_finite() && energy_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "energy_scale must be positive, got {energy_scale}"
            )));
        }
        if let Some(v) = raster.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "energy map values must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self {
            raster,
            energy_scale,
        })
    }

    pub fn zeros(width: u32, height: u32, energy_scale: f64) -> Result<Self> {
        Self::new(MapRaster::new(width, height), energy_scale)
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f32>, energy_scale: f64) -> Result<Self> {
        let raster = MapRaster::from_raw(width, height, values).ok_or_else(|| {
            Error::ShapeMismatch(format!("value buffer does not hold {width}x{height} pixels"))
        })?;
        Self::new(raster, energy_scale)
    }

    pub fn width(&self) -> u32 {
        self.raster.width()
    }

    pub fn height(&self) -> u32 {
        self.raster.height()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.raster.dimensions()
    }

    pub fn energy_scale(&self) -> f64 {
        self.energy_scale
    }

    pub fn raster(&self) -> &MapRaster {
        &self.raster
    }

    pub fn values(&self) -> &[f32] {
        self.raster.as_raw()
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.raster.get_pixel(x, y).0[0]
    }

    pub fn max_value(&self) -> f32 {
        self.values().iter().copied().fold(0.0, f32::max)
    }

    /// Replaces the raster keeping the energy scale (used by geometric transforms).
    pub fn with_raster(&self, raster: MapRaster) -> Self {
        Self {
            raster,
            energy_scale: self.energy_scale,
        }
    }

    pub fn load_png16(path: &Path, energy_scale: f64) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let gray = img.to_luma16();
        let (w, h) = gray.dimensions();
        let values = gray.into_raw().into_iter().map(|v| v as f32).collect();
        Self::from_values(w, h, values, energy_scale)
    }

    /// Writes the map as 16-bit grayscale. Values are rounded to the nearest
    /// integer unit and saturate at 65535.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (w, h) = self.dimensions();
        let raw: Vec<u16> = self
            .values()
            .iter()
            .map(|v| v.round().clamp(0.0, u16::MAX as f32) as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w, h, raw).expect("buffer sized from map");
        buf.save(path).map_err(|e| Error::image(path, e))
    }
}

/// Sub-map covered by `bbox`, with the same rasterization as `crop_region`.
pub fn crop_energy_map(map: &EnergyMap, bbox: &BoundingBox) -> Result<EnergyMap> {
    Ok(map.with_raster(crop_buffer(&map.raster, bbox)?))
}

/// Total energy in kcal: the sum of map values times the energy scale.
pub fn integrate_energy(map: &EnergyMap) -> f64 {
    let total: f64 = map.values().iter().map(|&v| v as f64).sum();
    total * map.energy_scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_integrates_to_zero() {
        let m = EnergyMap::zeros(7, 3, 0.25).unwrap();
        assert_eq!(integrate_energy(&m), 0.0);
    }

    #[test]
    fn constant_map_arithmetic() {
        let m = EnergyMap::from_values(10, 10, vec![2.0; 100], 0.5).unwrap();
        assert_eq!(integrate_energy(&m), 100.0);
    }

    #[test]
    fn rejects_negative_values_and_bad_scale() {
        assert!(EnergyMap::from_values(1, 2, vec![1.0, -0.5], 1.0).is_err());
        assert!(EnergyMap::zeros(2, 2, 0.0).is_err());
        assert!(EnergyMap::from_values(3, 3, vec![0.0; 8], 1.0).is_err());
    }

    #[test]
    fn full_crop_identity_and_scale_preserved() {
        let vals: Vec<f32> = (0..48).map(|v| v as f32).collect();
        let m = EnergyMap::from_values(8, 6, vals, 0.1).unwrap();
        let b = BoundingBox::new(0.0, 0.0, 8.0, 6.0).unwrap();
        assert_eq!(crop_energy_map(&m, &b).unwrap(), m);
        let b = BoundingBox::new(2.0, 1.0, 5.0, 3.0).unwrap();
        let c = crop_energy_map(&m, &b).unwrap();
        assert_eq!(c.dimensions(), (3, 2));
        assert_eq!(c.energy_scale(), 0.1);
        assert_eq!(c.get(0, 0), m.get(2, 1));
        assert!(crop_energy_map(&m, &BoundingBox::new(5.0, 0.0, 9.0, 2.0).unwrap()).is_err());
    }

    #[test]
    fn partition_additivity() {
        let vals: Vec<f32> = (0..120).map(|v| ((v * 37) % 11) as f32).collect();
        let m = EnergyMap::from_values(12, 10, vals, 0.75).unwrap();
        let parts = [
            BoundingBox::new(0.0, 0.0, 5.0, 10.0).unwrap(),
            BoundingBox::new(5.0, 0.0, 12.0, 4.0).unwrap(),
            BoundingBox::new(5.0, 4.0, 12.0, 10.0).unwrap(),
        ];
        let sum: f64 = parts
            .iter()
            .map(|b| crop_energy_map(&m, b).map(|c| c.values().iter().map(|&v| v as f64).sum::<f64>()).unwrap())
            .sum();
        assert_eq!(sum * 0.75, integrate_energy(&m));
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..20).map(|v| (v * 1000) as f32).collect();
        let m = EnergyMap::from_values(5, 4, vals, 0.01).unwrap();
        let p = dir.path().join("m.png");
        m.save_png16(&p).unwrap();
        let back = EnergyMap::load_png16(&p, 0.01).unwrap();
        assert_eq!(back, m);
    }
}
