use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nst::SasslParams;
use crate::rng::View;

/// A probability that may differ between the two views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerView {
    pub left: f64,
    pub right: f64,
}

impl PerView {
    pub fn get(&self, view: View) -> f64 {
        match view {
            View::Left => self.left,
            View::Right => self.right,
        }
    }
}

/// Configuration of the two-view augmentation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugPolicy {
    pub crop_area_range: [f64; 2],
    pub crop_aspect_range: [f64; 2],
    pub output_size: usize,
    pub hflip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: PerView,
    pub blur_sigma_range: [f64; 2],
    pub solarize_p: PerView,
    pub solarize_threshold: f64,
    /// `None` removes the style block from the pipeline; when deserializing,
    /// an absent `sassl` table means `None`.
    #[serde(default)]
    pub sassl: Option<SasslParams>,
    pub sassl_views: Vec<View>,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            crop_area_range: [0.08, 1.0],
            crop_aspect_range: [3.0 / 4.0, 4.0 / 3.0],
            output_size: 32,
            hflip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: PerView { left: 1.0, right: 0.1 },
            blur_sigma_range: [0.1, 2.0],
            solarize_p: PerView { left: 0.0, right: 0.2 },
            solarize_threshold: 0.5,
            sassl: Some(SasslParams::default()),
            sassl_views: vec![View::Left],
        }
    }
}

fn check_p(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is outside [0, 1]")))
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    let ok = r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!positive || r[0] > 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {r:?} is not an ordered valid range")))
    }
}

impl AugPolicy {
    /// The same policy without the style block.
    pub fn without_sassl(&self) -> Self {
        Self {
            sassl: None,
            ..self.clone()
        }
    }

    /// Style parameters if `view` is stylized.
    pub fn sassl_for(&self, view: View) -> Option<&SasslParams> {
        self.sassl.as_ref().filter(|_| self.sassl_views.contains(&view))
    }

    pub fn validate(&self) -> Result<()> {
        check_range("crop_area_range", self.crop_area_range, true)?;
        if self.crop_area_range[1] > 1.0 {
            return Err(Error::Config("crop_area_range must not exceed 1".into()));
        }
        check_range("crop_aspect_range", self.crop_aspect_range, true)?;
        check_range("blur_sigma_range", self.blur_sigma_range, true)?;
        if self.output_size == 0 {
            return Err(Error::Config("output_size must be positive".into()));
        }
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p.left", self.blur_p.left),
            ("blur_p.right", self.blur_p.right),
            ("solarize_p.left", self.solarize_p.left),
            ("solarize_p.right", self.solarize_p.right),
        ] {
            check_p(name, p)?;
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} strength must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.hue) {
            return Err(Error::Config(format!("hue = {} is outside [0, 1]", self.hue)));
        }
        if let Some(s) = &self.sassl {
            s.validate()?;
        }
        Ok(())
    }
}
