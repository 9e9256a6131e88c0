//! Individual image transforms on `[C,H,W]` tensors with values in `[0,1]`.
//! Each random transform opens its own named substream.

use numcore::{kernels, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::policy::AugPolicy;
use crate::error::{Error, Result};
use crate::rng::{SampleRng, View};

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
const CROP_ATTEMPTS: usize = 10;

/// Crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn dims(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("expected a [C,H,W] image, got {:?}", image.shape()))),
    }
}

fn rgb_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match dims(image)? {
        (3, h, w) => Ok((h, w)),
        (c, _, _) => Err(Error::invalid(format!("expected an RGB image, got {c} channels"))),
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn coin(rng: &SampleRng, name: &str, p: f64) -> (rand_chacha::ChaCha8Rng, bool) {
    let mut r = rng.sub(name);
    let hit = r.random::<f64>() < p;
    (r, hit)
}

/// Area fraction uniform in the area range, aspect log-uniform, up to 10
/// attempts, falling back to a centered crop of the largest in-range region.
pub fn sample_crop(h: usize, w: usize, area_range: [f64; 2], aspect_range: [f64; 2], rng: &SampleRng) -> CropRect {
    let mut r = rng.sub("crop");
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (aspect_range[0].ln(), aspect_range[1].ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(&mut r, area_range[0], area_range[1]);
        let aspect = uniform(&mut r, log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = r.random_range(0..=h - ch);
            let left = r.random_range(0..=w - cw);
            return CropRect {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < aspect_range[0] {
        (((w as f64 / aspect_range[0]).round() as usize).clamp(1, h), w)
    } else if ratio > aspect_range[1] {
        (h, ((h as f64 * aspect_range[1]).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    CropRect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Cuts `rect` out of `image` and resizes it bilinearly to `size×size`.
pub fn crop_resize(image: &Tensor<f32>, rect: CropRect, size: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(image)?;
    if rect.top + rect.height > h || rect.left + rect.width > w || rect.height == 0 || rect.width == 0 {
        return Err(Error::invalid(format!("crop {rect:?} outside a {h}x{w} image")));
    }
    let mut cut = Vec::with_capacity(c * rect.height * rect.width);
    for plane in image.data().chunks(h * w) {
        for row in rect.top..rect.top + rect.height {
            cut.extend_from_slice(&plane[row * w + rect.left..row * w + rect.left + rect.width]);
        }
    }
    let out = kernels::resize_bilinear(&cut, c, rect.height, rect.width, size, size);
    Ok(Tensor::new([c, size, size], out)?)
}

pub fn random_resized_crop(image: &Tensor<f32>, policy: &AugPolicy, rng: &SampleRng) -> Result<(Tensor<f32>, CropRect)> {
    let (_, h, w) = dims(image)?;
    let rect = sample_crop(h, w, policy.crop_area_range, policy.crop_aspect_range, rng);
    Ok((crop_resize(image, rect, policy.output_size)?, rect))
}

pub fn flip_columns(image: &Tensor<f32>) -> Tensor<f32> {
    let w = *image.shape().last().expect("image has a width");
    let mut out = image.clone();
    out.data_mut().chunks_mut(w).for_each(<[f32]>::reverse);
    out
}

pub fn hflip(image: &Tensor<f32>, p: f64, rng: &SampleRng) -> (Tensor<f32>, bool) {
    let (_, hit) = coin(rng, "hflip", p);
    if hit {
        (flip_columns(image), true)
    } else {
        (image.clone(), false)
    }
}

fn clamp01(image: &mut Tensor<f32>) {
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn luma_plane(image: &Tensor<f32>, hw: usize) -> Vec<f32> {
    let d = image.data();
    (0..hw)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[hw + i] + LUMA[2] * d[2 * hw + i])
        .collect()
}

pub fn adjust_brightness(image: &Tensor<f32>, factor: f64) -> Tensor<f32> {
    let f = factor as f32;
    let mut out = image.map(|v| v * f);
    clamp01(&mut out);
    out
}

/// Scales deviations from the mean luma of the whole image.
pub fn adjust_contrast(image: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    let (h, w) = rgb_dims(image)?;
    let luma = luma_plane(image, h * w);
    let mean = (luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64) as f32;
    let f = factor as f32;
    let mut out = image.map(|v| (v - mean) * f + mean);
    clamp01(&mut out);
    Ok(out)
}

/// Interpolates each pixel toward its own luma.
pub fn adjust_saturation(image: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    let (h, w) = rgb_dims(image)?;
    let hw = h * w;
    let luma = luma_plane(image, hw);
    let f = factor as f32;
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let l = luma[i % hw];
        *v = (*v - l) * f + l;
    }
    clamp01(&mut out);
    Ok(out)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns of the colour circle.
pub fn adjust_hue(image: &Tensor<f32>, shift: f64) -> Result<Tensor<f32>> {
    let (h, w) = rgb_dims(image)?;
    let hw = h * w;
    let mut out = image.clone();
    let d = out.data_mut();
    let s = shift as f32;
    for i in 0..hw {
        let (hh, ss, vv) = rgb_to_hsv(d[i], d[hw + i], d[2 * hw + i]);
        let (r, g, b) = hsv_to_rgb(hh + s, ss, vv);
        d[i] = r;
        d[hw + i] = g;
        d[2 * hw + i] = b;
    }
    clamp01(&mut out);
    Ok(out)
}

/// Brightness, contrast, saturation and hue in a random order, as a whole
/// with probability `jitter_p`. Factors are drawn in `1 ± strength`
/// (floored at 0); the hue shift in `±0.5·hue` turns.
pub fn color_jitter(image: &Tensor<f32>, policy: &AugPolicy, rng: &SampleRng) -> Result<(Tensor<f32>, bool)> {
    rgb_dims(image)?;
    let (mut r, hit) = coin(rng, "color_jitter", policy.jitter_p);
    if !hit {
        return Ok((image.clone(), false));
    }
    let factor = |r: &mut rand_chacha::ChaCha8Rng, s: f64| uniform(r, (1.0 - s).max(0.0), 1.0 + s);
    let brightness = factor(&mut r, policy.brightness);
    let contrast = factor(&mut r, policy.contrast);
    let saturation = factor(&mut r, policy.saturation);
    let half = 0.5 * policy.hue;
    let hue = uniform(&mut r, -half, half);
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(&mut r);
    let mut out = image.clone();
    for op in order {
        out = match op {
            0 if brightness != 1.0 => adjust_brightness(&out, brightness),
            1 if contrast != 1.0 => adjust_contrast(&out, contrast)?,
            2 if saturation != 1.0 => adjust_saturation(&out, saturation)?,
            3 if hue != 0.0 => adjust_hue(&out, hue)?,
            _ => out,
        };
    }
    Ok((out, true))
}

pub fn to_grayscale(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = rgb_dims(image)?;
    let luma = luma_plane(image, h * w);
    Ok(Tensor::new([3, h, w], luma.repeat(3))?)
}

pub fn grayscale(image: &Tensor<f32>, p: f64, rng: &SampleRng) -> Result<(Tensor<f32>, bool)> {
    rgb_dims(image)?;
    let (_, hit) = coin(rng, "grayscale", p);
    if hit {
        Ok((to_grayscale(image)?, true))
    } else {
        Ok((image.clone(), false))
    }
}

/// Normalized 1-D Gaussian of radius `ceil(2σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (2.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn blur_with_sigma(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(image)?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; c * h * w];
    for (src, dst) in image.data().chunks(h * w).zip(tmp.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * src[y * w + clampi(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for (src, dst) in tmp.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * src[clampi(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    let mut out = Tensor::new([c, h, w], out)?;
    clamp01(&mut out);
    Ok(out)
}

pub fn gaussian_blur(image: &Tensor<f32>, policy: &AugPolicy, view: View, rng: &SampleRng) -> Result<(Tensor<f32>, bool)> {
    let (mut r, hit) = coin(rng, "blur", policy.blur_p.get(view));
    if !hit {
        return Ok((image.clone(), false));
    }
    let sigma = uniform(&mut r, policy.blur_sigma_range[0], policy.blur_sigma_range[1]);
    Ok((blur_with_sigma(image, sigma)?, true))
}

pub fn solarize_with_threshold(image: &Tensor<f32>, threshold: f64) -> Tensor<f32> {
    let t = threshold as f32;
    image.map(|v| if v > t { 1.0 - v } else { v })
}

pub fn solarize(image: &Tensor<f32>, policy: &AugPolicy, view: View, rng: &SampleRng) -> (Tensor<f32>, bool) {
    let (_, hit) = coin(rng, "solarize", policy.solarize_p.get(view));
    if hit {
        (solarize_with_threshold(image, policy.solarize_threshold), true)
    } else {
        (image.clone(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn ramp() -> Tensor<f32> {
        Tensor::from_fn([3, 6, 7], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    fn rng(stream: &RngStream) -> SampleRng<'_> {
        stream.sample(0, Some(View::Left))
    }

    #[test]
    fn full_area_crop_is_whole_image() {
        let s = RngStream::new(1);
        let rect = sample_crop(9, 9, [1.0, 1.0], [1.0, 1.0], &rng(&s));
        assert_eq!(rect, CropRect { top: 0, left: 0, height: 9, width: 9 });
    }

    #[test]
    fn crop_fallback_is_centered() {
        let s = RngStream::new(1);
        let rect = sample_crop(4, 40, [0.9, 1.0], [1.0, 1.0], &rng(&s));
        assert_eq!(rect, CropRect { top: 0, left: 18, height: 4, width: 4 });
    }

    #[test]
    fn crops_stay_inside() {
        let s = RngStream::new(3);
        for i in 0..500 {
            let r = sample_crop(13, 29, [0.08, 1.0], [0.75, 4.0 / 3.0], &s.sample(i, None));
            assert!(r.top + r.height <= 13 && r.left + r.width <= 29 && r.height > 0 && r.width > 0);
        }
    }

    #[test]
    fn flip_reverses_columns_and_is_an_involution() {
        let x = Tensor::from_f64([1, 1, 3], &[0.1, 0.2, 0.3]).unwrap();
        let s = RngStream::new(0);
        let (y, hit) = hflip(&x, 1.0, &rng(&s));
        assert!(hit);
        assert_eq!(y.data(), &[0.3, 0.2, 0.1]);
        assert!(hflip(&y, 1.0, &rng(&s)).0.bit_eq(&x));
        assert!(hflip(&x, 0.0, &rng(&s)).0.bit_eq(&x));
    }

    #[test]
    fn brightness_is_multiplicative() {
        let y = adjust_brightness(&Tensor::full([3, 2, 2], 0.4), 1.5);
        assert!(y.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn zero_strength_jitter_is_identity() {
        let p = AugPolicy {
            jitter_p: 1.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            ..Default::default()
        };
        let s = RngStream::new(2);
        let x = ramp();
        let (y, hit) = color_jitter(&x, &p, &rng(&s)).unwrap();
        assert!(hit);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hue_round_trip_and_full_turn() {
        let x = ramp();
        let y = adjust_hue(&x, 1.0).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let red = Tensor::from_f64([3, 1, 1], &[1.0, 0.0, 0.0]).unwrap();
        let green = adjust_hue(&red, 1.0 / 3.0).unwrap();
        assert!((green.data()[1] - 1.0).abs() < 1e-5 && green.data()[0].abs() < 1e-5);
    }

    #[test]
    fn jitter_rejects_gray_images() {
        let p = AugPolicy::default();
        let s = RngStream::new(0);
        assert!(color_jitter(&Tensor::zeros([1, 4, 4]), &p, &rng(&s)).is_err());
    }

    #[test]
    fn luma_weights() {
        let red = Tensor::from_f64([3, 1, 1], &[1.0, 0.0, 0.0]).unwrap();
        assert!(to_grayscale(&red).unwrap().data().iter().all(|&v| (v - 0.299).abs() < 1e-7));
        let gray = Tensor::full([3, 2, 2], 0.25f32);
        for (a, b) in to_grayscale(&gray).unwrap().data().iter().zip(gray.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn blur_kernel_properties() {
        for sigma in [0.1, 0.7, 2.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (2.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let k = gaussian_kernel(0.1);
        assert!(k[1] > 0.999);
        let mut impulse = Tensor::zeros([1, 5, 5]);
        impulse.data_mut()[12] = 1.0;
        let y = blur_with_sigma(&impulse, 0.1).unwrap();
        assert!(y.data()[12] > 0.999);
        let c = blur_with_sigma(&Tensor::full([3, 6, 6], 0.3), 1.7).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn solarize_definition() {
        let x = Tensor::from_f64([1, 1, 3], &[0.2, 0.8, 0.5]).unwrap();
        let y = solarize_with_threshold(&x, 0.5);
        assert!((y.data()[1] - 0.2).abs() < 1e-7);
        assert_eq!(y.data()[0], 0.2);
        assert_eq!(y.data()[2], 0.5);
        let dark = Tensor::full([3, 2, 2], 0.3f32);
        assert!(solarize_with_threshold(&dark, 0.5).bit_eq(&dark));
    }
}
