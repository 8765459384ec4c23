//! Stochastic view generation. Every sample gets two independent draws of
//! the chain crop -> flip -> grayscale -> jitter.
//!
//! Inputs with three channels are treated as images. Anything else is a flat
//! vector, for which each transform has a coordinate-space analog.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Channel-major layout of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_image(&self) -> bool {
        self.channels == 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of the crop's area as a fraction of the input area.
    pub crop_scale: [f64; 2],
    /// Output `[height, width]` of the resized crop.
    pub crop_out: [usize; 2],
    pub flip_prob: f64,
    pub grayscale_prob: f64,
    pub jitter_prob: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// `h` maps to a channel-rotation blend of weight `|h - 1|`.
    pub hue: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: [0.2, 1.0],
            crop_out: [16, 16],
            flip_prob: 0.5,
            grayscale_prob: 0.2,
            jitter_prob: 0.8,
            brightness: [0.6, 1.4],
            contrast: [0.6, 1.4],
            saturation: [0.6, 1.4],
            hue: [0.9, 1.1],
        }
    }
}

impl AugmentConfig {
    /// No randomness: full-size crop, every probability zero.
    pub fn identity(crop_out: [usize; 2]) -> Self {
        AugmentConfig {
            crop_scale: [1.0, 1.0],
            crop_out,
            flip_prob: 0.0,
            grayscale_prob: 0.0,
            jitter_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("augment.crop_scale", format!("need 0 < lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        if self.crop_out.contains(&0) {
            return Err(Error::config("augment.crop_out", "dimensions must be positive"));
        }
        for (p, field) in
            [(self.flip_prob, "flip_prob"), (self.grayscale_prob, "grayscale_prob"), (self.jitter_prob, "jitter_prob")]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{field}"), format!("probability out of [0, 1]: {p}")));
            }
        }
        for ([lo, hi], field) in
            [(self.brightness, "brightness"), (self.contrast, "contrast"), (self.saturation, "saturation")]
        {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!("augment.{field}"), format!("need 0 <= lo <= hi, got [{lo}, {hi}]")));
            }
        }
        let [lo, hi] = self.hue;
        if !(lo >= 0.0 && lo <= hi && hi <= 2.0) {
            return Err(Error::config("augment.hue", format!("need 0 <= lo <= hi <= 2, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    fn output_shape(&self, input: ImageShape) -> ImageShape {
        if input.is_image() {
            ImageShape::new(3, self.crop_out[0], self.crop_out[1])
        } else {
            input
        }
    }
}

/// One concrete transform with its drawn parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    /// Crop `height x width` pixels at `(top, left)`, then resize to `out`.
    /// For vectors, keep `width` coordinates starting at `left` and zero the rest.
    CropResize {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        out: [usize; 2],
    },
    HFlip,
    Grayscale,
    Jitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
}

/// Applies one transform, returning the new sample and its shape.
pub fn transform(t: &Transform, x: &[f32], shape: ImageShape) -> Result<(Vec<f32>, ImageShape)> {
    if x.len() != shape.numel() {
        return Err(Error::ShapeMismatch {
            op: "transform",
            lhs: vec![x.len()],
            rhs: vec![shape.channels, shape.height, shape.width],
        });
    }
    if shape.is_image() {
        image_transform(t, x, shape)
    } else {
        Ok((vector_transform(t, x)?, shape))
    }
}

fn out_of_range(detail: String) -> Error {
    Error::Domain { op: "transform", detail }
}

fn check_jitter(brightness: f64, contrast: f64, saturation: f64, hue: f64) -> Result<()> {
    if [brightness, contrast, saturation].iter().any(|f| !(*f >= 0.0 && f.is_finite())) || !(0.0..=2.0).contains(&hue) {
        return Err(out_of_range(format!("jitter factors ({brightness}, {contrast}, {saturation}, {hue})")));
    }
    Ok(())
}

fn image_transform(t: &Transform, x: &[f32], shape: ImageShape) -> Result<(Vec<f32>, ImageShape)> {
    let ImageShape { height: h, width: w, .. } = shape;
    let plane = h * w;
    match *t {
        Transform::CropResize { top, left, height, width, out } => {
            if height == 0 || width == 0 || top + height > h || left + width > w || out.contains(&0) {
                return Err(out_of_range(format!("crop {height}x{width} at ({top}, {left}) -> {out:?} on {h}x{w}")));
            }
            let [oh, ow] = out;
            let mut y = vec![0f32; 3 * oh * ow];
            let sy = height as f64 / oh as f64;
            let sx = width as f64 / ow as f64;
            let coord = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
                let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(len - 1), src - i0 as f64)
            };
            for oy in 0..oh {
                let (y0, y1, fy) = coord(oy, sy, height);
                for ox in 0..ow {
                    let (x0, x1, fx) = coord(ox, sx, width);
                    for c in 0..3 {
                        let px = |r: usize, col: usize| x[c * plane + (top + r) * w + left + col] as f64;
                        let v = if fy == 0.0 && fx == 0.0 {
                            px(y0, x0)
                        } else {
                            let a = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                            let b = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                            a * (1.0 - fy) + b * fy
                        };
                        y[c * oh * ow + oy * ow + ox] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            Ok((y, ImageShape::new(3, oh, ow)))
        }
        Transform::HFlip => {
            let mut y = x.to_vec();
            for row in y.chunks_mut(w) {
                row.reverse();
            }
            Ok((y, shape))
        }
        Transform::Grayscale => {
            let mut y = x.to_vec();
            for p in 0..plane {
                let (r, g, b) = (x[p], x[plane + p], x[2 * plane + p]);
                // already gray pixels stay bit-identical
                let l = if r == g && g == b {
                    r
                } else {
                    (LUMA[0] * r as f64 + LUMA[1] * g as f64 + LUMA[2] * b as f64).clamp(0.0, 1.0) as f32
                };
                for c in 0..3 {
                    y[c * plane + p] = l;
                }
            }
            Ok((y, shape))
        }
        Transform::Jitter { brightness, contrast, saturation, hue } => {
            check_jitter(brightness, contrast, saturation, hue)?;
            let mut y: Vec<f64> = x.iter().map(|v| *v as f64).collect();
            let luma = |y: &[f64], p: usize| LUMA[0] * y[p] + LUMA[1] * y[plane + p] + LUMA[2] * y[2 * plane + p];
            // written as blends so a factor of exactly 1 is an exact identity
            let blend = |v: f64, other: f64, f: f64| (v * f + other * (1.0 - f)).clamp(0.0, 1.0);
            for v in y.iter_mut() {
                *v = blend(*v, 0.0, brightness);
            }
            let mean = (0..plane).map(|p| luma(&y, p)).sum::<f64>() / plane as f64;
            for v in y.iter_mut() {
                *v = blend(*v, mean, contrast);
            }
            for p in 0..plane {
                let l = luma(&y, p);
                for c in 0..3 {
                    y[c * plane + p] = blend(y[c * plane + p], l, saturation);
                }
            }
            let t = hue - 1.0;
            if t != 0.0 {
                let src = y.clone();
                for c in 0..3 {
                    // positive t pulls each channel toward the previous one
                    let from = if t > 0.0 { (c + 2) % 3 } else { (c + 1) % 3 };
                    for p in 0..plane {
                        y[c * plane + p] = blend(src[c * plane + p], src[from * plane + p], 1.0 - t.abs());
                    }
                }
            }
            Ok((y.into_iter().map(|v| v as f32).collect(), shape))
        }
    }
}

fn vector_transform(t: &Transform, x: &[f32]) -> Result<Vec<f32>> {
    let n = x.len();
    match *t {
        Transform::CropResize { left, width, .. } => {
            if width == 0 || left + width > n {
                return Err(out_of_range(format!("mask window {width} at {left} on length {n}")));
            }
            Ok((0..n).map(|i| if (left..left + width).contains(&i) { x[i] } else { 0.0 }).collect())
        }
        Transform::HFlip => Ok(x.iter().rev().copied().collect()),
        Transform::Grayscale => {
            let mean = x.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
            Ok(vec![mean as f32; n])
        }
        Transform::Jitter { brightness, contrast, saturation, hue } => {
            check_jitter(brightness, contrast, saturation, hue)?;
            let mean = x.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
            Ok(x.iter()
                .map(|v| {
                    let v = *v as f64 * contrast + mean * (1.0 - contrast);
                    (v * brightness) as f32
                })
                .collect())
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draws one transform chain for an input of `shape`.
pub fn sample_chain<R: Rng>(shape: ImageShape, cfg: &AugmentConfig, rng: &mut R) -> Vec<Transform> {
    let mut chain = Vec::with_capacity(4);
    let scale = uniform(rng, cfg.crop_scale);
    if shape.is_image() {
        // keep the input's aspect ratio: each side shrinks by sqrt(scale)
        let side = |len: usize| ((len as f64 * scale.sqrt()).round() as usize).clamp(1, len);
        let (ch, cw) = (side(shape.height), side(shape.width));
        let top = rng.gen_range(0..=shape.height - ch);
        let left = rng.gen_range(0..=shape.width - cw);
        chain.push(Transform::CropResize { top, left, height: ch, width: cw, out: cfg.crop_out });
    } else {
        let n = shape.numel();
        let width = ((n as f64 * scale).round() as usize).clamp(1, n);
        let left = rng.gen_range(0..=n - width);
        chain.push(Transform::CropResize { top: 0, left, height: 1, width, out: [1, n] });
    }
    if rng.gen_bool(cfg.flip_prob) {
        chain.push(Transform::HFlip);
    }
    if rng.gen_bool(cfg.grayscale_prob) {
        chain.push(Transform::Grayscale);
    }
    if rng.gen_bool(cfg.jitter_prob) {
        chain.push(Transform::Jitter {
            brightness: uniform(rng, cfg.brightness),
            contrast: uniform(rng, cfg.contrast),
            saturation: uniform(rng, cfg.saturation),
            hue: uniform(rng, cfg.hue),
        });
    }
    chain
}

/// One augmented view of `x`.
pub fn augment<R: Rng>(
    x: &[f32],
    shape: ImageShape,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Vec<f32>, ImageShape)> {
    if shape.is_image() && (shape.height < cfg.crop_out[0] || shape.width < cfg.crop_out[1]) {
        return Err(Error::Invalid(format!(
            "image {}x{} is smaller than crop_out {:?}",
            shape.height, shape.width, cfg.crop_out
        )));
    }
    let mut cur = (x.to_vec(), shape);
    for t in sample_chain(shape, cfg, rng) {
        cur = transform(&t, &cur.0, cur.1)?;
    }
    debug_assert_eq!(cur.1, cfg.output_shape(shape));
    Ok(cur)
}

/// Two independent views of the same sample.
pub fn make_view_pair<R: Rng>(
    x: &[f32],
    shape: ImageShape,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (a, _) = augment(x, shape, cfg, rng)?;
    let (b, _) = augment(x, shape, cfg, rng)?;
    Ok((a, b))
}

/// Flattened width of an augmented view.
pub fn view_dim(shape: ImageShape, cfg: &AugmentConfig) -> usize {
    cfg.output_shape(shape).numel()
}

/// Mixes several integers into one seed (splitmix64 finalizer per part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Independent rng stream for sample `index` in `epoch`.
pub fn sample_stream(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, index]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    const IMG: ImageShape = ImageShape { channels: 3, height: 16, width: 16 };

    fn random_image(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..IMG.numel()).map(|_| rng.gen::<f32>()).collect()
    }

    #[test]
    fn identity_chain() {
        let x = random_image(1);
        let cfg = AugmentConfig::identity([16, 16]);
        let mut rng = sample_stream(0, 0, 0);
        let (a, b) = make_view_pair(&x, IMG, &cfg, &mut rng).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn hflip_involution_and_grayscale_idempotent() {
        let x = random_image(2);
        let (f, s) = transform(&Transform::HFlip, &x, IMG).unwrap();
        assert_ne!(f, x);
        assert_eq!(transform(&Transform::HFlip, &f, s).unwrap().0, x);
        let (g, s) = transform(&Transform::Grayscale, &x, IMG).unwrap();
        assert_eq!(transform(&Transform::Grayscale, &g, s).unwrap().0, g);
        assert_eq!(&g[..256], &g[256..512]);
    }

    #[test]
    fn unit_jitter_is_identity() {
        let x = random_image(3);
        let t = Transform::Jitter { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 1.0 };
        assert_eq!(transform(&t, &x, IMG).unwrap().0, x);
    }

    #[test]
    fn out_of_range_params_rejected() {
        let x = random_image(4);
        let t = Transform::Jitter { brightness: -1.0, contrast: 1.0, saturation: 1.0, hue: 1.0 };
        assert!(transform(&t, &x, IMG).is_err());
        let t = Transform::CropResize { top: 10, left: 0, height: 10, width: 4, out: [16, 16] };
        assert!(transform(&t, &x, IMG).is_err());
    }

    #[test]
    fn small_image_rejected() {
        let x = vec![0.5f32; 3 * 8 * 8];
        let mut rng = sample_stream(0, 0, 0);
        let r = make_view_pair(&x, ImageShape::new(3, 8, 8), &AugmentConfig::default(), &mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn views_differ_under_defaults() {
        let cfg = AugmentConfig::default();
        let mut differ = 0;
        for i in 0..1000 {
            let x = random_image(1000 + i);
            let mut rng = sample_stream(7, 0, i);
            let (a, b) = make_view_pair(&x, IMG, &cfg, &mut rng).unwrap();
            differ += (a != b) as usize;
        }
        assert!(differ >= 990, "{differ}");
    }

    #[test]
    fn same_stream_same_pair() {
        let x = random_image(5);
        let cfg = AugmentConfig::default();
        let p1 = make_view_pair(&x, IMG, &cfg, &mut sample_stream(3, 2, 1)).unwrap();
        let p2 = make_view_pair(&x, IMG, &cfg, &mut sample_stream(3, 2, 1)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn independent_streams_decorrelate() {
        let x = random_image(6);
        let cfg = AugmentConfig::default();
        let (a, _) = augment(&x, IMG, &cfg, &mut sample_stream(1, 0, 0)).unwrap();
        let (b, _) = augment(&x, IMG, &cfg, &mut sample_stream(1, 0, 1)).unwrap();
        let mean = |v: &[f32]| v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (p, q) in a.iter().zip(&b) {
            let (p, q) = (*p as f64 - ma, *q as f64 - mb);
            sab += p * q;
            saa += p * p;
            sbb += q * q;
        }
        assert!(sab / (saa * sbb).sqrt() < 0.999);
    }

    #[test]
    fn vector_mode() {
        let shape = ImageShape::new(1, 1, 6);
        let x = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(transform(&Transform::HFlip, &x, shape).unwrap().0, vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(transform(&Transform::Grayscale, &x, shape).unwrap().0, vec![3.5; 6]);
        let crop = Transform::CropResize { top: 0, left: 2, height: 1, width: 3, out: [1, 6] };
        assert_eq!(transform(&crop, &x, shape).unwrap().0, vec![0.0, 0.0, 3.0, 4.0, 5.0, 0.0]);
        let mut rng = sample_stream(0, 0, 0);
        let (a, b) = make_view_pair(&x, shape, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (6, 6));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { flip_prob: 1.5, ..AugmentConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "augment.flip_prob"));
        let bad = AugmentConfig { crop_scale: [0.0, 1.0], ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn outputs_in_unit_range_with_fixed_shape(seed in any::<u64>(), h in 16usize..24, w in 16usize..24) {
            let shape = ImageShape::new(3, h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..shape.numel()).map(|_| rng.gen::<f32>()).collect();
            let (y, s) = augment(&x, shape, &AugmentConfig::default(), &mut rng).unwrap();
            prop_assert_eq!(s, ImageShape::new(3, 16, 16));
            prop_assert_eq!(y.len(), 768);
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
