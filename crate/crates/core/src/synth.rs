//! Procedural splice datasets with exact ground-truth masks.
//!
//! Backgrounds are smooth colour gradients with bilinear value noise. The
//! donor is a striped texture in a different colour pasted inside an ellipse
//! or rectangle. In the coarse regime the donor keeps its own colours and is
//! pasted with a hard edge. In the fine regime its alpha is feathered inward
//! from the boundary and its per-channel mean and spread are matched to the
//! background it covers.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::BBox;
use crate::patch::{self, DatasetManifest, ManifestEntry, Role};
use crate::rng::{self, Rng};

pub const MAX_ATTEMPTS: usize = 100;
/// Hard bounds on the donor's share of the image.
pub const AREA_LIMITS: (f64, f64) = (0.01, 0.40);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Coarse,
    Fine,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Coarse => "coarse",
            Regime::Fine => "fine",
        }
    }

    /// Overlap threshold conventionally paired with the regime.
    pub fn overlap(self) -> f64 {
        match self {
            Regime::Coarse => patch::OVERLAP_COARSE,
            Regime::Fine => patch::OVERLAP_FINE,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Regime::Coarse),
            "fine" => Ok(Regime::Fine),
            _ => Err(Error::Config(format!("regime must be `coarse` or `fine`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DonorShape {
    Ellipse,
    Rectangle,
    /// Ellipse or rectangle, chosen per image.
    Mixed,
}

impl std::str::FromStr for DonorShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(DonorShape::Ellipse),
            "rectangle" => Ok(DonorShape::Rectangle),
            "mixed" => Ok(DonorShape::Mixed),
            _ => Err(Error::Config(format!("shape must be ellipse, rectangle or mixed, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub images_per_role: usize,
    pub image_size: u32,
    pub regime: Regime,
    pub seed: u64,
    pub shape: DonorShape,
    /// Donor area as a fraction of the image, sampled in this range.
    pub min_area: f64,
    pub max_area: f64,
    /// Peak-to-peak colour change of the background gradient.
    pub gradient_strength: f64,
    /// Amplitude of the bilinear value noise.
    pub noise_amplitude: f64,
    /// Lattice spacing of the value noise, in pixels.
    pub noise_cell: u32,
    /// Per-pixel uniform noise amplitude.
    pub grain: f64,
    /// Stripe amplitude of the donor texture.
    pub stripe_amplitude: f64,
    /// Inward alpha ramp in pixels; 0 in the coarse regime.
    pub feather_radius: u32,
    /// 0 keeps donor colours, 1 matches them fully to the background.
    pub color_match: f64,
    /// Largest per-channel mean gap tolerated after matching.
    pub color_epsilon: f64,
    /// A donor must allow at least one window of this size and stride
    /// to reach `min_window_overlap`.
    pub patch_size: u32,
    pub stride: u32,
    pub min_window_overlap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::coarse(10, 0)
    }
}

impl SynthConfig {
    pub fn coarse(images_per_role: usize, seed: u64) -> Self {
        SynthConfig {
            images_per_role,
            image_size: 256,
            regime: Regime::Coarse,
            seed,
            shape: DonorShape::Mixed,
            min_area: 0.08,
            max_area: 0.30,
            gradient_strength: 60.0,
            noise_amplitude: 24.0,
            noise_cell: 32,
            grain: 4.0,
            stripe_amplitude: 28.0,
            feather_radius: 0,
            color_match: 0.0,
            color_epsilon: 2.0,
            patch_size: patch::DEFAULT_PATCH_SIZE as u32,
            stride: patch::DEFAULT_STRIDE as u32,
            min_window_overlap: patch::OVERLAP_COARSE,
        }
    }

    pub fn fine(images_per_role: usize, seed: u64) -> Self {
        SynthConfig {
            regime: Regime::Fine,
            feather_radius: 5,
            color_match: 1.0,
            ..SynthConfig::coarse(images_per_role, seed)
        }
    }

    pub fn for_regime(regime: Regime, images_per_role: usize, seed: u64) -> Self {
        match regime {
            Regime::Coarse => Self::coarse(images_per_role, seed),
            Regime::Fine => Self::fine(images_per_role, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.images_per_role == 0 {
            return bad("images_per_role must be positive".into());
        }
        if self.patch_size == 0 || self.stride == 0 {
            return bad("patch_size and stride must be positive".into());
        }
        if self.image_size < 2 * self.patch_size {
            return bad(format!(
                "image_size {} must be at least twice the patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(AREA_LIMITS.0 <= self.min_area && self.min_area <= self.max_area && self.max_area <= AREA_LIMITS.1) {
            return bad(format!(
                "donor area range [{}, {}] must lie within [{}, {}]",
                self.min_area, self.max_area, AREA_LIMITS.0, AREA_LIMITS.1
            ));
        }
        match self.regime {
            Regime::Coarse if self.feather_radius != 0 => return bad("feather_radius must be 0 in the coarse regime".into()),
            Regime::Fine if self.feather_radius == 0 => return bad("feather_radius must be at least 1 in the fine regime".into()),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.color_match) {
            return bad(format!("color_match must be in [0,1], got {}", self.color_match));
        }
        if !(0.0..=1.0).contains(&self.min_window_overlap) {
            return bad(format!("min_window_overlap must be in [0,1], got {}", self.min_window_overlap));
        }
        if self.noise_cell == 0 {
            return bad("noise_cell must be positive".into());
        }
        Ok(())
    }
}

/// One generated triple plus the donor's bounding rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub authentic: RgbImage,
    pub spliced: RgbImage,
    /// 0 or 255.
    pub mask: GrayImage,
    pub donor_box: BBox,
}

impl SynthPair {
    pub fn mask_area(&self) -> usize {
        self.mask.pixels().filter(|p| p.0[0] > 0).count()
    }
}

/// Per-channel linear gradient plus bilinear value noise plus grain.
fn background(cfg: &SynthConfig, rng: &mut Rng) -> RgbImage {
    let n = cfg.image_size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(70.0..190.0));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let slope: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0) * cfg.gradient_strength);
    let cells = n / cfg.noise_cell + 2;
    let lattice: Vec<[f64; 3]> = (0..cells * cells)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * cfg.noise_amplitude))
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut img = RgbImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let u = ((x as f64 + 0.5) / n as f64 - 0.5) * dx + ((y as f64 + 0.5) / n as f64 - 0.5) * dy;
            let gx = x as f64 / cfg.noise_cell as f64;
            let gy = y as f64 / cfg.noise_cell as f64;
            let (ix, iy) = (gx as u32, gy as u32);
            let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            let at = |cx: u32, cy: u32| lattice[(cy * cells + cx) as usize];
            let px: [u8; 3] = std::array::from_fn(|c| {
                let top = at(ix, iy)[c] * (1.0 - fx) + at(ix + 1, iy)[c] * fx;
                let bot = at(ix, iy + 1)[c] * (1.0 - fx) + at(ix + 1, iy + 1)[c] * fx;
                let noise = top * (1.0 - fy) + bot * fy;
                let grain = rng.gen_range(-1.0..1.0) * cfg.grain;
                to_u8(base[c] + slope[c] * u + noise + grain)
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Oriented stripes in a colour far from `avoid`, as floating point.
fn donor_texture(cfg: &SynthConfig, avoid: [f64; 3], rng: &mut Rng) -> Vec<[f64; 3]> {
    let n = cfg.image_size as usize;
    let color: [f64; 3] = std::array::from_fn(|c| {
        let far = if avoid[c] < 128.0 { rng.gen_range(185.0..235.0) } else { rng.gen_range(20.0..70.0) };
        far
    });
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let period: f64 = rng.gen_range(5.0..11.0);
    let (sx, sy) = (angle.cos(), angle.sin());
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let t = (x as f64 * sx + y as f64 * sy) * std::f64::consts::TAU / period + phase;
            let s = t.sin() * cfg.stripe_amplitude;
            out.push(std::array::from_fn(|c| color[c] + s + rng.gen_range(-1.0..1.0) * cfg.grain));
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Rasterized donor region and its bounding box.
fn donor_region(cfg: &SynthConfig, rng: &mut Rng) -> (Vec<bool>, BBox) {
    let n = cfg.image_size as f64;
    let area = rng.gen_range(cfg.min_area..=cfg.max_area) * n * n;
    let aspect: f64 = rng.gen_range(0.7..1.45);
    let rect = match cfg.shape {
        DonorShape::Rectangle => true,
        DonorShape::Ellipse => false,
        DonorShape::Mixed => rng.gen_bool(0.5),
    };
    let (w, h) = if rect {
        let w = (area * aspect).sqrt();
        (w, area / w)
    } else {
        let rx = (area * aspect / std::f64::consts::PI).sqrt();
        (2.0 * rx, 2.0 * area / (std::f64::consts::PI * rx))
    };
    let w = w.min(n - 2.0);
    let h = h.min(n - 2.0);
    let left = rng.gen_range(0.0..=(n - w).max(0.0)).floor();
    let top = rng.gen_range(0.0..=(n - h).max(0.0)).floor();
    let (cx, cy) = (left + w / 2.0, top + h / 2.0);
    let size = cfg.image_size as usize;
    let mut inside = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            inside[y * size + x] = if rect {
                px >= left && px < left + w && py >= top && py < top + h
            } else {
                let ex = (px - cx) / (w / 2.0);
                let ey = (py - cy) / (h / 2.0);
                ex * ex + ey * ey <= 1.0
            };
        }
    }
    let bbox = mask_bbox(&inside, size).unwrap_or(BBox { top: 0, left: 0, bottom: 1, right: 1 });
    (inside, bbox)
}

fn mask_bbox(inside: &[bool], size: usize) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for (i, _) in inside.iter().enumerate().filter(|(_, &v)| v) {
        let (y, x) = ((i / size) as u32, (i % size) as u32);
        b = Some(match b {
            None => BBox { top: y, left: x, bottom: y + 1, right: x + 1 },
            Some(b) => BBox {
                top: b.top.min(y),
                left: b.left.min(x),
                bottom: b.bottom.max(y + 1),
                right: b.right.max(x + 1),
            },
        });
    }
    b
}

/// Chamfer (3-4) distance of every inside pixel to the nearest outside
/// pixel, in pixel units; pixels beyond the border count as outside.
fn inside_distance(inside: &[bool], size: usize) -> Vec<f64> {
    const BIG: u32 = u32::MAX / 4;
    let mut d: Vec<u32> = inside.iter().map(|&v| if v { BIG } else { 0 }).collect();
    let get = |d: &[u32], x: isize, y: isize| -> u32 {
        if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
            0
        } else {
            d[y as usize * size + x as usize]
        }
    };
    for y in 0..size as isize {
        for x in 0..size as isize {
            let i = y as usize * size + x as usize;
            if d[i] == 0 {
                continue;
            }
            let m = [
                get(&d, x - 1, y) + 3,
                get(&d, x, y - 1) + 3,
                get(&d, x - 1, y - 1) + 4,
                get(&d, x + 1, y - 1) + 4,
            ];
            d[i] = d[i].min(*m.iter().min().unwrap());
        }
    }
    for y in (0..size as isize).rev() {
        for x in (0..size as isize).rev() {
            let i = y as usize * size + x as usize;
            if d[i] == 0 {
                continue;
            }
            let m = [
                get(&d, x + 1, y) + 3,
                get(&d, x, y + 1) + 3,
                get(&d, x + 1, y + 1) + 4,
                get(&d, x - 1, y + 1) + 4,
            ];
            d[i] = d[i].min(*m.iter().min().unwrap());
        }
    }
    d.into_iter().map(|v| f64::from(v) / 3.0).collect()
}

fn best_window_overlap(inside: &[bool], size: usize, patch: usize, stride: usize) -> f64 {
    let starts = patch::window_starts(size, patch, stride);
    let mut best = 0.0f64;
    for &r in &starts {
        for &c in &starts {
            let count: usize = (r..r + patch)
                .map(|y| inside[y * size + c..y * size + c + patch].iter().filter(|&&v| v).count())
                .sum();
            best = best.max(count as f64 / (patch * patch) as f64);
        }
    }
    best
}

/// Deterministic triple for `(config.seed, index)`.
pub fn generate_pair(cfg: &SynthConfig, index: u64) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "synth-pair", index);
    let authentic = background(cfg, &mut rng);
    let size = cfg.image_size as usize;
    let total = (size * size) as f64;

    let mut region = None;
    for _ in 0..MAX_ATTEMPTS {
        let (inside, bbox) = donor_region(cfg, &mut rng);
        let frac = inside.iter().filter(|&&v| v).count() as f64 / total;
        let fits_area = frac >= cfg.min_area.max(AREA_LIMITS.0) && frac <= cfg.max_area.min(AREA_LIMITS.1);
        if fits_area
            && best_window_overlap(&inside, size, cfg.patch_size as usize, cfg.stride as usize) >= cfg.min_window_overlap
        {
            region = Some((inside, bbox));
            break;
        }
    }
    let (inside, donor_box) = region.ok_or_else(|| {
        Error::Generator(format!(
            "no usable donor region after {MAX_ATTEMPTS} attempts (image {index}, seed {})",
            cfg.seed
        ))
    })?;

    let alpha: Vec<f64> = if cfg.feather_radius == 0 {
        inside.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    } else {
        inside_distance(&inside, size)
            .into_iter()
            .map(|d| (d / cfg.feather_radius as f64).min(1.0))
            .collect()
    };

    let bg: Vec<[f64; 3]> = authentic.pixels().map(|p| p.0.map(f64::from)).collect();
    let bg_mean = weighted_stats(&bg, &alpha).0;
    let mut donor = donor_texture(cfg, bg_mean, &mut rng);
    if cfg.color_match > 0.0 {
        let (bm, bs) = weighted_stats(&bg, &alpha);
        let (dm, ds) = weighted_stats(&donor, &alpha);
        let s = cfg.color_match;
        for px in donor.iter_mut() {
            for c in 0..3 {
                let target_mean = s * bm[c] + (1.0 - s) * dm[c];
                let target_std = s * bs[c] + (1.0 - s) * ds[c];
                let z = if ds[c] > 0.0 { (px[c] - dm[c]) / ds[c] } else { 0.0 };
                px[c] = target_mean + z * target_std;
            }
        }
    }

    let mut spliced = authentic.clone();
    let mut mask = GrayImage::new(cfg.image_size, cfg.image_size);
    for (i, a) in alpha.iter().enumerate() {
        if *a <= 0.0 {
            continue;
        }
        let (x, y) = ((i % size) as u32, (i / size) as u32);
        let orig = authentic.get_pixel(x, y).0;
        let mut px: [u8; 3] = std::array::from_fn(|c| to_u8(a * donor[i][c] + (1.0 - a) * bg[i][c]));
        if cfg.regime == Regime::Coarse && px == orig {
            px[0] = if orig[0] < 128 { orig[0] + 64 } else { orig[0] - 64 };
        }
        spliced.put_pixel(x, y, Rgb(px));
        mask.put_pixel(x, y, Luma([255]));
    }
    Ok(SynthPair {
        authentic,
        spliced,
        mask,
        donor_box,
    })
}

/// Authentic-role image `index`: a background from its own stream.
pub fn generate_authentic(cfg: &SynthConfig, index: u64) -> Result<RgbImage> {
    cfg.validate()?;
    Ok(background(cfg, &mut rng::stream(cfg.seed, "synth-authentic", index)))
}

/// Alpha-weighted per-channel mean and standard deviation.
fn weighted_stats(px: &[[f64; 3]], w: &[f64]) -> ([f64; 3], [f64; 3]) {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return ([0.0; 3], [0.0; 3]);
    }
    let mut mean = [0.0; 3];
    for (p, &a) in px.iter().zip(w) {
        for c in 0..3 {
            mean[c] += a * p[c];
        }
    }
    mean = mean.map(|m| m / total);
    let mut var = [0.0; 3];
    for (p, &a) in px.iter().zip(w) {
        for c in 0..3 {
            var[c] += a * (p[c] - mean[c]).powi(2);
        }
    }
    (mean, var.map(|v| (v / total).sqrt()))
}

/// Per-channel mean of `image` over mask-positive pixels.
pub fn masked_channel_means(image: &RgbImage, mask: &GrayImage) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (p, m) in image.pixels().zip(mask.pixels()) {
        if m.0[0] > patch::MASK_POSITIVE_ABOVE {
            n += 1;
            for c in 0..3 {
                sum[c] += f64::from(p.0[c]);
            }
        }
    }
    sum.map(|s| if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn authentic_file(i: usize) -> PathBuf {
    PathBuf::from(format!("authentic/au_{i:04}.png"))
}

pub fn spliced_file(i: usize) -> PathBuf {
    PathBuf::from(format!("spliced/sp_{i:04}.png"))
}

pub fn mask_file(i: usize) -> PathBuf {
    PathBuf::from(format!("masks/sp_{i:04}_mask.png"))
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `images_per_role` authentic and spliced images, masks and a
/// manifest under `dir`. Returns the manifest, which is also saved as
/// `dir/manifest.txt`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["authentic", "spliced", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    (0..cfg.images_per_role).into_par_iter().try_for_each(|i| -> Result<()> {
        let au = generate_authentic(cfg, i as u64)?;
        save_png(&au, &dir.join(authentic_file(i)))?;
        let pair = generate_pair(cfg, i as u64)?;
        save_png(&pair.spliced, &dir.join(spliced_file(i)))?;
        save_png(&pair.mask, &dir.join(mask_file(i)))
    })?;

    let mut manifest = DatasetManifest::new(format!("synth-{}-seed{}", cfg.regime.as_str(), cfg.seed), dir);
    manifest.patch_size = cfg.patch_size as usize;
    manifest.stride = cfg.stride as usize;
    manifest.fake_overlap = cfg.regime.overlap();
    for i in 0..cfg.images_per_role {
        manifest.entries.push(ManifestEntry {
            role: Role::Authentic,
            image: authentic_file(i),
            mask: None,
        });
    }
    for i in 0..cfg.images_per_role {
        manifest.entries.push(ManifestEntry {
            role: Role::Spliced,
            image: spliced_file(i),
            mask: Some(mask_file(i)),
        });
    }
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(regime: Regime) -> SynthConfig {
        SynthConfig {
            image_size: 160,
            ..SynthConfig::for_regime(regime, 3, 11)
        }
    }

    #[test]
    fn coarse_diff_support_equals_mask() {
        for i in 0..4 {
            let p = generate_pair(&small(Regime::Coarse), i).unwrap();
            for ((a, s), m) in p.authentic.pixels().zip(p.spliced.pixels()).zip(p.mask.pixels()) {
                assert_eq!(a != s, m.0[0] == 255);
            }
        }
    }

    #[test]
    fn masks_are_binary_and_bounded() {
        for regime in [Regime::Coarse, Regime::Fine] {
            let cfg = small(regime);
            for i in 0..4 {
                let p = generate_pair(&cfg, i).unwrap();
                assert!(p.mask.pixels().all(|v| v.0[0] == 0 || v.0[0] == 255));
                let frac = p.mask_area() as f64 / (160.0 * 160.0);
                assert!((cfg.min_area..=cfg.max_area).contains(&frac), "{frac}");
                assert!((0.01..=0.40).contains(&frac));
            }
        }
    }

    #[test]
    fn deterministic_in_seed_and_index() {
        let cfg = small(Regime::Fine);
        assert_eq!(generate_pair(&cfg, 2).unwrap(), generate_pair(&cfg, 2).unwrap());
        assert_ne!(generate_pair(&cfg, 2).unwrap().spliced, generate_pair(&cfg, 3).unwrap().spliced);
    }

    #[test]
    fn fine_donor_is_color_matched() {
        let cfg = small(Regime::Fine);
        for i in 0..4 {
            let p = generate_pair(&cfg, i).unwrap();
            let a = masked_channel_means(&p.authentic, &p.mask);
            let s = masked_channel_means(&p.spliced, &p.mask);
            for c in 0..3 {
                assert!((a[c] - s[c]).abs() <= cfg.color_epsilon, "channel {c}: {} vs {}", a[c], s[c]);
            }
        }
        let coarse = generate_pair(&small(Regime::Coarse), 0).unwrap();
        let a = masked_channel_means(&coarse.authentic, &coarse.mask);
        let s = masked_channel_means(&coarse.spliced, &coarse.mask);
        assert!((0..3).any(|c| (a[c] - s[c]).abs() > 20.0));
    }

    #[test]
    fn rectangle_donor_box_is_the_mask_extent() {
        let cfg = SynthConfig {
            shape: DonorShape::Rectangle,
            ..small(Regime::Fine)
        };
        let p = generate_pair(&cfg, 0).unwrap();
        assert_eq!(p.mask_area() as u64, p.donor_box.area());
    }

    #[test]
    fn config_validation() {
        let mut c = small(Regime::Coarse);
        c.feather_radius = 2;
        assert!(c.validate().is_err());
        let mut c = small(Regime::Fine);
        c.feather_radius = 0;
        assert!(c.validate().is_err());
        let mut c = small(Regime::Coarse);
        c.image_size = 100;
        assert!(c.validate().is_err());
        let mut c = small(Regime::Coarse);
        c.max_area = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn impossible_region_errors() {
        let cfg = SynthConfig {
            min_area: 0.01,
            max_area: 0.01,
            min_window_overlap: 1.0,
            ..small(Regime::Coarse)
        };
        assert!(matches!(generate_pair(&cfg, 0), Err(Error::Generator(_))));
    }

    #[test]
    fn chamfer_distance_of_a_bar() {
        let size = 7;
        let inside: Vec<bool> = (0..size * size).map(|i| (1..6).contains(&(i / size)) && (1..6).contains(&(i % size))).collect();
        let d = inside_distance(&inside, size);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[size + 1], 1.0);
        assert_eq!(d[3 * size + 3], 3.0);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(Regime::Coarse);
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert!(m.entries.iter().filter(|e| e.role == Role::Spliced).all(|e| e.mask.is_some()));
        let loaded = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.entries, m.entries);
        loaded.validate().unwrap();
        let id = loaded.ids_with_role(Role::Spliced)[0];
        let fakes = patch::extract_fake_patches(
            &loaded.load_image(id).unwrap(),
            &loaded.load_mask(id).unwrap().unwrap(),
            id,
            64,
            0.40,
            32,
        )
        .unwrap();
        assert!(!fakes.is_empty());
    }
}
