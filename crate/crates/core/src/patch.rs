//! Dataset manifests, patch extraction and balanced train/validation corpora.
//!
//! Fake patches are every stride-aligned window of a spliced image whose
//! mask-positive fraction reaches the overlap threshold. Authentic patches
//! are drawn at uniformly random positions from authentic images, as many in
//! total as there are fake patches. Whole images are held out for testing
//! before any patch is cut.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "#missmarple-manifest v1";
pub const CORPUS_MAGIC: &[u8; 4] = b"MMPC";
pub const CORPUS_VERSION: u16 = 1;
pub const DEFAULT_PATCH_SIZE: usize = 64;
pub const DEFAULT_STRIDE: usize = 32;

/// Coarse-splice overlap threshold (village model data).
pub const OVERLAP_COARSE: f64 = 0.40;
/// Fine-splice overlap threshold (actual-case model data).
pub const OVERLAP_FINE: f64 = 0.125;
/// Threshold used for the realistic-splice dataset.
pub const OVERLAP_REALISTIC: f64 = 0.30;

/// Mask pixels above this value are spliced.
pub const MASK_POSITIVE_ABOVE: u8 = 127;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Authentic,
    Spliced,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Authentic => "authentic",
            Role::Spliced => "spliced",
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Role::Authentic => 0,
            Role::Spliced => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub role: Role,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    pub patch_size: usize,
    pub fake_overlap: f64,
    pub stride: usize,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            name: name.into(),
            entries: Vec::new(),
            patch_size: DEFAULT_PATCH_SIZE,
            fake_overlap: OVERLAP_COARSE,
            stride: DEFAULT_STRIDE,
            base_dir: base_dir.into(),
        }
    }

    /// Parses the text form. Besides the header and the tab-separated records,
    /// optional `#key=value` lines set `name`, `patch_size`, `overlap` and
    /// `stride`; other `#` lines and blank lines are ignored.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Manifest {
                    line: 1,
                    reason: format!("expected header `{MANIFEST_HEADER}`"),
                })
            }
        }
        let mut m = DatasetManifest::new("dataset", base_dir);
        for (i, raw) in lines {
            let line_no = i + 1;
            let line = raw.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Manifest { line: line_no, reason };
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    let v = v.trim();
                    match k.trim() {
                        "name" => m.name = v.to_string(),
                        "patch_size" => m.patch_size = v.parse().map_err(|_| bad(format!("bad patch_size `{v}`")))?,
                        "overlap" => m.fake_overlap = v.parse().map_err(|_| bad(format!("bad overlap `{v}`")))?,
                        "stride" => m.stride = v.parse().map_err(|_| bad(format!("bad stride `{v}`")))?,
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(bad(format!("expected 2 or 3 tab-separated fields, got {}", fields.len())));
            }
            let role = match fields[0] {
                "authentic" => Role::Authentic,
                "spliced" => Role::Spliced,
                other => return Err(bad(format!("unknown role `{other}`"))),
            };
            if fields[1].is_empty() {
                return Err(bad("empty image path".into()));
            }
            let mask = fields.get(2).filter(|s| !s.is_empty()).map(PathBuf::from);
            if role == Role::Spliced && mask.is_none() {
                return Err(bad("spliced entry without a mask".into()));
            }
            m.entries.push(ManifestEntry {
                role,
                image: PathBuf::from(fields[1]),
                mask,
            });
        }
        m.check_parameters()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        s.push_str(&format!("#name={}\n", self.name));
        s.push_str(&format!("#patch_size={}\n", self.patch_size));
        s.push_str(&format!("#overlap={}\n", self.fake_overlap));
        s.push_str(&format!("#stride={}\n", self.stride));
        for e in &self.entries {
            s.push_str(e.role.as_str());
            s.push('\t');
            s.push_str(&e.image.to_string_lossy());
            if let Some(mask) = &e.mask {
                s.push('\t');
                s.push_str(&mask.to_string_lossy());
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn check_parameters(&self) -> Result<()> {
        if !(self.fake_overlap > 0.0 && self.fake_overlap <= 1.0) {
            return Err(Error::Config(format!("overlap must be in (0,1], got {}", self.fake_overlap)));
        }
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<u32> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role == role)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn load_image(&self, id: u32) -> Result<RgbImage> {
        let e = self.entry(id)?;
        load_rgb(&self.resolve(&e.image))
    }

    pub fn load_mask(&self, id: u32) -> Result<Option<GrayImage>> {
        let e = self.entry(id)?;
        e.mask.as_ref().map(|m| load_mask(&self.resolve(m))).transpose()
    }

    fn entry(&self, id: u32) -> Result<&ManifestEntry> {
        self.entries
            .get(id as usize)
            .ok_or_else(|| Error::Config(format!("image id {id} not in manifest `{}`", self.name)))
    }

    /// Checks both roles are present and every mask matches its image size.
    pub fn validate(&self) -> Result<()> {
        self.check_parameters()?;
        for role in [Role::Authentic, Role::Spliced] {
            if self.ids_with_role(role).is_empty() {
                return Err(Error::EmptyRole(role.as_str()));
            }
        }
        for e in &self.entries {
            let img = self.resolve(&e.image);
            let (w, h) = image::image_dimensions(&img).map_err(|source| Error::Image { path: img.clone(), source })?;
            if let Some(mask) = &e.mask {
                let mp = self.resolve(mask);
                let (mw, mh) = image::image_dimensions(&mp).map_err(|source| Error::Image { path: mp.clone(), source })?;
                if (mw, mh) != (w, h) {
                    return Err(Error::MaskMismatch {
                        image_width: w,
                        image_height: h,
                        mask_width: mw,
                        mask_height: mh,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn load_mask(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// A square RGB crop with its label and origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSample {
    /// `size * size * 3` bytes, row-major RGB.
    pub pixels: Vec<u8>,
    pub label: u8,
    pub image_id: u32,
    pub row: u32,
    pub col: u32,
}

impl PatchSample {
    /// Image, position and label; unique within a corpus.
    pub fn key(&self) -> (u32, u32, u32, u8) {
        (self.image_id, self.row, self.col, self.label)
    }

    /// Pixels scaled into `[0, 1]` as an `[size, size, 3]` tensor.
    pub fn to_tensor(&self, size: usize) -> Tensor<f32> {
        Tensor::new(vec![size, size, 3], pixels_to_unit(&self.pixels)).expect("patch length matches size")
    }
}

pub fn pixels_to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
}

/// Copies the `size x size` window at `(row, col)`.
pub fn crop(image: &RgbImage, row: usize, col: usize, size: usize) -> Vec<u8> {
    let w = image.width() as usize;
    let raw = image.as_raw();
    let mut out = Vec::with_capacity(size * size * 3);
    for y in row..row + size {
        let start = (y * w + col) * 3;
        out.extend_from_slice(&raw[start..start + size * 3]);
    }
    out
}

/// Stride-aligned window origins along one axis.
pub fn window_starts(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    if extent < size || stride == 0 {
        return Vec::new();
    }
    (0..=extent - size).step_by(stride).collect()
}

/// Mask-positive pixels inside the window divided by the window area.
pub fn mask_fraction(mask: &GrayImage, row: usize, col: usize, size: usize) -> f64 {
    let w = mask.width() as usize;
    let raw = mask.as_raw();
    let mut positive = 0usize;
    for y in row..row + size {
        positive += raw[y * w + col..y * w + col + size]
            .iter()
            .filter(|&&v| v > MASK_POSITIVE_ABOVE)
            .count();
    }
    positive as f64 / (size * size) as f64
}

fn check_fits(width: u32, height: u32, size: usize) -> Result<()> {
    if size == 0 || (width as usize) < size || (height as usize) < size {
        return Err(Error::ImageTooSmall { width, height, size });
    }
    Ok(())
}

/// Every stride-aligned window whose mask-positive fraction is at least
/// `overlap`, labelled spliced, in row-major window order.
pub fn extract_fake_patches(
    image: &RgbImage,
    mask: &GrayImage,
    image_id: u32,
    size: usize,
    overlap: f64,
    stride: usize,
) -> Result<Vec<PatchSample>> {
    if image.dimensions() != mask.dimensions() {
        return Err(Error::MaskMismatch {
            image_width: image.width(),
            image_height: image.height(),
            mask_width: mask.width(),
            mask_height: mask.height(),
        });
    }
    check_fits(image.width(), image.height(), size)?;
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut out = Vec::new();
    for row in window_starts(image.height() as usize, size, stride) {
        for col in window_starts(image.width() as usize, size, stride) {
            if mask_fraction(mask, row, col, size) >= overlap {
                out.push(PatchSample {
                    pixels: crop(image, row, col, size),
                    label: 1,
                    image_id,
                    row: row as u32,
                    col: col as u32,
                });
            }
        }
    }
    Ok(out)
}

/// `count` distinct windows at uniformly random valid positions, labelled
/// authentic.
pub fn extract_authentic_patches(
    image: &RgbImage,
    image_id: u32,
    count: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<Vec<PatchSample>> {
    check_fits(image.width(), image.height(), size)?;
    let max_row = image.height() as usize - size;
    let max_col = image.width() as usize - size;
    let positions = (max_row + 1) * (max_col + 1);
    if count > positions {
        return Err(Error::Config(format!(
            "cannot draw {count} distinct {size}x{size} windows from image {image_id}, which has {positions}"
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let row = rng.gen_range(0..=max_row);
        let col = rng.gen_range(0..=max_col);
        if !seen.insert((row, col)) {
            continue;
        }
        out.push(PatchSample {
            pixels: crop(image, row, col, size),
            label: 0,
            image_id,
            row: row as u32,
            col: col as u32,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    /// Fraction of images per role held out for testing.
    pub test_fraction: f64,
    /// Fraction of the remaining patches used for training.
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            train_fraction: 0.7,
        }
    }
}

/// `(train, val)` sizes for `total` items: `train = round(total * fraction)`.
pub fn split_counts(total: usize, train_fraction: f64) -> (usize, usize) {
    let train = ((total as f64) * train_fraction).round() as usize;
    let train = train.min(total);
    (train, total - train)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub authentic: usize,
    pub spliced: usize,
}

impl ClassCounts {
    pub fn of(patches: &[PatchSample]) -> Self {
        let spliced = patches.iter().filter(|p| p.label == 1).count();
        ClassCounts {
            authentic: patches.len() - spliced,
            spliced,
        }
    }

    pub fn total(&self) -> usize {
        self.authentic + self.spliced
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchCorpus {
    /// Manifest name the corpus was cut from.
    pub dataset: String,
    pub patch_size: usize,
    pub train: Vec<PatchSample>,
    pub val: Vec<PatchSample>,
    /// Held-out image ids (manifest entry indices), ascending.
    pub test_images: Vec<u32>,
}

impl PatchCorpus {
    pub fn train_counts(&self) -> ClassCounts {
        ClassCounts::of(&self.train)
    }

    pub fn val_counts(&self) -> ClassCounts {
        ClassCounts::of(&self.val)
    }

    /// Distinct source images contributing to a patch list.
    pub fn contributing_images(patches: &[PatchSample]) -> usize {
        let mut ids: Vec<u32> = patches.iter().map(|p| p.image_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Ids of all non-test images in the manifest.
    pub fn development_images(&self, manifest: &DatasetManifest) -> Vec<u32> {
        (0..manifest.entries.len() as u32)
            .filter(|id| self.test_images.binary_search(id).is_err())
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_patch_file(dir.join("train.mmpc"), self.patch_size, &self.train)?;
        write_patch_file(dir.join("val.mmpc"), self.patch_size, &self.val)?;
        let mut split = format!("#missmarple-split v1\n#dataset={}\n", self.dataset);
        for id in &self.test_images {
            split.push_str(&format!("test\t{id}\n"));
        }
        let p = dir.join("split.txt");
        std::fs::write(&p, split).map_err(|e| Error::io(p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (size, train) = read_patch_file(dir.join("train.mmpc"))?;
        let (vsize, val) = read_patch_file(dir.join("val.mmpc"))?;
        if size != vsize {
            return Err(Error::CorpusFormat(format!("train patch size {size} != val patch size {vsize}")));
        }
        let p = dir.join("split.txt");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut test_images = Vec::new();
        let mut dataset = String::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(name) = line.strip_prefix("#dataset=") {
                dataset = name.trim().to_string();
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let id = line
                .strip_prefix("test\t")
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::CorpusFormat(format!("split.txt line {}: `{line}`", i + 1)))?;
            test_images.push(id);
        }
        test_images.sort_unstable();
        Ok(PatchCorpus {
            dataset,
            patch_size: size,
            train,
            val,
            test_images,
        })
    }
}

/// Builds the corpus: stratified image-level test hold-out, fake and
/// authentic extraction on the rest, then a label-stratified patch split.
pub fn build_corpus(manifest: &DatasetManifest, split: &SplitConfig, seed: u64) -> Result<PatchCorpus> {
    manifest.check_parameters()?;
    if !(0.0..1.0).contains(&split.test_fraction) || !(0.0..=1.0).contains(&split.train_fraction) {
        return Err(Error::Config("test fraction must be in [0,1) and train fraction in [0,1]".into()));
    }
    let mut test_images = Vec::new();
    let mut dev: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
    for (slot, role) in [Role::Authentic, Role::Spliced].into_iter().enumerate() {
        let mut ids = manifest.ids_with_role(role);
        if ids.is_empty() {
            return Err(Error::EmptyRole(role.as_str()));
        }
        ids.shuffle(&mut rng::stream(seed, "test-split", slot as u64));
        let n_test = ((ids.len() as f64) * split.test_fraction).round() as usize;
        let n_test = n_test.min(ids.len() - 1);
        test_images.extend_from_slice(&ids[..n_test]);
        let mut rest = ids[n_test..].to_vec();
        rest.sort_unstable();
        dev[slot] = rest;
    }
    test_images.sort_unstable();
    let [authentic_ids, spliced_ids] = dev;
    let size = manifest.patch_size;

    let fakes: Vec<Vec<PatchSample>> = spliced_ids
        .par_iter()
        .map(|&id| {
            let image = manifest.load_image(id)?;
            let mask = manifest
                .load_mask(id)?
                .ok_or_else(|| Error::Config(format!("spliced image {id} has no mask")))?;
            extract_fake_patches(&image, &mask, id, size, manifest.fake_overlap, manifest.stride)
        })
        .collect::<Result<_>>()?;
    let fakes: Vec<PatchSample> = fakes.into_iter().flatten().collect();
    if fakes.is_empty() {
        return Err(Error::Config(format!(
            "no window reached the {} mask overlap; lower the overlap or the stride",
            manifest.fake_overlap
        )));
    }

    // Spread the fake total over authentic images; no image gets more than
    // ceil(total / images).
    let per = fakes.len() / authentic_ids.len();
    let extra = fakes.len() % authentic_ids.len();
    let reals: Vec<Vec<PatchSample>> = authentic_ids
        .par_iter()
        .enumerate()
        .map(|(i, &id)| {
            let count = per + usize::from(i < extra);
            let image = manifest.load_image(id)?;
            extract_authentic_patches(&image, id, count, size, &mut rng::stream(seed, "authentic", u64::from(id)))
        })
        .collect::<Result<_>>()?;
    let reals: Vec<PatchSample> = reals.into_iter().flatten().collect();

    let (train, val) = stratified_split([reals, fakes], split.train_fraction, seed);
    Ok(PatchCorpus {
        dataset: manifest.name.clone(),
        patch_size: size,
        train,
        val,
        test_images,
    })
}

/// Splits each label group so that the overall train size is
/// `round(total * fraction)`, distributing it over labels by largest remainder.
fn stratified_split(groups: [Vec<PatchSample>; 2], fraction: f64, seed: u64) -> (Vec<PatchSample>, Vec<PatchSample>) {
    let total: usize = groups.iter().map(Vec::len).sum();
    let (train_total, _) = split_counts(total, fraction);
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * fraction).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
    });
    let mut remaining = train_total.saturating_sub(alloc.iter().sum());
    for &g in order.iter().cycle().take(groups.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[g] < groups[g].len() {
            alloc[g] += 1;
            remaining -= 1;
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, (mut g, n)) in groups.into_iter().zip(alloc).enumerate() {
        g.shuffle(&mut rng::stream(seed, "train-val", label as u64));
        let rest = g.split_off(n);
        train.extend(g);
        val.extend(rest);
    }
    train.sort_by_key(PatchSample::key);
    val.sort_by_key(PatchSample::key);
    (train, val)
}

/// Writes an `MMPC` patch file: magic, u16 version, u16 patch size, u32
/// count, then per patch u8 label, u32 image id, u32 row, u32 col and the raw
/// RGB bytes. Little-endian throughout.
pub fn write_patch_file(path: impl AsRef<Path>, size: usize, patches: &[PatchSample]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_patches(size, patches)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_patches(size: usize, patches: &[PatchSample]) -> Result<Vec<u8>> {
    let size16 = u16::try_from(size).map_err(|_| Error::CorpusFormat(format!("patch size {size} exceeds u16")))?;
    let plen = size * size * 3;
    let mut out = Vec::with_capacity(12 + patches.len() * (13 + plen));
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&size16.to_le_bytes());
    out.extend_from_slice(&(patches.len() as u32).to_le_bytes());
    for p in patches {
        if p.pixels.len() != plen {
            return Err(Error::CorpusFormat(format!(
                "patch from image {} has {} bytes, expected {plen}",
                p.image_id,
                p.pixels.len()
            )));
        }
        out.push(p.label);
        out.extend_from_slice(&p.image_id.to_le_bytes());
        out.extend_from_slice(&p.row.to_le_bytes());
        out.extend_from_slice(&p.col.to_le_bytes());
        out.extend_from_slice(&p.pixels);
    }
    Ok(out)
}

pub fn read_patch_file(path: impl AsRef<Path>) -> Result<(usize, Vec<PatchSample>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_patches(&bytes)
}

pub fn decode_patches(bytes: &[u8]) -> Result<(usize, Vec<PatchSample>)> {
    let err = |m: &str| Error::CorpusFormat(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != CORPUS_MAGIC {
        return Err(err("missing MMPC header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CORPUS_VERSION {
        return Err(Error::CorpusFormat(format!("unsupported version {version}")));
    }
    let size = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let plen = size * size * 3;
    let rec = 13 + plen;
    if bytes.len() != 12 + count * rec {
        return Err(Error::CorpusFormat(format!(
            "expected {} bytes for {count} patches of size {size}, got {}",
            12 + count * rec,
            bytes.len()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let o = 12 + i * rec;
        let label = bytes[o];
        if label > 1 {
            return Err(Error::CorpusFormat(format!("patch {i} has label {label}")));
        }
        out.push(PatchSample {
            label,
            image_id: u32_at(o + 1),
            row: u32_at(o + 5),
            col: u32_at(o + 9),
            pixels: bytes[o + 13..o + rec].to_vec(),
        });
    }
    Ok((size, out))
}
