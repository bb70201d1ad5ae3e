//! Bounding-box localization over fake-scored windows.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const DEFAULT_CUTOFF: f64 = 0.5;
pub const FRAME_THICKNESS: u32 = 3;
pub const FRAME_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// Pixel box, rows `top..bottom` and columns `left..right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub top: u32,
    pub left: u32,
    pub bottom: u32,
    pub right: u32,
}

impl BBox {
    /// `None` unless `top < bottom` and `left < right`.
    pub fn new(top: u32, left: u32, bottom: u32, right: u32) -> Option<Self> {
        (top < bottom && left < right).then_some(BBox { top, left, bottom, right })
    }

    pub fn height(&self) -> u32 {
        self.bottom - self.top
    }

    pub fn width(&self) -> u32 {
        self.right - self.left
    }

    pub fn area(&self) -> u64 {
        u64::from(self.height()) * u64::from(self.width())
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.top <= other.top && self.left <= other.left && self.bottom >= other.bottom && self.right >= other.right
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.top.max(other.top),
            self.left.max(other.left),
            self.bottom.min(other.bottom),
            self.right.min(other.right),
        )
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.bottom <= height && self.right <= width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowScore {
    pub row: u32,
    pub col: u32,
    /// Sigmoid output of the patch classifier.
    pub score: f64,
}

/// Scores of every evaluated window of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub stride: u32,
    pub windows: Vec<WindowScore>,
}

impl PredictionMap {
    /// Windows whose score exceeds `cutoff`.
    pub fn above(&self, cutoff: f64) -> impl Iterator<Item = &WindowScore> {
        self.windows.iter().filter(move |w| w.score > cutoff)
    }

    pub fn window_box(&self, w: &WindowScore) -> BBox {
        BBox {
            top: w.row,
            left: w.col,
            bottom: w.row + self.patch_size,
            right: w.col + self.patch_size,
        }
    }
}

/// Union box of the windows scoring above `cutoff`.
pub fn bounding_box(map: &PredictionMap, cutoff: f64) -> Option<BBox> {
    map.above(cutoff).map(|w| map.window_box(w)).reduce(|a, b| BBox {
        top: a.top.min(b.top),
        left: a.left.min(b.left),
        bottom: a.bottom.max(b.bottom),
        right: a.right.max(b.right),
    })
}

/// Copy of `image` with a red frame drawn just inside `bbox`.
pub fn render_overlay(image: &RgbImage, bbox: Option<&BBox>) -> Result<RgbImage> {
    let mut out = image.clone();
    let Some(b) = bbox else {
        return Ok(out);
    };
    if !b.fits(image.width(), image.height()) {
        return Err(Error::BoxOutOfBounds {
            top: b.top,
            left: b.left,
            bottom: b.bottom,
            right: b.right,
            width: image.width(),
            height: image.height(),
        });
    }
    for y in b.top..b.bottom {
        for x in b.left..b.right {
            let edge = y < b.top + FRAME_THICKNESS
                || y + FRAME_THICKNESS >= b.bottom
                || x < b.left + FRAME_THICKNESS
                || x + FRAME_THICKNESS >= b.right;
            if edge {
                out.put_pixel(x, y, FRAME_COLOR);
            }
        }
    }
    Ok(out)
}

/// `dir/name.png` becomes `dir/name.localized.png`.
pub fn localized_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.localized.png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(windows: &[(u32, u32, f64)]) -> PredictionMap {
        PredictionMap {
            width: 256,
            height: 256,
            patch_size: 64,
            stride: 32,
            windows: windows.iter().map(|&(row, col, score)| WindowScore { row, col, score }).collect(),
        }
    }

    #[test]
    fn box_examples() {
        assert_eq!(bounding_box(&map(&[(0, 0, 0.2), (32, 32, 0.5)]), 0.5), None);
        assert_eq!(bounding_box(&map(&[(32, 64, 0.9)]), 0.5), BBox::new(32, 64, 96, 128));
        assert_eq!(
            bounding_box(&map(&[(0, 0, 0.9), (64, 96, 0.7), (128, 0, 0.1)]), 0.5),
            BBox::new(0, 0, 128, 160)
        );
    }

    #[test]
    fn iou_fixtures() {
        let a = BBox::new(0, 0, 10, 10).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        let b = BBox::new(0, 5, 10, 15).unwrap();
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&BBox::new(20, 20, 30, 30).unwrap()), 0.0);
        assert!(BBox::new(3, 0, 3, 4).is_none());
    }

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 3 % 200) as u8, (y * 5 % 200) as u8, 17]))
    }

    #[test]
    fn overlay_identity_and_frame() {
        let img = textured(40, 30);
        assert_eq!(render_overlay(&img, None).unwrap(), img);

        let b = BBox::new(5, 7, 20, 30).unwrap();
        let out = render_overlay(&img, Some(&b)).unwrap();
        let changed = img.pixels().zip(out.pixels()).filter(|(a, b)| a != b).count();
        let inner = (b.height() - 6) * (b.width() - 6);
        assert_eq!(changed as u32, b.height() * b.width() - inner);
        assert_eq!(*out.get_pixel(7, 5), FRAME_COLOR);
        assert_eq!(out.get_pixel(10, 8), img.get_pixel(10, 8));

        let full = BBox::new(0, 0, 30, 40).unwrap();
        let out = render_overlay(&img, Some(&full)).unwrap();
        assert_eq!(*out.get_pixel(0, 0), FRAME_COLOR);
        assert_eq!(*out.get_pixel(39, 29), FRAME_COLOR);
        assert_eq!(out.get_pixel(3, 3), img.get_pixel(3, 3));

        let outside = BBox::new(0, 0, 31, 40).unwrap();
        assert!(matches!(render_overlay(&img, Some(&outside)), Err(Error::BoxOutOfBounds { .. })));
    }

    #[test]
    fn localized_suffix() {
        assert_eq!(localized_path(Path::new("out/sp_0001.png")), PathBuf::from("out/sp_0001.localized.png"));
    }

    fn windows() -> impl Strategy<Value = Vec<(u32, u32, f64)>> {
        proptest::collection::vec((0u32..7, 0u32..7, 0.0f64..1.0), 0..20)
            .prop_map(|v| v.into_iter().map(|(r, c, s)| (r * 32, c * 32, s)).collect())
    }

    proptest! {
        #[test]
        fn box_contains_every_qualifying_window(ws in windows(), cutoff in 0.0f64..1.0) {
            let m = map(&ws);
            if let Some(b) = bounding_box(&m, cutoff) {
                for w in m.above(cutoff) {
                    prop_assert!(b.contains(&m.window_box(w)));
                }
            } else {
                prop_assert_eq!(m.above(cutoff).count(), 0);
            }
        }

        #[test]
        fn box_ignores_window_order(ws in windows(), cutoff in 0.0f64..1.0) {
            let mut rev = ws.clone();
            rev.reverse();
            prop_assert_eq!(bounding_box(&map(&ws), cutoff), bounding_box(&map(&rev), cutoff));
        }

        #[test]
        fn lower_cutoff_grows_box(ws in windows(), hi in 0.0f64..1.0, d in 0.0f64..1.0) {
            let lo = (hi - d).max(0.0);
            let m = map(&ws);
            match (bounding_box(&m, hi), bounding_box(&m, lo)) {
                (Some(small), Some(big)) => prop_assert!(big.contains(&small)),
                (Some(_), None) => prop_assert!(false, "box vanished at lower cutoff"),
                _ => {}
            }
        }
    }
}
