//! Image datasets, cropping, dihedral augmentation and PPM/PGM/PNG IO.

use std::path::{Path, PathBuf};

use ddt_core::{Scalar, Tensor};
use std::fs::File;
use std::io::BufWriter;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::error::{HarnessError, Result};
use crate::synth::{derive_seed, procedural_image};

/// Clean [3, H, W] images in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub images: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn procedural(count: usize, size: usize, seed: u64) -> Self {
        Dataset {
            images: (0..count)
                .map(|i| procedural_image(size, size, derive_seed(seed, 0xda7a, i as u64)))
                .collect(),
        }
    }

    /// Every .ppm/.pgm/.pnm/.png file in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    matches!(
                        e.to_ascii_lowercase().as_str(),
                        "ppm" | "pgm" | "pnm" | "png"
                    )
                })
            })
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| read_image(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn min_side(&self) -> usize {
        self.images
            .iter()
            .map(|t| t.shape()[1].min(t.shape()[2]))
            .min()
            .unwrap_or(0)
    }
}

/// `side`×`side` window of a [C, H, W] tensor with top-left corner (y, x).
pub fn crop<T: Scalar>(img: &Tensor<T>, y: usize, x: usize, side: usize) -> Tensor<T> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(y + side <= h && x + side <= w, "crop outside image");
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for row in y..y + side {
            let start = (ch * h + row) * w + x;
            out.extend_from_slice(&img.data()[start..start + side]);
        }
    }
    Tensor::new(&[c, side, side], out).expect("shape matches")
}

/// Element `k` (0..8) of the dihedral group acting on a [C, H, W] tensor:
/// `k & 3` quarter turns counter-clockwise, preceded by a horizontal flip
/// when `k >= 4`. Quarter turns swap H and W.
pub fn dihedral<T: Scalar>(img: &Tensor<T>, k: u8) -> Tensor<T> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let flip = k >= 4;
    let turns = k & 3;
    let (ho, wo) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(img.numel());
    for ch in 0..c {
        for yo in 0..ho {
            for xo in 0..wo {
                // inverse map from output to (flipped) source coordinates
                let (ys, xs) = match turns {
                    0 => (yo, xo),
                    1 => (xo, w - 1 - yo),
                    2 => (h - 1 - yo, w - 1 - xo),
                    _ => (h - 1 - xo, yo),
                };
                let xs = if flip { w - 1 - xs } else { xs };
                out.push(img.data()[(ch * h + ys) * w + xs]);
            }
        }
    }
    Tensor::new(&[c, ho, wo], out).expect("shape matches")
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> HarnessError + '_ {
    move |source| HarnessError::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a PPM/PGM/PNG file into [3, H, W] in [0, 1]. Grayscale images are
/// replicated across the three channels.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let data = (0..3)
        .flat_map(|c| (0..h * w).map(move |i| T::of(raw[i * 3 + c] as f64 / 255.0)))
        .collect();
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Writes a [3, H, W] tensor, clamped to [0, 1] and rounded to 8 bits. The
/// format follows the extension: `.pgm` stores luma only, `.ppm` and `.png`
/// store RGB.
pub fn write_image<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(HarnessError::Config(format!(
            "expected a [3, H, W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let to_u8 = |v: T| (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for i in 0..h * w {
            raw[i * 3 + c] = to_u8(img.data()[c * h * w + i]);
        }
    }
    let rgb = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let binary_pnm = |subtype: PnmSubtype, bytes: &[u8], color: ExtendedColorType| -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(subtype)
            .write_image(bytes, w as u32, h as u32, color)
            .map_err(image_err(path))
    };
    match ext.as_str() {
        "pgm" => {
            let gray: GrayImage = DynamicImage::ImageRgb8(rgb).to_luma8();
            binary_pnm(
                PnmSubtype::Graymap(SampleEncoding::Binary),
                gray.as_raw(),
                ExtendedColorType::L8,
            )
        }
        "ppm" | "pnm" => binary_pnm(
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            rgb.as_raw(),
            ExtendedColorType::Rgb8,
        ),
        _ => rgb.save(path).map_err(image_err(path)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn dihedral_group_elements_are_distinct_and_invertible() {
        let x = iota(1, 3, 3);
        let all: Vec<Tensor<f64>> = (0..8).map(|k| dihedral(&x, k)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j], "{i} vs {j}");
            }
        }
        // four quarter turns compose to the identity; a flip is an involution
        let mut r = x.clone();
        for _ in 0..4 {
            r = dihedral(&r, 1);
        }
        assert_eq!(r, x);
        assert_eq!(dihedral(&dihedral(&x, 4), 4), x);
    }

    #[test]
    fn quarter_turn_index_map() {
        // [[0,1,2],[3,4,5]] turned counter-clockwise is [[2,5],[1,4],[0,3]]
        let x = iota(1, 2, 3);
        let r = dihedral(&x, 1);
        assert_eq!(r.shape(), &[1, 3, 2]);
        assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn augmentation_preserves_mean() {
        let x = Tensor::<f64>::from_fn(&[3, 8, 8], |i| ((i * 37) % 11) as f64);
        for k in 0..8 {
            assert_eq!(dihedral(&x, k).sum(), x.sum());
        }
    }

    #[test]
    fn crop_window() {
        let x = iota(2, 4, 4);
        let c = crop(&x, 1, 2, 2);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
    }

    #[test]
    fn ppm_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::from_fn(&[3, 5, 7], |i| ((i * 31) % 256) as f32 / 255.0);
        for name in ["a.ppm", "a.png"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            assert_eq!(read_image::<f32>(&path).unwrap(), img);
        }
        let bytes = std::fs::read(dir.path().join("a.ppm")).unwrap();
        assert_eq!(&bytes[..2], b"P6");
    }

    #[test]
    fn pgm_is_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let img = Tensor::<f32>::full(&[3, 4, 4], 0.5);
        write_image(&path, &img).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..2], b"P5");
        let back = read_image::<f32>(&path).unwrap();
        assert!(back
            .data()
            .iter()
            .all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
    }
}
