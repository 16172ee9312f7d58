//! Image files, fundus dataset directories and run manifests.
//!
//! Fundus loaders never write to their input directories. Every case goes
//! through the same single preprocessing path, [`preprocess`], which logs
//! what it did.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, NnError};
use crate::nn::{LayerSpec, Network, SampleSource, Scalar};
use crate::raster::{BinaryMask, GrayImage};

/// Default luminance level separating the STARE field of view from the
/// black surround.
pub const STARE_FOV_THRESHOLD: f64 = 0.07;
/// Erosion applied to computed FOV masks, in pixels.
pub const STARE_FOV_EROSION: usize = 2;

const IMAGE_EXTENSIONS: &[&str] = &["tif", "tiff", "png", "ppm", "pgm", "gif"];

/// Decoded color (or gray) image with interleaved `f32` channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ColorImage {
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, crate::ShapeError> {
        if data.len() != width * height * channels {
            return Err(crate::ShapeError::new(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// RGB triple at (x, y). Only meaningful for 3-channel images.
    pub fn rgb(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * self.channels;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// How a color fundus image becomes the single network input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrayMode {
    /// 0.299 R + 0.587 G + 0.114 B.
    Luma,
    /// Green channel only, which usually has the best vessel contrast.
    Green,
}

pub fn to_grayscale(img: &ColorImage, mode: GrayMode) -> Result<GrayImage, DataError> {
    if img.channels != 3 {
        return Err(DataError::Channels(img.channels));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| match mode {
            GrayMode::Luma => {
                (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) as f32
            }
            GrayMode::Green => p[1],
        })
        .collect();
    Ok(GrayImage::from_vec(img.width, img.height, data).expect("dimensions carried over"))
}

pub fn invert(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dims();
    GrayImage::from_vec(w, h, img.as_slice().iter().map(|&v| 1.0 - v).collect()).expect("same dimensions")
}

/// Grayscale conversion followed by optional inversion, the only transform
/// between a fundus file and the network.
pub fn preprocess(case_id: &str, img: &ColorImage, mode: GrayMode, inverted: bool) -> Result<GrayImage, DataError> {
    let gray = to_grayscale(img, mode)?;
    info!(
        "case {case_id}: {}x{} grayscale ({mode:?}){}",
        img.width,
        img.height,
        if inverted { ", inverted" } else { "" }
    );
    Ok(if inverted { invert(&gray) } else { gray })
}

fn open(path: &Path) -> Result<DynamicImage, DataError> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| DataError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| DataError::io(path, e))?;
    reader.decode().map_err(|source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads any supported file as RGB (gray files are replicated to three
/// channels).
pub fn load_color(path: &Path) -> Result<ColorImage, DataError> {
    let rgb = open(path)?.into_rgb32f();
    let (w, h) = rgb.dimensions();
    Ok(ColorImage {
        width: w as usize,
        height: h as usize,
        channels: 3,
        data: rgb.into_raw(),
    })
}

/// Loads a file as grayscale with 16-bit precision.
pub fn load_gray(path: &Path) -> Result<GrayImage, DataError> {
    let img = open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect();
    Ok(GrayImage::from_vec(w as usize, h as usize, data).expect("decoder dimensions"))
}

/// Loads a mask file; any pixel at or above half intensity is set.
pub fn load_mask(path: &Path) -> Result<BinaryMask, DataError> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    Ok(BinaryMask::from_vec(w as usize, h as usize, data).expect("decoder dimensions"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn output_format(path: &Path) -> Result<ImageFormat, DataError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(DataError::Config {
            path: path.to_path_buf(),
            detail: "output images must end in .png or .pgm".into(),
        }),
    }
}

fn write_dynamic(path: &Path, img: DynamicImage) -> Result<(), DataError> {
    let format = output_format(path)?;
    img.save_with_format(path, format).map_err(|source| match source {
        image::ImageError::IoError(e) => DataError::io(path, e),
        source => DataError::Encode {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Saves a [0, 1] image as 8- or 16-bit grayscale PNG/PGM (chosen by
/// extension). Values are clamped and rounded to the nearest level.
pub fn save_image(path: &Path, img: &GrayImage, depth: BitDepth) -> Result<(), DataError> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let quantize = |v: f32, levels: f32| (f64::from(v.clamp(0.0, 1.0)) * f64::from(levels)).round();
    let dynamic = match depth {
        BitDepth::Eight => {
            let raw = img.as_slice().iter().map(|&v| quantize(v, 255.0) as u8).collect();
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("buffer size"))
        }
        BitDepth::Sixteen => {
            let raw = img.as_slice().iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw).expect("buffer size"))
        }
    };
    write_dynamic(path, dynamic)
}

/// Saves a mask as an 8-bit 0/255 image.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<(), DataError> {
    let raw = mask.as_slice().iter().map(|&v| v * 255).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("buffer size");
    write_dynamic(path, DynamicImage::ImageLuma8(buf))
}

/// Probability maps are always written at 16 bits so ROC sweeps lose
/// almost nothing to quantization.
pub fn save_prob_map(path: &Path, prob: &GrayImage) -> Result<(), DataError> {
    save_image(path, prob, BitDepth::Sixteen)
}

/// One evaluation case: preprocessed image, first-observer truth and
/// field of view, all of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusCase {
    pub id: String,
    pub image: GrayImage,
    pub truth: BinaryMask,
    pub fov: BinaryMask,
}

impl FundusCase {
    pub fn new(id: String, image: GrayImage, truth: BinaryMask, fov: BinaryMask) -> Result<Self, DataError> {
        if truth.dims() != image.dims() || fov.dims() != image.dims() {
            return Err(DataError::Inconsistent {
                case: id,
                detail: format!(
                    "image {:?}, truth {:?} and fov {:?} differ in size",
                    image.dims(),
                    truth.dims(),
                    fov.dims()
                ),
            });
        }
        Ok(Self { id, image, truth, fov })
    }
}

/// Loader options shared by both datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub gray_mode: GrayMode,
    pub invert: bool,
    pub fov_threshold: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            gray_mode: GrayMode::Luma,
            invert: true,
            fov_threshold: STARE_FOV_THRESHOLD,
        }
    }
}

/// Finds `dir/stem.<ext>` for any supported extension.
fn find_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .flat_map(|ext| [ext.to_string(), ext.to_ascii_uppercase()])
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// File stems in `dir` ending in `suffix`, with the suffix removed, sorted.
fn ids_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<String>, DataError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(DataError::io(dir, e)),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        let known_ext = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !known_ext {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.strip_suffix(suffix)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn resolve_files(case: &str, wanted: &[(&Path, String)]) -> Result<Vec<PathBuf>, DataError> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for (dir, stem) in wanted {
        match find_with_stem(dir, stem) {
            Some(p) => found.push(p),
            None => missing.push(dir.join(format!("{stem}.*"))),
        }
    }
    if missing.is_empty() {
        Ok(found)
    } else {
        Err(DataError::MissingFiles {
            case: case.to_string(),
            paths: missing,
        })
    }
}

/// Loads the DRIVE test split. `dir` may be the dataset root (containing
/// `test/`) or the test directory itself, laid out as
/// `images/NN_test.tif`, `1st_manual/NN_manual1.gif` and
/// `mask/NN_test_mask.gif` (any supported extension is accepted).
pub fn load_drive(dir: &Path, opts: &LoadOptions) -> Result<Vec<FundusCase>, DataError> {
    let root = if dir.join("test").join("images").is_dir() {
        dir.join("test")
    } else {
        dir.to_path_buf()
    };
    let images = root.join("images");
    let manual = root.join("1st_manual");
    let mask = root.join("mask");
    let ids = ids_with_suffix(&images, "_test")?;
    if ids.is_empty() {
        warn!("no DRIVE cases found under {}", dir.display());
    }
    ids.iter()
        .map(|id| {
            let files = resolve_files(
                id,
                &[
                    (&images, format!("{id}_test")),
                    (&manual, format!("{id}_manual1")),
                    (&mask, format!("{id}_test_mask")),
                ],
            )?;
            let image = preprocess(id, &load_color(&files[0])?, opts.gray_mode, opts.invert)?;
            FundusCase::new(id.clone(), image, load_mask(&files[1])?, load_mask(&files[2])?)
        })
        .collect()
}

/// Loads STARE from `stare-images/imNNNN.ppm` with first-observer labels in
/// `labels-ah/imNNNN.ah.ppm`. The FOV is computed from the color image.
pub fn load_stare(dir: &Path, opts: &LoadOptions) -> Result<Vec<FundusCase>, DataError> {
    let images = dir.join("stare-images");
    let labels = dir.join("labels-ah");
    let ids = ids_with_suffix(&images, "")?;
    if ids.is_empty() {
        warn!("no STARE cases found under {}", dir.display());
    }
    ids.iter()
        .map(|id| {
            let files = resolve_files(id, &[(&images, id.clone()), (&labels, format!("{id}.ah"))])?;
            let color = load_color(&files[0])?;
            let fov = compute_fov(&color, opts.fov_threshold);
            let image = preprocess(id, &color, opts.gray_mode, opts.invert)?;
            FundusCase::new(id.clone(), image, load_mask(&files[1])?, fov)
        })
        .collect()
}

/// Field of view of a fundus photograph: luminance above `threshold`,
/// reduced to its largest 8-connected component and eroded by
/// [`STARE_FOV_EROSION`] pixels.
pub fn compute_fov(color: &ColorImage, threshold: f64) -> BinaryMask {
    let luma = to_grayscale(color, GrayMode::Luma).expect("loaders always produce RGB");
    let (w, h) = luma.dims();
    let data = luma.as_slice().iter().map(|&v| u8::from(f64::from(v) > threshold)).collect();
    BinaryMask::from_vec(w, h, data)
        .expect("same dimensions")
        .largest_component()
        .erode(STARE_FOV_EROSION)
}

/// Reflects an image outward by the given margins (edge pixel not repeated).
pub fn mirror_pad(img: &GrayImage, left: usize, top: usize, width: usize, height: usize) -> GrayImage {
    let (w, h) = img.dims();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    GrayImage::from_vec(
        width,
        height,
        (0..height)
            .flat_map(|y| {
                let sy = reflect(y as isize - top as isize, h);
                (0..width).map(move |x| (x, sy))
            })
            .map(|(x, sy)| img.get(reflect(x as isize - left as isize, w), sy))
            .collect(),
    )
    .expect("size computed above")
}

/// Padded input size, left/top margin and read-out shift for covering
/// `n` pixels. The margin is a multiple of `align` so pooling windows stay
/// on the same grid as in the unpadded image.
fn covering_layout(net_out: impl Fn(usize) -> Option<usize>, n: usize, align: usize) -> Option<(usize, usize, usize)> {
    (n..n + 4096).find_map(|p| {
        let out = net_out(p)?;
        let offset = (p - out) / 2;
        let margin = offset.div_ceil(align) * align;
        let shift = margin - offset;
        (out >= n + shift && p >= n + margin).then_some((p, margin, shift))
    })
}

/// Probability map for a whole case image. Without mirror padding the map
/// is smaller than the input and centered on it; with it the input is
/// reflected outward until the map covers every input pixel.
pub fn predict_image<T: Scalar>(net: &Network<T>, img: &GrayImage, mirror: bool) -> Result<GrayImage, NnError> {
    if !mirror {
        return net.predict(img);
    }
    let spec = net.spec();
    let pools = spec.layers.iter().filter(|l| matches!(l, LayerSpec::MaxPool)).count();
    let align = 1usize << pools;
    let (w, h) = img.dims();
    let layout = |n: usize| {
        covering_layout(|p| spec.output_dim(p), n, align)
            .ok_or_else(|| NnError::InvalidNetwork(format!("no input size covers {n} output pixels")))
    };
    let (pw, left, sx) = layout(w)?;
    let (ph, top, sy) = layout(h)?;
    let prob = net.predict(&mirror_pad(img, left, top, pw, ph))?;
    // Output pixel i sits over padded pixel i + offset = original i - shift.
    let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| prob.get(x + sx, y + sy)).collect();
    Ok(GrayImage::from_vec(w, h, data).expect("size computed above"))
}

/// One row of a generated-dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub seed: u64,
    pub image: PathBuf,
    pub label: PathBuf,
    pub label_fraction: f64,
}

/// Writes the manifest CSV; paths are stored as given (normally relative
/// to the manifest's directory).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let manifest_err = |detail: String| DataError::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| manifest_err(e.to_string()))?;
    for e in entries {
        w.serialize(e).map_err(|e| manifest_err(e.to_string()))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// Training samples read from a directory written by the generator. The
/// trainer's RNG picks entries uniformly, so a checkpointed run resumes on
/// the same sequence.
pub struct ManifestSource {
    base: PathBuf,
    entries: Vec<ManifestEntry>,
    cache: HashMap<usize, (GrayImage, BinaryMask)>,
}

impl ManifestSource {
    pub fn open(manifest: &Path) -> Result<Self, DataError> {
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            return Err(DataError::Manifest {
                path: manifest.to_path_buf(),
                detail: "manifest lists no samples".into(),
            });
        }
        Ok(Self {
            base: manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
            cache: HashMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn load(&self, i: usize) -> Result<(GrayImage, BinaryMask), DataError> {
        let e = &self.entries[i];
        Ok((load_gray(&self.base.join(&e.image))?, load_mask(&self.base.join(&e.label))?))
    }
}

impl SampleSource for ManifestSource {
    fn next_sample(&mut self, _index: u64, rng: &mut ChaCha8Rng) -> Result<(GrayImage, BinaryMask), NnError> {
        use rand::Rng;
        let i = rng.random_range(0..self.entries.len());
        if !self.cache.contains_key(&i) {
            let pair = self.load(i).map_err(|e| NnError::Source(e.to_string()))?;
            self.cache.insert(i, pair);
        }
        Ok(self.cache[&i].clone())
    }
}
