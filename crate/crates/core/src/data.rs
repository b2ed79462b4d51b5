//! Image/mask ingestion, a procedural shapes corpus, and batching.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{gray_batch, ModelConfig};
use crate::colorspace::{lab_pixel_to_rgb, quantize_ab, resize_chroma, rgb_to_lab, split_lab, GrayImage, QuantizedChroma, RgbImage};
use crate::dmol::ChromaTargets;
use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-pixel class labels; [`IGNORE_LABEL`] marks unlabelled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Shape(format!("{} labels for a {width}x{height} map", labels.len())));
        }
        Ok(Self { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Every label is below `num_classes` or ignored.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes) {
            Some(l) => Err(Error::Range(format!("label {l} with {num_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour rescale with half-pixel centers.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let pick = |i: usize, from: usize, to: usize| (((2 * i + 1) * from) / (2 * to)).min(from - 1);
        let labels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| self.label(pick(x, self.width, width), pick(y, self.height, height)))
            .collect();
        Self { width, height, labels }
    }

    /// Read raw indices from a palette or 8-bit gray PNG.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(|e| Error::data(path, e.to_string()))?;
        let (color, depth) = reader.output_color_type();
        if depth != png::BitDepth::Eight || !matches!(color, png::ColorType::Indexed | png::ColorType::Grayscale) {
            return Err(Error::data(path, format!("mask must be 8-bit indexed or gray, got {color:?} {depth:?}")));
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::data(path, "mask too large"))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::data(path, e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let labels = (0..h)
            .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].to_vec())
            .collect();
        Self::new(w, h, labels).map_err(|e| Error::data(path, e.to_string()))
    }

    /// Write as an indexed PNG with a fixed palette; index 255 is white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(mask_palette());
        let mut writer = enc.write_header().map_err(|e| Error::data(path, e.to_string()))?;
        writer
            .write_image_data(&self.labels)
            .map_err(|e| Error::data(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::data(path, e.to_string()))
    }
}

/// The customary bit-interleaved label colormap.
fn mask_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256usize {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        if i == 255 {
            (r, g, b) = (255, 255, 255);
        }
        pal.extend([r, g, b]);
    }
    pal
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: RgbImage,
    pub mask: SegMap,
    pub id: String,
}

/// Load an image (PNG or JPEG) and its mask, both rescaled to `size`.
pub fn load_sample(image_path: &Path, mask_path: &Path, size: usize, num_classes: usize) -> Result<Sample> {
    let rgb = RgbImage::load(image_path)?;
    let mask = SegMap::load_png(mask_path)?;
    mask.check_classes(num_classes)
        .map_err(|e| Error::data(mask_path, e.to_string()))?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        rgb: rgb.resized(size, size),
        mask: mask.resized(size, size),
        id,
    })
}

/// Read every sample listed in `dir/list.txt`.
pub fn load_dir(dir: &Path, size: usize, num_classes: usize) -> Result<Vec<Sample>> {
    let list = dir.join("list.txt");
    let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let image = ["png", "jpg", "jpeg"]
                .iter()
                .map(|ext| dir.join("images").join(format!("{id}.{ext}")))
                .find(|p| p.exists())
                .ok_or_else(|| Error::data(dir.join("images").join(id), "no image with a png/jpg extension"))?;
            load_sample(&image, &dir.join("masks").join(format!("{id}.png")), size, num_classes)
        })
        .collect()
}

/// Write samples in the `images/`, `masks/`, `list.txt` layout.
pub fn save_dir(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut list = String::new();
    for s in samples {
        s.rgb.save_png(&dir.join("images").join(format!("{}.png", s.id)))?;
        s.mask.save_png(&dir.join("masks").join(format!("{}.png", s.id)))?;
        list.push_str(&s.id);
        list.push('\n');
    }
    let p = dir.join("list.txt");
    fs::write(&p, list).map_err(|e| Error::io(&p, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub size: usize,
    pub num_classes: usize,
    /// Maximum per-channel offset from a class's palette color.
    pub jitter: u8,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_images: usize, size: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_images,
            size,
            num_classes,
            jitter: 6,
            seed,
        }
    }

    /// One RGB color per class. Class 0 is an achromatic gray; the others
    /// differ in lightness and hue.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let l = if c == 1 { 50.0 } else { 25.0 + 60.0 * k as f64 / (c - 1) as f64 };
                if k == 0 {
                    return lab_pixel_to_rgb([l, 0.0, 0.0]);
                }
                let hue = std::f64::consts::TAU * (k - 1) as f64 / (c - 1) as f64 + 0.5;
                lab_pixel_to_rgb([l, 35.0 * hue.cos(), 35.0 * hue.sin()])
            })
            .collect()
    }
}

/// Inclusive pixel set of a shape on a `size x size` canvas.
fn shape_pixels(kind: ShapeKind, size: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let s = size as f64;
    let (lo, hi) = (s * 0.22, s * 0.42);
    let extent = rng.random_range(lo..hi);
    let cx = rng.random_range(extent / 2.0..s - extent / 2.0);
    let cy = rng.random_range(extent / 2.0..s - extent / 2.0);
    let inside = |x: f64, y: f64| -> bool {
        match kind {
            ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= (extent / 2.0).powi(2),
            ShapeKind::Rectangle => (x - cx).abs() <= extent / 2.0 && (y - cy).abs() <= extent / 2.5,
            ShapeKind::Triangle => {
                // apex up, base at the bottom
                let top = cy - extent / 2.0;
                let t = (y - top) / extent;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * extent / 2.0
            }
        }
    };
    (0..size)
        .flat_map(|y| (0..size).map(move |x| (x, y)))
        .filter(|&(x, y)| inside(x as f64 + 0.5, y as f64 + 0.5))
        .collect()
}

/// Gray background plus one to three non-overlapping class-colored shapes
/// per image. Identical specs give identical corpora.
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.size < 8 || spec.num_classes == 0 || spec.num_classes > 255 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs size >= 8 and 1..=255 classes, got size {} classes {}",
            spec.size, spec.num_classes
        )));
    }
    let palette = spec.palette();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let width = (spec.num_images.max(1) - 1).to_string().len().max(4);
    let mut out = Vec::with_capacity(spec.num_images);
    for index in 0..spec.num_images {
        let mut labels = vec![0u8; n * n];
        let mut rgb = RgbImage::filled(n, n, jittered(palette[0], spec.jitter, &mut rng))?;
        let shapes = if spec.num_classes > 1 { rng.random_range(1..=3) } else { 0 };
        for _ in 0..shapes {
            let class = rng.random_range(1..spec.num_classes) as u8;
            let kind = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle][rng.random_range(0..3)];
            let color = jittered(palette[class as usize], spec.jitter, &mut rng);
            // rejection sampling for a placement on free background
            for _ in 0..20 {
                let pixels = shape_pixels(kind, n, &mut rng);
                let free = pixels.iter().all(|&(x, y)| {
                    let (x0, x1, y0, y1) = (x.saturating_sub(1), (x + 1).min(n - 1), y.saturating_sub(1), (y + 1).min(n - 1));
                    (y0..=y1).all(|yy| (x0..=x1).all(|xx| labels[yy * n + xx] == 0))
                });
                if free && !pixels.is_empty() {
                    for (x, y) in pixels {
                        labels[y * n + x] = class;
                        rgb.set_pixel(x, y, color);
                    }
                    break;
                }
            }
        }
        out.push(Sample {
            rgb,
            mask: SegMap::new(n, n, labels)?,
            id: format!("{index:0width$}"),
        });
    }
    Ok(out)
}

fn jittered(color: [u8; 3], jitter: u8, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let j = jitter as i32;
    let mut offset = || if j == 0 { 0 } else { rng.random_range(-j..=j) };
    let (dr, dg, db) = (offset(), offset(), offset());
    if color[0] == color[1] && color[1] == color[2] {
        // keep achromatic colors achromatic
        return [(color[0] as i32 + dr).clamp(0, 255) as u8; 3];
    }
    [
        (color[0] as i32 + dr).clamp(0, 255) as u8,
        (color[1] as i32 + dg).clamp(0, 255) as u8,
        (color[2] as i32 + db).clamp(0, 255) as u8,
    ]
}

/// A sample reduced to what training consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    /// Luminance at the input resolution.
    pub gray: GrayImage,
    /// Quantized chroma at the generator resolution.
    pub chroma: QuantizedChroma,
    /// Labels at the generator resolution.
    pub mask: SegMap,
    /// The full-resolution color image, for evaluation.
    pub rgb: RgbImage,
}

pub fn prepare(sample: &Sample, cfg: &ModelConfig) -> Result<Prepared> {
    let s = cfg.input_size;
    let rgb = sample.rgb.resized(s, s);
    let mask = if (sample.mask.width(), sample.mask.height()) == (s, s) {
        sample.mask.clone()
    } else {
        sample.mask.resized(s, s)
    };
    mask.check_classes(cfg.num_classes)
        .map_err(|e| Error::data(PathBuf::from(&sample.id), e.to_string()))?;
    let (gray, chroma) = split_lab(&rgb_to_lab(&rgb));
    let g = cfg.generator_size();
    Ok(Prepared {
        id: sample.id.clone(),
        gray,
        chroma: quantize_ab(&resize_chroma(&chroma, g, g)?, cfg.bins)?,
        mask: mask.resized(g, g),
        rgb,
    })
}

pub fn prepare_all(samples: &[Sample], cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(s, cfg)).collect()
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub gray: Vec<GrayImage>,
    pub chroma: Vec<QuantizedChroma>,
    /// Generator-resolution labels in `(n, y, x)` order.
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_items(items: &[&Prepared]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self {
            ids: items.iter().map(|p| p.id.clone()).collect(),
            gray: items.iter().map(|p| p.gray.clone()).collect(),
            chroma: items.iter().map(|p| p.chroma.clone()).collect(),
            labels: items.iter().flat_map(|p| p.mask.labels().iter().copied()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[1, N, S, S]` normalized luminance.
    pub fn gray_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        gray_batch(&self.gray.iter().collect::<Vec<_>>())
    }

    pub fn targets(&self) -> Result<ChromaTargets> {
        ChromaTargets::from_quantized(&self.chroma.iter().collect::<Vec<_>>())
    }
}

/// Shuffled batches of one epoch; the order depends only on `(seed, epoch)`.
/// Every sample appears exactly once: the last batch may be smaller.
pub fn batch_iter(samples: &[Prepared], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 || batch_size > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} with {} samples",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_items(&chunk.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}

/// Class labels present in a mask, ignoring [`IGNORE_LABEL`].
pub fn label_set(mask: &SegMap) -> BTreeSet<u8> {
    mask.labels().iter().copied().filter(|&l| l != IGNORE_LABEL).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::DEFAULT_BINS;

    #[test]
    fn corpus_is_deterministic() {
        let spec = SyntheticSpec::new(10, 32, 4, 7);
        assert_eq!(make_synthetic_corpus(&spec).unwrap(), make_synthetic_corpus(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(make_synthetic_corpus(&spec).unwrap(), make_synthetic_corpus(&other).unwrap());
    }

    #[test]
    fn painted_pixels_match_their_class_colors() {
        let spec = SyntheticSpec::new(40, 32, 5, 3);
        let palette = spec.palette();
        for s in make_synthetic_corpus(&spec).unwrap() {
            for y in 0..32 {
                for x in 0..32 {
                    let class = s.mask.label(x, y) as usize;
                    let px = s.rgb.pixel(x, y);
                    for ch in 0..3 {
                        assert!(px[ch].abs_diff(palette[class][ch]) <= spec.jitter, "{} ({x},{y})", s.id);
                    }
                }
            }
        }
    }

    #[test]
    fn all_classes_appear() {
        let spec = SyntheticSpec::new(100, 32, 6, 1);
        let mut seen = BTreeSet::new();
        for s in make_synthetic_corpus(&spec).unwrap() {
            seen.extend(label_set(&s.mask));
        }
        assert_eq!(seen, (0..6).collect());
    }

    #[test]
    fn single_class_corpus_is_background_only() {
        let spec = SyntheticSpec::new(5, 16, 1, 0);
        for s in make_synthetic_corpus(&spec).unwrap() {
            assert!(s.mask.labels().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn nearest_resize_never_invents_labels() {
        let labels: Vec<u8> = (0..15 * 11).map(|i| [0u8, 3, 255, 7][(i * 7 / 5) % 4]).collect();
        let m = SegMap::new(15, 11, labels).unwrap();
        for (w, h) in [(4, 4), (32, 32), (15, 11), (7, 20)] {
            assert!(label_set(&m.resized(w, h)).is_subset(&label_set(&m)));
        }
        assert_eq!(m.resized(15, 11), m);
    }

    #[test]
    fn batches_partition_each_epoch() {
        let cfg = ModelConfig::desk(4);
        let corpus = make_synthetic_corpus(&SyntheticSpec::new(10, 32, 4, 2)).unwrap();
        let prepared = prepare_all(&corpus, &cfg).unwrap();
        let a = batch_iter(&prepared, 4, 5, 0).unwrap();
        assert_eq!(a, batch_iter(&prepared, 4, 5, 0).unwrap());
        assert_ne!(a, batch_iter(&prepared, 4, 5, 1).unwrap());
        assert_eq!(a.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut ids: Vec<String> = a.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort();
        assert_eq!(ids, prepared.iter().map(|p| p.id.clone()).collect::<Vec<_>>());
        assert!(batch_iter(&prepared, 11, 0, 0).is_err());
        let g = a[0].gray_tensor::<f32>().unwrap();
        assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn achromatic_sample_targets_center_bin() {
        let cfg = ModelConfig::desk(2);
        let sample = Sample {
            rgb: RgbImage::filled(32, 32, [77, 77, 77]).unwrap(),
            mask: SegMap::new(32, 32, vec![0; 1024]).unwrap(),
            id: "gray".into(),
        };
        let p = prepare(&sample, &cfg).unwrap();
        let center = (DEFAULT_BINS / 2 - 1) as u16;
        assert!(p.chroma.a_bins().iter().chain(p.chroma.b_bins()).all(|&b| b == center));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_synthetic_corpus(&SyntheticSpec::new(3, 32, 4, 9)).unwrap();
        save_dir(dir.path(), &corpus).unwrap();
        let back = load_dir(dir.path(), 32, 4).unwrap();
        assert_eq!(back, corpus);
        assert!(load_dir(dir.path(), 32, 2).is_err());
        let resized = load_dir(dir.path(), 16, 4).unwrap();
        assert_eq!((resized[0].rgb.width(), resized[0].mask.width()), (16, 16));
    }

    #[test]
    fn ignore_only_mask_is_valid() {
        let m = SegMap::new(2, 1, vec![0, IGNORE_LABEL]).unwrap();
        assert!(m.check_classes(1).is_ok());
        assert!(SegMap::new(1, 1, vec![3]).unwrap().check_classes(3).is_err());
    }
}
