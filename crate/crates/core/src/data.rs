//! Synthetic few-shot image data with ground-truth relevance regions, plus
//! an N-way K-shot episode sampler and optional image-folder ingestion.
//!
//! Every sample carries a class glyph (shape x color, class determined) at
//! a random position and one shared checkerboard distractor patch that is
//! identical for all classes. The glyph patch is the known
//! decision-relevant region; the distractor is the known salient-but-
//! redundant region. Background is seeded uniform noise around 0.5.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{write_file, ByteReader};
use crate::viz::resize_bilinear;
use crate::Tensor;

/// Number of distinct glyph shape templates.
pub const GLYPH_SHAPES: usize = 5;
/// Side length of the glyph and distractor patches (default geometry).
pub const PATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Background pixel = 0.5 + noise_level * (u - 0.5), u ~ U[0,1).
    pub noise_level: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_classes: 10, samples_per_class: 50, image_size: 32, noise_level: 0.15 }
    }
}

/// Shape/color pair that determines a class, plus where it was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphCode {
    pub shape_idx: usize,
    pub color_idx: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[3, H, W]` image in `[0,1]`.
    pub image: Tensor,
    pub label: usize,
    /// `H*W` 0/1 grid marking the glyph patch (synthetic data only).
    pub relevance_mask: Option<Vec<u8>>,
    /// `H*W` 0/1 grid marking the distractor patch (synthetic data only).
    pub distractor_mask: Option<Vec<u8>>,
    pub glyph: Option<GlyphCode>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by class id.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.label].push(i);
        }
        groups
    }

    /// Stack the given samples into a `[n, 3, H, W]` batch.
    pub fn stack_images(&self, ids: &[usize]) -> Tensor {
        let hw = self.image_size * self.image_size;
        let mut data = Vec::with_capacity(ids.len() * 3 * hw);
        for &id in ids {
            data.extend_from_slice(self.samples[id].image.data());
        }
        Tensor::new(vec![ids.len(), 3, self.image_size, self.image_size], data).expect("stacked batch")
    }
}

/// Deterministic per-class glyph assignment: shapes cycle, colors are
/// unique per class.
pub fn class_glyph_code(class_id: usize) -> (usize, usize) {
    (class_id % GLYPH_SHAPES, class_id)
}

/// Fixed palette: golden-angle hue walk at full saturation.
pub fn class_color(color_idx: usize) -> [f64; 3] {
    let hue = (color_idx as f64 * 0.618033988749895).fract() * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue.fract();
    let (v, p) = (0.95, 0.15);
    let q = v - (v - p) * f;
    let t = p + (v - p) * f;
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Pixel set of a shape template inside a `PATCH x PATCH` cell.
pub fn shape_pixels(shape_idx: usize) -> Vec<(usize, usize)> {
    let mid = PATCH / 2;
    let mut px = Vec::new();
    for r in 0..PATCH {
        for c in 0..PATCH {
            let hit = match shape_idx {
                // Filled square.
                0 => true,
                // Plus / cross.
                1 => (r == mid - 1 || r == mid) || (c == mid - 1 || c == mid),
                // Lower-left triangle.
                2 => c <= r,
                // Ring: 2-pixel border.
                3 => r < 2 || r >= PATCH - 2 || c < 2 || c >= PATCH - 2,
                // Vertical stripes.
                4 => c % 4 < 2,
                _ => unreachable!("shape_idx < GLYPH_SHAPES"),
            };
            if hit {
                px.push((r, c));
            }
        }
    }
    px
}

/// Pick two disjoint patch positions, or fail after bounded retries.
fn place_disjoint(rng: &mut ChaCha8Rng, image_size: usize, patch: usize) -> Result<((usize, usize), (usize, usize))> {
    let span = image_size - patch;
    for _ in 0..1000 {
        let glyph = (rng.random_range(0..=span), rng.random_range(0..=span));
        let distractor = (rng.random_range(0..=span), rng.random_range(0..=span));
        let overlap_rows = glyph.0 < distractor.0 + patch && distractor.0 < glyph.0 + patch;
        let overlap_cols = glyph.1 < distractor.1 + patch && distractor.1 < glyph.1 + patch;
        if !(overlap_rows && overlap_cols) {
            return Ok((glyph, distractor));
        }
    }
    Err(Error::Generation(format!(
        "could not place glyph and distractor disjointly in a {image_size}x{image_size} image"
    )))
}

/// Generate the synthetic dataset. The same seed yields a bit-identical
/// dataset.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_classes < 5 {
        return Err(Error::Config(format!("need at least 5 classes, got {}", cfg.n_classes)));
    }
    if cfg.image_size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {}", cfg.image_size)));
    }
    if !(0.0..=1.0).contains(&cfg.noise_level) {
        return Err(Error::Config(format!("noise level {} outside [0,1]", cfg.noise_level)));
    }
    if cfg.samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be positive".into()));
    }
    let size = cfg.image_size;
    let hw = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for class in 0..cfg.n_classes {
        let (shape_idx, color_idx) = class_glyph_code(class);
        let color = class_color(color_idx);
        let template = shape_pixels(shape_idx);
        for _ in 0..cfg.samples_per_class {
            let mut image = vec![0.0f64; 3 * hw];
            for v in image.iter_mut() {
                *v = 0.5 + cfg.noise_level * (rng.random::<f64>() - 0.5);
            }
            let ((gt, gl), (dt, dl)) = place_disjoint(&mut rng, size, PATCH)?;
            // Distractor: fixed checkerboard of 2x2 cells, identical for
            // every class and sample.
            for r in 0..PATCH {
                for c in 0..PATCH {
                    let v = if ((r / 2) + (c / 2)) % 2 == 0 { 1.0 } else { 0.0 };
                    for ch in 0..3 {
                        image[(ch * size + dt + r) * size + dl + c] = v;
                    }
                }
            }
            for &(r, c) in &template {
                for ch in 0..3 {
                    image[(ch * size + gt + r) * size + gl + c] = color[ch];
                }
            }
            let mut relevance = vec![0u8; hw];
            let mut distractor = vec![0u8; hw];
            for r in 0..PATCH {
                for c in 0..PATCH {
                    relevance[(gt + r) * size + gl + c] = 1;
                    distractor[(dt + r) * size + dl + c] = 1;
                }
            }
            samples.push(Sample {
                image: Tensor::new(vec![3, size, size], image)?,
                label: class,
                relevance_mask: Some(relevance),
                distractor_mask: Some(distractor),
                glyph: Some(GlyphCode { shape_idx, color_idx, top: gt, left: gl }),
            });
        }
    }
    Ok(Dataset { image_size: size, n_classes: cfg.n_classes, samples })
}

/// Re-derive a sample's label from the pixels inside its relevance mask:
/// a class matches when all of its template pixels carry the class color
/// exactly and no other patch pixel does.
pub fn recover_label(sample: &Sample, n_classes: usize) -> Option<usize> {
    let mask = sample.relevance_mask.as_ref()?;
    let size = sample.image.shape()[1];
    let mut top = usize::MAX;
    let mut left = usize::MAX;
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            top = top.min(i / size);
            left = left.min(i % size);
        }
    }
    if top == usize::MAX {
        return None;
    }
    let img = sample.image.data();
    let pixel = |r: usize, c: usize| {
        [
            img[(top + r) * size + left + c],
            img[(size * size) + (top + r) * size + left + c],
            img[(2 * size * size) + (top + r) * size + left + c],
        ]
    };
    for class in 0..n_classes {
        let (shape_idx, color_idx) = class_glyph_code(class);
        let color = class_color(color_idx);
        let template = shape_pixels(shape_idx);
        let on_template = |r: usize, c: usize| template.contains(&(r, c));
        let mut ok = true;
        'scan: for r in 0..PATCH {
            for c in 0..PATCH {
                let is_color = pixel(r, c) == color;
                if on_template(r, c) != is_color {
                    ok = false;
                    break 'scan;
                }
            }
        }
        if ok {
            return Some(class);
        }
    }
    None
}

// ── episodes ────────────────────────────────────────────────────────────

/// One few-shot task: a support set with exactly `k_shot` samples for each
/// of `n_way` classes, and a disjoint query set over the same classes.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Classes in episode order.
    pub class_ids: Vec<usize>,
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// `[n_way*k_shot, 3, H, W]`.
    pub support_images: Tensor,
    /// `[n_way*n_query, 3, H, W]`.
    pub query_images: Tensor,
}

impl Episode {
    /// Support then query sample ids, the batch order used downstream.
    pub fn all_ids(&self) -> Vec<usize> {
        let mut ids = self.support_ids.clone();
        ids.extend_from_slice(&self.query_ids);
        ids
    }
}

fn choose_distinct(rng: &mut ChaCha8Rng, pool: &[usize], take: usize) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Uniform class choice without replacement, support/query disjoint per
/// class. Reproducible bit-exactly for a fixed rng stream.
pub fn sample_episode(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::Sampling("n_way, k_shot and n_query must be positive".into()));
    }
    let groups = dataset.by_class();
    let eligible: Vec<usize> = (0..dataset.n_classes)
        .filter(|&c| groups[c].len() >= k_shot + n_query)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Sampling(format!(
            "need {n_way} classes with at least {} samples each, only {} qualify",
            k_shot + n_query,
            eligible.len()
        )));
    }
    let class_ids = choose_distinct(rng, &eligible, n_way);
    let mut support_ids = Vec::with_capacity(n_way * k_shot);
    let mut query_ids = Vec::with_capacity(n_way * n_query);
    for &c in &class_ids {
        let picked = choose_distinct(rng, &groups[c], k_shot + n_query);
        support_ids.extend_from_slice(&picked[..k_shot]);
        query_ids.extend_from_slice(&picked[k_shot..]);
    }
    let support_labels = support_ids.iter().map(|&i| dataset.samples[i].label).collect();
    let query_labels = query_ids.iter().map(|&i| dataset.samples[i].label).collect();
    Ok(Episode {
        n_way,
        k_shot,
        n_query,
        support_images: dataset.stack_images(&support_ids),
        query_images: dataset.stack_images(&query_ids),
        class_ids,
        support_ids,
        query_ids,
        support_labels,
        query_labels,
    })
}

// ── dataset file format ─────────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"IMDAT001";

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dataset.image_size as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.n_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.samples.len() as u64).to_le_bytes());
    for s in &dataset.samples {
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        let synthetic = s.relevance_mask.is_some();
        buf.push(synthetic as u8);
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if synthetic {
            buf.extend_from_slice(s.relevance_mask.as_ref().unwrap());
            buf.extend_from_slice(s.distractor_mask.as_ref().unwrap());
            let g = s.glyph.as_ref().expect("synthetic samples carry glyph codes");
            for v in [g.shape_idx, g.color_idx, g.top, g.left] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
    }
    write_file(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(MAGIC)?;
    let image_size = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let n_samples = r.u64()? as usize;
    if image_size == 0 || image_size > 4096 || n_samples > 10_000_000 {
        return Err(r.bad("implausible header"));
    }
    let hw = image_size * image_size;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let label = r.u32()? as usize;
        if label >= n_classes {
            return Err(r.bad("label out of range"));
        }
        let synthetic = r.u8()? != 0;
        let mut image = Vec::with_capacity(3 * hw);
        for _ in 0..3 * hw {
            image.push(r.f64()?);
        }
        let (relevance_mask, distractor_mask, glyph) = if synthetic {
            let mut rel = vec![0u8; hw];
            for v in rel.iter_mut() {
                *v = r.u8()?;
            }
            let mut dis = vec![0u8; hw];
            for v in dis.iter_mut() {
                *v = r.u8()?;
            }
            let shape_idx = r.u32()? as usize;
            let color_idx = r.u32()? as usize;
            let top = r.u32()? as usize;
            let left = r.u32()? as usize;
            (Some(rel), Some(dis), Some(GlyphCode { shape_idx, color_idx, top, left }))
        } else {
            (None, None, None)
        };
        samples.push(Sample {
            image: Tensor::new(vec![3, image_size, image_size], image)?,
            label,
            relevance_mask,
            distractor_mask,
            glyph,
        });
    }
    r.expect_eof()?;
    Ok(Dataset { image_size, n_classes, samples })
}

// ── image-folder ingestion ──────────────────────────────────────────────

/// Load `class_name/file.png` directories: 8-bit PNGs, resized bilinearly
/// to `image_size` and scaled to `[0,1]`. Loaded samples carry no masks.
pub fn load_image_folder(path: &Path, image_size: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Ingestion { path: path.to_path_buf(), reason: "no class directories".into() });
    }
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Ingestion { path: dir.clone(), reason: "empty class directory".into() });
        }
        for file in files {
            let image = decode_png_rgb(&file, image_size)?;
            samples.push(Sample { image, label, relevance_mask: None, distractor_mask: None, glyph: None });
        }
    }
    Ok(Dataset { image_size, n_classes: class_dirs.len(), samples })
}

fn decode_png_rgb(path: &Path, image_size: usize) -> Result<Tensor> {
    let ingest = |reason: String| Error::Ingestion { path: path.to_path_buf(), reason };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| ingest(format!("not a decodable png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| ingest("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| ingest(format!("png frame: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ingest(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => {
            return Err(ingest("indexed png not supported".into()));
        }
    };
    let raw = &buf[..h * w * channels];
    // Per-channel planes in [0,1], then resize each plane.
    let mut planes = vec![vec![0.0f64; h * w]; 3];
    for y in 0..h {
        for x in 0..w {
            let px = &raw[(y * w + x) * channels..(y * w + x) * channels + channels];
            let rgb = match channels {
                1 | 2 => [px[0], px[0], px[0]],
                _ => [px[0], px[1], px[2]],
            };
            for c in 0..3 {
                planes[c][y * w + x] = rgb[c] as f64 / 255.0;
            }
        }
    }
    let mut data = Vec::with_capacity(3 * image_size * image_size);
    for plane in &planes {
        data.extend(resize_bilinear(plane, h, w, image_size, image_size));
    }
    Tensor::new(vec![3, image_size, image_size], data)
}
