//! Rendering of information maps: normalization, bilinear upsampling, a
//! fixed blue-green-red colormap, image blending, and PNG output.
//!
//! All choices here are pinned so rendering is bit-reproducible: per-map
//! normalization, align-corners-false sampling, colormap control points
//! 0.0 -> (0,0,255), 0.5 -> (0,255,0), 1.0 -> (255,0,0), rounding half away
//! from zero, and a fixed PNG encoder configuration.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::maps::{InfoMap, MapKind};
use crate::nn::write_file;
use crate::Tensor;

/// Rescale to `[0,1]` as `(v - min)/(max - min)`; a constant map becomes
/// all zeros.
pub fn normalize_map(values: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return vec![0.0; values.len()];
    }
    let span = hi - lo;
    values.iter().map(|&v| (v - lo) / span).collect()
}

/// Align-corners-false bilinear sampling at any output size.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "source grid size");
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            out.push(v);
        }
    }
    out
}

/// Upsampling-only wrapper used to bring tap-grid maps to image resolution.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if src.len() != h * w {
        return Err(Error::Dimension(format!("grid {h}x{w} with {} values", src.len())));
    }
    if out_h < h || out_w < w {
        return Err(Error::Dimension(format!(
            "upsample target {out_h}x{out_w} smaller than source {h}x{w}"
        )));
    }
    Ok(resize_bilinear(src, h, w, out_h, out_w))
}

/// Piecewise-linear blue -> green -> red colormap over `[0,1]`, one RGB8
/// triple per value. High values render red.
pub fn colorize(grid: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(grid.len() * 3);
    for &v in grid {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("colorize input {v} outside [0,1]")));
        }
        let (r, g, b) = if v <= 0.5 {
            let t = v / 0.5;
            (0.0, 255.0 * t, 255.0 * (1.0 - t))
        } else {
            let t = (v - 0.5) / 0.5;
            (255.0 * t, 255.0 * (1.0 - t), 0.0)
        };
        out.push(r.round() as u8);
        out.push(g.round() as u8);
        out.push(b.round() as u8);
    }
    Ok(out)
}

/// An 8-bit RGB image together with where it came from.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub sample_id: usize,
    pub kind: Option<MapKind>,
    pub blend_lambda: f64,
}

/// Per-channel `round((1-lambda)*original + lambda*heat)`.
pub fn blend(original: &[u8], heat: &[u8], lambda: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("blend lambda {lambda} outside [0,1]")));
    }
    if original.len() != heat.len() {
        return Err(Error::Dimension(format!(
            "blend of {} bytes with {} bytes",
            original.len(),
            heat.len()
        )));
    }
    Ok(original
        .iter()
        .zip(heat)
        .map(|(&o, &h)| ((1.0 - lambda) * o as f64 + lambda * h as f64).round() as u8)
        .collect())
}

/// `[3,H,W]` image in `[0,1]` to interleaved RGB8.
pub fn image_to_rgb8(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Write an 8-bit RGB PNG with fixed encoder settings, so identical pixel
/// content yields identical file bytes.
pub fn write_png(path: &Path, pixels: &[u8], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width * 3 {
        return Err(Error::Dimension(format!(
            "png {width}x{height} needs {} bytes, got {}",
            height * width * 3,
            pixels.len()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("png header: {e}"),
    })?;
    writer.write_image_data(pixels).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("png body: {e}"),
    })?;
    Ok(())
}

/// Heat image at image resolution for one info map. Redundancy maps are
/// clamped at zero before normalization; the raw values stay in the CSV.
pub fn heat_image(map: &InfoMap, out_h: usize, out_w: usize) -> Result<Vec<u8>> {
    let up = upsample_bilinear(&map.values, map.height, map.width, out_h, out_w)?;
    let base: Vec<f64> = if map.kind == MapKind::Redundant {
        up.iter().map(|&v| v.max(0.0)).collect()
    } else {
        up
    };
    colorize(&normalize_map(&base))
}

/// Files produced for one explained sample:
/// `original, total_heat, total_mix, decision_mix, redundant_mix`.
pub fn render_sample(
    dir: &Path,
    image: &Tensor,
    total: &InfoMap,
    decision: &InfoMap,
    redundant: &InfoMap,
    lambda: f64,
) -> Result<Vec<PathBuf>> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let original = image_to_rgb8(image)?;
    let total_heat = heat_image(total, h, w)?;
    let decision_heat = heat_image(decision, h, w)?;
    let redundant_heat = heat_image(redundant, h, w)?;
    let files = [
        ("original.png", original.clone()),
        ("total_heat.png", total_heat.clone()),
        ("total_mix.png", blend(&original, &total_heat, lambda)?),
        ("decision_mix.png", blend(&original, &decision_heat, lambda)?),
        ("redundant_mix.png", blend(&original, &redundant_heat, lambda)?),
    ];
    let mut written = Vec::new();
    for (name, pixels) in files {
        let path = dir.join(name);
        write_png(&path, &pixels, h, w)?;
        written.push(path);
    }
    Ok(written)
}

/// Raw per-location values for a set of maps, one row per location.
pub fn maps_csv(maps: &[InfoMap]) -> String {
    let mut out = String::from("sample_id,kind,row,col,value\n");
    for m in maps {
        for y in 0..m.height {
            for x in 0..m.width {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    m.sample_id,
                    m.kind.name(),
                    y,
                    x,
                    m.values[y * m.width + x]
                ));
            }
        }
    }
    out
}

pub fn write_maps_csv(path: &Path, maps: &[InfoMap]) -> Result<()> {
    write_file(path, maps_csv(maps).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_constant_map_is_zero() {
        assert_eq!(normalize_map(&[3.3; 5]), vec![0.0; 5]);
    }

    #[test]
    fn normalize_affine_row() {
        assert_eq!(normalize_map(&[0.0, 1.0, 2.0]), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_hits_zero_and_one() {
        let vals = [0.2, -1.4, 3.7, 0.9, 2.2];
        let n = normalize_map(&vals);
        assert_eq!(n.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(n.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn upsample_constant_grid() {
        let out = upsample_bilinear(&[0.7; 6], 2, 3, 8, 9).unwrap();
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_one_by_one() {
        let out = upsample_bilinear(&[0.3], 1, 1, 4, 4).unwrap();
        assert!(out.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn upsample_2x2_hand_weights() {
        // Source columns [0,1]; sampling positions along x are
        // clamp((x+0.5)/2 - 0.5) = 0, 0.25, 0.75, 1.
        let out = upsample_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 4).unwrap();
        let row = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert!((out[y * 4 + x] - row[x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_downscale() {
        assert!(matches!(
            upsample_bilinear(&[0.0; 16], 4, 4, 2, 4),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn upsample_corners_exact_and_range_contained() {
        let mut seed = 5u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 10.0 - 5.0
        };
        for (h, w, oh, ow) in [(2usize, 2usize, 4usize, 4usize), (3, 5, 32, 32), (4, 4, 7, 9)] {
            let src: Vec<f64> = (0..h * w).map(|_| next()).collect();
            let out = upsample_bilinear(&src, h, w, oh, ow).unwrap();
            // Corner outputs reproduce corner sources exactly.
            assert_eq!(out[0], src[0]);
            assert_eq!(out[ow - 1], src[w - 1]);
            assert_eq!(out[(oh - 1) * ow], src[(h - 1) * w]);
            assert_eq!(out[oh * ow - 1], src[h * w - 1]);
            // Interpolation never leaves the source range.
            let (lo, hi) = src.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            for &v in &out {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn upsample_preserves_min_max_for_corner_extrema_and_odd_scale() {
        // Extremes at corners: preserved for any scale.
        let src = [9.0, 1.5, 2.5, -3.0];
        let out = upsample_bilinear(&src, 2, 2, 10, 6).unwrap();
        let (lo, hi) = out.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        assert!((hi - 9.0).abs() < 1e-12 && (lo + 3.0).abs() < 1e-12);
        // Odd integer scale factors sample every source pixel exactly, so
        // interior extrema survive too.
        let src2 = [0.0, 1.0, 0.0, 1.0, 7.0, 1.0, 0.0, 1.0, 0.0];
        let out2 = upsample_bilinear(&src2, 3, 3, 9, 9).unwrap();
        let hi2 = out2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((hi2 - 7.0).abs() < 1e-12);
    }

    #[test]
    fn colorize_control_points() {
        let px = colorize(&[0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(&px[0..3], &[0, 0, 255]);
        assert_eq!(&px[3..6], &[0, 255, 0]);
        assert_eq!(&px[6..9], &[255, 0, 0]);
        // 0.25 interpolates half way from blue to green; 127.5 rounds half
        // away from zero to 128.
        assert_eq!(&px[9..12], &[0, 128, 128]);
    }

    #[test]
    fn colorize_rejects_out_of_range() {
        assert!(matches!(colorize(&[1.1]), Err(Error::Contract(_))));
        assert!(matches!(colorize(&[-0.01]), Err(Error::Contract(_))));
    }

    #[test]
    fn blend_identities_and_hand_case() {
        let orig = [10u8, 200, 31];
        let heat = [250u8, 0, 99];
        assert_eq!(blend(&orig, &heat, 0.0).unwrap(), orig.to_vec());
        assert_eq!(blend(&orig, &heat, 1.0).unwrap(), heat.to_vec());
        // Hand-computed 0.5 blend: (130, 100, 65).
        assert_eq!(blend(&orig, &heat, 0.5).unwrap(), vec![130, 100, 65]);
        assert!(matches!(blend(&orig, &heat, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn blend_is_monotone_in_lambda() {
        let orig = [40u8];
        let heat = [200u8];
        let mut last = 0u8;
        for i in 0..=20 {
            let l = i as f64 / 20.0;
            let v = blend(&orig, &heat, l).unwrap()[0];
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn colormap_invariant_under_positive_affine_rescale() {
        let vals = [0.4, -2.0, 1.7, 0.0, 3.2, 3.2];
        let base = colorize(&normalize_map(&vals)).unwrap();
        for (a, b) in [(2.0, 0.0), (0.5, -3.0), (7.25, 11.0)] {
            let scaled: Vec<f64> = vals.iter().map(|&v| a * v + b).collect();
            let px = colorize(&normalize_map(&scaled)).unwrap();
            assert_eq!(px, base);
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = std::env::temp_dir().join(format!("imviz-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let blocker = dir.join("blocker");
        std::fs::write(&blocker, b"a file, not a directory").unwrap();
        let path = blocker.join("nested").join("x.png");
        let err = write_png(&path, &[0u8; 12], 2, 2).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "got {err:?}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identical_content_identical_png_bytes() {
        let dir = std::env::temp_dir().join(format!("imviz-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let px: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let p1 = dir.join("a.png");
        let p2 = dir.join("b.png");
        write_png(&p1, &px, 4, 4).unwrap();
        write_png(&p2, &px, 4, 4).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
