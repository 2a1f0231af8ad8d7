//! File I/O: atomic artifact writes, image ingestion, mask export,
//! annotation loading, dataset manifests and contour overlays.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::ContourParams;
use crate::image::ImageTensor;
use crate::metrics::AnnotationMask;
use crate::raster::MaskField;

/// Magic prefix of the lossless float mask dump.
pub const MASK_DUMP_MAGIC: &[u8; 8] = b"ECMASKF8";

/// Write atomically: temp file in the target directory, then rename.
/// Partial artifacts never persist after a failure.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    use std::io::Write;
    tmp.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path.display().to_string(), e.error))?;
    Ok(())
}

/// Load an image and normalize its geometry: scale the shorter side to
/// `resolution`, then center-crop square. Images already at the target
/// size pass through untouched.
pub fn load_image_normalized(path: &Path, resolution: usize) -> Result<ImageTensor> {
    let img = ImageTensor::load(path)?;
    if img.height() == resolution && img.width() == resolution {
        return Ok(img);
    }
    let decoded = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width(), decoded.height());
    let short = w.min(h);
    let scale = resolution as f64 / short as f64;
    let nw = ((w as f64 * scale).round() as u32).max(resolution as u32);
    let nh = ((h as f64 * scale).round() as u32).max(resolution as u32);
    let resized = decoded.resize_exact(nw, nh, image::imageops::FilterType::Triangle);
    let x0 = (nw - resolution as u32) / 2;
    let y0 = (nh - resolution as u32) / 2;
    let cropped = resized.crop_imm(x0, y0, resolution as u32, resolution as u32);
    match cropped {
        image::DynamicImage::ImageLuma8(g) => {
            let values = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Ok(ImageTensor::from_parts(values, resolution, resolution, 1))
        }
        other => {
            let rgb = other.to_rgb8();
            let values = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Ok(ImageTensor::from_parts(values, resolution, resolution, 3))
        }
    }
}

/// Encode a mask as 8-bit grayscale PNG, `value = round(255·m)`.
pub fn mask_png_bytes(mask: &MaskField) -> Result<Vec<u8>> {
    let img = ImageTensor::from_parts(
        mask.values().to_vec(),
        mask.height(),
        mask.width(),
        1,
    );
    img.to_png_bytes()
}

/// Lossless dump: 16-byte header (magic, H, W as u32 LE) followed by
/// row-major f64 LE values.
pub fn mask_dump_bytes(mask: &MaskField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + mask.values().len() * 8);
    out.extend_from_slice(MASK_DUMP_MAGIC);
    out.extend_from_slice(&(mask.height() as u32).to_le_bytes());
    out.extend_from_slice(&(mask.width() as u32).to_le_bytes());
    for v in mask.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn mask_from_dump(bytes: &[u8]) -> Result<MaskField> {
    let bad = |m: &str| Error::Config(format!("mask dump: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MASK_DUMP_MAGIC {
        return Err(bad("missing magic header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * 8 {
        return Err(bad("payload size mismatch"));
    }
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(MaskField::new(values, h, w))
}

/// Load a ground-truth annotation. PNG files binarize at 128; any other
/// extension is read as a 4-number text sidecar `x0 y0 x1 y1` (pixel
/// coordinates, half-open) describing a filled box.
pub fn load_annotation(path: &Path, height: usize, width: usize) -> Result<AnnotationMask> {
    let is_png = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    if is_png {
        let img = ImageTensor::load(path)?;
        if img.height() != height || img.width() != width {
            return Err(Error::ShapeMismatch {
                what: "annotation",
                got: format!("{}x{}", img.height(), img.width()),
                expected: format!("{height}x{width}"),
            });
        }
        let values = (0..height * width)
            .map(|i| img.luminance(i / width, i % width) >= 128.0 / 255.0)
            .collect();
        AnnotationMask::new(values, height, width)
    } else {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let nums: Vec<isize> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<isize>()
                    .map_err(|e| Error::Config(format!("{}: bad box value `{t}`: {e}", path.display())))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(Error::Config(format!(
                "{}: box sidecar needs 4 numbers, got {}",
                path.display(),
                nums.len()
            )));
        }
        let (x0, y0, x1, y1) = (nums[0], nums[1], nums[2], nums[3]);
        let values = (0..height * width)
            .map(|i| {
                let (row, col) = ((i / width) as isize, (i % width) as isize);
                col >= x0 && col < x1 && row >= y0 && row < y1
            })
            .collect();
        AnnotationMask::new(values, height, width)
    }
}

/// One `image annotation` pair from a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
}

/// Parse a dataset manifest: one `image_path annotation_path` pair per
/// line, `#` comments and blank lines ignored. Malformed lines report
/// their line number.
pub fn parse_dataset_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (image, annotation) = match (parts.next(), parts.next(), parts.next()) {
            (Some(i), Some(a), None) => (i, a),
            _ => {
                return Err(Error::Config(format!(
                    "{}:{}: expected `image_path annotation_path`",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        entries.push(DatasetEntry {
            image: PathBuf::from(image),
            annotation: PathBuf::from(annotation),
        });
    }
    Ok(entries)
}

fn stamp(rgb: &mut [f64], height: usize, width: usize, x: f64, y: f64, color: [f64; 3]) {
    // 2 px pen: the 2×2 pixel block nearest the sample point
    let col = ((x + 1.0) * 0.5 * width as f64 - 0.5).round() as isize;
    let row = ((y + 1.0) * 0.5 * height as f64 - 0.5).round() as isize;
    for di in 0..2isize {
        for dj in 0..2isize {
            let (r, c) = (row + di, col + dj);
            if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                let base = (r as usize * width + c as usize) * 3;
                rgb[base..base + 3].copy_from_slice(&color);
            }
        }
    }
}

fn draw_contour(
    rgb: &mut [f64],
    height: usize,
    width: usize,
    contour: &ContourParams,
    color: [f64; 3],
) {
    const SAMPLES: usize = 720;
    let point = |i: usize| {
        let theta = std::f64::consts::TAU * (i % SAMPLES) as f64 / SAMPLES as f64;
        let r = contour.radius_at(theta);
        (
            contour.center[0] + r * theta.cos(),
            contour.center[1] + r * theta.sin(),
        )
    };
    for i in 0..SAMPLES {
        let (x0, y0) = point(i);
        let (x1, y1) = point(i + 1);
        let px = ((x1 - x0) * 0.5 * width as f64).hypot((y1 - y0) * 0.5 * height as f64);
        let steps = px.ceil().max(1.0) as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            stamp(
                rgb,
                height,
                width,
                x0 + f * (x1 - x0),
                y0 + f * (y1 - y0),
                color,
            );
        }
    }
}

/// Render the input with the initial contours in red and the optimized
/// contours in blue, polylines sampled at 720 angles with a 2 px pen.
pub fn contour_overlay(
    x: &ImageTensor,
    initial: &[ContourParams],
    finals: &[ContourParams],
) -> ImageTensor {
    let (h, w) = (x.height(), x.width());
    let mut rgb = vec![0.0; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * 3;
            if x.channels() == 1 {
                let v = x.get(i, j, 0);
                rgb[base..base + 3].copy_from_slice(&[v, v, v]);
            } else {
                for c in 0..3 {
                    rgb[base + c] = x.get(i, j, c);
                }
            }
        }
    }
    for contour in initial {
        draw_contour(&mut rgb, h, w, contour, [1.0, 0.0, 0.0]);
    }
    for contour in finals {
        draw_contour(&mut rgb, h, w, contour, [0.0, 0.0, 1.0]);
    }
    ImageTensor::from_parts(rgb, h, w, 3)
}
