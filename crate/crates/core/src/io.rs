//! Frame, flow and clip file I/O.
//!
//! Clips are directories of `%06d.<ext>` frame files plus a `clip.json`
//! metadata file. HDR frames use the portable float map (`.pfm`), display
//! frames use 8- or 16-bit PNG. Flow fields use the Middlebury `.flo` layout.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::frame::{Colorspace, FrameStack};
use crate::geometry::FlowField;

pub const CLIP_META_FILE: &str = "clip.json";
const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    Int8,
    Int16,
    Float,
}

impl Encoding {
    pub fn extension(self) -> &'static str {
        match self {
            Encoding::Int8 | Encoding::Int16 => "png",
            Encoding::Float => "pfm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub encoding: Encoding,
    pub colorspace: Colorspace,
}

pub fn frame_file_name(index: usize, encoding: Encoding) -> String {
    format!("{index:06}.{}", encoding.extension())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CoreError::io(path, e))?;
    Ok(buf)
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CoreError::io(path, e))
}

/// Reads a PFM file as a `C x H x W` array (C is 1 or 3).
pub fn read_pfm(path: &Path) -> Result<Array3<f32>> {
    let bytes = read_bytes(path)?;
    // Three whitespace-terminated header tokens after the magic.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::format(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(CoreError::format(path, format!("bad PFM magic {other:?}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CoreError::format(path, format!("bad PFM dimension {s:?}")))
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    let scale: f32 = fields[3]
        .parse()
        .map_err(|_| CoreError::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let need = width * height * channels * 4;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| CoreError::format(path, "truncated PFM raster"))?;
    let mut out = Array3::zeros((channels, height, width));
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let c = i % channels;
        let px = i / channels;
        let x = px % width;
        // Rows are stored bottom to top.
        let y = height - 1 - px / width;
        out[[c, y, x]] = v;
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, data: &Array3<f32>) -> Result<()> {
    let (c, h, w) = data.dim();
    let magic = match c {
        3 => "PF",
        1 => "Pf",
        _ => return Err(CoreError::Shape(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut f = create_file(path)?;
    let mut buf = Vec::with_capacity(c * h * w * 4 + 32);
    buf.extend_from_slice(format!("{magic}\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                buf.extend_from_slice(&data[[ch, y, x]].to_le_bytes());
            }
        }
    }
    f.write_all(&buf)
        .and_then(|_| f.flush())
        .map_err(|e| CoreError::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 12 {
        return Err(CoreError::format(path, "truncated .flo header"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(CoreError::format(path, "bad .flo magic"));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(CoreError::format(path, "bad .flo dimensions"));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() < 12 + w * h * 8 {
        return Err(CoreError::format(path, "truncated .flo raster"));
    }
    let mut uv = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = 12 + (y * w + x) * 8;
            uv[[0, y, x]] = f32::from_le_bytes(word(base));
            uv[[1, y, x]] = f32::from_le_bytes(word(base + 4));
        }
    }
    FlowField::new(uv)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = flow.dims();
    let uv = flow.uv();
    let mut buf = Vec::with_capacity(12 + h * w * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            buf.extend_from_slice(&uv[[0, y, x]].to_le_bytes());
            buf.extend_from_slice(&uv[[1, y, x]].to_le_bytes());
        }
    }
    let mut f = create_file(path)?;
    f.write_all(&buf)
        .and_then(|_| f.flush())
        .map_err(|e| CoreError::io(path, e))
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes a 3-channel frame as PNG. Values are clamped to `[0, 1]`.
pub fn write_png_rgb(path: &Path, frame: &Array3<f32>, sixteen_bit: bool) -> Result<()> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(CoreError::Shape(format!("RGB PNG needs 3 channels, got {c}")));
    }
    let codec = |e: image::ImageError| CoreError::Codec {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    ensure_parent(path)?;
    if sixteen_bit {
        let img = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|ch| quantize(frame[[ch, y, x]], 65535.0) as u16))
        });
        img.save(path).map_err(codec)
    } else {
        let img = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|ch| quantize(frame[[ch, y, x]], 255.0) as u8))
        });
        img.save(path).map_err(codec)
    }
}

/// Writes a single-channel `H x W` map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_png_gray(path: &Path, map: &ndarray::Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    ensure_parent(path)?;
    let img = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(map[[y as usize, x as usize]], 255.0) as u8])
    });
    img.save(path).map_err(|e| CoreError::Codec {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    Ok(())
}

/// Reads a PNG as a 3-channel frame normalized by the maximum code value.
pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| CoreError::Codec {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    if sixteen {
        let buf = img.to_rgb16();
        for (x, y, p) in buf.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = p[ch] as f32 / 65535.0;
            }
        }
    } else {
        let buf = img.to_rgb8();
        for (x, y, p) in buf.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = p[ch] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Reads one frame file, returning the frame and whether it was a float map.
pub fn read_frame(path: &Path) -> Result<(Array3<f32>, bool)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => {
            let a = read_pfm(path)?;
            let a = if a.dim().0 == 1 {
                let (_, h, w) = a.dim();
                a.broadcast((3, h, w)).expect("broadcast gray").to_owned()
            } else {
                a
            };
            Ok((a, true))
        }
        Some("png") => Ok((read_png(path)?, false)),
        _ => Err(CoreError::format(path, "unsupported frame format")),
    }
}

fn list_frame_files(dir: &Path) -> Result<Vec<(u64, usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CoreError::io(dir, e))?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "png" && ext != "pfm" {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let index: u64 = stem
            .parse()
            .map_err(|_| CoreError::format(&path, "frame index out of range"))?;
        files.push((index, stem.len(), path));
    }
    files.sort_by(|a, b| a.2.file_name().cmp(&b.2.file_name()));
    Ok(files)
}

pub fn read_clip_meta(dir: &Path) -> Result<Option<ClipMeta>> {
    let path = dir.join(CLIP_META_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| CoreError::format(&path, e.to_string()))
}

/// Loads frames from a clip directory.
///
/// `range` selects positions in the sorted frame list; `None` loads every
/// frame. Integer frames are divided by their maximum code value; float maps
/// pass through unchanged.
pub fn load_clip(dir: &Path, range: Option<Range<usize>>) -> Result<FrameStack> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(CoreError::format(dir, "no frame files"));
    }
    for pair in files.windows(2) {
        let (prev, width, _) = &pair[0];
        let (next, _, _) = &pair[1];
        if *next != prev + 1 {
            return Err(CoreError::MissingFrame(format!("{:0width$}", prev + 1)));
        }
    }
    let range = range.unwrap_or(0..files.len());
    if range.start >= range.end || range.end > files.len() {
        return Err(CoreError::Shape(format!(
            "frame range {range:?} outside clip of {} frames",
            files.len()
        )));
    }
    let meta = read_clip_meta(dir)?;
    let mut frames = Vec::with_capacity(range.len());
    let mut any_float = false;
    for (_, _, path) in &files[range] {
        let (frame, is_float) = read_frame(path)?;
        if let Some(first) = frames.first() {
            let first: &Array3<f32> = first;
            if first.dim() != frame.dim() {
                return Err(CoreError::Shape(format!(
                    "mixed resolutions: {} is {:?}, expected {:?}",
                    path.display(),
                    frame.dim(),
                    first.dim()
                )));
            }
        }
        any_float |= is_float;
        frames.push(frame);
    }
    let colorspace = match meta.map(|m| m.colorspace) {
        Some(cs) => cs,
        None if any_float => Colorspace::LinearHdr,
        None => Colorspace::DisplayClamped,
    };
    let colorspace = if colorspace == Colorspace::DisplayClamped
        && frames.iter().any(|f| f.iter().any(|&v| v > 1.0))
    {
        Colorspace::LinearHdr
    } else {
        colorspace
    };
    FrameStack::from_frames(&frames, colorspace)
}

/// Writes a clip as `%06d.<ext>` frames plus `clip.json`.
///
/// Integer encodings clamp to `[0, 1]` before quantizing.
pub fn save_clip(stack: &FrameStack, dir: &Path, encoding: Encoding) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (t, frame) in stack.frames().enumerate() {
        let path = dir.join(frame_file_name(t, encoding));
        let frame = frame.to_owned();
        match encoding {
            Encoding::Float => write_pfm(&path, &frame)?,
            Encoding::Int8 => write_png_rgb(&path, &frame, false)?,
            Encoding::Int16 => write_png_rgb(&path, &frame, true)?,
        }
    }
    let (h, w) = stack.frame_dims();
    let colorspace = match encoding {
        Encoding::Float => stack.colorspace(),
        _ => Colorspace::DisplayClamped,
    };
    let meta = ClipMeta {
        frames: stack.len(),
        height: h,
        width: w,
        encoding,
        colorspace,
    };
    let path = dir.join(CLIP_META_FILE);
    let mut f = create_file(&path)?;
    let text = serde_json::to_string_pretty(&meta).expect("clip meta serializes");
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .and_then(|_| f.flush())
        .map_err(|e| CoreError::io(&path, e))
}

/// Stacks single-channel maps into a `T x 1 x H x W` array; used by tooling.
pub fn stack_maps(maps: &[ndarray::Array2<f32>]) -> Array4<f32> {
    let (h, w) = maps[0].dim();
    let mut out = Array4::zeros((maps.len(), 1, h, w));
    for (t, m) in maps.iter().enumerate() {
        out.index_axis_mut(Axis(0), t)
            .index_axis_mut(Axis(0), 0)
            .assign(m);
    }
    out
}
