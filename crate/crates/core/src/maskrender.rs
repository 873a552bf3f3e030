//! De-stylized binary text masks.
//!
//! A transcript is rendered on a blank canvas in a standard font at the
//! largest size that fits its box, cropped to the inked area, stretched onto
//! the box with nearest-neighbour sampling and thresholded. The result depends
//! only on the transcript and the box, never on source pixels.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ab_glyph::{Font, FontArc, PxScale, ScaleFont};
use font8x8::UnicodeFonts;
use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{Box, ImageSize};

pub const MAX_FONT_SIZE: u32 = 512;
pub const FONTS_ENV: &str = "TAKIT_FONTS";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("transcript is empty")]
    EmptyText,
    #[error("rendered text has no ink")]
    NoInk,
    #[error("box lies outside the image")]
    OutsideImage,
    #[error("font error: {0}")]
    Font(String),
    #[error("mask data does not match {width}x{height}")]
    BadRle { width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FontId {
    Latin,
    Cjk,
}

fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{2E80}'..='\u{2FDF}'     // radicals
        | '\u{3000}'..='\u{303F}'   // CJK symbols and punctuation
        | '\u{3400}'..='\u{4DBF}'   // extension A
        | '\u{4E00}'..='\u{9FFF}'   // unified ideographs
        | '\u{F900}'..='\u{FAFF}'   // compatibility ideographs
        | '\u{FE30}'..='\u{FE4F}'   // compatibility forms
        | '\u{FF00}'..='\u{FFEF}'   // half/fullwidth forms
        | '\u{20000}'..='\u{2FA1F}')
}

/// CJK font as soon as any code point is CJK.
pub fn select_font(text: &str) -> FontId {
    if text.chars().any(is_cjk) {
        FontId::Cjk
    } else {
        FontId::Latin
    }
}

/// Grayscale coverage in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Coverage {
    fn new(width: u32, height: u32) -> Self {
        Coverage {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// `(x0, y0, x1, y1)` of pixels with nonzero coverage, exclusive end.
    pub fn ink_bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) > 0.0 {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        b
    }
}

pub trait GlyphRasterizer: Send + Sync {
    /// Renders `text` on one line at pixel size `size`.
    fn rasterize(&self, text: &str, font: FontId, size: u32) -> Coverage;

    /// Width and height of the inked area at `size`; `None` without ink.
    fn measure(&self, text: &str, font: FontId, size: u32) -> Option<(u32, u32)> {
        self.rasterize(text, font, size)
            .ink_bounds()
            .map(|(x0, y0, x1, y1)| (x1 - x0, y1 - y0))
    }
}

/// Solid block used for characters the bitmap font lacks (CJK ideographs).
const FALLBACK_GLYPH: [u8; 8] = [0x00, 0x7E, 0x7E, 0x7E, 0x7E, 0x7E, 0x7E, 0x00];

fn bitmap_glyph(c: char) -> Option<[u8; 8]> {
    if c.is_whitespace() {
        return None;
    }
    let found = font8x8::BASIC_FONTS
        .get(c)
        .or_else(|| font8x8::LATIN_FONTS.get(c))
        .or_else(|| font8x8::GREEK_FONTS.get(c))
        .or_else(|| font8x8::BOX_FONTS.get(c))
        .or_else(|| font8x8::BLOCK_FONTS.get(c))
        .or_else(|| font8x8::HIRAGANA_FONTS.get(c))
        .or_else(|| font8x8::MISC_FONTS.get(c));
    match found {
        Some(g) if g.iter().any(|&r| r != 0) => Some(g),
        _ => Some(FALLBACK_GLYPH),
    }
}

/// Embedded 8x8 bitmap font, box-filtered to the requested size. Each glyph
/// occupies a `size x size` cell. Output is cropped to the inked extent, which
/// is `ceil(size * extent_in_cells)` in each axis and therefore monotone in
/// `size`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BitmapRasterizer;

impl BitmapRasterizer {
    /// Inked extent in glyph-cell units: `(x0, y0, x1, y1)`.
    fn extent(glyphs: &[Option<[u8; 8]>]) -> Option<(f64, f64, f64, f64)> {
        let mut e: Option<(f64, f64, f64, f64)> = None;
        for (i, g) in glyphs.iter().enumerate() {
            let Some(g) = g else { continue };
            for (row, bits) in g.iter().enumerate() {
                for col in 0..8 {
                    if bits & (1 << col) == 0 {
                        continue;
                    }
                    let x0 = i as f64 + col as f64 / 8.0;
                    let y0 = row as f64 / 8.0;
                    let (x1, y1) = (x0 + 0.125, y0 + 0.125);
                    e = Some(match e {
                        None => (x0, y0, x1, y1),
                        Some((a, b, c, d)) => (a.min(x0), b.min(y0), c.max(x1), d.max(y1)),
                    });
                }
            }
        }
        e
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

impl GlyphRasterizer for BitmapRasterizer {
    fn rasterize(&self, text: &str, _font: FontId, size: u32) -> Coverage {
        let glyphs: Vec<Option<[u8; 8]>> = text.chars().map(bitmap_glyph).collect();
        let Some((ex0, ey0, ex1, ey1)) = Self::extent(&glyphs) else {
            return Coverage::new(0, 0);
        };
        let s = size as f64;
        let (ox, oy) = (ex0 * s, ey0 * s);
        let w = ((ex1 - ex0) * s).ceil() as u32;
        let h = ((ey1 - ey0) * s).ceil() as u32;
        let mut cov = Coverage::new(w, h);
        let cell = s / 8.0;
        for (i, g) in glyphs.iter().enumerate() {
            let Some(g) = g else { continue };
            for (row, bits) in g.iter().enumerate() {
                for col in 0..8 {
                    if bits & (1 << col) == 0 {
                        continue;
                    }
                    let cx0 = i as f64 * s + col as f64 * cell - ox;
                    let cy0 = row as f64 * cell - oy;
                    let (cx1, cy1) = (cx0 + cell, cy0 + cell);
                    let px0 = cx0.floor().max(0.0) as u32;
                    let py0 = cy0.floor().max(0.0) as u32;
                    let px1 = (cx1.ceil() as u32).min(w);
                    let py1 = (cy1.ceil() as u32).min(h);
                    for py in py0..py1 {
                        let fy = overlap(py as f64, py as f64 + 1.0, cy0, cy1);
                        for px in px0..px1 {
                            let fx = overlap(px as f64, px as f64 + 1.0, cx0, cx1);
                            let v = &mut cov.data[py as usize * w as usize + px as usize];
                            *v = (*v + (fx * fy) as f32).min(1.0);
                        }
                    }
                }
            }
        }
        cov
    }

    fn measure(&self, text: &str, _font: FontId, size: u32) -> Option<(u32, u32)> {
        let glyphs: Vec<Option<[u8; 8]>> = text.chars().map(bitmap_glyph).collect();
        let (x0, y0, x1, y1) = Self::extent(&glyphs)?;
        let s = size as f64;
        Some((((x1 - x0) * s).ceil() as u32, ((y1 - y0) * s).ceil() as u32))
    }
}

/// Outline fonts through `ab_glyph`.
#[derive(Clone)]
pub struct TtfRasterizer {
    latin: FontArc,
    cjk: FontArc,
}

#[derive(Debug, Deserialize)]
struct FontsConfig {
    latin: PathBuf,
    cjk: PathBuf,
}

fn load_font(path: &Path) -> Result<FontArc, RenderError> {
    let data = std::fs::read(path).map_err(|e| RenderError::Font(format!("{}: {e}", path.display())))?;
    FontArc::try_from_vec(data).map_err(|e| RenderError::Font(format!("{}: {e}", path.display())))
}

const LATIN_CANDIDATES: &[&str] = &["Ubuntu-Regular.ttf", "latin.ttf", "latin.otf"];
const CJK_CANDIDATES: &[&str] = &["NotoSansSC-Regular.otf", "NotoSansSC-Regular.ttf", "cjk.ttf", "cjk.otf"];

impl TtfRasterizer {
    pub fn from_paths(latin: &Path, cjk: &Path) -> Result<Self, RenderError> {
        Ok(TtfRasterizer {
            latin: load_font(latin)?,
            cjk: load_font(cjk)?,
        })
    }

    /// Reads `{"latin": path, "cjk": path}`; relative paths resolve against
    /// the config file's directory.
    pub fn from_config(config: &Path) -> Result<Self, RenderError> {
        let text =
            std::fs::read_to_string(config).map_err(|e| RenderError::Font(format!("{}: {e}", config.display())))?;
        let cfg: FontsConfig =
            serde_json::from_str(&text).map_err(|e| RenderError::Font(format!("{}: {e}", config.display())))?;
        let base = config.parent().unwrap_or(Path::new("."));
        Self::from_paths(&base.join(cfg.latin), &base.join(cfg.cjk))
    }

    /// A font directory holds either `fonts.json` or files with well-known
    /// names (`Ubuntu-Regular.ttf`, `NotoSansSC-Regular.otf`, `latin.ttf`,
    /// `cjk.ttf`, ...).
    pub fn from_dir(dir: &Path) -> Result<Self, RenderError> {
        let cfg = dir.join("fonts.json");
        if cfg.is_file() {
            return Self::from_config(&cfg);
        }
        let find = |names: &[&str]| {
            names
                .iter()
                .map(|n| dir.join(n))
                .find(|p| p.is_file())
                .ok_or_else(|| RenderError::Font(format!("no font among {names:?} in {}", dir.display())))
        };
        Self::from_paths(&find(LATIN_CANDIDATES)?, &find(CJK_CANDIDATES)?)
    }

    fn font(&self, id: FontId) -> &FontArc {
        match id {
            FontId::Latin => &self.latin,
            FontId::Cjk => &self.cjk,
        }
    }

    fn layout(&self, text: &str, font: FontId, size: u32) -> Vec<ab_glyph::OutlinedGlyph> {
        let f = self.font(font);
        let scaled = f.as_scaled(PxScale::from(size as f32));
        let mut caret = 0.0f32;
        let mut prev = None;
        let mut out = Vec::new();
        for c in text.chars() {
            let id = scaled.glyph_id(c);
            if let Some(p) = prev {
                caret += scaled.kern(p, id);
            }
            let g = id.with_scale_and_position(PxScale::from(size as f32), ab_glyph::point(caret, scaled.ascent()));
            caret += scaled.h_advance(id);
            prev = Some(id);
            if c.is_whitespace() {
                continue;
            }
            if let Some(o) = f.outline_glyph(g) {
                out.push(o);
            }
        }
        out
    }
}

impl GlyphRasterizer for TtfRasterizer {
    fn rasterize(&self, text: &str, font: FontId, size: u32) -> Coverage {
        let glyphs = self.layout(text, font, size);
        let Some((x0, y0, x1, y1)) = union_bounds(&glyphs) else {
            return Coverage::new(0, 0);
        };
        let (w, h) = ((x1 - x0) as u32, (y1 - y0) as u32);
        let mut cov = Coverage::new(w, h);
        for g in &glyphs {
            let b = g.px_bounds();
            let (gx, gy) = ((b.min.x as i64 - x0) as u32, (b.min.y as i64 - y0) as u32);
            g.draw(|x, y, c| {
                let (px, py) = (gx + x, gy + y);
                if px < w && py < h {
                    let v = &mut cov.data[py as usize * w as usize + px as usize];
                    *v = (*v + c).min(1.0);
                }
            });
        }
        cov
    }

    fn measure(&self, text: &str, font: FontId, size: u32) -> Option<(u32, u32)> {
        let (x0, y0, x1, y1) = union_bounds(&self.layout(text, font, size))?;
        Some(((x1 - x0) as u32, (y1 - y0) as u32))
    }
}

fn union_bounds(glyphs: &[ab_glyph::OutlinedGlyph]) -> Option<(i64, i64, i64, i64)> {
    glyphs.iter().fold(None, |acc, g| {
        let b = g.px_bounds();
        let r = (b.min.x as i64, b.min.y as i64, b.max.x as i64, b.max.y as i64);
        if r.2 <= r.0 || r.3 <= r.1 {
            return acc;
        }
        Some(match acc {
            None => r,
            Some(a) => (a.0.min(r.0), a.1.min(r.1), a.2.max(r.2), a.3.max(r.3)),
        })
    })
}

/// The default rasterizer: outline fonts from `TAKIT_FONTS` when that is set,
/// the embedded bitmap font otherwise.
pub fn default_rasterizer() -> Result<Arc<dyn GlyphRasterizer>, RenderError> {
    match std::env::var_os(FONTS_ENV) {
        Some(dir) if !dir.is_empty() => Ok(Arc::new(TtfRasterizer::from_dir(Path::new(&dir))?)),
        _ => Ok(Arc::new(BitmapRasterizer)),
    }
}

/// Pixel footprint of a box: `(x, y, w, h)` after rounding edges, at least
/// one pixel and inside the image.
pub fn pixel_rect(b: &Box, image: ImageSize) -> (u32, u32, u32, u32) {
    let (iw, ih) = (image.width as i64, image.height as i64);
    let span = |lo: f64, hi: f64, limit: i64| {
        let a = (lo.round() as i64).clamp(0, limit - 1);
        let z = (hi.round() as i64).clamp(a + 1, limit);
        (a as u32, (z - a) as u32)
    };
    let (x, w) = span(b.x_min(), b.x_max(), iw);
    let (y, h) = span(b.y_min(), b.y_max(), ih);
    (x, y, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitResult {
    pub size: u32,
    /// Even size 1 does not fit the target.
    pub overflow: bool,
}

/// Largest size in `[1, MAX_FONT_SIZE]` whose inked area fits `target`.
pub fn fit_font_size(text: &str, target: (u32, u32), r: &dyn GlyphRasterizer) -> Result<FitResult, RenderError> {
    if text.trim().is_empty() {
        return Err(RenderError::EmptyText);
    }
    let font = select_font(text);
    let fits = |s: u32| match r.measure(text, font, s) {
        Some((w, h)) => w <= target.0 && h <= target.1,
        None => true,
    };
    if !fits(1) {
        return Ok(FitResult {
            size: 1,
            overflow: true,
        });
    }
    let (mut lo, mut hi) = (1u32, MAX_FONT_SIZE);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(FitResult {
        size: lo,
        overflow: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(image: ImageSize) -> Self {
        BinaryMask {
            width: image.width,
            height: image.height,
            data: vec![0; image.width as usize * image.height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Alternating run lengths over the row-major raster, starting with a
    /// (possibly empty) run of zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let mut rest = &self.data[..];
        let mut cur = 0u8;
        while !rest.is_empty() {
            let run = if cur == 0 {
                first_nonzero(rest)
            } else {
                rest.iter().position(|&v| v == 0).unwrap_or(rest.len())
            };
            out.push(run as u32);
            rest = &rest[run..];
            cur ^= 1;
        }
        if out.is_empty() {
            out.push(0);
        }
        out
    }

    pub fn from_rle(width: u32, height: u32, rle: &[u32]) -> Result<Self, RenderError> {
        let total = width as usize * height as usize;
        let mut data = Vec::with_capacity(total);
        for (i, &run) in rle.iter().enumerate() {
            if data.len() + run as usize > total {
                return Err(RenderError::BadRle { width, height });
            }
            data.extend(std::iter::repeat_n((i % 2) as u8, run as usize));
        }
        if data.len() != total {
            return Err(RenderError::BadRle { width, height });
        }
        Ok(BinaryMask { width, height, data })
    }

    /// Binary PGM (P5), foreground white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
        out
    }

    /// Every foreground pixel lies within the box grown by `slack` pixels.
    pub fn confined_to(&self, b: &Box, slack: f64) -> bool {
        let (x0, y0) = (b.x_min().floor() - slack, b.y_min().floor() - slack);
        let (x1, y1) = (b.x_max().ceil() + slack, b.y_max().ceil() + slack);
        let inside = |v: usize, lo: f64, hi: f64| v as f64 >= lo && (v + 1) as f64 <= hi;
        self.data
            .chunks_exact(self.width.max(1) as usize)
            .enumerate()
            .all(|(y, row)| {
                let first = first_nonzero(row);
                if first == row.len() {
                    return true;
                }
                let last = row.iter().rposition(|&v| v != 0).unwrap_or(first);
                inside(y, y0, y1) && inside(first, x0, x1) && inside(last, x0, x1)
            })
    }
}

/// Index of the first nonzero byte, or `s.len()`.
fn first_nonzero(s: &[u8]) -> usize {
    let mut i = 0;
    for c in s.chunks_exact(16) {
        if u128::from_ne_bytes(c.try_into().expect("16 bytes")) != 0 {
            break;
        }
        i += 16;
    }
    i + s[i..].iter().position(|&v| v != 0).unwrap_or(s.len() - i)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderOutcome {
    pub mask: BinaryMask,
    pub fit: FitResult,
}

pub fn render_destylized(
    text: &str,
    b: &Box,
    image: ImageSize,
    r: &dyn GlyphRasterizer,
) -> Result<RenderOutcome, RenderError> {
    if text.trim().is_empty() {
        return Err(RenderError::EmptyText);
    }
    if b.x_min() >= image.width as f64 || b.y_min() >= image.height as f64 || b.x_max() <= 0.0 || b.y_max() <= 0.0 {
        return Err(RenderError::OutsideImage);
    }
    let (bx, by, tw, th) = pixel_rect(b, image);
    let fit = fit_font_size(text, (tw, th), r)?;
    let cov = r.rasterize(text, select_font(text), fit.size);
    let (cx0, cy0, cx1, cy1) = cov.ink_bounds().ok_or(RenderError::NoInk)?;
    let (cw, ch) = (cx1 - cx0, cy1 - cy0);

    // nearest-neighbour stretch of the tight crop onto the box
    let src_x: Vec<u32> = (0..tw)
        .map(|x| cx0 + ((x as u64 * cw as u64 + cw as u64 / 2) / tw as u64).min(cw as u64 - 1) as u32)
        .collect();
    let src_y: Vec<u32> = (0..th)
        .map(|y| cy0 + ((y as u64 * ch as u64 + ch as u64 / 2) / th as u64).min(ch as u64 - 1) as u32)
        .collect();
    let mut resized = vec![0f32; tw as usize * th as usize];
    for (y, &sy) in src_y.iter().enumerate() {
        for (x, &sx) in src_x.iter().enumerate() {
            resized[y * tw as usize + x] = cov.get(sx, sy);
        }
    }
    let mut peak = resized.iter().cloned().fold(0f32, f32::max);
    if peak == 0.0 {
        // only reachable when the crop is larger than the box (overflow):
        // fall back to max-pooling so the mask keeps its ink
        for y in 0..th {
            for x in 0..tw {
                let (sx0, sx1) = (cx0 + x * cw / tw, cx0 + ((x + 1) * cw).div_ceil(tw));
                let (sy0, sy1) = (cy0 + y * ch / th, cy0 + ((y + 1) * ch).div_ceil(th));
                let mut m = 0f32;
                for sy in sy0..sy1 {
                    for sx in sx0..sx1 {
                        m = m.max(cov.get(sx, sy));
                    }
                }
                resized[(y * tw + x) as usize] = m;
            }
        }
        peak = resized.iter().cloned().fold(0f32, f32::max);
    }
    let thr = 0.5 * peak;
    let mut mask = BinaryMask::zeros(image);
    for y in 0..th {
        for x in 0..tw {
            if resized[(y * tw + x) as usize] >= thr {
                mask.data[((by + y) * image.width + bx + x) as usize] = 1;
            }
        }
    }
    Ok(RenderOutcome { mask, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> Box {
        Box::new(a, b, c, d).unwrap()
    }

    #[test]
    fn font_selection() {
        assert_eq!(select_font("hello"), FontId::Latin);
        assert_eq!(select_font("入库"), FontId::Cjk);
        assert_eq!(select_font("abc入"), FontId::Cjk);
        assert_eq!(select_font("价格："), FontId::Cjk);
        assert_eq!(select_font("café"), FontId::Latin);
    }

    #[test]
    fn bitmap_measure_agrees_with_raster() {
        let r = BitmapRasterizer;
        for text in ["A", "hello", "入库", "a b", " x ", "|", ".", "KS-SYSTEM"] {
            for s in [1, 2, 3, 5, 7, 8, 9, 13, 16, 31, 64] {
                let cov = r.rasterize(text, select_font(text), s);
                let (x0, y0, x1, y1) = cov.ink_bounds().unwrap();
                assert_eq!((x0, y0), (0, 0));
                assert_eq!(Some((x1, y1)), r.measure(text, select_font(text), s), "{text} {s}");
                assert_eq!((cov.width, cov.height), (x1, y1));
            }
        }
    }

    #[test]
    fn whitespace_has_no_ink() {
        assert_eq!(BitmapRasterizer.measure("   ", FontId::Latin, 10), None);
        assert!(matches!(
            render_destylized(
                " ",
                &bx(0., 0., 5., 5.),
                ImageSize::new(10, 10).unwrap(),
                &BitmapRasterizer
            ),
            Err(RenderError::EmptyText)
        ));
        assert!(matches!(
            fit_font_size("", (5, 5), &BitmapRasterizer),
            Err(RenderError::EmptyText)
        ));
    }

    #[test]
    fn fitted_size_is_maximal() {
        let r = BitmapRasterizer;
        for (text, target) in [
            ("hello", (100, 20)),
            ("入库", (40, 40)),
            ("I", (3, 50)),
            ("KS-SYSTEM", (77, 13)),
        ] {
            let fit = fit_font_size(text, target, &r).unwrap();
            assert!(!fit.overflow);
            let (w, h) = r.measure(text, select_font(text), fit.size).unwrap();
            assert!(w <= target.0 && h <= target.1);
            if fit.size < MAX_FONT_SIZE {
                let (w, h) = r.measure(text, select_font(text), fit.size + 1).unwrap();
                assert!(w > target.0 || h > target.1, "{text}");
            }
        }
    }

    #[test]
    fn huge_box_caps_size() {
        let fit = fit_font_size("x", (100_000, 100_000), &BitmapRasterizer).unwrap();
        assert_eq!(
            fit,
            FitResult {
                size: MAX_FONT_SIZE,
                overflow: false
            }
        );
    }

    #[test]
    fn tiny_box_overflows() {
        let fit = fit_font_size("a very long line of text", (2, 1), &BitmapRasterizer).unwrap();
        assert_eq!(
            fit,
            FitResult {
                size: 1,
                overflow: true
            }
        );
        let img = ImageSize::new(20, 20).unwrap();
        let b = bx(3., 3., 5., 4.);
        let out = render_destylized("a very long line of text", &b, img, &BitmapRasterizer).unwrap();
        assert!(out.mask.count() >= 1);
        assert!(out.mask.confined_to(&b, 1.0));
    }

    #[test]
    fn render_places_ink_inside_box() {
        let img = ImageSize::new(200, 120).unwrap();
        let b = bx(30.4, 40.6, 150.2, 70.9);
        let out = render_destylized("Hello World", &b, img, &BitmapRasterizer).unwrap();
        assert!(out.mask.count() > 0);
        assert!(out.mask.confined_to(&b, 1.0));
        assert_eq!(out.mask.data.len(), 200 * 120);
        // outside rows are blank
        assert!((0..200).all(|x| !out.mask.get(x, 0) && !out.mask.get(x, 119)));
        let again = render_destylized("Hello World", &b, img, &BitmapRasterizer).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn rle_round_trip_and_pgm() {
        let img = ImageSize::new(64, 32).unwrap();
        let out = render_destylized("入库 A", &bx(2., 2., 60., 30.), img, &BitmapRasterizer).unwrap();
        let rle = out.mask.to_rle();
        assert_eq!(rle.iter().map(|&r| r as usize).sum::<usize>(), 64 * 32);
        assert_eq!(BinaryMask::from_rle(64, 32, &rle).unwrap(), out.mask);
        assert!(BinaryMask::from_rle(64, 32, &[5]).is_err());
        assert!(BinaryMask::from_rle(2, 2, &[3, 3]).is_err());
        let starts_fg = BinaryMask {
            width: 2,
            height: 1,
            data: vec![1, 1],
        };
        assert_eq!(starts_fg.to_rle(), vec![0, 2]);
        let pgm = out.mask.to_pgm();
        assert!(pgm.starts_with(b"P5\n64 32\n255\n"));
        assert_eq!(pgm.len(), "P5\n64 32\n255\n".len() + 64 * 32);
    }

    #[test]
    fn pixel_rect_stays_in_image() {
        let img = ImageSize::new(10, 10).unwrap();
        assert_eq!(pixel_rect(&bx(9.7, 9.7, 10., 10.), img), (9, 9, 1, 1));
        assert_eq!(pixel_rect(&bx(0.2, 0.1, 0.3, 0.4), img), (0, 0, 1, 1));
        assert_eq!(pixel_rect(&bx(1.5, 2.4, 7.5, 8.6), img), (2, 2, 6, 7));
    }

    fn system_font() -> Option<PathBuf> {
        let p = PathBuf::from("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf");
        p.is_file().then_some(p)
    }

    #[test]
    fn ttf_rasterizer_fits_and_renders() {
        let Some(font) = system_font() else {
            eprintln!("no system font, skipping");
            return;
        };
        let r = TtfRasterizer::from_paths(&font, &font).unwrap();
        let img = ImageSize::new(300, 80).unwrap();
        let b = bx(10., 10., 290., 70.);
        let out = render_destylized("Text anchor", &b, img, &r).unwrap();
        assert!(out.mask.count() > 100);
        assert!(out.mask.confined_to(&b, 1.0));
        let (w, h) = r.measure("Text anchor", FontId::Latin, out.fit.size).unwrap();
        assert!(w <= 280 && h <= 60);
        let mut prev = (0, 0);
        for s in 1..80 {
            let m = r.measure("Text anchor", FontId::Latin, s).unwrap();
            assert!(m.0 + 1 >= prev.0 && m.1 + 1 >= prev.1, "size {s}: {m:?} < {prev:?}");
            prev = m;
        }
    }

    #[test]
    fn font_dir_resolution() {
        let dir = tempfile::tempdir().unwrap();
        assert!(TtfRasterizer::from_dir(dir.path()).is_err());
        let Some(font) = system_font() else { return };
        std::fs::write(
            dir.path().join("fonts.json"),
            format!("{{\"latin\": {:?}, \"cjk\": {:?}}}", font, font),
        )
        .unwrap();
        assert!(TtfRasterizer::from_dir(dir.path()).is_ok());
    }

    proptest! {
        #[test]
        fn bitmap_measure_is_monotone(text in "[ -~入库]{1,8}", s in 1u32..300) {
            let r = BitmapRasterizer;
            let f = select_font(&text);
            if let (Some(a), Some(b)) = (r.measure(&text, f, s), r.measure(&text, f, s + 1)) {
                prop_assert!(b.0 >= a.0 && b.1 >= a.1);
            }
        }

        #[test]
        fn doubling_box_keeps_fitted_size(text in "[A-Za-z0-9入]{1,6}", w in 4u32..200, h in 4u32..60) {
            let small = fit_font_size(&text, (w, h), &BitmapRasterizer).unwrap();
            let big = fit_font_size(&text, (2 * w, 2 * h), &BitmapRasterizer).unwrap();
            prop_assert!(big.size >= small.size);
        }

        #[test]
        fn masks_confined_and_nonempty(
            text in "[A-Za-z0-9 入库.]{1,10}",
            x in 0.0f64..150.0, y in 0.0f64..80.0, w in 0.3f64..100.0, h in 0.3f64..40.0,
        ) {
            prop_assume!(!text.trim().is_empty());
            let img = ImageSize::new(256, 128).unwrap();
            let b = bx(x, y, (x + w).min(256.0), (y + h).min(128.0));
            let out = render_destylized(&text, &b, img, &BitmapRasterizer).unwrap();
            prop_assert!(out.mask.count() >= 1);
            prop_assert!(out.mask.confined_to(&b, 1.0));
        }
    }
}
