//! Color space conversion and the quantized color-code vocabulary.
//!
//! Colors enter as sRGB, are converted to CIELAB (D65), rescaled so that every
//! channel spans `[0, 255]`, and binned into a 16×16×16 histogram. The bin index
//! is the [`ColorCode`] the model predicts.
//!
//! Metric distances ([`lab_distance`]) are computed between bin centers in
//! native CIELAB units, not in the rescaled space.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bins per channel.
pub const BINS: u16 = 16;
/// Total number of color codes (`BINS³`).
pub const NUM_CODES: usize = 4096;
/// Upper bound on palette length.
pub const MAX_PALETTE_LEN: usize = 5;

const BIN_WIDTH: f64 = 256.0 / BINS as f64;

// sRGB (IEC 61966-2-1) primaries under D65, linear RGB -> XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_390_799_266, 0.357_584_339_384, 0.180_480_788_402],
    [0.212_639_005_872, 0.715_168_678_768, 0.072_192_315_361],
    [0.019_330_818_716, 0.119_194_779_795, 0.950_532_152_250],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_969_941_907, -1.537_383_177_571, -0.498_610_760_293],
    [-0.969_243_636_283, 1.875_967_501_509, 0.041_555_057_407],
    [0.055_630_079_696, -0.203_976_958_889, 1.056_971_514_243],
];
/// Reference white: the XYZ of linear RGB (1, 1, 1).
const WHITE: [f64; 3] = [row_sum(0), row_sum(1), row_sum(2)];

const fn row_sum(i: usize) -> f64 {
    RGB_TO_XYZ[i][0] + RGB_TO_XYZ[i][1] + RGB_TO_XYZ[i][2]
}

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ColorError {
    #[error("invalid color code {0} (must be < 4096)")]
    InvalidCode(u32),
    #[error("invalid hex color {0:?} (expected \"#rrggbb\")")]
    BadHex(String),
    #[error("palette has {0} colors (at most 5 allowed)")]
    PaletteTooLong(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbColor {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl RgbColor {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    /// Lowercase `#rrggbb`.
    pub fn to_hex(self) -> String {
        format!("#{:02x}{:02x}{:02x}", self.r, self.g, self.b)
    }
}

impl FromStr for RgbColor {
    type Err = ColorError;

    /// Accepts `#rrggbb` in either case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ColorError::BadHex(s.to_string());
        let digits = s.strip_prefix('#').ok_or_else(bad)?;
        if digits.len() != 6 || !digits.bytes().all(|c| c.is_ascii_hexdigit()) {
            return Err(bad());
        }
        let channel = |i: usize| u8::from_str_radix(&digits[i..i + 2], 16).map_err(|_| bad());
        Ok(Self::new(channel(0)?, channel(2)?, channel(4)?))
    }
}

impl fmt::Display for RgbColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// CIELAB in native units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    pub fn distance(&self, other: &LabColor) -> f64 {
        let (dl, da, db) = (self.l - other.l, self.a - other.a, self.b - other.b);
        (dl * dl + da * da + db * db).sqrt()
    }
}

/// CIELAB rescaled so each channel spans `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledLab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl ScaledLab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }
}

/// Index of a bin in the 16³ quantized CIELAB histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct ColorCode(u16);

impl ColorCode {
    pub const BLACK: ColorCode = ColorCode(136);
    pub const WHITE: ColorCode = ColorCode(3976);

    pub fn new(code: u32) -> Result<Self, ColorError> {
        if (code as usize) < NUM_CODES {
            Ok(Self(code as u16))
        } else {
            Err(ColorError::InvalidCode(code))
        }
    }

    pub fn from_indices(il: u16, ia: u16, ib: u16) -> Self {
        debug_assert!(il < BINS && ia < BINS && ib < BINS);
        Self(il * BINS * BINS + ia * BINS + ib)
    }

    pub fn get(self) -> u16 {
        self.0
    }

    /// `(iL, ia, ib)` bin indices.
    pub fn indices(self) -> (u16, u16, u16) {
        (self.0 / (BINS * BINS), (self.0 / BINS) % BINS, self.0 % BINS)
    }

    pub fn lightness_bin(self) -> u16 {
        self.indices().0
    }

    pub fn all() -> impl Iterator<Item = ColorCode> {
        (0..NUM_CODES as u16).map(ColorCode)
    }
}

impl TryFrom<u16> for ColorCode {
    type Error = ColorError;
    fn try_from(v: u16) -> Result<Self, Self::Error> {
        ColorCode::new(v as u32)
    }
}

impl From<ColorCode> for u16 {
    fn from(c: ColorCode) -> u16 {
        c.0
    }
}

impl fmt::Display for ColorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteKind {
    Image,
    Graphic,
    Text,
}

impl PaletteKind {
    /// Fixed block order used when laying out sequences.
    pub const ALL: [PaletteKind; 3] = [PaletteKind::Image, PaletteKind::Graphic, PaletteKind::Text];

    pub fn name(self) -> &'static str {
        match self {
            PaletteKind::Image => "image",
            PaletteKind::Graphic => "graphic",
            PaletteKind::Text => "text",
        }
    }

    /// 1-based segment id.
    pub fn segment(self) -> u8 {
        match self {
            PaletteKind::Image => 1,
            PaletteKind::Graphic => 2,
            PaletteKind::Text => 3,
        }
    }
}

/// A typed, lightness-ordered palette of at most five codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub kind: PaletteKind,
    colors: Vec<ColorCode>,
}

impl Palette {
    pub fn new(kind: PaletteKind, colors: Vec<ColorCode>) -> Result<Self, ColorError> {
        Ok(Self { kind, colors: order_palette(colors)? })
    }

    pub fn empty(kind: PaletteKind) -> Self {
        Self { kind, colors: Vec::new() }
    }

    pub fn colors(&self) -> &[ColorCode] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    let v = if c <= 0.003_130_8 { c * 12.92 } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 };
    v * 255.0
}

fn linear_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| std::array::from_fn(|i| srgb_to_linear(i as u8)))
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// sRGB → XYZ (D65) → CIELAB.
pub fn srgb_to_lab(c: RgbColor) -> LabColor {
    let lut = linear_lut();
    let rgb = [lut[c.r as usize], lut[c.g as usize], lut[c.b as usize]];
    let xyz: [f64; 3] = std::array::from_fn(|i| {
        let m = RGB_TO_XYZ[i];
        (m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2]) / WHITE[i]
    });
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    LabColor::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// CIELAB → sRGB with per-channel clamping for out-of-gamut input.
pub fn lab_to_srgb(c: LabColor) -> RgbColor {
    let fy = (c.l + 16.0) / 116.0;
    let fx = fy + c.a / 500.0;
    let fz = fy - c.b / 200.0;
    let xyz = [lab_f_inv(fx) * WHITE[0], lab_f_inv(fy) * WHITE[1], lab_f_inv(fz) * WHITE[2]];
    let ch = |i: usize| {
        let m = XYZ_TO_RGB[i];
        linear_to_srgb(m[0] * xyz[0] + m[1] * xyz[1] + m[2] * xyz[2]).round() as u8
    };
    RgbColor::new(ch(0), ch(1), ch(2))
}

pub fn scale_lab(c: LabColor) -> ScaledLab {
    ScaledLab::new(
        (c.l * 255.0 / 100.0).clamp(0.0, 255.0),
        (c.a + 128.0).clamp(0.0, 255.0),
        (c.b + 128.0).clamp(0.0, 255.0),
    )
}

pub fn unscale_lab(c: ScaledLab) -> LabColor {
    LabColor::new(c.l * 100.0 / 255.0, c.a - 128.0, c.b - 128.0)
}

pub fn quantize(c: ScaledLab) -> ColorCode {
    let idx = |x: f64| ((x.max(0.0) / BIN_WIDTH).floor() as u16).min(BINS - 1);
    ColorCode::from_indices(idx(c.l), idx(c.a), idx(c.b))
}

pub fn bin_center(code: ColorCode) -> ScaledLab {
    let (il, ia, ib) = code.indices();
    let center = |i: u16| (i as f64 + 0.5) * BIN_WIDTH;
    ScaledLab::new(center(il), center(ia), center(ib))
}

pub fn rgb_to_code(c: RgbColor) -> ColorCode {
    quantize(scale_lab(srgb_to_lab(c)))
}

pub fn hex_to_code(hex: &str) -> Result<ColorCode, ColorError> {
    Ok(rgb_to_code(hex.parse()?))
}

/// Sort ascending by lightness bin, ties by full code.
pub fn order_palette(mut colors: Vec<ColorCode>) -> Result<Vec<ColorCode>, ColorError> {
    if colors.len() > MAX_PALETTE_LEN {
        return Err(ColorError::PaletteTooLong(colors.len()));
    }
    colors.sort_by_key(|c| (c.lightness_bin(), c.get()));
    Ok(colors)
}

/// Euclidean distance between bin centers, in native CIELAB units.
pub fn lab_distance(p: ColorCode, q: ColorCode) -> f64 {
    unscale_lab(bin_center(p)).distance(&unscale_lab(bin_center(q)))
}

fn representatives() -> &'static [Option<RgbColor>] {
    static TABLE: OnceLock<Vec<Option<RgbColor>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut best: Vec<Option<(f64, RgbColor)>> = vec![None; NUM_CODES];
        for r in 0..=255u8 {
            for g in 0..=255u8 {
                for b in 0..=255u8 {
                    let rgb = RgbColor::new(r, g, b);
                    let s = scale_lab(srgb_to_lab(rgb));
                    let code = quantize(s);
                    let c = bin_center(code);
                    let d = (s.l - c.l).powi(2) + (s.a - c.a).powi(2) + (s.b - c.b).powi(2);
                    let slot = &mut best[code.get() as usize];
                    if slot.is_none_or(|(bd, _)| d < bd) {
                        *slot = Some((d, rgb));
                    }
                }
            }
        }
        best.into_iter().map(|s| s.map(|(_, rgb)| rgb)).collect()
    })
}

/// The sRGB color closest to the bin center among all sRGB colors that
/// quantize to `code`, or `None` when the bin lies entirely outside the gamut.
///
/// The first call scans the whole 24-bit sRGB cube.
pub fn representative_rgb(code: ColorCode) -> Option<RgbColor> {
    representatives()[code.get() as usize]
}

/// Hex used when emitting a code externally. Always quantizes back to `code`
/// when the bin is reachable from sRGB; otherwise the clamped bin center.
pub fn code_to_hex(code: ColorCode) -> String {
    representative_rgb(code)
        .unwrap_or_else(|| lab_to_srgb(unscale_lab(bin_center(code))))
        .to_hex()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn white_and_black() {
        let w = srgb_to_lab(RgbColor::new(255, 255, 255));
        assert!(close(w.l, 100.0, 1e-3) && close(w.a, 0.0, 1e-3) && close(w.b, 0.0, 1e-3), "{w:?}");
        let k = srgb_to_lab(RgbColor::new(0, 0, 0));
        assert_eq!((k.l, k.a, k.b), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pure_red() {
        let r = srgb_to_lab(RgbColor::new(255, 0, 0));
        assert!(close(r.l, 53.24, 0.01) && close(r.a, 80.09, 0.01) && close(r.b, 67.20, 0.01), "{r:?}");
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_lab(LabColor::new(100.0, 0.0, 0.0)), ScaledLab::new(255.0, 128.0, 128.0));
        assert_eq!(scale_lab(LabColor::new(0.0, 0.0, 0.0)), ScaledLab::new(0.0, 128.0, 128.0));
        let s = scale_lab(LabColor::new(53.24, 80.09, 67.20));
        assert!(close(s.l, 135.762, 1e-9) && close(s.a, 208.09, 1e-9) && close(s.b, 195.20, 1e-9));
        let clamped = scale_lab(LabColor::new(120.0, -300.0, 300.0));
        assert_eq!(clamped, ScaledLab::new(255.0, 0.0, 255.0));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(ScaledLab::new(0.0, 128.0, 128.0)).get(), 136);
        assert_eq!(quantize(ScaledLab::new(255.0, 128.0, 128.0)).get(), 3976);
        let c = quantize(ScaledLab::new(135.76, 208.09, 195.20));
        assert_eq!(c.indices(), (8, 13, 12));
        assert_eq!(c.get(), 2268);
    }

    #[test]
    fn bin_center_examples() {
        assert_eq!(bin_center(ColorCode::new(0).unwrap()), ScaledLab::new(8.0, 8.0, 8.0));
        assert_eq!(bin_center(ColorCode::new(4095).unwrap()), ScaledLab::new(248.0, 248.0, 248.0));
        assert_eq!(bin_center(ColorCode::new(2268).unwrap()), ScaledLab::new(136.0, 216.0, 200.0));
        assert_eq!(ColorCode::new(4096), Err(ColorError::InvalidCode(4096)));
    }

    #[test]
    fn order_examples() {
        let c = |v: u32| ColorCode::new(v).unwrap();
        assert_eq!(order_palette(vec![c(3976), c(136)]).unwrap(), vec![c(136), c(3976)]);
        assert_eq!(order_palette(vec![]).unwrap(), vec![]);
        assert_eq!(order_palette(vec![c(2268), c(2269), c(136)]).unwrap(), vec![c(136), c(2268), c(2269)]);
        assert_eq!(order_palette(vec![c(1); 6]), Err(ColorError::PaletteTooLong(6)));
    }

    #[test]
    fn distance_black_white() {
        let d = lab_distance(ColorCode::BLACK, ColorCode::WHITE);
        assert!(close(d, 240.0 * 100.0 / 255.0, 1e-9));
        assert!(close(d, 94.12, 0.01));
        assert_eq!(lab_distance(ColorCode::WHITE, ColorCode::WHITE), 0.0);
    }

    #[test]
    fn hex_parsing() {
        assert_eq!("#ff8000".parse::<RgbColor>().unwrap(), RgbColor::new(255, 128, 0));
        assert_eq!("#FF8000".parse::<RgbColor>().unwrap().to_hex(), "#ff8000");
        for bad in ["ff8000", "#ff800", "#gg8000", "#ff80000", ""] {
            assert!(bad.parse::<RgbColor>().is_err(), "{bad}");
        }
        assert_eq!(hex_to_code("#000000").unwrap(), ColorCode::BLACK);
        assert_eq!(hex_to_code("#ffffff").unwrap(), ColorCode::WHITE);
    }

    #[test]
    fn lab_round_trip_in_gamut() {
        for rgb in [RgbColor::new(12, 200, 99), RgbColor::new(255, 0, 0), RgbColor::new(3, 3, 250)] {
            assert_eq!(lab_to_srgb(srgb_to_lab(rgb)), rgb);
        }
    }
}
