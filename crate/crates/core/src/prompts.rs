// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual prompts: point, box, and segment representations, their
//! rasterization to a pixel mask, conversion to a patch-token mask, and the
//! box-prompt noise model.
//!
//! Prompt JSON is internally tagged by `"type"`:
//!
//! ```json
//! {"type":"box","x0":0,"y0":0,"x1":15,"y1":15}
//! {"type":"point","x":4,"y":4,"window":3}
//! {"type":"segment","rle":[0,256,768],"h":32,"w":32}
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point-prompt window side, in patches.
pub const DEFAULT_POINT_WINDOW: usize = 3;

/// Box prompt with inclusive pixel corners. Coordinates may lie outside the
/// image; rasterization clamps them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoxPrompt {
    /// Swaps corners so that `x0 <= x1` and `y0 <= y1`.
    pub fn normalized(self) -> Self {
        Self {
            x0: self.x0.min(self.x1),
            y0: self.y0.min(self.y1),
            x1: self.x0.max(self.x1),
            y1: self.y0.max(self.y1),
        }
    }

    /// Normalizes and clamps the box into a `height × width` image.
    pub fn clamp_to(self, height: usize, width: usize) -> PixelBox {
        let b = self.normalized();
        let cx = |v: i64| v.clamp(0, width as i64 - 1) as usize;
        let cy = |v: i64| v.clamp(0, height as i64 - 1) as usize;
        PixelBox {
            x0: cx(b.x0),
            y0: cy(b.y0),
            x1: cx(b.x1),
            y1: cy(b.y1),
        }
    }
}

/// Inclusive in-bounds pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<PixelBox> for BoxPrompt {
    fn from(b: PixelBox) -> Self {
        BoxPrompt {
            x0: b.x0 as i64,
            y0: b.y0 as i64,
            x1: b.x1 as i64,
            y1: b.y1 as i64,
        }
    }
}

/// Row-major run-length encoding of a binary `h × w` mask. Runs alternate
/// starting with a (possibly zero-length) run of unset pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub rle: Vec<u32>,
    pub h: usize,
    pub w: usize,
}

impl Rle {
    pub fn encode(bits: &[bool], h: usize, w: usize) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::dims("Rle::encode", h * w, bits.len()));
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Ok(Self { rle: runs, h, w })
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        let total: u64 = self.rle.iter().map(|&r| u64::from(r)).sum();
        if total != (self.h * self.w) as u64 {
            return Err(Error::BadPrompt(format!(
                "RLE covers {total} pixels, mask is {}x{}",
                self.h, self.w
            )));
        }
        let mut bits = Vec::with_capacity(self.h * self.w);
        for (i, &run) in self.rle.iter().enumerate() {
            bits.extend(core::iter::repeat_n(i % 2 == 1, run as usize));
        }
        Ok(bits)
    }
}

/// A user prompt on the query image, in that image's pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum VisualPrompt {
    Point {
        x: i64,
        y: i64,
        #[serde(default = "default_window")]
        window: usize,
    },
    Box(BoxPrompt),
    Segment(Rle),
}

fn default_window() -> usize {
    DEFAULT_POINT_WINDOW
}

impl VisualPrompt {
    pub fn kind(&self) -> &'static str {
        match self {
            VisualPrompt::Point { .. } => "point",
            VisualPrompt::Box(_) => "box",
            VisualPrompt::Segment(_) => "segment",
        }
    }

    /// Maps the prompt from a `from` image onto a resized `to` image.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Result<VisualPrompt> {
        if from == to {
            return Ok(self.clone());
        }
        let (fh, fw) = (from.0 as i64, from.1 as i64);
        let (th, tw) = (to.0 as i64, to.1 as i64);
        let start = |v: i64, f: i64, t: i64| v * t / f;
        let end = |v: i64, f: i64, t: i64| ((v + 1) * t + f - 1) / f - 1;
        Ok(match self {
            VisualPrompt::Point { x, y, window } => VisualPrompt::Point {
                x: start(*x, fw, tw),
                y: start(*y, fh, th),
                window: *window,
            },
            VisualPrompt::Box(b) => {
                let b = b.normalized();
                VisualPrompt::Box(BoxPrompt {
                    x0: start(b.x0, fw, tw),
                    y0: start(b.y0, fh, th),
                    x1: end(b.x1, fw, tw),
                    y1: end(b.y1, fh, th),
                })
            }
            VisualPrompt::Segment(rle) => {
                if (rle.h, rle.w) != from {
                    return Err(Error::BadPrompt(format!(
                        "segment is {}x{}, image is {}x{}",
                        rle.h, rle.w, from.0, from.1
                    )));
                }
                let src = rle.decode()?;
                let mut bits = vec![false; to.0 * to.1];
                for y in 0..to.0 {
                    let sy = y * from.0 / to.0;
                    for x in 0..to.1 {
                        let sx = x * from.1 / to.1;
                        bits[y * to.1 + x] = src[sy * from.1 + sx];
                    }
                }
                VisualPrompt::Segment(Rle::encode(&bits, to.0, to.1)?)
            }
        })
    }
}

/// Binary `H × W` pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PromptMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dims("PromptMask::new", height * width, bits.len()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn fill_rect(&mut self, y0: usize, y1: usize, x0: usize, x1: usize) {
        for y in y0..=y1 {
            self.bits[y * self.width + x0..=y * self.width + x1].fill(true);
        }
    }

    /// Tight inclusive bounding box of the set pixels, if any.
    pub fn bounding_box(&self) -> Option<PixelBox> {
        let mut bb: Option<PixelBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let b = bb.get_or_insert(PixelBox {
                        x0: x,
                        y0: y,
                        x1: x,
                        y1: y,
                    });
                    b.x0 = b.x0.min(x);
                    b.x1 = b.x1.max(x);
                    b.y1 = y;
                }
            }
        }
        bb
    }
}

/// Binary mask over the `N` patch tokens in patchify order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::dims("TokenMask::from_indices", n, i));
            }
            bits[i] = true;
        }
        Ok(Self { bits })
    }

    pub fn full(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, t: usize) -> bool {
        self.bits[t]
    }

    /// Indices of set patch tokens.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &TokenMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Rasterizes a prompt into an `height × width` pixel mask.
pub fn rasterize(
    prompt: &VisualPrompt,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<PromptMask> {
    if height == 0 || width == 0 {
        return Err(Error::BadGeometry("empty image".into()));
    }
    match prompt {
        VisualPrompt::Box(b) => {
            let pb = b.clamp_to(height, width);
            let mut mask = PromptMask::empty(height, width);
            mask.fill_rect(pb.y0, pb.y1, pb.x0, pb.x1);
            Ok(mask)
        }
        VisualPrompt::Segment(rle) => {
            if rle.h != height || rle.w != width {
                return Err(Error::BadPrompt(format!(
                    "segment is {}x{}, image is {height}x{width}",
                    rle.h, rle.w
                )));
            }
            PromptMask::new(height, width, rle.decode()?)
        }
        VisualPrompt::Point { x, y, window } => {
            if *x < 0 || *y < 0 || *x >= width as i64 || *y >= height as i64 {
                return Err(Error::BadPrompt(format!(
                    "point ({x}, {y}) outside {height}x{width} image"
                )));
            }
            if *window == 0 || patch == 0 {
                return Err(Error::BadPrompt("point window must be positive".into()));
            }
            let (pr, pc) = ((*y as usize / patch) as i64, (*x as usize / patch) as i64);
            let before = ((*window - 1) / 2) as i64;
            let span = |center: i64, limit: usize| {
                let lo = ((center - before) * patch as i64).max(0) as usize;
                let hi = ((center - before + *window as i64) * patch as i64).min(limit as i64);
                (lo, hi as usize - 1)
            };
            let (y0, y1) = span(pr, height);
            let (x0, x1) = span(pc, width);
            let mut mask = PromptMask::empty(height, width);
            mask.fill_rect(y0, y1, x0, x1);
            Ok(mask)
        }
    }
}

/// Converts a pixel mask to a patch-token mask. A patch is set when the
/// fraction of its pixels that are set reaches `overlap_threshold`.
pub fn tokenize_mask(mask: &PromptMask, patch: usize, overlap_threshold: f64) -> Result<TokenMask> {
    if patch == 0 || mask.height % patch != 0 || mask.width % patch != 0 {
        return Err(Error::BadGeometry(format!(
            "{}x{} mask is not divisible by patch size {patch}",
            mask.height, mask.width
        )));
    }
    if !(overlap_threshold > 0.0 && overlap_threshold <= 1.0) {
        return Err(Error::BadParam(format!(
            "overlap threshold {overlap_threshold} not in (0, 1]"
        )));
    }
    let (gh, gw) = (mask.height / patch, mask.width / patch);
    let area = (patch * patch) as f64;
    let mut bits = vec![false; gh * gw];
    for r in 0..gh {
        for c in 0..gw {
            let mut set = 0usize;
            for y in r * patch..(r + 1) * patch {
                for x in c * patch..(c + 1) * patch {
                    set += usize::from(mask.get(y, x));
                }
            }
            bits[r * gw + c] = set as f64 / area >= overlap_threshold;
        }
    }
    Ok(TokenMask { bits })
}

/// Any-overlap threshold for a patch of side `patch`.
pub fn any_overlap(patch: usize) -> f64 {
    1.0 / (patch * patch) as f64
}

/// Box noise magnitude and PRNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub m: u32,
    pub seed: u64,
}

/// One draw of the four noise offsets: shift `(cx, cy)` and resize `(lx, ly)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxNoise {
    pub cx: i64,
    pub cy: i64,
    pub lx: i64,
    pub ly: i64,
}

impl BoxNoise {
    /// Draws `cx, cy, lx, ly` in that order, each uniform on `[-m, m]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, m: u32) -> Self {
        let m = i64::from(m);
        let mut draw = || rng.random_range(-m..=m);
        let cx = draw();
        let cy = draw();
        let lx = draw();
        let ly = draw();
        Self { cx, cy, lx, ly }
    }

    /// Shifts and resizes `b`, then clamps into the image and re-normalizes.
    pub fn apply(&self, b: &BoxPrompt, height: usize, width: usize) -> BoxPrompt {
        let shifted = BoxPrompt {
            x0: b.x0 + self.cx - self.lx,
            y0: b.y0 + self.cy - self.ly,
            x1: b.x1 + self.cx + self.lx,
            y1: b.y1 + self.cy + self.ly,
        };
        shifted.clamp_to(height, width).into()
    }
}

/// The PRNG behind every noise stream: xoshiro256++ seeded through
/// SplitMix64 (`seed_from_u64`).
pub fn noise_rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Perturbs a box prompt with offsets drawn from the stream seeded by
/// `params.seed`. `m = 0` returns the box unchanged.
pub fn add_box_noise(b: &BoxPrompt, params: &NoiseParams, height: usize, width: usize) -> BoxPrompt {
    if params.m == 0 {
        return *b;
    }
    let mut rng = noise_rng(params.seed);
    BoxNoise::sample(&mut rng, params.m).apply(b, height, width)
}
