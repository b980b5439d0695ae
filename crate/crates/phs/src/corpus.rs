//! Synthetic quadrant corpus.
//!
//! An image is split into four quadrants. Each quadrant holds one texture:
//! an 8×8 two-dimensional Walsh function tiled over the quadrant, scaled by
//! an amplitude around mid-gray. Every image carries two category textures
//! (its annotated objects) and two stronger, unannotated distractor textures.
//! All textures are mutually orthogonal and zero-mean over a tile.

use std::fs;
use std::path::Path;

use phs_core::image::ImageTensor;
use phs_core::metrics::ObjectAnnotation;
use phs_core::prompts::{PixelBox, Rle};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{PhsError, Result};
use crate::manifest::{encode_pgm, DatasetManifest, ImageSource, ManifestImage};

/// Tile side of every texture.
pub const TILE: usize = 8;

/// Walsh index pairs `(row, col)` of the category textures.
pub const CATEGORY_TEXTURES: [[usize; 2]; 4] = [[0, 1], [1, 0], [1, 1], [3, 3]];
/// Walsh index pairs of the distractor textures.
pub const DISTRACTOR_TEXTURES: [[usize; 2]; 4] = [[0, 4], [4, 0], [4, 4], [2, 6]];

/// Entry `x` of row `i` of the 8×8 Sylvester Hadamard matrix.
pub fn walsh(i: usize, x: usize) -> f64 {
    if (i & x).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Value of texture `t` at tile offset `(dy, dx)`.
pub fn texture_value(t: [usize; 2], dy: usize, dx: usize) -> f64 {
    walsh(t[0], dy % TILE) * walsh(t[1], dx % TILE)
}

pub fn category_name(c: usize) -> String {
    format!("pattern{c}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub walsh: [usize; 2],
    pub amplitude: f64,
}

/// Inline description of a quadrant image; quadrants are in row-major order
/// (top-left, top-right, bottom-left, bottom-right). `None` is flat mid-gray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantLayout {
    pub size: usize,
    pub quadrants: Vec<Option<Texture>>,
}

/// Pixel rectangle of quadrant `q` in a `size × size` image.
pub fn quadrant_box(size: usize, q: usize) -> PixelBox {
    let half = size / 2;
    let (y0, x0) = ((q / 2) * half, (q % 2) * half);
    PixelBox {
        x0,
        y0,
        x1: x0 + half - 1,
        y1: y0 + half - 1,
    }
}

fn box_rle(size: usize, b: &PixelBox) -> Rle {
    let bits: Vec<bool> = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            (b.y0..=b.y1).contains(&y) && (b.x0..=b.x1).contains(&x)
        })
        .collect();
    Rle::encode(&bits, size, size).expect("bits match size")
}

impl QuadrantLayout {
    /// Renders the layout. Pixels are quantized to 8 bits so that inline and
    /// file-backed copies of a layout load identically.
    pub fn render(&self, channels: usize) -> Result<ImageTensor> {
        let s = self.size;
        if s == 0 || s % (2 * TILE) != 0 || self.quadrants.len() != 4 {
            return Err(phs_core::Error::BadGeometry(format!(
                "quadrant layout needs 4 quadrants and a size divisible by {}",
                2 * TILE
            ))
            .into());
        }
        let half = s / 2;
        let mut px = Vec::with_capacity(s * s * channels);
        for y in 0..s {
            for x in 0..s {
                let q = (y / half) * 2 + x / half;
                let v = match &self.quadrants[q] {
                    Some(t) => 0.5 + t.amplitude * texture_value(t.walsh, y, x),
                    None => 0.5,
                };
                let v = f64::from((v * 255.0).round().clamp(0.0, 255.0) as u8) / 255.0;
                px.extend(std::iter::repeat_n(v, channels));
            }
        }
        Ok(ImageTensor::new(s, s, channels, px)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub size: usize,
    pub num_patterns: usize,
    pub db_per_class: usize,
    pub query_per_class: usize,
    pub category_amplitude: [f64; 2],
    pub distractor_amplitude: [f64; 2],
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 32,
            num_patterns: 4,
            db_per_class: 10,
            query_per_class: 3,
            category_amplitude: [0.15, 0.2],
            distractor_amplitude: [0.3, 0.4],
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(phs_core::Error::BadParam(m).into());
        if self.size == 0 || self.size % (2 * TILE) != 0 {
            return bad(format!("size {} must be a positive multiple of {}", self.size, 2 * TILE));
        }
        if !(2..=CATEGORY_TEXTURES.len()).contains(&self.num_patterns) {
            return bad(format!("num_patterns must lie in [2, {}]", CATEGORY_TEXTURES.len()));
        }
        for [lo, hi] in [self.category_amplitude, self.distractor_amplitude] {
            if !(0.0 <= lo && lo <= hi && hi <= 0.5) {
                return bad(format!("amplitude range [{lo}, {hi}] not within [0, 0.5]"));
            }
        }
        Ok(())
    }
}

fn amplitude(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    ((lo + (hi - lo) * rng.random::<f64>()) * 1000.0).round() / 1000.0
}

fn split(spec: &SyntheticCorpusSpec, prefix: &str, per_class: usize, stream: u64) -> Vec<ManifestImage> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed ^ stream);
    let mut out = Vec::new();
    for c in 0..spec.num_patterns {
        for j in 0..per_class {
            let mut other = rng.random_range(0..spec.num_patterns - 1);
            if other >= c {
                other += 1;
            }
            let mut distractors: Vec<usize> = (0..DISTRACTOR_TEXTURES.len()).collect();
            distractors.shuffle(&mut rng);
            let mut slots: Vec<(Option<usize>, Texture)> = vec![
                (Some(c), Texture { walsh: CATEGORY_TEXTURES[c], amplitude: amplitude(&mut rng, spec.category_amplitude) }),
                (Some(other), Texture { walsh: CATEGORY_TEXTURES[other], amplitude: amplitude(&mut rng, spec.category_amplitude) }),
            ];
            for &d in &distractors[..2] {
                slots.push((None, Texture { walsh: DISTRACTOR_TEXTURES[d], amplitude: amplitude(&mut rng, spec.distractor_amplitude) }));
            }
            slots.shuffle(&mut rng);
            let objects = slots
                .iter()
                .enumerate()
                .filter_map(|(q, (cat, _))| {
                    cat.map(|cat| {
                        let bbox = quadrant_box(spec.size, q);
                        ObjectAnnotation {
                            category: category_name(cat),
                            bbox,
                            segmentation: Some(box_rle(spec.size, &bbox)),
                        }
                    })
                })
                .collect();
            out.push(ManifestImage {
                id: format!("{prefix}-p{c}-{j:02}"),
                source: ImageSource::Synthetic(QuadrantLayout {
                    size: spec.size,
                    quadrants: slots.into_iter().map(|(_, t)| Some(t)).collect(),
                }),
                height: spec.size,
                width: spec.size,
                objects,
            });
        }
    }
    out
}

/// Query and database manifests with inline synthetic sources.
pub fn synthetic_manifests(spec: &SyntheticCorpusSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    let query = DatasetManifest {
        images: split(spec, "q", spec.query_per_class, 0x5155_4552_5900_0000),
        base_dir: Default::default(),
    };
    let db = DatasetManifest {
        images: split(spec, "db", spec.db_per_class, 0x4442_0000_0000_0000),
        base_dir: Default::default(),
    };
    Ok((query, db))
}

/// Writes `query.json`, `db.json` and one PGM per image under `out_dir`.
/// Manifests reference the PGM files by relative path.
pub fn gen_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let (mut query, mut db) = synthetic_manifests(spec)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| PhsError::io(&images, e))?;
    for (manifest, name) in [(&mut query, "query.json"), (&mut db, "db.json")] {
        for img in &mut manifest.images {
            let ImageSource::Synthetic(layout) = &img.source else {
                unreachable!("generated sources are synthetic")
            };
            let rel = Path::new("images").join(format!("{}.pgm", img.id));
            let path = out_dir.join(&rel);
            fs::write(&path, encode_pgm(&layout.render(1)?)?).map_err(|e| PhsError::io(&path, e))?;
            img.source = ImageSource::Path(rel);
        }
        manifest.base_dir = out_dir.to_path_buf();
        manifest.save(&out_dir.join(name))?;
    }
    Ok((query, db))
}
