//! Dataset manifests and pixel loading.
//!
//! ```json
//! {"images": [
//!   {"id": "db-000", "source": {"path": "images/db-000.pgm"}, "height": 32, "width": 32,
//!    "objects": [{"category": "pattern0", "box": {"x0":0,"y0":0,"x1":15,"y1":15},
//!                 "segmentation": {"rle": [0,16,16], "h": 32, "w": 32}}]}
//! ]}
//! ```
//!
//! `source` is either `{"path": ...}` (PGM or PNG, relative to the manifest
//! file) or `{"synthetic": <QuadrantLayout>}` rendered on load.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use phs_core::image::ImageTensor;
use phs_core::metrics::{CategoryIndex, ObjectAnnotation};
use serde::{Deserialize, Serialize};

use crate::corpus::QuadrantLayout;
use crate::error::{PhsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Path(PathBuf),
    Synthetic(QuadrantLayout),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub source: ImageSource,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ManifestImage>,
    /// Directory that relative `path` sources resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PhsError::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| PhsError::io(path, e))
    }

    /// Unique ids, non-empty categories, objects inside their image.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for img in &self.images {
            let bad = |msg: String| Err(phs_core::Error::BadParam(format!("manifest image {}: {msg}", img.id)).into());
            if !seen.insert(img.id.as_str()) {
                return bad("duplicate id".into());
            }
            for o in &img.objects {
                if o.category.is_empty() {
                    return bad("empty category".into());
                }
                let b = o.bbox;
                if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= img.width || b.y1 >= img.height {
                    return bad(format!("box {b:?} outside {}x{}", img.height, img.width));
                }
                if let Some(seg) = &o.segmentation {
                    if (seg.h, seg.w) != (img.height, img.width) {
                        return bad(format!("segmentation is {}x{}", seg.h, seg.w));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_index(&self) -> CategoryIndex {
        let mut idx = CategoryIndex::new();
        for img in &self.images {
            idx.insert(&img.id, img.objects.iter().map(|o| o.category.as_str()));
        }
        idx
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Pixels of `img` with `channels` channels.
    pub fn load_pixels(&self, img: &ManifestImage, channels: usize) -> Result<ImageTensor> {
        let t = match &img.source {
            ImageSource::Path(p) => read_image(&self.resolve(p), channels)?,
            ImageSource::Synthetic(layout) => layout.render(channels)?,
        };
        if (t.height(), t.width()) != (img.height, img.width) {
            return Err(phs_core::Error::BadGeometry(format!(
                "image {} is {}x{}, manifest says {}x{}",
                img.id,
                t.height(),
                t.width(),
                img.height,
                img.width
            ))
            .into());
        }
        Ok(t)
    }

    /// Raw bytes and content type of the image source. Synthetic sources are
    /// encoded as PGM.
    pub fn source_bytes(&self, img: &ManifestImage) -> Result<(Vec<u8>, &'static str)> {
        match &img.source {
            ImageSource::Path(p) => {
                let path = self.resolve(p);
                let bytes = fs::read(&path).map_err(|e| PhsError::io(&path, e))?;
                Ok((bytes, content_type(&path)))
            }
            ImageSource::Synthetic(layout) => Ok((encode_pgm(&layout.render(1)?)?, "image/x-portable-graymap")),
        }
    }
}

pub fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("pgm") | Some("pnm") => "image/x-portable-graymap",
        Some("ppm") => "image/x-portable-pixmap",
        _ => "application/octet-stream",
    }
}

/// Reads a PGM/PPM/PNG file into `[0, 1]` pixels.
pub fn read_image(path: &Path, channels: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| PhsError::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(phs_core::Error::BadParam(format!("{c}-channel images unsupported")).into()),
    };
    Ok(ImageTensor::new(h, w, channels, raw.into_iter().map(|v| f64::from(v) / 255.0).collect())?)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (P5) encoding of a single-channel image.
pub fn encode_pgm(t: &ImageTensor) -> Result<Vec<u8>> {
    if t.channels() != 1 {
        return Err(phs_core::Error::BadParam("PGM needs a single channel".into()).into());
    }
    let raw: Vec<u8> = t.pixels().iter().map(|&v| to_u8(v)).collect();
    encode_pgm_bytes(&raw, t.width(), t.height())
}

pub(crate) fn encode_pgm_bytes(raw: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{ExtendedColorType, ImageEncoder};
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(raw, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| PhsError::Image(e.to_string()))?;
    Ok(out)
}
