//! JSON dataset files.
//!
//! ```json
//! {"categories": ["red circle", ...],
//!  "images": [{"id": "0", "file": "0.png" | "pixels": "<base64 PNG>",
//!              "width": 32, "height": 32,
//!              "instances": [{"bbox": [xmin, ymin, xmax, ymax], "labels": ["red circle"], "crowd": false}],
//!              "positive": [...], "negative": [...]}]}
//! ```
//!
//! Box corners are normalized to `[0, 1]`. Relative `file` paths resolve
//! against the directory of the JSON document.

use std::collections::BTreeSet;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{FederatedExample, Instance};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub categories: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<String>,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub instances: Vec<InstanceRecord>,
    #[serde(default)]
    pub positive: Vec<String>,
    #[serde(default)]
    pub negative: Vec<String>,
    /// Free-text description used for contrastive pre-training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub bbox: [f64; 4],
    pub labels: Vec<String>,
    #[serde(default)]
    pub crowd: bool,
}

/// Examples plus the optional caption of each image.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub categories: Vec<String>,
    pub examples: Vec<FederatedExample>,
    pub captions: Vec<Option<String>>,
}

pub fn encode_png_base64(image: &Image) -> Result<String> {
    Ok(STANDARD.encode(image.to_png()?))
}

pub fn decode_png_base64(text: &str) -> Result<Image> {
    let bytes = STANDARD
        .decode(text.trim())
        .map_err(|e| Error::InvalidData(format!("base64: {e}")))?;
    Image::from_png(&bytes)
}

impl ImageRecord {
    pub fn from_example(
        id: impl Into<String>,
        ex: &FederatedExample,
        caption: Option<String>,
    ) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            file: None,
            pixels: Some(encode_png_base64(&ex.image)?),
            width: ex.image.width,
            height: ex.image.height,
            instances: ex
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    bbox: i.bbox.corners(),
                    labels: i.labels.iter().cloned().collect(),
                    crowd: i.crowd,
                })
                .collect(),
            positive: ex.positive.iter().cloned().collect(),
            negative: ex.negative.iter().cloned().collect(),
            caption,
        })
    }

    pub fn to_example(&self, base_dir: &Path) -> Result<FederatedExample> {
        let image = match (&self.pixels, &self.file) {
            (Some(p), _) => decode_png_base64(p)?,
            (None, Some(f)) => {
                let path = base_dir.join(f);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Image::from_png(&bytes)?
            }
            (None, None) => {
                return Err(Error::InvalidData(format!(
                    "image {} has neither file nor pixels",
                    self.id
                )))
            }
        };
        if (image.width, image.height) != (self.width, self.height) {
            return Err(Error::InvalidData(format!(
                "image {} is {}x{}, record says {}x{}",
                self.id, image.width, image.height, self.width, self.height
            )));
        }
        let instances = self
            .instances
            .iter()
            .map(|r| {
                let [x0, y0, x1, y1] = r.bbox;
                Instance {
                    bbox: BBox::from_corners(x0, y0, x1, y1),
                    labels: r.labels.iter().cloned().collect(),
                    crowd: r.crowd,
                }
            })
            .collect();
        let ex = FederatedExample {
            image,
            instances,
            positive: self.positive.iter().cloned().collect::<BTreeSet<_>>(),
            negative: self.negative.iter().cloned().collect::<BTreeSet<_>>(),
        };
        ex.validate()
            .map_err(|e| Error::InvalidData(format!("image {}: {e}", self.id)))?;
        Ok(ex)
    }
}

impl DatasetFile {
    pub fn from_examples(
        categories: &[String],
        examples: &[FederatedExample],
        captions: Option<&[String]>,
    ) -> Result<Self> {
        let images = examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                ImageRecord::from_example(i.to_string(), ex, captions.map(|c| c[i].clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            categories: categories.to_vec(),
            images,
        })
    }

    pub fn load(path: &Path) -> Result<LoadedDataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.resolve(base)
    }

    pub fn resolve(&self, base_dir: &Path) -> Result<LoadedDataset> {
        let examples = self
            .images
            .iter()
            .map(|r| r.to_example(base_dir))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedDataset {
            categories: self.categories.clone(),
            examples,
            captions: self.images.iter().map(|r| r.caption.clone()).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
