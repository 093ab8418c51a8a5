//! Federated detection examples.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// One annotated object, possibly carrying several labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub crowd: bool,
}

impl Instance {
    pub fn new(bbox: BBox, labels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            bbox,
            labels: labels.into_iter().map(Into::into).collect(),
            crowd: false,
        }
    }
}

/// Image with annotations valid only for its positive and negative categories.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedExample {
    pub image: Image,
    pub instances: Vec<Instance>,
    /// Categories present in the image.
    pub positive: BTreeSet<String>,
    /// Categories known to be absent.
    pub negative: BTreeSet<String>,
}

impl FederatedExample {
    /// Checks every structural invariant of the federated format.
    pub fn validate(&self) -> Result<()> {
        if self.image.data.len() != self.image.height * self.image.width * self.image.channels {
            return Err(Error::InvalidData("image buffer size".into()));
        }
        if let Some(c) = self.positive.intersection(&self.negative).next() {
            return Err(Error::InvalidData(format!(
                "{c:?} is both positive and negative"
            )));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.labels.is_empty() {
                return Err(Error::InvalidData(format!("instance {i} has no label")));
            }
            if let Some(l) = inst.labels.iter().find(|l| !self.positive.contains(*l)) {
                return Err(Error::InvalidData(format!(
                    "instance {i} label {l:?} is not positive"
                )));
            }
            let b = inst.bbox;
            if !b.is_finite() || b.w <= 0.0 || b.h <= 0.0 || !b.within_unit(1e-9) {
                return Err(Error::InvalidData(format!(
                    "instance {i} box {b:?} outside the unit square"
                )));
            }
        }
        Ok(())
    }

    /// All categories with a federated annotation for this image.
    pub fn annotated(&self) -> impl Iterator<Item = &String> {
        self.positive.iter().chain(self.negative.iter())
    }
}
