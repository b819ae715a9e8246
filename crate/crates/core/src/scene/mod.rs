//! Synthetic annotated scenes, their templated descriptions and the on-disk
//! dataset format.

mod dataset;
mod io;
mod language;
mod synth;

pub use dataset::{
    build_dataset, dataset_hash, load_dataset, sample_extra, save_dataset, Dataset, DatasetConfig, DatasetSplit,
};
pub use io::{load_scene, save_scene, scene_from_json, scene_to_json, ParseError};
pub use language::{generate_descriptions, LangConfig, Vocab, EOS, PAD, SOS, UNK};
pub use synth::{generate_scene, GenConfig};

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Point3};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const CLASS_NAMES: [&str; 10] = [
    "chair", "table", "desk", "sofa", "cabinet", "shelf", "bin", "lamp", "box", "stool",
];

/// Width, depth and height in meters at scale 1.
pub const CLASS_SIZES: [[f64; 3]; 10] = [
    [0.45, 0.45, 0.85],
    [0.90, 0.70, 0.70],
    [1.00, 0.55, 0.75],
    [1.10, 0.60, 0.55],
    [0.60, 0.45, 1.00],
    [0.80, 0.30, 1.10],
    [0.30, 0.30, 0.40],
    [0.25, 0.25, 0.95],
    [0.40, 0.40, 0.35],
    [0.35, 0.35, 0.50],
];

pub const COLOR_NAMES: [&str; 10] = [
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "white", "black",
];

pub const COLOR_RGB: [[f64; 3]; 10] = [
    [0.85, 0.15, 0.15],
    [0.95, 0.55, 0.10],
    [0.95, 0.90, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.55, 0.25, 0.70],
    [0.95, 0.60, 0.75],
    [0.50, 0.30, 0.15],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
];

/// Class-specific tint mixed into rendered colors so that a point's color
/// identifies its class even when two classes share a color name.
pub const CLASS_TINT: [[f64; 3]; 10] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.0, 0.5, 1.0],
    [0.5, 1.0, 0.0],
    [1.0, 1.0, 1.0],
];

pub const FLOOR_RGB: [f64; 3] = [0.5, 0.5, 0.5];

/// The two color names a class may take.
pub fn class_colors(class: usize) -> [usize; 2] {
    [class % 10, (class + 3) % 10]
}

pub fn rendered_color(class: usize, color: usize) -> [f64; 3] {
    let c = COLOR_RGB[color];
    let t = CLASS_TINT[class];
    [
        0.75 * c[0] + 0.25 * t[0],
        0.75 * c[1] + 0.25 * t[1],
        0.75 * c[2] + 0.25 * t[2],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeAttr {
    Small,
    Medium,
    Large,
}

impl SizeAttr {
    pub fn from_scale(s: f64) -> Self {
        if s < 0.9 {
            SizeAttr::Small
        } else if s > 1.1 {
            SizeAttr::Large
        } else {
            SizeAttr::Medium
        }
    }

    pub fn word(self) -> Option<&'static str> {
        match self {
            SizeAttr::Small => Some("small"),
            SizeAttr::Medium => None,
            SizeAttr::Large => Some("large"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub instance_id: usize,
    pub semantic_class: usize,
    pub bbox: Aabb,
    pub color: usize,
    pub size: SizeAttr,
    /// Word ids without sos/eos; empty iff the scene is unannotated.
    pub descriptions: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub points: Vec<Point3>,
    pub feature_dim: usize,
    /// Row-major `N × feature_dim`.
    pub features: Vec<f64>,
    pub semantic_labels: Vec<usize>,
    /// `-1` marks floor / unassigned points.
    pub instance_labels: Vec<i64>,
    pub objects: Vec<GtObject>,
    pub annotated: bool,
    pub num_classes: usize,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn floor_class(&self) -> usize {
        self.num_classes
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Point indices of each object, in object order.
    pub fn instance_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.objects.len()];
        for (i, &l) in self.instance_labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }

    /// Mean coordinate of each object's points.
    pub fn instance_centroids(&self) -> Vec<Point3> {
        self.instance_members()
            .iter()
            .map(|m| {
                let mut c = [0.0; 3];
                for &i in m {
                    for k in 0..3 {
                        c[k] += self.points[i][k];
                    }
                }
                let n = m.len().max(1) as f64;
                [c[0] / n, c[1] / n, c[2] / n]
            })
            .collect()
    }

    /// Number of objects of each class in the scene.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for o in &self.objects {
            c[o.semantic_class] += 1;
        }
        c
    }

    pub fn has_descriptions(&self) -> bool {
        self.objects.iter().any(|o| !o.descriptions.is_empty())
    }

    /// Recomputes every object's box from its member points.
    pub fn refresh_boxes(&mut self) {
        let members = self.instance_members();
        for (o, m) in self.objects.iter_mut().zip(members) {
            if let Ok(b) = crate::geometry::bbox_of_indices(&self.points, &m) {
                o.bbox = b;
            }
        }
    }
}
