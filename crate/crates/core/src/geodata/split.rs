//! Split specification: axis-aligned rectangles per split name.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in the metric frame, inclusive on all edges.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect { x_min, y_min, x_max, y_max }
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Rectangles per split. Serialized as TOML arrays of
/// `[x_min, y_min, x_max, y_max]`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    #[serde(default, with = "rect_arrays")]
    pub train: Vec<Rect>,
    #[serde(default, with = "rect_arrays")]
    pub val: Vec<Rect>,
    #[serde(default, with = "rect_arrays")]
    pub test: Vec<Rect>,
}

impl SplitSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("split spec serializes")
    }
}

mod rect_arrays {
    use super::Rect;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(rects: &[Rect], s: S) -> Result<S::Ok, S::Error> {
        let arrays: Vec<[f64; 4]> = rects
            .iter()
            .map(|r| [r.x_min, r.y_min, r.x_max, r.y_max])
            .collect();
        arrays.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rect>, D::Error> {
        let arrays: Vec<[f64; 4]> = Vec::deserialize(d)?;
        Ok(arrays
            .into_iter()
            .map(|[x_min, y_min, x_max, y_max]| Rect { x_min, y_min, x_max, y_max })
            .collect())
    }
}
