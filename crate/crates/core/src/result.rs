//! Pipeline output shared by every geolocation method and the evaluator.

use std::fmt;
use std::str::FromStr;

use crate::geo::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pipeline {
    Nn,
    Sift,
    Vlm,
}

impl Pipeline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::Nn => "nn",
            Pipeline::Sift => "sift",
            Pipeline::Vlm => "vlm",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nn" => Ok(Pipeline::Nn),
            "sift" => Ok(Pipeline::Sift),
            "vlm" => Ok(Pipeline::Vlm),
            other => Err(format!(
                "unknown pipeline {other:?} (expected nn, sift or vlm)"
            )),
        }
    }
}

/// One ranked prediction for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub image_id: String,
    pub pipeline: Pipeline,
    pub predicted: Option<GeoPoint>,
    pub score: f64,
    /// 1 or 2.
    pub rank: u8,
    pub place_names: Vec<String>,
    pub runtime_s: f64,
}

impl MatchResult {
    pub fn new(image_id: impl Into<String>, pipeline: Pipeline, rank: u8) -> Self {
        Self {
            image_id: image_id.into(),
            pipeline,
            predicted: None,
            score: 0.0,
            rank,
            place_names: Vec::new(),
            runtime_s: 0.0,
        }
    }

    /// Neither coordinates nor place names: counts as a failure when scored.
    pub fn is_unresolved(&self) -> bool {
        self.predicted.is_none() && self.place_names.is_empty()
    }
}
