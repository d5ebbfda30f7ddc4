//! Geolocation of astronaut photography from the ISS.
//!
//! Three pipelines share one geometric core:
//!
//! * [`features`]: feature-map cross-correlation of the photo against a map
//!   AOI centred on the station's nadir point,
//! * [`sift`]: keypoint matching over sliding windows of a large stitched
//!   mosaic, skipping windows that are mostly water,
//! * [`vlm`]: a coordinate-aware prompt to a vision-language model, with the
//!   answer parsed back into coordinates and place names.
//!
//! [`bench`] scores any of them against a ground-truth manifest.

pub mod bench;
pub mod features;
pub mod fsutil;
pub mod geo;
pub mod metadata;
pub mod net;
pub mod raster;
pub mod result;
pub mod sift;
pub mod tiles;
pub mod vlm;

pub use bench::{BenchmarkRecord, EvalReport};
pub use geo::{AoiGeometry, GeoPoint, MercatorContext, PixelPoint};
pub use result::{MatchResult, Pipeline};

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geo(#[from] geo::GeoError),
    #[error(transparent)]
    Metadata(#[from] metadata::MetadataError),
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
    #[error(transparent)]
    Tile(#[from] tiles::TileError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Sift(#[from] sift::SiftError),
    #[error(transparent)]
    Vlm(#[from] vlm::VlmError),
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable name of the underlying error, e.g. `AuthError`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Geo(e) => e.kind(),
            Error::Metadata(e) => e.kind(),
            Error::Raster(e) => e.kind(),
            Error::Tile(e) => e.kind(),
            Error::Feature(e) => e.kind(),
            Error::Sift(e) => e.kind(),
            Error::Vlm(e) => e.kind(),
            Error::Bench(e) => e.kind(),
            Error::Io(_) => "IoError",
        }
    }
}
