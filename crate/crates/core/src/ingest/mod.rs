//! GeoTIFF decoding and cached HTTP retrieval.

mod fetch;
mod source;
pub mod tiff;

pub use fetch::{fetch, fetch_with, resolve_cache_dir, sha256_bytes, sha256_file, FetchEntry, FetchManifest, FetchOptions, CACHE_ENV};
pub use source::{http_agent, read_range, ByteSource, FileSource, HttpSource};
pub use tiff::{decode_geotiff, decode_source, read_geotiff, read_info, TiffInfo};
