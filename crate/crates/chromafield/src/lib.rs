//! File formats, dataset directories, the external colorizer client and the
//! command line around `chromafield-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod external;
pub mod formats;
pub mod protocol;
