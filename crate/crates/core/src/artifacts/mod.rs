//! Files the tool writes: checkpoints, per-epoch metrics and feature-map
//! mosaics.

pub mod checkpoint;
pub mod metrics;
pub mod viz;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use metrics::{append_metrics, create_metrics, format_sig, METRICS_HEADER};
pub use viz::{
    build_mosaic, encode_pgm, export_feature_maps, parse_layer_selector, read_pgm, write_pgm,
    FeatureMapMosaic,
};
