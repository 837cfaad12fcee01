mod format;
mod load;

pub use format::{
    hex, read_artifact, save_artifact, DeltaArtifact, DeltaLayerRecord, ARTIFACT_CHECKSUM_BYTES,
    ARTIFACT_HEADER_BYTES, ARTIFACT_MAGIC, ARTIFACT_VERSION, EMPTY_ARTIFACT_BYTES,
};
pub use load::{
    apply_artifact, bench_load, layer_compression_ratio, load_and_apply, load_full_checkpoint,
    read_full_checkpoint, size_report, write_full_checkpoint, ApplyOptions, BenchReport, LoadTiming,
    PathStats, ResidentBase, SizeReport,
};
