//! Downstream evaluation: linear probing and fine-tuning with mAP or
//! accuracy, feature-difference change detection, and label-efficiency sweeps.

mod change;
mod dataset;
mod metrics;
mod probe;
mod sweep;

pub use change::{
    change_features, predict_mask, synthetic_change_pair, train_change_decoder, ChangeConfig, ChangeDecoder,
    ChangeOutcome, ChangePair,
};
pub use dataset::{
    load_folder_dataset, stratified_subsample, synthetic_land_cover, FolderManifest, LabeledDataset, Split,
    TargetKind, Targets, PRESENCE_THRESHOLD,
};
pub use metrics::{accuracy, average_precision, mask_metrics, mean_average_precision, MaskMetrics};
pub use probe::{embed_all, fine_tune, linear_probe, metric_name, ProbeConfig, ProbeMode, ProbeResult};
pub use sweep::{
    label_efficiency_sweep, median, read_results_csv, run_probe, write_results_csv, ResultRow, RESULTS_HEADER,
};
