//! Looking inside a trained profiling model: per-class logit summaries, PCA
//! of hidden activations, linear probes, activation patching in PC
//! coordinates and recovery of the mask shares from the patched outputs.
//!
//! None of these functions take ground-truth share values. The sidecar is
//! only needed to score their output.

mod bits;
mod kmeans;
mod logits;
mod patch;
mod pca;
mod probe;
mod probe16;
mod recover;
mod shares;

pub use bits::{recover_share_bits, BitsRecovery, BITS2_K};
pub use kmeans::{kmeans, select_k, silhouette, Clustering};
pub use logits::{logit_summary, summarize_logits, LogitStat, LogitSummary};
pub use patch::{patched_activations, patched_activations_with, patched_forward, PatchSpec, Rotation};
pub use pca::{pca_fit, PcaBasis};
pub use probe::{probe_train, split_rows, LinearProbe, ProbeConfig};
pub use probe16::{expand_class16, explain_with_probs, probe16_explanation, Probe16Explanation};
pub use recover::{recover_masks_hw, rotation_sweep, HwRecovery, HwRecoveryConfig, RecoveredShare};
pub use shares::{
    agreement, high_low_score, hw_bin_counts, orient_hw_estimate, recover_share_hw,
    recover_share_hw_from_scores, validate_shares, EstimateKind, Pin, ShareEstimate,
    ShareValidation,
};
