//! Detection metrics and evaluation protocols.

mod ap;
mod protocol;

pub use crate::boxes::iou;
pub use ap::{
    average_precision, curves, interpolated_ap, pr_curve, GtBox, PrCurve, ScoredBox, RECALL_POINTS,
};
pub use protocol::{
    detect_all, evaluate, one_shot_protocol, remove_labels, score_detections, zero_shot_split,
    CategoryRow, EvalConfig, EvalReport, OneShotConfig, OneShotReport, SplitSpec,
};
