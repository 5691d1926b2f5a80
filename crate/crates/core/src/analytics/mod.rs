//! Human-vision and machine-vision quality measures, and segmentation on
//! decoded latent features.

pub mod bd;
pub mod metrics;
pub mod seg;

pub use bd::{bd_psnr, bd_rate, BdInterp, RdCurve, RdPoint};
pub use metrics::{
    boundary, dice, dice_per_slice, hd95, hd95_empty_sentinel, percentile, psnr, psnr_from_mse, LabelVolume, Spacing,
};
pub use seg::{
    evaluate_segmentation, extract_features, pixel_features, slice_samples, train_reference_head, HeadTrainConfig,
    ReferenceHead, SegmentationHead, SegmentationReport,
};
