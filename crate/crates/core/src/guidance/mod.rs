//! Inference-time attention guidance: concept-region confinement and
//! attention boosting for personalized tokens, plus orthogonalization of
//! personalized-token attention against other concepts' activation masks.

pub mod losses;
pub mod sample;

pub use losses::{
    clul_loss, dal_loss, extract_mask, gaussian_kernel3, oaa_loss, smoothed_map, RegionMasks,
};
pub use sample::{
    evaluate_guidance, guided_sample, refine_latent, GuidanceConfig, GuidanceEval,
    GuidanceLossReport, ReportRow,
};
