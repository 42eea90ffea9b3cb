//! Evaluation battery: distribution distances on frozen random features,
//! full-reference fidelity metrics, and segmentation consistency.

mod distance;
mod evaluate;
mod features;
mod quality;
mod segment;

pub use distance::{fid, kid, moments, sqrtm_psd, KID_BLOCK};
pub use evaluate::{evaluate_harmonization, EvalProtocol, EvalReport, Fidelity, MeanSe, PairRow, PhantomRow, SiteRow};
pub use features::{FeatureExtractor, DEFAULT_FEATURE_DIM, DEFAULT_FEATURE_SEED};
pub use quality::{mae, ms_ssim, ms_ssim_scales, mse, psnr, Shape, DYNAMIC_RANGE, MS_SSIM_WEIGHTS, PSNR_CEILING_DB};
pub use segment::{dice, toy_segment, SegmentationMap, N_CLASSES};
