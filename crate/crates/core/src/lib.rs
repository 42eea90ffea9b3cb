//! Multi-site image harmonization by content/style disentangled cycle
//! translation.
//!
//! Images from several acquisition sites are split into a site-invariant
//! content code and a site-specific style code. A single generator
//! recombines any content with any site's style, which gives three inference
//! modes: harmonize to a site (style drawn from that site's style generator),
//! harmonize to a reference image (style encoded from it), and interpolate
//! between two styles.
//!
//! Modules:
//! * [`data`]: volumes, slice-triplet preprocessing, the synthetic multi-site
//!   generator and on-disk formats;
//! * [`nets`]: the five networks and the checkpoint container;
//! * [`losses`]: the terms of the training objective;
//! * [`train`]: the training loop with exact resumption;
//! * [`infer`]: the inference modes and volume reassembly;
//! * [`metrics`]: FID, KID, MAE, MS-SSIM, PSNR, toy segmentation and Dice,
//!   plus the full evaluation battery;
//! * [`config`] and [`cli`]: run configuration and the command-line front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod train;

pub use error::{HarmonError, Result};
