//! Linear-layer backward passes with per-sample gradient clipping, executed
//! on a simulated two-level memory hierarchy.
//!
//! Four workflows compute the same layer gradient with very different data
//! movement: the non-private baseline, a materializing DP pass, a
//! recomputation-based DP pass, and a fused pass that all-reduces
//! per-sample norms block-wise without ever writing per-sample gradients
//! to main memory. Each run returns the gradient together with exact
//! traffic, compute, barrier and kernel-launch counters.
//!
//! Numerics are generic over [`Scalar`] (`f32`, `f64`); the aliases below
//! fix the element type. Traffic is always counted at
//! [`MemSpec::dtype_width_bytes`], whatever the host type.
//!
//! ```
//! use flashdp::workflows::run_workflow;
//! use flashdp::{DPConfig, MemSpec, Reduction, Tensor64, WorkflowKind};
//!
//! let x = Tensor64::from_f64(vec![2, 1, 2], &[1.0, 2.0, 2.0, 2.0])?;
//! let dy = Tensor64::from_f64(vec![2, 1, 1], &[3.0, 5.0])?;
//! let cfg = DPConfig::new(10.0, 0.0, Reduction::Sum, 0)?;
//! let spec = MemSpec::with_elements(64, 8)?;
//!
//! let flash = run_workflow(WorkflowKind::FlashDp, &x, &dy, &cfg, spec)?;
//! let implicit = run_workflow(WorkflowKind::ImplicitDp, &x, &dy, &cfg, spec)?;
//! assert_eq!(flash.input_bytes_loaded, 48);
//! assert_eq!(implicit.input_bytes_loaded, 96);
//! assert!(flash.grad_w.max_abs_diff(&implicit.grad_w)? <= 1e-12);
//! # Ok::<(), flashdp::Error>(())
//! ```

pub mod bench;
pub mod dpcore;
pub mod error;
pub mod memmodel;
pub mod oracle;
pub mod scalar;
pub mod tensor;
pub mod tiling;
pub mod workflows;

pub use dpcore::{DPConfig, Reduction};
pub use error::{Error, Result};
pub use memmodel::{MemSpec, TrafficReport};
pub use scalar::Scalar;
pub use tiling::{plan_blocks, BlockPlan, LayerDims};
pub use workflows::WorkflowKind;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type MemSim64 = memmodel::MemSim<f64>;
pub type OptimizerState64 = dpcore::OptimizerState<f64>;
pub type BackwardResult64 = workflows::BackwardResult<f64>;
