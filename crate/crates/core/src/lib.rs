//! Exogenous/maturity/vintage decomposition of vintage credit panels.

pub mod chart;
pub mod design;
pub mod error;
pub mod estimator;
pub mod forecast;
pub mod frailty;
pub mod identify;
pub mod linalg;
pub mod panel;
pub mod semiparametric;
pub mod synth;
pub mod vintage_effects;

pub use design::{Block, EmvDesign, Layout};
pub use error::{EmvError, Result};
pub use estimator::{fit_glm, fit_linear, Family, FitResult};
pub use identify::{apply_constraint, constraint_sweep, drift_report, intrinsic, reidentify, ConstraintSpec, Decomposition};
pub use panel::{Cell, PanelGrid, ResponseTransform, TransformKind};
