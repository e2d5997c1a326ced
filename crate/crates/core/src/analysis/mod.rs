//! Per-layer gradient norms, linear CKA, activation histograms and their
//! CSV, JSON and SVG renderings.
mod cka;
mod gradnorm;
mod histogram;
mod report;

pub use cka::{block_features, cka_matrix, linear_cka, CkaMatrix};
pub use gradnorm::{grad_norm_profile, GradNormProfile};
pub use histogram::{activation_histograms, bin_edges, histogram, uniform_layers, HistogramSet, LayerHistogram, DEFAULT_RANGE};
pub use report::{emit_report, render, Report, ReportFormat};
