//! Run configuration shared by every command.
//!
//! A run is described by one structured document (the CLI reads it as
//! TOML). All fields are plain data so that identical documents produce
//! identical artifacts; the initial state of every experiment is the
//! steady state of the background control.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::mesh::{DomainSpec, Mask, PdeParams};
use crate::ocp::OcpOptions;
use crate::pod::Cutoff;
use crate::snapshots::SnapshotPipelineConfig;
use crate::stepper::sample_control;
use crate::Result;

/// Scalar control signal described in the config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControlSpec {
    Constant { value: f64 },
    /// `base + amplitude * sin(2 pi t / t_final)`
    Sine { base: f64, amplitude: f64 },
    /// `base + amplitude * cos(2 pi t / t_final)`
    Cosine { base: f64, amplitude: f64 },
}

impl ControlSpec {
    pub fn value(&self, t: f64, t_final: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * t / t_final;
        match self {
            ControlSpec::Constant { value } => *value,
            ControlSpec::Sine { base, amplitude } => base + amplitude * phase.sin(),
            ControlSpec::Cosine { base, amplitude } => base + amplitude * phase.cos(),
        }
    }

    /// Samples at the left endpoint of each time interval.
    pub fn samples(&self, params: &PdeParams) -> Vec<f64> {
        sample_control(params, |t| self.value(t, params.t_final))
    }

    fn validate(&self, key: &str) -> Result<()> {
        let finite = match self {
            ControlSpec::Constant { value } => value.is_finite(),
            ControlSpec::Sine { base, amplitude } | ControlSpec::Cosine { base, amplitude } => {
                base.is_finite() && amplitude.is_finite()
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config(format!("{key} must use finite coefficients")))
        }
    }
}

/// Spectral cutoffs and truncation options for the snapshot pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub cutoff_first: f64,
    pub cutoff_nonlin: f64,
    pub cutoff_second: f64,
    pub cutoff_combined: f64,
    pub max_nonlin_basis: Option<usize>,
    pub use_trapezoid_weights: bool,
    /// Keep only this many second-stage vectors in the combined basis.
    pub truncate_second: Option<usize>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            cutoff_first: 1e-8,
            cutoff_nonlin: 1e-8,
            cutoff_second: 1e-8,
            cutoff_combined: 1e-8,
            max_nonlin_basis: None,
            use_trapezoid_weights: false,
            truncate_second: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpSection {
    /// Control cost weight.
    pub gamma: f64,
    /// Relative gradient tolerance of the optimizer.
    pub tol: f64,
    pub max_iter: usize,
    /// Control generating the tracking target.
    pub reference_control: ControlSpec,
    /// Second-stage vector counts for the combined-basis sweep.
    pub truncations: Vec<usize>,
}

impl Default for OcpSection {
    fn default() -> Self {
        OcpSection {
            gamma: 1e-7,
            tol: 1e-6,
            max_iter: 200,
            reference_control: ControlSpec::Sine { base: 2.0, amplitude: 1.5 },
            truncations: vec![5, 10, 15, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    /// Background control; its steady state is the linearization point and
    /// the initial state of every experiment.
    pub steady: f64,
    /// Control driving the forward-error comparison.
    pub test_control: ControlSpec,
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection {
            steady: 2.0,
            test_control: ControlSpec::Cosine { base: 2.0, amplitude: 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: DomainSpec,
    pub params: PdeParams,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub ocp: OcpSection,
    #[serde(default)]
    pub control: ControlSection,
    /// Seed for the randomized checks in the verification command.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_seed() -> u64 {
    7
}

fn default_output_dir() -> String {
    "runs/default".to_string()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: DomainSpec { dimension: 2, cells_per_side: 32, mask: Mask::None },
            params: PdeParams { a: 0.01, b: 3.0, t_final: 1.0, theta: 1.0, k_steps: 65 },
            pipeline: PipelineSection::default(),
            ocp: OcpSection::default(),
            control: ControlSection::default(),
            seed: default_seed(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.dimension != 1 && self.grid.dimension != 2 {
            return Err(Error::Config(format!(
                "grid.dimension must be 1 or 2, got {}",
                self.grid.dimension
            )));
        }
        if self.grid.cells_per_side < 2 {
            return Err(Error::Config(format!(
                "grid.cells_per_side must be at least 2, got {}",
                self.grid.cells_per_side
            )));
        }
        self.params.validate()?;
        for (key, value) in [
            ("pipeline.cutoff_first", self.pipeline.cutoff_first),
            ("pipeline.cutoff_nonlin", self.pipeline.cutoff_nonlin),
            ("pipeline.cutoff_second", self.pipeline.cutoff_second),
            ("pipeline.cutoff_combined", self.pipeline.cutoff_combined),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!(
                    "{key} must be a positive finite threshold, got {value}"
                )));
            }
        }
        if self.pipeline.max_nonlin_basis == Some(0) {
            return Err(Error::Config(
                "pipeline.max_nonlin_basis must be at least 1 when set".into(),
            ));
        }
        if !(self.ocp.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "ocp.gamma must be nonnegative, got {}",
                self.ocp.gamma
            )));
        }
        if !(self.ocp.tol > 0.0) {
            return Err(Error::Config(format!(
                "ocp.tol must be positive, got {}",
                self.ocp.tol
            )));
        }
        if self.ocp.max_iter == 0 {
            return Err(Error::Config("ocp.max_iter must be at least 1".into()));
        }
        self.ocp.reference_control.validate("ocp.reference_control")?;
        self.control.test_control.validate("control.test_control")?;
        if !self.control.steady.is_finite() {
            return Err(Error::Config(format!(
                "control.steady must be finite, got {}",
                self.control.steady
            )));
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn pipeline_config(&self) -> SnapshotPipelineConfig {
        SnapshotPipelineConfig {
            cutoff_first: Cutoff::Threshold(self.pipeline.cutoff_first),
            cutoff_nonlin: Cutoff::Threshold(self.pipeline.cutoff_nonlin),
            cutoff_second: Cutoff::Threshold(self.pipeline.cutoff_second),
            cutoff_combined: Cutoff::Threshold(self.pipeline.cutoff_combined),
            include_ybar: true,
            max_nonlin_basis: self.pipeline.max_nonlin_basis,
            use_trapezoid_weights: self.pipeline.use_trapezoid_weights,
            truncate_second: self.pipeline.truncate_second,
        }
    }

    pub fn ocp_options(&self) -> OcpOptions {
        OcpOptions {
            tol: self.ocp.tol,
            max_iters: self.ocp.max_iter,
            ..OcpOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{sampled_reference_control, sampled_test_control};

    #[test]
    fn default_config_is_valid_and_carries_the_documented_values() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.params.a, 0.01);
        assert_eq!(cfg.params.b, 3.0);
        assert_eq!(cfg.params.k_steps, 65);
        assert_eq!(cfg.params.theta, 1.0);
        assert_eq!(cfg.control.steady, 2.0);
        assert_eq!(cfg.ocp.gamma, 1e-7);
        assert_eq!(cfg.pipeline.cutoff_first, 1e-8);
        assert_eq!(
            cfg.pipeline_config().cutoff_combined,
            Cutoff::Threshold(1e-8)
        );
        assert_eq!(cfg.ocp_options().max_iters, 200);
    }

    #[test]
    fn config_roundtrips_through_serde() {
        let mut cfg = RunConfig::default();
        cfg.grid.mask = Mask::UpperRightQuadrant;
        cfg.pipeline.truncate_second = Some(12);
        cfg.ocp.truncations = vec![3, 9];
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_required_key_is_named_in_the_error() {
        let text = r#"{
            "grid": {"dimension": 2, "cells_per_side": 8},
            "params": {"b": 3.0, "t_final": 1.0, "theta": 1.0, "k_steps": 65}
        }"#;
        let err = serde_json::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("`a`"), "unhelpful error: {err}");
    }

    #[test]
    fn out_of_range_scheme_weight_is_rejected() {
        for theta in [0.4, 1.1] {
            let mut cfg = RunConfig::default();
            cfg.params.theta = theta;
            let err = cfg.validate().unwrap_err();
            assert!(err.to_string().contains("theta"), "{err}");
        }
    }

    #[test]
    fn degenerate_values_are_rejected_with_the_key_name() {
        let mut cfg = RunConfig::default();
        cfg.grid.cells_per_side = 0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("cells_per_side"));

        let mut cfg = RunConfig::default();
        cfg.pipeline.cutoff_second = 0.0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("pipeline.cutoff_second"));

        let mut cfg = RunConfig::default();
        cfg.ocp.gamma = -1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("ocp.gamma"));

        let mut cfg = RunConfig::default();
        cfg.pipeline.max_nonlin_basis = Some(0);
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("max_nonlin_basis"));

        let mut cfg = RunConfig::default();
        cfg.output_dir = String::new();
        assert!(cfg.validate().unwrap_err().to_string().contains("output_dir"));
    }

    #[test]
    fn control_specs_match_the_builtin_samplers() {
        let cfg = RunConfig::default();
        let reference = cfg.ocp.reference_control.samples(&cfg.params);
        assert_eq!(reference, sampled_reference_control(&cfg.params));
        let test = cfg.control.test_control.samples(&cfg.params);
        assert_eq!(test, sampled_test_control(&cfg.params));
        let flat = ControlSpec::Constant { value: 2.0 }.samples(&cfg.params);
        assert!(flat.iter().all(|&v| v == 2.0));
        assert_eq!(flat.len(), cfg.params.k_steps);
    }
}
