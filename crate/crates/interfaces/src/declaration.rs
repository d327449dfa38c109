//! Analyst phase determinations attached to a sealed run.

use phasewatch_core::phases::PhaseLabel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::MonthWindow;

#[derive(Debug, Error, PartialEq)]
pub enum DeclarationError {
    #[error("{0} must be non-empty")]
    Empty(&'static str),
    #[error("declaration domain `{got}` does not match run domain `{expected}`")]
    DomainMismatch { expected: String, got: String },
    #[error("theta_low {low} must be finite and below theta_high {high}")]
    Thresholds { low: f64, high: f64 },
    #[error("penalty must be finite and non-negative, got {0}")]
    Penalty(f64),
    #[error("window start {start} is after end {end}")]
    Window { start: String, end: String },
}

/// Parameters the analyst had in view when declaring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclarationParameters {
    pub theta_low: f64,
    pub theta_high: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<MonthWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDeclaration {
    pub run_id: String,
    pub analyst_id: String,
    pub domain: String,
    pub declared_phase: PhaseLabel,
    pub parameters: DeclarationParameters,
    pub rationale: String,
    pub timestamp: String,
}

/// Request body; the run id comes from the route and the timestamp from the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclarationRequest {
    pub analyst_id: String,
    /// Defaults to the run's domain.
    #[serde(default)]
    pub domain: Option<String>,
    pub declared_phase: PhaseLabel,
    pub parameters: DeclarationParameters,
    pub rationale: String,
}

impl DeclarationRequest {
    pub fn into_declaration(
        self,
        run_id: &str,
        run_domain: &str,
        timestamp: String,
    ) -> Result<ExpertDeclaration, DeclarationError> {
        if self.analyst_id.trim().is_empty() {
            return Err(DeclarationError::Empty("analyst_id"));
        }
        if self.rationale.trim().is_empty() {
            return Err(DeclarationError::Empty("rationale"));
        }
        let domain = self.domain.unwrap_or_else(|| run_domain.to_string());
        if domain != run_domain {
            return Err(DeclarationError::DomainMismatch { expected: run_domain.to_string(), got: domain });
        }
        let p = &self.parameters;
        if !p.theta_low.is_finite() || !p.theta_high.is_finite() || !(p.theta_low < p.theta_high) {
            return Err(DeclarationError::Thresholds { low: p.theta_low, high: p.theta_high });
        }
        if let Some(rho) = p.penalty {
            if !(rho >= 0.0) || !rho.is_finite() {
                return Err(DeclarationError::Penalty(rho));
            }
        }
        if let Some(w) = &p.window {
            if w.start > w.end {
                return Err(DeclarationError::Window { start: w.start.to_string(), end: w.end.to_string() });
            }
        }
        Ok(ExpertDeclaration {
            run_id: run_id.to_string(),
            analyst_id: self.analyst_id,
            domain,
            declared_phase: self.declared_phase,
            parameters: self.parameters,
            rationale: self.rationale,
            timestamp,
        })
    }
}
