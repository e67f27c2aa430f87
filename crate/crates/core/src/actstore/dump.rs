use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::container::{self, f32s_to_le, le_to_f32s, le_to_u32s};
use crate::error::{Error, Result};

/// Prompt condition: input style (Structured/Natural) x output format
/// (Letter/Free-text), plus constraint-first letter variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    SL,
    NL,
    SF,
    NF,
    #[serde(rename = "NL_CF")]
    NlCf,
    #[serde(rename = "SL_CF")]
    SlCf,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::SL,
        Condition::NL,
        Condition::SF,
        Condition::NF,
        Condition::NlCf,
        Condition::SlCf,
    ];

    /// Forced-letter conditions carry the appended multiple-choice scaffold.
    pub fn is_multiple_choice(self) -> bool {
        !matches!(self, Condition::SF | Condition::NF)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::SL => "SL",
            Condition::NL => "NL",
            Condition::SF => "SF",
            Condition::NF => "NF",
            Condition::NlCf => "NL_CF",
            Condition::SlCf => "SL_CF",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invariant(format!("unknown condition {s:?}")))
    }
}

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        TokenSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_within(&self, outer: &TokenSpan) -> bool {
        outer.start <= self.start && self.end <= outer.end
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Residual-stream activations for one (case, condition, model, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub case_id: String,
    pub condition: Condition,
    pub model_id: String,
    pub layer: u32,
    pub token_count: usize,
    pub dim: usize,
    /// Row-major `token_count x dim`.
    pub residuals: Vec<f32>,
    pub token_ids: Vec<u32>,
    pub vignette_mask: TokenSpan,
    pub scaffold_mask: Option<TokenSpan>,
    pub decision_index: usize,
    pub content_range: TokenSpan,
    /// Harness-recorded pooling/templating convention (e.g. `chat_user_content`).
    pub content_convention: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpHeader {
    kind: String,
    case_id: String,
    condition: Condition,
    model_id: String,
    layer: u32,
    token_count: usize,
    dim: usize,
    vignette_mask: TokenSpan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scaffold_mask: Option<TokenSpan>,
    decision_index: usize,
    content_range: TokenSpan,
    content_convention: String,
}

const DUMP_KIND: &str = "activation_dump";

impl ActivationDump {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.residuals[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.residuals.chunks_exact(self.dim.max(1))
    }

    pub fn decision_row(&self) -> &[f32] {
        self.row(self.decision_index)
    }

    fn check_span(&self, name: &str, span: &TokenSpan) -> Result<()> {
        if span.start > span.end || span.end > self.token_count {
            return Err(Error::invariant(format!(
                "{name} [{}, {}) outside 0..={}",
                span.start, span.end, self.token_count
            )));
        }
        Ok(())
    }

    /// Checks every structural invariant of a dump.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invariant("dim must be positive"));
        }
        if self.token_ids.len() != self.token_count {
            return Err(Error::invariant(format!(
                "token_ids has {} entries, token_count is {}",
                self.token_ids.len(),
                self.token_count
            )));
        }
        if self.residuals.len() != self.token_count * self.dim {
            return Err(Error::invariant(format!(
                "residual matrix has {} entries, expected {}x{}",
                self.residuals.len(),
                self.token_count,
                self.dim
            )));
        }
        if self.residuals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual matrix"));
        }
        if self.decision_index >= self.token_count {
            return Err(Error::invariant(format!(
                "decision_index {} not in [0, {})",
                self.decision_index, self.token_count
            )));
        }
        self.check_span("vignette_mask", &self.vignette_mask)?;
        self.check_span("content_range", &self.content_range)?;
        if !self.vignette_mask.is_within(&self.content_range) {
            return Err(Error::invariant("vignette_mask not inside content_range"));
        }
        match (&self.scaffold_mask, self.condition.is_multiple_choice()) {
            (Some(span), true) => self.check_span("scaffold_mask", span)?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::invariant(format!(
                    "scaffold_mask present on free-text condition {}",
                    self.condition
                )))
            }
            (None, true) => {
                return Err(Error::invariant(format!(
                    "scaffold_mask missing on multiple-choice condition {}",
                    self.condition
                )))
            }
        }
        Ok(())
    }

    fn header(&self) -> DumpHeader {
        DumpHeader {
            kind: DUMP_KIND.into(),
            case_id: self.case_id.clone(),
            condition: self.condition,
            model_id: self.model_id.clone(),
            layer: self.layer,
            token_count: self.token_count,
            dim: self.dim,
            vignette_mask: self.vignette_mask,
            scaffold_mask: self.scaffold_mask,
            decision_index: self.decision_index,
            content_range: self.content_range,
            content_convention: self.content_convention.clone(),
        }
    }

    /// Container bytes for this dump; refuses to encode an invalid dump.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut payload = Vec::with_capacity(self.residuals.len() * 4 + self.token_ids.len() * 4);
        f32s_to_le(&self.residuals, &mut payload);
        for id in &self.token_ids {
            payload.extend_from_slice(&id.to_le_bytes());
        }
        container::encode(&self.header(), &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (DumpHeader, _) = container::decode(bytes)?;
        if h.kind != DUMP_KIND {
            return Err(Error::MalformedHeader(format!(
                "expected {DUMP_KIND}, found {}",
                h.kind
            )));
        }
        let residual_bytes = h
            .token_count
            .checked_mul(h.dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::MalformedHeader("token_count x dim overflows".into()))?;
        let expected = residual_bytes as u64 + h.token_count as u64 * 4;
        if payload.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: payload.len() as u64,
            });
        }
        let dump = ActivationDump {
            case_id: h.case_id,
            condition: h.condition,
            model_id: h.model_id,
            layer: h.layer,
            token_count: h.token_count,
            dim: h.dim,
            residuals: le_to_f32s(&payload[..residual_bytes]),
            token_ids: le_to_u32s(&payload[residual_bytes..]),
            vignette_mask: h.vignette_mask,
            scaffold_mask: h.scaffold_mask,
            decision_index: h.decision_index,
            content_range: h.content_range,
            content_convention: h.content_convention,
        };
        dump.validate()?;
        Ok(dump)
    }
}

pub fn write_dump(dump: &ActivationDump, path: &Path) -> Result<()> {
    let bytes = dump.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<ActivationDump> {
    let bytes = container::read_file(path)?;
    ActivationDump::from_bytes(&bytes)
}

/// Longest common token-id prefix of two dumps of the same case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SharedPrefix {
    pub length: usize,
    /// Both dumps' vignette masks end at or before `length`.
    pub vignette_inside: bool,
}

pub fn shared_prefix_length(a: &ActivationDump, b: &ActivationDump) -> Result<SharedPrefix> {
    if a.case_id != b.case_id {
        return Err(Error::invariant(format!(
            "case mismatch: {} vs {}",
            a.case_id, b.case_id
        )));
    }
    if a.model_id != b.model_id {
        return Err(Error::invariant(format!(
            "model mismatch: {} vs {}",
            a.model_id, b.model_id
        )));
    }
    let length = a
        .token_ids
        .iter()
        .zip(&b.token_ids)
        .take_while(|(x, y)| x == y)
        .count();
    Ok(SharedPrefix {
        length,
        vignette_inside: a.vignette_mask.end <= length && b.vignette_mask.end <= length,
    })
}

/// Relative L2 differences between residual rows inside a shared prefix.
#[derive(Debug, Clone, Serialize)]
pub struct PrefixNoiseReport {
    pub rows_compared: usize,
    pub median_relative_l2: f64,
    pub max_relative_l2: f64,
    pub tolerance: f64,
    /// Token indices whose relative difference exceeds `tolerance`.
    pub violations: Vec<usize>,
}

impl PrefixNoiseReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares residual rows of two same-case dumps over their shared prefix.
/// Rows whose reference norm is zero are compared by absolute norm.
pub fn prefix_noise(
    a: &ActivationDump,
    b: &ActivationDump,
    tolerance: f64,
) -> Result<PrefixNoiseReport> {
    if a.dim != b.dim {
        return Err(Error::shape(format!("dim {} vs {}", a.dim, b.dim)));
    }
    let prefix = shared_prefix_length(a, b)?;
    let mut rel = Vec::with_capacity(prefix.length);
    let mut violations = Vec::new();
    for t in 0..prefix.length {
        let (ra, rb) = (a.row(t), b.row(t));
        let diff: f64 = ra
            .iter()
            .zip(rb)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = ra.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        let r = if norm > 0.0 { diff / norm } else { diff };
        if r > tolerance {
            violations.push(t);
        }
        rel.push(r);
    }
    Ok(PrefixNoiseReport {
        rows_compared: rel.len(),
        median_relative_l2: crate::stats::median(&rel).unwrap_or(0.0),
        max_relative_l2: rel.iter().copied().fold(0.0, f64::max),
        tolerance,
        violations,
    })
}
