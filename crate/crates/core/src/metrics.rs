//! Error rates and ranking quality for scored samples.
//!
//! Scores grow with confidence that a sample is Real. A sample is accepted
//! as Real when `score >= threshold`.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Cls;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least one {0} sample")]
    MissingClass(Cls),
    #[error("sample {id:?} has non-finite score")]
    NonFiniteScore { id: String },
    #[error("line {line}: {message}")]
    Decode { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: Cls,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, score: f64, label: Cls) -> Self {
        Self {
            id: id.into(),
            score,
            label,
        }
    }
}

/// Reads one [`ScoredSample`] per non-blank line.
pub fn read_scores(reader: impl BufRead) -> Result<Vec<ScoredSample>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Decode {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScoredSample = serde_json::from_str(&line).map_err(|e| MetricsError::Decode {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Scores split by class after checking both classes are present and every
/// score is finite.
fn split(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let mut real = Vec::new();
    let mut spoof = Vec::new();
    for s in samples {
        if !s.score.is_finite() {
            return Err(MetricsError::NonFiniteScore { id: s.id.clone() });
        }
        match s.label {
            Cls::Real => real.push(s.score),
            Cls::Spoof => spoof.push(s.score),
        }
    }
    if real.is_empty() {
        return Err(MetricsError::MissingClass(Cls::Real));
    }
    if spoof.is_empty() {
        return Err(MetricsError::MissingClass(Cls::Spoof));
    }
    Ok((real, spoof))
}

fn rates(real: &[f64], spoof: &[f64], threshold: f64) -> (f64, f64) {
    let accepted_spoof = spoof.iter().filter(|&&s| s >= threshold).count();
    let rejected_real = real.iter().filter(|&&s| s < threshold).count();
    (
        accepted_spoof as f64 / spoof.len() as f64,
        rejected_real as f64 / real.len() as f64,
    )
}

/// `(FAR, FRR)` at `threshold`.
pub fn far_frr(samples: &[ScoredSample], threshold: f64) -> Result<(f64, f64), MetricsError> {
    let (real, spoof) = split(samples)?;
    Ok(rates(&real, &spoof, threshold))
}

pub fn hter(samples: &[ScoredSample], threshold: f64) -> Result<f64, MetricsError> {
    let (far, frr) = far_frr(samples, threshold)?;
    Ok((far + frr) / 2.0)
}

/// Mann–Whitney estimate of `P(real > spoof) + ½·P(real = spoof)`.
///
/// Sorts the pooled scores once and counts, for each real score, the spoof
/// scores strictly below and equal to it.
pub fn auc(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let (real, mut spoof) = split(samples)?;
    spoof.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for r in &real {
        let below = spoof.partition_point(|s| s < r);
        let not_above = spoof.partition_point(|s| s <= r);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (real.len() as f64 * spoof.len() as f64))
}

/// Candidate thresholds: `-∞`, midpoints between adjacent distinct scores,
/// and `+∞`.
pub fn candidate_thresholds(samples: &[ScoredSample]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut out = Vec::with_capacity(scores.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub eer: f64,
    pub far: f64,
    pub frr: f64,
}

/// Threshold minimizing `|FAR − FRR|`; ties go to the smaller HTER and then
/// the smaller threshold. The reported EER is the HTER at that threshold.
pub fn eer_threshold(samples: &[ScoredSample]) -> Result<EerPoint, MetricsError> {
    let (real, spoof) = split(samples)?;
    let mut best: Option<(f64, f64, EerPoint)> = None;
    for t in candidate_thresholds(samples) {
        let (far, frr) = rates(&real, &spoof, t);
        let gap = (far - frr).abs();
        let h = (far + frr) / 2.0;
        let better = match &best {
            None => true,
            Some((bg, bh, _)) => gap < *bg || (gap == *bg && h < *bh),
        };
        if better {
            best = Some((
                gap,
                h,
                EerPoint {
                    threshold: t,
                    eer: h,
                    far,
                    frr,
                },
            ));
        }
    }
    Ok(best.expect("candidate list is never empty").2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Report {
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub auc: f64,
    pub threshold: f64,
}

/// Full report at a fixed threshold, or at the EER threshold when `None`.
pub fn evaluate(samples: &[ScoredSample], threshold: Option<f64>) -> Result<Report, MetricsError> {
    let threshold = match threshold {
        Some(t) => t,
        None => eer_threshold(samples)?.threshold,
    };
    let (far, frr) = far_frr(samples, threshold)?;
    Ok(Report {
        far,
        frr,
        hter: (far + frr) / 2.0,
        auc: auc(samples)?,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(real: &[f64], spoof: &[f64]) -> Vec<ScoredSample> {
        let r = real.iter().enumerate().map(|(i, &s)| ScoredSample::new(format!("r{i}"), s, Cls::Real));
        let f = spoof.iter().enumerate().map(|(i, &s)| ScoredSample::new(format!("s{i}"), s, Cls::Spoof));
        r.chain(f).collect()
    }

    #[test]
    fn far_frr_cases() {
        let sep = set(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(far_frr(&sep, 0.5).unwrap(), (0.0, 0.0));
        assert_eq!(far_frr(&sep, -1.0).unwrap(), (1.0, 0.0));
        let mixed = set(&[0.9, 0.6], &[0.7, 0.2]);
        assert_eq!(far_frr(&mixed, 0.65).unwrap(), (0.5, 0.5));
        assert_eq!(hter(&mixed, 0.65).unwrap(), 0.5);
        let flat = set(&[0.4, 0.4], &[0.4]);
        assert_eq!(far_frr(&flat, 0.4).unwrap(), (1.0, 0.0));
        assert_eq!(hter(&flat, 0.4).unwrap(), 0.5);
    }

    #[test]
    fn missing_class() {
        let only_real = set(&[0.3], &[]);
        assert_eq!(far_frr(&only_real, 0.0), Err(MetricsError::MissingClass(Cls::Spoof)));
        assert_eq!(auc(&set(&[], &[0.3])), Err(MetricsError::MissingClass(Cls::Real)));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&set(&[3.0, 4.0], &[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[3.0, 1.0], &[4.0, 2.0])).unwrap(), 0.25);
        assert_eq!(auc(&set(&[5.0, 5.0], &[5.0])).unwrap(), 0.5);
    }

    #[test]
    fn eer_cases() {
        let p = eer_threshold(&set(&[3.0, 1.0], &[4.0, 2.0])).unwrap();
        assert_eq!((p.threshold, p.eer), (2.5, 0.5));
        let p = eer_threshold(&set(&[3.0, 4.0], &[1.0, 2.0])).unwrap();
        assert_eq!((p.threshold, p.eer), (2.5, 0.0));
        let p = eer_threshold(&set(&[1.0], &[0.0])).unwrap();
        assert_eq!((p.threshold, p.eer), (0.5, 0.0));
    }

    #[test]
    fn candidates_include_infinities() {
        let c = candidate_thresholds(&set(&[1.0, 3.0], &[3.0]));
        assert_eq!(c, vec![f64::NEG_INFINITY, 2.0, f64::INFINITY]);
    }

    #[test]
    fn reads_jsonl() {
        let text = "{\"id\":\"a\",\"score\":0.5,\"label\":\"Real\"}\n\n{\"id\":\"b\",\"score\":1,\"label\":\"Spoof\"}\n{oops\n";
        let err = read_scores(text.as_bytes()).unwrap_err();
        assert!(matches!(err, MetricsError::Decode { line: 4, .. }));
        let ok = read_scores(&text.as_bytes()[..text.len() - 6]).unwrap();
        assert_eq!(ok.len(), 2);
    }
}
