//! Desk-scale privacy attacks: label inference, membership inference and
//! input reconstruction from shared gradients.

pub mod ir;
pub mod lia;
pub mod mia;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ir::{ir_reconstruct, IrConfig, IrResult};
pub use lia::{estimate_mean_predictions, final_bias_grad, lia_infer_counts, logit_grad_identity};
pub use mia::{mia_run, Adam, MiaTestbed, MiaTrainConfig, ShadowSetup, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Lia,
    Mia,
    Ir,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Lia, AttackKind::Mia, AttackKind::Ir];

    pub fn tag(self) -> &'static str {
        match self {
            AttackKind::Lia => "lia",
            AttackKind::Mia => "mia",
            AttackKind::Ir => "ir",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| {
                Error::Config(vec![format!(
                    "unknown attack `{s}`; valid tags are lia, mia, ir"
                )])
            })
    }
}

/// Precision, recall and F1 for one class of a binary decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Member-vs-non-member confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    /// Members predicted as members.
    pub tp: u64,
    /// Non-members predicted as members.
    pub fp: u64,
    /// Non-members predicted as non-members.
    pub tn: u64,
    /// Members predicted as non-members.
    pub fn_: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class_metrics(hit: u64, false_pos: u64, miss: u64) -> ClassMetrics {
    let precision = ratio(hit, hit + false_pos);
    let recall = ratio(hit, hit + miss);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
    }
}

impl Confusion {
    /// `truth[i]` and `pred[i]` are true for members.
    pub fn from_labels(truth: &[bool], pred: &[bool]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Dimension {
                expected: truth.len(),
                got: pred.len(),
            });
        }
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn member(&self) -> ClassMetrics {
        class_metrics(self.tp, self.fp, self.fn_)
    }

    pub fn nonmember(&self) -> ClassMetrics {
        class_metrics(self.tn, self.fn_, self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Finite(f64),
    /// The two signals are identical.
    Infinite,
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.5e}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

/// `10 log10(1 / MSE)`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<Psnr> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(-10.0 * mse.log10())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackOutcome {
    Membership {
        member: ClassMetrics,
        nonmember: ClassMetrics,
        accuracy: f64,
    },
    Reconstruction {
        psnr: Psnr,
        objective: f64,
        max_error: f64,
    },
    LabelCounts {
        /// L1 distance between inferred and true per-class counts.
        l1_error: u64,
        /// Labels attacked, summed over trials.
        labels: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub setting: String,
    pub outcome: AttackOutcome,
}

impl AttackReport {
    /// Rows of `(metric, member value, non-member value)`; single-valued
    /// metrics leave the non-member column empty.
    pub fn rows(&self) -> Vec<(String, String, String)> {
        let m = |v: f64| format!("{v:.5e}");
        match &self.outcome {
            AttackOutcome::Membership {
                member,
                nonmember,
                accuracy,
            } => vec![
                (
                    "precision".into(),
                    m(member.precision),
                    m(nonmember.precision),
                ),
                ("recall".into(), m(member.recall), m(nonmember.recall)),
                ("f1".into(), m(member.f1), m(nonmember.f1)),
                ("accuracy".into(), m(*accuracy), String::new()),
            ],
            AttackOutcome::Reconstruction {
                psnr,
                objective,
                max_error,
            } => vec![
                ("psnr_db".into(), psnr.to_string(), String::new()),
                ("objective".into(), m(*objective), String::new()),
                ("max_error".into(), m(*max_error), String::new()),
            ],
            AttackOutcome::LabelCounts { l1_error, labels } => vec![
                ("l1_count_error".into(), l1_error.to_string(), String::new()),
                ("labels_total".into(), labels.to_string(), String::new()),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psnr_examples() {
        let a = [0.2, 0.4, 0.9];
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        let Psnr::Finite(v) = psnr(&a, &b).unwrap() else {
            panic!()
        };
        assert!((v - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &a[..2]).is_err());
    }

    proptest! {
        #[test]
        fn psnr_matches_direct_formula_and_is_symmetric(
            pair in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..50)
        ) {
            let a: Vec<f64> = pair.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pair.iter().map(|p| p.1).collect();
            let mut mse = 0.0;
            for (x, y) in a.iter().zip(&b) {
                mse += (x - y).powi(2);
            }
            mse /= a.len() as f64;
            let got = psnr(&a, &b).unwrap();
            prop_assert_eq!(got, psnr(&b, &a).unwrap());
            if mse > 0.0 {
                prop_assert!((got.db() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
            }
        }

        #[test]
        fn confusion_metrics_match_reference(truth in proptest::collection::vec(any::<bool>(), 1..80), flips in proptest::collection::vec(any::<bool>(), 80)) {
            let pred: Vec<bool> = truth.iter().zip(&flips).map(|(t, f)| t ^ f).collect();
            let c = Confusion::from_labels(&truth, &pred).unwrap();
            let tp = truth.iter().zip(&pred).filter(|(t, p)| **t && **p).count() as f64;
            let pred_pos = pred.iter().filter(|p| **p).count() as f64;
            let pos = truth.iter().filter(|t| **t).count() as f64;
            let p = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
            let r = if pos > 0.0 { tp / pos } else { 0.0 };
            prop_assert!((c.member().precision - p).abs() < 1e-15);
            prop_assert!((c.member().recall - r).abs() < 1e-15);
            for m in [c.member(), c.nonmember()] {
                prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall) && (0.0..=1.0).contains(&m.f1));
            }
            let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64;
            prop_assert!((c.accuracy() - correct / truth.len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn attack_tags() {
        assert_eq!("mia".parse::<AttackKind>().unwrap(), AttackKind::Mia);
        let err = "bogus".parse::<AttackKind>().unwrap_err().to_string();
        assert!(err.contains("lia") && err.contains("ir"));
    }
}
