//! Evaluation reports: JSON summary plus per-example and distance CSVs.
//!
//! All maps are ordered, floats use Rust's shortest-round-trip formatting,
//! lines end with LF, and files are written atomically, so identical runs
//! produce byte-identical reports.

use crate::error::Result;
use crate::eval::AttackDistanceStats;
use crate::io::atomic_write;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

/// Per-attack entry of an [`EvalReport`].
#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub accuracy: f64,
    pub distances: AttackDistanceStats,
}

/// Evaluation summary serialized as the JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    /// Raw config pairs echoed from the run configuration.
    pub config: BTreeMap<String, String>,
    pub clean_accuracy: f64,
    pub attacks: BTreeMap<String, AttackReport>,
    pub union_accuracy: f64,
    pub trained_against: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_mean_accuracy: Option<f64>,
    /// Present when PGD bounds were calibrated to an LPIPS target; the
    /// desk-scale calibration stands in for a perceptual-study calibration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_note: Option<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json().as_bytes())
    }
}

/// Per-example correctness table:
/// `example,label,clean_correct,<attack>_correct,...` with one column per
/// attack in the given order.
pub fn per_example_csv(
    labels: &[usize],
    clean: &[bool],
    attacks: &[(String, Vec<bool>)],
) -> String {
    let mut header = String::from("example,label,clean_correct");
    for (name, _) in attacks {
        header.push_str(&format!(",{name}_correct"));
    }
    let mut out = header;
    out.push('\n');
    for i in 0..labels.len() {
        out.push_str(&format!("{},{},{}", i, labels[i], clean[i] as u8));
        for (_, bits) in attacks {
            out.push_str(&format!(",{}", bits[i] as u8));
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::DistanceStats;

    fn stats() -> AttackDistanceStats {
        AttackDistanceStats {
            attack: "pgd_l2".into(),
            l2: DistanceStats::from_samples(&[0.1, 0.2]),
            linf: DistanceStats::from_samples(&[0.01]),
            lpips: DistanceStats::from_samples(&[0.3]),
        }
    }

    #[test]
    fn json_is_deterministic_and_ordered() {
        let mut attacks = BTreeMap::new();
        attacks.insert(
            "pgd_l2".to_string(),
            AttackReport {
                accuracy: 0.5,
                distances: stats(),
            },
        );
        let report = EvalReport {
            seed: 7,
            config: [("bound".to_string(), "0.5".to_string())]
                .into_iter()
                .collect(),
            clean_accuracy: 0.9,
            attacks,
            union_accuracy: 0.5,
            trained_against: vec![],
            unseen_mean_accuracy: Some(0.5),
            calibration_note: None,
        };
        let a = report.to_json();
        let b = report.to_json();
        assert_eq!(a, b);
        assert!(a.contains("\"clean_accuracy\": 0.9"));
        assert!(a.ends_with('\n'));
        assert!(!a.contains("calibration_note"));
    }

    #[test]
    fn per_example_csv_schema() {
        let csv = per_example_csv(
            &[0, 1],
            &[true, false],
            &[("lpa".to_string(), vec![false, false])],
        );
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "example,label,clean_correct,lpa_correct");
        assert_eq!(lines.next().unwrap(), "0,0,1,0");
        assert_eq!(lines.next().unwrap(), "1,1,0,0");
    }
}
