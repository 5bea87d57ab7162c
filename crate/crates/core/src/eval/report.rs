use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::selectivity::SelectivityOutcome;

/// Everything measured for one property. Fields that were not computed stay
/// `None` and render as empty cells.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AmnesicReport {
    pub property: String,
    pub removed_dirs: Option<usize>,
    pub num_classes: Option<usize>,
    pub majority: Option<f64>,
    pub probe_acc: Option<f64>,
    pub vanilla_acc: Option<f64>,
    pub rand_acc: Option<f64>,
    pub selectivity_acc: Option<f64>,
    pub amnesic_acc: Option<f64>,
    pub mean_kl_rand: Option<f64>,
    pub mean_kl_amnesic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_label: Option<PerLabelTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selectivity: Option<SelectivityOutcome>,
}

impl AmnesicReport {
    pub fn new(property: impl Into<String>) -> Self {
        AmnesicReport {
            property: property.into(),
            ..Default::default()
        }
    }

    /// `vanilla - amnesic`, when both are known.
    pub fn delta(&self) -> Option<f64> {
        Some(self.vanilla_acc? - self.amnesic_acc?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerLabelRow {
    pub label: String,
    pub count: usize,
    pub vanilla: f64,
    pub rand: f64,
    pub amnesic: f64,
    /// `vanilla - amnesic`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerLabelTable {
    pub property: String,
    pub rows: Vec<PerLabelRow>,
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default()
}

fn nats(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn count(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One column per report, one row per measurement. Accuracies are in
/// percent, KL in nats.
pub fn table_tsv(reports: &[AmnesicReport]) -> String {
    type Cell = fn(&AmnesicReport) -> String;
    let rows: [(&str, &str, Cell); 10] = [
        ("Properties", "N. dir", |r| count(r.removed_dirs)),
        ("Properties", "N. classes", |r| count(r.num_classes)),
        ("Properties", "Majority", |r| pct(r.majority)),
        ("Probing", "Vanilla", |r| pct(r.probe_acc)),
        ("LM-Acc", "Vanilla", |r| pct(r.vanilla_acc)),
        ("LM-Acc", "Rand", |r| pct(r.rand_acc)),
        ("LM-Acc", "Selectivity", |r| pct(r.selectivity_acc)),
        ("LM-Acc", "Amnesic", |r| pct(r.amnesic_acc)),
        ("LM-DKL", "Rand", |r| nats(r.mean_kl_rand)),
        ("LM-DKL", "Amnesic", |r| nats(r.mean_kl_amnesic)),
    ];
    let mut out = String::from("section\tmetric");
    for r in reports {
        out.push('\t');
        out.push_str(&r.property);
    }
    out.push('\n');
    for (section, metric, cell) in rows {
        out.push_str(section);
        out.push('\t');
        out.push_str(metric);
        for r in reports {
            out.push('\t');
            out.push_str(&cell(r));
        }
        out.push('\n');
    }
    out
}

/// `label vanilla rand amnesic delta`, in percent.
pub fn per_label_tsv(table: &PerLabelTable) -> String {
    let mut out = format!("{}\tvanilla\trand\tamnesic\tdelta\n", table.property);
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            r.label,
            100.0 * r.vanilla,
            100.0 * r.rand,
            100.0 * r.amnesic,
            100.0 * r.delta
        );
    }
    out
}

pub fn reports_to_json(reports: &[AmnesicReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}
