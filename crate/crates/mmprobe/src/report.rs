//! Markdown rendering of metric reports.
//!
//! One table per reported quantity family, percentages to one decimal, and
//! every rate's denominator footnoted. Layout follows the run pipeline:
//! score rates by condition, the question-format ablation, knowledge-question
//! scores, the sufficiency/necessity breakdown with its raw joint counts,
//! retrieval recall, and retrieval-augmented score rates.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::metrics::MetricReport;

/// Renders a rate as a one-decimal percentage, the way result tables are
/// usually read.
pub fn pct(rate: f64) -> String {
    format!("{:.1}", rate * 100.0)
}

fn row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn header(cells: &[String]) -> String {
    let mut out = row(cells);
    out.push_str(&row(&cells.iter().map(|_| "---".to_string()).collect::<Vec<_>>()));
    out
}

fn pair_label(report: &MetricReport) -> String {
    format!("{} / {}", report.model, report.dataset)
}

/// Renders every report into one Markdown document.
pub fn render_markdown(reports: &[MetricReport], clamp_gap_rate: bool) -> String {
    let mut md = String::from("# Benchmark ablation report\n");

    score_rate_section(&mut md, reports);
    format_ablation_section(&mut md, reports, clamp_gap_rate);
    knowledge_section(&mut md, reports);
    sufficiency_section(&mut md, reports);
    recall_section(&mut md, reports);
    rag_section(&mut md, reports);
    footnotes(&mut md, reports);

    md
}

fn score_rate_section(md: &mut String, reports: &[MetricReport]) {
    let conditions: BTreeSet<&String> = reports
        .iter()
        .flat_map(|r| r.sr_by_condition.keys())
        .collect();
    if conditions.is_empty() {
        return;
    }
    md.push_str("\n## Score rate by condition (%)\n\n");
    let mut cells = vec!["model / dataset".to_string()];
    cells.extend(conditions.iter().map(|c| c.to_string()));
    cells.push("random guess".into());
    md.push_str(&header(&cells));
    for report in reports {
        let mut cells = vec![pair_label(report)];
        for condition in &conditions {
            cells.push(
                report
                    .sr_by_condition
                    .get(*condition)
                    .map(|&v| pct(v))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        cells.push(report.random_guess.map(pct).unwrap_or_else(|| "-".into()));
        md.push_str(&row(&cells));
    }
}

fn format_ablation_section(md: &mut String, reports: &[MetricReport], clamp: bool) {
    let with_gr: Vec<&MetricReport> = reports.iter().filter(|r| !r.gr_by_format.is_empty()).collect();
    if with_gr.is_empty() {
        return;
    }
    md.push_str("\n## Question format ablation: SR with image and GR (%)\n\n");
    let formats = ["original", "shuffled", "open_ended"];
    let mut cells = vec!["model / dataset".to_string()];
    for f in formats {
        cells.push(format!("{f} SR"));
        cells.push(format!("{f} GR"));
    }
    md.push_str(&header(&cells));
    let mut clamped_any = false;
    for report in &with_gr {
        let mut cells = vec![pair_label(report)];
        for f in formats {
            let sr = format_condition_sr(report, f);
            cells.push(sr);
            let gr = report.gr_by_format.get(f).map(|&g| {
                if clamp && g < 0.0 {
                    clamped_any = true;
                    format!("{}[^clamp]", pct(0.0))
                } else {
                    pct(g)
                }
            });
            cells.push(gr.unwrap_or_else(|| "-".into()));
        }
        md.push_str(&row(&cells));
    }
    if clamped_any {
        md.push_str(
            "\n[^clamp]: negative gap rate (image-absent score exceeded image-present) clamped to 0.0.\n",
        );
    }
}

fn format_condition_sr(report: &MetricReport, format: &str) -> String {
    let key = format!("with_image.{format}");
    report
        .sr_by_condition
        .iter()
        .find(|(k, _)| k.starts_with(&key) && !k.contains(".rag"))
        .map(|(_, &v)| pct(v))
        .unwrap_or_else(|| "-".into())
}

fn knowledge_section(md: &mut String, reports: &[MetricReport]) {
    let rows: Vec<(&MetricReport, f64)> = reports
        .iter()
        .filter_map(|r| {
            r.sr_by_condition
                .iter()
                .find(|(k, _)| k.starts_with("knowledge_query"))
                .map(|(_, &v)| (r, v))
        })
        .collect();
    if rows.is_empty() {
        return;
    }
    md.push_str("\n## Knowledge question score rate (%)\n\n");
    md.push_str(&header(&["model / dataset".to_string(), "SR (no image, K)".to_string()]));
    for (report, sr) in rows {
        md.push_str(&row(&[pair_label(report), pct(sr)]));
    }
}

fn sufficiency_section(md: &mut String, reports: &[MetricReport]) {
    let rows: Vec<&MetricReport> = reports.iter().filter(|r| r.joint.is_some()).collect();
    if rows.is_empty() {
        return;
    }
    md.push_str("\n## Knowledge sufficiency and necessity\n\n");
    md.push_str(&header(&[
        "model / dataset".into(),
        "SuR %".into(),
        "NeR %".into(),
        "V+K+".into(),
        "V+K-".into(),
        "V-K+".into(),
        "V-K-".into(),
        "total".into(),
    ]));
    for report in rows {
        let joint = report.joint.expect("filtered on joint");
        md.push_str(&row(&[
            pair_label(report),
            report.sur.map(pct).unwrap_or_else(|| "-".into()),
            report.ner.map(pct).unwrap_or_else(|| "-".into()),
            joint.both_correct.to_string(),
            joint.visual_only.to_string(),
            joint.knowledge_only.to_string(),
            joint.neither.to_string(),
            joint.total().to_string(),
        ]));
    }
    md.push_str("\nV = visual question correct, K = knowledge question correct.\n");
}

fn recall_section(md: &mut String, reports: &[MetricReport]) {
    // Recall is per dataset; deduplicate across models.
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let rows: Vec<&MetricReport> = reports
        .iter()
        .filter(|r| !r.recall_at.is_empty() && seen.insert(r.dataset.as_str()))
        .collect();
    if rows.is_empty() {
        return;
    }
    let ks: BTreeSet<usize> = rows.iter().flat_map(|r| r.recall_at.keys().copied()).collect();
    md.push_str("\n## Retrieval recall (%)\n\n");
    let mut cells = vec!["dataset".to_string()];
    cells.extend(ks.iter().map(|k| format!("recall@{k}")));
    md.push_str(&header(&cells));
    for report in rows {
        let mut cells = vec![report.dataset.clone()];
        for k in &ks {
            cells.push(report.recall_at.get(k).map(|&v| pct(v)).unwrap_or_else(|| "-".into()));
        }
        md.push_str(&row(&cells));
    }
}

fn rag_section(md: &mut String, reports: &[MetricReport]) {
    let rows: Vec<&MetricReport> = reports.iter().filter(|r| !r.sr_rag.is_empty()).collect();
    if rows.is_empty() {
        return;
    }
    let ns: BTreeSet<usize> = rows.iter().flat_map(|r| r.sr_rag.keys().copied()).collect();
    md.push_str("\n## Retrieval-augmented score rate (%)\n\n");
    let mut cells = vec!["model / dataset".to_string(), "no RAG".to_string()];
    cells.extend(ns.iter().map(|n| format!("n={n}")));
    md.push_str(&header(&cells));
    for report in rows {
        let baseline = report
            .sr_by_condition
            .get("with_image.original")
            .map(|&v| pct(v))
            .unwrap_or_else(|| "-".into());
        let mut cells = vec![pair_label(report), baseline];
        for n in &ns {
            cells.push(report.sr_rag.get(n).map(|&v| pct(v)).unwrap_or_else(|| "-".into()));
        }
        md.push_str(&row(&cells));
    }
}

fn footnotes(md: &mut String, reports: &[MetricReport]) {
    if reports.is_empty() {
        return;
    }
    md.push_str("\n## Denominators\n\n");
    for report in reports {
        let _ = writeln!(md, "- **{}**:", pair_label(report));
        for (metric, denominator) in &report.denominators {
            let _ = writeln!(md, "  - {metric}: n={denominator}");
        }
        let failures: usize = report.failures_by_condition.values().sum();
        if failures > 0 {
            let _ = writeln!(
                md,
                "  - dispatch failures counted incorrect: {failures} ({})",
                report
                    .failures_by_condition
                    .iter()
                    .map(|(k, v)| format!("{k}: {v}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::JointCounts;
    use std::collections::BTreeMap;

    fn report() -> MetricReport {
        MetricReport {
            dataset: "demo".into(),
            model: "mock".into(),
            sr_by_condition: BTreeMap::from([
                ("with_image.original".to_string(), 0.5),
                ("without_image.original".to_string(), 0.25),
            ]),
            gr: Some(0.5),
            gr_by_format: BTreeMap::from([("original".to_string(), 0.5)]),
            sur: Some(2.0 / 3.0),
            ner: Some(0.0),
            joint: Some(JointCounts {
                both_correct: 2,
                visual_only: 1,
                knowledge_only: 1,
                neither: 0,
            }),
            sr_rag: BTreeMap::from([(1, 0.4), (3, 0.6)]),
            recall_at: BTreeMap::from([(1, 0.4), (3, 0.6)]),
            random_guess: Some(0.25),
            denominators: BTreeMap::from([("sr.with_image.original".to_string(), 4)]),
            failures_by_condition: BTreeMap::new(),
        }
    }

    #[test]
    fn fifty_percent_renders_as_fifty_point_zero() {
        assert_eq!(pct(0.5), "50.0");
        assert_eq!(pct(0.201), "20.1");
        assert_eq!(pct(1.0), "100.0");
    }

    #[test]
    fn markdown_contains_every_section() {
        let md = render_markdown(&[report()], false);
        for needle in [
            "## Score rate by condition",
            "## Question format ablation",
            "## Knowledge sufficiency and necessity",
            "## Retrieval recall",
            "## Retrieval-augmented score rate",
            "## Denominators",
            "50.0",
        ] {
            assert!(md.contains(needle), "missing {needle:?} in:\n{md}");
        }
    }

    #[test]
    fn negative_gr_clamps_with_footnote_only_when_asked() {
        let mut r = report();
        r.gr_by_format.insert("original".to_string(), -0.2);
        let unclamped = render_markdown(&[r.clone()], false);
        assert!(unclamped.contains("-20.0"));
        let clamped = render_markdown(&[r], true);
        assert!(clamped.contains("0.0[^clamp]"));
        assert!(clamped.contains("[^clamp]: negative gap rate"));
    }

    #[test]
    fn joint_counts_row_sums_to_total() {
        let md = render_markdown(&[report()], false);
        assert!(md.contains("| 2 | 1 | 1 | 0 | 4 |"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let reports = [report()];
        assert_eq!(render_markdown(&reports, false), render_markdown(&reports, false));
    }
}
