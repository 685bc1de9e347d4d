//! Metric-stream summarization: per (phase, episode_index) return counts,
//! means and standard deviations, emitted as comma-separated text.

use std::collections::BTreeMap;
use std::path::Path;

use crate::meta::MetricRecord;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub phase: String,
    pub episode_index: i64,
    pub count: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Lines that failed to parse and were skipped.
    pub warnings: usize,
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,episode_index,count,mean_return,std_return\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.phase, r.episode_index, r.count, r.mean_return, r.std_return
            ));
        }
        out
    }
}

/// Summarize a metrics file. Records without a return (loss records) are
/// ignored; malformed lines are skipped and counted as warnings.
pub fn summarize(metrics_path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(metrics_path)?;
    summarize_text(&text)
}

pub fn summarize_text(text: &str) -> Result<Summary> {
    let mut groups: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
    let mut warnings = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricRecord>(line) {
            Ok(rec) => {
                if let Some(ret) = rec.episode_return {
                    groups
                        .entry((rec.phase.clone(), rec.episode_index))
                        .or_default()
                        .push(ret);
                }
            }
            Err(_) => warnings += 1,
        }
    }
    let rows = groups
        .into_iter()
        .map(|((phase, episode_index), returns)| {
            let count = returns.len();
            let mean = returns.iter().sum::<f64>() / count as f64;
            let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                / count as f64;
            SummaryRow {
                phase,
                episode_index,
                count,
                mean_return: mean,
                std_return: var.sqrt(),
            }
        })
        .collect();
    Ok(Summary { rows, warnings })
}

/// Write the summary next to the metrics file and return its path.
pub fn write_summary(metrics_path: &Path, summary: &Summary) -> Result<std::path::PathBuf> {
    let out = metrics_path.with_extension("summary.csv");
    std::fs::write(&out, summary.to_csv())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{Losses, MetricRecord};

    fn record(phase: &str, episode: i64, ret: f64) -> String {
        serde_json::to_string(&MetricRecord {
            run_id: "r".into(),
            phase: phase.into(),
            iteration: 0,
            env_steps: 0,
            task_id: 0,
            episode_index: episode,
            episode_return: Some(ret),
            losses: Losses::default(),
            belief_std_mean: None,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn single_record() {
        let s = summarize_text(&record("eval", 1, -2.5)).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert_eq!(s.rows[0].count, 1);
        assert_eq!(s.rows[0].mean_return, -2.5);
        assert_eq!(s.rows[0].std_return, 0.0);
        assert_eq!(s.warnings, 0);
    }

    #[test]
    fn two_records_mean_and_std() {
        let text = format!("{}\n{}\n", record("eval", 1, 1.0), record("eval", 1, 3.0));
        let s = summarize_text(&text).unwrap();
        assert_eq!(s.rows[0].mean_return, 2.0);
        assert_eq!(s.rows[0].std_return, 1.0);
    }

    #[test]
    fn malformed_lines_are_skipped_with_warnings() {
        let text = format!("{}\nnot json at all\n", record("eval", 1, -1.0));
        let s = summarize_text(&text).unwrap();
        assert_eq!(s.warnings, 1);
        assert_eq!(s.rows.len(), 1);
    }

    #[test]
    fn matches_independent_recount() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let mut text = String::new();
        let mut by_group: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
        for _ in 0..10_000 {
            let phase = if rng.random_bool(0.5) { "eval" } else { "test_collect" };
            let ep = rng.random_range(1..4);
            let ret = rng.random_range(-16.0..0.0);
            text.push_str(&record(phase, ep, ret));
            text.push('\n');
            by_group.entry((phase.into(), ep)).or_default().push(ret);
        }
        let s = summarize_text(&text).unwrap();
        assert_eq!(s.rows.len(), by_group.len());
        for row in &s.rows {
            let vals = &by_group[&(row.phase.clone(), row.episode_index)];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert_eq!(row.count, vals.len());
            assert!((row.mean_return - mean).abs() < 1e-12);
            assert!((row.std_return - var.sqrt()).abs() < 1e-12);
        }
    }
}
