//! Generation-quality metrics and the metrics CSV.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Result, SfError};
use crate::seqmdp::TokenId;

/// Exact column set of the metrics CSV.
pub const METRICS_HEADER: &str =
    "prompt_id,subject,exp_max,mean_score,dist2,dist3,ppl,undesired_rate,n_gen";

/// Distinct n-grams over a group of token sequences, divided by the total
/// number of n-gram slots. Sequences shorter than `n` contribute nothing; a
/// group with no n-gram slots at all scores 0.
pub fn dist_n(texts: &[Vec<TokenId>], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(SfError::Config(format!("dist-n needs n >= 1, got {n}")));
    }
    let mut distinct: BTreeSet<&[TokenId]> = BTreeSet::new();
    let mut total = 0usize;
    for text in texts {
        if text.len() < n {
            continue;
        }
        for gram in text.windows(n) {
            distinct.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// Mean over prompts of the maximum score among each prompt's generations,
/// plus the population standard deviation of those maxima.
pub fn expected_max_attribute(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(SfError::Input("expected-max over an empty prompt group".into()));
    }
    let mut maxes = Vec::with_capacity(groups.len());
    for (i, scores) in groups.iter().enumerate() {
        if scores.is_empty() {
            return Err(SfError::Input(format!("prompt group {i} has no scores")));
        }
        let mut best = f64::NEG_INFINITY;
        for &s in scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(SfError::Input(format!(
                    "attribute score {s} outside [0, 1] in prompt group {i}"
                )));
            }
            best = best.max(s);
        }
        maxes.push(best);
    }
    let mean = maxes.iter().sum::<f64>() / maxes.len() as f64;
    let var = maxes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / maxes.len() as f64;
    Ok((mean, var.sqrt()))
}

/// One metrics CSV row; `prompt_id` is a number or the literal `ALL`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub prompt_id: String,
    pub subject: String,
    pub exp_max: f64,
    pub mean_score: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub ppl: f64,
    pub undesired_rate: f64,
    pub n_gen: u64,
}

impl MetricsRow {
    /// Range invariants: scores and rates in [0, 1], perplexity >= 1 (or
    /// infinite when a generation had a zero-probability token).
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("exp_max", self.exp_max),
            ("mean_score", self.mean_score),
            ("dist2", self.dist2),
            ("dist3", self.dist3),
            ("undesired_rate", self.undesired_rate),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(SfError::Contract(format!(
                    "metric {name} = {v} outside [0, 1] (prompt {}, subject {})",
                    self.prompt_id, self.subject
                )));
            }
        }
        if !(self.ppl >= 1.0 - 1e-9) {
            return Err(SfError::Contract(format!(
                "perplexity {} below 1 (prompt {}, subject {})",
                self.ppl, self.prompt_id, self.subject
            )));
        }
        Ok(())
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.prompt_id,
            self.subject,
            self.exp_max,
            self.mean_score,
            self.dist2,
            self.dist3,
            self.ppl,
            self.undesired_rate,
            self.n_gen
        )
    }
}

/// Write the metrics CSV, validating every row's ranges first.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        row.validate()?;
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dist2_of_the_alternating_text_is_two_thirds() {
        // "a b a b": bigrams (a b), (b a), (a b) -> 2 distinct of 3.
        let text = vec![vec![3, 4, 3, 4]];
        assert_abs_diff_eq!(dist_n(&text, 2).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_texts_depress_dist_n_below_one() {
        let texts = vec![vec![3, 4, 5], vec![3, 4, 5]];
        // 2 distinct bigrams of 4 slots.
        assert_abs_diff_eq!(dist_n(&texts, 2).unwrap(), 0.5, epsilon = 1e-12);
        assert!(dist_n(&texts, 2).unwrap() < 1.0);
    }

    #[test]
    fn all_unique_ngrams_score_one() {
        let texts = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert_abs_diff_eq!(dist_n(&texts, 2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn short_texts_contribute_nothing() {
        let texts = vec![vec![1], vec![2]];
        assert_eq!(dist_n(&texts, 2).unwrap(), 0.0);
        assert!(matches!(dist_n(&texts, 0), Err(SfError::Config(_))));
    }

    #[test]
    fn expected_max_single_prompt() {
        let (mean, stdev) = expected_max_attribute(&[vec![0.1, 0.9, 0.4]]).unwrap();
        assert_abs_diff_eq!(mean, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(stdev, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_max_two_prompts_population_stdev() {
        let (mean, stdev) =
            expected_max_attribute(&[vec![0.2, 0.1], vec![0.4, 0.0]]).unwrap();
        assert_abs_diff_eq!(mean, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(stdev, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn expected_max_rejects_bad_input() {
        assert!(matches!(expected_max_attribute(&[]), Err(SfError::Input(_))));
        assert!(matches!(expected_max_attribute(&[vec![]]), Err(SfError::Input(_))));
        assert!(matches!(expected_max_attribute(&[vec![1.5]]), Err(SfError::Input(_))));
    }

    #[test]
    fn metrics_rows_are_range_checked_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let good = MetricsRow {
            prompt_id: "0".into(),
            subject: "s".into(),
            exp_max: 0.5,
            mean_score: 0.25,
            dist2: 1.0,
            dist3: 0.0,
            ppl: 4.0,
            undesired_rate: 0.0,
            n_gen: 25,
        };
        write_metrics(&path, &[good.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.next(), Some("0,s,0.5,0.25,1,0,4,0,25"));
        let bad = MetricsRow { undesired_rate: 1.5, ..good };
        assert!(matches!(write_metrics(&path, &[bad]), Err(SfError::Contract(_))));
    }
}
