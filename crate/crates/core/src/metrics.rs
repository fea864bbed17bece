//! Summary metrics recomputable from a run log alone.

use crate::runlog::LogRow;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Time-averaged absolute position error per body, root first.
    pub per_link_mean_err_filtered_m: Vec<f64>,
    pub per_link_mean_err_baseline_m: Vec<f64>,
    pub end_link_mean_err_filtered_m: f64,
    pub end_link_mean_err_baseline_m: f64,
    /// 1 - filtered/baseline over the end link; None when the baseline is zero.
    pub percent_reduction: Option<f64>,
    pub root_pos_rmse_m: f64,
    pub root_rot_rmse_rad: f64,
}

pub fn metrics(rows: &[LogRow]) -> Metrics {
    let bodies = rows.iter().map(|r| r.link).max().map_or(0, |m| m + 1);
    let mut filt_sum = vec![0.0; bodies];
    let mut base_sum = vec![0.0; bodies];
    let mut counts = vec![0usize; bodies];
    let mut root_pos_sq = 0.0;
    let mut root_rot_sq = 0.0;
    let mut root_count = 0usize;
    for r in rows {
        filt_sum[r.link] += r.err_pos_m.abs();
        base_sum[r.link] += r.base_err_pos_m.abs();
        counts[r.link] += 1;
        if r.link == 0 {
            root_pos_sq += r.err_pos_m * r.err_pos_m;
            root_rot_sq += r.err_rot_rad * r.err_rot_rad;
            root_count += 1;
        }
    }
    let per_filt: Vec<f64> = filt_sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let per_base: Vec<f64> = base_sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let end_filt = per_filt.last().copied().unwrap_or(0.0);
    let end_base = per_base.last().copied().unwrap_or(0.0);
    Metrics {
        percent_reduction: if end_base > 0.0 {
            Some(1.0 - end_filt / end_base)
        } else {
            None
        },
        end_link_mean_err_filtered_m: end_filt,
        end_link_mean_err_baseline_m: end_base,
        per_link_mean_err_filtered_m: per_filt,
        per_link_mean_err_baseline_m: per_base,
        root_pos_rmse_m: if root_count > 0 {
            (root_pos_sq / root_count as f64).sqrt()
        } else {
            0.0
        },
        root_rot_rmse_rad: if root_count > 0 {
            (root_rot_sq / root_count as f64).sqrt()
        } else {
            0.0
        },
    }
}

impl Metrics {
    /// One metric per line, `key = value`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line(
            "end_link_mean_err_filtered_m",
            format!("{:.6}", self.end_link_mean_err_filtered_m),
        );
        line(
            "end_link_mean_err_baseline_m",
            format!("{:.6}", self.end_link_mean_err_baseline_m),
        );
        line(
            "percent_reduction",
            match self.percent_reduction {
                Some(r) => format!("{:.4}", r),
                None => "n/a".to_string(),
            },
        );
        line("root_pos_rmse_m", format!("{:.6}", self.root_pos_rmse_m));
        line("root_rot_rmse_rad", format!("{:.6}", self.root_rot_rmse_rad));
        for (i, v) in self.per_link_mean_err_filtered_m.iter().enumerate() {
            line(&format!("per_link_mean_err_filtered_m[{i}]"), format!("{v:.6}"));
        }
        for (i, v) in self.per_link_mean_err_baseline_m.iter().enumerate() {
            line(&format!("per_link_mean_err_baseline_m[{i}]"), format!("{v:.6}"));
        }
        out
    }
}

/// Spearman rank correlation between `values` and their index order.
pub fn spearman_vs_index(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut rank = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r as f64;
    }
    let mean = (n as f64 - 1.0) / 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &r) in rank.iter().enumerate() {
        num += (i as f64 - mean) * (r - mean);
        den += (i as f64 - mean).powi(2);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runlog::LogRow;

    fn row(step: usize, link: usize, err: f64, base: f64) -> LogRow {
        LogRow {
            step,
            time_s: step as f64 * 0.1,
            link,
            px: 0.0,
            py: 0.0,
            pz: 0.0,
            qx: 0.0,
            qy: 0.0,
            qz: 0.0,
            qw: 1.0,
            true_px: 0.0,
            true_py: 0.0,
            true_pz: 0.0,
            true_qx: 0.0,
            true_qy: 0.0,
            true_qz: 0.0,
            true_qw: 1.0,
            bias_est: 0.0,
            bias_true: 0.0,
            err_pos_m: err,
            err_rot_rad: 0.0,
            base_err_pos_m: base,
        }
    }

    #[test]
    fn reported_percent_reduction_case() {
        // baseline 0.125 m, filtered 0.0475 m -> 62% reduction
        let rows = vec![row(0, 0, 0.0475, 0.125)];
        let m = metrics(&rows);
        assert!((m.percent_reduction.unwrap() - 0.62).abs() < 1e-12);
    }

    #[test]
    fn identical_series_reports_na() {
        let rows = vec![row(0, 0, 0.0, 0.0)];
        let m = metrics(&rows);
        assert_eq!(m.percent_reduction, None);
        assert_eq!(m.end_link_mean_err_filtered_m, 0.0);
    }

    #[test]
    fn hand_built_two_row_log() {
        let rows = vec![row(0, 1, 0.02, 0.10), row(1, 1, 0.04, 0.20)];
        let m = metrics(&rows);
        assert!((m.per_link_mean_err_filtered_m[1] - 0.03).abs() < 1e-15);
        assert!((m.per_link_mean_err_baseline_m[1] - 0.15).abs() < 1e-15);
        assert!((m.percent_reduction.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn reduction_is_scale_invariant() {
        let rows = vec![row(0, 0, 0.03, 0.12)];
        let scaled = vec![row(0, 0, 0.03 * 7.5, 0.12 * 7.5)];
        assert!(
            (metrics(&rows).percent_reduction.unwrap()
                - metrics(&scaled).percent_reduction.unwrap())
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn spearman_monotone_is_one() {
        assert!((spearman_vs_index(&[0.1, 0.2, 0.5, 0.9]) - 1.0).abs() < 1e-12);
        assert!((spearman_vs_index(&[0.9, 0.5, 0.2, 0.1]) + 1.0).abs() < 1e-12);
    }
}
