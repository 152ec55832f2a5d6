//! Evaluation suite: fidelity, temporal coherence and downstream utility.

pub mod downstream;
pub mod fidelity;
pub mod kdtree;
pub mod registration;

use std::fmt::Write as _;

pub use downstream::{class_counts, class_iou, ece, miou};
pub use fidelity::{bev_histogram, feature_moments, gaussian_frechet, jsd, mmd, Bandwidth, BevHistogram, FeatureMoments, MmdEstimator};
pub use kdtree::KdTree;
pub use registration::{chamfer, icp_align, temporal_consistency, transform_error, ttce, IcpConfig, IcpResult, MotionSource, TemporalReport};

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub interval: Option<usize>,
    pub value: f64,
    pub n: usize,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, interval: Option<usize>, value: f64, n: usize) -> Self {
        Self { metric: metric.into(), interval, value, n }
    }
}

/// CSV with header `metric,interval,value,n`; the interval is blank when absent.
pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,interval,value,n\n");
    for r in rows {
        let interval = r.interval.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.10e},{}", r.metric, interval, r.value, r.n);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_layout() {
        let csv = report_csv(&[MetricRow::new("JSD", None, 0.0, 3), MetricRow::new("CTC", Some(2), 1.5, 4)]);
        assert_eq!(csv, "metric,interval,value,n\nJSD,,0.0000000000e0,3\nCTC,2,1.5000000000e0,4\n");
    }
}
