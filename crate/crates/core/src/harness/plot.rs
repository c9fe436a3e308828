use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::metrics::{mean_std, Method, MetricReport};

/// Long-format summary row: one metric of one method at one epoch, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotRow {
    pub metric: String,
    pub method: String,
    pub n_demos: Option<usize>,
    pub lr: Option<f64>,
    pub epoch: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

type Key = (String, Option<Method>, Option<usize>, u64, Option<usize>);

/// Groups rows by everything except seed and ordering and reports mean and
/// population std of each group.
pub fn plot_rows(rows: &[MetricReport]) -> Vec<PlotRow> {
    let mut groups: BTreeMap<Key, (Option<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let key = (r.metric.clone(), r.method, r.n_demos, r.lr.map(f64::to_bits).unwrap_or(0), r.epoch);
        groups.entry(key).or_insert((r.lr, Vec::new())).1.push(r.value);
    }
    groups
        .into_iter()
        .map(|((metric, method, n_demos, _, epoch), (lr, vals))| {
            let (mean, std) = mean_std(&vals);
            PlotRow {
                metric,
                method: method.map(|m| m.to_string()).unwrap_or_default(),
                n_demos,
                lr,
                epoch,
                mean,
                std,
                count: vals.len(),
            }
        })
        .collect()
}

pub fn write_plot_csv(rows: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in plot_rows(rows) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_over_seeds() {
        let rows = vec![
            MetricReport::new("sen", 1.0).seed(0).epoch(20).method(Method::Sgd).lr(1e-4),
            MetricReport::new("sen", 3.0).seed(1).epoch(20).method(Method::Sgd).lr(1e-4),
            MetricReport::new("sen", 5.0).seed(0).epoch(40).method(Method::Sgd).lr(1e-4),
        ];
        let p = plot_rows(&rows);
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].mean, p[0].std, p[0].count), (2.0, 1.0, 2));
        assert_eq!(p[1].epoch, Some(40));
    }
}
