//! Directional checks over experiment rows.

use std::collections::BTreeMap;
use std::fmt;

use crate::metrics::{Method, MetricReport};

use super::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, failures: Vec<String>, summary: String) -> Self {
        let pass = failures.is_empty();
        let detail = if pass { summary } else { format!("{summary}; failing: {}", failures.join(", ")) };
        CheckOutcome { name: name.into(), pass, detail }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn find<'a>(
    rows: &'a [MetricReport],
    metric: &str,
    method: Method,
    seed: u64,
    lr: Option<f64>,
    epoch: Option<usize>,
) -> Option<&'a MetricReport> {
    rows.iter().find(|r| {
        r.metric == metric && r.method == Some(method) && r.seed == Some(seed) && r.lr == lr && r.epoch == epoch
    })
}

/// ICL Sen exceeds the Sen of every SGD and Adam cell at the final epoch.
pub fn order_direction(rows: &[MetricReport], cfg: &ExperimentConfig) -> CheckOutcome {
    let mut failures = Vec::new();
    let mut margin = f64::INFINITY;
    let mut cells = 0;
    for &seed in &cfg.seeds {
        let Some(icl) = find(rows, "sen", Method::Icl, seed, None, None) else {
            failures.push(format!("seed {seed}: no ICL row"));
            continue;
        };
        for method in [Method::Sgd, Method::Adam] {
            for &lr in &cfg.lrs {
                match find(rows, "sen", method, seed, Some(lr), Some(cfg.epochs)) {
                    Some(r) => {
                        cells += 1;
                        margin = margin.min(icl.value - r.value);
                        if !(icl.value > r.value) {
                            failures.push(format!("seed {seed} {method} lr {lr}: {:.4} >= ICL {:.4}", r.value, icl.value));
                        }
                    }
                    None => failures.push(format!("seed {seed} {method} lr {lr}: missing")),
                }
            }
        }
    }
    CheckOutcome::new("ICL Sen > SGD/Adam Sen", failures, format!("{cells} cells, smallest margin {margin:.4}"))
}

/// Full-batch GD rows have zero Sen at every checkpoint.
pub fn gd_sen_zero(rows: &[MetricReport]) -> CheckOutcome {
    let gd: Vec<&MetricReport> = rows
        .iter()
        .filter(|r| r.metric == "sen" && matches!(r.method, Some(Method::Gd | Method::GdHatDeep)))
        .collect();
    let failures = gd.iter().filter(|r| r.value != 0.0).map(|r| format!("{r:?}")).collect();
    CheckOutcome::new("GD Sen == 0", failures, format!("{} GD rows", gd.len()))
}

/// On converging SGD runs (main grid plus the extra SGD rates), Sen at the last epoch is at most Sen at the first eval epoch.
pub fn sgd_sen_decreases(rows: &[MetricReport], cfg: &ExperimentConfig) -> CheckOutcome {
    let mut failures = Vec::new();
    let mut converging = 0;
    for &seed in &cfg.seeds {
        for lr in cfg.sgd_lrs() {
            let loss = find(rows, "demo_loss", Method::Sgd, seed, Some(lr), Some(cfg.epochs));
            let early = find(rows, "sen", Method::Sgd, seed, Some(lr), Some(cfg.eval_every));
            let late = find(rows, "sen", Method::Sgd, seed, Some(lr), Some(cfg.epochs));
            if let (Some(loss), Some(early), Some(late)) = (loss, early, late) {
                if loss.value <= cfg.converged_loss {
                    converging += 1;
                    if late.value > early.value {
                        failures.push(format!("seed {seed} lr {lr}: {:.4} > {:.4}", late.value, early.value));
                    }
                }
            }
        }
    }
    if converging == 0 {
        failures.push("no converging SGD run".into());
    }
    CheckOutcome::new("SGD Sen falls on converging runs", failures, format!("{converging} converging runs"))
}

/// Per seed, the mean ICL-ICL overlap (and OCS) beats the mean ICL-GD value at the final epoch.
pub fn overlap_direction(rows: &[MetricReport], cfg: &ExperimentConfig) -> CheckOutcome {
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    let gd_methods = [Method::Gd, Method::GdHatMid, Method::GdHatDeep];
    for &seed in &cfg.seeds {
        for metric in ["token_overlap", "ocs"] {
            let mean = |pred: &dyn Fn(&MetricReport) -> bool| {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.metric == metric && r.seed == Some(seed) && pred(r))
                    .map(|r| r.value)
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let icl = mean(&|r| r.method == Some(Method::Icl));
            let gd = mean(&|r| r.epoch == Some(cfg.epochs) && r.method.is_some_and(|m| gd_methods.contains(&m)));
            match (icl, gd) {
                (Some(a), Some(b)) => {
                    summary.push(format!("seed {seed} {metric} {a:.3}>{b:.3}"));
                    if !(a > b) {
                        failures.push(format!("seed {seed} {metric}: ICL-ICL {a:.4} <= ICL-GD {b:.4}"));
                    }
                }
                _ => failures.push(format!("seed {seed} {metric}: missing rows")),
            }
        }
    }
    CheckOutcome::new("ICL-ICL overlap > ICL-GD overlap", failures, summary.join("; "))
}

/// GD accuracy with the most demonstrations beats accuracy with the fewest nonzero count, every seed.
pub fn scaling_direction(rows: &[MetricReport], cfg: &ExperimentConfig) -> CheckOutcome {
    let lo = cfg.scaling.n_demos.iter().copied().min().unwrap_or(0);
    let hi = cfg.scaling.n_demos.iter().copied().max().unwrap_or(0);
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let acc = |n: usize| {
            rows.iter()
                .find(|r| r.metric == "accuracy" && r.seed == Some(seed) && r.n_demos == Some(n) && r.method == Some(Method::Gd))
                .map(|r| r.value)
        };
        match (acc(lo), acc(hi)) {
            (Some(a), Some(b)) => {
                summary.push(format!("seed {seed}: {a:.3} -> {b:.3}"));
                if !(b > a) {
                    failures.push(format!("seed {seed}"));
                }
            }
            _ => failures.push(format!("seed {seed}: missing rows")),
        }
    }
    CheckOutcome::new(&format!("GD accuracy {hi} demos > {lo} demos"), failures, summary.join("; "))
}

/// After convergence onset, parameter_gap strictly increases with step gap and
/// ICL accuracy over the last five checkpoints varies by at most `tol`.
pub fn evolution_shape(rows: &[MetricReport], tol: f64) -> CheckOutcome {
    let series = |metric: &str| -> BTreeMap<usize, f64> {
        rows.iter().filter(|r| r.metric == metric).filter_map(|r| r.epoch.map(|e| (e, r.value))).collect()
    };
    let gaps = series("parameter_gap");
    let acc = series("icl_accuracy");
    let mut failures = Vec::new();
    if gaps.len() < 2 {
        failures.push(format!("only {} post-convergence checkpoints", gaps.len()));
    }
    let g: Vec<(usize, f64)> = gaps.into_iter().collect();
    for w in g.windows(2) {
        if !(w[1].1 > w[0].1) {
            failures.push(format!("gap at step {} not above step {}", w[1].0, w[0].0));
        }
    }
    let last: Vec<f64> = acc.values().rev().take(5).copied().collect();
    let spread = last.iter().copied().fold(f64::NEG_INFINITY, f64::max) - last.iter().copied().fold(f64::INFINITY, f64::min);
    if last.len() < 5 || !(spread <= tol) {
        failures.push(format!("final accuracy spread {spread:.3}"));
    }
    CheckOutcome::new(
        "parameter gap grows while ICL accuracy holds",
        failures,
        format!("{} post-onset checkpoints, final-5 accuracy spread {spread:.3}", g.len()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig { seeds: vec![0], lrs: vec![0.1], epochs: 40, eval_every: 20, ..Default::default() }
    }

    #[test]
    fn order_direction_detects_violation() {
        let c = cfg();
        let mut rows = vec![MetricReport::new("sen", 0.5).seed(0).method(Method::Icl)];
        for m in [Method::Sgd, Method::Adam] {
            rows.push(MetricReport::new("sen", 0.1).seed(0).lr(0.1).epoch(40).method(m));
        }
        assert!(order_direction(&rows, &c).pass);
        rows[1].value = 0.9;
        assert!(!order_direction(&rows, &c).pass);
    }

    #[test]
    fn sgd_check_needs_a_converging_run() {
        let c = cfg();
        let mut rows = vec![
            MetricReport::new("sen", 0.3).seed(0).lr(0.1).epoch(20).method(Method::Sgd),
            MetricReport::new("sen", 0.2).seed(0).lr(0.1).epoch(40).method(Method::Sgd),
            MetricReport::new("demo_loss", 5.0).seed(0).lr(0.1).epoch(40).method(Method::Sgd),
        ];
        assert!(!sgd_sen_decreases(&rows, &c).pass);
        rows[2].value = 0.01;
        assert!(sgd_sen_decreases(&rows, &c).pass);
        rows[1].value = 0.4;
        assert!(!sgd_sen_decreases(&rows, &c).pass);
    }

    #[test]
    fn evolution_shape_cases() {
        let mut rows = Vec::new();
        for (i, step) in [0, 10, 20, 30, 40, 50].into_iter().enumerate() {
            rows.push(MetricReport::new("icl_accuracy", 0.95 + 0.01 * (i % 2) as f64).epoch(step));
            if step >= 10 {
                rows.push(MetricReport::new("parameter_gap", step as f64).epoch(step));
            }
        }
        assert!(evolution_shape(&rows, 0.05).pass);
        rows.push(MetricReport::new("parameter_gap", 1.0).epoch(60));
        assert!(!evolution_shape(&rows, 0.05).pass);
    }
}
