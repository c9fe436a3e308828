use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, mean_std, ocs, order_sensitivity, out_of_scope_gap, parameter_gap, token_overlap, ConfidenceDistribution,
    Method, MetricReport,
};
use crate::models::{
    forward_distribution, gd_finetune_with, icl_accuracy, icl_pretrain_with, Checkpoint, OptimizerKind, TrainConfig,
    TransformerParams, UpdateScope,
};
use crate::numerics::{random_orderings, SeededRng};
use crate::tasks::{
    apply_ordering, build_prompt, sample_demonstrations, sample_token_task, Ordering, TokenDemos, TokenId, TokenTask,
};

use super::config::ExperimentConfig;

fn run_jobs<J, F>(jobs: Vec<J>, parallel: bool, f: F) -> Result<Vec<MetricReport>>
where
    J: Send,
    F: Fn(J) -> Result<Vec<MetricReport>> + Sync + Send,
{
    let parts: Vec<Vec<MetricReport>> = if parallel {
        jobs.into_par_iter().map(&f).collect::<Result<_>>()?
    } else {
        jobs.into_iter().map(&f).collect::<Result<_>>()?
    };
    Ok(parts.into_iter().flatten().collect())
}

/// Next-token distributions for `demos ∘ query` under `ordering`, one per query.
pub fn icl_distributions(
    params: &TransformerParams,
    demos: &TokenDemos,
    ordering: &Ordering,
    queries: &[TokenId],
    delimiter: TokenId,
) -> Result<Vec<ConfidenceDistribution>> {
    queries
        .iter()
        .map(|&q| forward_distribution(params, &build_prompt(demos, q, ordering, delimiter)?))
        .collect()
}

/// Distributions of a fine-tuned model on the bare prompts `[query]`.
pub fn direct_distributions(params: &TransformerParams, queries: &[TokenId]) -> Result<Vec<ConfidenceDistribution>> {
    queries.iter().map(|&q| forward_distribution(params, &[q])).collect()
}

fn labels(task: &TokenTask, queries: &[TokenId]) -> Vec<TokenId> {
    queries.iter().map(|&q| task.table[&q]).collect()
}

/// Mean over queries of Sen across runs; `runs[r][q]` is run `r`'s distribution for query `q`.
pub fn sen_over_queries(runs: &[Vec<ConfidenceDistribution>]) -> Result<f64> {
    let n_q = runs.first().map(Vec::len).unwrap_or(0);
    if n_q == 0 {
        return Err(Error::invalid("no queries to measure order sensitivity on"));
    }
    let mut total = 0.0;
    for q in 0..n_q {
        let dists: Vec<ConfidenceDistribution> = runs.iter().map(|r| r[q].clone()).collect();
        total += order_sensitivity(&dists)?;
    }
    Ok(total / n_q as f64)
}

fn mean_pairwise<F>(a: &[ConfidenceDistribution], b: &[ConfidenceDistribution], k: usize, f: F) -> Result<f64>
where
    F: Fn(&ConfidenceDistribution, &ConfidenceDistribution, usize) -> Result<f64>,
{
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += f(x, y, k)?;
    }
    Ok(s / a.len() as f64)
}

fn n_orderings(n: usize, wanted: usize) -> usize {
    let mut fact = 1usize;
    for i in 2..=n {
        fact = fact.saturating_mul(i);
        if fact >= wanted {
            return wanted;
        }
    }
    fact.min(wanted)
}

fn method_for(opt: OptimizerKind, scope: UpdateScope) -> Method {
    let sub = !matches!(scope, UpdateScope::Full);
    match (opt, sub) {
        (OptimizerKind::Gd, false) => Method::Gd,
        (OptimizerKind::Gd, true) => Method::GdHatDeep,
        (OptimizerKind::Sgd, false) => Method::Sgd,
        (OptimizerKind::Sgd, true) => Method::SgdHatDeep,
        (OptimizerKind::Adam, false) => Method::Adam,
        (OptimizerKind::Adam, true) => Method::AdamHatDeep,
    }
}

struct Setup {
    seed: u64,
    task: TokenTask,
    demos: TokenDemos,
    orderings: Vec<Ordering>,
}

fn setup(cfg: &ExperimentConfig, seed: u64, stream: u64, n: usize) -> Result<Setup> {
    let mut rng = SeededRng::new(seed).fork(stream);
    let task = sample_token_task(&cfg.family, &mut rng)?;
    let demos = sample_demonstrations(&task, n, &mut rng);
    let orderings = random_orderings(n, n_orderings(n, cfg.n_orderings), &mut rng)?;
    Ok(Setup { seed, task, demos, orderings })
}

/// Order-sensitivity study: Sen of the ICL outputs across orderings of one
/// demonstration set, against Sen of models fine-tuned on each ordering.
///
/// Rows: `sen` and `accuracy` for ICL; per optimizer, scope, lr and eval epoch
/// `sen`, `accuracy` and `demo_loss` (means over orderings).
pub fn run_order_experiment(cfg: &ExperimentConfig, base: &TransformerParams) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let queries = cfg.family.features.clone();
    let n = cfg.order_demos;
    let setups: Vec<Setup> = cfg.seeds.iter().map(|&s| setup(cfg, s, 1, n)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for s in &setups {
        let targets = labels(&s.task, &queries);
        let mut runs = Vec::with_capacity(s.orderings.len());
        let mut acc = 0.0;
        for o in &s.orderings {
            let d = icl_distributions(base, &s.demos, o, &queries, cfg.family.delimiter)?;
            acc += accuracy(&d, &targets)?;
            runs.push(d);
        }
        let at = |m: &str, v: f64| MetricReport::new(m, v).seed(s.seed).n_demos(n).method(Method::Icl);
        rows.push(at("sen", sen_over_queries(&runs)?));
        rows.push(at("accuracy", acc / s.orderings.len() as f64));
    }

    let scopes = [UpdateScope::Full, UpdateScope::ValueMatrixOfLayer(cfg.deep_layer)];
    let mut jobs = Vec::new();
    for s in &setups {
        for &opt in &cfg.optimizers {
            for scope in scopes {
                let lrs = match (opt, scope) {
                    (OptimizerKind::Sgd, UpdateScope::Full) => cfg.sgd_lrs(),
                    _ => cfg.lrs.clone(),
                };
                for lr in lrs {
                    jobs.push((s, opt, scope, lr));
                }
            }
        }
    }
    let finetuned = run_jobs(jobs, cfg.parallel, |(s, opt, scope, lr)| {
        let tc = TrainConfig::new(opt, lr, cfg.epochs, cfg.eval_every).with_scope(scope);
        let targets = labels(&s.task, &queries);
        let n_evals = cfg.epochs / cfg.eval_every + 1;
        let mut dists: Vec<Vec<Vec<ConfidenceDistribution>>> = vec![Vec::new(); n_evals];
        let mut losses = vec![0.0; n_evals];
        let mut accs = vec![0.0; n_evals];
        for o in &s.orderings {
            let ordered = apply_ordering(&s.demos, o)?;
            gd_finetune_with(base, &ordered, &tc, |epoch, p, loss| {
                let i = epoch / cfg.eval_every;
                let d = direct_distributions(p, &queries)?;
                accs[i] += accuracy(&d, &targets)?;
                losses[i] += loss;
                dists[i].push(d);
                Ok(())
            })?;
        }
        let method = method_for(opt, scope);
        let m = s.orderings.len() as f64;
        let mut out = Vec::with_capacity(3 * n_evals);
        for i in 0..n_evals {
            let at = |name: &str, v: f64| {
                MetricReport::new(name, v).seed(s.seed).n_demos(n).lr(lr).epoch(i * cfg.eval_every).method(method)
            };
            let sen = if dists[i].len() >= 2 { sen_over_queries(&dists[i])? } else { 0.0 };
            out.push(at("sen", sen));
            out.push(at("accuracy", accs[i] / m));
            out.push(at("demo_loss", losses[i] / m));
        }
        Ok(out)
    })?;
    rows.extend(finetuned);
    Ok(rows)
}

/// ICL against GD and its sub-model variants on each (seed, N, lr) cell.
///
/// Rows: ICL `accuracy`; ICL-ICL `token_overlap`/`ocs` means and `_std` over
/// all ordering pairs; per GD variant and eval epoch `accuracy`,
/// `token_overlap` and `ocs` against the ICL output; final `parameter_gap`
/// and `out_of_scope_gap`.
pub fn run_comparison_grid(cfg: &ExperimentConfig, base: &TransformerParams) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let queries = cfg.family.features.clone();
    let mut setups = Vec::new();
    for &seed in &cfg.seeds {
        for &n in &cfg.n_demos {
            setups.push(setup(cfg, seed, 100 + n as u64, n)?);
        }
    }

    let icl_rows = run_jobs(setups.iter().collect(), cfg.parallel, |s| {
        let n = s.demos.len();
        let runs: Vec<Vec<ConfidenceDistribution>> = s
            .orderings
            .iter()
            .map(|o| icl_distributions(base, &s.demos, o, &queries, cfg.family.delimiter))
            .collect::<Result<_>>()?;
        let at = |m: &str, v: f64| MetricReport::new(m, v).seed(s.seed).n_demos(n).method(Method::Icl);
        let mut out = vec![at("accuracy", accuracy(&runs[0], &labels(&s.task, &queries))?)];
        if runs.len() >= 2 {
            let mut overlaps = Vec::new();
            let mut ocss = Vec::new();
            for a in 0..runs.len() {
                for b in a + 1..runs.len() {
                    overlaps.push(mean_pairwise(&runs[a], &runs[b], cfg.k, token_overlap)?);
                    ocss.push(mean_pairwise(&runs[a], &runs[b], cfg.k, ocs)?);
                }
            }
            let (om, os) = mean_std(&overlaps);
            let (cm, cs) = mean_std(&ocss);
            out.extend([at("token_overlap", om), at("token_overlap_std", os), at("ocs", cm), at("ocs_std", cs)]);
        }
        Ok(out)
    })?;

    let variants = [
        (Method::Gd, UpdateScope::Full),
        (Method::GdHatMid, UpdateScope::ValueMatrixOfLayer(cfg.mid_layer)),
        (Method::GdHatDeep, UpdateScope::ValueMatrixOfLayer(cfg.deep_layer)),
    ];
    let mut jobs = Vec::new();
    for s in &setups {
        for &lr in &cfg.lrs {
            for v in variants {
                jobs.push((s, lr, v));
            }
        }
    }
    let gd_rows = run_jobs(jobs, cfg.parallel, |(s, lr, (method, scope))| {
        let n = s.demos.len();
        let reference = icl_distributions(base, &s.demos, &s.orderings[0], &queries, cfg.family.delimiter)?;
        let targets = labels(&s.task, &queries);
        let tc = TrainConfig::new(OptimizerKind::Gd, lr, cfg.epochs, cfg.eval_every).with_scope(scope);
        let at = |m: &str, v: f64, epoch: usize| {
            MetricReport::new(m, v).seed(s.seed).n_demos(n).lr(lr).epoch(epoch).method(method)
        };
        let mut out = Vec::new();
        let fin = gd_finetune_with(base, &s.demos, &tc, |epoch, p, _| {
            let d = direct_distributions(p, &queries)?;
            out.push(at("accuracy", accuracy(&d, &targets)?, epoch));
            out.push(at("token_overlap", mean_pairwise(&reference, &d, cfg.k, token_overlap)?, epoch));
            out.push(at("ocs", mean_pairwise(&reference, &d, cfg.k, ocs)?, epoch));
            Ok(())
        })?;
        out.push(at("parameter_gap", parameter_gap(base, &fin)?, cfg.epochs));
        out.push(at("out_of_scope_gap", out_of_scope_gap(base, &fin, scope)?, cfg.epochs));
        Ok(out)
    })?;

    let mut rows = icl_rows;
    rows.extend(gd_rows);
    Ok(rows)
}

/// GD fine-tuning accuracy on all feature inputs as the number of
/// demonstrations grows, averaged over `tasks_per_seed` sampled tasks.
/// `n_demos = 0` rows are the untouched base model. Rows: `accuracy`,
/// `accuracy_std` (across tasks) and `demo_loss`.
pub fn run_demo_scaling(cfg: &ExperimentConfig, base: &TransformerParams) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let queries = cfg.family.features.clone();
    let sc = &cfg.scaling;
    let mut counts = vec![0usize];
    counts.extend(sc.n_demos.iter().copied().filter(|&n| n > 0));
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for t in 0..sc.tasks_per_seed {
            let task = sample_token_task(&cfg.family, &mut SeededRng::new(seed).fork(200_000 + t as u64))?;
            for &n in &counts {
                jobs.push((seed, t, task.clone(), n));
            }
        }
    }
    // Per-task rows carry the task index in `ordering_id`; they are averaged
    // per (seed, n) below.
    let per_task = run_jobs(jobs, cfg.parallel, |(seed, t, task, n)| {
        let targets = labels(&task, &queries);
        let tag = |m: &str, v: f64| MetricReport::new(m, v).seed(seed).n_demos(n).ordering(t);
        if n == 0 {
            let d = direct_distributions(base, &queries)?;
            return Ok(vec![tag("accuracy", accuracy(&d, &targets)?)]);
        }
        let stream = (t as u64 + 1) * 1_000_000 + n as u64;
        let demos = sample_demonstrations(&task, n, &mut SeededRng::new(seed).fork(stream));
        let tc = TrainConfig::new(OptimizerKind::Gd, sc.learning_rate, sc.epochs, sc.epochs);
        let mut out = Vec::new();
        let fin = gd_finetune_with(base, &demos, &tc, |epoch, _, loss| {
            if epoch == sc.epochs {
                out.push(tag("demo_loss", loss));
            }
            Ok(())
        })?;
        let d = direct_distributions(&fin, &queries)?;
        out.push(tag("accuracy", accuracy(&d, &targets)?));
        Ok(out)
    })?;

    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &n in &counts {
            let epoch = if n == 0 { 0 } else { sc.epochs };
            for metric in ["accuracy", "demo_loss"] {
                let vals: Vec<f64> = per_task
                    .iter()
                    .filter(|r| r.metric == metric && r.seed == Some(seed) && r.n_demos == Some(n))
                    .map(|r| r.value)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&vals);
                let at = |m: &str, v: f64| {
                    MetricReport::new(m, v).seed(seed).n_demos(n).lr(sc.learning_rate).epoch(epoch).method(Method::Gd)
                };
                rows.push(at(metric, mean));
                if metric == "accuracy" {
                    rows.push(at("accuracy_std", std));
                }
            }
        }
    }
    Ok(rows)
}

/// Pretrains the configured toy model; `on_checkpoint` sees each checkpoint as it is taken.
pub fn run_pretrain<F: FnMut(&Checkpoint) -> Result<()>>(cfg: &ExperimentConfig, on_checkpoint: F) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    icl_pretrain_with(&cfg.arch, &cfg.family_spec(), &p.train_config(), &SeededRng::new(p.seed), on_checkpoint)
}

/// ICL accuracy of each checkpoint on one fixed set of prompts.
pub fn checkpoint_accuracies(cfg: &ExperimentConfig, checkpoints: &[Checkpoint]) -> Result<Vec<f64>> {
    let p = &cfg.pretrain;
    let prompts = SeededRng::new(p.seed).fork(300);
    let eval = |c: &Checkpoint| icl_accuracy(&c.params, &cfg.family, p.n_demos, p.eval_prompts, &mut prompts.clone());
    if cfg.parallel {
        checkpoints.par_iter().map(eval).collect()
    } else {
        checkpoints.iter().map(eval).collect()
    }
}

/// Rows describing a pretraining run: `icl_accuracy` and `heldout_loss` per
/// checkpoint, plus `step_gap` and `parameter_gap` measured from the first
/// checkpoint whose accuracy reaches the convergence threshold.
pub fn evolution_rows(cfg: &ExperimentConfig, checkpoints: &[Checkpoint]) -> Result<Vec<MetricReport>> {
    let p = &cfg.pretrain;
    let accs = checkpoint_accuracies(cfg, checkpoints)?;
    let at = |m: &str, v: f64, step: usize| MetricReport::new(m, v).seed(p.seed).n_demos(p.n_demos).epoch(step).method(Method::Icl);
    let mut rows = Vec::new();
    for (c, &a) in checkpoints.iter().zip(&accs) {
        rows.push(at("icl_accuracy", a, c.step));
        if let Some(l) = c.loss {
            rows.push(at("heldout_loss", l, c.step));
        }
    }
    if let Some(onset) = accs.iter().position(|&a| a >= p.convergence_accuracy) {
        let anchor = &checkpoints[onset];
        for c in &checkpoints[onset..] {
            rows.push(at("step_gap", (c.step - anchor.step) as f64, c.step));
            rows.push(at("parameter_gap", parameter_gap(&anchor.params, &c.params)?, c.step));
        }
    }
    Ok(rows)
}

/// Pretrains and tracks how parameters and ICL accuracy evolve across checkpoints.
pub fn run_evolution(cfg: &ExperimentConfig) -> Result<(Vec<Checkpoint>, Vec<MetricReport>)> {
    let cps = run_pretrain(cfg, |_| Ok(()))?;
    let rows = evolution_rows(cfg, &cps)?;
    Ok((cps, rows))
}
