use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, Matrix, SeededRng};
use crate::tasks::{
    build_prompt, embed_regression_tokens, sample_demonstrations, sample_regression_task, sample_token_task,
    Ordering, TokenDemos, TokenFamily, TokenId, TokenPair,
};

use super::lsa::regression_loss_and_grad;
use super::optim::{Adam, AdamConfig, OptimizerKind};
use super::params::{ArchSpec, Checkpoint, ModelIo, TransformerParams, UpdateScope};
use super::transformer::{forward, logits_at, loss_and_grad};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Optimizer steps for pretraining; passes over the demonstrations for fine-tuning.
    pub epochs: usize,
    pub eval_every: usize,
    pub update_scope: UpdateScope,
    /// Sequences per pretraining step. Fine-tuning ignores it.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    1
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerKind, learning_rate: f64, epochs: usize, eval_every: usize) -> Self {
        TrainConfig {
            optimizer,
            learning_rate,
            epochs,
            eval_every,
            update_scope: UpdateScope::Full,
            batch_size: 1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn with_scope(mut self, scope: UpdateScope) -> Self {
        self.update_scope = scope;
        self
    }

    pub fn with_batch(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    /// A zero learning rate is accepted so that the no-op limit can be exercised.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.epochs % self.eval_every != 0 {
            return Err(Error::Config(format!(
                "eval_every {} does not divide epochs {}",
                self.eval_every, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn check_scope(&self, params: &TransformerParams) -> Result<()> {
        if let UpdateScope::ValueMatrixOfLayer(k) = self.update_scope {
            if k >= params.layers.len() {
                return Err(Error::Config(format!(
                    "update scope names layer {k} but the model has {} layers",
                    params.layers.len()
                )));
            }
        }
        Ok(())
    }
}

/// Distribution of pretraining sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskFamilySpec {
    Regression { d_x: usize, d_y: usize, weight_std: f64, input_std: f64, n_demos: usize },
    Tokens { family: TokenFamily, n_demos: usize },
}

enum Sample {
    Regression { tokens: Matrix, target: Matrix },
    Tokens { tokens: Vec<TokenId>, targets: Vec<(usize, TokenId)> },
}

fn draw(family: &TaskFamilySpec, rng: &mut SeededRng) -> Result<Sample> {
    match family {
        TaskFamilySpec::Regression { d_x, d_y, weight_std, input_std, n_demos } => {
            let task = sample_regression_task(*d_x, *d_y, *weight_std, *input_std, rng)?;
            let demos = sample_demonstrations(&task, *n_demos, rng);
            let xq = sample_gaussian(rng, *d_x, 1, 0.0, *input_std)?;
            let tokens = embed_regression_tokens(&demos, &xq)?;
            let target = task.label(&xq)?;
            Ok(Sample::Regression { tokens, target })
        }
        TaskFamilySpec::Tokens { family, n_demos } => {
            let (tokens, targets) = icl_sequence(family, *n_demos, rng)?;
            Ok(Sample::Tokens { tokens, targets })
        }
    }
}

/// A fresh lookup-table prompt with labelled positions: every demonstration
/// input predicts its label, and the final query (drawn from the inputs shown
/// in context) predicts its own label.
pub fn icl_sequence(
    family: &TokenFamily,
    n_demos: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<TokenId>, Vec<(usize, TokenId)>)> {
    if n_demos == 0 {
        return Err(Error::invalid("ICL sequences need at least one demonstration"));
    }
    let task = sample_token_task(family, rng)?;
    let demos = sample_demonstrations(&task, n_demos, rng);
    let q = demos.pairs[rng.below(n_demos)].x;
    let tokens = build_prompt(&demos, q, &Ordering::identity(n_demos), family.delimiter)?;
    let mut targets: Vec<(usize, TokenId)> = demos.pairs.iter().enumerate().map(|(i, p)| (3 * i, p.y)).collect();
    targets.push((3 * n_demos, task.table[&q]));
    Ok((tokens, targets))
}

fn check_compat(params: &TransformerParams, family: &TaskFamilySpec) -> Result<()> {
    match (&params.io, family) {
        (ModelIo::Regression { d_x, d_y }, TaskFamilySpec::Regression { d_x: fx, d_y: fy, n_demos, .. }) => {
            if (d_x, d_y) != (fx, fy) {
                return Err(Error::Config("task dims do not match the model".into()));
            }
            if *n_demos == 0 {
                return Err(Error::ZeroDemonstrations);
            }
            Ok(())
        }
        (ModelIo::Tokens(_), TaskFamilySpec::Tokens { family: f, n_demos }) => {
            f.validate()?;
            let v = params.vocab_size().unwrap_or(0);
            if f.vocab_size != v {
                return Err(Error::Config(format!("family vocabulary {} != model vocabulary {v}", f.vocab_size)));
            }
            let len = 3 * n_demos + 1;
            if len > params.max_len().unwrap_or(0) {
                return Err(Error::Config(format!("{n_demos} demonstrations need {len} positions, model has fewer")));
            }
            Ok(())
        }
        _ => Err(Error::Config("task family and model variant are incompatible".into())),
    }
}

/// Mean loss per labelled position on `samples`, with optional gradient.
fn batch_loss(
    params: &TransformerParams,
    samples: &[Sample],
    mut grad: Option<&mut TransformerParams>,
) -> Result<f64> {
    let total: usize = samples
        .iter()
        .map(|s| match s {
            Sample::Regression { .. } => 1,
            Sample::Tokens { targets, .. } => targets.len(),
        })
        .sum();
    let w = 1.0 / total as f64;
    let mut loss = 0.0;
    for s in samples {
        loss += match s {
            Sample::Regression { tokens, target } => {
                regression_loss_and_grad(params, tokens, target, w, grad.as_deref_mut())?
            }
            Sample::Tokens { tokens, targets } => loss_and_grad(params, tokens, targets, w, grad.as_deref_mut())?,
        };
    }
    Ok(loss * w)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

pub const HELDOUT_SEQUENCES: usize = 64;

/// Trains a freshly initialised model on the ICL objective: each step draws
/// `batch_size` new tasks and minimises the loss of every labelled position
/// given its prefix. Checkpoints (with held-out loss) are taken at step 0 and
/// every `eval_every` steps.
pub fn icl_pretrain(
    arch: &ArchSpec,
    family: &TaskFamilySpec,
    cfg: &TrainConfig,
    rng: &SeededRng,
) -> Result<Vec<Checkpoint>> {
    icl_pretrain_with(arch, family, cfg, rng, |_| Ok(()))
}

/// As [`icl_pretrain`], calling `on_checkpoint` as each checkpoint is taken.
pub fn icl_pretrain_with<F: FnMut(&Checkpoint) -> Result<()>>(
    arch: &ArchSpec,
    family: &TaskFamilySpec,
    cfg: &TrainConfig,
    rng: &SeededRng,
    mut on_checkpoint: F,
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    let mut params = TransformerParams::init(arch, &mut rng.fork(0))?;
    check_compat(&params, family)?;
    cfg.check_scope(&params)?;
    let mut data = rng.fork(1);
    let mut held_rng = rng.fork(2);
    let heldout: Vec<Sample> =
        (0..HELDOUT_SEQUENCES).map(|_| draw(family, &mut held_rng)).collect::<Result<_>>()?;

    let mut checkpoints = Vec::with_capacity(cfg.epochs / cfg.eval_every + 1);
    let first = Checkpoint { step: 0, loss: Some(batch_loss(&params, &heldout, None)?), params: params.clone() };
    on_checkpoint(&first)?;
    checkpoints.push(first);

    let mut adam = Adam::new(&params, cfg.adam);
    let mut grad = params.zeros_like();
    for step in 1..=cfg.epochs {
        let batch: Vec<Sample> = (0..cfg.batch_size).map(|_| draw(family, &mut data)).collect::<Result<_>>()?;
        grad.fill(0.0);
        let loss = batch_loss(&params, &batch, Some(&mut grad)).map_err(|e| diverged(step, e))?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        match cfg.optimizer {
            OptimizerKind::Adam => adam.step(&mut params, &grad, cfg.learning_rate, cfg.update_scope),
            OptimizerKind::Gd | OptimizerKind::Sgd => params.add_scaled(&grad, -cfg.learning_rate, cfg.update_scope),
        }
        if step % cfg.eval_every == 0 {
            let held = batch_loss(&params, &heldout, None).map_err(|e| diverged(step, e))?;
            if !held.is_finite() {
                return Err(Error::Diverged { step, loss: held });
            }
            let c = Checkpoint { step, loss: Some(held), params: params.clone() };
            on_checkpoint(&c)?;
            checkpoints.push(c);
        }
    }
    Ok(checkpoints)
}

/// Fraction of fresh lookup-table prompts whose query label is the argmax of
/// the next-token distribution. Queries are drawn from the inputs shown in
/// context.
pub fn icl_accuracy(
    params: &TransformerParams,
    family: &TokenFamily,
    n_demos: usize,
    n_prompts: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if n_prompts == 0 {
        return Err(Error::invalid("need at least one prompt"));
    }
    let mut hits = 0usize;
    for _ in 0..n_prompts {
        let (tokens, targets) = icl_sequence(family, n_demos, rng)?;
        let cache = forward(params, &tokens)?;
        let (pos, label) = *targets.last().expect("non-empty");
        let logits = logits_at(params, &cache, pos)?;
        let mut best = 0;
        for (v, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = v;
            }
        }
        hits += usize::from(best as TokenId == label);
    }
    Ok(hits as f64 / n_prompts as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRun {
    pub final_params: TransformerParams,
    pub checkpoints: Vec<Checkpoint>,
}

/// Fine-tunes on demonstrations, each presented as the prompt `[x]` with
/// label `y`. Checkpoints (with mean demonstration loss) are kept at epoch 0
/// and every `eval_every` epochs.
pub fn gd_finetune(params: &TransformerParams, demos: &TokenDemos, cfg: &TrainConfig) -> Result<FinetuneRun> {
    let mut checkpoints = Vec::new();
    let final_params = gd_finetune_with(params, demos, cfg, |epoch, p, loss| {
        checkpoints.push(Checkpoint { step: epoch, loss: Some(loss), params: p.clone() });
        Ok(())
    })?;
    Ok(FinetuneRun { final_params, checkpoints })
}

/// Mean label loss of `[x] -> y` over the demonstrations.
pub fn demo_loss(params: &TransformerParams, demos: &TokenDemos) -> Result<f64> {
    let mut s = 0.0;
    for (p, count) in grouped_pairs(demos) {
        s += count as f64 * loss_and_grad(params, &[p.x], &[(0, p.y)], 1.0, None)?;
    }
    Ok(s / demos.len() as f64)
}

/// Distinct pairs in canonical order with their multiplicities.
fn grouped_pairs(demos: &TokenDemos) -> Vec<(TokenPair, usize)> {
    let mut sorted = demos.pairs.clone();
    sorted.sort();
    let mut out: Vec<(TokenPair, usize)> = Vec::new();
    for p in sorted {
        match out.last_mut() {
            Some((q, c)) if *q == p => *c += 1,
            _ => out.push((p, 1)),
        }
    }
    out
}

/// Streaming form of [`gd_finetune`]: `on_eval(epoch, params, mean_loss)` is
/// called at every evaluation point instead of storing snapshots.
///
/// GD takes one step per epoch on the average gradient, accumulated over the
/// distinct pairs in canonical order (repeats enter through their weight), so
/// any permutation of `demos` gives identical bits.
/// SGD and Adam take one step per demonstration in the presented order.
pub fn gd_finetune_with<F: FnMut(usize, &TransformerParams, f64) -> Result<()>>(
    params: &TransformerParams,
    demos: &TokenDemos,
    cfg: &TrainConfig,
    mut on_eval: F,
) -> Result<TransformerParams> {
    cfg.validate()?;
    cfg.check_scope(params)?;
    if params.token_io().is_none() {
        return Err(Error::invalid("fine-tuning on token demonstrations needs a discrete model"));
    }
    if demos.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one demonstration"));
    }
    let mut p = params.clone();
    let mut grad = p.zeros_like();
    let mut adam = Adam::new(&p, cfg.adam);
    let n = demos.len();
    let canonical = grouped_pairs(demos);

    let eval = |epoch: usize, p: &TransformerParams, on_eval: &mut F| -> Result<()> {
        let loss = demo_loss(p, demos).map_err(|e| diverged(epoch, e))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: epoch, loss });
        }
        on_eval(epoch, p, loss)
    };
    eval(0, &p, &mut on_eval)?;

    for epoch in 1..=cfg.epochs {
        match cfg.optimizer {
            OptimizerKind::Gd => {
                grad.fill(0.0);
                for (pair, count) in &canonical {
                    let w = *count as f64 / n as f64;
                    loss_and_grad(&p, &[pair.x], &[(0, pair.y)], w, Some(&mut grad)).map_err(|e| diverged(epoch, e))?;
                }
                p.add_scaled(&grad, -cfg.learning_rate, cfg.update_scope);
            }
            OptimizerKind::Sgd | OptimizerKind::Adam => {
                for pair in &demos.pairs {
                    grad.fill(0.0);
                    loss_and_grad(&p, &[pair.x], &[(0, pair.y)], 1.0, Some(&mut grad))
                        .map_err(|e| diverged(epoch, e))?;
                    if cfg.optimizer == OptimizerKind::Sgd {
                        p.add_scaled(&grad, -cfg.learning_rate, cfg.update_scope);
                    } else {
                        adam.step(&mut p, &grad, cfg.learning_rate, cfg.update_scope);
                    }
                }
            }
        }
        if !p.is_finite() {
            return Err(Error::Diverged { step: epoch, loss: f64::NAN });
        }
        if epoch % cfg.eval_every == 0 {
            eval(epoch, &p, &mut on_eval)?;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{out_of_scope_gap, parameter_gap};
    use crate::models::{lsa::forward_regression, AttentionKind};
    use crate::tasks::{apply_ordering, sample_token_task, Ordering, TokenPair};

    fn small_arch() -> ArchSpec {
        ArchSpec { width: 16, n_layers: 2, max_len: 8, ..ArchSpec::discrete_default() }
    }

    fn small_model(seed: u64) -> TransformerParams {
        TransformerParams::init(&small_arch(), &mut SeededRng::new(seed)).unwrap()
    }

    fn demos(seed: u64, n: usize) -> TokenDemos {
        let mut rng = SeededRng::new(seed);
        let task = sample_token_task(&TokenFamily::default(), &mut rng).unwrap();
        sample_demonstrations(&task, n, &mut rng)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(OptimizerKind::Gd, 1e-3, 200, 20).validate().is_ok());
        assert!(TrainConfig::new(OptimizerKind::Gd, 1e-3, 200, 30).validate().is_err());
        assert!(TrainConfig::new(OptimizerKind::Gd, -1.0, 200, 20).validate().is_err());
        assert!(TrainConfig::new(OptimizerKind::Gd, f64::NAN, 200, 20).validate().is_err());
        let cfg = TrainConfig::new(OptimizerKind::Gd, 1e-3, 20, 20).with_scope(UpdateScope::ValueMatrixOfLayer(5));
        assert!(gd_finetune(&small_model(0), &demos(0, 4), &cfg).is_err());
    }

    #[test]
    fn pretrain_zero_epochs_is_initialisation() {
        let arch = small_arch();
        let fam = TaskFamilySpec::Tokens { family: TokenFamily::default(), n_demos: 2 };
        let cfg = TrainConfig::new(OptimizerKind::Adam, 1e-3, 0, 1);
        let rng = SeededRng::new(9);
        let cps = icl_pretrain(&arch, &fam, &cfg, &rng).unwrap();
        assert_eq!(cps.len(), 1);
        assert_eq!(cps[0].step, 0);
        assert_eq!(cps[0].params, TransformerParams::init(&arch, &mut rng.fork(0)).unwrap());
    }

    #[test]
    fn pretrain_rejects_incompatible_family() {
        let fam = TaskFamilySpec::Regression { d_x: 2, d_y: 1, weight_std: 1.0, input_std: 1.0, n_demos: 4 };
        let cfg = TrainConfig::new(OptimizerKind::Adam, 1e-3, 0, 1);
        assert!(icl_pretrain(&small_arch(), &fam, &cfg, &SeededRng::new(0)).is_err());
        let long = TaskFamilySpec::Tokens { family: TokenFamily::default(), n_demos: 5 };
        assert!(icl_pretrain(&small_arch(), &long, &cfg, &SeededRng::new(0)).is_err());
    }

    #[test]
    fn pretrain_reports_divergence_step() {
        let fam = TaskFamilySpec::Regression { d_x: 2, d_y: 1, weight_std: 1.0, input_std: 1.0, n_demos: 10 };
        let cfg = TrainConfig::new(OptimizerKind::Sgd, 1e6, 50, 1).with_batch(4);
        match icl_pretrain(&ArchSpec::linear_regression(2, 2, 1), &fam, &cfg, &SeededRng::new(1)) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1 && step <= 50),
            other => panic!("expected divergence, got {:?}", other.map(|c| c.len())),
        }
    }

    #[test]
    fn pretrain_regression_reduces_heldout_loss() {
        let fam = TaskFamilySpec::Regression { d_x: 2, d_y: 1, weight_std: 1.0, input_std: 1.0, n_demos: 10 };
        let cfg = TrainConfig::new(OptimizerKind::Adam, 1e-2, 300, 100).with_batch(16);
        let cps = icl_pretrain(&ArchSpec::linear_regression(1, 2, 1), &fam, &cfg, &SeededRng::new(2)).unwrap();
        assert_eq!(cps.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 100, 200, 300]);
        assert!(cps.last().unwrap().loss.unwrap() < cps[0].loss.unwrap());
        let tokens = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        assert!(forward_regression(&cps[3].params, &tokens).unwrap().is_finite());
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let p = small_model(1);
        let d = demos(2, 6);
        for opt in [OptimizerKind::Gd, OptimizerKind::Sgd, OptimizerKind::Adam] {
            let run = gd_finetune(&p, &d, &TrainConfig::new(opt, 0.0, 4, 2)).unwrap();
            assert_eq!(run.final_params, p);
            assert_eq!(run.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 2, 4]);
        }
    }

    #[test]
    fn value_scope_touches_only_that_matrix() {
        let p = small_model(3);
        let d = demos(4, 6);
        for opt in [OptimizerKind::Gd, OptimizerKind::Sgd, OptimizerKind::Adam] {
            let scope = UpdateScope::ValueMatrixOfLayer(1);
            let cfg = TrainConfig::new(opt, 1e-2, 3, 3).with_scope(scope);
            let out = gd_finetune(&p, &d, &cfg).unwrap().final_params;
            for ((k, a), (_, b)) in p.tensors().into_iter().zip(out.tensors()) {
                if scope.contains(&k) {
                    assert_ne!(a, b, "{k} should move");
                } else {
                    assert_eq!(a, b, "{k} should be frozen");
                }
            }
            assert_eq!(out_of_scope_gap(&p, &out, scope).unwrap(), 0.0);
            assert!(parameter_gap(&p, &out).unwrap() > 0.0);
        }
    }

    #[test]
    fn batch_gd_is_order_invariant_and_sgd_is_not() {
        let p = small_model(5);
        let d = demos(6, 8);
        let rev = apply_ordering(&d, &Ordering::reversed(8)).unwrap();
        let gd = TrainConfig::new(OptimizerKind::Gd, 5e-2, 5, 5);
        let a = gd_finetune(&p, &d, &gd).unwrap().final_params;
        let b = gd_finetune(&p, &rev, &gd).unwrap().final_params;
        assert_eq!(a, b);
        let sgd = TrainConfig::new(OptimizerKind::Sgd, 5e-2, 5, 5);
        let c = gd_finetune(&p, &d, &sgd).unwrap().final_params;
        let e = gd_finetune(&p, &rev, &sgd).unwrap().final_params;
        assert_ne!(c, e);
    }

    #[test]
    fn finetuning_lowers_demo_loss() {
        let p = small_model(7);
        let d = demos(8, 8);
        let run = gd_finetune(&p, &d, &TrainConfig::new(OptimizerKind::Adam, 1e-3, 20, 10)).unwrap();
        let losses: Vec<f64> = run.checkpoints.iter().map(|c| c.loss.unwrap()).collect();
        assert!(losses[2] < losses[0], "{losses:?}");
    }

    #[test]
    fn finetune_rejects_continuous_model_and_empty_demos() {
        let lin = TransformerParams::init(&ArchSpec::linear_regression(1, 2, 1), &mut SeededRng::new(0)).unwrap();
        let cfg = TrainConfig::new(OptimizerKind::Gd, 1e-2, 1, 1);
        assert!(gd_finetune(&lin, &demos(0, 3), &cfg).is_err());
        let empty = TokenDemos { task_id: 0, pairs: Vec::<TokenPair>::new() };
        assert!(gd_finetune(&small_model(0), &empty, &cfg).is_err());
        assert_eq!(lin.attention, AttentionKind::Linear);
    }

    #[test]
    fn icl_sequence_layout() {
        let mut rng = SeededRng::new(10);
        let fam = TokenFamily::default();
        let (tokens, targets) = icl_sequence(&fam, 3, &mut rng).unwrap();
        assert_eq!(tokens.len(), 10);
        assert_eq!(targets.len(), 4);
        for (i, &(pos, y)) in targets[..3].iter().enumerate() {
            assert_eq!(pos, 3 * i);
            assert_eq!(tokens[pos + 1], y);
        }
        assert_eq!(targets[3].0, 9);
        let q = tokens[9];
        assert!((0..3).any(|i| tokens[3 * i] == q && tokens[3 * i + 1] == targets[3].1));
    }
}
