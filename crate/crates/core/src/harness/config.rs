use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::construction::DELTA_GRID;
use crate::error::{Error, Result};
use crate::models::{ArchSpec, OptimizerKind, TaskFamilySpec, TrainConfig};
use crate::tasks::TokenFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Construction,
    Pretrain,
    OrderSens,
    Compare,
    Evolution,
    DemoScaling,
    Sparsity,
}

/// Settings for the toy-model pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSpec {
    pub seed: u64,
    pub steps: usize,
    pub eval_every: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_demos: usize,
    /// Prompts used to measure ICL accuracy at each checkpoint.
    pub eval_prompts: usize,
    /// Accuracy at which a checkpoint counts as converged.
    pub convergence_accuracy: f64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            seed: 0,
            steps: 2000,
            eval_every: 100,
            learning_rate: 1e-3,
            batch_size: 16,
            n_demos: 8,
            eval_prompts: 200,
            convergence_accuracy: 0.9,
        }
    }
}

impl PretrainSpec {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig::new(OptimizerKind::Adam, self.learning_rate, self.steps, self.eval_every)
            .with_batch(self.batch_size)
    }
}

/// Settings for the demonstration-count sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingSpec {
    pub n_demos: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Tasks sampled per seed; reported accuracy is the mean over them.
    pub tasks_per_seed: usize,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec { n_demos: vec![8, 512], learning_rate: 0.1, epochs: 200, tasks_per_seed: 16 }
    }
}

/// Settings for the construction and sparsity sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructionSpec {
    pub d_x: Vec<usize>,
    pub d_y: Vec<usize>,
    pub n_demos: Vec<usize>,
    pub etas: Vec<f64>,
    pub seeds_per_cell: usize,
    pub sparsity_dims: Vec<usize>,
    pub deltas: Vec<f64>,
    /// Widths above this are measured from block structure instead of materialised.
    pub materialize_limit: usize,
}

impl Default for ConstructionSpec {
    fn default() -> Self {
        ConstructionSpec {
            d_x: vec![1, 2, 4, 8],
            d_y: vec![1, 2, 4],
            n_demos: vec![1, 4, 16, 32],
            etas: vec![0.01, 0.1, 1.0],
            seeds_per_cell: 2,
            sparsity_dims: vec![1, 2, 8, 64, 4096],
            deltas: DELTA_GRID.to_vec(),
            materialize_limit: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub seeds: Vec<u64>,
    pub n_demos: Vec<usize>,
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub eval_every: usize,
    pub n_orderings: usize,
    pub k: usize,
    /// Demonstrations per prompt in the order-sensitivity study.
    pub order_demos: usize,
    pub optimizers: Vec<OptimizerKind>,
    /// 0-based layer indices used for the sub-model variants.
    pub mid_layer: usize,
    pub deep_layer: usize,
    /// A fine-tuning run counts as converging when its final mean demonstration
    /// loss is at most this value.
    pub converged_loss: f64,
    /// Extra full-model SGD learning rates for the order study, above the main
    /// grid, so that some SGD runs actually reach `converged_loss`.
    pub sgd_convergence_lrs: Vec<f64>,
    pub arch: ArchSpec,
    pub family: TokenFamily,
    pub pretrain: PretrainSpec,
    pub scaling: ScalingSpec,
    pub construction: ConstructionSpec,
    /// Fan independent runs out over the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: None,
            seeds: vec![0, 1, 2],
            n_demos: vec![1, 2, 4, 8],
            lrs: vec![1e-4, 5e-4, 1e-5, 5e-5],
            epochs: 200,
            eval_every: 20,
            n_orderings: 10,
            k: 10,
            order_demos: 8,
            optimizers: vec![OptimizerKind::Gd, OptimizerKind::Sgd, OptimizerKind::Adam],
            mid_layer: 1,
            deep_layer: 3,
            converged_loss: 0.1,
            sgd_convergence_lrs: vec![1e-3, 1e-2],
            arch: ArchSpec::discrete_default(),
            family: TokenFamily::default(),
            pretrain: PretrainSpec::default(),
            scaling: ScalingSpec::default(),
            construction: ConstructionSpec::default(),
            parallel: true,
        }
    }
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        require(!self.seeds.is_empty(), || "seeds must not be empty".into())?;
        require(!self.n_demos.is_empty() && self.n_demos.iter().all(|&n| n >= 1), || {
            "n_demos must be a non-empty list of positive counts".into()
        })?;
        require(!self.lrs.is_empty() && self.lrs.iter().all(|l| l.is_finite() && *l >= 0.0), || {
            "lrs must be a non-empty list of finite, non-negative rates".into()
        })?;
        require(self.sgd_convergence_lrs.iter().all(|l| l.is_finite() && *l >= 0.0), || {
            "sgd_convergence_lrs must be finite and non-negative".into()
        })?;
        require(!self.optimizers.is_empty(), || "optimizers must not be empty".into())?;
        require(self.eval_every >= 1 && self.epochs % self.eval_every == 0, || {
            format!("eval_every {} must divide epochs {}", self.eval_every, self.epochs)
        })?;
        require(self.n_orderings >= 1, || "n_orderings must be >= 1".into())?;
        require(self.order_demos >= 1, || "order_demos must be >= 1".into())?;
        self.arch.validate()?;
        self.family.validate().map_err(|e| Error::Config(e.to_string()))?;
        let vocab = self.arch.vocab_size.ok_or_else(|| Error::Config("experiments need a discrete model".into()))?;
        require(vocab == self.family.vocab_size, || {
            format!("arch vocabulary {vocab} != task vocabulary {}", self.family.vocab_size)
        })?;
        require(self.k >= 1 && self.k <= vocab, || format!("k must lie in 1..={vocab}"))?;
        require(self.mid_layer < self.arch.n_layers && self.deep_layer < self.arch.n_layers, || {
            format!("sub-model layers must be < {}", self.arch.n_layers)
        })?;
        let longest = self.n_demos.iter().chain([&self.order_demos, &self.pretrain.n_demos]).max().copied().unwrap_or(0);
        require(3 * longest + 1 <= self.arch.max_len, || {
            format!("{longest} demonstrations need {} positions; max_len is {}", 3 * longest + 1, self.arch.max_len)
        })?;
        let p = &self.pretrain;
        require(p.eval_every >= 1 && p.steps % p.eval_every == 0, || "pretrain.eval_every must divide steps".into())?;
        require(p.batch_size >= 1 && p.n_demos >= 1 && p.eval_prompts >= 1, || {
            "pretrain batch_size, n_demos and eval_prompts must be >= 1".into()
        })?;
        require(p.learning_rate.is_finite() && p.learning_rate > 0.0, || "pretrain.learning_rate must be > 0".into())?;
        let s = &self.scaling;
        require(!s.n_demos.is_empty() && s.epochs >= 1 && s.tasks_per_seed >= 1, || {
            "scaling needs demo counts, epochs >= 1 and tasks_per_seed >= 1".into()
        })?;
        require(s.learning_rate.is_finite() && s.learning_rate >= 0.0, || "scaling.learning_rate must be >= 0".into())?;
        let c = &self.construction;
        require(
            [&c.d_x, &c.d_y, &c.n_demos].iter().all(|g| !g.is_empty()) && !c.etas.is_empty() && c.seeds_per_cell >= 1,
            || "construction grids must be non-empty".into(),
        )?;
        require(c.d_x.iter().chain(&c.d_y).chain(&c.sparsity_dims).all(|&d| d >= 1), || {
            "construction dimensions must be >= 1".into()
        })?;
        require(!c.deltas.is_empty() && c.deltas.iter().all(|d| *d > 0.0), || "deltas must be positive".into())?;
        Ok(())
    }

    /// Main lr grid followed by the extra SGD rates not already in it.
    pub fn sgd_lrs(&self) -> Vec<f64> {
        let mut lrs = self.lrs.clone();
        lrs.extend(self.sgd_convergence_lrs.iter().filter(|l| !self.lrs.contains(l)));
        lrs
    }

    pub fn family_spec(&self) -> TaskFamilySpec {
        TaskFamilySpec::Tokens { family: self.family.clone(), n_demos: self.pretrain.n_demos }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_demos, vec![1, 2, 4, 8]);
        assert_eq!(cfg.lrs, vec![1e-4, 5e-4, 1e-5, 5e-5]);
        assert_eq!((cfg.epochs, cfg.eval_every, cfg.n_orderings, cfg.k), (200, 20, 10, 10));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"kind": "order-sens", "seeds": [7]}"#).unwrap();
        assert_eq!(cfg.kind, Some(ExperimentKind::OrderSens));
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.epochs, 200);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ExperimentConfig { seeds: vec![], ..Default::default() },
            ExperimentConfig { eval_every: 30, ..Default::default() },
            ExperimentConfig { k: 33, ..Default::default() },
            ExperimentConfig { deep_layer: 4, ..Default::default() },
            ExperimentConfig { n_demos: vec![12], ..Default::default() },
            ExperimentConfig { lrs: vec![f64::NAN], ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn load_reports_missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ExperimentConfig::load(&dir.path().join("nope.json")), Err(Error::Config(_))));
        let p = dir.path().join("bad.json");
        std::fs::write(&p, "{ not json").unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
    }
}
