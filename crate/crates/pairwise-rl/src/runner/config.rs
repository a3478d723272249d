//! Experiment configuration: one TOML document drives the whole pipeline.
//!
//! Every knob has a documented default, so an empty document is a complete
//! (desk-scale) experiment. Parsing distinguishes three failure categories —
//! malformed TOML, keys this tool does not define, and values violating a
//! documented constraint — and every error names the offending key.
//!
//! Two profiles ship with the crate: [`ExperimentConfig::desk`] (the tested
//! default, identical to `Default::default()`) and
//! [`ExperimentConfig::reference_profile`] (the published large-scale
//! hyperparameters, recorded for documentation and far beyond a desk run).

use serde::{Deserialize, Serialize};

use crate::anchor::SelectionStrategy;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::reward::{DistillConfig, RmArch, RmTrainConfig};
use crate::rl::{PolicyArch, RlConfig, ValueArch};
use crate::synthworld::WorldConfig;

/// Base seeds, one per stage. Each stage derives its internal streams from
/// its own seed, so changing one stage's seed leaves the others' randomness
/// untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsConfig {
    /// World construction (hidden quality tables). Default: 0.
    pub world: u64,
    /// Dataset and prompt sampling. Default: 0.
    pub data: u64,
    /// Pairwise reward-model init and training. Default: 0.
    pub rm: u64,
    /// Pointwise-model init and distillation. Default: 0.
    pub distill: u64,
    /// Anchor selection and diagnostics. Default: 0.
    pub anchor: u64,
    /// Policy/critic init and PPO training. Default: 0.
    pub rl: u64,
    /// Win-rate evaluation sampling. Default: 0.
    pub eval: u64,
    /// KL-bound verification (tiny policy, states, advantages). Default: 0.
    pub klcheck: u64,
}

impl SeedsConfig {
    /// Every stage seed set to the same value (the `--seed` override).
    pub fn uniform(seed: u64) -> Self {
        SeedsConfig {
            world: seed,
            data: seed,
            rm: seed,
            distill: seed,
            anchor: seed,
            rl: seed,
            eval: seed,
            klcheck: seed,
        }
    }
}

/// Dataset sizes for the generation stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Labelled comparisons in the reward-model training set. Default: 3000.
    pub train_pairs: usize,
    /// Held-out comparisons for accuracy and symmetry evaluation.
    /// Default: 600.
    pub eval_pairs: usize,
    /// Training prompts that receive anchors and drive PPO. Default: 32.
    pub prompts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_pairs: 3000,
            eval_pairs: 600,
            prompts: 32,
        }
    }
}

/// Pairwise reward model: architecture plus training schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmSection {
    pub arch: RmArch,
    pub train: RmTrainConfig,
}

/// Pointwise distillation: architecture plus training schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub arch: RmArch,
    pub train: DistillConfig,
}

/// Anchor selection settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSection {
    /// Samples drawn per prompt before keeping one. Default: 1.
    pub n: usize,
    /// Keep the best- or worst-scoring sample. Default: best-of-n.
    pub strategy: SelectionStrategy,
    /// Fresh responses per prompt for winning-rate diagnostics. Default: 8.
    pub diagnostic_samples: usize,
}

impl Default for AnchorSection {
    fn default() -> Self {
        AnchorSection {
            n: 1,
            strategy: SelectionStrategy::BestOfN,
            diagnostic_samples: 8,
        }
    }
}

/// Policy optimization: actor/critic architectures plus the PPO schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub policy_arch: PolicyArch,
    pub value_arch: ValueArch,
    pub train: RlConfig,
}

/// Evaluation settings, including the optional critic-variant ablation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Anchor prompts used for the win-rate evaluation; 0 means all of
    /// them. Default: 0.
    pub win_prompts: usize,
    /// Responses sampled per prompt when measuring win rates. Default: 16.
    pub rollouts_per_prompt: usize,
    /// Paired seeds for the anchor-aware vs anchor-free critic ablation;
    /// empty disables the ablation. Default: empty.
    pub ablation_seeds: Vec<u64>,
    /// PPO iterations per ablation arm; 0 inherits rl.train.iterations.
    /// The default reads the comparison mid-training, where value-estimate
    /// quality still drives progress — at the desk scale a full-length run
    /// saturates the task and both critic variants land on the same
    /// plateau. Default: 60.
    pub ablation_iterations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            win_prompts: 0,
            rollouts_per_prompt: 16,
            ablation_seeds: Vec::new(),
            ablation_iterations: 60,
        }
    }
}

/// KL-bound verification settings. The check runs on a deliberately tiny
/// policy so the Fisher matrix and the KL divergence can be enumerated
/// exactly; the dimensions here must keep the parameter count under the
/// enumeration cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlcheckSection {
    /// Gradient-ascent step sizes to verify. Default: [0.001, 0.01].
    pub alphas: Vec<f64>,
    /// Monte-Carlo sample count for the Fisher cross-check. Default: 100000.
    pub mc_samples: usize,
    /// Clamp threshold for the paired clamped-advantage run. Default: 1.0.
    pub advantage_clamp: f64,
    /// Number of policy states verified. Default: 3.
    pub states: usize,
    /// Tiny-policy embedding dimension. Default: 2.
    pub embed_dim: usize,
    /// Tiny-policy hidden width. Default: 3.
    pub hidden_dim: usize,
    /// Tiny-policy context window. Default: 1.
    pub window: usize,
}

impl Default for KlcheckSection {
    fn default() -> Self {
        KlcheckSection {
            alphas: vec![1e-3, 1e-2],
            mc_samples: 100_000,
            advantage_clamp: 1.0,
            states: 3,
            embed_dim: 2,
            hidden_dim: 3,
            window: 1,
        }
    }
}

impl KlcheckSection {
    /// The tiny-policy architecture this section describes.
    pub fn policy_arch(&self) -> PolicyArch {
        PolicyArch {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            window: self.window,
        }
    }
}

/// The complete experiment: world, data, models, training schedules, seeds,
/// and the output directory, all in one serializable document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory owned by this run; artifacts and the manifest live here.
    /// Default: "runs/desk".
    pub out_dir: String,
    pub seeds: SeedsConfig,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub rm: RmSection,
    pub distill: DistillSection,
    pub anchor: AnchorSection,
    pub rl: RlSection,
    pub eval: EvalSection,
    pub klcheck: KlcheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: "runs/desk".to_string(),
            seeds: SeedsConfig::default(),
            world: WorldConfig::default(),
            data: DataConfig::default(),
            rm: RmSection::default(),
            distill: DistillSection::default(),
            anchor: AnchorSection::default(),
            rl: RlSection::default(),
            eval: EvalSection::default(),
            klcheck: KlcheckSection::default(),
        }
    }
}

fn check_arch(name: &str, embed_dim: usize, hidden_dim: usize) -> Result<()> {
    if embed_dim == 0 || hidden_dim == 0 {
        return Err(Error::config(format!(
            "{name}.embed_dim and {name}.hidden_dim must be positive"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    /// The tested desk-scale profile (identical to `Default::default()`).
    pub fn desk() -> Self {
        Self::default()
    }

    /// The published large-scale hyperparameters, recorded for documentation:
    /// ζ = 0.1 with a 5e-6 → 5e-7 cosine schedule and batch 128 for the
    /// reward model, β = 0.001, λ = 0.95, actor/critic learning rates
    /// 7.5e-7, and a 0.7/1.0 top-p sampling mix for policy optimization,
    /// with 2048-token responses and a quarter-million comparisons. Several
    /// orders of magnitude beyond a desk run; the test suite validates this
    /// profile but never executes it.
    pub fn reference_profile() -> Self {
        let mut cfg = Self::default();
        cfg.out_dir = "runs/reference".to_string();
        cfg.world = WorldConfig {
            content_tokens: 32_000,
            min_prompt_len: 16,
            max_prompt_len: 2048,
            max_response_len: 2048,
            ..WorldConfig::default()
        };
        cfg.data = DataConfig {
            train_pairs: 261_760,
            eval_pairs: 4096,
            prompts: 2048,
        };
        cfg.rm.arch = RmArch {
            embed_dim: 64,
            hidden_dim: 512,
            position_buckets: 16,
        };
        cfg.rm.train = RmTrainConfig {
            zeta: 0.1,
            lr_start: 5e-6,
            lr_end: 5e-7,
            batch_size: 128,
            epochs: 1,
            detach_swapped: false,
        };
        cfg.distill.arch = cfg.rm.arch;
        cfg.distill.train = DistillConfig {
            lr: 5e-6,
            epochs: 1,
            batch_size: 128,
        };
        cfg.rl.policy_arch = PolicyArch {
            embed_dim: 64,
            hidden_dim: 512,
            window: 16,
        };
        cfg.rl.value_arch = ValueArch {
            embed_dim: 64,
            hidden_dim: 512,
            window: 16,
        };
        cfg.rl.train = RlConfig {
            beta: 0.001,
            lambda: 0.95,
            top_p_low: 0.7,
            top_p_high: 1.0,
            policy_lr: 7.5e-7,
            value_lr: 7.5e-7,
            iterations: 2000,
            prompts_per_iter: 128,
            ..RlConfig::default()
        };
        cfg.eval.rollouts_per_prompt = 32;
        cfg
    }

    /// Parses a TOML document, fills defaults, and validates. The three
    /// failure modes map to distinct error categories: malformed TOML →
    /// [`Error::ConfigSyntax`], a key this tool does not define →
    /// [`Error::ConfigUnknownKey`], a value outside its documented
    /// constraint → [`Error::Config`].
    pub fn parse_toml(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| Error::ConfigSyntax(e.to_string()))?;
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| {
            let msg = e.to_string();
            if msg.contains("unknown field") {
                Error::ConfigUnknownKey(msg)
            } else {
                Error::Config(msg)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_toml(&text)
    }

    /// Canonical TOML rendering; `parse_toml(to_toml(c)) == c` exactly.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Hash of the canonical TOML rendering; identifies a run's settings in
    /// the manifest.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Checks every documented constraint; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir must not be empty"));
        }
        self.world.validate()?;
        if self.data.train_pairs == 0 || self.data.eval_pairs == 0 {
            return Err(Error::config(
                "data.train_pairs and data.eval_pairs must be positive",
            ));
        }
        if self.data.prompts < 2 {
            return Err(Error::config(
                "data.prompts must be at least 2 (winning-rate variance needs two prompts)",
            ));
        }
        check_arch("rm.arch", self.rm.arch.embed_dim, self.rm.arch.hidden_dim)?;
        if self.rm.arch.position_buckets == 0 {
            return Err(Error::config("rm.arch.position_buckets must be positive"));
        }
        self.rm.train.validate()?;
        check_arch(
            "distill.arch",
            self.distill.arch.embed_dim,
            self.distill.arch.hidden_dim,
        )?;
        if self.distill.arch.position_buckets == 0 {
            return Err(Error::config(
                "distill.arch.position_buckets must be positive",
            ));
        }
        self.distill.train.validate()?;
        if self.anchor.n == 0 {
            return Err(Error::config("anchor.n must be at least 1"));
        }
        if self.anchor.diagnostic_samples == 0 {
            return Err(Error::config(
                "anchor.diagnostic_samples must be at least 1",
            ));
        }
        check_arch(
            "rl.policy_arch",
            self.rl.policy_arch.embed_dim,
            self.rl.policy_arch.hidden_dim,
        )?;
        check_arch(
            "rl.value_arch",
            self.rl.value_arch.embed_dim,
            self.rl.value_arch.hidden_dim,
        )?;
        if self.rl.policy_arch.window == 0 || self.rl.value_arch.window == 0 {
            return Err(Error::config(
                "rl.policy_arch.window and rl.value_arch.window must be positive",
            ));
        }
        self.rl.train.validate()?;
        if self.eval.rollouts_per_prompt == 0 {
            return Err(Error::config("eval.rollouts_per_prompt must be at least 1"));
        }
        if self.klcheck.alphas.is_empty() {
            return Err(Error::config(
                "klcheck.alphas must list at least one step size",
            ));
        }
        if self.klcheck.alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::config(
                "klcheck.alphas must all be positive and finite",
            ));
        }
        if self.klcheck.mc_samples == 0 {
            return Err(Error::config("klcheck.mc_samples must be at least 1"));
        }
        if !(self.klcheck.advantage_clamp > 0.0) {
            return Err(Error::config("klcheck.advantage_clamp must be positive"));
        }
        if self.klcheck.states == 0 {
            return Err(Error::config("klcheck.states must be at least 1"));
        }
        if self.klcheck.embed_dim == 0 || self.klcheck.hidden_dim == 0 || self.klcheck.window == 0
        {
            return Err(Error::config(
                "klcheck.embed_dim, klcheck.hidden_dim, klcheck.window must be positive",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_all_defaults() {
        let cfg = ExperimentConfig::parse_toml("").expect("empty config must parse");
        assert_eq!(
            cfg,
            ExperimentConfig::default(),
            "an empty document must resolve to the documented defaults"
        );
        assert_eq!(cfg.rm.train.zeta, 0.1);
        assert_eq!(cfg.rl.train.beta, 0.001);
        assert_eq!(cfg.rl.train.lambda, 0.95);
        assert_eq!(cfg.rl.train.top_p_low, 0.7);
    }

    #[test]
    fn partial_document_overrides_only_named_keys() {
        let cfg = ExperimentConfig::parse_toml("[rm.train]\nzeta = 0.25\n").unwrap();
        assert_eq!(cfg.rm.train.zeta, 0.25);
        assert_eq!(
            cfg.rm.train.batch_size,
            RmTrainConfig::default().batch_size,
            "unnamed keys must keep their defaults"
        );
    }

    #[test]
    fn unknown_key_is_its_own_error_category_and_names_the_key() {
        let err = ExperimentConfig::parse_toml("[rm.train]\nzeta_weight = 0.1\n").unwrap_err();
        match &err {
            Error::ConfigUnknownKey(msg) => {
                assert!(
                    msg.contains("zeta_weight"),
                    "unknown-key error must name the key, got: {msg}"
                );
            }
            other => panic!("expected ConfigUnknownKey, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn malformed_toml_is_a_syntax_error() {
        let err = ExperimentConfig::parse_toml("[rm.train\nzeta = 0.1").unwrap_err();
        assert!(
            matches!(err, Error::ConfigSyntax(_)),
            "expected ConfigSyntax, got {err:?}"
        );
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn negative_zeta_names_key_and_constraint() {
        let err = ExperimentConfig::parse_toml("[rm.train]\nzeta = -0.1\n").unwrap_err();
        match &err {
            Error::Config(msg) => {
                assert!(
                    msg.contains("zeta") && msg.contains("non-negative"),
                    "constraint error must name the key and the constraint, got: {msg}"
                );
            }
            other => panic!("expected Config, got {other:?}"),
        }
    }

    #[test]
    fn wrong_type_is_a_constraint_error_not_unknown_key() {
        let err = ExperimentConfig::parse_toml("[data]\ntrain_pairs = \"many\"\n").unwrap_err();
        assert!(
            matches!(err, Error::Config(_)),
            "type errors belong to the constraint category, got {err:?}"
        );
    }

    #[test]
    fn round_trip_is_exact() {
        for cfg in [
            ExperimentConfig::desk(),
            ExperimentConfig::reference_profile(),
        ] {
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::parse_toml(&text).unwrap();
            assert_eq!(back, cfg, "parse(serialize(c)) must equal c exactly");
            assert_eq!(
                back.to_toml().unwrap(),
                text,
                "second serialization must be byte-identical"
            );
        }
    }

    #[test]
    fn profiles_validate() {
        ExperimentConfig::desk().validate().expect("desk profile");
        ExperimentConfig::reference_profile()
            .validate()
            .expect("reference profile");
    }

    #[test]
    fn reference_profile_records_published_hyperparameters() {
        let cfg = ExperimentConfig::reference_profile();
        assert_eq!(cfg.rm.train.zeta, 0.1);
        assert_eq!(cfg.rm.train.lr_start, 5e-6);
        assert_eq!(cfg.rm.train.lr_end, 5e-7);
        assert_eq!(cfg.rm.train.batch_size, 128);
        assert_eq!(cfg.data.train_pairs, 261_760);
        assert_eq!(cfg.rl.train.beta, 0.001);
        assert_eq!(cfg.rl.train.lambda, 0.95);
        assert_eq!(cfg.rl.train.policy_lr, 7.5e-7);
        assert_eq!(cfg.rl.train.value_lr, 7.5e-7);
        assert_eq!(cfg.rl.train.top_p_low, 0.7);
        assert_eq!(cfg.rl.train.top_p_high, 1.0);
        assert_eq!(cfg.world.max_response_len, 2048);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let mut b = ExperimentConfig::desk();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.seeds.rl = 7;
        assert_ne!(
            a.config_hash().unwrap(),
            b.config_hash().unwrap(),
            "changing any field must change the hash"
        );
    }

    #[test]
    fn seed_override_sets_every_stage_seed() {
        let s = SeedsConfig::uniform(9);
        assert_eq!(
            s,
            SeedsConfig {
                world: 9,
                data: 9,
                rm: 9,
                distill: 9,
                anchor: 9,
                rl: 9,
                eval: 9,
                klcheck: 9,
            }
        );
    }

    #[test]
    fn committed_profiles_match_constructors() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
        for (file, cfg) in [
            ("configs/desk.toml", ExperimentConfig::desk()),
            ("configs/reference.toml", ExperimentConfig::reference_profile()),
        ] {
            let path = std::path::Path::new(root).join(file);
            let text = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("{file} must be committed: {e}"));
            assert_eq!(
                text,
                cfg.to_toml().unwrap(),
                "{file} must byte-match its constructor's canonical rendering"
            );
        }
    }
}
