//! The pipeline stages and the manifest-driven runner that executes them.
//!
//! Seven stages form a linear-ish graph over one output directory:
//!
//! ```text
//! gen-data ─► train-rm ─► distill ─► select-anchors ─► train-rl ─► eval
//!                                                      verify-klbound
//! ```
//!
//! Each stage declares its input and output artifacts by name. The runner
//! refuses to start a stage whose inputs are missing (naming the stage that
//! produces them), verifies inputs against the hashes their producers
//! recorded, skips stages whose recorded inputs and outputs all still match
//! (unless forced), and records fresh hashes in the manifest afterwards.
//! All artifacts are plain line-delimited text written atomically; re-running
//! any stage with the same config and seeds reproduces them byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchor::{anchor_diagnostics, select_anchor_set, SelectionStrategy};
use crate::error::{Error, Result};
use crate::io::{
    file_sha256, load_pairwise_rm, load_pointwise_rm, load_policy, read_jsonl, save_pairwise_rm,
    save_pointwise_rm, save_policy, save_value_model, write_atomic, write_jsonl,
};
use crate::klbound::{
    estimate_fisher, first_failure, score_mean_zero_check, verify_bound, BoundReport,
    EnumerablePolicy, FisherMode, PolicyStateView,
};
use crate::numerics::mlp::ParamBlocks;
use crate::reward::{
    eval_accuracy, mean_order_asymmetry, train_rm, DistillTriple, PairwiseRewardModel,
    PointwiseRewardModel, RmAccuracy,
};
use crate::reward::distill_pointwise;
use crate::rl::{
    clamp_advantages, eval_oracle_win_rate, train_pairwise_ppo, Policy, ValueModel, ValueVariant,
};
use crate::runner::config::ExperimentConfig;
use crate::runner::manifest::{RunManifest, StageRecord};
use crate::runner::report::{run_ablation, AblationReport, AnchorSummary, EvalReport};
use crate::seeds;
use crate::synthworld::{gen_comparison_dataset, uniform_sampler, Prompt, Response, SynthWorld, Token};

/// Artifact file names, relative to the output directory.
pub mod artifact {
    /// Resolved config echoed on every invocation (provenance, not a stage
    /// artifact).
    pub const CONFIG_RESOLVED: &str = "config.resolved.toml";
    pub const TRAIN_PAIRS: &str = "train_pairs.jsonl";
    pub const EVAL_PAIRS: &str = "eval_pairs.jsonl";
    pub const PROMPTS: &str = "prompts.jsonl";
    pub const RM_CKPT: &str = "rm.ckpt.jsonl";
    pub const RM_HISTORY: &str = "rm_history.jsonl";
    pub const RM_EVAL: &str = "rm_eval.jsonl";
    pub const POINTWISE_CKPT: &str = "pointwise.ckpt.jsonl";
    pub const DISTILL_HISTORY: &str = "distill_history.jsonl";
    pub const ANCHORS: &str = "anchors.jsonl";
    pub const ANCHOR_DIAG: &str = "anchor_diag.jsonl";
    pub const POLICY_CKPT: &str = "policy.ckpt.jsonl";
    pub const VALUE_CKPT: &str = "value.ckpt.jsonl";
    pub const METRICS: &str = "metrics.jsonl";
    pub const EVAL_REPORT: &str = "eval_report.jsonl";
    pub const ABLATION_REPORT: &str = "ablation_report.jsonl";
    pub const BOUND_REPORT: &str = "bound_report.jsonl";
    pub const BOUND_REPORT_CLAMPED: &str = "bound_report_clamped.jsonl";
    pub const KLCHECK_SUMMARY: &str = "klcheck_summary.jsonl";
}

/// Header kinds of the JSONL artifacts.
pub mod kind {
    pub const COMPARISONS: &str = "comparison-dataset";
    pub const PROMPTS: &str = "prompt-set";
    pub const RM_HISTORY: &str = "rm-train-history";
    pub const RM_EVAL: &str = "rm-eval";
    pub const DISTILL_HISTORY: &str = "distill-history";
    pub const ANCHORS: &str = "anchor-set";
    pub const ANCHOR_DIAG: &str = "anchor-diagnostics";
    pub const METRICS: &str = "rl-metrics";
    pub const EVAL_REPORT: &str = "eval-report";
    pub const ABLATION_REPORT: &str = "ablation-report";
    pub const BOUND_REPORT: &str = "bound-report";
    pub const KLCHECK_SUMMARY: &str = "klcheck-summary";
}

/// The pipeline stages, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainRm,
    Distill,
    SelectAnchors,
    TrainRl,
    Eval,
    VerifyKlbound,
}

impl Stage {
    /// Every stage, in the order `run-all` executes them.
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainRm,
        Stage::Distill,
        Stage::SelectAnchors,
        Stage::TrainRl,
        Stage::Eval,
        Stage::VerifyKlbound,
    ];

    /// The stage's CLI name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainRm => "train-rm",
            Stage::Distill => "distill",
            Stage::SelectAnchors => "select-anchors",
            Stage::TrainRl => "train-rl",
            Stage::Eval => "eval",
            Stage::VerifyKlbound => "verify-klbound",
        }
    }

    /// Input artifacts the stage consumes under `cfg`.
    pub fn inputs(self, cfg: &ExperimentConfig) -> Vec<&'static str> {
        match self {
            Stage::GenData => vec![],
            Stage::TrainRm => vec![artifact::TRAIN_PAIRS, artifact::EVAL_PAIRS],
            Stage::Distill => vec![artifact::TRAIN_PAIRS, artifact::RM_CKPT],
            Stage::SelectAnchors => vec![
                artifact::PROMPTS,
                artifact::POINTWISE_CKPT,
                artifact::RM_CKPT,
            ],
            Stage::TrainRl => {
                let mut v = vec![artifact::RM_CKPT, artifact::ANCHORS];
                if cfg.rl.train.value_variant == ValueVariant::WithoutAnchor {
                    v.push(artifact::POINTWISE_CKPT);
                }
                v
            }
            Stage::Eval => {
                let mut v = vec![
                    artifact::POLICY_CKPT,
                    artifact::RM_CKPT,
                    artifact::ANCHORS,
                    artifact::RM_EVAL,
                    artifact::ANCHOR_DIAG,
                    artifact::METRICS,
                ];
                if !cfg.eval.ablation_seeds.is_empty() {
                    v.push(artifact::POINTWISE_CKPT);
                }
                v
            }
            Stage::VerifyKlbound => vec![],
        }
    }

    /// Output artifacts the stage writes under `cfg`.
    pub fn outputs(self, cfg: &ExperimentConfig) -> Vec<&'static str> {
        match self {
            Stage::GenData => vec![
                artifact::TRAIN_PAIRS,
                artifact::EVAL_PAIRS,
                artifact::PROMPTS,
            ],
            Stage::TrainRm => vec![artifact::RM_CKPT, artifact::RM_HISTORY, artifact::RM_EVAL],
            Stage::Distill => vec![artifact::POINTWISE_CKPT, artifact::DISTILL_HISTORY],
            Stage::SelectAnchors => vec![artifact::ANCHORS, artifact::ANCHOR_DIAG],
            Stage::TrainRl => vec![
                artifact::POLICY_CKPT,
                artifact::VALUE_CKPT,
                artifact::METRICS,
            ],
            Stage::Eval => {
                let mut v = vec![artifact::EVAL_REPORT];
                if !cfg.eval.ablation_seeds.is_empty() {
                    v.push(artifact::ABLATION_REPORT);
                }
                v
            }
            Stage::VerifyKlbound => vec![
                artifact::BOUND_REPORT,
                artifact::BOUND_REPORT_CLAMPED,
                artifact::KLCHECK_SUMMARY,
            ],
        }
    }

    /// Which stage produces an artifact, independent of configuration.
    pub fn producer(artifact_name: &str) -> Option<Stage> {
        match artifact_name {
            artifact::TRAIN_PAIRS | artifact::EVAL_PAIRS | artifact::PROMPTS => {
                Some(Stage::GenData)
            }
            artifact::RM_CKPT | artifact::RM_HISTORY | artifact::RM_EVAL => Some(Stage::TrainRm),
            artifact::POINTWISE_CKPT | artifact::DISTILL_HISTORY => Some(Stage::Distill),
            artifact::ANCHORS | artifact::ANCHOR_DIAG => Some(Stage::SelectAnchors),
            artifact::POLICY_CKPT | artifact::VALUE_CKPT | artifact::METRICS => {
                Some(Stage::TrainRl)
            }
            artifact::EVAL_REPORT | artifact::ABLATION_REPORT => Some(Stage::Eval),
            artifact::BOUND_REPORT | artifact::BOUND_REPORT_CLAMPED | artifact::KLCHECK_SUMMARY => {
                Some(Stage::VerifyKlbound)
            }
            _ => None,
        }
    }
}

/// Reward-model quality on the held-out comparison set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmEvalRecord {
    pub accuracy: RmAccuracy,
    pub order_asymmetry: f64,
}

/// One anchor, flattened for the line-delimited artifact. Selection
/// provenance (strategy, n, seed) repeats on every line so each record is
/// self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub prompt_tokens: Vec<Token>,
    pub prompt_rule: Vec<Token>,
    pub anchor_tokens: Vec<Token>,
    pub strategy: SelectionStrategy,
    pub n: usize,
    pub seed: u64,
    pub selector_score: f64,
}

impl AnchorRecord {
    /// The (prompt, anchor) pair in the shape the PPO loop consumes.
    pub fn pair(&self) -> (Prompt, Response) {
        (
            Prompt {
                tokens: self.prompt_tokens.clone(),
                rule: self.prompt_rule.clone(),
            },
            Response {
                tokens: self.anchor_tokens.clone(),
            },
        )
    }
}

/// One verified (state, step-size) combination of the KL-bound check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub state: usize,
    #[serde(flatten)]
    pub report: BoundReport,
}

/// Aggregate outcome of the KL-bound stage. The raw and clamped runs share
/// states and step sizes; only the advantages differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlcheckSummary {
    pub states: usize,
    pub param_count: usize,
    pub alphas: Vec<f64>,
    /// Every raw-advantage report passed (held, or left the quadratic
    /// regime).
    pub all_pass: bool,
    /// Every clamped-advantage report passed.
    pub all_pass_clamped: bool,
    /// No report left the quadratic regime.
    pub all_in_regime: bool,
    /// Worst relative disagreement between the Monte-Carlo and exact Fisher
    /// traces across states.
    pub max_fisher_trace_rel_err: f64,
    /// Worst `‖E[∇log π]‖` residual across states (exact enumeration).
    pub max_score_residual: f64,
    pub mean_e_a2: f64,
    pub mean_e_a2_clamped: f64,
    pub mean_kl: f64,
    pub mean_kl_clamped: f64,
    /// Clamping lowered the mean advantage second moment.
    pub clamp_reduced_e_a2: bool,
    /// Clamping lowered the mean measured KL.
    pub clamp_reduced_kl: bool,
}

/// Whether a stage executed or was skipped as already up to date.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub ran: bool,
}

/// Executes stages against one output directory, enforcing the manifest
/// invariants. Construct once per (config, force) pair and reuse across
/// stages.
pub struct Runner {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let out = PathBuf::from(&cfg.out_dir);
        Ok(Runner { cfg, out, force })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.iter().map(|s| self.run(*s)).collect()
    }

    /// Runs one stage: checks inputs exist and match their producers'
    /// recorded hashes, skips if already up to date (unless forced),
    /// executes, and records fresh hashes in the manifest.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        std::fs::create_dir_all(&self.out)?;
        write_atomic(
            &self.out.join(artifact::CONFIG_RESOLVED),
            self.cfg.to_toml()?.as_bytes(),
        )?;
        let config_hash = self.cfg.config_hash()?;
        let mut manifest = RunManifest::load_or_new(&self.out, &config_hash)?;

        let inputs = stage.inputs(&self.cfg);
        let mut input_hashes = BTreeMap::new();
        for name in &inputs {
            let path = self.out.join(name);
            if !path.exists() {
                let producer = Stage::producer(name)
                    .map(Stage::name)
                    .unwrap_or("the producing stage");
                return Err(Error::MissingInput(format!(
                    "stage {} needs {name}, which does not exist in {}; \
                     run `pairwise-rl {producer}` (or `pairwise-rl run-all`) first",
                    stage.name(),
                    self.out.display()
                )));
            }
            let hash = file_sha256(&path)?;
            if let Some(producer) = Stage::producer(name) {
                if let Some(recorded) = manifest
                    .stage(producer.name())
                    .and_then(|rec| rec.outputs.get(*name))
                {
                    if recorded != &hash {
                        return Err(Error::Integrity(format!(
                            "{} does not match the hash recorded when {} wrote it \
                             (file modified or corrupted); re-run `pairwise-rl {} --force` \
                             to regenerate it",
                            path.display(),
                            producer.name(),
                            producer.name()
                        )));
                    }
                }
            }
            input_hashes.insert((*name).to_string(), hash);
        }

        let outputs = stage.outputs(&self.cfg);
        if !self.force {
            if let Some(rec) = manifest.stage(stage.name()) {
                if rec.inputs == input_hashes && self.outputs_match(rec, &outputs)? {
                    println!("stage {}: up to date", stage.name());
                    return Ok(StageOutcome { stage, ran: false });
                }
            }
        }

        match stage {
            Stage::GenData => self.gen_data()?,
            Stage::TrainRm => self.train_rm()?,
            Stage::Distill => self.distill()?,
            Stage::SelectAnchors => self.select_anchors()?,
            Stage::TrainRl => self.train_rl()?,
            Stage::Eval => self.eval()?,
            Stage::VerifyKlbound => self.verify_klbound()?,
        }

        let mut output_hashes = BTreeMap::new();
        for name in &outputs {
            let path = self.out.join(name);
            if !path.exists() {
                return Err(Error::contract(format!(
                    "stage {} finished without writing {name}",
                    stage.name()
                )));
            }
            output_hashes.insert((*name).to_string(), file_sha256(&path)?);
        }
        manifest.record_stage(
            stage.name(),
            StageRecord {
                inputs: input_hashes,
                outputs: output_hashes,
            },
        );
        manifest.save(&self.out)?;
        println!("stage {}: wrote {}", stage.name(), outputs.join(", "));
        Ok(StageOutcome { stage, ran: true })
    }

    fn outputs_match(&self, rec: &StageRecord, outputs: &[&'static str]) -> Result<bool> {
        if rec.outputs.len() != outputs.len() {
            return Ok(false);
        }
        for name in outputs {
            let Some(recorded) = rec.outputs.get(*name) else {
                return Ok(false);
            };
            let path = self.out.join(name);
            if !path.exists() || &file_sha256(&path)? != recorded {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn world(&self) -> Result<SynthWorld> {
        SynthWorld::new(self.cfg.world.clone(), self.cfg.seeds.world)
    }

    /// The initialization policy. Anchor selection and PPO must agree on
    /// this exactly: anchors are drawn from the same policy that training
    /// starts (and references) — so both build it from the RL seed.
    fn init_policy(&self, world: &SynthWorld) -> Result<Policy> {
        Policy::init(
            world.vocab(),
            world.max_response_len(),
            self.cfg.rl.policy_arch,
            &mut seeds::rng(self.cfg.seeds.rl, "policy-init"),
        )
    }

    fn gen_data(&self) -> Result<()> {
        let world = self.world()?;
        let train = gen_comparison_dataset(
            &world,
            self.cfg.data.train_pairs,
            &mut seeds::rng(self.cfg.seeds.data, "gen-train"),
            uniform_sampler,
        )?;
        let eval = gen_comparison_dataset(
            &world,
            self.cfg.data.eval_pairs,
            &mut seeds::rng(self.cfg.seeds.data, "gen-eval"),
            uniform_sampler,
        )?;
        let mut prompt_rng = seeds::rng(self.cfg.seeds.data, "gen-prompts");
        let prompts: Vec<Prompt> = (0..self.cfg.data.prompts)
            .map(|_| world.sample_prompt(&mut prompt_rng))
            .collect();
        write_jsonl(&self.out.join(artifact::TRAIN_PAIRS), kind::COMPARISONS, &train)?;
        write_jsonl(&self.out.join(artifact::EVAL_PAIRS), kind::COMPARISONS, &eval)?;
        write_jsonl(&self.out.join(artifact::PROMPTS), kind::PROMPTS, &prompts)
    }

    fn train_rm(&self) -> Result<()> {
        let world = self.world()?;
        let train_data = read_jsonl(&self.out.join(artifact::TRAIN_PAIRS), kind::COMPARISONS)?;
        let eval_data = read_jsonl(&self.out.join(artifact::EVAL_PAIRS), kind::COMPARISONS)?;
        let mut model = PairwiseRewardModel::init(
            world.vocab(),
            world.max_response_len(),
            self.cfg.rm.arch,
            &mut seeds::rng(self.cfg.seeds.rm, "rm-init"),
        )?;
        let history = train_rm(&mut model, &train_data, &self.cfg.rm.train, self.cfg.seeds.rm)?;
        let record = RmEvalRecord {
            accuracy: eval_accuracy(&model, &eval_data)?,
            order_asymmetry: mean_order_asymmetry(&model, &eval_data)?,
        };
        save_pairwise_rm(&self.out.join(artifact::RM_CKPT), &model)?;
        write_jsonl(&self.out.join(artifact::RM_HISTORY), kind::RM_HISTORY, &history)?;
        write_jsonl(&self.out.join(artifact::RM_EVAL), kind::RM_EVAL, &[record])
    }

    fn distill(&self) -> Result<()> {
        let world = self.world()?;
        let train_data: Vec<crate::synthworld::ComparisonInstance> =
            read_jsonl(&self.out.join(artifact::TRAIN_PAIRS), kind::COMPARISONS)?;
        let rm = load_pairwise_rm(&self.out.join(artifact::RM_CKPT))?;
        let mut triples = Vec::with_capacity(train_data.len() * 2);
        for inst in &train_data {
            triples.push(DistillTriple {
                prompt: inst.prompt.clone(),
                candidate: inst.first.clone(),
                anchor: inst.second.clone(),
            });
            triples.push(DistillTriple {
                prompt: inst.prompt.clone(),
                candidate: inst.second.clone(),
                anchor: inst.first.clone(),
            });
        }
        let mut pointwise = PointwiseRewardModel::init(
            world.vocab(),
            world.max_response_len(),
            self.cfg.distill.arch,
            &mut seeds::rng(self.cfg.seeds.distill, "distill-init"),
        )?;
        let history = distill_pointwise(
            &mut pointwise,
            &rm,
            &triples,
            &self.cfg.distill.train,
            self.cfg.seeds.distill,
        )?;
        save_pointwise_rm(&self.out.join(artifact::POINTWISE_CKPT), &pointwise)?;
        write_jsonl(
            &self.out.join(artifact::DISTILL_HISTORY),
            kind::DISTILL_HISTORY,
            &history,
        )
    }

    fn select_anchors(&self) -> Result<()> {
        let world = self.world()?;
        let prompts: Vec<Prompt> = read_jsonl(&self.out.join(artifact::PROMPTS), kind::PROMPTS)?;
        let pointwise = load_pointwise_rm(&self.out.join(artifact::POINTWISE_CKPT))?;
        let rm = load_pairwise_rm(&self.out.join(artifact::RM_CKPT))?;
        let policy = self.init_policy(&world)?;
        let set = select_anchor_set(
            &policy,
            &prompts,
            self.cfg.anchor.n,
            self.cfg.anchor.strategy,
            &pointwise,
            self.cfg.seeds.anchor,
        )?;
        let records: Vec<AnchorRecord> = set
            .entries
            .iter()
            .map(|e| AnchorRecord {
                prompt_tokens: e.prompt.tokens.clone(),
                prompt_rule: e.prompt.rule.clone(),
                anchor_tokens: e.anchor.tokens.clone(),
                strategy: set.strategy,
                n: set.n,
                seed: set.seed,
                selector_score: e.selector_score,
            })
            .collect();
        let diag = anchor_diagnostics(
            &rm,
            &policy,
            &set,
            self.cfg.anchor.diagnostic_samples,
            self.cfg.seeds.anchor,
        )?;
        write_jsonl(&self.out.join(artifact::ANCHORS), kind::ANCHORS, &records)?;
        write_jsonl(&self.out.join(artifact::ANCHOR_DIAG), kind::ANCHOR_DIAG, &[diag])
    }

    fn read_anchor_records(&self) -> Result<Vec<AnchorRecord>> {
        let records: Vec<AnchorRecord> =
            read_jsonl(&self.out.join(artifact::ANCHORS), kind::ANCHORS)?;
        if records.is_empty() {
            return Err(Error::Format(format!(
                "{}: anchor set holds no entries",
                self.out.join(artifact::ANCHORS).display()
            )));
        }
        Ok(records)
    }

    fn train_rl(&self) -> Result<()> {
        let world = self.world()?;
        let rm = load_pairwise_rm(&self.out.join(artifact::RM_CKPT))?;
        let pairs: Vec<(Prompt, Response)> = self
            .read_anchor_records()?
            .iter()
            .map(AnchorRecord::pair)
            .collect();
        let mut policy = self.init_policy(&world)?;
        let reference = policy.clone();
        let mut value = ValueModel::init(
            self.cfg.rl.train.value_variant,
            world.vocab(),
            world.max_response_len(),
            self.cfg.rl.value_arch,
            &mut seeds::rng(self.cfg.seeds.rl, "value-init"),
        )?;
        let pointwise = match self.cfg.rl.train.value_variant {
            ValueVariant::WithAnchor => None,
            ValueVariant::WithoutAnchor => {
                Some(load_pointwise_rm(&self.out.join(artifact::POINTWISE_CKPT))?)
            }
        };
        let metrics = train_pairwise_ppo(
            &mut policy,
            &mut value,
            &reference,
            &rm,
            pointwise.as_ref(),
            &world,
            &pairs,
            &self.cfg.rl.train,
            self.cfg.seeds.rl,
        )?;
        save_policy(&self.out.join(artifact::POLICY_CKPT), &policy)?;
        save_value_model(&self.out.join(artifact::VALUE_CKPT), &value)?;
        write_jsonl(&self.out.join(artifact::METRICS), kind::METRICS, &metrics)
    }

    fn eval(&self) -> Result<()> {
        let world = self.world()?;
        let rm = load_pairwise_rm(&self.out.join(artifact::RM_CKPT))?;
        let policy = load_policy(&self.out.join(artifact::POLICY_CKPT))?;
        let records = self.read_anchor_records()?;
        let rm_record: RmEvalRecord = read_jsonl(&self.out.join(artifact::RM_EVAL), kind::RM_EVAL)?
            .into_iter()
            .next()
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: holds no record",
                    self.out.join(artifact::RM_EVAL).display()
                ))
            })?;
        let diag = read_jsonl(&self.out.join(artifact::ANCHOR_DIAG), kind::ANCHOR_DIAG)?
            .into_iter()
            .next()
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: holds no record",
                    self.out.join(artifact::ANCHOR_DIAG).display()
                ))
            })?;
        let metrics: Vec<crate::rl::IterationMetrics> =
            read_jsonl(&self.out.join(artifact::METRICS), kind::METRICS)?;

        let all_pairs: Vec<(Prompt, Response)> =
            records.iter().map(AnchorRecord::pair).collect();
        let mut win_pairs = all_pairs.clone();
        if self.cfg.eval.win_prompts > 0 && self.cfg.eval.win_prompts < win_pairs.len() {
            win_pairs.truncate(self.cfg.eval.win_prompts);
        }
        let oracle_win_rate = eval_oracle_win_rate(
            &world,
            &policy,
            &win_pairs,
            self.cfg.eval.rollouts_per_prompt,
            1.0,
            &mut seeds::rng(self.cfg.seeds.eval, "eval-win"),
        )?;

        let anchors = AnchorSummary {
            strategy: records[0].strategy,
            n: records[0].n,
            prompts: records.len(),
            mean_selector_score: records.iter().map(|r| r.selector_score).sum::<f64>()
                / records.len() as f64,
        };

        let ablation: Option<AblationReport> = if self.cfg.eval.ablation_seeds.is_empty() {
            None
        } else {
            let pointwise = load_pointwise_rm(&self.out.join(artifact::POINTWISE_CKPT))?;
            let mut rl_cfg = self.cfg.rl.train.clone();
            if self.cfg.eval.ablation_iterations > 0 {
                rl_cfg.iterations = self.cfg.eval.ablation_iterations;
            }
            let report = run_ablation(
                &world,
                &rm,
                &pointwise,
                &all_pairs,
                self.cfg.rl.policy_arch,
                self.cfg.rl.value_arch,
                &rl_cfg,
                &self.cfg.eval.ablation_seeds,
                self.cfg.eval.rollouts_per_prompt,
            )?;
            write_jsonl(
                &self.out.join(artifact::ABLATION_REPORT),
                kind::ABLATION_REPORT,
                &[report.clone()],
            )?;
            Some(report)
        };

        let report = EvalReport {
            config: self.cfg.clone(),
            rm: rm_record,
            anchors,
            anchor_diagnostics: diag,
            oracle_win_rate,
            final_iteration: metrics.last().copied(),
            ablation,
        };
        write_jsonl(&self.out.join(artifact::EVAL_REPORT), kind::EVAL_REPORT, &[report])
    }

    fn verify_klbound(&self) -> Result<()> {
        let world = self.world()?;
        let kl = &self.cfg.klcheck;
        let mut policy = Policy::init(
            world.vocab(),
            world.max_response_len(),
            kl.policy_arch(),
            &mut seeds::rng(self.cfg.seeds.klcheck, "klcheck-init"),
        )?;
        // The zero-initialized output head makes every state's distribution
        // uniform; jitter the parameters so the verified states differ.
        let jitter = Normal::new(0.0, 0.5).expect("finite std");
        let mut jitter_rng = seeds::rng(self.cfg.seeds.klcheck, "klcheck-jitter");
        for block in policy.blocks_mut() {
            for v in block.data_mut() {
                *v += jitter.sample(&mut jitter_rng);
            }
        }

        let content = self.cfg.world.content_tokens;
        let unit = Normal::new(0.0, 1.0).expect("finite std");
        let mut raw_records = Vec::new();
        let mut clamped_records = Vec::new();
        let mut param_count = 0;
        let mut max_trace_err = 0.0_f64;
        let mut max_residual = 0.0_f64;
        let (mut e_a2_raw, mut e_a2_clamped) = (0.0, 0.0);
        let (mut kl_raw_sum, mut kl_clamped_sum) = (0.0, 0.0);
        let mut kl_terms = 0usize;

        for state in 0..kl.states {
            let mut state_rng =
                seeds::rng_indexed(self.cfg.seeds.klcheck, "klcheck-state", state as u64);
            let prompt = world.sample_prompt(&mut state_rng);
            let prefix_len = state % world.max_response_len();
            let prefix: Vec<Token> = (0..prefix_len)
                .map(|_| state_rng.gen_range(0..content) as Token)
                .collect();
            let view = PolicyStateView::new(policy.clone(), prompt, prefix)?;
            param_count = view.param_count();

            let mut adv_rng =
                seeds::rng_indexed(self.cfg.seeds.klcheck, "klcheck-adv", state as u64);
            let advantages: Vec<f64> = (0..view.action_count())
                .map(|_| unit.sample(&mut adv_rng))
                .collect();
            let clamped = clamp_advantages(&advantages, kl.advantage_clamp)?;

            let raw_reports = verify_bound(&view, &advantages, &kl.alphas)?;
            if let Some(msg) = first_failure(&raw_reports) {
                return Err(Error::Numeric(format!("state {state}: {msg}")));
            }
            let clamped_reports = verify_bound(&view, &clamped, &kl.alphas)?;
            if let Some(msg) = first_failure(&clamped_reports) {
                return Err(Error::Numeric(format!(
                    "state {state} (clamped advantages): {msg}"
                )));
            }

            e_a2_raw += raw_reports[0].e_a2;
            e_a2_clamped += clamped_reports[0].e_a2;
            for (raw, cl) in raw_reports.iter().zip(&clamped_reports) {
                kl_raw_sum += raw.kl_exact;
                kl_clamped_sum += cl.kl_exact;
                kl_terms += 1;
            }
            raw_records.extend(
                raw_reports
                    .into_iter()
                    .map(|report| BoundRecord { state, report }),
            );
            clamped_records.extend(
                clamped_reports
                    .into_iter()
                    .map(|report| BoundRecord { state, report }),
            );

            let mut mc_rng =
                seeds::rng_indexed(self.cfg.seeds.klcheck, "klcheck-mc", state as u64);
            let exact = estimate_fisher(&view, FisherMode::Exact, 0, &mut mc_rng)?;
            let mc = estimate_fisher(&view, FisherMode::MonteCarlo, kl.mc_samples, &mut mc_rng)?;
            if !(exact.trace() > 0.0) {
                return Err(Error::Numeric(format!(
                    "state {state}: exact Fisher trace is not positive"
                )));
            }
            max_trace_err =
                max_trace_err.max((mc.trace() - exact.trace()).abs() / exact.trace());
            max_residual =
                max_residual.max(score_mean_zero_check(&view, FisherMode::Exact, 0, &mut mc_rng)?);
        }

        let states_f = kl.states as f64;
        let summary = KlcheckSummary {
            states: kl.states,
            param_count,
            alphas: kl.alphas.clone(),
            all_pass: raw_records.iter().all(|r| r.report.pass),
            all_pass_clamped: clamped_records.iter().all(|r| r.report.pass),
            all_in_regime: raw_records
                .iter()
                .chain(&clamped_records)
                .all(|r| r.report.in_regime),
            max_fisher_trace_rel_err: max_trace_err,
            max_score_residual: max_residual,
            mean_e_a2: e_a2_raw / states_f,
            mean_e_a2_clamped: e_a2_clamped / states_f,
            mean_kl: kl_raw_sum / kl_terms as f64,
            mean_kl_clamped: kl_clamped_sum / kl_terms as f64,
            clamp_reduced_e_a2: e_a2_clamped < e_a2_raw,
            clamp_reduced_kl: kl_clamped_sum < kl_raw_sum,
        };
        write_jsonl(
            &self.out.join(artifact::BOUND_REPORT),
            kind::BOUND_REPORT,
            &raw_records,
        )?;
        write_jsonl(
            &self.out.join(artifact::BOUND_REPORT_CLAMPED),
            kind::BOUND_REPORT,
            &clamped_records,
        )?;
        write_jsonl(
            &self.out.join(artifact::KLCHECK_SUMMARY),
            kind::KLCHECK_SUMMARY,
            &[summary],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_config() -> ExperimentConfig {
        // Every conditional input/output enabled.
        let mut cfg = ExperimentConfig::desk();
        cfg.rl.train.value_variant = ValueVariant::WithoutAnchor;
        cfg.eval.ablation_seeds = vec![0];
        cfg
    }

    #[test]
    fn every_input_has_a_producer_that_lists_it() {
        let cfg = full_config();
        for stage in Stage::ALL {
            for input in stage.inputs(&cfg) {
                let producer = Stage::producer(input)
                    .unwrap_or_else(|| panic!("{input} (input of {}) has no producer", stage.name()));
                assert!(
                    producer.outputs(&cfg).contains(&input),
                    "{} claims to produce {input} but does not list it as an output",
                    producer.name()
                );
            }
        }
    }

    #[test]
    fn every_output_maps_back_to_its_stage() {
        let cfg = full_config();
        for stage in Stage::ALL {
            for output in stage.outputs(&cfg) {
                assert_eq!(
                    Stage::producer(output),
                    Some(stage),
                    "producer lookup for {output} must name {}",
                    stage.name()
                );
            }
        }
    }

    #[test]
    fn producers_precede_consumers_in_run_all_order() {
        let cfg = full_config();
        let position = |s: Stage| Stage::ALL.iter().position(|x| *x == s).unwrap();
        for stage in Stage::ALL {
            for input in stage.inputs(&cfg) {
                let producer = Stage::producer(input).unwrap();
                assert!(
                    position(producer) < position(stage),
                    "{} consumes {input} before {} produces it",
                    stage.name(),
                    producer.name()
                );
            }
        }
    }

    #[test]
    fn unknown_artifact_has_no_producer() {
        assert_eq!(Stage::producer("nonsense.jsonl"), None);
        assert_eq!(Stage::producer(artifact::CONFIG_RESOLVED), None);
    }

    #[test]
    fn stage_names_are_kebab_case_cli_words() {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        assert_eq!(
            names,
            [
                "gen-data",
                "train-rm",
                "distill",
                "select-anchors",
                "train-rl",
                "eval",
                "verify-klbound"
            ]
        );
    }

    #[test]
    fn anchor_record_pair_round_trips() {
        let record = AnchorRecord {
            prompt_tokens: vec![1, 2, 3],
            prompt_rule: vec![9],
            anchor_tokens: vec![4, 5],
            strategy: SelectionStrategy::WorstOfN,
            n: 5,
            seed: 3,
            selector_score: -0.25,
        };
        let (prompt, response) = record.pair();
        assert_eq!(prompt.tokens, vec![1, 2, 3]);
        assert_eq!(prompt.rule, vec![9]);
        assert_eq!(response.tokens, vec![4, 5]);
    }

    #[test]
    fn bound_record_flattens_report_fields() {
        let record = BoundRecord {
            state: 2,
            report: BoundReport {
                alpha: 0.001,
                kl_exact: 1e-8,
                kl_quadratic: 1.1e-8,
                bound_rhs: 5e-8,
                e_a2: 0.9,
                trace_f: 0.4,
                grad_norm_sq: 0.01,
                slack: 0.1,
                cauchy_schwarz_ok: true,
                in_regime: true,
                pass: true,
            },
        };
        let value = serde_json::to_value(&record).unwrap();
        let obj = value.as_object().unwrap();
        assert!(obj.contains_key("state"));
        assert!(
            obj.contains_key("alpha") && obj.contains_key("kl_exact"),
            "report fields must sit at the top level of each bound record"
        );
        let back: BoundRecord = serde_json::from_value(value).unwrap();
        assert_eq!(back, record);
    }
}
