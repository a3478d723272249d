//! Scratch pilot (not part of the suite): anchor stability diagnostics.

use pairwise_rl::anchor::{
    anchor_diagnostics, select_anchor_set, winning_rate_variance, AnchorSet, OracleScorer,
    ResponseScorer, SelectionStrategy,
};
use pairwise_rl::io::{load_pairwise_rm, load_pointwise_rm};
use pairwise_rl::rl::{generate_response, Policy};
use pairwise_rl::runner::{artifact, ExperimentConfig, Runner, Stage};
use pairwise_rl::seeds;
use pairwise_rl::synthworld::{Prompt, SynthWorld};

#[test]
#[ignore]
fn pilot_anchor_stability() {
    const PROMPTS: usize = 200;
    const SELECTION_SEED: u64 = 9;
    const DIAG_SEED: u64 = 99;

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = ExperimentConfig::desk();
    cfg.out_dir = out.to_string_lossy().into_owned();
    let runner = Runner::new(cfg.clone(), false).unwrap();
    for stage in [Stage::GenData, Stage::TrainRm, Stage::Distill, Stage::SelectAnchors] {
        runner.run(stage).unwrap();
    }
    let world = SynthWorld::new(cfg.world.clone(), cfg.seeds.world).unwrap();
    let rm = load_pairwise_rm(&out.join(artifact::RM_CKPT)).unwrap();
    let pointwise = load_pointwise_rm(&out.join(artifact::POINTWISE_CKPT)).unwrap();

    let mut prompt_rng = seeds::rng(SELECTION_SEED, "anchor-quality-prompts");
    let prompts: Vec<Prompt> = (0..PROMPTS).map(|_| world.sample_prompt(&mut prompt_rng)).collect();
    let policy = Policy::init(
        world.vocab(),
        world.max_response_len(),
        cfg.rl.policy_arch,
        &mut seeds::rng(cfg.seeds.rl, "policy-init"),
    )
    .unwrap();

    let oracle_variance = |set: &AnchorSet, samples: usize| -> f64 {
        let mut rates = Vec::new();
        for (i, entry) in set.entries.iter().enumerate() {
            let mut rng = seeds::rng_indexed(DIAG_SEED, "stability-rollouts", i as u64);
            let mut win = 0.0;
            for _ in 0..samples {
                let y = generate_response(&policy, &entry.prompt, 1.0, &mut rng).unwrap();
                win += world.oracle_prefer_prob(&entry.prompt, &y, &entry.anchor).unwrap();
            }
            rates.push(win / samples as f64);
        }
        winning_rate_variance(&rates).unwrap()
    };

    for (sel_name, scorer) in [
        ("oracle", &OracleScorer(&world) as &dyn ResponseScorer),
        ("pointwise", &pointwise as &dyn ResponseScorer),
    ] {
        let best_of_1 = select_anchor_set(
            &policy,
            &prompts,
            1,
            SelectionStrategy::BestOfN,
            scorer,
            SELECTION_SEED,
        )
        .unwrap();
        let worst_of_5 = select_anchor_set(
            &policy,
            &prompts,
            5,
            SelectionStrategy::WorstOfN,
            scorer,
            SELECTION_SEED,
        )
        .unwrap();
        for samples in [16usize, 64, 128] {
            let rm_b = anchor_diagnostics(&rm, &policy, &best_of_1, samples, DIAG_SEED).unwrap();
            let rm_w = anchor_diagnostics(&rm, &policy, &worst_of_5, samples, DIAG_SEED).unwrap();
            println!(
                "sel {sel_name:9} samples {samples:3} | rm-judge: best1 var {:.5} (mean {:.3}) \
                 worst5 var {:.5} (mean {:.3}) {}",
                rm_b.rate_variance,
                rm_b.mean_winning_rate,
                rm_w.rate_variance,
                rm_w.mean_winning_rate,
                if rm_w.rate_variance < rm_b.rate_variance { "OK" } else { "REVERSED" },
            );
        }
        let ob = oracle_variance(&best_of_1, 64);
        let ow = oracle_variance(&worst_of_5, 64);
        println!(
            "sel {sel_name:9} samples  64 | oracle-judge: best1 var {:.5} worst5 var {:.5} {}",
            ob,
            ow,
            if ow < ob { "OK" } else { "REVERSED" },
        );
    }
}
