use dpua_core::annotation::{generate_synthetic, SynthProfile};
use dpua_core::grpo::{grpo_loss, grpo_loss_gradient, GroupRecord};
use dpua_core::perception::{
    batch_joint_loss, joint_loss_gradient, prepare_examples, PerceptionConfig, Reduction,
    TrainingMode,
};
use dpua_core::pipeline::build_vocabulary;
use dpua_core::policy::{Gradient, PolicyConfig, ReferencePolicy};
use dpua_core::protocol::render_prompt;
use dpua_core::reward::RewardBreakdown;
use dpua_core::{AnnotatedSample, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIRECTIONS: usize = 100;
const STEP: f64 = 1e-5;

/// Small enough for finite differences, long enough for a full prompt.
fn small_config() -> PolicyConfig {
    PolicyConfig {
        embed_dim: 8,
        context_window: 2,
        hidden_dim: 12,
        heads: 2,
        max_target_len: 64,
        max_seq_len: 320,
    }
}

fn setup(seed: u64) -> (ReferencePolicy, Vec<AnnotatedSample>) {
    let data = generate_synthetic(12, &SynthProfile::desk(TaskKind::Sarcasm), seed).unwrap();
    let vocab = build_vocabulary(&[&data], 4096);
    let policy = ReferencePolicy::new(small_config(), vocab, seed).unwrap();
    assert!(policy.num_params() <= 10_000, "{}", policy.num_params());
    (policy, data)
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Largest relative error between `grad . v` and the central difference of
/// `f` along `v`, over random unit directions.
fn worst_directional_error(
    policy: &ReferencePolicy,
    grad: &Gradient,
    seed: u64,
    f: impl Fn(&ReferencePolicy) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = policy.params().to_vec();
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..DIRECTIONS {
        let v = unit_direction(&mut rng, base.len());
        let shifted = |s: f64| base.iter().zip(&v).map(|(x, d)| x + s * d).collect::<Vec<_>>();
        probe.set_params(shifted(STEP)).unwrap();
        let plus = f(&probe);
        probe.set_params(shifted(-STEP)).unwrap();
        let minus = f(&probe);
        let numeric = (plus - minus) / (2.0 * STEP);
        let analytic: f64 = grad.0.iter().zip(&v).map(|(g, d)| g * d).sum();
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let (policy, data) = setup(3);
    for (mode, reduction) in [
        (TrainingMode::Dpua, Reduction::Sum),
        (TrainingMode::Dpua, Reduction::Mean),
        (TrainingMode::SftStar, Reduction::Sum),
        (TrainingMode::SftPlain, Reduction::Sum),
    ] {
        let cfg = PerceptionConfig {
            mode,
            reduction,
            ..PerceptionConfig::default()
        };
        let batch = prepare_examples(&data[..3], policy.vocab(), mode).unwrap();
        let mut grad = Gradient::zeros(policy.num_params());
        let value = joint_loss_gradient(&policy, &batch, &cfg, &mut grad).unwrap();
        let direct = batch_joint_loss(&policy, &batch, &cfg).unwrap();
        assert!((value - direct).abs() < 1e-9 * direct.abs().max(1.0), "{value} vs {direct}");
        let worst = worst_directional_error(&policy, &grad, 17, |p| {
            batch_joint_loss(p, &batch, &cfg).unwrap()
        });
        assert!(worst < 1e-4, "{mode:?}/{reduction:?}: relative error {worst:e}");
    }
}

fn random_groups(policy: &ReferencePolicy, data: &[AnnotatedSample], seed: u64) -> Vec<GroupRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .take(2)
        .enumerate()
        .map(|(i, s)| {
            let prompt = policy.vocab().encode_prompt(&render_prompt(s).text);
            let completions = policy.sample_group(&prompt, 4, 1.0, seed + i as u64, 12).unwrap();
            let advantages: Vec<f64> = (0..completions.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            GroupRecord {
                sample_id: s.id.clone(),
                prompt,
                rewards: vec![RewardBreakdown::invalid(); completions.len()],
                scalar_rewards: advantages.clone(),
                completions,
                advantages,
            }
        })
        .collect()
}

#[test]
fn grpo_loss_gradient_matches_finite_differences() {
    let (policy, data) = setup(5);
    let groups = random_groups(&policy, &data, 9);
    let mut grad = Gradient::zeros(policy.num_params());
    let value = grpo_loss_gradient(&policy, None, &groups, &mut grad).unwrap();
    let direct = grpo_loss(&policy, &groups).unwrap();
    assert!((value - direct).abs() < 1e-9 * direct.abs().max(1.0), "{value} vs {direct}");
    let worst = worst_directional_error(&policy, &grad, 23, |p| grpo_loss(p, &groups).unwrap());
    assert!(worst < 1e-4, "relative error {worst:e}");
}

#[test]
fn zero_advantages_give_zero_loss_and_gradient() {
    let (policy, data) = setup(6);
    let mut groups = random_groups(&policy, &data, 2);
    for g in &mut groups {
        g.advantages.iter_mut().for_each(|a| *a = 0.0);
    }
    let mut grad = Gradient::zeros(policy.num_params());
    let value = grpo_loss_gradient(&policy, None, &groups, &mut grad).unwrap();
    assert_eq!(value, 0.0);
    assert_eq!(grpo_loss(&policy, &groups).unwrap(), 0.0);
    assert!(grad.0.iter().all(|&g| g == 0.0));
}

#[test]
fn two_completion_group_expands_to_difference() {
    let (policy, data) = setup(8);
    let mut groups = random_groups(&policy, &data, 4);
    groups.truncate(1);
    let g = &mut groups[0];
    g.completions.truncate(2);
    g.advantages = vec![1.0, -1.0];
    let lp = |i: usize| -> f64 {
        policy.token_logprobs(&g.prompt, &g.completions[i].tokens).unwrap().iter().sum()
    };
    let expected = -(lp(0) - lp(1)) / 2.0;
    let loss = grpo_loss(&policy, &groups).unwrap();
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
}
