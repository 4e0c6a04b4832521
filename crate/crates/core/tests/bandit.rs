//! GRPO on a one-step bandit: a policy that is just a softmax over the
//! vocabulary, so the expected effect of an update is known in closed form.

use dpua_core::grpo::{group_advantages, grpo_loss_gradient, GroupRecord};
use dpua_core::policy::{
    Gradient, Optimizer, Policy, PolicyError, SampledCompletion, TokenId, Vocabulary,
    WeightedTarget,
};
use dpua_core::reward::RewardBreakdown;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
struct Bandit {
    vocab: Vocabulary,
    logits: Vec<f64>,
}

impl Bandit {
    fn new() -> Self {
        let vocab = Vocabulary::build(["a b"], 16);
        let logits = vec![0.0; vocab.len()];
        Self { vocab, logits }
    }

    fn probs(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    fn prob(&self, token: &str) -> f64 {
        self.probs()[self.vocab.id(token) as usize]
    }
}

impl Policy for Bandit {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_target_len(&self) -> usize {
        1
    }

    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn token_logprobs(&self, _: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        let p = self.probs();
        Ok(target.iter().map(|&t| p[t as usize].ln()).collect())
    }

    fn sample_group(
        &self,
        _: &[TokenId],
        group: usize,
        _: f64,
        seed: u64,
        _: usize,
    ) -> Result<Vec<SampledCompletion>, PolicyError> {
        let p = self.probs();
        let dist = WeightedIndex::new(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..group)
            .map(|_| {
                let t = dist.sample(&mut rng) as TokenId;
                SampledCompletion {
                    tokens: vec![t],
                    logprobs: vec![p[t as usize].ln()],
                    text: self.vocab.decode(&[t]),
                    terminated: false,
                }
            })
            .collect())
    }

    fn greedy_decode(&self, prompt: &[TokenId], n: usize) -> Result<SampledCompletion, PolicyError> {
        Ok(self.sample_group(prompt, 1, 1.0, 0, n)?.remove(0))
    }

    fn objective_gradient(
        &self,
        _: &[TokenId],
        targets: &[WeightedTarget<'_>],
        grad: &mut Gradient,
    ) -> Result<f64, PolicyError> {
        let p = self.probs();
        let mut value = 0.0;
        for t in targets {
            for (&tok, &w) in t.tokens.iter().zip(t.weights) {
                value -= w * p[tok as usize].ln();
                for (k, g) in grad.0.iter_mut().enumerate() {
                    let onehot = if k == tok as usize { 1.0 } else { 0.0 };
                    *g -= w * (onehot - p[k]);
                }
            }
        }
        Ok(value)
    }

    fn apply_update(
        &mut self,
        grad: &Gradient,
        learning_rate: f64,
        optimizer: &mut Optimizer,
    ) -> Result<(), PolicyError> {
        optimizer.step(&mut self.logits, grad, learning_rate)
    }
}

fn step(policy: &mut Bandit, seed: u64) {
    let a = policy.vocab.id("a");
    let completions = policy.sample_group(&[], 8, 1.0, seed, 1).unwrap();
    let rewards: Vec<f64> = completions
        .iter()
        .map(|c| if c.tokens[0] == a { 1.0 } else { 0.0 })
        .collect();
    let group = GroupRecord {
        sample_id: "bandit".into(),
        prompt: vec![],
        rewards: vec![RewardBreakdown::invalid(); completions.len()],
        advantages: group_advantages(&rewards, 0.1).unwrap(),
        scalar_rewards: rewards,
        completions,
    };
    let mut grad = Gradient::zeros(policy.num_params());
    grpo_loss_gradient(&*policy, None, &[group], &mut grad).unwrap();
    policy.apply_update(&grad, 0.5, &mut Optimizer::sgd()).unwrap();
}

#[test]
fn one_step_moves_mass_towards_rewarded_token() {
    let mut moved = 0;
    for seed in 0..20 {
        let mut policy = Bandit::new();
        let before = policy.prob("a");
        step(&mut policy, seed);
        let after = policy.prob("a");
        // a group without any `a` has equal rewards and leaves the policy alone
        assert!(after >= before, "seed {seed}: {before} -> {after}");
        if after > before {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn repeated_steps_concentrate_on_rewarded_token() {
    let mut policy = Bandit::new();
    for seed in 0..200 {
        step(&mut policy, seed);
    }
    assert!(policy.prob("a") > 0.9, "{}", policy.prob("a"));
}
