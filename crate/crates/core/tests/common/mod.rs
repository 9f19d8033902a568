#![allow(dead_code)]

use demoaug_core::agent::{collect_episode, Agent, AgentConfig, Exploration};
use demoaug_core::neural::{DenseNet, Gradients};
use demoaug_core::replay::{self, BufferRole, EpisodeBuffer, SamplerConfig, Transition};
use demoaug_core::sim::{self, TaskKind, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between analytic and central-difference gradients,
/// ignoring entries where both are below `floor`.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose stencil straddles a relu kink.
    pub kinks: usize,
}

impl GradCheck {
    fn compare(&mut self, analytic: f64, up: f64, base: f64, down: f64) {
        let (fwd, bwd) = ((up - base) / FD_STEP, (base - down) / FD_STEP);
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-8 {
            self.kinks += 1;
            return;
        }
        compare(analytic, (up - down) / (2.0 * FD_STEP), 1e-7, &mut self.max_rel_err, &mut self.checked);
    }
}

fn compare(analytic: f64, numeric: f64, floor: f64, worst: &mut f64, checked: &mut usize) {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        return;
    }
    *checked += 1;
    *worst = worst.max((analytic - numeric).abs() / scale);
}

/// Central differences of `loss` over every parameter of the network picked
/// by `which`.
fn check_net(
    agent: &Agent,
    which: fn(&mut Agent) -> &mut DenseNet,
    grads: &Gradients,
    loss: &dyn Fn(&Agent) -> f64,
    out: &mut GradCheck,
) {
    let mut probe = agent.clone();
    let base = loss(&probe);
    let layers = which(&mut probe).layers().len();
    for l in 0..layers {
        let (rows, cols) = which(&mut probe).layers()[l].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                let p = which(&mut probe).layers()[l].weights[[r, c]];
                which(&mut probe).layer_mut(l).weights[[r, c]] = p + FD_STEP;
                let up = loss(&probe);
                which(&mut probe).layer_mut(l).weights[[r, c]] = p - FD_STEP;
                let down = loss(&probe);
                which(&mut probe).layer_mut(l).weights[[r, c]] = p;
                out.compare(grads.weights[l][[r, c]], up, base, down);
            }
            let p = which(&mut probe).layers()[l].bias[r];
            which(&mut probe).layer_mut(l).bias[r] = p + FD_STEP;
            let up = loss(&probe);
            which(&mut probe).layer_mut(l).bias[r] = p - FD_STEP;
            let down = loss(&probe);
            which(&mut probe).layer_mut(l).bias[r] = p;
            out.compare(grads.bias[l][r], up, base, down);
        }
    }
}

fn actor_net(a: &mut Agent) -> &mut DenseNet {
    &mut a.policy.actor
}

fn critic_net(a: &mut Agent) -> &mut DenseNet {
    &mut a.critic
}

/// Small random agent and a relabeled batch from random-policy episodes.
pub fn random_setup(seed: u64) -> (Agent, Vec<Transition>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = [TaskKind::Push, TaskKind::PickAndPlace, TaskKind::Stack][rng.random_range(0..3)];
    let spec = TaskSpec::new(kind);
    let depth = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=10)).collect();
    let config = AgentConfig {
        hidden_sizes: hidden,
        action_l2: rng.random_range(0.0..2.0),
        gamma: rng.random_range(0.5..0.99),
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(config, spec.clone(), &mut rng).unwrap();
    // zero biases put whole layers exactly on a relu kink when every unit
    // of the previous layer is inactive
    for net in [&mut agent.policy.actor, &mut agent.critic] {
        for l in 0..net.layers().len() {
            net.layer_mut(l).bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
    let mut buf = EpisodeBuffer::new(10, BufferRole::Agent, spec.clone());
    let explore = Exploration { noise_std: 0.3, random_eps: 0.5 };
    for _ in 0..3 {
        let inst = sim::sample_task_instance(&spec, &mut rng).unwrap();
        let c = collect_episode(&agent.policy, &inst, None, Some(explore), &mut rng).unwrap();
        agent.policy.normalizer.observe_episode(&c.episode);
        buf.push_episode(c.episode).unwrap();
    }
    agent.policy.normalizer.recompute();
    let batch_size = rng.random_range(1..=12);
    let batch = replay::sample_her(&buf, batch_size, &SamplerConfig::default(), &mut rng).unwrap();
    (agent, batch)
}

/// Gradient check of the actor and critic losses for one random setup.
pub fn gradient_check(seed: u64) -> (GradCheck, GradCheck) {
    let (agent, batch) = random_setup(seed);
    let g = agent.losses_and_gradients(&batch).unwrap();
    let mut actor = GradCheck::default();
    let mut critic = GradCheck::default();
    let actor_loss = |a: &Agent| a.losses_and_gradients(&batch).unwrap().actor_loss;
    let critic_loss = |a: &Agent| a.losses_and_gradients(&batch).unwrap().critic_loss;
    check_net(&agent, actor_net, &g.actor, &actor_loss, &mut actor);
    check_net(&agent, critic_net, &g.critic, &critic_loss, &mut critic);
    (actor, critic)
}
