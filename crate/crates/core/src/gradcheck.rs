//! Analytic-versus-finite-difference gradient suite.
//!
//! Covers every network role at the widths the presets use and the actor
//! loss of each forecast family. Wide networks are checked on a random
//! subset of coordinates per trial; small ones on every coordinate.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{actor_loss, fork_rollout, ActorLossInputs, AlgoError, Variant};
use crate::autodiff::{finite_diff_grad, max_relative_error, Matrix, Mlp, OutputActivation};
use crate::networks::{ActorNet, CriticPair, ObsBounds, RewardInput, RewardNet, SystemNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub trials: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per trial on networks with more parameters.
    pub sampled_coordinates: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            step: 1e-5,
            tolerance: 1e-4,
            sampled_coordinates: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub trials: usize,
    /// Coordinates compared over all trials.
    pub coordinates: usize,
    /// Coordinates left out because `x ± h` activated a different set of
    /// ReLU units than `x`: the function has a kink inside the stencil and
    /// the central difference is not a derivative there.
    pub excluded: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
    pub elapsed_secs: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_relative_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&CaseReport> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

#[derive(Clone, Copy, Debug)]
enum Role {
    Actor,
    Critic,
    System,
    Reward,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Actor => "actor",
            Role::Critic => "critic",
            Role::System => "system",
            Role::Reward => "reward",
        }
    }

    fn dims(self, obs: usize, act: usize, hidden: &[usize]) -> (Vec<usize>, OutputActivation) {
        let (input, output, out_act) = match self {
            Role::Actor => (obs, act, OutputActivation::TanhScaled(2.0)),
            Role::Critic => (obs + act, 1, OutputActivation::Identity),
            Role::System => (obs + act, obs, OutputActivation::Identity),
            Role::Reward => (2 * obs + act, 1, OutputActivation::Identity),
        };
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        (dims, out_act)
    }
}

/// `(label, obs, act, hidden)`; `None` hidden draws a small random shape
/// per trial.
type Shape = (&'static str, usize, usize, Option<&'static [usize]>);

const SHAPES: [(Role, Shape); 12] = [
    (Role::Actor, ("random", 0, 0, None)),
    (Role::Actor, ("desk", 3, 1, Some(&[64, 64]))),
    (Role::Actor, ("full", 24, 4, Some(&[256, 256]))),
    (Role::Critic, ("random", 0, 0, None)),
    (Role::Critic, ("desk", 3, 1, Some(&[64, 64]))),
    (Role::Critic, ("full", 24, 4, Some(&[256, 256]))),
    (Role::System, ("random", 0, 0, None)),
    (Role::System, ("desk", 3, 1, Some(&[64, 64]))),
    (Role::System, ("full", 24, 4, Some(&[400, 300]))),
    (Role::Reward, ("random", 0, 0, None)),
    (Role::Reward, ("desk", 3, 1, Some(&[64, 64]))),
    (Role::Reward, ("full", 24, 4, Some(&[256, 256]))),
];

/// The distinct actor-loss shapes. `td3_fork` stands for every variant
/// sharing its two-step form.
const LOSS_VARIANTS: [Variant; 4] = [Variant::Td3Fork, Variant::ForkS, Variant::ForkQ, Variant::ForkDq];

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, AlgoError> {
    if opts.trials == 0 || !(opts.step > 0.0) || opts.sampled_coordinates == 0 {
        return Err(AlgoError::Config("gradcheck needs trials, step and coordinates > 0".into()));
    }
    let start = Instant::now();
    let mut cases = Vec::new();
    for (k, (role, shape)) in SHAPES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64);
        cases.push(network_case(*role, *shape, opts, &mut rng)?);
    }
    for (k, variant) in LOSS_VARIANTS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(100 + k as u64);
        cases.push(loss_case(*variant, opts, &mut rng)?);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        cases,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("finite entries")
}

fn random_hidden<R: Rng>(rng: &mut R) -> Vec<usize> {
    (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=8)).collect()
}

/// Indices to probe: all of them when few, otherwise a fresh sample.
fn coordinates<R: Rng>(rng: &mut R, len: usize, budget: usize) -> Vec<usize> {
    if len <= budget {
        (0..len).collect()
    } else {
        sample(rng, len, budget).into_vec()
    }
}

/// Checks parameter and input gradients of `⟨u, net(x)⟩` for random `u`.
fn network_case<R: Rng>(role: Role, shape: Shape, opts: &GradcheckOptions, rng: &mut R) -> Result<CaseReport, AlgoError> {
    let (label, obs, act, hidden) = shape;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut excluded = 0;
    for _ in 0..opts.trials {
        let (obs, act, hidden) = match hidden {
            Some(h) => (obs, act, h.to_vec()),
            None => (rng.gen_range(1..=4), rng.gen_range(1..=3), random_hidden(rng)),
        };
        let (dims, out_act) = role.dims(obs, act, &hidden);
        let net = Mlp::init(&dims, out_act, rng)?;
        let batch = rng.gen_range(1..=4);
        let x = random_matrix(rng, batch, dims[0]);
        let u = random_matrix(rng, batch, *dims.last().unwrap());
        // value of ⟨u, net(x)⟩ and the active-unit pattern it was computed on
        let objective = |m: &Mlp, x: &Matrix| -> (f64, Vec<bool>) {
            let (y, cache) = m.forward(x).expect("shapes fixed by construction");
            let v = y.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum();
            (v, cache.relu_pattern())
        };

        let (_, cache) = net.forward(&x)?;
        let base = cache.relu_pattern();
        let param_grad = net.backward(&cache, &u)?.flatten();
        let input_grad = net.input_gradient(&cache, &u)?;

        let params = net.flat_params();
        let idx = coordinates(rng, params.len(), opts.sampled_coordinates);
        let picked: Vec<f64> = idx.iter().map(|&i| params[i]).collect();
        let mut probe = net.clone();
        let mut full = params.clone();
        let mut patterns = Vec::with_capacity(2 * idx.len());
        let fd = finite_diff_grad(
            |p| {
                for (&i, v) in idx.iter().zip(p) {
                    full[i] = *v;
                }
                probe.set_flat_params(&full).expect("same length");
                let (v, pattern) = objective(&probe, &x);
                patterns.push(pattern);
                v
            },
            &picked,
            opts.step,
        )?;
        let analytic: Vec<f64> = idx.iter().map(|&i| param_grad[i]).collect();
        let (err, n, skipped) = compare_smooth(&analytic, &fd, &patterns, &base);
        worst = worst.max(err);
        compared += n;
        excluded += skipped;

        let xs = x.as_slice().to_vec();
        let mut patterns = Vec::with_capacity(2 * xs.len());
        let fd_in = finite_diff_grad(
            |v| {
                let (value, pattern) = objective(&net, &Matrix::new(batch, dims[0], v.to_vec()).expect("finite"));
                patterns.push(pattern);
                value
            },
            &xs,
            opts.step,
        )?;
        let (err, n, skipped) = compare_smooth(input_grad.as_slice(), &fd_in, &patterns, &base);
        worst = worst.max(err);
        compared += n;
        excluded += skipped;
    }
    Ok(CaseReport {
        name: format!("{} {label}", role.name()),
        trials: opts.trials,
        coordinates: compared,
        excluded,
        max_relative_error: worst,
    })
}

/// Max relative error over the coordinates whose `+h` and `−h` probes (in
/// that order in `patterns`) kept the `base` activation pattern; also the
/// number compared and the number left out.
fn compare_smooth(analytic: &[f64], fd: &[f64], patterns: &[Vec<bool>], base: &[bool]) -> (f64, usize, usize) {
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (i, pair) in patterns.chunks(2).enumerate() {
        if pair.iter().all(|p| p == base) {
            a.push(analytic[i]);
            n.push(fd[i]);
        }
    }
    let skipped = analytic.len() - a.len();
    let err = if a.is_empty() { 0.0 } else { max_relative_error(&a, &n) };
    (err, a.len(), skipped)
}

/// Actor-parameter gradient of the composed loss, forecasts held fixed.
fn loss_case<R: Rng>(variant: Variant, opts: &GradcheckOptions, rng: &mut R) -> Result<CaseReport, AlgoError> {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..opts.trials {
        let obs = rng.gen_range(1..=4);
        let act = rng.gen_range(1..=3);
        let hidden = random_hidden(rng);
        let actor = ActorNet::new(obs, act, &hidden, 1.5, rng)?;
        let critics = CriticPair::new(obs, act, &hidden, rng)?;
        let reward = RewardNet::new(obs, act, &hidden, RewardInput::StateActionNext, rng)?;
        let system = SystemNet::new(obs, act, &hidden, rng)?;
        let n = rng.gen_range(1..=5);
        let states = random_matrix(rng, n, obs);
        let (s1, s2) = fork_rollout(&system, &actor, &states, &ObsBounds::running(obs))?;
        let weight = rng.gen_range(0.1..1.0);
        let gamma = rng.gen_range(0.5..1.0);
        let base = ActorLossInputs {
            variant,
            actor: &actor,
            critics: &critics,
            reward: &reward,
            states: &states,
            future: Some((&s1, &s2)),
            weight,
            gamma,
            dq_weight: if variant == Variant::ForkDq { 0.5 } else { 0.0 },
        };
        let out = actor_loss(base)?;
        if !out.forward_looking {
            return Err(AlgoError::Usage(format!("{variant} loss skipped its forecast terms")));
        }
        let params = actor.params.flat_params();
        let mut probe = actor.clone();
        let fd = finite_diff_grad(
            |p| {
                probe.params.set_flat_params(p).expect("same length");
                actor_loss(ActorLossInputs { actor: &probe, ..base }).expect("shapes fixed by construction").loss
            },
            &params,
            opts.step,
        )?;
        worst = worst.max(max_relative_error(&out.grads.flatten(), &fd));
        compared += params.len();
    }
    Ok(CaseReport {
        name: format!("{variant} loss"),
        trials: opts.trials,
        coordinates: compared,
        excluded: 0,
        max_relative_error: worst,
    })
}
