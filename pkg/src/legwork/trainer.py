"""Natural policy gradient training for low-level, high-level, and flat
policies.

One iteration: collect a batch of trajectories, fit the value baseline on
discounted returns, compute GAE advantages (batch-normalized), take the
likelihood-ratio gradient, precondition it with conjugate gradient against
Fisher-vector products, and apply a KL-normalized step
theta' = theta + sqrt(2 delta / d.g) * d.

Rollout collection is deterministic given (policy, seed): every trajectory
draws from its own sub-stream keyed by (iteration, index), and per-index
aggregation order is fixed, so worker count never changes results.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericsError
from .policy import (
    GOAL_HORIZON,
    MlpPolicy,
    gaussian_kl,
    grad_log_prob_sum,
    hierarchical_episode,
    mean_jvp,
    mean_vjp,
    save_checkpoint,
)
from .randomization import RandomizationConfig
from .tasks import EnvOverrides, LowLevelGoalEnv, TaskEnv, TaskEnvConfig

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "mean_return", "std_return", "mean_kl",
                   "success_rate", "wall_time")


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 20  # trajectories per iteration
    gamma: float = 0.99
    lam: float = 0.97
    kl_step: float = 0.05
    cg_iters: int = 10
    cg_damping: float = 1e-4
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 0  # 0: final checkpoint only
    hl_full_dynamics: bool = False  # also randomize dynamics in high-level training

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must be in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lam must be in [0, 1]")
        if self.kl_step <= 0.0:
            raise ConfigurationError("kl_step must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigurationError("iterations and batch_size must be >= 1")


@dataclass
class Trajectory:
    obs: np.ndarray  # (T, obs_dim)
    act: np.ndarray  # (T, act_dim), pre-clamp samples
    rew: np.ndarray  # (T,)
    logp: np.ndarray  # (T,) at collection time
    success: bool = False

    def __len__(self):
        return len(self.rew)

    @property
    def total_reward(self) -> float:
        return float(self.rew.sum())


@dataclass
class TrajectoryBatch:
    trajectories: list
    horizon: int
    returns: list = field(default=None)  # discounted returns per trajectory
    advantages: list = field(default=None)  # normalized across the batch

    def __post_init__(self):
        for tr in self.trajectories:
            if len(tr) > self.horizon:
                raise ConfigurationError("trajectory longer than horizon")
            if not np.all(np.isfinite(tr.logp)):
                raise NumericsError("non-finite log probabilities in batch")

    @property
    def n_samples(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def flat_obs(self) -> np.ndarray:
        return np.concatenate([t.obs for t in self.trajectories])

    def flat_act(self) -> np.ndarray:
        return np.concatenate([t.act for t in self.trajectories])

    def flat_adv(self) -> np.ndarray:
        return np.concatenate(self.advantages)

    def mean_return(self) -> float:
        return float(np.mean([t.total_reward for t in self.trajectories]))

    def std_return(self) -> float:
        return float(np.std([t.total_reward for t in self.trajectories]))

    def success_rate(self) -> float:
        return float(np.mean([t.success for t in self.trajectories]))


# -- episode runners (module level: picklable for worker pools) -------------

def _traj_streams(seed: int, key: tuple):
    ss = np.random.SeedSequence(seed, spawn_key=key)
    env_seed = int(ss.generate_state(1)[0])
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key + (1,)))
    return env_seed, rng


def run_low_episode(policy: MlpPolicy, rand: RandomizationConfig,
                    overrides: EnvOverrides | None, env_seed: int,
                    rng: np.random.Generator) -> Trajectory:
    """One 40-step goal-reaching episode (ends early on a fall)."""
    env = LowLevelGoalEnv(rand, env_seed, overrides=overrides)
    obs = env.reset()
    obs_l, act_l, rew_l, logp_l = [], [], [], []
    info = {"reached": False}
    for _ in range(env.horizon):
        a_pre, logp = policy.sample(obs, rng)
        obs_l.append(obs)
        act_l.append(a_pre)
        logp_l.append(logp)
        obs, r, done, info = env.step(np.clip(a_pre, -1.0, 1.0))
        rew_l.append(r)
        if done:
            break
    return Trajectory(np.array(obs_l), np.array(act_l), np.array(rew_l),
                      np.array(logp_l), success=bool(info["reached"]))


def run_flat_task_episode(policy: MlpPolicy, task_cfg: TaskEnvConfig,
                          env_seed: int, rng: np.random.Generator) -> Trajectory:
    """One 200-step task episode driven directly at the joint level."""
    env = TaskEnv(task_cfg, env_seed)
    obs = env.reset()
    obs_l, act_l, rew_l, logp_l = [], [], [], []
    for _ in range(env.horizon):
        a_pre, logp = policy.sample(obs, rng)
        obs_l.append(obs)
        act_l.append(a_pre)
        logp_l.append(logp)
        joint = np.clip(a_pre, -1.0, 1.0).reshape(env.n_agents, 12)
        obs, r, done, _ = env.step(joint)
        rew_l.append(r)
        if done:
            break
    return Trajectory(np.array(obs_l), np.array(act_l), np.array(rew_l),
                      np.array(logp_l), success=env.episode_success())


def run_hier_task_episode(pi_hi: MlpPolicy, pi_lo: MlpPolicy,
                          task_cfg: TaskEnvConfig,
                          noise_cfg: RandomizationConfig | None, gamma: float,
                          env_seed: int, rng: np.random.Generator) -> Trajectory:
    """One task episode under the hierarchy; the high-level view of it."""
    env = TaskEnv(task_cfg, env_seed)
    hi, _, _ = hierarchical_episode(env, pi_hi, pi_lo, c=GOAL_HORIZON,
                                    horizon=env.horizon, rng=rng,
                                    noise_cfg=noise_cfg, gamma=gamma)
    return Trajectory(hi["obs"], hi["act"], hi["rew"], hi["logp"],
                      success=env.episode_success())


def _run_indexed(args):
    episode_fn, seed, key = args
    env_seed, rng = _traj_streams(seed, key)
    return episode_fn(env_seed=env_seed, rng=rng)


def collect_batch(episode_fn, n_traj: int, horizon: int, seed: int,
                  seed_key: tuple = (), workers: int = 1) -> TrajectoryBatch:
    """Collect n_traj trajectories; deterministic given (episode_fn, seed).

    episode_fn(env_seed, rng) -> Trajectory must be picklable when
    workers > 1. Trajectory i always uses sub-stream seed_key + (i,), so the
    result is identical for any worker count.
    """
    jobs = [(episode_fn, seed, tuple(seed_key) + (i,)) for i in range(n_traj)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(_run_indexed, jobs))
    else:
        trajectories = [_run_indexed(j) for j in jobs]
    return TrajectoryBatch(trajectories, horizon=horizon)


# -- advantages and baseline -------------------------------------------------

def discounted_returns(rew: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rew)
    acc = 0.0
    for t in range(len(rew) - 1, -1, -1):
        acc = rew[t] + gamma * acc
        out[t] = acc
    return out


def gae_advantages(rew: np.ndarray, values: np.ndarray, gamma: float,
                   lam: float) -> np.ndarray:
    """Raw (pre-normalization) GAE for one trajectory; V past the episode
    end is zero."""
    T = len(rew)
    v_next = np.append(values[1:], 0.0)
    deltas = rew + gamma * v_next - values
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


class LinearBaseline:
    """Ridge-regularized least squares on simple state/time features."""

    def __init__(self, ridge: float = 1e-5):
        self.ridge = ridge
        self.coef = None

    @staticmethod
    def features(obs: np.ndarray, horizon: int) -> np.ndarray:
        T = len(obs)
        tau = np.arange(T) / horizon
        return np.hstack([obs, obs ** 2, tau[:, None], tau[:, None] ** 2,
                          tau[:, None] ** 3, np.ones((T, 1))])

    def predict(self, obs: np.ndarray, horizon: int) -> np.ndarray:
        if self.coef is None:
            return np.zeros(len(obs))
        return self.features(obs, horizon) @ self.coef

    def fit(self, X: np.ndarray, y: np.ndarray) -> None:
        ridge = self.ridge
        gram = X.T @ X
        rhs = X.T @ y
        eye = np.eye(X.shape[1])
        for _ in range(12):
            try:
                coef = np.linalg.solve(gram + ridge * eye, rhs)
            except np.linalg.LinAlgError:
                ridge *= 10.0
                continue
            if np.all(np.isfinite(coef)):
                self.coef = coef
                return
            ridge *= 10.0
        raise NumericsError("baseline fit failed at maximum ridge")


def fit_baseline(batch: TrajectoryBatch, gamma: float,
                 ridge: float = 1e-5) -> LinearBaseline:
    """Fit the value baseline on this batch's discounted returns."""
    if not batch.trajectories:
        raise ConfigurationError("cannot fit a baseline on an empty batch")
    if batch.returns is None:
        batch.returns = [discounted_returns(t.rew, gamma)
                         for t in batch.trajectories]
    X = np.concatenate([LinearBaseline.features(t.obs, batch.horizon)
                        for t in batch.trajectories])
    y = np.concatenate(batch.returns)
    baseline = LinearBaseline(ridge)
    baseline.fit(X, y)
    return baseline


def compute_advantages(batch: TrajectoryBatch, baseline: LinearBaseline | None,
                       gamma: float, lam: float) -> TrajectoryBatch:
    """Fill batch.returns and batch.advantages (normalized to mean 0, std 1)."""
    if batch.returns is None:
        batch.returns = [discounted_returns(t.rew, gamma)
                         for t in batch.trajectories]
    raw = []
    for t in batch.trajectories:
        values = (baseline.predict(t.obs, batch.horizon)
                  if baseline is not None else np.zeros(len(t)))
        raw.append(gae_advantages(t.rew, values, gamma, lam))
    flat = np.concatenate(raw)
    mu = flat.mean()
    sd = flat.std()
    batch.advantages = [(a - mu) / (sd + 1e-8) for a in raw]
    return batch


# -- NPG machinery -------------------------------------------------------------

def policy_gradient(batch: TrajectoryBatch, policy: MlpPolicy) -> np.ndarray:
    """Likelihood-ratio gradient: mean over samples of grad log pi * adv."""
    if batch.advantages is None:
        raise ConfigurationError("advantages not computed")
    n = batch.n_samples
    g = grad_log_prob_sum(policy, batch.flat_obs(), batch.flat_act(),
                          batch.flat_adv() / n)
    if not np.all(np.isfinite(g)):
        raise NumericsError("non-finite policy gradient")
    return g


def fisher_vector_product(batch: TrajectoryBatch, policy: MlpPolicy,
                          v: np.ndarray, damping: float) -> np.ndarray:
    """F v + damping v, with F the Hessian of the mean KL between the
    collection-time policy and the current one over batch states (for a
    Gaussian policy this is the Gauss-Newton form J' diag(1/var) J plus a
    constant 2I block for log_std)."""
    X = batch.flat_obs()
    _, cache = policy.mean_batch(X)
    dmu = mean_jvp(policy, v, cache)
    inv_var = np.exp(-2.0 * policy.log_std)
    out = mean_vjp(policy, dmu * inv_var, cache) / len(X)
    out[-policy.act_dim:] = 2.0 * v[-policy.act_dim:]
    out += damping * v
    if not np.all(np.isfinite(out)):
        raise NumericsError("non-finite Fisher-vector product")
    return out


def conjugate_gradient(fvp, g: np.ndarray, iters: int = 10,
                       tol: float = 1e-10):
    """Approximately solve F d = g; returns (d, residual_norm) for the best
    iterate seen."""
    x = np.zeros_like(g)
    r = g.copy()
    p = g.copy()
    rdotr = float(r @ r)
    best_x = x.copy()
    best_res = math.sqrt(rdotr)
    for _ in range(iters):
        if math.sqrt(rdotr) < tol:
            break
        z = fvp(p)
        alpha = rdotr / float(p @ z)
        x = x + alpha * p
        r = r - alpha * z
        new = float(r @ r)
        if math.sqrt(new) < best_res:
            best_res = math.sqrt(new)
            best_x = x.copy()
        p = r + (new / rdotr) * p
        rdotr = new
    return best_x, best_res


LOG_STD_FLOOR = -3.0


def npg_update(policy: MlpPolicy, g: np.ndarray, d: np.ndarray,
               delta: float):
    """theta' = theta + sqrt(2 delta / (d.g)) d; skipped when d.g <= 0 or the
    step is non-finite. Returns (new_policy, info)."""
    dtg = float(d @ g)
    if not math.isfinite(dtg) or dtg <= 0.0:
        log.warning("npg_update skipped: d.g = %s", dtg)
        return policy, {"skipped": True, "step_scale": 0.0}
    scale = math.sqrt(2.0 * delta / dtg)
    theta = policy.flat_params() + scale * d
    if not np.all(np.isfinite(theta)):
        log.warning("npg_update skipped: non-finite parameters")
        return policy, {"skipped": True, "step_scale": scale}
    new_policy = policy.copy()
    theta[-policy.act_dim:] = np.maximum(theta[-policy.act_dim:], LOG_STD_FLOOR)
    new_policy.set_flat_params(theta)
    return new_policy, {"skipped": False, "step_scale": scale}


def batch_kl(batch: TrajectoryBatch, old_policy: MlpPolicy,
             new_policy: MlpPolicy) -> float:
    """Mean KL(old || new) over all batch states."""
    X = batch.flat_obs()
    mu_old, _ = old_policy.mean_batch(X)
    mu_new, _ = new_policy.mean_batch(X)
    return gaussian_kl(mu_old, old_policy.log_std, mu_new, new_policy.log_std)


# -- training loops --------------------------------------------------------------

class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_COLUMNS)

    def write(self, **row):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row[c] for c in METRICS_COLUMNS])


def train_policy(policy: MlpPolicy, make_episode_fn, horizon: int,
                 config: TrainConfig, gamma: float | None = None,
                 out_dir=None, metrics_path=None, meta: dict | None = None,
                 phase: str = "policy") -> MlpPolicy:
    """Generic NPG loop: collect, fit baseline, GAE, gradient, CG, update.

    make_episode_fn(policy) must return a picklable episode callable.
    gamma overrides config.gamma for return/advantage discounting (the
    high level discounts across decisions with gamma^c).
    """
    gamma = config.gamma if gamma is None else gamma
    writer = MetricsWriter(metrics_path)
    out = Path(out_dir) if out_dir is not None else None
    start = time.monotonic()
    for it in range(config.iterations):
        batch = collect_batch(make_episode_fn(policy), config.batch_size,
                              horizon, config.seed, seed_key=(it,),
                              workers=config.workers)
        baseline = fit_baseline(batch, gamma)
        compute_advantages(batch, baseline, gamma, config.lam)
        g = policy_gradient(batch, policy)

        def fvp(v, _batch=batch, _policy=policy):
            return fisher_vector_product(_batch, _policy, v, config.cg_damping)

        d, _ = conjugate_gradient(fvp, g, config.cg_iters)
        new_policy, upd = npg_update(policy, g, d, config.kl_step)
        kl = 0.0 if upd["skipped"] else batch_kl(batch, policy, new_policy)
        policy = new_policy
        writer.write(iteration=it, mean_return=f"{batch.mean_return():.6f}",
                     std_return=f"{batch.std_return():.6f}",
                     mean_kl=f"{kl:.8f}",
                     success_rate=f"{batch.success_rate():.4f}",
                     wall_time=f"{time.monotonic() - start:.3f}")
        if out is not None and config.checkpoint_every > 0 \
                and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(policy, out / f"ckpt_{it + 1:06d}",
                            meta={**(meta or {}), "phase": phase,
                                  "iteration": it + 1})
    if out is not None:
        save_checkpoint(policy, out / "final",
                        meta={**(meta or {}), "phase": phase,
                              "iteration": config.iterations})
    return policy


def train_low_level(config: TrainConfig, rand: RandomizationConfig,
                    out_dir=None, metrics_path=None,
                    meta: dict | None = None) -> MlpPolicy:
    """Goal-reaching pre-training under the configured randomizations."""
    policy = MlpPolicy(32, 12, hidden=(32, 32), seed=config.seed)
    fn = lambda pol: partial(run_low_episode, pol, rand, None)
    return train_policy(policy, fn, horizon=40, config=config,
                        out_dir=out_dir, metrics_path=metrics_path,
                        meta=meta, phase="low")


def _hier_env_cfg(task_kind: str, randomized: bool,
                  config: TrainConfig) -> tuple:
    """Env config + noise config for high-level training. The high level's
    own randomizations are action noise and (Coordinate) object dimensions;
    dynamics stay nominal unless hl_full_dynamics is set."""
    dyn = config.hl_full_dynamics
    rand = RandomizationConfig(
        damping_on=dyn, joint_friction_on=dyn, mass_on=dyn,
        surface_friction_on=dyn, gain_on=dyn, height_field_on=dyn,
        sticky_on=dyn, wrench_on=dyn,
        highlevel_noise_on=randomized, object_dims_on=randomized)
    noise_cfg = rand if randomized else None
    env_cfg = TaskEnvConfig(kind=task_kind, rand=rand, dynamics_rand=dyn)
    return env_cfg, noise_cfg


def train_high_level(config: TrainConfig, task_kind: str,
                     low_policy: MlpPolicy, randomized: bool = True,
                     out_dir=None, metrics_path=None,
                     meta: dict | None = None) -> MlpPolicy:
    """Goal-proposing training on a frozen low-level policy."""
    env_cfg, noise_cfg = _hier_env_cfg(task_kind, randomized, config)
    probe = TaskEnv(env_cfg, seed=0)
    policy = MlpPolicy(probe.obs_dim, 2 * probe.n_agents, hidden=(32, 32),
                       seed=config.seed)
    horizon = probe.horizon // GOAL_HORIZON  # decisions per episode
    fn = lambda pol: partial(run_hier_task_episode, pol, low_policy, env_cfg,
                             noise_cfg, config.gamma)
    return train_policy(policy, fn, horizon=horizon, config=config,
                        gamma=config.gamma ** GOAL_HORIZON, out_dir=out_dir,
                        metrics_path=metrics_path, meta=meta, phase="high")


def train_flat(config: TrainConfig, task_kind: str, randomized: bool,
               out_dir=None, metrics_path=None,
               meta: dict | None = None) -> MlpPolicy:
    """Non-hierarchical baseline: width-64 policy on raw joint actions over
    the full task horizon. The randomized variant applies every low-level
    randomization plus uniform(-0.1, 0.1) torso xy observation noise."""
    if randomized:
        env_cfg = TaskEnvConfig(kind=task_kind, rand=RandomizationConfig(),
                                dynamics_rand=True, torso_obs_noise=0.1)
    else:
        env_cfg = TaskEnvConfig(kind=task_kind,
                                rand=RandomizationConfig.all_off())
    probe = TaskEnv(env_cfg, seed=0)
    policy = MlpPolicy(probe.obs_dim, 12 * probe.n_agents, hidden=(64, 64),
                       seed=config.seed)
    fn = lambda pol: partial(run_flat_task_episode, pol, env_cfg)
    return train_policy(policy, fn, horizon=probe.horizon, config=config,
                        out_dir=out_dir, metrics_path=metrics_path,
                        meta=meta, phase="flat")
