"""Gaussian MLP policies, goal mappings, observation masking, and the
hierarchical executor.

The policy is a tanh MLP producing the mean of a diagonal Gaussian with a
state-independent learned log standard deviation. Sampled actions are
clamped to [-1, 1] before reaching the environment; gradients always use
the log-density of the pre-clamp sample.

The high level emits one action per c low-level steps. Each per-agent pair
of that action maps through a polar transform to a goal offset in the
agent's body frame, re-anchored in the world at every decision; the low
level sees only joint state plus the goal rotated into its body frame, with
all six torso pose slots zeroed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericsError
from .randomization import RandomizationConfig, perturb_high_level_action
from .world import AgentState, N_JOINTS

LOW_LEVEL_OBS_DIM = 32  # q(12) + qdot(12) + zeroed torso pose(6) + body goal(2)
GOAL_HORIZON = 10  # low-level steps per high-level decision
CHECKPOINT_FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Goal:
    """A world-frame target point for the low level."""

    gx: float
    gy: float


def f_goal_space(agent: AgentState) -> tuple:
    """Project an agent state to the goal space: its planar coordinates."""
    return (agent.x, agent.y)


def h_map(a_hi_pair) -> tuple:
    """Polar map from one high-level action pair to a body-frame goal offset.

    radius = 0.5 + 0.3 * a0 in [0.2, 0.8]; bearing = 0.2 * a1 in [-0.2, 0.2].
    Out-of-range inputs are clamped, never rejected.
    """
    a0 = min(max(float(a_hi_pair[0]), -1.0), 1.0)
    a1 = min(max(float(a_hi_pair[1]), -1.0), 1.0)
    u = 0.5 + 0.3 * a0
    v = 0.2 * a1
    return (u * math.cos(v), u * math.sin(v))


def goal_from_high_action(agent: AgentState, a_hi_pair) -> Goal:
    """World-frame goal: the h_map offset rotated by the agent yaw and
    anchored at its current position."""
    ox, oy = h_map(a_hi_pair)
    c, s = math.cos(agent.yaw), math.sin(agent.yaw)
    return Goal(agent.x + c * ox - s * oy, agent.y + s * ox + c * oy)


def mask_low_level_obs(agent: AgentState, goal: Goal) -> np.ndarray:
    """Low-level observation with the torso pose zeroed out.

    Layout: [q (12), qdot (12), zeros (6), goal offset in body frame (2)].
    The six zeros stand for the torso positional/rotational slots, so the
    policy is blind to where in the world it stands.
    """
    c, s = math.cos(agent.yaw), math.sin(agent.yaw)
    dx = goal.gx - agent.x
    dy = goal.gy - agent.y
    obs = np.zeros(LOW_LEVEL_OBS_DIM)
    obs[0:12] = agent.q
    obs[12:24] = agent.qdot
    obs[30] = c * dx + s * dy
    obs[31] = -s * dx + c * dy
    return obs


class MlpPolicy:
    """Diagonal-Gaussian policy: tanh hidden layers, affine mean output,
    learned per-dimension log std.

    Parameters flatten in checkpoint order: for each layer the weight matrix
    (row-major) then the bias, finally log_std.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden=(32, 32), seed: int = 0):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.layer_dims = [obs_dim, *hidden, act_dim]
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(97,)))
        self.weights = []
        self.biases = []
        for l in range(len(self.layer_dims) - 1):
            fan_in = self.layer_dims[l]
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in),
                           (self.layer_dims[l + 1], fan_in))
            self.weights.append(w)
            self.biases.append(np.zeros(self.layer_dims[l + 1]))
        self.weights[-1] *= 0.01  # small initial actions
        self.log_std = np.zeros(act_dim)

    # -- forward ---------------------------------------------------------

    def mean_batch(self, X: np.ndarray):
        """Batched mean forward pass; returns (means, activation cache)."""
        h = X
        cache = [X]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w.T + b)
            cache.append(h)
        means = h @ self.weights[-1].T + self.biases[-1]
        return means, cache

    def mean(self, obs: np.ndarray) -> np.ndarray:
        h = obs
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(w @ h + b)
        return self.weights[-1] @ h + self.biases[-1]

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        """Draw a pre-clamp action and its log density."""
        mu = self.mean(obs)
        std = np.exp(self.log_std)
        act = mu + std * rng.standard_normal(self.act_dim)
        z = (act - mu) / std
        logp = -0.5 * float(z @ z) - float(self.log_std.sum()) \
            - 0.5 * self.act_dim * LOG_2PI
        return act, logp

    def log_prob(self, obs: np.ndarray, act: np.ndarray) -> float:
        mu = self.mean(obs)
        z = (act - mu) * np.exp(-self.log_std)
        return -0.5 * float(z @ z) - float(self.log_std.sum()) \
            - 0.5 * self.act_dim * LOG_2PI

    def log_prob_batch(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        means, _ = self.mean_batch(X)
        z = (A - means) * np.exp(-self.log_std)
        return (-0.5 * np.sum(z * z, axis=1) - self.log_std.sum()
                - 0.5 * self.act_dim * LOG_2PI)

    # -- parameter vector ------------------------------------------------

    @property
    def n_params(self) -> int:
        n = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        return n + self.act_dim

    def flat_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        parts.append(self.log_std)
        return np.concatenate(parts)

    def set_flat_params(self, theta: np.ndarray) -> None:
        if theta.shape != (self.n_params,):
            raise ConfigurationError("parameter vector has wrong length")
        if not np.all(np.isfinite(theta)):
            raise NumericsError("non-finite policy parameters")
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            self.biases[i] = theta[k:k + b.size].copy()
            k += b.size
        self.log_std = theta[k:].copy()

    def copy(self) -> "MlpPolicy":
        out = MlpPolicy(self.obs_dim, self.act_dim,
                        tuple(self.layer_dims[1:-1]), seed=self.seed)
        out.set_flat_params(self.flat_params())
        return out


# -- derivatives ---------------------------------------------------------

def mean_vjp(policy: MlpPolicy, G: np.ndarray, cache) -> np.ndarray:
    """Backprop upstream gradients G (N, act_dim) on the means into a flat
    gradient over the network parameters (log_std slots left at zero)."""
    grads_w = [None] * len(policy.weights)
    grads_b = [None] * len(policy.biases)
    up = G
    for l in range(len(policy.weights) - 1, -1, -1):
        h_in = cache[l]
        grads_w[l] = up.T @ h_in
        grads_b[l] = up.sum(axis=0)
        if l > 0:
            up = (up @ policy.weights[l]) * (1.0 - cache[l] ** 2)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    parts.append(np.zeros(policy.act_dim))
    return np.concatenate(parts)


def mean_jvp(policy: MlpPolicy, v: np.ndarray, cache) -> np.ndarray:
    """Forward-mode directional derivative of the means along the network
    slice of the flat tangent v; returns (N, act_dim)."""
    k = 0
    dvs_w, dvs_b = [], []
    for w, b in zip(policy.weights, policy.biases):
        dvs_w.append(v[k:k + w.size].reshape(w.shape))
        k += w.size
        dvs_b.append(v[k:k + b.size])
        k += b.size
    dh = cache[0] @ dvs_w[0].T + dvs_b[0]
    for l in range(1, len(policy.weights)):
        dh = dh * (1.0 - cache[l] ** 2)
        dh = cache[l] @ dvs_w[l].T + dvs_b[l] + dh @ policy.weights[l].T
    return dh


def grad_log_prob_sum(policy: MlpPolicy, X: np.ndarray, A: np.ndarray,
                      weights: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_i weights_i * log pi(A_i | X_i)."""
    means, cache = policy.mean_batch(X)
    inv_var = np.exp(-2.0 * policy.log_std)
    z = (A - means) * inv_var
    g = mean_vjp(policy, weights[:, None] * z, cache)
    d_ls = weights @ (z * (A - means) - 1.0)
    g[-policy.act_dim:] = d_ls
    return g


def gaussian_kl(mu_old: np.ndarray, log_std_old: np.ndarray,
                mu_new: np.ndarray, log_std_new: np.ndarray) -> float:
    """Mean KL(old || new) between diagonal Gaussians over a batch of means."""
    var_old = np.exp(2.0 * log_std_old)
    var_new = np.exp(2.0 * log_std_new)
    per_dim = (log_std_new - log_std_old
               + (var_old + (mu_old - mu_new) ** 2) / (2.0 * var_new) - 0.5)
    return float(per_dim.sum(axis=-1).mean())


# -- hierarchical execution ----------------------------------------------

def hierarchical_episode(env, pi_hi: MlpPolicy, pi_lo: MlpPolicy,
                         c: int = GOAL_HORIZON, horizon: int = 200,
                         rng: np.random.Generator | None = None,
                         noise_cfg: RandomizationConfig | None = None,
                         gamma: float = 0.99, deterministic: bool = False):
    """Run one full task episode under the two-level policy.

    Every c steps the high level observes the task observation and emits a
    2n-dim action (optionally polluted with uniform noise) that becomes one
    goal per agent; the frozen low level then acts for c steps. The
    high-level reward for a window is sum_i gamma^i r_i over the window's
    task rewards. Fallen agents emit zero actions. Episodes never end early.

    Returns (hi_traj, lo_records, info): hi_traj holds per-decision arrays
    (obs, act pre-clamp, rew, logp); lo_records holds per-step goals and
    joint actions for replay; info carries per-step task rewards.
    """
    if horizon % c != 0:
        raise ConfigurationError("horizon must be divisible by c")
    if rng is None:
        rng = np.random.default_rng(0)
    obs = env.reset()
    n = env.n_agents
    hi_obs, hi_act, hi_rew, hi_logp = [], [], [], []
    goals_log, actions_log, rewards = [], [], []
    goals = None
    window_ret = 0.0
    disc = 1.0
    for t in range(horizon):
        if t % c == 0:
            if deterministic:
                a_pre = pi_hi.mean(obs)
                logp = pi_hi.log_prob(obs, a_pre)
            else:
                a_pre, logp = pi_hi.sample(obs, rng)
            a_hi = np.clip(a_pre, -1.0, 1.0)
            if noise_cfg is not None:
                a_hi = perturb_high_level_action(a_hi, rng, noise_cfg)
            agents = env.agent_states()
            goals = [goal_from_high_action(agents[i], a_hi[2 * i:2 * i + 2])
                     for i in range(n)]
            hi_obs.append(obs)
            hi_act.append(a_pre)
            hi_logp.append(logp)
            window_ret = 0.0
            disc = 1.0
        actions = np.zeros((n, N_JOINTS))
        for i, agent in enumerate(env.agent_states()):
            if agent.fallen:
                continue
            lo_obs = mask_low_level_obs(agent, goals[i])
            if deterministic:
                a_lo = pi_lo.mean(lo_obs)
            else:
                a_lo, _ = pi_lo.sample(lo_obs, rng)
            actions[i] = np.clip(a_lo, -1.0, 1.0)
        obs, r, _, _ = env.step(actions)
        rewards.append(r)
        goals_log.append([(g.gx, g.gy) for g in goals])
        actions_log.append(actions)
        window_ret += disc * r
        disc *= gamma
        if t % c == c - 1:
            hi_rew.append(window_ret)
    hi_traj = {
        "obs": np.array(hi_obs),
        "act": np.array(hi_act),
        "rew": np.array(hi_rew),
        "logp": np.array(hi_logp),
    }
    lo_records = {"goals": goals_log, "actions": actions_log}
    return hi_traj, lo_records, {"task_rewards": np.array(rewards)}


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(policy: MlpPolicy, base_path, meta: dict | None = None) -> None:
    """Write <base>.json (manifest) and <base>.bin (little-endian float64
    parameters, layer by layer: weight row-major then bias, then log_std)."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    theta = policy.flat_params().astype("<f8")
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "gaussian_mlp",
        "layer_dims": policy.layer_dims,
        "obs_dim": policy.obs_dim,
        "act_dim": policy.act_dim,
        "n_params": int(policy.n_params),
        "seed": policy.seed,
        "weights_file": base.name + ".bin",
        "meta": dict(sorted((meta or {}).items())),
    }
    with open(base.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    theta.tofile(base.with_suffix(".bin"))


def load_checkpoint(base_path) -> MlpPolicy:
    base = Path(base_path)
    with open(base.with_suffix(".json")) as f:
        manifest = json.load(f)
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version {manifest['format_version']}")
    dims = manifest["layer_dims"]
    policy = MlpPolicy(manifest["obs_dim"], manifest["act_dim"],
                       hidden=tuple(dims[1:-1]), seed=manifest.get("seed", 0))
    theta = np.fromfile(base.parent / manifest["weights_file"], dtype="<f8")
    if theta.size != manifest["n_params"]:
        raise ConfigurationError("checkpoint weight count mismatch")
    policy.set_flat_params(theta.astype(float))
    return policy
