"""Conditional flow-matching policy over scene-position vectors.

Time runs from t=1 (noise) to t=0 (data); during sampling ``dt`` is negative
and the diffusion term scales with ``sqrt(|dt|)``.  The interpolation path is
``x_t = (1 - t) x0 + t x1`` with ``x0`` the data and ``x1 ~ N(0, I)``, so the
regression target for the velocity is ``x1 - x0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .errors import DomainError, NonFiniteError, ShapeError
from .numerics import (
    AdamState,
    Grads,
    Mlp,
    RngStream,
    adam_step,
    backward_trace,
    forward_trace,
    init_mlp,
)
from .scenes import Scene, SpatialPrompt, embed_prompt, prompt_embedding_dim

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------


def velocity_input_dim(k: int) -> int:
    return 2 * k + 1 + prompt_embedding_dim(k)


def init_velocity_net(k: int, stream: RngStream, hidden: tuple[int, ...] = (128, 128)) -> Mlp:
    return init_mlp([velocity_input_dim(k), *hidden, 2 * k], stream)


@dataclass
class LowRankAdapter:
    """Per-layer low-rank deltas ``(alpha / r) * B @ A`` over frozen weights."""

    a: list[np.ndarray]  # (r, in)
    b: list[np.ndarray]  # (out, r)
    alpha: float

    @property
    def rank(self) -> int:
        return self.a[0].shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def arrays(self) -> list[np.ndarray]:
        return list(self.a) + list(self.b)

    def with_arrays(self, arrays: list[np.ndarray]) -> "LowRankAdapter":
        n = len(self.a)
        return LowRankAdapter(list(arrays[:n]), list(arrays[n:]), self.alpha)

    def copy(self) -> "LowRankAdapter":
        return self.with_arrays([x.copy() for x in self.arrays()])


def init_adapter(net: Mlp, rank: int, stream: RngStream, alpha: float | None = None) -> LowRankAdapter:
    """``A`` Gaussian with std 1/sqrt(in), ``B`` zero: the adapted net starts equal to the base."""
    a = [stream.normal((rank, w.shape[1])) / math.sqrt(w.shape[1]) for w in net.weights]
    b = [np.zeros((w.shape[0], rank)) for w in net.weights]
    return LowRankAdapter(a, b, float(rank if alpha is None else alpha))


def apply_adapter(net: Mlp, adapter: LowRankAdapter | None) -> Mlp:
    """Merged net ``W0 + scale * B @ A``; ``net`` itself is not modified."""
    if adapter is None:
        return net
    if len(adapter.a) != len(net.weights):
        raise ShapeError("adapter layer count differs from the net")
    weights = []
    for w, a, b in zip(net.weights, adapter.a, adapter.b):
        if a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0] or a.shape[0] != b.shape[1]:
            raise ShapeError(f"adapter {b.shape}@{a.shape} does not fit weight {w.shape}")
        weights.append(w + adapter.scale * (b @ a))
    return Mlp(weights, list(net.biases), list(net.activations))


def adapter_grads(adapter: LowRankAdapter, grads: Grads) -> list[np.ndarray]:
    """Chain effective-weight gradients into (A..., B...) gradients."""
    s = adapter.scale
    ga = [s * (b.T @ g) for b, g in zip(adapter.b, grads.weights)]
    gb = [s * (g @ a.T) for a, g in zip(adapter.a, grads.weights)]
    return ga + gb


@dataclass
class Policy:
    base: Mlp
    adapter: LowRankAdapter | None = None
    _merged: Mlp | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def k(self) -> int:
        return self.base.out_dim // 2

    def effective(self) -> Mlp:
        if self._merged is None:
            self._merged = apply_adapter(self.base, self.adapter)
        return self._merged

    def with_adapter(self, adapter: LowRankAdapter | None) -> "Policy":
        return Policy(self.base, adapter)

    def velocity(self, x: np.ndarray, t: np.ndarray, embs: np.ndarray) -> np.ndarray:
        return velocity_inputs_forward(self.effective(), x, t, embs)[-1]


def velocity_inputs(x: np.ndarray, t: np.ndarray, embs: np.ndarray) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    return np.concatenate([x, t[:, None], embs], axis=1)


def velocity_inputs_forward(net: Mlp, x, t, embs) -> list[np.ndarray]:
    return forward_trace(net, velocity_inputs(x, t, embs))


# --------------------------------------------------------------------------
# SDE schedule and steps
# --------------------------------------------------------------------------


@dataclass
class SdeSchedule:
    """Uniform grid from ``1 - t_min`` down to ``t_min`` with ``steps`` intervals.

    ``sigma(t) = noise_level * sqrt(tc / (1 - tc))`` where ``tc`` is ``t``
    clamped to ``[t_min, sigma_t_max]``.  ``sigma_t_max`` defaults to the
    second grid point, so the first step borrows the noise level of the next
    one; at fine grids this is ``1 - t_min`` to within ``1/steps``.
    """

    steps: int = 6
    noise_level: float = 0.7
    t_min: float = 1e-3
    sigma_t_max: float | None = None

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if not 0 < self.t_min < 0.5:
            raise ValueError("t_min must be in (0, 0.5)")

    def grid(self) -> np.ndarray:
        return np.linspace(1.0 - self.t_min, self.t_min, self.steps + 1)

    def sigma(self, t) -> np.ndarray:
        hi = self.grid()[1] if self.sigma_t_max is None else self.sigma_t_max
        hi = min(hi, 1.0 - self.t_min)
        tc = np.clip(np.asarray(t, dtype=np.float64), self.t_min, hi)
        return self.noise_level * np.sqrt(tc / (1.0 - tc))

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "noise_level": self.noise_level,
            "t_min": self.t_min,
            "sigma_t_max": self.sigma_t_max,
        }


def em_update(x, v, t, dt, sigma, eps) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched Euler-Maruyama update; ``t``, ``dt``, ``sigma`` are per row.

    Returns ``(x_next, mean, std)`` with ``std = sigma * sqrt(|dt|)``.
    """
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (n,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    x_next, mean = kernels.em_step(x, v, t, dt, sigma, eps)
    return x_next, mean, sigma * np.sqrt(np.abs(dt))


def sde_step(
    field_, x_t: np.ndarray, t: float, dt: float, sigma: float, eps: np.ndarray, embs: np.ndarray,
    t_min: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One step for a batch ``x_t (n, D)`` under velocity field ``field_``."""
    if t < t_min or t > 1.0 - t_min:
        raise DomainError(f"t={t} outside [{t_min}, {1 - t_min}]")
    if dt >= 0:
        raise DomainError("sampling runs from noise to data: dt must be negative")
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    v = field_.velocity(x_t, np.full(x_t.shape[0], t), embs)
    return em_update(x_t, v, t, dt, sigma, eps)


@dataclass
class TrajectoryBatch:
    """``n`` trajectories sharing one time grid.

    ``states[0]`` is the starting noise and ``states[-1]`` the raw terminal
    sample; step ``j`` maps ``states[j]`` to ``states[j + 1]``.
    """

    embs: np.ndarray  # (n, E)
    states: np.ndarray  # (T + 1, n, D)
    means: np.ndarray  # (T, n, D)
    noise: np.ndarray  # (T, n, D)
    ts: np.ndarray  # (T,)
    dts: np.ndarray  # (T,)
    sigmas: np.ndarray  # (T,)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> int:
        return len(self.ts)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def final_positions(self) -> np.ndarray:
        """Terminal layouts clipped to the unit square, shape ``(n, K, 2)``."""
        return np.clip(self.final, 0.0, 1.0).reshape(self.n, -1, 2)

    def take(self, idx) -> "TrajectoryBatch":
        idx = np.asarray(idx)
        return TrajectoryBatch(
            self.embs[idx], self.states[:, idx], self.means[:, idx], self.noise[:, idx],
            self.ts, self.dts, self.sigmas,
        )


@dataclass
class Trajectory:
    prompt: SpatialPrompt
    batch: TrajectoryBatch

    @property
    def states(self) -> np.ndarray:
        return self.batch.states[:, 0]

    @property
    def scene(self) -> Scene:
        return Scene.from_vector(self.prompt.class_slots, self.batch.final[0])


def sample_batch(
    field_, embs: np.ndarray, schedule: SdeSchedule, stream: RngStream, x_init: np.ndarray | None = None
) -> TrajectoryBatch:
    """SDE rollouts for rows of ``embs``.  Draw order: start noise, then one
    ``(n, D)`` block per step (drawn even when sigma is zero)."""
    n = embs.shape[0]
    d = field_.dim if hasattr(field_, "dim") else 2 * field_.k
    grid = schedule.grid()
    ts, dts = grid[:-1], np.diff(grid)
    sigmas = schedule.sigma(ts)
    x = stream.normal((n, d)) if x_init is None else np.array(x_init, dtype=np.float64)
    states = np.empty((schedule.steps + 1, n, d))
    means = np.empty((schedule.steps, n, d))
    noise = np.empty((schedule.steps, n, d))
    states[0] = x
    for j in range(schedule.steps):
        eps = stream.normal((n, d))
        v = field_.velocity(x, np.full(n, ts[j]), embs)
        x, mean, _ = em_update(x, v, ts[j], dts[j], sigmas[j], eps)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state at step {j}")
        states[j + 1], means[j], noise[j] = x, mean, eps
    return TrajectoryBatch(embs, states, means, noise, ts, dts, sigmas)


def ode_sample(field_, embs: np.ndarray, schedule: SdeSchedule, x_init: np.ndarray) -> np.ndarray:
    """Deterministic Euler path on the same grid; returns all states ``(T+1, n, D)``."""
    grid = schedule.grid()
    x = np.array(x_init, dtype=np.float64)
    out = [x]
    for t, dt in zip(grid[:-1], np.diff(grid)):
        x = x + field_.velocity(x, np.full(x.shape[0], t), embs) * dt
        out.append(x)
    return np.stack(out)


def sde_sample(policy: Policy, prompt: SpatialPrompt, schedule: SdeSchedule, stream: RngStream) -> Trajectory:
    return Trajectory(prompt, sample_batch(policy, embed_prompt(prompt)[None], schedule, stream))


def transition_logprob_rows(means: np.ndarray, x_next: np.ndarray, std: np.ndarray) -> np.ndarray:
    if np.any(np.asarray(std) <= 0):
        raise DomainError("transition density undefined for zero noise")
    return kernels.gauss_logpdf(x_next, means, np.asarray(std, dtype=np.float64))


def transition_logprob(field_, embs, x_t, x_next, t: float, dt: float, sigma: float) -> np.ndarray:
    """log N(x_next; mean(x_t), sigma^2 |dt| I), summed over dimensions, per row."""
    if sigma <= 0:
        raise DomainError("transition density undefined for sigma = 0")
    zeros = np.zeros_like(x_t)
    v = field_.velocity(x_t, np.full(x_t.shape[0], t), embs)
    _, mean, std = em_update(x_t, v, t, dt, sigma, zeros)
    return transition_logprob_rows(mean, x_next, std)


# --------------------------------------------------------------------------
# Flow-matching pretraining
# --------------------------------------------------------------------------


def fm_loss_and_grads(
    net: Mlp, embs: np.ndarray, x0: np.ndarray, x1: np.ndarray, t: np.ndarray
) -> tuple[float, Grads]:
    """Mean over the batch of ``||v(x_t, t, c) - (x1 - x0)||^2``."""
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    acts = velocity_inputs_forward(net, xt, t, embs)
    resid = acts[-1] - (x1 - x0)
    n = x0.shape[0]
    loss = float(np.sum(resid * resid) / n)
    return loss, backward_trace(net, acts, 2.0 * resid / n)


def fm_pretrain_step(
    net: Mlp,
    embs: np.ndarray,
    x0: np.ndarray,
    stream: RngStream,
    state: AdamState,
    lr: float,
    t_min: float = 1e-3,
    x1: np.ndarray | None = None,
) -> tuple[float, Mlp, AdamState]:
    if x0.shape[0] == 0:
        raise DomainError("empty batch")
    n = x0.shape[0]
    if x1 is None:
        x1 = stream.normal(x0.shape)
    t = stream.uniform(n, t_min, 1.0 - t_min)
    loss, grads = fm_loss_and_grads(net, embs, x0, x1, t)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite flow-matching loss")
    params, state = adam_step(net.arrays(), grads.arrays(), state, lr)
    return loss, net.with_arrays(params), state


def pretrain(
    net: Mlp,
    embs: np.ndarray,
    x0: np.ndarray,
    steps: int,
    stream: RngStream,
    lr: float = 1e-3,
    batch_size: int = 256,
    state: AdamState | None = None,
    start_step: int = 0,
    on_step=None,
) -> tuple[Mlp, AdamState, list[float]]:
    """Minibatch flow-matching regression on (prompt embedding, layout) rows.

    ``on_step(step, net, state, loss)`` runs after every update.
    """
    state = state or AdamState.zeros_like(net.arrays())
    losses = []
    n = x0.shape[0]
    for step in range(start_step, steps):
        idx = stream.integers(0, n, min(batch_size, n))
        loss, net, state = fm_pretrain_step(net, embs[idx], x0[idx], stream, state, lr)
        losses.append(loss)
        if on_step is not None:
            on_step(step + 1, net, state, loss)
    return net, state, losses


def evaluate_policy(
    policy: Policy,
    prompts: list[SpatialPrompt],
    schedule: SdeSchedule,
    stream: RngStream,
    samples_per_prompt: int = 4,
    sampler: str = "ode",
) -> dict:
    """Mean oracle satisfaction of sampled layouts over held-out prompts.

    ``sampler="ode"`` integrates the deterministic Euler path from seeded
    noise; ``"sde"`` uses the stochastic sampler with ``schedule``.
    """
    from .scenes import oracle_fractions

    embs = np.repeat(np.stack([embed_prompt(p) for p in prompts]), samples_per_prompt, axis=0)
    x1 = stream.normal((embs.shape[0], 2 * policy.k))
    if sampler == "ode":
        final = ode_sample(policy, embs, schedule, x1)[-1]
    elif sampler == "sde":
        final = sample_batch(policy, embs, schedule, stream, x_init=x1).final
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    pos = np.clip(final, 0.0, 1.0).reshape(len(prompts), samples_per_prompt, -1, 2)
    fracs = np.array([oracle_fractions(pos[i], p) for i, p in enumerate(prompts)])
    return {
        "oracle_mean": float(fracs.mean()),
        "all_satisfied_rate": float((fracs == 1.0).mean()),
        "n_prompts": len(prompts),
        "samples_per_prompt": samples_per_prompt,
    }
