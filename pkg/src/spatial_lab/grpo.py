"""Group-relative policy optimisation of the flow policy with top-k filtering.

One training step: draw a batch of prompts, roll out ``G`` SDE trajectories
per prompt, score the terminal layouts, keep the ``k`` best and ``k`` worst
members of each group, z-score their rewards on that subset, and take one
adapter update on the clipped-ratio surrogate plus a closed-form KL anchor to
the frozen base policy.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, NonFiniteError, TrainingDiverged
from .flow import (
    LowRankAdapter,
    Policy,
    SdeSchedule,
    TrajectoryBatch,
    adapter_grads,
    em_update,
    sample_batch,
    transition_logprob_rows,
    velocity_inputs_forward,
)
from .numerics import AdamState, Mlp, RngStream, adam_step, backward_trace, forward_trace
from .reward import batch_features, head
from .scenes import SpatialPrompt, embed_prompt, oracle_fractions

log = logging.getLogger(__name__)

MAX_LOG_RATIO = 20.0


@dataclass
class GrpoConfig:
    group_size: int = 24
    k: int = 6
    clip_eps: float = 1e-4
    kl_beta: float = 0.01
    lr: float = 3e-3
    steps_per_traj: int = 6
    noise_level: float = 0.7
    t_min: float = 1e-3
    reward_source: str = "learned"
    std_guard: float = 1e-8
    prompts_per_step: int = 32
    adapter_rank: int = 4
    adapter_alpha: float = 4.0
    member_retries: int = 3

    def __post_init__(self):
        if not 0 <= 2 * self.k <= self.group_size:
            raise ValueError("need 0 <= 2k <= G")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.reward_source not in ("learned", "oracle"):
            raise ValueError("reward_source must be 'learned' or 'oracle'")

    @property
    def subset_size(self) -> int:
        return 2 * self.k if self.k > 0 else self.group_size

    def schedule(self) -> SdeSchedule:
        return SdeSchedule(self.steps_per_traj, self.noise_level, self.t_min)


@dataclass
class RolloutGroup:
    prompt: SpatialPrompt
    batch: TrajectoryBatch
    rewards: np.ndarray
    oracle: np.ndarray
    order: np.ndarray | None = None
    subset: np.ndarray | None = None
    advantages: np.ndarray | None = None  # aligned with ``subset``
    degenerate: bool = False

    @property
    def size(self) -> int:
        return len(self.rewards)

    def advantage_of(self) -> dict[int, float]:
        return {int(i): float(a) for i, a in zip(self.subset, self.advantages)}


@dataclass
class NfeLedger:
    records: list[dict] = field(default_factory=list)
    total_sampling: int = 0
    total_training: int = 0

    def add(self, step: int, sampling: int, training: int, n_sampled: int, n_trained: int) -> dict:
        self.total_sampling += sampling
        self.total_training += training
        rec = {
            "step": step,
            "sampling_nfe": sampling,
            "training_nfe": training,
            "prompts_sampled": n_sampled,
            "prompts_trained": n_trained,
            "sampling_nfe_per_prompt": sampling // n_sampled if n_sampled else 0,
            "training_nfe_per_prompt": training // n_trained if n_trained else 0,
        }
        self.records.append(rec)
        return rec


# --------------------------------------------------------------------------
# Rewards and rollouts
# --------------------------------------------------------------------------


class Rewarder:
    """Scalar reward for terminal layouts: the learned model's mu or the oracle fraction."""

    def __init__(self, source: str, reward_net: Mlp | None = None):
        if source == "learned" and reward_net is None:
            raise ValueError("learned rewards need a reward net")
        self.source = source
        self.net = reward_net

    def __call__(self, prompt: SpatialPrompt, positions: np.ndarray) -> np.ndarray:
        if self.source == "oracle":
            return oracle_fractions(positions, prompt)
        emb = np.broadcast_to(embed_prompt(prompt), (len(positions), len(embed_prompt(prompt))))
        mu = head(forward_trace(self.net, batch_features(emb, positions))[-1])[0]
        if not np.all(np.isfinite(mu)):
            raise NonFiniteError("reward model produced a non-finite score")
        return mu


def _sample_members(policy, embs, schedule, stream, retries):
    try:
        return sample_batch(policy, embs, schedule, stream)
    except NonFiniteError:
        if retries <= 0:
            raise
    # fall back to member-wise regeneration
    parts = []
    for i in range(embs.shape[0]):
        for attempt in range(retries + 1):
            try:
                parts.append(sample_batch(policy, embs[i : i + 1], schedule, stream.child(i * 1000 + attempt)))
                break
            except NonFiniteError:
                if attempt == retries:
                    raise
    return TrajectoryBatch(
        np.concatenate([p.embs for p in parts]),
        np.concatenate([p.states for p in parts], axis=1),
        np.concatenate([p.means for p in parts], axis=1),
        np.concatenate([p.noise for p in parts], axis=1),
        parts[0].ts, parts[0].dts, parts[0].sigmas,
    )


def rollout_groups(
    policy: Policy, prompts: list[SpatialPrompt], config: GrpoConfig, rewarder: Rewarder, stream: RngStream
) -> list[RolloutGroup]:
    """``G`` SDE trajectories per prompt, sampled as one batch and scored."""
    g = config.group_size
    embs = np.repeat(np.stack([embed_prompt(p) for p in prompts]), g, axis=0)
    batch = _sample_members(policy, embs, config.schedule(), stream, config.member_retries)
    pos = batch.final_positions()
    groups = []
    for j, p in enumerate(prompts):
        sl = np.arange(j * g, (j + 1) * g)
        groups.append(RolloutGroup(p, batch.take(sl), rewarder(p, pos[sl]), oracle_fractions(pos[sl], p)))
    return groups


def rollout_group(
    policy: Policy, prompt: SpatialPrompt, config: GrpoConfig, rewarder: Rewarder, stream: RngStream
) -> RolloutGroup:
    return rollout_groups(policy, [prompt], config, rewarder, stream)[0]


# --------------------------------------------------------------------------
# Advantages
# --------------------------------------------------------------------------


def rank_descending(rewards: np.ndarray) -> np.ndarray:
    """Member indices by descending reward; ties keep ascending index order."""
    idx = np.arange(len(rewards))
    return np.lexsort((idx, -np.asarray(rewards)))


def select_subset(rewards: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(rank order, subset indices).  ``k = 0`` keeps the whole group."""
    order = rank_descending(rewards)
    g = len(rewards)
    if k == 0:
        return order, np.sort(order)
    if 2 * k > g:
        raise DomainError("2k exceeds the group size")
    return order, np.sort(np.concatenate([order[:k], order[g - k :]]))


def normalize(rewards: np.ndarray, std_guard: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Z-scores with population std plus guard; zero (and degenerate) if constant."""
    r = np.asarray(rewards, dtype=np.float64)
    if np.ptp(r) == 0.0:
        return np.zeros_like(r), True
    return (r - r.mean()) / (r.std() + std_guard), False


def compute_advantages(group: RolloutGroup, config: GrpoConfig) -> RolloutGroup:
    """Fill rank order, subset S and advantages on S (in place; also returned)."""
    group.order, group.subset = select_subset(group.rewards, config.k)
    group.advantages, group.degenerate = normalize(group.rewards[group.subset], config.std_guard)
    return group


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


@dataclass
class TrainingRows:
    """One row per (member in S, denoising step) of the non-degenerate groups."""

    x_t: np.ndarray
    x_next: np.ndarray
    old_mean: np.ndarray
    embs: np.ndarray
    t: np.ndarray
    dt: np.ndarray
    sigma: np.ndarray
    adv: np.ndarray
    n_groups: int

    @property
    def n(self) -> int:
        return len(self.t)


def training_rows(groups: list[RolloutGroup]) -> TrainingRows:
    cols = {k: [] for k in ("x_t", "x_next", "old_mean", "embs", "t", "dt", "sigma", "adv")}
    used = 0
    for grp in groups:
        if grp.degenerate or grp.advantages is None:
            continue
        used += 1
        b = grp.batch.take(grp.subset)
        steps, m = b.steps, b.n
        cols["x_t"].append(b.states[:-1].reshape(steps * m, -1))
        cols["x_next"].append(b.states[1:].reshape(steps * m, -1))
        cols["old_mean"].append(b.means.reshape(steps * m, -1))
        cols["embs"].append(np.tile(b.embs, (steps, 1)))
        cols["t"].append(np.repeat(b.ts, m))
        cols["dt"].append(np.repeat(b.dts, m))
        cols["sigma"].append(np.repeat(b.sigmas, m))
        cols["adv"].append(np.tile(grp.advantages, steps))
    if not used:
        return TrainingRows(*(np.zeros((0,)) for _ in range(8)), n_groups=0)
    return TrainingRows(**{k: np.concatenate(v) for k, v in cols.items()}, n_groups=used)


@dataclass
class LossResult:
    loss: float
    grads: list[np.ndarray]
    surrogate: float
    kl: float
    clip_fraction: float
    ratio_clamped: int
    nfe: int


def grpo_loss(
    base: Mlp,
    adapter: LowRankAdapter,
    rows: TrainingRows,
    config: GrpoConfig,
    reference: Mlp | None = None,
) -> LossResult:
    """``-mean(min(r A, clip(r) A)) + beta * mean(KL)`` over the training rows.

    ``rows.old_mean`` holds the transition means recorded under the sampling
    policy, so the old log-density needs no network call.  The reference
    policy defaults to ``base`` (the adapter-free net).
    """
    if rows.n == 0:
        zeros = [np.zeros_like(a) for a in adapter.arrays()]
        return LossResult(0.0, zeros, 0.0, 0.0, 0.0, 0, 0)
    eff = Policy(base, adapter).effective()
    acts = velocity_inputs_forward(eff, rows.x_t, rows.t, rows.embs)
    v = acts[-1]
    zeros = np.zeros_like(rows.x_t)
    _, mean, std = em_update(rows.x_t, v, rows.t, rows.dt, rows.sigma, zeros)
    logp = transition_logprob_rows(mean, rows.x_next, std)
    logp_old = transition_logprob_rows(rows.old_mean, rows.x_next, std)

    log_ratio = logp - logp_old
    clamped = np.abs(log_ratio) > MAX_LOG_RATIO
    if not np.all(np.isfinite(log_ratio)):
        clamped |= ~np.isfinite(log_ratio)
        log_ratio = np.nan_to_num(log_ratio, nan=0.0, posinf=MAX_LOG_RATIO, neginf=-MAX_LOG_RATIO)
    log_ratio = np.clip(log_ratio, -MAX_LOG_RATIO, MAX_LOG_RATIO)
    ratio = np.exp(log_ratio)
    eps = config.clip_eps
    a = rows.adv
    unclipped = ratio * a
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * a
    use_unclipped = unclipped <= clipped
    surr = np.where(use_unclipped, unclipped, clipped)

    ref = base if reference is None else reference
    ref_v = velocity_inputs_forward(ref, rows.x_t, rows.t, rows.embs)[-1]
    _, ref_mean, _ = em_update(rows.x_t, ref_v, rows.t, rows.dt, rows.sigma, zeros)
    var = (std * std)[:, None]
    diff = mean - ref_mean
    kl = np.sum(diff * diff, axis=1) / (2.0 * var[:, 0])

    n = rows.n
    loss = float(-surr.mean() + config.kl_beta * kl.mean())
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite GRPO loss")

    # d loss / d logp for rows whose unclipped branch is active and not clamped
    g_logp = np.where(use_unclipped & ~clamped, -a * ratio / n, 0.0)
    g_mean = g_logp[:, None] * (rows.x_next - mean) / var + (config.kl_beta / n) * diff / var
    coef = rows.sigma**2 / (2.0 * rows.t)
    dmean_dv = (1.0 + coef * (1.0 - rows.t)) * rows.dt
    grads = backward_trace(eff, acts, g_mean * dmean_dv[:, None])
    return LossResult(
        loss=loss,
        grads=adapter_grads(adapter, grads),
        surrogate=float(surr.mean()),
        kl=float(kl.mean()),
        clip_fraction=float(np.mean(~use_unclipped)),
        ratio_clamped=int(clamped.sum()),
        nfe=n,
    )


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class GrpoState:
    adapter: LowRankAdapter
    optimizer: AdamState
    step: int = 0


def grpo_update(
    policy: Policy,
    state: GrpoState,
    prompts: list[SpatialPrompt],
    config: GrpoConfig,
    rewarder: Rewarder,
    stream: RngStream,
    ledger: NfeLedger | None = None,
) -> tuple[GrpoState, dict, list[RolloutGroup]]:
    """Roll out, filter, and take one adapter step.  The sampling policy is the
    old-policy snapshot for this step."""
    current = policy.with_adapter(state.adapter)
    groups = rollout_groups(current, prompts, config, rewarder, stream)
    for grp in groups:
        compute_advantages(grp, config)
    rows = training_rows(groups)
    res = grpo_loss(policy.base, state.adapter, rows, config)
    adapter, opt = state.adapter, state.optimizer
    if rows.n:
        params, opt = adam_step(adapter.arrays(), res.grads, opt, config.lr)
        adapter = adapter.with_arrays(params)
    step = state.step + 1
    n_sampled = len(groups)
    sampling = n_sampled * config.group_size * config.steps_per_traj
    nfe = (ledger or NfeLedger()).add(step, sampling, res.nfe, n_sampled, rows.n_groups)
    rewards = np.concatenate([g.rewards for g in groups])
    metrics = {
        "step": step,
        "reward_mean": float(rewards.mean()),
        "reward_std": float(rewards.std()),
        "oracle_rate": float(np.mean([g.oracle.mean() for g in groups])),
        "kl": res.kl,
        "loss": res.loss,
        "nfe_sampling": nfe["sampling_nfe_per_prompt"],
        "nfe_training": nfe["training_nfe_per_prompt"],
        "degenerate_groups": n_sampled - rows.n_groups,
        "clip_fraction": res.clip_fraction,
    }
    if res.ratio_clamped:
        metrics["ratio_clamped"] = res.ratio_clamped
    return GrpoState(adapter, opt, step), metrics, groups


def new_grpo_state(policy: Policy, config: GrpoConfig, stream: RngStream) -> GrpoState:
    from .flow import init_adapter

    adapter = init_adapter(policy.base, config.adapter_rank, stream, config.adapter_alpha)
    return GrpoState(adapter, AdamState.zeros_like(adapter.arrays()))


def grpo_train(
    policy: Policy,
    rewarder: Rewarder,
    prompt_pool: list[SpatialPrompt],
    config: GrpoConfig,
    steps: int,
    stream: RngStream,
    state: GrpoState | None = None,
    ledger: NfeLedger | None = None,
    on_step=None,
    degenerate_warn: int = 10,
) -> tuple[GrpoState, list[dict], NfeLedger]:
    """Run until ``state.step == steps``.

    ``on_step(state, metrics)`` runs after each update (checkpointing hook).
    A non-finite loss raises TrainingDiverged carrying the last good state.
    """
    if not prompt_pool:
        raise DomainError("empty prompt pool")
    if steps < 1:
        raise DomainError("budget must be at least one step")
    state = state or new_grpo_state(policy, config, stream.child(0))
    ledger = ledger or NfeLedger()
    history = []
    all_degenerate_run = 0
    while state.step < steps:
        step_stream = stream.child(1000 + state.step)
        idx = step_stream.integers(0, len(prompt_pool), config.prompts_per_step)
        prompts = [prompt_pool[int(i)] for i in idx]
        try:
            state_next, metrics, _ = grpo_update(policy, state, prompts, config, rewarder, step_stream, ledger)
        except NonFiniteError as exc:
            raise TrainingDiverged(str(exc), last_good=state, step=state.step) from exc
        state = state_next
        history.append(metrics)
        if metrics["degenerate_groups"] == config.prompts_per_step:
            all_degenerate_run += 1
            if all_degenerate_run == degenerate_warn:
                warnings.warn(f"{degenerate_warn} consecutive steps with only degenerate groups")
        else:
            all_degenerate_run = 0
        if on_step is not None:
            on_step(state, metrics)
        log.debug("grpo %s", metrics)
    return state, history, ledger


# --------------------------------------------------------------------------
# Advantage-bias diagnostic
# --------------------------------------------------------------------------


def penalized_high_quality(rewards: np.ndarray, oracle: np.ndarray, k: int, threshold: float, std_guard: float = 1e-8) -> dict:
    """Members with oracle >= threshold that receive a negative advantage."""
    _, subset = select_subset(rewards, k)
    adv, degenerate = normalize(rewards[subset], std_guard)
    hq = oracle[subset] >= threshold
    members = subset[hq & (adv < 0)]
    return {
        "k": k,
        "subset": subset.tolist(),
        "advantages": adv.tolist(),
        "degenerate": degenerate,
        "penalized": members.tolist(),
        "n_penalized": int(len(members)),
    }


def diagnose_group(rewards, oracle, k: int, threshold: float, std_guard: float = 1e-8) -> dict:
    rewards = np.asarray(rewards, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if not 0 < threshold <= 1:
        raise DomainError("threshold must be in (0, 1]")
    full = penalized_high_quality(rewards, oracle, 0, threshold, std_guard)
    topk = penalized_high_quality(rewards, oracle, k, threshold, std_guard)
    return {
        "group_size": len(rewards),
        "threshold": threshold,
        "n_high_quality": int((oracle >= threshold).sum()),
        "rewards": rewards.tolist(),
        "oracle": oracle.tolist(),
        "without_topk": full,
        "with_topk": topk,
    }


def diagnose_advantage_bias(
    policy: Policy,
    rewarder: Rewarder,
    prompt: SpatialPrompt,
    config: GrpoConfig,
    threshold: float,
    stream: RngStream,
) -> dict:
    """Roll out one group and count high-quality members with negative
    advantage under full-group (k=0) and top-k statistics."""
    grp = rollout_group(policy, prompt, config, rewarder, stream)
    report = diagnose_group(grp.rewards, grp.oracle, config.k, threshold, config.std_guard)
    report["prompt"] = prompt.to_json()
    return report


def config_dict(config: GrpoConfig) -> dict:
    return asdict(config)
