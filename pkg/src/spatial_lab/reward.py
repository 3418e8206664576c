"""Gaussian-headed reward model trained with a Monte-Carlo Bradley-Terry loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NonFiniteError, TrainingDiverged
from .forge import PreferencePair
from .numerics import (
    AdamState,
    Grads,
    Mlp,
    RngStream,
    adam_step,
    backward_trace,
    forward_trace,
    init_mlp,
    mlp_forward,
)
from .scenes import Scene, SpatialPrompt, embed_prompt, embed_scene, oracle_fractions, prompt_embedding_dim

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class GaussianReward:
    mu: float
    sigma: float


@dataclass
class BtLossConfig:
    mc_samples: int = 100
    paired: bool = False  # reuse the winner's draws for the loser

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def reward_input_dim(k: int) -> int:
    return prompt_embedding_dim(k) + 2 * k


def init_reward_net(k: int, stream: RngStream, hidden: tuple[int, ...] = (128, 128)) -> Mlp:
    return init_mlp([reward_input_dim(k), *hidden, 2], stream, out_scale=0.1)


def features(prompt: SpatialPrompt, scene: Scene) -> np.ndarray:
    return np.concatenate([embed_prompt(prompt), embed_scene(scene)])


def batch_features(prompt_embs: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Stack prompt embeddings ``(n, E)`` with flattened layouts ``(n, K, 2)``."""
    return np.concatenate([prompt_embs, positions.reshape(len(positions), -1)], axis=1)


def pair_features(pairs: list[PreferencePair]) -> tuple[np.ndarray, np.ndarray]:
    pe = np.stack([embed_prompt(p.prompt) for p in pairs])
    xw = batch_features(pe, np.stack([p.winner.positions for p in pairs]))
    xl = batch_features(pe, np.stack([p.loser.positions for p in pairs]))
    return xw, xl


def head(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split raw outputs into (mu, sigma)."""
    return out[..., 0], softplus(out[..., 1]) + SIGMA_FLOOR


def score_batch(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu, sigma = head(mlp_forward(net, x))
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise NonFiniteError("reward net produced a non-finite score")
    return mu, sigma


def score(net: Mlp, prompt: SpatialPrompt, scene: Scene) -> GaussianReward:
    """Deterministic (mu, sigma); downstream code ranks by mu."""
    mu, sigma = score_batch(net, features(prompt, scene)[None])
    return GaussianReward(float(mu[0]), float(sigma[0]))


def draw_noise(stream: RngStream, n_pairs: int, config: BtLossConfig) -> tuple[np.ndarray, np.ndarray]:
    eps_w = stream.normal((n_pairs, config.mc_samples))
    eps_l = eps_w if config.paired else stream.normal((n_pairs, config.mc_samples))
    return eps_w, eps_l


def bt_loss_features(
    net: Mlp, xw: np.ndarray, xl: np.ndarray, eps_w: np.ndarray, eps_l: np.ndarray
) -> tuple[float, Grads]:
    """Mean over pairs and draws of ``-log sigmoid(s_w - s_l)`` with
    reparameterised scores ``s = mu + sigma * eps``; exact gradients."""
    b = xw.shape[0]
    acts = forward_trace(net, np.concatenate([xw, xl]))
    out = acts[-1]
    mu, sigma = head(out)
    s_w = mu[:b, None] + sigma[:b, None] * eps_w
    s_l = mu[b:, None] + sigma[b:, None] * eps_l
    d = s_w - s_l
    loss = float(np.mean(np.logaddexp(0.0, -d)))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite Bradley-Terry loss")
    g = -sigmoid(-d) / d.size  # dL/dd
    dmu = np.concatenate([g.sum(axis=1), -g.sum(axis=1)])
    dsigma = np.concatenate([(g * eps_w).sum(axis=1), -(g * eps_l).sum(axis=1)])
    upstream = np.stack([dmu, dsigma * sigmoid(out[:, 1])], axis=1)
    return loss, backward_trace(net, acts, upstream)


def bt_loss(
    net: Mlp,
    pairs: list[PreferencePair],
    config: BtLossConfig,
    stream: RngStream | None = None,
    noise: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, Grads]:
    """Loss and gradients for a batch of pairs.  ``noise`` freezes the draws."""
    if not pairs:
        raise DomainError("no pairs")
    xw, xl = pair_features(pairs)
    if noise is None:
        if stream is None:
            raise ValueError("need a stream or frozen noise")
        noise = draw_noise(stream, len(pairs), config)
    return bt_loss_features(net, xw, xl, *noise)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


class OracleScorer:
    """Stand-in scorer whose mu is the oracle satisfaction fraction."""

    def pair_mus(self, pairs: list[PreferencePair]) -> tuple[np.ndarray, np.ndarray]:
        mw = np.array([oracle_fractions(p.winner.positions[None], p.prompt)[0] for p in pairs])
        ml = np.array([oracle_fractions(p.loser.positions[None], p.prompt)[0] for p in pairs])
        return mw, ml


def pair_mus(scorer, pairs: list[PreferencePair]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scorer, Mlp):
        xw, xl = pair_features(pairs)
        return score_batch(scorer, xw)[0], score_batch(scorer, xl)[0]
    return scorer.pair_mus(pairs)


def pairwise_accuracy(scorer, pairs: list[PreferencePair]) -> dict:
    """Fraction with mu_w > mu_l (exact ties count half), overall and by
    perturbation group ``"1"`` / ``"2_3"``."""
    if not pairs:
        raise DomainError("no pairs")
    mw, ml = pair_mus(scorer, pairs)
    hits = np.where(mw > ml, 1.0, np.where(mw == ml, 0.5, 0.0))
    npert = np.array([p.n_pert for p in pairs])
    by = {}
    for key, mask in (("1", npert == 1), ("2_3", npert >= 2)):
        by[key] = float(hits[mask].mean()) if mask.any() else None
    return {"overall": float(hits.mean()), "by_pert": by, "n_pairs": len(pairs)}


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class RewardTrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    mc_samples: int = 100
    shuffle: bool = True


def train_reward(
    net: Mlp,
    train_pairs: list[PreferencePair],
    eval_pairs: list[PreferencePair] | None,
    config: RewardTrainConfig,
    stream: RngStream,
    state: AdamState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> tuple[Mlp, list[dict], AdamState]:
    """Mini-batch Adam on the MC Bradley-Terry loss.

    ``on_epoch(epoch, net, state, record)`` is called after each epoch.  A
    non-finite loss raises TrainingDiverged holding the last good net.
    """
    if not train_pairs:
        raise DomainError("empty training set")
    bt = BtLossConfig(config.mc_samples)
    xw_all, xl_all = pair_features(train_pairs)
    n = len(train_pairs)
    state = state or AdamState.zeros_like(net.arrays())
    history = []
    for epoch in range(start_epoch, config.epochs):
        order = stream.permutation(n) if config.shuffle else np.arange(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            eps = draw_noise(stream, len(idx), bt)
            try:
                loss, grads = bt_loss_features(net, xw_all[idx], xl_all[idx], *eps)
                params, state = adam_step(net.arrays(), grads.arrays(), state, config.lr)
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), last_good=net, step=epoch) from exc
            net = net.with_arrays(params)
            losses.append(loss * len(idx))
        record = {"epoch": epoch + 1, "train_loss": float(np.sum(losses) / n)}
        if eval_pairs:
            acc = pairwise_accuracy(net, eval_pairs)
            record.update(eval_acc=acc["overall"], eval_acc_1=acc["by_pert"]["1"], eval_acc_2_3=acc["by_pert"]["2_3"])
        history.append(record)
        log.info("reward epoch %s", record)
        if on_epoch is not None:
            on_epoch(epoch + 1, net, state, record)
    return net, history, state
