"""Typed checkpoints on top of the generic container in :mod:`numerics`.

Every file carries ``meta.kind`` (``velocity``, ``reward`` or ``grpo``) plus
the step/epoch it was taken at.  Optimizer moments are stored alongside so a
run can resume exactly.
"""

from __future__ import annotations

from pathlib import Path

from .flow import LowRankAdapter, Policy
from .grpo import GrpoState
from .numerics import AdamState, Mlp, load_checkpoint, mlp_from_arrays, mlp_to_arrays, save_checkpoint


def _adam_arrays(state: AdamState | None) -> tuple[dict, dict]:
    if state is None:
        return {}, {}
    arrays = {}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        arrays[f"adam.m{i}"] = m
        arrays[f"adam.v{i}"] = v
    info = {"n": len(state.m), "step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    return arrays, info


def _adam_from(arrays: dict, info: dict | None) -> AdamState | None:
    if not info:
        return None
    n = info["n"]
    return AdamState(
        [arrays[f"adam.m{i}"] for i in range(n)],
        [arrays[f"adam.v{i}"] for i in range(n)],
        int(info["step"]),
        info["beta1"],
        info["beta2"],
        info["eps"],
    )


def save_net(path: str | Path, kind: str, net: Mlp, state: AdamState | None = None, **meta) -> None:
    arrays, info = mlp_to_arrays(net, "net")
    adam, adam_info = _adam_arrays(state)
    save_checkpoint(path, {**arrays, **adam}, {"kind": kind, "net": info, "adam": adam_info, **meta})


def load_net(path: str | Path, kind: str | None = None) -> tuple[Mlp, AdamState | None, dict]:
    arrays, meta = load_checkpoint(path)
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
    return mlp_from_arrays(arrays, "net", meta["net"]), _adam_from(arrays, meta.get("adam")), meta


def save_grpo(path: str | Path, policy: Policy, state: GrpoState, **meta) -> None:
    arrays, info = mlp_to_arrays(policy.base, "net")
    ad = state.adapter
    for i, (a, b) in enumerate(zip(ad.a, ad.b)):
        arrays[f"lora.a{i}"] = a
        arrays[f"lora.b{i}"] = b
    adam, adam_info = _adam_arrays(state.optimizer)
    save_checkpoint(
        path,
        {**arrays, **adam},
        {
            "kind": "grpo",
            "net": info,
            "adam": adam_info,
            "lora": {"n": len(ad.a), "alpha": ad.alpha},
            "step": state.step,
            **meta,
        },
    )


def load_policy(path: str | Path) -> tuple[Policy, GrpoState | None, dict]:
    """Load either a pretrained velocity net or a GRPO checkpoint."""
    arrays, meta = load_checkpoint(path)
    base = mlp_from_arrays(arrays, "net", meta["net"])
    if meta.get("kind") == "velocity":
        return Policy(base), None, meta
    if meta.get("kind") != "grpo":
        raise ValueError(f"{path}: not a policy checkpoint")
    n = meta["lora"]["n"]
    adapter = LowRankAdapter(
        [arrays[f"lora.a{i}"] for i in range(n)],
        [arrays[f"lora.b{i}"] for i in range(n)],
        float(meta["lora"]["alpha"]),
    )
    opt = _adam_from(arrays, meta.get("adam")) or AdamState.zeros_like(adapter.arrays())
    return Policy(base, adapter), GrpoState(adapter, opt, int(meta["step"])), meta
