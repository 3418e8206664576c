"""Synthetic preference-pair construction.

A pair is built by sampling a prompt, rejection-sampling a scene that
satisfies it (the winner), perturbing one to three of its relations,
rejection-sampling a scene for the perturbed prompt (the loser), and then
checking the loser against the *original* prompt.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ._backend import kernels
from .errors import GenerationError, PerturbationError, UnsatisfiableError
from .numerics import RngStream
from .scenes import (
    D_FAR,
    D_NEAR,
    MARGIN,
    N_CLASSES,
    Predicate,
    RelationAtom,
    Scene,
    SpatialPrompt,
    dumps,
    oracle_score,
    relation_satisfied,
)

log = logging.getLogger(__name__)

TRAIN_STREAM = 1
EVAL_STREAM = 2


@dataclass
class GrammarConfig:
    k_objects: int = 4
    n_classes: int = N_CLASSES
    atoms_min: int = 2
    atoms_max: int = 5
    margin: float = MARGIN
    d_near: float = D_NEAR
    d_far: float = D_FAR
    max_synth_attempts: int = 10_000
    synth_chunk: int = 500
    prompt_budget: int = 200
    perturb_budget: int = 50
    pair_budget: int = 100
    layout_threshold: float = 0.05

    def __post_init__(self):
        if not 3 <= self.k_objects <= 6:
            raise ValueError("k_objects must be in 3..6")
        if not 1 <= self.n_classes <= N_CLASSES:
            raise ValueError(f"n_classes must be in 1..{N_CLASSES}")
        if not 1 <= self.atoms_min <= self.atoms_max:
            raise ValueError("need 1 <= atoms_min <= atoms_max")
        if self.atoms_max > 3 * self.k_objects * (self.k_objects - 1) // 2:
            raise ValueError("atoms_max exceeds the number of distinct (pair, axis) relations")


class PerturbOp(str, Enum):
    INVERT_PREDICATE = "INVERT_PREDICATE"
    SWAP_ARGUMENTS = "SWAP_ARGUMENTS"
    RETARGET_OBJECT = "RETARGET_OBJECT"


@dataclass(frozen=True)
class AppliedOp:
    op: PerturbOp
    atom_index: int
    before: RelationAtom
    after: RelationAtom

    def to_json(self) -> dict:
        return {
            "op": self.op.value,
            "atom": self.atom_index,
            "before": self.before.to_json(),
            "after": self.after.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AppliedOp":
        return cls(
            PerturbOp(d["op"]),
            int(d["atom"]),
            RelationAtom.from_json(d["before"]),
            RelationAtom.from_json(d["after"]),
        )


@dataclass(frozen=True)
class PerturbationSpec:
    n_perturbations: int
    ops: tuple[AppliedOp, ...]

    def __post_init__(self):
        if self.n_perturbations != len(self.ops):
            raise ValueError("n_perturbations must equal the number of ops")
        if len({o.atom_index for o in self.ops}) != len(self.ops):
            raise ValueError("each op must target a distinct atom")


@dataclass(frozen=True)
class PreferencePair:
    prompt: SpatialPrompt
    winner: Scene
    loser: Scene
    perturbation: PerturbationSpec
    seed: int

    @property
    def n_pert(self) -> int:
        return self.perturbation.n_perturbations

    @property
    def perturbed_prompt(self) -> SpatialPrompt:
        atoms = list(self.prompt.atoms)
        for op in self.perturbation.ops:
            atoms[op.atom_index] = op.after
        return SpatialPrompt(self.prompt.class_slots, tuple(atoms))

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt.to_json(),
            "winner": self.winner.to_json(),
            "loser": self.loser.to_json(),
            "n_pert": self.n_pert,
            "ops": [o.to_json() for o in self.perturbation.ops],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PreferencePair":
        ops = tuple(AppliedOp.from_json(o) for o in d["ops"])
        return cls(
            SpatialPrompt.from_json(d["prompt"]),
            Scene.from_json(d["winner"]),
            Scene.from_json(d["loser"]),
            PerturbationSpec(int(d["n_pert"]), ops),
            int(d["seed"]),
        )


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None


# --------------------------------------------------------------------------
# Scenes and prompts
# --------------------------------------------------------------------------


def synthesize_scene(prompt: SpatialPrompt, stream: RngStream, config: GrammarConfig | None = None) -> Scene:
    """Rejection-sample uniform layouts until every atom holds."""
    cfg = config or GrammarConfig(k_objects=prompt.k)
    atoms = prompt.atom_array()
    tried = 0
    while tried < cfg.max_synth_attempts:
        n = min(cfg.synth_chunk, cfg.max_synth_attempts - tried)
        cand = stream.uniform((n, prompt.k, 2))
        hit = kernels.first_satisfying(cand, atoms, cfg.margin, cfg.d_near, cfg.d_far)
        if hit >= 0:
            return Scene(prompt.class_slots, cand[hit])
        tried += n
    raise UnsatisfiableError(f"no layout satisfies {prompt.describe()} in {tried} attempts")


def _atom_key(a: RelationAtom) -> tuple[int, int, int]:
    lo, hi = sorted((a.subject, a.obj))
    return lo, hi, a.predicate.axis


def _candidate_atoms(k: int) -> list[RelationAtom]:
    return [RelationAtom(s, p, o) for s in range(k) for o in range(k) if s != o for p in Predicate]


def _sample_atoms(stream: RngStream, k: int, r: int) -> tuple[RelationAtom, ...]:
    # at most one atom per (unordered pair, axis): rules out both duplicates in
    # disguise (LEFT_OF(0,1) / RIGHT_OF(1,0)) and direct contradictions
    cands = _candidate_atoms(k)
    chosen, keys = [], set()
    for idx in stream.permutation(len(cands)):
        a = cands[idx]
        if _atom_key(a) in keys:
            continue
        chosen.append(a)
        keys.add(_atom_key(a))
        if len(chosen) == r:
            break
    return tuple(chosen)


def _prompt_with_witness(
    stream: RngStream, config: GrammarConfig, n_atoms: int | None = None, min_atoms: int = 1
) -> tuple[SpatialPrompt, Scene]:
    lo = max(config.atoms_min, min_atoms)
    if lo > config.atoms_max and n_atoms is None:
        raise GenerationError(f"cannot build a prompt with at least {min_atoms} atoms")
    for _ in range(config.prompt_budget):
        classes = stream.integers(0, config.n_classes, config.k_objects)
        r = n_atoms if n_atoms is not None else int(stream.integers(lo, config.atoms_max + 1))
        prompt = SpatialPrompt(tuple(int(c) for c in classes), _sample_atoms(stream, config.k_objects, r))
        try:
            return prompt, synthesize_scene(prompt, stream, config)
        except UnsatisfiableError:
            continue
    raise GenerationError(f"no satisfiable prompt within {config.prompt_budget} draws")


def generate_prompt(stream: RngStream, config: GrammarConfig | None = None, n_atoms: int | None = None) -> SpatialPrompt:
    """Sample a jointly satisfiable prompt (``n_atoms`` fixes R)."""
    return _prompt_with_witness(stream, config or GrammarConfig(), n_atoms)[0]


# --------------------------------------------------------------------------
# Perturbations
# --------------------------------------------------------------------------


def _ops_for(atom: RelationAtom, k: int) -> list[PerturbOp]:
    ops = [PerturbOp.INVERT_PREDICATE]
    if not atom.predicate.symmetric:
        ops.append(PerturbOp.SWAP_ARGUMENTS)
    if k >= 3:
        ops.append(PerturbOp.RETARGET_OBJECT)
    return ops


def apply_op(atom: RelationAtom, op: PerturbOp, stream: RngStream | None = None, k: int | None = None) -> RelationAtom:
    if op is PerturbOp.INVERT_PREDICATE:
        return RelationAtom(atom.subject, atom.predicate.inverse, atom.obj)
    if op is PerturbOp.SWAP_ARGUMENTS:
        return RelationAtom(atom.obj, atom.predicate, atom.subject)
    if stream is None or k is None:
        raise ValueError("RETARGET_OBJECT needs a stream and K")
    others = [j for j in range(k) if j not in (atom.subject, atom.obj)]
    return RelationAtom(atom.subject, atom.predicate, others[int(stream.integers(0, len(others)))])


def _perturb_with_witness(
    prompt: SpatialPrompt, n: int, stream: RngStream, config: GrammarConfig, ops: list[PerturbOp] | None = None
) -> tuple[SpatialPrompt, PerturbationSpec, Scene]:
    r = len(prompt.atoms)
    if not 1 <= n <= min(3, r):
        raise ValueError(f"n must be in 1..{min(3, r)}")
    for _ in range(config.perturb_budget):
        targets = sorted(int(i) for i in stream.choice(r, n))
        atoms = list(prompt.atoms)
        applied = []
        for j, idx in enumerate(targets):
            before = prompt.atoms[idx]
            if ops is not None:
                op = ops[j]
            else:
                choices = _ops_for(before, prompt.k)
                op = choices[int(stream.integers(0, len(choices)))]
            after = apply_op(before, op, stream, prompt.k)
            atoms[idx] = after
            applied.append(AppliedOp(op, idx, before, after))
        if len(set(atoms)) != len(atoms):
            continue
        perturbed = SpatialPrompt(prompt.class_slots, tuple(atoms))
        try:
            witness = synthesize_scene(perturbed, stream, config)
        except UnsatisfiableError:
            continue
        return perturbed, PerturbationSpec(n, tuple(applied)), witness
    raise PerturbationError(f"no satisfiable {n}-perturbation of {prompt.describe()}")


def perturb_prompt(
    prompt: SpatialPrompt,
    n: int,
    stream: RngStream,
    config: GrammarConfig | None = None,
    ops: list[PerturbOp] | None = None,
) -> tuple[SpatialPrompt, PerturbationSpec]:
    """Alter exactly ``n`` distinct atoms; the others are kept verbatim.

    ``ops`` pins the operator per target (in ascending atom order).
    """
    perturbed, spec, _ = _perturb_with_witness(prompt, n, stream, config or GrammarConfig(k_objects=prompt.k), ops)
    return perturbed, spec


# --------------------------------------------------------------------------
# Verification and dataset assembly
# --------------------------------------------------------------------------


def verify_pair(pair: PreferencePair, config: GrammarConfig | None = None) -> Verdict:
    cfg = config or GrammarConfig(k_objects=pair.prompt.k)
    kw = dict(margin=cfg.margin, d_near=cfg.d_near, d_far=cfg.d_far)
    if oracle_score(pair.winner, pair.prompt, **kw).fraction < 1.0:
        return Verdict(False, "winner_violates_prompt")
    for op in pair.perturbation.ops:
        if relation_satisfied(pair.loser, pair.prompt.atoms[op.atom_index], **kw):
            return Verdict(False, "perturbation_unexpressed")
    shift = np.linalg.norm(pair.winner.positions - pair.loser.positions, axis=1).max()
    if shift < cfg.layout_threshold:
        return Verdict(False, "layout_unchanged")
    return Verdict(True)


def forge_pair(stream: RngStream, n_pert: int, config: GrammarConfig, seed: int = 0) -> tuple[PreferencePair, Counter]:
    """Generate candidates until one passes verification; returns it with discard reasons."""
    discards: Counter = Counter()
    for _ in range(config.pair_budget):
        try:
            prompt, winner = _prompt_with_witness(stream, config, min_atoms=n_pert)
            _, spec, loser = _perturb_with_witness(prompt, n_pert, stream, config)
        except (GenerationError, PerturbationError) as exc:
            discards[type(exc).__name__] += 1
            continue
        pair = PreferencePair(prompt, winner, loser, spec, seed)
        verdict = verify_pair(pair, config)
        if verdict.accepted:
            return pair, discards
        discards[verdict.reason] += 1
    raise GenerationError(f"no verified pair within {config.pair_budget} candidates")


@dataclass
class ForgeConfig:
    train_n: int = 5000
    eval_n: int = 1000
    pert_mix: float = 0.5
    grammar: GrammarConfig = field(default_factory=GrammarConfig)

    def __post_init__(self):
        if self.train_n < 1 or self.eval_n < 1:
            raise ValueError("split sizes must be >= 1")
        if not 0.0 <= self.pert_mix <= 1.0:
            raise ValueError("pert_mix must be in [0, 1]")


def _split_plan(root: RngStream, split_stream: int, n: int, mix: float, grammar: GrammarConfig) -> list[tuple[int, int]]:
    """(pair stream id, n_perturbations) for each record of a split."""
    split = root.child(split_stream)
    n1 = int(round(n * mix))
    order = split.permutation(n)
    cats = np.where(order < n1, 1, 0)
    max_pert = min(3, grammar.atoms_max)
    plan = []
    for i in range(n):
        pstream = split.child(i)
        if cats[i] == 1 or max_pert < 2:
            n_pert = 1
        else:
            n_pert = int(pstream.child(0).integers(2, max_pert + 1))
        plan.append((pstream.stream, n_pert))
    return plan


def _forge_one(args) -> tuple[dict, dict]:
    seed, stream_id, n_pert, grammar = args
    pair, discards = forge_pair(RngStream(seed, stream_id, 0), n_pert, grammar, seed=stream_id)
    return pair.to_json(), dict(discards)


def _forge_split(seed: int, plan, grammar: GrammarConfig, threads: int) -> tuple[list[dict], Counter]:
    jobs = [(seed, sid, n_pert, grammar) for sid, n_pert in plan]
    if threads > 1 and len(jobs) > 64:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_forge_one, jobs, chunksize=max(1, len(jobs) // (8 * threads))))
    else:
        results = [_forge_one(j) for j in jobs]
    total: Counter = Counter()
    for _, d in results:
        total.update(d)
    return [r for r, _ in results], total


def _split_counts(records: list[dict]) -> dict:
    by_n = Counter(r["n_pert"] for r in records)
    return {
        "n": len(records),
        "by_n_pert": {str(k): by_n.get(k, 0) for k in (1, 2, 3)},
        "by_group": {"1": by_n.get(1, 0), "2_3": by_n.get(2, 0) + by_n.get(3, 0)},
    }


def build_dataset(config: ForgeConfig, seed: int, out_dir: str | Path, threads: int = 1) -> tuple[dict[str, Path], dict]:
    """Write ``train.jsonl``, ``eval.jsonl`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = RngStream(seed, 0, 0)
    manifest = {
        "global_seed": seed,
        "pert_mix": config.pert_mix,
        "grammar": asdict(config.grammar),
        "splits": {},
    }
    discards: Counter = Counter()
    paths = {}
    for name, sid, n in (("train", TRAIN_STREAM, config.train_n), ("eval", EVAL_STREAM, config.eval_n)):
        plan = _split_plan(root, sid, n, config.pert_mix, config.grammar)
        records, d = _forge_split(seed, plan, config.grammar, threads)
        discards.update(d)
        path = out / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(dumps(rec) + "\n")
        paths[name] = path
        manifest["splits"][name] = _split_counts(records)
        log.info("wrote %d %s pairs to %s", len(records), name, path)
    n_total = config.train_n + config.eval_n
    n_disc = sum(discards.values())
    manifest["discards"] = {"total": n_disc, "reasons": dict(sorted(discards.items()))}
    manifest["discard_rate"] = n_disc / (n_disc + n_total)
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["manifest"] = mpath
    return paths, manifest


def load_pairs(path: str | Path) -> list[PreferencePair]:
    with open(path, encoding="utf-8") as fh:
        return [PreferencePair.from_json(json.loads(line)) for line in fh if line.strip()]
