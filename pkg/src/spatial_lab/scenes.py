"""Scenes, spatial relation atoms, the rule-based oracle and embeddings.

Coordinates live in the unit square with y increasing upward, so ``ABOVE``
means a larger y.  A relation on the boundary (exact equality after the
margin) counts as unsatisfied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, NamedTuple

import numpy as np

from ._backend import kernels
from .errors import DomainError

MARGIN = 0.02
D_NEAR = 0.2
D_FAR = 0.5

CLASS_NAMES = (
    "apple", "bench", "bicycle", "book", "bottle", "cat",
    "chair", "clock", "cup", "dog", "lamp", "vase",
)  # fmt: skip
N_CLASSES = len(CLASS_NAMES)


class Predicate(IntEnum):
    LEFT_OF = 0
    RIGHT_OF = 1
    ABOVE = 2
    BELOW = 3
    NEAR = 4
    FAR = 5

    @property
    def inverse(self) -> "Predicate":
        return Predicate(self ^ 1)

    @property
    def symmetric(self) -> bool:
        return self in (Predicate.NEAR, Predicate.FAR)

    @property
    def axis(self) -> int:
        """0 horizontal, 1 vertical, 2 distance."""
        return int(self) // 2


N_PREDICATES = len(Predicate)


class RelationAtom(NamedTuple):
    subject: int
    predicate: Predicate
    obj: int

    def to_json(self) -> list:
        return [self.subject, self.predicate.name, self.obj]

    @classmethod
    def from_json(cls, item) -> "RelationAtom":
        s, p, o = item
        return cls(int(s), Predicate[p] if isinstance(p, str) else Predicate(int(p)), int(o))

    def __str__(self) -> str:
        return f"{self.predicate.name}({self.subject},{self.obj})"


@dataclass(frozen=True)
class SpatialPrompt:
    class_slots: tuple[int, ...]
    atoms: tuple[RelationAtom, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_slots", tuple(int(c) for c in self.class_slots))
        object.__setattr__(
            self, "atoms", tuple(RelationAtom(int(a[0]), Predicate(a[1]), int(a[2])) for a in self.atoms)
        )
        k = len(self.class_slots)
        if not self.atoms:
            raise DomainError("a prompt needs at least one relation atom")
        for c in self.class_slots:
            if not 0 <= c < N_CLASSES:
                raise DomainError(f"class id {c} outside vocabulary")
        for a in self.atoms:
            _check_atom(a, k)
        if len(set(self.atoms)) != len(self.atoms):
            raise DomainError("duplicate relation atoms")

    @property
    def k(self) -> int:
        return len(self.class_slots)

    def atom_array(self) -> np.ndarray:
        return np.array([[a.subject, int(a.predicate), a.obj] for a in self.atoms], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "classes": [CLASS_NAMES[c] for c in self.class_slots],
            "atoms": [a.to_json() for a in self.atoms],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SpatialPrompt":
        classes = [CLASS_NAMES.index(c) if isinstance(c, str) else int(c) for c in d["classes"]]
        return cls(tuple(classes), tuple(RelationAtom.from_json(a) for a in d["atoms"]))

    def describe(self) -> str:
        names = [f"{CLASS_NAMES[c]}#{i}" for i, c in enumerate(self.class_slots)]
        return "; ".join(f"{names[a.subject]} {a.predicate.name} {names[a.obj]}" for a in self.atoms)


class SceneObject(NamedTuple):
    slot: int
    class_id: int
    position: tuple[float, float]


@dataclass(frozen=True, eq=False)
class Scene:
    class_slots: tuple[int, ...]
    positions: np.ndarray  # (K, 2)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 2)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "class_slots", tuple(int(c) for c in self.class_slots))
        if len(self.class_slots) != pos.shape[0]:
            raise DomainError("one class id per object required")
        if not np.all(np.isfinite(pos)) or np.any(pos < 0.0) or np.any(pos > 1.0):
            raise DomainError("positions must lie in the unit square")

    @property
    def k(self) -> int:
        return len(self.class_slots)

    @property
    def objects(self) -> list[SceneObject]:
        return [
            SceneObject(i, c, (float(p[0]), float(p[1])))
            for i, (c, p) in enumerate(zip(self.class_slots, self.positions))
        ]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Scene)
            and self.class_slots == other.class_slots
            and np.array_equal(self.positions, other.positions)
        )

    def to_json(self) -> dict:
        return {
            "classes": [CLASS_NAMES[c] for c in self.class_slots],
            "positions": [[float(x), float(y)] for x, y in self.positions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        classes = [CLASS_NAMES.index(c) if isinstance(c, str) else int(c) for c in d["classes"]]
        return cls(tuple(classes), np.asarray(d["positions"], dtype=np.float64))

    @classmethod
    def from_vector(cls, class_slots, vec: np.ndarray) -> "Scene":
        """Scene from a raw state vector, clipped into the unit square."""
        return cls(tuple(class_slots), np.clip(np.asarray(vec, dtype=np.float64), 0.0, 1.0).reshape(-1, 2))


@dataclass(frozen=True)
class OracleScore:
    satisfied: int
    total: int

    @property
    def fraction(self) -> float:
        return self.satisfied / self.total


def _check_atom(atom: RelationAtom, k: int) -> None:
    if not (0 <= atom.subject < k and 0 <= atom.obj < k):
        raise DomainError(f"{atom} references a slot outside 0..{k - 1}")
    if atom.subject == atom.obj:
        raise DomainError(f"{atom} relates a slot to itself")


def relation_satisfied(
    scene: Scene,
    atom: RelationAtom,
    margin: float = MARGIN,
    d_near: float = D_NEAR,
    d_far: float = D_FAR,
) -> bool:
    if margin < 0:
        raise DomainError("margin must be non-negative")
    _check_atom(atom, scene.k)
    arr = np.array([[atom.subject, int(atom.predicate), atom.obj]], dtype=np.int64)
    return bool(kernels.count_satisfied(scene.positions[None], arr, margin, d_near, d_far)[0])


def oracle_score(
    scene: Scene,
    prompt: SpatialPrompt,
    margin: float = MARGIN,
    d_near: float = D_NEAR,
    d_far: float = D_FAR,
) -> OracleScore:
    if scene.k != prompt.k:
        raise DomainError(f"scene has {scene.k} objects, prompt expects {prompt.k}")
    n = kernels.count_satisfied(scene.positions[None], prompt.atom_array(), margin, d_near, d_far)[0]
    return OracleScore(int(n), len(prompt.atoms))


def oracle_fractions(
    positions: np.ndarray, prompt: SpatialPrompt, margin: float = MARGIN, d_near: float = D_NEAR, d_far: float = D_FAR
) -> np.ndarray:
    """Oracle fraction for a batch of layouts ``(n, K, 2)`` under one prompt."""
    counts = kernels.count_satisfied(positions, prompt.atom_array(), margin, d_near, d_far)
    return counts / len(prompt.atoms)


# --------------------------------------------------------------------------
# Embeddings
# --------------------------------------------------------------------------


def prompt_embedding_dim(k: int, n_classes: int = N_CLASSES) -> int:
    return k * n_classes + 2 * k + N_PREDICATES + N_PREDICATES * k * k


def embed_prompt(prompt: SpatialPrompt) -> np.ndarray:
    """Fixed-length, atom-order-invariant prompt vector.

    Blocks, in order:
      * ``K x C`` class one-hots, one row per slot;
      * the sum over atoms of ``onehot(subject) | onehot(predicate) | onehot(object)``
        (``2K + 6`` entries);
      * the sum over atoms of ``onehot(subject) (x) onehot(predicate) (x) onehot(object)``
        (``6 K^2`` entries).

    The second block alone cannot tell ``{LEFT_OF(0,1), ABOVE(2,3)}`` from
    ``{LEFT_OF(2,3), ABOVE(0,1)}``; the outer-product block keeps each atom's
    arguments bound to its predicate.
    """
    if not prompt.atoms:
        raise DomainError("a prompt needs at least one relation atom")
    k = prompt.k
    classes = np.zeros((k, N_CLASSES))
    classes[np.arange(k), prompt.class_slots] = 1.0
    summary = np.zeros(2 * k + N_PREDICATES)
    bound = np.zeros((k, N_PREDICATES, k))
    for a in prompt.atoms:
        summary[a.subject] += 1.0
        summary[k + int(a.predicate)] += 1.0
        summary[k + N_PREDICATES + a.obj] += 1.0
        bound[a.subject, int(a.predicate), a.obj] += 1.0
    return np.concatenate([classes.ravel(), summary, bound.ravel()])


def atom_summary_block(embedding: np.ndarray, k: int) -> np.ndarray:
    """The ``2K + 6`` subject/predicate/object count block of an embedding."""
    start = k * N_CLASSES
    return embedding[start : start + 2 * k + N_PREDICATES]


def embed_scene(scene: Scene) -> np.ndarray:
    return scene.positions.ravel().copy()


def unflatten_positions(vec: np.ndarray) -> np.ndarray:
    return np.asarray(vec, dtype=np.float64).reshape(-1, 2)


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------


def scene_prompt_to_json(prompt: SpatialPrompt, scene: Scene | None = None) -> dict:
    out = prompt.to_json()
    if scene is not None:
        out["positions"] = scene.to_json()["positions"]
    return out


def scene_prompt_from_json(d: dict) -> tuple[SpatialPrompt, Scene | None]:
    prompt = SpatialPrompt.from_json(d)
    scene = Scene(prompt.class_slots, np.asarray(d["positions"])) if "positions" in d else None
    return prompt, scene


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stack_positions(scenes: Iterable[Scene]) -> np.ndarray:
    return np.stack([s.positions for s in scenes])
