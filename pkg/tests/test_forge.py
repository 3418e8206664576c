import json

import numpy as np
import pytest

from spatial_lab.errors import UnsatisfiableError
from spatial_lab.forge import (
    AppliedOp,
    ForgeConfig,
    GrammarConfig,
    PerturbationSpec,
    PerturbOp,
    PreferencePair,
    build_dataset,
    forge_pair,
    generate_prompt,
    load_pairs,
    perturb_prompt,
    synthesize_scene,
    verify_pair,
)
from spatial_lab.numerics import RngStream
from spatial_lab.scenes import Predicate, RelationAtom, Scene, SpatialPrompt, oracle_score, relation_satisfied

L, R, A, B = Predicate.LEFT_OF, Predicate.RIGHT_OF, Predicate.ABOVE, Predicate.BELOW


def test_requested_atom_count():
    p = generate_prompt(RngStream(1), GrammarConfig(), n_atoms=1)
    assert len(p.atoms) == 1


def test_prompts_are_deterministic_and_contradiction_free():
    cfg = GrammarConfig(atoms_min=5, atoms_max=5)
    for i in range(40):
        p = generate_prompt(RngStream(2, i), cfg)
        assert p == generate_prompt(RngStream(2, i), cfg)
        pairs = {(min(a.subject, a.obj), max(a.subject, a.obj), a.predicate.axis) for a in p.atoms}
        assert len(pairs) == len(p.atoms)


def test_synthesis_postcondition():
    p = SpatialPrompt((0, 1, 2, 3), (RelationAtom(0, L, 1),))
    s = synthesize_scene(p, RngStream(3))
    assert s.positions[0, 0] < s.positions[1, 0] - 0.02


def test_five_consistent_atoms_all_satisfied():
    p = generate_prompt(RngStream(4), GrammarConfig(atoms_min=5, atoms_max=5))
    s = synthesize_scene(p, RngStream(5))
    assert oracle_score(s, p).fraction == 1.0


def test_contradiction_is_unsatisfiable():
    p = SpatialPrompt((0, 1, 2, 3), (RelationAtom(0, A, 1), RelationAtom(0, B, 1)))
    with pytest.raises(UnsatisfiableError):
        synthesize_scene(p, RngStream(6), GrammarConfig(max_synth_attempts=2000))


def test_invert_predicate():
    p = SpatialPrompt((0, 1, 2, 3), (RelationAtom(0, L, 1),))
    q, spec = perturb_prompt(p, 1, RngStream(7), ops=[PerturbOp.INVERT_PREDICATE])
    assert q.atoms == (RelationAtom(0, R, 1),)
    assert spec.ops[0].before == RelationAtom(0, L, 1)


def test_swap_arguments():
    p = SpatialPrompt((0, 1, 2, 3), (RelationAtom(0, A, 1),))
    q, _ = perturb_prompt(p, 1, RngStream(8), ops=[PerturbOp.SWAP_ARGUMENTS])
    assert q.atoms == (RelationAtom(1, A, 0),)


def test_two_perturbations_change_two_atoms():
    p = SpatialPrompt((0, 1, 2, 3), (RelationAtom(0, L, 1), RelationAtom(2, A, 3)))
    q, spec = perturb_prompt(p, 2, RngStream(9))
    assert all(x != y for x, y in zip(p.atoms, q.atoms))
    assert spec.n_perturbations == 2


def _pair(winner, loser):
    p = SpatialPrompt((0, 1, 2, 3), (RelationAtom(0, L, 1),))
    op = AppliedOp(PerturbOp.INVERT_PREDICATE, 0, p.atoms[0], RelationAtom(0, R, 1))
    mk = lambda xs: Scene((0, 1, 2, 3), np.array(xs))
    return PreferencePair(p, mk(winner), mk(loser), PerturbationSpec(1, (op,)), 0)


def test_verify_accepts_and_rejects():
    rest = [[0.5, 0.9], [0.5, 0.1]]
    ok = _pair([[0.2, 0.5], [0.8, 0.5], *rest], [[0.8, 0.5], [0.2, 0.5], *rest])
    assert verify_pair(ok).accepted
    unexpressed = _pair([[0.2, 0.5], [0.8, 0.5], *rest], [[0.1, 0.5], [0.7, 0.5], *rest])
    assert verify_pair(unexpressed).reason == "perturbation_unexpressed"
    bad_winner = _pair([[0.8, 0.5], [0.2, 0.5], *rest], [[0.8, 0.5], [0.2, 0.5], *rest])
    assert verify_pair(bad_winner).reason == "winner_violates_prompt"


def test_forge_pair_guarantees():
    cfg = GrammarConfig()
    for i in range(30):
        pair, _ = forge_pair(RngStream(10, i), 1 + i % 3, cfg)
        assert oracle_score(pair.winner, pair.prompt).fraction == 1.0
        for op in pair.perturbation.ops:
            assert not relation_satisfied(pair.loser, pair.prompt.atoms[op.atom_index])
        assert oracle_score(pair.loser, pair.perturbed_prompt).fraction == 1.0
        assert PreferencePair.from_json(json.loads(json.dumps(pair.to_json()))) == pair


def test_build_dataset_counts_split_and_determinism(tmp_path):
    cfg = ForgeConfig(train_n=120, eval_n=40, pert_mix=0.5)
    paths, manifest = build_dataset(cfg, 3, tmp_path / "a")
    build_dataset(cfg, 3, tmp_path / "b", threads=2)
    for name in ("train.jsonl", "eval.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(load_pairs(paths["train"])) == 120
    assert manifest["splits"]["train"]["by_group"] == {"1": 60, "2_3": 60}
    assert manifest["splits"]["eval"]["by_group"] == {"1": 20, "2_3": 20}
    assert 0 <= manifest["discard_rate"] < 1


def test_pert_mix_extremes(tmp_path):
    _, m = build_dataset(ForgeConfig(train_n=20, eval_n=10, pert_mix=1.0), 0, tmp_path)
    assert m["splits"]["train"]["by_group"]["2_3"] == 0


def test_config_validation():
    with pytest.raises(ValueError):
        GrammarConfig(atoms_min=3, atoms_max=2)
    with pytest.raises(ValueError):
        ForgeConfig(pert_mix=1.5)
