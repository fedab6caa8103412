import math

import numpy as np
import pytest
import torch

from odemil.datagen import sample_polynomial_system, sample_tree_system
from odemil.exprtree import OdeSystem, compile_system, const, mul, unary, var
from odemil.infer import (
    BeamConfig,
    PredictConfig,
    beam_decode,
    instances_to_tensors,
    predict,
    prediction_row,
    rms_factor,
    rms_scale,
    scale_system,
    unscale_system,
)
from odemil.integrate import Trajectory, default_grid, solve
from odemil.model import ModelConfig, MultiInstanceSeq2Seq
from odemil.tokenizer import build_vocab

V = build_vocab()
T = default_grid()


def const_traj(*x0):
    return Trajectory(T, np.tile(np.asarray(x0, dtype=float), (len(T), 1)))


def test_rms_examples():
    (a, b), R = rms_scale([const_traj(3.0), const_traj(4.0)])
    assert math.isclose(R, math.sqrt(12.5))
    assert math.isclose(a.states[0, 0], 3 / math.sqrt(12.5)) and math.isclose(b.states[0, 0], 4 / math.sqrt(12.5))
    assert math.isclose(a.states[0, 0], 0.84853, abs_tol=1e-5)
    assert math.isclose(b.states[0, 0], 1.13137, abs_tol=1e-5)
    (one,), R1 = rms_scale([const_traj(1.0)])
    assert R1 == 1.0 and np.array_equal(one.states, const_traj(1.0).states)
    assert rms_factor([const_traj(20.0), const_traj(-20.0)]) == 20.0
    assert rms_factor([const_traj(0.0, 0.0)]) == 1.0
    assert math.isclose(rms_factor([const_traj(3.0), const_traj(4.0)], "inverse-rms"), 1 / math.sqrt(12.5))
    with pytest.raises(ValueError):
        rms_factor([const_traj(1.0)], "max")


def test_rms_is_joint_over_dimensions():
    R = rms_factor([const_traj(1.0, 2.0), const_traj(3.0, 4.0)])
    assert math.isclose(R, math.sqrt((1 + 4 + 9 + 16) / 4))


def test_rms_round_trip_one_rounding():
    rng = np.random.default_rng(0)
    tr = Trajectory(T, rng.standard_normal((100, 3)) * 50)
    (s,), R = rms_scale([tr])
    back = s.states * R
    assert np.all(np.abs(back - tr.states) <= 2 * np.spacing(np.abs(tr.states)))


def test_unscale_examples():
    sq = OdeSystem((unary("square", var(0)),))
    got = compile_system(unscale_system(sq, 2.0))
    for x in (-3.0, 0.5, 7.0):
        assert math.isclose(got(np.array([x]))[0], x * x / 2)
    lin = OdeSystem((mul(const(-1.0), var(0)),))
    for R in (0.1, 3.0, 1e3):
        f = compile_system(unscale_system(lin, R))
        assert math.isclose(f(np.array([2.5]))[0], -2.5)
    assert unscale_system(sq, 1.0) is sq
    with pytest.raises(ValueError):
        unscale_system(sq, -1.0)


@pytest.mark.parametrize("gen", [sample_polynomial_system, sample_tree_system])
def test_unscale_chain_rule_and_inverse(gen):
    rng = np.random.default_rng(11)
    for _ in range(30):
        dim = int(rng.integers(1, 5))
        s = gen(dim, rng)
        R = float(np.exp(rng.uniform(-2, 2)))
        f, g = compile_system(s), compile_system(unscale_system(s, R))
        h = compile_system(unscale_system(scale_system(s, R), R))
        for x in rng.standard_normal((5, dim)):
            want = R * f(x / R)
            if not np.all(np.isfinite(want)):
                continue
            # norm-wise: a single component can cancel to far below its terms
            assert np.linalg.norm(g(x) - want) <= 1e-12 * np.linalg.norm(want)
            assert np.linalg.norm(h(x) - f(x)) <= 1e-12 * max(np.linalg.norm(f(x)), 1e-300)


def test_unscale_matches_trajectories():
    # x' = -x^2 with x(1)=2 scaled by R: the unscaled system reproduces the raw solution
    s = OdeSystem((mul(const(-1.0), unary("square", var(0))),))
    raw = solve(s, [2.0], T)
    R = 2.0
    scaled = solve(scale_system(s, R), [1.0], T)
    np.testing.assert_allclose(scaled.states * R, raw.states, rtol=1e-5)


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    return MultiInstanceSeq2Seq(ModelConfig.toy(aggregator="mean")).eval()


def _mem(model, instances):
    ids, mask, counts = instances_to_tensors([instances], 4)
    return model.memory(model.system_latent(ids, mask, counts))


@pytest.fixture(scope="module")
def inst():
    s = OdeSystem((mul(const(-0.5), var(0)),))
    return [solve(s, [x], T) for x in (1.0, -2.0, 0.5)]


def test_beam_config_invariants():
    with pytest.raises(ValueError):
        BeamConfig(beam_size=0)
    with pytest.raises(ValueError):
        BeamConfig(temperature=0.0)


def test_beam_one_is_greedy(toy, inst):
    mem = _mem(toy, inst)
    (c,) = beam_decode(toy, mem, BeamConfig(beam_size=1, max_len=12))
    seq = [V.bos]
    with torch.no_grad():
        while len(seq) < 12:
            tok = int(toy.decode_logits(mem, torch.tensor([seq]))[0, -1].argmax())
            seq.append(tok)
            if tok == V.eos:
                break
    assert c.ids == seq
    assert c.complete == (seq[-1] == V.eos)


def test_beam_scores_sorted_and_flags(toy, inst):
    mem = _mem(toy, inst)
    cands = beam_decode(toy, mem, BeamConfig(beam_size=5, max_len=8))
    assert 1 <= len(cands) <= 5
    scores = [c.score for c in cands]
    assert scores == sorted(scores, reverse=True)
    for c in cands:
        assert c.ids[0] == V.bos
        assert c.complete == (c.ids[-1] == V.eos)
        assert V.eos not in c.ids[:-1]


def test_beam_without_eos_returns_incomplete(toy, inst):
    mem = _mem(toy, inst)
    with torch.no_grad():
        toy.out.bias[V.eos] -= 1e4
    try:
        cands = beam_decode(toy, mem, BeamConfig(beam_size=3, max_len=6))
    finally:
        with torch.no_grad():
            toy.out.bias[V.eos] += 1e4
    assert cands and all(not c.complete and len(c.ids) == 6 for c in cands)


def test_beam_deterministic_and_sampling_seeded(toy, inst):
    mem = _mem(toy, inst)
    cfg = BeamConfig(beam_size=4, max_len=8)
    assert [c.ids for c in beam_decode(toy, mem, cfg)] == [c.ids for c in beam_decode(toy, mem, cfg)]
    s = BeamConfig(beam_size=4, max_len=8, sample=True, temperature=5.0, seed=3)
    assert [c.ids for c in beam_decode(toy, mem, s)] == [c.ids for c in beam_decode(toy, mem, s)]


def test_predict_permutation_invariant_with_mean(toy, inst):
    cfg = PredictConfig(BeamConfig(beam_size=3, max_len=16))
    a = predict(inst, toy, cfg)
    b = predict(inst[::-1], toy, cfg)
    assert [c.ids for c in a.candidates] == [c.ids for c in b.candidates]
    assert a.R == b.R


def test_predict_rescale_flag(toy, inst):
    on = predict(inst, toy, PredictConfig(BeamConfig(beam_size=2, max_len=8)))
    off = predict(inst, toy, PredictConfig(BeamConfig(beam_size=2, max_len=8), rescale=False))
    assert on.R != 1.0 and off.R == 1.0
    assert [c.logprob for c in on.candidates] != [c.logprob for c in off.candidates]


def test_predict_unparseable_is_failure(toy, inst):
    with torch.no_grad():
        toy.out.bias[V.eos] -= 1e4
    try:
        pred = predict(inst, toy, PredictConfig(BeamConfig(beam_size=2, max_len=5)))
    finally:
        with torch.no_grad():
            toy.out.bias[V.eos] += 1e4
    assert not pred.ok and pred.chosen is None and pred.parse_failures == len(pred.candidates)
    row = prediction_row(7, pred, method="m", sigma=0.0, n_instances=3)
    assert row["prefix"] is None and row["id"] == 7


def test_prediction_row_fields():
    s = OdeSystem((mul(const(-0.5), var(0)),))
    row = prediction_row(1, None, method="truth", sigma=0.05, n_instances=2, system=s)
    assert set(row) == {"id", "method", "sigma", "n_instances", "prefix", "infix", "R",
                        "beam_scores", "parse_failures"}
    assert row["prefix"].split()[0] == "mul"
