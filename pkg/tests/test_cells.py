import json
import math

import numpy as np
import pytest
from helpers import fd_grad, max_rel_err

import fusion_eta.autodiff as ad
from fusion_eta import cells
from fusion_eta.errors import ValidationError
from fusion_eta.linalg import OpCounter, make_rng


def scalar_fusion_params(r):
    one = lambda: ad.parameter(np.array([[1.0]]))  # noqa: E731
    return cells.FusionCellParams(Fx=one(), Fh=one(), Wx=one(), Wh=one(),
                                  b=ad.parameter(np.zeros((1, 1))), r=r)


def random_params(variant, m, n, r, seed):
    return cells.init_params(variant, m, n, r, make_rng(seed))


# ---------------------------------------------------------------------------
# fusion module


def test_fusion_r0_returns_inputs_unchanged():
    p = random_params("fusion", 3, 4, 0, seed=1)
    x = ad.constant(np.arange(3.0).reshape(3, 1))
    h = ad.constant(np.arange(4.0).reshape(4, 1))
    fused = cells.fusion_module(x, h, p)
    assert fused.x_fused is x and fused.h_fused is h


def test_fusion_r1_zero_hidden_annihilates_input():
    p = random_params("fusion", 3, 4, 1, seed=2)
    x = ad.constant(np.ones((3, 1)))
    h = ad.constant(np.zeros((4, 1)))
    fused = cells.fusion_module(x, h, p)
    assert np.array_equal(fused.x_fused.data, np.zeros((3, 1)))
    assert fused.h_fused is h


def test_fusion_r2_scalar_oracle():
    # independent scalar route: x1 = tanh(1)*1, h2 = tanh(x1)*1
    x1 = math.tanh(1.0)
    h2 = math.tanh(x1)
    fused = cells.fusion_module(ad.constant([[1.0]]), ad.constant([[1.0]]),
                                scalar_fusion_params(2))
    assert abs(fused.x_fused.data[0, 0] - x1) < 1e-12
    assert abs(fused.h_fused.data[0, 0] - h2) < 1e-12
    assert abs(fused.x_fused.data[0, 0] - 0.761594) < 1e-4
    assert abs(fused.h_fused.data[0, 0] - 0.642015) < 1e-4


@pytest.mark.parametrize("r", range(7))
def test_fusion_preserves_shapes(r):
    p = random_params("fusion", 5, 3, r, seed=10 + r)
    x = ad.constant(make_rng(20 + r).normal(size=(5, 2)))
    h = ad.constant(make_rng(30 + r).normal(size=(3, 2)))
    fused = cells.fusion_module(x, h, p)
    assert fused.x_fused.shape == (5, 2)
    assert fused.h_fused.shape == (3, 2)


def test_fusion_alternation_matches_scalar_replay():
    # replay the alternating recurrence with plain floats for r = 1..6
    rng = make_rng(77)
    fx, fh, x0, h0 = rng.uniform(-1.5, 1.5, size=4)
    for r in range(1, 7):
        p = cells.FusionCellParams(
            Fx=ad.parameter([[fx]]), Fh=ad.parameter([[fh]]),
            Wx=ad.parameter([[1.0]]), Wh=ad.parameter([[1.0]]),
            b=ad.parameter([[0.0]]), r=r)
        xs, hs = x0, h0
        for i in range(1, r + 1):
            if i % 2 == 1:
                xs = math.tanh(fx * hs) * xs
            else:
                hs = math.tanh(fh * xs) * hs
        fused = cells.fusion_module(ad.constant([[x0]]), ad.constant([[h0]]), p)
        assert abs(fused.x_fused.data[0, 0] - xs) < 1e-12
        assert abs(fused.h_fused.data[0, 0] - hs) < 1e-12


def test_fusion_round_limit_enforced():
    with pytest.raises(ValidationError):
        scalar_fusion_params(17)
    with pytest.raises(ValidationError):
        scalar_fusion_params(-1)


# ---------------------------------------------------------------------------
# transport / full steps


def test_transport_zero_params_gives_zero():
    p = cells.ElmanCellParams(Wx=ad.parameter(np.zeros((2, 3))),
                              Wh=ad.parameter(np.zeros((2, 2))),
                              b=ad.parameter(np.zeros((2, 1))))
    out = cells.transport_module(ad.constant(np.ones((3, 1))), ad.constant(np.ones((2, 1))), p)
    assert np.array_equal(out.data, np.zeros((2, 1)))


def test_transport_scalar_oracle():
    p = cells.ElmanCellParams(Wx=ad.parameter([[1.0]]), Wh=ad.parameter([[1.0]]),
                              b=ad.parameter([[0.0]]))
    out = cells.transport_module(ad.constant([[0.5]]), ad.constant([[0.5]]), p)
    assert abs(out.data[0, 0] - math.tanh(1.0)) < 1e-12


def test_transport_output_in_open_unit_interval():
    rng = make_rng(55)
    p = random_params("elman", 4, 3, 0, seed=8)
    out = cells.transport_module(ad.constant(rng.normal(size=(4, 6)) * 2),
                                 ad.constant(rng.normal(size=(3, 6)) * 2), p)
    assert np.all(np.abs(out.data) < 1.0)
    # float64 tanh saturates to exactly +/-1 for huge pre-activations
    sat = cells.transport_module(ad.constant(rng.normal(size=(4, 6)) * 1e4),
                                 ad.constant(rng.normal(size=(3, 6)) * 1e4), p)
    assert np.all(np.abs(sat.data) <= 1.0)


def test_fusion_step_r1_zero_hidden_gives_tanh_bias():
    p = random_params("fusion", 3, 4, 1, seed=3)
    p.b.data[:] = make_rng(4).normal(size=(4, 1))
    out = cells.fusion_cell_step(ad.constant(np.ones((3, 1))), ad.constant(np.zeros((4, 1))), p)
    assert np.allclose(out.data, np.tanh(p.b.data), atol=1e-15)


def test_fusion_step_r2_scalar_oracle():
    expect = math.tanh(math.tanh(1.0) + math.tanh(math.tanh(1.0)))
    out = cells.fusion_cell_step(ad.constant([[1.0]]), ad.constant([[1.0]]),
                                 scalar_fusion_params(2))
    assert abs(out.data[0, 0] - expect) < 1e-12
    assert abs(out.data[0, 0] - 0.88586) < 1e-3


def test_fusion_r0_is_elman_bit_identical():
    fus = random_params("fusion", 6, 5, 0, seed=9)
    elm = cells.ElmanCellParams(Wx=fus.Wx, Wh=fus.Wh, b=fus.b)
    rng = make_rng(10)
    for _ in range(100):
        x = ad.constant(rng.normal(size=(6, 1)))
        h = ad.constant(rng.normal(size=(5, 1)))
        a = cells.fusion_cell_step(x, h, fus).data
        b = cells.elman_cell_step(x, h, elm).data
        assert np.array_equal(a, b)


def test_gru_zero_params_halves_hidden():
    p = cells.GruCellParams(**{k: ad.parameter(np.zeros(s)) for k, s in {
        "Wr": (3, 2), "Ur": (3, 3), "br": (3, 1),
        "Wz": (3, 2), "Uz": (3, 3), "bz": (3, 1),
        "Wg": (3, 2), "Ug": (3, 3), "bg": (3, 1)}.items()})
    h = ad.constant(np.array([[2.0], [-4.0], [6.0]]))
    out = cells.gru_cell_step(ad.constant(np.ones((2, 1))), h, p)
    assert np.allclose(out.data, 0.5 * h.data, atol=1e-15)


def test_gru_matches_scalar_replay():
    def sigma(v):
        return 1.0 / (1.0 + math.exp(-v))

    rng = make_rng(66)
    w = {k: rng.uniform(-1, 1) for k in ["Wr", "Ur", "br", "Wz", "Uz", "bz", "Wg", "Ug", "bg"]}
    p = cells.GruCellParams(**{k: ad.parameter([[v]]) for k, v in w.items()})
    x, h = 0.7, -0.3
    r = sigma(w["Wr"] * x + w["Ur"] * h + w["br"])
    z = sigma(w["Wz"] * x + w["Uz"] * h + w["bz"])
    g = math.tanh(w["Wg"] * x + w["Ug"] * (r * h) + w["bg"])
    expect = z * h + (1 - z) * g
    out = cells.gru_cell_step(ad.constant([[x]]), ad.constant([[h]]), p)
    assert abs(out.data[0, 0] - expect) < 1e-12


def test_lstm_zero_params_zero_cell_gives_zero():
    names = ["Wi", "Ui", "bi", "Wf", "Uf", "bf", "Wo", "Uo", "bo", "Wg", "Ug", "bg"]
    shapes = {n: (2, 2) if n[0] in "WU" else (2, 1) for n in names}
    p = cells.LstmCellParams(**{n: ad.parameter(np.zeros(shapes[n])) for n in names})
    h, c = cells.lstm_cell_step(ad.constant(np.ones((2, 1))), ad.constant(np.ones((2, 1))),
                                ad.constant(np.zeros((2, 1))), p)
    assert np.array_equal(h.data, np.zeros((2, 1)))
    assert np.array_equal(c.data, np.zeros((2, 1)))


def test_lstm_matches_scalar_replay():
    def sigma(v):
        return 1.0 / (1.0 + math.exp(-v))

    rng = make_rng(67)
    names = ["Wi", "Ui", "bi", "Wf", "Uf", "bf", "Wo", "Uo", "bo", "Wg", "Ug", "bg"]
    w = {k: rng.uniform(-1, 1) for k in names}
    p = cells.LstmCellParams(**{k: ad.parameter([[v]]) for k, v in w.items()})
    x, h, c = 0.4, -0.8, 0.25
    i = sigma(w["Wi"] * x + w["Ui"] * h + w["bi"])
    f = sigma(w["Wf"] * x + w["Uf"] * h + w["bf"])
    o = sigma(w["Wo"] * x + w["Uo"] * h + w["bo"])
    g = math.tanh(w["Wg"] * x + w["Ug"] * h + w["bg"])
    c_new = f * c + i * g
    h_new = o * math.tanh(c_new)
    hh, cc = cells.lstm_cell_step(ad.constant([[x]]), ad.constant([[h]]), ad.constant([[c]]), p)
    assert abs(cc.data[0, 0] - c_new) < 1e-12
    assert abs(hh.data[0, 0] - h_new) < 1e-12


def test_elman_zero_params_zero_output():
    p = cells.ElmanCellParams(Wx=ad.parameter(np.zeros((3, 2))),
                              Wh=ad.parameter(np.zeros((3, 3))),
                              b=ad.parameter(np.zeros((3, 1))))
    out = cells.elman_cell_step(ad.constant(np.ones((2, 1))), ad.constant(np.ones((3, 1))), p)
    assert np.array_equal(out.data, np.zeros((3, 1)))


# ---------------------------------------------------------------------------
# counts


def test_param_count_table_examples():
    assert cells.param_count("fusion", 16, 32) == 2592
    assert cells.param_count("lstm", 128, 128) == 131584
    assert cells.param_count("fusion", 128, 128) == 65664


def test_mult_count_table_examples():
    assert cells.mult_count("fusion", 4, 4, r=3) == 92
    assert cells.mult_count("lstm", 4, 4) == 140
    assert cells.mult_count("fusion", 2, 3, r=1) == 23
    assert cells.mult_count("gru", 4, 4) == 6 * 16 + 12
    assert cells.mult_count("elman", 3, 5) == 25 + 15
    assert cells.mult_count("lstm", 4, 4, seq_len=7) == 7 * 140


def test_count_matches_enumeration():
    rng = make_rng(100)
    for _ in range(20):
        m = int(rng.integers(1, 12))
        n = int(rng.integers(1, 12))
        r = int(rng.integers(0, 7))
        for variant in cells.VARIANTS:
            p = cells.init_params(variant, m, n, r, rng)
            assert cells.param_count(variant, m, n, r) == cells.count_scalar_params(p)


def test_count_matches_instrumentation():
    rng = make_rng(101)
    for _ in range(20):
        m = int(rng.integers(1, 10))
        n = int(rng.integers(1, 10))
        for variant in cells.VARIANTS:
            rs = range(6) if variant == "fusion" else [0]
            for r in rs:
                p = cells.init_params(variant, m, n, r, rng)
                assert cells.measure_step_mults(p) == cells.mult_count(variant, m, n, r)


def test_instrumented_count_scales_with_batch():
    p = random_params("fusion", 5, 7, 3, seed=11)
    single = cells.measure_step_mults(p, batch=1)
    assert cells.measure_step_mults(p, batch=6) == 6 * single


def test_param_ordering_at_square_sizes():
    for n in range(1, 257):
        fus = cells.param_count("fusion", n, n)
        gru = cells.param_count("gru", n, n)
        lstm = cells.param_count("lstm", n, n)
        assert fus < gru < lstm


def test_fusion_square_mult_reduction():
    # at m = n the per-step count collapses to (r+2)n^2 + rn
    for n in (1, 3, 17, 64):
        for r in range(6):
            assert cells.mult_count("fusion", n, n, r) == (r + 2) * n * n + r * n


# ---------------------------------------------------------------------------
# gradients through time


def unroll_loss(variant, params, xs, weights, state0):
    # starts from a random state: a zero start would silence the fusion
    # rounds (tanh(0) zeroes both factors) and make the check vacuous
    state = tuple(ad.constant(s) for s in state0)
    for x in xs:
        state = cells.cell_step(params, ad.constant(x), state)
    return ad.tsum(ad.mul(state[0], ad.constant(weights)))


@pytest.mark.parametrize("variant,r", [("fusion", 0), ("fusion", 1), ("fusion", 2),
                                       ("fusion", 3), ("elman", 0), ("gru", 0), ("lstm", 0)])
def test_bptt_matches_finite_differences(variant, r):
    n = m = 6
    rng = make_rng(200 + r + len(variant))
    params = cells.init_params(variant, m, n, r, rng)
    xs = [rng.uniform(-1, 1, size=(m, 1)) for _ in range(5)]
    weights = rng.uniform(-1, 1, size=(n, 1))
    n_state = 2 if variant == "lstm" else 1
    state0 = [rng.uniform(-1, 1, size=(n, 1)) for _ in range(n_state)]
    named = params.named()
    for t in named.values():
        t.zero_grad()
    unroll_loss(variant, params, xs, weights, state0).backward()
    grad_peak = max(float(np.abs(t.grad).max()) if t.grad is not None else 0.0
                    for t in named.values())
    assert grad_peak > 1e-8, "gradients should carry real signal, not a dead graph"
    for name, tensor in named.items():
        numeric = fd_grad(lambda: unroll_loss(variant, params, xs, weights, state0).data[0, 0],
                          tensor.data)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        err = max_rel_err(analytic, numeric)
        assert err < 1e-5, f"{variant} r={r} tensor {name}: rel err {err:.2e}"


@pytest.mark.parametrize("r", [1, 2, 3])
def test_zero_bias_and_zero_state_freeze_fusion_output(r):
    # with a zero bias and a zero previous state, every fusion round
    # multiplies by tanh(0) and the step output is exactly zero no matter
    # what the input is; callers that start from a zero state must seed a
    # nonzero bias to get any signal through
    rng = make_rng(77)
    params = cells.init_params("fusion", 4, 4, r, rng)
    state = cells.initial_state(params, batch=1)
    for _ in range(3):
        x = ad.constant(rng.uniform(-1, 1, size=(4, 1)))
        state = cells.cell_step(params, x, state)
        assert np.array_equal(state[0].data, np.zeros((4, 1)))


# ---------------------------------------------------------------------------
# init & serialization


def test_init_is_seed_deterministic():
    a = random_params("gru", 5, 4, 0, seed=42)
    b = random_params("gru", 5, 4, 0, seed=42)
    for (ka, ta), (kb, tb) in zip(a.named().items(), b.named().items()):
        assert ka == kb and np.array_equal(ta.data, tb.data)


def test_init_biases_zero_and_weights_bounded():
    p = random_params("lstm", 7, 5, 0, seed=43)
    for name, t in p.named().items():
        if name.startswith("b"):
            assert np.array_equal(t.data, np.zeros_like(t.data))
        else:
            rows, colz = t.data.shape
            limit = math.sqrt(6.0 / (rows + colz))
            assert np.all(np.abs(t.data) <= limit)


def test_init_large_matrix_mean_near_zero():
    p = random_params("fusion", 128, 128, 2, seed=44)
    assert -0.02 < p.Wh.data.mean() < 0.02


def test_init_requires_rng():
    with pytest.raises(ValidationError):
        cells.init_params("fusion", 3, 3, 1, None)


def test_count_validation_errors():
    with pytest.raises(ValidationError):
        cells.param_count("vanilla", 2, 2)
    with pytest.raises(ValidationError):
        cells.param_count("gru", 0, 4)
    with pytest.raises(ValidationError):
        cells.mult_count("fusion", 2, 2, r=-1)
    with pytest.raises(ValidationError):
        cells.mult_count("gru", 2, 2, seq_len=0)


def test_serialization_round_trip_is_lossless(tmp_path):
    for variant, r in [("fusion", 3), ("elman", 0), ("gru", 0), ("lstm", 0)]:
        p = random_params(variant, 4, 3, r, seed=50)
        path = tmp_path / f"{variant}.json"
        cells.save_params(p, str(path))
        q = cells.load_params(str(path))
        assert cells.variant_of(q) == variant
        for (ka, ta), (kb, tb) in zip(p.named().items(), q.named().items()):
            assert ka == kb
            assert np.array_equal(ta.data, tb.data)
        if variant == "fusion":
            assert q.r == 3
        assert q.named()[next(iter(q.named()))].requires_grad


def test_deserialization_rejects_unknown_variant(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"variant": "peephole", "matrices": {}}))
    with pytest.raises(ValidationError):
        cells.load_params(str(path))
