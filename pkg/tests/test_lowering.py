from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import dyadic_bruteforce, log_uniform_ratios
from intquant.lowering import (
    DyadicError,
    LoweringError,
    PlanOp,
    build_requant,
    dyadic_approx,
    empty_plan,
    lower_bn,
    lower_conv,
    lower_model,
    lower_skip,
    validate_plan,
)
from intquant.lowering import plan as plan_io
from intquant.quantcore import WtQuantizer, quantize_weight
from intquant.traingraph import checkpoint
from intquant.traingraph.engine import forward
from intquant.traingraph.graph import GraphBuilder, set_bits
from intquant.traingraph.train import init_quantized_from_fp
from intquant.traingraph.zoo import residual_block_net, two_conv_net


def _qat(factory=two_conv_net, bits=2, seed=1):
    g = factory(seed=seed)
    x = np.random.default_rng(0).uniform(size=(32, 1, 8, 8))
    return init_quantized_from_fp(g, bits, x)


# --- dyadic approximation -------------------------------------------------


@pytest.mark.parametrize(
    "m, n, d_max, want, err",
    [(1.0, 1.0, 16, (1, 0), 0.0), (1.5, 1.0, 8, (3, 1), 0.0), (1.3, 1.0, 3, (5, 2), 0.05)],
)
def test_dyadic_examples(m, n, d_max, want, err):
    dr, e = dyadic_approx(m, n, d_max)
    assert (dr.c, dr.d) == want
    assert e == pytest.approx(err, abs=1e-12)


def test_dyadic_rejects_bad_inputs():
    with pytest.raises(DyadicError):
        dyadic_approx(0.0, 1.0)
    with pytest.raises(DyadicError):
        dyadic_approx(1.0, 1.0, c_max=0)


def test_dyadic_matches_bruteforce_and_error_bound():
    ratios = log_uniform_ratios(300, seed=5)
    oracle = dyadic_bruteforce(ratios)
    for r, (c, d, err) in zip(ratios, oracle):
        dr, e = dyadic_approx(r, 1.0)
        assert (dr.c, dr.d) == (c, d)
        assert e == float(err)
        assert e <= 2.0 ** -(dr.d + 1)


def test_dyadic_bounded_numerator_matches_bruteforce():
    ratios = log_uniform_ratios(200, seed=6, lo=-4, hi=4)
    oracle = dyadic_bruteforce(ratios, d_max=10, c_max=50)
    for r, (c, d, _) in zip(ratios, oracle):
        dr, _ = dyadic_approx(r, 1.0, 10, c_max=50)
        assert (dr.c, dr.d) == (c, d)


@settings(max_examples=200, deadline=None)
@given(r=st.floats(2.0**-8, 2.0**8))
def test_fqn_never_beats_aqd(r):
    _, e_aqd = dyadic_approx(r, 1.0)
    fq, e_fqn = dyadic_approx(r, 1.0, mode="fqn")
    assert e_fqn >= e_aqd
    assert fq.c & (fq.c - 1) == 0  # a power of two, possibly shifted right


def test_fqn_exact_on_powers_of_two():
    for k in range(-8, 9):
        dr, e = dyadic_approx(2.0**k, 1.0, mode="fqn")
        assert e == 0 and dr.value == 2.0**k


# --- conv / BN / skip / requant lowering -----------------------------------


def test_lower_conv_mapped_weights_and_scale():
    w = np.array([1.0, -1.0]).reshape(2, 1, 1, 1)
    mapped, alpha = lower_conv(w, 1.0, 2, Fraction(1, 3))
    assert mapped.ravel().tolist() == [3, -3]
    assert alpha == Fraction(1, 9)


def test_lower_conv_zero_weights_and_overflow():
    mapped, _ = lower_conv(np.zeros((1, 1, 3, 3)), 1.0, 2, 1 / 3)
    # zero maps to the grid point nearest 0 on the symmetric grid
    eta, _ = quantize_weight(0.0, WtQuantizer(1.0, 2))
    assert np.all(mapped == 2 * eta - 3)
    with pytest.raises(LoweringError, match="overflow"):
        lower_conv(np.zeros((1, 4096, 9, 9)), 1.0, 8, 1.0, in_max=255)


def test_lower_conv_all_minimum_weights():
    w = -np.ones((2, 1, 3, 3))
    mapped, _ = lower_conv(w, 1.0, 2, 1.0)
    assert np.all(mapped == -3)


def test_lower_bn_examples():
    off, az, _ = lower_bn(0.5, [2.0], [0.4], [1.3], [4.0], eps=0.0)
    assert off.tolist() == [-2] and az[0] == Fraction(1, 2)
    off, az, _ = lower_bn(1.0, [1.0], [0.0], [-0.5], [1.0], eps=0.0)
    assert off.tolist() == [1]
    off, az, _ = lower_bn(0.25, [3.0], [0.0], [0.0], [9.0], eps=0.0)
    assert off.tolist() == [0] and az[0] == Fraction(1, 4)


def test_lower_bn_rejects_small_gamma():
    with pytest.raises(LoweringError, match="gamma"):
        lower_bn(1.0, [1e-6], [0.0], [0.0], [1.0], eps=1e-5)


@settings(max_examples=100, deadline=None)
@given(
    alpha=st.floats(1e-3, 2.0),
    gamma=st.floats(0.01, 5.0),
    beta=st.floats(-3, 3),
    mean=st.floats(-3, 3),
    var=st.floats(0.0, 4.0),
    eta=st.integers(-5000, 5000),
)
def test_lowered_bn_algebra(alpha, gamma, beta, mean, var, eta):
    eps = 1e-5
    _, az, s = lower_bn(alpha, [gamma], [beta], [mean], [var], eps)
    lhs = (eta + float(s[0])) * float(az[0])
    rhs = (eta * alpha - mean) / np.sqrt(var + eps) * gamma + beta
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9 * (abs(eta * alpha) + 1))


def _skip_apply(sk, e1, e2):
    c, d, side = int(sk["c"][0]), int(sk["d"][0]), int(sk["side"][0])
    scaled, plain = (e2, e1) if side == 2 else (e1, e2)
    bias = (1 << (d - 1)) if d else 0
    return plain + ((scaled * c + bias) >> d)


def test_lower_skip_examples():
    sk = lower_skip([1.0], [1.0])
    assert _skip_apply(sk, 3, 4) == 7 and sk["alpha"][0] == 1
    sk = lower_skip([1.0], [2.0])
    assert (sk["c"][0], sk["d"][0], sk["side"][0]) == (2, 0, 2)
    assert _skip_apply(sk, 2, 1) == 4 and sk["alpha"][0] == 1
    sk = lower_skip([2.0], [1.0])
    assert (sk["c"][0], sk["d"][0], sk["side"][0]) == (2, 0, 1)
    assert _skip_apply(sk, 1, 4) == 6 and sk["alpha"][0] == 1


@settings(max_examples=200, deadline=None)
@given(
    k=st.integers(0, 6),
    odd=st.sampled_from([1, 3, 5]),
    small=st.sampled_from([0.25, 0.5, 1.0, 0.375, 1.25]),
    swap=st.booleans(),
    e1=st.integers(-1000, 1000),
    e2=st.integers(-1000, 1000),
)
def test_skip_exact_for_integer_ratios(k, odd, small, swap, e1, e2):
    # with d > 0 the shift-round leaves up to half a step, see the bound test
    big = small * odd * 2.0**k
    a1, a2 = (big, small) if swap else (small, big)
    sk = lower_skip([a1], [a2], max1=1000, max2=1000)
    out = _skip_apply(sk, e1, e2)
    assert sk["errors"][0] == 0
    assert Fraction(out) * sk["alpha"][0] == Fraction(e1) * Fraction(a1) + Fraction(e2) * Fraction(a2)


@settings(max_examples=200, deadline=None)
@given(a1=st.floats(0.01, 4), a2=st.floats(0.01, 4), e1=st.integers(-500, 500), e2=st.integers(-500, 500))
def test_skip_error_bound(a1, a2, e1, e2):
    sk = lower_skip([a1], [a2], max1=500, max2=500)
    out = _skip_apply(sk, e1, e2)
    surv = float(sk["alpha"][0])
    scaled = e2 if sk["side"][0] == 2 else e1
    exact = e1 * a1 + e2 * a2
    # approximation error plus half an output step for the shift rounding
    bound = (abs(scaled) * sk["errors"][0] + 0.5) * surv
    assert abs(out * surv - exact) <= bound + 1e-9


def test_requant_examples():
    c, d, _ = build_requant([Fraction(1, 3)], 1.0, 2)
    assert (c[0], d[0]) == (1, 0)
    # (7 + 1) >> 1 = 4, clipped to 3
    t = 7 * 1 + (1 << 0)
    assert min(max(t >> 1, 0), 3) == 3


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_integer_conv_factorization_exhaustive(bits):
    m = 2**bits - 1
    nu_x, nu_w = 0.7, 1.3
    _, alpha = lower_conv(np.ones((1, 1, 1, 1)), nu_w, bits, Fraction(nu_x) / m)
    alpha_f = float(alpha)
    eps = np.finfo(np.float64).eps
    for ex in range(m + 1):
        for ew in range(m + 1):
            xbar = ex * Fraction(nu_x) / m
            wbar = (Fraction(2 * ew, m) - 1) * Fraction(nu_w)
            exact = xbar * wbar
            assert ex * (2 * ew - m) * alpha == exact
            got = ex * (2 * ew - m) * alpha_f
            assert abs(Fraction(got) - exact) <= eps * abs(exact)


# --- whole-model lowering and validation -----------------------------------


def test_single_block_lowers_to_three_ops():
    b = GraphBuilder((1, 4, 4), np.random.default_rng(0))
    x = b.input_quant(0)
    x = b.relu(b.bn(b.conv(x, "c", 2), "bn"))
    x = b.act_quant(x, "q")
    g = b.build([b.output(x)])
    set_bits(g, 2)
    kinds = lower_model(g).kinds()
    assert kinds[:3] == ["IntConv", "BnOffsetAdd", "Requant"]


def test_residual_net_has_one_skip_and_validates():
    p = lower_model(_qat(residual_block_net))
    assert p.kinds().count("DyadicSkipAdd") == 1
    rep = validate_plan(p)
    assert rep["valid"], rep["diagnostics"]
    assert rep["max_accumulator"] <= 2**31 - 1


def test_lowering_requires_qat_and_rejects_relu_into_output():
    with pytest.raises(LoweringError, match="qat"):
        lower_model(two_conv_net())
    b = GraphBuilder((1, 4, 4), np.random.default_rng(0))
    x = b.input_quant(0)
    x = b.relu(b.bn(b.conv(x, "c", 2), "bn"))
    g = b.build([b.output(x)])
    set_bits(g, 2)
    with pytest.raises(LoweringError, match="ReLU"):
        lower_model(g)


def test_validate_empty_plan():
    rep = validate_plan(empty_plan())
    assert rep["valid"] and rep["n_ops"] == 0


def test_validate_flags_real_valued_op():
    p = lower_model(_qat())
    ops = list(p.ops)
    bad = PlanOp("BnOffsetAdd", ops[1].inputs, ops[1].output, {"offset": np.array([0.5] * 4)}, "injected")
    ops[1] = bad
    rep = validate_plan(plan_io.IntegerPlan(ops, p.slots, p.outputs, p.meta))
    assert not rep["valid"]
    assert rep["diagnostics"][0]["op_index"] == 1
    assert "non-integer" in rep["diagnostics"][0]["message"]


def test_validate_flags_wrong_clip_and_overflow():
    p = lower_model(_qat())
    i = p.kinds().index("Requant")
    rep = validate_plan(plan_io.with_op(p, i, hi=7))
    assert not rep["valid"] and rep["diagnostics"][0]["op_index"] == i
    big = np.asarray(p.ops[i].attrs["c"]) * 0 + 2**40
    rep = validate_plan(plan_io.with_op(p, i, c=big))
    assert any("exceeds" in d["message"] for d in rep["diagnostics"])


def test_plan_file_round_trip_and_version(tmp_path):
    p = lower_model(_qat(residual_block_net))
    path = tmp_path / "m.plan"
    plan_io.save(p, path)
    q = plan_io.load(path)
    assert plan_io.to_bytes(q) == plan_io.to_bytes(p)
    data = path.read_bytes().replace(b"INTQ-PLAN 1 ", b"INTQ-PLAN 2 ", 1)
    with pytest.raises(checkpoint.FormatVersionError):
        plan_io.from_bytes(data)


def test_plan_is_immutable():
    p = lower_model(_qat())
    with pytest.raises(ValueError):
        p.ops[0].attrs["weight"][0, 0, 0, 0] = 1


def test_lowering_is_deterministic_and_records_provenance():
    g = _qat()
    a, b = lower_model(g), lower_model(g)
    assert plan_io.to_bytes(a) == plan_io.to_bytes(b)
    assert a.meta["source_hash"] == g.digest()


def test_mlbn_without_level_needs_explicit_level():
    b = GraphBuilder((1, 4, 4), np.random.default_rng(0))
    x = b.input_quant(0)
    x = b.relu(b.mlbn(b.conv(x, "c", 2), ["bn.l0", "bn.l1"]))
    x = b.act_quant(x, "q")
    g = b.build([b.output(b.maxpool(x, 4))], pyramid_levels=2)
    set_bits(g, 2)
    g.params["bn.l1.beta"][:] = 0.5
    with pytest.raises(LoweringError, match="level"):
        lower_model(g)
    p0, p1 = lower_model(g, level=0), lower_model(g, level=1)
    assert p0.ops[1].attrs["bn_key"] == "bn.l0" and p1.ops[1].attrs["bn_key"] == "bn.l1"
    assert not np.array_equal(p0.ops[1].attrs["offset"], p1.ops[1].attrs["offset"])
    # per-level BN changes constants only, never the op count
    assert p0.kinds() == p1.kinds()


def test_forward_unchanged_by_lowering():
    g = _qat()
    x = np.random.default_rng(3).uniform(size=(4, 1, 8, 8))
    before = forward(g, x)[1][0]
    lower_model(g)
    np.testing.assert_array_equal(before, forward(g, x)[1][0])
