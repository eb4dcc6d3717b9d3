import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from koala import numerics as nx
from koala.errors import ConfigError, ContractViolation, NonFiniteError, RejectedInput
from koala.numerics import Tensor, grad_check, koat, precision
from koala.numerics.optim import OptimState, adamw_step, lr_at

# high-precision reference values (mpmath, 30 digits)
SIGMOID_1 = 0.731058578630004879251159241822
SIGMOID_M1 = 0.268941421369995120748840758178
ATTN_SCALAR = 2.53788284273999024149768151636
LN_UNIT = 0.999995000037499687502734350391


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def triple_loop_matmul(x, W, b):
    n, a = x.shape
    out = np.zeros((n, W.shape[1]))
    for i in range(n):
        for j in range(W.shape[1]):
            out[i, j] = math.fsum([x[i, k] * W[k, j] for k in range(a)] + [b[j]])
    return out


def test_affine_identity_and_hand_cases():
    out = nx.affine(T([[1, 2]]), T([[1, 0], [0, 1]]), T([0, 0]))
    assert out.data.tolist() == [[1, 2]]
    out = nx.affine(T([[1, 1]]), T([[2, 0], [0, 3]]), T([1, 1]))
    assert out.data.tolist() == [[3, 4]]


def test_affine_matches_triple_loop():
    rng = np.random.default_rng(3)
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    np.testing.assert_allclose(nx.affine(T(x), T(W), T(b)).data, triple_loop_matmul(x, W, b),
                               rtol=0, atol=1e-12)


def test_affine_rejects_mismatch():
    with pytest.raises(RejectedInput):
        nx.affine(T(np.ones((2, 3))), T(np.ones((4, 2))), T(np.zeros(2)))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(T([[0, 0, 0]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(nx.softmax_rows(T([[1, 0]])).data, [[SIGMOID_1, SIGMOID_M1]],
                               atol=1e-15)
    out = nx.softmax_rows(T([[1000, 1000]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-300, 300)))
def test_softmax_rows_are_distributions(x):
    out = nx.softmax_rows(T(x)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_cross_attention_scalar_case():
    out = nx.cross_attention(T([[1]]), T([[1], [0]]), T([[2], [4]]), heads=1)
    assert out.data[0, 0] == pytest.approx(ATTN_SCALAR, abs=1e-12)
    out = nx.cross_attention(T([[1]]), T([[1], [0]]), T([[2], [4]]), heads=1,
                             w_out=T([[1.0]]), b_out=T([0.0]))
    assert out.data[0, 0] == pytest.approx(ATTN_SCALAR, abs=1e-12)


def test_cross_attention_identical_keys_average_values():
    rng = np.random.default_rng(0)
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    v = rng.normal(size=(5, 4))
    out = nx.cross_attention(T(rng.normal(size=(3, 4))), T(k), T(v), heads=2)
    np.testing.assert_allclose(out.data, np.tile(v.mean(0), (3, 1)), atol=1e-12)


def test_cross_attention_head_divisibility():
    with pytest.raises(ConfigError):
        nx.cross_attention(T(np.ones((1, 3))), T(np.ones((2, 3))), T(np.ones((2, 3))), heads=2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cross_attention_permutation_properties(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    base = nx.cross_attention(T(q), T(k), T(v), heads=4).data
    p = rng.permutation(6)
    np.testing.assert_allclose(nx.cross_attention(T(q), T(k[p]), T(v[p]), heads=4).data, base,
                               atol=1e-12)
    r = rng.permutation(3)
    np.testing.assert_allclose(nx.cross_attention(T(q[r]), T(k), T(v), heads=4).data, base[r],
                               atol=1e-12)


def test_layer_norm_examples():
    one, zero = T(np.ones(3)), T(np.zeros(3))
    assert np.all(nx.layer_norm(T([[2, 2, 2]]), one, zero).data == 0)
    out = nx.layer_norm(T([[1, -1]]), T([1, 1]), T([0, 0])).data
    np.testing.assert_allclose(out, [[LN_UNIT, -LN_UNIT]], rtol=1e-14)
    out = nx.layer_norm(T([[3, -1, 7]]), zero, T([1, 2, 3])).data
    np.testing.assert_allclose(out, [[1, 2, 3]])


def test_grad_check_square():
    x = T(3.0, grad=True)
    rep = grad_check(lambda: x * x, {"x": x})
    assert rep.analytic == pytest.approx(6.0)
    assert rep.max_rel_err < 1e-9


def test_grad_check_attention_with_cross_entropy():
    rng = np.random.default_rng(1)
    params = {n: T(rng.normal(size=(2, 2)), grad=True) for n in ("q", "k", "v")}

    def f():
        out = nx.cross_attention(params["q"], params["k"], params["v"], heads=1)
        return nx.sum(nx.nll_rows(out, np.array([1, 0]), np.ones(2)))

    with precision("test"):
        assert grad_check(f, params).max_rel_err < 1e-6


@pytest.mark.parametrize("prim", ["softmax", "log_softmax", "layer_norm", "gelu", "tanh",
                                  "exp_log", "div", "concat_stack", "getitem", "take_rows",
                                  "matmul_batched", "attention_masked"])
def test_primitive_gradients(prim):
    rng = np.random.default_rng(7)
    a = T(rng.normal(size=(2, 3, 4)), grad=True)
    b = T(rng.normal(size=(4,)) + 3.0, grad=True)
    c = T(rng.normal(size=(4, 5)), grad=True)
    weights = rng.normal(size=(2, 3, 4))
    fns = {
        "softmax": lambda: nx.softmax_rows(a),
        "log_softmax": lambda: nx.log_softmax(a),
        "layer_norm": lambda: nx.layer_norm(a, b, c[:, 0]),
        "gelu": lambda: nx.gelu(a),
        "tanh": lambda: nx.tanh(a),
        "exp_log": lambda: nx.log(nx.exp(a) + b),
        "div": lambda: a / b,
        "concat_stack": lambda: nx.concat([a, nx.stack([b, b, b], 0)[None].reshape(1, 3, 4)], 0),
        "getitem": lambda: a[:, 1:, ::2] * 2.0,
        "take_rows": lambda: nx.take_rows(c, np.array([[0, 3, 3], [1, 2, 0]])),
        "matmul_batched": lambda: a @ c,
        "attention_masked": lambda: nx.attention(a, a, a, 2, mask=np.triu(np.full((3, 3), -1e9), 1)),
    }

    def f():
        out = fns[prim]()
        return nx.sum(out * Tensor(rng_weights(out.shape), dtype=np.float64))

    def rng_weights(shape):
        return np.random.default_rng(11).normal(size=shape)

    with precision("test"):
        rep = grad_check(f, {"a": a, "b": b, "c": c})
    assert rep.max_rel_err <= 1e-6, rep


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_grad_check_names_nonfinite_primitive():
    x = T(-1.0, grad=True)
    with pytest.raises(NonFiniteError) as err:
        grad_check(lambda: nx.log(x), {"x": x})
    assert err.value.primitive == "log"


def test_grad_check_rejects_32_bit():
    x = Tensor(np.float32(2.0), requires_grad=True, dtype=np.float32)
    with pytest.raises(RejectedInput):
        grad_check(lambda: x * x, {"x": x})


def test_backward_visits_shared_nodes_once():
    x = T(2.0, grad=True)
    y = x * x
    z = y + y + y
    z.backward()
    assert x.grad == pytest.approx(12.0)
    assert y.grad is None


def test_no_grad_builds_no_graph():
    x = T([1.0, 2.0], grad=True)
    with nx.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


# optimiser

def _store(frozen_value=1.0):
    s = nx.ParamStore()
    with precision("test"):
        s.add("lm.W", np.full((2, 2), frozen_value), frozen=True)
        s.add("koala.Q_segs", np.ones((2, 2)))
        s.add("koala.w", np.ones(1))
    return s


def test_warmup_step_zero_leaves_params():
    s = _store()
    st_ = OptimState(lr=1e-2, total_steps=100, warmup_frac=0.1)
    before = s.checksums()
    lr = adamw_step(st_, s, {"koala.Q_segs": np.ones((2, 2)), "koala.w": np.ones(1)})
    assert lr == 0.0
    assert s.checksums() == before


def test_schedule_peaks_at_warmup_end_and_decays_to_zero():
    st_ = OptimState(lr=1e-5, total_steps=1000, warmup_frac=0.1)
    assert lr_at(st_, 0) == 0.0
    assert lr_at(st_, 100) == pytest.approx(1e-5)
    assert lr_at(st_, 50) == pytest.approx(5e-6)
    assert lr_at(st_, 1000) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(st_, 999) < 1e-10


def test_adamw_matches_reference_update():
    s = _store()
    st_ = OptimState(lr=0.1, total_steps=10, warmup_frac=0.0, weight_decay=0.02)
    g = np.array([[0.5, -1.0], [2.0, 0.0]])
    adamw_step(st_, s, {"koala.Q_segs": g, "koala.w": np.array([3.0])})
    lr = 0.1 * 0.5 * (1 + math.cos(0))
    m, v = 0.1 * g, 0.001 * g * g
    expected = np.ones((2, 2)) * (1 - lr * 0.02) - lr * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(s["koala.Q_segs"].data, expected, rtol=1e-12)
    # w is excluded from weight decay
    assert s["koala.w"].data[0] == pytest.approx(1 - lr * 1.0, rel=1e-7)


def test_adamw_rejects_frozen_gradient():
    s = _store()
    with pytest.raises(ContractViolation):
        adamw_step(OptimState(lr=0.1, total_steps=10), s, {"lm.W": np.ones((2, 2))})


def test_frozen_checksums_survive_many_steps():
    s = _store()
    st_ = OptimState(lr=0.05, total_steps=50)
    frozen = s.checksums(s.frozen_names())
    rng = np.random.default_rng(0)
    for _ in range(50):
        adamw_step(st_, s, {"koala.Q_segs": rng.normal(size=(2, 2)), "koala.w": rng.normal(size=1)})
    assert s.checksums(s.frozen_names()) == frozen
    assert s.checksum("koala.Q_segs") != _store().checksum("koala.Q_segs")


# KOAT

def test_koat_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    raw = koat.encode(arr)
    assert raw[:4] == b"KOAT"
    assert struct.unpack_from("<III", raw, 4)[0:2] == (1, 2)
    assert struct.unpack_from("<QQ", raw, 12) == (2, 3)
    assert np.frombuffer(raw[28:], "<f4").tolist() == list(range(6))
    koat.save(tmp_path / "a.koat", arr)
    np.testing.assert_array_equal(koat.load(tmp_path / "a.koat"), arr)


def test_koat_rejects_bad_magic():
    with pytest.raises(RejectedInput):
        koat.decode(b"NOPE" + b"\0" * 12)


def test_paramstore_roundtrip_keeps_w_fixture(tmp_path):
    s = nx.ParamStore()
    s.add("koala.w", np.array([0.0203]))
    s.add("lm.tok", np.arange(4.0).reshape(2, 2), frozen=True)
    s.save(tmp_path / "ckpt")
    back = nx.ParamStore.load(tmp_path / "ckpt")
    assert back["koala.w"].data[0] == np.float32(0.0203)
    assert back.frozen_names() == ["lm.tok"] and back.learnable_names() == ["koala.w"]
