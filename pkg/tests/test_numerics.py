import json
import math

import numpy as np
import pytest

from oracles import fd_check
from simulstream import numerics as nx
from simulstream.numerics import (
    CheckpointError,
    Module,
    OptimizerState,
    Parameter,
    ShapeError,
    Tensor,
    adam_step,
    inverse_sqrt_lr,
    load_checkpoint,
    save_checkpoint,
)

TRIALS = 100


def _shape(rng, max_elems=32, ndim=None):
    ndim = ndim or int(rng.integers(1, 4))
    while True:
        s = tuple(int(v) for v in rng.integers(1, 5, size=ndim))
        if np.prod(s) <= max_elems:
            return s


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.5 * np.sign(x) + 0.05, x)


def _case(name, rng):
    """(fn, inputs) for one random trial of op ``name``."""
    if name in ("add", "sub", "mul"):
        s = _shape(rng)
        k = int(rng.integers(0, len(s) + 1))
        b = s[k:] or s  # leading-batch broadcast when k > 0
        op = getattr(nx, name)
        return op, [rng.standard_normal(s), rng.standard_normal(b)]
    if name == "scale":
        c = float(rng.standard_normal())
        return (lambda x: nx.scale(x, c)), [rng.standard_normal(_shape(rng))]
    if name in ("exp", "sigmoid", "tanh", "silu"):
        return getattr(nx, name), [rng.standard_normal(_shape(rng))]
    if name == "log":
        return nx.log, [rng.uniform(0.2, 3.0, _shape(rng))]
    if name == "relu":
        return nx.relu, [_away_from_zero(rng, _shape(rng))]
    if name == "glu":
        s = list(_shape(rng, 16))
        s[-1] *= 2
        return nx.glu, [rng.standard_normal(s)]
    if name == "masked_fill":
        s = _shape(rng)
        m = rng.random(s) < 0.4
        return (lambda x: nx.masked_fill(x, m, -3.0)), [rng.standard_normal(s)]
    if name == "matmul":
        lead = tuple(int(v) for v in rng.integers(1, 3, size=int(rng.integers(0, 2))))
        n, k, m = (int(v) for v in rng.integers(1, 4, size=3))
        return nx.matmul, [rng.standard_normal(lead + (n, k)), rng.standard_normal(lead + (k, m))]
    if name == "linear":
        n, i, o = (int(v) for v in rng.integers(1, 5, size=3))
        return nx.linear, [rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)]
    if name == "reshape":
        return (lambda x: nx.reshape(x, (-1,))), [rng.standard_normal(_shape(rng))]
    if name == "transpose":
        s = _shape(rng, ndim=3)
        return (lambda x: nx.transpose(x, (2, 0, 1))), [rng.standard_normal(s)]
    if name == "index":
        s = _shape(rng, ndim=2)
        return (lambda x: nx.index(x, (slice(None), slice(0, 1)))), [rng.standard_normal(s)]
    if name == "concat":
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((1, 3))
        return (lambda x, y: nx.concat([x, y], axis=0)), [a, b]
    if name == "take":
        s = _shape(rng, ndim=2)
        ids = rng.integers(0, s[0], size=5)  # repeated ids exercise accumulation
        return (lambda x: nx.take(x, ids, axis=0)), [rng.standard_normal(s)]
    if name == "tsum":
        s = _shape(rng, ndim=2)
        return (lambda x: nx.tsum(x, axis=-1)), [rng.standard_normal(s)]
    if name == "mean":
        return (lambda x: nx.mean(x, axis=0)), [rng.standard_normal(_shape(rng, ndim=2))]
    if name == "softmax":
        s = _shape(rng, ndim=2)
        m = rng.random(s) < 0.7
        m[..., 0] = True
        return (lambda x: nx.softmax(x, m)), [rng.standard_normal(s)]
    if name == "log_softmax":
        return nx.log_softmax, [rng.standard_normal(_shape(rng, ndim=2))]
    if name == "layer_norm":
        s = _shape(rng, ndim=2)
        s = (s[0], max(s[1], 3))  # width 2 normalizes to +-1, leaving only eps-sized gradients
        return nx.layer_norm, [rng.standard_normal(s), rng.standard_normal(s[-1]), rng.standard_normal(s[-1])]
    if name == "depthwise_conv1d":
        B, T, D, K = 1 + int(rng.integers(0, 2)), int(rng.integers(1, 5)), 2, 3
        mask = (rng.random((T, K)) < 0.7).astype(float)
        return ((lambda x, w, b: nx.depthwise_conv1d(x, w, b, mask)),
                [rng.standard_normal((B, T, D)), rng.standard_normal((K, D)), rng.standard_normal(D)])
    if name == "embedding":
        ids = rng.integers(0, 4, size=6)
        return (lambda t: nx.embedding(t, ids)), [rng.standard_normal((4, 3))]
    if name == "cross_entropy":
        n, v = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        tg = rng.integers(0, v, size=n)
        w = rng.random(n)
        return (lambda z: nx.cross_entropy(z, tg, w)), [rng.standard_normal((n, v))]
    raise KeyError(name)


OPS = ["add", "sub", "mul", "scale", "exp", "log", "relu", "sigmoid", "tanh", "silu", "glu", "masked_fill",
       "matmul", "linear", "reshape", "transpose", "index", "concat", "take", "tsum", "mean", "softmax",
       "log_softmax", "layer_norm", "depthwise_conv1d", "embedding", "cross_entropy"]


@pytest.mark.parametrize("name", OPS)
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(OPS.index(name))
    worst = 0.0
    for _ in range(TRIALS):
        fn, inputs = _case(name, rng)
        worst = max(worst, fd_check(fn, inputs, rng))
    assert worst <= 1e-5, f"{name}: relative error {worst:.2e}"


def test_composite_gradient():
    rng = np.random.default_rng(1)

    def f(x, w):
        h = nx.tanh(nx.matmul(x, w))
        return nx.layer_norm(h, Tensor(np.ones(3)), Tensor(np.zeros(3)))

    for _ in range(TRIALS):
        assert fd_check(f, [rng.standard_normal((2, 4)), rng.standard_normal((4, 3))], rng) <= 1e-5


def test_identity_matmul():
    m = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_uniform_softmax():
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one_and_lie_in_open_interval():
    rng = np.random.default_rng(2)
    for _ in range(200):
        x = rng.standard_normal(_shape(rng, ndim=2)) * 5
        y = nx.softmax(Tensor(x)).data
        assert np.all(np.abs(y.sum(-1) - 1) <= 1e-12)
        assert np.all((y > 0) & (y < 1)) or y.shape[-1] == 1


def test_masked_positions_get_exactly_zero_weight():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.standard_normal((4, 6)) * 10
        m = rng.random((4, 6)) < 0.5
        m[:, 2] = True
        y = nx.softmax(Tensor(x), m).data
        assert np.all(y[~m] == 0.0)


def test_layer_norm_of_constant_is_zero_before_affine():
    y = nx.layer_norm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    assert np.all(y == 0.0)


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.tsum(nx.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.tsum(nx.mul(x, x)).backward()
    nx.tsum(nx.mul(x, x)).backward()
    assert x.grad.tolist() == [4.0, 8.0]


def test_constant_loss_gives_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = nx.add(nx.scale(nx.tsum(x), 0.0), Tensor(5.0))
    loss.backward()
    assert np.all(x.grad == 0.0)


def test_non_scalar_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        nx.mul(x, x).backward()


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_no_grad_detaches():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, x)
    assert not y.requires_grad


# ------------------------------------------------------------------ Adam


def test_adam_three_steps_match_hand_recurrence():
    g, lr, b1, b2, eps = 0.5, 1e-2, 0.9, 0.98, 1e-9
    p = Parameter(np.array(1.0), name="w")
    st = OptimizerState(lr=lr, warmup=0, betas=(b1, b2), eps=eps)
    # closed form for a constant gradient: m_hat = g, v_hat = g^2, so each step moves lr*g/(|g|+eps)
    # scaled by the schedule lr*sqrt(1/s) after warmup 0 (treated as 1)
    expected = 1.0
    for s in range(1, 4):
        p.grad = np.array(g)
        adam_step(st, [p])
        lr_s = lr * math.sqrt(1.0 / s)
        m = (1 - b1 ** s) * g
        v = (1 - b2 ** s) * g * g
        expected -= lr_s * (m / (1 - b1 ** s)) / (math.sqrt(v / (1 - b2 ** s)) + eps)
        assert p.data == pytest.approx(expected, abs=1e-15)
    assert st.step == 3


def test_adam_zero_gradient_leaves_parameters():
    p = Parameter(np.array([1.0, -2.0]), name="w")
    st = OptimizerState()
    p.grad = np.zeros(2)
    adam_step(st, [p])
    assert p.data.tolist() == [1.0, -2.0]
    assert st.step == 1


def test_adam_leaves_gradients_untouched():
    p = Parameter(np.array([1.0]), name="w")
    p.grad = np.array([0.3])
    adam_step(OptimizerState(), [p])
    assert p.grad.tolist() == [0.3]


def test_adam_missing_gradient_names_parameter():
    p = Parameter(np.array([1.0]), name="layer.weight")
    with pytest.raises(ValueError, match="layer.weight"):
        adam_step(OptimizerState(), [p])


@pytest.mark.parametrize("s", [1, 50, 399])
def test_warmup_is_linear(s):
    assert inverse_sqrt_lr(s, 1e-3, 400) == pytest.approx(s / 400 * 1e-3, rel=1e-15)


def test_post_warmup_inverse_sqrt():
    assert inverse_sqrt_lr(1600, 1e-3, 400) == pytest.approx(5e-4)


# ------------------------------------------------------------- modules


class _Tiny(Module):
    def __init__(self):
        self.a = Parameter(np.ones(2))
        self.sub = [_Leaf(), _Leaf()]


class _Leaf(Module):
    def __init__(self):
        self.w = Parameter(np.zeros((2, 2)))


def test_module_names_are_unique_and_dotted():
    names = [p.name for p in _Tiny().parameters()]
    assert names == ["a", "sub.0.w", "sub.1.w"]


def test_state_dict_mismatch_rejected():
    m = _Tiny()
    with pytest.raises(KeyError):
        m.load_state_dict({"a": np.ones(2)})


# ---------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b": rng.standard_normal((3, 2)), "a": np.array(2.5)}
    save_checkpoint(tmp_path / "c", tensors, {"step": 7})
    back, meta = load_checkpoint(tmp_path / "c")
    assert list(back) == ["b", "a"]
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    assert meta == {"step": 7}
    man = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert man["format"] == "simulstream-ckpt-v1"
    raw = (tmp_path / "c" / "values.bin").read_bytes()
    assert np.frombuffer(raw, "<f8")[0] == tensors["b"][0, 0]


def test_checkpoint_bad_format_rejected(tmp_path):
    save_checkpoint(tmp_path / "c", {"a": np.ones(2)})
    man = json.loads((tmp_path / "c" / "manifest.json").read_text())
    man["format"] = "other"
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_truncated_blob_rejected(tmp_path):
    save_checkpoint(tmp_path / "c", {"a": np.ones(4)})
    p = tmp_path / "c" / "values.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
