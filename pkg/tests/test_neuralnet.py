import numpy as np
import pytest
from sklearn.base import clone

from apnea_bench import neuralnet as nn
from apnea_bench.errors import ShapeMismatch, TruncatedPayload


def small_arch(rng, dropout_p=0.0):
    L = int(rng.integers(1, 5))
    C = int(rng.integers(1, 9))
    K = int(rng.integers(2, 6))
    R = 2 ** L
    n = int(rng.integers(R, 65))
    return nn.ArchSpec(n_layers=L, n_filters=C, dropout_p=dropout_p, n_classes=K, input_len=n)


def random_params(arch, rng, scale=1.0):
    p = nn.init_params(arch, rng, dtype=np.float64)
    # nonzero biases so every term of the gradient is exercised
    for name in p.arrays:
        if name.endswith("_b"):
            p.arrays[name] = rng.uniform(-0.5, 0.5, size=p.arrays[name].shape) * scale
    return p


def naive_forward(params, x, mask=None):
    """Straight dilated causal convolution over every time step, read at the end."""
    a = params.arch
    C = a.n_filters
    x = np.asarray(x, dtype=np.float64)
    N = x.size
    h = np.outer(x, params["in_w"]) + params["in_b"]
    skip = np.zeros(C)
    for l in range(a.n_layers):
        d = 2 ** l
        z = np.zeros((N, C))
        for t in range(N):
            past = h[t - d] if t - d >= 0 else np.zeros(C)
            pre = np.concatenate((past, h[t])) @ params["fg_w"][l] + params["fg_b"][l]
            z[t] = np.tanh(pre[:C]) / (1 + np.exp(-pre[C:]))
        contrib = z[-1] @ params["skip_w"][l] + params["skip_b"][l]
        skip += contrib if mask is None else contrib * mask[l]
        if l < a.n_layers - 1:
            h = h + z @ params["res_w"][l] + params["res_b"][l]
    u = np.maximum(skip, 0) @ params["out1_w"] + params["out1_b"]
    logits = np.maximum(u, 0) @ params["out2_w"] + params["out2_b"]
    e = np.exp(logits - logits.max())
    return e / e.sum()


# --- receptive field --------------------------------------------------------

def test_receptive_field_values():
    assert nn.receptive_field(nn.ArchSpec()) == 4096
    assert nn.receptive_field(nn.ArchSpec(n_layers=1, input_len=2)) == 2
    assert nn.receptive_field(nn.ArchSpec(n_layers=4, input_len=16)) == 16
    assert nn.ArchSpec().dilations == tuple(2 ** l for l in range(12))


def test_arch_validation():
    with pytest.raises(ShapeMismatch):
        nn.ArchSpec(n_layers=12, input_len=4000)
    with pytest.raises(ValueError):
        nn.ArchSpec(kernel_size=3)
    with pytest.raises(ValueError):
        nn.ArchSpec(dropout_p=1.0)


def test_perturbation_outside_field_is_exactly_invisible():
    rng = np.random.default_rng(7)
    arch = nn.ArchSpec(n_filters=4)
    p = random_params(arch, rng)
    x = rng.standard_normal(4200)
    base = nn.forward(p, x)
    first = 4200 - 4096
    for pos in (0, 50, first - 1):
        y = x.copy()
        y[pos] += 10.0
        assert np.array_equal(nn.forward(p, y), base)
    for pos in (first, 2000, 4199):
        y = x.copy()
        y[pos] += 10.0
        assert not np.array_equal(nn.forward(p, y), base)
    _, cache = nn.forward(p, x[None], return_cache=True)
    g = nn.backward(p, cache, [1], input_grad=True)["x"][0]
    assert np.all(g[:first] == 0)
    assert np.count_nonzero(g[first:]) > 0


# --- forward ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(6))
def test_tree_forward_matches_naive_convolution(seed):
    rng = np.random.default_rng(seed)
    arch = small_arch(rng, dropout_p=0.3)
    p = random_params(arch, rng)
    x = rng.standard_normal((3, arch.input_len))
    mask = nn.dropout_mask(arch, 3, rng, np.float64)
    probs, _ = nn.forward_with_mask(p, x, mask)
    for b in range(3):
        assert np.allclose(probs[b], naive_forward(p, x[b], mask[b]), atol=1e-12)
    assert np.allclose(nn.forward(p, x), [naive_forward(p, xb) for xb in x], atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_dense_sequence_matches_naive_windows(seed):
    rng = np.random.default_rng(100 + seed)
    arch = small_arch(rng)
    p = random_params(arch, rng)
    R = arch.receptive_field
    seq = rng.standard_normal(arch.input_len + 40)
    positions = np.array([R - 1, R + 3, seq.size - 1])
    dense = nn.forward_sequence(p, seq, positions)
    for row, pos in zip(dense, positions):
        assert np.allclose(row, naive_forward(p, seq[pos - R + 1:pos + 1]), atol=1e-12)
    with pytest.raises(ShapeMismatch):
        nn.forward_sequence(p, seq, [R - 2])


def test_zero_weights_give_uniform():
    for k in (2, 5):
        arch = nn.ArchSpec(n_layers=3, n_filters=4, n_classes=k, input_len=20)
        probs = nn.forward(nn.zero_params(arch), np.ones(20))
        assert np.allclose(probs, 1.0 / k)


def test_eval_deterministic_and_normalized(rng):
    arch = nn.ArchSpec(n_layers=4, n_filters=6, n_classes=5, input_len=40)
    p = random_params(arch, rng, scale=3)
    x = rng.standard_normal((50, 40)) * 5
    a = nn.forward(p, x)
    assert np.array_equal(a, nn.forward(p, x))
    assert np.allclose(a.sum(axis=1), 1, atol=1e-6)
    assert np.all((a > 0) & (a < 1))
    with pytest.raises(ShapeMismatch):
        nn.forward(p, np.zeros(39))
    with pytest.raises(ValueError):
        nn.forward(p, x, mode="train")


def test_loss_values():
    assert nn.loss(np.full(5, 0.2), 3) == pytest.approx(np.log(5))
    assert nn.loss(np.array([0.0, 1.0]), 1) == 0.0
    assert nn.loss(np.array([0.7, 0.3]), 1) == pytest.approx(1.2039728, abs=1e-6)
    assert nn.loss(np.array([1.0, 0.0]), 1) == pytest.approx(-np.log(1e-12))
    assert nn.loss(np.array([[0.7, 0.3], [0.5, 0.5]]), [1, 0]) == pytest.approx(
        (-np.log(0.3) - np.log(0.5)) / 2)


def test_dropout_is_unbiased():
    rng = np.random.default_rng(3)
    arch = nn.ArchSpec(n_layers=3, n_filters=5, dropout_p=0.2, input_len=8)
    p = random_params(arch, rng)
    x = rng.standard_normal(8)
    _, ev = nn.forward_with_mask(p, x[None], None)
    n = 10_000
    _, tr = nn.forward(p, np.tile(x, (n, 1)), "train", rng, return_cache=True)
    mean_skip = tr["skip"].mean(axis=0)
    assert np.allclose(mean_skip, ev["skip"][0], rtol=0.02, atol=0.02 * np.abs(ev["skip"]).max())
    assert np.isclose(tr["mask"].mean(), 1.0, atol=0.02)


# --- gradients --------------------------------------------------------------

def numeric_grad(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, n):
    return np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6))


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    arch = small_arch(rng, dropout_p=float(rng.choice([0.0, 0.2, 0.5])))
    p = random_params(arch, rng)
    B = int(rng.integers(1, 4))
    x = rng.standard_normal((B, arch.input_len))
    y = rng.integers(0, arch.n_classes, size=B)
    mask = nn.dropout_mask(arch, B, rng, np.float64)

    def f():
        return nn.loss(nn.forward_with_mask(p, x, mask)[0], y)

    _, cache = nn.forward_with_mask(p, x, mask)
    grads = nn.backward(p, cache, y, input_grad=True)
    for name in nn.PARAM_ORDER:
        if p[name].size == 0:
            continue
        assert rel_err(grads[name], numeric_grad(f, p.arrays[name])) < 1e-4, name

    xs = x.copy()

    def fx():
        return nn.loss(nn.forward_with_mask(p, xs, mask)[0], y)

    assert rel_err(grads["x"], numeric_grad(fx, xs)) < 1e-4


def test_saturated_prediction_has_vanishing_gradient(rng):
    arch = nn.ArchSpec(n_layers=2, n_filters=4, input_len=16)
    p = random_params(arch, rng)
    p.arrays["out2_b"][:] = [60.0, -60.0]
    x = rng.standard_normal((2, 16))
    _, g = nn.loss_and_grad(p, x, [0, 0])
    assert np.sqrt(sum(np.sum(v ** 2) for v in g.values())) < 1e-6


def test_masked_skip_unit_gets_no_gradient(rng):
    arch = nn.ArchSpec(n_layers=3, n_filters=4, dropout_p=0.5, input_len=8)
    p = random_params(arch, rng)
    mask = np.full((1, 3, 4), 2.0)
    mask[0, 1, 2] = 0.0
    _, g = nn.loss_and_grad(p, rng.standard_normal((1, 8)), [1], mask)
    assert np.all(g["skip_w"][1][:, 2] == 0)
    assert g["skip_b"][1][2] == 0
    assert np.any(g["skip_w"][1][:, 1] != 0)


def test_full_batch_loss_decreases_monotonically():
    rng = np.random.default_rng(5)
    arch = nn.ArchSpec(n_layers=3, n_filters=4, dropout_p=0.0, input_len=16)
    p = random_params(arch, rng)
    y = rng.integers(0, 2, size=40)
    x = rng.standard_normal((40, 16)) * 0.3 + np.where(y == 1, 1.0, -1.0)[:, None]
    losses = []
    for _ in range(50):
        value, g = nn.loss_and_grad(p, x, y)
        losses.append(value)
        nn.sgd_step(p, g, 0.01)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# --- optimizers -------------------------------------------------------------

def test_adam_on_quadratic():
    arch = nn.ArchSpec(n_layers=1, n_filters=1, input_len=2)
    p = nn.ModelParams(arch, {k: np.ones_like(v, dtype=np.float64)
                              for k, v in nn.zero_params(arch).arrays.items()})
    state = nn.AdamState.zeros_like(p)
    for _ in range(200):
        nn.adam_step(p, {k: 2 * v for k, v in p.arrays.items()}, state, lr=0.1)
    assert np.abs(p.flat()).max() < 1e-2


def test_zero_gradient_leaves_params(rng):
    arch = nn.ArchSpec(n_layers=2, n_filters=3, input_len=4)
    p = random_params(arch, rng)
    before = p.flat().copy()
    zeros = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    nn.adam_step(p, zeros, nn.AdamState.zeros_like(p), lr=0.1)
    nn.sgd_step(p, zeros, 0.1)
    assert np.array_equal(p.flat(), before)


def test_fit_model_deterministic_and_early_stopping():
    rng = np.random.default_rng(0)
    arch = nn.ArchSpec(n_layers=3, n_filters=4, dropout_p=0.2, input_len=16)
    y = rng.integers(0, 2, size=200)
    x = (rng.standard_normal((200, 16)) * 0.5 + np.where(y == 1, 0.5, -0.5)[:, None])
    x = x.astype(np.float32)
    a, ha = nn.fit_model(x[:150], y[:150], arch, x[150:], y[150:], seed=3, max_steps=120,
                         eval_every=10, batch_size=16)
    b, hb = nn.fit_model(x[:150], y[:150], arch, x[150:], y[150:], seed=3, max_steps=120,
                         eval_every=10, batch_size=16)
    assert np.array_equal(a.flat(), b.flat())
    assert ha == hb
    vals = [h["val_loss"] for h in ha if "val_loss" in h]
    assert nn.mean_loss(a, x[150:], y[150:]) == pytest.approx(min(vals), rel=1e-5)
    assert min(vals) <= vals[-1]


# --- checkpoints and estimator ---------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    arch = nn.ArchSpec(n_layers=4, n_filters=5, n_classes=5, input_len=20)
    p = nn.init_params(arch, rng)
    nn.save_model(p, tmp_path / "m.model")
    q = nn.load_model(tmp_path / "m.model")
    assert q.arch == arch
    assert q.flat().tobytes() == p.flat().tobytes()
    raw = (tmp_path / "m.model").read_bytes()
    (tmp_path / "t.model").write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayload):
        nn.load_model(tmp_path / "t.model")


def test_param_shapes():
    arch = nn.ArchSpec(n_layers=3, n_filters=4, n_classes=5, input_len=8)
    s = nn.param_shapes(arch)
    assert s["fg_w"] == (3, 8, 8)
    assert s["res_w"] == (2, 4, 4)
    assert s["skip_w"] == (3, 4, 4)
    assert s["out2_w"] == (4, 5)


def test_estimator_api():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, size=120)
    X = (rng.standard_normal((120, 32)) * 0.3 + np.where(y == 1, 1.0, -1.0)[:, None])
    clf = nn.WaveNetClassifier(n_layers=4, n_filters=4, input_len=32, max_steps=150,
                               batch_size=16, eval_every=25)
    assert clone(clf).get_params() == clf.get_params()
    clf.fit(X, y)
    assert clf.score(X, y) > 0.95
    assert clf.predict_proba(X).shape == (120, 2)
    with pytest.raises(ShapeMismatch):
        clf.predict(X[:, :30])
