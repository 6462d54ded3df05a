import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oodbatch import nn


def rand_case(kind, rng, n=7, d=5, k=3, hidden=4, missing=0.2):
    spec = nn.ModelSpec(kind, d, k, hidden)
    state = nn.init_model(spec, int(rng.integers(1 << 31)))
    state.params[:] += 0.1 * rng.standard_normal(state.params.shape)  # non-zero biases too
    x = rng.standard_normal((n, d))
    y = (rng.random((n, k)) < 0.4).astype(float)
    mask = (rng.random((n, k)) > missing).astype(float)
    w = nn.LossWeights(rng.uniform(0.5, 4.0, k))
    return spec, state, x, y, mask, w


def full_loss(params, spec, state, x, y, mask, w):
    return nn.wbce_loss(nn.forward(nn.with_params(state, params), spec, x), y, mask, w)[0]


def fd_rel_errors(kind, rng, n_coords=None, h=1e-5):
    spec, state, x, y, mask, w = rand_case(kind, rng)
    _, dz = nn.wbce_loss(nn.forward(state, spec, x), y, mask, w)
    g = nn.backward(state, spec, x, dz)
    idx = range(g.size) if n_coords is None else rng.choice(g.size, n_coords, replace=False)
    errs = []
    for i in idx:
        p = state.params.copy()
        p[i] += h
        up = full_loss(p, spec, state, x, y, mask, w)
        p[i] -= 2 * h
        down = full_loss(p, spec, state, x, y, mask, w)
        num = (up - down) / (2 * h)
        errs.append(abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6))
    return errs


def test_param_layout_sizes():
    assert nn.n_params(nn.ModelSpec(nn.LOGISTIC, 4, 2)) == 4 * 2 + 2
    assert nn.n_params(nn.ModelSpec(nn.MLP1, 256, 4, 64)) == 16_708


def test_init_is_glorot_and_deterministic():
    spec = nn.ModelSpec(nn.MLP1, 30, 4, 10)
    a, b = nn.init_model(spec, 3), nn.init_model(spec, 3)
    assert np.array_equal(a.params, b.params)
    blocks = nn.unpack(a.params, spec)
    assert np.abs(blocks["W1"]).max() <= math.sqrt(6 / 40)
    assert np.abs(blocks["W2"]).max() <= math.sqrt(6 / 14)
    assert not blocks["b1"].any() and not blocks["b2"].any()
    assert not a.adam_m.any() and not a.adam_v.any() and a.step_count == 0
    assert not np.array_equal(nn.init_model(spec, 4).params, a.params)


def test_forward_zero_logistic():
    spec = nn.ModelSpec(nn.LOGISTIC, 3, 2)
    state = nn.ModelState.fresh(np.zeros(nn.n_params(spec)))
    assert not nn.forward(state, spec, np.ones((5, 3))).any()


def test_forward_hand_computed_mlp():
    spec = nn.ModelSpec(nn.MLP1, 1, 1, 1)
    state = nn.ModelState.fresh(np.array([2.0, -1.0, 3.0, 0.0]))  # W1, b1, W2, b2
    assert nn.forward(state, spec, np.array([[1.0]]))[0, 0] == 3.0


def _loop_forward(params, spec, x):
    """Plain-Python reimplementation of the forward pass."""
    p = params.tolist()
    d, h, k = spec.input_dim, spec.hidden_dim, spec.output_dim
    out = []
    for row in x.tolist():
        if spec.kind == nn.LOGISTIC:
            W, b = p[: d * k], p[d * k:]
            out.append([sum(row[i] * W[i * k + j] for i in range(d)) + b[j] for j in range(k)])
            continue
        W1, b1 = p[: d * h], p[d * h: d * h + h]
        off = d * h + h
        W2, b2 = p[off: off + h * k], p[off + h * k:]
        hid = [max(0.0, sum(row[i] * W1[i * h + u] for i in range(d)) + b1[u]) for u in range(h)]
        out.append([sum(hid[u] * W2[u * k + j] for u in range(h)) + b2[j] for j in range(k)])
    return np.array(out)


@pytest.mark.parametrize("kind", nn.KINDS)
def test_forward_matches_loop_implementation(kind):
    rng = np.random.default_rng(0)
    spec, state, x, *_ = rand_case(kind, rng)
    assert np.max(np.abs(nn.forward(state, spec, x) - _loop_forward(state.params, spec, x))) <= 1e-12


def test_forward_dimension_mismatch():
    spec = nn.ModelSpec(nn.LOGISTIC, 3, 2)
    with pytest.raises(ValueError):
        nn.forward(nn.init_model(spec, 0), spec, np.ones((2, 4)))


def test_pos_weights():
    # ratio oracle: count negatives / positives from raw labels
    labels = [1, 0, 0, 0]
    n_pos, n_neg = labels.count(1), labels.count(0)
    assert nn.pos_weights_from_counts([(n_pos, n_neg, 0)]).pos_weight[0] == n_neg / n_pos == 3.0
    assert nn.pos_weights_from_counts([(5, 5, 0)]).pos_weight[0] == 1.0
    assert nn.pos_weights_from_counts([(0, 8, 2)]).pos_weight[0] == 1.0
    assert nn.pos_weights_from_counts([(8, 0, 0)]).pos_weight[0] == 1.0


def test_wbce_analytic_values():
    one = np.ones((1, 1))
    loss, _ = nn.wbce_loss(np.zeros((1, 1)), one, one, nn.LossWeights([1.0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = nn.wbce_loss(np.zeros((1, 1)), one, one, nn.LossWeights([3.0]))
    assert loss == pytest.approx(3 * math.log(2), abs=1e-12)
    loss, g = nn.wbce_loss(np.full((1, 1), 100.0), one, one, nn.LossWeights([1.0]))
    assert loss == pytest.approx(0.0, abs=1e-40) and np.isfinite(g).all()
    loss, g = nn.wbce_loss(np.full((1, 1), -100.0), one, one, nn.LossWeights([1.0]))
    assert loss == pytest.approx(100.0, abs=1e-12) and g[0, 0] == pytest.approx(-1.0)
    loss, g = nn.wbce_loss(np.full((1, 1), 800.0), np.zeros((1, 1)), one, nn.LossWeights([1.0]))
    assert loss == pytest.approx(800.0) and np.isfinite(g).all()


def test_wbce_all_masked_is_zero_and_counted():
    before = nn.diagnostics["all_masked_batch"]
    loss, g = nn.wbce_loss(np.ones((3, 2)), np.ones((3, 2)), np.zeros((3, 2)), nn.LossWeights([2.0, 1.0]))
    assert loss == 0.0 and not g.any()
    assert nn.diagnostics["all_masked_batch"] == before + 1


def test_wbce_masked_elements_have_no_gradient():
    rng = np.random.default_rng(1)
    z, y = rng.standard_normal((6, 3)), (rng.random((6, 3)) < 0.5).astype(float)
    mask = np.ones((6, 3))
    mask[2, 1] = mask[4, 0] = 0
    _, g = nn.wbce_loss(z, y, mask, nn.LossWeights([1.0, 2.0, 3.0]))
    assert g[2, 1] == 0 and g[4, 0] == 0


def test_wbce_shape_mismatch():
    with pytest.raises(ValueError):
        nn.wbce_loss(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), nn.LossWeights([1.0, 1.0]))


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_loss_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    spec, state, x, y, mask, w = rand_case(nn.MLP1, rng)
    perm = rng.permutation(len(x))
    l1, dz1 = nn.wbce_loss(nn.forward(state, spec, x), y, mask, w)
    l2, dz2 = nn.wbce_loss(nn.forward(state, spec, x[perm]), y[perm], mask[perm], w)
    assert l1 == pytest.approx(l2, rel=1e-12, abs=1e-15)
    assert np.allclose(dz1[perm], dz2, atol=1e-15)
    g1 = nn.backward(state, spec, x, dz1)
    g2 = nn.backward(state, spec, x[perm], dz2)
    assert np.allclose(g1, g2, atol=1e-13)


def test_env_sum_basics():
    g = np.arange(3.0)
    loss, grads = nn.env_sum_loss([(0.5, g)])
    assert loss == 0.5 and np.array_equal(grads, g)
    loss, grads = nn.env_sum_loss([(0.5, g), (0.25, 2 * g)])
    assert loss == 0.75 and np.array_equal(grads, 3 * g)
    with pytest.raises(ValueError):
        nn.env_sum_loss([(0.1, np.zeros(3)), (0.1, np.zeros(4))])


def test_env_sum_associative_commutative():
    rng = np.random.default_rng(2)
    parts = [(float(rng.random()), rng.standard_normal(50)) for _ in range(4)]
    base = nn.env_sum_loss(parts)
    for order in ([3, 1, 0, 2], [1, 0, 3, 2]):
        other = nn.env_sum_loss([parts[i] for i in order])
        assert abs(other[0] - base[0]) <= 1e-12
        assert np.max(np.abs(other[1] - base[1])) <= 1e-12
    nested = nn.env_sum_loss([nn.env_sum_loss(parts[:2]), nn.env_sum_loss(parts[2:])])
    assert np.max(np.abs(nested[1] - base[1])) <= 1e-12


def _joined_per_env_loss_grad(state, spec, x, y, mask, w, tags):
    """Single pass over the joined batch, each element scaled by 1 / (its env's unmasked count)."""
    z = nn.forward(state, spec, x)
    norm = np.zeros_like(z)
    for e in np.unique(tags):
        norm[tags == e] = max(1.0, mask[tags == e].sum())
    sp_neg, sp_pos = np.logaddexp(0, -z), np.logaddexp(0, z)
    pw = w.pos_weight
    loss = np.sum(mask * (pw * y * sp_neg + (1 - y) * sp_pos) / norm)
    sig = 1 / (1 + np.exp(-z))
    dz = mask * (-pw * y * (1 - sig) + (1 - y) * sig) / norm
    return loss, nn.backward(state, spec, x, dz)


@pytest.mark.parametrize("kind", nn.KINDS)
def test_env_sum_equals_joined_batch_with_per_env_normalisation(kind):
    rng = np.random.default_rng(7)
    spec, state, x, y, mask, w = rand_case(kind, rng, n=12)
    tags = np.array([0] * 6 + [1] * 6)
    parts = []
    for e in (0, 1):
        s = tags == e
        loss, dz = nn.wbce_loss(nn.forward(state, spec, x[s]), y[s], mask[s], w)
        parts.append((loss, nn.backward(state, spec, x[s], dz)))
    total_loss, total_grads = nn.env_sum_loss(parts)
    ref_loss, ref_grads = _joined_per_env_loss_grad(state, spec, x, y, mask, w, tags)
    assert abs(total_loss - ref_loss) <= 1e-12
    assert np.max(np.abs(total_grads - ref_grads)) <= 1e-12


def test_backward_zero_upstream():
    rng = np.random.default_rng(3)
    spec, state, x, *_ = rand_case(nn.MLP1, rng)
    assert not nn.backward(state, spec, x, np.zeros((len(x), spec.output_dim))).any()


@pytest.mark.parametrize("kind", nn.KINDS)
def test_backward_matches_finite_differences(kind):
    errs = fd_rel_errors(kind, np.random.default_rng(11))
    assert max(errs) <= 1e-5


def test_dead_hidden_unit_gets_no_gradient():
    rng = np.random.default_rng(4)
    spec, state, x, y, mask, w = rand_case(nn.MLP1, rng)
    p = nn.unpack(state.params, spec)
    p["W1"][:, 2] = 0.0
    p["b1"][2] = -1.0  # pre-activation -1 for every row
    _, dz = nn.wbce_loss(nn.forward(state, spec, x), y, mask, w)
    g = nn.unpack(nn.backward(state, spec, x, dz), spec)
    assert not g["W1"][:, 2].any() and g["b1"][2] == 0.0 and not g["W2"][2].any()


def test_adam_first_step_closed_form():
    state = nn.ModelState.fresh(np.zeros(3))
    g = np.array([1.0, -2.0, 1e-3])
    cfg = nn.OptimConfig()
    new = nn.adam_step(state, g, cfg)
    expected = -cfg.learning_rate * g / (np.abs(g) + cfg.epsilon)
    assert np.max(np.abs(new.params - expected)) <= 1e-12
    assert new.params[0] == pytest.approx(-9.9999999e-4, abs=1e-15)
    assert new.step_count == 1
    plain = nn.adam_step(state, g, nn.OptimConfig(amsgrad=False))
    assert np.max(np.abs(plain.params - expected)) <= 1e-12


def test_adam_zero_gradient_fixed_point():
    state = nn.ModelState.fresh(np.array([0.5, -1.0]))
    cfg = nn.OptimConfig(weight_decay=0.0)
    for _ in range(10):
        state = nn.adam_step(state, np.zeros(2), cfg)
    assert np.array_equal(state.params, [0.5, -1.0])


def test_adam_coupled_weight_decay():
    state = nn.ModelState.fresh(np.array([2.0]))
    new = nn.adam_step(state, np.zeros(1), nn.OptimConfig(weight_decay=0.1))
    # g = wd * theta = 0.2 -> first step moves by -lr * sign
    assert new.params[0] == pytest.approx(2.0 - 1e-3 * 0.2 / (0.2 + 1e-8), abs=1e-15)
    assert new.adam_m[0] == pytest.approx(0.1 * 0.2)


def test_amsgrad_keeps_running_max_with_decreasing_gradients():
    state = nn.ModelState.fresh(np.zeros(4))
    cfg = nn.OptimConfig()
    for s in range(50):
        v_before = state.adam_vhat_max.copy()
        state = nn.adam_step(state, np.full(4, 10.0 / (1 + s)), cfg)
        v_hat = state.adam_v / (1 - cfg.beta2 ** state.step_count)
        assert np.all(state.adam_vhat_max >= v_hat)
        assert np.all(state.adam_vhat_max >= v_before)
        assert np.all(state.adam_vhat_max >= state.adam_v)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    spec, state, x, y, mask, w = rand_case(nn.MLP1, rng)
    for _ in range(3):
        _, dz = nn.wbce_loss(nn.forward(state, spec, x), y, mask, w)
        state = nn.adam_step(state, nn.backward(state, spec, x, dz), nn.OptimConfig())
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(state, spec, path)
    spec2, state2 = nn.load_checkpoint(path)
    assert spec2 == spec and state2.step_count == 3
    for a in ("params", "adam_m", "adam_v", "adam_vhat_max"):
        assert np.array_equal(getattr(state, a), getattr(state2, a))
    assert nn.checkpoint_bytes(state2, spec2) == path.read_bytes()
    raw = path.read_bytes()
    assert raw[:4] == b"OODC" and int.from_bytes(raw[4:6], "little") == 1
    assert len(raw) == 36 + 4 * 8 * nn.n_params(spec)


def test_checkpoint_rejects_corruption():
    spec = nn.ModelSpec(nn.LOGISTIC, 2, 1)
    raw = nn.checkpoint_bytes(nn.init_model(spec, 0), spec)
    with pytest.raises(ValueError):
        nn.checkpoint_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        nn.checkpoint_from_bytes(raw[:-8])
