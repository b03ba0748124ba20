import numpy as np
import pytest

from ehrfusion import autodiff as ad


def test_softmax_symmetry():
    out = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_pointwise_identities():
    assert ad.tanh(ad.constant([0.0])).data[0] == 0.0
    assert ad.sigmoid(ad.constant([0.0])).data[0] == 0.5


def test_matmul_hand_computed():
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    b = ad.constant([[1.0], [1.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_against_brute_force_dots():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    expect = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(ad.matmul(ad.constant(a), ad.constant(b)).data, expect, rtol=1e-12)


def test_square_gradient():
    tape = ad.Tape()
    x = tape.leaf([3.0])
    y = ad.tsum(ad.mul(x, x))
    g = ad.grad(tape, y, {"x": x})
    assert g["x"][0] == pytest.approx(6.0)


def test_softmax_component_gradient():
    # d softmax(x)[0] / dx at x = [0, 0] is [0.25, -0.25]
    tape = ad.Tape()
    x = tape.leaf([0.0, 0.0])
    y = ad.narrow(ad.softmax(x), 0, 0, 1)
    g = ad.grad(tape, ad.tsum(y), {"x": x})
    np.testing.assert_allclose(g["x"], [0.25, -0.25], atol=1e-12)


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    points = {
        "x": rng.normal(size=(3, 4)),
        "w1": rng.normal(size=(4, 5)) * 0.5,
        "b1": rng.normal(size=5) * 0.1,
        "w2": rng.normal(size=(5, 2)) * 0.5,
        "b2": rng.normal(size=2) * 0.1,
    }

    def fn(t):
        h = ad.tanh(ad.bias_add(ad.matmul(t["x"], t["w1"]), t["b1"]))
        out = ad.bias_add(ad.matmul(h, t["w2"]), t["b2"])
        return ad.tsum(out)

    assert ad.grad_check(fn, points, h=1e-5) < 1e-4


@pytest.mark.parametrize(
    "name,fn",
    [
        ("tanh", lambda t: ad.tsum(ad.tanh(t["x"]))),
        ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t["x"]))),
        ("softplus", lambda t: ad.tsum(ad.softplus(t["x"]))),
        ("softmax", lambda t: ad.tsum(ad.mul(ad.softmax(t["x"], axis=1), t["x"]))),
        ("mean", lambda t: ad.tsum(ad.mean(t["x"], axis=0))),
        ("mean_all", lambda t: ad.mean(t["x"])),
        ("transpose", lambda t: ad.tsum(ad.mul(ad.transpose(t["x"]), ad.transpose(t["x"])))),
        ("concat", lambda t: ad.tsum(ad.mul(ad.concat([t["x"], t["x"]], axis=1),
                                            ad.concat([t["x"], t["x"]], axis=1)))),
        ("narrow", lambda t: ad.tsum(ad.narrow(ad.mul(t["x"], t["x"]), 1, 1, 3))),
        ("reshape", lambda t: ad.tsum(ad.mul(ad.reshape(t["x"], (2, 10)), ad.reshape(t["x"], (2, 10))))),
        ("stack", lambda t: ad.tsum(ad.mul(ad.stack([t["x"], t["x"]], axis=1), ad.stack([t["x"], t["x"]], axis=1)))),
    ],
)
def test_primitive_gradients_match_finite_differences(name, fn):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 5))
    assert ad.grad_check(fn, {"x": x}, h=1e-5) < 1e-4, name


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    fn = lambda t: ad.tsum(ad.relu(t["x"]))
    assert ad.grad_check(fn, {"x": x}, h=1e-6) < 1e-4


def test_relu_subgradient_at_zero_is_zero():
    tape = ad.Tape()
    x = tape.leaf([0.0])
    g = ad.grad(tape, ad.tsum(ad.relu(x)), {"x": x})
    assert g["x"][0] == 0.0


def test_linear_grad_check_is_exact():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(6,))
    fn = lambda t: ad.tsum(ad.mul(t["x"], ad.constant(w)))
    assert ad.grad_check(fn, {"x": rng.normal(size=6)}, h=1e-5) < 1e-9


def test_fanout_gradients_accumulate():
    # f = x*x + x*x has gradient 4x: branches sum.
    tape = ad.Tape()
    x = tape.leaf([2.0])
    y = ad.add(ad.mul(x, x), ad.mul(x, x))
    g = ad.grad(tape, ad.tsum(y), {"x": x})
    assert g["x"][0] == pytest.approx(8.0)


def test_unused_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    z = tape.leaf([5.0])
    g = ad.grad(tape, ad.tsum(ad.mul(x, x)), {"x": x, "z": z})
    np.testing.assert_array_equal(g["z"], [0.0])


def test_backward_rejects_non_scalar():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    y = ad.mul(x, x)
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_backward_rejects_foreign_tensor():
    tape = ad.Tape()
    tape.leaf([1.0])
    with pytest.raises(ValueError):
        ad.backward(tape, ad.constant([1.0]))


def test_non_finite_forward_raises():
    big = ad.constant([1e308])
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.mul(big, big)


def test_take_rows_scatter_add():
    tape = ad.Tape()
    table = tape.leaf(np.arange(12.0).reshape(4, 3))
    rows = ad.take_rows(table, np.array([0, 2, 0]))
    g = ad.grad(tape, ad.tsum(rows), {"w": table})["w"]
    np.testing.assert_array_equal(g, [[2, 2, 2], [0, 0, 0], [1, 1, 1], [0, 0, 0]])


def test_take_rows_gradient_fd():
    rng = np.random.default_rng(9)
    idx = np.array([[0, 3], [1, 1]])

    def fn(t):
        rows = ad.take_rows(t["w"], idx)
        return ad.tsum(ad.mul(rows, rows))

    assert ad.grad_check(fn, {"w": rng.normal(size=(4, 3))}, h=1e-5) < 1e-4


def test_lincomb_matches_manual():
    rng = np.random.default_rng(13)
    xs = [rng.normal(size=(3,)) for _ in range(4)]
    cs = [0.5, -1.0, 2.0, 0.0]

    def fn(t):
        combo = ad.lincomb(cs, [t["a"], t["b"], t["c"], t["d"]])
        return ad.tsum(ad.mul(combo, combo))

    pts = dict(zip("abcd", xs))
    assert ad.grad_check(fn, pts, h=1e-5) < 1e-4


def test_bce_with_logits_matches_naive():
    rng = np.random.default_rng(17)
    x = rng.normal(size=8) * 3
    y = (rng.random(8) > 0.5).astype(float)
    p = 1 / (1 + np.exp(-x))
    naive = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    got = ad.bce_with_logits(ad.constant(x), y).item()
    assert got == pytest.approx(naive, rel=1e-10)


def test_bce_with_logits_gradient():
    rng = np.random.default_rng(19)
    y = (rng.random(6) > 0.7).astype(float)
    for pw in (1.0, 3.5):
        fn = lambda t: ad.bce_with_logits(t["x"], y, pos_weight=pw)
        assert ad.grad_check(fn, {"x": rng.normal(size=6)}, h=1e-6) < 1e-4


def test_field_contract_matches_unfused_forward():
    rng = np.random.default_rng(23)
    B, d, c, hh = 3, 4, 5, 6
    z = rng.normal(size=(B, d))
    w1, b1 = rng.normal(size=(d, hh)) * 0.5, rng.normal(size=hh) * 0.1
    w2, b2 = rng.normal(size=(hh, d * c)) * 0.5, rng.normal(size=d * c) * 0.1
    dxdt = rng.normal(size=(B, c))
    out = ad.field_contract(ad.constant(z), ad.constant(w1), ad.constant(b1),
                            ad.constant(w2), ad.constant(b2), dxdt)
    h = np.maximum(z @ w1 + b1, 0)
    phi = np.tanh(h @ w2 + b2).reshape(B, d, c)
    np.testing.assert_allclose(out.data, np.einsum("bdc,bc->bd", phi, dxdt), rtol=1e-12)


def test_field_contract_gradient_fd():
    rng = np.random.default_rng(29)
    B, d, c, hh = 2, 3, 4, 5
    dxdt = rng.normal(size=(B, c))
    mask = (rng.random((B, hh)) > 0.3).astype(float) / 0.7
    points = {
        "z": rng.normal(size=(B, d)),
        "w1": rng.normal(size=(d, hh)) * 0.4,
        "b1": rng.normal(size=hh) * 0.3,  # keep ReLU inputs clear of 0
        "w2": rng.normal(size=(hh, d * c)) * 0.4,
        "b2": rng.normal(size=d * c) * 0.1,
    }

    def fn(t):
        out = ad.field_contract(t["z"], t["w1"], t["b1"], t["w2"], t["b2"], dxdt, drop_mask=mask)
        return ad.tsum(ad.mul(out, out))

    assert ad.grad_check(fn, points, h=1e-5) < 1e-4


def test_randomized_primitive_gradients_seeded_sweep():
    # Composite expression combining most primitives, several seeds.
    for seed in range(5):
        rng = np.random.default_rng(seed)
        pts = {
            "x": rng.normal(size=(3, 4)),
            "w": rng.normal(size=(4, 4)) * 0.5,
        }

        def fn(t):
            h = ad.softmax(ad.matmul(t["x"], t["w"]), axis=1)
            m = ad.mean(ad.concat([h, ad.sigmoid(t["x"])], axis=1), axis=1)
            return ad.tsum(ad.mul(m, m))

        assert ad.grad_check(fn, pts, h=1e-5, rng=rng) < 1e-4
