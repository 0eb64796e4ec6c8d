import numpy as np
import pytest

from featdistill.autograd import (
    ShapeMismatchError,
    Tensor,
    backward,
    cosine_similarity,
    cross_entropy,
    embedding,
    exp,
    gelu,
    gradient_check,
    kl_divergence,
    layer_norm,
    log,
    no_grad,
    relu,
    reset_tape,
    softmax,
    squared_l2_distance,
    tape_size,
)


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


def scalar(t):
    return t.item()


# ---------------------------------------------------------------- basic ops


def test_add_componentwise():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_matmul_identity():
    m = Tensor([[3.0, -1.0], [2.0, 5.0]])
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal((eye @ m).data, m.data)


def test_reduce_mean():
    assert scalar(Tensor([2.0, 4.0, 6.0]).mean()) == 4.0


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_add_shape_error():
    with pytest.raises(ShapeMismatchError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_log_domain_error():
    with pytest.raises(ValueError, match="non-positive"):
        log(Tensor([1.0, 0.0]))


def test_ops_not_recorded_without_grad():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    _ = a * b + a
    assert tape_size() == 0


def test_no_grad_suppresses_recording():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        _ = a * a
    assert tape_size() == 0


# ---------------------------------------------------------------- softmax


def test_softmax_tau1_value():
    # direct e^z / sum e^z evaluation, frozen from a scalar script
    p = softmax(Tensor([2.0, 0.0]), tau=1.0)
    np.testing.assert_allclose(p.data, [0.8807970779778824, 0.11920292202211755], atol=1e-12)


def test_softmax_tau2_value():
    p = softmax(Tensor([2.0, 0.0]), tau=2.0)
    np.testing.assert_allclose(p.data, [0.7310585786300049, 0.2689414213699951], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 5, 7)) * 10)
    p = softmax(x, tau=0.5)
    np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_huge_tau_is_uniform():
    p = softmax(Tensor([123.0, -45.0, 6.0]), tau=1e6)
    np.testing.assert_allclose(p.data, 1.0 / 3.0, atol=1e-4)


def test_softmax_rejects_nonpositive_tau():
    with pytest.raises(ValueError, match="temperature"):
        softmax(Tensor([1.0, 2.0]), tau=0.0)


def test_softmax_mask_gives_exact_zero():
    mask = np.array([True, False, True])
    p = softmax(Tensor([1.0, 100.0, 2.0]), mask=mask)
    assert p.data[1] == 0.0
    np.testing.assert_allclose(p.data.sum(), 1.0, atol=1e-12)


# ---------------------------------------------------------------- kl


def test_kl_self_is_exactly_zero():
    p = Tensor([0.3, 0.7])
    assert scalar(kl_divergence(p, Tensor([0.3, 0.7]))) == 0.0


def test_kl_frozen_value():
    # 0.5*ln2 + 0.5*ln(2/3) by independent summation
    v = scalar(kl_divergence(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])))
    np.testing.assert_allclose(v, 0.14384103622589042, atol=1e-12)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        k = rng.integers(2, 9)
        p = rng.random(k) + 1e-3
        q = rng.random(k) + 1e-3
        p /= p.sum()
        q /= q.sum()
        assert scalar(kl_divergence(Tensor(p), Tensor(q))) >= 0.0


def test_kl_zero_p_terms_contribute_zero():
    v = scalar(kl_divergence(Tensor([0.0, 1.0]), Tensor([0.5, 0.5])))
    np.testing.assert_allclose(v, np.log(2.0), atol=1e-12)


def test_kl_rejects_non_distribution():
    with pytest.raises(ValueError, match="sum to 1"):
        kl_divergence(Tensor([0.5, 0.9]), Tensor([0.5, 0.5]))


def test_kl_batch_mean_reduction():
    p = Tensor([[0.5, 0.5], [0.5, 0.5]])
    q = Tensor([[0.25, 0.75], [0.5, 0.5]])
    v = scalar(kl_divergence(p, q))
    np.testing.assert_allclose(v, 0.14384103622589042 / 2, atol=1e-12)


# ---------------------------------------------------------------- cosine


def test_cosine_self_is_one():
    u = Tensor([0.3, -1.2, 4.0])
    np.testing.assert_allclose(scalar(cosine_similarity(u, Tensor(u.data.copy()))), 1.0, atol=1e-12)


def test_cosine_orthogonal_zero():
    assert scalar(cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))) == 0.0


def test_cosine_frozen_value():
    v = scalar(cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])))
    np.testing.assert_allclose(v, 0.7071067811865475, atol=1e-12)


def test_cosine_scale_invariance():
    rng = np.random.default_rng(3)
    u = rng.normal(size=12)
    v = rng.normal(size=12)
    base = scalar(cosine_similarity(Tensor(u), Tensor(v)))
    scaled = scalar(cosine_similarity(Tensor(17.5 * u), Tensor(v * 0.03)))
    np.testing.assert_allclose(scaled, base, atol=1e-12)


def test_cosine_bounded():
    rng = np.random.default_rng(11)
    for _ in range(100):
        u = Tensor(rng.normal(size=6))
        v = Tensor(rng.normal(size=6))
        assert abs(scalar(cosine_similarity(u, v))) <= 1.0 + 1e-12


def test_cosine_per_position_axis():
    u = Tensor([[1.0, 0.0], [1.0, 1.0]])
    v = Tensor([[1.0, 0.0], [1.0, 0.0]])
    c = cosine_similarity(u, v, axis=-1)
    np.testing.assert_allclose(c.data, [1.0, 0.7071067811865475], atol=1e-12)


# ---------------------------------------------------------------- distance


def test_distance_identity_zero():
    u = Tensor([1.0, 2.0, 3.0])
    assert scalar(squared_l2_distance(u, Tensor(u.data.copy()))) == 0.0


def test_distance_raw_and_mean():
    # hand sum: (1-3)^2 + (2-2)^2 = 4; mean over 2 elements = 2
    u, v = Tensor([1.0, 2.0]), Tensor([3.0, 2.0])
    assert scalar(squared_l2_distance(u, v, mean=False)) == 4.0
    assert scalar(squared_l2_distance(u, v, mean=True)) == 2.0


def test_distance_quadratic_homogeneity():
    rng = np.random.default_rng(5)
    u = rng.normal(size=8)
    v = rng.normal(size=8)
    base = scalar(squared_l2_distance(Tensor(u), Tensor(v)))
    scaled = scalar(squared_l2_distance(Tensor(3.0 * u), Tensor(3.0 * v)))
    np.testing.assert_allclose(scaled, 9.0 * base, rtol=1e-12)


# ---------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = Tensor([3.0], requires_grad=True)
    y = (x * x).sum()
    backward(y)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_constant_gives_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0]).sum()
    backward(c)
    assert x.grad is None


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


def test_backward_accumulates_without_reset():
    x = Tensor([2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_bit_identical_reruns():
    rng = np.random.default_rng(9)
    data = rng.normal(size=(4, 4))

    def run():
        x = Tensor(data, requires_grad=True)
        y = softmax(x)
        z = (y * y).sum()
        backward(z)
        return x.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_backward_through_shared_operand():
    # weight tying: the same tensor used twice gets summed gradients
    w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    y = (w @ Tensor(np.eye(2))).sum() + (w * 2.0).sum()
    backward(y)
    np.testing.assert_allclose(w.grad, 3.0 * np.ones((2, 2)))


# ---------------------------------------------------------------- gradient_check


def test_gradient_check_polynomial_exact():
    x = Tensor(np.arange(1.0, 6.0), requires_grad=True)
    err = gradient_check(lambda t: (t * t).sum(), x, eps=1e-5)
    assert err < 1e-8


def test_gradient_check_kl_through_softmax():
    rng = np.random.default_rng(21)
    q = Tensor(softmax(Tensor(rng.normal(size=6))).data)
    x = Tensor(rng.normal(size=6), requires_grad=True)
    err = gradient_check(lambda t: kl_divergence(softmax(t), q), x, eps=1e-5)
    assert err < 1e-5


def test_gradient_check_kl_second_argument():
    rng = np.random.default_rng(22)
    p = Tensor(softmax(Tensor(rng.normal(size=6))).data)
    x = Tensor(rng.normal(size=6), requires_grad=True)
    err = gradient_check(lambda t: kl_divergence(p, softmax(t)), x, eps=1e-5)
    assert err < 1e-5


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: exp(t * 0.3).sum(),
        lambda t: log(exp(t)).sum(),
        lambda t: gelu(t).sum(),
        lambda t: relu(t + 0.05).mean(),
        lambda t: softmax(t, tau=1.7).mean(),
        lambda t: (t.reshape(2, 6).transpose(1, 0) @ Tensor(np.ones((2, 3)))).sum(),
        lambda t: cosine_similarity(t, Tensor(np.arange(1.0, 13.0))),
        lambda t: squared_l2_distance(t, Tensor(np.ones(12))),
        lambda t: (1.0 - cosine_similarity(t.reshape(3, 4), Tensor(np.ones((3, 4))), axis=-1)).mean(),
    ],
)
def test_gradient_check_core_ops(fn):
    rng = np.random.default_rng(33)
    x = Tensor(rng.normal(size=12) + 0.2, requires_grad=True)
    assert gradient_check(fn, x, eps=1e-5) < 1e-6


def test_gradient_check_layer_norm_and_embedding():
    rng = np.random.default_rng(44)
    gain = Tensor(rng.normal(size=4) + 1.0, requires_grad=True)
    bias = Tensor(rng.normal(size=4), requires_grad=True)
    ids = np.array([[0, 2], [1, 0]])
    mult = np.random.default_rng(45).normal(size=(2, 2, 4))
    table = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def f(table):
        h = embedding(table, ids)
        return (layer_norm(h, gain, bias) * Tensor(mult)).sum()

    assert gradient_check(f, table, eps=1e-5) < 1e-6


def test_gradient_check_cross_entropy():
    rng = np.random.default_rng(55)
    targets = np.array([[1, 0], [2, 1]])
    mask = np.array([[1.0, 1.0], [1.0, 0.0]])
    x = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    err = gradient_check(lambda t: cross_entropy(t, targets, mask), x, eps=1e-5)
    assert err < 1e-6


def test_gradient_check_eps_contract():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="eps"):
        gradient_check(lambda t: (t * t).sum(), x, eps=1e-2)


def test_masked_softmax_gradients():
    rng = np.random.default_rng(66)
    mask = np.tril(np.ones((4, 4), dtype=bool))
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

    def f(t):
        p = softmax(t, mask=mask)
        return (p * Tensor(np.arange(16.0).reshape(4, 4))).sum()

    assert gradient_check(f, x, eps=1e-5) < 1e-6
