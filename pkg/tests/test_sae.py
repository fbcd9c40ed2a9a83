import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pluralign.errors import CheckpointError, InvalidArgumentError
from pluralign.sae import (
    SaeConfig,
    SaeParams,
    decode,
    encode,
    gradient_check,
    init_sae,
    load_sae,
    params_checksum,
    sae_gradients,
    sae_loss,
    save_sae,
    sparsity_fraction,
    train_sae,
)
from pluralign.tinylm import final_residuals_batch


def random_params(d, m, seed=0):
    rng = np.random.default_rng(seed)
    return SaeParams(
        rng.normal(size=(m, d)) / np.sqrt(d),
        rng.normal(scale=0.1, size=m),
        rng.normal(size=(d, m)) / np.sqrt(m),
        rng.normal(scale=0.1, size=d),
    )


# d=3, m=6 fixture; expected values worked by hand in exact fractions.
FIXTURE = SaeParams(
    np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [1, 1, -1]], dtype=float),
    np.array([0, -0.5, 0, 0.25, 0, 0]),
    np.array([[0.5, 0, 0, -0.5, 0, 0], [0, 1, 0, 0, -1, 0], [0, 0, 1, 0, 0, 0.5]]),
    np.array([0, 0, 0.1]),
)
FIXTURE_BATCH = np.array([[1.0, 2.0, -1.0], [-0.5, 1.0, 0.5]])


def test_hand_computed_loss():
    # codes [1, 1.5, 0, 0, 0, 4] and [0, .5, .5, .75, 0, 0]; recon [.5, 1.5, 2.1], [-.375, .5, .6]
    mse, l1, total = sae_loss(FIXTURE, FIXTURE_BATCH, 0.1)
    assert mse == pytest.approx(5539 / 3200, abs=1e-9)
    assert l1 == pytest.approx(33 / 8, abs=1e-9)
    assert total == pytest.approx(6859 / 3200, abs=1e-9)


def test_zero_sparsity_total_is_mse():
    mse, _, total = sae_loss(FIXTURE, FIXTURE_BATCH, 0.0)
    assert total == mse


def test_perfect_reconstruction():
    d = 4
    eye = np.eye(d)
    params = SaeParams(np.vstack([eye, -eye]), np.zeros(2 * d), np.hstack([eye, -eye]), np.zeros(d))
    batch = np.random.default_rng(0).normal(size=(10, d))
    assert sae_loss(params, batch, 0.0)[0] == 0.0


def test_encode_special_cases():
    p = random_params(5, 20)
    p.enc_bias[:] = 0
    assert np.array_equal(encode(p, np.zeros(5)), np.zeros(20))
    neg = SaeParams(-np.abs(p.enc_weight), np.full(20, -1.0), p.dec_weight, p.dec_bias)
    assert np.array_equal(encode(neg, np.ones(5)), np.zeros(20))
    assert np.array_equal(decode(p, np.zeros(20)), p.dec_bias)


def test_length_mismatch_errors():
    p = random_params(5, 20)
    with pytest.raises(InvalidArgumentError):
        encode(p, np.zeros(4))
    with pytest.raises(InvalidArgumentError):
        decode(p, np.zeros(19))
    with pytest.raises(InvalidArgumentError):
        sae_loss(p, np.zeros((0, 5)), 0.1)


def straight_line_encode(p, h):
    out = []
    for i in range(p.code_dim):
        s = p.enc_bias[i]
        for j in range(p.input_dim):
            s += p.enc_weight[i, j] * h[j]
        out.append(max(s, 0.0))
    return np.array(out)


def straight_line_decode(p, z):
    return np.array(
        [p.dec_bias[j] + sum(p.dec_weight[j, i] * z[i] for i in range(p.code_dim)) for j in range(p.input_dim)]
    )


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dual_implementation(seed):
    p = random_params(6, 12, seed)
    rng = np.random.default_rng(seed + 1)
    h = rng.normal(size=6)
    z = rng.normal(size=12)
    assert np.allclose(encode(p, h), straight_line_encode(p, h), atol=1e-9, rtol=0)
    assert np.allclose(decode(p, z), straight_line_decode(p, z), atol=1e-9, rtol=0)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 12, elements=st.floats(-5, 5)),
    arrays(np.float64, 12, elements=st.floats(-5, 5)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_decode_affine_identity(z1, z2, a, b):
    p = random_params(6, 12)
    lhs = decode(p, a * z1 + b * z2)
    rhs = a * decode(p, z1) + b * decode(p, z2) - (a + b - 1) * p.dec_bias
    assert np.allclose(lhs, rhs, atol=1e-9, rtol=0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)))
def test_codes_are_nonnegative(h):
    assert np.all(encode(random_params(6, 24), h) >= 0)


def test_gradients_match_autograd():
    # independent oracle: torch autograd of the same loss in float64
    p = random_params(8, 32, seed=3)
    H = np.random.default_rng(4).normal(size=(16, 8))
    lam = 0.05
    g = sae_gradients(p, H, lam)
    t = [torch.tensor(a, requires_grad=True) for a in p.arrays()]
    Ht = torch.tensor(H)
    z = torch.relu(Ht @ t[0].T + t[1])
    r = z @ t[2].T + t[3] - Ht
    loss = (r * r).sum(1).mean() / 8 + lam * z.abs().sum(1).mean()
    loss.backward()
    for ours, ref in zip(g.arrays(), t):
        assert np.allclose(ours, ref.grad.numpy(), atol=1e-12, rtol=1e-9)


def test_gradient_check_passes_desk_shape():
    p = random_params(16, 64, seed=5)
    H = np.random.default_rng(6).normal(size=(8, 16))
    assert gradient_check(p, H, 1e-3, epsilon=1e-5, n_coords=64) < 1e-4


def test_gradient_check_catches_corruption():
    # tiny problem so that n_coords draws visit every coordinate
    p = random_params(2, 4, seed=7)
    H = np.random.default_rng(8).normal(size=(6, 2))
    grads = sae_gradients(p, H, 1e-2)
    assert gradient_check(p, H, 1e-2, n_coords=300) < 1e-4
    grads.dec_bias[0] *= 2.0
    assert gradient_check(p, H, 1e-2, n_coords=300, grads=grads) > 1e-2


def test_zero_sparsity_gradients_ignore_l1():
    p = random_params(4, 8, seed=9)
    H = np.random.default_rng(10).normal(size=(5, 4))
    g0 = sae_gradients(p, H, 0.0)
    g1 = sae_gradients(p, H, 0.3)
    assert np.array_equal(g0.dec_weight, g1.dec_weight)
    assert np.array_equal(g0.dec_bias, g1.dec_bias)
    assert not np.array_equal(g0.enc_bias, g1.enc_bias)
    assert gradient_check(p, H, 0.0) < 1e-4


def test_gradient_check_epsilon_range():
    p = random_params(2, 4)
    with pytest.raises(InvalidArgumentError):
        gradient_check(p, np.ones((2, 2)), 0.1, epsilon=0.1)


def test_init_properties():
    cfg = SaeConfig(input_dim=8, expansion=4, seed=1)
    p = init_sae(cfg)
    assert p.enc_weight.shape == (32, 8) and p.dec_weight.shape == (8, 32)
    assert np.allclose(np.linalg.norm(p.dec_weight, axis=0), 1.0, atol=1e-6)
    assert not p.enc_bias.any() and not p.dec_bias.any()
    assert init_sae(cfg).equals(p)


def toy_activations(n=64, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)) @ rng.normal(size=(3, d))


def test_train_zero_epochs_returns_init():
    cfg = SaeConfig(input_dim=8, epochs=0, seed=2)
    assert train_sae(toy_activations(), cfg).equals(init_sae(cfg))


def test_train_requires_enough_vectors():
    with pytest.raises(InvalidArgumentError):
        train_sae(toy_activations(n=31), SaeConfig(input_dim=8, epochs=1))
    with pytest.raises(InvalidArgumentError):
        train_sae(toy_activations(d=7), SaeConfig(input_dim=8, epochs=1))


def test_train_is_deterministic_and_improves():
    acts = toy_activations()
    cfg = SaeConfig(input_dim=8, epochs=50, lr=0.05, seed=3)
    history = []
    a = train_sae(acts, cfg, history)
    assert a.equals(train_sae(acts, cfg))
    assert history[-1][2] < history[0][2]
    assert np.allclose(np.linalg.norm(a.dec_weight, axis=0), 1.0, atol=1e-6)
    assert all(np.all(np.isfinite(x)) for x in a.arrays())


def test_invalid_config():
    for kwargs in (dict(expansion=0), dict(sparsity_coeff=-1), dict(lr=0), dict(input_dim=0)):
        with pytest.raises(InvalidArgumentError):
            SaeConfig(**{"input_dim": 4, **kwargs})


def test_loss_monotone_at_small_lr(lm, corpus_prompts):
    acts = final_residuals_batch(lm.model, corpus_prompts[::7][:2000], 2)
    history = []
    train_sae(acts, SaeConfig(input_dim=64, lr=1e-3, epochs=100), history, compute_dtype=np.float64)
    totals = [h[2] for h in history[:-1]]
    steps = list(zip(totals, totals[1:]))
    assert sum(b <= a for a, b in steps) >= 0.95 * len(steps)


def test_sparsity_fraction():
    p = FIXTURE
    assert sparsity_fraction(p, FIXTURE_BATCH) == 0.5  # three zeros in each code


def test_checkpoint_round_trip(tmp_path):
    acts = toy_activations()
    cfg = SaeConfig(input_dim=8, epochs=20, seed=4)
    p = train_sae(acts, cfg)
    path = tmp_path / "s.ckpt"
    digest = save_sae(p, cfg, path, layer=2)
    q, cfg2, header = load_sae(path)
    assert q.equals(p) and cfg2 == cfg and header["layer"] == 2
    assert params_checksum(q) == params_checksum(p)
    assert save_sae(q, cfg2, tmp_path / "t.ckpt", layer=2) == digest


def test_checkpoint_refuses_lm_file(tmp_path, task_dir):
    with pytest.raises(CheckpointError):
        load_sae(task_dir / "lm.ckpt")
    with pytest.raises(CheckpointError):
        save_sae(random_params(2, 4), SaeConfig(input_dim=2, expansion=2), tmp_path / "x.ckpt")
