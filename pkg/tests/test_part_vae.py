"""Conditional part geometry VAE: determinism, conditioning liveness,
gradients, loss values, single-part overfit."""

import numpy as np
import pytest

from conftest import check_gradient
from fixtures import SEGMENTS, part_feature, tiny_config
from hiergen import tensor as T
from hiergen.mesh import make_box_template
from hiergen.part_vae import PartVae
from hiergen.tensor import (AdamState, GaussianParams, Tensor, adam_step,
                            zero_grads)


@pytest.fixture
def model(rng):
    return PartVae(make_box_template(SEGMENTS), cond_dim=6, geo_dim=12,
                   hidden=8, rng=rng)


@pytest.fixture
def feature():
    return part_feature((0.3, 0.2, 0.1), (0.05, 0.0, 0.2))


def test_encoder_deterministic(model, feature, rng):
    cond = Tensor(rng.normal(size=6))
    g1 = model.enc_pg(feature.per_vertex, feature.center, cond)
    g2 = model.enc_pg(feature.per_vertex, feature.center, cond)
    np.testing.assert_array_equal(g1.mu.data, g2.mu.data)
    np.testing.assert_array_equal(g1.logvar.data, g2.logvar.data)


def test_center_is_a_live_input(model, feature, rng):
    cond = Tensor(rng.normal(size=6))
    g1 = model.enc_pg(feature.per_vertex, feature.center, cond)
    g2 = model.enc_pg(feature.per_vertex, feature.center + 0.3, cond)
    assert np.abs(g1.mu.data - g2.mu.data).max() > 0


def test_vertex_count_mismatch_rejected(model, rng):
    with pytest.raises(T.ShapeError):
        model.enc_pg(np.zeros((7, 9)), np.zeros(3), Tensor(np.zeros(6)))


def test_decoder_shapes_and_determinism(model, rng):
    code = Tensor(rng.normal(size=12))
    cond = Tensor(rng.normal(size=6))
    x1, c1 = model.dec_pg(code, cond)
    x2, c2 = model.dec_pg(code, cond)
    assert x1.shape == (26, 9) and c1.shape == (3,)
    np.testing.assert_array_equal(x1.data, x2.data)
    np.testing.assert_array_equal(c1.data, c2.data)


def test_decoder_condition_is_live(model, rng):
    code = Tensor(rng.normal(size=12))
    x1, _ = model.dec_pg(code, Tensor(rng.normal(size=6)))
    x2, _ = model.dec_pg(code, Tensor(rng.normal(size=6)))
    assert np.abs(x1.data - x2.data).max() > 0


def test_encoder_gradients_match_fd(model, feature, rng):
    params = model.parameters()
    names = sorted(params)
    cond0 = rng.normal(size=6)

    def loss_from(values):
        for name, v in zip(names, values):
            params[name].data = v
        g = model.enc_pg(feature.per_vertex, feature.center, Tensor(cond0))
        return (g.mu * g.mu).sum() + (g.logvar * g.logvar).sum()

    snapshot = [params[n].data.copy() for n in names]
    loss = loss_from(snapshot)
    zero_grads(params)
    loss.backward()
    sample_rng = np.random.default_rng(0)
    for name in names:
        if not name.startswith("enc_"):
            continue
        p = params[name]
        idx = sample_rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
        for i in idx:
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + 1e-5
            hi = float(loss_from([params[n].data for n in names]).data)
            flat[i] = orig - 1e-5
            lo = float(loss_from([params[n].data for n in names]).data)
            flat[i] = orig
            fd = (hi - lo) / 2e-5
            ad = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
            denom = max(abs(ad), abs(fd), 1e-6)
            assert abs(ad - fd) / denom < 1e-4, f"{name}[{i}]"


def test_loss_values(model, feature):
    x = Tensor(feature.per_vertex)
    c = Tensor(feature.center)
    zero_post = GaussianParams(Tensor(np.zeros(12)), Tensor(np.zeros(12)))
    assert model.loss(feature.per_vertex, feature.center, x, c, zero_post).item() == 0.0

    shifted = Tensor(feature.center + np.array([0.1, 0.0, 0.0]))
    loss = model.loss(feature.per_vertex, feature.center, x, shifted, zero_post)
    assert loss.item() == pytest.approx(100.0 * 0.01)  # lambda1 * ||dc||^2 = 1.0

    one_dim = GaussianParams(Tensor([1.0]), Tensor([0.0]))
    assert model.loss(feature.per_vertex, feature.center, x, c, one_dim).item() == pytest.approx(0.5)


def test_loss_nonnegative_random(model, feature, rng):
    x_hat = Tensor(feature.per_vertex + rng.normal(0, 0.1, feature.per_vertex.shape))
    c_hat = Tensor(feature.center + rng.normal(0, 0.1, 3))
    post = GaussianParams(Tensor(rng.normal(size=12)), Tensor(rng.normal(size=12)))
    assert model.loss(feature.per_vertex, feature.center, x_hat, c_hat, post).item() > 0


def test_overfit_single_part(model, feature, rng):
    """Encoder mean -> decoder reconstructs one part after <= 2000 steps."""
    params = model.parameters()
    adam = AdamState(lr=0.005, decay_every=10 ** 9)
    cond = rng.normal(size=6)
    v = feature.per_vertex.shape[0]
    for _ in range(2000):
        zero_grads(params)
        posterior = model.enc_pg(feature.per_vertex, feature.center, Tensor(cond))
        x_hat, c_hat = model.dec_pg(posterior.mu, Tensor(cond))
        recon = (T.sum_squares(x_hat, Tensor(feature.per_vertex))
                 + T.sum_squares(c_hat, Tensor(feature.center)))
        recon.backward()
        adam_step(adam, params)
    posterior = model.enc_pg(feature.per_vertex, feature.center, Tensor(cond))
    x_hat, c_hat = model.dec_pg(posterior.mu, Tensor(cond))
    feat_mse = float(((x_hat.data - feature.per_vertex) ** 2).sum()) / (9 * v)
    assert feat_mse < 1e-4
    assert np.linalg.norm(c_hat.data - feature.center) < 1e-3
