import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vsl.errors import ShapeError
from vsl.latent_hierarchy import (HIDDEN_WIDTH, GaussianParams,
                                  HierarchyConfig, LatentState,
                                  PosteriorChain, PriorChain, clamp_log_var,
                                  concat_codes, reparameterize,
                                  sample_generative, split_latent)
from vsl.seeding import make_generator


def test_config_total_dim_and_validation():
    cfg = HierarchyConfig(n_local=5, d_local=10, d_global=20)
    assert cfg.total_dim == 70
    assert HierarchyConfig(5, 5, 10).total_dim == 35
    assert HierarchyConfig(3, 2, 5).total_dim == 11
    with pytest.raises(ShapeError):
        HierarchyConfig(n_local=0, d_local=1, d_global=1)


def test_gaussian_params_shape_check_and_clamp():
    with pytest.raises(ShapeError):
        GaussianParams(mu=torch.zeros(3), log_var=torch.zeros(4))
    lv = clamp_log_var(torch.tensor([-50.0, 0.0, 50.0]))
    assert lv.tolist() == [-10.0, 0.0, 10.0]


def test_reparameterize_matches_formula():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(2, 5))
    lv = rng.normal(size=(2, 5))
    eps = rng.normal(size=(2, 5))
    params = GaussianParams(mu=torch.tensor(mu), log_var=torch.tensor(lv))
    got = reparameterize(params, torch.tensor(eps)).numpy()
    np.testing.assert_allclose(got, mu + np.exp(0.5 * lv) * eps, rtol=1e-12)
    # zero noise lands exactly on the mean
    z = reparameterize(params, torch.zeros(2, 5, dtype=torch.float64))
    assert torch.equal(z, params.mu)
    with pytest.raises(ShapeError, match="noise"):
        reparameterize(params, torch.zeros(2, 4, dtype=torch.float64))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 4), dl=st.integers(1, 5), dg=st.integers(1, 6),
       batch=st.integers(1, 3))
def test_concat_split_roundtrip(n, dl, dg, batch):
    cfg = HierarchyConfig(n_local=n, d_local=dl, d_global=dg)
    z = torch.randn(batch, cfg.total_dim, generator=make_generator(1))
    z0, locals_ = split_latent(z, cfg)
    assert z0.shape == (batch, dg)
    assert all(c.shape == (batch, dl) for c in locals_)
    assert torch.equal(concat_codes(z0, locals_), z)


def test_split_rejects_wrong_length():
    with pytest.raises(ShapeError):
        split_latent(torch.zeros(2, 9), HierarchyConfig(2, 3, 4))


def _chain(cfg=None, feature_dim=12, seed=0):
    cfg = cfg or HierarchyConfig(n_local=3, d_local=2, d_global=4)
    gen = make_generator(seed)
    return cfg, PosteriorChain(cfg, feature_dim, gen), PriorChain(cfg, gen)


def test_posterior_chain_shapes_and_param_count():
    cfg, post, _ = _chain()
    feats = torch.randn(5, 12, generator=make_generator(1))
    state = post(feats, generator=make_generator(2))
    assert state.z0.shape == (5, 4)
    assert len(state.local_codes) == 3
    assert all(c.shape == (5, 2) for c in state.local_codes)
    assert state.z.shape == (5, cfg.total_dim)
    assert len(state.posterior_params) == 4  # z0 first, then locals
    assert torch.equal(state.z, concat_codes(state.z0, state.local_codes))


def test_posterior_chain_zero_noise_hits_means():
    _, post, _ = _chain()
    feats = torch.randn(2, 12, generator=make_generator(3))
    state = post(feats, deterministic=True)
    assert torch.equal(state.z0, state.posterior_params[0].mu)
    for code, q in zip(state.local_codes, state.posterior_params[1:]):
        assert torch.equal(code, q.mu)


def test_posterior_chain_deterministic_given_generator():
    _, post, _ = _chain()
    feats = torch.randn(2, 12, generator=make_generator(4))
    a = post(feats, generator=make_generator(9))
    b = post(feats, generator=make_generator(9))
    assert torch.equal(a.z, b.z)


def test_posterior_chain_explicit_noise():
    cfg, post, _ = _chain()
    feats = torch.zeros(1, 12)
    noise = [torch.zeros(1, 4)] + [torch.zeros(1, 2)] * 3
    state = post(feats, noise=noise)
    assert torch.isfinite(state.z).all()  # bias-driven but finite
    ref = post(feats, deterministic=True)
    assert torch.equal(state.z, ref.z)
    with pytest.raises(ShapeError, match="noise"):
        post(feats, noise=noise[:-1])
    with pytest.raises(ShapeError, match="noise"):
        post(feats, noise=[torch.zeros(1, 5)] + noise[1:])


def test_posterior_chain_rejects_wrong_feature_dim():
    _, post, _ = _chain()
    with pytest.raises(ShapeError, match="features"):
        post(torch.zeros(2, 13))


def test_identical_inputs_give_identical_rows():
    _, post, _ = _chain()
    feats = torch.randn(1, 12, generator=make_generator(5)).repeat(3, 1)
    state = post(feats, deterministic=True)
    assert torch.equal(state.z[0], state.z[1])
    assert torch.equal(state.z[1], state.z[2])


def test_local_heads_have_two_100_unit_layers_at_default_width():
    cfg = HierarchyConfig(n_local=2, d_local=3, d_global=4)
    post = PosteriorChain(cfg, feature_dim=20, generator=make_generator(0))
    head = post.local_heads[0]
    assert len(head.trunk) == 2
    assert head.trunk[0].weight.shape == (HIDDEN_WIDTH, 20 + 4)
    assert head.trunk[1].weight.shape == (HIDDEN_WIDTH, HIDDEN_WIDTH)
    # z0 head is a single affine layer over the features
    assert len(post.global_head.trunk) == 0
    assert post.global_head.head.weight.shape == (2 * 4, 20)
    # second local code additionally sees the previous code
    assert post.local_heads[1].trunk[0].weight.shape == (HIDDEN_WIDTH, 20 + 4 + 3)


def test_prior_chain_conditions_on_z0_and_previous_code():
    cfg, post, prior = _chain()
    feats = torch.randn(2, 12, generator=make_generator(6))
    state = post(feats, generator=make_generator(7))
    priors = prior(state)
    assert len(priors) == 3
    assert all(p.mu.shape == (2, 2) for p in priors)

    # perturbing z0 must move every local prior mean
    bumped = LatentState(z0=state.z0 + 0.7, local_codes=state.local_codes)
    priors_b = prior(bumped)
    for p, pb in zip(priors, priors_b):
        assert not torch.allclose(p.mu, pb.mu)

    # perturbing z_{i-1} must move prior i (and only the chain after it
    # in terms of the direct input)
    codes = [c.clone() for c in state.local_codes]
    codes[0] = codes[0] + 0.9
    priors_c = prior(LatentState(z0=state.z0, local_codes=codes))
    assert torch.equal(priors_c[0].mu, priors[0].mu)  # prior 1 ignores z1
    assert not torch.allclose(priors_c[1].mu, priors[1].mu)


def test_prior_chain_rejects_wrong_code_count():
    cfg, post, prior = _chain()
    state = LatentState(z0=torch.zeros(1, 4), local_codes=[torch.zeros(1, 2)])
    with pytest.raises(ShapeError):
        prior(state)


def test_sample_generative_shapes_and_determinism():
    cfg, _, prior = _chain()
    decoded = []

    def decode(z):
        decoded.append(z)
        return torch.sigmoid(z.sum(dim=1, keepdim=True))

    out_a, state_a = sample_generative(cfg, prior, decode,
                                       generator=make_generator(11), batch=4)
    out_b, state_b = sample_generative(cfg, prior, decode,
                                       generator=make_generator(11), batch=4)
    assert torch.equal(state_a.z, state_b.z)
    assert torch.equal(out_a, out_b)
    assert state_a.z.shape == (4, cfg.total_dim)
    assert state_a.prior_params is not None
    assert len(state_a.prior_params) == cfg.n_local
    assert decoded[0].shape == (4, cfg.total_dim)
