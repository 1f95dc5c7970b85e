import numpy as np
import pytest
import torch

from oracles import central_difference, soft_overlap
from vaeattn.data import gen_shapes_dataset
from vaeattn.disentangle import (AdConfig, TcDiscriminator, ad_factorvae_loss,
                                 attention_disentanglement_loss, discriminator_loss,
                                 disentanglement_metric, factorvae_objective,
                                 mean_pairwise_overlap, pair_overlap, permute_dims,
                                 select_attention_pair, total_correlation, train_ad_factorvae)
from vaeattn.exceptions import DivergenceError, UnsupportedConfigurationError
from vaeattn.model import LatentDistribution, TrainConfig, VaeConfig, build_model, vae_loss

T = torch.tensor


@pytest.fixture(scope="module")
def small_shapes():
    return gen_shapes_dataset((3, 4, 5, 4, 4), resolution=32)


def _batch(rng, n=3):
    return torch.from_numpy(rng.uniform(0.05, 0.95, (n, 1, 8, 8)))


def _disc(d=2):
    torch.manual_seed(0)
    return TcDiscriminator(d, hidden=16, layers=2).double()


# -- L_AD -----------------------------------------------------------------------

def test_lad_examples():
    a = T([[1.0, 2.0], [0.5, 0.0]])
    assert float(attention_disentanglement_loss(a, a)) == 1.0
    assert float(attention_disentanglement_loss(T([[1.0, 0.0]]), T([[0.0, 3.0]]))) == 0.0
    assert float(attention_disentanglement_loss(T([[1.0, 0.0]], dtype=torch.float64), T([[1.0, 1.0]]))) == 2 / 3
    assert float(attention_disentanglement_loss(torch.zeros(2, 2), torch.zeros(2, 2))) == 0.0


def test_lad_matches_loop_oracle(rng):
    a, b = rng.uniform(size=(2, 5, 7))
    assert float(attention_disentanglement_loss(T(a), T(b))) == pytest.approx(
        soft_overlap(a, b), abs=1e-12)


def test_lad_batched_and_errors():
    maps = torch.rand(4, 3, 3)
    out = attention_disentanglement_loss(maps, maps.flip(0))
    assert out.shape == (4,)
    with pytest.raises(ValueError, match="nonnegative"):
        attention_disentanglement_loss(T([[-1.0]]), T([[1.0]]))
    with pytest.raises(ValueError, match="shapes"):
        attention_disentanglement_loss(torch.ones(2, 2), torch.ones(3, 3))


def test_lad_subgradient_matches_fd(rng):
    a = T(rng.uniform(0.1, 1, (4, 4))).requires_grad_()
    b = T(rng.uniform(0.1, 1, (4, 4)))
    assert not torch.isclose(a, b).any()
    (g,) = torch.autograd.grad(attention_disentanglement_loss(a, b), a)
    fd = central_difference(lambda v: attention_disentanglement_loss(v, b), a.detach())
    assert torch.allclose(g, fd, atol=1e-5)


# -- pair selection -----------------------------------------------------------------

def test_select_top2():
    assert select_attention_pair(np.array([0.1, -3.0, 2.0])) == (1, 2)
    z = np.array([[0.1, -3.0, 2.0], [5.0, 0.0, 1.0]])
    assert select_attention_pair(z * 5).tolist() == select_attention_pair(z).tolist()
    # ties go to the lower index
    assert select_attention_pair(np.array([1.0, 1.0, 1.0])) == (0, 1)


def test_select_fixed_and_all():
    assert select_attention_pair(np.array([9.0, 0.0, 0.0]), (2, 1)) == (2, 1)
    assert select_attention_pair(np.zeros((2, 3)), "all") == [(0, 1), (0, 2), (1, 2)]
    with pytest.raises(ValueError):
        select_attention_pair(np.zeros(3), (0, 3))
    with pytest.raises(ValueError):
        select_attention_pair(np.zeros(1))
    with pytest.raises(ValueError):
        AdConfig(pair_selection=(1, 1))
    with pytest.raises(ValueError):
        AdConfig(ad_lambda=-0.1)


def test_pair_overlap_uses_selected_pair():
    maps = torch.zeros(1, 3, 2, 2)
    maps[0, 0, 0, 0] = maps[0, 1, 0, 0] = 1.0
    maps[0, 2, 1, 1] = 1.0
    assert float(pair_overlap(maps, T([[3.0, 2.0, 0.0]]))) == 1.0
    assert float(pair_overlap(maps, T([[3.0, 0.0, 2.0]]))) == 0.0
    assert float(pair_overlap(maps, T([[0.0, 0.0, 0.0]]), "all")) == pytest.approx(1 / 3)


# -- FactorVAE pieces -------------------------------------------------------------------

def test_permute_dims_columns_are_permutations():
    z = torch.arange(40.0).reshape(10, 4)
    p = permute_dims(z, seed=1)
    for j in range(4):
        assert sorted(p[:, j].tolist()) == z[:, j].tolist()
    assert not torch.equal(p, z)


def test_gamma_zero_reduces_to_vae_loss(tiny_model, rng):
    x = _batch(rng)
    noise = torch.from_numpy(rng.standard_normal((3, 2)))
    terms = factorvae_objective(tiny_model, x, _disc(), 0.0, beta=0.5, noise=noise)
    mu, logvar, _ = tiny_model.encode(x)
    ref = vae_loss(x, tiny_model.decode(mu + torch.exp(0.5 * logvar) * noise),
                   LatentDistribution(mu, logvar), 0.5, "sum")
    assert terms.total.item() == ref.total.item()
    with pytest.raises(ValueError):
        factorvae_objective(tiny_model, x[:1], _disc(), 1.0)


def test_lambda_zero_is_bitwise_factorvae(tiny_model, rng):
    x = _batch(rng)
    noise = torch.from_numpy(rng.standard_normal((3, 2)))
    disc = _disc()
    fv = factorvae_objective(tiny_model, x, disc, 5.0, noise=noise).total
    g_fv = torch.autograd.grad(fv, list(tiny_model.parameters()))
    total, comps = ad_factorvae_loss(tiny_model, x, disc, AdConfig(ad_lambda=0.0), 5.0,
                                     noise=noise)
    g_ad = torch.autograd.grad(total, list(tiny_model.parameters()))
    assert total.item() == fv.item() and float(comps["ad"]) == 0.0
    assert all(torch.equal(a, b) for a, b in zip(g_fv, g_ad))


def test_duplicate_latents_contribute_exactly_one(rng):
    model = build_model(VaeConfig.tiny(), seed=3, dtype=torch.float64)
    with torch.no_grad():
        model.head.weight[1] = model.head.weight[0]
        model.head.bias[1] = model.head.bias[0]
    x = _batch(rng)
    disc, noise = _disc(), torch.zeros(3, 2, dtype=torch.float64)
    cfg = AdConfig(ad_lambda=1.0, sampling="mu")
    total, comps = ad_factorvae_loss(model, x, disc, cfg, 1.0, noise=noise)
    base = factorvae_objective(model, x, disc, 1.0, noise=noise).total
    assert comps["ad"].item() == 1.0
    assert (total - base).item() == pytest.approx(1.0, abs=1e-12)


def test_double_backprop_gradient_matches_fd(tiny_model, rng):
    x = _batch(rng, 2)
    noise = torch.from_numpy(rng.standard_normal((2, 2)))
    cfg = AdConfig(ad_lambda=1.0, pair_selection=(0, 1))
    w = tiny_model.stages[0].conv.weight

    def lad():
        return ad_factorvae_loss(tiny_model, x, _disc(), cfg, 0.0, noise=noise)[1]["ad"]

    (g,) = torch.autograd.grad(lad(), [w])
    fd = torch.zeros_like(w)
    with torch.no_grad():
        flat, gflat = w.view(-1), fd.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + 1e-6
            with torch.enable_grad():
                hi = lad().item()
            flat[k] = orig - 1e-6
            with torch.enable_grad():
                lo = lad().item()
            flat[k] = orig
            gflat[k] = (hi - lo) / 2e-6
    assert g.abs().max() > 1e-4
    assert ((g - fd).abs().max() / fd.abs().max()) < 1e-3


def test_detached_encoder_is_unsupported(tiny_model, rng):
    tiny_model.stages.requires_grad_(False)
    x = _batch(rng)
    with pytest.raises(UnsupportedConfigurationError):
        ad_factorvae_loss(tiny_model, x, _disc(), AdConfig(), 1.0,
                          noise=torch.zeros(3, 2, dtype=torch.float64))
    with pytest.raises(UnsupportedConfigurationError):
        ad_factorvae_loss(tiny_model, x, _disc(), AdConfig(layer="conv9"), 1.0)


def test_tc_near_zero_on_independent_codes():
    torch.manual_seed(0)
    disc = TcDiscriminator(4, hidden=64, layers=2)
    opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(0)
    for _ in range(400):
        z = torch.randn(256, 4, generator=gen)
        opt.zero_grad()
        discriminator_loss(disc, z, permute_dims(z, gen)).backward()
        opt.step()
    with torch.no_grad():
        tc = float(total_correlation(disc, torch.randn(20000, 4, generator=gen)))
    assert abs(tc) < 0.1


def test_tc_positive_on_correlated_codes():
    torch.manual_seed(0)
    disc = TcDiscriminator(2, hidden=64, layers=2)
    opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(0)

    def draw(n):
        a = torch.randn(n, 1, generator=gen)
        return torch.cat([a, a + 0.3 * torch.randn(n, 1, generator=gen)], 1)

    for _ in range(400):
        z = draw(256)
        opt.zero_grad()
        discriminator_loss(disc, z, permute_dims(z, gen)).backward()
        opt.step()
    with torch.no_grad():
        tc = float(total_correlation(disc, draw(20000)))
    # true TC is -0.5 log(1 - rho^2), about 1.2 nats here
    assert tc > 0.5


# -- metric -------------------------------------------------------------------------

def test_metric_oracle_encoder_is_perfect(small_shapes):
    rep = disentanglement_metric(lambda imgs, f: f.astype(float), small_shapes, 100, 16, 0,
                                 n_global=500)
    assert rep.score == 1.0
    assert rep.classifier.tolist() == [0, 1, 2, 3, 4]
    assert rep.votes.sum() == 100 and rep.recon_error is None


def test_metric_random_encoder_is_chance(small_shapes):
    def noise(imgs, f):
        return np.random.default_rng(len(imgs) + int(f.sum())).standard_normal((len(imgs), 5))

    rep = disentanglement_metric(noise, small_shapes, 500, 8, 1, n_global=500)
    assert abs(rep.score - 0.2) < 0.05


def test_metric_skips_collapsed_dims(small_shapes):
    def codes(imgs, f):
        return np.concatenate([np.zeros((len(f), 1)), f.astype(float)], axis=1)

    rep = disentanglement_metric(codes, small_shapes, 50, 16, 0, n_global=500)
    assert not rep.active[0] and rep.active[1:].all()
    assert rep.votes[:, 0].sum() == 0 and rep.score == 1.0


def test_metric_reproducible(small_shapes):
    def enc(imgs, f):
        return imgs.reshape(len(imgs), -1)[:, ::97]

    a = disentanglement_metric(enc, small_shapes, 40, 8, 7, n_global=200)
    b = disentanglement_metric(enc, small_shapes, 40, 8, 7, n_global=200)
    assert a.score == b.score and np.array_equal(a.votes, b.votes)


# -- training ---------------------------------------------------------------------------

def _train(shapes, lam, steps=6, **kw):
    X = shapes.images(shapes.random_ordinals(64, 0))
    cfg = VaeConfig.small((32, 32, 1), 3, (8, 8), hidden=16)
    return train_ad_factorvae(X, cfg, AdConfig(ad_lambda=lam), gamma=2.0,
                              train=TrainConfig(n_steps=steps, batch_size=16), seed=0, **kw)


def test_lambda_zero_trace_equals_factorvae(small_shapes):
    ck_a, tr_a = _train(small_shapes, 0.0, eval_every=2)
    ck_b, tr_b = _train(small_shapes, 0.0, eval_every=2)
    assert tr_a == tr_b and len(tr_a) == 3
    assert all(row["L_AD"] == 0.0 for row in tr_a)
    assert ck_a.checksum() == ck_b.checksum()
    _, tr_c = _train(small_shapes, 1.0, eval_every=2)
    assert tr_c[0]["L_AD"] > 0 and tr_c[0]["total"] != tr_a[0]["total"]


def test_training_trace_fields(small_shapes):
    ev = small_shapes.images(small_shapes.random_ordinals(8, 1))
    rows = []
    ck, trace = _train(small_shapes, 1.0, steps=4, eval_every=2, eval_images=ev,
                       factor_dataset=small_shapes,
                       metric_kwargs={"n_votes": 10, "batch_per_vote": 4, "n_global": 50},
                       callback=rows.append)
    assert rows == trace and [r["step"] for r in trace] == [2, 4]
    for key in ("L_r", "L_KL", "TC", "L_AD", "metric", "recon_error", "eval_L_AD"):
        assert np.isfinite(trace[-1][key])
    assert 0 <= trace[-1]["metric"] <= 1 and 0 <= trace[-1]["eval_L_AD"] <= 1
    assert ck.meta["kind"] == "ad-factorvae" and ck.meta["trace"] == trace
    assert any(k.startswith("discriminator.") for k in ck.extras)
    assert mean_pairwise_overlap(ck, ev) == pytest.approx(trace[-1]["eval_L_AD"])


def test_training_divergence(small_shapes, monkeypatch):
    import vaeattn.disentangle as dis

    real, calls = dis.ad_factorvae_loss, []

    def poisoned(*args, **kw):
        total, comps = real(*args, **kw)
        calls.append(1)
        return (total * float("nan") if len(calls) == 3 else total), comps

    monkeypatch.setattr(dis, "ad_factorvae_loss", poisoned)
    with pytest.raises(DivergenceError, match="step 2") as info:
        _train(small_shapes, 1.0, steps=5, eval_every=1)
    snap = info.value.checkpoint
    assert [r["step"] for r in snap.meta["trace"]] == [1, 2]
    assert all(np.isfinite(v).all() for v in snap.parameters.values())
