import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from marstrn.data import synth_landmarks
from marstrn.metric_losses import (LossNotAvailableError, MinedIndices, NTXentLoss, ProxyAnchorLoss,
                                   SupConLoss, all_pairs, build_loss, build_pair_batch, loss_registry,
                                   ms_mine, ntxent_loss, proxy_anchor_loss, supcon_loss)


@pytest.fixture(scope="module")
def ten():
    return synth_landmarks(10, 16, rng_seed=0)


def pair_set(a, b):
    return set(zip(np.asarray(a).tolist(), np.asarray(b).tolist()))


# -- plain-Python oracles -----------------------------------------------------

def _cos(u, v):
    return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))


def brute_force_mine(emb, labels, eps):
    n = len(labels)
    sim = [[_cos(emb[i], emb[j]) for j in range(n)] for i in range(n)]
    pos, neg = set(), set()
    for a in range(n):
        ps = [j for j in range(n) if j != a and labels[j] == labels[a]]
        pos |= {(a, j) for j in ps}
        if not ps:
            continue
        hardest = min(sim[a][j] for j in ps)
        neg |= {(a, j) for j in range(n) if labels[j] != labels[a] and sim[a][j] > hardest - eps}
    return pos, neg


def supcon_oracle(emb, labels, tau):
    n = len(labels)
    sim = [[_cos(emb[i], emb[j]) / tau for j in range(n)] for i in range(n)]
    per_anchor = []
    for i in range(n):
        ps = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not ps:
            continue
        denom = sum(math.exp(sim[i][k]) for k in range(n) if k != i)
        per_anchor.append(-sum(sim[i][j] - math.log(denom) for j in ps) / len(ps))
    return sum(per_anchor) / len(per_anchor)


# -- pair batches -------------------------------------------------------------

def test_pair_batch_shape_and_matching(ten):
    b = build_pair_batch(ten, 4, rng_seed=0)
    assert b.images.shape == (4, 1, 16, 16) and len(b) == 4
    assert len(set(b.labels.tolist())) == 2
    twin = b.twin_index
    assert sorted(twin.tolist()) == [0, 1, 2, 3]
    assert all(twin[twin[k]] == k and twin[k] != k for k in range(4))
    assert all(b.labels[k] == b.labels[twin[k]] for k in range(4))


def test_pair_batch_is_deterministic(ten):
    a, b = build_pair_batch(ten, 8, 5), build_pair_batch(ten, 8, 5)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.transforms == b.transforms


def test_pair_batch_labels_each_twice(ten):
    b = build_pair_batch(ten, 10, 1)
    _, counts = np.unique(b.labels, return_counts=True)
    assert len(counts) == 5 and (counts == 2).all()


def test_twins_use_independent_transforms(ten):
    b = build_pair_batch(ten, 8, 2)
    assert all(b.transforms[k] != b.transforms[b.twin_index[k]] for k in range(8))


@pytest.mark.parametrize("size", [3, 7, 0])
def test_pair_batch_rejects_odd_sizes(ten, size):
    with pytest.raises(ValueError):
        build_pair_batch(ten, size, 0)


def test_pair_batch_rejects_small_dataset(ten):
    with pytest.raises(ValueError):
        build_pair_batch(ten, 22, 0)


# -- miner --------------------------------------------------------------------

def test_orthogonal_classes_mine_only_twins():
    emb = torch.eye(3).repeat(2, 1)
    labels = np.array([0, 1, 2, 0, 1, 2])
    m = ms_mine(emb, labels)
    assert len(m.an) == 0 and len(m.n) == 0
    assert pair_set(m.ap, m.p) == {(k, (k + 3) % 6) for k in range(6)}


def test_hand_set_similarity_matrix_matches_brute_force():
    # a positive definite Gram matrix with unit diagonal; rows of its Cholesky factor realise it
    gram = np.array([[1.0, 0.8, 0.8, 0.3],
                     [0.8, 1.0, 0.72, 0.75],
                     [0.8, 0.72, 1.0, 0.2],
                     [0.3, 0.75, 0.2, 1.0]])
    emb = np.linalg.cholesky(gram)
    labels = [0, 1, 0, 1]
    m = ms_mine(torch.from_numpy(emb), labels, epsilon=0.1)
    pos, neg = brute_force_mine(emb.tolist(), labels, 0.1)
    assert pair_set(m.ap, m.p) == pos
    assert pair_set(m.an, m.n) == neg
    # thresholds (hardest positive - eps): 0.7, 0.65, 0.7, 0.65
    assert neg == {(0, 1), (1, 0), (1, 2), (2, 1)}


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_miner_matches_brute_force(n_pairs, seed, eps):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(2 * n_pairs, 3))
    labels = np.concatenate([np.arange(n_pairs), np.arange(n_pairs)])
    m = ms_mine(torch.from_numpy(emb), labels, eps)
    pos, neg = brute_force_mine(emb.tolist(), labels.tolist(), eps)
    assert pair_set(m.ap, m.p) == pos
    assert pair_set(m.an, m.n) == neg
    assert all(labels[a] == labels[p] for a, p in zip(m.ap, m.p))
    assert all(labels[a] != labels[n] for a, n in zip(m.an, m.n))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_miner_permutation_consistency(n_pairs, seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(2 * n_pairs, 4))
    labels = np.concatenate([np.arange(n_pairs), np.arange(n_pairs)])
    perm = rng.permutation(2 * n_pairs)
    a = ms_mine(torch.from_numpy(emb), labels)
    b = ms_mine(torch.from_numpy(emb[perm]), labels[perm])
    assert {(perm[i], perm[j]) for i, j in pair_set(b.ap, b.p)} == pair_set(a.ap, a.p)
    assert {(perm[i], perm[j]) for i, j in pair_set(b.an, b.n)} == pair_set(a.an, a.n)


def test_mined_positives_are_the_batch_twins(ten):
    b = build_pair_batch(ten, 8, 3)
    m = ms_mine(torch.randn(8, 5, generator=torch.Generator().manual_seed(0)), b.labels)
    assert pair_set(m.ap, m.p) == {(k, int(b.twin_index[k])) for k in range(8)}


def test_single_label_batch_warns(caplog):
    with caplog.at_level(logging.WARNING):
        m = ms_mine(torch.randn(4, 3), [0, 0, 0, 0])
    assert len(m.an) == 0 and len(m.ap) == 12
    assert "single-label" in caplog.text


# -- NTXent -------------------------------------------------------------------

def orthogonal_pairs():
    return torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64), \
        np.array([0, 1, 0, 1])


def test_ntxent_orthogonal_pairs_value():
    emb, labels = orthogonal_pairs()
    got = ntxent_loss(emb, all_pairs(labels), temperature=1.0, labels=labels)
    oracle = -math.log(math.e / (math.e + 2.0))
    assert oracle == pytest.approx(0.5514447139320511, abs=1e-15)
    assert float(got) == pytest.approx(oracle, abs=1e-12)


def test_ntxent_collapse_gives_log_negatives_plus_one():
    emb = torch.ones(6, 3, dtype=torch.float64)
    labels = np.array([0, 1, 2, 0, 1, 2])
    # every anchor: one positive, four negatives, all at the same similarity
    assert float(NTXentLoss(0.07)(emb, labels)) == pytest.approx(math.log(5), abs=1e-9)
    mined = ms_mine(emb, labels)
    assert len(mined.an) == 24
    assert float(NTXentLoss(0.07)(emb, labels, mined)) == pytest.approx(math.log(5), abs=1e-9)


def test_ntxent_uses_only_mined_negatives():
    emb, labels = orthogonal_pairs()
    mined = MinedIndices(np.array([0]), np.array([2]), np.array([0]), np.array([1]))
    assert float(NTXentLoss(1.0)(emb, labels, mined)) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)


def test_ntxent_decreases_as_positive_similarity_rises():
    labels = np.array([0, 1, 0, 1])
    values = []
    for angle in (1.2, 0.8, 0.4, 0.0):
        emb = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                            [math.cos(angle), 0.0, math.sin(angle)], [0.0, 1.0, 0.0]], dtype=torch.float64)
        values.append(float(NTXentLoss(0.5)(emb, labels)))
    assert all(a > b for a, b in zip(values, values[1:]))


# -- SupCon -------------------------------------------------------------------

def test_supcon_matches_oracle():
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(6, 3))
    labels = [0, 1, 2, 0, 1, 2]
    got = supcon_loss(torch.from_numpy(emb), labels, temperature=0.1)
    assert float(got) == pytest.approx(supcon_oracle(emb.tolist(), labels, 0.1), rel=1e-12)


def test_supcon_orthogonal_pairs_value():
    emb, labels = orthogonal_pairs()
    # each anchor: positive at 1, the other two views at 0; denominator excludes self
    oracle = -math.log(math.e / (math.e + 2.0))
    assert float(SupConLoss(1.0)(emb, labels)) == pytest.approx(oracle, abs=1e-12)


def test_supcon_decreases_as_positive_similarity_rises():
    labels = np.array([0, 1, 0, 1])
    values = []
    for angle in (1.2, 0.6, 0.0):
        emb = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                            [math.cos(angle), 0.0, math.sin(angle)], [0.0, 1.0, 0.0]], dtype=torch.float64)
        values.append(float(SupConLoss(0.1)(emb, labels)))
    assert values[0] > values[1] > values[2]


# -- Proxy Anchor -------------------------------------------------------------

def test_proxy_anchor_coincident_sample_value():
    proxies = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    emb = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
    got = proxy_anchor_loss(emb, [0], proxies, margin=0.1, alpha=32.0)
    # positive proxy: log(1 + e^{-a(1 - d)}); negatives averaged over both proxies, only proxy 1 has one
    oracle = math.log1p(math.exp(-32 * 0.9)) + math.log1p(math.exp(32 * 0.1)) / 2
    assert float(got) == pytest.approx(oracle, abs=1e-12)


def test_proxy_anchor_gradient_pulls_toward_proxy():
    proxies = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)

    def loss_at(theta):
        emb = torch.tensor([[math.cos(theta), math.sin(theta)]], dtype=torch.float64)
        return float(proxy_anchor_loss(emb, [0], proxies, 0.1, 32.0))

    theta, h = 0.5, 1e-6
    slope = (loss_at(theta + h) - loss_at(theta - h)) / (2 * h)
    assert slope > 0  # rotating away from proxy 0 costs more
    emb = torch.tensor([[math.cos(theta), math.sin(theta)]], dtype=torch.float64, requires_grad=True)
    proxy_anchor_loss(emb, [0], proxies, 0.1, 32.0).backward()
    step = emb.detach() - 1e-3 * emb.grad
    assert float(torch.nn.functional.cosine_similarity(step, proxies[:1])) > math.cos(theta)


def test_proxy_anchor_errors():
    proxies = torch.randn(3, 4)
    with pytest.raises(ValueError):
        proxy_anchor_loss(torch.zeros(0, 4), [], proxies)
    with pytest.raises(ValueError):
        proxy_anchor_loss(torch.randn(2, 4), [0, 3], proxies)


def test_proxy_anchor_module_has_one_proxy_per_instance():
    loss = ProxyAnchorLoss(7, 16)
    assert loss.proxies.shape == (7, 16) and loss.proxies.requires_grad


# -- shared properties --------------------------------------------------------

def _all_losses():
    torch.manual_seed(0)
    return {"ntxent": NTXentLoss(0.07), "supcon": SupConLoss(0.1),
            "proxy_anchor": ProxyAnchorLoss(4, 5).double()}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["ntxent", "supcon", "proxy_anchor"]))
def test_losses_permutation_invariant_and_finite(seed, name):
    loss = _all_losses()[name]
    rng = np.random.default_rng(seed)
    emb = torch.from_numpy(rng.normal(size=(8, 5)))
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    perm = rng.permutation(8)
    a = loss(emb, labels, ms_mine(emb, labels))
    b = loss(emb[perm], labels[perm], ms_mine(emb[perm], labels[perm]))
    assert torch.isfinite(a)
    assert float(a.detach()) == pytest.approx(float(b.detach()), rel=1e-10, abs=1e-12)


# -- registry -----------------------------------------------------------------

@pytest.mark.parametrize("name,cls", [("ntxent", NTXentLoss), ("supcon", SupConLoss),
                                      ("proxy_anchor", ProxyAnchorLoss)])
def test_mandatory_names_resolve(name, cls):
    assert loss_registry.get(name) is cls


def test_unknown_name_lists_available():
    with pytest.raises(LossNotAvailableError) as err:
        loss_registry.get("nosuch")
    for name in ("ntxent", "supcon", "proxy_anchor"):
        assert name in str(err.value)


def test_optional_without_implementation_is_not_available():
    with pytest.raises(LossNotAvailableError, match="not available"):
        loss_registry.get("pnp")


def test_optional_plugins_resolve():
    for name in ("circle", "proxy_nca_pp"):
        loss = build_loss(name, 4, 8)
        emb = torch.randn(8, 8)
        labels = np.array([0, 1, 2, 3] * 2)
        assert torch.isfinite(loss(emb, labels, ms_mine(emb, labels)))


def test_build_loss_rejects_unknown_params():
    with pytest.raises(ValueError, match="unknown parameters"):
        build_loss("ntxent", 4, 8, tau=0.1)
    assert build_loss("proxy_anchor", 4, 8, margin=0.2).margin == 0.2

