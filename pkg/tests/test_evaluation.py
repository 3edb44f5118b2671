import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vqplan import evaluation as ev

values = arrays(np.float64, st.integers(2, 25), elements=st.floats(-50, 50, allow_nan=False))


def _brute_kmeans(v):
    best = (np.inf, None)
    n = len(v)
    for mask in range(1, 2 ** n - 1):
        lab = np.array([(mask >> i) & 1 for i in range(n)])
        a, b = v[lab == 0], v[lab == 1]
        cost = np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2)
        best = min(best, (cost, None), key=lambda t: t[0])
    return best[0]


@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50, allow_nan=False)))
def test_kmeans_cost_matches_exhaustive_search(v):
    labels, centers = ev.kmeans_1d(v)
    cost = sum(np.sum((v[labels == c] - v[labels == c].mean()) ** 2) for c in (0, 1) if np.any(labels == c))
    assert cost <= _brute_kmeans(v) + 1e-9 * (1 + np.sum(v ** 2))
    assert centers[0] <= centers[1]


def _silhouette_oracle(v, lab):
    n = len(v)
    s = np.zeros(n)
    for i in range(n):
        same = [j for j in range(n) if lab[j] == lab[i] and j != i]
        if not same:
            continue
        a = np.mean([abs(v[i] - v[j]) for j in same])
        b = min(np.mean([abs(v[i] - v[j]) for j in range(n) if lab[j] == c])
                for c in set(lab.tolist()) if c != lab[i])
        s[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return s.mean()


@given(values, st.integers(0, 2 ** 31))
def test_silhouette_matches_quadratic_oracle(v, seed):
    lab = np.random.default_rng(seed).integers(0, 2, v.size)
    lab[0], lab[-1] = 0, 1
    assert abs(ev.silhouette_1d(v, lab) - _silhouette_oracle(v, lab)) <= 1e-9


def test_two_well_separated_modes_are_bimodal():
    rng = np.random.default_rng(0)
    v = np.concatenate([rng.normal(0, 0.3, 400), rng.normal(8, 0.3, 600)])
    r = ev.modality_report(v)
    np.testing.assert_allclose(r.fractions, [0.4, 0.6])
    assert r.bimodal(4.0)
    assert not ev.modality_report(rng.normal(0, 1, 1000)).bimodal(4.0)


def test_episode_seed_is_stable_and_distinct():
    assert ev.episode_seed(0, 1) == ev.episode_seed(0, 1)
    seeds = {ev.episode_seed(s, e) for s in range(3) for e in range(50)}
    assert len(seeds) == 150
