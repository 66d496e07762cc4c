import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmoe.model import Decoder, decoder_forward
from mmoe.vocab_gw import (GeometryError, MetricSpace, SinkhornError, VocabLayout,
                           barycentric_objective, barycentric_project, cooccurrence_vectors,
                           entropic_gw_coupling, expand_matrix, expand_vocabulary, gw_objective,
                           image_side_geometry, init_new_rows, load_codebook, load_coupling,
                           pairwise_distance_matrix, round_to_marginals, save_codebook,
                           save_coupling, sinkhorn_log)

from conftest import tiny_config


def separated_points(n, seed, min_dist=0.5, box=2.0, dim=2):
    """Rejection-sampled points with a guaranteed minimum spacing.

    Entropic ties blur the coupling when two points are nearly at the same
    distance profile, so the permutation tests use well-separated sets.
    """
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        c = rng.uniform(0, box, size=dim)
        if all(np.linalg.norm(c - q) >= min_dist for q in pts):
            pts.append(c)
    return np.array(pts)


def brute_force_best_permutation(D1, D2):
    n = D1.shape[0]
    best, arg = np.inf, None
    for perm in itertools.permutations(range(n)):
        T = np.zeros((n, n))
        T[np.arange(n), perm] = 1.0 / n
        val = gw_objective(D1, D2, T)
        if val < best:
            best, arg = val, perm
    return best, arg


# -- expansion -----------------------------------------------------------------

def test_expand_matrix_preserves_rows_and_dtype():
    m = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    out = expand_matrix(m, 4)
    assert out.dtype == np.float32 and out.shape == (9, 3)
    assert np.array_equal(out[:5], m) and np.all(out[5:] == 0)


def test_desk_layout_arithmetic():
    assert VocabLayout(512, 256, 2, 128).added_per_matrix == 33_024


def test_full_scale_layout_arithmetic():
    layout = VocabLayout(32000, 16384, 2, 4096)
    assert layout.T == 16386
    assert layout.added_per_matrix == 67_117_056


def _expanded(seed=0, tie=False):
    model = Decoder.init(tiny_config(tie_head=tie), seed=seed)
    before = {k: v.data.copy() for k, v in model.params.items()}
    expand_vocabulary(model, VocabLayout(20, 4, 2, 16))
    return model, before


def test_expansion_conserves_rows_and_text_logits():
    model = Decoder.init(tiny_config(), seed=0)
    ids = np.array([1, 4, 7, 2, 9])
    ref = decoder_forward(model, ids).data
    expand_vocabulary(model, VocabLayout(20, 4, 2, 16))
    assert model.params["embed"].shape == (26, 16) and model.params["head"].shape == (26, 16)
    out = decoder_forward(model, ids).data
    assert np.max(np.abs(out[:, :20] - ref)) <= 1e-12
    assert model.params["embed"].row_mask.tolist() == [False] * 20 + [True] * 6


def test_double_expansion_rejected():
    model, _ = _expanded()
    with pytest.raises(ValueError, match="already"):
        expand_vocabulary(model, VocabLayout(20, 4, 2, 16))


def test_layout_mismatch_rejected():
    model = Decoder.init(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        expand_vocabulary(model, VocabLayout(21, 4, 2, 16))


@pytest.mark.parametrize("scheme", ["random", "mean"])
def test_init_schemes_keep_text_rows(scheme):
    model, before = _expanded()
    init_new_rows(model, scheme, seed=3)
    for name in ("embed", "head"):
        assert np.array_equal(model.params[name].data[:20], before[name])


def test_mean_scheme_rows_equal_text_mean():
    model, before = _expanded()
    init_new_rows(model, "mean")
    for name in ("embed", "head"):
        new = model.params[name].data[20:]
        assert np.max(np.abs(new - before[name].mean(axis=0))) <= 1e-12


def test_random_scheme_reproducible_and_std_matched():
    model = Decoder.init(tiny_config(vocab_text=400, d_model=32), seed=0)
    expand_vocabulary(model, VocabLayout(400, 398, 2, 32))
    init_new_rows(model, "random", seed=11)
    a = model.params["embed"].data[400:].copy()
    text_std = model.params["embed"].data[:400].std()
    assert abs(a.std() / text_std - 1) < 0.05
    other = Decoder.init(tiny_config(vocab_text=400, d_model=32), seed=0)
    expand_vocabulary(other, VocabLayout(400, 398, 2, 32))
    init_new_rows(other, "random", seed=11)
    assert np.array_equal(a, other.params["embed"].data[400:])


def test_init_error_paths():
    model = Decoder.init(tiny_config(), seed=0)
    with pytest.raises(ValueError, match="expand"):
        init_new_rows(model, "mean")
    model, _ = _expanded()
    with pytest.raises(ValueError, match="geometry"):
        init_new_rows(model, "gw")
    with pytest.raises(GeometryError):
        init_new_rows(model, "gw", geometry=MetricSpace(np.zeros((1, 1))))


def test_gw_scheme_rows_in_convex_hull():
    model, before = _expanded()
    E = before["embed"]
    geometry = pairwise_distance_matrix(E[[0, 3, 7, 11, 15, 19]])
    init_new_rows(model, "gw", geometry=geometry, gw_options={"epsilon": 1e-2})
    for name in ("embed", "head"):
        new = model.params[name].data[20:]
        text = before[name]
        assert np.all(new >= text.min(axis=0) - 1e-12) and np.all(new <= text.max(axis=0) + 1e-12)
        assert np.array_equal(model.params[name].data[:20], text)


def test_tied_head_initialized_once():
    model, _ = _expanded(tie=True)
    init_new_rows(model, "mean")
    assert "head" not in model.params and model.head is model.params["embed"]


# -- metric spaces ---------------------------------------------------------------

def test_distance_trivial_cases():
    assert np.array_equal(pairwise_distance_matrix(np.ones((2, 3))).D, np.zeros((2, 2)))
    D = pairwise_distance_matrix(np.eye(2)).D
    assert D[0, 1] == pytest.approx(np.sqrt(2))


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_distance_matches_double_loop(metric):
    X = np.random.default_rng(0).normal(size=(5, 3))
    D = pairwise_distance_matrix(X, metric).D
    for i in range(5):
        for j in range(5):
            if metric == "euclidean":
                ref = np.sqrt(sum((X[i, k] - X[j, k]) ** 2 for k in range(3)))
            else:
                dot = sum(X[i, k] * X[j, k] for k in range(3))
                ref = 1 - dot / np.sqrt(sum(x * x for x in X[i]) * sum(x * x for x in X[j]))
                ref = 0.0 if i == j else ref
            assert D[i, j] == pytest.approx(ref, abs=1e-12)


def test_distance_errors():
    with pytest.raises(GeometryError, match="zero norm"):
        pairwise_distance_matrix(np.array([[1.0, 0], [0, 0]]), "cosine")
    with pytest.raises(GeometryError):
        pairwise_distance_matrix(np.ones((1, 3)))
    with pytest.raises(GeometryError):
        MetricSpace(np.array([[0, 1.0], [2.0, 0]]))


# -- solver ---------------------------------------------------------------------

def test_gw_objective_matches_quadruple_loop():
    rng = np.random.default_rng(1)
    D1 = pairwise_distance_matrix(rng.normal(size=(3, 2))).D
    D2 = pairwise_distance_matrix(rng.normal(size=(4, 2))).D
    T = rng.random((3, 4))
    T /= T.sum()
    ref = sum((D1[i, k] - D2[j, l]) ** 2 * T[i, j] * T[k, l]
              for i in range(3) for j in range(4) for k in range(3) for l in range(4))
    # the closed form uses the marginals of T itself
    assert gw_objective(D1, D2, T) == pytest.approx(ref, rel=1e-12)


def test_identical_four_point_spaces():
    X = separated_points(4, 0)
    sp = pairwise_distance_matrix(X)
    res = entropic_gw_coupling(sp, pairwise_distance_matrix(X), eps=1e-2)
    G = res.coupling.gamma
    assert res.objective < 1e-3
    assert np.all(G.max(axis=1) / G.sum(axis=1) >= 0.9)
    assert sorted(G.argmax(axis=1).tolist()) == [0, 1, 2, 3]
    best, _ = brute_force_best_permutation(sp.D, sp.D)
    assert best == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("n,seed", [(4, 1), (5, 2), (6, 3), (6, 4)])
def test_planted_permutation_recovered(n, seed):
    X = separated_points(n, seed)
    perm = np.random.default_rng(seed + 100).permutation(n)
    src = pairwise_distance_matrix(X)
    dst = pairwise_distance_matrix(X[np.argsort(perm)])  # dst point perm[i] is src point i
    res = entropic_gw_coupling(src, dst, eps=1e-2)
    assert res.coupling.marginal_error() < 1e-6
    assert res.objective < 1e-3
    best, arg = brute_force_best_permutation(src.D, dst.D)
    assert best < 1e-12
    assert res.coupling.gamma.argmax(axis=1).tolist() == list(perm)
    assert list(arg) == list(perm)


@pytest.mark.parametrize("n", [8, 12, 16])
def test_isometry_null_case_desk_sizes(n):
    X = separated_points(n, n, min_dist=0.8, box=4.0)
    res = entropic_gw_coupling(pairwise_distance_matrix(X), pairwise_distance_matrix(X), eps=1e-2)
    assert res.objective < 1e-3


@given(st.integers(0, 10_000), st.integers(2, 7), st.integers(2, 7),
       st.sampled_from([5e-3, 1e-2, 5e-2]))
@settings(max_examples=25, deadline=None)
def test_marginals_and_monotone_descent(seed, n, m, eps):
    rng = np.random.default_rng(seed)
    src = pairwise_distance_matrix(rng.normal(size=(n, 2)))
    dst = pairwise_distance_matrix(rng.normal(size=(m, 3)))
    res = entropic_gw_coupling(src, dst, eps=eps)  # raises on any increase
    assert res.coupling.marginal_error() < 1e-6
    assert np.all(res.coupling.gamma >= 0)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * np.maximum(1.0, np.abs(h[:-1])))


def test_descent_near_vertex_plan():
    # inner plan close to a vertex: the dual line search alone stalls at a 2e-10 residual
    rng = np.random.default_rng(126)
    src = pairwise_distance_matrix(rng.normal(size=(7, 2)))
    dst = pairwise_distance_matrix(rng.normal(size=(5, 3)))
    h = np.array(entropic_gw_coupling(src, dst, eps=1e-2).history)
    assert np.all(np.diff(h) <= 1e-9 * np.maximum(1.0, np.abs(h[:-1])))


def test_one_point_spaces():
    one = MetricSpace(np.zeros((1, 1)))
    res = entropic_gw_coupling(one, MetricSpace(np.zeros((1, 1))), eps=1e-2)
    assert res.coupling.gamma.tolist() == [[1.0]] and res.objective == 0.0


def test_epsilon_must_be_positive():
    sp = pairwise_distance_matrix(np.eye(3))
    with pytest.raises(ValueError):
        entropic_gw_coupling(sp, sp, eps=0.0)


def test_fallbacks_reach_marginals_with_tiny_budget():
    X = separated_points(6, 0)
    sp = pairwise_distance_matrix(X * 50)
    res = entropic_gw_coupling(sp, sp, eps=1e-3, max_sinkhorn=1, check_monotone=False)
    np.testing.assert_allclose(res.coupling.gamma.sum(axis=1), 1 / 6, atol=1e-9)


def test_nonconvergent_sinkhorn_raises_with_advice(monkeypatch):
    import mmoe.vocab_gw as vg

    def stuck(cost, p, q, eps, *a, **kw):
        return np.outer(p, q), np.zeros(len(p)), np.zeros(len(q)), 0.5

    monkeypatch.setattr(vg, "sinkhorn_log", stuck)
    sp = pairwise_distance_matrix(separated_points(4, 0))
    with pytest.raises(SinkhornError, match="increase epsilon"):
        vg.entropic_gw_coupling(sp, sp, eps=1e-2)


def test_sinkhorn_plan_matches_marginals():
    rng = np.random.default_rng(0)
    cost = rng.random((5, 7))
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(7))
    T, _, _, viol = sinkhorn_log(cost, p, q, 0.05)
    assert viol < 1e-10
    np.testing.assert_allclose(T.sum(axis=1), p, atol=1e-10)


def test_rounding_reaches_exact_marginals():
    rng = np.random.default_rng(0)
    p, q = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(6))
    T = np.outer(p, q) * (1 + 0.05 * rng.normal(size=(4, 6)))
    R = round_to_marginals(np.abs(T), p, q)
    np.testing.assert_allclose(R.sum(axis=1), p, atol=1e-15)
    np.testing.assert_allclose(R.sum(axis=0), q, atol=1e-15)
    assert np.all(R >= 0)


# -- barycentric projection --------------------------------------------------------

def test_identity_coupling_copies_rows():
    E = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(barycentric_project(np.eye(4) / 4, E), E, atol=1e-15)


def test_split_column_gives_midpoint():
    E = np.array([[0.0, 2.0], [4.0, 6.0], [9.0, 9.0]])
    g = np.array([[0.25, 0.0], [0.25, 0.0], [0.0, 0.5]])
    out = barycentric_project(g, E)
    np.testing.assert_allclose(out[0], [2.0, 4.0])


def test_matches_normal_equations():
    rng = np.random.default_rng(0)
    g = rng.random((3, 2))
    g /= g.sum()
    E = rng.normal(size=(3, 4))
    # gradient-equals-zero: for each y, (sum_x g[x,y]) e = sum_x g[x,y] E[x], solved as a linear system
    A = np.kron(np.diag(g.sum(axis=0)), np.eye(4))
    b = np.concatenate([g[:, y] @ E for y in range(2)])
    ref = np.linalg.solve(A, b).reshape(2, 4)
    np.testing.assert_allclose(barycentric_project(g, E), ref, atol=1e-14)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_barycenter_is_local_minimum(seed):
    rng = np.random.default_rng(seed)
    g = rng.random((4, 3))
    g /= g.sum()
    E = rng.normal(size=(4, 2))
    new = barycentric_project(g, E)
    base = barycentric_objective(g, E, new)
    for y in range(3):
        for k in range(2):
            for delta in (1e-3, -1e-3):
                pert = new.copy()
                pert[y, k] += delta
                assert barycentric_objective(g, E, pert) > base


def test_starved_column_named():
    with pytest.raises(ValueError, match="column 1"):
        barycentric_project(np.array([[0.5, 0.0], [0.5, 0.0]]), np.eye(2))


# -- image-side geometry -----------------------------------------------------------

def test_identical_context_tokens_are_close():
    V = 10
    # new tokens 0 and 1 occur in exactly the same contexts; the rest form other patterns
    seqs = [np.array([V + 2, V, V + 3]), np.array([V + 2, V + 1, V + 3])] * 50
    seqs += [np.array([V + 4, V + 5, V + 6, V + 7]), np.array([V + 7, V + 2, V + 5])] * 50
    sp = image_side_geometry(8, "cooccurrence", sequences=seqs, vocab_text=V, dim=6)
    med = np.median(sp.D[np.triu_indices(8, 1)])
    assert sp.D[0, 1] < 0.1 * med


def test_unobserved_token_warns_and_sits_at_centroid():
    seqs = [np.array([10, 11, 12, 10, 11])]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        vecs, observed = cooccurrence_vectors(seqs, 10, 4, dim=2)
    assert any(issubclass(x.category, RuntimeWarning) for x in w)
    assert observed.tolist() == [True, True, True, False]
    np.testing.assert_allclose(vecs[3], vecs[:3].mean(axis=0))


def test_random_geometry_deterministic():
    a = image_side_geometry(4, "random", seed=5).D
    b = image_side_geometry(4, "random", seed=5).D
    assert np.array_equal(a, b)


def test_one_hot_codebook(tmp_path):
    path = tmp_path / "codebook.txt"
    save_codebook(path, np.eye(5))
    sp = image_side_geometry(5, "codebook-file", codebook_path=path)
    off = sp.D[~np.eye(5, dtype=bool)]
    np.testing.assert_allclose(off, np.sqrt(2))
    with pytest.raises(GeometryError, match="expected 6"):
        image_side_geometry(6, "codebook-file", codebook_path=path)


def test_codebook_and_coupling_roundtrip(tmp_path):
    M = np.random.default_rng(0).random((3, 4))
    save_coupling(tmp_path / "c.txt", M)
    assert np.array_equal(load_coupling(tmp_path / "c.txt"), M)
    assert (tmp_path / "c.txt").read_text().splitlines()[0] == "3 4"
    (tmp_path / "bad.txt").write_text("2 2\n1 2\n")
    with pytest.raises(GeometryError, match="header"):
        load_codebook(tmp_path / "bad.txt")
