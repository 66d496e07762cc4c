"""Vocabulary expansion and initialization of the new embedding rows.

New rows can start random, at the mean text row, or at the barycentric
projection of an entropic Gromov-Wasserstein coupling between the text
embedding geometry and a geometry over the new tokens.

Barycentric projection. For a fixed coupling ``g`` the objective

    J(E_new) = sum_{x,y} g[x, y] * |E_new[y] - E_t[x]|^2

separates over columns ``y``. Setting ``dJ/dE_new[y] = 2 sum_x g[x, y]
(E_new[y] - E_t[x])`` to zero gives ``E_new[y] = sum_x g[x, y] E_t[x] /
sum_x g[x, y]``, and ``J`` is strictly convex in each row when the column
mass is positive, so this stationary point is the unique minimizer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import pdist, squareform
from scipy.special import logsumexp

from .autograd import Tensor


class SinkhornError(RuntimeError):
    pass


class GeometryError(ValueError):
    pass


# -- layout and expansion -----------------------------------------------------

@dataclass(frozen=True)
class VocabLayout:
    vocab_text: int
    vocab_image: int
    n_special: int = 2
    d: int = 128

    @property
    def T(self) -> int:
        return self.vocab_image + self.n_special

    @property
    def total(self) -> int:
        return self.vocab_text + self.T

    @property
    def added_per_matrix(self) -> int:
        return self.T * self.d

    @property
    def boi(self) -> int:
        return self.vocab_text + self.vocab_image

    @property
    def eoi(self) -> int:
        return self.boi + 1


def expand_matrix(matrix: np.ndarray, n_new: int) -> np.ndarray:
    """Append ``n_new`` zero rows, keeping dtype and the original rows bit-for-bit."""
    out = np.zeros((matrix.shape[0] + n_new, matrix.shape[1]), dtype=matrix.dtype)
    out[:matrix.shape[0]] = matrix
    return out


def expand_vocabulary(model, layout: VocabLayout):
    """Grow embedding and head by ``layout.T`` rows; only the new rows are trainable.

    New rows are zero until one of the init schemes fills them.
    """
    if model.vocab_new:
        raise ValueError("vocabulary is already expanded")
    if layout.vocab_text != model.config.vocab_text or layout.d != model.config.d_model:
        raise ValueError(f"layout {layout} does not match model (vocab_text={model.config.vocab_text}, "
                         f"d={model.config.d_model})")
    names = ["embed"] if model.config.tie_head else ["embed", "head"]
    for name in names:
        old = model.params[name]
        t = Tensor(expand_matrix(old.data, layout.T), requires_grad=True, name=name)
        mask = np.zeros(layout.total, dtype=bool)
        mask[layout.vocab_text:] = True
        t.row_mask = mask
        model.params[name] = t
    model.vocab_new = layout.T
    return model


# -- metric spaces --------------------------------------------------------------

@dataclass
class MetricSpace:
    D: np.ndarray
    p: np.ndarray = None

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=np.float64)
        n = self.D.shape[0]
        if self.D.shape != (n, n):
            raise GeometryError(f"distance matrix must be square, got {self.D.shape}")
        if self.p is None:
            self.p = np.full(n, 1.0 / n)
        self.p = np.asarray(self.p, dtype=np.float64)
        if np.any(np.diag(self.D) != 0):
            raise GeometryError("distance matrix must have a zero diagonal")
        if np.max(np.abs(self.D - self.D.T), initial=0.0) > 1e-12:
            raise GeometryError("distance matrix must be symmetric")
        if np.any(self.D < 0):
            raise GeometryError("distances must be nonnegative")
        if abs(self.p.sum() - 1.0) > 1e-12 or np.any(self.p < 0):
            raise GeometryError("point weights must be a probability vector")

    @property
    def n(self) -> int:
        return self.D.shape[0]


def pairwise_distance_matrix(vectors: np.ndarray, metric: str = "euclidean") -> MetricSpace:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise GeometryError("need at least 2 vectors")
    if metric == "cosine":
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise GeometryError(f"vector {int(np.argmin(norms))} has zero norm under the cosine metric")
    elif metric != "euclidean":
        raise GeometryError(f"unknown metric {metric!r}")
    D = squareform(pdist(vectors, metric=metric))
    np.maximum(D, 0.0, out=D)
    return MetricSpace(D)


# -- entropic Gromov-Wasserstein ---------------------------------------------

@dataclass
class Coupling:
    gamma: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def marginal_error(self) -> float:
        return max(float(np.max(np.abs(self.gamma.sum(axis=1) - self.p))),
                   float(np.max(np.abs(self.gamma.sum(axis=0) - self.q))))


@dataclass
class GWResult:
    coupling: Coupling
    objective: float                        # unregularized square-loss GW
    history: list[float] = field(default_factory=list)  # regularized objective per iterate
    n_outer: int = 0
    converged: bool = False


def gw_objective(C1: np.ndarray, C2: np.ndarray, T: np.ndarray) -> float:
    """``sum_{i,j,k,l} (C1[i,k] - C2[j,l])^2 T[i,j] T[k,l]`` for symmetric C1, C2."""
    r, c = T.sum(axis=1), T.sum(axis=0)
    val = r @ (C1 * C1) @ r + c @ (C2 * C2) @ c - 2.0 * np.sum((C1 @ T @ C2) * T)
    return float(max(val, 0.0))


def _entropy_term(T: np.ndarray) -> float:
    pos = T > 0
    return float(np.sum(T[pos] * np.log(T[pos])))


def _newton_dual(M: np.ndarray, logp: np.ndarray, logq: np.ndarray, u: np.ndarray,
                 v: np.ndarray, tol: float, max_iter: int = 60):
    """Newton ascent on the entropic dual in units of ``eps``.

    The plan is ``exp(M + u_i + v_j)``; the last ``v`` is pinned to remove
    the constant shift. Used after Sinkhorn stalls, which happens when the
    plan is close to a permutation and its sweeps contract very slowly.
    """
    p, q = np.exp(logp), np.exp(logq)
    n, m = len(p), len(q)

    def dual(u, v):
        with np.errstate(over="ignore"):
            return float(u @ p + v @ q - np.exp(M + u[:, None] + v[None, :]).sum())

    def residual(u, v):
        with np.errstate(over="ignore"):
            T = np.exp(M + u[:, None] + v[None, :])
        return max(float(np.max(np.abs(T.sum(axis=1) - p))), float(np.max(np.abs(T.sum(axis=0) - q))))

    val = dual(u, v)
    for _ in range(max_iter):
        T = np.exp(M + u[:, None] + v[None, :])
        r, c = T.sum(axis=1), T.sum(axis=0)
        res = max(np.max(np.abs(r - p)), np.max(np.abs(c - q)))
        if res < tol:
            break
        grad = np.concatenate([p - r, (q - c)[:-1]])
        H = np.zeros((n + m - 1, n + m - 1))
        H[:n, :n] = np.diag(r)
        H[:n, n:] = T[:, :-1]
        H[n:, :n] = T[:, :-1].T
        H[n:, n:] = np.diag(c[:-1])
        try:
            step = np.linalg.lstsq(H, grad, rcond=1e-14)[0]
        except np.linalg.LinAlgError:
            break
        du, dv = step[:n], np.concatenate([step[n:], [0.0]])
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        while t > 1e-10:
            cand = dual(u + t * du, v + t * dv)
            if np.isfinite(cand) and cand >= val + 1e-4 * t * float(grad @ step):
                break
            # close to the optimum the dual gain drops below float resolution;
            # a shrinking marginal residual is then the usable signal
            if np.isfinite(cand) and residual(u + t * du, v + t * dv) < 0.5 * res:
                break
            t *= 0.5
        else:
            break
        u, v, val = u + t * du, v + t * dv, cand
    return u, v


def _sweeps(M: np.ndarray, logp: np.ndarray, logq: np.ndarray, u: np.ndarray, v: np.ndarray,
            max_iter: int, tol: float):
    """Alternating log-domain updates on the scaled potentials ``u = f / eps``."""
    p = np.exp(logp)
    viol = np.inf
    for it in range(max_iter):
        u = logp - logsumexp(M + v[None, :], axis=1)
        v = logq - logsumexp(M + u[:, None], axis=0)
        # checking costs as much as a half sweep, so only every few sweeps
        if it % 10 == 9 or it == max_iter - 1:
            viol = float(np.max(np.abs(np.exp(logsumexp(M + u[:, None] + v[None, :], axis=1)) - p)))
            if viol < tol:
                break
    return u, v, viol


def _violation(M, u, v, p, q) -> float:
    T = np.exp(M + u[:, None] + v[None, :])
    return max(float(np.max(np.abs(T.sum(axis=1) - p))), float(np.max(np.abs(T.sum(axis=0) - q))))


def sinkhorn_log(cost: np.ndarray, p: np.ndarray, q: np.ndarray, eps: float,
                 max_iter: int = 500, tol: float = 1e-12,
                 f: np.ndarray | None = None, g: np.ndarray | None = None):
    """Log-domain Sinkhorn. Returns ``(T, f, g, violation)``.

    ``T = exp((f_i + g_j - cost_ij) / eps)``. Sweeps stop once the row
    violation (columns are exact after each sweep) drops below ``tol``. If
    ``max_iter`` sweeps leave it above ``tol`` the potentials are finished
    by Newton steps on the same dual. Should that fail too (plans very
    close to a vertex, where most entries underflow), the solve is
    repeated along a halving schedule of epsilon starting from the cost
    range, each stage warm started from the previous one.
    """
    logp, logq = np.log(p), np.log(q)
    u = np.zeros(len(p)) if f is None else f / eps
    v = np.zeros(len(q)) if g is None else g / eps
    M = -cost / eps
    u, v, viol = _sweeps(M, logp, logq, u, v, max_iter, tol)
    if viol >= tol and np.isfinite(viol):
        u, v = _newton_dual(M, logp, logq, u + v[-1], v - v[-1], tol)
        viol = _violation(M, u, v, p, q)
    if not viol < 1e-9:
        spread = float(np.max(cost) - np.min(cost))
        n_stages = max(int(np.ceil(np.log2(max(spread, eps) / eps))), 0)
        u, v = np.zeros(len(p)), np.zeros(len(q))
        for k in range(n_stages, -1, -1):
            e = eps * 2.0 ** k
            # potentials scale with 1/eps: carry f = u * e_prev over to the new stage
            u, v, _ = _sweeps(-cost / e, logp, logq, u, v, max_iter, tol)
            if k:
                u, v = 2.0 * u, 2.0 * v
        u, v = _newton_dual(M, logp, logq, u + v[-1], v - v[-1], tol)
    T = np.exp(M + u[:, None] + v[None, :])
    viol = _violation(M, u, v, p, q)
    return T, u * eps, v * eps, viol


def round_to_marginals(T: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto the exact transport polytope.

    Rows, then columns, are scaled down to their targets and the leftover
    mass is added as a rank-one correction (Altschuler et al. rounding).
    """
    T = T * np.minimum(p / np.maximum(T.sum(axis=1), 1e-300), 1.0)[:, None]
    T = T * np.minimum(q / np.maximum(T.sum(axis=0), 1e-300), 1.0)[None, :]
    er = np.maximum(p - T.sum(axis=1), 0.0)
    ec = np.maximum(q - T.sum(axis=0), 0.0)
    mass = er.sum()
    if mass > 0:
        T = T + np.outer(er, ec) / mass
    return T


def entropic_gw_coupling(src: MetricSpace, dst: MetricSpace, eps: float,
                         max_outer: int = 200, max_sinkhorn: int = 500,
                         tol: float = 1e-7, check_monotone: bool = True,
                         init: str = "product") -> GWResult:
    """Entropic square-loss GW by successive linearisation.

    Each outer step builds the pseudo-cost ``2 (L x T)`` from the current
    coupling and solves the entropic transport problem against it, warm
    started from the previous potentials. With distance matrices that are
    conditionally negative definite (euclidean, squared euclidean) the GW
    term is concave on the transport polytope, so the regularized
    objective ``GW(T) + eps * sum T log T`` cannot increase.

    ``init="eccentricity"`` starts from the entropic transport plan between
    point eccentricities ``sqrt(sum_k D[i, k]^2 p_k)`` instead of ``p q^T``.
    """
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    C1, C2, p, q = src.D, dst.D, src.p, dst.p
    n, m = len(p), len(q)
    T = np.outer(p, q)
    if n == 1 or m == 1:
        return GWResult(Coupling(T, p, q), gw_objective(C1, C2, T), [gw_objective(C1, C2, T)], 0, True)
    const = (C1 * C1) @ p
    const2 = (C2 * C2) @ q
    if init == "eccentricity":
        ecc = np.sqrt(const)[:, None] - np.sqrt(const2)[None, :]
        cost = ecc * ecc
        T, _, _, viol = sinkhorn_log(cost - cost.min(), p, q, eps, max_sinkhorn)
        if viol > 1e-4 or not np.all(np.isfinite(T)):
            T = np.outer(p, q)
    elif init != "product":
        raise ValueError(f"unknown init {init!r}")
    history = [gw_objective(C1, C2, T) + eps * _entropy_term(T)]
    f = g = None
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        cost = 2.0 * (const[:, None] + const2[None, :] - 2.0 * (C1 @ T @ C2))
        # potentials are defined up to a constant; shifting the cost keeps them bounded
        cost -= cost.min()
        T_new, f, g, viol = sinkhorn_log(cost, p, q, eps, max_sinkhorn, f=f, g=g)
        if viol > 1e-4 or not np.all(np.isfinite(T_new)):
            raise SinkhornError(f"Sinkhorn did not converge (marginal violation {viol:.3g} after "
                                f"{max_sinkhorn} iterations); increase epsilon (now {eps:.3g})")
        change = float(np.abs(T_new - T).sum())
        T = T_new
        history.append(gw_objective(C1, C2, T) + eps * _entropy_term(T))
        if check_monotone and history[-1] > history[-2] + 1e-9 * max(1.0, abs(history[-2])):
            raise SinkhornError(f"regularized objective increased at outer step {it}: "
                                f"{history[-2]:.12g} -> {history[-1]:.12g}")
        if change < tol:
            converged = True
            break
    T = round_to_marginals(T, p, q)
    return GWResult(Coupling(T, p, q), gw_objective(C1, C2, T), history, it, converged)


# -- projection and init schemes ---------------------------------------------

def barycentric_project(gamma: np.ndarray, E_t: np.ndarray) -> np.ndarray:
    """Closed-form minimizer of the coupling-weighted least squares (module docstring)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    mass = gamma.sum(axis=0)
    starved = np.flatnonzero(mass <= 0)
    if starved.size:
        raise ValueError(f"column {int(starved[0])} of the coupling has zero mass")
    return (gamma.T @ E_t) / mass[:, None]


def barycentric_objective(gamma: np.ndarray, E_t: np.ndarray, E_new: np.ndarray) -> float:
    sq = ((E_t[:, None, :] - E_new[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sum(gamma * sq))


def _median_offdiag(D: np.ndarray) -> float:
    iu = np.triu_indices(D.shape[0], 1)
    med = float(np.median(D[iu]))
    if med <= 0:
        raise GeometryError("median pairwise distance is zero; geometry is degenerate")
    return med


def gw_rows(text_rows: np.ndarray, geometry: MetricSpace, *, metric: str = "euclidean",
            epsilon: float | None = None, epsilon_scale: float = 5e-3,
            max_outer: int = 200, max_sinkhorn: int = 500, tol: float = 1e-7,
            anchors: int = 1024, seed: int = 0) -> tuple[np.ndarray, GWResult]:
    """New rows as barycenters of ``text_rows`` under the GW coupling to ``geometry``.

    Both distance matrices are divided by their median so the default
    epsilon, ``epsilon_scale * median(D_dst)^2``, reads in unit terms.
    Spaces larger than ``anchors`` are subsampled and non-anchor new
    tokens take the row of their nearest anchor.
    """
    rng = np.random.default_rng(seed)
    n_text, T = text_rows.shape[0], geometry.n
    src_idx = np.arange(n_text)
    dst_idx = np.arange(T)
    if n_text > anchors:
        src_idx = np.sort(rng.choice(n_text, anchors, replace=False))
    if T > anchors:
        dst_idx = np.sort(rng.choice(T, anchors, replace=False))
    src = pairwise_distance_matrix(text_rows[src_idx], metric)
    Dd = geometry.D[np.ix_(dst_idx, dst_idx)]
    s_med, d_med = _median_offdiag(src.D), _median_offdiag(Dd)
    src = MetricSpace(src.D / s_med)
    dst = MetricSpace(Dd / d_med)
    eps = epsilon if epsilon is not None else epsilon_scale * _median_offdiag(dst.D) ** 2
    res = entropic_gw_coupling(src, dst, eps, max_outer, max_sinkhorn, tol)
    anchor_rows = barycentric_project(res.coupling.gamma, text_rows[src_idx])
    if len(dst_idx) == T:
        return anchor_rows, res
    nearest = np.argmin(geometry.D[:, dst_idx], axis=1)
    return anchor_rows[nearest], res


@dataclass
class InitReport:
    scheme: str
    results: dict[str, GWResult] = field(default_factory=dict)


def init_new_rows(model, scheme: str, geometry: MetricSpace | None = None,
                  seed: int = 0, gw_options: dict | None = None) -> InitReport:
    """Fill the new embedding (and head) rows in place.

    ``random``: Gaussian with the std of the existing text rows. ``mean``:
    every new row equals the mean text row. ``gw``: barycentric projection
    of the GW coupling between text rows and ``geometry``. The head is
    filled by the same scheme from its own text rows, independently.
    """
    if not model.vocab_new:
        raise ValueError("expand the vocabulary before initializing new rows")
    if scheme not in ("random", "mean", "gw"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if scheme == "gw" and geometry is None:
        raise ValueError("the gw scheme needs a source geometry over the new tokens")
    Vt, T = model.config.vocab_text, model.vocab_new
    if geometry is not None and geometry.n != T:
        raise GeometryError(f"geometry has {geometry.n} points, expected {T} new tokens")
    report = InitReport(scheme)
    names = ["embed"] if model.config.tie_head else ["embed", "head"]
    rngs = np.random.default_rng(seed).spawn(len(names))
    for name, rng in zip(names, rngs):
        data = model.params[name].data
        text = data[:Vt]
        if scheme == "random":
            new = rng.normal(0.0, float(text.std()), size=(T, text.shape[1]))
        elif scheme == "mean":
            new = np.tile(text.mean(axis=0), (T, 1))
        else:
            opts = dict(gw_options or {})
            opts.setdefault("seed", seed)
            new, res = gw_rows(text, geometry, **opts)
            report.results[name] = res
        data[Vt:] = new
    return report


# -- new-token geometry -------------------------------------------------------

def cooccurrence_vectors(sequences, vocab_text: int, T: int, window: int = 2,
                         dim: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """PPMI-weighted windowed co-occurrence among new tokens, factored to ``dim``.

    Returns ``(vectors, observed)``. Unobserved tokens get the centroid of
    the observed vectors.
    """
    counts = np.zeros((T, T))
    for seq in sequences:
        seq = np.asarray(seq)
        for delta in range(1, window + 1):
            a, b = seq[:-delta], seq[delta:]
            keep = (a >= vocab_text) & (b >= vocab_text) & (a < vocab_text + T) & (b < vocab_text + T)
            np.add.at(counts, (a[keep] - vocab_text, b[keep] - vocab_text), 1.0)
    counts = counts + counts.T
    total = counts.sum()
    observed = counts.sum(axis=1) > 0
    if total == 0:
        raise GeometryError("no new-modality token pairs found in the corpus")
    row = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / np.outer(row, row))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    evals, evecs = eigh(ppmi)
    order = np.argsort(-np.abs(evals), kind="stable")[:dim]
    vecs = evecs[:, order] * np.sqrt(np.abs(evals[order]))[None, :]
    if not observed.all():
        missing = np.flatnonzero(~observed)
        warnings.warn(f"{missing.size} new tokens never co-occur (first: {int(missing[0])}); "
                      "placing them at the centroid", RuntimeWarning, stacklevel=2)
        vecs[missing] = vecs[observed].mean(axis=0)
    return vecs, observed


def image_side_geometry(T: int, mode: str = "cooccurrence", *, sequences=None,
                        vocab_text: int | None = None, seed: int = 0, dim: int = 16,
                        window: int = 2, codebook_path: str | Path | None = None) -> MetricSpace:
    """Distance geometry over the ``T`` new tokens (image tokens then boi, eoi)."""
    if mode == "cooccurrence":
        if sequences is None or vocab_text is None:
            raise GeometryError("cooccurrence geometry needs the training sequences and vocab_text")
        vecs, _ = cooccurrence_vectors(sequences, vocab_text, T, window, dim)
    elif mode == "codebook-file":
        if codebook_path is None:
            raise GeometryError("codebook-file geometry needs a codebook path")
        vecs = load_codebook(codebook_path)
        if vecs.shape[0] != T:
            raise GeometryError(f"codebook has {vecs.shape[0]} rows, expected {T}")
    elif mode == "random":
        vecs = np.random.default_rng(seed).standard_normal((T, dim))
    else:
        raise GeometryError(f"unknown geometry mode {mode!r}")
    return pairwise_distance_matrix(vecs, "euclidean")


# -- files --------------------------------------------------------------------

def _write_matrix(path: str | Path, M: np.ndarray) -> None:
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_matrix(path: str | Path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        rows, cols = (int(v) for v in lines[0].split())
        M = np.array([[float(v) for v in ln.split()] for ln in lines[1:]], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise GeometryError(f"{path}: malformed matrix file ({exc})") from exc
    if M.shape != (rows, cols):
        raise GeometryError(f"{path}: header says {rows}x{cols}, body is {M.shape}")
    return M


def save_codebook(path: str | Path, vectors: np.ndarray) -> None:
    """Header ``T d'`` then one row of floats per token."""
    _write_matrix(path, np.asarray(vectors, dtype=np.float64))


def load_codebook(path: str | Path) -> np.ndarray:
    return _read_matrix(path)


def save_coupling(path: str | Path, gamma: np.ndarray) -> None:
    """Header ``|V_t| T`` then the coupling rows."""
    _write_matrix(path, gamma)


def load_coupling(path: str | Path) -> np.ndarray:
    return _read_matrix(path)
