"""Decoder-free anomaly scoring against a memory bank of normal prototypes.

Normal target images are encoded, flattened per scale, and clustered with
Sinkhorn K-means (K-means whose assignment step is an entropic, balanced
optimal-transport plan). A test patch scores its distance to the nearest
prototype of the same scale.
"""

from dataclasses import dataclass, field
import json
from pathlib import Path
import time
import warnings

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ParameterError
from .numkernel import bilinear_resize, gaussian_blur, load_tensor, save_tensor


# --------------------------------------------------------------------------
# entropic transport


@dataclass
class TransportPlan:
    T: np.ndarray
    eps: float
    row_target: float
    col_target: float
    n_iter: int = 0
    violation: float = 0.0
    converged: bool = True
    f: np.ndarray = None
    g: np.ndarray = None
    objective_trace: list = field(default_factory=list)

    @property
    def row_violation(self):
        return float(np.abs(self.T.sum(axis=1) - self.row_target).max())

    @property
    def col_violation(self):
        return float(np.abs(self.T.sum(axis=0) - self.col_target).max())


def sq_dists(Z, P):
    """Squared Euclidean distances, ``(N, K)``, clipped at zero."""
    Z = np.asarray(Z, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    C = (Z * Z).sum(1)[:, None] - 2.0 * Z @ P.T + (P * P).sum(1)[None, :]
    return np.maximum(C, 0.0)


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def _dual_objective(f, g, C, eps, a, b):
    """Negated entropic dual; Sinkhorn half-steps never increase it."""
    lse = logsumexp((f[:, None] + g[None, :] - C) / eps)
    return float(-(a * f.sum() + b * g.sum()) + eps * np.exp(lse))


def _newton_direction(T, grad, a, eps):
    """Newton step for the semi-dual in ``g``; the Hessian is singular along ones."""
    M = np.diag(T.sum(0)) - T.T @ T / a
    rhs = eps * grad
    if len(grad) > 1:
        # pin the last potential to remove the constant-shift null direction
        try:
            d = np.linalg.solve(M[:-1, :-1], rhs[:-1])
            return np.append(d, 0.0)
        except np.linalg.LinAlgError:
            pass
    return np.linalg.lstsq(M, rhs, rcond=None)[0]


def sinkhorn_assign(Z=None, P=None, eps=None, max_iter=500, tol=1e-7, cost=None, g_init=None,
                    track_objective=False, newton_after=100):
    """Balanced entropic OT between uniform weights on the rows of ``Z`` and of ``P``.

    The cost is ``||z_i - p_k||^2`` unless ``cost`` is given. Scaling runs in
    the log domain and stops once the row-marginal violation (column
    marginals are exact after each sweep) drops below ``tol``. ``eps``
    defaults to ``0.05 * mean(cost)``. Plans close to a block structure make
    plain scaling crawl, so after ``newton_after`` sweeps the column
    potentials switch to damped Newton steps on the semi-dual, which keeps
    the same fixed point and still never increases the negated dual.
    """
    C = sq_dists(Z, P) if cost is None else np.asarray(cost, dtype=np.float64)
    N, K = C.shape
    if N < 1 or K < 1:
        raise ParameterError("sinkhorn needs at least one point and one prototype")
    if eps is None:
        eps = 0.05 * float(C.mean())
        if eps <= 0:
            eps = 1.0
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    a, b = 1.0 / N, 1.0 / K
    log_a, log_b = np.log(a), np.log(b)
    g = np.zeros(K) if g_init is None else np.asarray(g_init, dtype=np.float64).copy()
    negC = -C / eps
    trace = []

    def row_potential(g):
        L = _lse(negC + g[None, :] / eps, axis=1)
        return eps * (log_a - L), L

    def semi_dual(g):
        return a * row_potential(g)[0].sum() + b * g.sum()

    violation = np.inf
    f = None
    it = 0
    while it < max_iter:
        # one log-sum-exp over rows serves both the marginal check and the f-update
        L = _lse(negC + g[None, :] / eps, axis=1)
        if f is not None:
            violation = float(np.abs(np.exp(f / eps + L) - a).max())
            if violation < tol:
                break
        it += 1
        f = eps * (log_a - L)
        if track_objective:
            trace.append(_dual_objective(f, g, C, eps, a, b))
        if it > newton_after:
            T = np.exp(negC + (f[:, None] + g[None, :]) / eps)
            grad = b - T.sum(0)
            d = _newton_direction(T, grad, a, eps)
            slope = float(grad @ d)
            if slope > 0:
                phi0, t = semi_dual(g), 1.0
                while t > 1e-10 and semi_dual(g + t * d) < phi0 + 1e-4 * t * slope:
                    t *= 0.5
                if t > 1e-10:
                    g = g + t * d
                    f = row_potential(g)[0]
                    if track_objective:
                        trace.append(_dual_objective(f, g, C, eps, a, b))
        g = eps * (log_b - _lse(negC + f[:, None] / eps, axis=0))
        if track_objective:
            trace.append(_dual_objective(f, g, C, eps, a, b))
    else:
        L = _lse(negC + g[None, :] / eps, axis=1)
        violation = float(np.abs(np.exp(f / eps + L) - a).max())
    logT = negC + (f[:, None] + g[None, :]) / eps
    T = np.exp(logT)
    converged = violation < tol
    if not converged:
        warnings.warn(f"sinkhorn did not converge in {max_iter} sweeps (violation {violation:.3g})", RuntimeWarning)
    return TransportPlan(T, eps, a, b, it, violation, converged, f, g, trace)


# --------------------------------------------------------------------------
# Sinkhorn K-means


@dataclass
class KMeansResult:
    prototypes: np.ndarray
    plan: TransportPlan
    n_outer: int
    converged: bool
    eps: float
    reseeded: int = 0
    sinkhorn_iters: list = field(default_factory=list)


def canonical_order(Z):
    """Lexicographic row order, used so clustering ignores input row order."""
    return np.lexsort(Z.T[::-1])


def kmeanspp_init(Z, K, rng):
    """k-means++ seeding: first centre uniform, then proportional to squared distance."""
    N = len(Z)
    centers = [int(rng.integers(N))]
    d2 = ((Z - Z[centers[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(N))
        else:
            idx = int(rng.choice(N, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, ((Z - Z[idx]) ** 2).sum(1))
    return Z[centers].copy()


def sinkhorn_kmeans_fit(Z, K, eps=None, eps_rel=0.05, outer_iters=50, seed=0, tol=1e-6, init=None,
                        sinkhorn_tol=1e-7, max_iter=500):
    """Cluster the rows of ``Z`` into ``K`` prototypes with transport-plan assignments.

    ``eps`` is absolute; when omitted it is ``eps_rel`` times the mean cost
    under the initial prototypes and then held fixed. ``init`` overrides
    k-means++ seeding (which runs on canonically sorted rows).
    """
    Z = np.asarray(Z, dtype=np.float64)
    N = len(Z)
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if N < K:
        raise ParameterError(f"need at least K={K} points, got {N}")
    Zs = Z[canonical_order(Z)]
    rng = np.random.default_rng(seed)
    P = kmeanspp_init(Zs, K, rng) if init is None else np.asarray(init, dtype=np.float64).copy()
    if eps is None:
        eps = eps_rel * float(sq_dists(Zs, P).mean())
        if eps <= 0:
            eps = 1.0
    g = None
    reseeded = 0
    iters = []
    converged = False
    plan = None
    n_outer = 0
    for n_outer in range(1, outer_iters + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            plan = sinkhorn_assign(Zs, P, eps, max_iter=max_iter, tol=sinkhorn_tol, g_init=g)
        g = plan.g
        iters.append(plan.n_iter)
        mass = plan.T.sum(axis=0)
        P_new = (plan.T.T @ Zs) / np.maximum(mass, 1e-300)[:, None]
        empty = mass < 1.0 / (10 * N * K)
        if empty.any():
            for k in np.flatnonzero(empty):
                far = int(np.argmax(sq_dists(Zs, np.delete(P_new, k, axis=0)).min(axis=1)))
                P_new[k] = Zs[far]
                reseeded += 1
            g = None
        move = float(np.sqrt(((P_new - P) ** 2).sum(1)).max())
        P = P_new
        if move < tol:
            converged = True
            break
    return KMeansResult(P, plan, n_outer, converged, eps, reseeded, iters)


def sinkhorn_kmeans(Z, K, eps=None, outer_iters=50, seed=0, **kw):
    """Prototype matrix ``(K, d)``; see :func:`sinkhorn_kmeans_fit`."""
    return sinkhorn_kmeans_fit(Z, K, eps=eps, outer_iters=outer_iters, seed=seed, **kw).prototypes


def lloyd_assign(Z, P):
    return np.argmin(sq_dists(Z, P), axis=1)


# --------------------------------------------------------------------------
# memory bank


FEATURE_MODES = ("fused", "hiera")


def select_channels(F, mode):
    if mode == "fused":
        return F
    if mode == "hiera":
        return F[..., 0::2]
    raise ConfigError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")


def flatten_scale(F):
    """``(b, h, w, c)`` -> ``(b*h*w, c)``; row ``m*h*w + i*w + j`` is ``F[m, i, j]``."""
    return F.reshape(-1, F.shape[-1])


def encode_batched(encoder, images, batch_size=16):
    images = np.asarray(images)
    out = None
    for s in range(0, len(images), batch_size):
        pyr = encoder.forward(images[s:s + batch_size])[0]
        out = [p.copy() for p in pyr] if out is None else [np.concatenate([o, p]) for o, p in zip(out, pyr)]
    return out


def build_bank_features(encoder, normal_images, feature_mode="fused", batch_size=16):
    """Per-scale stacked patch embeddings ``(M*h_n*w_n, c_n)`` of the normal images."""
    if len(normal_images) == 0:
        raise ParameterError("memory bank needs at least one normal image")
    pyramid = encode_batched(encoder, normal_images, batch_size)
    return [flatten_scale(select_channels(F, feature_mode)).astype(np.float64) for F in pyramid]


@dataclass
class MemoryBank:
    prototypes: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.prototypes) != 4:
            raise ConfigError(f"memory bank needs 4 scales, got {len(self.prototypes)}")
        for P in self.prototypes:
            if not np.all(np.isfinite(P)):
                raise ConfigError("non-finite prototype")

    @property
    def K(self):
        return self.prototypes[0].shape[0]

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for n, P in enumerate(self.prototypes):
            name = f"prototypes_{n}.nxt"
            save_tensor(out / name, P)
            files.append(name)
        (out / "bank.json").write_text(json.dumps({**self.meta, "files": files}, indent=2, sort_keys=True))

    @classmethod
    def load(cls, out_dir):
        out = Path(out_dir)
        meta = json.loads((out / "bank.json").read_text())
        files = meta.pop("files")
        return cls([load_tensor(out / f).astype(np.float64) for f in files], meta)


def build_memory_bank(encoder, normal_images, K=30, eps_rel=0.05, seed=0, feature_mode="fused",
                      outer_iters=50, tol=1e-6, sinkhorn_tol=1e-7, max_iter=500):
    feats = build_bank_features(encoder, normal_images, feature_mode)
    protos, info = [], []
    for n, Z in enumerate(feats):
        res = sinkhorn_kmeans_fit(Z, K, eps_rel=eps_rel, outer_iters=outer_iters, seed=seed + n, tol=tol,
                                  sinkhorn_tol=sinkhorn_tol, max_iter=max_iter)
        protos.append(res.prototypes)
        info.append({"eps": res.eps, "outer_iters": res.n_outer, "converged": res.converged,
                     "sinkhorn_iters": int(sum(res.sinkhorn_iters)), "rows": int(len(Z))})
    meta = {"M": len(normal_images), "K": K, "eps_rel": eps_rel, "seed": seed, "feature_mode": feature_mode,
            "scales": info}
    return MemoryBank(protos, meta)


# --------------------------------------------------------------------------
# scoring


@dataclass
class AnomalyMap:
    raw: list            # per scale, (b, h_n, w_n) nearest-prototype distances
    A_prime: np.ndarray  # (b, H, W) smoothed full-resolution scores
    sigma: float
    weights: tuple
    meta: dict = field(default_factory=dict)


def nearest_prototype_distance(Z, P):
    """``min_k ||z_i - p_k||`` by explicit differences (exactly zero on a prototype)."""
    Z = np.asarray(Z, dtype=np.float64)
    best = np.full(len(Z), np.inf)
    for k in range(len(P)):
        diff = Z - P[k]
        np.minimum(best, np.einsum("ij,ij->i", diff, diff), out=best)
    return np.sqrt(best)


def minmax(x, axes):
    lo = x.min(axis=axes, keepdims=True)
    hi = x.max(axis=axes, keepdims=True)
    span = hi - lo
    return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)


def aggregate_scales(raw, out_hw, sigma=2.0, weights=None):
    """Per-image min-max per scale, upsample, weighted average, Gaussian smoothing."""
    H, W = out_hw
    weights = tuple(weights) if weights is not None else (1.0 / len(raw),) * len(raw)
    acc = None
    for w, A in zip(weights, raw):
        up = bilinear_resize(minmax(A, (1, 2)), H, W, axes=(1, 2))
        acc = w * up if acc is None else acc + w * up
    return gaussian_blur(acc, sigma), weights


def score_features(pyramid, bank, out_hw, sigma=2.0, feature_mode=None):
    mode = feature_mode or bank.meta.get("feature_mode", "fused")
    raw = []
    for F, P in zip(pyramid, bank.prototypes):
        F = select_channels(F, mode)
        if F.shape[-1] != P.shape[1]:
            raise ConfigError(f"feature width {F.shape[-1]} does not match prototype width {P.shape[1]}")
        b, h, w, _ = F.shape
        raw.append(nearest_prototype_distance(flatten_scale(F), P).reshape(b, h, w))
    A_prime, weights = aggregate_scales(raw, out_hw, sigma)
    return AnomalyMap(raw, A_prime, sigma, weights, {"K": bank.K, "scales": len(raw), "feature_mode": mode})


def anomaly_score_map(encoder, bank, images, sigma=2.0, batch_size=16):
    """Anomaly maps for a batch ``(b, H, W, 3)`` of test images."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if len(encoder.dims) != len(bank.prototypes):
        raise ConfigError("bank scales do not match the encoder")
    pyramid = encode_batched(encoder, images, batch_size)
    return score_features(pyramid, bank, images.shape[1:3], sigma)


# --------------------------------------------------------------------------
# timing


def bench_inference(encoder, images, bank_sizes=(5, 10, 20, 30, 40), batch_sizes=(1, 5, 10, 15), repeats=5,
                    seed=0, sigma=2.0, clock=time.perf_counter):
    """Wall-clock of encode + score per (K, batch) configuration, warm-up excluded.

    Banks are built from ``images`` once per K outside the timed region.
    """
    images = np.asarray(images)
    if len(images) < max(batch_sizes):
        reps = -(-max(batch_sizes) // len(images))
        images = np.concatenate([images] * reps)
    feats = build_bank_features(encoder, images[:max(10, 1)])
    rows = []
    for K in bank_sizes:
        rng = np.random.default_rng(seed + K)
        protos = [Z[rng.choice(len(Z), size=K, replace=len(Z) < K)] for Z in feats]
        bank = MemoryBank(protos, {"K": K, "feature_mode": "fused"})
        for bs in batch_sizes:
            batch = images[:bs]
            anomaly_score_map(encoder, bank, batch, sigma)  # warm-up, not timed
            times = []
            for _ in range(repeats):
                t0 = clock()
                anomaly_score_map(encoder, bank, batch, sigma)
                times.append((clock() - t0) * 1e3)
            rows.append({"K": K, "batch": bs, "mean_ms": float(np.mean(times)), "std_ms": float(np.std(times))})
    return rows


def linear_fit_r2(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(1 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else 1.0, coef
