"""Models: standardizer, l1 logistic feature selection, LR and RF classifiers.

Every model is trained on one pipeline: z-score standardization fit on the
training rows, one-vs-all l1-penalized logistic regression whose nonzero
coefficients select the feature support, then the classifier proper on the
selected columns. Fits are deterministic given the data, hyperparameters,
and seed, and serialize to a self-describing JSON artifact.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, EvaluationError
from .seeds import derive_seed

log = logging.getLogger(__name__)

MODEL_FORMAT = "faacflow-model-v1"

OPT_TOL = 1e-6
MAX_SELECT_ITER = 10_000
SUPPORT_EPSILON = 1e-8

DEFAULT_HYPER_LR = {"lambda": 0.1}
DEFAULT_HYPER_RF = {"lambda": 0.1, "n_trees": 100, "max_depth": 10, "m_features": 0, "min_leaf": 1}


# ---------------------------------------------------------------------------
# Standardizer


def standardize_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and population standard deviation."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("standardizer needs a non-empty 2-d matrix")
    return X.mean(axis=0), X.std(axis=0)


def standardize_apply(X: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """(x - mean) / scale; columns with zero scale map to 0."""
    X = np.asarray(X, dtype=np.float64)
    out = X - mean
    nonzero = scale > 0.0
    out[:, nonzero] /= scale[nonzero]
    out[:, ~nonzero] = 0.0
    return out


# ---------------------------------------------------------------------------
# Logistic primitives


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def logistic_nll_grad(beta: np.ndarray, X1: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed negative log-likelihood and its gradient for binary labels.

    ``X1`` carries the intercept column; the return is differentiable in
    ``beta`` and exposed for finite-difference checks.
    """
    s = X1 @ beta
    nll = float(np.sum(np.logaddexp(0.0, s) - y * s))
    grad = X1.T @ (_sigmoid(s) - y)
    return nll, grad


def _soft_threshold(v: float, thr: float) -> float:
    if v > thr:
        return v - thr
    if v < -thr:
        return v + thr
    return 0.0


def _kkt_violation(beta: np.ndarray, grad: np.ndarray, lam: float) -> float:
    """Largest first-order optimality violation; 0 at an exact optimum."""
    v = abs(float(grad[0]))
    coef, g = beta[1:], grad[1:]
    nz = coef != 0.0
    if nz.any():
        v = max(v, float(np.max(np.abs(g[nz] + lam * np.sign(coef[nz])))))
    if (~nz).any():
        v = max(v, float(np.max(np.maximum(np.abs(g[~nz]) - lam, 0.0))))
    return v


@dataclass(frozen=True)
class LassoResult:
    betas: np.ndarray  # (n_classes, p + 1); column 0 is the intercept
    support: tuple[int, ...]
    converged: tuple[bool, ...]
    n_iter: tuple[int, ...]


def _penalized_objective(beta: np.ndarray, X1: np.ndarray, y: np.ndarray, lam: float) -> float:
    nll, _ = logistic_nll_grad(beta, X1, y)
    return nll + lam * float(np.sum(np.abs(beta[1:])))


def _cd_quadratic(
    beta0: np.ndarray, g: np.ndarray, G: np.ndarray, lam: float, tol: float, max_sweeps: int = 1000
) -> np.ndarray:
    """Minimize the local quadratic model with an l1 term by coordinate descent.

    Model: g.(b - beta0) + 0.5 (b - beta0)' G (b - beta0) + lam * |b[1:]|_1.
    Maintains v = G (b - beta0) so one coordinate update costs O(p); G is
    symmetric, so its rows serve as columns. Between full sweeps, only the
    currently nonzero coordinates are cycled. Coordinates with no curvature
    (all-zero columns) are left untouched.
    """
    beta = beta0.copy()
    a = np.diag(G)
    v = np.zeros_like(beta)
    eligible = np.flatnonzero(a > 1e-12)

    def sweep(cols: np.ndarray) -> float:
        worst = 0.0
        for j in cols:
            d = g[j] + v[j]
            if j == 0:
                new = beta[0] - d / a[0]
            else:
                new = _soft_threshold(a[j] * beta[j] - d, lam) / a[j]
            delta = new - beta[j]
            if delta != 0.0:
                v[:] += G[j] * delta
                beta[j] = new
                worst = max(worst, abs(delta) * a[j])
        return worst

    sweeps = 0
    while sweeps < max_sweeps:
        worst = sweep(eligible)
        sweeps += 1
        if worst <= tol:
            break
        active = eligible[(beta[eligible] != 0.0) | (eligible == 0)]
        while sweeps < max_sweeps:
            worst = sweep(active)
            sweeps += 1
            if worst <= tol:
                break
    return beta


def _pivot_quadratic(beta0: np.ndarray, g: np.ndarray, G: np.ndarray, lam: float) -> np.ndarray | None:
    """Minimizer of the same l1 quadratic model by sign pivoting.

    Maintains a free set with fixed signs, solves the reduced linear
    system (lightly ridged against near-singularity), then either pins the
    worst sign-crossing coordinate at zero or releases the worst
    subgradient violator. A coordinate that keeps flip-flopping under
    extreme ill-conditioning exhausts its release budget and stays pinned;
    the slightly inexact direction is safe because the caller line-searches
    on the true objective and re-checks first-order conditions there.
    Returns None only if no stationary pattern is found in the budget.
    """
    p1 = len(beta0)
    a = np.diag(G)
    curved = a > 1e-12
    free = curved & (beta0 != 0.0)
    free[0] = curved[0]
    sigma = np.sign(beta0)
    releases = np.zeros(p1, dtype=np.int64)
    ridge = 1e-10 * float(a.max()) if a.max() > 0 else 0.0
    b = beta0.copy()
    for _ in range(6 * p1 + 16):
        F = np.flatnonzero(free)
        fixed = np.flatnonzero(~free)
        # curved fixed coords are pinned at zero; uncurved ones stay put
        u_fixed = np.where(curved[fixed], -beta0[fixed], 0.0)
        b = beta0.copy()
        b[fixed] = np.where(curved[fixed], 0.0, beta0[fixed])
        if len(F):
            pen = lam * sigma[F]
            if F[0] == 0:
                pen[0] = 0.0
            rhs = -(g[F] + pen) - G[np.ix_(F, fixed)] @ u_fixed
            GFF = G[np.ix_(F, F)] + ridge * np.eye(len(F))
            try:
                uF = np.linalg.solve(GFF, rhs)
            except np.linalg.LinAlgError:
                uF = np.linalg.lstsq(GFF, rhs, rcond=None)[0]
            b[F] = beta0[F] + uF
        flips = [j for j in F if j != 0 and sigma[j] != 0 and b[j] * sigma[j] < 0]
        if flips:
            j = max(flips, key=lambda j: abs(b[j]))
            free[j] = False
            continue
        for j in F:
            if j != 0 and sigma[j] == 0:
                sigma[j] = np.sign(b[j])
        r = g + G @ (b - beta0)
        worst_gain = -1.0
        worst_j = -1
        for j in range(1, p1):
            if curved[j] and not free[j] and releases[j] < 3 and abs(r[j]) - lam > worst_gain:
                worst_gain = abs(r[j]) - lam
                worst_j = j
        if worst_j >= 0 and worst_gain > 1e-9 * max(1.0, lam):
            free[worst_j] = True
            sigma[worst_j] = -np.sign(r[worst_j])
            releases[worst_j] += 1
            continue
        return b
    return None


def fit_lasso(
    Z: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    lam: float,
    opt_tol: float = OPT_TOL,
    max_iter: int = MAX_SELECT_ITER,
    support_epsilon: float = SUPPORT_EPSILON,
) -> LassoResult:
    """One-vs-all l1 logistic regression solved by proximal Newton steps.

    Each outer iteration builds the local quadratic model at the current
    point, solves it with coordinate descent, and line-searches on the true
    penalized objective. The penalty applies to coefficients only, never
    the intercept. A class converges when its largest first-order violation
    drops to ``opt_tol``; the support is the union over classes of
    coefficients above ``support_epsilon`` in magnitude.
    """
    if lam < 0:
        raise ConfigError(f"penalty weight must be non-negative, got {lam}")
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise DataError("selection input contains non-finite values")
    n, p = Z.shape
    X1 = np.hstack([np.ones((n, 1)), Z])

    betas = np.zeros((n_classes, p + 1))
    converged: list[bool] = []
    iters: list[int] = []
    for c in range(n_classes):
        yc = (np.asarray(y) == c).astype(np.float64)
        beta = np.zeros(p + 1)
        obj = _penalized_objective(beta, X1, yc, lam)
        ok = False
        it = 0
        for it in range(1, max_iter + 1):
            s = X1 @ beta
            prob = _sigmoid(s)
            grad = X1.T @ (prob - yc)
            viol = _kkt_violation(beta, grad, lam)
            if viol <= opt_tol:
                ok = True
                it -= 1
                break
            w = np.clip(prob * (1.0 - prob), 1e-9, None)
            G = X1.T @ (X1 * w[:, None])
            target = _pivot_quadratic(beta, grad, G, lam)
            if target is None:
                # rare pivot-cycling fallback; tolerance scaled to progress
                target = _cd_quadratic(beta, grad, G, lam, tol=max(0.1 * opt_tol, 1e-3 * viol))
            direction = target - beta
            # directional-derivative bound for the composite Armijo test
            dd = float(grad @ direction) + lam * (
                float(np.sum(np.abs(target[1:]))) - float(np.sum(np.abs(beta[1:])))
            )
            t = 1.0
            stepped = False
            while t > 1e-12:
                cand = beta + t * direction
                cand_obj = _penalized_objective(cand, X1, yc, lam)
                if cand_obj <= obj + 0.25 * t * dd:
                    beta, obj = cand, cand_obj
                    stepped = True
                    break
                t /= 2.0
            if not stepped:
                break  # no descent left at machine precision; re-check below
        if not ok:
            _, grad = logistic_nll_grad(beta, X1, yc)
            ok = _kkt_violation(beta, grad, lam) <= opt_tol
        if not ok:
            log.warning(
                "class %d selection stopped at %d iterations without reaching tol %.1e", c, it, opt_tol
            )
        betas[c] = beta
        converged.append(ok)
        iters.append(it)

    support = sorted({j for c in range(n_classes) for j in range(p) if abs(betas[c, j + 1]) > support_epsilon})
    return LassoResult(
        betas=betas, support=tuple(support), converged=tuple(converged), n_iter=tuple(iters)
    )


# ---------------------------------------------------------------------------
# Logistic classifier (Newton iterations with step halving)


def fit_lr(
    Z: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    max_iter: int = 100,
    grad_tol: float = OPT_TOL,
) -> np.ndarray:
    """Unpenalized one-vs-all logistic fits; returns (n_classes, p + 1) betas.

    Newton steps with step halving; an ill-conditioned Hessian falls back
    to a small ridge that escalates until the solve succeeds.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise EvaluationError("degenerate label set: training rows contain a single class")
    n, p = Z.shape
    X1 = np.hstack([np.ones((n, 1)), Z])
    betas = np.zeros((n_classes, p + 1))
    for c in range(n_classes):
        yc = (y == c).astype(np.float64)
        beta = np.zeros(p + 1)
        nll, grad = logistic_nll_grad(beta, X1, yc)
        for _ in range(max_iter):
            if float(np.max(np.abs(grad))) <= grad_tol:
                break
            s = X1 @ beta
            w = _sigmoid(s)
            w = w * (1.0 - w)
            H = X1.T @ (X1 * w[:, None])
            ridge = 0.0
            while True:
                try:
                    delta = np.linalg.solve(H + ridge * np.eye(p + 1), grad)
                    if np.all(np.isfinite(delta)):
                        break
                except np.linalg.LinAlgError:
                    pass
                ridge = 1e-8 if ridge == 0.0 else ridge * 100.0
                if ridge > 1.0:
                    raise EvaluationError("logistic solve failed even with heavy damping")
            step = 1.0
            slope = float(grad @ delta)
            while step > 1e-10:
                cand = beta - step * delta
                cand_nll, cand_grad = logistic_nll_grad(cand, X1, yc)
                if cand_nll <= nll - 1e-4 * step * slope:
                    break
                step /= 2.0
            if abs(nll - cand_nll) <= 1e-12 * max(1.0, abs(nll)):
                beta, nll, grad = cand, cand_nll, cand_grad
                break
            beta, nll, grad = cand, cand_nll, cand_grad
        betas[c] = beta
    return betas


def predict_scores_lr(betas: np.ndarray, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    X1 = np.hstack([np.ones((Z.shape[0], 1)), Z])
    return _sigmoid(X1 @ betas.T)


def renormalize_scores(scores: np.ndarray) -> np.ndarray:
    """Rescale non-negative per-class scores so each row sums to one.

    Rescaling is order-preserving within a row, so the predicted class is
    unchanged by any monotone per-row adjustment applied before it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    return scores / scores.sum(axis=1, keepdims=True)


def predict_proba_lr(betas: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Per-class sigmoid scores rescaled to sum to one per row."""
    return renormalize_scores(predict_scores_lr(betas, Z))


# ---------------------------------------------------------------------------
# Random forest


def _leaf(counts: np.ndarray) -> dict:
    # the full class-count vector is kept so ties stay inspectable
    return {"n": [int(v) for v in counts]}


def _best_split(
    Z: np.ndarray, yb: np.ndarray, idx: np.ndarray, feats: np.ndarray, n_classes: int, min_leaf: int
) -> tuple[int, float] | None:
    """Split minimizing weighted child Gini impurity, decided exactly.

    Impurity ranking reduces to maximizing (A(n-t) + Bt) / (t(n-t)) with
    A, B the summed squared child class counts. Candidates near the float
    maximum are re-compared with integer cross-multiplication, so the
    winner (and the lowest-feature, lowest-threshold tie rule) never
    depends on rounding.
    """
    n = len(idx)
    y_node = yb[idx]
    best_num = -1
    best_den = 1
    best: tuple[int, float] | None = None
    for fi in feats:
        v = Z[idx, fi]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        cum = np.cumsum(np.eye(n_classes, dtype=np.int64)[y_node[order]], axis=0)
        cut = np.flatnonzero(sv[:-1] != sv[1:])  # last index of each left group
        if len(cut) == 0:
            continue
        t = cut + 1
        ok = (t >= min_leaf) & (n - t >= min_leaf)
        if not ok.any():
            continue
        cut, t = cut[ok], t[ok]
        left = cum[cut]
        right = cum[-1] - left
        A = np.sum(left * left, axis=1)
        B = np.sum(right * right, axis=1)
        num = A * (n - t) + B * t
        den = t * (n - t)
        q = num / den
        near = np.flatnonzero(q >= q.max() * (1.0 - 1e-9))
        for k in near:
            cnum, cden = int(num[k]), int(den[k])
            if cnum * best_den > best_num * cden:
                best_num, best_den = cnum, cden
                best = (int(fi), float(sv[cut[k]]))
    return best


def _grow_tree(
    Z: np.ndarray,
    yb: np.ndarray,
    idx: np.ndarray,
    depth: int,
    rng: np.random.Generator,
    n_classes: int,
    max_depth: int,
    m_features: int,
    min_leaf: int,
) -> dict:
    counts = np.bincount(yb[idx], minlength=n_classes)
    if (
        depth >= max_depth
        or len(idx) < 2 * min_leaf
        or counts.max() == len(idx)
        or Z.shape[1] == 0
    ):
        return _leaf(counts)
    p = Z.shape[1]
    if m_features < p:
        feats = np.sort(rng.choice(p, size=m_features, replace=False))
    else:
        feats = np.arange(p)
    split = _best_split(Z, yb, idx, feats, n_classes, min_leaf)
    if split is None:
        return _leaf(counts)
    fi, thr = split
    mask = Z[idx, fi] <= thr
    left = _grow_tree(Z, yb, idx[mask], depth + 1, rng, n_classes, max_depth, m_features, min_leaf)
    right = _grow_tree(Z, yb, idx[~mask], depth + 1, rng, n_classes, max_depth, m_features, min_leaf)
    return {"f": fi, "t": thr, "l": left, "r": right}


def build_tree(
    Z: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    tree_seed: int,
    max_depth: int,
    m_features: int,
    min_leaf: int,
    bootstrap: bool = True,
) -> dict:
    """One decision tree on a bootstrap resample drawn from ``tree_seed``."""
    rng = np.random.default_rng(tree_seed)
    n = Z.shape[0]
    idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    return _grow_tree(Z, np.asarray(y), idx, 0, rng, n_classes, max_depth, m_features, min_leaf)


def apply_tree(node: dict, Z: np.ndarray) -> np.ndarray:
    """Class prediction of one tree for every row; leaf ties go to the lowest index."""
    n = Z.shape[0]
    out = np.empty(n, dtype=np.int64)
    stack: list[tuple[dict, np.ndarray]] = [(node, np.arange(n))]
    while stack:
        nd, rows = stack.pop()
        if "n" in nd:
            out[rows] = int(np.argmax(nd["n"]))
            continue
        mask = Z[rows, nd["f"]] <= nd["t"]
        stack.append((nd["l"], rows[mask]))
        stack.append((nd["r"], rows[~mask]))
    return out


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[dict, ...]
    n_classes: int
    tree_seeds: tuple[int, ...]


def fit_rf(
    Z: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    n_trees: int,
    max_depth: int,
    m_features: int,
    min_leaf: int,
    seed: int,
    n_threads: int = 1,
) -> ForestModel:
    """Bootstrap forest; tree t draws all randomness from a seed derived for t.

    Trees may build in parallel threads, but the result is identical for
    any thread count because seeds are fixed per tree and collection keeps
    submission order.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    if n_trees < 1:
        raise ConfigError(f"forest needs at least one tree, got {n_trees}")
    if max_depth < 1:
        raise ConfigError(f"tree depth must be positive, got {max_depth}")
    if min_leaf < 1:
        raise ConfigError(f"minimum leaf size must be positive, got {min_leaf}")
    p = Z.shape[1]
    if p and not 1 <= m_features <= p:
        raise ConfigError(f"features per split must lie in [1, {p}], got {m_features}")
    m = m_features if p else 0
    seeds = tuple(derive_seed(seed, "tree", t) for t in range(n_trees))

    def one(ts: int) -> dict:
        return build_tree(Z, y, n_classes, ts, max_depth, m, min_leaf)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            trees = tuple(pool.map(one, seeds))
    else:
        trees = tuple(one(ts) for ts in seeds)
    return ForestModel(trees=trees, n_classes=n_classes, tree_seeds=seeds)


def predict_proba_rf(forest: ForestModel, Z: np.ndarray) -> np.ndarray:
    """Fraction of trees voting for each class."""
    Z = np.asarray(Z, dtype=np.float64)
    votes = np.zeros((Z.shape[0], forest.n_classes))
    for tree in forest.trees:
        preds = apply_tree(tree, Z)
        votes[np.arange(Z.shape[0]), preds] += 1.0
    return votes / len(forest.trees)


# ---------------------------------------------------------------------------
# Pipeline model


@dataclass(eq=False)
class PipelineModel:
    """Selected support, standardizer on that support, and the classifier.

    ``mean`` and ``scale`` are stored per support column, so the artifact
    carries exactly the parameters prediction needs; ``n_features_in`` pins
    the full input width for validation.
    """

    kind: str  # "lr" or "rf"
    classes: tuple[str, ...]
    n_features_in: int
    support: tuple[int, ...]
    mean: np.ndarray
    scale: np.ndarray
    hyperparams: dict
    seed: int
    provenance: dict = field(default_factory=dict)
    lr_betas: np.ndarray | None = None
    forest: ForestModel | None = None
    selector: LassoResult | None = field(default=None, repr=False)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in:
            raise DataError(
                f"expected {self.n_features_in} feature columns, got "
                f"{X.shape[1] if X.ndim == 2 else 'non-2d'}"
            )
        return standardize_apply(X[:, list(self.support)], self.mean, self.scale)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Zs = self.transform(X)
        if self.kind == "lr":
            assert self.lr_betas is not None
            return predict_proba_lr(self.lr_betas, Zs)
        assert self.forest is not None
        return predict_proba_rf(self.forest, Zs)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def resolve_hyperparams(kind: str, hyperparams: dict | None) -> dict:
    if kind == "lr":
        merged = dict(DEFAULT_HYPER_LR)
    elif kind == "rf":
        merged = dict(DEFAULT_HYPER_RF)
    else:
        raise ConfigError(f"unknown model kind {kind!r}; expected 'lr' or 'rf'")
    for k, v in (hyperparams or {}).items():
        if k not in merged:
            raise ConfigError(f"unknown hyperparameter {k!r} for model {kind!r}")
        merged[k] = v
    return merged


def fit_pipeline(
    X: np.ndarray,
    y: np.ndarray,
    classes: Sequence[str],
    kind: str,
    hyperparams: dict | None = None,
    seed: int = 0,
    n_threads: int = 1,
    provenance: dict | None = None,
) -> PipelineModel:
    """Standardize, select features, and fit the classifier on the support."""
    hp = resolve_hyperparams(kind, hyperparams)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] != len(y):
        raise DataError("matrix and labels disagree on row count")
    n_classes = len(classes)
    mean, scale = standardize_fit(X)
    Z = standardize_apply(X, mean, scale)
    selector = fit_lasso(Z, y, n_classes, float(hp["lambda"]))
    cols = list(selector.support)
    Zs = Z[:, cols]

    model = PipelineModel(
        kind=kind,
        classes=tuple(classes),
        n_features_in=X.shape[1],
        support=selector.support,
        mean=mean[cols],
        scale=scale[cols],
        hyperparams=hp,
        seed=seed,
        provenance=dict(provenance or {}),
        selector=selector,
    )
    if kind == "lr":
        model.lr_betas = fit_lr(Zs, y, n_classes)
    else:
        s = len(selector.support)
        m = int(hp["m_features"])
        if m <= 0:
            m = max(1, round(math.sqrt(s))) if s else 0
        m = min(m, s) if s else 0
        model.forest = fit_rf(
            Zs,
            y,
            n_classes,
            n_trees=int(hp["n_trees"]),
            max_depth=int(hp["max_depth"]),
            m_features=m,
            min_leaf=int(hp["min_leaf"]),
            seed=seed,
            n_threads=n_threads,
        )
    return model


# ---------------------------------------------------------------------------
# Artifacts


def model_to_dict(model: PipelineModel) -> dict:
    out: dict = {
        "format": MODEL_FORMAT,
        "kind": model.kind,
        "classes": list(model.classes),
        "n_features_in": model.n_features_in,
        "support": list(model.support),
        "standardizer": {"mean": [float(v) for v in model.mean], "scale": [float(v) for v in model.scale]},
        "hyperparams": model.hyperparams,
        "seed": model.seed,
        "provenance": model.provenance,
    }
    if model.kind == "lr":
        assert model.lr_betas is not None
        out["classifier"] = {"betas": [[float(v) for v in row] for row in model.lr_betas]}
    else:
        assert model.forest is not None
        out["classifier"] = {
            "trees": list(model.forest.trees),
            "tree_seeds": list(model.forest.tree_seeds),
        }
    return out


def save_model(model: PipelineModel, path: str | Path) -> None:
    """Write the model as deterministic JSON (identical fits give identical bytes)."""
    payload = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(payload + "\n", encoding="utf-8")


def load_model(path: str | Path) -> PipelineModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid model JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a {MODEL_FORMAT} artifact")
    kind = doc["kind"]
    model = PipelineModel(
        kind=kind,
        classes=tuple(doc["classes"]),
        n_features_in=int(doc["n_features_in"]),
        support=tuple(int(j) for j in doc["support"]),
        mean=np.array(doc["standardizer"]["mean"], dtype=np.float64),
        scale=np.array(doc["standardizer"]["scale"], dtype=np.float64),
        hyperparams=dict(doc["hyperparams"]),
        seed=int(doc["seed"]),
        provenance=dict(doc.get("provenance", {})),
    )
    clf = doc["classifier"]
    if kind == "lr":
        model.lr_betas = np.array(clf["betas"], dtype=np.float64)
    elif kind == "rf":
        model.forest = ForestModel(
            trees=tuple(clf["trees"]),
            n_classes=len(model.classes),
            tree_seeds=tuple(int(s) for s in clf["tree_seeds"]),
        )
    else:
        raise DataError(f"{path}: unknown model kind {kind!r}")
    return model
