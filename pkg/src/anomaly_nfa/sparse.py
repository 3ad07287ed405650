"""Sparse background model: dictionary learning, lasso coding, features.

A patch p is coded against a learned dictionary D by minimizing

    0.5 * ||D x - p||^2 + lambda * ||x||_1

(the 1/2 data-term convention is used everywhere, matching the dual form).
The pair (reconstruction error, l1 norm) of each patch is the detection
feature; its empirical 2-D Gaussian provides the Mahalanobis statistic.
The Lagrangian dual of the coding problem recovers eta = p - D x as the
anomaly component, subject to ||D^T eta||_inf <= lambda, which doubles as
an independent certificate that the primal solver converged.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .image import PatchGrid

DICT_MAGIC = b"DICT"


@dataclass(frozen=True)
class Dictionary:
    """Matrix of unit-norm atoms, one per column."""

    atoms: np.ndarray
    objective_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise ValueError("atoms must be a 2-D (atom_dim, n_atoms) matrix")
        norms = np.linalg.norm(atoms, axis=0)
        if not np.all(np.abs(norms - 1.0) <= 1e-10):
            raise ValueError("dictionary columns must be unit-norm")
        object.__setattr__(self, "atoms", atoms)

    @property
    def atom_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True)
class SparseCode:
    coeffs: np.ndarray
    residual_norm: float


@dataclass(frozen=True)
class FeaturePair:
    """(reconstruction error, l1 norm) of a coded patch."""

    err: float
    l1: float


@dataclass(frozen=True)
class Gaussian2D:
    mu: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class DualDiagnostics:
    primal: float
    dual: float
    gap: float
    dual_infnorm: float
    feasible: bool
    gap_ok: bool

    @property
    def ok(self) -> bool:
        return self.feasible and self.gap_ok


def lasso_objective(D: np.ndarray, X: np.ndarray, P: np.ndarray, lam: float) -> np.ndarray:
    """Per-column objective 0.5||DX - P||^2 + lam ||X||_1."""
    r = D @ X - P
    return 0.5 * np.sum(r * r, axis=0) + lam * np.sum(np.abs(X), axis=0)


def _kkt_residual(G, B, X, lam):
    """Worst violation of the lasso optimality conditions, per column.

    g = D^T(DX - P); active coordinates need g = -lam*sign(x), inactive ones
    need |g| <= lam. Returned in absolute units (compare against lam * tol).
    """
    g = G @ X - B
    active = X != 0
    viol_active = np.abs(g + lam * np.sign(X)) * active
    viol_inactive = np.maximum(np.abs(g) - lam, 0.0) * ~active
    return np.maximum(viol_active, viol_inactive).max(axis=0)


def _ista_phase(G, B, lam, step, X, max_iters, target, check_every=10):
    """Accelerated soft-thresholding iterations (Nesterov momentum with
    adaptive restart and a step-halving safeguard); stops once the worst
    KKT residual falls below `target`. Returns (X, iterations_used)."""
    Y = X.copy()
    X_prev = X.copy()
    t = 1.0
    last_obj = np.inf
    for it in range(1, max_iters + 1):
        g = G @ Y - B
        X = Y - step * g
        np.sign(X, out=(S := np.sign(X)))
        np.abs(X, out=X)
        X -= step * lam
        np.maximum(X, 0.0, out=X)
        X *= S
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / tn
        restart = np.sum((Y - X) * (X - X_prev), axis=0) > 0.0
        Y = X + beta * (X - X_prev)
        if np.any(restart):
            Y[:, restart] = X[:, restart]
        t = 1.0 if np.all(restart) else tn
        X_prev = X
        if it % check_every == 0:
            kkt = _kkt_residual(G, B, X, lam)
            if kkt.max() <= target:
                return X, it
            obj = 0.5 * np.einsum("ij,ij->", X, G @ X) - np.einsum("ij,ij->", X, B) \
                + lam * np.abs(X).sum()
            if obj > last_obj * (1.0 + 1e-12):
                step *= 0.5
                Y = X.copy()
                t = 1.0
            last_obj = obj
    return X, max_iters


def _feature_sign_column(G, b, lam, x_init, max_steps):
    """Feature-sign search for one lasso column (Lee et al. style).

    Alternates exact solves on the current signed support with a line
    search to the first zero crossing whenever a coordinate would flip
    sign; the objective strictly decreases, so the walk terminates. The
    caller supplies a warm start whose support seeds the active set.
    """
    n = G.shape[0]
    x = x_init.copy()
    for _ in range(max_steps):
        nz = np.flatnonzero(x)
        g = G[:, nz] @ x[nz] - b
        active = x != 0
        act_ok = (not active.any()) or bool(
            np.all(np.abs(g[active] + lam * np.sign(x[active])) <= lam * 1e-9)
        )
        viol = np.where(~active, np.abs(g) - lam, -np.inf)
        worst = int(np.argmax(viol))
        if act_ok and viol[worst] <= lam * 1e-12:
            return x
        if viol[worst] > lam * 1e-12:
            x[worst] = -np.sign(g[worst]) * np.finfo(float).tiny
        for _ in range(n + 1):
            support = np.flatnonzero(x)
            if support.size == 0:
                break
            s = np.sign(x[support])
            # tiny ridge keeps degenerate supports solvable so the line
            # search can pivot through them
            gs = G[np.ix_(support, support)] \
                + np.eye(support.size) * (1e-12 * np.trace(G) / G.shape[0])
            rhs = b[support] - lam * s
            try:
                xs = np.linalg.solve(gs, rhs)
            except np.linalg.LinAlgError:
                xs, *_ = np.linalg.lstsq(gs, rhs, rcond=None)
            cur = x[support]
            flips = np.sign(xs) * s < 0
            if not flips.any():
                x[support] = xs
                break
            # step towards xs only until the first coefficient hits zero
            delta = xs - cur
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(flips, cur / (cur - xs), np.inf)
            t_hit = float(np.min(t[flips]))
            stepped = cur + min(max(t_hit, 0.0), 1.0) * delta
            stepped[np.abs(stepped) < 1e-300] = 0.0
            hit = int(np.argmin(np.where(flips, t, np.inf)))
            stepped[hit] = 0.0
            x[support] = stepped
    return x


def _refine_supports(G, B, lam, X, todo, max_steps=None):
    """Polish each listed column with feature-sign search; keep the result
    only when it improves the column's KKT residual."""
    if max_steps is None:
        max_steps = max(80, 3 * G.shape[0])
    for j in todo:
        x0 = X[:, j]
        x = _feature_sign_column(G, B[:, j], lam, x0.copy(), max_steps)
        old = _kkt_residual(G, B[:, j : j + 1], x0[:, None], lam)[0]
        new = _kkt_residual(G, B[:, j : j + 1], x[:, None], lam)[0]
        if new <= old:
            X[:, j] = x
    return X


def lasso_batch(D: np.ndarray, P: np.ndarray, lam: float, max_iters: int = 2000,
                kkt_tol: float = 1e-6, X0: np.ndarray | None = None) -> np.ndarray:
    """Solve the lasso for every column of P.

    Two phases: accelerated iterative soft-thresholding (step 1/L from the
    Gram's top eigenvalue, halved if the objective ever rises) locates each
    column's support, then exact solves on those supports polish every
    column to the KKT conditions within lam * kkt_tol. The exact phase is
    what keeps overcomplete dictionaries (singular Gram) from crawling.

    Raises RuntimeError if the iteration cap is hit before convergence.
    """
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    dim, n_atoms = D.shape
    if P.shape[0] != dim:
        raise ValueError(f"patch dim {P.shape[0]} != atom dim {dim}")
    G = D.T @ D
    B = D.T @ P
    L = float(np.linalg.eigvalsh(G)[-1])
    if L <= 0:
        return np.zeros((n_atoms, P.shape[1]))
    step = 1.0 / L

    X = np.zeros((n_atoms, P.shape[1])) if X0 is None else X0.copy()
    # the soft-thresholding phase only needs to seed plausible supports;
    # the exact phase carries each column the rest of the way
    coarse = max(lam * kkt_tol, lam * 0.5)
    X, used = _ista_phase(G, B, lam, step, X, max_iters, coarse)
    budget = max_iters - used
    for _ in range(6):
        kkt = _kkt_residual(G, B, X, lam)
        todo = np.flatnonzero(kkt > lam * kkt_tol)
        if todo.size == 0:
            return X
        X = _refine_supports(G, B, lam, X, todo)
        kkt = _kkt_residual(G, B, X, lam)
        todo = np.flatnonzero(kkt > lam * kkt_tol)
        if todo.size == 0:
            return X
        if budget <= 0:
            break
        X[:, todo], used = _ista_phase(G, B[:, todo], lam, step, X[:, todo],
                                       min(budget, 200), lam * kkt_tol)
        budget -= used
    kkt = _kkt_residual(G, B, X, lam)
    if kkt.max() <= lam * kkt_tol:
        return X
    raise RuntimeError(
        f"lasso did not reach KKT tolerance in {max_iters} iterations "
        f"(worst residual {float(kkt.max()):.3e} vs {lam * kkt_tol:.3e})"
    )


def sparse_code(p: np.ndarray, dictionary: Dictionary, lam: float,
                max_iters: int = 2000, kkt_tol: float = 1e-6) -> SparseCode:
    """Code a single patch; see :func:`lasso_batch` for the solver."""
    p = np.asarray(p, dtype=np.float64).ravel()
    X = lasso_batch(dictionary.atoms, p[:, None], lam, max_iters=max_iters,
                    kkt_tol=kkt_tol)
    coeffs = X[:, 0]
    residual = dictionary.atoms @ coeffs - p
    return SparseCode(coeffs=coeffs, residual_norm=float(np.linalg.norm(residual)))


def feature_pair(p: np.ndarray, dictionary: Dictionary, lam: float) -> FeaturePair:
    code = sparse_code(p, dictionary, lam)
    return FeaturePair(err=code.residual_norm, l1=float(np.abs(code.coeffs).sum()))


def feature_pairs_batch(P: np.ndarray, dictionary: Dictionary, lam: float,
                        max_iters: int = 2000, kkt_tol: float = 1e-6) -> np.ndarray:
    """(n, 2) array of (err, l1) features for patches given as columns of P."""
    X = lasso_batch(dictionary.atoms, P, lam, max_iters=max_iters, kkt_tol=kkt_tol)
    R = dictionary.atoms @ X - P
    err = np.sqrt(np.sum(R * R, axis=0))
    l1 = np.sum(np.abs(X), axis=0)
    return np.stack([err, l1], axis=1)


def learn_dictionary(patches, redundancy: float, lam: float, n_iters: int = 20,
                     seed: int = 0, max_inner_iters: int = 2000) -> Dictionary:
    """Alternating minimization of 0.5||DX - P||_F^2 + lam ||X||_1.

    Each round sparse-codes all patches against the current dictionary and
    then updates every atom by a unit-norm-constrained least-squares step
    (coefficients held fixed), which keeps the objective non-increasing.
    Atoms that no patch uses are reseeded from the worst-represented patch.
    """
    if isinstance(patches, PatchGrid):
        P = patches.vectors.T.astype(np.float64)
    else:
        P = np.asarray(patches, dtype=np.float64)
    dim, n_patches = P.shape
    n_atoms = int(np.ceil(redundancy * dim))
    norms = np.linalg.norm(P, axis=0)
    usable = np.flatnonzero(norms > 0)
    if len(usable) < n_atoms:
        raise ValueError(
            f"need at least {n_atoms} nonzero patches to learn, got {len(usable)}"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(usable, size=n_atoms, replace=False)
    D = P[:, picks] / norms[picks]

    X = None
    history = []
    for _ in range(n_iters):
        X_new = lasso_batch(D, P, lam, max_iters=max_inner_iters, X0=X)
        if X is not None:
            # keep the better code per patch so J never goes up
            worse = lasso_objective(D, X_new, P, lam) > lasso_objective(D, X, P, lam)
            X_new[:, worse] = X[:, worse]
        X = X_new

        R = P - D @ X
        res_norms = np.sum(R * R, axis=0)
        for j in range(n_atoms):
            xj = X[j, :]
            energy = float(xj @ xj)
            v = R @ xj + D[:, j] * energy
            vn = float(np.linalg.norm(v))
            if energy <= 1e-20 or vn <= 1e-12:
                # dead atom: reseed where the model currently does worst
                worst = int(np.argmax(res_norms))
                if norms[worst] > 0:
                    D[:, j] = P[:, worst] / norms[worst]
                continue
            d_new = v / vn
            R += np.outer(D[:, j] - d_new, xj)
            D[:, j] = d_new
        history.append(float(lasso_objective(D, X, P, lam).sum()))

    return Dictionary(atoms=D, objective_history=tuple(history))


def dual_anomaly(p: np.ndarray, dictionary: Dictionary, lam: float,
                 code: SparseCode, tol: float = 1e-6):
    """Dual variable eta = p - D x and its certificate.

    eta solves max  eta^T p - 0.5||eta||^2  s.t. ||D^T eta||_inf <= lam,
    and represents the anomalous component of the patch. Returns
    (eta, DualDiagnostics); the flags report whether the handed-in primal
    code actually satisfies feasibility and a vanishing duality gap.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    eta = p - dictionary.atoms @ code.coeffs
    primal = 0.5 * float(eta @ eta) + lam * float(np.abs(code.coeffs).sum())
    dual = float(eta @ p) - 0.5 * float(eta @ eta)
    gap = primal - dual
    dual_infnorm = float(np.abs(dictionary.atoms.T @ eta).max())
    diag = DualDiagnostics(
        primal=primal,
        dual=dual,
        gap=gap,
        dual_infnorm=dual_infnorm,
        feasible=dual_infnorm <= lam * (1.0 + tol),
        gap_ok=abs(gap) <= tol * (1.0 + abs(primal)),
    )
    return eta, diag


def fit_gaussian2d(pairs) -> Gaussian2D:
    """Empirical mean/covariance of (err, l1) pairs, diagonally regularized."""
    arr = _pairs_to_array(pairs)
    if arr.shape[0] < 3:
        raise ValueError("need at least 3 pairs to fit")
    mu = arr.mean(axis=0)
    centered = arr - mu
    cov = centered.T @ centered / arr.shape[0]
    cov = cov + np.eye(2) * (1e-9 * np.trace(cov) / 2.0 + 1e-300)
    if np.linalg.det(cov) <= 0:
        raise ValueError("covariance is singular even after regularization")
    return Gaussian2D(mu=mu, cov=cov)


def mahalanobis2d(pair, gaussian: Gaussian2D) -> float:
    return float(mahalanobis2d_many(_pairs_to_array([pair]), gaussian)[0])


def mahalanobis2d_many(pairs, gaussian: Gaussian2D) -> np.ndarray:
    """Mahalanobis distances of (n, 2) points, via the closed-form 2x2 inverse."""
    arr = _pairs_to_array(pairs)
    a, b = gaussian.cov[0, 0], gaussian.cov[0, 1]
    c, d = gaussian.cov[1, 0], gaussian.cov[1, 1]
    det = a * d - b * c
    v = arr - gaussian.mu
    q = (d * v[:, 0] ** 2 - (b + c) * v[:, 0] * v[:, 1] + a * v[:, 1] ** 2) / det
    return np.sqrt(np.maximum(q, 0.0))


def _pairs_to_array(pairs) -> np.ndarray:
    if isinstance(pairs, np.ndarray):
        return np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    rows = []
    for p in pairs:
        if isinstance(p, FeaturePair):
            rows.append((p.err, p.l1))
        else:
            rows.append(tuple(p))
    return np.asarray(rows, dtype=np.float64)


def save_dictionary(dictionary: Dictionary, path) -> None:
    """Binary dump: magic, u32 atom_dim, u32 n_atoms, float64 column-major."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(DICT_MAGIC)
        f.write(struct.pack("<II", dictionary.atom_dim, dictionary.n_atoms))
        f.write(np.asfortranarray(dictionary.atoms, dtype="<f8").tobytes(order="F"))
    os.replace(tmp, path)


def load_dictionary(path) -> Dictionary:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DICT_MAGIC:
            raise ValueError(f"{path}: not a dictionary file")
        dim, n_atoms = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != dim * n_atoms:
        raise ValueError(f"{path}: truncated dictionary payload")
    return Dictionary(atoms=data.reshape(dim, n_atoms, order="F").copy())
