"""Sparse-precision Gaussian Markov random fields.

Structured effects are built as ``tau * R(theta)``.  Intrinsic effects (RW1,
RW2) carry linear constraints that are enforced by conditioning on ``Ax = e``
(conditioning by kriging); the structure matrix itself is left singular and a
small jitter is added only when it has to be factorized.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _cholesky

KINDS = ("iid", "rw1", "rw2", "ar1", "lattice_matern", "kronecker")
INTRINSIC_KINDS = {"rw1": 1, "rw2": 2}
# role -> hyperparameter roles each kind understands; "prec" is optional for ar1/kronecker children
ROLES = {
    "iid": ("prec",),
    "rw1": ("prec",),
    "rw2": ("prec",),
    "ar1": ("prec", "rho"),
    "lattice_matern": ("range", "sd"),
    "kronecker": (),
}
# role carrying the marginal scale of each kind (non-identifiable against a sharing alpha)
SCALE_ROLE = {"iid": "prec", "rw1": "prec", "rw2": "prec", "ar1": "prec", "lattice_matern": "sd"}
JITTER = 1e-8


class FactorizationError(np.linalg.LinAlgError):
    """Matrix is not positive definite; ``pivot`` is the failing index (original ordering)."""

    def __init__(self, pivot: int, message: str = ""):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix not positive definite (failing pivot {self.pivot})")


@dataclass(frozen=True)
class EffectSpec:
    """Declarative structured random effect.

    ``hyper_names`` maps a role (``prec``, ``rho``, ``range``, ``sd``) to the
    name of the hyperparameter that controls it.
    """

    kind: str
    size: int = 0
    grid: Optional[tuple[int, int]] = None
    spacing: float = 1.0
    hyper_names: Mapping[str, str] = field(default_factory=dict)
    children: tuple["EffectSpec", ...] = ()
    constrained: Optional[bool] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown effect kind {self.kind!r}")
        object.__setattr__(self, "hyper_names", dict(self.hyper_names))
        object.__setattr__(self, "children", tuple(self.children))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.kind == "kronecker" and len(self.children) != 2:
            raise ValueError("kronecker effect needs exactly two child specs")
        if self.kind == "lattice_matern" and self.grid is None:
            raise ValueError("lattice_matern effect needs grid dimensions (nx, ny)")

    def __hash__(self):
        return hash((self.kind, self.dim, tuple(sorted(self.all_hyper_names().items()))))

    @property
    def dim(self) -> int:
        if self.kind == "kronecker":
            return self.children[0].dim * self.children[1].dim
        if self.kind == "lattice_matern":
            return self.grid[0] * self.grid[1]
        return int(self.size)

    @property
    def is_constrained(self) -> bool:
        if self.kind == "kronecker":
            return any(c.is_constrained for c in self.children)
        if self.constrained is None:
            return self.kind in INTRINSIC_KINDS
        return bool(self.constrained)

    def all_hyper_names(self) -> dict[str, str]:
        """Flattened ``{path.role: name}`` over this spec and its children."""
        out = {role: name for role, name in self.hyper_names.items()}
        for k, child in enumerate(self.children):
            for role, name in child.all_hyper_names().items():
                out[f"{k}.{role}"] = name
        return out

    def theta_names(self) -> list[str]:
        seen = []
        for name in self.all_hyper_names().values():
            if name not in seen:
                seen.append(name)
        return seen

    def role_of(self, name: str) -> Optional[str]:
        for path, n in self.all_hyper_names().items():
            if n == name:
                return path.split(".")[-1]
        return None

    def scale_names(self) -> list[str]:
        """Hyperparameters that set the marginal scale of the field."""
        if self.kind == "kronecker":
            return [n for c in self.children for n in c.scale_names()]
        role = SCALE_ROLE.get(self.kind)
        return [self.hyper_names[role]] if role in self.hyper_names else []

    def resized(self, size: int) -> "EffectSpec":
        return EffectSpec(self.kind, size, self.grid, self.spacing, self.hyper_names,
                          self.children, self.constrained)

    def renamed(self, mapping: Mapping[str, str]) -> "EffectSpec":
        hn = {r: mapping.get(n, n) for r, n in self.hyper_names.items()}
        kids = tuple(c.renamed(mapping) for c in self.children)
        return EffectSpec(self.kind, self.size, self.grid, self.spacing, hn, kids, self.constrained)


@dataclass
class SparsePrecision:
    """Symmetric precision matrix plus the linear constraints of intrinsic effects."""

    matrix: sp.csr_matrix
    rank_deficiency: int = 0
    constraints: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def regularized(self) -> sp.csr_matrix:
        if self.rank_deficiency == 0:
            return self.matrix
        return (self.matrix + JITTER * sp.identity(self.dim, format="csr")).tocsr()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


# --------------------------------------------------------------------------- builders


def difference_matrix(n: int, order: int) -> sp.csr_matrix:
    D = sp.identity(n, format="csr")
    for _ in range(order):
        m = D.shape[0]
        D = (sp.eye(m - 1, m, k=1) - sp.eye(m - 1, m)) @ D
    return sp.csr_matrix(D)


@functools.lru_cache(maxsize=64)
def _rw_unit(n: int, order: int) -> sp.csr_matrix:
    D = difference_matrix(n, order)
    return sp.csr_matrix(D.T @ D)


def rw_structure(n: int, order: int) -> sp.csr_matrix:
    return _rw_unit(n, order).copy()


def ar1_structure(n: int, rho: float) -> sp.csr_matrix:
    """Stationary AR1 precision with unit marginal variance."""
    diag = np.full(n, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    off = np.full(n - 1, -rho)
    R = sp.diags([off, diag, off], [-1, 0, 1], format="csr")
    return R / (1.0 - rho * rho)


@functools.lru_cache(maxsize=64)
def _lattice_laplacian(nx: int, ny: int) -> sp.csr_matrix:
    def path(m):
        return rw_structure(m, 1)

    return sp.csr_matrix(sp.kron(path(ny), sp.identity(nx)) + sp.kron(sp.identity(ny), path(nx)))


@functools.lru_cache(maxsize=256)
def _lattice_unit_structure(nx: int, ny: int, spacing: float, range_: float) -> tuple:
    # mass-lumped alpha=2 SPDE operator: K C^{-1} K with K = kappa^2 C + G, C = h^2 I
    kappa = np.sqrt(8.0) / range_
    h2 = spacing * spacing
    G = _lattice_laplacian(nx, ny)
    K = kappa * kappa * h2 * sp.identity(nx * ny) + G
    R = sp.csr_matrix(K @ K) / h2
    # normalise so the average marginal variance is one
    avg = float(np.mean(marginal_variances(R)))
    R = sp.csr_matrix(R * avg)
    R.sort_indices()
    return R.data, R.indices, R.indptr


def lattice_matern_structure(nx: int, ny: int, spacing: float, range_: float) -> sp.csr_matrix:
    data, indices, indptr = _lattice_unit_structure(nx, ny, float(spacing), float(range_))
    return sp.csr_matrix((data.copy(), indices, indptr), shape=(nx * ny, nx * ny))


def effect_constraints(spec: EffectSpec) -> Optional[np.ndarray]:
    """Constraint rows A with A x = 0 (sum-to-zero, plus zero linear trend for RW2)."""
    if spec.kind == "kronecker":
        c0, c1 = spec.children
        A0, A1 = effect_constraints(c0), effect_constraints(c1)
        if A0 is not None and A1 is not None:
            raise ValueError("kronecker effect supports at most one intrinsic child")
        if A0 is not None:
            return np.kron(A0, np.eye(c1.dim))
        if A1 is not None:
            return np.kron(np.eye(c0.dim), A1)
        return None
    if not spec.is_constrained:
        return None
    n = spec.dim
    rows = [np.ones(n)]
    if spec.kind == "rw2":
        t = np.arange(n, dtype=float)
        rows.append(t - t.mean())
    return np.vstack(rows)


def _value(theta: Mapping[str, float], spec: EffectSpec, role: str, default=None) -> float:
    name = spec.hyper_names.get(role)
    if name is None:
        if default is None:
            raise KeyError(f"{spec.kind} effect has no hyperparameter bound to role {role!r}")
        return default
    if name not in theta:
        raise KeyError(f"theta does not supply {name!r}")
    return float(theta[name])


def build_effect_precision(spec: EffectSpec, theta: Mapping[str, float]) -> SparsePrecision:
    """Precision ``tau * R(theta)`` of a structured effect.

    ``theta`` maps hyperparameter names to natural-scale values (precision,
    correlation, range, standard deviation).
    """
    kind = spec.kind
    if kind in ("rw1", "rw2", "ar1") and spec.dim < 2:
        raise ValueError(f"{kind} effect needs size >= 2, got {spec.dim}")
    if kind == "rw2" and spec.dim < 3:
        raise ValueError("rw2 effect needs size >= 3")
    if kind == "kronecker":
        P0 = build_effect_precision(spec.children[0], theta)
        P1 = build_effect_precision(spec.children[1], theta)
        M = sp.csr_matrix(sp.kron(P0.matrix, P1.matrix))
        rd = (P0.rank_deficiency * spec.children[1].dim
              + spec.children[0].dim * P1.rank_deficiency)
        return SparsePrecision(M, rd, effect_constraints(spec))
    if kind == "lattice_matern":
        nx, ny = spec.grid
        if nx < 2 or ny < 2:
            raise ValueError(f"lattice grid dimensions must be >= 2, got {spec.grid}")
        range_ = _value(theta, spec, "range")
        sd = _value(theta, spec, "sd")
        if range_ <= 0 or sd <= 0:
            raise ValueError("lattice range and sd must be positive")
        R = lattice_matern_structure(nx, ny, spec.spacing, range_)
        return SparsePrecision(sp.csr_matrix(R / (sd * sd)), 0, None)

    tau = _value(theta, spec, "prec", default=1.0 if kind == "ar1" else None)
    if not tau > 0:
        raise ValueError(f"precision must be positive, got {tau}")
    n = spec.dim
    if kind == "iid":
        R = sp.identity(n, format="csr")
    elif kind in INTRINSIC_KINDS:
        R = rw_structure(n, INTRINSIC_KINDS[kind])
    else:
        rho = _value(theta, spec, "rho")
        if not -1.0 < rho < 1.0:
            raise ValueError(f"ar1 correlation must lie in (-1, 1), got {rho}")
        R = ar1_structure(n, rho)
    rd = INTRINSIC_KINDS.get(kind, 0)
    return SparsePrecision(sp.csr_matrix(tau * R), rd, effect_constraints(spec))


# --------------------------------------------------------------------------- factorization


def _fill_reducing_order(S: sp.csr_matrix) -> np.ndarray:
    """Reverse Cuthill-McKee with near-dense nodes moved to the end."""
    n = S.shape[0]
    pattern = sp.csr_matrix((np.ones_like(S.data), S.indices, S.indptr), shape=S.shape)
    degree = np.diff(pattern.indptr)
    dense = degree > max(16, 10 * np.sqrt(n))
    if not dense.any():
        return np.asarray(reverse_cuthill_mckee(pattern, symmetric_mode=True), dtype=np.int64)
    keep = np.flatnonzero(~dense)
    sub = pattern[keep][:, keep]
    inner = keep[np.asarray(reverse_cuthill_mckee(sp.csr_matrix(sub), symmetric_mode=True))]
    return np.concatenate([inner, np.flatnonzero(dense)]).astype(np.int64)


_SYMBOLIC_CACHE: dict = {}


def _symbolic(Q: sp.csc_matrix):
    """Ordering, elimination tree and column pointers, cached per sparsity pattern."""
    key = (Q.shape[0], hashlib.blake2b(Q.indptr.tobytes() + Q.indices.tobytes(),
                                       digest_size=16).digest())
    hit = _SYMBOLIC_CACHE.get(key)
    if hit is not None:
        return hit
    n = Q.shape[0]
    perm = _fill_reducing_order(sp.csr_matrix(Q))
    C = sp.csc_matrix(Q[perm][:, perm])
    C.sort_indices()
    Ap = C.indptr.astype(np.int64)
    Ai = C.indices.astype(np.int64)
    parent = _cholesky.etree(Ap, Ai, n)
    counts = _cholesky.column_counts(Ap, Ai, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    if len(_SYMBOLIC_CACHE) > 64:
        _SYMBOLIC_CACHE.clear()
    hit = (perm, np.argsort(perm), parent, Lp)
    _SYMBOLIC_CACHE[key] = hit
    return hit


class Factor:
    """Cholesky factor ``P Q P^T = L L^T`` of a symmetric positive definite matrix.

    Sparse input uses the compiled up-looking factorization, dense input uses
    LAPACK.
    """

    def __init__(self, Q):
        if sp.issparse(Q):
            self._init_sparse(sp.csc_matrix(Q))
        else:
            self._init_dense(np.asarray(Q, dtype=float))

    def _init_sparse(self, Q: sp.csc_matrix):
        n = Q.shape[0]
        self.n = n
        self.dense = False
        Q.sum_duplicates()
        Q.sort_indices()
        perm, iperm, parent, Lp = _symbolic(Q)
        C = sp.csc_matrix(Q[perm][:, perm])
        C.sort_indices()
        Ap = C.indptr.astype(np.int64)
        Ai = C.indices.astype(np.int64)
        Ax = C.data.astype(np.float64)
        Li, Lx, bad = _cholesky.numeric(Ap, Ai, Ax, parent, Lp)
        if bad >= 0:
            raise FactorizationError(int(perm[bad]))
        self.perm = perm
        self.iperm = iperm
        self.Lp, self.Li, self.Lx = Lp, Li, Lx

    def _init_dense(self, Q: np.ndarray):
        self.n = Q.shape[0]
        self.dense = True
        c, info = sla.lapack.dpotrf(Q, lower=1, clean=1, overwrite_a=0)
        if info > 0:
            raise FactorizationError(info - 1)
        if info < 0:
            raise ValueError("invalid argument passed to dpotrf")
        self.L = c

    @property
    def nnz(self) -> int:
        return self.n * (self.n + 1) // 2 if self.dense else int(self.Lp[-1])

    def logdet(self) -> float:
        if self.dense:
            return 2.0 * float(np.sum(np.log(np.diag(self.L))))
        return 2.0 * float(np.sum(np.log(self.Lx[self.Lp[:-1]])))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        vec = b.ndim == 1
        B = b.reshape(self.n, -1)
        if self.dense:
            x = sla.cho_solve((self.L, True), B)
        else:
            y = _cholesky.lsolve(self.Lp, self.Li, self.Lx, np.ascontiguousarray(B[self.perm]))
            x = _cholesky.ltsolve(self.Lp, self.Li, self.Lx, y)[self.iperm]
        return x.ravel() if vec else x

    def solve_Lt(self, z: np.ndarray) -> np.ndarray:
        """Solve ``L^T P x = z`` so that ``x ~ N(0, Q^{-1})`` when ``z`` is standard normal."""
        z = np.asarray(z, dtype=float)
        vec = z.ndim == 1
        Z = z.reshape(self.n, -1)
        if self.dense:
            x = sla.solve_triangular(self.L, Z, lower=True, trans="T")
        else:
            x = _cholesky.ltsolve(self.Lp, self.Li, self.Lx, np.ascontiguousarray(Z))[self.iperm]
        return x.ravel() if vec else x

    def inverse_diagonal(self) -> np.ndarray:
        if self.dense:
            Linv = sla.solve_triangular(self.L, np.eye(self.n), lower=True)
            return np.einsum("ij,ij->j", Linv, Linv)
        S = _cholesky.takahashi(self.Lp, self.Li, self.Lx)
        return S[self.Lp[:-1]][self.iperm]


def factorize(Q) -> Factor:
    """Cholesky-factorize a positive definite precision (``SparsePrecision``, sparse or dense)."""
    if isinstance(Q, SparsePrecision):
        Q = Q.regularized()
    return Factor(Q)


def marginal_variances(Q, constraints: Optional[np.ndarray] = None) -> np.ndarray:
    """Diagonal of ``Q^{-1}``, optionally conditioned on ``A x = e``."""
    if isinstance(Q, SparsePrecision):
        constraints = Q.constraints if constraints is None else constraints
    F = Q if isinstance(Q, Factor) else factorize(Q)
    var = F.inverse_diagonal()
    if constraints is not None:
        W = F.solve(constraints.T)
        C = constraints @ W
        var = var - np.einsum("ij,ji->i", W, np.linalg.solve(C, W.T))
    return var


def kriging_correction(F: Factor, x: np.ndarray, A: np.ndarray, e: Optional[np.ndarray] = None):
    """Project ``x`` onto ``A x = e`` in the metric of the factorized precision."""
    e = np.zeros(A.shape[0]) if e is None else e
    W = F.solve(A.T)
    return x - W @ np.linalg.solve(A @ W, A @ x - e)


# --------------------------------------------------------------------------- densities


@dataclass
class GaussianDensity:
    """Multivariate Gaussian ``N(mean, precision^{-1})`` over labelled latent nodes.

    ``precision`` may be a scipy sparse matrix or a dense array.
    ``constraints`` (if any) are rows of ``A`` in ``A x = 0``.
    """

    mean: np.ndarray
    precision: object
    node_labels: list = field(default_factory=list)
    constraints: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if isinstance(self.precision, SparsePrecision):
            if self.constraints is None:
                self.constraints = self.precision.constraints
            self.precision = self.precision.regularized()
        if self.precision.shape != (self.mean.size, self.mean.size):
            raise ValueError(
                f"mean has length {self.mean.size} but precision is {self.precision.shape}")
        if not self.node_labels:
            self.node_labels = list(range(self.mean.size))
        elif len(self.node_labels) != self.mean.size:
            raise ValueError("node_labels length differs from mean length")

    @property
    def dim(self) -> int:
        return self.mean.size

    def dense_precision(self) -> np.ndarray:
        P = self.precision
        return P.toarray() if sp.issparse(P) else np.asarray(P)

    def factor(self) -> Factor:
        return factorize(self.precision)

    def variances(self) -> np.ndarray:
        return marginal_variances(self.factor(), self.constraints)


def sample_gmrf(density: GaussianDensity, seed, size: Optional[int] = None) -> np.ndarray:
    """Draw from ``density``; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    F = density.factor()
    n = density.dim
    z = rng.standard_normal(n if size is None else (n, size))
    x = F.solve_Lt(z)
    if density.constraints is not None:
        A = density.constraints
        W = F.solve(A.T)
        x = x - W @ np.linalg.solve(A @ W, A @ x)
    if size is None:
        return density.mean + x
    return (density.mean[:, None] + x).T


# --------------------------------------------------------------------------- triplet IO


def write_triplets(Q, path) -> None:
    """Write the matrix as ``row col value`` lines (0-based)."""
    M = sp.coo_matrix(Q.matrix if isinstance(Q, SparsePrecision) else Q)
    lines = [f"{i} {j} {float(v)!r}" for i, j, v in zip(M.row, M.col, M.data)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_triplets(path, dim: Optional[int] = None) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'row col value'")
        rows.append(int(parts[0]))
        cols.append(int(parts[1]))
        vals.append(float(parts[2]))
    n = dim if dim is not None else (max(max(rows), max(cols)) + 1 if rows else 0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def block_diag(mats: Sequence) -> sp.csr_matrix:
    return sp.csr_matrix(sp.block_diag(list(mats), format="csr"))


def stack_constraints(blocks: Iterable[tuple[int, Optional[np.ndarray]]], n: int):
    """Place per-block constraint rows (block offset, A) into an ``n``-column matrix."""
    rows = []
    for offset, A in blocks:
        if A is None:
            continue
        full = np.zeros((A.shape[0], n))
        full[:, offset:offset + A.shape[1]] = A
        rows.append(full)
    return np.vstack(rows) if rows else None
