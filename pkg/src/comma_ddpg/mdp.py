"""Finite MDPs, the policy Bellman operator, and numerical convergence certificates.

Everything here works on explicit tables: ``P[s, a, s']`` and ``R[s, a]``.
A policy is a row-stochastic table ``pi[s, a]``; it induces the matrix
``P_pi[i, j] = sum_a pi[i, a] P[i, a, j]`` and reward ``R_pi[i] = sum_a pi[i, a] R[i, a]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._jit import njit
from .errors import ConfigError

STOCHASTIC_TOL = 1e-12


def _check_rows(M, what):
    if np.any(M < -STOCHASTIC_TOL):
        raise ValueError(f"{what}: negative probabilities")
    dev = np.max(np.abs(M.sum(axis=-1) - 1.0)) if M.size else 0.0
    if dev > STOCHASTIC_TOL * max(1, M.shape[-1]):
        raise ValueError(f"{what}: rows must sum to 1 (max deviation {dev:.3g})")


@dataclass
class FiniteMdp:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    gamma: float = 0.9

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {self.P.shape}")
        if self.R.shape != self.P.shape[:2]:
            raise ValueError(f"R must have shape {self.P.shape[:2]}, got {self.R.shape}")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        _check_rows(self.P, "transition")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "P": self.P.tolist(), "R": self.R.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteMdp":
        try:
            return cls(np.array(d["P"], dtype=float), np.array(d["R"], dtype=float), float(d["gamma"]))
        except KeyError as e:
            raise ConfigError(f"finite MDP is missing key {e}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FiniteMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PolicyMatrix:
    pi: np.ndarray
    P_pi: np.ndarray
    R_pi: np.ndarray

    def __post_init__(self):
        _check_rows(self.P_pi, "P_pi")
        if self.P_pi.shape != (len(self.R_pi), len(self.R_pi)):
            raise ValueError("P_pi must be square and match R_pi")

    @classmethod
    def from_policy(cls, mdp: FiniteMdp, pi) -> "PolicyMatrix":
        pi = np.asarray(pi, dtype=float)
        if pi.ndim == 1:  # deterministic: one action index per state
            pi = one_hot_policy(pi.astype(int), mdp.n_actions)
        if pi.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}")
        _check_rows(pi, "policy")
        return cls(pi, np.einsum("sa,sat->st", pi, mdp.P), np.einsum("sa,sa->s", pi, mdp.R))

    @property
    def n(self) -> int:
        return len(self.R_pi)


def one_hot_policy(actions, n_actions: int) -> np.ndarray:
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


# -- random instances --------------------------------------------------------

def random_stochastic(n: int, rng: np.random.Generator, shape=(), sparsity: float = 0.0) -> np.ndarray:
    """Row-stochastic array of shape ``shape + (n, n)``; optional random zeros."""
    X = rng.random(shape + (n, n))
    if sparsity > 0:
        X *= rng.random(X.shape) >= sparsity
        X[..., 0] += (X.sum(-1) == 0)  # keep every row non-empty
    return X / X.sum(-1, keepdims=True)


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> FiniteMdp:
    P = rng.random((n_states, n_actions, n_states))
    P /= P.sum(-1, keepdims=True)
    return FiniteMdp(P, rng.normal(size=(n_states, n_actions)), gamma)


def random_policy(mdp: FiniteMdp, rng: np.random.Generator) -> np.ndarray:
    pi = rng.random((mdp.n_states, mdp.n_actions))
    return pi / pi.sum(1, keepdims=True)


# -- Bellman operator ----------------------------------------------------------

def bellman_apply(pm: PolicyMatrix, v, lam: float) -> np.ndarray:
    """``R_pi + lam * P_pi @ v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (pm.n,):
        raise ValueError(f"value vector must have length {pm.n}, got shape {v.shape}")
    return pm.R_pi + lam * (pm.P_pi @ v)


def solve_linear(pm: PolicyMatrix, lam: float) -> np.ndarray:
    """Exact policy value from ``(I - lam P_pi) V = R_pi``."""
    return np.linalg.solve(np.eye(pm.n) - lam * pm.P_pi, pm.R_pi)


def sup_dist(u, v) -> float:
    return float(np.max(np.abs(np.asarray(u) - np.asarray(v)))) if len(u) else 0.0


@dataclass
class ValueIterationResult:
    V: np.ndarray
    iters: int
    ratios: np.ndarray  # d(Tu, Tv) / d(u, v) per iteration
    steps: np.ndarray  # sup-norm step ||u_{k+1} - u_k|| per iteration
    errors: np.ndarray = field(default=None)  # ||u_k - V_exact||, when requested


def value_iteration(mdp: FiniteMdp | None, policy, lam: float, tol: float = 1e-10,
                    v0=None, rng: np.random.Generator | None = None, max_iter: int | None = None,
                    track_error: bool = False, ratio_floor: float = 1e-2) -> ValueIterationResult:
    """Iterate ``u <- T u`` until the sup-norm step drops below ``tol``.

    A second trajectory from an independent random start runs alongside, and
    the ratio ``d(Tu, Tv) / d(u, v)`` is recorded at every iteration where the
    two iterates are still resolvable, i.e. ``d(u, v)`` exceeds ``ratio_floor``
    times their magnitude. Closer than that, rounding in ``T`` dominates the ratio.
    ``policy`` may be a PolicyMatrix (then ``mdp`` may be None) or a policy table.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not 0.0 <= lam < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    pm = policy if isinstance(policy, PolicyMatrix) else PolicyMatrix.from_policy(mdp, policy)
    rng = np.random.default_rng(0) if rng is None else rng
    scale = 1.0 + np.max(np.abs(pm.R_pi), initial=0.0) / max(1.0 - lam, 1e-12)
    u = rng.uniform(-scale, scale, pm.n) if v0 is None else np.array(v0, dtype=float)
    w = rng.uniform(-scale, scale, pm.n)
    if max_iter is None:
        gap = max(sup_dist(u, bellman_apply(pm, u, lam)), tol)
        max_iter = 10 + (int(math.ceil(math.log(tol / gap) / math.log(lam))) if 0 < lam and gap > tol else 1)
    exact = solve_linear(pm, lam) if track_error else None
    ratios, steps, errs = [], [], []
    if track_error:
        errs.append(sup_dist(u, exact))
    it = 0
    while it < max_iter:
        Tu, Tw = bellman_apply(pm, u, lam), bellman_apply(pm, w, lam)
        d = sup_dist(u, w)
        if d > ratio_floor * (1.0 + max(np.max(np.abs(u)), np.max(np.abs(w)))):
            ratios.append(sup_dist(Tu, Tw) / d)
        step = sup_dist(Tu, u)
        steps.append(step)
        u, w = Tu, Tw
        it += 1
        if track_error:
            errs.append(sup_dist(u, exact))
        if step < tol:
            break
    return ValueIterationResult(u, it, np.array(ratios), np.array(steps),
                                np.array(errs) if track_error else None)


def q_from_v(mdp: FiniteMdp, V, gamma: float | None = None) -> np.ndarray:
    """``Q(s, a) = R(s, a) + gamma * sum_s' P(s'|s, a) V(s')``."""
    V = np.asarray(V, dtype=float)
    if V.shape != (mdp.n_states,):
        raise ValueError(f"V must have length {mdp.n_states}")
    g = mdp.gamma if gamma is None else gamma
    return mdp.R + g * (mdp.P @ V)


def v_from_q(Q, pi) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) Q(s, a)``; ``pi`` may be action indices."""
    Q = np.asarray(Q, dtype=float)
    pi = np.asarray(pi)
    if pi.ndim == 1:
        if pi.shape[0] != Q.shape[0]:
            raise ValueError("policy length must match Q rows")
        return Q[np.arange(Q.shape[0]), pi.astype(int)]
    if pi.shape != Q.shape:
        raise ValueError(f"policy shape {pi.shape} does not match Q shape {Q.shape}")
    return np.einsum("sa,sa->s", pi, Q)


def greedy(Q) -> tuple[np.ndarray, np.ndarray]:
    """Greedy actions and ``V(s) = max_a Q(s, a)``."""
    Q = np.asarray(Q)
    return np.argmax(Q, axis=1), np.max(Q, axis=1)


def optimal_q(mdp: FiniteMdp, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Q* by value iteration on the optimality operator."""
    Q = np.zeros_like(mdp.R)
    for _ in range(max_iter):
        Qn = q_from_v(mdp, Q.max(1))
        if np.max(np.abs(Qn - Q)) < tol:
            return Qn
        Q = Qn
    return Q


def policy_iteration(mdp: FiniteMdp, max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Howard policy iteration; returns (actions, V)."""
    actions = np.zeros(mdp.n_states, dtype=int)
    for _ in range(max_iter):
        V = solve_linear(PolicyMatrix.from_policy(mdp, actions), mdp.gamma)
        Q = q_from_v(mdp, V)
        best = np.argmax(Q, axis=1)
        # keep the incumbent on ties so the loop terminates
        keep = Q[np.arange(mdp.n_states), actions] >= Q[np.arange(mdp.n_states), best] - 1e-12
        new = np.where(keep, actions, best)
        if np.array_equal(new, actions):
            return actions, V
        actions = new
    return actions, V


# -- spectra -------------------------------------------------------------------

@dataclass
class GershgorinDiscs:
    centers: np.ndarray
    radii: np.ndarray
    bound: float


def gershgorin_bound(A) -> GershgorinDiscs:
    """Row discs of ``A`` and the spectral-radius bound ``max_i |a_ii| + R_i``."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    centers = np.diag(A).copy()
    radii = np.abs(A).sum(1) - np.abs(centers)
    bound = float(np.max(np.abs(centers) + radii)) if len(centers) else 0.0
    return GershgorinDiscs(centers, radii, bound)


@njit
def _hessenberg(H):
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k].copy()
        alpha = np.sqrt(np.sum(np.abs(x) ** 2))
        if alpha == 0.0:
            continue
        phase = x[0] / abs(x[0]) if x[0] != 0 else 1.0 + 0j
        x[0] += phase * alpha
        nv = np.sqrt(np.sum(np.abs(x) ** 2))
        v = x / nv
        # H <- (I - 2vv^H) H (I - 2vv^H)
        blk = H[k + 1:, :].copy()
        blk -= 2.0 * np.outer(v, np.conj(v) @ blk)
        H[k + 1:, :] = blk
        blk = H[:, k + 1:].copy()
        blk -= 2.0 * np.outer(blk @ v, np.conj(v))
        H[:, k + 1:] = blk
        H[k + 2:, k] = 0.0
    return H


@njit
def _wilkinson(a, b, c, d):
    # eigenvalue of [[a, b], [c, d]] closest to d
    tr = 0.5 * (a + d)
    det = a * d - b * c
    disc = np.sqrt(tr * tr - det + 0j)
    l1, l2 = tr + disc, tr - disc
    return l1 if abs(l1 - d) < abs(l2 - d) else l2


@njit
def _qr_eigvals(A, max_sweeps):
    H = _hessenberg(A.astype(np.complex128).copy())
    n = H.shape[0]
    out = np.zeros(n, dtype=np.complex128)
    eps = 2.220446049250313e-16
    hi = n - 1
    stall = 0
    sweeps = 0
    cs = np.zeros(n, dtype=np.complex128)
    ss = np.zeros(n, dtype=np.complex128)
    while hi >= 0:
        if hi == 0:
            out[0] = H[0, 0]
            break
        lo = hi
        while lo > 0:
            scale = abs(H[lo, lo]) + abs(H[lo - 1, lo - 1])
            if scale == 0.0:
                scale = 1.0
            if abs(H[lo, lo - 1]) <= eps * scale:
                H[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            out[hi] = H[hi, hi]
            hi -= 1
            stall = 0
            continue
        sweeps += 1
        if sweeps > max_sweeps:
            return out, False
        stall += 1
        if stall % 11 == 10:
            mu = H[hi, hi] + abs(H[hi, hi - 1]) * (0.75 + 0.5j)  # exceptional shift
        else:
            mu = _wilkinson(H[hi - 1, hi - 1], H[hi - 1, hi], H[hi, hi - 1], H[hi, hi])
        for k in range(lo, hi + 1):
            H[k, k] -= mu
        # QR by Givens on the active window, then RQ
        for k in range(lo, hi):
            a = H[k, k]
            b = H[k + 1, k]
            r = np.sqrt(abs(a) ** 2 + abs(b) ** 2)
            if r == 0.0:
                c, s = 1.0 + 0j, 0.0 + 0j
            else:
                c, s = a / r, b / r
            cs[k], ss[k] = c, s
            for j in range(k, hi + 1):
                x, y = H[k, j], H[k + 1, j]
                H[k, j] = np.conj(c) * x + np.conj(s) * y
                H[k + 1, j] = -s * x + c * y
        for k in range(lo, hi):
            c, s = cs[k], ss[k]
            for i in range(lo, min(k + 2, hi) + 1):
                x, y = H[i, k], H[i, k + 1]
                H[i, k] = x * c + y * s
                H[i, k + 1] = -x * np.conj(s) + y * np.conj(c)
        for k in range(lo, hi + 1):
            H[k, k] += mu
    return out, True


def eigvals_qr(A, max_sweeps: int = 10_000) -> np.ndarray:
    """Eigenvalues by Hessenberg reduction and shifted QR with deflation.

    Independent of LAPACK, used to cross-check spectral bounds.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    if A.shape[0] == 0:
        return np.zeros(0, dtype=complex)
    vals, ok = _qr_eigvals(A, max_sweeps)
    if not ok:
        raise RuntimeError("shifted QR did not converge")
    return vals


# -- certificates --------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: measured {self.measured:.6g} (limit {self.limit:.6g}) {self.detail}".rstrip()


@dataclass
class CertificateReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, *a, **kw):
        self.checks.append(Check(*a, **kw))

    def to_text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def two_state_chain() -> tuple[FiniteMdp, np.ndarray]:
    """Deterministic swap chain with unit reward; its value is ``1 / (1 - lam)``."""
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    R = np.ones((2, 1))
    return FiniteMdp(P, R, 0.9), np.ones((2, 1))


def certify_contraction(n_mdps: int = 100, lambdas=(0.5, 0.9, 0.99), max_states: int = 20,
                        n_starts: int = 10, tol: float = 1e-10, seed: int = 0,
                        report: CertificateReport | None = None) -> CertificateReport:
    """Measure contraction ratios, fixed-point uniqueness and linear-solve agreement."""
    report = CertificateReport() if report is None else report
    rng = np.random.default_rng(seed)
    worst_excess = -np.inf
    worst_spread = 0.0
    worst_linear = 0.0
    worst_rate = 0.0
    for i in range(n_mdps):
        lam = float(lambdas[i % len(lambdas)])
        n = int(rng.integers(1, max_states + 1))
        mdp = random_mdp(n, int(rng.integers(1, 4)), lam, rng)
        pm = PolicyMatrix.from_policy(mdp, random_policy(mdp, rng))
        exact = solve_linear(pm, lam)
        finals = []
        for _ in range(n_starts):
            r = value_iteration(None, pm, lam, tol, rng=rng, track_error=True)
            if len(r.ratios):
                worst_excess = max(worst_excess, float(np.max(r.ratios)) - lam)
            finals.append(r.V)
            e0 = r.errors[0]
            if e0 > 0:
                k = np.arange(len(r.errors))
                worst_rate = max(worst_rate, float(np.max(r.errors / (lam ** k * e0 * (1 + 1e-9) + 1e-12))))
        finals = np.array(finals)
        worst_spread = max(worst_spread, float(np.max(finals.max(0) - finals.min(0))))
        worst_linear = max(worst_linear, float(np.max(np.abs(finals - exact))))
    report.add("contraction ratio - lambda", worst_excess <= 1e-12, worst_excess, 1e-12,
               f"over {n_mdps} MDPs x {n_starts} starts")
    report.add("fixed point spread across starts", worst_spread <= 1e-6, worst_spread, 1e-6)
    report.add("max |V_iter - V_linear|", worst_linear <= 1e-6, worst_linear, 1e-6)
    report.add("error / (lambda^k e0)", worst_rate <= 1.0, worst_rate, 1.0, "geometric rate")

    mdp, pi = two_state_chain()
    V = value_iteration(mdp, pi, 0.9, 1e-12, v0=np.zeros(2)).V
    err = float(np.max(np.abs(V - 10.0)))
    report.add("two-state chain V = [10, 10]", err <= 1e-9, err, 1e-9)
    return report


def certify_gershgorin(n_matrices: int = 50, max_n: int = 50, seed: int = 0,
                       report: CertificateReport | None = None) -> CertificateReport:
    """Every oracle eigenvalue of random row-stochastic matrices sits inside the disc bound."""
    report = CertificateReport() if report is None else report
    rng = np.random.default_rng(seed)
    worst_excess = -np.inf
    worst_bound = 0.0
    worst_oracle = 0.0
    for _ in range(n_matrices):
        n = int(rng.integers(1, max_n + 1))
        P = random_stochastic(n, rng, sparsity=float(rng.uniform(0, 0.8)))
        disc = gershgorin_bound(P)
        ev = eigvals_qr(P)
        worst_excess = max(worst_excess, float(np.max(np.abs(ev))) - disc.bound)
        worst_bound = max(worst_bound, disc.bound)
        ref = np.sort_complex(np.linalg.eigvals(P))
        worst_oracle = max(worst_oracle, _match_distance(ev, ref))
    report.add("max |eig| - gershgorin bound", worst_excess <= 1e-9, worst_excess, 1e-9,
               f"over {n_matrices} matrices")
    report.add("gershgorin bound", worst_bound <= 1.0 + 1e-12, worst_bound, 1.0)
    report.add("QR oracle vs LAPACK eigenvalues", worst_oracle <= 1e-6, worst_oracle, 1e-6)
    return report


def _match_distance(a, b) -> float:
    """Largest distance in a greedy one-to-one matching of two eigenvalue sets."""
    b = list(b)
    worst = 0.0
    for x in a:
        j = int(np.argmin([abs(x - y) for y in b]))
        worst = max(worst, abs(x - b.pop(j)))
    return worst


def certify_all(seed: int = 0) -> CertificateReport:
    report = certify_contraction(seed=seed)
    return certify_gershgorin(seed=seed, report=report)
