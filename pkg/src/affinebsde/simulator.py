"""Monte Carlo engines for the forward processes and martingale checks.

Engines
-------
* Euler-Maruyama for the matrix square-root diffusion
  dR = (b + B(R)) dt + sqrt(R) dW S + S^T dW^T sqrt(R), with eigenvalue
  clamping onto the PSD cone after every step (full truncation); the price
  log-dynamics dN = R eta dt + sqrt(R) dQ with dQ = dW rho + sqrt(1-rho'rho) dD,
  and the auxiliary process dO = s sqrt(R) dQhat + (o1 + o2 R) dt.
* Exact affine flow for the jump-OU process dR = (lam + Lambda(R)) dt + dJ:
  between grid points R is propagated by the exact semigroup (H-form Lambda),
  jump marks drawn from exponential clocks are conjugated by the flow over the
  remaining sub-interval; plain Euler handles general Lambda.
* Stochastic-exponential audit: simulate log E(P) for
  P = int s_q' sqrt(R) dQ + int Tr(s_w sqrt(R) dW) + int Tr(s_qh sqrt(R) dQhat)
      + int (e^{Tr(s_mu xi)} - 1) d(jump martingale)
  and report the sample mean/stderr of E(P)_T, whose distance from 1 is the
  martingale defect.

Randomness: Philox4x64-10 counter-based bit generator, one stream per fixed
block of ``STREAM_BLOCK`` path indices with key (seed, block start).  Partial
final blocks simulate the whole block and truncate, so increasing the path
count never changes earlier paths.  Path generation parallelizes over blocks
(``threads``); per-block results are reduced in block order, which keeps every
output bit-identical regardless of the thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .affine_model import AffineParams, ConstantJumps, HFormDrift, LinearDrift
from .riccati import TimeFn
from .symcone import (
    as_sym,
    frobenius,
    mat_exp,
    project_and_sqrt_psd_batch,
    symmetrize,
)

STREAM_BLOCK = 16384
PROJECTION_WARN_FRACTION = 1e-3


def _block_rng(seed: int, block_start: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(block_start)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _blocks(n_paths: int) -> list[tuple[int, int]]:
    out = []
    start = 0
    while start < n_paths:
        out.append((start, min(STREAM_BLOCK, n_paths - start)))
        start += STREAM_BLOCK
    return out


def _run_blocks(worker: Callable[[int, int], object], n_paths: int, threads: int) -> list:
    blocks = _blocks(n_paths)
    if threads <= 1 or len(blocks) == 1:
        return [worker(s, n) for s, n in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(worker, s, n) for s, n in blocks]
        return [f.result() for f in futures]


def mean_stderr(x: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[axis]
    m = np.mean(x, axis=axis)
    se = np.std(x, axis=axis, ddof=1) / np.sqrt(n)
    return m, se


def _drift_apply_batch(drift: LinearDrift, r: np.ndarray) -> np.ndarray:
    if isinstance(drift, HFormDrift):
        return np.matmul(drift.h, r) + np.matmul(r, drift.h.T)
    return np.einsum("ijkl,bij->bkl", drift.betas, r)


@dataclass(frozen=True, eq=False)
class CorrelationSpec:
    """Correlation rho between the price and covariance noises; rho'rho <= 1."""

    rho: np.ndarray

    def __post_init__(self):
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if rho.ndim != 1:
            raise ValueError("rho must be a vector")
        if np.any(np.abs(rho) > 1.0 + 1e-12):
            raise ValueError("components of rho must lie in [-1, 1]")
        if float(rho @ rho) > 1.0 + 1e-12:
            raise ValueError("rho'rho must be <= 1")
        object.__setattr__(self, "rho", rho)

    @property
    def d(self) -> int:
        return self.rho.shape[0]

    @property
    def orth(self) -> float:
        """sqrt(1 - rho'rho), clamped at 0 (rho'rho = 1 is allowed)."""
        return float(np.sqrt(max(1.0 - float(self.rho @ self.rho), 0.0)))


# -- full-storage bundles -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathBundle:
    """One batch of simulated paths with driving increments retained.

    Arrays carry a leading batch axis; ``path_offset`` is the absolute index
    of the first path.  N and O are reconstructible from the stored increments
    and R (replay identity, exercised by the test suite).  ``projection_shift``
    logs the Frobenius magnitude of each PSD clamp; ``step_warning`` flags any
    clamp exceeding PROJECTION_WARN_FRACTION of the state norm.
    """

    times: np.ndarray
    r: np.ndarray  # (B, n+1, d, d)
    n_log: np.ndarray  # (B, n+1, d)
    o: np.ndarray  # (B, n+1, d, d)
    dw: Optional[np.ndarray]  # (B, n, d, d)
    dd: np.ndarray  # (B, n, d)
    dqhat: Optional[np.ndarray]  # (B, n, d, d)
    jump_times: list  # per path: array of event times
    jump_marks: list  # per path: array of atom indices
    projection_shift: np.ndarray  # (B, n)
    seed: int
    path_offset: int
    step_warning: bool


def simulate_wishart(
    params: AffineParams,
    r0,
    corr: CorrelationSpec,
    eta,
    T: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    o_sigma=None,
    o1=None,
    o2=None,
) -> Iterator[PathBundle]:
    """Stream PathBundles of the continuous matrix diffusion (Euler + clamp).

    Deterministic given ``seed``; one bundle per RNG block.
    """
    if not params.continuous:
        raise ValueError("simulate_wishart expects a continuous parameter set")
    d = params.d
    r0 = as_sym(r0)
    eta = np.asarray(eta, dtype=float)
    sig_o = np.zeros((d, d)) if o_sigma is None else np.asarray(o_sigma, dtype=float)
    o1 = np.zeros((d, d)) if o1 is None else np.asarray(o1, dtype=float)
    o2 = np.zeros((d, d)) if o2 is None else np.asarray(o2, dtype=float)
    dt = T / n_steps
    sdt = np.sqrt(dt)
    times = np.linspace(0.0, T, n_steps + 1)
    sg = params.sigma

    for start, count in _blocks(n_paths):
        g = _block_rng(seed, start)
        b = STREAM_BLOCK  # draws always consume full blocks; states/storage use count
        r = np.broadcast_to(r0, (count, d, d)).copy()
        r, sr, _ = project_and_sqrt_psd_batch(r)
        n_log = np.zeros((count, d))
        o = np.zeros((count, d, d))
        rs = np.empty((count, n_steps + 1, d, d))
        ns = np.empty((count, n_steps + 1, d))
        os_ = np.empty((count, n_steps + 1, d, d))
        dws = np.empty((count, n_steps, d, d))
        dds = np.empty((count, n_steps, d))
        dqs = np.empty((count, n_steps, d, d))
        shifts = np.empty((count, n_steps))
        rs[:, 0], ns[:, 0], os_[:, 0] = r, n_log, o
        for k in range(n_steps):
            dw = (g.standard_normal((b, d, d)) * sdt)[:count]
            dd = (g.standard_normal((b, d)) * sdt)[:count]
            dqh = (g.standard_normal((b, d, d)) * sdt)[:count]
            dq = dw @ corr.rho + corr.orth * dd
            n_log = n_log + (r @ eta) * dt + np.einsum("bij,bj->bi", sr, dq)
            o = o + np.matmul(sig_o, np.matmul(sr, dqh)) + (o1 + np.matmul(o2, r)) * dt
            m = np.matmul(np.matmul(sr, dw), sg)
            r = r + (params.b + _drift_apply_batch(params.drift, r)) * dt + m + m.transpose(0, 2, 1)
            r, sr, shift = project_and_sqrt_psd_batch(r)
            dws[:, k], dds[:, k], dqs[:, k] = dw, dd, dqh
            shifts[:, k] = shift
            rs[:, k + 1], ns[:, k + 1], os_[:, k + 1] = r, n_log, o
        warn = bool(np.any(shifts > PROJECTION_WARN_FRACTION * (1.0 + np.linalg.norm(rs[:, :-1], axis=(2, 3)))))
        yield PathBundle(
            times=times, r=rs, n_log=ns, o=os_,
            dw=dws, dd=dds, dqhat=dqs,
            jump_times=[np.zeros(0)] * count, jump_marks=[np.zeros(0, dtype=int)] * count,
            projection_shift=shifts, seed=seed, path_offset=start, step_warning=warn,
        )


# -- jump-OU (BNS-type) engine --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BnsJumpSpec:
    """Jump-OU covariance dynamics dR = (lam + Lambda(R)) dt + dJ.

    ``lam`` is the constant PSD drift, ``lam_op`` the inward-pointing linear
    map, and J an independent finite-activity subordinator with constant drift
    ``b_j`` and compound-Poisson part ``m_j`` (total intensity = sum of atom
    weights, mark law proportional to the weights).
    """

    lam: np.ndarray
    lam_op: LinearDrift
    b_j: np.ndarray
    m_j: ConstantJumps

    def __post_init__(self):
        object.__setattr__(self, "lam", symmetrize(as_sym(self.lam)))
        object.__setattr__(self, "b_j", symmetrize(as_sym(self.b_j)))

    @property
    def d(self) -> int:
        return self.lam.shape[0]

    @property
    def total_intensity(self) -> float:
        return self.m_j.total_weight if self.m_j.n else 0.0

    def affine_params(self) -> AffineParams:
        """Equivalent affine parameter set (0, lam + b_j, Lambda, m_j, 0)."""
        d = self.d
        return AffineParams(
            alpha=np.zeros((d, d)), b=self.lam + self.b_j, drift=self.lam_op, m=self.m_j,
        )


class _AffineFlow:
    """Exact flow of dR/dt = lam_tot + H R + R H^T over sub-intervals."""

    def __init__(self, h_mat: np.ndarray, const: np.ndarray, dt: float):
        self.h = h_mat
        self.const = const
        self.dt = dt
        self.e_dt = mat_exp(h_mat * dt)
        self.d_dt = self._drift_integral(dt)
        try:
            evals, evecs = np.linalg.eig(h_mat)
            cond = np.linalg.cond(evecs)
            self._eig = (evals, evecs, np.linalg.inv(evecs)) if cond < 1e8 else None
        except np.linalg.LinAlgError:
            self._eig = None

    def _drift_integral(self, delta: float, nodes: int = 20) -> np.ndarray:
        # Simpson quadrature of int_0^delta e^{Hs} C e^{H^T s} ds
        if delta == 0.0:
            return np.zeros_like(self.const)
        ss = np.linspace(0.0, delta, nodes + 1)
        vals = np.array([mat_exp(self.h * s) @ self.const @ mat_exp(self.h * s).T for s in ss])
        w = np.ones(nodes + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return np.einsum("n,nij->ij", w, vals) * (delta / nodes) / 3.0

    def propagators(self, deltas: np.ndarray) -> np.ndarray:
        """exp(H delta_k) for a batch of sub-interval lengths."""
        if self._eig is not None:
            evals, evecs, vinv = self._eig
            expd = np.exp(np.multiply.outer(deltas, evals))
            out = np.einsum("ik,nk,kj->nij", evecs, expd, vinv)
            return np.ascontiguousarray(out.real)
        return np.array([mat_exp(self.h * dl) for dl in deltas])


def _bns_block_core(
    spec: BnsJumpSpec,
    r0: np.ndarray,
    dt: float,
    n_steps: int,
    g: np.random.Generator,
    n_use: int,
    on_step: Callable,
    record_jumps: bool = False,
):
    """Common stepping loop for one RNG block.

    Draws always consume full STREAM_BLOCK-sized arrays (path-count
    invariance); only the first ``n_use`` paths are evolved.
    ``on_step(k, r, sr, g)`` consumes the pre-step state.
    """
    d = spec.d
    b = STREAM_BLOCK
    exact = isinstance(spec.lam_op, HFormDrift)
    const = spec.lam + spec.b_j
    flow = _AffineFlow(spec.lam_op.h, const, dt) if exact else None
    lam_tot = spec.total_intensity
    cdf = np.cumsum(spec.m_j.weights) / lam_tot if lam_tot > 0 else None
    r = np.broadcast_to(r0, (n_use, d, d)).copy()
    jt = [[] for _ in range(n_use)] if record_jumps else None
    jm = [[] for _ in range(n_use)] if record_jumps else None

    for k in range(n_steps):
        _, sr, _ = project_and_sqrt_psd_batch(r)
        on_step(k, r, sr, g)
        if exact:
            r = np.matmul(np.matmul(flow.e_dt, r), flow.e_dt.T) + flow.d_dt
        else:
            r = r + (const + _drift_apply_batch(spec.lam_op, r)) * dt
        if lam_tot > 0:
            counts = g.poisson(lam_tot * dt, size=b)
            total = int(counts.sum())
            if total:
                ids = np.repeat(np.arange(b), counts)
                taus = g.uniform(0.0, dt, size=total)
                marks = np.searchsorted(cdf, g.uniform(size=total), side="left")
                keep = ids < n_use
                ids, taus, marks = ids[keep], taus[keep], marks[keep]
                if ids.size:
                    xis = spec.m_j.xis[marks]
                    if exact:
                        props = flow.propagators(dt - taus)
                        xis = np.matmul(np.matmul(props, xis), props.transpose(0, 2, 1))
                    np.add.at(r, ids, xis)
                    if record_jumps:
                        for pid, tau, mk in zip(ids, taus, marks):
                            jt[pid].append(k * dt + tau)
                            jm[pid].append(int(mk))
    return r, jt, jm


def simulate_bns(
    spec: BnsJumpSpec,
    r0,
    eta,
    T: float,
    n_steps: int,
    n_paths: int,
    seed: int,
) -> Iterator[PathBundle]:
    """Stream PathBundles of the jump-OU model; O accumulates realized covariance."""
    d = spec.d
    r0 = as_sym(r0)
    eta = np.asarray(eta, dtype=float)
    dt = T / n_steps
    sdt = np.sqrt(dt)
    times = np.linspace(0.0, T, n_steps + 1)

    for start, count in _blocks(n_paths):
        g = _block_rng(seed, start)
        rs = np.empty((count, n_steps + 1, d, d))
        ns = np.zeros((count, n_steps + 1, d))
        os_ = np.zeros((count, n_steps + 1, d, d))
        dds = np.empty((count, n_steps, d))

        def on_step(k, r, sr, gg):
            rs[:, k] = r
            dd = (gg.standard_normal((STREAM_BLOCK, d)) * sdt)[:count]
            dds[:, k] = dd
            ns[:, k + 1] = ns[:, k] + (r @ eta) * dt + np.einsum("bij,bj->bi", sr, dd)
            os_[:, k + 1] = os_[:, k] + r * dt

        r_final, jt, jm = _bns_block_core(spec, r0, dt, n_steps, g, count, on_step, record_jumps=True)
        rs[:, n_steps] = r_final
        yield PathBundle(
            times=times, r=rs, n_log=ns, o=os_,
            dw=None, dd=dds, dqhat=None,
            jump_times=[np.asarray(jt[i]) for i in range(count)],
            jump_marks=[np.asarray(jm[i], dtype=int) for i in range(count)],
            projection_shift=np.zeros((count, n_steps)), seed=seed, path_offset=start,
            step_warning=False,
        )


# -- terminal functionals for audits ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathFunctionals:
    """Per-path functionals consumed by the martingale/optimality audits.

    ``int_pi_dn[p, k]`` is the accumulated strategy-k integral of dN,
    ``int_pi_r_pi[p, k]`` the accumulated quadratic variation pi' R pi dt,
    ``o_terminal`` the auxiliary state at T, ``r_terminal`` the covariance
    state at T; all evaluated on the simulation grid with left endpoints.
    """

    int_pi_dn: np.ndarray
    int_pi_r_pi: np.ndarray
    o_terminal: np.ndarray
    r_terminal: np.ndarray
    projection_fraction: float


def _strategies_on_grid(strategies, n_steps: int, d: int) -> np.ndarray:
    arr = np.asarray(strategies, dtype=float)
    if arr.ndim == 2:  # (K, d) constants
        arr = np.repeat(arr[:, None, :], n_steps, axis=1)
    if arr.ndim != 3 or arr.shape[1] != n_steps or arr.shape[2] != d:
        raise ValueError("strategies must have shape (K, d) or (K, n_steps, d)")
    return arr


def heston_functionals(
    params: AffineParams,
    r0,
    corr: CorrelationSpec,
    eta,
    T: float,
    n_steps: int,
    strategies,
    n_paths: int,
    seed: int,
    o_sigma=None,
    o1=None,
    o2=None,
    antithetic: bool = False,
    threads: int = 1,
) -> PathFunctionals:
    """Vectorized terminal functionals of the continuous model (no trajectory storage)."""
    if not params.continuous:
        raise ValueError("heston_functionals expects a continuous parameter set")
    d = params.d
    r0 = as_sym(r0)
    eta = np.asarray(eta, dtype=float)
    pis = _strategies_on_grid(strategies, n_steps, d)
    n_strat = pis.shape[0]
    need_o = any(x is not None for x in (o_sigma, o1, o2))
    sig_o = np.zeros((d, d)) if o_sigma is None else np.asarray(o_sigma, dtype=float)
    o1m = np.zeros((d, d)) if o1 is None else np.asarray(o1, dtype=float)
    o2m = np.zeros((d, d)) if o2 is None else np.asarray(o2, dtype=float)
    need_qhat = bool(np.any(sig_o))
    dt = T / n_steps
    sdt = np.sqrt(dt)
    sg = params.sigma

    def worker(start, count):
        g = _block_rng(seed, start)
        b = STREAM_BLOCK
        half = b // 2
        r = np.broadcast_to(r0, (b, d, d)).copy()
        r, sr, _ = project_and_sqrt_psd_batch(r)
        i_dn = np.zeros((b, n_strat))
        i_quad = np.zeros((b, n_strat))
        o = np.zeros((b, d, d))
        n_proj = 0
        for k in range(n_steps):
            if antithetic:
                zw = g.standard_normal((half, d, d))
                zd = g.standard_normal((half, d))
                dw = np.concatenate([zw, -zw]) * sdt
                dd = np.concatenate([zd, -zd]) * sdt
                if need_qhat:
                    zq = g.standard_normal((half, d, d))
                    dqh = np.concatenate([zq, -zq]) * sdt
            else:
                dw = g.standard_normal((b, d, d)) * sdt
                dd = g.standard_normal((b, d)) * sdt
                if need_qhat:
                    dqh = g.standard_normal((b, d, d)) * sdt
            dq = dw @ corr.rho + corr.orth * dd
            dn = (r @ eta) * dt + np.einsum("bij,bj->bi", sr, dq)
            pk = pis[:, k, :]
            i_dn += dn @ pk.T
            i_quad += np.einsum("bij,ki,kj->bk", r, pk, pk) * dt
            if need_o:
                o += (o1m + np.matmul(o2m, r)) * dt
                if need_qhat:
                    o += np.matmul(sig_o, np.matmul(sr, dqh))
            m = np.matmul(np.matmul(sr, dw), sg)
            r = r + (params.b + _drift_apply_batch(params.drift, r)) * dt + m + m.transpose(0, 2, 1)
            r, sr, shift = project_and_sqrt_psd_batch(r)
            n_proj += int(np.count_nonzero(shift > 1e-13))
        return (i_dn[:count], i_quad[:count], o[:count], r[:count], n_proj, b * n_steps)

    results = _run_blocks(worker, n_paths, threads)
    i_dn = np.concatenate([r[0] for r in results])[:n_paths]
    i_quad = np.concatenate([r[1] for r in results])[:n_paths]
    o_t = np.concatenate([r[2] for r in results])[:n_paths]
    r_t = np.concatenate([r[3] for r in results])[:n_paths]
    n_proj = sum(r[4] for r in results)
    n_tot = sum(r[5] for r in results)
    return PathFunctionals(i_dn, i_quad, o_t, r_t, projection_fraction=n_proj / n_tot)


def bns_functionals(
    spec: BnsJumpSpec,
    r0,
    eta,
    T: float,
    n_steps: int,
    strategies,
    n_paths: int,
    seed: int,
    threads: int = 1,
) -> PathFunctionals:
    """Terminal functionals of the jump-OU model; O is realized covariance int R dt."""
    d = spec.d
    r0 = as_sym(r0)
    eta = np.asarray(eta, dtype=float)
    pis = _strategies_on_grid(strategies, n_steps, d)
    n_strat = pis.shape[0]
    dt = T / n_steps
    sdt = np.sqrt(dt)

    def worker(start, count):
        g = _block_rng(seed, start)
        i_dn = np.zeros((count, n_strat))
        i_quad = np.zeros((count, n_strat))
        o = np.zeros((count, d, d))

        def on_step(k, r, sr, gg):
            dd = (gg.standard_normal((STREAM_BLOCK, d)) * sdt)[:count]
            dn = (r @ eta) * dt + np.einsum("bij,bj->bi", sr, dd)
            pk = pis[:, k, :]
            i_dn[:, :] += dn @ pk.T
            i_quad[:, :] += np.einsum("bij,ki,kj->bk", r, pk, pk) * dt
            o[:, :] += r * dt

        r_final, _, _ = _bns_block_core(spec, r0, dt, n_steps, g, count, on_step)
        return (i_dn, i_quad, o, r_final)

    results = _run_blocks(worker, n_paths, threads)
    return PathFunctionals(
        int_pi_dn=np.concatenate([r[0] for r in results])[:n_paths],
        int_pi_r_pi=np.concatenate([r[1] for r in results])[:n_paths],
        o_terminal=np.concatenate([r[2] for r in results])[:n_paths],
        r_terminal=np.concatenate([r[3] for r in results])[:n_paths],
        projection_fraction=0.0,
    )


# -- stochastic exponential audit -------------------------------------------------------


@dataclass(frozen=True)
class StochExpResult:
    mean: float
    stderr: float
    exp_jump_mass: float  # sum over atoms of w e^{Tr(s_mu xi)} over the unit-crossing set

    @property
    def defect(self) -> float:
        return abs(self.mean - 1.0)


def stochastic_exponential_check(
    params: AffineParams,
    r0,
    corr: CorrelationSpec,
    sigma_q,
    sigma_w,
    sigma_qhat,
    sigma_mu,
    T: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    threads: int = 1,
) -> StochExpResult:
    """Sample mean and stderr of the stochastic exponential at T.

    The sigma arguments are TimeFns (or constants): sigma_q is d-vector valued,
    the others d x d.  The state follows the square-root diffusion of
    ``params`` plus its constant-intensity jump atoms.  The integrability mass
    sum_{|Tr(s_mu xi)| > 1} w e^{Tr(s_mu xi)} (finite by construction for atom
    lists) is evaluated at t = 0 and reported.
    """
    if params.mu.n:
        raise ValueError("linear jump atoms are not supported in the exponential audit")
    d = params.d
    r0 = as_sym(r0)
    s_q = TimeFn.coerce(sigma_q)
    s_w = TimeFn.coerce(sigma_w)
    s_qh = TimeFn.coerce(sigma_qhat)
    s_mu = TimeFn.coerce(sigma_mu)
    dt = T / n_steps
    sdt = np.sqrt(dt)
    sg = params.sigma
    lam_tot = params.m.total_weight if params.m.n else 0.0
    cdf = np.cumsum(params.m.weights) / lam_tot if lam_tot > 0 else None

    mass = 0.0
    if params.m.n:
        sm0 = np.asarray(s_mu(0.0))
        tr = np.einsum("ij,nij->n", sm0, params.m.xis)
        mass = float(np.dot(params.m.weights, np.where(np.abs(tr) > 1.0, np.exp(tr), 0.0)))

    def worker(start, count):
        g = _block_rng(seed, start)
        b = STREAM_BLOCK
        r = np.broadcast_to(r0, (b, d, d)).copy()
        r, sr, _ = project_and_sqrt_psd_batch(r)
        logp = np.zeros(b)
        for k in range(n_steps):
            t = k * dt
            sq = np.atleast_1d(np.asarray(s_q(t), dtype=float))
            sw = np.asarray(s_w(t), dtype=float)
            sqh = np.asarray(s_qh(t), dtype=float)
            smu = np.asarray(s_mu(t), dtype=float)
            dw = g.standard_normal((b, d, d)) * sdt
            dd = g.standard_normal((b, d)) * sdt
            dq = dw @ corr.rho + corr.orth * dd
            logp += np.einsum("i,bij,bj->b", sq, sr, dq)
            if np.any(sw):
                logp += np.einsum("ij,bjk,bki->b", sw, sr, dw)
            if np.any(sqh):
                dqh = g.standard_normal((b, d, d)) * sdt
                logp += np.einsum("ij,bjk,bki->b", sqh, sr, dqh)
            xi_mat = (
                2.0 * np.outer(sq, corr.rho) @ sw + sw.T @ sw + sqh.T @ sqh + np.outer(sq, sq)
            )
            logp -= 0.5 * np.einsum("bij,ji->b", r, xi_mat) * dt
            if lam_tot > 0:
                tr = np.einsum("ij,nij->n", smu, params.m.xis)
                logp += float(np.dot(params.m.weights, 1.0 - np.exp(tr))) * dt
            m = np.matmul(np.matmul(sr, dw), sg)
            r = r + (params.b + _drift_apply_batch(params.drift, r)) * dt + m + m.transpose(0, 2, 1)
            if lam_tot > 0:
                counts = g.poisson(lam_tot * dt, size=b)
                total = int(counts.sum())
                if total:
                    ids = np.repeat(np.arange(b), counts)
                    marks = np.searchsorted(cdf, g.uniform(size=total), side="left")
                    np.add.at(r, ids, params.m.xis[marks])
                    np.add.at(logp, ids, np.einsum("ij,nij->n", smu, params.m.xis[marks]))
            r, sr, _ = project_and_sqrt_psd_batch(r)
        return np.exp(logp[:count])

    vals = np.concatenate(_run_blocks(worker, n_paths, threads))[:n_paths]
    m, se = mean_stderr(vals)
    return StochExpResult(mean=float(m), stderr=float(se), exp_jump_mass=mass)


# -- weak-error study with common random numbers ----------------------------------------


def _proj_sqrt_components_2x2(a, bb, c):
    """PSD clamp + sqrt of symmetric 2x2 matrices given as component arrays."""
    mean = 0.5 * (a + c)
    disc = np.sqrt(0.25 * (a - c) ** 2 + bb * bb)
    l1 = mean + disc
    l2 = mean - disc
    l1c = np.maximum(l1, 0.0)
    l2c = np.maximum(l2, 0.0)
    s1 = np.sqrt(l1c)
    s2 = np.sqrt(l2c)
    scale = np.abs(a) + np.abs(c) + np.abs(bb)
    degen = disc <= 1e-14 * (1.0 + scale)
    inv = 1.0 / np.where(degen, 1.0, 2.0 * disc)
    # proj = [l1c (R - l2 I) + l2c (l1 I - R)] / (2 disc), same pattern for sqrt
    pa = (l1c * (a - l2) + l2c * (l1 - a)) * inv
    pb = bb * (l1c - l2c) * inv
    pc = (l1c * (c - l2) + l2c * (l1 - c)) * inv
    qa = (s1 * (a - l2) + s2 * (l1 - a)) * inv
    qb = bb * (s1 - s2) * inv
    qc = (s1 * (c - l2) + s2 * (l1 - c)) * inv
    md = np.maximum(mean, 0.0)
    smd = np.sqrt(md)
    pa = np.where(degen, md, pa)
    pb = np.where(degen, 0.0, pb)
    pc = np.where(degen, md, pc)
    qa = np.where(degen, smd, qa)
    qb = np.where(degen, 0.0, qb)
    qc = np.where(degen, smd, qc)
    return pa, pb, pc, qa, qb, qc


def wishart_weak_errors(
    params: AffineParams,
    r0,
    u,
    T: float,
    steps_list: Sequence[int],
    n_paths: int,
    seed: int,
    exact_value: float,
    threads: int = 1,
    force_general: bool = False,
) -> dict:
    """Euler weak errors of the Laplace functional, with shared Brownian noise.

    The finest level's increments are aggregated for every coarser level
    (common random numbers), so level-to-level *differences* of the estimator
    carry almost no Monte Carlo noise and the O(h) Euler bias ordering is
    measurable far below the marginal standard error.  Every step count must
    divide the finest one.  Returns per-level mean/stderr/abs_error plus the
    consecutive-level differences with their own standard errors.

    A component-arithmetic fast path handles d = 2 (H-form drift); the
    batched-matrix route covers the general case.
    """
    steps_list = sorted(int(s) for s in steps_list)
    n_fine = steps_list[-1]
    for s in steps_list:
        if n_fine % s:
            raise ValueError("each step count must divide the finest")
    d = params.d
    r0 = as_sym(r0)
    ua = as_sym(u)
    dt_f = T / n_fine
    sdt = np.sqrt(dt_f)
    sg = params.sigma
    strides = {s: n_fine // s for s in steps_list}
    fast2 = d == 2 and isinstance(params.drift, HFormDrift) and not force_general

    def worker_general(start, count):
        g = _block_rng(seed, start)
        b = STREAM_BLOCK
        states = {}
        for s in steps_list:
            r = np.broadcast_to(r0, (b, d, d)).copy()
            states[s] = project_and_sqrt_psd_batch(r)[:2]
        acc = {s: np.zeros((b, d, d)) for s in steps_list}
        for k in range(n_fine):
            dw = g.standard_normal((b, d, d)) * sdt
            for s in steps_list:
                acc[s] += dw
                if (k + 1) % strides[s] == 0:
                    r, sr = states[s]
                    dt = T / s
                    m = np.matmul(np.matmul(sr, acc[s]), sg)
                    r = r + (params.b + _drift_apply_batch(params.drift, r)) * dt + m + m.transpose(0, 2, 1)
                    states[s] = project_and_sqrt_psd_batch(r)[:2]
                    acc[s][:] = 0.0
        return {s: np.exp(-np.einsum("ij,bij->b", ua, states[s][0]))[:count] for s in steps_list}

    def worker_2x2(start, count):
        g = _block_rng(seed, start)
        b = STREAM_BLOCK
        h = params.drift.h
        h00, h01, h10, h11 = h[0, 0], h[0, 1], h[1, 0], h[1, 1]
        g00, g01, g10, g11 = sg[0, 0], sg[0, 1], sg[1, 0], sg[1, 1]
        b00, b01, b11 = params.b[0, 0], params.b[0, 1], params.b[1, 1]
        states = {}
        for s in steps_list:
            a0 = np.full(b, r0[0, 0])
            bb0 = np.full(b, r0[0, 1])
            c0 = np.full(b, r0[1, 1])
            states[s] = _proj_sqrt_components_2x2(a0, bb0, c0)
        acc = {s: np.zeros((b, 4)) for s in steps_list}
        for k in range(n_fine):
            dw = g.standard_normal((b, 2, 2)).reshape(b, 4) * sdt
            for s in steps_list:
                acc[s] += dw
                if (k + 1) % strides[s] == 0:
                    pa, pb, pc, qa, qb, qc = states[s]
                    dt = T / s
                    w00, w01, w10, w11 = acc[s][:, 0], acc[s][:, 1], acc[s][:, 2], acc[s][:, 3]
                    # M = sqrt(R) dW Sigma, R update = drift dt + M + M^T
                    t00 = qa * w00 + qb * w10
                    t01 = qa * w01 + qb * w11
                    t10 = qb * w00 + qc * w10
                    t11 = qb * w01 + qc * w11
                    m00 = t00 * g00 + t01 * g10
                    m01 = t00 * g01 + t01 * g11
                    m10 = t10 * g00 + t11 * g10
                    m11 = t10 * g01 + t11 * g11
                    hr00 = h00 * pa + h01 * pb
                    hr01 = h00 * pb + h01 * pc
                    hr10 = h10 * pa + h11 * pb
                    hr11 = h10 * pb + h11 * pc
                    na = pa + (b00 + 2.0 * hr00) * dt + 2.0 * m00
                    nb = pb + (b01 + hr01 + hr10) * dt + m01 + m10
                    nc = pc + (b11 + 2.0 * hr11) * dt + 2.0 * m11
                    states[s] = _proj_sqrt_components_2x2(na, nb, nc)
                    acc[s][:] = 0.0
        out = {}
        for s in steps_list:
            pa, pb, pc, _, _, _ = states[s]
            out[s] = np.exp(-(ua[0, 0] * pa + 2.0 * ua[0, 1] * pb + ua[1, 1] * pc))[:count]
        return out

    worker = worker_2x2 if fast2 else worker_general
    results = _run_blocks(worker, n_paths, threads)
    out = {}
    vals = {}
    for s in steps_list:
        vals[s] = np.concatenate([r[s] for r in results])[:n_paths]
        m, se = mean_stderr(vals[s])
        out[s] = {"mean": float(m), "stderr": float(se), "abs_error": abs(float(m) - exact_value)}
    diffs = []
    for coarse, fine in zip(steps_list[:-1], steps_list[1:]):
        dm, dse = mean_stderr(vals[coarse] - vals[fine])
        diffs.append({"coarse": coarse, "fine": fine, "mean": float(dm), "stderr": float(dse)})
    out["differences"] = diffs
    return out
