"""Least-squares fitting of (alpha, beta) to prevalence data.

Nelder-Mead runs on (log alpha, log beta), so estimates stay positive.  The
objective and the simplex loop are compiled together with numba: one fit
costs a few hundred RK4 integrations and the coverage study runs hundreds of
thousands of fits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np

from .sir import (
    DEFAULT_STEP,
    EpidemicParameters,
    StateVector,
    Trajectory,
    _ROUNDOFF_FLOOR,
    _rk4_step,
    _step_indices,
    integrate_sir,
)

__all__ = [
    "Estimate",
    "FitConfig",
    "FitFailure",
    "best_fit",
    "default_config",
    "fit_batch",
    "sse_objective",
    "write_estimates_csv",
]

# +0.1 in each log coordinate, i.e. roughly a 10% change of the rate
_SIMPLEX_STEP = 0.1


class FitFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    initial_guesses: tuple[tuple[float, float], ...]
    population: int
    initial: StateVector
    max_iterations: int = 2000
    tolerance: float = 1e-10
    step: float = DEFAULT_STEP

    def __post_init__(self):
        if len(self.initial_guesses) < 1:
            raise ValueError("at least one initial guess is required")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        for a, b in self.initial_guesses:
            if not (a > 0 and b > 0):
                raise ValueError(f"initial guesses must be positive, got {(a, b)}")

    def around(self, alpha: float, beta: float) -> FitConfig:
        """Same settings, starts re-centred on (alpha, beta)."""
        return FitConfig(
            _starts(alpha, beta), self.population, self.initial,
            self.max_iterations, self.tolerance, self.step,
        )


def _starts(alpha, beta):
    return ((alpha, beta), (0.5 * alpha, 0.5 * beta), (2.0 * alpha, 2.0 * beta))


def default_config(nominal: EpidemicParameters, initial: StateVector, **kw) -> FitConfig:
    """Three starts: the nominal pair, half of it and twice it."""
    return FitConfig(_starts(nominal.alpha, nominal.beta), nominal.population, initial, **kw)


@dataclass
class Estimate:
    alpha_hat: float
    beta_hat: float
    sse: float
    converged: bool
    iterations: int
    evaluations: int = field(default=0, compare=False)

    def params(self, population: int) -> EpidemicParameters:
        return EpidemicParameters(self.alpha_hat, self.beta_hat, population)


@numba.njit(cache=True)
def _sse_kernel(alpha, beta, s0, i0, r0, h, obs_idx, y):
    s, i, r = s0, i0, r0
    total = 0.0
    k = 0
    n_obs = obs_idx.size
    # observations at step 0
    while k < n_obs and obs_idx[k] == 0:
        d = i - y[k]
        total += d * d
        k += 1
    step = 0
    while k < n_obs:
        s, i, r = _rk4_step(s, i, r, alpha, beta, h)
        step += 1
        if not (np.isfinite(s) and np.isfinite(i) and np.isfinite(r)):
            return np.inf
        if s < 0.0:
            if s < _ROUNDOFF_FLOOR:
                return np.inf
            s = 0.0
        if i < 0.0:
            if i < _ROUNDOFF_FLOOR:
                return np.inf
            i = 0.0
        if r < 0.0:
            if r < _ROUNDOFF_FLOOR:
                return np.inf
            r = 0.0
        while k < n_obs and obs_idx[k] == step:
            d = i - y[k]
            total += d * d
            k += 1
    return total


@numba.njit(cache=True)
def _objective(x, s0, i0, r0, h, obs_idx, y):
    a = np.exp(x[0])
    b = np.exp(x[1])
    if not (np.isfinite(a) and np.isfinite(b)) or a <= 0.0 or b <= 0.0:
        return np.inf
    return _sse_kernel(a, b, s0, i0, r0, h, obs_idx, y)


@numba.njit(cache=True)
def _nelder_mead(x0, tol, max_iter, s0, i0, r0, h, obs_idx, y):
    """2-d Nelder-Mead with coefficients 1, 2, 0.5, 0.5.

    Stops once max f - min f over the simplex is below `tol`, when the simplex
    has collapsed to floating-point resolution, or after `max_iter` iterations.
    Returns (x_best, f_best, iterations, evaluations, converged).
    """
    pts = np.empty((3, 2))
    fv = np.empty(3)
    for v in range(3):
        pts[v, 0] = x0[0]
        pts[v, 1] = x0[1]
    pts[1, 0] += _SIMPLEX_STEP
    pts[2, 1] += _SIMPLEX_STEP
    n_eval = 0
    for v in range(3):
        fv[v] = _objective(pts[v], s0, i0, r0, h, obs_idx, y)
        n_eval += 1
    xr = np.empty(2)
    xe = np.empty(2)
    xc = np.empty(2)
    c = np.empty(2)
    it = 0
    converged = False
    while it < max_iter:
        # order vertices by objective (insertion sort on 3 items)
        for a in range(1, 3):
            b = a
            while b > 0 and fv[b] < fv[b - 1]:
                tf = fv[b]
                fv[b] = fv[b - 1]
                fv[b - 1] = tf
                for d in range(2):
                    tp = pts[b, d]
                    pts[b, d] = pts[b - 1, d]
                    pts[b - 1, d] = tp
                b -= 1
        if np.isfinite(fv[2]) and fv[2] - fv[0] < tol:
            converged = True
            break
        diam = 0.0
        for v in range(1, 3):
            for d in range(2):
                diam = max(diam, abs(pts[v, d] - pts[0, d]))
        if np.isfinite(fv[2]) and diam < 1e-13:
            converged = True
            break
        it += 1
        for d in range(2):
            c[d] = 0.5 * (pts[0, d] + pts[1, d])
            xr[d] = c[d] + (c[d] - pts[2, d])
        fr = _objective(xr, s0, i0, r0, h, obs_idx, y)
        n_eval += 1
        if fr < fv[0]:
            for d in range(2):
                xe[d] = c[d] + 2.0 * (c[d] - pts[2, d])
            fe = _objective(xe, s0, i0, r0, h, obs_idx, y)
            n_eval += 1
            if fe < fr:
                pts[2, 0] = xe[0]
                pts[2, 1] = xe[1]
                fv[2] = fe
            else:
                pts[2, 0] = xr[0]
                pts[2, 1] = xr[1]
                fv[2] = fr
            continue
        if fr < fv[1]:
            pts[2, 0] = xr[0]
            pts[2, 1] = xr[1]
            fv[2] = fr
            continue
        shrink = False
        if fr < fv[2]:
            for d in range(2):
                xc[d] = c[d] + 0.5 * (xr[d] - c[d])
            fc = _objective(xc, s0, i0, r0, h, obs_idx, y)
            n_eval += 1
            if fc <= fr:
                pts[2, 0] = xc[0]
                pts[2, 1] = xc[1]
                fv[2] = fc
            else:
                shrink = True
        else:
            for d in range(2):
                xc[d] = c[d] + 0.5 * (pts[2, d] - c[d])
            fc = _objective(xc, s0, i0, r0, h, obs_idx, y)
            n_eval += 1
            if fc < fv[2]:
                pts[2, 0] = xc[0]
                pts[2, 1] = xc[1]
                fv[2] = fc
            else:
                shrink = True
        if shrink:
            for v in range(1, 3):
                for d in range(2):
                    pts[v, d] = pts[0, d] + 0.5 * (pts[v, d] - pts[0, d])
                fv[v] = _objective(pts[v], s0, i0, r0, h, obs_idx, y)
                n_eval += 1
    best = 0
    for v in range(1, 3):
        if fv[v] < fv[best]:
            best = v
    return pts[best].copy(), fv[best], it, n_eval, converged


@numba.njit(cache=True)
def _multi_start(starts, tol, max_iter, s0, i0, r0, h, obs_idx, y):
    """Runs every start; returns the row (log a, log b, sse, iters, evals, converged) of the best."""
    best = np.full(6, np.inf)
    evals = 0
    for k in range(starts.shape[0]):
        x, f, it, ne, conv = _nelder_mead(starts[k], tol, max_iter, s0, i0, r0, h, obs_idx, y)
        evals += ne
        if f < best[2]:
            best[0] = x[0]
            best[1] = x[1]
            best[2] = f
            best[3] = it
            best[5] = 1.0 if conv else 0.0
    best[4] = evals
    return best


# phases of the batched simplex state machine
_IDLE = -1
_INIT0 = 0
_INIT1 = 1
_INIT2 = 2
_REFLECT = 3
_EXPAND = 4
_CONTRACT_OUT = 5
_CONTRACT_IN = 6
_SHRINK1 = 7
_SHRINK2 = 8

LANES = 16


@numba.njit(cache=True)
def _sse_lanes(xq, ds, Y, s0, i0, r0, h, obs_idx, out):
    """SSE for every lane's query point; lanes run interleaved through RK4.

    Same arithmetic as `_sse_kernel`, lane by lane, so results match it bit
    for bit.
    """
    K = xq.shape[0]
    a = np.empty(K)
    b = np.empty(K)
    s = np.full(K, s0)
    i = np.full(K, i0)
    r = np.full(K, r0)
    bad = np.zeros(K, dtype=np.bool_)
    tot = np.zeros(K)
    for l in range(K):
        a[l] = np.exp(xq[l, 0])
        b[l] = np.exp(xq[l, 1])
        if not (np.isfinite(a[l]) and np.isfinite(b[l]) and a[l] > 0.0 and b[l] > 0.0):
            bad[l] = True
            a[l] = 0.0
            b[l] = 0.0
    hh = 0.5 * h
    h6 = h / 6.0
    n_obs = obs_idx.size
    k = 0
    while k < n_obs and obs_idx[k] == 0:
        for l in range(K):
            d = i[l] - Y[ds[l], k]
            tot[l] += d * d
        k += 1
    step = 0
    while k < n_obs:
        for l in range(K):
            al = a[l]
            bl = b[l]
            sl = s[l]
            il = i[l]
            k1s = -bl * sl * il
            k1r = al * il
            k1i = -k1s - k1r
            s2 = sl + hh * k1s
            i2 = il + hh * k1i
            k2s = -bl * s2 * i2
            k2r = al * i2
            k2i = -k2s - k2r
            s3 = sl + hh * k2s
            i3 = il + hh * k2i
            k3s = -bl * s3 * i3
            k3r = al * i3
            k3i = -k3s - k3r
            s4 = sl + h * k3s
            i4 = il + h * k3i
            k4s = -bl * s4 * i4
            k4r = al * i4
            k4i = -k4s - k4r
            sl = sl + h6 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s)
            il = il + h6 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i)
            rl = r[l] + h6 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
            # catches NaN as well as negatives beyond round-off
            bad[l] |= not (sl >= _ROUNDOFF_FLOOR and il >= _ROUNDOFF_FLOOR and rl >= _ROUNDOFF_FLOOR)
            s[l] = sl if sl > 0.0 else 0.0
            i[l] = il if il > 0.0 else 0.0
            r[l] = rl if rl > 0.0 else 0.0
        step += 1
        while k < n_obs and obs_idx[k] == step:
            for l in range(K):
                d = i[l] - Y[ds[l], k]
                tot[l] += d * d
            k += 1
    for l in range(K):
        if bad[l] or not np.isfinite(tot[l]):
            out[l] = np.inf
        else:
            out[l] = tot[l]


@numba.njit(cache=True)
def _fit_lanes(starts, Y, s0, i0, r0, h, obs_idx, tol, max_iter, n_lanes):
    """Multi-start Nelder-Mead for every row of `Y`, `n_lanes` fits at a time.

    Each lane runs the same state machine as `_nelder_mead`; a lane that
    finishes its dataset picks up the next unassigned one.  Output rows are
    (log alpha, log beta, sse, iterations of best start, evaluations,
    converged flag of best start).
    """
    D = Y.shape[0]
    S = starts.shape[1]
    out = np.full((D, 6), np.inf)
    for d in range(D):
        out[d, 4] = 0.0
    K = min(n_lanes, D)
    if K == 0:
        return out
    ds = np.zeros(K, dtype=np.int64)
    st = np.zeros(K, dtype=np.int64)
    phase = np.full(K, _IDLE, dtype=np.int64)
    pts = np.empty((K, 3, 2))
    fv = np.empty((K, 3))
    xq = np.zeros((K, 2))
    fq = np.empty(K)
    xr = np.empty((K, 2))
    fr = np.empty(K)
    c = np.empty((K, 2))
    it = np.zeros(K, dtype=np.int64)
    nxt = 0
    for l in range(K):
        ds[l] = nxt
        nxt += 1
        st[l] = 0
        phase[l] = _INIT0
    for l in range(K):
        _load_start(l, starts, ds, st, pts, xq, it)
    active = K
    while active > 0:
        _sse_lanes(xq, ds, Y, s0, i0, r0, h, obs_idx, fq)
        for l in range(K):
            ph = phase[l]
            if ph == _IDLE:
                continue
            f = fq[l]
            d = ds[l]
            out[d, 4] += 1.0
            complete = True
            if ph == _INIT0 or ph == _INIT1:
                fv[l, ph] = f
                phase[l] = ph + 1
                xq[l, 0] = pts[l, ph + 1, 0]
                xq[l, 1] = pts[l, ph + 1, 1]
                complete = False
            elif ph == _INIT2:
                fv[l, 2] = f
            elif ph == _REFLECT:
                fr[l] = f
                xr[l, 0] = xq[l, 0]
                xr[l, 1] = xq[l, 1]
                if f < fv[l, 0]:
                    for q in range(2):
                        xq[l, q] = c[l, q] + 2.0 * (c[l, q] - pts[l, 2, q])
                    phase[l] = _EXPAND
                    complete = False
                elif f < fv[l, 1]:
                    _replace_worst(l, pts, fv, xr[l, 0], xr[l, 1], f)
                elif f < fv[l, 2]:
                    for q in range(2):
                        xq[l, q] = c[l, q] + 0.5 * (xr[l, q] - c[l, q])
                    phase[l] = _CONTRACT_OUT
                    complete = False
                else:
                    for q in range(2):
                        xq[l, q] = c[l, q] + 0.5 * (pts[l, 2, q] - c[l, q])
                    phase[l] = _CONTRACT_IN
                    complete = False
            elif ph == _EXPAND:
                if f < fr[l]:
                    _replace_worst(l, pts, fv, xq[l, 0], xq[l, 1], f)
                else:
                    _replace_worst(l, pts, fv, xr[l, 0], xr[l, 1], fr[l])
            elif ph == _CONTRACT_OUT or ph == _CONTRACT_IN:
                accept = f <= fr[l] if ph == _CONTRACT_OUT else f < fv[l, 2]
                if accept:
                    _replace_worst(l, pts, fv, xq[l, 0], xq[l, 1], f)
                else:
                    for v in range(1, 3):
                        for q in range(2):
                            pts[l, v, q] = pts[l, 0, q] + 0.5 * (pts[l, v, q] - pts[l, 0, q])
                    xq[l, 0] = pts[l, 1, 0]
                    xq[l, 1] = pts[l, 1, 1]
                    phase[l] = _SHRINK1
                    complete = False
            elif ph == _SHRINK1:
                fv[l, 1] = f
                xq[l, 0] = pts[l, 2, 0]
                xq[l, 1] = pts[l, 2, 1]
                phase[l] = _SHRINK2
                complete = False
            else:
                fv[l, 2] = f
            if not complete:
                continue
            # simplex complete: convergence test, then the next reflection
            while True:
                done, conv = _order_and_test(l, pts, fv, it, tol, max_iter)
                if not done:
                    it[l] += 1
                    for q in range(2):
                        c[l, q] = 0.5 * (pts[l, 0, q] + pts[l, 1, q])
                        xq[l, q] = c[l, q] + (c[l, q] - pts[l, 2, q])
                    phase[l] = _REFLECT
                    break
                bv = 0
                for v in range(1, 3):
                    if fv[l, v] < fv[l, bv]:
                        bv = v
                if fv[l, bv] < out[d, 2]:
                    out[d, 0] = pts[l, bv, 0]
                    out[d, 1] = pts[l, bv, 1]
                    out[d, 2] = fv[l, bv]
                    out[d, 3] = it[l]
                    out[d, 5] = 1.0 if conv else 0.0
                st[l] += 1
                if st[l] >= S:
                    if nxt < D:
                        ds[l] = nxt
                        d = nxt
                        nxt += 1
                        st[l] = 0
                    else:
                        phase[l] = _IDLE
                        active -= 1
                        break
                _load_start(l, starts, ds, st, pts, xq, it)
                phase[l] = _INIT0
                break
    return out


@numba.njit(cache=True)
def _load_start(l, starts, ds, st, pts, xq, it):
    x0 = starts[ds[l], st[l]]
    for v in range(3):
        pts[l, v, 0] = x0[0]
        pts[l, v, 1] = x0[1]
    pts[l, 1, 0] += _SIMPLEX_STEP
    pts[l, 2, 1] += _SIMPLEX_STEP
    xq[l, 0] = pts[l, 0, 0]
    xq[l, 1] = pts[l, 0, 1]
    it[l] = 0


@numba.njit(cache=True)
def _replace_worst(l, pts, fv, x0, x1, f):
    pts[l, 2, 0] = x0
    pts[l, 2, 1] = x1
    fv[l, 2] = f


@numba.njit(cache=True)
def _order_and_test(l, pts, fv, it, tol, max_iter):
    """Returns (stop, converged) for lane `l`, sorting its simplex first."""
    if it[l] >= max_iter:
        return True, False
    for a in range(1, 3):
        b = a
        while b > 0 and fv[l, b] < fv[l, b - 1]:
            tf = fv[l, b]
            fv[l, b] = fv[l, b - 1]
            fv[l, b - 1] = tf
            for q in range(2):
                tp = pts[l, b, q]
                pts[l, b, q] = pts[l, b - 1, q]
                pts[l, b - 1, q] = tp
            b -= 1
    if np.isfinite(fv[l, 2]) and fv[l, 2] - fv[l, 0] < tol:
        return True, True
    diam = 0.0
    for v in range(1, 3):
        for q in range(2):
            diam = max(diam, abs(pts[l, v, q] - pts[l, 0, q]))
    if np.isfinite(fv[l, 2]) and diam < 1e-13:
        return True, True
    return False, False


def _prepare(grid, config: FitConfig):
    obs_idx = _step_indices(grid, config.step)
    s0, i0, r0 = map(float, config.initial.as_tuple())
    return obs_idx, s0, i0, r0


def _check_data(values: np.ndarray, allow_negative: bool = False) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("data contain non-finite values")
    if not allow_negative and np.any(values < 0):
        raise ValueError("data must be non-negative")
    return values


def fit_batch(values, grid, config: FitConfig, guesses=None, lanes: int = LANES,
              allow_negative: bool = False) -> np.ndarray:
    """Fit every row of `values` (datasets observed on `grid`).

    `guesses` optionally gives per-dataset starts, shape (D, S, 2) in natural
    (alpha, beta) units; by default every dataset uses
    ``config.initial_guesses``.  Returns rows (alpha_hat, beta_hat, sse,
    converged, iterations, evaluations); alpha_hat/beta_hat are NaN where no
    start produced a finite objective.  Each row is identical to what
    `best_fit` returns for that dataset alone.  Negative observations are
    rejected unless `allow_negative` is set (unclamped Gaussian noise).
    """
    Y = _check_data(np.atleast_2d(values), allow_negative)
    obs_idx, s0, i0, r0 = _prepare(grid, config)
    if Y.shape[1] != obs_idx.size:
        raise ValueError("datasets do not match the grid length")
    if guesses is None:
        guesses = np.broadcast_to(np.asarray(config.initial_guesses, dtype=float),
                                  (Y.shape[0], len(config.initial_guesses), 2))
    starts = np.ascontiguousarray(np.log(np.asarray(guesses, dtype=float)))
    raw = _fit_lanes(starts, Y, s0, i0, r0, config.step, obs_idx,
                     config.tolerance, config.max_iterations, lanes)
    out = np.empty((Y.shape[0], 6))
    ok = np.isfinite(raw[:, 2])
    out[:, 0] = np.where(ok, np.exp(raw[:, 0]), np.nan)
    out[:, 1] = np.where(ok, np.exp(raw[:, 1]), np.nan)
    out[:, 2] = raw[:, 2]
    out[:, 3] = raw[:, 5]
    out[:, 4] = np.where(ok, raw[:, 3], 0)
    out[:, 5] = raw[:, 4]
    return out


def best_fit(data: Trajectory, config: FitConfig) -> Estimate:
    """Least-squares (alpha, beta) for a prevalence series.

    The model starts at ``config.initial`` at the first grid time; every start
    in ``config.initial_guesses`` is refined and the lowest SSE is returned.
    """
    row = fit_batch(data.prevalence[None, :], data.grid, config, lanes=1)[0]
    if not np.isfinite(row[2]):
        raise FitFailure("no start produced a finite objective")
    return Estimate(
        alpha_hat=float(row[0]),
        beta_hat=float(row[1]),
        sse=float(row[2]),
        converged=bool(row[3]),
        iterations=int(row[4]),
        evaluations=int(row[5]),
    )


def sse_objective(params: EpidemicParameters, data: Trajectory, initial: StateVector,
                  step: float = DEFAULT_STEP) -> float:
    """Sum over the grid of (I_model(t) - y(t))**2."""
    model = integrate_sir(params, initial, data.grid, step)
    d = model.prevalence - data.prevalence
    return float(np.sum(d * d))


def write_estimates_csv(estimates: list[Estimate | None], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_id", "alpha_hat", "beta_hat", "sse", "converged", "iters"])
        for k, e in enumerate(estimates):
            if e is None:
                w.writerow([k, "", "", "", "false", 0])
            else:
                w.writerow([k, repr(e.alpha_hat), repr(e.beta_hat), repr(e.sse),
                            "true" if e.converged else "false", e.iterations])
