"""Monte Carlo machinery: forward paths, regression BSDE solver, Malliavin routes.

The forward component is simulated by Euler-Maruyama with counter-based
(Philox) random streams so that ensembles are reproducible for a fixed
(seed, n_paths, n_steps) and embarrassingly parallel: path i consumes the
i-th block of the keyed counter stream.

The backward pair is solved by least-squares Monte Carlo: per-step
conditional expectations are projected on a polynomial (or piecewise-linear)
basis in the Markovian state.

Malliavin derivatives of the backward component solve a linear BSDE; its
closed-form representation discounts the terminal slope by exp(int h_y) under
the h_z-tilted measure, which is implemented with pathwise exponential
weights plus a single conditional-expectation regression per requested time,
rather than nested regression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.random import Generator, Philox

from .errors import BasisError, EvaluationError, PreconditionError
from .model import ModelSpec
from .pde import GridSolution

__all__ = [
    "STREAM_FORWARD", "STREAM_COUPLING", "STREAM_BOOTSTRAP",
    "PathEnsemble", "BasisSpec", "BsdeSolution", "MalliavinEnsemble",
    "simulate_forward", "solve_bsde_regression", "variational_processes",
    "solve_malliavin_bsde", "z_from_malliavin", "second_malliavin",
    "malliavin_fd", "rng_stream",
]

STREAM_FORWARD = 0
STREAM_COUPLING = 1
STREAM_BOOTSTRAP = 2


def rng_stream(seed: int, stream: int) -> Generator:
    """Counter-based generator for a named substream of the master seed."""
    return Generator(Philox(key=np.array([seed, stream], dtype=np.uint64)))


@dataclass
class PathEnsemble:
    """Euler-Maruyama paths of the forward diffusion.

    ``dW`` has shape (n_paths, n_steps); ``X`` has shape (n_paths, n_steps+1)
    with X[:, 0] = X0.  Row i of ``dW`` is the i-th counter block of the
    (seed, stream) Philox stream.
    """

    t_grid: np.ndarray
    dW: np.ndarray
    X: np.ndarray
    seed: int
    stream: int = STREAM_FORWARD
    antithetic: bool = False

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    def increment_stats(self):
        m = float(np.mean(self.dW))
        v = float(np.var(self.dW))
        return m, v

    def sanity_ok(self) -> bool:
        m, v = self.increment_stats()
        n = self.dW.size
        return abs(m) <= 5.0 / math.sqrt(n) and abs(v - self.dt) <= 0.05 * self.dt

    def index_of(self, t: float, nearest: bool = False) -> int:
        k = int(round((t - self.t_grid[0]) / self.dt))
        k = min(max(k, 0), self.n_steps)
        if not nearest and abs(self.t_grid[k] - t) > 1e-9 + 1e-9 * abs(t):
            raise PreconditionError(f"t={t} is not a grid time of this ensemble")
        return k

    def to_csv(self, path, header_lines=()):
        with open(path, "w") as fh:
            fh.write(f"# seed={self.seed} stream={self.stream} n_paths={self.n_paths} "
                     f"n_steps={self.n_steps}\n")
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("path,t,x\n")
            for i in range(self.n_paths):
                for k, t in enumerate(self.t_grid):
                    fh.write("%d,%.17g,%.17g\n" % (i, t, self.X[i, k]))

    def to_binary(self, path):
        import struct

        with open(path, "wb") as fh:
            fh.write(b"FBLPATH1")
            fh.write(struct.pack("<IQQqq", 1, self.n_paths, self.n_steps,
                                 self.seed, self.stream))
            for a in (self.t_grid, self.dW, self.X):
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def simulate_forward(spec: ModelSpec, n_paths: int, n_steps: int, seed: int,
                     antithetic: bool = False, stream: int = STREAM_FORWARD) -> PathEnsemble:
    """Euler-Maruyama simulation of the forward diffusion.

    Deterministic for fixed (seed, n_paths, n_steps, stream).  NaN from a
    coefficient raises an evaluation error carrying a (path, step) witness.
    """
    if n_paths < 1 or n_steps < 1:
        raise PreconditionError("n_paths and n_steps must be >= 1")
    dt = spec.T / n_steps
    rng = rng_stream(seed, stream)
    if antithetic:
        half = (n_paths + 1) // 2
        base = rng.standard_normal((half, n_steps))
        dW = np.vstack([base, -base])[:n_paths] * math.sqrt(dt)
    else:
        dW = rng.standard_normal((n_paths, n_steps)) * math.sqrt(dt)
    t_grid = np.linspace(0.0, spec.T, n_steps + 1)
    X = np.empty((n_paths, n_steps + 1))
    X[:, 0] = spec.X0
    for k in range(n_steps):
        t = t_grid[k]
        drift = np.asarray(spec.b(t, X[:, k]), dtype=float)
        diff = np.asarray(spec.sigma(t, X[:, k]), dtype=float)
        X[:, k + 1] = X[:, k] + drift * dt + diff * dW[:, k]
        bad = ~np.isfinite(X[:, k + 1])
        if np.any(bad):
            i = int(np.argmax(bad))
            raise EvaluationError(f"non-finite state at path {i}, step {k + 1}",
                                  witness=(i, k + 1))
    return PathEnsemble(t_grid, dW, X, seed, stream, antithetic)


# -- regression bases --------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis for per-step conditional expectations.

    kind 'poly': monomials of the standardized state up to ``degree``.
    kind 'pwlinear': hat functions on ``n_knots`` knots, spaced either on
    sample quantiles (robust for induction) or uniformly between the 0.1% and
    99.9% quantiles (better pointwise approximation of smooth targets).
    """

    kind: str = "poly"
    degree: int = 4
    n_knots: int = 33
    ridge: float = 1e-8
    knots: str = "quantile"  # "quantile" | "uniform"

    def describe(self) -> str:
        if self.kind == "poly":
            return f"poly(degree={self.degree}, ridge={self.ridge:g})"
        return f"pwlinear(n_knots={self.n_knots}, {self.knots}, ridge={self.ridge:g})"


def _design(basis: BasisSpec, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if basis.kind == "poly":
        mu, sd = float(np.mean(x)), float(np.std(x))
        sd = sd if sd > 1e-300 else 1.0
        xs = (x - mu) / sd
        A = np.vander(xs, basis.degree + 1, increasing=True)
        meta = ("poly", mu, sd)
    elif basis.kind == "pwlinear":
        if basis.knots == "uniform":
            lo, hi = np.quantile(x, [0.001, 0.999])
            knots = np.unique(np.linspace(lo, hi, basis.n_knots))
        else:
            knots = np.unique(np.quantile(x, np.linspace(0.0, 1.0, basis.n_knots)))
        if knots.size < 2:
            knots = np.array([knots[0] - 0.5, knots[0] + 0.5])
        A = _hat_design(x, knots)
        meta = ("pwlinear", knots)
    else:
        raise BasisError(f"unknown basis kind {basis.kind!r}")
    return A, meta


def _design_from_meta(basis: BasisSpec, meta, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if meta[0] == "poly":
        _, mu, sd = meta
        return np.vander((x - mu) / sd, basis.degree + 1, increasing=True)
    return _hat_design(x, meta[1])


def _hat_design(x, knots):
    # piecewise-linear interpolation basis; columns sum to 1
    idx = np.clip(np.searchsorted(knots, x) - 1, 0, knots.size - 2)
    lam = (x - knots[idx]) / (knots[idx + 1] - knots[idx])
    lam = np.clip(lam, 0.0, 1.0)
    A = np.zeros((x.size, knots.size))
    rows = np.arange(x.size)
    A[rows, idx] = 1.0 - lam
    A[rows, idx + 1] = lam
    return A


def _ridge_fit(A: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    n = A.shape[0]
    M = A.T @ A / n
    M[np.diag_indices_from(M)] += ridge
    try:
        c = np.linalg.solve(M, A.T @ y / n)
    except np.linalg.LinAlgError as exc:
        raise BasisError("regression design is rank deficient") from exc
    if not np.all(np.isfinite(c)):
        raise BasisError("regression produced non-finite coefficients")
    return c


def _regress(basis: BasisSpec, x: np.ndarray, y: np.ndarray):
    A, meta = _design(basis, x)
    c = _ridge_fit(A, y, basis.ridge)
    return A @ c, (c, meta)


def _regress_chaos(basis: BasisSpec, x: np.ndarray, y: np.ndarray,
                   future_sum: np.ndarray, tau: float):
    """Conditional expectation E[y | x] with martingale noise absorption.

    The design is augmented with first/second Wiener-chaos columns built from
    the future Brownian mass (interacted with the state basis).  They are
    conditionally centered given x, so the x-part of the fit stays unbiased
    while the dominant response noise is projected out; predictions zero the
    chaos columns.
    """
    A, _ = _design(basis, x)
    if tau <= 0:
        return A @ _ridge_fit(A, y, basis.ridge)
    h1 = (future_sum / math.sqrt(tau))[:, None]
    h2 = ((future_sum**2 - tau) / (tau * math.sqrt(2.0)))[:, None]
    D = np.concatenate([A, A * h1, A * h2], axis=1)
    c = _ridge_fit(D, y, basis.ridge)
    return A @ c[: A.shape[1]]


@dataclass
class BsdeSolution:
    """Regression solution of the backward pair along a path ensemble."""

    t_grid: np.ndarray
    Y: np.ndarray            # (n_paths, n_steps+1)
    Z: np.ndarray            # (n_paths, n_steps); Z[:, k] estimates Z at t_k
    basis: BasisSpec
    residuals: np.ndarray    # per-step mean squared projection residuals
    saturation_rate: float = 0.0
    z_cap: Optional[float] = None
    warnings: list = field(default_factory=list)
    y_fits: list = field(default_factory=list)   # (coeffs, meta) per step, index k

    def eval_y(self, k: int, x):
        """Evaluate the fitted continuation value E[Y_{k+1} | X_k = x]."""
        c, meta = self.y_fits[k]
        return _design_from_meta(self.basis, meta, np.asarray(x, dtype=float)) @ c


def solve_bsde_regression(spec: ModelSpec, ens: PathEnsemble,
                          basis: Optional[BasisSpec] = None,
                          z_cap: float = 50.0,
                          control_variate: bool = True) -> BsdeSolution:
    """Least-squares Monte Carlo backward induction for (Y, Z).

    Y_{t_k} = E[Y_{t_{k+1}} | X_{t_k}] + h(t_k, X_{t_k}, ., .) dt and
    Z_{t_k} = E[Y_{t_{k+1}} dW_k / dt | X_{t_k}], both projected on the basis.
    With ``control_variate`` the fitted martingale increment Z_k dW_k is
    subtracted from the continuation response, which removes most of the
    one-step residual variance.  Quadratic drivers see the z-argument
    truncated at ``z_cap``; the clip rate is reported and a warning is raised
    above 1% of path-steps.
    """
    basis = basis or BasisSpec()
    n, N, dt = ens.n_paths, ens.n_steps, ens.dt
    t = ens.t_grid
    Y = np.empty((n, N + 1))
    Z = np.empty((n, N))
    Y[:, N] = np.asarray(spec.g(ens.X[:, N]), dtype=float)
    residuals = np.zeros(N)
    y_fits: list = [None] * N
    clipped = 0
    quadratic = spec.regime == "quadratic"
    for k in range(N - 1, -1, -1):
        xk = ens.X[:, k]
        A, meta = _design(basis, xk)
        # center the martingale-increment response before the Z projection,
        # otherwise its variance grows like |x|/sqrt(dt) and the edge leverage
        # of the basis amplifies it
        c_y0 = _ridge_fit(A, Y[:, k + 1], basis.ridge)
        cond0 = A @ c_y0
        c_z = _ridge_fit(A, (Y[:, k + 1] - cond0) * ens.dW[:, k] / dt, basis.ridge)
        zk = A @ c_z
        if control_variate:
            c_y = _ridge_fit(A, Y[:, k + 1] - zk * ens.dW[:, k], basis.ridge)
            cond = A @ c_y
        else:
            c_y, cond = c_y0, cond0
        Z[:, k] = zk
        y_fits[k] = (c_y, meta)
        if quadratic:
            z_used = np.clip(zk, -z_cap, z_cap)
            clipped += int(np.sum(np.abs(zk) > z_cap))
        else:
            z_used = zk
        Y[:, k] = cond + dt * np.asarray(spec.h(t[k], xk, cond, z_used), dtype=float)
        residuals[k] = float(np.mean((Y[:, k + 1] - cond) ** 2))
    rate = clipped / (n * N)
    sol = BsdeSolution(t, Y, Z, basis, residuals, rate,
                       z_cap if quadratic else None, [], y_fits)
    if quadratic and rate > 0.01:
        sol.warnings.append(f"driver truncation saturated on {100 * rate:.2f}% of path-steps")
    return sol


def variational_processes(spec: ModelSpec, ens: PathEnsemble) -> np.ndarray:
    """First-variation process along the ensemble  (Euler on the linear SDE).

    nablaX[ :, 0] = 1 and d(nablaX) = b_x nablaX dt + sigma_x nablaX dW.
    The Malliavin derivative of the forward process follows from the flow
    representation  D_r X_t = nablaX_t (nablaX_r)^{-1} sigma(r, X_r).
    """
    n, N, dt = ens.n_paths, ens.n_steps, ens.dt
    nabla = np.empty((n, N + 1))
    nabla[:, 0] = 1.0
    bx = spec.d("b_x")
    sx = spec.d("sigma_x")
    for k in range(N):
        t = ens.t_grid[k]
        xk = ens.X[:, k]
        growth = 1.0 + np.asarray(bx(t, xk), dtype=float) * dt \
            + np.asarray(sx(t, xk), dtype=float) * ens.dW[:, k]
        nabla[:, k + 1] = nabla[:, k] * growth
        if np.any(~np.isfinite(nabla[:, k + 1])):
            i = int(np.argmax(~np.isfinite(nabla[:, k + 1])))
            raise EvaluationError(f"non-finite variational state at path {i}, step {k + 1}",
                                  witness=(i, k + 1))
    return nabla


def malliavin_dx(spec: ModelSpec, ens: PathEnsemble, nabla: np.ndarray, k_r: int) -> np.ndarray:
    """D_{t_{k_r}} X_t for all t >= t_{k_r} via the flow representation."""
    sig_r = np.asarray(spec.sigma(ens.t_grid[k_r], ens.X[:, k_r]), dtype=float)
    out = np.full_like(nabla, np.nan)
    out[:, k_r:] = (sig_r / nabla[:, k_r])[:, None] * nabla[:, k_r:]
    return out


@dataclass
class MalliavinEnsemble:
    """Pathwise Malliavin-derivative processes for one differentiation time r."""

    r: float
    r_index: int
    t_grid: np.ndarray
    DrX: np.ndarray                 # (n_paths, n_steps+1); NaN for t < r
    DrY: np.ndarray                 # same layout
    nablaX: np.ndarray
    DrZ: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    def at(self, t: float, which: str = "DrY") -> np.ndarray:
        k = int(round(t / (self.t_grid[1] - self.t_grid[0])))
        if abs(self.t_grid[k] - t) > 1e-9:
            raise PreconditionError(f"t={t} is not on the ensemble time grid")
        if k < self.r_index:
            raise PreconditionError("requested time precedes the differentiation time r")
        return getattr(self, which)[:, k]


def _theta_paths(spec: ModelSpec, ens: PathEnsemble,
                 sol: Union[BsdeSolution, GridSolution, tuple]):
    """(Y, Z) along paths from whichever backward solution is supplied."""
    if isinstance(sol, BsdeSolution):
        Z = np.concatenate([sol.Z, sol.Z[:, -1:]], axis=1)
        return sol.Y, Z
    if isinstance(sol, tuple):
        sol_u, sol_up = sol
    else:
        sol_u, sol_up = sol, None
    n, N = ens.n_paths, ens.n_steps
    Y = np.empty((n, N + 1))
    Z = np.empty((n, N + 1))
    for k, t in enumerate(ens.t_grid):
        xk = ens.X[:, k]
        Y[:, k] = sol_u.eval(t, xk)
        ux = sol_up.eval(t, xk) if sol_up is not None else sol_u.eval(t, xk, array=sol_u.u_x)
        Z[:, k] = ux * np.asarray(spec.sigma(t, xk), dtype=float)
    return Y, Z


def solve_malliavin_bsde(spec: ModelSpec, ens: PathEnsemble,
                         sol: Union[BsdeSolution, GridSolution, tuple],
                         r: float, basis: Optional[BasisSpec] = None,
                         kurtosis_gate: float = 100.0,
                         times: Optional[Sequence] = None) -> MalliavinEnsemble:
    """Malliavin derivative (D_r X, D_r Y, D_r Z) for t >= r.

    Solves the linear equation satisfied by D_r Y through its explicit
    representation: discount exp(int_t^T h_y) under the h_z-tilted measure,
    both realized as pathwise exponential weights, followed by one projection
    on the state per time node.  D_r Z is filled via the chain rule
    d/dx[u_x sigma] when grid solutions are available.  ``times`` restricts
    the conditional-expectation projections (and DrZ fill) to the listed grid
    times; other columns stay NaN.
    """
    if r > spec.T:
        raise PreconditionError("differentiation time r exceeds the horizon")
    basis = basis or BasisSpec()
    n, N, dt = ens.n_paths, ens.n_steps, ens.dt
    k_r = ens.index_of(r)
    if k_r == N:
        raise PreconditionError("r must precede the terminal time")
    t = ens.t_grid
    Ypath, Zpath = _theta_paths(spec, ens, sol)
    nabla = variational_processes(spec, ens)
    DrX = malliavin_dx(spec, ens, nabla, k_r)

    hy = np.empty((n, N))
    hz = np.empty((n, N))
    hx = np.empty((n, N + 1))
    for k in range(N):
        hy[:, k] = np.asarray(spec.d("h_y")(t[k], ens.X[:, k], Ypath[:, k], Zpath[:, k]), dtype=float)
        hz[:, k] = np.asarray(spec.d("h_z")(t[k], ens.X[:, k], Ypath[:, k], Zpath[:, k]), dtype=float)
        hx[:, k] = np.asarray(spec.d("h_x")(t[k], ens.X[:, k], Ypath[:, k], Zpath[:, k]), dtype=float)
    hx[:, N] = np.asarray(spec.d("h_x")(t[N], ens.X[:, N], Ypath[:, N], Zpath[:, N]), dtype=float)

    # per-step weights rho_k = exp(h_y dt) exp(h_z dW - h_z^2 dt / 2)
    log_rho = hy * dt + hz * ens.dW - 0.5 * hz**2 * dt
    rho = np.exp(log_rho)

    warnings = []
    girsanov = np.exp(np.sum(hz * ens.dW - 0.5 * hz**2 * dt, axis=1))
    gv = float(np.var(girsanov))
    if gv > 0:
        kurt = float(np.mean((girsanov - girsanov.mean()) ** 4) / gv**2)
        if kurt > kurtosis_gate:
            warnings.append(f"importance-weight kurtosis {kurt:.1f} exceeds gate {kurtosis_gate:g}")

    # backward accumulation of the discounted payoff, source by trapezoid
    gprime = np.asarray(spec.d("g1")(ens.X[:, N]), dtype=float)
    src = hx * nabla  # (h_x nablaX) at every node
    G = np.empty((n, N + 1))
    G[:, N] = gprime * nabla[:, N]
    for k in range(N - 1, -1, -1):
        G[:, k] = rho[:, k] * G[:, k + 1] + 0.5 * dt * (src[:, k] + rho[:, k] * src[:, k + 1])

    if times is None:
        k_eval = range(k_r, N + 1)
    else:
        k_eval = sorted({ens.index_of(tv) for tv in times})
        if any(k < k_r for k in k_eval):
            raise PreconditionError("requested evaluation time precedes r")
    # cumulative future increments back the zero-mean chaos regressors that
    # soak up the projection noise without entering the prediction
    S = np.concatenate([np.cumsum(ens.dW[:, ::-1], axis=1)[:, ::-1],
                        np.zeros((n, 1))], axis=1)
    DrY = np.full((n, N + 1), np.nan)
    for k in k_eval:
        if k == N:
            cond = gprime * 1.0
        else:
            resp = G[:, k] / nabla[:, k]
            cond = _regress_chaos(basis, ens.X[:, k], resp, S[:, k], t[N] - t[k])
        DrY[:, k] = cond * DrX[:, k]

    DrZ = None
    if not isinstance(sol, BsdeSolution):
        sol_u, sol_up = sol if isinstance(sol, tuple) else (sol, None)
        if sol_up is not None:
            DrZ = np.full((n, N + 1), np.nan)
            sx = spec.d("sigma_x")
            for k in k_eval:
                xk = ens.X[:, k]
                ux = sol_up.eval(t[k], xk)
                uxx = sol_up.eval(t[k], xk, array=sol_up.u_x)
                sig = np.asarray(spec.sigma(t[k], xk), dtype=float)
                sigx = np.asarray(sx(t[k], xk), dtype=float)
                DrZ[:, k] = (ux * sigx + uxx * sig) * DrX[:, k]

    return MalliavinEnsemble(t[k_r], k_r, t, DrX, DrY, nabla, DrZ, warnings)


def z_from_malliavin(mall: MalliavinEnsemble):
    """Z_t proxy D_{t-dt} Y_t: the first column one step past r.

    Returns (t, Z_paths) where t = r + dt.
    """
    k = mall.r_index + 1
    if k >= mall.t_grid.size:
        raise PreconditionError("no grid time strictly after r")
    return float(mall.t_grid[k]), mall.DrY[:, k]


@dataclass
class SecondMalliavinResult:
    r: float
    s: float
    t_grid: np.ndarray
    D2Y: np.ndarray      # (n_paths, n_steps+1), NaN before max(r,s)
    D2X: np.ndarray
    DrZ: np.ndarray      # limit s -> t of D2_{r,s} Y_t, valid for t >= r


def second_malliavin(spec: ModelSpec, sol_u: GridSolution,
                     sol_uprime: Optional[GridSolution], ens: PathEnsemble,
                     r: float, s: float) -> SecondMalliavinResult:
    """Second Malliavin derivative D^2_{r,s} Y and the D_r Z limit.

    Uses the chain-rule identity D^2 Y_t = u_x D^2 X_t + u_xx D_r X_t D_s X_t;
    D^2 X solves the differentiated variational equation (identically zero for
    additive noise).  The limit s -> t of D^2_{r,s} Y_t supplies D_r Z_t as
    (u_x sigma_x + u_xx sigma) D_r X_t.
    """
    if sol_uprime is None:
        raise PreconditionError("second_malliavin requires the u' grid (u_xx source)")
    k_r, k_s = ens.index_of(r), ens.index_of(s)
    lo, hi = min(k_r, k_s), max(k_r, k_s)
    n, N, dt = ens.n_paths, ens.n_steps, ens.dt
    t = ens.t_grid
    nabla = variational_processes(spec, ens)
    DrX = malliavin_dx(spec, ens, nabla, k_r)
    DsX = malliavin_dx(spec, ens, nabla, k_s)
    bxx = spec.d("b_xx")
    sxx = spec.d("sigma_xx")
    sx = spec.d("sigma_x")

    D2X = np.full((n, N + 1), np.nan)
    # initial condition at the later differentiation time
    x_hi = ens.X[:, hi]
    D2X[:, hi] = np.asarray(sx(t[hi], x_hi), dtype=float) * \
        (DrX[:, hi] if hi == k_s else DsX[:, hi])
    for k in range(hi, N):
        xk = ens.X[:, k]
        cross = DrX[:, k] * DsX[:, k]
        drift = np.asarray(bxx(t[k], xk), dtype=float) * cross \
            + np.asarray(spec.d("b_x")(t[k], xk), dtype=float) * D2X[:, k]
        vol = np.asarray(sxx(t[k], xk), dtype=float) * cross \
            + np.asarray(sx(t[k], xk), dtype=float) * D2X[:, k]
        D2X[:, k + 1] = D2X[:, k] + drift * dt + vol * ens.dW[:, k]

    D2Y = np.full((n, N + 1), np.nan)
    DrZ = np.full((n, N + 1), np.nan)
    for k in range(hi, N + 1):
        xk = ens.X[:, k]
        ux = sol_uprime.eval(t[k], xk)
        uxx = sol_uprime.eval(t[k], xk, array=sol_uprime.u_x)
        D2Y[:, k] = ux * D2X[:, k] + uxx * DrX[:, k] * DsX[:, k]
    for k in range(k_r, N + 1):
        xk = ens.X[:, k]
        ux = sol_uprime.eval(t[k], xk)
        uxx = sol_uprime.eval(t[k], xk, array=sol_uprime.u_x)
        sig = np.asarray(spec.sigma(t[k], xk), dtype=float)
        sigx = np.asarray(sx(t[k], xk), dtype=float)
        DrZ[:, k] = (ux * sigx + uxx * sig) * DrX[:, k]
    return SecondMalliavinResult(t[k_r], t[k_s], t, D2Y, D2X, DrZ)


def malliavin_fd(spec: ModelSpec, ens: PathEnsemble, sol_u: GridSolution,
                 r: float, t: float, eps: float = 1e-4) -> np.ndarray:
    """Brute-force Malliavin derivative by perturbing one Brownian increment.

    Bumps dW at the step starting at r by +/- eps on every path, re-runs the
    Euler forward recursion, and differences Y_t = u(t, X_t).  Independent of
    the linear-BSDE weight route by construction.
    """
    k_r, k_t = ens.index_of(r), ens.index_of(t)
    if k_t <= k_r:
        raise PreconditionError("need t strictly after r (the bumped increment must act)")
    out = []
    for sign in (+1.0, -1.0):
        X = ens.X[:, k_r].copy()
        for k in range(k_r, k_t):
            tk = ens.t_grid[k]
            dw = ens.dW[:, k] + (sign * eps if k == k_r else 0.0)
            X = X + np.asarray(spec.b(tk, X), dtype=float) * ens.dt \
                + np.asarray(spec.sigma(tk, X), dtype=float) * dw
        out.append(sol_u.eval(ens.t_grid[k_t], X))
    return (out[0] - out[1]) / (2.0 * eps)
