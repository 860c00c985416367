"""Regime-switching consumption/investment example with power utility.

Wealth follows dX = [b(alpha) u - c] ds + sigma(alpha) u dW for a
two-point (or general finite) market-mode chain with constant generator
Q, and the payoff E[ int g(tau,s) c(s)^gamma ds + h(tau) X(T)^gamma ] is
*maximized*.  Everything of interest reduces under the x^gamma ansatz to
ODE systems for phi(s, i):

* time-consistent weights  -> a single backward system (phi_tc),
* anchored (pre-committed) -> the same system with g(tau,.), h(tau),
* equilibrium              -> a two-time family phi(tau, s, i) coupled
  through its own diagonal, solved by fixed-point iteration,
* any proportional strategy (u, c) = (theta x, kappa x) -> a linear
  system, which prices arbitrary such strategies exactly.

The optimal/equilibrium investment fraction is b(i)/((1-gamma) sigma(i)^2)
for every variant; only the consumption rate distinguishes them.

Sign convention: this module works with the natural maximization
objects.  The PDE core minimizes, so its adapter (see models.py) negates
values and data once at the boundary.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (ConfigError, ConvergenceError, DomainError, NumericError,
                     ResolutionError)
from .sde import ControlledDynamics, simulate_ensemble


@dataclass
class MertonSpec:
    """Market parameters and anchored weights; m regimes."""

    b: np.ndarray                 # appreciation rate per regime
    sigma: np.ndarray             # volatility per regime
    gamma: float                  # risk exponent in (0, 1)
    g: callable                   # consumption weight g(tau, s) > 0, vectorized
    h: callable                   # bequest weight h(tau) > 0, vectorized
    q: np.ndarray                 # constant generator matrix (m, m)
    T: float = 1.0
    name: str = "merton"

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.m = len(self.b)
        if np.any(self.sigma <= 0):
            raise ConfigError("volatilities must be positive")
        if not 0 < self.gamma < 1:
            raise ConfigError("risk exponent gamma must lie in (0, 1)")
        if self.q.shape != (self.m, self.m):
            raise ConfigError("generator shape must match the regime count")
        if np.max(np.abs(self.q.sum(axis=1))) > 1e-12:
            raise ConfigError("generator rows must sum to zero")
        if np.any(self.q - np.diag(np.diag(self.q)) < 0):
            raise ConfigError("generator off-diagonals must be nonnegative")
        taus = np.linspace(0, self.T, 5)
        if np.any(np.asarray(self.h(taus)) <= 0):
            raise ConfigError("bequest weight must be positive")
        for tau in taus:
            ss = np.linspace(tau, self.T, 5)
            # zero weight is allowed (no-consumption closed forms); negative is not
            if np.any(np.asarray(self.g(tau, ss)) < 0):
                raise ConfigError("consumption weight must be nonnegative")

    def drift_gain(self):
        """gamma b_i^2 / (2 (1-gamma) sigma_i^2) per regime."""
        return self.gamma * self.b**2 / (2 * (1 - self.gamma) * self.sigma**2)

    def investment_fraction(self):
        """Optimal investment fraction b_i / ((1-gamma) sigma_i^2), all variants."""
        return self.b / ((1 - self.gamma) * self.sigma**2)


@dataclass
class PhiSolution:
    """phi tables on a shared time grid (NaN where a row is undefined)."""

    times: np.ndarray
    tc: np.ndarray = None          # (n, m)
    pre: dict = field(default_factory=dict)    # tau -> (n, m), NaN before tau
    eq: np.ndarray = None          # (n, n, m) triangular rows
    eq_diag: np.ndarray = None     # (n, m)
    iterations: list = field(default_factory=list)


def _rk4_backward(times, terminal, rhs, k_stop=0):
    """Integrate y' = rhs(s, y) from times[-1] down to times[k_stop]."""
    n = len(times)
    out = np.full((n,) + np.shape(terminal), np.nan)
    out[-1] = terminal
    y = np.asarray(terminal, dtype=float).copy()
    for k in range(n - 1, k_stop, -1):
        s_hi, s_lo = times[k], times[k - 1]
        dt = s_lo - s_hi  # negative
        k1 = rhs(s_hi, y)
        k2 = rhs(s_hi + dt / 2, y + dt / 2 * k1)
        k3 = rhs(s_hi + dt / 2, y + dt / 2 * k2)
        k4 = rhs(s_lo, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.any(y <= 0) or not np.all(np.isfinite(y)):
            raise NumericError(
                f"phi integration left the positive cone at s={s_lo:g}; "
                f"the weights do not define a valid problem")
        out[k - 1] = y
    return out


def solve_time_consistent(spec, times):
    """Backward system for the anchor-free weights; phi_i(T) = h."""
    A = spec.drift_gain()
    gam = spec.gamma

    def rhs(s, y):
        gs = float(spec.g(s, s))
        return -(A * y + (1 - gam) * gs ** (1 / (1 - gam)) * y ** (gam / (gam - 1))
                 + y @ spec.q.T)

    hT = float(spec.h(spec.T)) * np.ones(spec.m)
    return _rk4_backward(np.asarray(times, dtype=float), hT, rhs)


def solve_precommitted(spec, tau, times):
    """Anchored system with weights g(tau, .), h(tau); defined on s >= tau."""
    times = np.asarray(times, dtype=float)
    if not 0 <= tau < spec.T:
        raise DomainError("anchor tau must lie in [0, T)")
    k_stop = int(np.searchsorted(times, tau - 1e-12))
    A = spec.drift_gain()
    gam = spec.gamma

    def rhs(s, y):
        gs = float(spec.g(tau, s))
        return -(A * y + (1 - gam) * gs ** (1 / (1 - gam)) * y ** (gam / (gam - 1))
                 + y @ spec.q.T)

    hT = float(spec.h(tau)) * np.ones(spec.m)
    return _rk4_backward(times, hT, rhs, k_stop=k_stop)


def solve_proportional_cost(spec, tau, theta, kappa, times, terminal=None,
                            k_stop=0):
    """Value of an arbitrary proportional strategy (theta x, kappa x).

    ``theta(s)`` and ``kappa(s)`` return per-regime arrays; the payoff is
    anchored at ``tau``.  This is a linear system, integrated with the
    same scheme as the optimal variants, and serves as the independent
    price for suboptimal feedback rules.
    """
    times = np.asarray(times, dtype=float)
    gam = spec.gamma

    def rhs(s, y):
        th = np.asarray(theta(s), dtype=float)
        ka = np.asarray(kappa(s), dtype=float)
        lin = gam * (spec.b * th - ka) + 0.5 * spec.sigma**2 * th**2 * gam * (gam - 1)
        return -(lin * y + y @ spec.q.T + float(spec.g(tau, s)) * ka**gam)

    if terminal is None:
        terminal = float(spec.h(tau)) * np.ones(spec.m)
    return _rk4_backward(times, np.asarray(terminal, dtype=float), rhs,
                         k_stop=k_stop)


def solve_equilibrium_ode(spec, times, tol=1e-12, max_iter=200):
    """Two-time family coupled through its own diagonal.

    Fixed point on d(s, i) = phi(s, s, i): rows are integrated backward
    with the diagonal quantities read from the current d (cubic in s),
    then d is replaced by the new diagonal; damping 0.5 kicks in when
    the diagonal change grows.  Returns a PhiSolution with the full
    triangular table, the diagonal, and the per-iteration changes.
    """
    times = np.asarray(times, dtype=float)
    n = len(times)
    A = spec.drift_gain()
    gam = spec.gamma
    d = np.asarray(spec.h(times), dtype=float)[:, None] * np.ones((n, spec.m))
    log = []
    prev_change = np.inf
    for sweep in range(max_iter):
        splines = [CubicSpline(times, d[:, i]) for i in range(spec.m)]

        def ratio_pow(s):
            phi_ss = np.array([float(sp(s)) for sp in splines])
            if np.any(phi_ss <= 0):
                raise NumericError("diagonal phi left the positive cone")
            r = float(spec.g(s, s)) / phi_ss
            return r ** (1 / (1 - gam)), r ** (gam / (1 - gam))

        phi = np.full((n, n, spec.m), np.nan)
        taus = times.copy()
        h_rows = np.asarray(spec.h(taus), dtype=float)
        phi[:, -1, :] = h_rows[:, None]
        y = phi[:, -1, :].copy()

        def rhs(s, y_rows, k_act):
            # rows 0..k_act-1 all have tau <= s, so g stays on its domain
            r1, r2 = ratio_pow(s)
            gres = np.asarray(spec.g(taus[:k_act], s), dtype=float)[:, None]
            return -(A[None, :] * y_rows - gam * y_rows * r1[None, :]
                     + gres * r2[None, :] + y_rows @ spec.q.T)

        for k in range(n - 1, 0, -1):
            s_hi, s_lo = times[k], times[k - 1]
            dt = s_lo - s_hi
            ya = y[:k]
            k1 = rhs(s_hi, ya, k)
            k2 = rhs(s_hi + dt / 2, ya + dt / 2 * k1, k)
            k3 = rhs(s_hi + dt / 2, ya + dt / 2 * k2, k)
            k4 = rhs(s_lo, ya + dt * k3, k)
            y[:k] = ya + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if np.any(y[:k] <= 0) or not np.all(np.isfinite(y[:k])):
                raise NumericError("equilibrium phi rows left the positive cone")
            phi[:k, k - 1, :] = y[:k]
        new_d = phi[np.arange(n), np.arange(n)]
        change = float(np.max(np.abs(new_d - d)))
        log.append(change)
        if change > prev_change:
            d = 0.5 * (d + new_d)
        else:
            d = new_d
        prev_change = change
        if change < tol:
            sol = PhiSolution(times=times, eq=phi, eq_diag=d, iterations=log)
            return sol
    raise ConvergenceError(
        f"equilibrium phi fixed point did not reach {tol:g} in {max_iter} sweeps",
        history=log)


@dataclass
class PartitionPhi:
    """ODE mirror of the N-player cycles under the x^gamma ansatz."""

    times: np.ndarray
    knots: np.ndarray
    value: np.ndarray            # (n, m): concatenated player values
    rows: dict = field(default_factory=dict)   # player k -> (n, m), NaN before t_{k-1}
    kappa: np.ndarray = None     # (n, m) consumption rate of the cycle strategy

    def consumption_rate(self):
        times, kappa = self.times, self.kappa

        def fn(s):
            out = np.empty(kappa.shape[1])
            for i in range(kappa.shape[1]):
                out[i] = np.interp(s, times, kappa[:, i])
            return out

        return fn


def partition_phi(spec, knots, times):
    """Mirror the whole partition-cycle construction at ODE level.

    Knots must be nodes of ``times``.  Cycle k first prices the already
    built strategy on [t_k, T] under the anchor t_{k-1} (a linear
    system), then solves the anchored optimal system on [t_{k-1}, t_k]
    with that terminal, and extends the strategy.  Integration proceeds
    interval by interval, so no step straddles a strategy kink.
    """
    times = np.asarray(times, dtype=float)
    knots = np.asarray(knots, dtype=float)
    n = len(times)
    N = len(knots) - 1
    kidx = []
    for t in knots:
        j = int(np.argmin(np.abs(times - t)))
        if abs(times[j] - t) > 1e-9:
            raise ConfigError(f"partition knot {t:g} is not a time-grid node")
        kidx.append(j)
    A = spec.drift_gain()
    gam = spec.gamma
    frac = spec.investment_fraction()

    kappa_tab = np.full((n, spec.m), np.nan)
    value = np.full((n, spec.m), np.nan)
    rows = {}
    interval_kappa = [None] * N   # seg -> s -> (m,) consumption rate

    def hjb_rhs(tau):
        def rhs(s, y):
            gs = float(spec.g(tau, s))
            return -(A * y + (1 - gam) * gs ** (1 / (1 - gam))
                     * y ** (gam / (gam - 1)) + y @ spec.q.T)
        return rhs

    for k in range(N, 0, -1):
        a_idx, b_idx = kidx[k - 1], kidx[k]
        tau = knots[k - 1]
        tail = np.full((n, spec.m), np.nan)
        if k < N:
            # price the built strategy on [t_k, T] under this player's anchor
            y = float(spec.h(tau)) * np.ones(spec.m)
            for seg in range(N - 1, k - 1, -1):
                lo, hi = kidx[seg], kidx[seg + 1]

                def rhs(s, yy, _ka=interval_kappa[seg]):
                    ka = _ka(s)
                    lin = (gam * (spec.b * frac - ka)
                           + 0.5 * spec.sigma**2 * frac**2 * gam * (gam - 1))
                    return -(lin * yy + yy @ spec.q.T
                             + float(spec.g(tau, s)) * ka**gam)

                block = _rk4_backward(times[lo:hi + 1], y, rhs)
                tail[lo:hi + 1] = block
                y = block[0]
            terminal = tail[b_idx]
        else:
            terminal = float(spec.h(tau)) * np.ones(spec.m)
        # anchored optimal system on the player's own interval
        seg_times = times[a_idx:b_idx + 1]
        own = _rk4_backward(seg_times, terminal, hjb_rhs(tau))
        row = np.full((n, spec.m), np.nan)
        row[a_idx:b_idx + 1] = own
        if k < N:
            row[b_idx:] = tail[b_idx:]
        rows[k] = row
        value[a_idx:b_idx + 1] = own
        if k < N:
            value[b_idx] = rows[k + 1][b_idx]   # right-continuous at knots

        splines = [CubicSpline(seg_times, own[:, i]) for i in range(spec.m)]

        def seg_kappa(s, _sp=splines, _tau=tau):
            phi = np.array([max(float(sp(s)), 1e-300) for sp in _sp])
            return (float(spec.g(_tau, s)) / phi) ** (1 / (1 - gam))

        interval_kappa[k - 1] = seg_kappa
        hi_fill = b_idx + 1 if k == N else b_idx
        for j in range(a_idx, hi_fill):
            kappa_tab[j] = seg_kappa(times[j])
    return PartitionPhi(times=times, knots=knots, value=value, rows=rows,
                        kappa=kappa_tab)


def strategies(spec, phi_ss, s, x, i, g_weight=None):
    """Closed-form (investment, consumption) pair at one point.

    ``phi_ss`` is the diagonal value phi(s, s, i) for the equilibrium
    variant; feeding an anchored phi(tau; s, i) with ``g_weight``
    g(tau, s) gives the pre-committed pair, and the anchor-free data the
    time-consistent one.  The investment leg is the same in every
    variant.
    """
    if x <= 0:
        raise DomainError("wealth must be positive")
    if g_weight is None:
        g_weight = float(spec.g(s, s))
    u = spec.investment_fraction()[i - 1] * x
    c = (g_weight / phi_ss) ** (1 / (1 - spec.gamma)) * x
    return u, c


strategy_pair = strategies


def proportional_policy(spec, kappa):
    """Policy callable (s, x, i) -> (u, c) with u, c proportional to x."""
    frac = spec.investment_fraction()

    def policy(s, x, i):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((x.shape[0], 2))
        out[:, 0] = frac[i - 1] * x
        out[:, 1] = np.asarray(kappa(s))[..., i - 1] * x if np.ndim(kappa(s)) \
            else float(kappa(s)) * x
        return out

    return policy


def equilibrium_policy(spec, phi_solution):
    """Feedback (u, c) built from the equilibrium diagonal."""
    times = phi_solution.times
    splines = [CubicSpline(times, phi_solution.eq_diag[:, i])
               for i in range(spec.m)]
    frac = spec.investment_fraction()
    gam = spec.gamma

    def policy(s, x, i):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        s_arr = np.broadcast_to(np.asarray(s, dtype=float), x.shape)
        phi_ss = splines[i - 1](s_arr)
        gss = np.asarray(spec.g(s_arr, s_arr), dtype=float)
        out = np.empty((x.shape[0], 2))
        out[:, 0] = frac[i - 1] * x
        out[:, 1] = (gss / phi_ss) ** (1 / (1 - gam)) * x
        return out

    return policy


def anchored_policy(spec, tau, phi_rows, times):
    """Feedback (u, c) from an anchored row phi(tau; s, i) (pre-committed)."""
    valid = ~np.isnan(phi_rows[:, 0])
    splines = [CubicSpline(times[valid], phi_rows[valid, i])
               for i in range(spec.m)]
    frac = spec.investment_fraction()
    gam = spec.gamma

    def policy(s, x, i):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        s_arr = np.broadcast_to(np.asarray(s, dtype=float), x.shape)
        phi_s = splines[i - 1](s_arr)
        gts = np.asarray(spec.g(tau, s_arr), dtype=float)
        out = np.empty((x.shape[0], 2))
        out[:, 0] = frac[i - 1] * x
        out[:, 1] = (gts / phi_s) ** (1 / (1 - gam)) * x
        return out

    return policy


def wealth_dynamics(spec):
    """ControlledDynamics for dX = (b u - c) ds + sigma u dW."""
    b, sg = spec.b, spec.sigma

    def drift(s, x, i, u):
        return b[i - 1] * u[:, 0] - u[:, 1]

    def diffusion(s, x, i, u):
        return sg[i - 1] * u[:, 0]

    return ControlledDynamics(drift=drift, diffusion=diffusion, m=spec.m,
                              control_dim=2, lipschitz=50.0, u0=(0.0, 0.0))


def monte_carlo_payoff(spec, policy, t, x, i, n_paths, seed, h_step,
                       geometry, levy):
    """Simulated payoff of a proportional policy against the anchored weights.

    Returns (estimate, standard error) of
    E[int_t^T g(t,s) c(s)^gamma ds + h(t) X(T)^gamma] with the running
    integral accumulated by the trapezoid rule on the base grid.
    """
    dyn = wealth_dynamics(spec)
    gam = spec.gamma
    acc = np.zeros(n_paths)
    prev = np.zeros(n_paths)
    state = {"s_prev": t}

    def hook(k, s, xs, alphas, lo, hi):
        if np.any(xs <= 0):
            raise ResolutionError(
                "wealth hit zero during simulation; use a smaller step h")
        integrand = np.empty(hi - lo)
        for lab in range(1, spec.m + 1):
            mask = alphas == lab
            if not np.any(mask):
                continue
            c = policy(s, xs[mask], lab)[:, 1]
            integrand[mask] = float(spec.g(t, s)) * c**gam
        if k == 0:
            prev[lo:hi] = integrand
            return
        ds = s - state["s_prev"]
        acc[lo:hi] += 0.5 * ds * (prev[lo:hi] + integrand)
        prev[lo:hi] = integrand

    # note: hooks run chunk by chunk; track the node spacing globally
    n_steps = max(1, int(round((spec.T - t) / h_step)))
    nodes = np.linspace(t, spec.T, n_steps + 1)

    def hook_with_time(k, s, xs, alphas, lo, hi):
        state["s_prev"] = nodes[k - 1] if k > 0 else t
        hook(k, s, xs, alphas, lo, hi)

    res = simulate_ensemble(dyn, geometry, levy, (t, x, i), policy, h_step,
                            spec.T, n_paths, seed, node_hook=hook_with_time)
    payoff = acc + float(spec.h(t)) * res.state_T**gam
    return float(np.mean(payoff)), float(np.std(payoff, ddof=1) / np.sqrt(n_paths))
