"""Monte Carlo engine for the coupled state/regime dynamics.

The regime chain rides a unit-rate Poisson clock (the mark measure has
total mass one), so jump times are drawn exactly as exponential
inter-arrivals and merged into the Euler grid as extra nodes.  Between
nodes X follows an Euler-Maruyama update under the current regime; at a
jump time X is first diffused to the jump time and only then is the
regime updated from the mark, evaluated at the post-diffusion state.

Randomness is organized as counter-based per-path streams: path p of a
run with seed s draws from ``Philox(key=[s, p])``, consuming, in order,
its jump inter-arrival times, one uniform per in-horizon jump (mapped
through the mark CDF), and one standard normal per sub-interval of its
merged grid.  Ensembles are therefore order-independent across paths
and bit-reproducible for a fixed seed.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .fields import FeedbackStrategy

_MAX_JUMP_DRAWS = 4096


def path_stream(seed, path_index):
    """Generator for the (seed, path_index) counter-based stream."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(path_index)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ControlledDynamics:
    """Scalar controlled drift/diffusion pair with m regimes.

    ``drift`` and ``diffusion`` must be vectorized: they receive s (scalar
    or array), x (array), a regime label i in 1..m, and u of shape
    (len(x), control_dim), and return arrays shaped like x.
    """

    drift: callable
    diffusion: callable
    m: int
    control_dim: int = 1
    lipschitz: float = 10.0
    u0: tuple = (0.0,)

    def validate(self, times=(0.0,)):
        """Spot-check |b(s,0,i,u0)| + |sigma(s,0,i,u0)| <= L."""
        u = np.asarray(self.u0, dtype=float).reshape(1, -1)
        x = np.zeros(1)
        for s in times:
            for i in range(1, self.m + 1):
                b = float(np.asarray(self.drift(s, x, i, u)).ravel()[0])
                sg = float(np.asarray(self.diffusion(s, x, i, u)).ravel()[0])
                if not np.isfinite(b) or not np.isfinite(sg):
                    raise ConfigError(f"coefficients not finite at (s={s}, x=0, i={i})")
                if abs(b) + abs(sg) > self.lipschitz:
                    raise ConfigError(
                        f"|b| + |sigma| = {abs(b) + abs(sg):g} at (s={s}, x=0, i={i}) "
                        f"exceeds the declared Lipschitz constant {self.lipschitz:g}")


@dataclass
class JumpRecord:
    time: float
    mark: float
    regime_from: int
    regime_to: int
    state: float


@dataclass
class Path:
    """One sampled trajectory on the merged (Euler + jump) grid."""

    times: np.ndarray
    states: np.ndarray
    regimes: np.ndarray
    jumps: list
    seed: int
    path_index: int

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t,X,alpha\n")
            for t, x, a in zip(self.times, self.states, self.regimes):
                fh.write(f"{float(t)!r},{float(x)!r},{int(a)}\n")

    def jump_log(self):
        return [
            {"time": j.time, "mark": j.mark, "from": j.regime_from,
             "to": j.regime_to, "state": j.state}
            for j in self.jumps
        ]


@dataclass
class EnsembleResult:
    nodes: np.ndarray
    state_T: np.ndarray
    regime_T: np.ndarray
    n_jumps: np.ndarray
    states: np.ndarray = None     # (n_paths, n_nodes) if recorded
    regimes: np.ndarray = None
    jumps: list = field(default_factory=list)


def _as_policy(policy, control_dim=1):
    """Normalize policies to f(s, x, i) -> (len(x), control_dim)."""
    if policy is None:
        const = np.zeros(control_dim)
        policy = const
    if isinstance(policy, FeedbackStrategy):
        strat = policy

        def f(s, x, i):
            return strat.at_times(s, x, i) if np.ndim(s) else strat(s, x, i)

        return f
    if isinstance(policy, (int, float, tuple, list, np.ndarray)):
        const = np.atleast_1d(np.asarray(policy, dtype=float))

        def f(s, x, i):
            return np.broadcast_to(const, (len(np.atleast_1d(x)), const.size)).copy()

        return f
    raw = policy

    def f(s, x, i):
        out = np.asarray(raw(s, x, i), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out

    return f


def _pregenerate(seed, path_indices, t0, t_end, n_steps, with_jumps):
    """Draw each path's noise in the canonical order; pad across the chunk."""
    horizon = t_end - t0
    n = len(path_indices)
    jump_times = []
    mark_u = []
    max_j = 0
    streams = [path_stream(seed, p) for p in path_indices]
    if with_jumps:
        for g in streams:
            cum = np.cumsum(g.standard_exponential(8))
            while cum[-1] <= horizon:
                if len(cum) >= _MAX_JUMP_DRAWS:
                    raise NumericError("jump count cap exceeded; intensity is fixed "
                                       "to one so this indicates a horizon misuse")
                cum = np.concatenate([cum, cum[-1] + np.cumsum(g.standard_exponential(8))])
            jt = t0 + cum[cum <= horizon]
            jump_times.append(jt)
            mark_u.append(g.random(len(jt)))
            max_j = max(max_j, len(jt))
    else:
        jump_times = [np.empty(0)] * n
        mark_u = [np.empty(0)] * n
    jt_pad = np.full((n, max_j + 1), np.inf)
    mu_pad = np.zeros((n, max_j + 1))
    n_jumps = np.zeros(n, dtype=np.int64)
    for k, (jt, mu) in enumerate(zip(jump_times, mark_u)):
        jt_pad[k, :len(jt)] = jt
        mu_pad[k, :len(mu)] = mu
        n_jumps[k] = len(jt)
    normals = np.zeros((n, n_steps + max_j + 1))
    for k, g in enumerate(streams):
        need = n_steps + n_jumps[k]
        normals[k, :need] = g.standard_normal(need)
    return jt_pad, mu_pad, n_jumps, normals


def _em_update(dynamics, policy, s, x, alpha, dt, z):
    """One Euler-Maruyama sub-step for per-path arrays (s may be an array)."""
    out = x.copy()
    sqdt = np.sqrt(dt)
    for lab in range(1, dynamics.m + 1):
        mask = alpha == lab
        if not np.any(mask):
            continue
        ss = s[mask] if np.ndim(s) else s
        u = policy(ss, x[mask], lab)
        b = np.asarray(dynamics.drift(ss, x[mask], lab, u), dtype=float)
        sg = np.asarray(dynamics.diffusion(ss, x[mask], lab, u), dtype=float)
        out[mask] = x[mask] + b * dt[mask] + sg * sqdt[mask] * z[mask]
    return out


def simulate_ensemble(dynamics, geometry, levy, init, policy, h, t_end, n_paths,
                      seed, record_nodes=False, collect_jumps=False,
                      node_hook=None, chunk_size=8192, first_path_index=0):
    """Simulate ``n_paths`` paths of (X, alpha) from ``init = (t0, x0, i0)``.

    ``h`` is the base Euler step (snapped so the horizon is an integer
    number of steps); jump times are inserted as extra nodes.  ``x0`` and
    ``i0`` may be scalars or per-path arrays.  ``node_hook(k, s, X, alpha,
    lo, hi)`` is called after every base node with the chunk's global
    path range [lo, hi).
    """
    t0, x0, i0 = init
    if h <= 0:
        raise ConfigError("step h must be positive")
    if t_end <= t0:
        raise ConfigError("empty simulation horizon")
    n_steps = max(1, int(round((t_end - t0) / h)))
    nodes = np.linspace(t0, t_end, n_steps + 1)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths,)).copy()
    i0 = np.broadcast_to(np.asarray(i0), (n_paths,)).astype(np.int64).copy()
    pol = _as_policy(policy, dynamics.control_dim)
    with_jumps = geometry is not None

    res = EnsembleResult(nodes=nodes,
                         state_T=np.empty(n_paths),
                         regime_T=np.empty(n_paths, dtype=np.int64),
                         n_jumps=np.zeros(n_paths, dtype=np.int64))
    if record_nodes:
        res.states = np.empty((n_paths, n_steps + 1))
        res.regimes = np.empty((n_paths, n_steps + 1), dtype=np.int64)

    for lo in range(0, n_paths, chunk_size):
        hi = min(lo + chunk_size, n_paths)
        idx = np.arange(lo + first_path_index, hi + first_path_index)
        jt, mu, n_jumps, normals = _pregenerate(seed, idx, t0, t_end, n_steps, with_jumps)
        res.n_jumps[lo:hi] = n_jumps
        x = x0[lo:hi].copy()
        alpha = i0[lo:hi].copy()
        n = hi - lo
        ptr = np.zeros(n, dtype=np.int64)      # next normal to consume
        jptr = np.zeros(n, dtype=np.int64)     # next jump to process
        tcur = np.full(n, t0)
        if record_nodes:
            res.states[lo:hi, 0] = x
            res.regimes[lo:hi, 0] = alpha
        if node_hook is not None:
            node_hook(0, t0, x, alpha, lo, hi)
        rng_rows = np.arange(n)
        for k in range(n_steps):
            t_next = nodes[k + 1]
            while True:
                jnext = jt[rng_rows, jptr]
                active = jnext <= t_next
                if not np.any(active):
                    break
                sub = np.where(active)[0]
                s_jump = jnext[sub]
                dt = s_jump - tcur[sub]
                move = dt > 0
                if np.any(move):
                    mv = sub[move]
                    z = normals[mv, ptr[mv]]
                    x[mv] = _em_update(dynamics, pol, tcur[mv], x[mv], alpha[mv],
                                       dt[move], z)
                    ptr[mv] += 1
                theta = levy.sample_from_uniform(mu[sub, jptr[sub]])
                new_alpha = geometry.mark_to_jump_array(x[sub], alpha[sub], theta)
                if collect_jumps:
                    for r, srow in enumerate(sub):
                        if new_alpha[r] != alpha[srow]:
                            res.jumps.append(JumpRecord(
                                time=float(s_jump[r]), mark=float(theta[r]),
                                regime_from=int(alpha[srow]), regime_to=int(new_alpha[r]),
                                state=float(x[srow])))
                alpha[sub] = new_alpha
                tcur[sub] = s_jump
                jptr[sub] += 1
            dt = t_next - tcur
            move = dt > 0
            if np.any(move):
                mv = np.where(move)[0]
                z = normals[mv, ptr[mv]]
                x[mv] = _em_update(dynamics, pol, tcur[mv], x[mv], alpha[mv],
                                   dt[move], z)
                ptr[mv] += 1
            tcur[:] = t_next
            if not np.all(np.isfinite(x)):
                raise NumericError(f"state blew up at step {k + 1} (t={t_next:g})")
            if record_nodes:
                res.states[lo:hi, k + 1] = x
                res.regimes[lo:hi, k + 1] = alpha
            if node_hook is not None:
                node_hook(k + 1, t_next, x, alpha, lo, hi)
        res.state_T[lo:hi] = x
        res.regime_T[lo:hi] = alpha
    return res


def simulate_path(dynamics, geometry, levy, init, policy, h, t_end, seed,
                  path_index=0):
    """Single trajectory with the full merged grid and jump log."""
    res = simulate_ensemble(dynamics, geometry, levy, init, policy, h, t_end,
                            n_paths=1, seed=seed, record_nodes=True,
                            collect_jumps=True, first_path_index=path_index)
    # merge the base-grid record with the jump records
    times = list(res.nodes)
    states = list(res.states[0])
    regimes = list(res.regimes[0])
    for j in res.jumps:
        pos = int(np.searchsorted(times, j.time))
        times.insert(pos, j.time)
        states.insert(pos, j.state)
        regimes.insert(pos, j.regime_to)
        # nodes after the jump inside the same step already carry the new regime
    return Path(times=np.asarray(times), states=np.asarray(states),
                regimes=np.asarray(regimes, dtype=np.int64),
                jumps=res.jumps, seed=seed, path_index=path_index)


@dataclass
class RateEstimate:
    rate: float
    se: float
    n_transitions: int
    n_paths: int
    anomaly: bool = False


def estimate_transition_rate(dynamics, geometry, levy, x, i, j, ds, n_paths,
                             seed, q_theory=None):
    """Empirical frequency of alpha(t0 + ds) = j over paths started at (x, i).

    Returns the frequency divided by ds together with its binomial
    standard error.  If ``q_theory`` is supplied and no transition is
    seen although q*ds*n_paths > 25, the estimate is flagged anomalous.
    """
    if j == i:
        raise ConfigError("transition rate needs j != i")
    res = simulate_ensemble(dynamics, geometry, levy, (0.0, x, i), None, ds,
                            ds, n_paths, seed)
    hits = int(np.sum(res.regime_T == j))
    p = hits / n_paths
    rate = p / ds
    # Laplace-smoothed binomial SE so small counts do not zero it out
    ps = (hits + 1.0) / (n_paths + 2.0)
    se = float(np.sqrt(ps * (1 - ps) / n_paths) / ds)
    anomaly = bool(hits == 0 and q_theory is not None and q_theory * ds * n_paths > 25)
    return RateEstimate(rate=rate, se=se, n_transitions=hits, n_paths=n_paths,
                        anomaly=anomaly)


def coupled_pair_divergence(dynamics, geometry, levy, strategy, xi1, xi2, i,
                            n_paths, seed, h, t_end, t0=0.0, chunk_size=8192):
    """Common-random-number coupling of two starts (xi1, i) and (xi2, i).

    Both paths consume identical jump times, marks, and Brownian
    increments.  Returns (P(regime histories split by T),
    E[sup_{s<=T} |X1 - X2|^2 on full agreement]).
    """
    if h <= 0 or t_end <= t0:
        raise ConfigError("need h > 0 and t_end > t0")
    n_steps = max(1, int(round((t_end - t0) / h)))
    nodes = np.linspace(t0, t_end, n_steps + 1)
    pol = _as_policy(strategy, dynamics.control_dim)
    split = 0
    sup_sum = 0.0
    for lo in range(0, n_paths, chunk_size):
        hi = min(lo + chunk_size, n_paths)
        idx = np.arange(lo, hi)
        jt, mu, _nj, normals = _pregenerate(seed, idx, t0, t_end, n_steps,
                                            geometry is not None)
        n = hi - lo
        x1 = np.full(n, float(xi1))
        x2 = np.full(n, float(xi2))
        a1 = np.full(n, int(i), dtype=np.int64)
        a2 = a1.copy()
        agree = np.ones(n, dtype=bool)
        supsq = (x1 - x2) ** 2
        ptr = np.zeros(n, dtype=np.int64)
        jptr = np.zeros(n, dtype=np.int64)
        tcur = np.full(n, t0)
        rows = np.arange(n)
        for k in range(n_steps):
            t_next = nodes[k + 1]
            while True:
                jnext = jt[rows, jptr]
                active = jnext <= t_next
                if not np.any(active):
                    break
                sub = np.where(active)[0]
                s_jump = jnext[sub]
                dt = s_jump - tcur[sub]
                move = dt > 0
                if np.any(move):
                    mv = sub[move]
                    z = normals[mv, ptr[mv]]
                    x1[mv] = _em_update(dynamics, pol, tcur[mv], x1[mv], a1[mv],
                                        dt[move], z)
                    x2[mv] = _em_update(dynamics, pol, tcur[mv], x2[mv], a2[mv],
                                        dt[move], z)
                    ptr[mv] += 1
                theta = levy.sample_from_uniform(mu[sub, jptr[sub]])
                a1[sub] = geometry.mark_to_jump_array(x1[sub], a1[sub], theta)
                a2[sub] = geometry.mark_to_jump_array(x2[sub], a2[sub], theta)
                agree[sub] &= a1[sub] == a2[sub]
                tcur[sub] = s_jump
                jptr[sub] += 1
                supsq[sub] = np.maximum(supsq[sub], (x1[sub] - x2[sub]) ** 2)
            dt = t_next - tcur
            move = dt > 0
            if np.any(move):
                mv = np.where(move)[0]
                z = normals[mv, ptr[mv]]
                x1[mv] = _em_update(dynamics, pol, tcur[mv], x1[mv], a1[mv],
                                    dt[move], z)
                x2[mv] = _em_update(dynamics, pol, tcur[mv], x2[mv], a2[mv],
                                    dt[move], z)
                ptr[mv] += 1
            tcur[:] = t_next
            supsq = np.maximum(supsq, (x1 - x2) ** 2)
        split += int(np.sum(~agree))
        sup_sum += float(np.sum(supsq[agree]))
    return split / n_paths, sup_sum / n_paths
