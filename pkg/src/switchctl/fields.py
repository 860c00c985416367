"""Grids and grid-backed fields shared by the PDE and simulation layers.

Regime labels are 1..m throughout the public API; the regime axis of
every array is the 0-based index ``label - 1``.  Value fields store
V[s_idx, x_idx, regime_idx] on a strictly increasing time grid; strategy
fields add a trailing control-component axis and interpolate bilinearly
in (s, x) with clamping to the control bounds.
"""

import json

import numpy as np

from .errors import ConfigError, DomainError

BC_EXTRAPOLATE = "extrapolate"
BC_DIRICHLET = "dirichlet"


class SpatialGrid:
    """Uniform 1-D grid on [x_min, x_max] with a boundary-condition tag per edge."""

    def __init__(self, x_min, x_max, n_x, bc=(BC_EXTRAPOLATE, BC_EXTRAPOLATE),
                 buffer_frac=0.15):
        if n_x < 3:
            raise ConfigError("n_x must be at least 3")
        if not x_max > x_min:
            raise ConfigError("x_max must exceed x_min")
        self.x_min = float(x_min)
        self.x_max = float(x_max)
        self.n_x = int(n_x)
        self.dx = (self.x_max - self.x_min) / (self.n_x - 1)
        self.x = np.linspace(self.x_min, self.x_max, self.n_x)
        if isinstance(bc, str):
            bc = (bc, bc)
        for tag in bc:
            if tag not in (BC_EXTRAPOLATE, BC_DIRICHLET):
                raise ConfigError(f"unknown boundary tag '{tag}'")
        self.bc = tuple(bc)
        self.buffer_frac = float(buffer_frac)

    def interior_mask(self, buffer_frac=None):
        """Nodes at least ``buffer_frac`` of the width away from both edges."""
        frac = self.buffer_frac if buffer_frac is None else buffer_frac
        pad = frac * (self.x_max - self.x_min)
        return (self.x >= self.x_min + pad) & (self.x <= self.x_max - pad)

    def __eq__(self, other):
        return (isinstance(other, SpatialGrid) and self.n_x == other.n_x
                and self.x_min == other.x_min and self.x_max == other.x_max)


def time_grid(t0, t1, n_steps):
    """Uniform time grid with ``n_steps`` intervals from t0 to t1."""
    if not t1 > t0:
        raise ConfigError("time grid needs t1 > t0")
    if n_steps < 1:
        raise ConfigError("time grid needs at least one step")
    return np.linspace(float(t0), float(t1), int(n_steps) + 1)


def d1(values, dx, axis=-1):
    """First derivative, central inside, one-sided second order at edges."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    sl = _axis_slicer(v.ndim, axis)
    out[sl(slice(1, -1))] = (v[sl(slice(2, None))] - v[sl(slice(None, -2))]) / (2 * dx)
    out[sl(0)] = (-3 * v[sl(0)] + 4 * v[sl(1)] - v[sl(2)]) / (2 * dx)
    out[sl(-1)] = (3 * v[sl(-1)] - 4 * v[sl(-2)] + v[sl(-3)]) / (2 * dx)
    return out


def d2(values, dx, axis=-1):
    """Second derivative, central inside, one-sided second order at edges."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    sl = _axis_slicer(v.ndim, axis)
    out[sl(slice(1, -1))] = (
        v[sl(slice(2, None))] - 2 * v[sl(slice(1, -1))] + v[sl(slice(None, -2))]
    ) / dx**2
    out[sl(0)] = (2 * v[sl(0)] - 5 * v[sl(1)] + 4 * v[sl(2)] - v[sl(3)]) / dx**2
    out[sl(-1)] = (2 * v[sl(-1)] - 5 * v[sl(-2)] + 4 * v[sl(-3)] - v[sl(-4)]) / dx**2
    return out


def _axis_slicer(ndim, axis):
    axis = axis % ndim
    def sl(idx):
        out = [slice(None)] * ndim
        out[axis] = idx
        return tuple(out)
    return sl


def _bracket(nodes, value):
    """Index k and weight w with value = (1-w)*nodes[k] + w*nodes[k+1]."""
    if value < nodes[0] - 1e-12 or value > nodes[-1] + 1e-12:
        raise DomainError(f"query {value:g} outside grid [{nodes[0]:g}, {nodes[-1]:g}]")
    k = int(np.clip(np.searchsorted(nodes, value, side="right") - 1, 0, len(nodes) - 2))
    w = (value - nodes[k]) / (nodes[k + 1] - nodes[k])
    return k, float(np.clip(w, 0.0, 1.0))


class ValueField:
    """Grid values V[s_idx, x_idx, regime_idx] over a shared time grid."""

    def __init__(self, times, grid, values):
        self.times = np.asarray(times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("time grid must be strictly increasing")
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[:2] != (len(self.times), grid.n_x):
            raise ConfigError(
                f"field shape {self.values.shape} does not match grids "
                f"({len(self.times)}, {grid.n_x}, m)")
        self.m = self.values.shape[2]

    @classmethod
    def empty(cls, times, grid, m):
        return cls(times, grid, np.full((len(times), grid.n_x, m), np.nan))

    def copy(self):
        return ValueField(self.times.copy(), self.grid, self.values.copy())

    def time_index(self, s, tol=1e-9):
        k = int(np.argmin(np.abs(self.times - s)))
        if abs(self.times[k] - s) > tol:
            raise ConfigError(f"time {s:g} is not a node of the field's time grid")
        return k

    def at(self, s, x, i):
        """Bilinear interpolation in (s, x) for regime label i."""
        k, ws = _bracket(self.times, s)
        x = np.asarray(x, dtype=float)
        lo = np.interp(x, self.grid.x, self.values[k, :, i - 1])
        hi = np.interp(x, self.grid.x, self.values[k + 1, :, i - 1])
        return (1 - ws) * lo + ws * hi

    def dx(self):
        return d1(self.values, self.grid.dx, axis=1)

    def dxx(self):
        return d2(self.values, self.grid.dx, axis=1)

    def sup_diff(self, other, interior=None):
        """Sup-norm difference over an optional interior node mask."""
        diff = np.abs(self.values - other.values)
        if interior is not None:
            diff = diff[:, interior, :]
        return float(np.max(diff))

    def to_csv(self, path):
        """Long-format CSV: s, x, i, value. Regime labels are 1..m."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("s,x,i,value\n")
            for k, s in enumerate(self.times):
                for j, x in enumerate(self.grid.x):
                    for i in range(self.m):
                        fh.write(f"{float(s)!r},{float(x)!r},{i + 1},{float(self.values[k, j, i])!r}\n")

    def to_binary(self, path):
        """JSON header line + little-endian float64 dump (C order)."""
        header = {
            "kind": "value_field",
            "t0": self.times[0],
            "t1": self.times[-1],
            "n_t": len(self.times) - 1,
            "x_min": self.grid.x_min,
            "x_max": self.grid.x_max,
            "n_x": self.grid.n_x,
            "m": self.m,
            "shape": list(self.values.shape),
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(self.values.astype("<f8").tobytes(order="C"))

    @classmethod
    def from_binary(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            raw = fh.read()
        values = np.frombuffer(raw, dtype="<f8").reshape(header["shape"])
        grid = SpatialGrid(header["x_min"], header["x_max"], header["n_x"])
        times = time_grid(header["t0"], header["t1"], header["n_t"])
        return cls(times, grid, values.copy())


class FeedbackStrategy:
    """Grid-backed feedback map (s, x, i) -> control in U.

    Controls may be vector valued; ``values`` has shape
    (n_t, n_x, m, control_dim).  Interpolation is bilinear in (s, x) and
    the result is clamped componentwise to the control bounds.
    """

    def __init__(self, times, grid, values, bounds=None, names=None):
        self.times = np.asarray(times, dtype=float)
        self.grid = grid
        values = np.asarray(values, dtype=float)
        if values.ndim == 3:
            values = values[..., None]
        self.values = values
        self.m = values.shape[2]
        self.control_dim = values.shape[3]
        if bounds is None:
            bounds = [(-np.inf, np.inf)] * self.control_dim
        self.bounds = [(float(lo), float(hi)) for lo, hi in bounds]
        self.names = list(names) if names else [f"u{k}" for k in range(self.control_dim)]

    def __call__(self, s, x, i):
        """Control at (s, x-array, regime label i); shape (len(x), control_dim)."""
        k, ws = _bracket(self.times, s)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((x.shape[0], self.control_dim))
        for c in range(self.control_dim):
            lo = np.interp(x, self.grid.x, self.values[k, :, i - 1, c])
            hi = np.interp(x, self.grid.x, self.values[k + 1, :, i - 1, c])
            val = (1 - ws) * lo + ws * hi
            out[:, c] = np.clip(val, self.bounds[c][0], self.bounds[c][1])
        return out

    def at_times(self, s, x, i):
        """Like __call__ but with a per-point time array ``s``."""
        s = np.asarray(s, dtype=float)
        if s.ndim == 0:
            return self(float(s), x, i)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((x.shape[0], self.control_dim))
        ks = np.clip(np.searchsorted(self.times, s, side="right") - 1,
                     0, len(self.times) - 2)
        if np.any(s < self.times[0] - 1e-12) or np.any(s > self.times[-1] + 1e-12):
            raise DomainError("time query outside the strategy's time grid")
        for k in np.unique(ks):
            mask = ks == k
            w = (s[mask] - self.times[k]) / (self.times[k + 1] - self.times[k])
            w = np.clip(w, 0.0, 1.0)
            for c in range(self.control_dim):
                lo = np.interp(x[mask], self.grid.x, self.values[k, :, i - 1, c])
                hi = np.interp(x[mask], self.grid.x, self.values[k + 1, :, i - 1, c])
                out[mask, c] = np.clip((1 - w) * lo + w * hi,
                                       self.bounds[c][0], self.bounds[c][1])
        return out

    def node_values(self, k):
        """Clamped control values at time node k; shape (n_x, m, control_dim)."""
        out = self.values[k].copy()
        for c in range(self.control_dim):
            out[..., c] = np.clip(out[..., c], self.bounds[c][0], self.bounds[c][1])
        return out

    def sup_diff(self, other, interior=None):
        diff = np.abs(self.values - other.values)
        if interior is not None:
            diff = diff[:, interior]
        return float(np.max(diff))

    def to_csv(self, path):
        cols = ",".join(self.names)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"s,x,i,{cols}\n")
            for k, s in enumerate(self.times):
                for j, x in enumerate(self.grid.x):
                    for i in range(self.m):
                        vals = ",".join(repr(float(v)) for v in self.values[k, j, i])
                        fh.write(f"{float(s)!r},{float(x)!r},{i + 1},{vals}\n")


class TwoTimeField:
    """Triangular two-time field Theta[tau_idx, s_idx, x_idx, regime_idx].

    Rows share the single global time grid; row ``tau_idx`` is defined
    for s_idx >= tau_idx (NaN below the diagonal).  The diagonal
    Theta(s, s, x, i) is an exact array diagonal.
    """

    def __init__(self, times, grid, m):
        self.times = np.asarray(times, dtype=float)
        self.grid = grid
        self.m = m
        n_t = len(self.times)
        self.values = np.full((n_t, n_t, grid.n_x, m), np.nan)

    def row(self, tau_idx):
        """Row anchored at times[tau_idx] as a ValueField on [tau, T]."""
        return ValueField(self.times[tau_idx:], self.grid,
                          self.values[tau_idx, tau_idx:])

    def set_row(self, tau_idx, values):
        self.values[tau_idx, tau_idx:] = values

    def diagonal(self):
        """Theta(s, s, x, i) as a ValueField over the whole time grid."""
        n_t = len(self.times)
        diag = self.values[np.arange(n_t), np.arange(n_t)]
        return ValueField(self.times, self.grid, diag.copy())

    def copy(self):
        out = TwoTimeField(self.times, self.grid, self.m)
        out.values[...] = self.values
        return out
