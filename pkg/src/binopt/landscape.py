"""Loss-landscape tools.

The toy landscape is two binary nodes summed against a target,
``L(x, y) = (clip(x) + clip(y) - t)**2``, whose surrogate gradient vanishes
outside [-1, 1]. Batch-to-batch saturation is modelled stochastically: a
coordinate with |value| > 1 gets the in-range gradient times a random factor
drawn each step with mean ``kappa``.

``loss_slice`` evaluates a trained network on a 2-D plane spanned by two
filter-normalized random directions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import softmax_cross_entropy


class DivergenceError(RuntimeError):
    pass


def clip(z):
    return np.clip(z, -1.0, 1.0)


@dataclass
class ToyLandscape:
    target: float = 2.0
    kappa: float = 0.05
    noise: str = "uniform"    # uniform: factor ~ U(0, 2*kappa); bernoulli: 1 w.p. kappa, else 0

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.noise not in ("uniform", "bernoulli"):
            raise ValueError(f"unknown saturation noise {self.noise!r}")

    def loss(self, x, y):
        return (clip(x) + clip(y) - self.target) ** 2

    def discrete_loss(self, x, y):
        s = lambda z: np.where(np.asarray(z) < 0, -1.0, 1.0)
        return (s(x) + s(y) - self.target) ** 2

    def in_range_grad(self, x, y):
        """Gradient of the clip surrogate with the clip derivative taken as 1."""
        return 2.0 * (clip(x) + clip(y) - self.target)

    def saturation_factor(self, rng):
        if self.noise == "uniform":
            return 2.0 * self.kappa * rng.random()
        return 1.0 if rng.random() < self.kappa else 0.0

    def expected_grad(self, x, y):
        g = self.in_range_grad(x, y)
        return tuple(g * (1.0 if abs(c) <= 1 else self.kappa) for c in (x, y))

    def loss_and_grad(self, x, y, rng):
        L = float(self.loss(x, y))
        g = float(self.in_range_grad(x, y))
        gx = g if abs(x) <= 1 else g * self.saturation_factor(rng)
        gy = g if abs(y) <= 1 else g * self.saturation_factor(rng)
        return L, gx, gy


def toy_loss_and_grad(x, y, rng, landscape=None):
    return (landscape or ToyLandscape()).loss_and_grad(x, y, rng)


TRAJECTORY_COLUMNS = ("step", "x", "y", "g_x", "g_y", "u_x", "u_y", "L")


def simulate(optimizer, start, steps, lr, seed=0, landscape=None, momentum=0.9,
             beta1=0.9, beta2=0.999, eps=1e-8, divergence_limit=1e6):
    """Run SGD (with momentum) or Adam on the toy landscape.

    Returns an array with one row per step (row 0 is the start) and columns
    :data:`TRAJECTORY_COLUMNS`; ``u`` is the update applied at that step and
    ``g``/``L`` are evaluated at the row's position. The saturation draws come
    from ``seed`` alone, so both optimizers face the same noise sequence.
    """
    land = landscape or ToyLandscape()
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"optimizer must be 'sgd' or 'adam', got {optimizer!r}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    rng = np.random.default_rng(seed)
    pos = np.array(start, dtype=np.float64)
    v = np.zeros(2)
    m = np.zeros(2)
    rows = np.zeros((steps + 1, len(TRAJECTORY_COLUMNS)))
    L, gx, gy = land.loss_and_grad(pos[0], pos[1], rng)
    rows[0] = (0, pos[0], pos[1], gx, gy, 0.0, 0.0, L)
    for t in range(1, steps + 1):
        g = np.array([gx, gy])
        if optimizer == "sgd":
            v = momentum * v + g
            u = lr * v
        else:
            v = beta1 * v + (1 - beta1) * g
            m = beta2 * m + (1 - beta2) * g * g
            u = lr * (v / (1 - beta1 ** t)) / (np.sqrt(m / (1 - beta2 ** t)) + eps)
        pos = pos - u
        if not np.all(np.isfinite(pos)) or np.any(np.abs(pos) > divergence_limit):
            raise DivergenceError(f"{optimizer} diverged at step {t}: position {pos}")
        L, gx, gy = land.loss_and_grad(pos[0], pos[1], rng)
        rows[t] = (t, pos[0], pos[1], gx, gy, u[0], u[1], L)
    return rows


def flat_phase_ratio(traj, bound=1.0):
    """|dx| / |dy| accumulated while x is still beyond ``bound`` in magnitude.

    The phase ends at the first row where |x| <= bound (or at the end of the
    trajectory when that never happens).
    """
    inside = np.nonzero(np.abs(traj[:, 1]) <= bound)[0]
    end = inside[0] if inside.size else len(traj) - 1
    dx = abs(traj[end, 1] - traj[0, 1])
    dy = abs(traj[end, 2] - traj[0, 2])
    return dx / dy if dy > 0 else float("inf")


def surface_grid(kind="surrogate", lo=-2.0, hi=2.0, resolution=41, landscape=None):
    """Toy loss over a square grid; returns (xs, ys, values[len(ys), len(xs)])."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    land = landscape or ToyLandscape()
    xs = np.linspace(lo, hi, resolution)
    ys = np.linspace(lo, hi, resolution)
    X, Y = np.meshgrid(xs, ys)
    if kind == "surrogate":
        vals = land.loss(X, Y)
    elif kind == "discrete":
        vals = land.discrete_loss(X, Y)
    else:
        raise ValueError(f"kind must be 'surrogate' or 'discrete', got {kind!r}")
    return xs, ys, vals


def filter_normalized_direction(param, rng):
    """Gaussian direction with each filter rescaled to that filter's norm.

    Vectors (BN affine terms, biases) get a zero direction.
    """
    d = rng.standard_normal(param.shape)
    if param.ndim < 2:
        return np.zeros_like(param)
    flat_d = d.reshape(param.shape[0], -1)
    flat_p = param.reshape(param.shape[0], -1)
    dn = np.linalg.norm(flat_d, axis=1, keepdims=True)
    pn = np.linalg.norm(flat_p, axis=1, keepdims=True)
    return (flat_d * pn / np.where(dn > 0, dn, 1.0)).reshape(param.shape)


def loss_slice(model, batch, resolution=21, radius=1.0, seed=0):
    """Loss on the plane theta + a*delta + b*eta, a, b in [-radius, radius].

    Batchnorm uses the batch statistics without touching running averages;
    parameters are restored bit-for-bit afterwards. Non-finite losses are
    stored as +inf. Returns (alphas, betas, values[len(betas), len(alphas)]).
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if resolution < 1:
        raise ValueError("resolution must be positive")
    x, y = batch
    rng = np.random.default_rng(seed)
    params = model.parameters()
    originals = [p.data.copy() for p in params]
    delta = [filter_normalized_direction(p.data, rng) for p in params]
    eta = [filter_normalized_direction(p.data, rng) for p in params]
    coords = np.linspace(-radius, radius, resolution) if resolution > 1 else np.zeros(1)
    values = np.empty((len(coords), len(coords)))
    try:
        for i, b in enumerate(coords):
            for j, a in enumerate(coords):
                for p, o, d, e in zip(params, originals, delta, eta):
                    p.data = o + a * d + b * e
                with np.errstate(all="ignore"):
                    loss = softmax_cross_entropy(model(x, training=True, track_stats=False), y).item()
                values[i, j] = loss if np.isfinite(loss) else np.inf
    finally:
        for p, o in zip(params, originals):
            p.data = o
    return coords, coords.copy(), values


def total_variation(values):
    v = np.where(np.isfinite(values), values, np.nan)
    return float(np.nansum(np.abs(np.diff(v, axis=0))) + np.nansum(np.abs(np.diff(v, axis=1))))


def write_trajectory_csv(path, traj):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for row in traj:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def write_grid_csv(path, xs, ys, values):
    """Two axis-header lines (``x,...`` and ``y,...``) then one row per y value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + [repr(float(v)) for v in xs])
        w.writerow(["y"] + [repr(float(v)) for v in ys])
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    xs = np.array([float(v) for v in rows[0][1:]])
    ys = np.array([float(v) for v in rows[1][1:]])
    values = np.array([[float(v) for v in r] for r in rows[2:]])
    return xs, ys, values
