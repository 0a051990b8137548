"""Training diagnostics for binarized layers.

Sign conventions follow the forward pass: sign(0) = +1 everywhere.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .binary import sign
from .tensor import ContractError, DimensionError, Tensor

HIST_BINS = 80
HIST_RANGE = (-2.0, 2.0)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _layers(ws):
    if isinstance(ws, (list, tuple)):
        return [_arr(w) for w in ws]
    return [_arr(ws)]


def _check_pairs(a, b, what):
    if len(a) != len(b):
        raise DimensionError(f"{what}: {len(a)} layers vs {len(b)} layers")
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise DimensionError(f"{what}: shapes {x.shape} and {y.shape} differ")


def cam(w):
    """Channel-wise absolute mean: one value per output channel."""
    w = _arr(w)
    if w.size == 0:
        raise ContractError("cam: empty tensor")
    return np.abs(w.reshape(w.shape[0], -1)).mean(axis=1)


def sdam(cam_values):
    """Population standard deviation of a CAM vector."""
    c = np.asarray(cam_values, dtype=np.float64).reshape(-1)
    if c.size == 0:
        raise ContractError("sdam: empty CAM vector")
    return float(np.std(c))


def flip_counts(w_before, w_after):
    """Per-layer (flips, count) pairs."""
    a, b = _layers(w_before), _layers(w_after)
    _check_pairs(a, b, "ff_ratio")
    return [(int(np.count_nonzero(sign(x) != sign(y))), x.size) for x, y in zip(a, b)]


def ff_ratio(w_before, w_after):
    """Fraction of weights, over all given layers, whose sign changed."""
    counts = flip_counts(w_before, w_after)
    total = sum(n for _, n in counts)
    return sum(f for f, _ in counts) / total if total else 0.0


@dataclass(frozen=True)
class InitSnapshot:
    """Signs of the measured weights at the start of a phase."""

    signs: tuple

    @classmethod
    def capture(cls, ws):
        signs = []
        for w in _layers(ws):
            s = sign(w).astype(np.int8)
            s.setflags(write=False)
            signs.append(s)
        return cls(tuple(signs))

    @property
    def shapes(self):
        return [s.shape for s in self.signs]


def _disagreement(snapshot, w_final):
    final = _layers(w_final)
    _check_pairs(list(snapshot.signs), final, "c2i_ratio")
    flipped = sum(int(np.count_nonzero(s != sign(w))) for s, w in zip(snapshot.signs, final))
    total = sum(s.size for s in snapshot.signs)
    return flipped / total if total else 0.0


def c2i_ratio(snapshot, w_final):
    """Fraction of weights whose final sign equals their initial sign."""
    return 1.0 - _disagreement(snapshot, w_final)


def c2i_literal(snapshot, w_final):
    """``1 - flipped_fraction / 2``, the formula read literally; lies in [0.5, 1]."""
    return 1.0 - 0.5 * _disagreement(snapshot, w_final)


def saturation_ratio(a_r):
    """Fraction of entries with |a| > 1 (exactly +-1 is not saturated)."""
    a = _arr(a_r)
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(a) > 1.0)) / a.size


def update_cam(delta_w):
    return [cam(d) for d in _layers(delta_w)]


def weight_histogram(ws, bins=HIST_BINS, value_range=HIST_RANGE):
    """Histogram of all weights; values outside the range land in the edge bins."""
    lo, hi = value_range
    flat = np.concatenate([w.reshape(-1) for w in _layers(ws)]) if ws is not None else np.zeros(0)
    width = (hi - lo) / bins
    idx = np.floor((flat - lo) / width).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    return np.bincount(idx, minlength=bins)


def histogram_edges(bins=HIST_BINS, value_range=HIST_RANGE):
    return np.linspace(value_range[0], value_range[1], bins + 1)


def tail_mass(counts, threshold=0.75, bins=HIST_BINS, value_range=HIST_RANGE):
    """Fraction of histogram mass in bins lying entirely beyond |w| > threshold."""
    edges = histogram_edges(bins, value_range)
    outer = (edges[:-1] >= threshold) | (edges[1:] <= -threshold)
    counts = np.asarray(counts)
    return counts[outer].sum() / max(counts.sum(), 1)


@dataclass
class MetricsRecord:
    iteration: int
    phase: str = "main"
    loss: float = float("nan")
    accuracy: float = float("nan")
    ff_ratio: float = 0.0
    ff_ratio_mean: float = 0.0
    c2i_ratio: float = 1.0
    c2i_literal: float = 1.0
    cam: list = field(default_factory=list)
    sdam: list = field(default_factory=list)
    saturation: list = field(default_factory=list)
    update_cam: list = field(default_factory=list)
    histogram: np.ndarray | None = None

    def row(self, n_sites):
        cams = np.concatenate(self.cam) if self.cam else np.zeros(0)
        ucams = np.concatenate(self.update_cam) if self.update_cam else np.zeros(0)
        q = np.quantile(ucams, [0.1, 0.5, 0.9]) if ucams.size else [float("nan")] * 3
        sat = list(self.saturation) + [float("nan")] * (n_sites - len(self.saturation))
        return [
            self.iteration, self.phase, _fmt(self.loss), _fmt(self.accuracy),
            _fmt(self.ff_ratio), _fmt(self.ff_ratio_mean), _fmt(self.c2i_ratio),
            _fmt(self.c2i_literal),
            _fmt(cams.mean() if cams.size else float("nan")),
            _fmt(cams.min() if cams.size else float("nan")),
            _fmt(float(np.mean(self.sdam)) if self.sdam else float("nan")),
            *[_fmt(s) for s in sat[:n_sites]],
            *[_fmt(v) for v in q],
        ]


def _fmt(x):
    return repr(float(x))


def csv_header(n_sites):
    return (["iteration", "phase", "loss", "accuracy", "ff_ratio", "ff_ratio_mean",
             "c2i_ratio", "c2i_literal", "cam_mean", "cam_min", "sdam"]
            + [f"saturation_{i}" for i in range(n_sites)]
            + ["update_cam_q10", "update_cam_q50", "update_cam_q90"])


class MetricsWriter:
    """Appends :class:`MetricsRecord` rows to a CSV file with a fixed header."""

    def __init__(self, path, n_sites, append=False):
        self.path = os.fspath(path)
        self.n_sites = n_sites
        exists = append and os.path.exists(self.path) and os.path.getsize(self.path) > 0
        if not exists:
            try:
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(csv_header(n_sites))
            except OSError as exc:
                raise OSError(f"cannot write metrics file {self.path}: {exc}") from exc

    def write(self, record):
        try:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(record.row(self.n_sites))
        except OSError as exc:
            raise OSError(f"cannot write metrics file {self.path}: {exc}") from exc


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
