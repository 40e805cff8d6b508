"""Online MAP decisions, scoring, and an exact posterior by enumeration for small grids."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import xlog1py, xlogy

from .grid import Grid, is_connected
from .powerflow import angle_operator

MAX_ENUMERATED_LINES = 20
_TOPOLOGY_CHUNK = 1024


class EnumerationTooLarge(ValueError):
    pass


class PosteriorUnderflow(ArithmeticError):
    """Every topology received zero weight; the marginals are undefined."""


@dataclass(frozen=True)
class Metrics:
    per_line_accuracy: float
    avg_misidentified: float
    missed_detection_rate: float
    false_alarm_rate: float
    n_samples: int
    n_lines: int
    n_misidentified: int
    n_missed: int
    n_false_alarm: int
    n_outages: int
    line_ids: np.ndarray
    line_accuracy: np.ndarray
    line_missed_rate: np.ndarray
    line_false_alarm_rate: np.ndarray

    def to_dict(self) -> dict:
        scalars = {k: getattr(self, k) for k in (
            "per_line_accuracy", "avg_misidentified", "missed_detection_rate", "false_alarm_rate",
            "n_samples", "n_lines", "n_misidentified", "n_missed", "n_false_alarm", "n_outages")}
        return {k: (float(v) if isinstance(v, float) else int(v)) for k, v in scalars.items()}

    def write_line_csv(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(["line_id", "accuracy", "missed", "false_alarm"])
        for row in zip(self.line_ids, self.line_accuracy, self.line_missed_rate,
                       self.line_false_alarm_rate):
            writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def map_decide(q: np.ndarray) -> np.ndarray:
    """Declare a line out only when ``q(s_l = 1 | y) < 0.5``; ties stay connected."""
    return (np.asarray(q) >= 0.5).astype(np.uint8)


def _rate(num, den):
    return np.divide(num, den, out=np.zeros(np.shape(num), dtype=np.float64), where=np.asarray(den) > 0)


def compute_metrics(predictions: np.ndarray, labels: np.ndarray, switchable: np.ndarray) -> Metrics:
    """Error statistics over switchable lines only."""
    pred = np.atleast_2d(np.asarray(predictions)).astype(bool)
    true = np.atleast_2d(np.asarray(labels)).astype(bool)
    mask = np.asarray(switchable, dtype=bool)
    if pred.shape != true.shape or mask.shape != (true.shape[1],):
        raise ValueError(f"shape mismatch: predictions {pred.shape}, labels {true.shape}, mask {mask.shape}")
    pred, true = pred[:, mask], true[:, mask]
    n, n_lines = true.shape
    missed = ~true & pred  # outage declared connected
    false_alarm = true & ~pred
    outages = (~true).sum(axis=0)
    connected = true.sum(axis=0)
    n_missed, n_fa = int(missed.sum()), int(false_alarm.sum())
    pairs = n * n_lines
    return Metrics(
        per_line_accuracy=1.0 - (n_missed + n_fa) / pairs if pairs else 1.0,
        avg_misidentified=(n_missed + n_fa) / n if n else 0.0,
        missed_detection_rate=float(_rate(n_missed, outages.sum())),
        false_alarm_rate=float(_rate(n_fa, connected.sum())),
        n_samples=n,
        n_lines=n_lines,
        n_misidentified=n_missed + n_fa,
        n_missed=n_missed,
        n_false_alarm=n_fa,
        n_outages=int(outages.sum()),
        line_ids=np.flatnonzero(mask),
        line_accuracy=1.0 - _rate((missed | false_alarm).sum(axis=0), np.full(n_lines, n)),
        line_missed_rate=_rate(missed.sum(axis=0), outages),
        line_false_alarm_rate=_rate(false_alarm.sum(axis=0), connected),
    )


def infer(model, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """One forward pass: marginals, MAP decisions, and wall time in seconds."""
    from .mlp import forward

    t0 = time.perf_counter()
    q, _ = forward(model, y)
    decisions = map_decide(q)
    return q, decisions, time.perf_counter() - t0


class TopologyEnumerator:
    """All connected topologies of a small grid, with their angle maps at observed buses."""

    def __init__(self, grid: Grid, observed_buses=None):
        switchable = np.flatnonzero(grid.switchable_mask)
        if len(switchable) > MAX_ENUMERATED_LINES:
            raise EnumerationTooLarge(
                f"{len(switchable)} switchable lines exceeds the enumeration cap of {MAX_ENUMERATED_LINES}"
            )
        self.grid = grid
        self.observed = np.arange(grid.n_buses) if observed_buses is None else np.asarray(observed_buses)
        codes = np.arange(2 ** len(switchable), dtype=np.int64)
        bits = ((codes[:, None] >> np.arange(len(switchable))) & 1).astype(np.uint8)
        full = np.ones((len(codes), grid.n_branches), dtype=np.uint8)
        full[:, switchable] = bits
        keep = np.array([is_connected(grid, s) for s in full], dtype=bool)
        self.topologies = full[keep]
        self.n_out = (1 - self.topologies[:, switchable]).sum(axis=1)
        self.n_switchable = len(switchable)
        self.operators = np.stack(
            [angle_operator(grid, s)[self.observed] for s in self.topologies]
        )

    def __len__(self) -> int:
        return len(self.topologies)

    def reorder(self, perm: np.ndarray) -> TopologyEnumerator:
        out = object.__new__(TopologyEnumerator)
        out.__dict__.update(self.__dict__)
        out.topologies = self.topologies[perm]
        out.n_out = self.n_out[perm]
        out.operators = self.operators[perm]
        return out

    def marginals(self, p: np.ndarray, angles: np.ndarray, noise_std: float, p_out: float) -> np.ndarray:
        """Posterior ``P(s_l = 1 | y)`` for a batch of exact injections and noisy angles.

        ``noise_std`` is in radians. Weights are accumulated in the log
        domain with a running maximum, one chunk of topologies at a time.
        """
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
        if not noise_std > 0:
            raise ValueError("noise_std must be positive")
        if not 0.0 <= p_out <= 1.0:
            raise ValueError("p_out must be in [0, 1]")
        log_prior = xlogy(self.n_out, p_out) + xlog1py(self.n_switchable - self.n_out, -p_out)
        b = len(p)
        run_max = np.full(b, -np.inf)
        run_sum = np.zeros(b)
        run_on = np.zeros((b, self.grid.n_branches))
        for a in range(0, len(self), _TOPOLOGY_CHUNK):
            ops = self.operators[a:a + _TOPOLOGY_CHUNK]
            predicted = np.einsum("tmn,bn->btm", ops, p)
            resid = (angles[:, None, :] - predicted) / noise_std
            logw = -0.5 * np.einsum("btm,btm->bt", resid, resid) + log_prior[a:a + _TOPOLOGY_CHUNK]
            new_max = np.maximum(run_max, logw.max(axis=1))
            shift = np.where(np.isfinite(new_max), new_max, 0.0)
            scale = np.exp(run_max - shift)
            w = np.exp(logw - shift[:, None])
            run_sum = run_sum * scale + w.sum(axis=1)
            run_on = run_on * scale[:, None] + w @ self.topologies[a:a + _TOPOLOGY_CHUNK]
            run_max = new_max
        if np.any(~(run_sum > 0)):
            raise PosteriorUnderflow("all topology weights are zero for at least one sample")
        return run_on / run_sum[:, None]


def exact_marginals(grid: Grid, p: np.ndarray, observed_angles: np.ndarray, noise_std: float,
                    p_out: float, observed_buses=None) -> np.ndarray:
    """Exact posterior marginals for one sample (``noise_std`` in radians)."""
    return TopologyEnumerator(grid, observed_buses).marginals(p, observed_angles, noise_std, p_out)[0]


def exact_dataset_marginals(grid: Grid, dataset, noise_std: float | None = None,
                            p_out: float | None = None, chunk: int = 256) -> np.ndarray:
    """Exact marginals for every sample of a dataset generated with measured injections."""
    cfg = dataset.config
    if not cfg.injection_measured:
        raise ValueError("exact posterior needs exactly measured injections in the features")
    noise_std = cfg.noise_std_rad if noise_std is None else noise_std
    p_out = cfg.p_out if p_out is None else p_out
    observed = cfg.observed(grid)
    enum = TopologyEnumerator(grid, observed)
    m = len(observed)
    out = np.empty((len(dataset), grid.n_branches))
    for a in range(0, len(dataset), chunk):
        feats = dataset.features[a:a + chunk]
        out[a:a + chunk] = enum.marginals(feats[:, m:], feats[:, :m], noise_std, p_out)
    return out


def exact_map_accuracy(grid: Grid, dataset, noise_std: float | None = None,
                       p_out: float | None = None) -> Metrics:
    """Per-line Bayes-optimal benchmark: MAP on the exact marginals."""
    marg = exact_dataset_marginals(grid, dataset, noise_std, p_out)
    return compute_metrics(map_decide(marg), dataset.labels, grid.switchable_mask)
