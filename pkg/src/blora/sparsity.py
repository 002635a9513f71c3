"""Sparsity statistics of adapter updates.

Four per-matrix metrics, each averaged without weighting over layers:

* threshold sparsity: fraction of |w| below a fixed cutoff
* adaptive sparsity: fraction of |w| below ``tau`` times the lower median
  of |baseline| for the same layer
* top-energy: share of the squared norm held by the largest ``frac`` of entries
* Hoyer index: (sqrt(n) - l1/l2) / (sqrt(n) - 1)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapter import LowRankAdapter, mean_delta

MEDIAN_FLOOR = 1e-12


def _flat(w) -> np.ndarray:
    arr = np.asarray(getattr(w, "data", w), dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("empty tensor")
    return arr


def thresh_sparsity(w, t: float = 1e-3) -> float:
    if not t > 0:
        raise ValueError("threshold must be positive")
    a = np.abs(_flat(w))
    return float(np.count_nonzero(a < t)) / a.size


def lower_median(values) -> float:
    """Median that takes the lower-middle element for even counts."""
    s = np.sort(_flat(values))
    return float(s[(s.size - 1) // 2])


def adaptive_sparsity(w, baseline, tau: float = 0.5) -> float:
    if not tau > 0:
        raise ValueError("tau must be positive")
    cutoff = max(tau * lower_median(np.abs(_flat(baseline))), MEDIAN_FLOOR)
    a = np.abs(_flat(w))
    return float(np.count_nonzero(a < cutoff)) / a.size


def top_energy(w, frac: float = 0.01) -> float:
    """Squared-norm share of the k = max(1, ceil(frac * n)) largest-magnitude entries.

    Ties at the k-th magnitude are broken by flattened index order.
    """
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    a = _flat(w)
    peak = np.abs(a).max() if a.size else 0.0
    if peak == 0:
        raise ValueError("top_energy is undefined for an all-zero tensor")
    # rescale so tiny magnitudes do not underflow when squared
    sq = (a / peak) ** 2
    total = sq.sum()
    if total == 0:
        raise ValueError("top_energy is undefined for an all-zero tensor")
    k = max(1, math.ceil(frac * a.size))
    order = np.argsort(-np.abs(a), kind="stable")
    return float(sq[order[:k]].sum() / total)


def hoyer(w) -> float:
    a = _flat(w)
    n = a.size
    if n < 2:
        raise ValueError("hoyer needs at least two elements")
    peak = float(np.abs(a).max())
    if peak == 0:
        raise ValueError("hoyer is undefined for an all-zero tensor")
    a = a / peak
    l2 = math.sqrt(float((a * a).sum()))
    l1 = float(np.abs(a).sum())
    rn = math.sqrt(n)
    # rounding can push a flat vector a hair below zero
    return min(1.0, max(0.0, (rn - l1 / l2) / (rn - 1)))


@dataclass(frozen=True)
class SparsityConfig:
    abs_threshold: float = 1e-3
    adaptive_tau: float = 0.5
    extra_tau: float | None = 0.25
    top_fraction: float = 0.01
    baseline_label: str = "LoRA"

    def __post_init__(self):
        for name in ("abs_threshold", "adaptive_tau", "top_fraction"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.extra_tau is not None and not self.extra_tau > 0:
            raise ValueError("extra_tau must be positive")
        if self.top_fraction > 1:
            raise ValueError("top_fraction must be <= 1")


def _num_label(x: float) -> str:
    mant, exp = f"{x:e}".split("e")
    if float(mant) == 1.0:
        return f"1e{int(exp)}"
    return f"{x:g}"


def column_names(cfg: SparsityConfig) -> list[str]:
    return [
        f"Thresh@{_num_label(cfg.abs_threshold)}",
        f"Adaptive@{cfg.adaptive_tau:g}",
        f"Top-{cfg.top_fraction * 100:g}%E",
        "Hoyer",
    ]


METRIC_KEYS = ("thresh", "adaptive", "top_energy", "hoyer")


@dataclass
class SparsityReport:
    label: str
    layers: dict[str, dict[str, float]]
    average: dict[str, float]
    config: SparsityConfig = field(default_factory=SparsityConfig)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "columns": dict(zip(METRIC_KEYS, column_names(self.config))),
            "layers": self.layers,
            "average": self.average,
            "config": asdict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _as_deltas(obj) -> dict[str, np.ndarray]:
    out = {}
    for name, v in obj.items():
        if isinstance(v, LowRankAdapter):
            out[name] = mean_delta(v).data
        else:
            out[name] = np.asarray(getattr(v, "data", v), dtype=np.float64)
    return out


def analyze(updates, baseline=None, config: SparsityConfig | None = None,
            label: str = "") -> SparsityReport:
    """Per-layer metrics on mean updates and their unweighted layer average.

    ``updates`` and ``baseline`` map layer ids to adapters or update matrices;
    without a baseline the updates serve as their own reference.
    """
    cfg = config or SparsityConfig()
    deltas = _as_deltas(updates)
    base = deltas if baseline is None else _as_deltas(baseline)
    missing = sorted(set(deltas) ^ set(base))
    if missing:
        raise KeyError(f"layer sets differ; unmatched layers: {', '.join(missing)}")
    if not deltas:
        raise ValueError("no layers to analyze")
    layers = {}
    for name in sorted(deltas):
        w, b = deltas[name], base[name]
        row = {
            "thresh": thresh_sparsity(w, cfg.abs_threshold),
            "adaptive": adaptive_sparsity(w, b, cfg.adaptive_tau),
            "top_energy": top_energy(w, cfg.top_fraction),
            "hoyer": hoyer(w),
        }
        if cfg.extra_tau is not None:
            row["adaptive_extra"] = adaptive_sparsity(w, b, cfg.extra_tau)
        layers[name] = row
    keys = list(next(iter(layers.values())))
    average = {k: sum(r[k] for r in layers.values()) / len(layers) for k in keys}
    return SparsityReport(label, layers, average, cfg)


def format_table(reports: list[SparsityReport]) -> str:
    """Fixed-width comparison of averaged rows, one line per report."""
    if not reports:
        return ""
    cols = column_names(reports[0].config)
    width = max(12, max(len(c) for c in cols) + 2)
    head = f"{'Adapter':<10}" + "".join(f"{c:>{width}}" for c in cols)
    lines = [head, "-" * len(head)]
    for rep in reports:
        vals = [rep.average[k] for k in METRIC_KEYS]
        lines.append(f"{rep.label:<10}" + "".join(f"{v:>{width}.6f}" for v in vals))
    return "\n".join(lines) + "\n"
