"""Layer-indexed relevance thresholds and query pruning rules.

Thresholds grow from a lower to an upper bound across decoder layers
(sigmoid, exponential, or logarithmic trajectory). After each layer,
active queries whose confidence falls below the layer's threshold are
deactivated, subject to a floor on the surviving count. Baseline rules
(random / top-k / depth truncation) mirror the ablation comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, StateError
from .rng import stream

SCHEDULE_KINDS = ("sigmoid", "exponential", "logarithmic")
BASELINE_STRATEGIES = ("layers", "random", "topk")


@dataclass(frozen=True)
class PruneSchedule:
    """Threshold trajectory parameters for progressive pruning."""

    kind: str
    b_low: float
    b_high: float
    steepness: float
    layers: int
    min_keep: int = 100

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 <= self.b_low <= self.b_high <= 1.0):
            raise ConfigError("need 0 <= b_low <= b_high <= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.min_keep < 0:
            raise ConfigError("min_keep must be >= 0")
        if self.kind in ("exponential", "logarithmic"):
            if self.layers == 1:
                raise ConfigError(f"{self.kind} schedule needs layers >= 2")
            if self.steepness <= 0:
                raise ConfigError(f"{self.kind} schedule needs positive steepness")


def threshold_at(schedule: PruneSchedule, layer: int) -> float:
    """Relevance threshold for 0-based layer index ``layer``."""
    ll = schedule.layers
    if not 0 <= layer < ll:
        raise ConfigError(f"layer {layer} out of range [0, {ll})")
    lo, hi = schedule.b_low, schedule.b_high
    span = hi - lo
    if schedule.kind == "sigmoid":
        z = (10.0 * schedule.steepness / ll) * (layer - ll / 2.0)
        return lo + span / (1.0 + math.exp(-z))
    a = schedule.steepness
    frac = layer / (ll - 1)
    if schedule.kind == "exponential":
        return lo + span * (math.exp(a * frac) - 1.0) / (math.exp(a) - 1.0)
    return lo + span * math.log1p(a * frac) / math.log1p(a)


def query_confidence(scores):
    """Squash classification scores into (0, 1) for threshold comparison."""
    return 1.0 / (1.0 + np.exp(-np.asarray(scores, dtype=np.float64)))


def prune(queries, tau: float, min_keep: int):
    """Deactivate active queries whose confidence is below ``tau``.

    If fewer than ``min_keep`` would survive, the min_keep highest-confidence
    active queries are retained instead (all of them when fewer are active).
    Never increases the active count.
    """
    active = np.asarray(queries.active, dtype=bool)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        raise StateError("prune requires at least one active query")
    conf = query_confidence(queries.scores)[idx]
    keep = conf >= tau
    floor = min(min_keep, idx.size)
    if int(keep.sum()) < floor:
        order = np.argsort(-conf, kind="stable")
        keep = np.zeros(idx.size, dtype=bool)
        keep[order[:floor]] = True
    new_active = np.zeros_like(active)
    new_active[idx[keep]] = True
    return replace(queries, active=new_active)


def baseline_prune(queries, strategy: str, budget=None, seed=0):
    """Reference pruning rules used as cost-model baselines.

    layers: identity on the query set (cost is saved by truncating decoder
    depth instead, which the FLOPs model accounts for separately).
    random: seeded uniform deactivation down to ``budget`` active queries.
    topk: keep the ``budget`` highest-confidence active queries.
    """
    if strategy not in BASELINE_STRATEGIES:
        raise ConfigError(f"unknown baseline strategy {strategy!r}")
    if strategy == "layers":
        return queries
    active = np.asarray(queries.active, dtype=bool)
    idx = np.flatnonzero(active)
    if budget is None or not 0 <= budget <= idx.size:
        raise ConfigError(f"budget must be in [0, {idx.size}], got {budget}")
    if strategy == "random":
        rng = stream(seed, "baseline/random")
        kept = rng.choice(idx.size, size=budget, replace=False)
    else:  # topk
        conf = query_confidence(queries.scores)[idx]
        kept = np.argsort(-conf, kind="stable")[:budget]
    new_active = np.zeros_like(active)
    new_active[idx[kept]] = True
    return replace(queries, active=new_active)
