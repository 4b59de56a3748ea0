"""Per-layer sparsity discovery by bisection under an accuracy-drop budget."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass

import numpy as np

from .compensation import Selection, compensate
from .data import Dataset
from .errors import NotPositiveDefiniteError, ShapeError
from .network import Conv2d, Model, apply_compensation, flat_weight, flops, predict, prune_layer, unflat_weight
from .selection import baseline_select, cap_select
from .statistics import LayerStatistics

log = logging.getLogger(__name__)

ORDERS = ("bottomup", "topdown", "random")
ACC_MODES = ("labeled", "agreement")
SELECTORS = ("cap", "l2", "random")


@dataclass(frozen=True)
class SearchConfig:
    tolerance: float = 0.01
    steps: int = 3
    order: str = "bottomup"
    order_seed: int = 0
    accuracy_mode: str = "labeled"
    prune_layers: tuple[int, ...] | None = None
    step_constraint: bool = True
    selector: str = "cap"
    selector_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tolerance < 1.0:
            raise ValueError(f"tolerance must lie in [0, 1), got {self.tolerance}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.accuracy_mode not in ACC_MODES:
            raise ValueError(f"accuracy mode must be one of {ACC_MODES}")
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}")
        if self.prune_layers is not None:
            object.__setattr__(self, "prune_layers", tuple(int(i) for i in self.prune_layers))


@dataclass(frozen=True)
class LayerVisit:
    layer: int
    position: int
    budget: float
    sigma: float
    retained: int
    channels: int
    accuracy_drop: float
    probes: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class SearchReport:
    layers: tuple[LayerVisit, ...]
    baseline_accuracy: float
    final_accuracy: float
    flops_before: int
    flops_after: int
    evaluations: int
    tolerance: float
    steps: int
    order: str
    accuracy_mode: str
    selector: str
    step_constraint: bool

    @property
    def accuracy_drop(self) -> float:
        return self.baseline_accuracy - self.final_accuracy

    @property
    def flops_drop(self) -> float:
        return 1.0 - self.flops_after / self.flops_before if self.flops_before else 0.0

    def to_dict(self) -> dict:
        return {
            "schema": "capprune.search_report/1",
            "config": {
                "tolerance": self.tolerance,
                "steps": self.steps,
                "order": self.order,
                "accuracy_mode": self.accuracy_mode,
                "selector": self.selector,
                "step_constraint": self.step_constraint,
                # each probe is compared with the cumulative budget tau*(i+1)/L, not tau
                "budget_rule": "cumulative_per_layer" if self.step_constraint else "global",
            },
            "baseline_accuracy": self.baseline_accuracy,
            "final_accuracy": self.final_accuracy,
            "accuracy_drop": self.accuracy_drop,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "flops_drop": self.flops_drop,
            "evaluations": self.evaluations,
            "layers": [
                {
                    "layer": v.layer,
                    "position": v.position,
                    "budget": v.budget,
                    "sigma": v.sigma,
                    "retained": v.retained,
                    "channels": v.channels,
                    "accuracy_drop": v.accuracy_drop,
                    "probes": [{"sigma": s, "accuracy_drop": d} for s, d in v.probes],
                }
                for v in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "position", "budget", "sigma", "retained", "channels", "accuracy_drop"])
        for v in self.layers:
            writer.writerow([v.layer, v.position, repr(v.budget), repr(v.sigma), v.retained, v.channels, repr(v.accuracy_drop)])
        return buf.getvalue()


def layer_order(layers, order: str = "bottomup", seed: int = 0) -> list[int]:
    """Visiting sequence over the layers to prune."""
    layers = sorted(int(i) for i in layers)
    if not layers:
        raise ValueError("no layers to prune")
    if order == "bottomup":
        return layers
    if order == "topdown":
        return layers[::-1]
    if order == "random":
        return [layers[i] for i in np.random.default_rng(seed).permutation(len(layers))]
    raise ValueError(f"unknown order {order!r}")


def _targets(data: Dataset, mode: str, baseline: np.ndarray | None) -> np.ndarray:
    if mode == "labeled":
        if data.labels is None:
            raise ValueError("labeled accuracy needs a dataset with labels")
        return data.labels
    if mode == "agreement":
        if baseline is None:
            raise ValueError("agreement accuracy needs the baseline model's predictions")
        return np.asarray(baseline)
    raise ValueError(f"unknown accuracy mode {mode!r}")


def count_hits(model: Model, data: Dataset, targets: np.ndarray) -> int:
    return int(np.sum(predict(model, data.images) == targets))


def evaluate_accuracy(model: Model, data: Dataset, mode: str = "labeled", baseline: np.ndarray | None = None) -> float:
    """Top-1 accuracy against labels or against baseline predictions."""
    targets = _targets(data, mode, baseline)
    return count_hits(model, data, targets) / len(data)


def select_channels(
    selector: str, stats: LayerStatistics, w: np.ndarray, sigma: float, seed: int = 0
) -> Selection:
    if selector == "cap":
        return cap_select(stats, w, sigma)
    return baseline_select(selector, w, sigma, n_channels=stats.n_channels, seed=seed)


def prune_compensated(
    model: Model, layer: int, stats: LayerStatistics, sigma: float, selector: str = "cap", seed: int = 0
) -> tuple[Model, Selection]:
    """Select, compensate and cut one layer at sparsity ``sigma``."""
    target = model.layers[layer]
    w = flat_weight(target)
    if w.shape[0] != stats.dim:
        raise ShapeError(
            f"layer {layer} has {w.shape[0]} flattened input rows but its statistics cover {stats.dim}"
        )
    sel = select_channels(selector, stats, w, sigma, seed)
    if sel.is_full:
        return model, sel
    comp = compensate(w, target.bias, stats, sel)
    pruned = prune_layer(model, layer, sel)
    w_hat = unflat_weight(comp.w_hat, target.out_channels, target.kernel, isinstance(target, Conv2d))
    return apply_compensation(pruned, layer, w_hat, comp.b_hat), sel


def structural_search(
    model: Model, stats: dict[int, LayerStatistics], val: Dataset, cfg: SearchConfig
) -> tuple[Model, SearchReport]:
    """Bisect each layer's sparsity while the cumulative accuracy drop stays in budget.

    Visiting position ``i`` of ``L`` gets budget ``tolerance*(i+1)/L`` (or the
    full tolerance without the step constraint). Each probe prunes a copy of
    the current model; a probe whose drop reaches the budget shrinks the
    upper bound, otherwise it raises the lower bound. The probe at the final
    lower bound is kept.
    """
    layers = cfg.prune_layers if cfg.prune_layers is not None else tuple(model.conv_layers())
    order = layer_order(layers, cfg.order, cfg.order_seed)
    missing = [i for i in order if i not in stats]
    if missing:
        raise ValueError(f"no statistics for layers {missing}")
    baseline_pred = predict(model, val.images)
    targets = _targets(val, cfg.accuracy_mode, baseline_pred)
    n_val = len(val)
    base_hits = int(np.sum(baseline_pred == targets))
    flops_before = flops(model).total

    current, current_hits = model, base_hits
    visits, evaluations = [], 0
    for pos, layer in enumerate(order):
        budget = cfg.tolerance * (pos + 1) / len(order) if cfg.step_constraint else cfg.tolerance
        lo, hi = 0.0, 1.0
        accepted, accepted_hits = current, current_hits
        probes = []
        for _ in range(cfg.steps):
            sigma = (lo + hi) / 2
            try:
                probe, _ = prune_compensated(current, layer, stats[layer], sigma, cfg.selector, cfg.selector_seed)
                hits = count_hits(probe, val, targets)
                drop = (base_hits - hits) / n_val
            except NotPositiveDefiniteError as exc:
                log.info("layer %d sigma %.4f: degenerate probe (%s)", layer, sigma, exc)
                probe, hits, drop = None, None, float("inf")
            evaluations += 1
            probes.append((sigma, drop))
            if drop >= budget:
                hi = sigma
            else:
                lo = sigma
                accepted, accepted_hits = probe, hits
        channels = current.layers[layer].in_channels
        current, current_hits = accepted, accepted_hits
        visit = LayerVisit(
            layer=layer,
            position=pos,
            budget=budget,
            sigma=lo,
            retained=current.layers[layer].in_channels,
            channels=channels,
            accuracy_drop=(base_hits - current_hits) / n_val,
            probes=tuple(probes),
        )
        log.info("layer %d: sigma=%.4f retained %d/%d drop=%.4f", layer, lo, visit.retained, channels, visit.accuracy_drop)
        visits.append(visit)

    report = SearchReport(
        layers=tuple(visits),
        baseline_accuracy=base_hits / n_val,
        final_accuracy=current_hits / n_val,
        flops_before=flops_before,
        flops_after=flops(current).total,
        evaluations=evaluations,
        tolerance=cfg.tolerance,
        steps=cfg.steps,
        order=cfg.order,
        accuracy_mode=cfg.accuracy_mode,
        selector=cfg.selector,
        step_constraint=cfg.step_constraint,
    )
    return current, report
