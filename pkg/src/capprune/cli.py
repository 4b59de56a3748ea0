"""``capprune`` command-line driver.

Every command resolves its configuration from defaults, an optional JSON
``--config`` file and explicit flags (in increasing priority), writes the
resolved configuration to ``<out>/config.json`` and then runs. All randomness
is derived from ``--seed`` through named sub-seeds, so equal configurations
give byte-identical artifacts whatever ``--workers`` is.

Exit codes: 0 on success, 2 on configuration errors, 3 on malformed model,
data or statistics files.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, load_dataset, save_raw, split, synth_normal
from .errors import DeadActivationError, FormatError, ShapeError
from .fixtures import duplicate_channel_model, fixture_images, labeled_by_model
from .network import Model, flat_weight, flops, load_model, predict, save_model
from .search import (
    ACC_MODES,
    ORDERS,
    SELECTORS,
    SearchConfig,
    evaluate_accuracy,
    prune_compensated,
    select_channels,
    structural_search,
)
from .selection import reconstruction_loss
from .statistics import DEFAULT_PATCHES, LayerStatistics, estimate_statistics, load_statistics, save_statistics

DATA_FORMATS = ("cifar10", "raw")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: str | None = None
    data: str | None = None
    data_format: str = "raw"
    synth: int | None = None
    frac: float = 1.0
    val_data: str | None = None
    val_format: str | None = None
    tol: float = 0.01
    steps: int = 3
    order: str = "bottomup"
    seed: int = 0
    patches: int = DEFAULT_PATCHES
    selector: str = "cap"
    acc_mode: str = "auto"
    step_constraint: bool = True
    layers: tuple[int, ...] | None = None
    stats_dir: str | None = None
    unweighted: bool = False
    sigma: float = 0.5
    grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)
    random_seeds: int = 5
    top1: bool = True
    baseline_model: str | None = None
    n_est: int = 1000
    n_val: int = 2000
    out: str = "capprune-out"
    workers: int = 1

    def __post_init__(self):
        if self.data_format not in DATA_FORMATS:
            raise ConfigError(f"data_format must be one of {DATA_FORMATS}")
        if self.val_format is not None and self.val_format not in DATA_FORMATS:
            raise ConfigError(f"val_format must be one of {DATA_FORMATS}")
        if not 0.0 < self.frac <= 1.0:
            raise ConfigError(f"frac must lie in (0, 1], got {self.frac}")
        if not 0.0 <= self.tol < 1.0:
            raise ConfigError(f"tol must lie in [0, 1), got {self.tol}")
        if not 0.0 <= self.sigma < 1.0 or not all(0.0 <= s < 1.0 for s in self.grid):
            raise ConfigError("sparsities must lie in [0, 1)")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}")
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector must be one of {SELECTORS}")
        if self.acc_mode not in ACC_MODES + ("auto",):
            raise ConfigError(f"acc_mode must be auto or one of {ACC_MODES}")
        for name in ("steps", "patches", "workers", "random_seeds", "n_est", "n_val"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.synth is not None and self.synth < 1:
            raise ConfigError("synth must be >= 1")

    def subseed(self, name: str) -> int:
        """Seed for the named random stream, derived from the global seed."""
        seq = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(seq.generate_state(1)[0])

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        for key in ("layers", "grid"):
            if doc[key] is not None:
                doc[key] = list(doc[key])
        return doc


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    shared.add_argument("--config", help="JSON file of settings; flags override it")
    shared.add_argument("--model", help="input model (.cprn)")
    shared.add_argument("--data", help="estimation dataset")
    shared.add_argument("--data-format", dest="data_format", choices=DATA_FORMATS)
    shared.add_argument("--synth", type=int, metavar="N", help="estimate from N standard-normal images instead of --data")
    shared.add_argument("--frac", type=float, metavar="F", help="fraction of --data used for estimation")
    shared.add_argument("--val-data", dest="val_data", help="validation dataset (defaults to --data)")
    shared.add_argument("--val-format", dest="val_format", choices=DATA_FORMATS)
    shared.add_argument("--tol", type=float, metavar="T", help="accuracy-drop tolerance")
    shared.add_argument("--steps", type=int, metavar="K", help="bisection steps per layer")
    shared.add_argument("--order", choices=ORDERS)
    shared.add_argument("--seed", type=int, metavar="S")
    shared.add_argument("--patches", type=int, metavar="P", help="sampled positions per image")
    shared.add_argument("--selector", choices=SELECTORS)
    shared.add_argument("--acc-mode", dest="acc_mode", choices=ACC_MODES + ("auto",))
    shared.add_argument("--no-step-constraint", dest="step_constraint", action="store_false")
    shared.add_argument("--layers", type=_int_list, help="comma-separated layer indices to prune")
    shared.add_argument("--stats-dir", dest="stats_dir", help="reuse statistics caches from this directory")
    shared.add_argument("--unweighted", action="store_true", help="estimate statistics without derivative weights")
    shared.add_argument("--baseline-model", dest="baseline_model", help="reference model for agreement accuracy")
    shared.add_argument("--out", metavar="DIR")
    shared.add_argument("--workers", type=int, metavar="W")
    shared.add_argument("-v", "--verbose", action="store_true", default=False)

    parser = argparse.ArgumentParser(prog="capprune", description="Channel pruning with closed-form compensation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("stats", parents=[shared], help="estimate and cache per-layer input statistics")
    sub.add_parser("search", parents=[shared], help="find per-layer sparsities under the tolerance and prune")
    p = sub.add_parser("prune", parents=[shared], help="prune every selected layer at one fixed sparsity")
    p.add_argument("--sigma", type=float, default=argparse.SUPPRESS)
    sub.add_parser("eval", parents=[shared], help="top-1 accuracy of a model")
    sub.add_parser("flops", parents=[shared], help="per-layer FLOPs of a model")
    p = sub.add_parser("compare", parents=[shared], help="reconstruction loss of each selector over a sparsity grid")
    p.add_argument("--grid", type=_float_list, default=argparse.SUPPRESS, help="comma-separated sparsities")
    p.add_argument("--random-seeds", dest="random_seeds", type=int, default=argparse.SUPPRESS)
    p.add_argument("--no-top1", dest="top1", action="store_false", default=argparse.SUPPRESS)
    p = sub.add_parser("fixture", parents=[shared], help="write the duplicate-channel fixture model and data")
    p.add_argument("--n-est", dest="n_est", type=int, default=argparse.SUPPRESS)
    p.add_argument("--n-val", dest="n_val", type=int, default=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(values) - _FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update({k: v for k, v in vars(args).items() if k in _FIELDS})
    for key in ("layers", "grid"):
        if values.get(key) is not None:
            values[key] = tuple(values[key])
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# inputs


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _model(cfg: RunConfig) -> Model:
    return load_model(_require(cfg.model, "--model"))


def estimation_data(cfg: RunConfig, model: Model) -> Dataset:
    if cfg.synth is not None:
        return synth_normal(cfg.synth, model.input_shape, cfg.subseed("synth"))
    data = load_dataset(_require(cfg.data, "--data or --synth"), cfg.data_format)
    if cfg.frac < 1.0:
        data = split(data, [cfg.frac, 1.0 - cfg.frac], cfg.subseed("split"))[0]
    return data


def validation_data(cfg: RunConfig) -> Dataset:
    if cfg.val_data is not None:
        return load_dataset(cfg.val_data, cfg.val_format or cfg.data_format)
    return load_dataset(_require(cfg.data, "--val-data or --data"), cfg.data_format)


def accuracy_mode(cfg: RunConfig, val: Dataset) -> str:
    if cfg.acc_mode != "auto":
        return cfg.acc_mode
    return "labeled" if val.labels is not None else "agreement"


def prune_set(cfg: RunConfig, model: Model) -> tuple[int, ...]:
    if cfg.layers is None:
        return tuple(model.conv_layers())
    allowed = set(model.prunable_layers())
    bad = [i for i in cfg.layers if i not in allowed]
    if bad:
        raise ConfigError(f"layers {bad} are not prunable; choose from {sorted(allowed)}")
    return tuple(cfg.layers)


def _stats_name(layer: int) -> str:
    return f"layer_{layer:03d}.cpst"


def layer_statistics(cfg: RunConfig, model: Model, layers, out: Path | None) -> dict[int, LayerStatistics]:
    """Load cached statistics from ``cfg.stats_dir`` or estimate (and cache) them."""
    if cfg.stats_dir is not None:
        result = {}
        for layer in layers:
            stats = load_statistics(Path(cfg.stats_dir) / _stats_name(layer))
            if stats.dim != flat_weight(model.layers[layer]).shape[0]:
                raise FormatError(f"cached statistics for layer {layer} do not match the model")
            result[layer] = stats
        return result
    data = estimation_data(cfg, model)
    seed = cfg.subseed("stats")
    result = {}
    for layer in layers:
        try:
            stats = estimate_statistics(
                model, data, layer, cfg.patches, seed, weighted=not cfg.unweighted, workers=cfg.workers
            )
        except DeadActivationError as exc:
            print(f"notice: layer {layer}: {exc}; falling back to unweighted statistics", file=sys.stderr)
            stats = estimate_statistics(model, data, layer, cfg.patches, seed, weighted=False, workers=cfg.workers)
        result[layer] = stats
        if out is not None:
            (out / "stats").mkdir(exist_ok=True)
            save_statistics(stats, out / "stats" / _stats_name(layer))
    return result


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_stats(cfg: RunConfig, out: Path) -> None:
    model = _model(cfg)
    stats = layer_statistics(cfg, model, prune_set(cfg, model), out)
    for layer, s in stats.items():
        print(f"layer {layer}: dim={s.dim} samples={s.sample_count} weight_sum={s.weight_sum:.6g}")


def cmd_search(cfg: RunConfig, out: Path) -> None:
    model = _model(cfg)
    val = validation_data(cfg)
    layers = prune_set(cfg, model)
    stats = layer_statistics(cfg, model, layers, out)
    search_cfg = SearchConfig(
        tolerance=cfg.tol,
        steps=cfg.steps,
        order=cfg.order,
        order_seed=cfg.subseed("order"),
        accuracy_mode=accuracy_mode(cfg, val),
        prune_layers=layers,
        step_constraint=cfg.step_constraint,
        selector=cfg.selector,
        selector_seed=cfg.subseed("selector"),
    )
    pruned, report = structural_search(model, stats, val, search_cfg)
    save_model(pruned, out / "model.cprn")
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    _write_json(out / "flops.json", {"before": flops(model).to_dict(), "after": flops(pruned).to_dict()})
    print(f"top1_drop={report.accuracy_drop:.6f} flops_drop={report.flops_drop:.6f}")


def cmd_prune(cfg: RunConfig, out: Path) -> None:
    model = _model(cfg)
    layers = prune_set(cfg, model)
    stats = layer_statistics(cfg, model, layers, out)
    pruned = model
    for layer in layers:
        pruned, sel = prune_compensated(pruned, layer, stats[layer], cfg.sigma, cfg.selector, cfg.subseed("selector"))
        print(f"layer {layer}: kept {len(sel.retained)}/{sel.all_channels} channels")
    save_model(pruned, out / "model.cprn")
    before, after = flops(model), flops(pruned)
    _write_json(out / "flops.json", {"before": before.to_dict(), "after": after.to_dict()})
    print(f"flops_drop={1.0 - after.total / before.total:.6f}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    model = _model(cfg)
    val = validation_data(cfg)
    mode = accuracy_mode(cfg, val)
    baseline = None
    if mode == "agreement":
        baseline = predict(load_model(_require(cfg.baseline_model, "--baseline-model")), val.images)
    acc = evaluate_accuracy(model, val, mode, baseline)
    _write_json(out / "eval.json", {"mode": mode, "top1": acc, "examples": len(val)})
    print(f"top1={acc:.6f}")


def cmd_flops(cfg: RunConfig, out: Path) -> None:
    model = _model(cfg)
    report = flops(model)
    _write_json(out / "flops.json", report.to_dict())
    for index, count in report.per_layer:
        if count:
            print(f"layer {index} ({type(model.layers[index]).__name__}): {count}")
    print(f"total={report.total}")


def cmd_compare(cfg: RunConfig, out: Path) -> None:
    model = _model(cfg)
    layers = prune_set(cfg, model)
    stats = layer_statistics(cfg, model, layers, out)
    val = mode = targets = None
    if cfg.top1:
        val = validation_data(cfg)
        mode = accuracy_mode(cfg, val)
        targets = predict(model, val.images) if mode == "agreement" else None
    runs = [("cap", 0), ("l2", 0)] + [("random", cfg.subseed(f"random/{r}")) for r in range(cfg.random_seeds)]
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "selector", "seed", "sigma", "recon_loss", "top1"])
        for layer in layers:
            w = flat_weight(model.layers[layer])
            for selector, seed in runs:
                for sigma in cfg.grid:
                    sel = select_channels(selector, stats[layer], w, sigma, seed)
                    loss = reconstruction_loss(w, stats[layer], sel, ridge=True)
                    top1 = ""
                    if cfg.top1:
                        pruned, _ = prune_compensated(model, layer, stats[layer], sigma, selector, seed)
                        top1 = repr(evaluate_accuracy(pruned, val, mode, targets))
                    writer.writerow([layer, selector, seed, repr(sigma), repr(loss), top1])
    print(f"wrote {out / 'compare.csv'}")


def cmd_fixture(cfg: RunConfig, out: Path) -> None:
    model = duplicate_channel_model(seed=cfg.seed)
    save_model(model, out / "model.cprn")
    shape = model.input_shape
    save_raw(Dataset(fixture_images(cfg.n_est, shape, cfg.subseed("fixture/est"))), out / "est.cpds")
    save_raw(labeled_by_model(model, fixture_images(cfg.n_val, shape, cfg.subseed("fixture/val"))), out / "val.cpds")
    print(f"wrote {out / 'model.cprn'}, {out / 'est.cpds'}, {out / 'val.cpds'}")


COMMANDS = {
    "stats": cmd_stats,
    "search": cmd_search,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "compare": cmd_compare,
    "fixture": cmd_fixture,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": args.command, **cfg.to_dict()})
        COMMANDS[args.command](cfg, out)
    except (FormatError, ShapeError) as exc:
        print(f"capprune: format error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"capprune: config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
