"""Command line entry point: ``volt {gen,train,eval,diagnose,grad-check}``.

Configuration precedence, lowest to highest: built-in defaults, ``--preset``,
``--config FILE`` (flat ``key = value``), ``--set key=value``, explicit flags.
The resolved configuration is echoed to the log and written next to outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, coerce, format_config, load_checkpoint, parse_config, save_checkpoint
from .data import DataError, Dataset, build_dataset, load_dataset, view_subset
from .metrics import divergence_report, grid_fscore, iou, reduce_heads, view_divergence
from .model import MICRO, ConfigError, ModelConfig, VoltModel
from .tensor import NumericError, grad_check, make_rng
from .training import TrainConfig, train

log = logging.getLogger("volt")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


@dataclass
class RunConfig:
    # model
    d: int = 64
    heads: int = 4
    d_k: int = 16
    ffn_hidden: int = 256
    enc_layers: int = 6
    dec_layers: int = 6
    grid: int = 16
    token_edge: int = 4
    max_views: int = 24
    variant: str = "evolt"
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 1000
    warmup_steps: int = 0
    random_views: bool = False
    seed: int = 0
    # data
    objects: int = 64
    views: int = 24
    image_size: int = 16
    embed_seed: int = 0

    def validate(self) -> "RunConfig":
        if self.variant not in ("volt", "evolt"):
            raise ConfigError(f"variant must be 'volt' or 'evolt', got {self.variant!r}")
        for name in ("batch_size", "steps", "objects", "views", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("invalid optimiser hyperparameters")
        if not 1 <= self.views <= 24:
            raise ConfigError("views must be in [1, 24]")
        self.model_config()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, heads=self.heads, d_k=self.d_k, ffn_hidden=self.ffn_hidden,
                           enc_layers=self.enc_layers, dec_layers=self.dec_layers, grid=self.grid,
                           token_edge=self.token_edge, max_views=self.max_views,
                           enhance=self.variant == "evolt")

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2,
                           eps=self.eps, batch_size=self.batch_size, steps=self.steps, seed=self.seed,
                           random_views=self.random_views, warmup_steps=self.warmup_steps)

    def echo(self) -> str:
        return format_config(asdict(self))


PRESETS: dict[str, dict] = {
    # memorise 8 objects
    "overfit8": dict(objects=8, views=8, grid=16, token_edge=4, steps=500, lr=1e-3, batch_size=8),
    # VolT/EVolT comparison runs
    "trend": dict(objects=64, views=24, grid=16, token_edge=4, steps=2000, lr=1e-3, batch_size=8,
                  random_views=True),
    "micro": dict(d=MICRO.d, heads=MICRO.heads, d_k=MICRO.d_k, ffn_hidden=MICRO.ffn_hidden,
                  enc_layers=MICRO.enc_layers, dec_layers=MICRO.dec_layers, grid=MICRO.grid,
                  token_edge=MICRO.token_edge, views=2, objects=2),
    # published training scale: 32^3 output, batch 64
    "full": dict(grid=32, batch_size=64, views=24),
}

FIELD_TYPES = {f.name: f.default for f in fields(RunConfig)}


def _apply(cfg: RunConfig, values: dict, source: str) -> RunConfig:
    unknown = set(values) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {sorted(unknown)}")
    try:
        typed = {k: coerce(v, FIELD_TYPES[k]) if isinstance(v, str) else v for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return replace(cfg, **typed)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        cfg = _apply(cfg, PRESETS[args.preset], f"preset {args.preset}")
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        try:
            cfg = _apply(cfg, parse_config(text), str(args.config))
        except CheckpointError as exc:
            raise ConfigError(str(exc)) from exc
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = _apply(cfg, overrides, "--set")
    flags = {k: getattr(args, k) for k in FIELD_TYPES if getattr(args, k, None) is not None}
    cfg = _apply(cfg, flags, "flags")
    return cfg.validate()


def _echo(cfg: RunConfig, out: Path | None):
    text = cfg.echo()
    for line in text.splitlines():
        log.info("config %s", line)
    if out is not None:
        (out / "config.txt").write_text(text)


def _threads() -> int:
    n = int(os.environ.get("VOLT_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def predict_many(model: VoltModel, views: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Predict grids for ``(n, M, d)`` views, chunked over a thread pool; output order is input order."""
    chunks = [views[i:i + chunk] for i in range(0, len(views), chunk)]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(model.predict_volume, chunks))
    return np.concatenate(parts) if parts else np.empty((0,) + (model.config.grid,) * 3)


def _load_data(path) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc


def _select(ds: Dataset, split: str) -> Dataset:
    if split == "all":
        return ds
    train_ids, val_ids = ds.split()
    return ds.subset(train_ids if split == "train" else val_ids)


def _check_compatible(model: VoltModel, ds: Dataset, args):
    c = model.config
    for flag, attr in (("d", "d"), ("grid", "grid"), ("token_edge", "token_edge")):
        want = getattr(args, flag, None)
        if want is not None and want != getattr(c, attr):
            raise ConfigError(f"--{flag.replace('_', '-')} {want} disagrees with checkpoint value {getattr(c, attr)}")
    if ds.d != c.d or ds.g != c.grid:
        raise ConfigError(f"dataset (d={ds.d}, G={ds.g}) does not match checkpoint (d={c.d}, G={c.grid})")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        log.error("output directory %s is not empty; pass --force to overwrite", out)
        return EXIT_DATA
    ds = build_dataset(cfg.objects, cfg.views, cfg.grid, seed=cfg.seed, p=cfg.image_size, d=cfg.d,
                       embed_seed=cfg.embed_seed)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    manifest = ds.save(out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    if args.data:
        ds = _load_data(args.data)
        if ds.d != cfg.d or ds.g != cfg.grid:
            raise ConfigError(f"dataset (d={ds.d}, G={ds.g}) does not match config (d={cfg.d}, G={cfg.grid})")
        if args.split != "all":
            ds = _select(ds, args.split)
    else:
        ds = build_dataset(cfg.objects, cfg.views, cfg.grid, seed=cfg.seed, p=cfg.image_size, d=cfg.d,
                           embed_seed=cfg.embed_seed)
    result = train(ds, cfg.model_config(), cfg.train_config(), log_path=out / "train_log.csv")
    save_checkpoint(out / "checkpoint.vltc", result.model, asdict(cfg))
    best = result.log[result.best_epoch]
    print(f"best epoch {best['epoch']} loss {best['loss']:.6f} train_iou {best['train_iou']:.6f}")
    return 0


def _load_model(args) -> VoltModel:
    try:
        model, _, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    return model


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _eval_views(ds: Dataset, k: int, shuffle_seed: int | None) -> np.ndarray:
    views = ds.views_array(k)
    if shuffle_seed is not None:
        rng = make_rng(shuffle_seed, "eval/shuffle")
        views = np.stack([v[rng.permutation(len(v))] for v in views])
    return views


def evaluate(model: VoltModel, ds: Dataset, view_counts: list[int], thresholds: list[float],
             shuffle_seed: int | None = None) -> tuple[list[dict], float, list[dict]]:
    """Per-object metrics for every view count at the threshold with the best mean IoU.

    Returns ``(rows, chosen_threshold, sweep_rows)``.
    """
    gts = ds.grids_array()
    preds = {k: predict_many(model, _eval_views(ds, k, shuffle_seed)) for k in view_counts}
    sweep = []
    for t in thresholds:
        ious = [iou(p, g, t) for k in view_counts for p, g in zip(preds[k], gts)]
        sweep.append({"threshold": t, "mean_iou": float(np.mean(ious))})
    best_t = max(sweep, key=lambda r: r["mean_iou"])["threshold"]
    rows = []
    for k in view_counts:
        for s, p, g in zip(ds.samples, preds[k], gts):
            f, prec, rec = grid_fscore(p, g, best_t)
            rows.append({"object_id": s.object_id, "views": k, "iou": iou(p, g, best_t), "fscore": f,
                         "precision": prec, "recall": rec})
    return rows, best_t, sweep


def _write_csv(path: Path, header: list[str], rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_eval(args) -> int:
    model = _load_model(args)
    ds = _select(_load_data(args.data), args.split)
    _check_compatible(model, ds, args)
    counts = [int(x) for x in _parse_floats(args.view_counts)] if args.view_counts else [ds.m_views]
    if any(not 1 <= k <= ds.m_views for k in counts):
        raise ConfigError(f"view counts must be within 1..{ds.m_views}")
    thresholds = [args.threshold] if args.threshold is not None else _parse_floats(args.thresholds)
    rows, t, sweep = evaluate(model, ds, counts, thresholds, args.shuffle_views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", ["object_id", "views", "iou", "fscore", "precision", "recall"], rows)
    _write_csv(out / "threshold_sweep.csv", ["threshold", "mean_iou"], sweep)
    print(f"threshold {t}")
    for k in counts:
        sel = [r for r in rows if r["views"] == k]
        print(f"views {k}: mean iou {np.mean([r['iou'] for r in sel]):.6f} "
              f"mean fscore {np.mean([r['fscore'] for r in sel]):.6f}")
    return 0


def cmd_diagnose(args) -> int:
    model = _load_model(args)
    ds = _select(_load_data(args.data), args.split)
    _check_compatible(model, ds, args)
    if args.n_objects:
        ds = ds.subset([s.object_id for s in ds.samples[:args.n_objects]])
    k = args.view_count or ds.m_views
    head = None if args.head == "mean" else int(args.head)
    report = divergence_report(model, ds.views_array(k), head=head, keep_scores=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [s.object_id for s in ds.samples]
    att_rows = []
    for (obj, layer), scores in sorted(report.scores.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if obj >= args.export_objects:
            continue
        for h, mat in enumerate(scores):
            for r, c in np.ndindex(mat.shape):
                att_rows.append({"layer": layer, "object_id": ids[obj], "head": h, "row": r, "col": c,
                                 "score": float(mat[r, c])})
    _write_csv(out / "attention.csv", ["layer", "object_id", "head", "row", "col", "score"], att_rows)
    div_rows = [{"layer": L.layer, "object_id": ids[i], "D": float(v)} for L in report.layers for i, v in enumerate(L.D)]
    _write_csv(out / "divergence.csv", ["layer", "object_id", "D"], div_rows)
    kde_rows = [{"layer": L.layer, "D_grid": float(x), "density": float(y)}
                for L in report.layers for x, y in zip(L.grid, L.density)]
    _write_csv(out / "kde.csv", ["layer", "D_grid", "density"], kde_rows)
    for L in report.layers:
        flag = " (bandwidth fallback)" if L.bandwidth_fallback else ""
        print(f"layer {L.layer}: mean D {L.D.mean():.6f} h {L.bandwidth:.3g}{flag}")
    return 0


def cmd_grad_check(args) -> int:
    if getattr(args, "preset", None) is None:
        args.preset = "micro"
    cfg = resolve_config(args)
    model = VoltModel(cfg.model_config(), seed=cfg.seed)
    rng = make_rng(cfg.seed, "grad-check")
    # a zero head would make every upstream gradient exactly zero
    model.params.set_value("head.w", rng.normal(0.0, 0.5, model.params["head.w"].shape))
    model.params.set_value("head.b", rng.normal(0.0, 0.1, model.params["head.b"].shape))
    views = rng.normal(size=(cfg.views, cfg.d))
    gt = (rng.random((cfg.grid,) * 3) < 0.5).astype(float)
    err = grad_check(lambda p: model.loss(views, gt), model.params, epsilon=args.epsilon)
    print(f"max relative error {err:.3e} over {model.params.count()} parameters")
    return 0 if err < args.tolerance else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _shared(p: argparse.ArgumentParser, model_flags: bool = True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--variant", choices=("volt", "evolt"))
    p.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    if model_flags:
        for name in ("d", "heads", "d_k", "ffn_hidden", "enc_layers", "dec_layers", "token_edge", "max_views"):
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
        p.add_argument("--grid", "--g", dest="grid", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volt", description=__doc__.split("\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _shared(p)
    p.add_argument("--objects", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--embed-seed", dest="embed_seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    _shared(p)
    p.add_argument("--data", help="dataset directory; generated from the config when omitted")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--objects", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--embed-seed", dest="embed_seed", type=int)
    for name, typ in (("lr", float), ("weight_decay", float), ("batch_size", int), ("steps", int),
                      ("warmup_steps", int)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--random-views", dest="random_views", action="store_const", const=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "reconstruction metrics"),
                                 ("diagnose", cmd_diagnose, "attention divergence exports")):
        p = sub.add_parser(name, help=helptext)
        _shared(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("all", "train", "val"), default="all")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--view-counts", help="comma separated, e.g. 2,8,24 (default: all views)")
            p.add_argument("--thresholds", default="0.2,0.3,0.4,0.5")
            p.add_argument("--threshold", type=float, help="fixed threshold instead of a sweep")
            p.add_argument("--shuffle-views", type=int, metavar="SEED", help="permute view order per object")
        else:
            p.add_argument("--view-count", type=int)
            p.add_argument("--n-objects", type=int, help="use only the first N objects")
            p.add_argument("--export-objects", type=int, default=5, help="attention matrices exported for first K")
            p.add_argument("--head", default="mean", help="'mean' or a head index")

    p = sub.add_parser("grad-check", help="compare backprop with central differences")
    _shared(p)
    p.add_argument("--views", type=int)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
