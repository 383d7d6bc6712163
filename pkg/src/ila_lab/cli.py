"""``ila-lab`` command line: train, lr-search, eval, analyze.

Exit codes: 0 ok, 2 configuration / checkpoint mismatch, 3 divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    attention_cka_matrix,
    cost_report,
    count_flops,
    emit_report,
    ttp_discrepancy_note,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ExperimentConfig,
    apply_overrides,
    check_warmup,
    dump_config,
    parse_config,
    read_raw,
)
from .data import Split
from .errors import CheckpointError, ConfigError, DivergenceError, IlaLabError
from .ila import IlaConfig, Variant
from .model import Model, build_model
from .pretrain import pretrained_backbone
from .train import eval_images, evaluate_top1, lr_search, search_config, stratified_split, train_model

logger = logging.getLogger("ila_lab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

SUMMARY_COLUMNS = ["variant", "rsds_mode", "dataset", "seed", "base_lr", "top1", "total_params", "trainable_params"]


# ---------------------------------------------------------------- helpers


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _resolve(args) -> tuple[dict, ExperimentConfig]:
    raw = read_raw(args.config)
    raw = apply_overrides(
        raw,
        variant=getattr(args, "variant", None),
        rsds=getattr(args, "rsds", None),
        image_size=getattr(args, "image_size", None),
        out=getattr(args, "out", None),
        seeds=getattr(args, "seeds", None),
    )
    return raw, parse_config(raw)


def _load_data(cfg: ExperimentConfig) -> tuple[Split, Split]:
    train, test = cfg.data.load(cfg.model.image_size)
    if train.num_classes != cfg.model.num_classes:
        raise ConfigError(f"dataset has {train.num_classes} classes, model head has {cfg.model.num_classes}")
    try:
        check_warmup(cfg.training, len(train))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return train, test


def _backbone(cfg: ExperimentConfig, cache: bool = True) -> Optional[dict]:
    if cfg.pretrain is None:
        return None
    cache_dir = Path(cfg.output_dir) / "cache" if cache else None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
    return pretrained_backbone(cfg.model, cfg.pretrain, cache_dir)


def _model(cfg: ExperimentConfig, seed: int, backbone: Optional[dict]) -> Model:
    return build_model(cfg.model, cfg.adapter, seed=seed, dtype=cfg.training.dtype, backbone=backbone)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v: float) -> str:
    return repr(round(float(v), 6))


def _map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- train


def _train_one(job: tuple) -> dict:
    cfg_json, seed, backbone = job
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    train, test = _load_data(cfg)
    model = _model(cfg, seed, backbone)
    tcfg = cfg.training.model_copy(update={"seed": seed})
    report = train_model(model, train, test, tcfg)
    run_dir = Path(cfg.output_dir) / f"seed{seed}"
    meta = {"seed": seed, "variant": cfg.adapter.variant.value, "rsds_mode": cfg.adapter.rsds_mode.value}
    save_checkpoint(run_dir / "model.ckpt", model, "all", meta)
    save_checkpoint(run_dir / "adapter.ckpt", model, "trainable", meta)
    save_checkpoint(run_dir / "backbone.ckpt", model, "backbone", meta)
    doc = report.to_dict()
    total = sum(t.size for t in model.params.values())
    trainable = sum(t.size for t in model.trainable().values())
    doc.update({"total_params": total, "trainable_params": trainable})
    _write(run_dir / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def summary_rows(cfg: ExperimentConfig, docs: list[dict]) -> list[list[str]]:
    base = [cfg.adapter.variant.value, cfg.adapter.rsds_mode.value, cfg.data.name]
    rows = [
        base + [str(d["seed"]), _num(d["base_lr"]), _num(d["final_eval_top1"]), str(d["total_params"]), str(d["trainable_params"])]
        for d in docs
    ]
    accs = np.array([d["final_eval_top1"] for d in docs])
    std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
    first = docs[0]
    for label, value in (("mean", float(accs.mean())), ("std", std)):
        rows.append(base + [label, _num(first["base_lr"]), _num(value), str(first["total_params"]), str(first["trainable_params"])])
    return rows


def cmd_train(args) -> int:
    raw, cfg = _resolve(args)
    _load_data(cfg)  # fail fast on data/model mismatch
    out = Path(cfg.output_dir)
    backbone = _backbone(cfg)
    cfg_json = cfg.model_dump_json()
    docs = _map(_train_one, [(cfg_json, s, backbone) for s in cfg.seeds], args.jobs)
    _write(out / "config.json", dump_config(cfg))
    _write(out / "report.json", json.dumps({"runs": docs}, indent=2, sort_keys=True) + "\n")
    _write(out / "summary.csv", _csv_text(SUMMARY_COLUMNS, summary_rows(cfg, docs)))
    for d in docs:
        print(f"seed {d['seed']}: top-1 {d['final_eval_top1']:.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------- lr-search


def _search_one(job: tuple):
    """Validation top-1 for one grid LR, or ``("diverged", step, loss)``."""
    cfg_json, lr, backbone, tr_idx, val_idx = job
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    train, _ = cfg.data.load(cfg.model.image_size)
    seed = cfg.seeds[0]
    model = _model(cfg, seed, backbone)
    tcfg = search_config(cfg.training.model_copy(update={"seed": seed}), lr)
    try:
        return train_model(model, train.subset(tr_idx), train.subset(val_idx), tcfg).final_eval_top1
    except DivergenceError as exc:
        return ("diverged", exc.step, exc.loss)


def cmd_lr_search(args) -> int:
    raw, cfg = _resolve(args)
    train, _ = _load_data(cfg)
    backbone = _backbone(cfg)
    seed = cfg.seeds[0]
    tcfg = cfg.training.model_copy(update={"seed": seed})
    tr_idx, val_idx = stratified_split(train.labels, tcfg.val_fraction, seed)
    lrs = sorted(tcfg.lr_grid)
    cfg_json = cfg.model_dump_json()
    results = _map(_search_one, [(cfg_json, lr, backbone, tr_idx, val_idx) for lr in lrs], args.jobs)
    outcomes = dict(zip(lrs, results))

    def run(lr: float, sub: Split, val: Split) -> float:
        res = outcomes[lr]
        if isinstance(res, tuple):
            raise DivergenceError(res[1], res[2])
        return float(res)

    result = lr_search(lambda: _model(cfg, seed, backbone), train, tcfg, run=run)
    out = Path(cfg.output_dir)
    rows = [
        [_num(r["lr"]), "" if r["val_top1"] is None else _num(r["val_top1"]), r["status"], str(r["lr"] == result.chosen_lr).lower()]
        for r in result.rows
    ]
    _write(out / "lr_search.csv", _csv_text(["lr", "val_top1", "status", "chosen"], rows))
    tuned = read_raw(args.config)
    tuned.setdefault("training", {})["base_lr"] = result.chosen_lr
    _write(out / "tuned_config.json", json.dumps(tuned, indent=2) + "\n")
    print(f"chosen lr {result.chosen_lr}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    raw, cfg = _resolve(args)
    if not args.checkpoint:
        raise ConfigError("eval needs at least one --checkpoint")
    _, test = cfg.data.load(cfg.model.image_size)
    if test.num_classes != cfg.model.num_classes:
        raise ConfigError(f"dataset has {test.num_classes} classes, model head has {cfg.model.num_classes}")
    model = _model(cfg, cfg.seeds[0], None)
    meta = load_checkpoint(model, args.checkpoint)
    top1 = evaluate_top1(model, test)
    out = Path(cfg.output_dir)
    row = [
        cfg.adapter.variant.value, cfg.adapter.rsds_mode.value, cfg.data.name,
        str(meta.get("seed", "")), _num(top1), ";".join(Path(c).name for c in args.checkpoint),
    ]
    _write(out / "eval.csv", _csv_text(["variant", "rsds_mode", "dataset", "seed", "top1", "checkpoints"], [row]))
    print(f"top-1 {top1:.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def probe_indices(n: int, size: int) -> np.ndarray:
    """Evenly spaced test indices so the probe spans every class block."""
    if n < size:
        raise ConfigError(f"test split has {n} images, probe needs {size}")
    return np.floor(np.arange(size) * (n / size)).astype(np.int64)


def cmd_analyze(args) -> int:
    raw, cfg = _resolve(args)
    vanilla = count_flops(cfg.model, IlaConfig(variant=Variant.NONE))
    reports = [vanilla]
    if cfg.adapter.variant is not Variant.NONE:
        reports.append(count_flops(cfg.model, cfg.adapter))
    seed = cfg.seeds[0]
    if args.checkpoint:
        model = _model(cfg, seed, None)
        load_checkpoint(model, args.checkpoint)
    else:
        model = _model(cfg, seed, _backbone(cfg, cache=False))
    cost_report(model)  # cross-checks analytic parameter counts against the tensors
    _, test = cfg.data.load(cfg.model.image_size)
    probe = eval_images(test.subset(probe_indices(len(test), cfg.probe_size)), cfg.model.image_size)
    cka = attention_cka_matrix(model, probe)
    extra = {"ttp_accounting": ttp_discrepancy_note(cfg.model), "mean_offdiag_cka": cka.mean_off_diagonal()}
    emit_report(cfg.output_dir, reports, cka, extra)
    for r in reports:
        print(f"{r.label}: {r.flops_forward / 1e9:.4f} GFLOPs, trainable {r.trainable_params} / {r.total_params}")
    print(f"mean off-diagonal attention CKA {cka.mean_off_diagonal():.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ila-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 1,2,3")
        p.add_argument("--variant", choices=[v.value for v in Variant])
        p.add_argument("--rsds", choices=["dwc-near-ones", "dwc-normal", "avgpool", "conv", "none"])
        p.add_argument("--image-size", type=int, dest="image_size")
        p.add_argument("--jobs", type=int, default=1, help="concurrent runs (seeds or learning rates)")

    for name, fn, help_text in (
        ("train", cmd_train, "train one model per seed"),
        ("lr-search", cmd_lr_search, "pick base_lr from the grid on a validation split"),
        ("eval", cmd_eval, "evaluate composed checkpoints on the test split"),
        ("analyze", cmd_analyze, "parameter/FLOP cost report and attention CKA"),
    ):
        p = sub.add_parser(name, help=help_text)
        common(p)
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", action="append", default=[], help="checkpoint file; repeat to compose")
        p.set_defaults(func=fn)
    return parser


def _thread_limit():
    value = os.environ.get("ILA_LAB_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"ILA_LAB_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("ILA_LAB_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IlaLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
