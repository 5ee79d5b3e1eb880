"""``weightaug`` command line: train, eval, sweep, flops.

Exit codes: 0 success, 2 invalid config/usage/data, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .checkpoint import Checkpoint
from .config import DATA_ROOT_ENV, ExperimentConfig, load_config
from .data import DataPerturbSpec, Dataset, perturb_testset, read_dataset, subset
from .dualmode import MaterializedModel, ModeConfig, dom_average_stats, evaluate_top1, materialize
from .errors import NonFiniteLossError, WeightAugError
from .metrics import MetricsRecord, drop_rate, records_to_csv
from .shadow import EpochLog, train
from .transforms import TransformSpec

log = logging.getLogger("weightaug")

LOG_COLUMNS = ("epoch", "train_loss", "test_top1_aom", "test_top1_dom")


def _stamp(args) -> str | None:
    if getattr(args, "no_timestamp", False):
        return None
    return f"generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}"


def _parent(path: str) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(_parent(path)).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def load_data(dataset: str, root: str, train_subset: int = 0, test_subset: int = 0,
              subset_seed: int = 0) -> tuple[Dataset, Dataset]:
    try:
        train_set, test_set = read_dataset(dataset, root)
    except FileNotFoundError as exc:
        raise WeightAugError(f"data.root: {exc} (set data.root or ${DATA_ROOT_ENV})") from None
    if train_subset:
        train_set = subset(train_set, train_subset, subset_seed)
    if test_subset:
        test_set = subset(test_set, test_subset, subset_seed + 1)
    return train_set, test_set


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or cfg.out_checkpoint
    log_path = args.log or cfg.out_log or str(Path(out).with_suffix(".csv"))
    arch = cfg.arch()
    train_set, test_set = load_data(cfg.dataset, cfg.data_root, cfg.train_subset, cfg.test_subset,
                                    cfg.subset_seed)
    stamp = _stamp(args)
    _parent(out)
    with open(_parent(log_path), "w", encoding="utf-8", newline="") as fh:
        if stamp:
            fh.write(f"# {stamp}\n")
        csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    def on_epoch(rec: EpochLog) -> None:
        with open(log_path, "a", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [rec.epoch, _fmt(rec.train_loss), _fmt(rec.test_top1_aom), _fmt(rec.test_top1_dom)])

    ckpt = train(cfg.train, arch, train_set, test_set, on_epoch=on_epoch, meta=cfg.data_meta)
    ckpt.save(out)
    log.info("wrote %s and %s", out, log_path)
    return 0


@dataclass(frozen=True)
class _Measured:
    model: MaterializedModel
    clean: float


def _measure(ckpt: Checkpoint, mode: ModeConfig, test_set: Dataset, batch: int) -> _Measured:
    model = materialize(ckpt, mode)
    return _Measured(model, evaluate_top1(model, test_set.images, test_set.labels, batch))


def _record(tag: str, m: _Measured, perturb: str, top1: float) -> MetricsRecord:
    return MetricsRecord(tag, m.model.mode, perturb, top1, drop_rate(m.clean, top1), m.model.flops(),
                         m.model.sparsity)


def eval_records(ckpt: Checkpoint, modes: Sequence[ModeConfig], test_set: Dataset,
                 perturbs: Sequence[DataPerturbSpec], perturb_seed: int = 0, tag: str = "",
                 batch: int = 500, workers: int = 1) -> list[MetricsRecord]:
    """Clean row plus one row per perturbation, for each mode; order follows the inputs."""
    perturbed = [perturb_testset(test_set, p, perturb_seed) for p in perturbs]
    rows: list[MetricsRecord] = []
    for mode in modes:
        m = _measure(ckpt, mode, test_set, batch)
        rows.append(_record(tag, m, "none", m.clean))

        def score(ds: Dataset, m=m) -> float:
            return evaluate_top1(m.model, ds.images, ds.labels, batch)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                scores = list(pool.map(score, perturbed))
        else:
            scores = [score(ds) for ds in perturbed]
        rows += [_record(tag, m, p.to_text(), s) for p, s in zip(perturbs, scores)]
    return rows


def _ckpt_data(ckpt: Checkpoint, args) -> Dataset:
    meta = ckpt.meta
    dataset = args.dataset or meta.get("dataset", "cifar10")
    root = args.data or _default_root()
    test_subset = meta.get("test_subset", 0) if args.test_subset is None else args.test_subset
    seed = int(meta.get("subset_seed", 0))
    _, test_set = load_data(dataset, root, 0, test_subset, seed)
    return test_set


def _default_root() -> str:
    return os.environ.get(DATA_ROOT_ENV, "data")


def cmd_eval(args) -> int:
    perturbs = [DataPerturbSpec.parse(p) for p in args.perturb]
    mode = ModeConfig(args.mode, args.dom_seed)
    ckpt = Checkpoint.load(args.checkpoint)
    test_set = _ckpt_data(ckpt, args)
    rows = eval_records(ckpt, [mode], test_set, perturbs, args.perturb_seed, args.tag or Path(args.checkpoint).stem)
    _emit(records_to_csv(rows, _stamp(args)), args.out)
    return 0


def sweep_table(rows: Sequence[MetricsRecord]) -> str:
    """Markdown table: one line per (WAS spec, perturbation) cell, AOM/DOM side by side."""
    cells: dict[tuple[str, str], dict[str, MetricsRecord]] = {}
    for r in rows:
        if r.perturb != "none":
            cells.setdefault((r.tag, r.perturb), {})[r.mode] = r
    lines = ["| WAS | perturb | AOM top-1 | DOM top-1 | AOM drop | DOM drop | DOM FLOPs (M) | DOM sparsity (%) |",
             "|---|---|---|---|---|---|---|---|"]
    for (tag, perturb), by_mode in cells.items():
        a, d = by_mode["aom"], by_mode["dom"]
        lines.append(f"| {tag} | {perturb} | {a.top1:.2f} | {d.top1:.2f} | {a.drop_rate:.2f} | "
                     f"{d.drop_rate:.2f} | {d.flops / 1e6:.3f} | {100 * d.sparsity_rate:.2f} |")
    return "\n".join(lines) + "\n"


def run_sweep(cfg: ExperimentConfig, train_set: Dataset, test_set: Dataset) -> list[MetricsRecord]:
    _check_grid(cfg)
    arch = cfg.arch()
    rows: list[MetricsRecord] = []
    for spec in cfg.sweep_was:
        run = cfg.with_was(cfg.sweep_group, spec)
        ckpt = train(run.train, arch, train_set, meta=run.data_meta)
        rows += [r for r in eval_records(ckpt, [ModeConfig("aom"), ModeConfig("dom")], test_set,
                                         cfg.sweep_perturbs, cfg.perturb_seed, spec.to_text(),
                                         workers=cfg.sweep_workers)
                 if r.perturb != "none"]
    return rows


def _check_grid(cfg: ExperimentConfig) -> None:
    cells = len(cfg.sweep_was) * len(cfg.sweep_perturbs)
    if cells == 0:
        raise WeightAugError("sweep: empty grid (need sweep.was and sweep.perturb)")
    if cells > cfg.sweep_max_cells:
        raise WeightAugError(f"sweep.max_cells: grid has {cells} cells, cap is {cfg.sweep_max_cells}")


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    _check_grid(cfg)
    train_set, test_set = load_data(cfg.dataset, cfg.data_root, cfg.train_subset, cfg.test_subset,
                                    cfg.subset_seed)
    rows = run_sweep(cfg, train_set, test_set)
    _emit(records_to_csv(rows, _stamp(args)), args.out or cfg.out_csv or None)
    table = sweep_table(rows)
    table_path = args.table or cfg.out_table
    if table_path:
        Path(_parent(table_path)).write_text(table, encoding="utf-8")
    elif args.out or cfg.out_csv:
        sys.stdout.write(table)
    return 0


def flops_report(ckpt: Checkpoint, mode: str, n_samples: int, dom_seed: int | None = None,
                 spec: TransformSpec | None = None) -> list[tuple[str, str]]:
    stats = dom_average_stats(ckpt, spec, n_samples, dom_seed)
    if mode == "aom":
        mean_flops, mean_sparsity = stats.dense_flops, 0.0
    else:
        mean_flops, mean_sparsity = stats.mean_flops, stats.mean_sparsity
    return [("mode", mode), ("n_samples", str(n_samples)),
            ("dense_flops_m", f"{stats.dense_flops / 1e6:.6f}"),
            ("mean_flops_m", f"{mean_flops / 1e6:.6f}"),
            ("mean_sparsity", f"{mean_sparsity:.6f}")]


def cmd_flops(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    buf = io.StringIO()
    stamp = _stamp(args)
    if stamp:
        buf.write(f"# {stamp}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("metric", "value"))
    writer.writerows(flops_report(ckpt, args.mode, args.n_samples, args.dom_seed))
    _emit(buf.getvalue(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weightaug", description="Weight-augmented CNN training and dual-mode evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--no-timestamp", action="store_true", help="omit the timestamp comment line")
        sp.add_argument("--out", help="output path (default: stdout / config)")

    t = sub.add_parser("train", help="train a model with shadow weights")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="per-epoch CSV (default: <out>.csv)")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 and drop rates of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--mode", choices=("aom", "dom"), default="aom")
    e.add_argument("--dom-seed", type=int)
    e.add_argument("--perturb", action="append", default=[], metavar="KIND:LO,HI")
    e.add_argument("--perturb-seed", type=int, default=0)
    e.add_argument("--data", help=f"data root (default: ${DATA_ROOT_ENV} or ./data)")
    e.add_argument("--dataset", help="dataset id (default: recorded in the checkpoint)")
    e.add_argument("--test-subset", type=int)
    e.add_argument("--tag")
    common(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train/evaluate a WAS x perturbation grid")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--table", help="markdown table path")
    common(s)
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("flops", help="dense and DOM-average FLOPs and sparsity")
    f.add_argument("checkpoint")
    f.add_argument("--mode", choices=("aom", "dom"), default="dom")
    f.add_argument("--n-samples", type=int, default=100)
    f.add_argument("--dom-seed", type=int)
    common(f)
    f.set_defaults(func=cmd_flops)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (WeightAugError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
