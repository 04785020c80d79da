"""Command-line entry point: ``xar train|evaluate|query|report|synth``.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numkit as nk
from .datakit import (
    DataError,
    PaddingSpec,
    SynthExpert,
    embed_tokens,
    load_dataset,
    pad_batch,
    split_arrays,
    synth_generate,
    tokenize_caption,
)
from .encoders import Model
from .numkit import NumericalError
from .objectives import RetrievalReport, aggregate_seeds, format_mean_std
from .trainer import (
    ConfigError,
    TrainConfig,
    check_compatible,
    embed_split,
    evaluate,
    load_checkpoint,
    model_config_for,
    run_experiment,
    save_checkpoint,
)

log = logging.getLogger("xar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def thread_limit():
    """Honour XAR_THREADS (0 or 1 = single-threaded, deterministic)."""
    raw = os.environ.get("XAR_THREADS")
    if raw is None:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"XAR_THREADS must be an integer, got {raw!r}") from exc
    return threadpool_limits(limits=max(n, 1))


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} does not parse: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"model", "train", "padding", "label"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return doc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset_padding(ds, fallback: PaddingSpec | None) -> PaddingSpec:
    return ds.padding or fallback or PaddingSpec()


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    doc = _read_config(args.config)
    if args.init and not (Path(args.init) / "params.json").is_file():
        raise ConfigError(f"--init {args.init} is not a checkpoint directory")
    ds = load_dataset(args.data)
    train_section = dict(doc.get("train", {}))
    if args.seed is not None:
        train_section["base_seed"] = args.seed
    if args.train_fraction is not None:
        train_section["train_fraction"] = args.train_fraction
    try:
        train_cfg = TrainConfig.from_dict(train_section)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    model_cfg = model_config_for(ds, doc.get("model"))
    padding = PaddingSpec.from_dict(doc["padding"]) if "padding" in doc else _dataset_padding(ds, None)
    init = load_checkpoint(args.init) if args.init else None
    label = doc.get("label") or f"{model_cfg.arch}: {'+'.join(model_cfg.expert_names)}"

    result = run_experiment(model_cfg, train_cfg, ds, init=init, padding=padding, label=label)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for run in result.runs:
        save_checkpoint(run.checkpoint, out / "seeds" / f"seed_{run.seed}")
    save_checkpoint(result.best_run.checkpoint, out)
    report = {
        "label": label,
        "train_fraction": train_cfg.train_fraction,
        "train_size": result.runs[0].train_size,
        "seeds": train_cfg.seed_list,
        "reports": [result.reports[d].to_dict() for d in ("t2a", "a2t")],
    }
    _write_json(out / "report.json", report)
    print(_recall_table(result.reports))
    return EXIT_OK


def _load_model_for(ckpt_dir: str, data_dir: str):
    ckpt = load_checkpoint(ckpt_dir)
    ds = load_dataset(data_dir)
    dims = dict(ds.experts)
    for e in ckpt.model_config.experts:
        if e.name not in dims:
            raise ConfigError(f"checkpoint expert {e.name!r} is missing from the dataset (has {sorted(dims)})")
        if dims[e.name] != e.dim:
            raise ConfigError(f"expert {e.name!r}: checkpoint dim {e.dim}, dataset dim {dims[e.name]}")
    if ds.word_dim != ckpt.model_config.word_dim:
        raise ConfigError(f"word vectors are {ds.word_dim}-d, checkpoint expects {ckpt.model_config.word_dim}")
    check_compatible(ckpt.params, ckpt.model_config)
    return ckpt, ds


def _recall_table(reports) -> str:
    lines = [f"{'direction':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'geom':>8}"]
    for d in ("t2a", "a2t"):
        r = reports[d]
        lines.append(f"{d:<10}" + "".join(f"{r.recalls.get(k, float('nan')):>8.1f}" for k in (1, 5, 10))
                     + f"{r.geom_mean:>8.1f}")
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    ckpt, ds = _load_model_for(args.ckpt, args.data)
    samples = ds.split(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty (available: {ds.split_names()})")
    arrays = split_arrays(ds, samples, ckpt.model_config.expert_names, _dataset_padding(ds, ckpt.padding))
    reports = evaluate(Model(ckpt.params), arrays)
    if args.json:
        doc = {
            "split": args.split,
            "pool": arrays.n_samples,
            "recalls": {d: reports[d].to_dict()["recalls"] for d in ("t2a", "a2t")},
            "geom_mean": {d: reports[d].geom_mean for d in ("t2a", "a2t")},
            "reports": [reports[d].to_dict() for d in ("t2a", "a2t")],
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(f"split {args.split}, pool {arrays.n_samples}")
        print(_recall_table(reports))
    return EXIT_OK


def cmd_query(args) -> int:
    ckpt, ds = _load_model_for(args.ckpt, args.data)
    try:
        tokens = tokenize_caption(args.text)
    except DataError as exc:
        raise UsageError(f"empty query: {exc}") from exc
    samples = ds.split(args.split) if args.split else ds.samples
    if not samples:
        raise DataError("gallery is empty")
    padding = _dataset_padding(ds, ckpt.padding)
    names = ckpt.model_config.expert_names
    model = Model(ckpt.params)
    arrays = split_arrays(ds, samples, names, padding)
    audio, _ = embed_split(model, arrays)
    batch = pad_batch([embed_tokens(tokens, ds.word_table, ds.word_dim)], padding.text, ds.word_dim)
    with nk.no_grad():
        text = model.encode_text(batch.values, batch.mask)
        scores = model.similarity(audio, text).data[0]
    topk = args.topk
    if topk > len(samples):
        print(f"warning: --topk {topk} exceeds gallery size {len(samples)}; returning all", file=sys.stderr)
        topk = len(samples)
    order = np.argsort(-scores, kind="stable")[:topk]
    for rank, j in enumerate(order, 1):
        print(f"{rank}\t{arrays.sample_ids[j]}\t{scores[j]:.4f}")
    return EXIT_OK


def _reports_in(path: Path) -> tuple[str | None, list[RetrievalReport]]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read run report {path}: {exc}") from exc
    try:
        if "reports" in doc:
            reps = [RetrievalReport.from_dict(r) for r in doc["reports"]]
            return doc.get("label"), reps
        rep = RetrievalReport.from_dict(doc)
        return rep.label, [rep]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path} is not a run report: {exc}") from exc


def report_table(paths: Sequence[Path]) -> str:
    groups: dict[str, dict[str, list[RetrievalReport]]] = {}
    layouts: dict[str, set] = {}
    for path in paths:
        label, reps = _reports_in(path)
        label = label or "default"
        dirs = frozenset(r.direction for r in reps)
        if len(dirs) != len(reps):
            raise UsageError(f"{path} repeats a direction")
        layouts.setdefault(label, set()).add(dirs)
        if len(layouts[label]) > 1:
            raise UsageError(f"configuration {label!r} mixes run files with different directions")
        for r in reps:
            groups.setdefault(label, {}).setdefault(r.direction, []).append(r)

    cols = [("t2a", 1), ("t2a", 10), ("a2t", 1), ("a2t", 10)]
    width = max([len("Config")] + [len(k) for k in groups])
    header = f"{'Config':<{width}}" + "".join(f" | {d} R@{k:<3}" for d, k in cols)
    lines = [header, "-" * len(header)]
    for label, by_dir in groups.items():
        cells = []
        agg = {}
        for d, reps in by_dir.items():
            try:
                agg[d] = aggregate_seeds(reps)
            except ValueError as exc:
                raise UsageError(f"configuration {label!r}: {exc}") from exc
        for d, k in cols:
            rep = agg.get(d)
            key = f"R@{k}"
            if rep is None or key not in rep.mean:
                cells.append("-")
            else:
                cells.append(format_mean_std(rep.mean[key], rep.std[key] if rep.std else None))
        lines.append(f"{label:<{width}}" + "".join(f" | {c:<9}" for c in cells))
    return "\n".join(lines)


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("report needs at least one --runs file")
    paths = [Path(p) for p in args.runs]
    for p in paths:
        if not p.is_file():
            raise UsageError(f"run report not found: {p}")
    print(report_table(paths))
    return EXIT_OK


def cmd_synth(args) -> int:
    experts = []
    for spec in args.expert:
        parts = spec.split(":")
        if len(parts) not in (2, 3):
            raise UsageError(f"--expert wants name:dim[:rank], got {spec!r}")
        experts.append(SynthExpert(parts[0], int(parts[1]), int(parts[2]) if len(parts) == 3 else None))
    counts = {"train": args.train, "val": args.val, "test": args.test}
    counts = {k: v for k, v in counts.items() if v > 0}
    syn = synth_generate(sum(counts.values()), args.latent, experts, args.noise, args.seed, word_dim=args.word_dim,
                         splits=counts)
    print(syn.write(args.out))
    return EXIT_OK


# -- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xar", description="Cross-modal text/audio retrieval with expert embeddings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one model per seed and write checkpoints plus a report")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint to fine-tune from")
    t.add_argument("--seed", type=int)
    t.add_argument("--train-fraction", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="R@1/5/10 in both directions on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("query", help="rank the gallery against a free-form caption")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--text", required=True)
    q.add_argument("--topk", type=int, default=10)
    q.add_argument("--split", help="restrict the gallery to one split")
    q.set_defaults(func=cmd_query)

    r = sub.add_parser("report", help="aggregate run reports into a mean±std table")
    r.add_argument("--runs", nargs="*", default=[])
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic planted-correspondence dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--expert", action="append", default=[], help="name:dim[:rank]; repeatable")
    s.add_argument("--latent", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--word-dim", type=int, default=16)
    s.add_argument("--train", type=int, default=32)
    s.add_argument("--val", type=int, default=0)
    s.add_argument("--test", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "synth" and not args.expert:
            raise UsageError("synth needs at least one --expert")
        with thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
