"""``pointgl`` command line: dataset generation, training, evaluation, cost
reports, benchmarks, corruption sweeps, mCE tables and vote export.

Every option can come from a flat ``key = value`` config file (``--config``)
or a flag; flags win. Runs that write files also write ``config.txt``, the
fully resolved config, which reproduces the run when passed back in.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

log = logging.getLogger("pointgl")

SEED_ENV = "POINTGL_SEED"


class UsageError(Exception):
    """Bad flags or config; exit status 2."""


# --- option types -------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _int_list(s: str) -> list[int]:
    return [int(p) for p in _str_list(s)]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


@dataclass
class Opt:
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""
    choices: tuple | None = None
    path: bool = False  # resolved to an absolute path

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _seed_default() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


SEED = Opt("seed", int, _seed_default, f"random seed (default: ${SEED_ENV} or 0)")
THREADS = Opt("threads", int, None, "BLAS/OpenMP thread count (default: library default)")

MODEL_OPTS = [
    Opt("variant", str, "elite", "model variant", ("pointgl", "elite", "pos_knn")),
    Opt("k", int, 24, "neighbours per group"),
    Opt("blocks", int, 1, "residual blocks per stage"),
    Opt("scalar_affine", _bool, False, "one alpha/beta per stage instead of per channel"),
]

OPTIONS: dict[str, list[Opt]] = {
    "gen": [
        Opt("classes", _str_list, ["sphere", "cube", "cylinder", "torus"], "comma-separated shape families"),
        Opt("points", int, 1024, "points per cloud"),
        Opt("noise", float, 0.01, "Gaussian coordinate noise"),
        Opt("n_train", int, 400, "training clouds"),
        Opt("n_test", int, 100, "test clouds"),
        SEED,
    ],
    "train": [
        Opt("data", str, None, "dataset directory (from `gen`)", path=True),
        *MODEL_OPTS,
        Opt("epochs", int, 30, "training epochs"),
        Opt("batch_size", int, 16, "mini-batch size"),
        Opt("optimizer", str, "sgd_momentum", "optimizer", ("sgd_momentum", "adamw")),
        Opt("lr", float, 0.01, "base learning rate"),
        Opt("momentum", float, 0.9, "SGD momentum"),
        Opt("weight_decay", float, 1e-4, "weight decay (not applied to BN and LGP parameters)"),
        Opt("schedule", str, "cosine", "learning-rate schedule", ("cosine", "step", "constant")),
        Opt("min_lr", float, 1e-4, "cosine floor"),
        Opt("warmup", int, 0, "linear warmup epochs"),
        Opt("step_size", int, 40, "step schedule period"),
        Opt("gamma", float, 0.5, "step schedule factor"),
        SEED,
        THREADS,
    ],
    "eval": [
        Opt("data", str, None, "dataset directory", path=True),
        Opt("checkpoint", str, None, "model .pgl file", path=True),
        Opt("split", str, "test", "dataset split"),
        Opt("batch_size", int, 32, "inference batch size"),
        THREADS,
    ],
    "count": [
        Opt("variant", str, "pointgl", "model variant", ("pointgl", "elite")),
        Opt("order", str, "pre", "embed before (pre) or after (pos) kNN", ("pre", "pos")),
        Opt("points", int, 1024, "input points"),
        Opt("classes", int, 15, "output classes"),
        Opt("k", int, 24, "neighbours per group"),
        Opt("blocks", int, 1, "residual blocks per stage"),
    ],
    "bench": [
        Opt("variants", _str_list, ["pointgl", "elite"], "comma-separated variants"),
        Opt("batch_size", int, 16, "clouds per timed batch"),
        Opt("points", int, 1024, "points per cloud"),
        Opt("classes", int, 15, "output classes"),
        Opt("warmup", int, 1, "untimed batches"),
        Opt("reps", int, 5, "timed batches"),
        SEED,
        THREADS,
    ],
    "corrupt": [
        Opt("data", str, None, "dataset directory", path=True),
        Opt("checkpoint", str, None, "model .pgl file", path=True),
        Opt("split", str, "test", "dataset split"),
        Opt("kinds", _str_list, None, "comma-separated corruption kinds (default: all)"),
        Opt("severities", _int_list, [1, 2, 3, 4, 5], "comma-separated severities"),
        Opt("pad", _bool, True, "resample drop survivors back up to 512 points"),
        Opt("batch_size", int, 32, "inference batch size"),
        SEED,
        THREADS,
    ],
    "mce": [
        Opt("errors", str, None, "error table of the model under test", path=True),
        Opt("baseline", str, None, "error table of the baseline model", path=True),
    ],
    "votes": [
        Opt("input", str, None, "XYZ file to score (default: a synthetic shape)", path=True),
        Opt("shape", str, "cube", "synthetic shape when no input is given"),
        Opt("points", int, 1024, "points in the synthetic shape"),
        Opt("checkpoint", str, None, "model .pgl file (default: random weights)", path=True),
        *MODEL_OPTS,
        Opt("classes", int, 4, "output classes for random weights"),
        SEED,
        THREADS,
    ],
}

DESCRIPTIONS = {
    "gen": "generate a synthetic shape-classification dataset",
    "train": "train a classifier on a dataset directory",
    "eval": "evaluate a checkpoint on a dataset split",
    "count": "report parameters and MACs",
    "bench": "measure inference throughput",
    "corrupt": "evaluate a checkpoint under every corruption and severity",
    "mce": "combine a model and a baseline error table into mCE",
    "votes": "write per-point stage-1 vote counts as an extra XYZ column",
}

WRITES_FILES = {"gen", "train", "eval", "bench", "corrupt", "votes"}


# --- config -------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Raw ``key = value`` pairs; ``#`` starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    for line_no, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise UsageError(f"{path}:{line_no}: expected 'key = value', got {line.strip()!r}")
        key, value = (p.strip() for p in s.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{line_no}: empty key")
        if key in out:
            raise UsageError(f"{path}:{line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def write_config(path, command: str, values: dict[str, Any]) -> None:
    lines = [f"# resolved config for `pointgl {command}`"]
    lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then config file, then flags."""
    opts = OPTIONS[command]
    known = {o.key: o for o in opts}
    raw = read_config(args.config) if args.config else {}
    for key in raw:
        if key not in known:
            raise UsageError(f"unknown config key {key!r} for `{command}` "
                             f"(known: {', '.join(sorted(known))})")
    values: dict[str, Any] = {}
    for o in opts:
        flag_val = getattr(args, o.key)
        try:
            if flag_val is not None:
                v = flag_val
            elif o.key in raw:
                v = None if raw[o.key] == "" else o.parse(raw[o.key])
            else:
                v = o.default() if callable(o.default) else o.default
        except ValueError as e:
            raise UsageError(f"bad value for {o.key!r}: {e}") from None
        if o.choices is not None and v is not None:
            bad = [x for x in (v if isinstance(v, list) else [v]) if x not in o.choices]
            if bad:
                raise UsageError(f"{o.key} must be one of {', '.join(o.choices)}, got {bad[0]!r}")
        if o.path and v is not None:
            v = str(Path(v).resolve())
        values[o.key] = v
    return values


def _require(values: dict, *keys: str) -> None:
    missing = [k for k in keys if values.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required option(s): {flags}")


def prepare_out(out: str | None, force: bool) -> Path | None:
    if out is None:
        return None
    path = Path(out)
    if path.exists():
        if path.resolve() in (Path.cwd(), *Path.cwd().parents):
            raise UsageError(f"refusing to use {path} as an output directory")
        if not force:
            raise FileExistsError(f"output directory {path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True)
    return path


def _threads(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --- output helpers -----------------------------------------------------------


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _emit(fmt: str, text: str, csv_text: str, obj) -> None:
    if fmt == "csv":
        sys.stdout.write(csv_text)
    elif fmt == "json":
        sys.stdout.write(json.dumps(obj, indent=2) + "\n")
    else:
        print(text)


def _rows_csv(header, rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --- commands -----------------------------------------------------------------


def cmd_gen(v: dict, out: Path, fmt: str) -> None:
    from .data import SyntheticSpec, generate_dataset, save_dataset

    spec = SyntheticSpec(classes=v["classes"], points_per_cloud=v["points"], noise_sigma=v["noise"],
                         n_train=v["n_train"], n_test=v["n_test"], seed=v["seed"])
    train, test = generate_dataset(spec)
    save_dataset(out, train, "train")
    save_dataset(out, test, "test")
    info = {"train": len(train), "test": len(test), "classes": spec.classes, "points": spec.points_per_cloud}
    _emit(fmt, f"wrote {len(train)} train / {len(test)} test clouds to {out}",
          _rows_csv(["split", "clouds"], [["train", len(train)], ["test", len(test)]]), info)


def _model_from(v: dict, n_classes: int):
    from .model import PointGL, make_config

    cfg = make_config(v["variant"], n_classes, n_blocks=v["blocks"], k=v["k"],
                      scalar_affine=v["scalar_affine"])
    return PointGL(cfg, seed=v["seed"])


def cmd_train(v: dict, out: Path, fmt: str) -> None:
    from .data import load_dataset
    from .train import OptimSpec, ScheduleSpec, fit

    _require(v, "data")
    train_ds = load_dataset(v["data"], "train")
    test_ds = load_dataset(v["data"], "test")
    model = _model_from(v, train_ds.n_classes)
    optim = OptimSpec(v["optimizer"], v["lr"], v["momentum"], v["weight_decay"])
    sched = ScheduleSpec(v["schedule"], v["min_lr"], v["warmup"], v["step_size"], v["gamma"])
    t0 = time.perf_counter()
    hist = fit(model, train_ds, test_ds, optim, sched, epochs=v["epochs"], batch_size=v["batch_size"],
               seed=v["seed"], checkpoint=out / "model.pgl")
    elapsed = time.perf_counter() - t0
    hist.to_csv(out / "history.csv")
    rows = [{k: r[k] for k in ("epoch", "lr", "train_loss", "test_oa", "test_macc")} for r in hist.rows]
    _write_json(out / "history.json", rows)
    metrics = {"best_epoch": hist.best_epoch, "best_test_oa": hist.best_oa,
               "final_test_oa": rows[-1]["test_oa"] if rows else None,
               "first_batch_loss": hist.first_batch_loss, "threads": v["threads"]}
    _write_json(out / "metrics.json", metrics)
    _write_rows(out / "metrics.csv", list(metrics), [[_fmt(x) for x in metrics.values()]])
    _emit(fmt, f"best test OA {hist.best_oa:.4f} at epoch {hist.best_epoch} "
               f"({elapsed:.1f}s); checkpoint {out / 'model.pgl'}",
          _rows_csv(list(metrics), [[_fmt(x) for x in metrics.values()]]), metrics)


def cmd_eval(v: dict, out: Path, fmt: str) -> None:
    from .data import load_dataset
    from .model import PointGL
    from .train import evaluate

    _require(v, "data", "checkpoint")
    model = PointGL.load(v["checkpoint"])
    ds = load_dataset(v["data"], v["split"])
    res = evaluate(model, ds, v["batch_size"])
    metrics = {"split": v["split"], "n": len(ds), "overall_accuracy": res.overall_accuracy,
               "mean_class_accuracy": res.mean_class_accuracy}
    _write_json(out / "metrics.json", {**metrics, "confusion": res.confusion.tolist()})
    _write_rows(out / "metrics.csv", list(metrics), [[_fmt(x) for x in metrics.values()]])
    _write_rows(out / "confusion.csv", ["true\\pred", *ds.class_names],
                [[name, *row] for name, row in zip(ds.class_names, res.confusion.tolist())])
    _emit(fmt, f"{v['split']}: OA {res.overall_accuracy:.4f}  mAcc {res.mean_class_accuracy:.4f}  (n={len(ds)})",
          _rows_csv(list(metrics), [[_fmt(x) for x in metrics.values()]]), metrics)


def cmd_count(v: dict, out: Path | None, fmt: str) -> None:
    from .analysis import count_macs
    from .model import make_config

    cfg = make_config(v["variant"], v["classes"], n_blocks=v["blocks"], k=v["k"])
    report = count_macs(cfg, v["points"], v["order"])
    if out is not None:
        (out / "count.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "count.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _emit(fmt, report.summary(), report.to_csv(), report.to_dict())


def cmd_bench(v: dict, out: Path, fmt: str) -> None:
    from .analysis import bench_throughput
    from .model import PointGL, make_config

    results = []
    for variant in v["variants"]:
        model = PointGL(make_config(variant, v["classes"]), seed=v["seed"])
        res = bench_throughput(model, v["batch_size"], v["points"], v["warmup"], v["reps"], v["seed"])
        if v["threads"] is not None:
            res.threads = v["threads"]
        results.append(res)
    header = ["variant", "batch_size", "n_points", "samples_per_second", "min_sps", "max_sps",
              "iqr_sps", "threads", "precision", "machine"]
    rows = [[getattr(r, h) for h in header] for r in results]
    _write_rows(out / "bench.csv", header, rows)
    _write_json(out / "bench.json", [r.to_dict() for r in results])
    text = "\n".join(f"{r.variant:<8} {r.samples_per_second:9.1f} samples/s "
                     f"(min {r.min_sps:.1f}, max {r.max_sps:.1f}, threads {r.threads})" for r in results)
    _emit(fmt, text, _rows_csv(header, rows), [r.to_dict() for r in results])


def corruption_sweep(model, ds, kinds, severities, seed: int = 0, pad: bool = True,
                     batch_size: int = 32) -> tuple[float, dict[str, dict[int, float]]]:
    """Clean error and error (1 - OA) per corruption kind and severity.

    Cloud ``i`` is corrupted with seed ``seed * 1_000_000 + i``, so every
    kind/severity pair sees the same per-cloud streams.
    """
    from .data.corruption import CorruptionSpec, corrupt
    from .model import build_groupings

    def error(coords):
        preds = model.predict(coords, build_groupings(coords, model.config), batch_size)
        return float(np.mean(preds != ds.labels))

    clean = error(ds.coords)
    table: dict[str, dict[int, float]] = {}
    for kind in kinds:
        for sev in severities:
            coords = np.stack([
                corrupt(c, CorruptionSpec(kind, sev, seed * 1_000_000 + i), pad=pad)
                for i, c in enumerate(ds.coords)
            ]).astype(ds.coords.dtype)
            table.setdefault(kind, {})[sev] = error(coords)
            log.info("%s severity %d: error %.4f", kind, sev, table[kind][sev])
    return clean, table


def cmd_corrupt(v: dict, out: Path, fmt: str) -> None:
    from .data import KINDS, load_dataset, write_error_table
    from .model import PointGL

    _require(v, "data", "checkpoint")
    kinds = v["kinds"] or list(KINDS)
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise UsageError(f"unknown corruption {unknown[0]!r}; choose from {', '.join(KINDS)}")
    model = PointGL.load(v["checkpoint"])
    model.weights.set_mode(False)
    ds = load_dataset(v["data"], v["split"])
    clean, table = corruption_sweep(model, ds, kinds, v["severities"], v["seed"], v["pad"], v["batch_size"])
    write_error_table(out / "errors.csv", table)
    _write_json(out / "errors.json", {"clean_error": clean,
                                      "errors": {k: {str(s): e for s, e in d.items()} for k, d in table.items()}})
    rows = [[k, s, e] for k, d in table.items() for s, e in sorted(d.items())]
    text = [f"clean error {clean:.4f}"] + [
        f"{k:<12} " + "  ".join(f"{d[s]:.4f}" for s in sorted(d)) for k, d in table.items()]
    _emit(fmt, "\n".join(text), _rows_csv(["corruption", "severity", "error"], rows),
          {"clean_error": clean, "errors": table})


def cmd_mce(v: dict, out: Path | None, fmt: str) -> None:
    from .data import mce, read_error_table

    _require(v, "errors", "baseline")
    ce, m = mce(read_error_table(v["errors"]), read_error_table(v["baseline"]))
    rows = [[k, repr(c)] for k, c in ce.items()] + [["mCE", repr(m)]]
    obj = {"ce": ce, "mce": m}
    if out is not None:
        _write_rows(out / "mce.csv", ["corruption", "ce"], rows)
        _write_json(out / "mce.json", obj)
    text = "\n".join(f"{k:<12} CE {c:.4f}" for k, c in ce.items()) + f"\nmCE {m:.4f}"
    _emit(fmt, text, _rows_csv(["corruption", "ce"], rows), obj)


def cmd_votes(v: dict, out: Path, fmt: str) -> None:
    from .data import load_xyz, make_cloud, save_xyz
    from .geometry import normalize_unit_sphere
    from .model import PointGL

    if v["input"] is not None:
        raw = load_xyz(v["input"]).coords
    else:
        raw = make_cloud(v["shape"], v["points"], np.random.default_rng(v["seed"]), pose=False)
    model = PointGL.load(v["checkpoint"]) if v["checkpoint"] else _model_from(v, v["classes"])
    model.weights.set_mode(False)
    coords = normalize_unit_sphere(raw).coords.astype(np.float32)
    res = model(coords[None], return_votes=True)
    votes = res.votes[0].astype(np.int64)
    st = model.config.stages[0]
    summary = {"points": int(len(votes)), "total_votes": int(votes.sum()),
               "expected_total": st.n_samples * st.d_out, "max_votes": int(votes.max()),
               "voted_points": int((votes > 0).sum())}
    save_xyz(out / "votes.xyz", raw, votes)
    _write_json(out / "votes.json", summary)
    _emit(fmt, f"{summary['total_votes']} votes over {summary['points']} points "
               f"({summary['voted_points']} voted, max {summary['max_votes']}) -> {out / 'votes.xyz'}",
          _rows_csv(list(summary), [list(summary.values())]), summary)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "count": cmd_count, "bench": cmd_bench,
            "corrupt": cmd_corrupt, "mce": cmd_mce, "votes": cmd_votes}


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointgl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help="output directory" + ("" if name in WRITES_FILES else " (optional)"),
                       required=name in WRITES_FILES)
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        p.add_argument("--format", choices=("text", "csv", "json"), default="text", help="stdout format")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        for o in opts:
            kw: dict[str, Any] = {"dest": o.key, "default": None, "type": o.parse, "help": o.help}
            if o.choices and o.parse is str:
                kw["choices"] = o.choices
            else:
                kw["metavar"] = o.key.upper()
            p.add_argument(o.flag, **kw)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        values = resolve(args.command, args)
        threads = _threads(values.get("threads"))
        out = prepare_out(args.out, args.force)
    except UsageError as e:
        print(f"pointgl {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"pointgl {args.command}: error: {e}", file=sys.stderr)
        return 1
    try:
        if out is not None:
            write_config(out / "config.txt", args.command, values)
        with threads:
            COMMANDS[args.command](values, out, args.format)
    except UsageError as e:
        print(f"pointgl {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"pointgl {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
