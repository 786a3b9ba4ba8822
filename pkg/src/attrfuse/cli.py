"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``gradcheck``, ``gen-synth`` and
``compare``. Exit status is 0 on success, 1 on validation failures (bad
config, bad data, failed checks, scenario mismatch) and 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig
from .data import SynthSpec, gen_synthetic
from .errors import ConfigError, DataError, FormatError, ScenarioError
from .tensor import DimensionError

log = logging.getLogger("attrfuse")

VALIDATION_ERRORS = (ConfigError, DataError, FormatError, ScenarioError, DimensionError)


class ValidationFailure(Exception):
    """Raised by a command whose checks ran but did not pass."""


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognised argument {item!r}; overrides look like --section.key=value")
        key, value = item[2:].split("=", 1)
        out[key] = value
    return out


def _run_config(args, extra: list[str]) -> RunConfig:
    overrides = _split_overrides(extra)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_text("", overrides)


def cmd_train(args, extra) -> int:
    from .training import train

    cfg = _run_config(args, extra)
    report = train(cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"outputs written to {cfg.run.out}")
    return 0


def cmd_eval(args, extra) -> int:
    from .training import evaluate_checkpoint

    if extra:
        raise ConfigError(f"unrecognised arguments {extra}")
    report = evaluate_checkpoint(args.checkpoint, args.scenario, args.split, args.manifest)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args, extra) -> int:
    from .gradcheck import TOLERANCE, run_suite

    start = time.perf_counter()
    results = run_suite(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:40s} max rel err {r.error:.3e}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g} "
          f"in {time.perf_counter() - start:.1f}s")
    if failed:
        raise ValidationFailure(f"gradient checks failed: {', '.join(failed)}")
    return 0


def _synth_spec(extra: list[str]) -> SynthSpec:
    spec = SynthSpec()
    for key, value in _split_overrides(extra).items():
        name = key.removeprefix("synth.")
        if not hasattr(spec, name):
            raise ConfigError(f"unknown generator key {key!r}")
        current = getattr(spec, name)
        try:
            setattr(spec, name, type(current)(value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return spec


def cmd_gen_synth(args, extra) -> int:
    out = Path(args.out or "data/synth")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    spec = _synth_spec(extra)
    summary = gen_synthetic(spec, out, args.seed or 0)
    print(f"manifest: {summary['manifest']}")
    print(f"identity attributes: {', '.join(summary['identity_attributes'])}")
    print(f"transient attributes: {', '.join(summary['transient_attributes']) or '-'}")
    for ident, code in summary["identity_codes"].items():
        print(f"  identity {ident}: {''.join(str(b) for b in code)}")
    print(f"confusable pairs: {len(summary['confusable_pairs'])} {summary['confusable_pairs']}")
    return 0


def _run_label(cfg: dict[str, str], path: Path) -> str:
    if cfg.get("run.name"):
        return cfg["run.name"]
    label = cfg.get("model.scenario", path.name)
    if cfg.get("train.separate") == "true":
        label += "-separate"
    return f"{label}-s{cfg.get('run.seed', '?')}"


def cmd_compare(args, extra) -> int:
    from .training import METRICS_NAME, REPORT_NAME, read_metrics

    if extra:
        raise ConfigError(f"unrecognised arguments {extra}")
    runs = []
    for item in args.runs:
        path = Path(item)
        metrics_path = path / METRICS_NAME if path.is_dir() else path
        if not metrics_path.is_file():
            raise DataError(f"{item}: no metrics file")
        mf = read_metrics(metrics_path)
        report_path = metrics_path.parent / REPORT_NAME
        report = json.loads(report_path.read_text(encoding="utf-8")) if report_path.is_file() else None
        runs.append((_run_label(mf.config, metrics_path.parent), mf, report))
    if len(runs) < 2:
        raise ConfigError("compare needs at least two runs")

    out = Path(args.out or "comparison")
    out.mkdir(parents=True, exist_ok=True)
    warnings = []
    fps = {mf.fingerprint for _, mf, _ in runs}
    if len(fps) > 1:
        warnings.append(f"WARNING: runs were trained on different datasets (fingerprints {sorted(fps)})")

    metric = args.metric
    by_iter = [{int(r["iteration"]): r.get(metric) for r in mf.rows} for _, mf, _ in runs]
    iterations = sorted(set().union(*by_iter))
    with open(out / "convergence.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + [label for label, _, _ in runs])
        for it in iterations:
            w.writerow([it] + ["" if col.get(it) is None else repr(col[it]) for col in by_iter])
    with open(out / "convergence_long.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "iteration", "metric", "value"])
        for label, mf, _ in runs:
            for row in mf.rows:
                for key, value in row.items():
                    if key in ("epoch", "iteration") or value is None:
                        continue
                    w.writerow([label, int(row["iteration"]), key, repr(value)])

    lines = [f"metric: {metric}", "final values:"]
    for label, mf, report in runs:
        last = mf.rows[-1].get(metric) if mf.rows else None
        acc = f", test identity accuracy {report['identity_accuracy']:.4f}" if report else ""
        lines.append(f"  {label}: {metric}={'-' if last is None else f'{last:.6f}'}{acc}")

    separate = [(label, rep) for label, mf, rep in runs if mf.config.get("train.separate") == "true" and rep]
    joint = [(label, rep) for label, mf, rep in runs if mf.config.get("train.separate") != "true" and rep
             and mf.config.get("model.scenario") != "npd"]
    if separate and joint:
        attrs = list(separate[0][1]["attribute_accuracy"])
        sep_mean = {a: sum(r["attribute_accuracy"][a] for _, r in separate) / len(separate) for a in attrs}
        jnt_mean = {a: sum(r["attribute_accuracy"][a] for _, r in joint) / len(joint) for a in attrs}
        with open(out / "attributes.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attribute", "joint", "separate", "joint_minus_separate"])
            for a in attrs:
                w.writerow([a, repr(jnt_mean[a]), repr(sep_mean[a]), repr(jnt_mean[a] - sep_mean[a])])
        mean_delta = sum(jnt_mean[a] - sep_mean[a] for a in attrs) / len(attrs)
        lines.append(f"joint minus separate attribute accuracy (mean over {len(attrs)}): {100 * mean_delta:+.2f} points")
    lines.extend(warnings)
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    for wmsg in warnings:
        print(wmsg, file=sys.stderr)
    print(f"tables written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="attrfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model; extra --section.key=value flags override the config")
    p.add_argument("config", nargs="?", help="key=value config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--scenario", required=True, choices=["npd", "gt", "pa"])
    p.add_argument("--split", default="test", choices=["test", "train", "all"])
    p.add_argument("--manifest", default=None, help="dataset manifest (defaults to the one used for training)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic dataset; --synth.<field>=value flags")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("compare", parents=[common], help="merge metrics of completed runs")
    p.add_argument("runs", nargs="+", help="run directories or metrics files")
    p.add_argument("--metric", default="l2")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, extra)
    except (ValidationFailure, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort exit code mapping
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
