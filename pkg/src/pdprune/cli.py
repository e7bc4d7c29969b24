"""Command-line front end: train, sweep-tau, compare-baseline, report.

Exit status: 0 success, 2 usage error, 3 numerical divergence, 4 I/O or
format error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, artifacts, plotting
from .config import OUTPUT_ROOT_ENV, ExperimentConfig
from .core import CHANNEL, NM, UNSTRUCTURED
from .errors import DivergenceError, FormatError, InputError, PdpError
from .experiment import run_experiment
from .harness.metrics import log_histogram, mac_count, write_histogram_csv
from .harness.models import build_spec

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("pdprune")

# flag name -> config field, for every plain override
_OVERRIDES = {
    "model": "model", "dataset": "dataset", "data_dir": "data_dir", "n_train": "n_train",
    "n_test": "n_test", "n_features": "n_features", "n_classes": "n_classes",
    "separation": "separation", "noise": "noise", "method": "method", "sparsity": "sparsity",
    "ramp_step": "ramp_step", "epochs": "epochs", "tau": "tau", "allocation": "allocation",
    "allocation_file": "allocation_file", "lr": "lr", "momentum": "momentum",
    "weight_decay": "weight_decay", "lr_warmup_epochs": "lr_warmup_epochs", "batch_size": "batch_size",
    "dtype": "dtype", "seed": "seed", "output_dir": "output_dir",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _warmup(text: str):
    if text == "auto":
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or 'auto'") from None
    return value


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON config file; flags override its values")
    g = p.add_argument_group("model and data")
    g.add_argument("--model", choices=["mnist_mlp", "toy_mlp", "toy_cnn"], default=S)
    g.add_argument("--dataset", choices=["mnist", "synthetic"], default=S)
    g.add_argument("--data-dir", default=S, help="directory holding the MNIST IDX files")
    g.add_argument("--n-train", type=int, default=S)
    g.add_argument("--n-test", type=int, default=S)
    g.add_argument("--n-features", type=int, default=S)
    g.add_argument("--n-classes", type=int, default=S)
    g.add_argument("--separation", type=float, default=S)
    g.add_argument("--noise", type=float, default=S)
    g = p.add_argument_group("pruning")
    g.add_argument("--method", choices=["pdp", "hard", "dense"], default=S)
    g.add_argument("--baseline", action="store_true", default=S,
                   help="shorthand for --method hard")
    g.add_argument("--mode", nargs="+", metavar="MODE", default=S,
                   help="unstructured | channel | nm N M")
    g.add_argument("--sparsity", type=float, default=S, help="target ratio in [0, 1)")
    g.add_argument("--warmup-epochs", type=_warmup, default=S, help="dense epochs before pruning, or 'auto'")
    g.add_argument("--ramp-step", type=float, default=S)
    g.add_argument("--epochs", type=int, default=S)
    g.add_argument("--tau", type=float, default=S, help="mask temperature")
    g.add_argument("--allocation", choices=["global", "manual", "file"], default=S)
    g.add_argument("--allocation-file", default=S)
    g.add_argument("--layer-ratio", action="append", metavar="NAME=R", default=S,
                   help="per-layer ratio for manual allocation (repeatable)")
    g = p.add_argument_group("optimizer")
    g.add_argument("--lr", type=float, default=S)
    g.add_argument("--momentum", type=float, default=S)
    g.add_argument("--weight-decay", type=float, default=S)
    g.add_argument("--lr-warmup-epochs", type=float, default=S)
    g.add_argument("--batch-size", type=int, default=S)
    g = p.add_argument_group("run")
    g.add_argument("--dtype", choices=["float32", "float64"], default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--output-dir", "-o", default=S,
                   help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<name> or runs/<name>)")


def _parse_mode(tokens: Sequence[str]) -> Dict[str, object]:
    head = tokens[0]
    if head in (UNSTRUCTURED, CHANNEL) and len(tokens) == 1:
        return {"mode": head, "nm_n": None, "nm_m": None}
    if head == NM and len(tokens) == 3:
        try:
            n, m = int(tokens[1]), int(tokens[2])
        except ValueError:
            raise InputError("--mode nm takes two integers N M") from None
        return {"mode": NM, "nm_n": n, "nm_m": m}
    raise InputError(f"--mode expects 'unstructured', 'channel' or 'nm N M', got {' '.join(tokens)!r}")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """File values first, then every flag the user actually passed."""
    data = ExperimentConfig.load(args.config).to_dict() if getattr(args, "config", None) else \
        ExperimentConfig().to_dict()
    given = vars(args)
    for flag, key in _OVERRIDES.items():
        if flag in given:
            data[key] = given[flag]
    if "warmup_epochs" in given:
        data["warmup_epochs"] = given["warmup_epochs"]
    if given.get("baseline"):
        data["method"] = "hard"
    if "mode" in given:
        data.update(_parse_mode(given["mode"]))
    if "layer_ratio" in given:
        ratios = {}
        for item in given["layer_ratio"]:
            name, sep, value = item.partition("=")
            if not sep:
                raise InputError(f"--layer-ratio expects NAME=R, got {item!r}")
            try:
                ratios[name] = float(value)
            except ValueError:
                raise InputError(f"--layer-ratio {item!r}: ratio is not a number") from None
        data["manual_ratios"] = ratios
        if "allocation" not in given:
            data["allocation"] = "manual"
    return ExperimentConfig.from_dict(data).validate()


def _epoch_printer(quiet: bool):
    def show(rec):
        if quiet:
            return
        print(f"epoch {rec['epoch']:3d}  {rec['phase']:<6s} loss {rec['loss']:.4f}  "
              f"train {rec['train_acc']:.4f}  val {rec['val_acc']:.4f}  flips {rec['flips']}", flush=True)
    return show


def _print_summary(summary: dict, out: Path) -> None:
    print(f"run directory: {out}")
    print(f"method {summary['method']}  mode {summary['mode']}")
    print(f"test accuracy    {summary['test_acc']:.4f}")
    print(f"sparsity         {summary['sparsity']:.6f}  "
          f"({summary['pruned_weights']}/{summary['prunable_weights']} pruned, target {summary['target_pruned']})")
    print(f"MAC              {summary['mac']} of {summary['dense_mac']} dense")
    print(f"parameters       {summary['nonzero_params']} nonzero of {summary['params']}")


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    run = run_experiment(cfg, on_epoch=_epoch_printer(args.quiet))
    _print_summary(run.result.summary, run.directory)
    return EXIT_OK


# ---- tau sweep -------------------------------------------------------------

def _dedupe(values: Sequence[float]) -> List[float]:
    seen: List[float] = []
    for v in values:
        if not any(math.isclose(v, s, rel_tol=1e-12) for s in seen):
            seen.append(v)
    return seen


def _tau_label(tau: float) -> str:
    return f"tau_{tau:.6g}"


def _sweep_rows_write(root: Path, rows: List[dict]) -> Optional[dict]:
    done = [r for r in rows if r["status"] == "ok"]
    best = max(done, key=lambda r: (r["accuracy"], -r["tau"])) if done else None
    for r in rows:
        r["best"] = int(best is not None and r is best)
    ordered = sorted(rows, key=lambda r: r["tau"])
    artifacts.write_csv(root / "sweep.csv", ["tau", "accuracy", "sparsity", "status", "best"],
                        [[repr(r["tau"]), r["accuracy"], r["sparsity"], r["status"], r["best"]] for r in ordered])
    lines = [f"{'tau':>10s}  {'accuracy':>8s}  {'sparsity':>8s}  status"]
    for r in ordered:
        acc = "" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        sp = "" if r["sparsity"] is None else f"{r['sparsity']:.4f}"
        lines.append(f"{r['tau']:>10.3g}  {acc:>8s}  {sp:>8s}  {r['status']}{'  <- best' if r['best'] else ''}")
    if best is not None:
        taus = [r["tau"] for r in done]
        where = "interior" if min(taus) < best["tau"] < max(taus) else "boundary"
        lines.append(f"argmax tau {best['tau']:.3g} ({where} of the swept range)")
    (root / "sweep.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return best


def cmd_sweep_tau(args) -> int:
    cfg = config_from_args(args)
    taus = _dedupe(args.taus)
    if len(taus) < 2:
        raise InputError("sweep-tau needs at least two distinct tau values")
    if any(not t > 0 for t in taus):
        raise InputError("tau values must be positive")
    root = cfg.resolved_output_dir("sweep")
    root.mkdir(parents=True, exist_ok=True)
    rows: List[dict] = []

    def run(tau: float) -> None:
        c = ExperimentConfig.from_dict({**cfg.to_dict(), "tau": tau, "output_dir": str(root / _tau_label(tau))})
        print(f"-- tau {tau:.3g}", flush=True)
        row = {"tau": tau, "accuracy": None, "sparsity": None, "status": "failed"}
        rows.append(row)
        out = run_experiment(c, on_epoch=_epoch_printer(args.quiet))
        row.update(accuracy=out.result.summary["test_acc"], sparsity=out.result.summary["sparsity"], status="ok")

    try:
        for tau in taus:
            run(tau)
        for _ in range(args.refine):
            best = _sweep_rows_write(root, rows)
            ordered = sorted(r["tau"] for r in rows)
            i = ordered.index(best["tau"])
            fresh = [math.sqrt(best["tau"] * ordered[j]) for j in (i - 1, i + 1) if 0 <= j < len(ordered)]
            fresh = [t for t in _dedupe(fresh) if not any(math.isclose(t, r["tau"], rel_tol=1e-9) for r in rows)]
            if not fresh:
                break
            for tau in fresh:
                run(tau)
    finally:
        best = _sweep_rows_write(root, rows)
    if best is not None and plotting.available() and not args.no_plots:
        done = [r for r in rows if r["status"] == "ok"]
        plotting.sweep_curve(root / "sweep.png", [r["tau"] for r in done], [r["accuracy"] for r in done], best["tau"])
    return EXIT_OK


# ---- baseline comparison ---------------------------------------------------

def late_window(n_epochs: int, fraction: float = 0.25) -> range:
    start = n_epochs - max(1, int(math.ceil(fraction * n_epochs)))
    return range(start, n_epochs)


def cmd_compare_baseline(args) -> int:
    cfg = config_from_args(args)
    root = cfg.resolved_output_dir("compare")
    root.mkdir(parents=True, exist_ok=True)
    results = {}
    for method in ("pdp", "hard"):
        c = ExperimentConfig.from_dict({**cfg.to_dict(), "method": method, "output_dir": str(root / method)})
        print(f"-- {method}", flush=True)
        results[method] = run_experiment(c, on_epoch=_epoch_printer(args.quiet)).result
    rows = []
    for method, res in results.items():
        for h in res.history:
            rows.append([h["epoch"], method, h["flips"], h["val_acc"], h["ramp_scale"]])
    artifacts.write_csv(root / "flips.csv", ["epoch", "method", "flips", "val_acc", "ramp_scale"], rows)
    window = late_window(cfg.epochs)
    lines = [f"{'method':<6s}  {'accuracy':>8s}  {'sparsity':>8s}  {'late flips>0':>12s}  {'late flips=0':>12s}"]
    for method, res in results.items():
        late = [res.history[e]["flips"] for e in window]
        pos = sum(f > 0 for f in late) / len(late)
        zero = sum(f == 0 for f in late) / len(late)
        lines.append(f"{method:<6s}  {res.summary['test_acc']:>8.4f}  {res.summary['sparsity']:>8.4f}  "
                     f"{pos:>12.2f}  {zero:>12.2f}")
    lines.append(f"late window: epochs {window.start}-{window.stop - 1}")
    (root / "compare.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if plotting.available() and not args.no_plots:
        plotting.flips_per_epoch(root / "flips.png",
                                 {m: [h["flips"] for h in r.history] for m, r in results.items()})
    return EXIT_OK


# ---- report ----------------------------------------------------------------

def _input_shape(cfg: ExperimentConfig):
    if cfg.dataset == "mnist":
        return (1, 28, 28), 10
    return (cfg.n_features,), cfg.n_classes


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FormatError(f"{run_dir} is not a run directory")
    cfg = ExperimentConfig.load(run_dir / artifacts.CONFIG_FILE)
    shape, n_classes = _input_shape(cfg)
    try:
        spec = build_spec(cfg.model_name(), shape, n_classes, seed=cfg.seed)
    except InputError as exc:
        raise FormatError(f"config snapshot does not describe a buildable model: {exc}") from None
    return {
        "config": cfg,
        "spec": spec,
        "metrics": artifacts.read_metrics(run_dir / artifacts.METRICS_FILE),
        "masks": artifacts.read_masks(run_dir / artifacts.MASKS_FILE),
        "weights": artifacts.read_weights(run_dir / artifacts.WEIGHTS_FILE),
        "summary": artifacts.read_summary(run_dir / artifacts.SUMMARY_FILE),
    }


def report_tables(run: dict) -> dict:
    """Per-layer rows recomputed from the saved masks and weights."""
    spec, masks, weights, cfg = run["spec"], run["masks"], run["weights"], run["config"]
    names = spec.prunable()
    missing = [n for n in names if n not in masks or f"{n}.weight" not in weights]
    if missing:
        raise FormatError(f"run artifacts lack layers {missing}")
    biases = {n: weights.get(f"{n}.bias") for n in spec.names if f"{n}.weight" in weights}
    try:
        macs = mac_count(spec, masks, channel_pruned=cfg.mode == CHANNEL, biases=biases)
    except InputError as exc:
        raise FormatError(f"saved masks do not fit the model: {exc}") from None
    flips: Dict[str, int] = {n: 0 for n in names}
    for rec in run["metrics"]:
        for n, row in rec.get("layers", {}).items():
            flips[n] = flips.get(n, 0) + int(row.get("flips") or 0)
    allocated = run["summary"].get("layers", {})
    rows = []
    for n in names:
        m = masks[n]
        w = weights[f"{n}.weight"]
        b = weights.get(f"{n}.bias")
        rows.append({
            "layer": n,
            "params": int(w.size + (b.size if b is not None else 0)),
            "nonzero": int(np.count_nonzero(w) + (np.count_nonzero(b) if b is not None else 0)),
            "sparsity": float(np.mean(m == 0)),
            "allocated": float(allocated.get(n, {}).get("allocated", 0.0)),
            "mac": macs.per_layer[n],
            "dense_mac": macs.dense_per_layer[n],
            "flips": flips.get(n, 0),
        })
    total_w = sum(masks[n].size for n in names)
    totals = {
        "layer": "total",
        "params": sum(r["params"] for r in rows),
        "nonzero": sum(r["nonzero"] for r in rows),
        "sparsity": sum(float(np.sum(masks[n] == 0)) for n in names) / total_w if total_w else 0.0,
        "allocated": sum(r["allocated"] * masks[r["layer"]].size for r in rows) / total_w if total_w else 0.0,
        "mac": sum(r["mac"] for r in rows),
        "dense_mac": sum(r["dense_mac"] for r in rows),
        "flips": sum(r["flips"] for r in rows),
    }
    return {"rows": rows, "totals": totals, "mac_total": macs.total}


def _format_row(r: dict) -> str:
    return (f"{r['layer']:<8s} {r['params']:>9d} {r['nonzero']:>9d} {r['sparsity']:>9.4f} {r['allocated']:>9.4f} "
            f"{r['mac']:>11d} {r['dense_mac']:>11d} {r['flips']:>8d}")


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    run = load_run(run_dir)
    tables = report_tables(run)
    summary, cfg = run["summary"], run["config"]
    out = Path(args.out) if args.out else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    print(f"run {run_dir}  model {cfg.model_name()}  method {summary.get('method')}  mode {summary.get('mode')}")
    print(f"test accuracy {summary.get('test_acc')}  epochs recorded {len(run['metrics'])}")
    print(f"{'layer':<8s} {'params':>9s} {'nonzero':>9s} {'sparsity':>9s} {'allocated':>9s} "
          f"{'mac':>11s} {'dense_mac':>11s} {'flips':>8s}")
    for r in tables["rows"]:
        print(_format_row(r))
    print(_format_row(tables["totals"]))
    if "mac" in summary and summary["mac"] != tables["mac_total"]:
        raise FormatError(f"summary MAC {summary['mac']} disagrees with masks ({tables['mac_total']})")
    if run["metrics"]:
        last = run["metrics"][-1]
        print(f"flips in last epoch {last.get('flips', 0)}; epochs with flips "
              f"{sum(1 for m in run['metrics'] if m.get('flips'))}/{len(run['metrics'])}")

    rows = tables["rows"]
    artifacts.write_csv(out / "allocation.csv", ["layer", "allocated", "sparsity", "params"],
                        [[r["layer"], r["allocated"], r["sparsity"], r["params"]] for r in rows])
    artifacts.write_csv(out / "mac.csv", ["layer", "mac", "dense_mac"],
                        [[r["layer"], r["mac"], r["dense_mac"]] for r in rows])
    artifacts.write_csv(out / "flips.csv", ["epoch", "flips"],
                        [[m["epoch"], m.get("flips", 0)] for m in run["metrics"]])
    hists = {}
    for n in run["spec"].prunable():
        w = run["weights"][f"{n}.weight"]
        edges, counts = log_histogram(w[run["masks"][n] != 0] if np.any(run["masks"][n]) else np.zeros(0))
        write_histogram_csv(out / f"hist_{n}.csv", edges, counts)
        hists[n] = (edges, counts)
    print(f"CSV written to {out}")

    if args.no_plots:
        return EXIT_OK
    if not plotting.available():
        print("matplotlib not installed; skipping figures")
        return EXIT_OK
    names = [r["layer"] for r in rows]
    plotting.bar_per_layer(out / "allocation.png", names, [r["sparsity"] for r in rows], "sparsity",
                           "sparsity per layer")
    plotting.bar_per_layer(out / "mac.png", names, [r["mac"] for r in rows], "MAC per sample",
                           "MAC per layer", reference=[r["dense_mac"] for r in rows])
    if run["metrics"]:
        plotting.flips_per_epoch(out / "flips.png", {"flips": [m.get("flips", 0) for m in run["metrics"]]})
    for n, (edges, counts) in hists.items():
        plotting.magnitude_histogram(out / f"hist_{n}.png", edges, counts, f"{n} |w| of kept weights")
    print(f"figures written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdprune", description="Soft-mask magnitude pruning experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _experiment_flags(p)
    p.add_argument("-q", "--quiet", action="store_true", help="no per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-tau", help="train once per temperature and tabulate accuracy")
    _experiment_flags(p)
    p.add_argument("--taus", type=float, nargs="+", required=True)
    p.add_argument("--refine", type=int, default=0, metavar="K",
                   help="bracketing rounds around the best tau (geometric midpoints)")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("compare-baseline", help="run soft masks and the hard magnitude baseline side by side")
    _experiment_flags(p)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_compare_baseline)

    p = sub.add_parser("report", help="summarize a run directory and export CSV tables")
    p.add_argument("run_dir")
    p.add_argument("--out", help="export directory (default: <run_dir>/report)")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:       # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InputError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
