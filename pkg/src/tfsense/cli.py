"""Command-line driver: ``tfsense {synth,detect,eval,bench}``.

Every command writes into an output directory holding exactly one
``manifest.json`` (command, resolved config, inputs, outputs, wall clock,
version). Run settings come from one YAML file plus flags; environment
variables are never consulted.

Run config (all sections optional)::

    frontend: {fs: 100e6, n_fft: 1024, plot_height: 2000}
    detector: {savgol_window: 31, savgol_order: 3, psd_margin_db: 3.0, ...}
    runtime:  {n_compute_workers: 1, n_sensing_workers: 4, halo_width: 7, ...}
    baseline: {conv_threshold: 96, rate_change_threshold: 0.45, ...}

Detection CSV columns: ``plot_index, t0_s, t1_s, f0_hz, f1_hz``.
Metrics CSV columns: ``theta_iou, n_gt, n_d, n_t, n_f, p_d, p_fa, mean_iou``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__, baseline, metrics, runtime, scenarios, signals
from .boxes import BoundingBox
from .detector import ConfigError, DetectorConfig
from .frontend import ArraySource, FramingError, FrontendConfig, TFPlot, fft_rows, open_source

logger = logging.getLogger("tfsense")

DETECTION_FIELDS = ("plot_index", "t0_s", "t1_s", "f0_hz", "f1_hz")
MANIFEST = "manifest.json"
DEFAULT_THETAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class CliError(Exception):
    """User-facing failure: bad config, unreadable input, and so on."""


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    inputs: list[str]
    outputs: list[str]
    wall_clock_s: float
    version: str = __version__
    started: str = ""
    notes: dict[str, Any] = dataclasses.field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, default=str) + "\n",
                        encoding="utf-8")
        return path


def read_manifest(out_dir: str | Path) -> dict[str, Any] | None:
    path = Path(out_dir) / MANIFEST
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# config plumbing


def _build(cls, section: dict[str, Any] | None, where: str):
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise CliError(f"{where}.{unknown[0]}: unknown setting")
    for key in ("max_kernel",):
        if isinstance(section.get(key), list):
            section[key] = tuple(section[key])
    # YAML 1.1 reads exponents without a sign (100.0e6) as strings
    types = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    for key, val in section.items():
        if isinstance(val, str) and types[key].startswith(("float", "int")):
            try:
                section[key] = float(val) if types[key].startswith("float") else int(val)
            except ValueError:
                raise CliError(f"{where}.{key}: expected a number, got {val!r}") from None
    try:
        return cls(**section)
    except (ConfigError, ValueError, TypeError) as exc:
        raise CliError(f"{where}: {exc}") from exc


def load_run_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a mapping")
    unknown = sorted(set(doc) - {"frontend", "detector", "runtime", "baseline"})
    if unknown:
        raise CliError(f"{unknown[0]}: unknown config section")
    return doc


def _frontend(doc: dict, args) -> FrontendConfig:
    section = dict(doc.get("frontend") or {})
    for key in ("fs", "n_fft", "plot_height"):
        val = getattr(args, key, None)
        if val is not None:
            section[key] = val
    section.setdefault("fs", scenarios.FS)
    return _build(FrontendConfig, section, "frontend")


def _runtime(doc: dict, args) -> runtime.RuntimeConfig:
    section = dict(doc.get("runtime") or {})
    for key in ("n_compute_workers", "n_sensing_workers", "halo_width"):
        val = getattr(args, key, None)
        if val is not None:
            section[key] = val
    return _build(runtime.RuntimeConfig, section, "runtime")


def _snapshot(**configs) -> dict[str, Any]:
    out = {}
    for name, cfg in configs.items():
        out[name] = json.loads(json.dumps(dataclasses.asdict(cfg), default=str))
    return out


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}") from exc
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# CSV formats


def write_detections(path: Path, rows: Sequence[tuple[int, BoundingBox]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_FIELDS)
        for idx, b in rows:
            w.writerow([idx, repr(b.t0), repr(b.t1), repr(b.f0), repr(b.f1)])


def read_detections(path: str | Path) -> list[tuple[int, BoundingBox]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in DETECTION_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise CliError(f"{path}: missing column '{missing[0]}'")
        for line, rec in enumerate(reader, start=2):
            try:
                out.append((int(rec["plot_index"]),
                            BoundingBox(float(rec["f0_hz"]), float(rec["f1_hz"]),
                                        float(rec["t0_s"]), float(rec["t1_s"]))))
            except ValueError as exc:
                raise CliError(f"{path}:{line}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# synth


def scenario_from_config(doc: dict[str, Any]) -> signals.Scenario:
    """Explicit scenario mapping, or ``preset: <name>`` with window settings."""
    if "preset" not in doc:
        return signals.scenario_from_dict(doc)
    allowed = {"preset", "plot_height", "n_fft", "n_plots", "seed", "snr_db", "jitter", "fs",
               "noise_power"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise signals.ValidationError(unknown[0], "unknown setting for a preset scenario")
    name = doc["preset"]
    if name == "noise":
        kwargs = {k: doc[k] for k in ("plot_height", "n_fft", "n_plots", "seed", "fs", "noise_power")
                  if k in doc}
        return scenarios.noise_only(**kwargs)
    if name not in scenarios.PRESETS:
        raise signals.ValidationError("preset", f"unknown preset {name!r}; choose from "
                                                f"{sorted(scenarios.PRESETS) + ['noise']}")
    kwargs = {k: doc[k] for k in allowed - {"preset"} if k in doc}
    return scenarios.build(name, **kwargs)


def cmd_synth(args) -> int:
    started = time.monotonic()
    try:
        doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{args.config}: config must be a mapping")
    try:
        scenario = scenario_from_config(doc)
        samples, gt = signals.synthesize(scenario)
    except signals.ValidationError as exc:
        raise CliError(f"invalid scenario: {exc}") from exc
    out = _out_dir(args.out)
    iq_path, gt_path, sc_path = out / "samples.32cf", out / "gt.json", out / "scenario.yaml"
    signals.write_iq(iq_path, samples)
    signals.write_gt(gt_path, gt)
    sc_path.write_text(yaml.safe_dump(signals.scenario_to_dict(scenario), sort_keys=False),
                       encoding="utf-8")
    RunManifest(
        command="synth", config={"scenario": doc}, inputs=[str(args.config)],
        outputs=[iq_path.name, gt_path.name, sc_path.name],
        wall_clock_s=time.monotonic() - started, started=_now(),
        notes={"n_samples": int(samples.size), "n_boxes": len(gt), "fs": scenario.fs},
    ).write(out)
    print(f"wrote {samples.size} samples and {len(gt)} boxes to {out}")
    return 0


# ---------------------------------------------------------------------------
# detect


def cmd_detect(args) -> int:
    started = time.monotonic()
    doc = load_run_config(args.config)
    fe = _frontend(doc, args)
    det = _build(DetectorConfig, doc.get("detector"), "detector")
    rt = _runtime(doc, args)
    is_socket = args.input.startswith("udp://")
    if not is_socket and not Path(args.input).is_file():
        raise CliError(f"cannot read input {args.input}")
    try:
        source = open_source(args.input, fe, sample_format=args.format, paced=args.paced,
                             chunks_per_datagram=args.chunks_per_datagram,
                             idle_timeout=args.idle_timeout)
    except (OSError, FramingError, ValueError) as exc:
        raise CliError(f"cannot open {args.input}: {exc}") from exc
    out = _out_dir(args.out)
    try:
        result = runtime.run(source, fe, det, rt)
    except ConfigError as exc:
        raise CliError(str(exc)) from exc
    finally:
        close = getattr(source, "close", None)
        if close is not None:
            close()
    det_path = out / "detections.csv"
    write_detections(det_path, result.boxes())
    outputs = [det_path.name]
    notes: dict[str, Any] = {"plots": len(result.plots), "boxes": len(result.boxes()),
                             "ingest_lost_chunks": result.ingest_lost}
    if result.report is not None:
        paths = result.report.write(out)
        outputs += [p.name for p in paths.values()]
        notes.update(overruns=result.report.overruns, fraction_met=result.report.fraction_met,
                     verdict="pass" if result.report.verdict else "fail")
        if result.report.overruns:
            logger.warning("%d overrun(s): see %s", result.report.overruns, paths["summary"].name)
    RunManifest(
        command="detect", config=_snapshot(frontend=fe, detector=det, runtime=rt)
        | {"sample_format": args.format, "paced": args.paced},
        inputs=[args.input], outputs=outputs, wall_clock_s=time.monotonic() - started,
        started=_now(), notes=notes,
    ).write(out)
    print(f"{len(result.plots)} plot(s), {len(result.boxes())} box(es) -> {det_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _plot_span(args, det_path: Path) -> float:
    if args.plot_span is not None:
        return args.plot_span
    man = read_manifest(det_path.parent)
    if man and "frontend" in man.get("config", {}):
        f = man["config"]["frontend"]
        return f["plot_height"] * f["n_fft"] / f["fs"]
    doc = load_run_config(args.config)
    return _frontend(doc, args).plot_span


def evaluate_detections(dets: Sequence[tuple[int, BoundingBox]], gt: Sequence[BoundingBox],
                        span: float, thetas: Sequence[float], n_plots: int | None = None,
                        fs: float | None = None) -> list[metrics.EvalResult]:
    """Score detections plot by plot; ground truth is clipped to each plot window."""
    by_plot: dict[int, list[BoundingBox]] = defaultdict(list)
    for idx, b in dets:
        lo, hi = idx * span, (idx + 1) * span
        if b.t0 < lo - 1e-9 or b.t1 > hi + 1e-9 or (fs and (b.f0 < -fs / 2 or b.f1 > fs / 2)):
            logger.warning("box %s lies outside plot %d; kept", b, idx)
        by_plot[idx].append(b)
    if n_plots is None:
        last_gt = max((b.t1 for b in gt), default=0.0)
        n_plots = max(max(by_plot, default=-1) + 1, int(np.ceil(last_gt / span - 1e-9)))
    tally = metrics.Tally()
    for idx in range(n_plots):
        window = metrics.clip_to_window(gt, idx * span, (idx + 1) * span)
        tally.add(window, by_plot.get(idx, []))
    return tally.sweep(sorted(thetas))


def cmd_eval(args) -> int:
    started = time.monotonic()
    det_path = Path(args.detections)
    try:
        dets = read_detections(det_path)
        gt = signals.read_gt(args.gt)
    except (OSError, signals.SchemaError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read inputs: {exc}") from exc
    span = _plot_span(args, det_path)
    n_plots = None
    if gt.duration:
        # only whole plots were processed
        n_plots = int(np.floor(gt.duration / span + 1e-9))
    results = evaluate_detections(dets, gt.boxes, span, args.theta, n_plots, gt.fs)
    out_path = Path(args.out)
    out_dir = _out_dir(str(out_path.parent))
    metrics.write_eval_csv(out_path, results)
    RunManifest(
        command="eval", config={"thetas": sorted(args.theta), "plot_span_s": span},
        inputs=[str(det_path), str(args.gt)], outputs=[out_path.name],
        wall_clock_s=time.monotonic() - started, started=_now(),
    ).write(out_dir)
    for r in results:
        print(f"theta={r.theta_iou:.2f} p_d={r.p_d:.3f} p_fa={r.p_fa:.3f} mean_iou={r.mean_iou:.3f}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _suite_plots(names: Sequence[str], fe: FrontendConfig, n_plots: int, seed: int):
    """One replayable sample vector per scenario plus its per-plot ground truth."""
    out = {}
    for name in names:
        sc = scenarios.build(name, plot_height=fe.plot_height, n_fft=fe.n_fft, n_plots=n_plots,
                             seed=seed, fs=fe.fs)
        x, gt = signals.synthesize(sc)
        out[name] = (x, gt)
    return out


def cmd_bench(args) -> int:
    started = time.monotonic()
    doc = load_run_config(args.config)
    fe = _frontend(doc, args)
    det = _build(DetectorConfig, doc.get("detector"), "detector")
    rt_base = _runtime(doc, args)
    names = args.suite or list(scenarios.SUITE)
    bad = [n for n in names if n not in scenarios.PRESETS]
    if bad:
        raise CliError(f"suite: unknown scenario {bad[0]!r}")
    out = _out_dir(args.out)
    unique = max(1, min(args.unique_plots, args.n_plots))
    suite = _suite_plots(names, fe, unique, args.seed)
    repeat = -(-args.n_plots // (unique * len(names)))
    # interleave scenarios so every worker count sees the same mix
    stream = np.concatenate([suite[n][0][: unique * fe.plot_height * fe.n_fft] for n in names])
    outputs, verdicts = [], {}
    summary_rows = []
    for workers in args.workers:
        rt = dataclasses.replace(rt_base, n_sensing_workers=workers)
        source = ArraySource(stream, fs=fe.fs, paced=args.paced, repeat=repeat)
        result = runtime.run(source, fe, det, rt)
        rep = result.report
        if rep is None:
            raise CliError("no plot completed")
        paths = rep.write(out, prefix=f"latency_w{workers}")
        outputs += [p.name for p in paths.values()]
        pct = rep.percentiles
        verdicts[workers] = rep.verdict
        summary_rows.append([workers, rep.n_plots, f"{pct['p50'] * 1e3:.4f}", f"{pct['p99'] * 1e3:.4f}",
                             f"{rep.fraction_met:.4f}", rep.overruns, "pass" if rep.verdict else "fail"])
        print(f"workers={workers}: {rep.n_plots} plots, p99={pct['p99'] * 1e3:.3f} ms, "
              f"met={rep.fraction_met:.3f}, verdict={'pass' if rep.verdict else 'fail'}")
    bench_path = out / "bench.csv"
    with open(bench_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sensing_workers", "plots", "p50_ms", "p99_ms", "fraction_met", "overruns", "verdict"])
        w.writerows(summary_rows)
    outputs.append(bench_path.name)
    configs = _snapshot(frontend=fe, detector=det, runtime=rt_base)
    if args.baseline:
        bl = _build(baseline.BaselineConfig, doc.get("baseline"), "baseline")
        configs |= _snapshot(baseline=bl)
        cases = []
        for name in names:
            x, gt = suite[name]
            rows = fft_rows(x[: unique * fe.plot_height * fe.n_fft].reshape(-1, fe.n_fft))
            for w in range(unique):
                plot = TFPlot(rows[w * fe.plot_height:(w + 1) * fe.plot_height], w * fe.plot_height, fe)
                cases.append((plot, gt.boxes))
        from .detector import detect
        table = baseline.compare(cases, {"detector": lambda p: detect(p, det),
                                         "baseline": lambda p: baseline.baseline_detect(p, bl)},
                                 theta_iou=args.theta)
        cmp_path = out / "comparison.csv"
        baseline.write_comparison_csv(cmp_path, table)
        outputs.append(cmp_path.name)
        print(f"baseline is {baseline.speedup(table, 'detector', 'baseline'):.1f}x slower; "
              f"mean IoU {table[0].mean_iou:.3f} vs {table[1].mean_iou:.3f}")
    RunManifest(
        command="bench", config=configs | {"suite": names, "workers": args.workers,
                                           "n_plots": args.n_plots, "paced": args.paced,
                                           "seed": args.seed},
        inputs=[], outputs=outputs, wall_clock_s=time.monotonic() - started, started=_now(),
        notes={"verdicts": {str(k): ("pass" if v else "fail") for k, v in verdicts.items()}},
    ).write(out)
    return 0


# ---------------------------------------------------------------------------


def _add_frontend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config YAML")
    p.add_argument("--fs", type=float, help="sample rate in Hz (default 100e6)")
    p.add_argument("--n-fft", dest="n_fft", type=int, help="FFT size F")
    p.add_argument("--plot-height", dest="plot_height", type=int, help="rows per TF plot T")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tfsense", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a scenario config to .32cf samples and ground truth")
    p.add_argument("config", help="scenario YAML (explicit signals or a preset)")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="stream I/Q through the detector")
    p.add_argument("input", help=".32cf/.ci16 file or udp://host:port")
    p.add_argument("-o", "--out", required=True, help="output directory")
    _add_frontend_flags(p)
    p.add_argument("--format", choices=("cf32", "ci16"), default="cf32")
    p.add_argument("--paced", action="store_true", help="replay files at fs instead of as fast as possible")
    p.add_argument("--compute-workers", dest="n_compute_workers", type=int)
    p.add_argument("--sensing-workers", dest="n_sensing_workers", type=int)
    p.add_argument("--halo", dest="halo_width", type=int)
    p.add_argument("--chunks-per-datagram", type=int, default=1)
    p.add_argument("--idle-timeout", type=float, default=2.0, help="seconds of socket silence that end a run")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score a detections CSV against ground truth")
    p.add_argument("detections")
    p.add_argument("gt", help="ground-truth JSON")
    p.add_argument("-o", "--out", required=True, help="metrics CSV path")
    p.add_argument("--theta", type=float, nargs="+", default=list(DEFAULT_THETAS))
    p.add_argument("--plot-span", type=float, help="seconds per plot (default: from the detect manifest)")
    _add_frontend_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency CCDFs over the scenario suite")
    p.add_argument("-o", "--out", required=True, help="output directory")
    _add_frontend_flags(p)
    p.add_argument("--suite", nargs="+", help=f"scenarios (default: {' '.join(scenarios.SUITE)})")
    p.add_argument("--workers", type=int, nargs="+", default=[1], help="sensing worker counts")
    p.add_argument("--compute-workers", dest="n_compute_workers", type=int)
    p.add_argument("--halo", dest="halo_width", type=int)
    p.add_argument("--n-plots", type=int, default=1000, help="plots replayed per worker count")
    p.add_argument("--unique-plots", type=int, default=4, help="distinct plots per scenario before looping")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paced", action="store_true", help="replay at fs (real-time arrival)")
    p.add_argument("--baseline", action="store_true", help="add the detector/baseline comparison")
    p.add_argument("--theta", type=float, default=0.5, help="IoU threshold for the comparison")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
