"""Batch command line: ``separate``, ``evaluate``, ``mix`` and ``bench``.

Exit codes: 0 success, 2 invalid input or flags, 3 numerical breakdown
(or too many failed benchmark runs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import mixsim
from .audio import MultichannelWaveform, read_wav, stft, write_wav
from .errors import BSSError, NumericalBreakdown
from .separators import METHODS, RUNNERS, SeparatorConfig

log = logging.getLogger("mvbss")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BREAKDOWN = 3

SUITES = {
    "synthetic": ("instantaneous", "convolutive"),
    "instantaneous": ("instantaneous",),
    "convolutive": ("convolutive",),
    "smoke": ("instantaneous",),
}


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_manifest(path, manifest):
    text = json.dumps(_jsonable(manifest), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_manifest(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def resolve_seed(seed):
    """``BSS_SEED`` in the environment wins over ``--seed``."""
    env = os.environ.get("BSS_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"BSS_SEED must be an integer, got {env!r}") from None
    return seed


def _read_config_file(path):
    """``key = value`` lines; ``#`` comments. Returns a dict of strings."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


_CONFIG_TYPES = {
    "method": str,
    "n_sources": int,
    "n_bases": int,
    "max_iterations": int,
    "eta": float,
    "gamma_init": float,
    "gamma_update": str,
    "spatial_solver": str,
    "seed": int,
    "frame_length": int,
    "frame_shift": int,
    "reference_channel": int,
    "init": str,
    "tol": float,
}


def build_config(args):
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if args.config:
        for key, raw in _read_config_file(args.config).items():
            if key not in _CONFIG_TYPES:
                raise UsageError(f"unknown config key {key!r}")
            try:
                values[key] = _CONFIG_TYPES[key](raw)
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
    flags = {
        "method": args.method,
        "n_sources": args.sources,
        "n_bases": args.bases,
        "max_iterations": args.iters,
        "eta": args.eta,
        "gamma_init": args.gamma,
        "gamma_update": args.gamma_update,
        "init": args.init,
        "seed": args.seed,
        "frame_length": args.frame_length,
        "frame_shift": args.frame_shift,
        "reference_channel": args.ref_channel,
        "tol": args.tol,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if "method" not in values:
        raise UsageError("--method is required")
    if "n_sources" not in values:
        raise UsageError("--sources is required")
    values["seed"] = resolve_seed(values.get("seed", 0))
    try:
        return SeparatorConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_trace(path, run):
    rows = [
        {"iteration": t + 1, "objective": repr(v), "gamma": repr(g)}
        for t, (v, g) in enumerate(
            zip(run.objective_trace, run.gamma_trace or [0.0] * len(run.objective_trace))
        )
    ]
    ev.write_csv(rows, path, fieldnames=["iteration", "objective", "gamma"])


def cmd_separate(args):
    cfg = build_config(args)
    try:
        wave = read_wav(args.input)
    except BSSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from None
    if cfg.method in ("auxiva", "ilrma", "m-ilrma") and wave.n_channels != cfg.n_sources:
        raise UsageError(
            f"{cfg.method} needs as many channels as sources "
            f"({wave.n_channels} channels, {cfg.n_sources} sources)"
        )
    if cfg.reference_channel >= wave.n_channels:
        raise UsageError("reference channel out of range")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X = stft(wave, cfg.frame_length, cfg.frame_shift)
    t0 = time.perf_counter()
    status = EXIT_OK
    try:
        run = RUNNERS[cfg.method](X, cfg)
    except NumericalBreakdown as exc:
        log.error("numerical breakdown: %s", exc)
        run = getattr(exc, "run", None)
        status = EXIT_BREAKDOWN
    outputs = []
    if run is not None and args.trace:
        _write_trace(out / "trace.csv", run)
        outputs.append(str(out / "trace.csv"))
    if status == EXIT_OK:
        sep = run.separated
        for n in range(sep.n_channels):
            path = out / f"source_{n + 1}.wav"
            write_wav(path, MultichannelWaveform(sep.samples[n], sep.sample_rate), args.bit_depth)
            outputs.append(str(path))
        if run.model is not None:
            path = out / "model.npz"
            np.savez(path, W=run.model.W, H=run.model.H, T=run.source_power)
            outputs.append(str(path))
    manifest = {
        "command": "separate",
        "argv": sys.argv[1:],
        "version": __version__,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "input": {"path": str(args.input), "sha256": _sha256_file(args.input)},
        "outputs": outputs,
        "status": status,
        "wall_time": time.perf_counter() - t0,
    }
    if run is not None:
        manifest["run"] = run.manifest
        manifest["iterations"] = run.iteration_count
    write_manifest(out / "manifest.json", manifest)
    return status


def _load_signals(paths, what, channel=None):
    """Read WAVs; with ``channel`` each file contributes that one channel."""
    sigs, rates = [], set()
    for p in paths:
        try:
            w = read_wav(p)
        except BSSError as exc:
            raise UsageError(f"cannot read {what} {p}: {exc}") from None
        rates.add(w.sample_rate)
        if channel is None:
            sigs.extend(w.samples)
        elif channel < w.n_channels:
            sigs.append(w.samples[channel])
        else:
            raise UsageError(f"{p} has no channel {channel}")
    if len(rates) > 1:
        raise UsageError(f"{what} files have different sample rates")
    return sigs


def cmd_evaluate(args):
    t0 = time.perf_counter()
    est = _load_signals(args.est, "estimate", args.channel)
    ref = _load_signals(args.ref, "reference", args.channel)
    if len(est) != len(ref):
        raise UsageError(f"{len(est)} estimate channels for {len(ref)} reference channels")
    if len(ref) > 4:
        raise UsageError("at most 4 sources can be aligned")
    L = min(min(len(s) for s in est), min(len(s) for s in ref))
    est = np.stack([s[:L] for s in est])
    ref = np.stack([s[:L] for s in ref])
    mixture = None
    if args.mixture:
        mixture = _load_signals([args.mixture], "mixture", args.channel)[0][:L]
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"sdr", "sir", "sparseness", "orthogonality", "uniqueness"}
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}")
    report = ev.align_permutation(est, ref, mixture)
    model = None
    if set(metrics) & {"sparseness", "orthogonality", "uniqueness"}:
        if not args.model:
            raise UsageError("identifiability metrics need --model")
        try:
            model = np.load(args.model)
        except OSError as exc:
            raise UsageError(f"cannot read model {args.model}: {exc}") from None
    rows = []
    for n in range(len(ref)):
        row = {"reference": n + 1, "estimate": report.permutation[n] + 1}
        if "sdr" in metrics:
            row["sdr"] = f"{report.sdr[n]:.4f}"
            if report.sdr_improvement is not None:
                row["sdr_improvement"] = f"{report.sdr_improvement[n]:.4f}"
        if "sir" in metrics:
            row["sir"] = f"{report.sir[n]:.4f}"
            if report.sir_improvement is not None:
                row["sir_improvement"] = f"{report.sir_improvement[n]:.4f}"
        if model is not None:
            k = report.permutation[n]
            if k >= model["W"].shape[0]:
                raise UsageError("model has fewer sources than estimates")
            W, H = ev.normalize_columns(model["W"][k], model["H"][k])
            if "sparseness" in metrics:
                row["sparseness"] = f"{ev.sparseness(W):.6f}"
            if "orthogonality" in metrics:
                row["orthogonality"] = f"{ev.orthogonality_score(W):.6f}"
            if "uniqueness" in metrics:
                row["uniqueness"] = f"{ev.uniqueness_score(W, model['T'][k], H):.6f}"
        rows.append(row)
    ev.write_csv(rows, args.out)
    if args.out:
        manifest = {
            "command": "evaluate",
            "argv": sys.argv[1:],
            "version": __version__,
            "metrics": metrics,
            "inputs": {str(p): _sha256_file(p) for p in [*args.est, *args.ref]},
            "outputs": [str(args.out)],
            "wall_time": time.perf_counter() - t0,
        }
        write_manifest(Path(str(args.out) + ".manifest.json"), manifest)
    return EXIT_OK


def cmd_mix(args):
    try:
        scenario = mixsim.load_scenario(args.scenario)
    except OSError as exc:
        raise UsageError(f"cannot read scenario {args.scenario}: {exc}") from None
    except BSSError as exc:
        raise UsageError(f"invalid scenario: {exc}") from None
    seed = resolve_seed(args.seed)
    sources = None
    if args.sources and args.sources != ["synthetic"]:
        sigs = _load_signals(args.sources, "source", 0)
        L = min(len(s) for s in sigs)
        sources = np.stack([s[:L] for s in sigs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        mixture, truth = mixsim.make_mixture(scenario, seed, sources)
    except BSSError as exc:
        raise UsageError(f"invalid scenario: {exc}") from None
    fs = mixture.sample_rate
    outputs = [out / "mixture.wav"]
    write_wav(outputs[0], mixture, args.bit_depth)
    for n in range(truth.sources.shape[0]):
        p = out / f"source_{n + 1}.wav"
        write_wav(p, MultichannelWaveform(truth.sources[n], fs), 32)
        q = out / f"image_{n + 1}.wav"
        write_wav(q, MultichannelWaveform(truth.images[n], fs), 32)
        outputs += [p, q]
    geometry = {"kind": scenario.kind}
    if scenario.kind == "convolutive":
        room = scenario.room_scenario()
        np.save(out / "rirs.npy", truth.rirs)
        outputs.append(out / "rirs.npy")
        geometry.update(
            room=room.room,
            sources=room.sources,
            mics=room.mics,
            rt60_target=scenario.rt60,
            rt60_measured=[
                [mixsim.schroeder_t60(truth.rirs[n, m], fs) if scenario.rt60 > 0 else 0.0
                 for m in range(truth.rirs.shape[1])]
                for n in range(truth.rirs.shape[0])
            ],
        )
    else:
        geometry["mixing"] = truth.mixing
    manifest = {
        "command": "mix",
        "argv": sys.argv[1:],
        "version": __version__,
        "seed": seed,
        "scenario": {k: v for k, v in vars(scenario).items()},
        "scenario_sha256": _sha256_file(args.scenario),
        "geometry": geometry,
        "outputs": [str(p) for p in outputs],
        "wall_time": time.perf_counter() - t0,
    }
    write_manifest(out / "manifest.json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _bench_one(job):
    """Run one (scenario, method, seed) cell; never raises."""
    kind, method, seed, iters, duration, trace_dir = job
    row = {"scenario": kind, "method": method, "seed": seed, "status": "ok"}
    try:
        scenario = mixsim.MixScenario(kind=kind, duration=duration)
        mixture, truth = mixsim.make_mixture(scenario, seed)
        cfg = SeparatorConfig(method=method, seed=seed, max_iterations=iters)
        X = stft(mixture, cfg.frame_length, cfg.frame_shift)
        run = RUNNERS[method](X, cfg)
        ref = truth.reference(cfg.reference_channel)
        rep = ev.align_permutation(run.separated.samples, ref, mixture.samples[cfg.reference_channel])
        if trace_dir:
            _write_trace(Path(trace_dir) / f"{kind}_{method}_{seed}.csv", run)
        row.update(
            sdr=float(np.mean(rep.sdr)),
            sir=float(np.mean(rep.sir)),
            sdri=float(np.mean(rep.sdr_improvement)),
            siri=float(np.mean(rep.sir_improvement)),
            runtime=run.wall_time,
        )
    except Exception as exc:  # a failed cell becomes a marked row
        row.update(status=f"failed: {type(exc).__name__}: {exc}")
    return row


def cmd_bench(args):
    kinds = SUITES[args.suite]
    methods = args.methods or list(METHODS)
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    seeds = args.seeds
    if seeds is None:
        base = resolve_seed(0)
        seeds = [base, base + 1]
    iters = args.iters or (10 if args.suite == "smoke" else 100)
    duration = 1.0 if args.suite == "smoke" else 2.0
    out = Path(args.out)
    traces = out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    jobs = [(k, m, s, iters, duration, str(traces)) for k in kinds for s in seeds for m in methods]
    t0 = time.perf_counter()
    workers = args.jobs or os.cpu_count() or 1
    if workers == 1:
        rows = [_bench_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_bench_one, jobs))
    fields = ["scenario", "method", "seed", "status", "sdr", "sir", "sdri", "siri", "runtime"]
    ev.write_csv(rows, out / "runs.csv", fieldnames=fields)
    agg = []
    for k in kinds:
        for m in methods:
            ok = [r for r in rows if r["scenario"] == k and r["method"] == m and r["status"] == "ok"]
            cell = {"scenario": k, "method": m, "runs": len(ok)}
            for key in ("sdri", "siri"):
                vals = [r[key] for r in ok]
                cell[f"mean_{key}"] = f"{statistics.fmean(vals):.4f}" if vals else ""
                cell[f"median_{key}"] = f"{statistics.median(vals):.4f}" if vals else ""
            agg.append(cell)
    ev.write_csv(agg, out / "aggregate.csv")
    done = sum(r["status"] == "ok" for r in rows)
    manifest = {
        "command": "bench",
        "argv": sys.argv[1:],
        "version": __version__,
        "suite": args.suite,
        "seeds": seeds,
        "methods": methods,
        "iterations": iters,
        "jobs": workers,
        "completed": done,
        "total": len(rows),
        "wall_time": time.perf_counter() - t0,
    }
    write_manifest(out / "manifest.json", manifest)
    return EXIT_OK if done >= 0.9 * len(rows) else EXIT_BREAKDOWN


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="mvbss", description="Multichannel blind source separation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("separate", help="separate a multichannel WAV file")
    s.add_argument("--input", required=True)
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--sources", type=int)
    s.add_argument("--bases", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--gamma", type=float, help="initial prior weight")
    s.add_argument("--gamma-update", choices=("once", "every", "off"))
    s.add_argument("--init", choices=("random", "snpa"))
    s.add_argument("--seed", type=int)
    s.add_argument("--frame-length", type=int)
    s.add_argument("--frame-shift", type=int)
    s.add_argument("--ref-channel", type=int)
    s.add_argument("--tol", type=float, help="early-stop relative tolerance")
    s.add_argument("--config", help="key = value file; flags override it")
    s.add_argument("--bit-depth", type=int, choices=(16, 32), default=32)
    s.add_argument("--out", default=".")
    s.add_argument("--trace", action="store_true", help="write trace.csv")
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("evaluate", help="score estimates against references")
    e.add_argument("--est", nargs="+", required=True)
    e.add_argument("--ref", nargs="+", required=True)
    e.add_argument("--mixture", help="unprocessed reference-channel WAV for improvements")
    e.add_argument("--channel", type=int, default=0, help="channel taken from multichannel files")
    e.add_argument("--metrics", default="sdr,sir")
    e.add_argument("--model", help="model.npz written by separate")
    e.add_argument("--out", help="CSV path (default stdout)")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("mix", help="generate a synthetic mixture")
    m.add_argument("--scenario", required=True)
    m.add_argument("--sources", nargs="+", default=["synthetic"])
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--bit-depth", type=int, choices=(16, 32), default=32)
    m.set_defaults(func=cmd_mix)

    b = sub.add_parser("bench", help="run a scenario x method x seed grid")
    b.add_argument("--suite", choices=sorted(SUITES), default="synthetic")
    b.add_argument("--seeds", type=int, nargs="+")
    b.add_argument("--methods", nargs="+")
    b.add_argument("--iters", type=int)
    b.add_argument("--jobs", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mvbss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BSSError as exc:
        print(f"mvbss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
