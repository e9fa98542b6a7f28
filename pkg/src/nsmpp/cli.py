"""Command-line entry point: ``nsmpp {simulate,train,eval,repro}``.

Every run resolves a nested JSON config (sections ``domain``, ``model``,
``train``, ``sim``, ``eval``, ``io`` plus ``seed`` and ``threads``) from
defaults, an optional ``--config`` file, convenience flags and dotted
overrides such as ``--train.lr 0.005``. The resolved config is written as
``config.json`` into the output directory, and ``repro`` re-runs from it.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure (including a
failed ``repro`` comparison).
"""

from __future__ import annotations

import argparse
import copy
import filecmp
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import DataError, Dataset, Domain, normalize_dataset, read_dataset, rng_for, sidecar_path, write_csv
from .evaluator import EvalGrid, evaluate, export_figure_data
from .experiments import auto_spectrum, calibrate_spectrum, spread_outputs
from .kernel import BasisKernel, CosineBasis, ExpHawkesKernel, KernelModel, SpectralKernel
from .likelihood import MCIntegralConfig, log_likelihood
from .simulator import BoundViolation, SimConfig, simulate_dataset
from .trainer import CheckpointError, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, split_indices, train

log = logging.getLogger("nsmpp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "domain": {"T": 100.0, "mark_lo": [], "mark_hi": []},
    "model": {
        "family": "spectral", "mu": 1.0, "train_mu": False,
        "alpha": 0.5, "beta": 1.0,
        "rank": 5, "trunk": [128, 128, 10], "branch_hidden": [32, 32],
        "output_scale": 100.0, "input_scale": 0.01, "spectrum": None,
        # spectral generator only: widen feature range, then calibrate the spectrum
        "truth_span": 4.0, "target_count": None,
        "basis_size": 4,
    },
    "train": {
        "lr": 1e-2, "batch_size": 32, "iterations": 1000, "mc_samples": 1000, "resample": True,
        "eval_every": 50, "checkpoint_every": 0, "holdout_fraction": 0.2, "test_fraction": 0.2,
        "clip_norm": 100.0,
    },
    "sim": {"n": 200, "max_events": 100_000},
    "eval": {
        "mc_samples": 10_000, "n_time": 1000, "n_mark": 50, "export_figures": False,
        "figure_sequences": [0], "kernel_n": 100, "slices": [], "split": "test",
    },
    "io": {"data": None, "out": "run", "model": None, "true_model": None, "normalize": False},
}

# convenience flag -> dotted config key
SHORTCUTS = {
    "model": "model.family", "mu": "model.mu", "alpha": "model.alpha", "beta": "model.beta",
    "rank": "model.rank", "T": "domain.T", "n": "sim.n", "seed": "seed", "data": "io.data",
    "out": "io.out", "true_model": "io.true_model", "checkpoint": "io.model",
    "iterations": "train.iterations",
}


class UsageError(Exception):
    pass


class ReproMismatch(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------- config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config section {p!r} in {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _merge(base: dict, extra: dict, prefix: str = "") -> None:
    for k, v in extra.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {key!r} must be a section")
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def resolve_config(args, overrides: list) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        loaded.pop("command", None)
        loaded.pop("inputs", None)
        loaded.pop("version", None)
        _merge(cfg, loaded)
    for flag, key in SHORTCUTS.items():
        v = getattr(args, flag, None)
        if v is not None:
            set_key(cfg, key, v)
    if getattr(args, "export_figures", False):
        cfg["eval"]["export_figures"] = True
    i = 0
    while i < len(overrides):
        tok = overrides[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(overrides):
                raise UsageError(f"{tok} needs a value")
            val = overrides[i + 1]
            i += 1
        set_key(cfg, key, _parse_value(val))
        i += 1
    threads = args.threads if args.threads is not None else os.environ.get("NSMPP_THREADS")
    if threads is not None:
        cfg["threads"] = int(threads)
    for key in ("data", "model", "true_model"):
        if cfg["io"][key]:
            cfg["io"][key] = str(Path(cfg["io"][key]).resolve())
    return cfg


def _domain(cfg) -> Domain:
    d = cfg["domain"]
    return Domain(float(d["T"]), tuple(d["mark_lo"]), tuple(d["mark_hi"]))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _record_config(cfg, command, out: Path) -> None:
    full = dict(cfg, command=command, version=__version__)
    inputs = {}
    for key in ("data", "model", "true_model"):
        p = cfg["io"][key]
        if p:
            inputs[key] = {"path": p, "sha256": _sha256(p)}
            side = sidecar_path(p) if key == "data" else Path(p).with_suffix(".json")
            if side.exists():
                inputs[key]["sidecar_sha256"] = _sha256(side)
    full["inputs"] = inputs
    _write_json(out / "config.json", full)


# --------------------------------------------------------------------- models


def build_model(cfg, domain: Domain, purpose: str) -> KernelModel:
    """Initial model from the ``model`` section; ``purpose`` is ``"sim"`` or ``"fit"``."""
    m = cfg["model"]
    fam = m["family"]
    seed = cfg["seed"]
    if fam == "exp":
        kernel = ExpHawkesKernel(m["alpha"], m["beta"])
    elif fam == "spectral":
        kernel = SpectralKernel.init(domain.mark_dim, int(m["rank"]), m["trunk"], m["branch_hidden"],
                                     output_scale=float(m["output_scale"]), input_scale=float(m["input_scale"]),
                                     seed=rng_for(seed, "truth" if purpose == "sim" else "init"),
                                     spectrum=m["spectrum"] if m["spectrum"] is not None else
                                     auto_spectrum(domain, int(m["rank"]), float(m["output_scale"])))
        if purpose == "sim" and m["truth_span"]:
            kernel = spread_outputs(kernel, domain, float(m["truth_span"]))
    elif fam == "basis":
        basis = CosineBasis(domain, int(m["basis_size"]))
        A = np.zeros((basis.size, basis.size))
        A[0, 0] = m["alpha"] * 0.5 / domain.volume      # mild constant excitation
        kernel = BasisKernel(basis, A)
    elif fam == "none":
        kernel = None
    else:
        raise UsageError(f"unknown model family {fam!r}")
    model = KernelModel(kernel, float(m["mu"]), bool(m["train_mu"]))
    if purpose == "sim" and fam == "spectral" and m["spectrum"] is None:
        target = m["target_count"] or 2.0 * model.mu * domain.volume
        model = calibrate_spectrum(model, domain, float(target))
    return model


def _load_data(cfg) -> Dataset:
    path = cfg["io"]["data"]
    if not path:
        raise UsageError("no input data: pass --data or set io.data")
    ds = read_dataset(path)
    if cfg["io"]["normalize"]:
        ds = normalize_dataset(ds)
    return ds


def _threads(cfg) -> int:
    return max(1, int(cfg["threads"]))


# ------------------------------------------------------------------- commands


def cmd_simulate(cfg, out: Path) -> dict:
    dom = _domain(cfg)
    model = build_model(cfg, dom, "sim")
    sim = SimConfig(model, dom, seed=cfg["seed"], max_events=int(cfg["sim"]["max_events"]))
    ds = simulate_dataset(sim, int(cfg["sim"]["n"]), threads=_threads(cfg))
    exploded = [j for j, s in enumerate(ds) if s.exploded]
    meta = {"seed": cfg["seed"], "model": _model_summary(model), "max_events": sim.max_events,
            "exploded": exploded}
    write_csv(ds, out / "events.csv", meta)
    save_checkpoint(model, out / "true_model.nsmp")
    summary = {"n_sequences": len(ds), "n_events": ds.n_events, "exploded": exploded}
    if exploded:
        log.warning("%d of %d sequences hit max_events=%d (explosive regime)",
                    len(exploded), len(ds), sim.max_events)
    print(f"wrote {len(ds)} sequences, {ds.n_events} events to {out / 'events.csv'}")
    return summary


def _model_summary(model: KernelModel) -> dict:
    from .trainer import model_to_dict
    return model_to_dict(model)


def _split(cfg, n):
    return split_indices(n, float(cfg["train"]["test_fraction"]), cfg["seed"])


def cmd_train(cfg, out: Path) -> dict:
    ds = _load_data(cfg)
    if cfg["io"]["model"]:
        model = load_checkpoint(cfg["io"]["model"])
    else:
        model = build_model(cfg, ds.domain, "fit")
    train_idx, test_idx = _split(cfg, len(ds))
    t = cfg["train"]
    mc = MCIntegralConfig(int(t["mc_samples"]), seed=cfg["seed"], resample_each_step=bool(t["resample"]))
    tcfg = TrainConfig(learning_rate=float(t["lr"]), batch_size=int(t["batch_size"]),
                       iterations=int(t["iterations"]), mc=mc, seed=cfg["seed"], eval_every=int(t["eval_every"]),
                       checkpoint_every=int(t["checkpoint_every"]),
                       checkpoint_dir=str(out / "checkpoints") if t["checkpoint_every"] else None,
                       eval_holdout_fraction=float(t["holdout_fraction"]), clip_norm=float(t["clip_norm"]),
                       threads=_threads(cfg))
    fitted, trace = train(model, ds.subset(train_idx), tcfg)
    save_checkpoint(fitted, out / "model.nsmp")
    trace.to_csv(out / "trace.csv")
    _write_json(out / "split.json", {"train": train_idx.tolist(), "test": test_idx.tolist()})
    summary = {"best_iteration": trace.best_iteration, "best_validation_ll": trace.best_holdout_ll}
    if len(test_idx):
        ev = MCIntegralConfig(int(cfg["eval"]["mc_samples"]), seed=cfg["seed"] + 1, resample_each_step=False)
        summary["test_ll"] = log_likelihood(fitted, [ds[i] for i in test_idx], ev, indices=test_idx,
                                            threads=_threads(cfg)).mean
        print(f"holdout log-likelihood: {summary['test_ll']:.6f}")
    _write_json(out / "train_summary.json", summary)
    return summary


def cmd_eval(cfg, out: Path) -> dict:
    ds = _load_data(cfg)
    if not cfg["io"]["model"]:
        raise UsageError("eval needs a fitted model: pass --checkpoint or set io.model")
    fitted = load_checkpoint(cfg["io"]["model"])
    true_model = load_checkpoint(cfg["io"]["true_model"]) if cfg["io"]["true_model"] else None
    e = cfg["eval"]
    if e["split"] == "test":
        idx = _split(cfg, len(ds))[1]
    elif e["split"] == "all":
        idx = np.arange(len(ds))
    else:
        raise UsageError(f"eval.split must be 'test' or 'all', got {e['split']!r}")
    if len(idx) == 0:
        raise DataError("evaluation split is empty")
    test = [ds[i] for i in idx]
    mc = MCIntegralConfig(int(e["mc_samples"]), seed=cfg["seed"] + 1, resample_each_step=False)
    grid = EvalGrid(int(e["n_time"]), int(e["n_mark"]))
    rep = evaluate(fitted, test, mc, true_model, grid, indices=idx)
    report = rep.to_dict()
    report["sequence_indices"] = idx.tolist()
    if e["export_figures"]:
        models = {"fitted": fitted} if true_model is None else {"true": true_model, "fitted": fitted}
        picks = [j for j in e["figure_sequences"] if 0 <= j < len(test)]
        man = export_figure_data(models, test, out / "figures", EvalGrid(min(grid.n_time, 200), grid.n_mark),
                                 kernel_n=int(e["kernel_n"]), seq_indices=picks, slices=e["slices"],
                                 config={"seed": cfg["seed"], "eval": e})
        report["figures"] = [f["path"] for f in man["files"]]
    _write_json(out / "report.json", report)
    msg = f"predictive log-likelihood: {rep.predictive_ll:.6f}"
    if rep.mae is not None:
        msg += f"  intensity MAE: {rep.mae:.6f}"
    print(msg)
    return report


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval}


def run_command(command: str, cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    _record_config(cfg, command, out)
    return COMMANDS[command](cfg, out)


# ---------------------------------------------------------------------- repro


def _mask_secs(path: Path) -> list:
    rows = path.read_text(encoding="utf-8").splitlines()
    head = rows[0].split(",")
    if "secs" not in head:
        return rows
    k = head.index("secs")
    return [",".join(c for i, c in enumerate(r.split(",")) if i != k) for r in rows]


def _config_core(path: Path) -> dict:
    cfg = json.loads(path.read_text(encoding="utf-8"))
    cfg["io"]["out"] = None
    return cfg


def compare_runs(a: Path, b: Path) -> list:
    """Files that differ between two run directories (wall-clock columns excepted)."""
    diffs = []
    fa = sorted(p.relative_to(a).as_posix() for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b).as_posix() for p in b.rglob("*") if p.is_file())
    for name in sorted(set(fa) ^ set(fb)):
        diffs.append(f"{name}: present in only one run")
    for name in sorted(set(fa) & set(fb)):
        pa, pb = a / name, b / name
        if name == "config.json":
            same = _config_core(pa) == _config_core(pb)
        elif pa.name == "trace.csv":
            same = _mask_secs(pa) == _mask_secs(pb)
        else:
            same = filecmp.cmp(pa, pb, shallow=False)
        if not same:
            diffs.append(f"{name}: contents differ")
    return diffs


def cmd_repro(run_dir: Path, keep: bool = False) -> list:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config.json in run directory {run_dir}")
    cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
    command = cfg.pop("command", None)
    inputs = cfg.pop("inputs", {})
    cfg.pop("version", None)
    if command not in COMMANDS:
        raise DataError(f"{cfg_path}: unknown command {command!r}")
    for key, rec in inputs.items():
        p = Path(rec["path"])
        if not p.exists():
            raise FileNotFoundError(f"input {key} is gone: {p}")
        if _sha256(p) != rec["sha256"]:
            raise DataError(f"input {key} changed since the run: {p}")
    tmp = Path(tempfile.mkdtemp(prefix="nsmpp-repro-"))
    try:
        cfg["io"]["out"] = str(tmp)
        run_command(command, cfg, tmp)
        diffs = compare_runs(run_dir, tmp)
    finally:
        if not keep:
            import shutil
            shutil.rmtree(tmp, ignore_errors=True)
    return diffs


# ------------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nsmpp", description="Neural spectral marked point processes: simulate, train, evaluate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (sections domain/model/train/sim/eval/io)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker threads (default: $NSMPP_THREADS or 1)")
        sp.add_argument("--model", choices=["spectral", "exp", "basis", "none"], help="kernel family")
        sp.add_argument("--mu", type=float, help="background rate")
        sp.add_argument("--rank", type=int, help="spectral rank R")
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("simulate", help="generate a synthetic corpus",
                       epilog="any config key can be overridden as --section.key VALUE")
    common(s)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--T", type=float, help="time horizon")
    s.add_argument("--n", type=int, help="number of sequences")

    t = sub.add_parser("train", help="fit a model to a corpus",
                       epilog="any config key can be overridden as --section.key VALUE")
    common(t)
    t.add_argument("--data", help="events CSV or JSON")
    t.add_argument("--alpha", type=float, help="initial alpha (exp family)")
    t.add_argument("--beta", type=float, help="initial beta (exp family)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh model")

    e = sub.add_parser("eval", help="score a fitted model",
                       epilog="any config key can be overridden as --section.key VALUE")
    common(e)
    e.add_argument("--data", help="events CSV or JSON")
    e.add_argument("--checkpoint", help="fitted model checkpoint")
    e.add_argument("--true-model", dest="true_model", help="true model checkpoint (enables MAE)")
    e.add_argument("--export-figures", action="store_true", help="write kernel/intensity grid CSVs")

    r = sub.add_parser("repro", help="re-run a finished run and diff its outputs byte-wise")
    r.add_argument("run_dir")
    r.add_argument("--keep", action="store_true", help="keep the regenerated directory")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "repro":
            if rest:
                raise UsageError(f"unrecognized arguments: {' '.join(rest)}")
            diffs = cmd_repro(Path(args.run_dir), args.keep)
            if diffs:
                raise ReproMismatch("\n".join(diffs))
            print(f"reproduced {args.run_dir}: outputs identical")
            return EXIT_OK
        cfg = resolve_config(args, rest)
        out = Path(cfg["io"]["out"])
        cfg["io"]["out"] = str(out)
        run_command(args.command, cfg, out)
        return EXIT_OK
    except UsageError as e:
        print(f"nsmpp: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, CheckpointError, OSError, json.JSONDecodeError) as e:
        print(f"nsmpp: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, BoundViolation, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"nsmpp: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ReproMismatch as e:
        print(f"nsmpp: repro mismatch:\n{e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"nsmpp: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
