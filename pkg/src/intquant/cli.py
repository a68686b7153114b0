"""``intquant`` command line: train, quantize, lower, run, verify, stats, cost, experiment.

Options resolve as defaults, then the ``--config`` JSON file (top-level keys
apply to every command, a section named after the command overrides them),
then flags. Every artifact embeds the resolved config and the sha256 of its
inputs. Wall-clock times go to a ``<output>.meta.json`` side file so the
artifacts themselves are byte-identical across reruns.

Exit codes: 0 success, 1 error, 2 usage, 3 format version mismatch,
4 verification failed. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensorio
from .intexec import CostModel, estimate_cost, exec_plan, float_equivalent, op_census, verify
from .lowering import lower_model, quantize_input, validate_plan
from .lowering import plan as planfile
from .pyramidlab import (
    ExperimentConfig,
    build_fpn_model,
    collect_stats,
    format_table,
    gen_dataset,
    results_to_csv,
    run_experiment,
    stats_to_csv,
)
from .seeding import split_seed
from .traingraph import checkpoint
from .traingraph.checkpoint import FormatVersionError
from .traingraph.train import TrainConfig, evaluate, init_quantized_from_fp, train

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_VERSION, EXIT_VERIFY = 0, 1, 2, 3, 4

DATA_DEFAULTS = {"n_train": 2000, "n_test": 1000, "noise": 0.1, "gap": 2.0, "mixture": [1 / 3, 1 / 3, 1 / 3]}

DEFAULTS: Dict[str, dict] = {
    "train": {"seed": 0, "bn_mode": "multilevel", "width": 16, "epochs": 12, "lr": 0.05, "batch_size": 64,
              **DATA_DEFAULTS},
    "quantize": {"seed": 0, "bits": 2, "epochs": 6, "lr": 0.01, "batch_size": 64, "calib": 256},
    "lower": {"d_max": 16, "mode": "aqd", "level": None},
    "run": {},
    "verify": {"seed": 0, "n": 1000, "drift_tol": 0.02},
    "stats": {"seed": 0, "n": 500, "z": 3.0},
    "cost": {"prices": {}},
    "data": {"seed": 0, "n": 16, "noise": 0.1, "gap": 2.0, "mixture": [1 / 3, 1 / 3, 1 / 3]},
    "experiment": {},
}


class Failure(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.kind, self.code = kind, code


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise Failure("usage", message, EXIT_USAGE)


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _provenance(cfg: dict) -> dict:
    """Config as embedded in artifacts: the output location is not part of how an artifact was made."""
    return {k: v for k, v in cfg.items() if k != "out"}


def _side(path, **info) -> None:
    Path(str(path) + ".meta.json").write_text(_dump(info))


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise Failure("config", f"cannot read config {args.config}: {e}")
        if not isinstance(doc, dict):
            raise Failure("config", "config file must hold a JSON object")
        sections = set(DEFAULTS)
        cfg.update({k: v for k, v in doc.items() if k not in sections and (k in cfg or command == "experiment")})
        cfg.update(doc.get(command, {}))
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config", "func"):
            cfg[k] = v
    return cfg


def _data(cfg: dict, split: str, n: int):
    return gen_dataset(split_seed(cfg["seed"], split), n, cfg["mixture"], cfg["noise"], cfg["gap"])


def _load_ckpt(path):
    return checkpoint.load(path), checkpoint.read_header(path)


def cmd_train(cfg: dict) -> dict:
    tr, te = _data(cfg, "train", cfg["n_train"]), _data(cfg, "test", cfg["n_test"])
    g = build_fpn_model(cfg["bn_mode"], "fp", cfg["width"], seed=split_seed(cfg["seed"], "init"))
    tc = TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                     lr_steps=(int(cfg["epochs"] * 0.75),), seed=split_seed(cfg["seed"], "order"))
    g, hist = train(g, tr.as_dataset(), tc)
    _, acc = evaluate(g, te.as_dataset())
    g.meta["data"] = {k: cfg[k] for k in ("seed", *DATA_DEFAULTS)}
    checkpoint.save(g, cfg["out"], extra={"config": _provenance(cfg), "history": hist, "test_accuracy": acc})
    return {"checkpoint": cfg["out"], "test_accuracy": acc}


def cmd_quantize(cfg: dict) -> dict:
    fp, _ = _load_ckpt(cfg["checkpoint"])
    if fp.mode != "fp":
        raise Failure("input", "quantize expects a full-precision checkpoint")
    data = {**DATA_DEFAULTS, **fp.meta.get("data", {})}
    tr = _data(data, "train", data["n_train"])
    te = _data(data, "test", data["n_test"])
    q = init_quantized_from_fp(fp, int(cfg["bits"]), tr.x[: cfg["calib"]])
    tc = TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], mode="qat",
                     lr_steps=(int(cfg["epochs"] * 0.75),), seed=split_seed(cfg["seed"], "order.q"))
    q, hist = train(q, tr.as_dataset(), tc)
    q = checkpoint.round_trip(q)
    _, acc = evaluate(q, te.as_dataset())
    extra = {"config": _provenance(cfg), "inputs": {"checkpoint": _sha(cfg["checkpoint"])}, "history": hist, "test_accuracy": acc}
    checkpoint.save(q, cfg["out"], extra=extra)
    return {"checkpoint": cfg["out"], "test_accuracy": acc}


def cmd_lower(cfg: dict) -> dict:
    g, _ = _load_ckpt(cfg["checkpoint"])
    p = lower_model(g, d_max=int(cfg["d_max"]), mode=cfg["mode"], level=cfg["level"])
    meta = {**p.meta, "config": _provenance(cfg), "inputs": {"checkpoint": _sha(cfg["checkpoint"])}}
    p = dataclasses.replace(p, meta=meta)
    rep = validate_plan(p)
    if not rep["valid"]:
        raise Failure("invalid_plan", json.dumps(rep["diagnostics"][:3]))
    digest = planfile.save(p, cfg["out"])
    return {"plan": cfg["out"], "sha256": digest, "ops": len(p.ops),
            "max_requant_error": p.meta["max_requant_error"], "max_skip_error": p.meta["max_skip_error"]}


def cmd_run(cfg: dict) -> dict:
    p = planfile.load(cfg["plan"])
    x = tensorio.load(cfg["input"])
    eta = quantize_input(p, x) if x.dtype.kind == "f" else x.astype(np.int64)
    t0 = time.perf_counter()
    res = exec_plan(p, eta, trace=True)
    wall = time.perf_counter() - t0
    report = res.report.as_dict()
    wall = report.pop("wall_time_s", wall)
    names = p.meta.get("output_names") or [str(i) for i in range(len(p.outputs))]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, e, r in zip(names, res.eta, res.real):
        tensorio.save(e.reshape(len(e), -1).astype(np.int64), out / f"{name}.eta.tensor")
        if r is not None:
            tensorio.save(np.asarray(r, dtype=np.float64), out / f"{name}.real.tensor")
    doc = {"config": _provenance(cfg), "inputs": {"plan": _sha(cfg["plan"]), "input": _sha(cfg["input"])},
           "outputs": names, "report": report}
    (out / "report.json").write_text(_dump(doc))
    _side(out / "report.json", wall_time=wall)
    return {"outputs": str(out), "max_accumulator": report["max_accumulator"]}


def _eval_inputs(g, cfg, n):
    data = {**DATA_DEFAULTS, **g.meta.get("data", {}), "seed": cfg["seed"]}
    return _data(data, "verify", n).x


def cmd_verify(cfg: dict) -> dict:
    p = planfile.load(cfg["plan"])
    g, _ = _load_ckpt(cfg["checkpoint"])
    x = _eval_inputs(g, cfg, int(cfg["n"]))
    t0 = time.perf_counter()
    rep = verify(p, g, x, drift_tol=float(cfg["drift_tol"]))
    wall = time.perf_counter() - t0
    doc = {"config": _provenance(cfg), "inputs": {"plan": _sha(cfg["plan"]), "checkpoint": _sha(cfg["checkpoint"])},
           "report": rep}
    if cfg.get("out"):
        Path(cfg["out"]).write_text(_dump(doc))
        _side(cfg["out"], wall_time=wall)
    if not rep["passed"]:
        raise Failure("verification_failed", json.dumps({k: rep[k] for k in (
            "bit_exact", "first_mismatch_op", "drift_ok", "float_ops_before_dequant")}), EXIT_VERIFY)
    return {"passed": True, "samples": rep["samples"], "drift": [d["mean_rel"] for d in rep["drift"]]}


def cmd_stats(cfg: dict) -> dict:
    g, _ = _load_ckpt(cfg["checkpoint"])
    x = _eval_inputs(g, cfg, int(cfg["n"]))
    records, summary = collect_stats(g, x, z=float(cfg["z"]))
    Path(cfg["out"]).write_text(stats_to_csv(records))
    summary = {**summary, "config": _provenance(cfg), "inputs": {"checkpoint": _sha(cfg["checkpoint"])}}
    Path(str(cfg["out"]) + ".summary.json").write_text(_dump(summary))
    return {"diverged": summary["diverged"], "max_gap": summary["max_gap"]}


def cmd_cost(cfg: dict) -> dict:
    p = planfile.load(cfg["plan"])
    prices = cfg["prices"]
    if isinstance(prices, str):
        prices = json.loads(Path(prices).read_text())
    model = CostModel.with_overrides(prices)
    census = op_census(p)
    fl = float_equivalent(census)
    doc = {"census": census, "energy_pj": estimate_cost(census, model),
           "float_census": fl, "float_energy_pj": estimate_cost(fl, model), "prices": dict(model.prices)}
    if cfg.get("out"):
        Path(cfg["out"]).write_text(_dump({**doc, "config": _provenance(cfg), "inputs": {"plan": _sha(cfg["plan"])}}))
    return doc


def cmd_data(cfg: dict) -> dict:
    d = gen_dataset(cfg["seed"], int(cfg["n"]), cfg["mixture"], cfg["noise"], cfg["gap"])
    tensorio.save(d.x, cfg["out"])
    return {"tensor": cfg["out"], "shape": list(d.x.shape)}


def cmd_experiment(cfg: dict) -> dict:
    ecfg = ExperimentConfig.from_dict({k: v for k, v in cfg.items() if k != "out"})
    t0 = time.perf_counter()
    res = run_experiment(ecfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_to_csv(res["rows"]))
    (out / "summary.json").write_text(_dump({k: v for k, v in res.items() if k != "rows"}))
    (out / "table.txt").write_text(format_table(res) + "\n")
    _side(out / "summary.json", wall_time=time.perf_counter() - t0)
    return {"out": str(out), "comparisons": res["comparisons"]}


def _opt(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> Parser:
    ap = Parser(prog="intquant", description="Integer-only quantized inference pipeline on a synthetic pyramid task.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    def cmd(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _opt(p, "--config", help="JSON config file (flags override it)")
        p.set_defaults(func=func)
        return p

    p = cmd("train", cmd_train, "train a full-precision FPN toy model")
    _opt(p, "--out", required=True, help="checkpoint path to write")
    _opt(p, "--seed", type=int, help="global seed")
    _opt(p, "--bn-mode", dest="bn_mode", choices=("shared", "multilevel", "shared_pooled"), help="head normalization")
    _opt(p, "--width", type=int, help="channels per layer")
    _opt(p, "--epochs", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--n-train", dest="n_train", type=int, help="training images")
    _opt(p, "--n-test", dest="n_test", type=int, help="test images")
    _opt(p, "--noise", type=float, help="pixel noise std")
    _opt(p, "--gap", type=float, help="object size ratio between neighbouring levels")

    p = cmd("quantize", cmd_quantize, "initialize a quantized model from a full-precision checkpoint and fine-tune it")
    _opt(p, "--checkpoint", required=True, help="full-precision checkpoint")
    _opt(p, "--out", required=True, help="quantized checkpoint path to write")
    _opt(p, "--bits", type=int, choices=(2, 3, 4), help="bitwidth of hidden layers")
    _opt(p, "--seed", type=int)
    _opt(p, "--epochs", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--batch-size", dest="batch_size", type=int)
    _opt(p, "--calib", type=int, help="calibration images for interval init")

    p = cmd("lower", cmd_lower, "compile a quantized checkpoint into an integer plan")
    _opt(p, "--checkpoint", required=True)
    _opt(p, "--out", required=True, help="plan path to write")
    _opt(p, "--d-max", dest="d_max", type=int, help="largest shift")
    _opt(p, "--mode", choices=("aqd", "fqn"), help="dyadic multiplier search (fqn: power of two only)")
    _opt(p, "--level", type=int, help="pyramid level for BN nodes without a fixed level")

    p = cmd("run", cmd_run, "execute a plan on an input tensor file")
    _opt(p, "--plan", required=True)
    _opt(p, "--input", required=True, help="tensor file: f8 images or integer input codes")
    _opt(p, "--out", required=True, help="output directory")

    p = cmd("verify", cmd_verify, "check bit-exactness and drift of a plan against its checkpoint")
    _opt(p, "--plan", required=True)
    _opt(p, "--checkpoint", required=True)
    _opt(p, "--n", type=int, help="number of random inputs")
    _opt(p, "--seed", type=int)
    _opt(p, "--drift-tol", dest="drift_tol", type=float, help="mean drift limit as a fraction of output range")
    _opt(p, "--out", help="report path")

    p = cmd("stats", cmd_stats, "per-level BN input statistics at the head layers")
    _opt(p, "--checkpoint", required=True)
    _opt(p, "--out", required=True, help="CSV path; the summary goes to <out>.summary.json")
    _opt(p, "--n", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--z", type=float, help="divergence threshold in standard errors")

    p = cmd("cost", cmd_cost, "op census and energy estimate of a plan")
    _opt(p, "--plan", required=True)
    _opt(p, "--prices", help="JSON file of price overrides in pJ")
    _opt(p, "--out", help="report path")

    p = cmd("data", cmd_data, "write synthetic pyramid images as a tensor file")
    _opt(p, "--out", required=True)
    _opt(p, "--n", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--noise", type=float)
    _opt(p, "--gap", type=float)

    p = cmd("experiment", cmd_experiment, "shared versus multi-level BN over paired seeds")
    _opt(p, "--out", required=True, help="output directory")
    _opt(p, "--workers", type=int, help="parallel cells")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args.command, args)
        result = args.func(cfg)
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
        return EXIT_OK
    except Failure as e:
        code, kind, msg = e.code, e.kind, str(e)
    except FormatVersionError as e:
        code, kind, msg = EXIT_VERSION, "version_mismatch", str(e)
    except FileNotFoundError as e:
        code, kind, msg = EXIT_ERROR, "missing_file", f"{e.strerror}: {e.filename}"
    except Exception as e:  # noqa: BLE001 - every failure becomes one parsable line
        code, kind, msg = EXIT_ERROR, type(e).__name__, str(e)
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "message": msg}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
