import json

import numpy as np
import pytest

from intquant import tensorio
from intquant.cli import EXIT_USAGE, EXIT_VERIFY, EXIT_VERSION, main
from intquant.lowering import empty_plan
from intquant.lowering import plan as planfile

SMALL = {"width": 4, "n_train": 64, "n_test": 32, "epochs": 1, "batch_size": 32}


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _err(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "train": SMALL, "quantize": {"epochs": 1, "calib": 32}}))
    assert main(["train", "--config", str(cfg), "--out", str(d / "fp.ckpt")]) == 0
    assert main(["quantize", "--config", str(cfg), "--checkpoint", str(d / "fp.ckpt"), "--out", str(d / "q.ckpt")]) == 0
    assert main(["lower", "--checkpoint", str(d / "q.ckpt"), "--out", str(d / "q.plan")]) == 0
    return d


def test_verify_untampered_pipeline(pipeline, capsys):
    code, out, _ = _run(capsys, "verify", "--plan", pipeline / "q.plan", "--checkpoint", pipeline / "q.ckpt",
                        "--n", 200, "--out", pipeline / "verify.json")
    assert code == 0 and json.loads(out)["passed"]
    rep = json.loads((pipeline / "verify.json").read_text())
    assert rep["report"]["bit_exact"] and rep["config"]["n"] == 200


def test_config_precedence(pipeline):
    from intquant.traingraph.checkpoint import read_header

    cfg = read_header(pipeline / "fp.ckpt")["extra"]["config"]
    assert cfg["seed"] == 3 and cfg["width"] == 4 and cfg["lr"] == 0.05
    q = read_header(pipeline / "q.ckpt")["extra"]
    assert q["config"]["epochs"] == 1 and q["config"]["bits"] == 2 and len(q["inputs"]["checkpoint"]) == 64


def test_flags_override_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"n": 5, "seed": 1}}))
    code, out, _ = _run(capsys, "data", "--config", cfg, "--n", 3, "--out", tmp_path / "x.tensor")
    assert code == 0 and json.loads(out)["shape"] == [3, 1, 32, 32]


def test_rerun_is_byte_identical(pipeline, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "train": SMALL}))
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / f"{name}.ckpt")]) == 0
        assert main(["lower", "--checkpoint", str(pipeline / "q.ckpt"), "--out", str(tmp_path / f"{name}.plan")]) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.plan").read_bytes() == (tmp_path / "b.plan").read_bytes()


def test_run_on_tensor_file(pipeline, tmp_path, capsys):
    x = tmp_path / "x.tensor"
    assert main(["data", "--n", "4", "--seed", "9", "--out", str(x)]) == 0
    capsys.readouterr()
    outs = []
    for name in ("r1", "r2"):
        code, _, _ = _run(capsys, "run", "--plan", pipeline / "q.plan", "--input", x, "--out", tmp_path / name)
        assert code == 0
        outs.append((tmp_path / name / "report.json").read_bytes())
    assert outs[0] == outs[1]
    eta = tensorio.load(tmp_path / "r1" / "output.l0.eta.tensor")
    assert eta.shape == (4, 3) and eta.dtype == np.int64
    rep = json.loads(outs[0])
    assert rep["report"]["float_ops_before_dequant"] == 0
    assert "wall_time" in json.loads((tmp_path / "r1" / "report.json.meta.json").read_text())


def test_version_bump_exit_code(pipeline, tmp_path, capsys):
    data = (pipeline / "q.plan").read_bytes()
    first, _, rest = data.partition(b"\n")
    parts = first.split(b" ")
    parts[1] = b"2"
    bumped = tmp_path / "bumped.plan"
    bumped.write_bytes(b" ".join(parts) + b"\n" + rest)
    x = tmp_path / "x.tensor"
    tensorio.save(np.zeros((1, 1, 32, 32)), x)
    code, _, err = _run(capsys, "run", "--plan", bumped, "--input", x, "--out", tmp_path / "o")
    assert code == EXIT_VERSION and _err(err)["error"] == "version_mismatch"


def test_verify_failure_exit_code(pipeline, tmp_path, capsys):
    p = planfile.load(pipeline / "q.plan")
    i = p.kinds().index("BnOffsetAdd")
    bad = planfile.with_op(p, i, offset=np.asarray(p.ops[i].attrs["offset"]) + 3)
    planfile.save(bad, tmp_path / "bad.plan")
    code, _, err = _run(capsys, "verify", "--plan", tmp_path / "bad.plan", "--checkpoint", pipeline / "q.ckpt",
                        "--n", 50)
    e = _err(err)
    assert code == EXIT_VERIFY and e["error"] == "verification_failed"
    assert json.loads(e["message"])["first_mismatch_op"] == i


def test_cost_empty_plan(tmp_path, capsys):
    planfile.save(empty_plan(), tmp_path / "e.plan")
    code, out, _ = _run(capsys, "cost", "--plan", tmp_path / "e.plan")
    assert code == 0 and json.loads(out)["energy_pj"] == 0.0


def test_cost_of_lowered_plan(pipeline, capsys):
    code, out, _ = _run(capsys, "cost", "--plan", pipeline / "q.plan")
    doc = json.loads(out)
    assert code == 0 and 0 < doc["energy_pj"] < doc["float_energy_pj"]


def test_stats_writes_csv(pipeline, capsys):
    out = pipeline / "stats.csv"
    code, _, _ = _run(capsys, "stats", "--checkpoint", pipeline / "q.ckpt", "--n", 40, "--out", out)
    assert code == 0
    assert out.read_text().splitlines()[0] == "level,layer,channel,epoch,mean,var"
    assert "diverged" in json.loads((pipeline / "stats.csv.summary.json").read_text())


def test_usage_errors(capsys):
    code, _, err = _run(capsys, "lower", "--bogus")
    assert code == EXIT_USAGE and _err(err)["error"] == "usage"
    code, _, err = _run(capsys)
    assert code == EXIT_USAGE


def test_missing_file_is_one_line(tmp_path, capsys):
    code, _, err = _run(capsys, "cost", "--plan", tmp_path / "nope.plan")
    assert code == 1 and _err(err)["error"] == "missing_file"


def test_help_documents_flags(capsys):
    with pytest.raises(SystemExit) as e:
        main(["verify", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--plan", "--checkpoint", "--n", "--drift-tol", "--config"):
        assert flag in out


def test_tensor_file_round_trip(tmp_path):
    for a in (np.arange(6, dtype=np.int64).reshape(2, 3), np.linspace(0, 1, 4), np.zeros((0, 2), np.uint8)):
        tensorio.save(a, tmp_path / "t")
        b = tensorio.load(tmp_path / "t")
        assert b.shape == a.shape and np.array_equal(a, b)
