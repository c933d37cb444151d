import subprocess
import sys
from pathlib import Path

import pytest

from affinemask.cli import main, read_baselines
from affinemask.data import generate, save_raw
from affinemask.masks import MaskTransformConfig
from affinemask.net import add_domain
from affinemask.store import load_backbone, save_backbone, save_domain

GOLDENS = Path(__file__).parent / "goldens" / "desk_mds3.tsv"
QUICK = ["--epochs", "2", "--decay-epoch", "1", "--n-train", "96", "--n-test", "48"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(out: str) -> dict:
    return dict(line.split("\t", 1) for line in out.splitlines() if line.count("\t") == 1)


def read_goldens() -> dict:
    rows = [ln.split("\t") for ln in GOLDENS.read_text().splitlines() if ln and not ln.startswith("#")]
    return {r[0]: r[1:] for r in rows}


@pytest.fixture
def bb_file(tmp_path, frozen_bb):
    path = tmp_path / "bb.mdbb"
    save_backbone(frozen_bb, path)
    return path


def test_pretrain_blobs(tmp_path, capsys):
    out_path = tmp_path / "bb.mdbb"
    code, out, _ = run(capsys, "-q", "pretrain", "--family", "blobs", "--out", out_path)
    assert code == 0 and out_path.is_file()
    res = kv(out)
    assert float(res["test_accuracy"]) >= 0.90
    assert int(res["digest"], 16) == load_backbone(out_path).digest()


def test_pretrain_same_seed_same_digest(tmp_path, capsys):
    digests = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "-q", "pretrain", "--family", "bars", *QUICK, "--out", tmp_path / name)
        assert code == 0
        digests.append(kv(out)["digest"])
    assert digests[0] == digests[1]
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--data", tmp_path / "nope.mdld", "--out", tmp_path / "bb")
    assert code == 2 and "not found" in err


def test_unknown_variant_is_usage_error(tmp_path, bb_file, capsys):
    code, _, _ = run(capsys, "add-domain", "--backbone", bb_file, "--family", "bars", "--variant", "wibble",
                     "--out", tmp_path / "d")
    assert code == 2


def test_corrupt_backbone_is_runtime_error(tmp_path, bb_file, capsys):
    raw = bytearray(bb_file.read_bytes())
    raw[50] ^= 1
    bb_file.write_bytes(bytes(raw))
    code, _, err = run(capsys, "add-domain", "--backbone", bb_file, "--family", "bars", *QUICK,
                       "--out", tmp_path / "d")
    assert code == 1 and "CRC" in err


def test_add_domain_eval_inspect(tmp_path, bb_file, capsys):
    data = tmp_path / "bars.mdld"
    save_raw(generate("bars", 10, 96, 48, seed=3), data)
    reports = {}
    for variant in ("piggyback", "full"):
        delta = tmp_path / f"{variant}.mdmk"
        code, out, _ = run(capsys, "-q", "add-domain", "--backbone", bb_file, "--data", data, "--variant", variant,
                           "--epochs", "2", "--decay-epoch", "1", "--out", delta)
        assert code == 0 and delta.is_file()
        reports[variant] = kv(out)
        assert reports[variant]["backbone_unchanged"] == "yes"
        assert int(reports[variant]["file_bytes"]) == delta.stat().st_size
    assert int(reports["full"]["bits"]) - int(reports["piggyback"]["bits"]) == 2 * 3 * 32

    code, out, _ = run(capsys, "eval", "--backbone", bb_file, "--delta", tmp_path / "full.mdmk", "--data", data)
    assert code == 0
    assert float(kv(out)["accuracy"]) == pytest.approx(float(reports["full"]["test_accuracy"]), abs=5e-5)
    code, cached, _ = run(capsys, "eval", "--cache-weights", "--backbone", bb_file, "--delta",
                          tmp_path / "full.mdmk", "--data", data)
    assert code == 0 and cached == out

    code, out, _ = run(capsys, "inspect", tmp_path / "full.mdmk")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "layer_index\tdensity\tk1\tk2\tk3"
    assert len(lines) - 1 == 2
    assert all(0.0 <= float(ln.split("\t")[1]) <= 100.0 for ln in lines[1:])


def test_inspect_untrained_all_dense(tmp_path, frozen_bb, capsys):
    path = tmp_path / "d.mdmk"
    save_domain(add_domain(frozen_bb, 4, MaskTransformConfig("full"), seed=0), path)
    code, out, _ = run(capsys, "inspect", path)
    assert code == 0
    assert [float(ln.split("\t")[1]) for ln in out.splitlines()[1:]] == [100.0, 100.0]
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    assert run(capsys, "inspect", path)[0] == 1


def test_determinism_add_domain(tmp_path, bb_file, capsys):
    for name in ("a", "b"):
        assert run(capsys, "-q", "add-domain", "--backbone", bb_file, "--family", "blobs", *QUICK,
                   "--augment", "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def _score_setup(tmp_path, bb_file, capsys):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    save_raw(generate("bars", 4, 64, 40, seed=1), data_dir / "bars.mdld")
    delta = tmp_path / "bars.mdmk"
    code, out, _ = run(capsys, "-q", "add-domain", "--backbone", bb_file, "--data", data_dir / "bars.mdld",
                       "--epochs", "1", "--decay-epoch", "1", "--out", delta)
    assert code == 0
    err = 1.0 - float(kv(out)["test_accuracy"])
    return data_dir, delta, err


def test_score_baseline_errors_give_zero(tmp_path, bb_file, capsys):
    data_dir, delta, err = _score_setup(tmp_path, bb_file, capsys)
    assert err > 0
    base = tmp_path / "base.tsv"
    base.write_text(f"domain\terror_max\nbars\t{err!r}\n")
    code, out, _ = run(capsys, "score", "--backbone", bb_file, "--baselines", base, "--data-dir", data_dir, delta)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "domain\terror\terror_max\tscore"
    assert kv(out)["S"] == "0.0000"
    assert float(kv(out)["params_ratio"]) > 1.0


def test_score_missing_baseline_and_paths(tmp_path, bb_file, capsys):
    data_dir, delta, _ = _score_setup(tmp_path, bb_file, capsys)
    base = tmp_path / "base.tsv"
    base.write_text("domain\terror_max\nblobs\t0.5\n")
    args = ["score", "--backbone", bb_file, "--baselines", base, "--data-dir", data_dir]
    assert run(capsys, *args, delta)[0] == 2
    assert run(capsys, *args, tmp_path / "missing.mdmk")[0] == 2
    base.write_text("name\tvalue\n")
    assert run(capsys, *args, delta)[0] == 2


def test_baselines_finetune_form(tmp_path):
    p = tmp_path / "b.tsv"
    p.write_text("# comment\ndomain\tfinetune_error\na\t0.1\nb\t0.7\n")
    assert read_baselines(p) == {"a": 0.2, "b": 1.0}


def test_config_file_overrides(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[gen-data]\nn-train = 12\nn-test = 4\nclasses = 3\n")
    out = tmp_path / "x.mdld"
    code, _, _ = run(capsys, "--config", cfg, "gen-data", "--family", "bars", "--n-train", "500", "--out", out)
    assert code == 0
    assert out.stat().st_size == 16 * 2 + 16 * 1026
    cfg.write_text("[gen-data]\nwibble = 1\n")
    assert run(capsys, "--config", cfg, "gen-data", "--family", "bars", "--out", out)[0] == 2
    assert run(capsys, "--config", tmp_path / "none.ini", "gen-data", "--family", "bars", "--out", out)[0] == 2


def test_gen_data_suite(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--suite", "mds-3", "--n-train", "8", "--n-test", "4", "--out", tmp_path)
    assert code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bars.mdld", "blobs.mdld", "digits.mdld"]
    assert run(capsys, "gen-data", "--suite", "mds-9", "--out", tmp_path)[0] == 2
    assert run(capsys, "gen-data", "--out", tmp_path / "x")[0] == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "affinemask.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "add-domain" in res.stdout
    res = subprocess.run([sys.executable, "-m", "affinemask.cli"], capture_output=True, text=True)
    assert res.returncode == 2


def test_score_regression_golden(desk_run, tmp_path, capsys):
    """Full deltas from the committed desk run, scored against doubled finetune errors."""
    golden = read_goldens()
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    bb_path = tmp_path / "bb.mdbb"
    save_backbone(desk_run.backbone, bb_path)
    deltas = []
    for ds, dom in zip(desk_run.datasets, desk_run.models["full"]):
        save_raw(ds, data_dir / f"{ds.name}.mdld")
        deltas.append(tmp_path / f"{ds.name}.mdmk")
        save_domain(dom, deltas[-1])
    base = tmp_path / "base.tsv"
    ft = desk_run.accuracy["finetune"]
    base.write_text("domain\tfinetune_error\n" + "".join(
        f"{n}\t{1 - a!r}\n" for n, a in zip(desk_run.domains, ft)))
    code, out, _ = run(capsys, "-q", "score", "--backbone", bb_path, "--baselines", base,
                       "--data-dir", data_dir, *deltas)
    assert code == 0
    s = float(kv(out)["S"])
    assert s == pytest.approx(float(golden["S"][0]), rel=0.05)
    assert float(kv(out)["S_p"]) == pytest.approx(float(golden["S_p"][0]), rel=0.05)


def test_full_beats_piggyback_on_mds3(desk_run):
    assert desk_run.mean("full") >= desk_run.mean("piggyback")
