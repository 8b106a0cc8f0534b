import json
from pathlib import Path

import numpy as np
import pytest

from mixatlas.checkpoint import load_checkpoint
from mixatlas.cli import INFO_OPTS, RENDER_OPTS, SAMPLE_OPTS, SYNTH_OPTS, TRAIN_OPTS, main
from mixatlas.data import load_dataset

GOLDEN = Path(__file__).parent / "golden"
SMALL = ["--p-grid", "6", "6", "--sigma-p", "0.4", "--sigma-g", "0.6",
         "--sigma-g-scale", "0.02"]


def _help(capsys, monkeypatch, *args):
    monkeypatch.setenv("COLUMNS", "80")
    with pytest.raises(SystemExit) as exc:
        main([*args, "--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("command,opts", [
    ("train", TRAIN_OPTS), ("synth", SYNTH_OPTS), ("sample", SAMPLE_OPTS),
    ("render", RENDER_OPTS), ("info", INFO_OPTS),
])
def test_help_matches_golden_and_lists_flags(capsys, monkeypatch, command, opts):
    out = _help(capsys, monkeypatch, command)
    assert out == (GOLDEN / f"help_{command}.txt").read_text()
    for opt in opts:
        assert opt.flag in out
    for flag in ("--config", "--dump-config"):
        assert flag in out


def test_top_level_help(capsys, monkeypatch):
    out = _help(capsys, monkeypatch)
    assert out == (GOLDEN / "help_main.txt").read_text()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "8", "--seed", "5"]) == 0
    return root / "data" / "manifest.txt"


def test_synth_summary(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "d"), "--n", "12", "--rho", "1", "0",
                 "--seed", "1"])
    out = capsys.readouterr().out
    assert code == 0
    assert "n = 12" in out and "tau_m = 2" in out
    assert "component 1: 12" in out and "component 2: 0" in out


def test_synth_rejects_zero_images(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n", "0"]) == 2
    assert not (tmp_path / "d").exists()


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--n", "4", "--seed", "7"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MIXATLAS_SEED", "99")
    main(["synth", "--out", str(tmp_path / "a"), "--n", "3"])
    main(["synth", "--out", str(tmp_path / "b"), "--n", "3", "--seed", "99"])
    assert (tmp_path / "a" / "img00000.npy").read_bytes() == \
        (tmp_path / "b" / "img00000.npy").read_bytes()


def test_train_missing_manifest(tmp_path, capsys):
    code = main(["train", "--manifest", str(tmp_path / "absent.txt"), "--out", str(tmp_path)])
    assert code == 2
    assert "absent.txt" in capsys.readouterr().err


def test_train_outputs(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--manifest", str(dataset), "--out", str(out), "--k-max", "10",
                 "--k-heat", "5", "--J", "5", "--checkpoint-every", "4", "--seed", "3", *SMALL])
    assert code == 0
    lines = (out / "trace.tsv").read_text().splitlines()
    assert len(lines) == 11
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == \
        ["iter_00004.bin", "iter_00008.bin"]
    assert (out / "template_1.pgm").exists() and (out / "template_2.pgm").exists()
    ck = load_checkpoint(out / "params.bin")
    assert ck.eta.tau_m == 2 and ck.header["iteration"] == "10"
    assert ck.hidden.beta.shape == (8, 8)


def test_train_is_deterministic_across_threads(dataset, tmp_path):
    runs = []
    for name, threads in (("a", "1"), ("b", "4")):
        out = tmp_path / name
        assert main(["train", "--manifest", str(dataset), "--out", str(out), "--k-max", "4",
                     "--k-heat", "2", "--J", "4", "--seed", "11", "--threads", threads,
                     "--checkpoint-every", "2", *SMALL]) == 0
        runs.append(out)
    for rel in ("trace.tsv", "params.bin", "checkpoints/iter_00002.bin", "template_1.pgm"):
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes()


def test_config_precedence_and_dump(tmp_path, capsys, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k_max": 7, "J": 9, "p_grid": [4, 4]}))
    code = main(["train", "--config", str(cfg), "--manifest", str(dataset), "--out", "x",
                 "--J", "3", "--dump-config"])
    assert code == 0
    eff = json.loads(capsys.readouterr().out)
    assert eff["k_max"] == 7 and eff["J"] == 3 and eff["p_grid"] == [4, 4]
    assert eff["k_heat"] == 150 and eff["sigma_p"] == 0.2
    assert not Path("x").exists()


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k_max": 7, "bogus": 1}))
    assert main(["train", "--config", str(cfg), "--dump-config"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_config_wrong_type(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k_max": "many"}))
    assert main(["train", "--config", str(cfg), "--dump-config"]) == 2


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--k-max", "ten"])
    assert exc.value.code == 2


def test_sample_missing_checkpoint(tmp_path):
    assert main(["sample", "--checkpoint", str(tmp_path / "no.bin"), "--out",
                 str(tmp_path / "s")]) == 1


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert main(["train", "--manifest", str(dataset), "--out", str(out), "--k-max", "3",
                 "--k-heat", "1", "--J", "3", *SMALL]) == 0
    return out / "params.bin"


def test_sample_zero_count(checkpoint, tmp_path):
    assert main(["sample", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "s"),
                 "--count", "0"]) == 0
    assert not (tmp_path / "s").exists() or not any((tmp_path / "s").iterdir())


def test_sample_cross_covariance_names(checkpoint, tmp_path):
    out = tmp_path / "s"
    assert main(["sample", "--checkpoint", str(checkpoint), "--out", str(out), "--count", "2",
                 "--template", "1", "--covariance", "2"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["sample_t1_c2_0000_minus.pgm", "sample_t1_c2_0000_plus.pgm",
                     "sample_t1_c2_0001_minus.pgm", "sample_t1_c2_0001_plus.pgm"]


def test_sample_rejects_bad_component(checkpoint, tmp_path):
    assert main(["sample", "--checkpoint", str(checkpoint), "--out", str(tmp_path),
                 "--template", "3"]) == 2


def test_render_and_info(checkpoint, dataset, tmp_path, capsys):
    before = checkpoint.read_bytes()
    assert main(["render", "--checkpoint", str(checkpoint), "--out", str(tmp_path),
                 "--raw"]) == 0
    raw = np.load(tmp_path / "template_1.npy")
    assert raw.shape == (8, 8)
    assert (tmp_path / "template_2.pgm").exists()
    assert main(["info", "--checkpoint", str(checkpoint), "--manifest", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "components: 2" in out and "images: 8" in out
    assert checkpoint.read_bytes() == before
    assert load_dataset(dataset).n == 8


def test_info_needs_input():
    assert main(["info"]) == 2
