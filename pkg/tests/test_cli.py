import csv
import json
import os

import pytest

from cli.dispatch import build_parser, build_parsers, dispatch, manifest_path, parse_grid_list


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    code = dispatch(["synth", "--out", str(root), "--count", "1", "--dims", "24,24,24", "--grid", "4,4,4",
                     "--max-disp", "1", "--label-noise", "0.05", "--seed", "3", "--quiet"])
    assert code == 0
    return root / "pair_000"


def _register_args(pair, out, *extra):
    return ["register", "--fixed", str(pair / "fixed"), "--moving", str(pair / "moving"),
            "--fixed-mask", str(pair / "fixed_mask"), "--moving-mask", str(pair / "moving_mask"),
            "--grid", "4,4,4", "--iters", "3", "--out-field", str(out / "field"), "--quiet", *extra]


def test_grid_list_syntax():
    assert parse_grid_list("5,8") == [(5, 5, 5), (8, 8, 8)]
    assert parse_grid_list("5x5x5,8x8x4,dense") == [(5, 5, 5), (8, 8, 4), "dense"]


def test_bad_grid_is_a_usage_error(tmp_path, capsys):
    code = dispatch(["register", "--fixed", "a", "--moving", "b", "--out-field", str(tmp_path / "f"),
                     "--grid", "1,5,5"])
    assert code == 2
    assert "grid_dim must be ≥ 2" in capsys.readouterr().err


def test_unknown_flag_lists_valid_flags(tmp_path, capsys):
    code = dispatch(["upsample", "--field", "f", "--out", str(tmp_path / "d"), "--frobnicate"])
    assert code == 2
    err = capsys.readouterr().err
    assert "--frobnicate" in err
    assert "valid flags" in err and "--kernel" in err


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--version"])
    assert exc.value.code == 0


def test_synth_writes_manifest(dataset):
    manifest = json.loads((dataset.parent / "run.manifest.json").read_text())
    assert manifest["subcommand"] == "synth"
    assert manifest["seed"] == 3
    assert manifest["config"]["dims"] == [24, 24, 24]
    assert os.path.exists(dataset / "pair.json")


def test_register_happy_path(dataset, tmp_path):
    report = tmp_path / "metrics.json"
    code = dispatch(_register_args(dataset, tmp_path, "--out-warped", str(tmp_path / "warped"),
                                   "--report", str(report)))
    assert code == 0
    assert (tmp_path / "field.json").exists() and (tmp_path / "field.raw").exists()
    assert (tmp_path / "warped.json").exists()
    assert 0.0 <= json.loads(report.read_text())["dice"] <= 1.0
    manifest = json.loads((tmp_path / "field.manifest.json").read_text())
    assert manifest["subcommand"] == "register"
    assert manifest["outputs"]["field"] == str(tmp_path / "field")
    assert manifest["config"]["iters"] == 3


def test_missing_input_is_a_runtime_error(tmp_path):
    code = dispatch(["register", "--fixed", str(tmp_path / "nope"), "--moving", str(tmp_path / "nope"),
                     "--out-field", str(tmp_path / "field"), "--quiet"])
    assert code == 1


def test_single_mask_is_a_usage_error(dataset, tmp_path):
    code = dispatch(["register", "--fixed", str(dataset / "fixed"), "--moving", str(dataset / "moving"),
                     "--fixed-mask", str(dataset / "fixed_mask"), "--out-field", str(tmp_path / "field"),
                     "--iters", "1", "--quiet"])
    assert code == 2


def test_config_file_sets_defaults_and_flags_win(dataset, tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"iters": 2, "lr": 0.25, "lambda3": 0.5}))
    code = dispatch(_register_args(dataset, tmp_path, "--config", str(config), "--lr", "0.05"))
    assert code == 0
    resolved = json.loads((tmp_path / "field.manifest.json").read_text())["config"]
    assert resolved["iters"] == 3
    assert resolved["lambda3"] == 0.5
    assert resolved["lr"] == 0.05


def test_config_file_rejects_unknown_keys(dataset, tmp_path, capsys):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"iterations": 2}))
    assert dispatch(_register_args(dataset, tmp_path, "--config", str(config))) == 2
    assert "iterations" in capsys.readouterr().err


def test_manifest_replays_the_run(dataset, tmp_path):
    assert dispatch(_register_args(dataset, tmp_path)) == 0
    manifest = tmp_path / "field.manifest.json"
    code = dispatch(["register", "--config", str(manifest), "--out-field", str(tmp_path / "replay"), "--quiet"])
    assert code == 0
    assert (tmp_path / "replay.raw").read_bytes() == (tmp_path / "field.raw").read_bytes()
    replayed = json.loads((tmp_path / "replay.manifest.json").read_text())["config"]
    assert replayed["iters"] == 3 and replayed["fixed"] == str(dataset / "fixed")


def test_manifest_of_another_subcommand_is_rejected(dataset, tmp_path, capsys):
    manifest = dataset.parent / "run.manifest.json"
    assert dispatch(_register_args(dataset, tmp_path, "--config", str(manifest))) == 2
    assert "synth" in capsys.readouterr().err


def test_every_subcommand_has_a_parser():
    parser, subparsers = build_parsers()
    assert set(subparsers) == {"synth", "register", "train", "infer", "select-grid", "warp", "upsample", "eval",
                               "stats", "dof-sweep"}
    assert subparsers["register"].get_default("handler") is not None
    assert parser.parse_args(["upsample", "--field", "f", "--out", "d"]).command == "upsample"


def test_upsample_warp_and_eval(dataset, tmp_path):
    assert dispatch(_register_args(dataset, tmp_path)) == 0
    field = str(tmp_path / "field")
    assert dispatch(["upsample", "--field", field, "--out", str(tmp_path / "dense"), "--quiet"]) == 0
    assert (tmp_path / "dense.manifest.json").exists()
    assert dispatch(["warp", "--moving", str(dataset / "moving_mask"), "--mask", "--field", str(tmp_path / "dense"),
                     "--out", str(tmp_path / "warped_mask"), "--quiet"]) == 0
    report = tmp_path / "eval.json"
    assert dispatch(["eval", "--field", field, "--fixed-mask", str(dataset / "fixed_mask"),
                     "--moving-mask", str(dataset / "moving_mask"),
                     "--fixed-landmarks", str(dataset / "fixed_landmarks.csv"),
                     "--moving-landmarks", str(dataset / "moving_landmarks.csv"),
                     "--report", str(report), "--quiet"]) == 0
    doc = json.loads(report.read_text())
    assert doc["landmark_distance_mm"] >= 0.0
    assert "jacobian" in doc


def test_eval_needs_report(tmp_path):
    assert dispatch(["eval", "--field", str(tmp_path / "f"), "--quiet"]) == 2


def test_stats(tmp_path):
    header = "case,dice,tre\n"
    (tmp_path / "base.csv").write_text(header + "".join(
        f"c{i},{0.70 + 0.01 * i},{3.0 - 0.05 * i}\n" for i in range(8)))
    (tmp_path / "ours.csv").write_text(header + "".join(
        f"c{i},{0.80 + 0.012 * i},{2.0 - 0.04 * i}\n" for i in range(8)))
    report = tmp_path / "tests.csv"
    code = dispatch(["stats", "--baseline", str(tmp_path / "base.csv"), "--method", f"ours={tmp_path / 'ours.csv'}",
                     "--lower-better", "tre", "--report", str(report), "--report-format", "csv", "--quiet"])
    assert code == 0
    rows = list(csv.DictReader(report.open()))
    assert [r["name"] for r in rows] == ["ours:dice", "ours:tre"]
    assert all(r["reject"] == "True" for r in rows)


def test_stats_rejects_bad_method_syntax(tmp_path):
    (tmp_path / "base.csv").write_text("case,dice\nc1,0.5\nc2,0.6\n")
    code = dispatch(["stats", "--baseline", str(tmp_path / "base.csv"), "--method", "no-equals-sign",
                     "--report", str(tmp_path / "r.json"), "--quiet"])
    assert code == 2


@pytest.mark.slow
def test_dof_sweep_table(tmp_path):
    out = tmp_path / "dof.csv"
    code = dispatch(["dof-sweep", "--grids", "5,8,10,15", "--noise", "0.1", "--pairs", "1", "--iters", "2",
                     "--dims", "24,24,24", "--gt-grid", "4,4,4", "--max-disp", "1", "--out", str(out), "--quiet"])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["grid"] for r in rows] == ["5x5x5", "8x8x8", "10x10x10", "15x15x15"]
    assert all(float(r["noise"]) == 0.1 for r in rows)
    assert os.path.exists(manifest_path(str(out)))


def test_manifest_path():
    assert manifest_path("out/table.csv") == "out/table.manifest.json"
    assert manifest_path("out/field") == "out/field.manifest.json"
