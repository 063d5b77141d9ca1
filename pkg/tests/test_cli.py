"""End-to-end tests for the command-line interface."""

import json

import pytest

from orthojac.cli import main
from orthojac.train import METRICS_HEADER

RELU = {"breakpoints": [0.0], "slopes": [0.0, 1.0], "anchor_value": 0.0}
LEAKY = {"breakpoints": [0.0], "slopes": [0.3, 1.0], "anchor_value": 0.0}
SIGMA3 = {"breakpoints": [-1.0, 0.0, 1.0], "slopes": [1.0, -1.0, 1.0, -1.0],
          "anchor_value": 1.0}


def reflection_layer(n=8, seed=11, bias=0.1):
    return {"type": "case_ii", "n": n, "B": {"seed": seed}, "b": [bias] * n,
            "ell": 1.0, "c": 0.0, "d": -2.0, "sigma": RELU}


def bump_limit(n=8, seed=31, bias=0.25):
    return {"type": "limit", "n": n, "B": {"seed": seed}, "b": [bias] * n,
            "m": {"kind": "gaussian_bump", "scale": 0.01},
            "q": {"kind": "constant", "value": 0.0}}


def run(tmp_path, command, config, out="out", extra=()):
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps(config))
    out_dir = tmp_path / out
    code = main([command, "--config", str(path), "--out", str(out_dir), *extra])
    return code, out_dir


# ---------------------------------------------------------------------------
# config validation and exit codes
# ---------------------------------------------------------------------------


def test_malformed_json_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    assert main(["verify", "--config", str(path)]) == 2
    assert "malformed JSON" in capsys.readouterr().err


def test_unknown_top_level_key_exits_2(tmp_path, capsys):
    config = {"probes": 10, "turbo": True,
              "layers": [{"name": "a", "layer": reflection_layer()}]}
    code, _ = run(tmp_path, "verify", config)
    assert code == 2
    assert "turbo" in capsys.readouterr().err


def test_unknown_entry_key_exits_2(tmp_path):
    config = {"layers": [{"name": "a", "layer": reflection_layer(), "color": "red"}]}
    assert run(tmp_path, "verify", config)[0] == 2


def test_missing_required_key_exits_2(tmp_path, capsys):
    code, _ = run(tmp_path, "verify", {"probes": 10})
    assert code == 2
    assert "layers" in capsys.readouterr().err


def test_command_mismatch_exits_2(tmp_path):
    config = {"command": "density",
              "layers": [{"name": "a", "layer": reflection_layer()}]}
    assert run(tmp_path, "verify", config)[0] == 2


def test_bad_criterion_duplicate_and_unsafe_names(tmp_path):
    base = {"probes": 10}
    bad_crit = {**base, "layers": [{"name": "a", "layer": reflection_layer(),
                                    "criterion": "sparkle"}]}
    assert run(tmp_path, "verify", bad_crit)[0] == 2
    dupes = {**base, "layers": [{"name": "a", "layer": reflection_layer()},
                                {"name": "a", "layer": reflection_layer(seed=12)}]}
    assert run(tmp_path, "verify", dupes)[0] == 2
    unsafe = {**base, "layers": [{"name": "../escape", "layer": reflection_layer()}]}
    assert run(tmp_path, "verify", unsafe)[0] == 2


def test_missing_subcommand_usage_error():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def test_verify_strict_layer_passes(tmp_path, capsys):
    config = {"seed": 3, "probes": 200,
              "layers": [{"name": "reflection", "layer": reflection_layer()}]}
    code, out_dir = run(tmp_path, "verify", config)
    assert code == 0
    assert "reflection: pass" in capsys.readouterr().out
    report = json.loads((out_dir / "verify_reflection.json").read_text())
    assert report["pass"] is True
    assert report["max_orth_defect"] <= 1e-10
    assert report["probes"] == 200
    assert len(report["config_sha256"]) == 64


def test_verify_unchecked_leaky_fails(tmp_path):
    layer = dict(reflection_layer(seed=15, bias=0.0), strict=False, sigma=LEAKY)
    config = {"seed": 3, "probes": 50,
              "layers": [{"name": "leaky", "layer": layer}]}
    code, out_dir = run(tmp_path, "verify", config)
    assert code == 1
    report = json.loads((out_dir / "verify_leaky.json").read_text())
    assert report["pass"] is False
    assert report["max_orth_defect"] >= 0.5


def test_verify_isometry_criterion(tmp_path):
    config = {"seed": 5, "probes": 100,
              "layers": [{"name": "bump", "criterion": "isometry",
                          "layer": bump_limit(n=16)}]}
    code, out_dir = run(tmp_path, "verify", config)
    assert code == 0
    report = json.loads((out_dir / "verify_bump.json").read_text())
    assert report["criterion"] == "sv_interval"
    assert report["bound_epsilon"] is not None
    assert 1.0 - report["bound_epsilon"] <= report["sv_min"]


def test_verify_isometry_needs_limit_layer(tmp_path):
    config = {"layers": [{"name": "a", "layer": reflection_layer(),
                          "criterion": "isometry"}]}
    assert run(tmp_path, "verify", config)[0] == 2


def test_verify_seed_override_changes_hash(tmp_path):
    config = {"seed": 3, "probes": 20,
              "layers": [{"name": "reflection", "layer": reflection_layer()}]}
    _, out_a = run(tmp_path, "verify", config, out="a")
    _, out_b = run(tmp_path, "verify", config, out="b", extra=("--seed", "9"))
    rep_a = json.loads((out_a / "verify_reflection.json").read_text())
    rep_b = json.loads((out_b / "verify_reflection.json").read_text())
    assert rep_a["config_sha256"] != rep_b["config_sha256"]
    assert rep_b["seed"] == 9


def test_verify_rerun_byte_identical(tmp_path):
    config = {"seed": 3, "probes": 50,
              "layers": [{"name": "reflection", "layer": reflection_layer()}]}
    _, out_a = run(tmp_path, "verify", config, out="a")
    _, out_b = run(tmp_path, "verify", config, out="b")
    assert ((out_a / "verify_reflection.json").read_bytes()
            == (out_b / "verify_reflection.json").read_bytes())


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


def spectrum_config(probes=100, **extra):
    return {"seed": 5, "probes": probes,
            "layers": [reflection_layer(seed=21, bias=0.05),
                       reflection_layer(seed=22, bias=0.05)], **extra}


def test_spectrum_strict_stack_single_bin(tmp_path):
    code, out_dir = run(tmp_path, "spectrum", spectrum_config())
    assert code == 0
    lines = (out_dir / "spectrum_probes.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    assert lines[1] == "probe,sv_min,sv_max"
    assert len(lines) == 102
    hist = [line.split(",") for line
            in (out_dir / "spectrum_histogram.csv").read_text().splitlines()[2:]]
    assert len(hist) == 64
    nonzero = [(float(lo), float(hi), int(c)) for lo, hi, c in hist if int(c) > 0]
    assert len(nonzero) == 1
    low, high, count = nonzero[0]
    assert low <= 1.0 < high
    assert count == 100 * 8


def test_spectrum_all_probes_skipped_exits_1(tmp_path, capsys):
    code, _ = run(tmp_path, "spectrum", spectrum_config(probes=5, margin=1e9))
    assert code == 1
    assert "probes" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def test_density_constant_fields_measure_zero(tmp_path):
    layer = dict(bump_limit(), m={"kind": "constant", "value": 1.0})
    config = {"seed": 7, "probes": 50, "radius": 1.5, "layer": layer}
    code, out_dir = run(tmp_path, "density", config)
    assert code == 0
    rows = [line.split(",") for line
            in (out_dir / "density.csv").read_text().splitlines()[2:]]
    assert [int(r[0]) for r in rows] == [2, 4, 8, 16]
    assert all(float(r[1]) == 0.0 for r in rows)


def test_density_bump_rows_bounded_and_refining(tmp_path):
    config = {"seed": 7, "probes": 100, "radius": 1.5,
              "layer": bump_limit(bias=0.3536)}
    code, out_dir = run(tmp_path, "density", config)
    assert code == 0
    rows = [line.split(",") for line
            in (out_dir / "density.csv").read_text().splitlines()[2:]]
    measured = [float(r[1]) for r in rows]
    bounds = [float(r[2]) for r in rows]
    assert all(m <= b for m, b in zip(measured, bounds))
    assert measured[-1] <= measured[0]


def test_density_rejects_non_limit_layer(tmp_path):
    config = {"layer": reflection_layer()}
    assert run(tmp_path, "density", config)[0] == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def train_config(**overrides):
    config = {"model": "resnet_relu", "width": 8, "depth": 10, "lr0": 0.01,
              "epochs": 15, "batch_size": 32, "seed": 9,
              "data": {"kind": "blobs", "classes": 2, "dim": 8,
                       "per_class": 100, "spread": 0.1, "val_fraction": 0.2}}
    config.update(overrides)
    return config


def test_train_blobs_smoke(tmp_path, capsys):
    code, out_dir = run(tmp_path, "train", train_config())
    assert code == 0
    assert "best_val_acc=" in capsys.readouterr().out
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["best_val_acc"] >= 0.95
    assert summary["model"] == "resnet_relu"
    lines = (out_dir / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    assert lines[1] == METRICS_HEADER
    assert (out_dir / "snapshot.bin").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_1(tmp_path, capsys):
    config = train_config(model="resnet_AB_baseline", depth=30, lr0=1e6,
                          epochs=3)
    code, _ = run(tmp_path, "train", config)
    assert code == 1
    assert "diverged at epoch" in capsys.readouterr().err


def test_train_rerun_identical_outputs(tmp_path):
    config = train_config(epochs=4)
    _, out_a = run(tmp_path, "train", config, out="a")
    _, out_b = run(tmp_path, "train", config, out="b")

    def stable_csv(out_dir):
        lines = (out_dir / "metrics.csv").read_text().splitlines()
        return [lines[0], lines[1]] + [l.rsplit(",", 1)[0] for l in lines[2:]]

    assert stable_csv(out_a) == stable_csv(out_b)
    sum_a = json.loads((out_a / "summary.json").read_text())
    sum_b = json.loads((out_b / "summary.json").read_text())
    sum_a.pop("wall_clock"), sum_b.pop("wall_clock")
    assert sum_a == sum_b
    assert ((out_a / "snapshot.bin").read_bytes()
            == (out_b / "snapshot.bin").read_bytes())


def test_train_fashion_without_data_root_exits_2(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("ORTHOJAC_DATA", raising=False)
    config = train_config(data={"kind": "fashion_mnist"})
    code, _ = run(tmp_path, "train", config)
    assert code == 2
    assert "ORTHOJAC_DATA" in capsys.readouterr().err


def test_train_missing_dataset_files_exit_2(tmp_path, capsys):
    config = train_config(data={"kind": "fashion_mnist"})
    code, _ = run(tmp_path, "train", config,
                  extra=("--data", str(tmp_path / "nowhere")))
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_train_unknown_data_kind_exits_2(tmp_path):
    config = train_config(data={"kind": "clouds"})
    assert run(tmp_path, "train", config)[0] == 2


def test_train_unknown_model_exits_2(tmp_path):
    assert run(tmp_path, "train", train_config(model="mystery"))[0] == 2
