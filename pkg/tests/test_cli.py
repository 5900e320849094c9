import json
import os

import numpy as np
import pytest

from syncsampler import artifacts, cli
from syncsampler.config import resolve
from syncsampler.denoisers import point_mass
from syncsampler.errors import InvalidConfiguration, SyncSamplerError
from syncsampler.projections import EquirectProjector

M = np.array([0.25, -0.5, 0.75, 1.0])


@pytest.fixture
def gmm_file(tmp_path):
    path = tmp_path / "pm.json"
    path.write_text(json.dumps(point_mass(M).to_dict()))
    return str(path)


def _runs(out):
    return sorted(d for d in os.listdir(out) if cli._RUN_DIR.match(d))


def _only_run(out):
    runs = _runs(out)
    assert len(runs) == 1
    return os.path.join(out, runs[0])


# --- presets and resolution ----------------------------------------------------------------

def test_default_quality_preset():
    cfg = resolve(task="panorama", preset="paper-default")
    s = cfg.sampler
    assert (s.t_start, s.t_stop, s.n_outer_steps) == (900, 270, 25)
    assert (s.inner_steps, s.inner_decay, s.blend_last_k) == (50, True, 2)
    assert cfg.params["n_views"] == 5
    proj = EquirectProjector(cfg.params["height"], view_size=cfg.params["view_size"],
                             n_views=cfg.params["n_views"])
    assert [v.azimuth for v in proj.view_set(0)] == [0, 72, 144, 216, 288]


def test_fast_preset():
    s = resolve(task="panorama", preset="fast").sampler
    assert (s.t_start, s.t_stop, s.n_outer_steps) == (900, 700, 8)


def test_flags_override_presets():
    cfg = resolve(task="ring", preset="fast", sampler_overrides={"n_outer_steps": 3}, seed=4)
    assert cfg.sampler.n_outer_steps == 3 and cfg.sampler.seed == 4 == cfg.seed
    with pytest.raises(InvalidConfiguration):
        resolve(task="ring", param_overrides={"height": 3})
    with pytest.raises(InvalidConfiguration):
        resolve(task="ring", sampler_overrides={"bogus": 1})


# --- exit codes ------------------------------------------------------------------------------

def test_no_arguments_is_usage_error(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--task", "ring", "--frobnicate"])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv", [
    ["--task", "ring", "--set", "max_sigma=false"],
    ["--task", "ring", "--set", "t_stop=950"],
    ["--task", "ring", "--emit", "pdf"],
    ["--task", "ring", "--param", "n=oops=1", "--set", "n_outer_steps=0"],
])
def test_invalid_configuration_exit_code(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 3
    assert not os.listdir(tmp_path)


def test_missing_files_exit_code(tmp_path):
    assert cli.main(["--config", str(tmp_path / "nope.json")]) == 5
    assert cli.main(["--task", "ring", "--gmm", str(tmp_path / "nope.json")]) == 5


def test_malformed_config_is_invalid(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("[1, 2]")
    assert cli.main(["--config", str(bad)]) == 3
    bad.write_text('{"task": "ring", "colour": 1}')
    assert cli.main(["--config", str(bad)]) == 3


def test_runtime_failure_leaves_partial_manifest(tmp_path, monkeypatch, capsys):
    def boom(cfg, sched):
        raise SyncSamplerError("solver diverged")

    monkeypatch.setitem(cli.TASK_RUNNERS, "ring", boom)
    assert cli.main(["--task", "ring", "--out", str(tmp_path)]) == 4
    status, _ = artifacts.read_manifest(os.path.join(_only_run(tmp_path), "MANIFEST"))
    assert status == "partial"
    assert "solver diverged" in capsys.readouterr().err


# --- configuration fixpoint ----------------------------------------------------------------

def test_print_config_is_a_fixpoint(tmp_path, capsys):
    assert cli.main(["--task", "ring", "--preset", "fast", "--seed", "3",
                     "--set", "inner_steps=7", "--param", "n=12", "--print-config"]) == 0
    first = capsys.readouterr().out
    path = tmp_path / "cfg.json"
    path.write_text(first)
    assert cli.main(["--config", str(path), "--print-config"]) == 0
    second = capsys.readouterr().out
    assert first == second
    doc = json.loads(first)
    assert doc["sampler"]["inner_steps"] == 7 and doc["params"]["n"] == 12 and doc["seed"] == 3
    a = resolve(file_doc=json.loads(first))
    b = resolve(file_doc=json.loads(second))
    assert a.config_hash() == b.config_hash()


# --- runs ----------------------------------------------------------------------------------------

def test_ring_point_mass_smoke(tmp_path, gmm_file, capsys):
    assert cli.main(["--task", "ring", "--gmm", gmm_file, "--out", str(tmp_path)]) == 0
    run = _only_run(tmp_path)
    status, sums = artifacts.read_manifest(os.path.join(run, "MANIFEST"))
    assert status == "complete"
    assert {"config.json", "summary.json", "metrics.csv", "images/ring.ppm",
            "images/ring.json", "ring.png"} <= set(sums)
    side = json.load(open(os.path.join(run, "images", "ring.json")))
    assert (side["min"], side["max"]) == (M.min(), M.max())
    img = artifacts.read_ppm(os.path.join(run, "images", "ring.ppm"))[0, :, 0]
    # 25 outer steps: the last sync uses the tiling offset by two texels
    tiled = np.roll(np.tile(M, 4), 2)
    expect = np.rint((tiled - M.min()) / (M.max() - M.min()) * 255)
    assert np.array_equal(img, expect)
    assert json.load(open(os.path.join(run, "summary.json")))["seam_score"] == 1.0
    assert "ring 0001-" in capsys.readouterr().out


def test_rerun_never_overwrites_and_matches(tmp_path, gmm_file):
    argv = ["--task", "ring", "--gmm", gmm_file, "--out", str(tmp_path), "--preset", "fast"]
    assert cli.main(argv) == 0 and cli.main(argv) == 0
    a, b = _runs(tmp_path)
    assert a.startswith("0001-") and b.startswith("0002-") and a[5:] == b[5:]
    ma = open(os.path.join(tmp_path, a, "MANIFEST")).read()
    mb = open(os.path.join(tmp_path, b, "MANIFEST")).read()
    assert ma == mb


def test_trace_emission_is_marked_volatile(tmp_path, gmm_file):
    assert cli.main(["--task", "ring", "--gmm", gmm_file, "--out", str(tmp_path),
                     "--preset", "toy", "--emit", "csv,trace"]) == 0
    run = _only_run(tmp_path)
    _, sums = artifacts.read_manifest(os.path.join(run, "MANIFEST"))
    assert sums["trace.csv"] == "volatile"
    assert "images/ring.ppm" not in sums
    rows = artifacts.read_csv(os.path.join(run, "trace.csv"))
    assert tuple(rows[0]) == artifacts.TRACE_HEADER and len(rows) > 1


def test_divergence_table_has_two_rows_per_policy(tmp_path):
    assert cli.main(["--task", "divergence", "--param", "counts=[10,100]",
                     "--out", str(tmp_path)]) == 0
    run = _only_run(tmp_path)
    rows = artifacts.read_csv(os.path.join(run, "table.csv"))
    assert rows[0] == ["policy", "steps", "nll"]
    policies = [r[0] for r in rows[1:]]
    assert policies.count("max") == 2 and policies.count("zero") == 2
    assert os.path.exists(os.path.join(run, "divergence.png"))


def test_outputs_independent_of_thread_count(tmp_path, monkeypatch):
    sums = []
    for threads in ("1", "4"):
        monkeypatch.setenv("SYNCSAMPLER_THREADS", threads)
        os.makedirs(tmp_path / threads)
        monkeypatch.chdir(tmp_path / threads)
        assert cli.main(["--task", "divergence", "--param", "counts=[10,50]",
                         "--param", "n_chains=30", "--out", "runs"]) == 0
        sums.append(artifacts.read_manifest(os.path.join(_only_run("runs"), "MANIFEST")))
    assert sums[0] == sums[1]
