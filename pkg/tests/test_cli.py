import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from vicoedit.cli import main
from vicoedit.experiments import (
    ConfigError,
    RunRecord,
    config_from_dict,
    load_manifest,
    parse_config,
    repeat_seed,
    run_experiment,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = {
    "model_path": "builtin:two-domain",
    "concepts": {"pos": ["grass", "sky"], "neg": ["dog", "cat"]},
    "source": {"prompt": "src"},
    "context": {"vector": [0.0, 0.0, 2.0, 1.5]},
    "edit": {"n_steps": 20, "n_max": 18},
}


def write_config(tmp_path, **overrides):
    cfg = {**BASE, "task": "edit-vicoedit", "output_dir": "out", **overrides}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def test_preset_flux_config_accepted(tmp_path):
    edit = {"n_steps": 50, "n_max": 47, "k_samples": 3, "tau": 0.25, "alpha_guidance": 0.5, "sigma_meas": 0.0,
            "cfg_src_T": 1.5, "cfg_tar_T": 5.5}
    cfg = parse_config(write_config(tmp_path, edit=edit))
    assert cfg.edit.n_max == 47
    assert cfg.edit.cfg_tar_img == 5.5


def test_tau_out_of_range_names_field(tmp_path):
    with pytest.raises(ConfigError, match="tau") as info:
        parse_config(write_config(tmp_path, edit={"tau": 1.5}))
    assert info.value.field == "edit.tau"


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="taus"):
        parse_config(write_config(tmp_path, taus=0.3))
    with pytest.raises(ConfigError, match="taus"):
        parse_config(write_config(tmp_path, edit={"taus": 0.3}))


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{\n  "task": "generate",\n  "model_path" "x"\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(path)


@pytest.mark.parametrize(
    "overrides,field",
    [
        (dict(task="teleport"), "task"),
        (dict(repeats=0), "repeats"),
        (dict(k_values=[]), "k_values"),
        (dict(source={"vector": [1, 2], "prompt": "src"}), "source"),
        (dict(source={"prompt": "src", "color": 1}), "source.color"),
        (dict(concepts={"pos": ["a"], "neg": ["a"]}), "concepts"),
    ],
)
def test_semantic_errors_name_field(tmp_path, overrides, field):
    with pytest.raises(ConfigError) as info:
        parse_config(write_config(tmp_path, **overrides))
    assert info.value.field == field


def test_edit_tasks_need_concepts(tmp_path):
    data = {k: v for k, v in BASE.items() if k != "concepts"}
    with pytest.raises(ConfigError, match="concepts"):
        config_from_dict({**data, "task": "edit-vicoedit"})


def test_repeat_seeds_are_stable():
    assert repeat_seed(0, 0) == repeat_seed(0, 0)
    assert len({repeat_seed(0, r) for r in range(50)}) == 50
    assert repeat_seed(0, 1) != repeat_seed(1, 0)


def test_identity_edit_preserves_source(tmp_path):
    cfg = config_from_dict({**BASE, "task": "edit-vicoedit", "target_prompt": "src", "context": None,
                            "edit": {"n_steps": 20, "n_max": 18, "alpha_guidance": 0.0}, "repeats": 3})
    rec = run_experiment(cfg, write=False)
    assert np.all(rec.metric("vicoedit", "source_rmse_unmasked") <= 1e-10)


def test_ablation_k_has_matched_arms():
    cfg = config_from_dict({**BASE, "task": "ablation-k", "k_values": [1, 3], "repeats": 2})
    rec = run_experiment(cfg, write=False)
    for rep, seed in zip(rec.repeats, rec.seeds):
        assert set(rep["arms"]) == {"K=1", "K=3"}
        assert rep["seed"] == seed


def test_ablation_skip_early_arms():
    cfg = config_from_dict({**BASE, "task": "ablation-skip-early", "skip_n_max": 10, "repeats": 1})
    rec = run_experiment(cfg, write=False)
    assert set(rec.repeats[0]["arms"]) == {"n_max=18", "n_max=10"}


def test_rerun_is_bitwise_identical():
    cfg = config_from_dict({**BASE, "task": "edit-inversion-baseline", "repeats": 2})
    a = run_experiment(cfg, write=False)
    b = run_experiment(cfg, write=False)
    assert a.repeats == b.repeats
    assert a.config_digest == b.config_digest


def test_outputs_and_manifest_roundtrip(tmp_path):
    cfg = parse_config(write_config(tmp_path, repeats=2))
    rec = run_experiment(cfg)
    out = tmp_path / "out"
    manifest = load_manifest(out / "manifest.json")
    assert manifest.to_dict() == rec.to_dict()
    assert RunRecord.from_dict(json.loads(json.dumps(rec.to_dict()))).to_dict() == rec.to_dict()
    for name in rec.artifacts:
        assert (out / name).exists()
    body = rec.repeats[0]["arms"]["vicoedit"]
    with open(out / body["trajectory"]) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "t", "v_tilde_norm", "v_hat_norm", "residual", "mask_fraction"]
    assert len(rows) == 18
    final = json.loads((out / body["final_state"]).read_text())
    assert len(final["vicoedit"]["x"]) == 4


def test_manifest_digest_is_checked(tmp_path):
    cfg = parse_config(write_config(tmp_path))
    data = run_experiment(cfg).to_dict()
    data["config"]["repeats"] = 9
    with pytest.raises(ValueError, match="digest"):
        RunRecord.from_dict(data)


def test_manifest_version_is_checked(tmp_path):
    cfg = parse_config(write_config(tmp_path))
    data = run_experiment(cfg).to_dict()
    data["version"] = 99
    with pytest.raises(ValueError, match="version"):
        RunRecord.from_dict(data)


def test_record_reproducible_from_embedded_config(tmp_path):
    cfg = parse_config(write_config(tmp_path, repeats=2))
    rec = run_experiment(cfg)
    again = run_experiment(config_from_dict(rec.config, base_dir=tmp_path), write=False)
    assert again.seeds == rec.seeds
    for a, b in zip(again.repeats, rec.repeats):
        assert a["arms"]["vicoedit"]["metrics"] == b["arms"]["vicoedit"]["metrics"]


def test_generate_and_roundtrip_tasks():
    gen = run_experiment(config_from_dict({"model_path": "builtin:two-domain", "task": "generate",
                                           "target_prompt": "tar", "edit": {"n_steps": 20}}), write=False)
    assert "target_mode_distance" in gen.summary()["generate"]
    rt = run_experiment(config_from_dict({"model_path": "builtin:two-domain", "task": "invert-roundtrip",
                                          "source": {"prompt": "src", "seed": 3},
                                          "edit": {"n_steps": 200, "n_max": 199}}), write=False)
    assert rt.summary()["roundtrip"]["roundtrip_error"] < 0.05


def test_model_file_relative_to_config(tmp_path):
    shutil.copy(CONFIGS / "two_domain_model.json", tmp_path / "model.json")
    cfg = parse_config(write_config(tmp_path, model_path="model.json"))
    assert cfg.load_model().latent_dim == 4


def test_shipped_configs_parse():
    paths = [p for p in CONFIGS.glob("*.json") if "model" not in p.name]
    assert paths
    for path in paths:
        parse_config(path)


# ---------------------------------------------------------------- CLI
def test_cli_run_and_show(tmp_path, capsys):
    path = write_config(tmp_path, repeats=1)
    out = tmp_path / "cli_out"
    assert main(["run", str(path), "--output-dir", str(out), "--seed", "5", "--repeats", "2", "--quiet"]) == 0
    assert capsys.readouterr().out == ""
    rec = load_manifest(out / "manifest.json")
    assert rec.base_seed == 5 and len(rec.seeds) == 2
    assert main(["show", str(out / "manifest.json")]) == 0
    assert "vicoedit" in capsys.readouterr().out


def test_cli_validation_error_exit_code(tmp_path, capsys):
    path = write_config(tmp_path, edit={"tau": 1.5})
    assert main(["run", str(path)]) == 1
    assert "tau" in capsys.readouterr().err


def test_cli_missing_file(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 1
    assert main(["show", str(tmp_path / "nope.json")]) == 1


def test_cli_unknown_suite():
    with pytest.raises(SystemExit) as info:
        main(["verify", "everything"])
    assert info.value.code == 1


def test_cli_verify_schedule(capsys):
    assert main(["verify", "schedule"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_cli_verify_failure_exit_code(monkeypatch, capsys):
    from vicoedit import verify

    bad = verify.Check("always fails", 1.0, 0.0, False)
    monkeypatch.setitem(verify.SUITES, "schedule", [lambda: bad])
    assert main(["verify", "schedule"]) == 2
    assert "FAIL" in capsys.readouterr().out
