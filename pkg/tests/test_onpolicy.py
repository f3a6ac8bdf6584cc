import json

import pytest

from magics_lab.algos.onpolicy import A2CConfig, train_a2c

TINY = A2CConfig(env="double-integrator", iterations=3, n_envs=2, hidden=(16,), fisher_samples=16)


def test_magics_a2c_runs_and_corrects(tmp_path):
    _, _, records = train_a2c(TINY, tmp_path)
    assert len(records) == 3 and all(r["grad_norm_correction"] > 0 for r in records)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["iteration"] == 3
    assert (tmp_path / "checkpoint.bin").exists()


def test_baseline_has_no_correction():
    _, _, records = train_a2c(A2CConfig(**{**TINY.__dict__, "variant": "baseline"}))
    assert all(r["grad_norm_correction"] == 0 for r in records)


def test_deterministic():
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time_s"} for r in rs]  # noqa: E731
    assert strip(train_a2c(TINY)[2]) == strip(train_a2c(TINY)[2])


def test_alias_and_validation():
    assert A2CConfig(variant="magics-a2c").variant == "magics"
    with pytest.raises(ValueError):
        A2CConfig(tau_a=0.1)
