import json

import numpy as np
import pytest
import torch

from smilegen import training as tr
from smilegen.checkpoint import ModelConfig, ModelState, load_checkpoint, read_manifest, save_checkpoint
from smilegen.errors import DependencyError, IncompatibleCheckpointError, NonFiniteLossError, ValidationError

FAST = tr.OptimizerConfig(lr=1e-3, frame_batch=16, sequence_batch=4)


def run(state, phase, data, epochs=1, **kw):
    return tr.run_phase(state, tr.PhasePlan(phase, epochs), data, FAST, **kw)


@pytest.fixture(scope="module")
def trained(tiny_split):
    from conftest import TINY_MODEL

    state = ModelState(ModelConfig(**TINY_MODEL))
    logs = {}
    for phase in ("vae", "cond", "multimode"):
        logs[phase] = run(state, phase, tiny_split)
    return state, logs


def test_default_epochs():
    assert tuple(tr.DEFAULT_EPOCHS[p] for p in tr.PHASES) == (50, 20, 10, 20)
    assert tr.PhasePlan("vae").n_epochs == 50


def test_plan_and_optimizer_validation():
    with pytest.raises(ValidationError):
        tr.PhasePlan("warmup")
    with pytest.raises(ValidationError):
        tr.OptimizerConfig(lr=0.0)


def test_prerequisites_enforced(tiny_config, tiny_split):
    state = ModelState(tiny_config)
    with pytest.raises(DependencyError):
        run(state, "cond", tiny_split)
    with pytest.raises(DependencyError):
        run(state, "multimode", tiny_split)


def test_lineage_after_three_phases(trained):
    state, _ = trained
    assert state.lineage == ["vae", "cond", "multimode"]
    assert state.shape_model is not None


def test_metrics_log_lines(tiny_config, tiny_split, tmp_path):
    state = ModelState(tiny_config)
    log = tmp_path / "m.jsonl"
    records = run(state, "vae", tiny_split, epochs=2, log_path=log)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert len(lines) == 2 == len(records)
    assert lines[0]["phase"] == "vae" and lines[1]["epoch"] == 2
    assert {"total", "bce", "kl"} <= set(lines[0])


def test_multimode_trains_new_cells_and_fine_tunes_cond(tiny_config, tiny_split):
    state = ModelState(tiny_config)
    run(state, "vae", tiny_split)
    run(state, "cond", tiny_split)
    cond_before = state.parameter_snapshot(["cond_gen"])
    bank_before = state.parameter_snapshot(["mode_bank"])
    run(state, "multimode", tiny_split)
    assert len(state.mode_bank.cells) == 3
    assert any(not torch.equal(v, state.parameter_snapshot(["cond_gen"])[k]) for k, v in cond_before.items())
    # trained from a fresh initialization: differs from whatever the container held before
    after = state.parameter_snapshot(["mode_bank"])
    assert all(not torch.equal(bank_before[k], after[k]) for k in after if "weight" in k)


def test_translator_phase_leaves_landmark_path_untouched(trained, tiny_split):
    state, _ = trained
    before = state.parameter_snapshot(["vae", "cond_gen", "mode_bank", "mode_disc"])
    gen_before = state.parameter_snapshot(["translator_gen"])
    run(state, "translator", tiny_split)
    after = state.parameter_snapshot(["vae", "cond_gen", "mode_bank", "mode_disc"])
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert any(not torch.equal(v, state.parameter_snapshot(["translator_gen"])[k]) for k, v in gen_before.items())
    assert "translator" in state.lineage


def test_translator_needs_no_prior_phase(tiny_config, tiny_split):
    state = ModelState(tiny_config)
    plan = tr.PhasePlan("translator", 1, frames_per_sequence=2)
    records = tr.run_phase(state, plan, tiny_split, FAST)
    assert len(records) == 1 and {"disc", "gen_adv", "rec"} <= set(records[0])


def test_runs_are_deterministic(tiny_config, tiny_split):
    logs = []
    for _ in range(2):
        state = ModelState(tiny_config)
        logs.append(run(state, "vae", tiny_split) + run(state, "cond", tiny_split))
    assert logs[0] == logs[1]


def test_non_finite_loss_aborts_with_dump(tiny_config, tiny_split, tmp_path):
    state = ModelState(tiny_config)
    with torch.no_grad():
        state.vae.mean_head.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        run(state, "vae", tiny_split, dump_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_vae.json").read_text())
    assert dump["phase"] == "vae" and dump["epoch"] == 1


def test_sequence_length_must_match(tiny_split):
    from conftest import TINY_MODEL

    state = ModelState(ModelConfig(**{**TINY_MODEL, "T": 7}))
    with pytest.raises(ValidationError):
        run(state, "vae", tiny_split)


def test_min_pairwise_distance():
    x = torch.tensor([[[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]]])
    assert tr.min_pairwise_distance(x).item() == pytest.approx(1.0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_byte_identical(trained, tmp_path):
    state, _ = trained
    a = save_checkpoint(state, tmp_path / "a.zip")
    loaded = load_checkpoint(a)
    b = save_checkpoint(loaded, tmp_path / "b.zip")
    assert a.read_bytes() == b.read_bytes()
    for k, v in state.parameter_snapshot(state.trained_sections()).items():
        assert torch.equal(v, loaded.parameter_snapshot(loaded.trained_sections())[k])
    assert np.array_equal(loaded.shape_model.components, state.shape_model.components)


def test_manifest_contents(trained, tmp_path):
    state, _ = trained
    man = read_manifest(save_checkpoint(state, tmp_path / "c.zip"))
    assert man["lineage"] == state.lineage
    assert man["lineage"][:3] == ["vae", "cond", "multimode"]
    assert man["K"] == 3
    assert man["labels"] == ["spontaneous", "posed"]
    assert man["fingerprint"] == state.fingerprint()


def test_checkpoint_k_mismatch(trained, tmp_path):
    state, _ = trained
    path = save_checkpoint(state, tmp_path / "k3.zip")
    from conftest import TINY_MODEL

    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path, expected=ModelConfig(**{**TINY_MODEL, "K": 4}))
    assert load_checkpoint(path, expected=ModelConfig(**{**TINY_MODEL, "seed": 9})).config.K == 3


def test_checkpoint_garbage_file(tmp_path):
    p = tmp_path / "x.zip"
    p.write_bytes(b"not a zip")
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(p)
