import numpy as np
import pytest

from hcmt.mesh import Trajectory
from hcmt.model import HCMT, ModelConfig
from hcmt.rollout import (
    ConstantVelocity,
    ModelPredictor,
    evaluate,
    evaluate_dataset,
    load_rollout,
    one_step_rmse,
    rmse,
    rollout,
    save_rollout,
    write_report,
)


def zero_oracle(topology, state):
    return np.zeros_like(state.world_coords), np.zeros(topology.num_nodes)


class Replay:
    """Predicts the recorded next step, optionally with a constant offset."""

    def __init__(self, trajectory, offset=0.0):
        self.traj = trajectory
        self.offset = offset

    def __call__(self, topology, state):
        t = int(np.argmin([np.abs(p - state.world_coords).max() for p in self.traj.positions[1:-1]]))
        velocity = self.traj.positions[t + 2] - state.world_coords + self.offset
        return velocity, self.traj.stress[t + 2] + self.offset


def test_zero_oracle_keeps_initial_state(impact_trajectory):
    result = rollout(zero_oracle, impact_trajectory)
    assert result.num_steps == impact_trajectory.num_steps
    assert np.all(result.positions == result.positions[0])
    assert np.all(result.stress == 0)
    assert not result.truncated


def test_rollout_length_and_start(impact_trajectory):
    assert rollout(zero_oracle, impact_trajectory, start=5).num_steps == impact_trajectory.num_steps - 5
    assert rollout(zero_oracle, impact_trajectory, steps=3).positions.shape[0] == 4
    with pytest.raises(ValueError):
        rollout(zero_oracle, impact_trajectory, steps=impact_trajectory.num_steps + 1)


def test_perfect_rollout_scores_zero(impact_trajectory):
    traj = impact_trajectory
    result = rollout(Replay(traj), traj)
    metrics = evaluate(result, traj)
    assert all(v == pytest.approx(0.0, abs=1e-9) for v in metrics.values())


def test_constant_residual():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(10, 7, 2))
    assert 1e3 * rmse(truth + 0.004, truth) == pytest.approx(4.0)


def test_rmse_shape_mismatch():
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(4))


def test_constant_offset_rmse_all(impact_trajectory):
    # free nodes carry error e per axis, fixed nodes are pinned, so RMSE-all is e scaled by the free fraction
    traj = impact_trajectory
    e = 1e-3
    result = rollout(Replay(traj, offset=e), traj, steps=1)
    metrics = evaluate(result, traj)
    free = (~traj.topology.fixed_mask).mean()
    assert metrics["position_rmse_1"] == pytest.approx(1e3 * e * np.sqrt(free), rel=1e-6)
    assert metrics["position_rmse_1"] == metrics["position_rmse_all"]
    assert metrics["stress_rmse_1"] == pytest.approx(1e3 * e)


def test_fixed_nodes_pinned(impact_trajectory):
    traj = impact_trajectory

    def wild(topology, state):
        return np.ones_like(state.world_coords), state.stress

    result = rollout(wild, traj)
    fixed = traj.topology.fixed_mask
    assert np.array_equal(result.positions[:, fixed], traj.positions[1:, fixed])


def test_truncation_flag(impact_trajectory):
    def explode(topology, state):
        return np.full_like(state.world_coords, 1e3), state.stress

    result = rollout(explode, impact_trajectory, bound=2500.0)
    assert result.truncated and result.truncated_at == 2
    assert result.positions.shape[0] == impact_trajectory.num_steps + 1
    assert np.array_equal(result.positions[-1], result.positions[2])


def test_contact_counts_change(impact_trajectory):
    counts = rollout(Replay(impact_trajectory), impact_trajectory).contact_counts
    assert counts[0] == 0 and counts.max() > 0


def test_one_step_equals_rollout_for_single_step():
    rng = np.random.default_rng(1)
    from hcmt.datagen import PRESETS, simulate

    top, pos, sig, _, _ = simulate(PRESETS["impact2d"].with_(steps=1), rng)
    traj = Trajectory(top, pos, sig, 0.005)
    cv = ConstantVelocity()
    one = one_step_rmse(cv, traj)
    full = evaluate(rollout(cv, traj), traj)
    assert one["position_rmse_one_step"] == pytest.approx(full["position_rmse_all"])
    assert full["position_rmse_1"] == full["position_rmse_all"]


def test_constant_velocity_baseline(impact_trajectory):
    traj = impact_trajectory
    state = traj.state(4)
    velocity, stress = ConstantVelocity()(traj.topology, state)
    assert np.array_equal(velocity, traj.positions[5] - traj.positions[4])
    assert np.array_equal(stress, traj.stress[5])


def test_model_rollout_deterministic(impact_trajectory):
    config = ModelConfig(hidden=8, heads=2, l_c=1, l_h=3, lam=1)
    model = HCMT(config)
    model.freeze_normalizers()
    a = rollout(ModelPredictor(model), impact_trajectory, steps=5)
    b = rollout(ModelPredictor(model), impact_trajectory, steps=5)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.stress, b.stress)


def test_rollout_file_round_trip(tmp_path, impact_trajectory):
    traj = impact_trajectory
    result = rollout(ConstantVelocity(), traj, start=2)
    save_rollout(tmp_path / "r.bin", result, traj, start=2)
    save_rollout(tmp_path / "s.bin", result, traj, start=2)
    assert (tmp_path / "r.bin").read_bytes() == (tmp_path / "s.bin").read_bytes()
    back = load_rollout(tmp_path / "r.bin")
    assert np.array_equal(back["positions"], result.positions)
    assert np.array_equal(back["truth_positions"], traj.positions[3:])
    assert np.array_equal(back["cells"], traj.topology.cells)
    assert back["start"] == 2
    (tmp_path / "bad.bin").write_bytes(b"garbage!" + b"\0" * 8)
    with pytest.raises(ValueError):
        load_rollout(tmp_path / "bad.bin")


def test_evaluate_dataset_and_report(small_dataset, tmp_path):
    metrics = evaluate_dataset(ConstantVelocity(), small_dataset, "test")
    traj = small_dataset.trajectory(4)
    direct = evaluate(rollout(ConstantVelocity(), traj, radius=small_dataset.gamma), traj)
    assert metrics["position_rmse_all"] == pytest.approx(direct["position_rmse_all"])
    text = write_report(tmp_path / "r.tsv", "impact2d", {"cv": metrics})
    lines = text.strip().split("\n")
    assert lines[0] == "metric\tdataset\tposition\tstress"
    assert lines[1].startswith("RMSE-1 [cv]\timpact2d\t")
    assert len(lines) == 4
    assert (tmp_path / "r.tsv").read_text() == text
