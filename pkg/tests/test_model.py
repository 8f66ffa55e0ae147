import numpy as np
import pytest
import torch

from hcmt.gradcheck import small_instance
from hcmt.hierarchy import build_hierarchy
from hcmt.mesh import ConfigError
from hcmt.model import (
    HCMT,
    ModelConfig,
    load_model,
    loss_fn,
    make_targets,
    prepare_inputs,
    save_model,
    update_positions,
)
from hcmt.nn import DTYPE, CheckpointError
from hcmt.training import train, warmup_steps


def small_config(**kw):
    base = dict(hidden=8, heads=2, l_c=1, l_h=3, lam=1, radius=0.6)
    base.update(kw)
    return ModelConfig(**base)


def fitted_model(config, seed=0):
    torch.manual_seed(seed)
    model = HCMT(config)
    top, state, nxt, sig = small_instance(seed)
    inputs = prepare_inputs(top, state, build_hierarchy(top, config.num_levels), config.radius)
    model.accumulate_stats(inputs, make_targets(state.world_coords, nxt, sig))
    model.freeze_normalizers()
    return model, inputs, top


def test_defaults():
    c = ModelConfig()
    assert (c.hidden, c.heads, c.l_c, c.l_h, c.lam) == (128, 4, 2, 13, 6)
    assert c.l_c + c.l_h == 15
    assert c.noise_std == 0.003 and (c.clip_min, c.clip_max) == (-2.0, 2.0)


def test_config_text_round_trip():
    text = """
    # small run
    l_c = 1
    l_h = 3
    lambda = 1     # levels
    hidden = 16
    variant = late_contact
    single_branch = true
    branch_params = separate
    """
    c = ModelConfig.from_text(text)
    assert (c.l_c, c.l_h, c.lam, c.hidden, c.variant, c.single_branch, c.branch_params) == (
        1, 3, 1, 16, "late_contact", True, "separate"
    )
    assert ModelConfig.from_text(c.to_text()) == c
    assert "lambda = 1" in c.to_text()


@pytest.mark.parametrize(
    "text",
    [
        "l_c = 2\nl_c = 3",
        "colour = red",
        "hidden = many",
        "no equals sign",
        "variant = sideways",
        "hidden = 10\nheads = 4",
        "l_h = 12\nlambda = 6",
        "clip_min = 2\nclip_max = -2",
        "radius = 0",
        "single_branch = maybe",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ModelConfig.from_text(text)


def test_config_file_missing(tmp_path):
    with pytest.raises(ConfigError):
        ModelConfig.from_file(tmp_path / "absent.cfg")


def test_block_counts():
    assert ModelConfig(variant="full").block_counts() == (2, 13)
    assert ModelConfig(variant="late_contact").block_counts() == (2, 13)
    assert ModelConfig(variant="only_cmt").block_counts() == (15, 0)
    assert ModelConfig(variant="only_hmt").block_counts() == (0, 15)
    assert ModelConfig(variant="only_cmt").num_levels == 0


def test_update_positions_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    fixed = np.array([False, True])
    v = np.array([[0.1, -0.2], [5.0, 5.0]])
    out = update_positions(x, v, fixed)
    assert np.allclose(out[0], [1.1, 1.8])
    assert np.array_equal(out[1], x[1])
    assert np.array_equal(update_positions(x, np.zeros_like(x), fixed), x)


def test_loss_examples():
    target = torch.randn(5, 3, dtype=DTYPE)
    assert loss_fn(target, target).item() == 0.0
    pred = target + torch.tensor([1.0, 1.0, 0.0], dtype=DTYPE)
    assert loss_fn(pred, target).item() == pytest.approx(2.0)
    other = torch.randn(5, 3, dtype=DTYPE)
    assert loss_fn(2 * other, 2 * target).item() == pytest.approx(4 * loss_fn(other, target).item())
    assert loss_fn(other, target).item() == pytest.approx(loss_fn(target, other).item())


def test_loss_mask():
    target = torch.zeros(3, 3, dtype=DTYPE)
    pred = torch.tensor([[9.0, 9.0, 9.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
    mask = torch.tensor([False, True, True])
    assert loss_fn(pred, target, mask).item() == pytest.approx(0.5 + 0.5)
    assert loss_fn(pred, target, torch.zeros(3, dtype=torch.bool)).item() == 0.0


def test_targets_layout():
    cur = np.array([[0.0, 0.0], [1.0, 1.0]])
    nxt = np.array([[0.5, -0.5], [1.0, 2.0]])
    out = make_targets(cur, nxt, np.array([3.0, 4.0]))
    assert out.tolist() == [[0.5, -0.5, 3.0], [0.0, 1.0, 4.0]]


def test_zero_decoder_predicts_target_mean():
    model, inputs, _ = fitted_model(small_config())
    with torch.no_grad():
        last = model.decoder.linears[-1]
        last.weight.zero_()
        last.bias.zero_()
    velocity, stress = model.predict(inputs)
    mean = model.target_norm.mean().numpy()
    assert np.allclose(velocity, mean[:2]) and np.allclose(stress, mean[2])


def test_output_shape_and_contacts_present():
    model, inputs, top = fitted_model(small_config())
    assert inputs.contact_edges.shape[0] > 0
    assert model(inputs).shape == (top.num_nodes, 3)


def test_permutation_equivariance_without_pooling():
    from hcmt.mesh import MeshTopology, SystemState

    config = small_config(l_h=2, lam=0)
    model, _, _ = fitted_model(config)
    top, state, _, _ = small_instance(0)
    perm = np.random.default_rng(3).permutation(top.num_nodes)
    inv = np.argsort(perm)
    ptop = MeshTopology(
        inv[top.cells], top.object_id[perm], top.mesh_coords[perm], top.kinds[perm], top.rho[perm], top.youngs[perm]
    )
    pstate = SystemState(state.world_coords[perm], state.prev_world_coords[perm], state.stress[perm])
    a = model(prepare_inputs(top, state, build_hierarchy(top, 0), config.radius))
    b = model(prepare_inputs(ptop, pstate, build_hierarchy(ptop, 0), config.radius))
    assert torch.allclose(b, a[perm], atol=1e-10)


def test_permutation_preserving_pool_is_equivariant():
    # swapping the two objects' blocks keeps every BFS seed the lowest index of its object
    config = small_config()
    model, _, _ = fitted_model(config)
    top, state, _, _ = small_instance(1)
    from hcmt.mesh import MeshTopology, SystemState

    plate = np.flatnonzero(top.object_id == 0)
    block = np.flatnonzero(top.object_id == 1)
    perm = np.r_[block, plate]
    inv = np.argsort(perm)
    ptop = MeshTopology(
        inv[top.cells], top.object_id[perm], top.mesh_coords[perm], top.kinds[perm], top.rho[perm], top.youngs[perm]
    )
    pstate = SystemState(state.world_coords[perm], state.prev_world_coords[perm], state.stress[perm])
    out = model(prepare_inputs(top, state, build_hierarchy(top, 1), config.radius))
    pout = model(prepare_inputs(ptop, pstate, build_hierarchy(ptop, 1), config.radius))
    assert torch.allclose(pout, out[perm], atol=1e-10)


def copy_into(dst, src):
    dst.load_state_dict(src.state_dict())
    return dst


def test_variant_algebra():
    top, state, _, _ = small_instance(2)
    h = build_hierarchy(top, 1)

    def run(model):
        model.freeze_normalizers()
        return model(prepare_inputs(top, state, h, model.config.radius, model.num_levels))

    torch.manual_seed(0)
    only_cmt = HCMT(small_config(variant="only_cmt"))
    full_no_hmt = copy_into(HCMT(small_config(l_c=4, l_h=0)), only_cmt)
    assert torch.equal(run(only_cmt), run(full_no_hmt))

    only_hmt = HCMT(small_config(variant="only_hmt"))
    full_no_cmt = copy_into(HCMT(small_config(l_c=0, l_h=4)), only_hmt)
    assert torch.equal(run(only_hmt), run(full_no_cmt))

    full = HCMT(small_config())
    late = copy_into(HCMT(small_config(variant="late_contact")), full)
    assert not torch.allclose(run(full), run(late))


def test_single_branch_and_separate_parameters():
    shared = HCMT(small_config())
    separate = HCMT(small_config(branch_params="separate"))
    single = HCMT(small_config(single_branch=True))
    count = lambda m: sum(p.numel() for p in m.parameters())
    assert count(separate) == count(shared) + 5 * 8 * 8
    assert count(single) == count(shared) - 8 * 8
    assert count(HCMT(small_config())) == count(shared)


def test_missing_levels_rejected():
    model, _, _ = fitted_model(small_config())
    top, state, _, _ = small_instance(0)
    inputs = prepare_inputs(top, state, build_hierarchy(top, 0), 0.6)
    with pytest.raises(ConfigError):
        model(inputs)
    with pytest.raises(ConfigError):
        prepare_inputs(top, state, build_hierarchy(top, 0), 0.6, num_levels=1)


def test_non_finite_input_names_stage():
    model, inputs, _ = fitted_model(small_config())
    inputs.node_features[0, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="node encoder"):
        model(inputs)


def test_checkpoint_round_trip(tmp_path):
    model, inputs, _ = fitted_model(small_config(variant="late_contact"))
    save_model(tmp_path / "m.ckpt", model, {"step": 7})
    back, meta = load_model(tmp_path / "m.ckpt")
    assert meta["step"] == 7 and back.config == model.config
    assert torch.equal(back(inputs), model(inputs))
    assert back.target_norm.is_frozen


def test_checkpoint_config_mismatch(tmp_path):
    from hcmt.nn import load_checkpoint, save_checkpoint

    model, _, _ = fitted_model(small_config())
    save_model(tmp_path / "m.ckpt", model)
    config, tensors = load_checkpoint(tmp_path / "m.ckpt")
    config["model"]["hidden"] = 16
    save_checkpoint(tmp_path / "bad.ckpt", config, tensors)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "bad.ckpt")
    save_checkpoint(tmp_path / "none.ckpt", {}, tensors)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "none.ckpt")


def test_warmup_steps():
    assert warmup_steps(20000) == 1000
    assert warmup_steps(2000) == 100
    assert warmup_steps(10) == 1


def test_training_is_deterministic(small_dataset, tmp_path):
    config = small_config(hidden=8, l_h=3, train_steps=12, radius=0.4)
    a = train(config, small_dataset, tmp_path / "a.ckpt")
    b = train(config, small_dataset, tmp_path / "b.ckpt")
    assert a.losses == b.losses and len(a.losses) == 12
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    c = train(small_config(hidden=8, l_h=3, train_steps=12, radius=0.4, seed=1), small_dataset)
    assert c.losses != a.losses


def test_training_reduces_loss(small_dataset):
    config = small_config(hidden=16, l_h=3, train_steps=300, lr_start=3e-3, lr_end=1e-4, radius=0.4)
    result = train(config, small_dataset)
    assert np.mean(result.losses[-50:]) < np.mean(result.losses[20:70])
    initial = result.initial_model()
    for name, p in initial.named_parameters():
        assert torch.equal(p, result.initial_parameters[name])
    assert torch.equal(initial.target_norm.mean(), result.model.target_norm.mean())
