import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hcmt.nn import (
    DTYPE,
    CheckpointError,
    ExponentialDecayAdam,
    Mlp,
    MlpSpec,
    Normalizer,
    clip,
    layer_norm,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
)


def t(values):
    return torch.tensor(values, dtype=DTYPE)


def test_zero_mlp_outputs_zero():
    mlp = Mlp(MlpSpec(4, 3, hidden_dim=5))
    for p in mlp.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(mlp(torch.randn(7, 4, dtype=DTYPE)), torch.zeros(7, 3, dtype=DTYPE))


def test_identity_single_layer():
    mlp = Mlp(MlpSpec(3, 3, num_hidden_layers=0))
    with torch.no_grad():
        mlp.linears[0].weight.copy_(torch.eye(3, dtype=DTYPE))
        mlp.linears[0].bias.zero_()
    x = torch.randn(5, 3, dtype=DTYPE)
    assert torch.equal(mlp(x), x)


def test_mlp_shape_errors():
    with pytest.raises(ValueError):
        Mlp(MlpSpec(3, 2))(torch.zeros(4, 5, dtype=DTYPE))
    with pytest.raises(ValueError):
        MlpSpec(0, 2)


def test_mlp_layout_and_output_norm():
    mlp = Mlp(MlpSpec(7, 16, hidden_dim=16, output_layernorm=True))
    assert [lin.weight.shape for lin in mlp.linears] == [(16, 7), (16, 16), (16, 16)]
    y = mlp(torch.randn(9, 7, dtype=DTYPE))
    assert torch.allclose(y.mean(-1), torch.zeros(9, dtype=DTYPE), atol=1e-12)


def test_mlp_gradient_matches_finite_differences():
    torch.manual_seed(0)
    mlp = Mlp(MlpSpec(4, 3, hidden_dim=6, output_layernorm=True))
    x = torch.randn(5, 4, dtype=DTYPE)
    w = torch.randn(5, 3, dtype=DTYPE)

    def loss():
        return (mlp(x) * w).sum()

    loss().backward()
    h = 1e-5
    worst = 0.0
    for p in mlp.parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        fd = torch.empty_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            down = loss().item()
            flat[i] = orig
            fd[i] = (up - down) / (2 * h)
        worst = max(worst, ((fd - grad).norm() / max(fd.norm(), grad.norm(), 1e-12)).item())
    assert worst < 1e-6


def test_layer_norm_examples():
    one, zero = torch.ones(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE)
    assert torch.allclose(layer_norm(t([3.0, 3.0]), one, zero), zero)
    assert torch.allclose(layer_norm(t([1.0, -1.0]), one, zero), t([1.0, -1.0]), atol=1e-7)
    assert torch.equal(layer_norm(t([4.0, -9.0]), zero, t([0.5, 0.5])), t([0.5, 0.5]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_layer_norm_matches_formula(values):
    x = t(values)
    dim = x.shape[0]
    scale, shift = torch.linspace(0.5, 2.0, dim, dtype=DTYPE), torch.linspace(-1, 1, dim, dtype=DTYPE)
    mean = x.mean()
    var = ((x - mean) ** 2).mean()
    expected = (x - mean) / torch.sqrt(var + 1e-8) * scale + shift
    assert torch.allclose(layer_norm(x, scale, shift), expected, atol=1e-9, rtol=1e-9)


def test_clip_examples_and_gradient():
    x = t([5.0, -3.0, 0.5]).requires_grad_()
    y = clip(x)
    assert y.tolist() == [2.0, -2.0, 0.5]
    y.sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        clip(x, 1.0, 1.0)


def test_learning_rate_schedule():
    assert learning_rate(0, 1e-4, 1e-6, 1000) == pytest.approx(1e-4)
    assert learning_rate(1000, 1e-4, 1e-6, 1000) == pytest.approx(1e-6)
    assert learning_rate(500, 1e-4, 1e-6, 1000) == pytest.approx(1e-5)
    assert learning_rate(5000, 1e-4, 1e-6, 1000) == pytest.approx(1e-6)


def test_adam_matches_reference_update():
    torch.manual_seed(1)
    p = torch.nn.Parameter(torch.randn(4, dtype=DTYPE))
    opt = ExponentialDecayAdam([("p", p)], 1e-2, 1e-4, total_steps=10)
    ref = p.detach().clone()
    m = torch.zeros_like(ref)
    v = torch.zeros_like(ref)
    for k in range(1, 6):
        g = torch.randn(4, dtype=DTYPE)
        lr = 1e-2 * (1e-2) ** ((k - 1) / 10)
        p.grad = g.clone()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - lr * (m / (1 - 0.9**k)) / (torch.sqrt(v / (1 - 0.999**k)) + 1e-8)
        assert torch.allclose(p.detach(), ref, atol=1e-14, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = torch.nn.Parameter(torch.zeros(3, dtype=DTYPE))
    opt = ExponentialDecayAdam([("weight", p)])
    p.grad = t([0.0, float("nan"), 1.0])
    with pytest.raises(FloatingPointError, match="weight"):
        opt.step()
    assert torch.equal(p.detach(), torch.zeros(3, dtype=DTYPE))


def test_normalizer_examples():
    norm = Normalizer(1)
    norm.accumulate(t([[0.0], [2.0]]))
    assert norm.normalize(t([[2.0]])).item() == pytest.approx(1.0)
    const = Normalizer(2)
    const.accumulate(t([[3.0, 1.0]] * 5))
    assert torch.equal(const.normalize(t([[3.0, 1.0]])), torch.zeros(1, 2, dtype=DTYPE))
    assert torch.all(const.std() >= 1e-8)


def test_normalizer_freeze_and_identity():
    norm = Normalizer(2, "probe")
    x = t([[1.0, -4.0]])
    assert torch.equal(norm.normalize(x), x)
    norm.accumulate(t([[0.0, 0.0], [1.0, 2.0]]))
    norm.freeze()
    before = norm.mean().clone()
    norm.accumulate(t([[100.0, 100.0]]))
    assert torch.equal(norm.mean(), before)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 1e4))
def test_normalizer_inverse(seed, scale):
    rng = np.random.default_rng(seed)
    norm = Normalizer(3)
    norm.accumulate(torch.from_numpy(rng.normal(size=(20, 3)) * scale + 5))
    x = torch.from_numpy(rng.normal(size=(6, 3)) * scale)
    assert torch.allclose(norm.unnormalize(norm.normalize(x)), x, atol=1e-10 * max(scale, 1.0), rtol=0)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": torch.randn(3, 2, dtype=DTYPE), "b": torch.tensor(2.5, dtype=DTYPE), "empty": torch.zeros(0, 4, dtype=DTYPE)}
    save_checkpoint(tmp_path / "m.ckpt", {"hidden": 8}, tensors)
    config, back = load_checkpoint(tmp_path / "m.ckpt")
    assert config == {"hidden": 8}
    assert set(back) == set(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"HCMTCKPT" and raw[8:12] == (1).to_bytes(4, "little")


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    save_checkpoint(tmp_path / "m.ckpt", {}, {"w": torch.ones(10, dtype=DTYPE)})
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    for cut in (10, 30, len(raw) - 3):
        (tmp_path / "cut.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long.ckpt")
