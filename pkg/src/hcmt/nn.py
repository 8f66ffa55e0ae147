"""Numeric building blocks: MLPs, layer norm, clamping, normalizers, Adam schedule, checkpoints.

Everything runs in float64 on CPU; gradients come from torch autograd.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "DTYPE",
    "MlpSpec",
    "Mlp",
    "LayerNorm",
    "layer_norm",
    "clip",
    "relu",
    "PATTERN",
    "Normalizer",
    "learning_rate",
    "ExponentialDecayAdam",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

log = logging.getLogger(__name__)

DTYPE = torch.float64
LN_EPS = 1e-8
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    hidden_dim: int = 128
    num_hidden_layers: int = 2
    output_layernorm: bool = False

    def __post_init__(self):
        if min(self.in_dim, self.out_dim, self.hidden_dim) < 1 or self.num_hidden_layers < 0:
            raise ValueError(f"invalid MLP dimensions: {self}")


def layer_norm(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """``(x - mean) / sqrt(var + 1e-8) * scale + shift`` over the last axis."""
    return F.layer_norm(x, (x.shape[-1],), scale, shift, eps=LN_EPS)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.shift = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        return layer_norm(x, self.scale, self.shift)


class ActivationPattern:
    """Records or replays which side of each ReLU/clip kink every entry is on.

    Used by the finite-difference check: a perturbation that crosses a kink
    is re-evaluated on the branch active at the unperturbed point.
    """

    def __init__(self):
        self.mode: str | None = None
        self.masks: list[torch.Tensor] = []
        self.pos = 0
        self.flipped = False

    def start(self, mode: str) -> None:
        self.mode, self.pos, self.flipped = mode, 0, False
        if mode == "record":
            self.masks = []

    def stop(self) -> None:
        self.mode = None

    def step(self, current: torch.Tensor) -> torch.Tensor:
        if self.mode == "record":
            self.masks.append(current)
            return current
        stored = self.masks[self.pos]
        self.pos += 1
        if self.mode == "compare":
            if not torch.equal(stored, current):
                self.flipped = True
            return current
        return stored


PATTERN = ActivationPattern()


def relu(x: torch.Tensor) -> torch.Tensor:
    if PATTERN.mode is None:
        return torch.relu(x)
    return x * PATTERN.step(x > 0)


def clip(x: torch.Tensor, lo: float = -2.0, hi: float = 2.0) -> torch.Tensor:
    if not lo < hi:
        raise ValueError(f"clip range must satisfy lo < hi, got [{lo}, {hi}]")
    if PATTERN.mode is None:
        return torch.clamp(x, lo, hi)
    side = PATTERN.step((x > hi).to(torch.int8) - (x < lo).to(torch.int8))
    return torch.where(side < 0, torch.full_like(x, lo), torch.where(side > 0, torch.full_like(x, hi), x))


class Mlp(nn.Module):
    """Affine/ReLU stack with an optional layer-normalized output."""

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        dims = [spec.in_dim] + [spec.hidden_dim] * spec.num_hidden_layers + [spec.out_dim]
        self.linears = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:])
        )
        self.norm = LayerNorm(spec.out_dim) if spec.output_layernorm else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(f"MLP expects input dim {self.spec.in_dim}, got {x.shape[-1]}")
        for k, lin in enumerate(self.linears):
            x = lin(x)
            if k < len(self.linears) - 1:
                x = relu(x)
        if self.norm is not None:
            x = self.norm(x)
        return x


class Normalizer(nn.Module):
    """Running z-score statistics; frozen after a warm-up window."""

    def __init__(self, dim: int, name: str = ""):
        super().__init__()
        self.name = name
        self.register_buffer("count", torch.zeros((), dtype=DTYPE))
        self.register_buffer("total", torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("total_sq", torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("frozen", torch.zeros((), dtype=DTYPE))
        self._warned = False

    @property
    def is_frozen(self) -> bool:
        return bool(self.frozen.item())

    def freeze(self) -> None:
        self.frozen.fill_(1.0)

    @torch.no_grad()
    def accumulate(self, x: torch.Tensor) -> None:
        if self.is_frozen or x.shape[0] == 0:
            return
        x = x.reshape(-1, self.total.shape[0]).to(DTYPE)
        self.count += x.shape[0]
        self.total += x.sum(0)
        self.total_sq += (x * x).sum(0)

    def mean(self) -> torch.Tensor:
        if self.count.item() == 0:
            return torch.zeros_like(self.total)
        return self.total / self.count

    def std(self) -> torch.Tensor:
        if self.count.item() == 0:
            return torch.ones_like(self.total)
        var = self.total_sq / self.count - self.mean() ** 2
        return torch.sqrt(torch.clamp(var, min=0.0)).clamp(min=STD_FLOOR)

    def _check(self):
        if self.count.item() == 0 and not self._warned:
            log.warning("normalizer %r has no observations; using the identity", self.name)
            self._warned = True

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        self._check()
        return (x - self.mean()) / self.std()

    def unnormalize(self, y: torch.Tensor) -> torch.Tensor:
        self._check()
        return y * self.std() + self.mean()


def learning_rate(step: int, lr_start: float, lr_end: float, total_steps: int) -> float:
    """Exponential decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if total_steps <= 0:
        return lr_start
    frac = min(max(step, 0), total_steps) / total_steps
    return lr_start * (lr_end / lr_start) ** frac


class ExponentialDecayAdam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) with the exponential learning-rate schedule."""

    def __init__(self, named_params, lr_start=1e-4, lr_end=1e-6, total_steps=1):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.total_steps = total_steps
        self.step_count = 0
        self.opt = torch.optim.Adam(
            [p for _, p in self.named], lr=lr_start, betas=(0.9, 0.999), eps=1e-8
        )

    @property
    def lr(self) -> float:
        return learning_rate(self.step_count, self.lr_start, self.lr_end, self.total_steps)

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def step(self):
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                bad = int((~torch.isfinite(p.grad)).sum())
                raise FloatingPointError(
                    f"non-finite gradient in {name} ({bad} entries) at step {self.step_count}"
                )
        for group in self.opt.param_groups:
            group["lr"] = self.lr
        self.opt.step()
        self.step_count += 1

    def state_dict(self):
        return {"step_count": self.step_count, "adam": self.opt.state_dict()}

    def load_state_dict(self, state):
        self.step_count = state["step_count"]
        self.opt.load_state_dict(state["adam"])


CKPT_MAGIC = b"HCMTCKPT"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write named float64 blocks after a JSON echo of ``config`` (little-endian)."""
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float64).numpy()
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    try:
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        return _parse_checkpoint(raw)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc


def _parse_checkpoint(raw: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    off = 8
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = math.prod(shape) * 8
        arr = np.frombuffer(raw, dtype="<f8", count=math.prod(shape), offset=off).reshape(shape)
        off += size
        tensors[name] = torch.from_numpy(arr.copy())
    if off != len(raw):
        raise ValueError("trailing bytes after parameter blocks")
    return config, tensors
