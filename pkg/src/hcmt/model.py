"""End-to-end simulator: encoders, CMT and HMT layers, decoder and updater."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cmt import CmtBlock, cmt_layer
from .hierarchy import Hierarchy, build_hierarchy
from .hmt import HmtBlock, hmt_layer, make_schedule
from .mesh import (
    CONTACT_EDGE_FEATURE_DIM,
    MESH_EDGE_FEATURE_DIM,
    NODE_FEATURE_DIM,
    ConfigError,
    MeshTopology,
    SystemState,
    build_contact_edges,
    compute_edge_features,
    mesh_edge_features,
    node_features,
)
from .nn import DTYPE, Mlp, MlpSpec, Normalizer, load_checkpoint, save_checkpoint

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "ModelInputs",
    "HCMT",
    "prepare_inputs",
    "make_targets",
    "update_positions",
    "loss_fn",
    "save_model",
    "load_model",
]

VARIANTS = ("full", "late_contact", "only_cmt", "only_hmt")
OUTPUT_DIM = 3


@dataclass
class ModelConfig:
    hidden: int = 128
    heads: int = 4
    l_c: int = 2
    l_h: int = 13
    lam: int = 6
    clip_min: float = -2.0
    clip_max: float = 2.0
    noise_std: float = 0.003
    radius: float = 0.4
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    train_steps: int = 20000
    seed: int = 0
    variant: str = "full"
    single_branch: bool = False
    branch_params: str = "shared"
    log_every: int = 100
    checkpoint_every: int = 1000

    # file key -> attribute (``lambda`` is a Python keyword)
    _KEY_ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.branch_params not in ("shared", "separate"):
            raise ConfigError(f"branch_params must be shared or separate, got {self.branch_params!r}")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} must be a positive multiple of heads={self.heads}")
        if min(self.l_c, self.l_h, self.lam) < 0:
            raise ConfigError("l_c, l_h and lambda must be non-negative")
        if not self.clip_min < self.clip_max:
            raise ConfigError(f"clip range must satisfy clip_min < clip_max")
        if not self.radius > 0:
            raise ConfigError(f"contact radius must be positive, got {self.radius}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.train_steps < 0:
            raise ConfigError("train_steps must be non-negative")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ConfigError("learning rates must be positive")
        _, n_h = self.block_counts()
        if n_h:
            make_schedule(n_h, self.lam)

    def block_counts(self) -> tuple[int, int]:
        """Number of (CMT, HMT) blocks for the configured variant."""
        total = self.l_c + self.l_h
        if self.variant == "only_cmt":
            return total, 0
        if self.variant == "only_hmt":
            return 0, total
        return self.l_c, self.l_h

    @property
    def num_levels(self) -> int:
        """Pooled levels the hierarchy must provide."""
        return self.lam if self.block_counts()[1] else 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            attr = cls._KEY_ALIASES.get(key, key)
            if attr not in names:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[attr] = _coerce(names[attr], value)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
            values[key] = value
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def to_text(self) -> str:
        inverse = {v: k for k, v in self._KEY_ALIASES.items()}
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{inverse.get(key, key)} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(f: dataclasses.Field, value):
    kind = type(f.default)
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {f.name!r}: cannot parse {text!r} as {kind.__name__}") from None
    return text


@dataclass
class ModelInputs:
    """Tensors for one forward pass; level lists start at level 0."""

    node_features: torch.Tensor
    contact_edges: torch.Tensor
    contact_features: torch.Tensor
    level_edges: list[torch.Tensor]
    level_features: list[torch.Tensor]
    parent_maps: list[torch.Tensor]

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def mesh_edges(self) -> torch.Tensor:
        return self.level_edges[0]


def _t(a, dtype=DTYPE):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)


def prepare_inputs(
    topology: MeshTopology,
    state: SystemState,
    hierarchy: Hierarchy,
    radius: float,
    num_levels: int | None = None,
) -> ModelInputs:
    """Node features, contact edges and per-level mesh-edge features for ``state``."""
    if num_levels is None:
        num_levels = hierarchy.num_levels
    if num_levels > hierarchy.num_levels:
        raise ConfigError(f"need {num_levels} pooled levels, hierarchy has {hierarchy.num_levels}")
    levels = hierarchy.levels[: num_levels + 1]
    mesh_edges = levels[0].mesh_edges
    contact = build_contact_edges(topology, state, radius, mesh_edges)
    _, contact_feat = compute_edge_features(topology, state, np.zeros((0, 2), np.int64), contact)
    world = state.world_coords
    feats = [
        mesh_edge_features(topology.mesh_coords[lv.node_ids], world[lv.node_ids], lv.mesh_edges)
        for lv in levels
    ]
    return ModelInputs(
        node_features=_t(node_features(topology, state)),
        contact_edges=_t(contact, torch.long).reshape(-1, 2),
        contact_features=_t(contact_feat).reshape(-1, CONTACT_EDGE_FEATURE_DIM),
        level_edges=[_t(lv.mesh_edges, torch.long).reshape(-1, 2) for lv in levels],
        level_features=[_t(f).reshape(-1, MESH_EDGE_FEATURE_DIM) for f in feats],
        parent_maps=[_t(lv.parent_map, torch.long) for lv in levels],
    )


def make_targets(current: np.ndarray, next_positions: np.ndarray, next_stress: np.ndarray) -> torch.Tensor:
    """Raw per-node targets ``(x^{t+1} - x^t, sigma^{t+1})``."""
    return _t(np.concatenate([next_positions - current, next_stress[:, None]], axis=1))


def update_positions(world_coords: np.ndarray, velocity: np.ndarray, fixed_mask: np.ndarray) -> np.ndarray:
    """First-order update ``x + v``; fixed nodes keep their position."""
    out = np.asarray(world_coords, dtype=np.float64) + np.asarray(velocity, dtype=np.float64)
    out[fixed_mask] = world_coords[fixed_mask]
    return out


def loss_fn(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-node squared position error summed over axes plus squared stress error.

    Both terms are averaged over the masked nodes. Inputs are
    ``(N, 3)`` rows of ``(v_x, v_y, sigma)`` in normalized target space.
    """
    if mask is not None:
        pred, target = pred[mask], target[mask]
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    diff2 = (pred - target) ** 2
    return diff2[:, :2].sum(1).mean() + diff2[:, 2].mean()


class HCMT(nn.Module):
    """Encoder, contact layer, hierarchical layer, decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.hidden
        clip_range = (config.clip_min, config.clip_max)
        self.node_norm = Normalizer(NODE_FEATURE_DIM, "node")
        self.mesh_norm = Normalizer(MESH_EDGE_FEATURE_DIM, "mesh_edge")
        self.contact_norm = Normalizer(CONTACT_EDGE_FEATURE_DIM, "contact_edge")
        self.target_norm = Normalizer(OUTPUT_DIM, "target")
        self.node_encoder = Mlp(MlpSpec(NODE_FEATURE_DIM, d, d, 2, output_layernorm=True))
        self.mesh_encoder = Mlp(MlpSpec(MESH_EDGE_FEATURE_DIM, d, d, 2, output_layernorm=True))
        self.contact_encoder = Mlp(MlpSpec(CONTACT_EDGE_FEATURE_DIM, d, d, 2, output_layernorm=True))
        n_c, n_h = config.block_counts()
        self.cmt_blocks = nn.ModuleList(
            CmtBlock(d, config.heads, config.single_branch, config.branch_params, clip_range)
            for _ in range(n_c)
        )
        self.hmt_blocks = nn.ModuleList(HmtBlock(d, config.heads, clip_range) for _ in range(n_h))
        self.schedule = make_schedule(n_h, config.lam) if n_h else []
        self.decoder = Mlp(MlpSpec(d, OUTPUT_DIM, d, 2))

    @property
    def num_levels(self) -> int:
        return self.config.num_levels

    def build_hierarchy(self, topology: MeshTopology) -> Hierarchy:
        return build_hierarchy(topology, self.num_levels)

    def accumulate_stats(self, inputs: ModelInputs, target: torch.Tensor | None = None) -> None:
        self.node_norm.accumulate(inputs.node_features)
        for f in inputs.level_features:
            self.mesh_norm.accumulate(f)
        self.contact_norm.accumulate(inputs.contact_features)
        if target is not None:
            self.target_norm.accumulate(target)

    def freeze_normalizers(self) -> None:
        for norm in (self.node_norm, self.mesh_norm, self.contact_norm, self.target_norm):
            norm.freeze()

    @staticmethod
    def _check(x: torch.Tensor, stage: str) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite values after {stage}")
        return x

    def forward(self, inputs: ModelInputs) -> torch.Tensor:
        """Normalized ``(N, 3)`` predictions of ``(v_x, v_y, sigma)``."""
        check = self._check
        z = check(self.node_encoder(self.node_norm.normalize(inputs.node_features)), "node encoder")
        mesh_hidden = [
            check(self.mesh_encoder(self.mesh_norm.normalize(f)), f"mesh encoder (level {v})")
            for v, f in enumerate(inputs.level_features)
        ]
        contact_hidden = check(
            self.contact_encoder(self.contact_norm.normalize(inputs.contact_features)), "contact encoder"
        )

        def run_cmt(z):
            return check(
                cmt_layer(z, inputs.level_edges[0], mesh_hidden[0], inputs.contact_edges, contact_hidden, self.cmt_blocks),
                "CMT layer",
            )

        def run_hmt(z):
            if not len(self.hmt_blocks):
                return z
            if len(inputs.level_edges) <= max(self.schedule):
                raise ConfigError(
                    f"inputs carry {len(inputs.level_edges) - 1} pooled levels, schedule needs {max(self.schedule)}"
                )
            return check(
                hmt_layer(z, inputs.level_edges, mesh_hidden, inputs.parent_maps, self.hmt_blocks, self.schedule),
                "HMT layer",
            )

        if self.config.variant == "late_contact":
            z = run_cmt(run_hmt(z))
        else:
            z = run_hmt(run_cmt(z))
        return check(self.decoder(z), "decoder")

    def predict(self, inputs: ModelInputs) -> tuple[np.ndarray, np.ndarray]:
        """Unnormalized per-node velocity ``(N, 2)`` and next stress ``(N,)``."""
        with torch.no_grad():
            out = self.target_norm.unnormalize(self(inputs)).numpy()
        return out[:, :2], out[:, 2]


def save_model(path: str | Path, model: HCMT, extra: dict | None = None) -> None:
    config = {"model": model.config.to_dict()}
    if extra:
        config.update(extra)
    save_checkpoint(path, config, dict(model.state_dict()))


def load_model(path: str | Path) -> tuple[HCMT, dict]:
    from .nn import CheckpointError

    meta, tensors = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no model configuration")
    model = HCMT(ModelConfig.from_dict(meta["model"]))
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the configuration: {exc}") from exc
    return model, meta
