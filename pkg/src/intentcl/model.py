"""TCN feature extractor and expanding classifier head.

The encoder follows the Conv-TasNet separation-block recipe: a global layer
norm and a 1x1 bottleneck on the input, then repeats of dilated depthwise-
separable residual blocks, then masked mean pooling over frames, a final
global layer norm, and a linear head that grows as new classes appear.

All parameters are float64; training at desk scale is cheap and the loss
and gradient contracts are checked at 64-bit tolerances.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

__all__ = [
    "TCNConfig",
    "IntentModel",
    "init_model",
    "encode",
    "classify",
    "expand_head",
    "snapshot",
    "save_checkpoint",
    "load_checkpoint",
]

GLN_EPS = 1e-8
CHECKPOINT_FORMAT = "intentcl-checkpoint-v1"


@dataclass(frozen=True)
class TCNConfig:
    input_channels: int = 40
    hidden_channels: int = 128
    bottleneck_channels: int = 64
    blocks_per_repeat: int = 5
    repeats: int = 2
    depthwise_kernel: int = 3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.depthwise_kernel % 2 == 0:
            raise ValueError("depthwise_kernel must be odd (symmetric padding)")


class GlobalLayerNorm(nn.Module):
    """Normalize over (channel, time) with a learned per-channel affine.

    When a frame mask is given, statistics cover only valid frames and the
    output is re-zeroed on padding so padded batches match solo forwards.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if mask is None:
            mean = x.mean(dim=(1, 2), keepdim=True)
            var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
            return (x - mean) / torch.sqrt(var + GLN_EPS) * self.gamma + self.beta
        count = mask.sum(dim=(1, 2), keepdim=True) * x.shape[1]
        mean = (x * mask).sum(dim=(1, 2), keepdim=True) / count
        var = (((x - mean) * mask) ** 2).sum(dim=(1, 2), keepdim=True) / count
        y = (x - mean) / torch.sqrt(var + GLN_EPS) * self.gamma + self.beta
        return y * mask


class ResidualBlock(nn.Module):
    """Dilated depthwise-separable conv with symmetric pipelines.

    Channel flow is bottleneck -> hidden -> bottleneck; each 1x1 conv is
    followed by a learned rectifier and a global layer norm. The branch
    output is added back onto the block input.
    """

    def __init__(self, channels: int, hidden: int, kernel: int, dilation: int):
        super().__init__()
        self.expand = nn.Conv1d(channels, hidden, kernel_size=1)
        self.act_in = nn.PReLU()
        self.norm_in = GlobalLayerNorm(hidden)
        self.depthwise = nn.Conv1d(
            hidden,
            hidden,
            kernel_size=kernel,
            dilation=dilation,
            padding=(kernel - 1) // 2 * dilation,
            groups=hidden,
        )
        self.project = nn.Conv1d(hidden, channels, kernel_size=1)
        self.act_out = nn.PReLU()
        self.norm_out = GlobalLayerNorm(channels)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        y = self.expand(x)
        if mask is not None:
            y = y * mask  # conv bias leaks into padding
        y = self.norm_in(self.act_in(y), mask)
        y = self.depthwise(y)
        if mask is not None:
            y = y * mask
        y = self.project(y)
        if mask is not None:
            y = y * mask
        y = self.norm_out(self.act_out(y), mask)
        return x + y


class TCNEncoder(nn.Module):
    """Maps [N, n_mels, T] features to [N, bottleneck] embeddings."""

    def __init__(self, cfg: TCNConfig):
        super().__init__()
        self.cfg = cfg
        self.input_norm = GlobalLayerNorm(cfg.input_channels)
        self.bottleneck = nn.Conv1d(cfg.input_channels, cfg.bottleneck_channels, kernel_size=1)
        self.blocks = nn.ModuleList(
            ResidualBlock(
                cfg.bottleneck_channels,
                cfg.hidden_channels,
                cfg.depthwise_kernel,
                dilation=2**k,
            )
            for _ in range(cfg.repeats)
            for k in range(cfg.blocks_per_repeat)
        )
        self.output_norm = GlobalLayerNorm(cfg.bottleneck_channels)

    def forward(
        self, feats: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> torch.Tensor:
        mask = None
        if lengths is not None:
            frames = torch.arange(feats.shape[2], device=feats.device)
            mask = (frames[None, :] < lengths[:, None]).unsqueeze(1).to(feats.dtype)
        x = self.input_norm(feats, mask)
        x = self.bottleneck(x)
        if mask is not None:
            x = x * mask
        for block in self.blocks:
            x = block(x, mask)
        if mask is None:
            pooled = x.mean(dim=2)
        else:
            pooled = (x * mask).sum(dim=2) / mask.sum(dim=2)
        return self.output_norm(pooled.unsqueeze(-1)).squeeze(-1)


class IntentModel(nn.Module):
    """TCN encoder plus a linear head over the classes seen so far."""

    def __init__(self, cfg: TCNConfig, n_classes: int):
        super().__init__()
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.cfg = cfg
        self.encoder = TCNEncoder(cfg)
        self.head = nn.Linear(cfg.bottleneck_channels, n_classes)

    @property
    def n_classes(self) -> int:
        return self.head.out_features

    def encode(self, feats: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.encoder(feats, lengths)

    def classify(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.head(embedding)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.encoder(feats, lengths))


def init_model(cfg: TCNConfig, n_initial_classes: int, seed: int) -> IntentModel:
    """Build a float64 model with seed-deterministic initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = IntentModel(cfg, n_initial_classes)
    return model.double()


def _as_feature_batch(features: np.ndarray | torch.Tensor) -> torch.Tensor:
    feats = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    if feats.ndim == 2:
        feats = feats.unsqueeze(0)
    if not torch.isfinite(feats).all():
        raise ValueError("features contain non-finite values")
    return feats


def encode(model: IntentModel, features: np.ndarray | torch.Tensor) -> np.ndarray:
    """Embed one [n_mels x n_frames] feature matrix to a 1-D vector."""
    with torch.no_grad():
        emb = model.encode(_as_feature_batch(features))
    return emb.squeeze(0).numpy()


def classify(model: IntentModel, embedding: np.ndarray | torch.Tensor) -> np.ndarray:
    """Logits over the currently known classes for one embedding."""
    emb = torch.as_tensor(np.asarray(embedding), dtype=torch.float64)
    with torch.no_grad():
        logits = model.classify(emb.unsqueeze(0) if emb.ndim == 1 else emb)
    return logits.squeeze(0).numpy()


def expand_head(model: IntentModel, new_classes: int, seed: int) -> IntentModel:
    """Grow the head by ``new_classes`` rows, keeping existing rows bitwise.

    New rows are initialized with the same scheme (and fan-in) as the
    original head, drawn from ``seed``.
    """
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    old = model.head
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        fresh = nn.Linear(old.in_features, new_classes).double()
    grown = nn.Linear(old.in_features, old.out_features + new_classes).double()
    with torch.no_grad():
        grown.weight[: old.out_features] = old.weight
        grown.weight[old.out_features :] = fresh.weight
        grown.bias[: old.out_features] = old.bias
        grown.bias[old.out_features :] = fresh.bias
    model.head = grown
    return model


def snapshot(model: IntentModel) -> IntentModel:
    """Deep frozen copy for use as a distillation teacher."""
    teacher = copy.deepcopy(model)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def pad_features(feature_list) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad [C x T_i] matrices into a [N, C, T_max] batch plus lengths.

    The returned lengths drive frame masking inside the encoder, so padded
    batches produce the same embeddings as per-sample forwards.
    """
    if not feature_list:
        raise ValueError("empty batch")
    mats = [np.asarray(f, dtype=np.float64) for f in feature_list]
    channels = mats[0].shape[0]
    t_max = max(m.shape[1] for m in mats)
    batch = np.zeros((len(mats), channels, t_max))
    lengths = np.zeros(len(mats), dtype=np.int64)
    for i, m in enumerate(mats):
        batch[i, :, : m.shape[1]] = m
        lengths[i] = m.shape[1]
    return torch.from_numpy(batch), torch.from_numpy(lengths)


def save_checkpoint(path, model: IntentModel, classes: list[int]) -> None:
    """Write config, class ids and parameters (f32) to one .npz file."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "classes": list(classes),
    }
    arrays = {
        "param/" + name: p.detach().numpy().astype("<f4")
        for name, p in model.named_parameters()
    }
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[IntentModel, list[int]]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format: {meta.get('format')}")
        cfg = TCNConfig(**meta["config"])
        classes = [int(c) for c in meta["classes"]]
        model = IntentModel(cfg, len(classes)).double()
        state = {
            name[len("param/") :]: torch.as_tensor(data[name], dtype=torch.float64)
            for name in data.files
            if name.startswith("param/")
        }
    model.load_state_dict(state)
    return model, classes
