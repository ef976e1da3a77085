"""Subject classifier C and generator G as torch modules.

The classifier exposes per-block feature taps h1/h2/h3 (h1 carries the
lower-level features used by the transfer losses). The generator is an
encoder-decoder with a residual self-attention module after every
convolutional block; all attention mixing coefficients start at zero, so a
freshly initialized generator equals its pure convolutional path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ClassifierConfig:
    in_channels: int = 8
    widths: tuple = (16, 32, 64)
    hidden: int = 64
    n_classes: int = 2
    conv_dropout: float = 0.25
    head_dropout: float = 0.5
    input_size: int = 64


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 8
    widths: tuple = (32, 64, 128)
    dropout: float = 0.1
    input_size: int = 64
    # keys/values of large attention maps are average-pooled down to at most
    # this grid edge, bounding the quadratic position cost
    attention_key_size: int = 8
    # global skip: output = x + conv path, so a fresh generator is near-identity
    residual: bool = True


@dataclass
class ForwardResult:
    logits: torch.Tensor  # (N, 2)
    probs: torch.Tensor   # (N, 2)
    features: dict        # layer index (1-based) -> block output tensor


class SelfAttention(nn.Module):
    """Single-head non-local attention with a learnable residual gain.

    out = x + gamma * Attn(x); gamma starts at 0, so the module is the
    identity at initialization. For large maps the keys/values are
    average-pooled to keep the position count manageable.
    """

    def __init__(self, channels: int, pool: int = 1):
        super().__init__()
        inner = max(1, channels // 8)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.pool = pool

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)  # (N, HW, inner)
        kx = vx = x
        if self.pool > 1:
            kx = vx = F.avg_pool2d(x, self.pool)
        k = self.key(kx).flatten(2)                    # (N, inner, HW')
        v = self.value(vx).flatten(2).transpose(1, 2)  # (N, HW', C)
        weights = torch.softmax(torch.bmm(q, k), dim=-1)
        out = torch.bmm(weights, v).transpose(1, 2).reshape(n, c, h, w)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.gamma * self.attention(x)


class SubjectClassifier(nn.Module):
    """Three conv blocks (conv-ELU-pool-dropout) + a two-layer head.

    Inputs are standardized with per-pixel statistics captured from the
    training data (``set_input_stats``); the buffers start as identity.
    """

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.config = config
        self.register_buffer("input_mean", torch.zeros(
            1, config.in_channels, config.input_size, config.input_size))
        self.register_buffer("input_std", torch.ones(
            1, config.in_channels, config.input_size, config.input_size))
        blocks = []
        prev = config.in_channels
        for width in config.widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, width, 3, stride=1, padding=1),
                nn.ELU(),
                nn.MaxPool2d(2),
                nn.Dropout(config.conv_dropout),
            ))
            prev = width
        self.blocks = nn.ModuleList(blocks)
        final_size = config.input_size // 2 ** len(config.widths)
        if final_size < 1:
            raise ValueError("input too small for three pooling stages")
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(prev * final_size * final_size, config.hidden),
            nn.ELU(),
            nn.Dropout(config.head_dropout),
            nn.Linear(config.hidden, config.n_classes),
        )

    def set_input_stats(self, values: torch.Tensor) -> None:
        """Record per-pixel mean/std of the training data for standardization."""
        with torch.no_grad():
            self.input_mean.copy_(values.mean(dim=0, keepdim=True))
            self.input_std.copy_(values.std(dim=0, keepdim=True).clamp_min(1e-6))

    def forward(self, x: torch.Tensor, return_features: bool = False):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        x = (x - self.input_mean) / self.input_std
        features = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            features[i] = x
        logits = self.head(x)
        if return_features:
            return logits, features
        return logits


def classifier_forward(model: SubjectClassifier, x, train_mode: bool = False) -> ForwardResult:
    """Forward pass returning logits, probabilities and all feature taps."""
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    model.train(train_mode)
    with torch.set_grad_enabled(train_mode):
        logits, features = model(x, return_features=True)
    return ForwardResult(logits=logits, probs=torch.softmax(logits, dim=1),
                         features=features)


class Generator(nn.Module):
    """Encoder-decoder with instance norm, ELU, dropout and self-attention."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        c_in = config.in_channels

        def attn(channels: int, size: int) -> SelfAttention:
            pool = max(1, size // config.attention_key_size)
            return SelfAttention(channels, pool=pool)

        size = config.input_size
        enc, enc_attn = [], []
        prev = c_in
        for width in config.widths:
            enc.append(nn.Sequential(
                nn.Conv2d(prev, width, 3, stride=2, padding=1),
                nn.InstanceNorm2d(width, affine=True),
                nn.ELU(),
                nn.Dropout(config.dropout),
            ))
            size //= 2
            enc_attn.append(attn(width, size))
            prev = width
        self.encoder = nn.ModuleList(enc)
        self.encoder_attn = nn.ModuleList(enc_attn)

        dec, dec_attn = [], []
        dec_widths = list(reversed(config.widths[:-1])) + [config.widths[0]]
        for width in dec_widths:
            dec.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(prev, width, 3, stride=1, padding=1),
                nn.InstanceNorm2d(width, affine=True),
                nn.ELU(),
                nn.Dropout(config.dropout),
            ))
            size *= 2
            dec_attn.append(attn(width, size))
            prev = width
        self.decoder = nn.ModuleList(dec)
        self.decoder_attn = nn.ModuleList(dec_attn)
        self.out_conv = nn.Conv2d(prev, c_in, 1)  # linear output, no squashing
        if config.residual:
            # start as the exact identity map
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        skip = x
        for block, attn in zip(self.encoder, self.encoder_attn):
            x = attn(block(x))
        for block, attn in zip(self.decoder, self.decoder_attn):
            x = attn(block(x))
        out = self.out_conv(x)
        return skip + out if self.config.residual else out


def generator_forward(model: Generator, x) -> torch.Tensor:
    """Eval-mode generator forward; output shape equals input shape."""
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    model.eval()
    with torch.no_grad():
        out = model(x)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Checkpoints: arch.json + weights.bin (named float32 blocks + index table)
# ---------------------------------------------------------------------------

_MODEL_KINDS = {"classifier": (SubjectClassifier, ClassifierConfig),
                "generator": (Generator, GeneratorConfig)}


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: nn.Module, path, seed: int | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    kind = "classifier" if isinstance(model, SubjectClassifier) else "generator"
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        blob = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(tensor.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    arch = {
        "kind": kind,
        "config": asdict(model.config),
        "seed": seed,
        "parameter_count": parameter_count(model),
        "index": index,
    }
    (path / "arch.json").write_text(json.dumps(arch, indent=1))
    (path / "weights.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> nn.Module:
    path = Path(path)
    arch = json.loads((path / "arch.json").read_text())
    cls, cfg_cls = _MODEL_KINDS[arch["kind"]]
    cfg = arch["config"]
    for key in ("widths",):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    model = cls(cfg_cls(**cfg))
    raw = (path / "weights.bin").read_bytes()
    state = {}
    for entry in arch["index"]:
        blob = raw[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state)
    model.eval()
    return model


def parameter_checksum(model: nn.Module) -> str:
    """Order-stable hash of all parameter bytes (frozen-weights assertions)."""
    import hashlib
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
