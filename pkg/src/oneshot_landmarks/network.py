"""Adapter-augmented encoder-decoder producing a five-level embedding pyramid.

A frozen backbone yields ``F_v^1..F_v^5`` (finest first, spatial size halving
per level). The decoder walks from the deepest level up::

    F_c^5 = F_v^5
    F_c^i = C-A_k(concat(up2(F_c^{i+1}), F_v^i))        i = 4..1
    F_rfb^i = R-A_k(F_c^i)                               i = 3, 4, 5
    F_e^i = conv1x1(F_c^i) for i = 1, 2, conv1x1(F_rfb^i) for i = 3, 4, 5

``C-A_k`` and ``R-A_k`` concatenate a shared branch (first) with the branch of
landmark ``k`` (second). Only one landmark's branch runs per forward pass.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError

NUM_LEVELS = 5


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------

class TinyBackbone(nn.Module):
    """Seed-fixed random 5-stage CNN; level 1 keeps full resolution."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 64, 64), seed: int = 0):
        super().__init__()
        if len(channels) != NUM_LEVELS:
            raise ConfigError(f"backbone needs {NUM_LEVELS} channel widths, got {len(channels)}")
        self.out_channels = tuple(int(c) for c in channels)
        self.seed = seed
        stages, prev = [], 1
        for i, c in enumerate(self.out_channels):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(
                nn.Conv2d(prev, c, 3, stride=stride, padding=1), nn.ReLU(),
                nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            ))
            prev = c
        self.stages = nn.ModuleList(stages)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        freeze(self)

    def spec(self) -> dict:
        return {"type": "tiny", "channels": list(self.out_channels), "seed": self.seed}

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x - 0.5) / 0.25
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


VGG19_CFG = [[64, 64], [128, 128], [256, 256, 256, 256], [512, 512, 512, 512], [512, 512, 512, 512]]


class VGG19Backbone(nn.Module):
    """VGG19 conv trunk tapped after the last ReLU of each block.

    Block 1 runs at input resolution and each later block follows a 2x2 max
    pool. Weights come from a tensor-blob directory (see ``load_tensor_dir``)
    with names ``features.<i>.weight`` / ``features.<i>.bias`` as in the
    torchvision layout.
    """

    MEAN, STD = (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)

    def __init__(self, weights_dir: str | Path | None = None):
        super().__init__()
        layers, prev = [], 3
        self.taps = []
        for bi, block in enumerate(VGG19_CFG):
            if bi > 0:
                layers.append(nn.MaxPool2d(2))
            for c in block:
                layers += [nn.Conv2d(prev, c, 3, padding=1), nn.ReLU()]
                prev = c
            self.taps.append(len(layers) - 1)
        self.features = nn.Sequential(*layers)
        self.out_channels = tuple(b[-1] for b in VGG19_CFG)
        self.weights_dir = None if weights_dir is None else str(weights_dir)
        if weights_dir is not None:
            tensors = load_tensor_dir(weights_dir)
            state = {k: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("features.")}
            self.load_state_dict(state, strict=True)
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1), persistent=False)
        freeze(self)

    def spec(self) -> dict:
        return {"type": "vgg19", "weights_dir": self.weights_dir}

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x.expand(-1, 3, -1, -1) - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                out.append(x)
        return out


def freeze(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def build_backbone(spec: dict) -> nn.Module:
    kind = spec.get("type", "tiny")
    if kind == "tiny":
        return TinyBackbone(spec.get("channels", (16, 32, 64, 64, 64)), spec.get("seed", 0))
    if kind == "vgg19":
        return VGG19Backbone(spec.get("weights_dir"))
    raise ConfigError(f"unknown backbone type {kind!r}")


# ---------------------------------------------------------------------------
# Tensor blob directories (little-endian float32 + JSON manifest)
# ---------------------------------------------------------------------------

def save_tensor_dir(tensors: dict[str, np.ndarray], directory, write_manifest: bool = True) -> list[dict]:
    """Write ``tensors/<name>.bin`` files and return their manifest entries.

    With ``write_manifest`` the entries also go to ``tensors.json``.
    """
    import hashlib

    tdir = Path(directory) / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        (tdir / f"{name}.bin").write_bytes(blob)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "sha256": hashlib.sha256(blob).hexdigest()})
    if write_manifest:
        (Path(directory) / "tensors.json").write_text(json.dumps({"tensors": entries}, indent=1) + "\n")
    return entries


def load_tensor_dir(directory, entries: list[dict] | None = None) -> dict[str, np.ndarray]:
    import hashlib

    from .errors import CheckpointError

    directory = Path(directory)
    if entries is None:
        manifest = directory / "tensors.json"
        if not manifest.is_file():
            raise CheckpointError(f"missing tensor manifest {manifest}")
        entries = json.loads(manifest.read_text())["tensors"]
    out = {}
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        if e.get("dtype", "float32") != "float32":
            raise CheckpointError(f"tensor {name}: unsupported dtype {e['dtype']}")
        path = directory / "tensors" / f"{name}.bin"
        if not path.is_file():
            raise CheckpointError(f"tensor {name}: missing blob {path}")
        blob = path.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(blob) != expected:
            raise CheckpointError(f"tensor {name}: blob has {len(blob)} bytes, manifest shape {list(shape)} needs {expected}")
        if "sha256" in e and hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CheckpointError(f"tensor {name}: checksum mismatch")
        out[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# Adapter blocks
# ---------------------------------------------------------------------------

def conv3x3(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU())


class RFB(nn.Module):
    """Receptive field block: parallel 1x1 -> dilated 3x3 branches, fused by 1x1 plus a 1x1 shortcut."""

    def __init__(self, cin: int, cout: int, dilations: Sequence[int] = (1, 3, 5)):
        super().__init__()
        mid = max(1, cout // len(dilations))
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cin, mid, 1), nn.ReLU(),
                nn.Conv2d(mid, mid, 3, padding=d, dilation=d), nn.ReLU(),
            )
            for d in dilations
        )
        self.project = nn.Conv2d(mid * len(dilations), cout, 1)
        self.shortcut = nn.Conv2d(cin, cout, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = torch.cat([b(x) for b in self.branches], dim=1)
        return F.relu(self.project(y) + self.shortcut(x))


class _AdapterBlock(nn.Module):
    def __init__(self, shared: nn.Module, adapters: list[nn.Module], shared_out: int, adapter_out: int):
        super().__init__()
        self.shared = shared
        self.adapters = nn.ModuleList(adapters)
        self.shared_out = shared_out
        self.adapter_out = adapter_out

    @property
    def out_channels(self) -> int:
        return self.shared_out + self.adapter_out

    def forward(self, x: torch.Tensor, slot: int) -> torch.Tensor:
        """``slot`` is the 0-based adapter index."""
        y = self.shared(x)
        if self.adapter_out == 0:
            return y
        if not 0 <= slot < len(self.adapters):
            raise IndexError(f"adapter slot {slot} out of range for {len(self.adapters)} adapters")
        return torch.cat([y, self.adapters[slot](x)], dim=1)


class AdapterConvBlock(_AdapterBlock):
    """Shared 3x3 conv (``shared_out`` channels) concatenated with one of K narrow adapter convs."""

    def __init__(self, in_channels: int, shared_out: int, adapter_out: int, num_adapters: int):
        _check_positive(in_channels=in_channels, shared_out=shared_out, num_adapters=num_adapters)
        if adapter_out < 0:
            raise ConfigError("adapter_out must be >= 0")
        adapters = [conv3x3(in_channels, adapter_out) for _ in range(num_adapters)] if adapter_out else []
        super().__init__(conv3x3(in_channels, shared_out), adapters, shared_out, adapter_out)
        self.in_channels = in_channels


class RFBAdapterBlock(_AdapterBlock):
    """Shared RFB concatenated with one of K narrow adapter RFBs."""

    def __init__(self, in_channels: int, shared_out: int, adapter_out: int, num_adapters: int,
                 dilations: Sequence[int] = (1, 3, 5)):
        _check_positive(in_channels=in_channels, shared_out=shared_out, num_adapters=num_adapters)
        if adapter_out < 0:
            raise ConfigError("adapter_out must be >= 0")
        adapters = [RFB(in_channels, adapter_out, dilations) for _ in range(num_adapters)] if adapter_out else []
        super().__init__(RFB(in_channels, shared_out, dilations), adapters, shared_out, adapter_out)
        self.in_channels = in_channels
        self.dilations = tuple(dilations)


def _check_positive(**values) -> None:
    for name, v in values.items():
        if int(v) < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")


def adapter_conv_forward(block: AdapterConvBlock, x: torch.Tensor, k: int, landmark_ids=None) -> torch.Tensor:
    slot = _slot(k, landmark_ids, len(block.adapters) or None)
    return block(x, slot)


def rfb_adapter_forward(block: RFBAdapterBlock, x: torch.Tensor, k: int, landmark_ids=None) -> torch.Tensor:
    slot = _slot(k, landmark_ids, len(block.adapters) or None)
    return block(x, slot)


def _slot(k: int, landmark_ids, count) -> int:
    if landmark_ids is not None:
        try:
            return list(landmark_ids).index(k)
        except ValueError:
            raise IndexError(f"landmark id {k} has no adapter (known: {list(landmark_ids)})") from None
    if count is not None and not 1 <= k <= count:
        raise IndexError(f"landmark id {k} outside 1..{count}")
    return k - 1


# ---------------------------------------------------------------------------
# Bank
# ---------------------------------------------------------------------------

class AdapterBank(nn.Module):
    """Frozen backbone, adapter decoder, adapter RFBs, and shared 1x1 embedding heads.

    ``landmark_ids`` names the landmark served by each adapter slot; an SLA
    model holds a single slot for its landmark, the joint model holds all K.
    """

    def __init__(self, backbone: nn.Module, landmark_ids: Sequence[int], adapter_channels: int = 16,
                 decoder_channels: Sequence[int] = (64, 128, 256, 256), rfb_channels: int = 256,
                 rfb_adapter_channels: int | None = None, embed_dim: int = 128,
                 dilations: Sequence[int] = (1, 3, 5)):
        super().__init__()
        self.landmark_ids = tuple(int(k) for k in landmark_ids)
        if not self.landmark_ids or len(set(self.landmark_ids)) != len(self.landmark_ids):
            raise ConfigError(f"landmark ids must be unique and non-empty, got {self.landmark_ids}")
        if len(decoder_channels) != NUM_LEVELS - 1:
            raise ConfigError(f"need {NUM_LEVELS - 1} decoder widths, got {len(decoder_channels)}")
        cv = tuple(getattr(backbone, "out_channels", ()))
        if len(cv) != NUM_LEVELS:
            raise ConfigError("backbone must declare out_channels for 5 levels")
        ca = int(adapter_channels)
        ca_rfb = ca if rfb_adapter_channels is None else int(rfb_adapter_channels)
        _check_positive(rfb_channels=rfb_channels, embed_dim=embed_dim)
        K = len(self.landmark_ids)
        self.arch = {
            "backbone": backbone.spec() if hasattr(backbone, "spec") else {"type": "custom"},
            "landmark_ids": list(self.landmark_ids), "adapter_channels": ca,
            "decoder_channels": [int(c) for c in decoder_channels], "rfb_channels": int(rfb_channels),
            "rfb_adapter_channels": ca_rfb, "embed_dim": int(embed_dim), "dilations": [int(d) for d in dilations],
        }
        self.backbone = backbone
        freeze(self.backbone)

        cc = [0] * (NUM_LEVELS + 1)  # 1-based channel plan of F_c
        cc[5] = cv[4]
        blocks = {}
        for i in range(4, 0, -1):
            blocks[i] = AdapterConvBlock(cc[i + 1] + cv[i - 1], int(decoder_channels[i - 1]), ca, K)
            cc[i] = blocks[i].out_channels
        self.decoder = nn.ModuleList(blocks[i] for i in range(1, 5))
        self.rfb = nn.ModuleList(RFBAdapterBlock(cc[i], int(rfb_channels), ca_rfb, K, dilations) for i in (3, 4, 5))
        head_in = [cc[1], cc[2]] + [b.out_channels for b in self.rfb]
        self.heads = nn.ModuleList(nn.Conv2d(c, int(embed_dim), 1) for c in head_in)
        self.embed_dim = int(embed_dim)
        self.adapter_channels = ca
        # channels_last is markedly faster for these narrow convs on CPU
        self.to(memory_format=torch.channels_last)

    @property
    def K(self) -> int:
        return len(self.landmark_ids)

    def slot(self, k: int) -> int:
        return _slot(k, self.landmark_ids, None)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    # -- parameter groups -------------------------------------------------

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.parameters())

    def adapter_parameters(self, k: int) -> list[nn.Parameter]:
        s = self.slot(k)
        out = []
        for block in list(self.decoder) + list(self.rfb):
            if block.adapter_out:
                out += list(block.adapters[s].parameters())
        return out

    def shared_parameters(self) -> list[nn.Parameter]:
        adapter_ids = {id(p) for k in self.landmark_ids for p in self.adapter_parameters(k)}
        backbone_ids = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in adapter_ids and id(p) not in backbone_ids]

    # -- forward ------------------------------------------------------------

    def backbone_forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return backbone_forward(self.backbone, x)

    def decode(self, fv: Sequence[torch.Tensor], k: int) -> list[torch.Tensor]:
        return decoder_forward(self, fv, k)

    def embed(self, x: torch.Tensor, k: int) -> list[torch.Tensor]:
        """Images ``[B, 1, S, S]`` -> five embedding maps ``[B, E, S/2^(i-1), S/2^(i-1)]``."""
        x = x.contiguous(memory_format=torch.channels_last)
        return decoder_forward(self, self.backbone_forward(x), k)

    forward = embed


def backbone_forward(backbone: nn.Module, x: torch.Tensor) -> list[torch.Tensor]:
    S = x.shape[-1]
    if x.shape[-2] != S or S % 16:
        raise ContractError(f"input must be square with side divisible by 16, got {tuple(x.shape[-2:])}")
    with torch.no_grad():
        fv = backbone(x)
    if len(fv) != NUM_LEVELS:
        raise ContractError(f"backbone returned {len(fv)} levels, expected {NUM_LEVELS}")
    for i, f in enumerate(fv):
        if f.shape[-1] != S >> i:
            raise ContractError(f"backbone level {i + 1} has size {f.shape[-1]}, expected {S >> i}")
    return fv


def decoder_forward(bank: AdapterBank, fv: Sequence[torch.Tensor], k: int) -> list[torch.Tensor]:
    s = bank.slot(k)
    fc = [None] * (NUM_LEVELS + 1)
    fc[5] = fv[4]
    for i in range(4, 0, -1):
        up = F.interpolate(fc[i + 1], scale_factor=2, mode="bilinear", align_corners=False)
        fc[i] = bank.decoder[i - 1](torch.cat([up, fv[i - 1]], dim=1), s)
    feats = [fc[1], fc[2]] + [bank.rfb[j](fc[i], s) for j, i in enumerate((3, 4, 5))]
    return [head(f) for head, f in zip(bank.heads, feats)]


def trainable_parameters(bank: AdapterBank, mode: str, k: int | None = None) -> list[nn.Parameter]:
    """Parameters an optimizer step may touch.

    ``sla``: every non-backbone parameter. ``adapter``: shared parameters plus
    the adapter of landmark ``k`` only.
    """
    if mode == "sla":
        return bank.shared_parameters() + [p for j in bank.landmark_ids for p in bank.adapter_parameters(j)]
    if mode == "adapter":
        if k is None:
            raise ContractError("adapter mode needs an active landmark id")
        return bank.shared_parameters() + bank.adapter_parameters(k)
    raise ContractError(f"unknown mode {mode!r}")


def build_bank(arch: dict, backbone: nn.Module | None = None) -> AdapterBank:
    """Rebuild a bank from its ``arch`` dict (as stored in checkpoints)."""
    bb = backbone if backbone is not None else build_backbone(arch["backbone"])
    return AdapterBank(bb, arch["landmark_ids"], arch["adapter_channels"], arch["decoder_channels"],
                       arch["rfb_channels"], arch["rfb_adapter_channels"], arch["embed_dim"], arch["dilations"])
