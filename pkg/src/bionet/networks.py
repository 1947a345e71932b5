"""U-Net segmenters, the thickness regressor, cascade wiring, freezing and checkpoints."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    out_channels: int = 12
    base_width: int = 64
    depth: int = 4
    bio_head_width: int = 64
    # "softmax" for the multi-class head, "sigmoid" for a binary map.
    head: str | None = None

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.base_width < 1 or self.depth < 1:
            raise ValueError("base_width and depth must be positive")
        if self.head not in (None, "softmax", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def output_head(self) -> str:
        if self.head is not None:
            return self.head
        return "sigmoid" if self.out_channels == 1 else "softmax"


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def conv_block(in_c: int, out_c: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_c, out_c, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_c, out_c, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2**i for i in range(config.depth + 1)]
        self.down = nn.ModuleList()
        c = config.in_channels
        for w in widths[:-1]:
            self.down.append(conv_block(c, w))
            c = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = conv_block(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(w * 2, w, 2, stride=2))
            self.dec.append(conv_block(w * 2, w))
        self.final = nn.Conv2d(widths[0], config.out_channels, 1)
        _init_weights(self)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2**self.config.depth
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.final(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.logits(x)
        if self.config.output_head == "softmax":
            return torch.softmax(z, dim=1)
        return torch.sigmoid(z)


class BioNet(nn.Module):
    """Thickness regressor: strided conv trunk, global pooling, two-layer head.

    The head predicts the covered fraction of the image height; the output is
    ``softplus(z) * H`` so thickness is non-negative and scales with input size.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        layers = []
        c = config.in_channels
        for i in range(4):
            w = config.base_width * 2**i
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            c = w
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Linear(c, config.bio_head_width),
            nn.ReLU(inplace=True),
            nn.Linear(config.bio_head_width, 1),
        )
        _init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        h = x.shape[-2]
        feats = self.trunk(x).mean(dim=(-2, -1))
        return F.softplus(self.head(feats)).squeeze(-1) * h


def build_unet(config: NetworkConfig) -> UNet:
    return UNet(config)


def build_bio_net(config: NetworkConfig) -> BioNet:
    if config.in_channels != 1:
        raise ValueError("the biomarker network takes a single-channel choroid map")
    return BioNet(config)


@dataclass
class CascadeOutput:
    global_probs: torch.Tensor | None
    choroid_prob: torch.Tensor


def cascade_forward(image: torch.Tensor, u_g: nn.Module, u_c: nn.Module) -> CascadeOutput:
    if image.dim() == 3:
        image = image.unsqueeze(1)
    g = u_g(image)
    c_in = torch.cat([image, g], dim=1)
    expected = u_c.config.in_channels if hasattr(u_c, "config") else c_in.shape[1]
    if c_in.shape[1] != expected:
        raise ValueError(f"local module expects {expected} channels, cascade provides {c_in.shape[1]}")
    return CascadeOutput(global_probs=g, choroid_prob=u_c(c_in))


# --- freezing --------------------------------------------------------------


def parameter_digest(net: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    state = net.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def _frozen_train(self, mode: bool = True):
    # Frozen networks stay in inference mode so batch-norm statistics never move.
    return nn.Module.train(self, False)


def freeze(net: nn.Module) -> nn.Module:
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    net.train = _frozen_train.__get__(net)
    net._frozen_digest = parameter_digest(net)
    return net


def is_frozen(net: nn.Module) -> bool:
    return getattr(net, "_frozen_digest", None) is not None and not any(p.requires_grad for p in net.parameters())


def frozen_digest(net: nn.Module) -> str | None:
    return getattr(net, "_frozen_digest", None)


def trainable_parameters(*nets: nn.Module) -> list[nn.Parameter]:
    return [p for net in nets if net is not None for p in net.parameters() if p.requires_grad]


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(net: nn.Module, path, stage: str, kind: str, extra: dict | None = None) -> None:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": kind,
        "stage": stage,
        "config": asdict(net.config),
        "state_dict": net.state_dict(),
        "digest": parameter_digest(net),
        "frozen": is_frozen(net),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {payload.get('schema_version')!r}")
    config = NetworkConfig(**payload["config"])
    net = build_bio_net(config) if payload["kind"] == "bio" else build_unet(config)
    net.load_state_dict(payload["state_dict"])
    if parameter_digest(net) != payload["digest"]:
        raise ValueError(f"{path}: parameter digest mismatch after load")
    if payload["frozen"]:
        freeze(net)
    else:
        net.eval()
    return net, payload
