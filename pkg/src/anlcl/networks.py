"""Generators, patch discriminator, projection heads, and the momentum key encoder."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PatchRef, as_image
from .errors import DimensionError, ParameterError


@dataclass
class NetworkSpec:
    """Widths of every trainable component.

    ``ngf``/``ndf`` scale the generator and discriminator; the full-scale
    values are 64. ``feature_taps`` index the discriminator taps
    (0 = input, k = after stride-2 stage k).
    """

    channels: int = 3
    ngf: int = 64
    n_blocks: int = 9
    ndf: int = 64
    proj_dim: int = 256
    feature_taps: tuple[int, ...] = (0, 1, 2, 3)
    share_encoder: bool = True

    def __post_init__(self):
        self.feature_taps = tuple(self.feature_taps)
        if self.n_blocks < 1:
            raise ParameterError("generator needs at least one residual block")
        if self.channels not in (1, 3):
            raise ParameterError("channels must be 1 or 3")
        if not self.feature_taps or not set(self.feature_taps) <= {0, 1, 2, 3}:
            raise ParameterError("feature_taps must be a non-empty subset of {0, 1, 2, 3}")


@dataclass
class MomentumConfig:
    momentum: float = 0.99

    def __post_init__(self):
        if not 0 <= self.momentum <= 1:
            raise ParameterError(f"momentum must lie in [0, 1], got {self.momentum}")


def init_weights(net: nn.Module, gain: float = 0.02) -> nn.Module:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return net


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """c7s1-ngf, d(2ngf), d(4ngf), residual blocks, u(2ngf), u(ngf), c7s1-C.

    With ``residual_input`` the head predicts a correction to the input in
    logit space, so an untrained network starts near the identity; otherwise
    the output is a plain sigmoid map.
    """

    tap_strides = (1, 1, 2, 4, 4)

    def __init__(self, channels: int = 3, ngf: int = 64, n_blocks: int = 9, residual_input: bool = False):
        super().__init__()
        self.residual_input = residual_input
        self.stem = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(channels, ngf, 7),
                                  nn.InstanceNorm2d(ngf), nn.ReLU(True))
        self.down1 = nn.Sequential(nn.Conv2d(ngf, 2 * ngf, 3, 2, 1), nn.InstanceNorm2d(2 * ngf), nn.ReLU(True))
        self.down2 = nn.Sequential(nn.Conv2d(2 * ngf, 4 * ngf, 3, 2, 1), nn.InstanceNorm2d(4 * ngf), nn.ReLU(True))
        self.blocks = nn.Sequential(*[ResnetBlock(4 * ngf) for _ in range(n_blocks)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * ngf, 2 * ngf, 3, 2, 1, output_padding=1), nn.InstanceNorm2d(2 * ngf), nn.ReLU(True),
            nn.ConvTranspose2d(2 * ngf, ngf, 3, 2, 1, output_padding=1), nn.InstanceNorm2d(ngf), nn.ReLU(True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ngf, channels, 7))
        self.tap_channels = (channels, ngf, 2 * ngf, 4 * ngf, 4 * ngf)
        init_weights(self)

    def taps(self, x) -> list[torch.Tensor]:
        _check_div4(x)
        t1 = self.stem(x)
        t2 = self.down1(t1)
        t3 = self.down2(t2)
        return [x, t1, t2, t3, self.blocks(t3)]

    def decode(self, x, feats) -> torch.Tensor:
        y = self.head(self.up(feats))
        if self.residual_input:
            xc = x.clamp(1e-3, 1 - 1e-3)
            y = y + torch.log(xc) - torch.log1p(-xc)
        return torch.sigmoid(y)

    def forward(self, x, return_taps: bool = False):
        taps = self.taps(x)
        out = self.decode(x, taps[-1])
        return (out, taps) if return_taps else out


class PatchDiscriminator(nn.Module):
    """70x70 patch classifier: three stride-2 stages, then two stride-1 convolutions.

    Convolutions pad by reflection so constant regions give constant features.
    """

    tap_strides = (1, 2, 4, 8)

    def __init__(self, channels: int = 3, ndf: int = 64, feature_taps: Sequence[int] = (0, 1, 2, 3)):
        super().__init__()
        pad = dict(padding=1, padding_mode="reflect")
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(channels, ndf, 4, 2, **pad), nn.LeakyReLU(0.2, True)),
            nn.Sequential(nn.Conv2d(ndf, 2 * ndf, 4, 2, **pad), nn.InstanceNorm2d(2 * ndf), nn.LeakyReLU(0.2, True)),
            nn.Sequential(nn.Conv2d(2 * ndf, 4 * ndf, 4, 2, **pad), nn.InstanceNorm2d(4 * ndf), nn.LeakyReLU(0.2, True)),
        ])
        self.tail = nn.Sequential(
            nn.Conv2d(4 * ndf, 8 * ndf, 4, 1, **pad), nn.InstanceNorm2d(8 * ndf), nn.LeakyReLU(0.2, True),
            nn.Conv2d(8 * ndf, 1, 4, 1, **pad),
        )
        self.feature_taps = tuple(feature_taps)
        self.tap_channels = tuple((channels, ndf, 2 * ndf, 4 * ndf)[t] for t in self.feature_taps)
        self.tap_strides = tuple(PatchDiscriminator.tap_strides[t] for t in self.feature_taps)
        init_weights(self)

    def taps(self, x) -> list[torch.Tensor]:
        feats = [x]
        h = x
        for stage in self.stages[:max(self.feature_taps)]:
            h = stage(h)
            feats.append(h)
        return [feats[t] for t in self.feature_taps]

    def forward(self, x, tap_features: bool = False):
        if min(x.shape[-2:]) < 70:
            raise DimensionError(f"discriminator needs inputs of at least 70x70, got {tuple(x.shape[-2:])}")
        feats = [x]
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        logits = self.tail(h)
        if tap_features:
            return logits, [feats[t] for t in self.feature_taps]
        return logits


class GeneratorEncoder(nn.Module):
    """First half of a generator exposed as a tap encoder."""

    def __init__(self, gen: ResnetGenerator):
        super().__init__()
        self.gen = gen
        self.tap_channels = gen.tap_channels
        self.tap_strides = gen.tap_strides

    def taps(self, x):
        return self.gen.taps(x)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, dim: int = 256):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, dim), nn.ReLU(True), nn.Linear(dim, dim))
        nn.init.kaiming_normal_(self.net[0].weight, nonlinearity="relu")
        nn.init.zeros_(self.net[0].bias)
        nn.init.xavier_normal_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, x):
        return F.normalize(self.net(x), dim=1, eps=1e-12)


def _check_div4(x):
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise DimensionError(f"generator inputs need sides divisible by 4, got {tuple(x.shape[-2:])}")


def pool_taps(taps: Sequence[torch.Tensor], strides: Sequence[int], tops, lefts, size: int) -> torch.Tensor:
    """Average every tap over each patch footprint and concatenate.

    ``taps`` come from a single image (batch dimension 1). The footprint of a
    patch at tap stride ``s`` starts at ``top // s`` and spans ``ceil(size / s)``
    cells, shifted inward if it would overrun the map.
    """
    device = taps[0].device
    tops = torch.as_tensor(np.asarray(tops, dtype=np.int64), device=device)
    lefts = torch.as_tensor(np.asarray(lefts, dtype=np.int64), device=device)
    pooled = []
    for feat, s in zip(taps, strides):
        k = max(1, math.ceil(size / s))
        h, w = feat.shape[-2:]
        if k > min(h, w):
            raise DimensionError("patch footprint exceeds the feature map")
        avg = F.avg_pool2d(feat, k, stride=1)[0]              # (C, h-k+1, w-k+1)
        r = torch.clamp(tops // s, max=h - k)
        c = torch.clamp(lefts // s, max=w - k)
        pooled.append(avg[:, r, c].T)                          # (n, C)
    return torch.cat(pooled, dim=1)


class Embedder(nn.Module):
    """Tap encoder(s) plus projection head producing unit-norm patch embeddings.

    ``encoders`` maps a layer key ("B", "R", or "O") to the encoder applied
    to images of that layer; the same module may serve several keys.
    """

    def __init__(self, encoders: dict, proj: ProjectionHead):
        super().__init__()
        self.encoders = nn.ModuleDict(encoders)
        self.proj = proj

    def taps(self, layer: str, x: torch.Tensor):
        enc = self.encoders[layer]
        return enc.taps(x), enc.tap_strides

    def embed_taps(self, taps, strides, tops, lefts, size) -> torch.Tensor:
        return self.proj(pool_taps(taps, strides, tops, lefts, size))

    def forward(self, layer: str, x: torch.Tensor, tops, lefts, size: int) -> torch.Tensor:
        taps, strides = self.taps(layer, x)
        return self.embed_taps(taps, strides, tops, lefts, size)


def tap_dim(encoder) -> int:
    return int(sum(encoder.tap_channels))


def image_to_tensor(img) -> torch.Tensor:
    img = as_image(img)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()[None]


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().double().numpy()[0].transpose(1, 2, 0)


def embed_patches(encoder, proj, source, refs: Sequence[PatchRef]) -> torch.Tensor:
    """Embed patches of ``source`` (an image array or a 1xCxHxW tensor)."""
    x = source if isinstance(source, torch.Tensor) else image_to_tensor(source)
    x = x.to(next(proj.parameters()).dtype)
    h, w = x.shape[-2:]
    refs = list(refs)
    if not refs:
        raise ParameterError("no patches to embed")
    size = refs[0].size
    for r in refs:
        if r.size != size:
            raise DimensionError("all refs must share one patch size")
        if not (0 <= r.top <= h - size and 0 <= r.left <= w - size):
            raise DimensionError(f"{r} lies outside a {h}x{w} image")
    taps = encoder.taps(x)
    return proj(pool_taps(taps, encoder.tap_strides, [r.top for r in refs], [r.left for r in refs], size))


def generator_forward(net: ResnetGenerator, img) -> np.ndarray:
    """Inference on one ``(H, W, C)`` image; sides must be divisible by 4."""
    net.eval()
    with torch.no_grad():
        out = net(image_to_tensor(img).to(next(net.parameters()).dtype))
    return np.clip(tensor_to_image(out), 0.0, 1.0)


def discriminator_forward(net: PatchDiscriminator, img, tap_features: bool = False):
    net.eval()
    with torch.no_grad():
        return net(image_to_tensor(img).to(next(net.parameters()).dtype), tap_features=tap_features)


def momentum_update(online_params, key_params, cfg: MomentumConfig | float = 0.99):
    """``key <- m * key + (1 - m) * online``, elementwise.

    Torch tensors are updated in place; other array-likes come back as new
    float64 arrays. Returns the updated key parameters as a list.
    """
    m = cfg.momentum if isinstance(cfg, MomentumConfig) else float(cfg)
    if not 0 <= m <= 1:
        raise ParameterError(f"momentum must lie in [0, 1], got {m}")
    online_params, key_params = list(online_params), list(key_params)
    if len(online_params) != len(key_params):
        raise DimensionError("online and key parameter lists differ in length")
    out = []
    with torch.no_grad():
        for o, k in zip(online_params, key_params):
            if tuple(o.shape) != tuple(k.shape):
                raise DimensionError(f"parameter shapes differ: {tuple(o.shape)} vs {tuple(k.shape)}")
            if isinstance(k, torch.Tensor):
                k.mul_(m).add_(o.detach().to(k.dtype), alpha=1 - m)
                out.append(k)
            else:
                out.append(m * np.asarray(k, dtype=np.float64) + (1 - m) * np.asarray(o, dtype=np.float64))
    return out


@dataclass
class Networks:
    """All trainable modules of one model instance."""

    spec: NetworkSpec
    encoder_choice: str = "discriminator"
    g_b: ResnetGenerator = field(init=False)
    g_r: ResnetGenerator = field(init=False)
    disc: PatchDiscriminator = field(init=False)

    def __post_init__(self):
        s = self.spec
        self.g_b = ResnetGenerator(s.channels, s.ngf, s.n_blocks, residual_input=True)
        self.g_r = ResnetGenerator(s.channels, s.ngf, s.n_blocks, residual_input=False)
        self.disc = PatchDiscriminator(s.channels, s.ndf, s.feature_taps)
        if self.encoder_choice == "discriminator":
            enc = self.disc if s.share_encoder else copy.deepcopy(self.disc)
            encoders = {"B": enc, "R": enc}
        elif self.encoder_choice == "image_generator":
            enc = GeneratorEncoder(self.g_b)
            encoders = {"B": enc, "R": enc}
        elif self.encoder_choice == "image_rain_generator":
            encoders = {"B": GeneratorEncoder(self.g_b), "R": GeneratorEncoder(self.g_r)}
        else:
            raise ParameterError(f"unknown encoder choice {self.encoder_choice!r}")
        self.layer = Embedder(encoders, ProjectionHead(tap_dim(encoders["B"]), s.proj_dim))
        loc_enc = GeneratorEncoder(self.g_b)
        self.loc = Embedder({"O": loc_enc, "B": loc_enc}, ProjectionHead(tap_dim(loc_enc), s.proj_dim))
        self.key = copy.deepcopy(self.layer)
        for p in self.key.parameters():
            p.requires_grad_(False)

    def groups(self) -> dict[str, nn.Module]:
        """Parameter groups as stored in checkpoints."""
        groups = {"g_b": self.g_b, "g_r": self.g_r, "disc": self.disc,
                  "proj_layer": self.layer.proj, "proj_loc": self.loc.proj, "key_encoder": self.key}
        if self.encoder_choice == "discriminator" and not self.spec.share_encoder:
            groups["layer_encoder"] = self.layer.encoders["B"]
        return groups

    def layer_params(self) -> list[nn.Parameter]:
        """Online parameters mirrored by the key encoder, in key order."""
        return list(self.layer.parameters())

    def update_key(self, cfg: MomentumConfig) -> None:
        momentum_update(self.layer_params(), list(self.key.parameters()), cfg)
