"""DC-Transformer encoder: per-frame conv/BN/ReLU/pool stages, temporal
multi-head self-attention over the frame tokens, and a linear projection of
both modality embeddings onto the image-side graph nodes.

Everything is functional over a flat ``dict[str, Tensor]`` of parameters and
a separate dict of BatchNorm running statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ValidationError

MODALITIES = ("sax", "ch4")
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, int] = (8, 16)
    kernel: int = 3
    downsample_factor: int = 2
    d_model: int = 32
    n_heads: int = 4
    use_positional_encoding: bool = True
    n_image_nodes: int = 11
    frames: int = 5
    sax_shape: tuple[int, int, int] = (144, 144, 12)
    ch4_shape: tuple[int, int] = (160, 160)

    def validate(self) -> None:
        if len(self.channels) != 2:
            raise ValidationError("encoder needs exactly two conv stages")
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_image_nodes < 1:
            raise ValidationError("n_image_nodes must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError("kernel must be a positive odd integer")
        if self.downsample_factor < 1 or self.frames < 1:
            raise ValidationError("downsample_factor and frames must be >= 1")

    def spatial_shape(self, modality: str) -> tuple[int, ...]:
        return tuple(self.sax_shape if modality == "sax" else self.ch4_shape)


class ActivationPattern:
    """Records, then replays, the ReLU masks and max-pool argmax choices of a
    forward pass.

    Replaying evaluates the loss on the smooth piece that was active when the
    pattern was recorded; finite differences on that piece stay valid even
    when the perturbation would flip a ReLU or a pooling winner.
    """

    def __init__(self):
        self.store = {}
        self.replay = False
        self.changed = 0

    def freeze(self) -> "ActivationPattern":
        self.replay = True
        return self

    def relu(self, key, x):
        if self.replay:
            mask = self.store[key]
            self.changed += int(((x > 0) != mask).sum())
            return x * mask
        self.store[key] = x.detach() > 0
        return torch.relu(x)

    def max_pool(self, key, x, pool, **kw):
        if self.replay:
            idx = self.store[key]
            _, live = pool(x.detach(), return_indices=True, **kw)
            self.changed += int((live != idx).sum())
            return x.flatten(2).gather(2, idx.flatten(2)).view(idx.shape)
        out, idx = pool(x, return_indices=True, **kw)
        self.store[key] = idx
        return out


def relu(x, gates=None, key=""):
    return torch.relu(x) if gates is None else gates.relu(key, x)


def _uniform(gen, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def init_encoder_params(cfg: EncoderConfig, gen: torch.Generator, dtype=torch.float32):
    """Fan-in uniform init for conv/linear maps, BN scale 1 / shift 0."""
    params, state = {}, {}
    k, d = cfg.kernel, cfg.d_model
    for mod in MODALITIES:
        nd = len(cfg.spatial_shape(mod))
        c_in = 1
        for i, c_out in enumerate(cfg.channels, start=1):
            fan = c_in * k ** nd
            params[f"{mod}.conv{i}.weight"] = _uniform(gen, (c_out, c_in) + (k,) * nd, fan, dtype)
            params[f"{mod}.conv{i}.bias"] = _uniform(gen, (c_out,), fan, dtype)
            params[f"{mod}.bn{i}.weight"] = torch.ones(c_out, dtype=dtype)
            params[f"{mod}.bn{i}.bias"] = torch.zeros(c_out, dtype=dtype)
            state[f"{mod}.bn{i}.running_mean"] = torch.zeros(c_out, dtype=dtype)
            state[f"{mod}.bn{i}.running_var"] = torch.ones(c_out, dtype=dtype)
            c_in = c_out
        params[f"{mod}.token.weight"] = _uniform(gen, (c_in, d), c_in, dtype)
        params[f"{mod}.token.bias"] = _uniform(gen, (d,), c_in, dtype)
        for proj in "qkvo":
            params[f"{mod}.attn.{proj}"] = _uniform(gen, (d, d), d, dtype)
    params["nodes.weight"] = _uniform(gen, (2 * d, cfg.n_image_nodes), 2 * d, dtype)
    params["nodes.bias"] = _uniform(gen, (cfg.n_image_nodes,), 2 * d, dtype)
    return params, state


def batch_norm(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel BN over batch and spatial axes of ``x`` [N, C, ...].

    Returns ``(y, new_running_mean, new_running_var)``; the running stats are
    only updated in train mode.
    """
    view = (1, -1) + (1,) * (x.ndim - 2)
    if train:
        dims = [0] + list(range(2, x.ndim))
        var, mean = torch.var_mean(x, dim=dims, correction=0)
        new_mean = BN_MOMENTUM * running_mean + (1 - BN_MOMENTUM) * mean.detach()
        new_var = BN_MOMENTUM * running_var + (1 - BN_MOMENTUM) * var.detach()
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    xhat = (x - mean.view(view)) / torch.sqrt(var.view(view) + BN_EPS)
    return xhat * gamma.view(view) + beta.view(view), new_mean, new_var


def spatial_encode(frames, params, modality: str, train: bool, state: dict, cfg: EncoderConfig, gates=None):
    """Encode ``frames`` [N, *spatial] into tokens [N, d_model].

    Two (conv, BN, ReLU, max-pool) stages, then global average pooling and a
    linear map. Returns ``(tokens, updated_running_stats)``.
    """
    nd = len(cfg.spatial_shape(modality))
    if frames.ndim != nd + 1:
        raise ValueError(f"{modality} frames must be [N, {nd} spatial dims], got {tuple(frames.shape)}")
    conv = F.conv3d if nd == 3 else F.conv2d
    pool = F.max_pool3d if nd == 3 else F.max_pool2d
    new_state = {}
    h = frames.unsqueeze(1)
    for i in range(1, len(cfg.channels) + 1):
        p = f"{modality}.conv{i}"
        b = f"{modality}.bn{i}"
        h = conv(h, params[f"{p}.weight"], params[f"{p}.bias"], padding=cfg.kernel // 2)
        h, rm, rv = batch_norm(h, params[f"{b}.weight"], params[f"{b}.bias"],
                               state[f"{b}.running_mean"], state[f"{b}.running_var"], train)
        new_state[f"{b}.running_mean"], new_state[f"{b}.running_var"] = rm, rv
        h = relu(h, gates, f"{modality}.relu{i}")
        s = cfg.downsample_factor
        if s > 1:
            # ceil so a depth-3 volume still survives two stages
            if gates is None:
                h = pool(h, kernel_size=s, stride=s, ceil_mode=True)
            else:
                h = gates.max_pool(f"{modality}.pool{i}", h, pool, kernel_size=s, stride=s, ceil_mode=True)
    pooled = h.mean(dim=tuple(range(2, h.ndim)))
    tokens = pooled @ params[f"{modality}.token.weight"] + params[f"{modality}.token.bias"]
    return tokens, new_state


def positional_encoding(T: int, d: int, dtype=torch.float32):
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(T, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


def temporal_attend(tokens, params, modality: str, cfg: EncoderConfig, return_weights: bool = False):
    """Multi-head self-attention over frame tokens [B, T, d] with a residual
    connection from the un-encoded input tokens."""
    B, T, d = tokens.shape
    h = cfg.n_heads
    dh = d // h
    x = tokens
    if cfg.use_positional_encoding:
        x = x + positional_encoding(T, d, tokens.dtype)
    p = f"{modality}.attn"

    def heads(m):
        return m.view(B, T, h, dh).transpose(1, 2)  # [B, h, T, dh]

    q, k, v = (heads(x @ params[f"{p}.{n}"]) for n in "qkv")
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    weights = torch.softmax(scores, dim=-1)
    mixed = (weights @ v).transpose(1, 2).reshape(B, T, d)
    out = tokens + mixed @ params[f"{p}.o"]
    return (out, weights) if return_weights else out


def encode_sequence(series, params, modality: str, cfg: EncoderConfig, train: bool, state: dict, gates=None):
    """[B, T, *spatial] -> embedding [B, d_model] (mean over attended frames)."""
    B, T = series.shape[:2]
    expected = cfg.spatial_shape(modality)
    if tuple(series.shape[2:]) != expected:
        raise ValueError(f"{modality} input spatial shape {tuple(series.shape[2:])} != configured {expected}")
    if T != cfg.frames:
        raise ValueError(f"{modality} input has {T} frames, config expects {cfg.frames}")
    tokens, new_state = spatial_encode(series.reshape((B * T,) + expected), params, modality, train, state, cfg,
                                       gates)
    attended = temporal_attend(tokens.view(B, T, -1), params, modality, cfg)
    return attended.mean(dim=1), new_state


def project_to_nodes(sax_emb, ch4_emb, params):
    """Concatenate (SAX first) and map linearly to the image-side node scalars."""
    joint = torch.cat([sax_emb, ch4_emb], dim=-1)
    return joint @ params["nodes.weight"] + params["nodes.bias"]
