"""Graph fusion of image and clinical node scalars.

Each image feature and each clinical feature is its own graph node carrying
one scalar. The default topology links every image node to every clinical
node and nothing else; with self-loops added by the normalisation this mixes
modalities while each node keeps its own value in the aggregate. A complete
graph would make the normalised adjacency ``ones / n`` and every node would
receive the same aggregate after one layer.

Even the bipartite graph dilutes a node's own value by its degree at every
layer, so by default the classifier sees the raw node scalars alongside the
propagated features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig, encode_sequence, init_encoder_params, project_to_nodes, relu
from .errors import ValidationError

N_CLINICAL = 11
ADJACENCY_MODES = ("bipartite", "complete", "custom")


@dataclass(frozen=True)
class AdjacencySpec:
    mode: str = "bipartite"
    n_image_nodes: int = 11
    n_clinical_nodes: int = N_CLINICAL
    custom_matrix: tuple[tuple[int, ...], ...] | None = None

    @property
    def n_nodes(self) -> int:
        return self.n_image_nodes + self.n_clinical_nodes


def _check_custom(m: np.ndarray, n_nodes: int | None = None) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {m.shape}")
    if n_nodes is not None and m.shape[0] != n_nodes:
        raise ValidationError(f"adjacency is {m.shape[0]}x{m.shape[0]}, graph has {n_nodes} nodes")
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("adjacency entries must be 0 or 1")
    if not np.array_equal(m, m.T):
        raise ValidationError("adjacency must be symmetric")
    if np.any(np.diag(m) != 0):
        raise ValidationError("adjacency diagonal must be zero (self-loops are added during normalisation)")


def build_adjacency(spec: AdjacencySpec) -> np.ndarray:
    n_img, n = spec.n_image_nodes, spec.n_nodes
    if spec.mode == "bipartite":
        side = np.arange(n) < n_img
        return (side[:, None] != side[None, :]).astype(np.int64)
    if spec.mode == "complete":
        return np.ones((n, n), dtype=np.int64) - np.eye(n, dtype=np.int64)
    if spec.mode == "custom":
        if spec.custom_matrix is None:
            raise ValidationError("custom adjacency mode needs a matrix")
        m = np.asarray(spec.custom_matrix)
        _check_custom(m, n)
        return m.astype(np.int64)
    raise ValidationError(f"unknown adjacency mode {spec.mode!r}; expected one of {ADJACENCY_MODES}")


def normalize_adjacency(a) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = np.asarray(a, dtype=np.float64)
    a_tilde = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def read_adjacency_file(path) -> tuple[tuple[int, ...], ...]:
    """Rows of space-separated 0/1 digits."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(tuple(int(tok) for tok in line.split()))
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: expected space-separated 0/1 digits") from None
    m = np.asarray(rows) if rows and len({len(r) for r in rows}) == 1 else None
    if m is None:
        raise ValidationError(f"{path}: rows are empty or ragged")
    _check_custom(m)
    return tuple(rows)


def gcn_forward(h0, a_hat, weights, gates=None):
    """H^(l+1) = ReLU(Â H^(l) W^(l)); ``h0`` is [..., n, f]."""
    h = h0
    for l, w in enumerate(weights):
        if h.shape[-1] != w.shape[0]:
            raise ValueError(f"feature width {h.shape[-1]} does not chain into weight {tuple(w.shape)}")
        h = relu(a_hat @ h @ w, gates, f"gcn.relu{l}")
    return h


def classify(h, params, gates=None):
    """Row-major flatten of node rows -> hidden ReLU layer -> class logits."""
    flat = h.reshape(h.shape[:-2] + (-1,)) if h.ndim >= 2 else h
    hidden = relu(flat @ params["mlp.hidden.weight"] + params["mlp.hidden.bias"], gates, "mlp.relu")
    return hidden @ params["mlp.out.weight"] + params["mlp.out.bias"]


def log_softmax(logits):
    z = logits - logits.max(dim=-1, keepdim=True).values
    return z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))


def softmax(logits):
    return torch.exp(log_softmax(logits))


def cross_entropy(logits, labels):
    """-log p_label per sample (one-hot cross-entropy); ``logits`` [..., C]."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    logp = log_softmax(logits)
    return -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)


# -- full model ------------------------------------------------------------------

@dataclass(frozen=True)
class FusionConfig:
    gcn_widths: tuple[int, ...] = (8, 4)
    mlp_hidden: int = 32
    n_classes: int = 3
    adjacency: str = "bipartite"
    custom_adjacency: tuple[tuple[int, ...], ...] | None = None
    no_gcn: bool = False
    # the classifier reads H^(0) next to H^(L); without it two propagation steps shrink each
    # node's own value to 1/144 of the per-side sums and training stalls at the class prior
    node_skip: bool = True

    def validate(self) -> None:
        if self.adjacency not in ADJACENCY_MODES:
            raise ValidationError(f"adjacency must be one of {ADJACENCY_MODES}, got {self.adjacency!r}")
        if not self.gcn_widths or min(self.gcn_widths) < 1 or self.mlp_hidden < 1:
            raise ValidationError("gcn_widths and mlp_hidden must be positive")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.fusion.validate()
        if self.fusion.adjacency == "custom":
            build_adjacency(self.adjacency_spec())

    def adjacency_spec(self) -> AdjacencySpec:
        return AdjacencySpec(self.fusion.adjacency, self.encoder.n_image_nodes, N_CLINICAL,
                             self.fusion.custom_adjacency)

    @property
    def n_nodes(self) -> int:
        return self.encoder.n_image_nodes + N_CLINICAL


@lru_cache(maxsize=64)
def _a_hat_cached(spec: AdjacencySpec) -> np.ndarray:
    return normalize_adjacency(build_adjacency(spec))


def init_model(cfg: ModelConfig, seed: int, dtype=torch.float32):
    """Seeded initial (params, bn_state)."""
    cfg.validate()
    gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    params, state = init_encoder_params(cfg.encoder, gen, dtype)
    widths = (1,) + tuple(cfg.fusion.gcn_widths)
    # the bypass arm has no GCN weights at all, so nothing untrained sits in its checkpoint
    for l in range(0 if cfg.fusion.no_gcn else len(widths) - 1):
        bound = 1.0 / math.sqrt(widths[l])
        params[f"gcn.w{l}"] = ((torch.rand((widths[l], widths[l + 1]), generator=gen, dtype=torch.float64) * 2 - 1)
                               * bound).to(dtype)
    if cfg.fusion.no_gcn:
        flat = cfg.n_nodes
    else:
        flat = cfg.n_nodes * (widths[-1] + (1 if cfg.fusion.node_skip else 0))
    for name, fan_in, fan_out in (("hidden", flat, cfg.fusion.mlp_hidden),
                                  ("out", cfg.fusion.mlp_hidden, cfg.fusion.n_classes)):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"mlp.{name}.weight"] = ((torch.rand((fan_in, fan_out), generator=gen, dtype=torch.float64) * 2 - 1)
                                        * bound).to(dtype)
        params[f"mlp.{name}.bias"] = ((torch.rand((fan_out,), generator=gen, dtype=torch.float64) * 2 - 1)
                                      * bound).to(dtype)
    return params, state


def gcn_weights(params) -> list:
    out, l = [], 0
    while f"gcn.w{l}" in params:
        out.append(params[f"gcn.w{l}"])
        l += 1
    return out


def build_h0(image_nodes, clinical):
    """Stack image-node scalars then clinical scalars into H^(0) [..., n, 1]."""
    return torch.cat([image_nodes, clinical.to(image_nodes.dtype)], dim=-1).unsqueeze(-1)


def zscore(series):
    """Per-sample intensity standardisation over all frames and voxels."""
    dims = tuple(range(1, series.ndim))
    mean = series.mean(dim=dims, keepdim=True)
    sd = series.std(dim=dims, unbiased=False, keepdim=True)
    return (series - mean) / torch.where(sd > 1e-8, sd, torch.ones_like(sd))


@dataclass
class Batch:
    sax: torch.Tensor  # [B, T, H, W, D]
    ch4: torch.Tensor  # [B, T, H, W]
    clinical: torch.Tensor  # [B, 11]
    labels: torch.Tensor  # [B]

    def __len__(self):
        return self.labels.shape[0]

    def take(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(self.sax[idx], self.ch4[idx], self.clinical[idx], self.labels[idx])


def collate(samples, dtype=torch.float32) -> Batch:
    """Stack preprocessed samples, moving the time axis next to the batch axis."""
    sax = np.stack([np.moveaxis(s.sax, -1, 0) for s in samples])
    ch4 = np.stack([np.moveaxis(s.ch4, -1, 0) for s in samples])
    clin = np.stack([s.clinical_nodes for s in samples])
    return Batch(torch.from_numpy(np.ascontiguousarray(sax)).to(dtype),
                 torch.from_numpy(np.ascontiguousarray(ch4)).to(dtype),
                 torch.from_numpy(clin).to(dtype),
                 torch.tensor([int(s.label) for s in samples], dtype=torch.long))


def forward_full(params, state, batch: Batch, cfg: ModelConfig, train: bool, return_h0: bool = False,
                 gates=None):
    """Encoder -> node projection -> H^(0) -> GCN (unless bypassed) -> logits [B, C].

    With ``node_skip`` the classifier input is ``[H^(0) | H^(L)]`` per node.

    Returns ``(logits, new_bn_state)`` (plus H^(0) if requested).
    """
    enc = cfg.encoder
    sax_emb, s1 = encode_sequence(zscore(batch.sax), params, "sax", enc, train, state, gates)
    ch4_emb, s2 = encode_sequence(zscore(batch.ch4), params, "ch4", enc, train, state, gates)
    image_nodes = project_to_nodes(sax_emb, ch4_emb, params)
    h0 = build_h0(image_nodes, batch.clinical)
    if cfg.fusion.no_gcn:
        logits = classify(h0, params, gates)
    else:
        a_hat = torch.as_tensor(_a_hat_cached(cfg.adjacency_spec()), dtype=h0.dtype)
        h = gcn_forward(h0, a_hat, gcn_weights(params), gates)
        if cfg.fusion.node_skip:
            h = torch.cat([h0, h], dim=-1)
        logits = classify(h, params, gates)
    new_state = {**s1, **s2}
    return (logits, new_state, h0) if return_h0 else (logits, new_state)
