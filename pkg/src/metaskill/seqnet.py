"""Dilated residual sequence encoder with channel attention.

Two attention-infused residual blocks (filters 5 and 3, dilations 1 and 2,
stride 1) around a 1x1 channel adapter, followed by a masked temporal
average and a dense embedding layer. A linear head on top of the embedding
is swappable per task. All padded timesteps are re-zeroed after every
convolution so a zero-padded batch embeds exactly like the unpadded
sequences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import GraphNode, Parameter

# channel width of the 1x1 adapter and of the embedding, by input width
K_MID_TABLE = {2: 16, 4: 16, 8: 16, 16: 64, 32: 64, 64: 256}
D_OUT_TABLE = {2: 512, 4: 512, 8: 512, 16: 512, 32: 512, 64: 1024}

SUPPORTED_WIDTHS = tuple(sorted(K_MID_TABLE))


@dataclass(frozen=True)
class BackboneConfig:
    d_in: int
    k_mid: int
    d_out: int
    filters: tuple[int, int] = (5, 3)
    dilations: tuple[int, int] = (1, 2)
    stride: int = 1
    se_reduction: int = 4

    def bottleneck(self, channels: int) -> int:
        return max(2, channels // self.se_reduction)


@dataclass
class Head:
    """Per-episode linear classifier: logits = e @ weights.T + bias."""

    weights: np.ndarray  # (C, d_out)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"head weights {self.weights.shape} and bias {self.bias.shape} disagree")


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_backbone(d_in: int, seed: int,
                   se_reduction: int = 4) -> tuple[BackboneConfig, dict[str, Parameter]]:
    """Create config and He-uniform-initialized parameters for one width.

    Initialization is a fixed sequence of draws from a seeded generator, so
    the same seed reproduces the parameters bit for bit.
    """
    if d_in not in K_MID_TABLE:
        raise ValueError(f"unsupported input width {d_in}; expected one of {SUPPORTED_WIDTHS}")
    cfg = BackboneConfig(d_in=d_in, k_mid=K_MID_TABLE[d_in], d_out=D_OUT_TABLE[d_in],
                         se_reduction=se_reduction)
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}

    def conv(name, cout, cin, k):
        params[name] = Parameter(name, _he_uniform(rng, (cout, cin, k), cin * k))

    def linear(prefix, dout, din, fan=None):
        params[f"{prefix}.weight"] = Parameter(
            f"{prefix}.weight", _he_uniform(rng, (dout, din), fan if fan is not None else din))
        params[f"{prefix}.bias"] = Parameter(f"{prefix}.bias", np.zeros(dout))

    def block(prefix, width, k):
        conv(f"{prefix}.conv1.kernel", width, width, k)
        conv(f"{prefix}.conv2.kernel", width, width, k)
        mid = cfg.bottleneck(width)
        linear(f"{prefix}.se.reduce", mid, width)
        linear(f"{prefix}.se.expand", width, mid)

    block("block1", d_in, cfg.filters[0])
    conv("adapter.kernel", cfg.k_mid, d_in, 1)
    block("block2", cfg.k_mid, cfg.filters[1])
    # He bound over the embedding's own width: the prototype head's logits
    # are quadratic in the embedding, so its norm must stay O(1) for the
    # inner-loop SGD at lr 0.1 to remain in the stable region
    linear("embed", cfg.d_out, cfg.k_mid, fan=cfg.d_out)
    return cfg, params


def _promote(x) -> tuple[GraphNode, bool]:
    node = dc.as_node(x)
    if node.value.ndim == 2:
        return dc.unsqueeze(node, 0), False
    return node, True


def _demote(node: GraphNode, batched: bool) -> GraphNode:
    if batched:
        return node

    def bk(g):
        node.grad += g[None]

    out = GraphNode(node.value[0], (node,), "squeeze", bk)
    return out


def se_attention(features, mask, reduce_w, reduce_b, expand_w, expand_b) -> GraphNode:
    """Squeeze-and-excitation gate over channels.

    Squeeze is the masked temporal mean; the excitation passes through a
    bottleneck (dense-relu-dense-sigmoid) and rescales every timestep.
    """
    x, batched = _promote(features)
    m = np.atleast_2d(np.asarray(mask, dtype=bool))
    squeeze = dc.gap_time(x, m)
    gate = dc.sigmoid(dc.dense(dc.relu(dc.dense(squeeze, reduce_w, reduce_b)),
                               expand_w, expand_b))
    out = dc.mul(x, dc.unsqueeze(gate, 1))
    return _demote(out, batched)


def residual_block(x, mask, block_params, filt: int, dilation: int) -> GraphNode:
    """conv-relu-conv-SE branch added to an identity shortcut, then relu.

    ``block_params`` maps the relative names conv1.kernel, conv2.kernel,
    se.reduce.weight/bias and se.expand.weight/bias. Padded timesteps are
    zeroed after each convolution so they never bleed into real ones.
    """
    x, batched = _promote(x)
    m = np.atleast_2d(np.asarray(mask, dtype=bool))
    h = dc.mask_time(dc.conv1d(x, block_params["conv1.kernel"], dilation), m)
    h = dc.relu(h)
    h = dc.mask_time(dc.conv1d(h, block_params["conv2.kernel"], dilation), m)
    h = se_attention(h, m, block_params["se.reduce.weight"], block_params["se.reduce.bias"],
                     block_params["se.expand.weight"], block_params["se.expand.bias"])
    out = dc.relu(dc.add(x, h))
    return _demote(out, batched)


def _subtree(leaves, prefix: str):
    cut = len(prefix) + 1
    return {name[cut:]: node for name, node in leaves.items() if name.startswith(prefix + ".")}


def _coerce_leaves(params) -> dict[str, GraphNode]:
    return {name: dc.as_node(p) for name, p in params.items()}


def forward_features(config: BackboneConfig, params, batch, masks) -> GraphNode:
    """Pre-pooling features: block1 -> 1x1 adapter -> block2, (B, T, k_mid)."""
    leaves = _coerce_leaves(params)
    x, batched = _promote(batch)
    m = np.atleast_2d(np.asarray(masks, dtype=bool))
    if x.value.shape[2] != config.d_in:
        raise ValueError(f"input width {x.value.shape[2]} does not match config d_in={config.d_in}")
    h = residual_block(x, m, _subtree(leaves, "block1"), config.filters[0], config.dilations[0])
    h = dc.mask_time(dc.conv1d(h, leaves["adapter.kernel"], 1), m)
    h = residual_block(h, m, _subtree(leaves, "block2"), config.filters[1], config.dilations[1])
    return _demote(h, batched)


def forward_embed(config: BackboneConfig, params, batch, masks) -> GraphNode:
    """Embed a padded batch: features -> masked temporal mean -> dense, (B, d_out)."""
    leaves = _coerce_leaves(params)
    feats, batched = _promote(forward_features(config, leaves, batch, masks))
    m = np.atleast_2d(np.asarray(masks, dtype=bool))
    pooled = dc.gap_time(feats, m)
    emb = dc.dense(pooled, leaves["embed.weight"], leaves["embed.bias"])
    if not batched:
        return _demote(emb, False) if emb.value.ndim == 2 else emb
    return emb


def embed_sequences(config: BackboneConfig, params, batch, masks) -> np.ndarray:
    """Forward pass only; returns the (B, d_out) embedding values."""
    return forward_embed(config, params, batch, masks).value


def head_logits(embeddings, head: Head) -> np.ndarray:
    """Linear classifier scores for already-computed embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != head.weights.shape[1]:
        raise ValueError(
            f"embeddings {emb.shape} do not match head weights {head.weights.shape}")
    return emb @ head.weights.T + head.bias
