"""Dual-branch network: graph-attention encoder over the cell graph, CNN
encoder over gene maps, linear fusion, and a graph-attention decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .spatial_graph import SpatialGraph


@dataclass
class ModelConfig:
    gat_layers: int = 2
    attention_heads: int = 4
    hidden_dim: int = 64          # total width of hidden GAT layers (concat of heads)
    embed_dim: int = 32            # spatial, intrinsic, and fused embedding width
    cnn_channels: tuple[int, ...] = (4,)
    gamma: float = 3.0             # reconstruction-loss exponent
    tau: float = 0.1               # contrastive temperature
    mask_ratio: float = 0.3
    epochs: int = 105
    seed: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    cci_only: bool = False
    attention_slope: float = 0.2   # leaky-ReLU slope inside attention scores
    max_contrastive_anchors: int = 4096

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        for name in ("gat_layers", "attention_heads", "hidden_dim", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        if not self.cci_only and any(c <= 0 for c in self.cnn_channels):
            raise ValueError("cnn_channels must be positive")
        if self.hidden_dim % self.attention_heads:
            raise ValueError("hidden_dim must be divisible by attention_heads")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)


def gat_layer(h: Tensor, dst: np.ndarray, src: np.ndarray, n: int,
              W: Tensor, a_center: list[Tensor], a_neighbor: list[Tensor],
              head_dim: int, slope: float, average: bool,
              collect_attention: list | None = None) -> Tensor:
    """One multi-head graph-attention layer over precomputed directed edges.

    ``dst``/``src`` list each attention pair (receiver, sender) including
    self-loops; softmax normalizes per receiver. Heads are concatenated, or
    averaged when ``average`` is set (final layers).
    """
    heads = len(a_center)
    hw = ad.matmul(h, W)
    outputs = []
    for head in range(heads):
        part = ad.slice_cols(hw, head * head_dim, (head + 1) * head_dim)
        score_c = ad.matmul(part, a_center[head])
        score_n = ad.matmul(part, a_neighbor[head])
        e = ad.leaky_relu(
            ad.gather_rows(score_c, dst) + ad.gather_rows(score_n, src), slope
        )
        # per-receiver softmax, stabilized by the detached segment maximum
        seg_max = np.full((n, 1), -np.inf)
        np.maximum.at(seg_max, dst, e.values)
        ex = ad.exp(e - seg_max[dst])
        denom = ad.segment_sum(ex, dst, n)
        alpha = ex / ad.gather_rows(denom, dst)
        if collect_attention is not None:
            collect_attention.append((alpha.values.copy(), dst))
        messages = ad.gather_rows(part, src) * alpha
        outputs.append(ad.segment_sum(messages, dst, n))
    if heads == 1:
        return outputs[0]
    if average:
        total = outputs[0]
        for out in outputs[1:]:
            total = total + out
        return total * (1.0 / heads)
    return ad.concat(outputs, axis=1)


def fuse(z_spatial: np.ndarray, z_intrinsic: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Joint embedding: project the concatenated branch outputs, z = W [z_sp || z_in]."""
    z_spatial = np.asarray(z_spatial, dtype=np.float64)
    z_intrinsic = np.asarray(z_intrinsic, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    joint = np.concatenate([z_spatial, z_intrinsic])
    if W.ndim != 2 or W.shape[1] != joint.shape[0]:
        raise ValueError(
            f"fusion matrix {W.shape} incompatible with concatenated dim {joint.shape[0]}"
        )
    return W @ joint


class CellScapeModel:
    """Parameter container plus the masked dual-branch forward pass."""

    def __init__(self, n_genes: int, q: int | None, cfg: ModelConfig):
        self.cfg = cfg
        self.n_genes = n_genes
        self.q = q
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(cfg.seed)
        head_dim = cfg.hidden_dim // cfg.attention_heads

        # encoder GAT stack: hidden layers concat heads, final layer averages
        in_dim = n_genes
        for layer in range(cfg.gat_layers):
            final = layer == cfg.gat_layers - 1
            out_dim = cfg.embed_dim if final else head_dim
            width = cfg.attention_heads * out_dim
            self.params[f"encoder.{layer}.W"] = _glorot(rng, (in_dim, width), in_dim, width)
            for head in range(cfg.attention_heads):
                self.params[f"encoder.{layer}.{head}.a_center"] = _glorot(
                    rng, (out_dim, 1), out_dim, 1
                )
                self.params[f"encoder.{layer}.{head}.a_neighbor"] = _glorot(
                    rng, (out_dim, 1), out_dim, 1
                )
            in_dim = out_dim if final else width

        if not cfg.cci_only:
            if q is None:
                raise ValueError("gene-map grid size required unless cci_only")
            if q < 4:
                raise ValueError(f"gene-map grid q={q} below the receptive-field minimum 4")
            side = q
            in_ch = 1
            for i, out_ch in enumerate(cfg.cnn_channels):
                self.params[f"cnn.{i}.w"] = _glorot(
                    rng, (out_ch, in_ch, 3, 3), in_ch * 9, out_ch * 9
                )
                self.params[f"cnn.{i}.b"] = Tensor(np.zeros(out_ch), requires_grad=True)
                self.params[f"cnn.{i}.gamma"] = Tensor(np.ones(out_ch), requires_grad=True)
                self.params[f"cnn.{i}.beta"] = Tensor(np.zeros(out_ch), requires_grad=True)
                self.bn_states[f"cnn.{i}"] = BatchNormState(out_ch)
                side //= 2
                in_ch = out_ch
                if side < 1:
                    raise ValueError("gene map too small for the configured CNN depth")
            flat = in_ch * side * side
            self.params["cnn.fc.w"] = _glorot(rng, (flat, cfg.embed_dim), flat, cfg.embed_dim)
            self.params["cnn.fc.b"] = Tensor(np.zeros(cfg.embed_dim), requires_grad=True)

        joint = cfg.embed_dim if cfg.cci_only else 2 * cfg.embed_dim
        self.params["fusion.W"] = _glorot(rng, (joint, cfg.embed_dim), joint, cfg.embed_dim)

        self.params["decoder.W"] = _glorot(
            rng, (cfg.embed_dim, n_genes), cfg.embed_dim, n_genes
        )
        self.params["decoder.0.a_center"] = _glorot(rng, (n_genes, 1), n_genes, 1)
        self.params["decoder.0.a_neighbor"] = _glorot(rng, (n_genes, 1), n_genes, 1)

    # -- forward pieces ---------------------------------------------------

    def encode_spatial(self, features: Tensor, dst, src, n,
                       collect_attention=None) -> Tensor:
        cfg = self.cfg
        head_dim = cfg.hidden_dim // cfg.attention_heads
        h = features
        for layer in range(cfg.gat_layers):
            final = layer == cfg.gat_layers - 1
            out_dim = cfg.embed_dim if final else head_dim
            h = gat_layer(
                h, dst, src, n,
                self.params[f"encoder.{layer}.W"],
                [self.params[f"encoder.{layer}.{k}.a_center"] for k in range(cfg.attention_heads)],
                [self.params[f"encoder.{layer}.{k}.a_neighbor"] for k in range(cfg.attention_heads)],
                out_dim, cfg.attention_slope, average=final,
                collect_attention=collect_attention,
            )
            if not final:
                h = ad.elu(h)
        return h

    def encode_intrinsic(self, maps: np.ndarray, training: bool,
                         update_running: bool = True) -> Tensor:
        n = maps.shape[0]
        x = Tensor(maps.reshape(n, 1, self.q, self.q))
        for i in range(len(self.cfg.cnn_channels)):
            x = ad.conv2d(x, self.params[f"cnn.{i}.w"], self.params[f"cnn.{i}.b"], "same")
            x = ad.batch_norm(
                x, self.params[f"cnn.{i}.gamma"], self.params[f"cnn.{i}.beta"],
                self.bn_states[f"cnn.{i}"], training, update_running,
            )
            x = ad.leaky_relu(x, 0.01)
            x = ad.maxpool2(x)
        flat = ad.reshape(x, (n, -1))
        return ad.matmul(flat, self.params["cnn.fc.w"]) + self.params["cnn.fc.b"]

    def decode(self, z: Tensor, dst, src, n) -> Tensor:
        return gat_layer(
            z, dst, src, n,
            self.params["decoder.W"],
            [self.params["decoder.0.a_center"]],
            [self.params["decoder.0.a_neighbor"]],
            self.n_genes, self.cfg.attention_slope, average=True,
        )

    def forward(self, features: np.ndarray, maps: np.ndarray | None,
                graph: SpatialGraph, training: bool, update_running: bool = True,
                include_self: bool = True, collect_attention=None) -> dict:
        """Full pass on (n, p) cell features and (n, q, q) maps.

        Returns spatial/intrinsic/fused embeddings and the decoded
        reconstruction, all as graph-connected tensors.
        """
        n = graph.n_nodes
        if features.shape != (n, self.n_genes):
            raise ValueError(f"features shape {features.shape} != ({n}, {self.n_genes})")
        if not include_self:
            deg = graph.degrees()
            isolated = np.flatnonzero(deg == 0)
            if isolated.size:
                raise ValueError(
                    f"node {isolated[0]} has an empty attention neighborhood "
                    "(self-loops disabled)"
                )
        dst, src = graph.directed_edges(add_self_loops=include_self)

        z_spatial = self.encode_spatial(Tensor(features), dst, src, n, collect_attention)
        if self.cfg.cci_only:
            z_intrinsic = None
            joint = z_spatial
        else:
            if maps is None:
                raise ValueError("gene maps required unless cci_only")
            z_intrinsic = self.encode_intrinsic(maps, training, update_running)
            joint = ad.concat([z_spatial, z_intrinsic], axis=1)
        z_fused = ad.matmul(joint, self.params["fusion.W"])
        x_hat = self.decode(z_fused, dst, src, n)
        return {
            "z_spatial": z_spatial,
            "z_intrinsic": z_intrinsic,
            "z_fused": z_fused,
            "x_hat": x_hat,
        }
