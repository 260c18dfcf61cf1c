"""A small query-based detector with a decoupled objectness layer.

The decoder stack has ``num_decoder_layers`` layers.  The layer selected by
``objectness_layer_index`` (1-based, default 1) feeds the Gaussian objectness
model; layers 2..L carry class and box heads.  Boxes are refined layer by
layer from the queries' learned reference boxes, and cross-attention is
biased towards each query's current reference box, which stands in for
deformable attention at this scale.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ConfigMismatch(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class DetectorConfig:
    num_queries: int = 100
    embed_dim: int = 32
    num_decoder_layers: int = 6
    num_known_classes: int = 4
    objectness_layer_index: int = 1
    num_heads: int = 4
    ffn_dim: int = 64
    image_size: int = 64
    backbone_channels: tuple[int, ...] = (16, 32)
    # objectness statistics
    obj_momentum: float = 0.9
    obj_eps: float = 1e-4
    obj_temperature: float = 1.3
    # stop gradients through the reference box handed to the next layer
    detach_refs: bool = True

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.num_queries <= 0:
            raise ValueError("num_queries must be positive")
        if not 1 <= self.objectness_layer_index <= self.num_decoder_layers:
            raise ValueError(
                f"objectness_layer_index {self.objectness_layer_index} outside 1..{self.num_decoder_layers}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_known_classes < 0:
            raise ValueError("num_known_classes must be nonnegative")

    @property
    def feature_stride(self) -> int:
        return 2 ** (len(self.backbone_channels) + 1)

    @property
    def grid_size(self) -> int:
        return math.ceil(self.image_size / self.feature_stride)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


# --------------------------------------------------------------------------
# Gaussian objectness


def mahalanobis_sq(q: Tensor, mean: Tensor, cov: Tensor, eps: float) -> Tensor:
    """Squared Mahalanobis distance of each row of ``q`` under ``(mean, cov + eps I)``."""
    dim = mean.shape[-1]
    reg = cov + eps * torch.eye(dim, dtype=cov.dtype, device=cov.device)
    chol, info = torch.linalg.cholesky_ex(reg)
    if int(info) != 0:
        raise NumericalFailure("covariance is not positive definite")
    diff = (q - mean).reshape(-1, dim)
    z = torch.linalg.solve_triangular(chol, diff.T, upper=False)
    return (z * z).sum(0).reshape(q.shape[:-1])


class ObjectnessModel(nn.Module):
    """Running mean / covariance of objectness-layer query embeddings.

    The likelihood is the energy score ``exp(-T * d^2 / D)``; dividing by the
    embedding width keeps in-distribution scores away from zero for any ``D``.
    """

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-4, temperature: float = 1.3):
        super().__init__()
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.temperature = temperature
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("cov", torch.eye(dim))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def distance_sq(self, q: Tensor, mean: Tensor | None = None, cov: Tensor | None = None) -> Tensor:
        mean = self.mean if mean is None else mean
        cov = self.cov if cov is None else cov
        return mahalanobis_sq(q, mean.to(q.dtype), cov.to(q.dtype), self.eps)

    def likelihood_from_distance(self, dist_sq: Tensor) -> Tensor:
        return torch.exp(-self.temperature * dist_sq / self.dim)

    def likelihood(self, q: Tensor) -> Tensor:
        return self.likelihood_from_distance(self.distance_sq(q))

    @staticmethod
    def batch_statistics(embeddings: Tensor) -> tuple[Tensor, Tensor]:
        flat = embeddings.reshape(-1, embeddings.shape[-1])
        mean = flat.mean(0)
        centered = flat - mean
        cov = centered.T @ centered / flat.shape[0]
        return mean, cov

    @torch.no_grad()
    def update(self, embeddings: Tensor) -> None:
        """Exponential moving average towards the batch statistics.

        The first non-empty batch initializes the statistics outright; later
        batches apply ``stat <- m * stat + (1 - m) * batch_stat``.
        """
        flat = embeddings.detach().reshape(-1, self.dim)
        if flat.shape[0] == 0:
            return
        mean, cov = self.batch_statistics(flat.to(self.mean.dtype))
        if not bool(self.initialized):
            self.mean.copy_(mean)
            self.cov.copy_(cov)
            self.initialized.fill_(True)
            return
        m = self.momentum
        self.mean.mul_(m).add_((1 - m) * mean)
        self.cov.mul_(m).add_((1 - m) * cov)
        # keep exact symmetry against rounding drift
        self.cov.copy_(0.5 * (self.cov + self.cov.T))


def mahalanobis(q, om: ObjectnessModel) -> float:
    q = torch.as_tensor(q, dtype=torch.float64)
    return float(om.distance_sq(q).clamp(min=0).sqrt())


def objectness_likelihood(q, om: ObjectnessModel) -> float:
    q = torch.as_tensor(q, dtype=torch.float64)
    return float(om.likelihood(q))


def update_objectness_stats(embeddings, om: ObjectnessModel) -> ObjectnessModel:
    om.update(torch.as_tensor(embeddings, dtype=om.mean.dtype))
    return om


def combine_scores(p_obj, p_cls, gamma: float = 0.6, mode: str = "geometric"):
    """Final detection score from objectness and class probability.

    ``geometric``: ``p_obj ** gamma * p_cls ** (1 - gamma)``.
    ``product``: ``p_obj * p_cls`` (gamma ignored).
    Works on floats, numpy arrays and tensors.
    """
    if mode == "product":
        return p_obj * p_cls
    if mode != "geometric":
        raise ValueError(f"unknown score mode {mode!r}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma == 0.0:
        return p_cls * 1.0
    if gamma == 1.0:
        return p_obj * 1.0
    return p_obj**gamma * p_cls ** (1 - gamma)


# --------------------------------------------------------------------------
# network


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class Backbone(nn.Module):
    def __init__(self, channels: tuple[int, ...], out_dim: int):
        super().__init__()
        layers = []
        c_in = 3
        for c in (*channels, out_dim):
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(out_dim, out_dim, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.body(x))


class BoxBiasedCrossAttention(nn.Module):
    """Multi-head cross-attention with a Gaussian prior around each query's box."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.spread = nn.Parameter(torch.zeros(heads))

    def forward(self, query: Tensor, key: Tensor, value: Tensor, ref: Tensor, grid_xy: Tensor) -> Tensor:
        b, nq, d = query.shape
        h, dh = self.heads, d // self.heads
        q = self.q(query).reshape(b, nq, h, dh).transpose(1, 2)
        k = self.k(key).reshape(b, -1, h, dh).transpose(1, 2)
        v = self.v(value).reshape(b, -1, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        # prior: squared offset from the box center, in units of the half size
        half = ref[..., 2:] / 2 + 0.5 / math.sqrt(grid_xy.shape[0])
        off = (grid_xy[None, None] - ref[:, :, None, :2]) / half[:, :, None, :]
        prior = -(off**2).sum(-1)  # [b, nq, hw]
        scale = F.softplus(self.spread + 0.5413)  # 1.0 at init
        logits = logits + scale[None, :, None, None] * prior[:, None]
        attn = logits.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(out)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = BoxBiasedCrossAttention(dim, heads)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tgt, query_pos, memory, memory_pos, ref, grid_xy):
        qk = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(qk, qk, tgt, need_weights=False)[0])
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, memory + memory_pos, memory, ref, grid_xy))
        return self.norm3(tgt + self.ffn(tgt))


class MLP(nn.Sequential):
    def __init__(self, dims: list[int]):
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        super().__init__(*layers)


CLASS_PRIOR = 0.01


def init_class_head(head: nn.Linear) -> None:
    nn.init.xavier_uniform_(head.weight)
    nn.init.constant_(head.bias, -math.log((1 - CLASS_PRIOR) / CLASS_PRIOR))


@dataclass
class LayerOutputs:
    """Per-layer decoder outputs for one batch.

    ``logits[l]`` / ``boxes[l]`` exist for 1-based layers ``l >= 2``.
    ``obj_dist_sq`` and ``p_obj`` come from the objectness layer.
    """

    embeddings: list[Tensor]
    reference_boxes: Tensor
    logits: dict[int, Tensor]
    boxes: dict[int, Tensor]
    obj_dist_sq: Tensor
    p_obj: Tensor
    objectness_layer: int
    stats: tuple[Tensor, Tensor] | None = field(default=None, repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.embeddings)

    @property
    def pred_logits(self) -> Tensor:
        return self.logits[self.num_layers]

    @property
    def pred_boxes(self) -> Tensor:
        return self.boxes[self.num_layers]

    @property
    def objectness_embeddings(self) -> Tensor:
        return self.embeddings[self.objectness_layer - 1]


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        if config.num_decoder_layers < 2:
            raise ValueError("need at least two decoder layers (objectness + classification)")
        self.config = config
        d = config.embed_dim
        self.backbone = Backbone(config.backbone_channels, d)
        g = config.grid_size
        self.memory_pos = nn.Parameter(torch.randn(g * g, d) * 0.1)
        ys, xs = torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij")
        grid = torch.stack([(xs.flatten() + 0.5) / g, (ys.flatten() + 0.5) / g], -1)
        self.register_buffer("grid_xy", grid, persistent=False)

        self.query_content = nn.Parameter(torch.randn(config.num_queries, d) * 0.1)
        self.query_ref = nn.Parameter(self._initial_reference(config.num_queries))
        self.query_pos = MLP([4, d, d])

        self.layers = nn.ModuleList(
            DecoderLayer(d, config.num_heads, config.ffn_dim) for _ in range(config.num_decoder_layers)
        )
        # heads for layers 2..L, indexed from 0
        self.class_heads = nn.ModuleList(nn.Linear(d, config.num_known_classes) for _ in range(config.num_decoder_layers - 1))
        self.box_heads = nn.ModuleList(MLP([d, d, d, 4]) for _ in range(config.num_decoder_layers - 1))
        for head in self.class_heads:
            init_class_head(head)
        for head in self.box_heads:
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)
        self.objectness = ObjectnessModel(d, config.obj_momentum, config.obj_eps, config.obj_temperature)

    @staticmethod
    def _initial_reference(n: int) -> Tensor:
        side = math.ceil(math.sqrt(n))
        idx = torch.arange(n)
        cx = (idx % side + 0.5) / side
        cy = (idx // side + 0.5) / side
        size = torch.full((n,), min(0.5, 2.0 / side))
        return inverse_sigmoid(torch.stack([cx, cy, size, size], -1))

    @property
    def num_classes(self) -> int:
        return self.class_heads[0].out_features

    def forward(self, images: Tensor, num_known: int | None = None) -> LayerOutputs:
        if num_known is not None and num_known != self.num_classes:
            raise ConfigMismatch(f"class head has {self.num_classes} outputs, {num_known} classes are known")
        b = images.shape[0]
        feat = self.backbone(images)
        memory = feat.flatten(2).transpose(1, 2)
        grid_xy = self.grid_xy.to(memory.dtype)
        if memory.shape[1] != grid_xy.shape[0]:
            raise ConfigMismatch(f"image size gives {memory.shape[1]} cells, expected {grid_xy.shape[0]}")
        memory_pos = self.memory_pos[None]

        tgt = self.query_content[None].expand(b, -1, -1)
        ref = self.query_ref.sigmoid()[None].expand(b, -1, -1)
        initial_ref = ref
        embeddings, logits, boxes = [], {}, {}
        for i, layer in enumerate(self.layers):
            tgt = layer(tgt, self.query_pos(ref), memory, memory_pos, ref, grid_xy)
            embeddings.append(tgt)
            if i == 0:
                continue
            logits[i + 1] = self.class_heads[i - 1](tgt)
            box = (inverse_sigmoid(ref) + self.box_heads[i - 1](tgt)).sigmoid()
            boxes[i + 1] = box
            ref = box.detach() if self.config.detach_refs else box

        obj_layer = self.config.objectness_layer_index
        q = embeddings[obj_layer - 1]
        om = self.objectness
        if self.training:
            stats = om.batch_statistics(q)
            dist_sq = om.distance_sq(q, *stats)
            om.update(q)
        else:
            stats = None
            dist_sq = om.distance_sq(q)
        p_obj = om.likelihood_from_distance(dist_sq)
        return LayerOutputs(embeddings, initial_ref, logits, boxes, dist_sq, p_obj, obj_layer, stats)

    @torch.no_grad()
    def widen_class_head(self, num_classes: int) -> None:
        """Grow every class head to ``num_classes`` outputs, keeping old rows."""
        old = self.num_classes
        if num_classes < old:
            raise ValueError("class heads can only grow")
        if num_classes == old:
            return
        for i, head in enumerate(self.class_heads):
            new = nn.Linear(head.in_features, num_classes).to(head.weight.dtype)
            init_class_head(new)
            new.weight[:old] = head.weight
            new.bias[:old] = head.bias
            self.class_heads[i] = new
        self.config.num_known_classes = num_classes
