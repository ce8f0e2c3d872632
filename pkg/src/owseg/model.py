"""Toy-scale query-based segmentation network.

A small strided conv backbone feeds a plain-attention decoder whose query
embeddings drive six heads: classification (behind stop-gradient), box,
box-IoU, mask-IoU, dynamic-convolution mask kernels, and a contrastive
projection. Heads are shared across decoder layers; every layer's outputs
are returned for auxiliary supervision.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import (Tensor, add, conv2d, gelu, layer_norm, linear, matmul,
                     mul, relu, reshape, sigmoid, softmax, stop_grad, transpose)
from .contrastive import l2_normalize


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    feat_channels: int = 64
    mask_dim: int = 8
    hidden_dim: int = 128
    attn_dim: int = 64
    ffn_dim: int = 192
    decoder_layers: int = 3
    attention_heads: int = 4
    num_queries: int = 50
    contrast_dim: int = 32
    with_class_head: bool = True
    with_iou_heads: bool = True
    with_contrastive: bool = True
    use_stop_grad: bool = True
    class_bias_init: float = -2.0
    query_init_std: float = 1.0

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.attn_dim % self.attention_heads:
            raise ValueError("attn_dim must divide evenly across attention heads")

    @property
    def feat_size(self):
        return self.image_size // 4

    def to_manifest(self):
        return asdict(self)


@dataclass
class LayerOutput:
    embed: Tensor           # (B, Q, D) decoder embedding after this layer
    cls: Tensor | None      # (B, Q) foreground logit, None without class head
    box: Tensor             # (B, Q, 4) center-form, sigmoid-bounded
    box_iou: Tensor | None  # (B, Q) logit
    mask_iou: Tensor | None # (B, Q) logit
    kernels: Tensor         # (B, Q, kernel_params)


@dataclass
class ModelOutput:
    layers: list
    mask_feat: Tensor  # (B, mask_dim, feat_size**2)

    @property
    def final(self):
        return self.layers[-1]


def _bilinear_matrix(n_out, n_in):
    """Row-stochastic 1-D bilinear interpolation matrix (align_corners=False)."""
    f = n_out / n_in
    m = np.zeros((n_out, n_in), dtype=np.float32)
    for i in range(n_out):
        x = (i + 0.5) / f - 0.5
        x0 = int(np.floor(x))
        frac = x - x0
        lo = min(max(x0, 0), n_in - 1)
        hi = min(max(x0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def _sine_position_embedding(h, w, dim):
    """Fixed 2-D sinusoidal embedding, flattened to (h*w, dim)."""
    d4 = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(d4, dtype=np.float64) / d4))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    def enc(coord):
        ang = coord.reshape(-1, 1) * omega
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    out = np.concatenate([enc(ys), enc(xs)], axis=1)
    if out.shape[1] < dim:  # pad when dim is not a multiple of 4
        out = np.concatenate([out, np.zeros((h * w, dim - out.shape[1]))], axis=1)
    return out.astype(np.float32)


class Model:
    """Segmentation network; parameters live in a flat name -> Tensor dict."""

    KERNEL_LAYOUT = "two 1x1 conv layers: mask_dim->mask_dim->1"

    def __init__(self, cfg: ModelConfig, rng=None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        self.params = {}
        self._build(rng)
        s = cfg.feat_size
        self._pos = _sine_position_embedding(s, s, cfg.hidden_dim)
        self._up = _bilinear_matrix(cfg.image_size, s)

    # construction ---------------------------------------------------------
    def _param(self, name, array):
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def _conv_init(self, rng, co, ci, k):
        std = np.sqrt(2.0 / (ci * k * k))
        return rng.standard_normal((co, ci, k, k)) * std

    def _linear_init(self, rng, fi, fo, std=None):
        std = std if std is not None else np.sqrt(2.0 / (fi + fo))
        return rng.standard_normal((fi, fo)) * std

    def _build(self, rng):
        cfg = self.cfg
        c = cfg.feat_channels
        self._param("backbone.conv0.w", self._conv_init(rng, c // 2, cfg.in_channels, 3))
        self._param("backbone.conv0.b", np.zeros(c // 2))
        self._param("backbone.conv1.w", self._conv_init(rng, c, c // 2, 3))
        self._param("backbone.conv1.b", np.zeros(c))
        self._param("backbone.conv2.w", self._conv_init(rng, c, c, 3))
        self._param("backbone.conv2.b", np.zeros(c))
        self._param("backbone.mask_proj.w", self._conv_init(rng, cfg.mask_dim, c, 1))
        self._param("backbone.mask_proj.b", np.zeros(cfg.mask_dim))
        d = cfg.hidden_dim
        self._param("input_proj.w", self._linear_init(rng, c, d))
        self._param("input_proj.b", np.zeros(d))
        self._param("queries.embed",
                    rng.standard_normal((cfg.num_queries, d)) * cfg.query_init_std)
        for l in range(cfg.decoder_layers):
            for attn in ("self_attn", "cross_attn"):
                pre = f"decoder.layer{l}.{attn}"
                a = cfg.attn_dim
                self._param(f"{pre}.wq", self._linear_init(rng, d, a))
                self._param(f"{pre}.bq", np.zeros(a))
                self._param(f"{pre}.wk", self._linear_init(rng, d, a))
                self._param(f"{pre}.bk", np.zeros(a))
                self._param(f"{pre}.wv", self._linear_init(rng, d, a))
                self._param(f"{pre}.bv", np.zeros(a))
                self._param(f"{pre}.wo", self._linear_init(rng, a, d))
                self._param(f"{pre}.bo", np.zeros(d))
            pre = f"decoder.layer{l}"
            for ln in ("ln1", "ln2", "ln3"):
                self._param(f"{pre}.{ln}.g", np.ones(d))
                self._param(f"{pre}.{ln}.b", np.zeros(d))
            self._param(f"{pre}.ffn.w1", self._linear_init(rng, d, cfg.ffn_dim))
            self._param(f"{pre}.ffn.b1", np.zeros(cfg.ffn_dim))
            self._param(f"{pre}.ffn.w2", self._linear_init(rng, cfg.ffn_dim, d))
            self._param(f"{pre}.ffn.b2", np.zeros(d))
        if cfg.with_class_head:
            self._param("heads.cls.w", self._linear_init(rng, d, 1, std=0.01))
            self._param("heads.cls.b", np.full(1, cfg.class_bias_init))
        for head in ("box",):
            self._param(f"heads.{head}.w1", self._linear_init(rng, d, d))
            self._param(f"heads.{head}.b1", np.zeros(d))
            self._param(f"heads.{head}.w2", self._linear_init(rng, d, 4, std=0.01))
            self._param(f"heads.{head}.b2", np.zeros(4))
        if cfg.with_iou_heads:
            for head in ("biou", "miou"):
                self._param(f"heads.{head}.w1", self._linear_init(rng, d, d // 2))
                self._param(f"heads.{head}.b1", np.zeros(d // 2))
                self._param(f"heads.{head}.w2", self._linear_init(rng, d // 2, 1, std=0.01))
                self._param(f"heads.{head}.b2", np.zeros(1))
        nk = self.kernel_params_per_query()
        self._param("heads.kernel.w", self._linear_init(rng, d, nk, std=0.01))
        self._param("heads.kernel.b", np.zeros(nk))
        if cfg.with_contrastive:
            cd = cfg.contrast_dim
            self._param("heads.contrast.w1", self._linear_init(rng, d, d))
            self._param("heads.contrast.b1", np.zeros(d))
            self._param("heads.contrast.w2", self._linear_init(rng, d, cd))
            self._param("heads.contrast.b2", np.zeros(cd))

    def kernel_params_per_query(self):
        m = self.cfg.mask_dim
        return m * m + m + m + 1  # w1, b1, w2, b2 of the dynamic conv stack

    def parameters(self):
        return self.params

    def parameter_count(self):
        return sum(p.data.size for p in self.params.values())

    def contrast_param_names(self):
        return [k for k in self.params if k.startswith("heads.contrast.")]

    # forward ---------------------------------------------------------------
    def _mlp_head(self, x, prefix, act=relu):
        p = self.params
        h = act(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _attention(self, prefix, q_in, k_in, v_in):
        p = self.params
        nh = self.cfg.attention_heads
        ah = self.cfg.attn_dim // nh
        b, lq, _ = q_in.shape
        lk = k_in.shape[1]
        q = linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = linear(k_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
        v = linear(v_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        q = transpose(reshape(q, (b, lq, nh, ah)), (0, 2, 1, 3))
        k = transpose(reshape(k, (b, lk, nh, ah)), (0, 2, 3, 1))
        v = transpose(reshape(v, (b, lk, nh, ah)), (0, 2, 1, 3))
        attn = softmax(mul(matmul(q, k), 1.0 / np.sqrt(ah)))
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, lq, nh * ah))
        return linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ln(self, x, prefix):
        p = self.params
        return add(mul(layer_norm(x), p[f"{prefix}.g"]), p[f"{prefix}.b"])

    def backbone_forward(self, images):
        """(B, 3, H, W) in [0,1] -> (memory features, mask features)."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise ValueError(
                f"backbone: expected (B, {cfg.in_channels}, H, W), got {images.shape}")
        p = self.params
        x = Tensor(images)
        x = relu(conv2d(x, p["backbone.conv0.w"], p["backbone.conv0.b"], stride=2, padding=1))
        x = relu(conv2d(x, p["backbone.conv1.w"], p["backbone.conv1.b"], stride=2, padding=1))
        feat = relu(conv2d(x, p["backbone.conv2.w"], p["backbone.conv2.b"], stride=1, padding=1))
        mask_feat = relu(conv2d(feat, p["backbone.mask_proj.w"], p["backbone.mask_proj.b"]))
        b = images.shape[0]
        s = cfg.feat_size
        mask_feat = reshape(mask_feat, (b, cfg.mask_dim, s * s))
        return feat, mask_feat

    def _heads(self, x):
        cfg = self.cfg
        p = self.params
        b, q, _ = x.shape
        cls = None
        if cfg.with_class_head:
            cls_in = stop_grad(x) if cfg.use_stop_grad else x
            cls = reshape(linear(cls_in, p["heads.cls.w"], p["heads.cls.b"]), (b, q))
        box = sigmoid(self._mlp_head(x, "heads.box"))
        biou = miou = None
        if cfg.with_iou_heads:
            biou = reshape(self._mlp_head(x, "heads.biou"), (b, q))
            miou = reshape(self._mlp_head(x, "heads.miou"), (b, q))
        kernels = linear(x, p["heads.kernel.w"], p["heads.kernel.b"])
        return LayerOutput(embed=x, cls=cls, box=box, box_iou=biou,
                           mask_iou=miou, kernels=kernels)

    def forward(self, images):
        """Run backbone + decoder; returns per-layer head outputs."""
        cfg = self.cfg
        feat, mask_feat = self.backbone_forward(images)
        b = feat.shape[0]
        s = cfg.feat_size
        mem = transpose(reshape(feat, (b, cfg.feat_channels, s * s)), (0, 2, 1))
        mem = linear(mem, self.params["input_proj.w"], self.params["input_proj.b"])
        mem_k = add(mem, self._pos)
        x = add(reshape(self.params["queries.embed"], (1, cfg.num_queries, cfg.hidden_dim)),
                np.zeros((b, 1, 1), dtype=np.float32))
        layers = []
        for l in range(cfg.decoder_layers):
            pre = f"decoder.layer{l}"
            x = self._ln(add(x, self._attention(f"{pre}.self_attn", x, x, x)), f"{pre}.ln1")
            x = self._ln(add(x, self._attention(f"{pre}.cross_attn", x, mem_k, mem)), f"{pre}.ln2")
            h = linear(x, self.params[f"{pre}.ffn.w1"], self.params[f"{pre}.ffn.b1"])
            h = linear(gelu(h), self.params[f"{pre}.ffn.w2"], self.params[f"{pre}.ffn.b2"])
            x = self._ln(add(x, h), f"{pre}.ln3")
            layers.append(self._heads(x))
        return ModelOutput(layers=layers, mask_feat=mask_feat)

    def decode_masks(self, kernels, feat_rows):
        """Dynamic-conv mask logits from per-query kernels.

        kernels: (N, kernel_params); feat_rows: (N, mask_dim, S*S).
        Returns pre-sigmoid logits upsampled x4 to (N, image, image).
        """
        m = self.cfg.mask_dim
        n = kernels.shape[0]
        s = self.cfg.feat_size
        w1 = reshape(kernels[:, 0:m * m], (n, m, m))
        b1 = reshape(kernels[:, m * m:m * m + m], (n, m, 1))
        w2 = reshape(kernels[:, m * m + m:m * m + 2 * m], (n, 1, m))
        b2 = reshape(kernels[:, m * m + 2 * m:], (n, 1, 1))
        h = relu(add(matmul(w1, feat_rows), b1))
        logits = reshape(add(matmul(w2, h), b2), (n, s, s))
        up = Tensor(self._up)
        up_t = Tensor(self._up.T.copy())
        return matmul(matmul(up, logits), up_t)

    def contrast_embed(self, embeddings, weights=None):
        """L2-normalized contrastive projection of decoder embeddings.

        ``weights`` defaults to the online head parameters; pass constant
        Tensors (e.g. the momentum twin) to project without gradient flow.
        """
        if not self.cfg.with_contrastive:
            raise ValueError("model built without a contrastive head")
        p = self.params
        w = weights or {k.split("heads.contrast.")[1]: p[k]
                        for k in self.contrast_param_names()}
        h = relu(linear(embeddings, w["w1"], w["b1"]))
        return l2_normalize(linear(h, w["w2"], w["b2"]))

    # persistence ------------------------------------------------------------
    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays):
        missing = [k for k in self.params if k not in arrays]
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {k!r}: checkpoint shape {arr.shape} != model {p.data.shape}")
            p.data = arr.copy()
