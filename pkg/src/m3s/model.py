"""Gated text-vision encoder-decoder.

Text encoder and decoder are post-norm transformer stacks. Region features
go through their own encoder after adding box, image-index and region-index
embeddings. The fusion block attends from text states into vision states in
a common width, filters the result with a sigmoid gate and projects the
concatenation back to the text width; the decoder cross-attends into that.
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from m3s import autodiff as ad
from m3s.autodiff import Tensor
from m3s.errors import ConfigError, DataError

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_vision: int = 16
    d_common: int = 16
    enc_layers: int = 1
    dec_layers: int = 1
    vis_layers: int = 1
    heads: int = 2
    vision_heads: int = 0  # 0 -> same as heads
    fusion_heads: int = 0
    d_ff: int = 0  # 0 -> 2 * d_model
    d_ff_vision: int = 0  # 0 -> 2 * d_vision
    vocab_size: int = 64
    max_src_len: int = 16
    max_tgt_len: int = 8
    n_images: int = 2
    n_regions: int = 3
    n_langs: int = 4
    activation: str = "gelu_tanh"
    ln_eps: float = 1e-5

    def __post_init__(self):
        pos = ("d_model", "d_vision", "d_common", "enc_layers", "dec_layers", "vis_layers",
               "heads", "vocab_size", "max_src_len", "max_tgt_len", "n_images", "n_regions")
        for name in pos:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_langs < 2:
            raise ConfigError(f"n_langs must be >= 2, got {self.n_langs}")
        for width, h, label in ((self.d_model, self.heads, "d_model"),
                                (self.d_vision, self.n_vision_heads, "d_vision"),
                                (self.d_common, self.n_fusion_heads, "d_common")):
            if width % h:
                raise ConfigError(f"{label}={width} not divisible by {h} heads")
        if self.max_tgt_len > self.max_src_len:
            # the summary side also runs through the text encoder
            raise ConfigError("max_tgt_len must not exceed max_src_len")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_vision_heads(self):
        return self.vision_heads or self.heads

    @property
    def n_fusion_heads(self):
        return self.fusion_heads or self.heads

    @property
    def ffn_width(self):
        return self.d_ff or 2 * self.d_model

    @property
    def ffn_width_vision(self):
        return self.d_ff_vision or 2 * self.d_vision

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VisionBatch:
    """Packed region features for a batch of articles.

    ``features`` is B x n x m x d_v, ``boxes`` B x n x m x 4 in [0, 1],
    ``mask`` B x n x m with 1 on real regions.
    """

    features: np.ndarray
    boxes: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 4:
            raise ConfigError(f"vision features must be B x n x m x d_v, got {self.features.shape}")
        b, n, m, _ = self.features.shape
        if self.boxes.shape != (b, n, m, 4) or self.mask.shape != (b, n, m):
            raise ConfigError("vision boxes/mask do not match feature layout")
        if not np.isfinite(self.boxes).all() or self.boxes.min(initial=0) < 0 or self.boxes.max(initial=0) > 1:
            raise DataError("box coordinates must be finite and within [0, 1]")

    @property
    def flat_mask(self):
        b, n, m = self.mask.shape
        return self.mask.reshape(b, n * m).astype(bool)

    def take(self, idx):
        return VisionBatch(self.features[idx], self.boxes[idx], self.mask[idx])


@dataclass
class Fusion:
    out: Tensor  # B x M x d
    cross: Tensor  # B x M x d_c, attention output before gating
    gate: Tensor
    gated: Tensor


@dataclass
class ForwardTrace:
    text_states: Tensor
    vision_states: Tensor
    fusion: Fusion
    dec_states: Tensor  # top decoder layer
    logits: Tensor


def param_shapes(cfg):
    """Name -> shape for every trainable tensor, in a fixed order."""
    d, dv, dc, V = cfg.d_model, cfg.d_vision, cfg.d_common, cfg.vocab_size
    shapes = {
        "tok_emb": (V, d),
        "enc.pos_emb": (cfg.max_src_len, d),
        "dec.pos_emb": (cfg.max_tgt_len, d),
        "vis.box.w": (4, dv),
        "vis.box.b": (dv,),
        "vis.img_emb": (cfg.n_images, dv),
        "vis.reg_emb": (cfg.n_regions, dv),
    }

    def attn(prefix, dq, dkv, width, dout):
        shapes.update({
            f"{prefix}.wq": (dq, width), f"{prefix}.bq": (width,),
            f"{prefix}.wk": (dkv, width), f"{prefix}.bk": (width,),
            f"{prefix}.wv": (dkv, width), f"{prefix}.bv": (width,),
            f"{prefix}.wo": (width, dout), f"{prefix}.bo": (dout,),
        })

    def ffn(prefix, width, inner):
        shapes.update({f"{prefix}.w1": (width, inner), f"{prefix}.b1": (inner,),
                       f"{prefix}.w2": (inner, width), f"{prefix}.b2": (width,)})

    def norm(prefix, width):
        shapes.update({f"{prefix}.g": (width,), f"{prefix}.b": (width,)})

    for i in range(cfg.enc_layers):
        attn(f"enc.{i}.attn", d, d, d, d)
        norm(f"enc.{i}.ln1", d)
        ffn(f"enc.{i}.ffn", d, cfg.ffn_width)
        norm(f"enc.{i}.ln2", d)
    for i in range(cfg.vis_layers):
        attn(f"vis.{i}.attn", dv, dv, dv, dv)
        norm(f"vis.{i}.ln1", dv)
        ffn(f"vis.{i}.ffn", dv, cfg.ffn_width_vision)
        norm(f"vis.{i}.ln2", dv)
    attn("fuse.attn", d, dv, dc, dc)
    shapes.update({"fuse.wg": (d + dc, dc), "fuse.bg": (dc,),
                   "fuse.wz": (d + dc, d), "fuse.bz": (d,)})
    for i in range(cfg.dec_layers):
        attn(f"dec.{i}.self", d, d, d, d)
        norm(f"dec.{i}.ln1", d)
        attn(f"dec.{i}.cross", d, d, d, d)
        norm(f"dec.{i}.ln2", d)
        ffn(f"dec.{i}.ffn", d, cfg.ffn_width)
        norm(f"dec.{i}.ln3", d)
    shapes.update({"out.w": (d, V), "out.b": (V,)})
    # vision-side projection used by the contrastive objective
    shapes.update({"tco.w1": (dv, d), "tco.b1": (d,), "tco.w2": (d, d), "tco.b2": (d,)})
    return shapes


def init_params(cfg, seed=0, dtype=None):
    rng = np.random.default_rng(seed)
    dtype = dtype or ad.default_dtype()
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        elif name.endswith("emb"):
            data = rng.normal(0.0, 0.5, size=shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)
    return params


class Summarizer:
    """The shared summarization model; one parameter set serves every direction."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params
        self.act = ad.ACTIVATIONS[cfg.activation]
        expected = param_shapes(cfg)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing[:3]} extra={extra[:3]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name}: shape {params[name].shape}, expected {shape}")

    @classmethod
    def create(cls, cfg, seed=0):
        return cls(cfg, init_params(cfg, seed))

    def __getitem__(self, name):
        return self.params[name]

    # -------------------------------------------------------------- blocks

    def _linear(self, x, prefix, w="w", b="b"):
        return ad.matmul(x, self.params[f"{prefix}.{w}"]) + self.params[f"{prefix}.{b}"]

    def _norm(self, x, prefix):
        return ad.layernorm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"], self.cfg.ln_eps)

    def _ffn(self, x, prefix):
        h = self.act(self._linear(x, prefix, "w1", "b1"))
        return self._linear(h, prefix, "w2", "b2")

    def attention(self, prefix, q_in, kv_in, key_mask, heads, causal=False, require_keys=True):
        """Multi-head attention; ``key_mask`` is B x Lk bool (True = real).

        Blocked logits are set to -1e9 before the softmax. With
        ``require_keys`` a query row that can see no key is an error.
        """
        p = self.params
        B, Lq, _ = q_in.shape
        Lk = kv_in.shape[1]
        width = p[f"{prefix}.wq"].shape[1]
        dh = width // heads
        q = (ad.matmul(q_in, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"]).reshape(B, Lq, heads, dh)
        k = (ad.matmul(kv_in, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"]).reshape(B, Lk, heads, dh)
        v = (ad.matmul(kv_in, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"]).reshape(B, Lk, heads, dh)
        q = q.transpose(0, 2, 1, 3)
        k = k.transpose(0, 2, 3, 1)
        v = v.transpose(0, 2, 1, 3)
        scores = ad.matmul(q, k) * (1.0 / math.sqrt(dh))  # B x h x Lq x Lk

        blocked = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            blocked = blocked | np.triu(np.ones((Lq, Lk), dtype=bool), k=1)[None, None]
        blocked = np.broadcast_to(blocked, (B, 1, Lq, Lk))
        if require_keys and blocked.all(axis=-1).any():
            raise DataError(f"{prefix}: a query position attends to no key (fully masked row)")
        scores = ad.masked_fill(scores, blocked, NEG_INF)
        a = ad.softmax(scores, axis=-1)
        out = ad.matmul(a, v).transpose(0, 2, 1, 3).reshape(B, Lq, width)
        return ad.matmul(out, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]

    def _encoder_layer(self, x, prefix, mask, heads, require_keys):
        s = self._norm(x + self.attention(f"{prefix}.attn", x, x, mask, heads,
                                          require_keys=require_keys), f"{prefix}.ln1")
        return self._norm(s + self._ffn(s, f"{prefix}.ffn"), f"{prefix}.ln2")

    # -------------------------------------------------------------- stages

    def encode_text(self, ids, mask):
        """Token ids B x M (mask B x M, 1 = real) -> B x M x d_model."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ConfigError(f"token ids must be B x M, got {ids.shape}")
        M = ids.shape[1]
        if M > self.cfg.max_src_len:
            raise DataError(f"source length {M} exceeds max_src_len {self.cfg.max_src_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise DataError("token id out of vocabulary")
        h = ad.embedding(self.params["tok_emb"], ids) + ad.slice_axis(self.params["enc.pos_emb"], 0, M, 0)
        mask = np.asarray(mask, dtype=bool)
        for i in range(self.cfg.enc_layers):
            # an all-pad row stays defined (uniform attention); reductions over it fail later
            h = self._encoder_layer(h, f"enc.{i}", mask, self.cfg.heads, require_keys=False)
        return h

    def vision_embed(self, vision):
        cfg = self.cfg
        B, n, m, dv = vision.features.shape
        if n > cfg.n_images or m > cfg.n_regions:
            raise ConfigError(f"vision layout {n}x{m} exceeds configured {cfg.n_images}x{cfg.n_regions}")
        if dv != cfg.d_vision:
            raise ConfigError(f"region feature width {dv} != d_vision {cfg.d_vision}")
        feats = Tensor(vision.features.reshape(B, n * m, dv))
        boxes = Tensor(vision.boxes.reshape(B, n * m, 4))
        img_ids = np.repeat(np.arange(n), m)
        reg_ids = np.tile(np.arange(m), n)
        pos = ad.embedding(self.params["vis.img_emb"], img_ids) + ad.embedding(self.params["vis.reg_emb"], reg_ids)
        return feats + self._linear(boxes, "vis.box") + pos

    def encode_vision(self, vision):
        """Region features -> B x (n*m) x d_vision."""
        h = self.vision_embed(vision)
        mask = vision.flat_mask
        for i in range(self.cfg.vis_layers):
            h = self._encoder_layer(h, f"vis.{i}", mask, self.cfg.n_vision_heads, require_keys=True)
        return h

    def fuse(self, text_states, vision_states, text_mask, vision_mask):
        """Gated injection of vision into text states; vision_mask is B x (n*m)."""
        cross = self.attention("fuse.attn", text_states, vision_states, vision_mask,
                               self.cfg.n_fusion_heads, require_keys=True)
        gate = ad.sigmoid(ad.matmul(ad.concat([text_states, cross], -1), self.params["fuse.wg"])
                          + self.params["fuse.bg"])
        gated = gate * cross
        out = ad.matmul(ad.concat([text_states, gated], -1), self.params["fuse.wz"]) + self.params["fuse.bz"]
        return Fusion(out=out, cross=cross, gate=gate, gated=gated)

    def decode(self, dec_in, tgt_mask, memory, text_mask):
        """Teacher-forced decoding; returns (top states B x N x d, logits B x N x V)."""
        dec_in = np.asarray(dec_in)
        N = dec_in.shape[1]
        if N > self.cfg.max_tgt_len:
            raise DataError(f"target length {N} exceeds max_tgt_len {self.cfg.max_tgt_len}")
        h = ad.embedding(self.params["tok_emb"], dec_in) + ad.slice_axis(self.params["dec.pos_emb"], 0, N, 0)
        tgt_keys = np.asarray(tgt_mask, dtype=bool).copy()
        tgt_keys[:, 0] = True  # the begin token is always visible
        text_mask = np.asarray(text_mask, dtype=bool)
        heads = self.cfg.heads
        for i in range(self.cfg.dec_layers):
            pre = f"dec.{i}"
            s = self._norm(h + self.attention(f"{pre}.self", h, h, tgt_keys, heads, causal=True), f"{pre}.ln1")
            c = self._norm(s + self.attention(f"{pre}.cross", s, memory, text_mask, heads), f"{pre}.ln2")
            h = self._norm(c + self._ffn(c, f"{pre}.ffn"), f"{pre}.ln3")
        return h, self.project(h)

    def project(self, states):
        return self._linear(states, "out")

    def vision_projection(self, vision_states):
        """Single-hidden-layer MLP from d_vision into the text width."""
        h = self.act(self._linear(vision_states, "tco", "w1", "b1"))
        return self._linear(h, "tco", "w2", "b2")

    def forward(self, src_ids, src_mask, vision, dec_in, tgt_mask, vision_states=None):
        """Full pass for one direction; ``vision_states`` reuses an encoded image sequence."""
        text = self.encode_text(src_ids, src_mask)
        if vision_states is None:
            vision_states = self.encode_vision(vision)
        fusion = self.fuse(text, vision_states, src_mask, vision.flat_mask)
        dec, logits = self.decode(dec_in, tgt_mask, fusion.out, src_mask)
        return ForwardTrace(text_states=text, vision_states=vision_states, fusion=fusion,
                            dec_states=dec, logits=logits)
