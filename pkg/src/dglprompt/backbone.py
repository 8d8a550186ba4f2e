"""Frozen CLIP-shaped dual encoder with random weights.

Both towers are stacks of pre-LN transformer blocks (LN -> MHA -> residual,
LN -> GELU MLP with ratio 4 -> residual). The visual tower consumes
pre-extracted patch vectors; the text tower uses a causal mask and reads its
feature at the end-of-text token.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import storage
from . import tensor as T
from .config import ModelConfig
from .tensor import ShapeError, Tensor

MAGIC = b"DGLB"
MLP_RATIO = 4

# Tables that scale with vocabulary / input size rather than model capacity.
EMBEDDING_TENSORS = ("visual.patch_embed", "visual.pos", "text.token_embed", "text.pos")


@dataclass
class AttentionParams:
    """Multi-head attention weights; matrices are (in, out)."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    w_fc: Tensor
    b_fc: Tensor
    w_proj: Tensor
    b_proj: Tensor


def block_shapes(prefix: str, d: int) -> dict[str, tuple]:
    h = MLP_RATIO * d
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.w_q": (d, d),
        f"{prefix}.attn.b_q": (d,),
        f"{prefix}.attn.w_k": (d, d),
        f"{prefix}.attn.b_k": (d,),
        f"{prefix}.attn.w_v": (d, d),
        f"{prefix}.attn.b_v": (d,),
        f"{prefix}.attn.w_o": (d, d),
        f"{prefix}.attn.b_o": (d,),
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.w_fc": (d, h),
        f"{prefix}.mlp.b_fc": (h,),
        f"{prefix}.mlp.w_proj": (h, d),
        f"{prefix}.mlp.b_proj": (d,),
    }


def backbone_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every frozen tensor."""
    shapes = {
        "visual.patch_embed": (cfg.raw_dim, cfg.d_v),
        "visual.cls": (cfg.d_v,),
        "visual.pos": (1 + cfg.P, cfg.d_v),
    }
    for i in range(cfg.N):
        shapes.update(block_shapes(f"visual.{i}", cfg.d_v))
    shapes.update({
        "visual.ln_post.g": (cfg.d_v,),
        "visual.ln_post.b": (cfg.d_v,),
        "visual.proj": (cfg.d_v, cfg.d_joint),
        "text.token_embed": (cfg.V, cfg.d_t),
        "text.pos": (cfg.L, cfg.d_t),
    })
    for i in range(cfg.N):
        shapes.update(block_shapes(f"text.{i}", cfg.d_t))
    shapes.update({
        "text.ln_final.g": (cfg.d_t,),
        "text.ln_final.b": (cfg.d_t,),
        "text.proj": (cfg.d_t, cfg.d_joint),
        "logit_scale": (),
    })
    return shapes


def backbone_param_count(cfg: ModelConfig, include_embeddings: bool = False) -> int:
    """Scalar count from shapes alone (nothing is allocated)."""
    return sum(
        math.prod(shape)
        for name, shape in backbone_shapes(cfg).items()
        if include_embeddings or name not in EMBEDDING_TENSORS
    )


def _init_value(name: str, shape: tuple, rng: np.random.Generator, std: float) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name == "logit_scale":
        return np.array(math.log(1 / 0.07))
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b" or leaf.startswith("b_"):
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


def init_backbone(cfg: ModelConfig, seed: int | None = None) -> "FrozenBackbone":
    """Deterministic random weights: normal(0, cfg.init_std) for matrices and
    embeddings, zero biases, unit LN gains, logit_scale = ln(1/0.07)."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    arrays = {
        name: _init_value(name, shape, rng, cfg.init_std)
        for name, shape in backbone_shapes(cfg).items()
    }
    return FrozenBackbone(cfg, arrays)


# --- functional building blocks -------------------------------------------


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return T.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: AttentionParams, mask=None, return_weights: bool = False):
    """Scaled dot-product attention of ``q_in`` rows over ``kv_in`` rows.

    ``mask`` is an additive (Tq, Tk) array (``-inf`` blocks a key). With
    ``return_weights`` the per-head probabilities (..., H, Tq, Tk) are
    returned alongside the output.
    """
    if q_in.shape[-1] != p.w_q.shape[0] or kv_in.shape[-1] != p.w_k.shape[0]:
        raise ShapeError(f"attention width mismatch: {q_in.shape}, {kv_in.shape} vs {p.w_q.shape}")
    q = split_heads(q_in @ p.w_q + p.b_q, p.heads)
    k = split_heads(kv_in @ p.w_k + p.b_k, p.heads)
    v = split_heads(kv_in @ p.w_v + p.b_v, p.heads)
    scores = T.scale(q @ k.T, 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor._wrap(np.asarray(mask, dtype=np.float64))
    weights = T.softmax(scores, axis=-1)
    out = merge_heads(weights @ v) @ p.w_o + p.b_o
    return (out, weights) if return_weights else out


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return T.gelu(x @ p.w_fc + p.b_fc) @ p.w_proj + p.b_proj


def transformer_block(x: Tensor, p: BlockParams, mask=None) -> Tensor:
    h = T.layer_norm(x, p.ln1_g, p.ln1_b)
    x = x + multi_head_attention(h, h, p.attn, mask)
    return x + mlp(T.layer_norm(x, p.ln2_g, p.ln2_b), p)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


def make_block(tensors: dict[str, Tensor], prefix: str, heads: int) -> BlockParams:
    g = lambda k: tensors[f"{prefix}.{k}"]  # noqa: E731
    attn = AttentionParams(
        g("attn.w_q"), g("attn.b_q"), g("attn.w_k"), g("attn.b_k"),
        g("attn.w_v"), g("attn.b_v"), g("attn.w_o"), g("attn.b_o"), heads,
    )
    return BlockParams(
        g("ln1.g"), g("ln1.b"), attn, g("ln2.g"), g("ln2.b"),
        g("mlp.w_fc"), g("mlp.b_fc"), g("mlp.w_proj"), g("mlp.b_proj"),
    )


class FrozenBackbone:
    """Immutable frozen weights plus per-tower helpers.

    Every tensor has ``requires_grad=False``; the arrays are marked
    read-only so accidental in-place updates raise.
    """

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray]):
        expected = backbone_shapes(cfg)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"backbone tensors mismatch; missing={missing} extra={extra}")
        self.config = cfg
        self.tensors: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            t = Tensor._wrap(arr)
            t.data.setflags(write=False)
            self.tensors[name] = t
        self.visual_blocks = [make_block(self.tensors, f"visual.{i}", cfg.H_v) for i in range(cfg.N)]
        self.text_blocks = [make_block(self.tensors, f"text.{i}", cfg.H_t) for i in range(cfg.N)]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def logit_scale(self) -> Tensor:
        return self.tensors["logit_scale"]

    def parameter_count(self, include_embeddings: bool = False) -> int:
        return backbone_param_count(self.config, include_embeddings)

    # --- text tower -------------------------------------------------------

    def text_sequence_length(self) -> int:
        cfg = self.config
        return cfg.n_pre + cfg.L + cfg.n_post_used

    def embed_text(self, tokens) -> Tensor:
        """Word plus position embeddings for a (B, L) id matrix."""
        tokens = np.asarray(tokens)
        if tokens.shape[-1] != self.config.L:
            raise ShapeError(f"captions have {tokens.shape[-1]} tokens, expected L={self.config.L}")
        return T.embedding(self["text.token_embed"], tokens) + self["text.pos"]

    def text_layer(self, i: int, tokens: Tensor, mask=None, expected_len: int | None = None) -> Tensor:
        """Frozen text block ``i`` (0-based) under a causal mask."""
        if not 0 <= i < self.config.N:
            raise IndexError(f"text layer {i} outside [0, {self.config.N})")
        n = tokens.shape[-2]
        want = self.text_sequence_length() if expected_len is None else expected_len
        if n != want:
            raise ShapeError(f"text layer got {n} tokens, expected {want}")
        return transformer_block(tokens, self.text_blocks[i], causal_mask(n) if mask is None else mask)

    def text_feature(self, w_final: Tensor, eot_index) -> Tensor:
        """Final LN at the EOT row(s), then the text projection (unnormalized)."""
        eot = np.asarray(eot_index)
        n = w_final.shape[-2]
        if eot.size and (eot.min() < 0 or eot.max() >= n):
            raise IndexError(f"eot index {eot} outside [0, {n})")
        if w_final.ndim == 2:
            row = w_final[int(eot)]
        else:
            row = w_final[np.arange(w_final.shape[0]), eot]
        h = T.layer_norm(row, self["text.ln_final.g"], self["text.ln_final.b"])
        return h @ self["text.proj"]

    # --- visual tower -----------------------------------------------------

    def embed_video(self, frames) -> Tensor:
        """(…, t, P, raw_dim) patches -> (…, t, 1+P, d_v) tokens with CLS first."""
        cfg = self.config
        frames = frames if isinstance(frames, Tensor) else Tensor._wrap(np.asarray(frames, dtype=np.float64))
        if frames.shape[-3:] != (cfg.t, cfg.P, cfg.raw_dim):
            raise ShapeError(f"video shape {frames.shape}, expected (..., {cfg.t}, {cfg.P}, {cfg.raw_dim})")
        patches = frames @ self["visual.patch_embed"]
        lead = patches.shape[:-2]
        cls = T.broadcast_to(self["visual.cls"].reshape(1, cfg.d_v), (*lead, 1, cfg.d_v))
        return T.concat([cls, patches], axis=-2) + self["visual.pos"]

    def visual_layer(self, i: int, tokens: Tensor) -> Tensor:
        """Plain frozen ViT block ``i`` applied to each frame independently."""
        return transformer_block(tokens, self.visual_blocks[i])

    def visual_feature(self, pooled: Tensor) -> Tensor:
        return T.layer_norm(pooled, self["visual.ln_post.g"], self["visual.ln_post.b"]) @ self["visual.proj"]

    # --- identity and persistence ----------------------------------------

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw bytes of every tensor."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = self.tensors[name].data
            h.update(name.encode())
            h.update(np.asarray(arr.shape, dtype="<u8").tobytes())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        storage.write_file(
            path, MAGIC, storage.config_fields(self.config),
            {k: v.data for k, v in self.tensors.items()},
        )

    @classmethod
    def load(cls, path) -> "FrozenBackbone":
        fields, arrays = storage.read_file(path, MAGIC)
        return cls(storage.config_from_fields(fields), arrays)
