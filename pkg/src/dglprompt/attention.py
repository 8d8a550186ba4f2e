"""Prompt-augmented visual layer: local frame attention plus global video attention.

Per layer, each frame's tokens ``[C, F, E]`` attend over ``[G, C, F, E]``
(local), while the global prompts ``G`` attend over themselves and every
frame's tokens (global). Both read the same layer-input state and, in shared
mode, the same frozen attention weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import AttentionParams, FrozenBackbone, mlp, multi_head_attention
from .config import ModelConfig
from .tensor import ShapeError, Tensor


@dataclass
class VisualLayerState:
    """Frame tokens as one (..., t, 1 + n_f + P, d) block plus optional G (..., n_g, d)."""

    frames: Tensor
    G: Tensor | None = None
    n_f: int = 0

    @property
    def t(self) -> int:
        return self.frames.shape[-3]

    @property
    def C(self) -> Tensor:
        return self.frames[..., :1, :]

    @property
    def F(self) -> Tensor:
        return self.frames[..., 1 : 1 + self.n_f, :]

    @property
    def E(self) -> Tensor:
        return self.frames[..., 1 + self.n_f :, :]


def local_frame_attention(state: VisualLayerState, params: AttentionParams, frame: int | None = None) -> Tensor:
    """Attention output at the ``[C, F, E]`` positions.

    Queries are the frame's own tokens; keys and values are ``[G, C, F, E]``
    with G repeated for every frame (or just the frame's tokens if G is
    None). With ``frame`` set only that frame is computed.
    """
    x = state.frames
    if frame is not None:
        if not 0 <= frame < state.t:
            raise IndexError(f"frame {frame} outside [0, {state.t})")
        x = x[..., frame, :, :]
    if state.G is None:
        kv = x
    else:
        g = state.G
        if frame is None:
            g = T.broadcast_to(g.reshape(*g.shape[:-2], 1, *g.shape[-2:]), (*x.shape[:-2], *g.shape[-2:]))
        kv = T.concat([g, x], axis=-2)
    return multi_head_attention(x, kv, params)


def global_video_attention(state: VisualLayerState, params: AttentionParams, return_weights: bool = False):
    """G queries ``[G, C_1, F_1, E_1, ..., C_t, F_t, E_t]``."""
    if state.G is None:
        raise ValueError("global attention needs global prompts")
    x = state.frames
    *lead, t, n, d = x.shape
    kv = T.concat([state.G, x.reshape(*lead, t * n, d)], axis=-2)
    return multi_head_attention(state.G, kv, params, return_weights=return_weights)


def attention_params(cfg: ModelConfig, backbone: FrozenBackbone, bank, i: int) -> tuple[AttentionParams, AttentionParams | None]:
    """(local, global) attention weights for visual layer ``i``.

    Shared mode returns the same frozen object twice.
    """
    local = backbone.visual_blocks[i].attn
    if not cfg.has_global:
        return local, None
    if cfg.attn_mode == "global_local_unshared":
        return local, bank.global_attention(i)
    return local, local


def insert_frame_prompts(frames: Tensor, f: Tensor | None) -> Tensor:
    """``[C, E]`` -> ``[C, F, E]`` with ``f`` replicated to every frame."""
    if f is None or f.shape[0] == 0:
        return frames
    *lead, _, d = frames.shape
    fb = T.broadcast_to(f, (*lead, *f.shape))
    return T.concat([frames[..., :1, :], fb, frames[..., 1:, :]], axis=-2)


def visual_layer_forward(
    state: VisualLayerState,
    i: int,
    backbone: FrozenBackbone,
    bank=None,
    frame_prompts: Tensor | None = None,
    trace: list | None = None,
) -> VisualLayerState:
    """Run visual layer ``i`` (0-based) on a ``[C, E]`` state.

    ``frame_prompts`` (n_f, d_v) are inserted for this layer and their output
    positions dropped afterwards. When ``trace`` is a list, the global
    attention probabilities (..., H, n_g, keys) are appended to it.
    """
    cfg = backbone.config
    if state.n_f:
        raise ShapeError("visual_layer_forward expects a state without frame prompts")
    blk = backbone.visual_blocks[i]
    local_p, global_p = attention_params(cfg, backbone, bank, i)
    use_f = cfg.frame_prompts_in_video and frame_prompts is not None
    x = insert_frame_prompts(state.frames, frame_prompts if use_f else None)
    n_f = frame_prompts.shape[0] if use_f else 0

    hx = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
    G = state.G if cfg.has_global else None
    hg = T.layer_norm(G, blk.ln1_g, blk.ln1_b) if G is not None else None
    g_in_local = cfg.attn_mode in ("global_local_shared", "global_local_unshared")

    a_local = local_frame_attention(VisualLayerState(hx, hg if g_in_local else None, n_f), local_p)
    x = x + a_local
    x = x + mlp(T.layer_norm(x, blk.ln2_g, blk.ln2_b), blk)

    if G is not None:
        a_glob, w = global_video_attention(VisualLayerState(hx, hg, n_f), global_p, return_weights=True)
        if trace is not None:
            trace.append(w.data)
        G = G + a_glob
        G = G + mlp(T.layer_norm(G, blk.ln2_g, blk.ln2_b), blk)

    if n_f:
        x = T.concat([x[..., :1, :], x[..., 1 + n_f :, :]], axis=-2)
    return VisualLayerState(x, G, 0)


def _pool(tokens: Tensor, backbone: FrozenBackbone) -> Tensor:
    """Final LN per token, then mean over the token axis."""
    h = T.layer_norm(tokens, backbone["visual.ln_post.g"], backbone["visual.ln_post.b"])
    return T.mean(h, axis=-2)


def video_representation(state: VisualLayerState, mode: str, backbone: FrozenBackbone) -> Tensor:
    """Pool the final state to one (..., d_joint) vector (not normalized)."""
    proj = backbone["visual.proj"]
    needs_g = mode in ("first_global", "avg_global", "avg_global_local")
    if needs_g and (state.G is None or state.G.shape[-2] == 0):
        raise ValueError(f"visual_output={mode} needs global prompts")
    if mode == "first_global":
        return backbone.visual_feature(state.G[..., 0, :])
    cls = state.frames[..., 0, :]
    if mode == "avg_global":
        pooled = _pool(state.G, backbone)
    elif mode == "avg_local":
        pooled = _pool(cls, backbone)
    elif mode == "avg_global_local":
        pooled = T.scale(_pool(state.G, backbone) + _pool(cls, backbone), 0.5)
    else:
        raise ValueError(f"unknown visual_output {mode!r}")
    return pooled @ proj


def attention_rows(weights: np.ndarray, t: int, n_f: int, P: int, n_g: int):
    """Yield ``(frame, key_type, key_index, weight)`` for one (n_keys,) probability row.

    Global-prompt keys carry frame ``-1``.
    """
    weights = np.asarray(weights)
    per = 1 + n_f + P
    if weights.shape != (n_g + t * per,):
        raise ShapeError(f"weight row of length {weights.shape}, expected {n_g + t * per}")
    for j in range(n_g):
        yield -1, "global", j, float(weights[j])
    for k in range(t):
        base = n_g + k * per
        for j in range(per):
            if j == 0:
                kind, idx = "cls", 0
            elif j <= n_f:
                kind, idx = "frame_prompt", j - 1
            else:
                kind, idx = "patch", j - 1 - n_f
            yield k, kind, idx, float(weights[base + j])
