"""Trainable prompt parameters and the local prompt generators.

A :class:`PromptBank` owns every tensor that the optimizer updates. For each
layer it produces text prefix/postfix prompts and frame prompts from one
shared latent source:

* ``linear`` / ``v_to_t``: frame prompts are the latents; two projections
  shared by all layers map them to text width.
* ``linear`` / ``t_to_v``: the mirror image, latents live at text width.
* ``transformer``: per-layer unified prompts go through one shared
  transformer layer, and the text rows through a width-adjusting MLP.
* ``none``: independent prompts per modality (no generator).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import storage
from . import tensor as T
from .backbone import block_shapes, make_block, transformer_block
from .config import ModelConfig
from .tensor import Tensor

MAGIC = b"DGLP"
PROMPT_STD = 0.02
ATTN_KEYS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")


class GeneratorModeError(RuntimeError):
    pass


@dataclass
class GeneratedPrompts:
    """Prompts for one layer; absent parts are ``None``."""

    t_pre: Tensor | None
    t_post: Tensor | None
    f: Tensor | None


def prompt_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every trainable tensor for ``cfg``."""
    N, dv, dt = cfg.N, cfg.d_v, cfg.d_t
    post = cfg.use_post
    shapes: dict[str, tuple] = {}
    if cfg.generator == "linear" and cfg.projection_direction == "v_to_t":
        shapes["frame_prompts"] = (N, cfg.n_f, dv)
        shapes["linear_pre.w"] = (dv, dt)
        shapes["linear_pre.b"] = (dt,)
        if post:
            shapes["linear_post.w"] = (dv, dt)
            shapes["linear_post.b"] = (dt,)
    elif cfg.generator == "linear":
        shapes["text_pre"] = (N, cfg.n_pre, dt)
        if post:
            shapes["text_post"] = (N, cfg.n_post, dt)
        shapes["proj_pre.w"] = (dt, dv)
        shapes["proj_pre.b"] = (dv,)
        if post:
            shapes["proj_post.w"] = (dt, dv)
            shapes["proj_post.b"] = (dv,)
    elif cfg.generator == "transformer":
        shapes["unified_prompts"] = (N, cfg.n_pre + cfg.n_post_used + cfg.n_f, dv)
        shapes.update(block_shapes("gen", dv))
        shapes["text_adjust.w1"] = (dv, dv)
        shapes["text_adjust.b1"] = (dv,)
        shapes["text_adjust.w2"] = (dv, dt)
        shapes["text_adjust.b2"] = (dt,)
    else:
        if cfg.frame_prompts_in_video:
            shapes["frame_prompts"] = (N, cfg.n_f, dv)
        if cfg.n_pre:
            shapes["text_pre"] = (N, cfg.n_pre, dt)
        if cfg.n_post_used:
            shapes["text_post"] = (N, cfg.n_post, dt)
    if cfg.has_global:
        shapes["global_prompts"] = (cfg.n_g, dv)
    if cfg.attn_mode == "global_local_unshared":
        for i in range(N):
            for k in ATTN_KEYS:
                shapes[f"global_attn.{i}.{k}"] = (dv,) if k.startswith("b_") else (dv, dv)
    if cfg.train_logit_scale:
        shapes["logit_scale"] = ()
    return shapes


def trainable_param_count(cfg_or_bank) -> int:
    """Exact number of trainable scalars, from a config or a built bank."""
    if isinstance(cfg_or_bank, PromptBank):
        return sum(t.size for t in cfg_or_bank.params.values())
    return sum(math.prod(s) for s in prompt_shapes(cfg_or_bank).values())


class PromptBank:
    """All trainable tensors, keyed by name, each with ``requires_grad=True``.

    Tensors copied from the frozen backbone (unshared attention weights, a
    trainable logit scale) need ``backbone``.
    """

    def __init__(self, cfg: ModelConfig, backbone=None, seed: int | None = None):
        self.config = cfg
        seed = cfg.seed if seed is None else seed
        rng = np.random.default_rng([seed, 1])
        self.params: dict[str, Tensor] = {}
        for name, shape in prompt_shapes(cfg).items():
            if name.startswith("global_attn.") or name == "logit_scale":
                if backbone is None:
                    raise ValueError(f"{name} is initialized from the backbone; pass backbone=")
                if name == "logit_scale":
                    src = backbone["logit_scale"]
                else:
                    _, i, k = name.split(".")
                    src = backbone[f"visual.{i}.attn.{k}"]
                value = np.array(src.data)
            else:
                leaf = name.rsplit(".", 1)[-1]
                if leaf == "g":
                    value = np.ones(shape)
                elif leaf.startswith("b"):
                    value = np.zeros(shape)
                else:
                    value = rng.normal(0.0, PROMPT_STD, size=shape)
            self.params[name] = Tensor(value, requires_grad=True)
        self._gen_block = make_block(self.params, "gen", cfg.H_v) if cfg.generator == "transformer" else None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # --- generation -------------------------------------------------------

    def generate(self, i: int) -> GeneratedPrompts:
        """Prompts for layer ``i`` (0-based) under the configured generator."""
        cfg = self.config
        if cfg.generator == "linear":
            if cfg.projection_direction == "v_to_t":
                return generate_linear(self, i)
            return reverse_direction(self, i)
        if cfg.generator == "transformer":
            return generate_transformer(self, i)
        return generate_divided(self, i)

    def global_attention(self, i: int):
        """Trainable attention copy for the global path (unshared mode only)."""
        from .backbone import AttentionParams

        p = self.params
        return AttentionParams(*(p[f"global_attn.{i}.{k}"] for k in ATTN_KEYS), heads=self.config.H_v)

    # --- persistence ------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"state keys {sorted(state)} != bank keys {sorted(self.params)}")
        for k, v in state.items():
            v = np.array(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v

    def save(self, path) -> None:
        storage.write_file(path, MAGIC, {"config_sha256": self.config.digest()}, self.state_dict())

    def load(self, path) -> None:
        fields, arrays = storage.read_file(path, MAGIC)
        if fields.get("config_sha256") != self.config.digest():
            raise ValueError("checkpoint was written for a different model config")
        self.load_state_dict(arrays)


def _check_layer(bank: PromptBank, i: int) -> None:
    if not 0 <= i < bank.config.N:
        raise IndexError(f"layer {i} outside [0, {bank.config.N})")


def generate_linear(bank: PromptBank, i: int) -> GeneratedPrompts:
    """F_i is the latent; T_pre = F_i W_pre + b_pre, T_post = F_i W_post + b_post."""
    cfg = bank.config
    if cfg.generator != "linear" or cfg.projection_direction != "v_to_t":
        raise GeneratorModeError("generate_linear needs generator=linear, projection_direction=v_to_t")
    _check_layer(bank, i)
    f = bank["frame_prompts"][i]
    t_pre = f @ bank["linear_pre.w"] + bank["linear_pre.b"]
    t_post = f @ bank["linear_post.w"] + bank["linear_post.b"] if cfg.use_post else None
    return GeneratedPrompts(t_pre, t_post, f)


def reverse_direction(bank: PromptBank, i: int) -> GeneratedPrompts:
    """Text latents are used directly; F_i = T_pre A + a (+ T_post B + b)."""
    cfg = bank.config
    if cfg.generator != "linear" or cfg.projection_direction != "t_to_v":
        raise GeneratorModeError("reverse_direction needs generator=linear, projection_direction=t_to_v")
    _check_layer(bank, i)
    t_pre = bank["text_pre"][i]
    f = t_pre @ bank["proj_pre.w"] + bank["proj_pre.b"]
    t_post = None
    if cfg.use_post:
        t_post = bank["text_post"][i]
        f = f + (t_post @ bank["proj_post.w"] + bank["proj_post.b"])
    return GeneratedPrompts(t_pre, t_post, f)


def generate_transformer(bank: PromptBank, i: int) -> GeneratedPrompts:
    """One shared transformer layer over U_i, split into (pre, post, frame) rows."""
    cfg = bank.config
    if cfg.generator != "transformer":
        raise GeneratorModeError("generate_transformer needs generator=transformer")
    _check_layer(bank, i)
    u = transformer_block(bank["unified_prompts"][i], bank._gen_block)
    a, b = cfg.n_pre, cfg.n_pre + cfg.n_post_used
    t_pre = t_post = None
    if b:
        text = T.gelu(u[:b] @ bank["text_adjust.w1"] + bank["text_adjust.b1"])
        text = text @ bank["text_adjust.w2"] + bank["text_adjust.b2"]
        t_pre = text[:a] if a else None
        t_post = text[a:b] if cfg.n_post_used else None
    f = u[b:] if cfg.n_f else None
    return GeneratedPrompts(t_pre, t_post, f)


def generate_divided(bank: PromptBank, i: int) -> GeneratedPrompts:
    """Independent per-modality prompts (no shared latent space)."""
    _check_layer(bank, i)
    p = bank.params
    return GeneratedPrompts(
        p["text_pre"][i] if "text_pre" in p else None,
        p["text_post"][i] if "text_post" in p else None,
        p["frame_prompts"][i] if "frame_prompts" in p else None,
    )
