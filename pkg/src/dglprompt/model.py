"""The full prompt-tuned dual encoder, similarity and contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import VisualLayerState, video_representation, visual_layer_forward
from .backbone import FrozenBackbone, init_backbone
from .config import ModelConfig
from .prompts import GeneratedPrompts, PromptBank
from .tensor import ShapeError, Tensor

PAD_ID, SOT_ID, EOT_ID = 0, 1, 2


def find_eot(captions) -> np.ndarray:
    """Index of the last non-pad token per row; that token must be EOT."""
    captions = np.asarray(captions)
    nonpad = captions != PAD_ID
    if not nonpad.any(axis=-1).all():
        raise ValueError("caption without any tokens")
    last = captions.shape[-1] - 1 - np.argmax(nonpad[..., ::-1], axis=-1)
    rows = np.take_along_axis(captions, last[..., None], axis=-1)[..., 0]
    if np.any(rows != EOT_ID):
        bad = np.flatnonzero(rows != EOT_ID)
        raise ValueError(f"captions {bad.tolist()} do not end with EOT")
    return last


@dataclass
class RetrievalBatch:
    """B paired captions (token ids, pad 0) and videos (B, t, P, raw_dim)."""

    captions: np.ndarray
    videos: np.ndarray
    eot: np.ndarray | None = None

    def __post_init__(self):
        self.captions = np.asarray(self.captions, dtype=np.int64)
        self.videos = np.asarray(self.videos, dtype=np.float64)
        if self.captions.shape[0] != self.videos.shape[0]:
            raise ShapeError(f"{self.captions.shape[0]} captions vs {self.videos.shape[0]} videos")
        if self.eot is None:
            self.eot = find_eot(self.captions)
        self.eot = np.asarray(self.eot, dtype=np.int64)

    def __len__(self) -> int:
        return self.captions.shape[0]

    def subset(self, idx) -> "RetrievalBatch":
        idx = np.asarray(idx)
        return RetrievalBatch(self.captions[idx], self.videos[idx], self.eot[idx])


def similarity(tfeat: Tensor, vfeat: Tensor, logit_scale=0.0) -> Tensor:
    """S[i, j] = exp(logit_scale) * <text_i, video_j>; rows are texts."""
    cos = tfeat @ vfeat.T
    if isinstance(logit_scale, Tensor):
        return T.mul(T.exp(logit_scale), cos)
    return T.scale(cos, float(np.exp(logit_scale)))


def symmetric_ce_loss(S: Tensor) -> Tensor:
    """Mean of text->video and video->text in-batch cross-entropy."""
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"similarity must be square, got {S.shape}")
    target = np.arange(S.shape[0])
    return T.scale(T.cross_entropy(S, target) + T.cross_entropy(S.T, target), 0.5)


class DGLModel:
    """Frozen backbone plus prompt bank."""

    def __init__(self, cfg: ModelConfig, backbone: FrozenBackbone | None = None, bank: PromptBank | None = None):
        self.config = cfg
        self.backbone = backbone if backbone is not None else init_backbone(cfg)
        if self.backbone.config != cfg:
            raise ValueError("backbone was built for a different config")
        self.bank = bank if bank is not None else PromptBank(cfg, self.backbone)

    @property
    def logit_scale(self) -> Tensor:
        if "logit_scale" in self.bank:
            return self.bank["logit_scale"]
        return self.backbone.logit_scale

    def trainable(self) -> dict[str, Tensor]:
        return self.bank.named_parameters()

    def prompts(self) -> list[GeneratedPrompts]:
        return [self.bank.generate(i) for i in range(self.config.N)]

    def encode_text(self, captions, eot=None, prompts: list[GeneratedPrompts] | None = None) -> Tensor:
        """(B, L) token ids -> (B, d_joint) unit rows."""
        captions = np.asarray(captions)
        eot = find_eot(captions) if eot is None else np.asarray(eot)
        prompts = self.prompts() if prompts is None else prompts
        bb, cfg = self.backbone, self.config
        B = captions.shape[0]
        x = bb.embed_text(captions)
        for i in range(cfg.N):
            pr = prompts[i]
            parts, a = [], 0
            if pr.t_pre is not None:
                parts.append(T.broadcast_to(pr.t_pre, (B, *pr.t_pre.shape)))
                a = pr.t_pre.shape[0]
            parts.append(x)
            if pr.t_post is not None and cfg.use_post:
                parts.append(T.broadcast_to(pr.t_post, (B, *pr.t_post.shape)))
            seq = T.concat(parts, axis=1) if len(parts) > 1 else x
            out = bb.text_layer(i, seq)
            x = out[:, a : a + cfg.L] if len(parts) > 1 else out
        return T.l2_normalize(bb.text_feature(x, eot))

    def encode_video(self, videos, prompts: list[GeneratedPrompts] | None = None, trace: list | None = None) -> Tensor:
        """(B, t, P, raw_dim) patches -> (B, d_joint) unit rows."""
        prompts = self.prompts() if prompts is None else prompts
        bb, cfg = self.backbone, self.config
        tokens = bb.embed_video(videos)
        G = None
        if cfg.has_global:
            g = self.bank["global_prompts"]
            G = T.broadcast_to(g, (*tokens.shape[:-3], *g.shape))
        state = VisualLayerState(tokens, G, 0)
        for i in range(cfg.N):
            state = visual_layer_forward(state, i, bb, self.bank, prompts[i].f, trace)
        return T.l2_normalize(video_representation(state, cfg.effective_visual_output, bb))

    def similarity(self, batch: RetrievalBatch, scaled: bool = True) -> Tensor:
        prompts = self.prompts()
        tf = self.encode_text(batch.captions, batch.eot, prompts)
        vf = self.encode_video(batch.videos, prompts)
        return similarity(tf, vf, self.logit_scale if scaled else 0.0)

    def loss(self, batch: RetrievalBatch) -> Tensor:
        return symmetric_ce_loss(self.similarity(batch))

    def embed(self, batch: RetrievalBatch, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Untaped text and video embeddings for a whole split."""
        texts, vids = [], []
        prompts = self.prompts()
        for s in range(0, len(batch), chunk):
            sl = slice(s, s + chunk)
            texts.append(self.encode_text(batch.captions[sl], batch.eot[sl], prompts).data)
            vids.append(self.encode_video(batch.videos[sl], prompts).data)
        return np.concatenate(texts), np.concatenate(vids)
