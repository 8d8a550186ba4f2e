"""Retrieval metrics: recall at K and mean rank."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KS = (1, 5, 10)


@dataclass
class RetrievalMetrics:
    r_at: dict[int, float] = field(default_factory=dict)
    mnr: float = float("nan")
    direction: str = "t2v"

    def __str__(self) -> str:
        rs = " ".join(f"R@{k}={v:.3f}" for k, v in sorted(self.r_at.items()))
        return f"{self.direction} {rs} MnR={self.mnr:.3f}"


def ranks(S) -> np.ndarray:
    """Rank of the diagonal item in each row; ties resolve in its favour."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity must be square, got shape {S.shape}")
    diag = np.diag(S)[:, None]
    return 1 + np.sum(S > diag, axis=1)


def compute_metrics(S, direction: str = "t2v", ks=KS) -> RetrievalMetrics:
    """Rows of S are text queries; ``v2t`` ranks over the transpose."""
    S = np.asarray(S, dtype=np.float64)
    if direction == "v2t":
        S = S.T
    elif direction != "t2v":
        raise ValueError(f"direction must be t2v or v2t, got {direction!r}")
    r = ranks(S)
    return RetrievalMetrics({k: float(np.mean(r <= k)) for k in ks}, float(np.mean(r)), direction)
