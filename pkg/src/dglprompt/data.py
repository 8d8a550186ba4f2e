"""Synthetic paired caption/video data and its file format.

Each pair has a class ``c`` and a latent code ``z`` in {-1, +1}^latent_dim.
Captions spell out the bits of ``c`` and ``z`` as tokens. Every video frame
carries the class as a sum of signed per-bit patterns, plus a linear map of
``z``, a slot-dependent neutral pattern and Gaussian noise; frames are then
shuffled. The class is therefore readable from the unordered set of frames,
which suits an encoder without temporal position embeddings.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import storage
from .model import EOT_ID, PAD_ID, SOT_ID, RetrievalBatch

MAGIC = b"DGLD"
RESERVED = 3  # pad, start, end


@dataclass(frozen=True)
class SyntheticSpec:
    n_pairs: int = 64
    n_classes: int = 8
    latent_dim: int = 3
    noise_std: float = 0.5
    V: int = 64
    L: int = 8
    t: int = 4
    P: int = 4
    raw_dim: int = 16
    neutral_amp: float = 0.3
    max_filler: int = 0
    seed: int = 0

    @property
    def class_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.n_classes)))

    @property
    def content_tokens(self) -> int:
        return 2 * (self.latent_dim + self.class_bits)

    def validate(self) -> None:
        if self.n_classes < 1 or self.n_pairs < 2 * self.n_classes:
            raise ValueError("need n_pairs >= 2 * n_classes")
        if self.n_classes > self.V - RESERVED:
            raise ValueError("n_classes exceeds the non-reserved vocabulary")
        if RESERVED + self.content_tokens > self.V:
            raise ValueError(f"vocabulary V={self.V} too small for the class and latent codebooks")
        if self.max_filler and RESERVED + self.content_tokens >= self.V:
            raise ValueError("no vocabulary left for filler tokens")
        need = 2 + self.class_bits + self.latent_dim + self.max_filler
        if need > self.L:
            raise ValueError(f"captions need {need} tokens but L={self.L}")
        if self.noise_std < 0 or self.latent_dim < 0:
            raise ValueError("noise_std and latent_dim must be nonnegative")


@dataclass
class Dataset:
    batch: RetrievalBatch
    labels: np.ndarray
    codes: np.ndarray

    def __len__(self) -> int:
        return len(self.batch)


def _codebooks(spec: SyntheticSpec, rng: np.random.Generator) -> dict:
    shape = (spec.P, spec.raw_dim)
    return {
        "class_patterns": rng.normal(size=(spec.class_bits, *shape)),
        "z_map": rng.normal(size=(spec.latent_dim, *shape)),
        "neutral": rng.normal(size=shape),
    }


def _split(spec: SyntheticSpec, books: dict, rng: np.random.Generator) -> Dataset:
    n, nb, lat = spec.n_pairs, spec.class_bits, spec.latent_dim
    cells = np.arange(n)
    labels = cells % spec.n_classes
    code_ids = (cells // spec.n_classes) % (2**lat)
    order = rng.permutation(n)
    labels, code_ids = labels[order], code_ids[order]

    cbits = (labels[:, None] >> np.arange(nb)) & 1
    zbits = (code_ids[:, None] >> np.arange(lat)) & 1
    z = 2.0 * zbits - 1.0

    captions = np.full((n, spec.L), PAD_ID, dtype=np.int64)
    eot = np.zeros(n, dtype=np.int64)
    filler_lo = RESERVED + spec.content_tokens
    for i in range(n):
        toks = [SOT_ID]
        toks += [RESERVED + 2 * lat + 2 * b + cbits[i, b] for b in range(nb)]
        toks += [RESERVED + 2 * j + zbits[i, j] for j in range(lat)]
        if spec.max_filler:
            k = rng.integers(0, spec.max_filler + 1)
            toks += rng.integers(filler_lo, spec.V, size=k).tolist()
        toks.append(EOT_ID)
        captions[i, : len(toks)] = toks
        eot[i] = len(toks) - 1

    slots = np.arange(1, spec.t + 1)[:, None, None] / spec.t
    neutral = spec.neutral_amp * slots * books["neutral"]
    signs = 2.0 * cbits - 1.0
    cls = np.einsum("nb,bpr->npr", signs, books["class_patterns"])
    zz = np.einsum("nl,lpr->npr", z, books["z_map"])
    videos = np.empty((n, spec.t, spec.P, spec.raw_dim))
    for i in range(n):
        frames = neutral + cls[i] + zz[i]
        videos[i] = frames[rng.permutation(spec.t)] + spec.noise_std * rng.normal(size=frames.shape)
    return Dataset(RetrievalBatch(captions, videos, eot), labels, code_ids)


def generate_splits(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Train and validation splits drawn with shared codebooks."""
    spec.validate()
    book_ss, train_ss, val_ss = np.random.SeedSequence(spec.seed).spawn(3)
    books = _codebooks(spec, np.random.default_rng(book_ss))
    return (
        _split(spec, books, np.random.default_rng(train_ss)),
        _split(spec, books, np.random.default_rng(val_ss)),
    )


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    return generate_splits(spec)[0]


# --- files -----------------------------------------------------------------


def save_dataset(path, ds: Dataset, spec: SyntheticSpec) -> None:
    """Binary container plus a ``.jsonl`` caption sidecar next to it."""
    header = {k: v for k, v in asdict(spec).items()}
    storage.write_file(
        path, MAGIC, header,
        {
            "videos": ds.batch.videos,
            "captions": ds.batch.captions,
            "eot": ds.batch.eot,
            "labels": ds.labels,
            "codes": ds.codes,
        },
    )
    with open(str(path) + ".jsonl", "w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            toks = ds.batch.captions[i, : ds.batch.eot[i] + 1].tolist()
            fh.write(json.dumps({"id": i, "class": int(ds.labels[i]), "tokens": toks}) + "\n")


def load_dataset(path) -> tuple[Dataset, SyntheticSpec]:
    header, arrays = storage.read_file(path, MAGIC)
    kw = {}
    for f in fields(SyntheticSpec):
        value = header[f.name]
        kw[f.name] = float(value) if f.type in ("float", float) else int(value)
    spec = SyntheticSpec(**kw)
    batch = RetrievalBatch(arrays["captions"], arrays["videos"], arrays["eot"])
    return Dataset(batch, arrays["labels"], arrays["codes"]), spec
