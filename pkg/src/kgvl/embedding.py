"""Input embeddings: token + segment + position + visual feature, summed per element."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .pipeline import CLS, SEP, EnrichedSequence, InstanceError, Kind

GEO_BASE = 1000.0


class Vocab:
    """Surface → row id. Row 0 is reserved for out-of-vocabulary surfaces."""

    def __init__(self, surfaces: Iterable[str]):
        self.surfaces: list[str] = []
        self._ids: dict[str, int] = {}
        for s in surfaces:
            if s not in self._ids:
                self._ids[s] = len(self.surfaces) + 1
                self.surfaces.append(s)

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]]) -> "Vocab":
        words = set()
        for toks in token_lists:
            words.update(toks)
        words -= {CLS, SEP}
        return cls([CLS, SEP, *sorted(words)])

    def __len__(self):
        """Number of table rows, OOV row included."""
        return len(self.surfaces) + 1

    def __contains__(self, surface):
        return surface in self._ids

    def id(self, surface: str) -> int:
        return self._ids.get(surface, 0)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.surfaces:
                fh.write(s + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def geo_embed(bbox, width: float, height: float, d: int) -> np.ndarray:
    """Sinusoidal lift of the normalized box corners to ``d`` dims.

    Each of the four normalized coordinates gets ``d/8`` sines followed by
    ``d/8`` cosines at wavelengths spaced geometrically with base 1000.
    """
    if d % 8:
        raise ValueError(f"geometry embedding size must be divisible by 8, got {d}")
    x1, y1, x2, y2 = bbox
    v = np.array([x1 / width, y1 / height, x2 / width, y2 / height], dtype=np.float64)
    m = d // 8
    freqs = GEO_BASE ** (-np.arange(m) / m)
    ang = v[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).reshape(d)


@dataclass
class EmbedTables:
    token_table: np.ndarray  # (|vocab|, d), row 0 = OOV
    segment_table: np.ndarray  # (3, d)
    position_table: np.ndarray  # (P_max, d)
    img_token_row: np.ndarray  # (d,)
    appearance_proj: np.ndarray  # (d_app, d)

    @property
    def d(self) -> int:
        return self.token_table.shape[1]

    @property
    def p_max(self) -> int:
        return self.position_table.shape[0]

    @classmethod
    def from_params(cls, params: dict) -> "EmbedTables":
        return cls(params["tok"], params["seg"], params["pos"], params["img"], params["app"])


@dataclass
class Encoded:
    """Index form of an EnrichedSequence, ready for table lookups."""

    tok: np.ndarray  # (n,) vocab rows; ignored for Img tokens
    seg: np.ndarray  # (n,)
    pos: np.ndarray  # (n,)
    is_img: np.ndarray  # (n,) bool
    app: np.ndarray  # (n, d_app) appearance vector feeding the projection
    geo: np.ndarray  # (n, d) fixed geometry term, zero for non-Img rows
    visible: np.ndarray  # (n, n) bool

    @property
    def n(self) -> int:
        return self.tok.shape[0]


def encode(seq: EnrichedSequence, vocab: Vocab, d: int, p_max: int) -> Encoded:
    n = len(seq)
    rel = seq.rel_pos
    if n and rel.max() >= p_max:
        raise InstanceError(f"position {int(rel.max())} exceeds position table size {p_max}")
    if not seq.regions:
        raise InstanceError("sequence has no regions; the full-image region is required")
    width, height = seq.image_size
    whole = seq.regions[0].appearance
    app = np.empty((n, whole.shape[0]))
    geo = np.zeros((n, d))
    is_img = np.zeros(n, dtype=bool)
    tok = np.zeros(n, dtype=np.int64)
    r = 0
    for i, t in enumerate(seq.tokens):
        if t.kind is Kind.IMG:
            region = seq.regions[r]
            r += 1
            is_img[i] = True
            app[i] = region.appearance
            geo[i] = geo_embed(region.bbox, width, height, d)
        else:
            tok[i] = vocab.id(t.surface)
            app[i] = whole
    return Encoded(tok, seq.segments, rel, is_img, app, geo, seq.visible.bits.copy())


def embed_encoded(enc: Encoded, tables: EmbedTables) -> np.ndarray:
    word = np.where(enc.is_img[:, None], tables.img_token_row[None, :], tables.token_table[enc.tok])
    return (
        word
        + tables.segment_table[enc.seg]
        + tables.position_table[enc.pos]
        + enc.app @ tables.appearance_proj
        + enc.geo
    )


def embed(seq: EnrichedSequence, tables: EmbedTables, vocab: Vocab) -> np.ndarray:
    """Input matrix (n, d) for the encoder, one row per sequence element.

    Text and special tokens take the whole-image appearance (``regions[0]``)
    as their visual term; Img tokens take their own region's appearance plus
    the geometry embedding of its box.
    """
    enc = encode(seq, vocab, tables.d, tables.p_max)
    return embed_encoded(enc, tables)


def init_tables(rng: np.random.Generator, n_vocab: int, d: int, p_max: int, d_app: int,
                scale: float = 0.02) -> dict:
    u = lambda *shape: rng.uniform(-scale, scale, size=shape)
    return {
        "tok": u(n_vocab, d),
        "seg": u(3, d),
        "pos": u(p_max, d),
        "img": u(d),
        "app": u(d_app, d),
    }
