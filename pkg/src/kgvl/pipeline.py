"""Turn a (query, response, regions) triple into a knowledge-enriched sequence.

Layout is ``[CLS] q.. [SEP] r.. [SEP] img.. [SEP]``. Each eligible text token
is followed by the tokens of its top-k related entities. Injected tokens keep
the original sentence's position numbering intact and are only visible to
their anchor and to other tokens injected at the same anchor.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .kb import DEFAULT_STOPLIST, KnowledgeBase, query_entities

CLS, SEP, IMG = "[CLS]", "[SEP]", "[IMG]"
SEG_QUERY, SEG_RESPONSE, SEG_ROI = 0, 1, 2
POSITION_MODES = ("relative", "absolute", "anchor")

_PUNCT = re.compile(r"[^\w\s]+")


class InstanceError(ValueError):
    """An instance that cannot be turned into a model input."""


class Kind(str, Enum):
    TEXT = "text"
    IMG = "img"
    CLS = "cls"
    SEP = "sep"


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub("", text.lower()).split()


@dataclass
class Region:
    bbox: tuple[float, float, float, float]
    appearance: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        if len(self.bbox) != 4:
            raise InstanceError(f"bbox needs 4 numbers, got {len(self.bbox)}")
        if self.appearance.ndim != 1:
            raise InstanceError("appearance must be a flat vector")

    def check(self, width: float, height: float, d_app: int | None = None):
        x1, y1, x2, y2 = self.bbox
        if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
            raise InstanceError(f"bbox {self.bbox} outside image {width}x{height} or degenerate")
        if d_app is not None and self.appearance.shape[0] != d_app:
            raise InstanceError(
                f"appearance has dimension {self.appearance.shape[0]}, expected {d_app}"
            )


@dataclass(frozen=True)
class SeqToken:
    surface: str
    kind: Kind
    segment: int
    rel_pos: int
    anchor: int | None = None  # None for Original tokens

    @property
    def injected(self) -> bool:
        return self.anchor is not None


@dataclass
class VisibleMatrix:
    bits: np.ndarray  # (n, n) bool, bits[i, j] == w_j visible to w_i

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def all_visible(cls, n: int) -> "VisibleMatrix":
        return cls(np.ones((n, n), dtype=bool))

    @classmethod
    def from_anchors(cls, anchors: Sequence[int | None]) -> "VisibleMatrix":
        a = np.array([-1 if x is None else x for x in anchors], dtype=np.int64)
        n = len(a)
        idx = np.arange(n)
        orig = a < 0
        bits = orig[:, None] & orig[None, :]
        bits |= idx[:, None] == idx[None, :]
        bits |= a[:, None] == idx[None, :]
        bits |= idx[:, None] == a[None, :]
        bits |= (a[:, None] == a[None, :]) & ~orig[:, None]
        return cls(bits)

    def rows(self) -> list[str]:
        return ["".join("1" if b else "0" for b in row) for row in self.bits]


@dataclass
class EnrichedSequence:
    tokens: list[SeqToken]
    visible: VisibleMatrix
    regions: list[Region] = field(default_factory=list)
    image_size: tuple[float, float] = (1.0, 1.0)

    def __len__(self):
        return len(self.tokens)

    @property
    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    @property
    def rel_pos(self) -> np.ndarray:
        return np.array([t.rel_pos for t in self.tokens], dtype=np.int64)

    @property
    def segments(self) -> np.ndarray:
        return np.array([t.segment for t in self.tokens], dtype=np.int64)

    @property
    def anchors(self) -> list[int | None]:
        return [t.anchor for t in self.tokens]

    def to_json(self) -> dict:
        return {
            "tokens": [
                {
                    "surface": t.surface,
                    "kind": t.kind.value,
                    "segment": "ABC"[t.segment],
                    "rel_pos": t.rel_pos,
                    "anchor": t.anchor,
                }
                for t in self.tokens
            ],
            "visible": self.visible.rows(),
            "image": {"width": self.image_size[0], "height": self.image_size[1]},
            "regions": [
                {"bbox": list(r.bbox), "label": r.label} for r in self.regions
            ],
        }


def image_size_from_regions(regions: Sequence[Region]) -> tuple[float, float]:
    if not regions:
        raise InstanceError("at least one region (the full image) is required")
    x1, y1, x2, y2 = regions[0].bbox
    if x1 != 0 or y1 != 0:
        raise InstanceError("first region must cover the full image")
    return (x2, y2)


def assemble(
    query: Sequence[str],
    response: Sequence[str],
    regions: Sequence[Region],
    kb: KnowledgeBase,
    k: int,
    stoplist=DEFAULT_STOPLIST,
    *,
    image_size: tuple[float, float] | None = None,
    d_app: int | None = None,
    position_mode: str = "relative",
    mask_off: bool = False,
) -> EnrichedSequence:
    """Build the enriched sequence and its visible matrix.

    ``regions[0]`` is the full-image region; when ``image_size`` is omitted
    it is read from that region's bbox. ``position_mode`` selects the
    numbering of injected tokens: ``relative`` (runs restart at anchor+1),
    ``absolute`` (plain sequence order) or ``anchor`` (injected tokens share
    the anchor's position). ``mask_off`` makes every token visible.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    if position_mode not in POSITION_MODES:
        raise ValueError(f"unknown position mode {position_mode!r}")
    if image_size is None:
        image_size = image_size_from_regions(regions)
    width, height = image_size
    for r in regions:
        r.check(width, height, d_app)
    if d_app is None and regions:
        dims = {r.appearance.shape[0] for r in regions}
        if len(dims) > 1:
            raise InstanceError(f"regions disagree on appearance dimension: {sorted(dims)}")

    tokens: list[SeqToken] = []
    pos = 0

    def original(surface, kind, segment):
        nonlocal pos
        tokens.append(SeqToken(surface, kind, segment, pos))
        pos += 1

    def text_span(words, segment):
        nonlocal pos
        for w in words:
            anchor_idx, anchor_pos = len(tokens), pos
            original(w, Kind.TEXT, segment)
            for entity, _ in query_entities(kb, w, k, stoplist) if k else ():
                for j, piece in enumerate(tokenize(entity), start=1):
                    tokens.append(SeqToken(piece, Kind.TEXT, segment, anchor_pos + j, anchor_idx))

    original(CLS, Kind.CLS, SEG_QUERY)
    text_span(query, SEG_QUERY)
    original(SEP, Kind.SEP, SEG_QUERY)
    text_span(response, SEG_RESPONSE)
    original(SEP, Kind.SEP, SEG_RESPONSE)
    n_img = len(regions)
    img_at = len(tokens)
    tokens.extend(SeqToken(IMG, Kind.IMG, SEG_ROI, -1) for _ in range(n_img))
    original(SEP, Kind.SEP, SEG_ROI)

    if position_mode == "absolute":
        counter = 0
        for i, t in enumerate(tokens):
            if t.kind is not Kind.IMG:
                tokens[i] = replace(t, rel_pos=counter)
                counter += 1
    elif position_mode == "anchor":
        for i, t in enumerate(tokens):
            if t.injected:
                tokens[i] = replace(t, rel_pos=tokens[t.anchor].rel_pos)

    img_pos = max(t.rel_pos for t in tokens if not t.injected and t.kind is not Kind.IMG) + 1
    for i in range(img_at, img_at + n_img):
        tokens[i] = replace(tokens[i], rel_pos=img_pos)

    anchors = [t.anchor for t in tokens]
    if mask_off:
        visible = VisibleMatrix.all_visible(len(tokens))
    else:
        visible = VisibleMatrix.from_anchors(anchors)
    return EnrichedSequence(tokens, visible, list(regions), (width, height))


def strip_injected(seq: EnrichedSequence) -> EnrichedSequence:
    """Drop injected tokens; remaining positions are kept as they were."""
    keep = [i for i, t in enumerate(seq.tokens) if not t.injected]
    tokens = [seq.tokens[i] for i in keep]
    return EnrichedSequence(
        tokens, VisibleMatrix.all_visible(len(tokens)), list(seq.regions), seq.image_size
    )
