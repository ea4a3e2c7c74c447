"""Embedding + encoder + linear [CLS] head, batched over padded sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .config import Config
from .embedding import EmbedTables, Encoded, Vocab, encode, init_tables
from .encoder import LAYER_KEYS, Encoder, init_layer, layer_norm, layer_norm_backward
from .kb import DEFAULT_STOPLIST, KnowledgeBase, load_stoplist
from .pipeline import InstanceError, assemble


@dataclass
class Batch:
    tok: np.ndarray  # (b, n)
    seg: np.ndarray
    pos: np.ndarray
    is_img: np.ndarray
    app: np.ndarray  # (b, n, d_app)
    geo: np.ndarray  # (b, n, d)
    visible: np.ndarray  # (b, n, n)
    valid: np.ndarray  # (b, n) real (non-padding) rows


def collate(items: list[Encoded]) -> Batch:
    b = len(items)
    n = max(e.n for e in items)
    d_app, d = items[0].app.shape[1], items[0].geo.shape[1]
    tok = np.zeros((b, n), dtype=np.int64)
    seg = np.zeros((b, n), dtype=np.int64)
    pos = np.zeros((b, n), dtype=np.int64)
    is_img = np.zeros((b, n), dtype=bool)
    app = np.zeros((b, n, d_app))
    geo = np.zeros((b, n, d))
    valid = np.zeros((b, n), dtype=bool)
    # padding rows see only themselves and are invisible to real rows
    visible = np.broadcast_to(np.eye(n, dtype=bool), (b, n, n)).copy()
    for i, e in enumerate(items):
        m = e.n
        tok[i, :m], seg[i, :m], pos[i, :m] = e.tok, e.seg, e.pos
        is_img[i, :m] = e.is_img
        app[i, :m], geo[i, :m] = e.app, e.geo
        visible[i, :m, :m] = e.visible
        valid[i, :m] = True
    return Batch(tok, seg, pos, is_img, app, geo, visible, valid)


def init_params(config: Config, n_vocab: int, rng: np.random.Generator | None = None) -> dict:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params = init_tables(rng, n_vocab, config.d, config.p_max, config.d_app, config.init_scale)
    params["emb_ln_g"] = np.ones(config.d)
    params["emb_ln_b"] = np.zeros(config.d)
    for i in range(config.layers):
        for key, arr in init_layer(rng, config.d, config.d_ff).items():
            params[f"layers.{i}.{key}"] = arr
    bound = 1.0 / np.sqrt(config.d)
    params["head.w"] = rng.uniform(-bound, bound, size=config.d)
    params["head.b"] = np.zeros(1)
    return params


class Model:
    def __init__(self, config: Config, vocab: Vocab, params: dict | None = None):
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else init_params(config, len(vocab))
        self.stoplist = load_stoplist(config.stoplist) if config.stoplist else DEFAULT_STOPLIST
        self.layers = [
            {key: self.params[f"layers.{i}.{key}"] for key in LAYER_KEYS}
            for i in range(config.layers)
        ]
        self.encoder = Encoder(self.layers, config.heads)
        self._cache = None

    @property
    def tables(self) -> EmbedTables:
        return EmbedTables.from_params(self.params)

    def sequence(self, query, response, regions, kb: KnowledgeBase, image_size=None, k=None):
        cfg = self.config
        return assemble(
            query, response, regions, kb, cfg.k if k is None else k, self.stoplist,
            image_size=image_size, d_app=cfg.d_app,
            position_mode=cfg.position_mode, mask_off=cfg.mask_off,
        )

    def encode_pair(self, inst, cand: int, kb: KnowledgeBase, k=None) -> Encoded:
        try:
            seq = self.sequence(inst.query, inst.responses[cand], inst.regions, kb,
                                inst.image_size, k)
            if len(seq) > self.config.max_seq:
                raise InstanceError(
                    f"sequence length {len(seq)} exceeds max_seq {self.config.max_seq}"
                )
            return encode(seq, self.vocab, self.config.d, self.config.p_max)
        except InstanceError as exc:
            raise InstanceError(f"{inst.id}: {exc}") from None

    # --- forward / backward ------------------------------------------------

    def embed_batch(self, b: Batch) -> np.ndarray:
        p = self.params
        word = np.where(b.is_img[..., None], p["img"], p["tok"][b.tok])
        return word + p["seg"][b.seg] + p["pos"][b.pos] + b.app @ p["app"] + b.geo

    def hidden(self, b: Batch, trace=False):
        # the summed embedding row is layer-normed before the first block, as
        # in BERT; without it the small table init leaves attention uniform
        x, self._emb_ln = layer_norm(self.embed_batch(b), self.params["emb_ln_g"],
                                     self.params["emb_ln_b"])
        return self.encoder.forward(x, b.visible, trace)

    def forward(self, b: Batch) -> np.ndarray:
        """Scores (b,) read from the final [CLS] row; caches for backward."""
        h, _ = self.hidden(b)
        cls = h[:, 0, :]
        self._cache = (b, cls)
        return cls @ self.params["head.w"] + self.params["head.b"][0]

    def backward(self, dscores: np.ndarray) -> dict:
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward")
        b, cls = self._cache
        p = self.params
        grads = {"head.w": cls.T @ dscores, "head.b": np.array([dscores.sum()])}
        dh = np.zeros(b.tok.shape + (self.config.d,))
        dh[:, 0, :] = dscores[:, None] * p["head.w"][None, :]
        dx, layer_grads = self.encoder.backward(dh)
        for i, lg in enumerate(layer_grads):
            for key, g in lg.items():
                grads[f"layers.{i}.{key}"] = g
        dx, grads["emb_ln_g"], grads["emb_ln_b"] = layer_norm_backward(
            dx * b.valid[..., None], p["emb_ln_g"], self._emb_ln)
        dx = dx * b.valid[..., None]
        text = b.valid & ~b.is_img
        g_tok = np.zeros_like(p["tok"])
        np.add.at(g_tok, b.tok[text], dx[text])
        g_seg = np.zeros_like(p["seg"])
        np.add.at(g_seg, b.seg[b.valid], dx[b.valid])
        g_pos = np.zeros_like(p["pos"])
        np.add.at(g_pos, b.pos[b.valid], dx[b.valid])
        grads["tok"], grads["seg"], grads["pos"] = g_tok, g_seg, g_pos
        grads["img"] = dx[b.is_img & b.valid].sum(axis=0)
        grads["app"] = b.app.reshape(-1, b.app.shape[-1]).T @ dx.reshape(-1, dx.shape[-1])
        return grads

    # --- persistence -------------------------------------------------------

    def save(self, path, dtype: str = "<f4"):
        checkpoint.save_params(path, self.params, {"config": self.config.to_dict()}, dtype)

    @classmethod
    def load(cls, path, vocab: Vocab, config: Config | None = None) -> "Model":
        params, meta = checkpoint.load_params(path)
        if config is None:
            config = Config.from_dict(meta["config"])
        expected = set(init_params(config, len(vocab), np.random.default_rng(0)))
        if set(params) != expected:
            raise ValueError(f"{path}: checkpoint tensors do not match the configured model")
        if params["tok"].shape[0] != len(vocab):
            raise ValueError(
                f"{path}: token table has {params['tok'].shape[0]} rows, vocabulary needs {len(vocab)}"
            )
        return cls(config, vocab, params)
