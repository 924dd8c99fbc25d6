"""Three-branch emotion classifier glued together by cross-attention fusion.

A prosody vector, an MFCC sequence, and a self-supervised embedding sequence
are each brought to a shared model dimension, fused in two cross-attention
stages (prosody with MFCC first, then that pair with the embedding branch),
mean+variance pooled to a fixed-size utterance embedding, and classified by
an additive-margin cosine head.

Single utterances are 2-d inputs; a leading batch axis makes them 3-d.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError, ShapeError
from .fmx import FeatureMatrix
from .nn import (
    AmSoftmax,
    AmSoftmaxConfig,
    BiLstm,
    CatConfig,
    CatFuse,
    ConvBlock,
    ConvBlockConfig,
    FcStack,
    Linear,
    Module,
)
from .ssrl import LayerFusion


@dataclass
class FusionModelConfig:
    cat: CatConfig = field(default_factory=CatConfig)
    conv: ConvBlockConfig = field(default_factory=ConvBlockConfig)
    ssrl_dim: int = 768
    ssrl_layer_taps: list[int] = field(default_factory=list)
    ssrl_n_layers: int = 12
    bilstm_hidden: int = 32
    pooled_dim: int = 64
    n_classes: int = 4
    mfcc_pool_window: int = 4
    mfcc_dim: int = 39
    prosody_dim: int = 103
    prosody_hidden: tuple[int, int] = (128, 64)
    am_scale: float = 30.0
    am_margin: float = 0.35
    use_prosody: bool = True
    use_mfcc: bool = True

    def __post_init__(self):
        if self.pooled_dim % 2 != 0:
            raise ParameterError(f"pooled_dim must be even (mean and variance halves), got {self.pooled_dim}")
        if self.mfcc_pool_window < 1 or self.n_classes < 2:
            raise ParameterError("need mfcc_pool_window >= 1 and n_classes >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "FusionModelConfig":
        blob = dict(blob)
        blob["cat"] = CatConfig(**blob["cat"])
        blob["conv"] = ConvBlockConfig(**dict(blob["conv"], kernel=tuple(blob["conv"]["kernel"]), stride=tuple(blob["conv"]["stride"])))
        blob["prosody_hidden"] = tuple(blob["prosody_hidden"])
        return cls(**blob)


def _to_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, FeatureMatrix):
        return Tensor(x.data)
    return Tensor(np.asarray(x, dtype=np.float64))


def _pool_matrix(t_in: int, window: int) -> np.ndarray:
    """Non-overlapping mean pooling as a constant matrix; last window may be short."""
    n_out = -(-t_in // window)
    p = np.zeros((n_out, t_in))
    for i in range(n_out):
        lo = i * window
        hi = min(lo + window, t_in)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


class FusionModel(Module):
    def __init__(self, cfg: FusionModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.cat.model_dim
        if cfg.use_prosody:
            self.prosody_stack = self.child("prosody_stack", FcStack(cfg.prosody_dim, list(cfg.prosody_hidden), rng))
            self.prosody_proj = self.child("prosody_proj", Linear(cfg.prosody_hidden[-1], d, rng))
        else:
            self.prosody_token = self.param("prosody_token", rng.normal(0.0, 0.02, (1, d)))
        if cfg.use_mfcc:
            self.mfcc_lstm = self.child("mfcc_lstm", BiLstm(cfg.mfcc_dim, cfg.bilstm_hidden, rng))
            self.mfcc_proj = self.child("mfcc_proj", Linear(2 * cfg.bilstm_hidden, d, rng))
        else:
            self.mfcc_token = self.param("mfcc_token", rng.normal(0.0, 0.02, (1, d)))
        if cfg.ssrl_layer_taps:
            self.layer_mix = self.child("layer_mix", LayerFusion(cfg.ssrl_layer_taps, cfg.ssrl_n_layers))
        self.embed_conv = self.child("embed_conv", ConvBlock(cfg.conv, cfg.ssrl_dim, d, rng))
        self.fuse_pm = self.child("fuse_pm", CatFuse(cfg.cat, rng))
        self.fuse_final = self.child("fuse_final", CatFuse(cfg.cat, rng))
        self.pool_proj = self.child("pool_proj", Linear(d, cfg.pooled_dim // 2, rng))
        head_cfg = AmSoftmaxConfig(cfg.am_scale, cfg.am_margin, cfg.n_classes, cfg.pooled_dim)
        self.classifier = self.child("classifier", AmSoftmax(head_cfg, rng))

    # -- branches -------------------------------------------------------------
    def _tile_token(self, token: Tensor, like: Tensor) -> Tensor:
        if like.ndim == 3:
            return token * Tensor(np.ones((like.shape[0], 1, 1)))
        return token

    def branch_prosody(self, v) -> Tensor:
        """(103,), (1, 103) or (B, 1, 103) -> length-1 sequence at model dim."""
        x = _to_tensor(v)
        if not self.cfg.use_prosody:
            return self._tile_token(self.prosody_token, x)
        if x.shape[-1] != self.cfg.prosody_dim:
            raise ShapeError(f"prosody input must end in {self.cfg.prosody_dim} dims, got {x.shape}")
        if x.ndim == 1:
            x = x.reshape((1, self.cfg.prosody_dim))
        return self.prosody_proj(self.prosody_stack(x))

    def branch_mfcc(self, m) -> Tensor:
        """(T, 39) or (B, T, 39) -> mean-pooled, Bi-LSTM encoded sequence at model dim."""
        x = _to_tensor(m)
        if not self.cfg.use_mfcc:
            return self._tile_token(self.mfcc_token, x)
        if x.shape[-1] != self.cfg.mfcc_dim:
            raise ShapeError(f"mfcc input must end in {self.cfg.mfcc_dim} dims, got {x.shape}")
        t_in = x.shape[-2]
        if t_in < self.cfg.mfcc_pool_window:
            raise ShapeError(f"{t_in} frames cannot fill one pool window of {self.cfg.mfcc_pool_window}")
        pooled = Tensor(_pool_matrix(t_in, self.cfg.mfcc_pool_window)) @ x
        return self.mfcc_proj(self.mfcc_lstm(pooled))

    def branch_embedding(self, e) -> Tensor:
        """(T, ssrl_dim), (B, T, ssrl_dim), or a hidden-layer list -> conv-downsampled sequence."""
        if isinstance(e, (list, tuple)):
            if "layer_mix" not in self._children:
                raise ParameterError("hidden-layer input needs ssrl_layer_taps in the config")
            e = self.layer_mix(list(e))
        return self.embed_conv(_to_tensor(e))

    # -- fusion and pooling ----------------------------------------------------
    def fuse(self, r_prosody: Tensor, r_mfcc: Tensor, r_embed: Tensor) -> Tensor:
        pair = self.fuse_pm(r_prosody, r_mfcc)
        return self.fuse_final(r_embed, pair)

    def pool_embedding(self, r: Tensor) -> Tensor:
        """(T, d) or (B, T, d) -> (1 or B, pooled_dim) mean-and-variance summary."""
        if r.shape[-2] == 0:
            raise ContractError("cannot pool an empty sequence")
        z = self.pool_proj(r)
        summary = ad.concat([z.mean(dim=-2), ad.variance(z, dim=-2)], axis=-1)
        if summary.ndim == 1:
            summary = summary.reshape((1, self.cfg.pooled_dim))
        return summary

    def embed(self, prosody, mfcc, embedding) -> Tensor:
        r = self.fuse(
            self.branch_prosody(prosody),
            self.branch_mfcc(mfcc),
            self.branch_embedding(embedding),
        )
        return self.pool_embedding(r)

    # -- heads ------------------------------------------------------------------
    def loss(self, utterance_embedding: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.classifier(utterance_embedding, labels)

    def class_probabilities(self, utterance_embedding: Tensor) -> np.ndarray:
        """Inference softmax over scaled cosines; no margin is applied."""
        scores = self.cfg.am_scale * self.classifier.cosines(utterance_embedding).data
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, prosody, mfcc, embedding) -> tuple[np.ndarray, np.ndarray]:
        """Class ids and per-class probabilities for one utterance or a batch."""
        probs = self.class_probabilities(self.embed(prosody, mfcc, embedding))
        return probs.argmax(axis=-1), probs
