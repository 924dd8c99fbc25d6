"""Self-supervised speech encoder trained by masked cluster prediction.

Pipeline: k-means over MFCC frames produces per-frame pseudo-labels; a
transformer encoder sees span-masked inputs and predicts each frame's
cluster; selected hidden layers are blended by a learned softmax mixture
for downstream use. Externally computed embedding sequences can be
imported from FMX1 files in place of the encoder output.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, NumericError, ParameterError, ShapeError
from .fmx import FeatureMatrix, read_fmx, write_fmx
from .nn import AttentionBlock, CatConfig, Linear, Module, glorot, sinusoidal_positions


@dataclass
class SsrlConfig:
    n_layers: int = 12
    embed_dim: int = 768
    n_clusters: int = 100
    mask_start_prob: float = 0.08
    mask_span: int = 10
    masked_weight: float = 1.0
    selected_layers: list[int] = field(default_factory=list)
    n_heads: int = 4
    ff_dim: int = 0
    dropout_p: float = 0.1
    input_dim: int = 39
    front_end: str = "mfcc"
    use_positions: bool = True

    def __post_init__(self):
        if not self.selected_layers:
            # two taps: an early layer and one three below the top
            self.selected_layers = sorted({1, max(1, self.n_layers - 3)})
        if self.ff_dim == 0:
            self.ff_dim = 2 * self.embed_dim
        if not 0.0 <= self.masked_weight <= 1.0:
            raise ParameterError(f"masked_weight must be in [0, 1], got {self.masked_weight}")
        if not 0.0 <= self.mask_start_prob <= 1.0:
            raise ParameterError(f"mask_start_prob must be in [0, 1], got {self.mask_start_prob}")
        if any(not 0 <= l <= self.n_layers for l in self.selected_layers):
            raise ParameterError(
                f"selected_layers {self.selected_layers} outside [0, {self.n_layers}]"
            )
        if self.n_layers < 1 or self.n_clusters < 2 or self.mask_span < 1:
            raise ParameterError("need n_layers >= 1, n_clusters >= 2, mask_span >= 1")
        if self.front_end not in ("mfcc", "raw"):
            raise ParameterError(f"unknown front_end {self.front_end!r}")


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        k = self.centroids.shape[0]
        if self.labels.ndim != 1:
            raise ShapeError(f"labels must be 1-d, got {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ParameterError(f"label outside [0, {k})")
        if not np.all(np.isfinite(self.centroids)):
            raise NumericError("centroids must be finite")

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x||^2 + ||c||^2 - 2 x.c, clipped: cheaper than a (N, K, D) broadcast
    d2 = (
        (points**2).sum(axis=1)[:, None]
        + (centroids**2).sum(axis=1)[None, :]
        - 2.0 * points @ centroids.T
    )
    return np.maximum(d2, 0.0)


def kmeans_fit(features: np.ndarray, n_clusters: int, max_iter: int = 100, seed: int = 0) -> PseudoLabelSet:
    """K-means++ seeding followed by Lloyd iterations to assignment fixpoint.

    Inertia is checked to be nonincreasing on every iteration; empty clusters
    are re-seeded from the point farthest from its assigned centroid.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be 2-d, got {features.shape}")
    n = features.shape[0]
    if n < n_clusters:
        raise ParameterError(f"{n} points cannot seed {n_clusters} clusters")
    rng = np.random.default_rng(seed)

    centroids = np.empty((n_clusters, features.shape[1]))
    centroids[0] = features[rng.integers(n)]
    best_d2 = _sq_dists(features, centroids[:1])[:, 0]
    for k in range(1, n_clusters):
        total = best_d2.sum()
        pick = rng.choice(n, p=best_d2 / total) if total > 0 else rng.integers(n)
        centroids[k] = features[pick]
        best_d2 = np.minimum(best_d2, _sq_dists(features, centroids[k : k + 1])[:, 0])

    assign = None
    trace: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_dists(features, centroids)
        new_assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), new_assign].sum())
        if trace and inertia > trace[-1] + 1e-9 * max(1.0, trace[-1]):
            raise NumericError(f"inertia rose {trace[-1]} -> {inertia}")
        trace.append(inertia)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(n_clusters):
            members = features[assign == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
            else:
                farthest = int(np.argmax(d2[np.arange(n), assign]))
                centroids[k] = features[farthest]
    return PseudoLabelSet(assign, centroids, trace[-1], trace)


def save_pseudo_labels(path, labels: PseudoLabelSet) -> None:
    """Labels as a cols=1 FMX1 file plus a `<path>.centroids` sidecar."""
    write_fmx(path, FeatureMatrix(labels.labels[:, None].astype(np.float64), ["cluster_id"]))
    write_fmx(f"{path}.centroids", FeatureMatrix(labels.centroids))


def load_pseudo_labels(path) -> PseudoLabelSet:
    ids, _ = read_fmx(path)
    cents, _ = read_fmx(f"{path}.centroids")
    flat = ids.data[:, 0]
    if not np.array_equal(flat, np.round(flat)):
        raise FormatError("pseudo-label file holds non-integer cluster ids")
    return PseudoLabelSet(flat.astype(np.int64), cents.data, float("nan"))


def mask_spans(n_frames: int, cfg: SsrlConfig, seed: int) -> np.ndarray:
    """Sorted unique indices covered by randomly started fixed-length spans."""
    if n_frames <= cfg.mask_span:
        raise ParameterError(f"need more than {cfg.mask_span} frames, got {n_frames}")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(n_frames) < cfg.mask_start_prob)
    if not len(starts):
        return np.empty(0, dtype=np.int64)
    covered = (starts[:, None] + np.arange(cfg.mask_span)[None, :]).ravel()
    return np.unique(covered[covered < n_frames])


class RawFrontEnd(Module):
    """Strided 1-d conv stack mapping raw samples onto the 20 ms frame grid."""

    FRAME = 640
    HOP = 320

    def __init__(self, cfg: SsrlConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.extract = self.param("extract", glorot(rng, self.FRAME, d, (self.FRAME, 1, d)))
        self.extract_bias = self.param("extract_bias", np.zeros(d))
        self.mix = self.param("mix", glorot(rng, d, d, (1, d, d)))
        self.mix_bias = self.param("mix_bias", np.zeros(d))

    def __call__(self, samples: Tensor) -> Tensor:
        if samples.ndim == 1:
            samples = samples.reshape((samples.shape[0], 1))
        h = ad.relu(ad.conv1d(samples, self.extract, self.HOP) + self.extract_bias)
        return ad.conv1d(h, self.mix, 1) + self.mix_bias


class SsrlEncoder(Module):
    """Transformer over projected frames with span masking and a cluster head.

    Calling returns (hiddens, logits): hiddens has n_layers + 1 sequences,
    the first being the (masked) input embedding, and logits is the final
    layer projected to cluster scores.
    """

    def __init__(self, cfg: SsrlConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        if cfg.front_end == "raw":
            self.front = self.child("front", RawFrontEnd(cfg, rng))
        else:
            self.front = self.child("front", Linear(cfg.input_dim, cfg.embed_dim, rng))
        self.mask_emb = self.param("mask_emb", rng.normal(0.0, 0.02, cfg.embed_dim))
        block_cfg = CatConfig(cfg.embed_dim, cfg.n_heads, cfg.ff_dim, cfg.dropout_p)
        self.layers = [
            self.child(f"layer{i}", AttentionBlock(block_cfg, rng)) for i in range(cfg.n_layers)
        ]
        self.head = self.child("head", Linear(cfg.embed_dim, cfg.n_clusters, rng))

    def __call__(self, features, mask_idx: np.ndarray | None = None) -> tuple[list[Tensor], Tensor]:
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
        h = self.front(x)
        if mask_idx is not None and len(mask_idx):
            keep = np.ones((h.shape[-2], 1))
            keep[np.asarray(mask_idx)] = 0.0
            h = h * Tensor(keep) + self.mask_emb * Tensor(1.0 - keep)
        hiddens = [h]
        if self.cfg.use_positions:
            h = h + Tensor(sinusoidal_positions(h.shape[-2], self.cfg.embed_dim))
        for layer in self.layers:
            h = layer(h, h)
            hiddens.append(h)
        return hiddens, self.head(hiddens[-1])


def masked_pretrain_loss(logits: Tensor, frame_labels: np.ndarray, masked_idx: np.ndarray, masked_weight: float) -> Tensor:
    """Weighted mean NLL of the true cluster over masked and unmasked frames."""
    frame_labels = np.asarray(frame_labels)
    n_frames, n_clusters = logits.shape
    if frame_labels.shape != (n_frames,):
        raise ShapeError(f"{frame_labels.shape} labels for {n_frames} logit rows")
    if len(frame_labels) and (frame_labels.min() < 0 or frame_labels.max() >= n_clusters):
        raise ParameterError("cluster label out of range")
    onehot = np.zeros((n_frames, n_clusters))
    onehot[np.arange(n_frames), frame_labels] = 1.0
    nll = -ad.log((ad.softmax(logits, dim=-1) * Tensor(onehot)).sum(dim=-1))

    masked_vec = np.zeros(n_frames)
    if len(masked_idx):
        masked_vec[np.asarray(masked_idx)] = 1.0
    n_masked = int(masked_vec.sum())
    n_unmasked = n_frames - n_masked

    if n_masked:
        loss_masked = (nll * Tensor(masked_vec)).sum() * Tensor(1.0 / n_masked)
    else:
        if masked_weight > 0.0:
            warnings.warn("no masked frames: masked loss term set to 0", stacklevel=2)
        loss_masked = Tensor(0.0)
    if n_unmasked:
        loss_unmasked = (nll * Tensor(1.0 - masked_vec)).sum() * Tensor(1.0 / n_unmasked)
    else:
        if masked_weight < 1.0:
            warnings.warn("every frame masked: unmasked loss term set to 0", stacklevel=2)
        loss_unmasked = Tensor(0.0)
    return Tensor(masked_weight) * loss_masked + Tensor(1.0 - masked_weight) * loss_unmasked


class LayerFusion(Module):
    """Softmax-weighted sum of selected encoder layers with learned logits."""

    def __init__(self, selected_layers: list[int], n_layers: int):
        super().__init__()
        if not selected_layers:
            raise ParameterError("need at least one selected layer")
        if any(not 0 <= l <= n_layers for l in selected_layers):
            raise ParameterError(f"layer index outside [0, {n_layers}]: {selected_layers}")
        self.selected = [int(l) for l in selected_layers]
        self.mix_logits = self.param("mix_logits", np.zeros(len(self.selected)))

    def mix_weights(self) -> np.ndarray:
        e = np.exp(self.mix_logits.data - self.mix_logits.data.max())
        return e / e.sum()

    def __call__(self, hiddens: list[Tensor]) -> Tensor:
        if max(self.selected) >= len(hiddens):
            raise ParameterError(
                f"layer {max(self.selected)} missing from {len(hiddens)} hidden sequences"
            )
        weights = ad.softmax(self.mix_logits, dim=-1)
        fused = weights[0] * hiddens[self.selected[0]]
        for i, layer_idx in enumerate(self.selected[1:], start=1):
            fused = fused + weights[i] * hiddens[layer_idx]
        return fused


def import_embeddings(path, expected_dim: int = 768) -> np.ndarray:
    """Read an externally produced embedding sequence from an FMX1 file."""
    matrix, _ = read_fmx(path)
    if matrix.dim != expected_dim:
        raise FormatError(f"embedding file has {matrix.dim} cols, config wants {expected_dim}")
    return matrix.data


def pretrain(
    encoder: SsrlEncoder,
    feature_seqs: list[np.ndarray],
    label_seqs: list[np.ndarray],
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Adam pretraining over per-utterance steps.

    Returns epochs + 1 loss values: a pre-training evaluation followed by one
    evaluation after each epoch, all measured with fixed per-utterance masks
    and dropout off so the curve reflects parameter movement only.
    """
    if len(feature_seqs) != len(label_seqs):
        raise ShapeError(f"{len(feature_seqs)} feature seqs vs {len(label_seqs)} label seqs")
    cfg = encoder.cfg
    params = encoder.parameters()
    state = ad.adam_init(params)
    rng = np.random.default_rng(seed)
    eval_masks = [mask_spans(len(f), cfg, seed=9000 + i) for i, f in enumerate(feature_seqs)]

    def corpus_loss() -> float:
        encoder.eval()
        total = 0.0
        for feats, labels, midx in zip(feature_seqs, label_seqs, eval_masks):
            _, logits = encoder(feats, midx)
            total += masked_pretrain_loss(logits, labels, midx, cfg.masked_weight).item()
        encoder.train()
        return total / len(feature_seqs)

    history = [corpus_loss()]
    for _ in range(epochs):
        for i in rng.permutation(len(feature_seqs)):
            feats, labels = feature_seqs[i], label_seqs[i]
            midx = mask_spans(len(feats), cfg, seed=int(rng.integers(2**31)))
            encoder.zero_grad()
            _, logits = encoder(feats, midx)
            loss = masked_pretrain_loss(logits, labels, midx, cfg.masked_weight)
            loss.backward()
            ad.adam_step(params, state, lr)
        history.append(corpus_loss())
    return history
