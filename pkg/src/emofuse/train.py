"""Training loop, speaker-disjoint cross-validation, fine-tuning, and metrics.

The unit of optimization is the 7 s segment; the unit of scoring is the
utterance (segment class probabilities are averaged before the argmax).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import TARGET_RATE, clip_pad_7s, resample_16k
from .autodiff import Tensor
from .checkpoint import load_checkpoint, restore_module, save_checkpoint
from .corpus import CLASS_NAMES, CLASSES
from .errors import (ConfigError, ContractError, EmptyInputError, NumericError,
                     ParameterError)
from .mfcc import extract_mfcc39
from .model import FusionModel, FusionModelConfig
from .prosody import extract_prosody103

EVAL_BATCH = 64


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    seed: int = 0
    early_stop_patience: int = 10

    def __post_init__(self):
        # lr 0 is a legitimate no-op run (used to verify optimizer plumbing)
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ParameterError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_patience < 1:
            raise ParameterError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}")


# -- split planning -------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train_speakers: tuple[str, ...]
    val_speakers: tuple[str, ...]
    test_speakers: tuple[str, ...]

    def __post_init__(self):
        groups = [set(self.train_speakers), set(self.val_speakers), set(self.test_speakers)]
        if any(not g for g in groups):
            raise ContractError("every fold role needs at least one speaker")
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = groups[i] & groups[j]
                if overlap:
                    raise ContractError(f"fold roles share speakers {sorted(overlap)}")

    @property
    def all_speakers(self) -> frozenset:
        return frozenset(self.train_speakers) | frozenset(self.val_speakers) \
            | frozenset(self.test_speakers)


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]

    def __post_init__(self):
        if not self.folds:
            raise ContractError("a split plan needs at least one fold")
        pool = self.folds[0].all_speakers
        for k, fold in enumerate(self.folds):
            if fold.all_speakers != pool:
                raise ContractError(f"fold {k} does not cover the full speaker pool")

    @property
    def n_folds(self) -> int:
        return len(self.folds)


def _speaker_of(record) -> str:
    return record if isinstance(record, str) else record.speaker_id


def kfold_split(records, n_folds: int = 10, seed: int = 0) -> SplitPlan:
    """Rotate shuffled speaker groups so each fold tests a distinct group.

    Fold k tests group k and validates group k+1 (mod n_folds); the remaining
    groups train. With 10 speakers and 10 folds that is the 8:1:1 layout.
    """
    speakers = sorted({_speaker_of(r) for r in records})
    if n_folds < 3:  # test, val, and train each need their own group
        raise ParameterError(f"n_folds must be >= 3, got {n_folds}")
    if len(speakers) < n_folds:
        raise ParameterError(
            f"need at least {n_folds} speakers for {n_folds} folds, got {len(speakers)}")
    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    groups = [list(g) for g in np.array_split(np.array(order, dtype=object), n_folds)]
    folds = []
    for k in range(n_folds):
        test = groups[k]
        val = groups[(k + 1) % n_folds]
        train = [s for i, g in enumerate(groups) if i != k and i != (k + 1) % n_folds
                 for s in g]
        folds.append(Fold(tuple(train), tuple(val), tuple(test)))
    return SplitPlan(tuple(folds))


# -- metrics ----------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows = true class, cols = predicted
    class_names: tuple[str, ...]

    def __post_init__(self):
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ContractError(f"confusion counts must be square, got {c.shape}")
        if len(self.class_names) != c.shape[0]:
            raise ContractError("class name count does not match matrix size")
        if not np.issubdtype(c.dtype, np.integer) or (c < 0).any():
            raise ContractError("confusion counts must be nonnegative integers")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(true_ids, pred_ids, class_names=None) -> ConfusionMatrix:
    names = tuple(class_names) if class_names is not None else tuple(CLASS_NAMES)
    t = np.asarray(true_ids, dtype=np.int64)
    p = np.asarray(pred_ids, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ContractError(f"label lists must be equal-length 1-d, got {t.shape} vs {p.shape}")
    if t.size == 0:
        raise EmptyInputError("cannot score an empty label list")
    k = len(names)
    if t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k:
        raise ContractError(f"class ids must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, names)


def weighted_accuracy(cm: ConfusionMatrix) -> float:
    """Total correct over total scored."""
    return float(np.trace(cm.counts)) / cm.total


def unweighted_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; classes absent from the truth are excluded."""
    rows = cm.row_sums
    present = rows > 0
    for name, have in zip(cm.class_names, present):
        if not have:
            warnings.warn(f"class {name!r} absent from the test set; excluded from UA")
    recalls = np.diag(cm.counts)[present] / rows[present]
    return float(recalls.mean())


# -- feature sets -----------------------------------------------------------------

@dataclass
class FeatureSet:
    """Per-segment model inputs plus the grouping metadata scoring needs.

    Exactly one of `hiddens` (encoder tap stack) and `embed` (a single
    embedding sequence per segment) is set.
    """
    prosody: np.ndarray                      # (N, 1, P)
    mfcc: np.ndarray                         # (N, T, F)
    labels: np.ndarray                       # (N,) class ids
    speakers: np.ndarray                     # (N,) speaker ids
    utterances: np.ndarray                   # (N,) utterance keys
    hiddens: list[np.ndarray] | None = None  # each (N, T, D)
    embed: np.ndarray | None = None          # (N, T, D)
    encoder_inputs: np.ndarray | None = None  # raw encoder inputs, for live tuning
    class_names: tuple[str, ...] = field(default_factory=lambda: tuple(CLASS_NAMES))

    def __post_init__(self):
        n = len(self.labels)
        if n == 0:
            raise EmptyInputError("feature set has no segments")
        if (self.hiddens is None) == (self.embed is None):
            raise ParameterError("set exactly one of hiddens and embed")
        for name in ("prosody", "mfcc", "speakers", "utterances"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"{name} row count does not match labels ({n})")
        if self.hiddens is not None and any(len(h) != n for h in self.hiddens):
            raise ContractError("hidden stacks do not match the segment count")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(
            prosody=self.prosody[idx], mfcc=self.mfcc[idx], labels=self.labels[idx],
            speakers=self.speakers[idx], utterances=self.utterances[idx],
            hiddens=None if self.hiddens is None else [h[idx] for h in self.hiddens],
            embed=None if self.embed is None else self.embed[idx],
            encoder_inputs=None if self.encoder_inputs is None else self.encoder_inputs[idx],
            class_names=self.class_names)

    def indices_for_speakers(self, speaker_group) -> np.ndarray:
        members = np.isin(self.speakers, np.asarray(list(speaker_group)))
        return np.flatnonzero(members)


def build_feature_set(pairs, encoder=None, chunk: int = 16) -> FeatureSet:
    """Extract segment features for (AudioSegment, UtteranceRecord) pairs.

    Utterances are resampled to 16 kHz and cut into 7 s segments here; every
    segment inherits its utterance's label, speaker, and grouping key. When an
    encoder is given, its hidden layers are precomputed with graph tracking
    off (the encoder stays frozen and untouched).
    """
    prosody, mfcc, labels, speakers, utts, waves = [], [], [], [], [], []
    for seg, rec in pairs:
        s16 = seg if seg.sample_rate == TARGET_RATE else resample_16k(seg)
        for piece in clip_pad_7s(s16):
            mfcc.append(extract_mfcc39(piece).data)
            prosody.append(extract_prosody103(piece).data)
            labels.append(CLASSES.index(rec.label))
            speakers.append(rec.speaker_id)
            utts.append(rec.path)
            if encoder is not None and encoder.cfg.front_end == "raw":
                waves.append(piece.samples[:, None])
    if encoder is None:
        raise ParameterError("build_feature_set needs an encoder; use "
                             "feature_set_from_embeddings for imported embeddings")
    kwargs = dict(
        prosody=np.stack(prosody), mfcc=np.stack(mfcc),
        labels=np.asarray(labels, dtype=np.int64),
        speakers=np.asarray(speakers), utterances=np.asarray(utts))
    enc_in = np.stack(waves) if encoder.cfg.front_end == "raw" else kwargs["mfcc"]
    was_training = encoder.training
    flags = [p.requires_grad for p in encoder.parameters()]
    encoder.eval().requires_grad_(False)
    try:
        per_layer: list[list[np.ndarray]] = []
        for lo in range(0, len(enc_in), chunk):
            hiddens, _ = encoder(Tensor(enc_in[lo:lo + chunk]))
            for i, h in enumerate(hiddens):
                if lo == 0:
                    per_layer.append([])
                per_layer[i].append(h.data)
        kwargs["hiddens"] = [np.concatenate(parts, axis=0) for parts in per_layer]
    finally:
        encoder.train(was_training)
        for p, f in zip(encoder.parameters(), flags):
            p.requires_grad = f
    kwargs["encoder_inputs"] = enc_in
    return FeatureSet(**kwargs)


def feature_set_from_embeddings(pairs, embeddings) -> FeatureSet:
    """Like build_feature_set but with one imported (T, D) embedding per segment."""
    prosody, mfcc, labels, speakers, utts = [], [], [], [], []
    for seg, rec in pairs:
        s16 = seg if seg.sample_rate == TARGET_RATE else resample_16k(seg)
        for piece in clip_pad_7s(s16):
            mfcc.append(extract_mfcc39(piece).data)
            prosody.append(extract_prosody103(piece).data)
            labels.append(CLASSES.index(rec.label))
            speakers.append(rec.speaker_id)
            utts.append(rec.path)
    if len(embeddings) != len(labels):
        raise ParameterError(
            f"{len(embeddings)} embeddings for {len(labels)} segments")
    return FeatureSet(
        prosody=np.stack(prosody), mfcc=np.stack(mfcc),
        labels=np.asarray(labels, dtype=np.int64), speakers=np.asarray(speakers),
        utterances=np.asarray(utts), embed=np.stack([np.asarray(e) for e in embeddings]))


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension standardization constants, fit on a training split."""
    prosody_mean: np.ndarray
    prosody_std: np.ndarray
    mfcc_mean: np.ndarray
    mfcc_std: np.ndarray

    @classmethod
    def from_features(cls, feats: FeatureSet, idx) -> "FeatureStats":
        idx = np.asarray(idx)
        if idx.size == 0:
            raise EmptyInputError("cannot fit stats on an empty split")
        pr = feats.prosody[idx].reshape(-1, feats.prosody.shape[-1])
        mf = feats.mfcc[idx].reshape(-1, feats.mfcc.shape[-1])

        def _std(x):
            s = x.std(axis=0)
            return np.where(s < 1e-8, 1.0, s)  # constant dims pass through

        return cls(pr.mean(axis=0), _std(pr), mf.mean(axis=0), _std(mf))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("prosody_mean", "prosody_std", "mfcc_mean", "mfcc_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in
                      ("prosody_mean", "prosody_std", "mfcc_mean", "mfcc_std")})


def standardize(feats: FeatureSet, stats: FeatureStats) -> FeatureSet:
    """Z-score the prosody and MFCC branches; embeddings pass through."""
    out = feats.subset(np.arange(feats.n))
    out.prosody = (out.prosody - stats.prosody_mean) / stats.prosody_std
    out.mfcc = (out.mfcc - stats.mfcc_mean) / stats.mfcc_std
    return out


# -- forward plumbing --------------------------------------------------------------

def _batch_embedding(feats: FeatureSet, idx):
    if feats.hiddens is not None:
        return [Tensor(h[idx]) for h in feats.hiddens]
    return Tensor(feats.embed[idx])


def _default_forward(model: FusionModel, feats: FeatureSet):
    def forward(idx) -> Tensor:
        return model.embed(Tensor(feats.prosody[idx]), Tensor(feats.mfcc[idx]),
                           _batch_embedding(feats, idx))
    return forward


# -- evaluation --------------------------------------------------------------------

@dataclass
class EvalResult:
    wa: float
    ua: float
    confusion: ConfusionMatrix
    utterance_keys: np.ndarray
    true_ids: np.ndarray
    pred_ids: np.ndarray
    mean_probs: np.ndarray  # (n_utterances, K)


def evaluate_features(model: FusionModel, feats: FeatureSet, idx=None,
                      forward=None, companions=()) -> EvalResult:
    """Score per utterance: mean segment class probabilities, then argmax.

    Expects features already standardized the way the model was trained.
    """
    idx = np.arange(feats.n) if idx is None else np.asarray(idx)
    if idx.size == 0:
        raise EmptyInputError("cannot evaluate an empty index set")
    forward = forward or _default_forward(model, feats)
    modules = (model, *companions)
    saved = [(m, m.training, [p.requires_grad for p in m.parameters()]) for m in modules]
    for m in modules:
        m.eval().requires_grad_(False)
    try:
        probs = np.concatenate([
            model.class_probabilities(forward(idx[lo:lo + EVAL_BATCH]))
            for lo in range(0, idx.size, EVAL_BATCH)], axis=0)
    finally:
        for m, was_training, flags in saved:
            m.train(was_training)
            for p, f in zip(m.parameters(), flags):
                p.requires_grad = f
    keys, first, inverse = np.unique(feats.utterances[idx], return_index=True,
                                     return_inverse=True)
    true = feats.labels[idx][first]
    if not np.array_equal(feats.labels[idx], true[inverse]):
        raise ContractError("segments of one utterance carry different labels")
    sums = np.zeros((len(keys), probs.shape[1]))
    counts = np.zeros(len(keys))
    np.add.at(sums, inverse, probs)
    np.add.at(counts, inverse, 1.0)
    mean_probs = sums / counts[:, None]
    pred = mean_probs.argmax(axis=1)
    cm = confusion_matrix(true, pred, feats.class_names)
    return EvalResult(weighted_accuracy(cm), unweighted_accuracy(cm), cm,
                      keys, true, pred, mean_probs)


def _fusion_checkpoint_config(config: dict, ckpt_path) -> None:
    missing = [key for key in ("model", "stats") if key not in config]
    if missing:
        raise ConfigError(f"{ckpt_path}: not a fusion model checkpoint "
                          f"(config lacks {', '.join(missing)})")


def evaluate(ckpt_path, feats: FeatureSet, idx=None) -> EvalResult:
    """Score a saved checkpoint on raw (unstandardized) features."""
    tensors, config = load_checkpoint(ckpt_path)
    _fusion_checkpoint_config(config, ckpt_path)
    model_cfg = FusionModelConfig.from_dict(config["model"])
    model = FusionModel(model_cfg, np.random.default_rng(0))
    restore_module(model, tensors, strict=True)
    scored = standardize(feats, FeatureStats.from_dict(config["stats"]))
    return evaluate_features(model, scored, idx)


# -- training ----------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_ua: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_ua: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool


def train(model: FusionModel, feats: FeatureSet, train_idx, val_idx,
          cfg: TrainConfig, forward=None, extra_params=(), companions=()) -> TrainResult:
    """Adam over shuffled segment minibatches with early stopping on val UA.

    The model is left holding the parameters of the best validation epoch.
    `extra_params` join the optimizer (live encoder tuning); `companions` are
    modules whose train/eval state tracks the model's.
    """
    train_idx = np.asarray(train_idx)
    val_idx = np.asarray(val_idx)
    if train_idx.size == 0:
        raise EmptyInputError("training split is empty")
    if val_idx.size == 0:
        raise EmptyInputError("validation split is empty")
    forward = forward or _default_forward(model, feats)
    named = model.named_parameters()
    plist = list(named.values()) + list(extra_params)
    opt_state = ad.adam_init(plist)
    rng = np.random.default_rng(cfg.seed)
    modules = (model, *companions)

    history: list[EpochStats] = []
    best_ua, best_epoch, stale = -np.inf, 0, 0
    best_state: dict[str, np.ndarray] = {}
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        for m in modules:
            m.train()
        perm = train_idx[rng.permutation(train_idx.size)]
        total = 0.0
        for bi, lo in enumerate(range(0, perm.size, cfg.batch_size)):
            bidx = perm[lo:lo + cfg.batch_size]
            model.zero_grad()
            for m in companions:
                m.zero_grad()
            loss, _ = model.loss(forward(bidx), feats.labels[bidx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite training loss {value!r} at epoch {epoch}, "
                    f"batch {bi} (segment indices {bidx.tolist()})")
            loss.backward()
            ad.adam_step(plist, opt_state, lr=cfg.lr)
            total += value * bidx.size
        train_loss = total / perm.size
        val_ua = evaluate_features(model, feats, val_idx, forward=forward,
                                   companions=companions).ua
        history.append(EpochStats(epoch, train_loss, val_ua))
        if val_ua > best_ua:
            best_ua, best_epoch, stale = val_ua, epoch, 0
            best_state = {k: p.data.copy() for k, p in named.items()}
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                stopped_early = True
                break
    for k, p in named.items():
        p.data = best_state[k].copy()
    return TrainResult(history, best_epoch, best_ua, best_state, stopped_early)


# -- transfer fine-tuning ------------------------------------------------------------

@dataclass(frozen=True)
class SubsetPolicy:
    """How much of the target data fine-tuning may see."""
    kind: str  # "speakers" or "utterances"
    fraction: float

    def __post_init__(self):
        if self.kind not in ("speakers", "utterances"):
            raise ParameterError(f"unknown subset kind {self.kind!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ParameterError(f"fraction must be in (0, 1], got {self.fraction}")


def select_subset(feats: FeatureSet, pool_idx, policy: SubsetPolicy,
                  seed: int) -> np.ndarray:
    """Pick a seeded fraction of speakers or utterances from a candidate pool."""
    pool_idx = np.asarray(pool_idx)
    if pool_idx.size == 0:
        raise EmptyInputError("subset pool is empty")
    rng = np.random.default_rng(seed)
    if policy.kind == "speakers":
        uniq = np.unique(feats.speakers[pool_idx])
        n_pick = max(1, int(round(policy.fraction * uniq.size)))
        chosen = uniq[rng.permutation(uniq.size)][:n_pick]
        keep = np.isin(feats.speakers[pool_idx], chosen)
    else:
        uniq = np.unique(feats.utterances[pool_idx])
        n_pick = max(1, int(round(policy.fraction * uniq.size)))
        chosen = uniq[rng.permutation(uniq.size)][:n_pick]
        keep = np.isin(feats.utterances[pool_idx], chosen)
    return pool_idx[keep]


@dataclass
class FineTuneResult:
    model: FusionModel
    train_result: TrainResult
    selected_idx: np.ndarray
    stats: FeatureStats


def fine_tune(source_ckpt, feats: FeatureSet, pool_idx, val_idx,
              policy: SubsetPolicy, cfg: TrainConfig,
              encoder=None, tune_encoder: bool = False) -> FineTuneResult:
    """Adapt a trained fusion model to a new corpus on a seeded data subset.

    All fusion and classifier parameters load from the source checkpoint
    (strict: mismatches raise with tensor names). Features are standardized
    with the source run's statistics so the restored weights see the scale
    they were trained at. The encoder stays frozen unless `tune_encoder`;
    live tuning recomputes hidden layers from `feats.encoder_inputs` each step.
    """
    tensors, config = load_checkpoint(source_ckpt)
    _fusion_checkpoint_config(config, source_ckpt)
    model_cfg = FusionModelConfig.from_dict(config["model"])
    model = FusionModel(model_cfg, np.random.default_rng(cfg.seed))
    restore_module(model, tensors, strict=True)
    stats = FeatureStats.from_dict(config["stats"])
    scored = standardize(feats, stats)
    selected = select_subset(scored, pool_idx, policy, cfg.seed)

    forward, extra_params, companions = None, (), ()
    if tune_encoder:
        if encoder is None:
            raise ParameterError("tune_encoder requires the encoder")
        if scored.encoder_inputs is None:
            raise ParameterError("feature set carries no raw encoder inputs")
        encoder.requires_grad_(True)

        def forward(idx, _m=model, _f=scored, _e=encoder):
            hiddens, _ = _e(Tensor(_f.encoder_inputs[idx]))
            return _m.embed(Tensor(_f.prosody[idx]), Tensor(_f.mfcc[idx]), hiddens)

        extra_params = tuple(encoder.parameters())
        companions = (encoder,)
    result = train(model, scored, selected, val_idx, cfg,
                   forward=forward, extra_params=extra_params, companions=companions)
    return FineTuneResult(model, result, selected, stats)


# -- fold harness --------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    wa: float
    ua: float
    confusion: ConfusionMatrix
    history: list[EpochStats]
    best_epoch: int
    best_val_ua: float
    n_test_utterances: int


def fold_indices(feats: FeatureSet, fold: Fold):
    return (feats.indices_for_speakers(fold.train_speakers),
            feats.indices_for_speakers(fold.val_speakers),
            feats.indices_for_speakers(fold.test_speakers))


def run_fold(model_cfg: FusionModelConfig, feats: FeatureSet, fold: Fold,
             cfg: TrainConfig, fold_index: int = 0, ckpt_path=None,
             extra_config: dict | None = None) -> FoldResult:
    """Train on one fold's raw features and score its held-out speakers."""
    tr, va, te = fold_indices(feats, fold)
    stats = FeatureStats.from_features(feats, tr)
    scored = standardize(feats, stats)
    model = FusionModel(model_cfg, np.random.default_rng([cfg.seed, fold_index]))
    result = train(model, scored, tr, va, cfg)
    ev = evaluate_features(model, scored, te)
    if ckpt_path is not None:
        config = {"model": model_cfg.to_dict(), "stats": stats.to_dict(),
                  "seed": cfg.seed}
        config.update(extra_config or {})
        save_checkpoint(ckpt_path, model, config=config)
    return FoldResult(fold_index, ev.wa, ev.ua, ev.confusion, result.history,
                      result.best_epoch, result.best_val_ua, len(ev.true_ids))


def run_kfold(model_cfg: FusionModelConfig, feats: FeatureSet, plan: SplitPlan,
              cfg: TrainConfig) -> list[FoldResult]:
    return [run_fold(model_cfg, feats, fold, cfg, fold_index=k)
            for k, fold in enumerate(plan.folds)]
