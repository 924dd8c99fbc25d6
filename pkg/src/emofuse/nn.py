"""Trainable blocks: linear layers, multi-head attention, bidirectional
cross-attention (single block and two-stage fusion), Bi-LSTM, the strided
2-d conv block, additive-margin softmax, and small utilities.

Every block is a Module so parameters serialize under a stable
"blocks/<path>/<tensor>" namespace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError, ParameterError, ShapeError


@dataclass
class CatConfig:
    model_dim: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    dropout_p: float = 0.1
    use_positions: bool = False

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ParameterError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass
class ConvBlockConfig:
    kernel: tuple[int, int] = (10, 18)
    stride: tuple[int, int] = (4, 3)
    out_channels: int = 8

    def __post_init__(self):
        if min(*self.kernel, *self.stride, self.out_channels) < 1:
            raise ParameterError("kernel/stride/channels must be positive")


@dataclass
class AmSoftmaxConfig:
    scale: float = 30.0
    margin: float = 0.35
    n_classes: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        if self.scale <= 0 or self.margin < 0:
            raise ParameterError(f"need scale > 0 and margin >= 0, got {self.scale}/{self.margin}")


class Module:
    """Parameter/submodule registry with a train/eval switch."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}{name}": t for name, t in self._params.items()}
        for child_name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{child_name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag: bool = True) -> "Module":
        """Toggle graph tracking on every parameter (False = frozen forward)."""
        for p in self.parameters():
            p.requires_grad = flag
        return self


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape if shape is not None else (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.param("weight", glorot(rng, d_in, d_out))
        self.bias = self.param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects last dim {self.d_in}, got {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Dropout(Module):
    """Inverted dropout; active only while training."""

    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * Tensor(keep)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim))
        self.shift = self.param("shift", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift, self.eps)


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Classic fixed sine/cosine position table (n, dim)."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)[None, :]
    table = pos * freq
    table[:, 0::2] = np.sin(table[:, 0::2])
    table[:, 1::2] = np.cos(table[:, 1::2])
    return table


class MultiHeadAttention(Module):
    """softmax(Q Kᵀ / sqrt(d_head)) V per head, concatenated, output-projected."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if d % n_heads != 0:
            raise ParameterError(f"dim {d} not divisible by {n_heads} heads")
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        self.w_q = self.param("w_q", glorot(rng, d, d))
        self.w_k = self.param("w_k", glorot(rng, d, d))
        self.w_v = self.param("w_v", glorot(rng, d, d))
        self.w_o = self.param("w_o", glorot(rng, d, d))

    def _split(self, x: Tensor) -> Tensor:
        # (..., T, d) -> (..., H, T, d_head)
        new_shape = x.shape[:-1] + (self.n_heads, self.d_head)
        return x.reshape(new_shape).transpose(-3, -2)

    def head_contexts(self, q_seq: Tensor, kv_seq: Tensor) -> Tensor:
        """Per-head convex combinations of projected V rows: (..., H, T_q, d_head)."""
        if q_seq.shape[-1] != self.d or kv_seq.shape[-1] != self.d:
            raise ShapeError(f"attention dim {self.d} vs inputs {q_seq.shape}, {kv_seq.shape}")
        q = self._split(q_seq @ self.w_q)
        k = self._split(kv_seq @ self.w_k)
        v = self._split(kv_seq @ self.w_v)
        scores = (q @ k.transpose(-2, -1)) * Tensor(1.0 / np.sqrt(self.d_head))
        return ad.softmax(scores, dim=-1) @ v

    def __call__(self, q_seq: Tensor, kv_seq: Tensor) -> Tensor:
        ctx = self.head_contexts(q_seq, kv_seq)
        merged = ctx.transpose(-3, -2)
        merged = merged.reshape(merged.shape[:-2] + (self.d,))
        return merged @ self.w_o


class CatBlock(Module):
    """Bidirectional cross-attention: A attends over B and B attends over A.

    Each direction is a pre-norm transformer block (cross-attention with
    residual, then feed-forward with residual). Returns sequences of the
    query side's length: (T_A, d) and (T_B, d).
    """

    def __init__(self, cfg: CatConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.dir_ab = self.child("dir_ab", AttentionBlock(cfg, rng))
        self.dir_ba = self.child("dir_ba", AttentionBlock(cfg, rng))

    def __call__(self, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        if a.shape[-2] == 0 or b.shape[-2] == 0:
            raise ContractError("cat_block requires nonempty sequences")
        if self.cfg.use_positions:
            a = a + Tensor(sinusoidal_positions(a.shape[-2], self.cfg.model_dim))
            b = b + Tensor(sinusoidal_positions(b.shape[-2], self.cfg.model_dim))
        return self.dir_ab(a, b), self.dir_ba(b, a)


class AttentionBlock(Module):
    """Pre-norm attention + feed-forward block with residuals.

    Cross-attention when q_seq and kv_seq differ; self-attention when the
    same sequence is passed for both.
    """

    def __init__(self, cfg: CatConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.model_dim
        self.ln_q = self.child("ln_q", LayerNorm(d))
        self.ln_kv = self.child("ln_kv", LayerNorm(d))
        self.attn = self.child("attn", MultiHeadAttention(d, cfg.n_heads, rng))
        self.ln_ff = self.child("ln_ff", LayerNorm(d))
        self.ff1 = self.child("ff1", Linear(d, cfg.ff_dim, rng))
        self.ff2 = self.child("ff2", Linear(cfg.ff_dim, d, rng))
        self.drop_attn = self.child("drop_attn", Dropout(cfg.dropout_p, rng))
        self.drop_ff = self.child("drop_ff", Dropout(cfg.dropout_p, rng))

    def __call__(self, q_seq: Tensor, kv_seq: Tensor) -> Tensor:
        x = q_seq + self.drop_attn(self.attn(self.ln_q(q_seq), self.ln_kv(kv_seq)))
        return x + self.drop_ff(self.ff2(ad.relu(self.ff1(self.ln_ff(x)))))


class CatFuse(Module):
    """Two-stage cross-attention fusion producing one sequence of length T_A.

    Stage one is a CatBlock; stage two lets each directional output attend
    over the other, mean-pools the B-side result over time, tiles it to T_A,
    concatenates on the feature axis, and projects back to d.
    """

    def __init__(self, cfg: CatConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.model_dim
        self.cfg = cfg
        self.block = self.child("block", CatBlock(cfg, rng))
        self.attn_a = self.child("attn_a", MultiHeadAttention(d, cfg.n_heads, rng))
        self.attn_b = self.child("attn_b", MultiHeadAttention(d, cfg.n_heads, rng))
        self.merge = self.child("merge", Linear(2 * d, d, rng))

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        c_ab, c_ba = self.block(a, b)
        r_a = self.attn_a(c_ab, c_ba)
        r_b = self.attn_b(c_ba, c_ab)
        pooled = r_b.mean(dim=-2, keepdims=True)
        t_a = r_a.shape[-2]
        tiled = Tensor(np.ones((t_a, 1))) @ pooled
        return self.merge(ad.concat([r_a, tiled], axis=-1))


class BiLstm(Module):
    """Standard LSTM run in both directions; per-step outputs concatenated."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.hidden = d_in, hidden
        for tag in ("fwd", "bwd"):
            self.param(f"wx_{tag}", glorot(rng, d_in, 4 * hidden))
            self.param(f"wh_{tag}", glorot(rng, hidden, 4 * hidden))
            bias = np.zeros(4 * hidden)
            bias[hidden : 2 * hidden] = 1.0  # forget gate opens early
            self.param(f"b_{tag}", bias)

    def _run(self, x: Tensor, tag: str, reverse: bool) -> list[Tensor]:
        batch, t_len = x.shape[0], x.shape[1]
        wx, wh, b = self._params[f"wx_{tag}"], self._params[f"wh_{tag}"], self._params[f"b_{tag}"]
        h = Tensor(np.zeros((batch, self.hidden)))
        c = Tensor(np.zeros((batch, self.hidden)))
        hh = self.hidden
        outputs: list[Tensor | None] = [None] * t_len
        steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in steps:
            z = x[:, t, :] @ wx + h @ wh + b
            i = ad.sigmoid(z[:, :hh])
            f = ad.sigmoid(z[:, hh : 2 * hh])
            g = ad.tanh(z[:, 2 * hh : 3 * hh])
            o = ad.sigmoid(z[:, 3 * hh :])
            c = f * c + i * g
            h = o * ad.tanh(c)
            outputs[t] = h
        return outputs

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"bilstm expects feature dim {self.d_in}, got {x.shape}")
        fwd = self._run(x, "fwd", reverse=False)
        bwd = self._run(x, "bwd", reverse=True)
        steps = [
            ad.concat([f, b], axis=-1).reshape((x.shape[0], 1, 2 * self.hidden))
            for f, b in zip(fwd, bwd)
        ]
        out = ad.concat(steps, axis=1)
        return out.reshape(out.shape[1:]) if squeeze else out


class ConvBlock(Module):
    """Valid 2-d conv + bias + relu over a single-channel (T, F) map, then a
    per-timestep flatten and linear projection to the model dim."""

    def __init__(self, cfg: ConvBlockConfig, in_features: int, d_model: int, rng: np.random.Generator):
        super().__init__()
        kh, kw = cfg.kernel
        self.cfg = cfg
        self.in_features = in_features
        if in_features < kw:
            raise ParameterError(f"in_features {in_features} smaller than kernel width {kw}")
        self.f_out = (in_features - kw) // cfg.stride[1] + 1
        fan_in = kh * kw
        self.kernel = self.param("kernel", glorot(rng, fan_in, cfg.out_channels, (kh, kw, cfg.out_channels)))
        self.bias = self.param("bias", np.zeros(cfg.out_channels))
        self.proj = self.child("proj", Linear(self.f_out * cfg.out_channels, d_model, rng))

    def feature_map(self, x: Tensor) -> Tensor:
        """(..., T, F) -> (..., T', F', C) after bias and relu."""
        return ad.relu(ad.conv2d(x, self.kernel, self.cfg.stride) + self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        fmap = self.feature_map(x)
        flat = fmap.reshape(fmap.shape[:-2] + (self.f_out * self.cfg.out_channels,))
        return self.proj(flat)


class FcStack(Module):
    """Affine + tanh layers, e.g. 103 -> 128 -> 64."""

    def __init__(self, d_in: int, dims: list[int], rng: np.random.Generator):
        super().__init__()
        self.dims = [d_in] + list(dims)
        self.layers = [
            self.child(f"fc{i}", Linear(self.dims[i], self.dims[i + 1], rng))
            for i in range(len(self.dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ad.tanh(layer(x))
        return x


class AmSoftmax(Module):
    """Cosine classifier with additive margin on the true class."""

    def __init__(self, cfg: AmSoftmaxConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.weight = self.param("weight", glorot(rng, cfg.embed_dim, cfg.n_classes, (cfg.n_classes, cfg.embed_dim)))

    def _normalize(self, x: Tensor) -> Tensor:
        norms = np.sqrt(np.sum(x.data**2, axis=-1))
        if np.any(norms < 1e-12):
            raise NumericError("zero-norm row cannot be L2-normalized")
        sumsq = (x * x).sum(dim=-1, keepdims=True)
        return x * sumsq**-0.5

    def cosines(self, embeddings: Tensor) -> Tensor:
        """(B, embed_dim) -> (B, n_classes) cosine similarities."""
        e = self._normalize(embeddings)
        w = self._normalize(self.weight)
        return e @ ad.transpose(w)

    def __call__(self, embeddings: Tensor, labels: np.ndarray, margin: float | None = None) -> tuple[Tensor, Tensor]:
        """Mean AM-Softmax loss plus the scaled margin-adjusted logits."""
        labels = np.asarray(labels)
        if labels.ndim != 1 or len(labels) != embeddings.shape[0]:
            raise ShapeError(f"labels {labels.shape} vs embeddings {embeddings.shape}")
        if labels.min() < 0 or labels.max() >= self.cfg.n_classes:
            raise ParameterError("label out of range")
        m = self.cfg.margin if margin is None else margin
        onehot = np.zeros((len(labels), self.cfg.n_classes))
        onehot[np.arange(len(labels)), labels] = 1.0
        cos = self.cosines(embeddings)
        logits = (cos - Tensor(onehot * m)) * Tensor(self.cfg.scale)
        probs = ad.softmax(logits, dim=-1)
        picked = (probs * Tensor(onehot)).sum(dim=-1)
        loss = -ad.log(picked).mean()
        return loss, logits
