"""Siamese patch scorer trained with a squared hinge ranking loss.

The scorer is a small stack of 3x3 convolutions, ReLUs, a global average pool
and a dense head, implemented directly on numpy arrays in NHWC layout with
hand-written backward passes. Both branches of the Siamese pair share one
set of weights; gradients from the two branches are summed.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptData,
    DivergenceDetected,
    EmptyBatch,
    EmptySplit,
    ShapeMismatch,
    UnknownArch,
    VersionMismatch,
)
from .imaging import PATCH_SIZE, Patch

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.1

# layer specs: ("conv", in_ch, out_ch, stride) | ("relu",) | ("gap",) | ("dense", in, out)
ARCHS: dict[str, list[tuple]] = {
    "small-v1": [
        ("conv", 3, 8, 2), ("relu",),
        ("conv", 8, 16, 2), ("relu",),
        ("conv", 16, 32, 2), ("relu",),
        ("gap",), ("dense", 32, 1),
    ],
    # tiny variants for gradient checks and smoke tests
    "tiny-v1": [("conv", 3, 2, 2), ("relu",), ("gap",), ("dense", 2, 1)],
    "tiny-v2": [
        ("conv", 3, 2, 2), ("relu",),
        ("conv", 2, 3, 1), ("relu",),
        ("gap",), ("dense", 3, 1),
    ],
    "tiny-v3": [("conv", 3, 4, 1), ("relu",), ("gap",), ("dense", 4, 2), ("relu",), ("dense", 2, 1)],
}


def param_shapes(layers) -> list[tuple[int, ...]]:
    shapes = []
    for spec in layers:
        if spec[0] == "conv":
            _, cin, cout, _ = spec
            shapes += [(cout, cin, 3, 3), (cout,)]
        elif spec[0] == "dense":
            _, nin, nout = spec
            shapes += [(nout, nin), (nout,)]
    return shapes


@dataclass
class ScorerModel:
    arch_id: str
    layers: list[tuple]
    params: list[np.ndarray]
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        expected = param_shapes(self.layers)
        got = [p.shape for p in self.params]
        if got != expected:
            raise ShapeMismatch(f"{self.arch_id}: weight shapes {got} != {expected}")

    @property
    def dtype(self):
        return self.params[0].dtype

    def copy(self) -> "ScorerModel":
        return ScorerModel(self.arch_id, list(self.layers), [p.copy() for p in self.params], self.epsilon)

    def astype(self, dtype) -> "ScorerModel":
        return ScorerModel(self.arch_id, list(self.layers),
                           [p.astype(dtype) for p in self.params], self.epsilon)

    def score(self, x: np.ndarray) -> np.ndarray:
        """Scores for a batch of patches shaped (N, 32, 32, 3)."""
        out, _ = _forward(self, np.asarray(x, dtype=self.dtype), keep=False)
        return out

    def n_weights(self) -> int:
        return sum(p.size for p in self.params)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0, batch_size and eval_every >= 1")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


def init_model(arch_id: str, seed: int, epsilon: float = DEFAULT_EPSILON,
               dtype=np.float32) -> ScorerModel:
    """He-normal weights, zero biases."""
    if arch_id not in ARCHS:
        raise UnknownArch(f"unknown architecture {arch_id!r}")
    layers = ARCHS[arch_id]
    rng = np.random.default_rng(seed)
    params = []
    for shape in param_shapes(layers):
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            params.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))
    return ScorerModel(arch_id, list(layers), [p.astype(dtype) for p in params], epsilon)


# -- layer kernels ----------------------------------------------------------


def _conv_out(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = _conv_out(h, stride), _conv_out(w, stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, ho, wo, 3, 3, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky : ky + stride * (ho - 1) + 1 : stride,
                                          kx : kx + stride * (wo - 1) + 1 : stride, :]
    return cols.reshape(n * ho * wo, 9 * c)


def _col2im(dcols: np.ndarray, shape, stride: int) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = _conv_out(h, stride), _conv_out(w, stride)
    dcols = dcols.reshape(n, ho, wo, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + stride * (ho - 1) + 1 : stride,
                kx : kx + stride * (wo - 1) + 1 : stride, :] += dcols[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _conv_matrix(weight: np.ndarray) -> np.ndarray:
    cout, cin = weight.shape[:2]
    # rows ordered (ky, kx, cin) to match _im2col
    return weight.transpose(2, 3, 1, 0).reshape(9 * cin, cout)


def _forward(model: ScorerModel, x: np.ndarray, keep: bool):
    """Run the layer stack; returns (scores, cache) where cache feeds backward."""
    if x.ndim != 4 or x.shape[3] != 3:
        raise ShapeMismatch(f"expected (N, H, W, 3) input, got {x.shape}")
    cache = []
    pi = 0
    for spec in model.layers:
        kind = spec[0]
        if kind == "conv":
            stride = spec[3]
            w, b = model.params[pi], model.params[pi + 1]
            pi += 2
            n, h, wd, _ = x.shape
            cols = _im2col(x, stride)
            y = cols @ _conv_matrix(w) + b
            y = y.reshape(n, _conv_out(h, stride), _conv_out(wd, stride), -1)
            if keep:
                cache.append((cols, x.shape))
            x = y
        elif kind == "relu":
            if keep:
                cache.append(x > 0)
            x = np.maximum(x, 0)
        elif kind == "gap":
            if keep:
                cache.append(x.shape)
            x = x.mean(axis=(1, 2))
        elif kind == "dense":
            w, b = model.params[pi], model.params[pi + 1]
            pi += 2
            if keep:
                cache.append(x)
            x = x @ w.T + b
    return x[:, 0], cache


def _backward(model: ScorerModel, cache, dscore: np.ndarray) -> list[np.ndarray]:
    grads = [None] * len(model.params)
    pi = len(model.params)
    g = dscore[:, None]
    for spec, saved in zip(reversed(model.layers), reversed(cache)):
        kind = spec[0]
        if kind == "dense":
            pi -= 2
            w = model.params[pi]
            grads[pi] = g.T @ saved
            grads[pi + 1] = g.sum(axis=0)
            g = g @ w
        elif kind == "gap":
            n, h, w_, c = saved
            g = np.broadcast_to(g[:, None, None, :] / (h * w_), saved)
        elif kind == "relu":
            g = g * saved
        elif kind == "conv":
            pi -= 2
            cols, in_shape = saved
            w = model.params[pi]
            cout, cin = w.shape[:2]
            g2 = g.reshape(-1, cout)
            dwm = cols.T @ g2
            grads[pi] = dwm.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
            grads[pi + 1] = g2.sum(axis=0)
            if pi > 0:
                g = _col2im(g2 @ _conv_matrix(w).T, in_shape, spec[3])
    return grads


# -- public scoring / loss API ----------------------------------------------


def _patch_array(patch) -> np.ndarray:
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    if data.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise ShapeMismatch(f"patch must be 32x32x3, got {data.shape}")
    return data


def forward(model: ScorerModel, patch) -> float:
    return float(model.score(_patch_array(patch)[None])[0])


def hinge(score_a, score_b, epsilon: float):
    return np.maximum(0.0, np.asarray(score_a) + epsilon - np.asarray(score_b))


def _pair_arrays(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2:
        xa, xb = (np.asarray(v) for v in pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise EmptyBatch("empty batch")
        xa = np.stack([_patch_array(p.patch_a) for p in pairs])
        xb = np.stack([_patch_array(p.patch_b) for p in pairs])
    if len(xa) == 0:
        raise EmptyBatch("empty batch")
    if xa.shape != xb.shape:
        raise ShapeMismatch("pair arrays differ in shape")
    return xa, xb


def pair_loss(model: ScorerModel, pair, epsilon: float | None = None) -> float:
    eps = model.epsilon if epsilon is None else epsilon
    sa = forward(model, pair.patch_a)
    sb = forward(model, pair.patch_b)
    return float(hinge(sa, sb, eps) ** 2)


def batch_loss(model: ScorerModel, pairs, epsilon: float | None = None) -> float:
    """Mean pair loss; ``pairs`` is a list of OrderedPair or an (xa, xb) tuple."""
    eps = model.epsilon if epsilon is None else epsilon
    xa, xb = _pair_arrays(pairs)
    scores = model.score(np.concatenate([xa, xb]))
    n = len(xa)
    return float(np.mean(hinge(scores[:n], scores[n:], eps) ** 2))


def backward(model: ScorerModel, pairs, epsilon: float | None = None):
    """Loss and exact gradients of the mean squared hinge over a batch."""
    eps = model.epsilon if epsilon is None else epsilon
    xa, xb = _pair_arrays(pairs)
    n = len(xa)
    x = np.concatenate([xa, xb]).astype(model.dtype, copy=False)
    scores, cache = _forward(model, x, keep=True)
    h = hinge(scores[:n], scores[n:], eps)
    loss = float(np.mean(h * h))
    up = (2.0 / n) * h
    dscore = np.concatenate([up, -up]).astype(model.dtype, copy=False)
    return loss, _backward(model, cache, dscore)


# -- training ---------------------------------------------------------------


def ordering_tp(scores_a: np.ndarray, scores_b: np.ndarray, tie_tol: float = 1e-9) -> float:
    """Percentage of pairs with score_a strictly below score_b (ties fail)."""
    if len(scores_a) == 0:
        raise EmptySplit("no pairs to evaluate")
    ok = (np.asarray(scores_b, dtype=np.float64) - np.asarray(scores_a, dtype=np.float64)) > tie_tol
    return 100.0 * float(np.mean(ok))


def _score_all(model: ScorerModel, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    return np.concatenate([model.score(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def evaluate_tp(model: ScorerModel, xa: np.ndarray, xb: np.ndarray) -> float:
    return ordering_tp(_score_all(model, xa), _score_all(model, xb))


@dataclass
class TrainResult:
    model: ScorerModel
    history: list[dict] = field(default_factory=list)


def train_arrays(model: ScorerModel, train_data, val_data, cfg: TrainConfig):
    """SGD with momentum over in-memory pair arrays.

    ``train_data`` and ``val_data`` are (xa, xb) tuples. Returns the weights
    with the best validation TP and the evaluation history.
    """
    xa, xb = train_data
    va, vb = val_data
    if len(xa) == 0:
        raise EmptySplit("training split is empty")
    if len(va) == 0:
        raise EmptySplit("validation split is empty")
    model = model.copy()
    model.epsilon = cfg.epsilon
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history

    dtype = model.dtype
    xa = xa.astype(dtype, copy=False)
    xb = xb.astype(dtype, copy=False)
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in model.params]
    best_tp, best = -1.0, model.copy()
    n = len(xa)
    step = 0
    loss_sum, loss_count = 0.0, 0

    def evaluate(epoch):
        nonlocal best_tp, best, loss_sum, loss_count
        tp = evaluate_tp(model, va, vb)
        history.append({"batch": step, "epoch": epoch,
                        "train_loss": loss_sum / max(loss_count, 1), "val_tp": tp})
        log.info("batch %d epoch %d loss %.5f val TP %.2f%%", step, epoch, history[-1]["train_loss"], tp)
        if tp > best_tp:
            best_tp, best = tp, model.copy()
        loss_sum, loss_count = 0.0, 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            loss, grads = backward(model, (xa[idx], xb[idx]), cfg.epsilon)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise DivergenceDetected(f"non-finite loss at batch {step + 1}")
            for p, g, v in zip(model.params, grads, velocity):
                v *= cfg.momentum
                v -= cfg.learning_rate * (g + cfg.weight_decay * p)
                p += v
            step += 1
            loss_sum += loss
            loss_count += 1
            if step % cfg.eval_every == 0:
                evaluate(epoch)
    if step % cfg.eval_every != 0:
        evaluate(cfg.epochs)
    return best, history


def train(model: ScorerModel, manifest, cfg: TrainConfig):
    """Train on a corpus manifest's train split, selecting by val TP."""
    train_xa, train_xb, _, _ = manifest.load_patches("train")
    val_xa, val_xb, _, _ = manifest.load_patches("val")
    return train_arrays(model, (train_xa, train_xb), (val_xa, val_xb), cfg)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"RKDS"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ScorerModel, path) -> None:
    arch = model.arch_id.encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(arch)), arch, struct.pack("<d", model.epsilon)]
    for p in model.params:
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    data = b"".join(chunks)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptData("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ScorerModel:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise VersionMismatch("not a rankdist checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        arch_id = r.take(n).decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptData("arch id is not valid UTF-8") from None
    (epsilon,) = r.unpack("<d")
    if arch_id not in ARCHS:
        raise UnknownArch(f"checkpoint uses unknown architecture {arch_id!r}")
    layers = ARCHS[arch_id]
    params = []
    for shape in param_shapes(layers):
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I") if rank else ()
        if tuple(dims) != shape:
            raise ShapeMismatch(f"stored tensor {dims} does not match {shape}")
        count = int(np.prod(shape))
        params.append(np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32))
    if r.pos != len(data):
        raise CorruptData("trailing bytes after last tensor")
    return ScorerModel(arch_id, list(layers), params, epsilon)
