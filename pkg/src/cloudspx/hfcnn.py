"""Hierarchical-fusion CNN trained from scratch with momentum SGD.

Backbone: three 5x5 convolution stages (32, 32, 64 filters) with 3x3
stride-2 pooling between them. The post-ReLU map of each stage is fused by
nearest-neighbor upsampling the deeper maps to 32x32 and concatenating
channel-wise; global average pooling of the fused 128-channel map yields the
feature vector fed to a single linear layer and softmax.

All layers carry analytic backward passes; training is plain momentum SGD.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_DIM = 128
N_CLASSES = 4
INPUT_SIZE = 32


class ModelFormatError(Exception):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    max_iterations: int = 10000
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.max_iterations < 1 or self.batch_size < 1:
            raise ValueError("max_iterations and batch_size must be positive")


# ---------------------------------------------------------------------------
# layers


def _scratch(store, name, shape, dtype, fill=None):
    # persistent per-layer work buffer; large conv/pool temporaries otherwise
    # churn through mmap+page-fault on every step
    buf = store.get(name)
    if buf is None or buf.shape != shape or buf.dtype != dtype:
        if fill is None:
            buf = np.empty(shape, dtype=dtype)
        else:
            buf = np.full(shape, fill, dtype=dtype)
        store[name] = buf
    return buf


class Conv2D:
    """Same-padded KxK convolution via im2col and a single GEMM.

    Patch columns are laid out channel-major so the weight matrix multiplies
    them without a transpose copy. Returns a [B,C,H,W] view of the GEMM
    output; the input gradient is a view into a scratch buffer valid until
    the next backward call. Set need_input_grad False to skip the
    input-gradient GEMM at the first layer.
    """

    def __init__(self, c_in, c_out, kernel=5, pad=2, dtype=np.float32, rng=None):
        self.c_in, self.c_out, self.kernel, self.pad = c_in, c_out, kernel, pad
        limit = math.sqrt(6.0 / (c_in * kernel * kernel))
        rng = rng or np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, (c_out, c_in, kernel, kernel)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self.need_input_grad = True
        self._cache = None
        self._bufs = {}

    def forward(self, x):
        b, c, h, w = x.shape
        k, p = self.kernel, self.pad
        # border stays zero across reuse; only the interior is rewritten
        xp = _scratch(self._bufs, "xp", (b, c, h + 2 * p, w + 2 * p), x.dtype, fill=0)
        xp[:, :, p : p + h, p : p + w] = x
        xpt = xp.transpose(1, 0, 2, 3)
        cols = _scratch(self._bufs, "cols", (c, k * k, b, h, w), x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i * k + j] = xpt[:, :, i : i + h, j : j + w]
        cols2 = cols.reshape(c * k * k, b * h * w)
        out = self.w.reshape(self.c_out, -1) @ cols2
        out += self.b[:, None]
        self._cache = (x.shape, cols2)
        return out.reshape(self.c_out, b, h, w).transpose(1, 0, 2, 3)

    def backward(self, dout):
        (xshape, cols2) = self._cache
        b, c, h, w = xshape
        k, p = self.kernel, self.pad
        dmat = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(
            self.c_out, b * h * w)
        self.dw = (dmat @ cols2.T).reshape(self.w.shape)
        self.db = dmat.sum(axis=1)
        if not self.need_input_grad:
            return None
        dcols2 = self.w.reshape(self.c_out, -1).T @ dmat
        dcols = dcols2.reshape(c, k * k, b, h, w)
        dxp = _scratch(self._bufs, "dxp", (c, b, h + 2 * p, w + 2 * p), dout.dtype)
        dxp.fill(0)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, i * k + j]
        return dxp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3)


def _pool_out(n, k, s):
    # Caffe-style ceil geometry; windows overhanging the border are clipped
    return max(1, -(-(n - k) // s) + 1)


class Pool:
    """3x3 stride-2 max or average pooling, ceil output size, clipped windows.

    Average windows divide by their clipped size. Max backward routes the
    gradient to the first (row-major) maximal element of each window.
    """

    def __init__(self, kind, kernel=3, stride=2):
        assert kind in ("max", "avg")
        self.kind, self.kernel, self.stride = kind, kernel, stride
        self._cache = None
        self._bufs = {}

    def _windows(self, xp, oh, ow):
        b, c = xp.shape[:2]
        sb, sc, sh, sw = xp.strides
        k, s = self.kernel, self.stride
        return np.lib.stride_tricks.as_strided(
            xp, shape=(b, c, oh, ow, k, k),
            strides=(sb, sc, sh * s, sw * s, sh, sw), writeable=False)

    def forward(self, x):
        b, c, h, w = x.shape
        k, s = self.kernel, self.stride
        oh, ow = _pool_out(h, k, s), _pool_out(w, k, s)
        ph, pw = (oh - 1) * s + k, (ow - 1) * s + k
        if self.kind == "max":
            # pad with -inf so clipped border windows still take a real max
            xp = _scratch(self._bufs, "xp", (b, c, ph, pw), x.dtype, fill=-np.inf)
            xp[:, :, :h, :w] = x
            win = _scratch(self._bufs, "win", (b, c, oh, ow, k * k), x.dtype)
            np.copyto(win.reshape(b, c, oh, ow, k, k), self._windows(xp, oh, ow))
            am = win.argmax(axis=-1)
            out = np.take_along_axis(win, am[..., None], -1)[..., 0]
            rows = (np.arange(oh) * s)[None, None, :, None] + am // k
            cols = (np.arange(ow) * s)[None, None, None, :] + am % k
            self._cache = (x.shape, rows * w + cols)
            return out
        xp = _scratch(self._bufs, "xp", (b, c, ph, pw), x.dtype, fill=0)
        xp[:, :, :h, :w] = x
        sums = np.zeros((b, c, oh, ow), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                sums += xp[:, :, di : di + oh * s : s, dj : dj + ow * s : s]
        counts_h = np.minimum(np.arange(oh) * s + k, h) - np.arange(oh) * s
        counts_w = np.minimum(np.arange(ow) * s + k, w) - np.arange(ow) * s
        counts = (counts_h[:, None] * counts_w[None, :]).astype(x.dtype)
        self._cache = (x.shape, counts)
        sums /= counts
        return sums

    def backward(self, dout):
        """Input gradient; for avg pooling it is a view valid until recall."""
        xshape, aux = self._cache
        b, c, h, w = xshape
        k, s = self.kernel, self.stride
        oh, ow = dout.shape[2], dout.shape[3]
        if self.kind == "max":
            offsets = (np.arange(b * c) * (h * w)).reshape(b, c, 1, 1)
            flat_idx = (aux + offsets).ravel()
            dx = np.bincount(flat_idx, weights=dout.ravel(), minlength=b * c * h * w)
            return dx.reshape(xshape).astype(dout.dtype, copy=False)
        ph, pw = (oh - 1) * s + k, (ow - 1) * s + k
        dpad = _scratch(self._bufs, "dpad", (b, c, ph, pw), dout.dtype)
        dpad.fill(0)
        dnorm = dout / aux
        for di in range(k):
            for dj in range(k):
                dpad[:, :, di : di + oh * s : s, dj : dj + ow * s : s] += dnorm
        return dpad[:, :, :h, :w]


class ReLU:
    """Clamps in place; callers hand over freshly produced activations."""

    def __init__(self):
        self._mask = None

    def forward(self, x):
        np.maximum(x, x.dtype.type(0), out=x)
        self._mask = x > 0
        return x

    def backward(self, dout):
        np.multiply(dout, self._mask, out=dout)
        return dout


class UpsampleNearest:
    """Integer-factor nearest-neighbor upsampling: out[i,j] = in[i//f, j//f]."""

    def __init__(self, factor):
        self.factor = factor

    def forward(self, x):
        f = self.factor
        return np.repeat(np.repeat(x, f, axis=2), f, axis=3)

    def backward(self, dout):
        f = self.factor
        dx = dout[:, :, 0::f, 0::f].copy()
        for di in range(f):
            for dj in range(f):
                if di or dj:
                    dx += dout[:, :, di::f, dj::f]
        return dx


class GlobalAvgPool:
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._shape
        dx = dout / dout.dtype.type(h * w)
        return np.broadcast_to(dx[:, :, None, None], self._shape).copy()


class Linear:
    def __init__(self, n_in, n_out, dtype=np.float32, rng=None):
        limit = math.sqrt(6.0 / n_in)
        rng = rng or np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, (n_out, n_in)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dout):
        self.dw = dout.T @ self._x
        self.db = dout.sum(axis=0)
        return dout @ self.w


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Returns (mean loss, probs, dlogits)."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= logits.dtype.type(n)
    return loss, probs, dlogits


# ---------------------------------------------------------------------------
# model


def fuse_features(f1: np.ndarray, f2: np.ndarray, f3: np.ndarray) -> np.ndarray:
    """Channel-wise fusion [f1 | up2(f2) | up4(f3)] at the stage-1 resolution."""
    b = f1.shape[0]
    if f1.shape != (b, 32, 32, 32) or f2.shape != (b, 32, 16, 16) or f3.shape != (b, 64, 8, 8):
        raise ValueError(
            f"stage map shapes {f1.shape}, {f2.shape}, {f3.shape} do not match "
            "[B,32,32,32], [B,32,16,16], [B,64,8,8]"
        )
    up2 = UpsampleNearest(2).forward(f2)
    up4 = UpsampleNearest(4).forward(f3)
    return np.concatenate([f1, up2, up4], axis=1)


class HfcnnModel:
    """The fusion CNN. Same object serves training and frozen inference."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.iterations = 0
        self.conv1 = Conv2D(3, 32, dtype=dtype, rng=rng)
        self.conv1.need_input_grad = False  # nothing upstream consumes dx
        self.conv2 = Conv2D(32, 32, dtype=dtype, rng=rng)
        self.conv3 = Conv2D(32, 64, dtype=dtype, rng=rng)
        self.relu1, self.relu2, self.relu3 = ReLU(), ReLU(), ReLU()
        self.pool1 = Pool("max")
        self.pool2 = Pool("avg")
        self.head = Linear(FEATURE_DIM, N_CLASSES, dtype=dtype, rng=rng)
        self._velocity = None
        self._cache = None

    # parameter (value, grad) pairs in declaration order
    def param_layers(self):
        return [self.conv1, self.conv2, self.conv3, self.head]

    def parameters(self):
        out = []
        for layer in self.param_layers():
            out.append((layer, "w"))
            out.append((layer, "b"))
        return out

    def forward(self, x: np.ndarray):
        """Returns (probs [B,4], features [B,128]). Caches for backward.

        The feature vector is the global average of the fused map
        [f1 | up2(f2) | up4(f3)]; averaging commutes with nearest-neighbor
        upsampling, so the taps are pooled directly and the 128-channel map
        is never materialized.
        """
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != (3, INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"expected [B,3,32,32] input, got {x.shape}")
        a1 = self.relu1.forward(self.conv1.forward(x))
        p1 = self.pool1.forward(a1)
        a2 = self.relu2.forward(self.conv2.forward(p1))
        p2 = self.pool2.forward(a2)
        a3 = self.relu3.forward(self.conv3.forward(p2))
        feats = np.concatenate(
            [a1.mean(axis=(2, 3)), a2.mean(axis=(2, 3)), a3.mean(axis=(2, 3))],
            axis=1)
        logits = self.head.forward(feats)
        logp = log_softmax(logits)
        probs = np.exp(logp)
        self._cache = (logp, probs, a1.shape, a2.shape, a3.shape)
        return probs, feats

    def loss_and_backward(self, labels: np.ndarray) -> float:
        """Cross-entropy on the cached forward pass; fills parameter grads."""
        logp, probs, s1, s2, s3 = self._cache
        n = probs.shape[0]
        loss = float(-logp[np.arange(n), labels].mean())
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1
        dlogits /= probs.dtype.type(n)

        dfeats = self.head.backward(dlogits)
        # per-tap head gradient: broadcast dfeats scaled by upsample area over
        # fused map area; the ratios are powers of two, so this matches the
        # upsample+GAP composition bitwise
        hw = self.dtype.type(s1[2] * s1[3])
        da1_head = np.broadcast_to((dfeats[:, :32] / hw)[:, :, None, None], s1)
        da2_head = np.broadcast_to(
            (dfeats[:, 32:64] * (self.dtype.type(4) / hw))[:, :, None, None], s2)
        da3 = np.ascontiguousarray(np.broadcast_to(
            (dfeats[:, 64:] * (self.dtype.type(16) / hw))[:, :, None, None], s3))

        dp2 = self.conv3.backward(self.relu3.backward(da3))
        da2 = self.pool2.backward(dp2)
        da2 += da2_head
        dp1 = self.conv2.backward(self.relu2.backward(da2))
        da1 = self.pool1.backward(dp1)
        da1 += da1_head
        dx = self.conv1.backward(self.relu1.backward(da1))
        return loss, dx

    def sgd_update(self, lr: float, momentum: float) -> None:
        """v <- momentum*v - lr*g; theta <- theta + v."""
        if self._velocity is None:
            self._velocity = [
                np.zeros_like(getattr(layer, name)) for layer, name in self.parameters()
            ]
        for v, (layer, name) in zip(self._velocity, self.parameters()):
            g = getattr(layer, "d" + name)
            v *= self.dtype.type(momentum)
            v -= self.dtype.type(lr) * g
            getattr(layer, name).__iadd__(v)


def train_step(model: HfcnnModel, batch: np.ndarray, labels: np.ndarray,
               config: TrainConfig) -> float:
    """One forward/backward/update step; returns the batch cross-entropy."""
    if batch.shape[0] != labels.shape[0]:
        raise ValueError("batch and labels are misaligned")
    model.forward(batch)
    loss, _ = model.loss_and_backward(labels)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at iteration {model.iterations}")
    model.sgd_update(config.lr, config.momentum)
    model.iterations += 1
    return loss


def train(model: HfcnnModel, data, config: TrainConfig,
          stop_at_accuracy: float | None = None) -> dict:
    """Run config.max_iterations momentum-SGD steps over shuffled batches.

    `data` is (pixels [N,3,32,32], labels [N]) or a patchset.Manifest. Batches
    are drawn from a fresh seeded permutation each epoch. History records the
    per-step loss and batch accuracy. With stop_at_accuracy set, training ends
    early once every batch of a full epoch meets that accuracy.
    """
    if hasattr(data, "entries"):
        from .patchset import load_batch

        if len(data.entries) == 0:
            raise ValueError("empty training manifest")
        b = load_batch(data, range(len(data.entries)))
        pixels, labels = b.pixels, b.labels
    else:
        pixels, labels = data
    n = pixels.shape[0]
    if n == 0:
        raise ValueError("empty training set")

    rng = np.random.default_rng(config.seed)
    history = {"loss": [], "accuracy": []}
    steps = 0
    per_epoch = -(-n // config.batch_size)
    epoch_hits = 0
    while steps < config.max_iterations:
        perm = rng.permutation(n)
        epoch_hits = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            bx, by = pixels[idx], labels[idx]
            model.forward(bx)
            probs = model._cache[1]
            acc = float((probs.argmax(axis=1) == by).mean())
            loss, _ = model.loss_and_backward(by)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {steps}")
            model.sgd_update(config.lr, config.momentum)
            model.iterations += 1
            history["loss"].append(loss)
            history["accuracy"].append(acc)
            steps += 1
            if stop_at_accuracy is not None and acc >= stop_at_accuracy:
                epoch_hits += 1
            if steps >= config.max_iterations:
                break
        if stop_at_accuracy is not None and epoch_hits >= per_epoch:
            break
    return history


# ---------------------------------------------------------------------------
# serialization (HFCN format)

MAGIC = b"HFCN"
VERSION = 1


def serialize(model: HfcnnModel) -> bytes:
    header = {
        "shapes": {
            "conv1.w": [32, 3, 5, 5], "conv1.b": [32],
            "conv2.w": [32, 32, 5, 5], "conv2.b": [32],
            "conv3.w": [64, 32, 5, 5], "conv3.b": [64],
            "head.w": [N_CLASSES, FEATURE_DIM], "head.b": [N_CLASSES],
        },
        "seed": model.seed,
        "iterations": model.iterations,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", VERSION)
    blob += struct.pack("<I", len(hbytes))
    blob += hbytes
    for layer, name in model.parameters():
        blob += np.ascontiguousarray(getattr(layer, name), dtype="<f4").tobytes()
    return bytes(blob)


def deserialize(data: bytes) -> HfcnnModel:
    if len(data) < 9:
        raise ModelFormatError("truncated model file")
    if data[:4] != MAGIC:
        raise ModelFormatError("bad magic")
    version = data[4]
    if version > VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    (hlen,) = struct.unpack_from("<I", data, 5)
    if len(data) < 9 + hlen:
        raise ModelFormatError("truncated header")
    header = json.loads(data[9 : 9 + hlen].decode())
    model = HfcnnModel(seed=header.get("seed", 0), dtype=np.float32)
    model.iterations = header.get("iterations", 0)
    off = 9 + hlen
    for layer, name in model.parameters():
        arr = getattr(layer, name)
        nbytes = arr.size * 4
        if off + nbytes > len(data):
            raise ModelFormatError("truncated parameter payload")
        vals = np.frombuffer(data, dtype="<f4", count=arr.size, offset=off)
        setattr(layer, name, vals.reshape(arr.shape).astype(np.float32))
        off += nbytes
    return model


def save_model(model: HfcnnModel, path: str | Path) -> None:
    Path(path).write_bytes(serialize(model))


def load_model(path: str | Path) -> HfcnnModel:
    return deserialize(Path(path).read_bytes())
