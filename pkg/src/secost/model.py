"""WELS-Net: a fully convolutional weak-label tagger with segment-level outputs."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn

BASE_WIDTHS = {"b1": 64, "b2": 128, "b3": 256, "b4": 512, "l1": 2048, "l2": 1024, "l3": 1024}
POOL_SIZES = {"b1": 4, "b2": 2, "b3": 2, "b4": 2}
TIME_STRIDE = 32      # product of the block pool sizes
RECEPTIVE_ROWS = 3    # L1 kernel height, in pooled frames
MIN_FRAMES = TIME_STRIDE * RECEPTIVE_ROWS
N_MELS = 64

CKPT_MAGIC = b"WELS"
CKPT_VERSION = 1


class InvalidConfig(ValueError):
    pass


class InputTooShort(ValueError):
    pass


class CheckpointError(IOError):
    pass


class VersionMismatch(CheckpointError):
    pass


@dataclass
class WelsConfig:
    n_classes: int = 8
    width_multiplier: float = 0.125
    recording_pool: str = "mean"
    block_pool: str = "max"

    def widths(self) -> dict[str, int]:
        return {k: max(1, int(round(v * self.width_multiplier))) for k, v in BASE_WIDTHS.items()}

    def validate(self):
        if self.n_classes < 1:
            raise InvalidConfig("n_classes must be >= 1")
        if not self.width_multiplier > 0:
            raise InvalidConfig("width_multiplier must be positive")
        if self.recording_pool not in ("mean", "max"):
            raise InvalidConfig(f"recording_pool must be mean or max, not {self.recording_pool!r}")
        if self.block_pool not in ("max", "avg"):
            raise InvalidConfig(f"block_pool must be max or avg, not {self.block_pool!r}")
        return self


@dataclass
class SegmentOutput:
    probs: np.ndarray                 # (K, |C|)
    segment_duration_s: float = 0.96
    segment_stride_s: float = 0.32


def num_segments(frames: int) -> int:
    t = frames
    for size in POOL_SIZES.values():
        t //= size
    return t - RECEPTIVE_ROWS + 1


def segment_intervals(k: int, hop: float = 0.01) -> list[tuple[float, float]]:
    """(start, end) seconds covered by each of ``k`` segments at frame hop ``hop``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    stride = TIME_STRIDE * hop
    span = MIN_FRAMES * hop
    return [(round(i * stride, 9), round(i * stride + span, 9)) for i in range(k)]


class WelsNet:
    """Ordered layer stack B1-B4, L1-L4 and a recording-level pooling head."""

    def __init__(self, config: WelsConfig, seed: int = 0, dtype=np.float32):
        self.config = config.validate()
        self.seed = seed
        self.metadata: dict = {}
        rng = np.random.default_rng(seed)
        w = config.widths()
        layers: list[tuple[str, nn.Layer]] = []
        cin = 1
        for blk in ("b1", "b2", "b3", "b4"):
            for j in (1, 2):
                layers.append((f"{blk}.conv{j}", nn.Conv2d(cin, w[blk], 3, 1, 1, rng=rng, dtype=dtype)))
                layers.append((f"{blk}.bn{j}", nn.BatchNorm2d(w[blk], dtype=dtype)))
                layers.append((f"{blk}.relu{j}", nn.ReLU()))
                cin = w[blk]
            layers.append((f"{blk}.pool", nn.Pool2d(config.block_pool, POOL_SIZES[blk])))
        layers.append(("l1.conv", nn.Conv2d(cin, w["l1"], (3, 2), rng=rng, dtype=dtype)))
        layers.append(("l1.bn", nn.BatchNorm2d(w["l1"], dtype=dtype)))
        layers.append(("l1.relu", nn.ReLU()))
        layers.append(("l2.conv", nn.Conv2d(w["l1"], w["l2"], 1, rng=rng, dtype=dtype)))
        layers.append(("l2.bn", nn.BatchNorm2d(w["l2"], dtype=dtype)))
        layers.append(("l2.relu", nn.ReLU()))
        layers.append(("l3.conv", nn.Conv2d(w["l2"], w["l3"], 1, rng=rng, dtype=dtype)))
        layers.append(("l3.bn", nn.BatchNorm2d(w["l3"], dtype=dtype)))
        layers.append(("l3.relu", nn.ReLU()))
        # L4 feeds a log-loss, so it ends in a sigmoid rather than BN -> ReLU.
        layers.append(("l4.conv", nn.Conv2d(w["l3"], config.n_classes, 1, rng=rng, dtype=dtype)))
        layers.append(("l4.sigmoid", nn.Sigmoid()))
        self.layers = layers
        self.head = nn.SegmentPool(config.recording_pool)
        self.dtype = np.dtype(dtype)

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in {**self.parameters(), **self.buffers()}.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        expected = {**self.parameters(), **self.buffers()}
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise nn.ShapeMismatch(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in store:
                    v = np.asarray(state[f"{name}.{k}"])
                    if v.shape != store[k].shape:
                        raise nn.ShapeMismatch(f"{name}.{k}: expected {store[k].shape}, got {v.shape}")
                    store[k] = v.astype(self.dtype, copy=True)
            layer.zero_grad()

    def num_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def zero_grad(self):
        for _, layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        for _, layer in self.layers:
            layer.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def fingerprint(self) -> str:
        """Content hash of config and all tensors; keys soft-target caches."""
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- compute ----------------------------------------------------------------

    def forward_batch(self, x: np.ndarray, training: bool = False):
        """(N, 1, T, 64) -> (segment probs (N, C, K, 1), recording probs (N, C))."""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[3] != N_MELS:
            raise nn.ShapeMismatch(f"expected input (N, 1, T, {N_MELS}), got {x.shape}")
        if x.shape[2] < MIN_FRAMES:
            raise InputTooShort(f"{x.shape[2]} frames < minimum {MIN_FRAMES}")
        h = np.asarray(x, dtype=self.dtype)
        for name, layer in self.layers:
            h = layer.forward(h, training)
        seg = nn.check_finite(h, "l4")
        return seg, self.head.forward(seg, training)

    def backward(self, d_rec: np.ndarray, input_grad: bool = False):
        """Backpropagate a gradient w.r.t. recording probs into ``gradients()``.

        Returns d(input) when ``input_grad`` is set, else None.
        """
        self.layers[0][1].skip_input_grad = not input_grad
        g = self.head.backward(np.asarray(d_rec, dtype=self.dtype))
        for name, layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def predict(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = [self.forward_batch(x[i:i + batch_size])[1] for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def build(config: WelsConfig, seed: int = 0, dtype=np.float32) -> WelsNet:
    return WelsNet(config, seed=seed, dtype=dtype)


def forward(model: WelsNet, spec, mode: str = "eval"):
    """Run one log-mel spectrogram; returns ``(SegmentOutput, recording_probs)``."""
    values = spec.values if hasattr(spec, "values") else np.asarray(spec)
    if values.ndim != 2 or values.shape[1] != N_MELS:
        raise nn.ShapeMismatch(f"expected (frames, {N_MELS}) spectrogram, got {values.shape}")
    seg, rec = model.forward_batch(values[None, None], training=(mode == "train"))
    return SegmentOutput(probs=seg[0, :, :, 0].T.copy()), rec[0]


# -- checkpoint I/O -------------------------------------------------------------

def save(model: WelsNet, path, metadata: dict | None = None):
    """Atomically write a checkpoint (temp file + rename)."""
    path = Path(path)
    meta = dict(model.metadata)
    if metadata:
        meta.update(metadata)
    header = json.dumps({"config": asdict(model.config), "seed": model.seed, "metadata": meta},
                        sort_keys=True).encode("utf-8")
    tensors = sorted(model.state_dict().items())
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", 0, arr.ndim))  # dtype code 0 = f32
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    model.metadata = meta


def _read_checkpoint(buf: bytes):
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a WELS checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        (hlen,) = struct.unpack_from("<I", buf, 8)
        off = 12 + hlen
        header = json.loads(buf[12:off].decode("utf-8"))
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            if code != 0:
                raise CheckpointError(f"unsupported dtype code {code} for {name}")
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > len(buf):
                raise CheckpointError(f"truncated payload for {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
            off += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last tensor")
    return header, tensors


def load(path) -> WelsNet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    header, tensors = _read_checkpoint(buf)
    model = WelsNet(WelsConfig(**header["config"]), seed=header.get("seed", 0))
    model.load_state_dict(tensors)
    model.metadata = header.get("metadata", {})
    return model
