"""One-hidden-layer ReLU network with one logistic output per line.

The outputs are read as per-line marginals ``q(s_l = 1 | y)`` of a predictor
that factorizes across lines, so the training objective is a sum of binary
cross-entropies.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODEL_FORMAT_VERSION = 1
STD_FLOOR = 1e-8
LOG_CLAMP = 1e-12
PARAM_NAMES = ("W1", "b1", "W2", "b2")

_tokens = itertools.count()


class ModelFormatError(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class StaleCacheError(ValueError):
    """A forward cache was passed to backward with a different model."""


@dataclass(frozen=True, eq=False)
class MlpModel:
    W1: np.ndarray  # H x K
    b1: np.ndarray  # H
    W2: np.ndarray  # L x H
    b2: np.ndarray  # L
    feature_mean: np.ndarray  # K
    feature_std: np.ndarray  # K
    seed: int = 0
    grid_fingerprint: bytes = bytes(32)
    token: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        for name in PARAM_NAMES + ("feature_mean", "feature_std"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        h, k = self.W1.shape
        n_out = self.W2.shape[0]
        if (self.b1.shape != (h,) or self.W2.shape != (n_out, h) or self.b2.shape != (n_out,)
                or self.feature_mean.shape != (k,) or self.feature_std.shape != (k,)):
            raise DimensionMismatch("inconsistent parameter shapes")
        if np.any(self.feature_std < STD_FLOOR):
            raise ValueError("feature_std entries must be >= 1e-8")
        object.__setattr__(self, "token", next(_tokens))

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params: dict[str, np.ndarray]) -> MlpModel:
        return replace(self, **params)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MlpModel):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.grid_fingerprint == other.grid_fingerprint
            and all(
                getattr(self, n).shape == getattr(other, n).shape
                and getattr(self, n).tobytes() == getattr(other, n).tobytes()
                for n in PARAM_NAMES + ("feature_mean", "feature_std")
            )
        )


@dataclass(frozen=True, eq=False)
class ForwardCache:
    x: np.ndarray  # normalized input, B x K
    z1: np.ndarray  # hidden pre-activation
    a1: np.ndarray  # hidden activation
    q: np.ndarray  # output probabilities, B x L
    model_token: int


def init_model(dims: tuple[int, int, int], seed: int,
               grid_fingerprint: bytes = bytes(32)) -> MlpModel:
    """He-scaled hidden weights, ``1/sqrt(H)`` output weights, zero biases."""
    k, h, n_out = dims
    if min(dims) < 1:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    return MlpModel(
        W1=rng.normal(0.0, np.sqrt(2.0 / k), (h, k)),
        b1=np.zeros(h),
        W2=rng.normal(0.0, np.sqrt(1.0 / h), (n_out, h)),
        b2=np.zeros(n_out),
        feature_mean=np.zeros(k),
        feature_std=np.ones(k),
        seed=seed,
        grid_fingerprint=grid_fingerprint,
    )


def zero_model(dims: tuple[int, int, int], grid_fingerprint: bytes = bytes(32)) -> MlpModel:
    """All weights and biases zero: every output is exactly 0.5."""
    k, h, n_out = dims
    return MlpModel(np.zeros((h, k)), np.zeros(h), np.zeros((n_out, h)), np.zeros(n_out),
                    np.zeros(k), np.ones(k), 0, grid_fingerprint)


def fit_normalization(model: MlpModel, features: np.ndarray) -> MlpModel:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("need a nonempty 2-D feature matrix")
    if features.shape[1] != model.input_dim:
        raise DimensionMismatch(f"features have {features.shape[1]} columns, model expects {model.input_dim}")
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), STD_FLOOR)
    return replace(model, feature_mean=mean, feature_std=std)


def sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def forward(model: MlpModel, y: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Per-line probabilities for one feature vector (K,) or a batch (B, K)."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    x = np.atleast_2d(y)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"expected {model.input_dim} features, got shape {y.shape}")
    x = (x - model.feature_mean) / model.feature_std
    z1 = x @ model.W1.T + model.b1
    a1 = np.maximum(z1, 0.0)
    q = sigmoid(a1 @ model.W2.T + model.b2)
    cache = ForwardCache(x, z1, a1, q, model.token)
    return (q[0] if single else q), cache


def loss(q: np.ndarray, s: np.ndarray) -> float:
    """Binary cross-entropy summed over lines; averaged over rows for a batch."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if q.shape != s.shape:
        raise DimensionMismatch(f"probabilities {q.shape} and labels {s.shape} differ in shape")
    ll = s * np.log(np.maximum(q, LOG_CLAMP)) + (1.0 - s) * np.log(np.maximum(1.0 - q, LOG_CLAMP))
    per_sample = -np.atleast_2d(ll).sum(axis=1)
    return float(per_sample.mean())


def backward(model: MlpModel, cache: ForwardCache, s: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of ``loss(q, s)`` (batch mean) with respect to every parameter."""
    if cache.model_token != model.token:
        raise StaleCacheError("forward cache was produced by a different model")
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape != cache.q.shape:
        raise DimensionMismatch(f"labels {s.shape} do not match outputs {cache.q.shape}")
    dz2 = (cache.q - s) / len(s)
    da1 = dz2 @ model.W2
    dz1 = np.where(cache.z1 > 0, da1, 0.0)
    return {
        "W1": dz1.T @ cache.x,
        "b1": dz1.sum(axis=0),
        "W2": dz2.T @ cache.a1,
        "b2": dz2.sum(axis=0),
    }


_ARRAY_ORDER = ("feature_mean", "feature_std", "W1", "b1", "W2", "b2")


def save_model(model: MlpModel, path) -> None:
    """JSON header (u32 length-prefixed), then u64-count-prefixed little-endian f64 arrays."""
    header = json.dumps({
        "format_version": MODEL_FORMAT_VERSION,
        "K": model.input_dim,
        "H": model.hidden_dim,
        "L": model.output_dim,
        "seed": model.seed,
        "grid_fingerprint": model.grid_fingerprint.hex(),
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in _ARRAY_ORDER:
            arr = np.ascontiguousarray(getattr(model, name), dtype="<f8")
            fh.write(struct.pack("<Q", arr.size))
            fh.write(arr.tobytes())


def read_model_header(path) -> dict:
    blob = Path(path).read_bytes()
    return _parse_header(blob)[0]


def _parse_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 4:
        raise ModelFormatError("file too short for a model header")
    (n,) = struct.unpack_from("<I", blob, 0)
    try:
        header = json.loads(blob[4:4 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ModelFormatError("corrupt model header") from None
    if not isinstance(header, dict) or header.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {header.get('format_version') if isinstance(header, dict) else None}")
    return header, 4 + n


def load_model(path, feature_dim: int | None = None, grid_fingerprint: bytes | None = None) -> MlpModel:
    blob = Path(path).read_bytes()
    header, off = _parse_header(blob)
    k, h, n_out = header["K"], header["H"], header["L"]
    if feature_dim is not None and feature_dim != k:
        raise DimensionMismatch(f"model expects {k} features, data has {feature_dim}")
    fp = bytes.fromhex(header["grid_fingerprint"])
    if grid_fingerprint is not None and grid_fingerprint != fp:
        raise DimensionMismatch("model was trained for a different grid")
    shapes = {"feature_mean": (k,), "feature_std": (k,), "W1": (h, k), "b1": (h,),
              "W2": (n_out, h), "b2": (n_out,)}
    arrays = {}
    for name in _ARRAY_ORDER:
        if len(blob) < off + 8:
            raise ModelFormatError(f"truncated model file at array {name}")
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if count != int(np.prod(shapes[name])):
            raise ModelFormatError(f"array {name} has {count} entries, header implies {shapes[name]}")
        if len(blob) < off + 8 * count:
            raise ModelFormatError(f"truncated model file at array {name}")
        arrays[name] = np.frombuffer(blob, "<f8", count, off).reshape(shapes[name])
        off += 8 * count
    if off != len(blob):
        raise ModelFormatError("trailing bytes after model arrays")
    return MlpModel(seed=header["seed"], grid_fingerprint=fp, **arrays)
