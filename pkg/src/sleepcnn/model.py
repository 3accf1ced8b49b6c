"""The 7-stage 1D CNN used for 30 s EEG segments.

Each stage is a valid convolution (20 filters) + ReLU + width-2 max pool.
Kernel lengths run 7, 7, 5, 5, 4, 4, 3, which brings a 3000-sample input
down to 20 positions x 20 filters = 400 features. Those go through
dropout(0.5) into a single 400 -> 5 dense layer with softmax.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sleepcnn import nn

# Trainable parameter totals for the default architecture, by input channel count.
EXPECTED_PARAMS = {1: 13_485, 2: 13_625}

MAGIC = b"SLCNNMDL"
FORMAT_VERSION = 1


class UnsupportedChannelCount(ValueError):
    category = "UnsupportedChannelCount"


class ModelFileError(ValueError):
    category = "ModelFileError"


class VersionMismatch(ModelFileError):
    category = "VersionMismatch"


class CorruptFile(ModelFileError):
    category = "CorruptFile"


@dataclass(frozen=True)
class ModelSpec:
    n_channels: int = 2
    conv_kernels: tuple[int, ...] = (7, 7, 5, 5, 4, 4, 3)
    filters_per_layer: int = 20
    pool_width: int = 2
    dropout_rate: float = 0.5
    input_length: int = 3000
    n_classes: int = 5

    def length_trace(self) -> list[int]:
        """Temporal length after every conv and every pool, starting from the input."""
        trace = [self.input_length]
        length = self.input_length
        for k in self.conv_kernels:
            length = length - k + 1
            trace.append(length)
            length //= self.pool_width
            trace.append(length)
        return trace

    @property
    def flatten_features(self) -> int:
        return self.length_trace()[-1] * self.filters_per_layer

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = self.n_channels
        for i, k in enumerate(self.conv_kernels, start=1):
            shapes[f"conv{i}.weight"] = (self.filters_per_layer, c_in, k)
            shapes[f"conv{i}.bias"] = (self.filters_per_layer,)
            c_in = self.filters_per_layer
        shapes["dense.weight"] = (self.flatten_features, self.n_classes)
        shapes["dense.bias"] = (self.n_classes,)
        return shapes


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.spec.tensor_shapes())

    def as_list(self) -> list[np.ndarray]:
        return [self.tensors[name] for name in self.names]

    def copy(self) -> ModelParams:
        return ModelParams(
            self.spec, {k: v.copy() for k, v in self.tensors.items()}, dict(self.metadata)
        )


def build_model(n_channels: int, seed: int, spec: ModelSpec | None = None) -> ModelParams:
    """Glorot-uniform weights (limit sqrt(6 / (fan_in + fan_out))), zero biases."""
    if n_channels not in (1, 2):
        raise UnsupportedChannelCount(f"n_channels must be 1 or 2, got {n_channels}")
    spec = spec or ModelSpec(n_channels=n_channels)
    if spec.n_channels != n_channels:
        raise UnsupportedChannelCount(f"spec is for {spec.n_channels} channels, asked for {n_channels}")
    if spec == ModelSpec(n_channels=n_channels):
        assert spec.flatten_features == 400, spec.flatten_features
    rng = nn.make_rng(seed)
    tensors = {}
    for name, shape in spec.tensor_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        if name.startswith("conv"):
            out_c, in_c, k = shape
            fan_in, fan_out = in_c * k, out_c * k
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    model = ModelParams(spec, tensors, {"seed": seed})
    if spec == ModelSpec(n_channels=n_channels):
        assert count_params(model) == EXPECTED_PARAMS[n_channels], count_params(model)
    return model


def count_params(model: ModelParams) -> int:
    return int(sum(t.size for t in model.tensors.values()))


# --------------------------------------------------------------------------
# forward / backward


def _check_input(model: ModelParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    spec = model.spec
    if x.ndim != 3 or x.shape[1:] != (spec.n_channels, spec.input_length):
        raise nn.ShapeMismatch(
            f"model expects [{spec.n_channels} x {spec.input_length}] segments, got {x.shape}"
        )
    return x, single


def _forward(model: ModelParams, x: np.ndarray, training: bool, rng: np.random.Generator | None):
    t = model.tensors
    cache = []
    h = x
    for i in range(1, len(model.spec.conv_kernels) + 1):
        z = nn.conv1d(h, t[f"conv{i}.weight"], t[f"conv{i}.bias"])
        a = nn.relu(z)
        p, arg = nn.maxpool2_forward(a)
        cache.append((h, z, arg))
        h = p
    flat = h.reshape(len(h), -1)
    dropped, mask = nn.dropout(flat, model.spec.dropout_rate, rng, training)
    logits = dropped @ t["dense.weight"] + t["dense.bias"]
    return logits, (cache, h.shape, dropped, mask)


def logits(model: ModelParams, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    xb, single = _check_input(model, x)
    out, _ = _forward(model, xb, training, rng)
    return out[0] if single else out


def forward(model: ModelParams, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for one segment ``[C, 3000]`` or a batch ``[N, C, 3000]``."""
    return nn.softmax(logits(model, x, training, rng))


def predict(model: ModelParams, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties -> lowest class index) and probabilities, in inference mode."""
    x = np.asarray(x)
    probs = np.concatenate(
        [forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    ) if len(x) else np.zeros((0, model.spec.n_classes))
    return probs.argmax(axis=1), probs


def loss_and_grads(
    model: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy over the batch, its gradient per tensor, and the probabilities."""
    xb, _ = _check_input(model, x)
    y = np.asarray(y, dtype=np.intp)
    out, (cache, pooled_shape, dropped, mask) = _forward(model, xb, training, rng)
    losses, probs, dlogits = nn.softmax_cross_entropy(out, y)
    n = len(xb)
    dlogits = dlogits / n

    t = model.tensors
    grads: dict[str, np.ndarray] = {}
    grads["dense.weight"] = dropped.T @ dlogits
    grads["dense.bias"] = dlogits.sum(axis=0)
    dflat = nn.dropout_backward(dlogits @ t["dense.weight"].T, mask)
    dh = dflat.reshape(pooled_shape)
    for i in range(len(cache), 0, -1):
        h_in, z, arg = cache[i - 1]
        da = nn.maxpool2_backward(dh, arg, z.shape[-1])
        dz = nn.relu_grad(z, da)
        dx, dw, db = nn.conv1d_grad(h_in, t[f"conv{i}.weight"], dz)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
        dh = dx
    return float(losses.mean()), grads, probs


# --------------------------------------------------------------------------
# serialization
#
# layout: MAGIC(8) | version u8 | header_len u32 LE | header JSON (utf-8)
#         | tensors as float64 LE, in header order | crc32 u32 LE of all preceding bytes


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def to_bytes(model: ModelParams) -> bytes:
    entries = []
    payload = bytearray()
    for name in model.names:
        arr = np.ascontiguousarray(model.tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps(
        {"spec": _jsonable(asdict(model.spec)), "metadata": _jsonable(model.metadata), "tensors": entries},
        sort_keys=True,
    ).encode()
    body = MAGIC + struct.pack("<BI", FORMAT_VERSION, len(header)) + header + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> ModelParams:
    if len(data) < len(MAGIC) + 5 or data[: len(MAGIC)] != MAGIC:
        raise CorruptFile("not a model file (bad magic)")
    version, header_len = struct.unpack_from("<BI", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model file version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < 4 or struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise CorruptFile("checksum mismatch (truncated or corrupted model file)")
    start = len(MAGIC) + 5
    try:
        header = json.loads(data[start : start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable model header: {exc}") from None
    spec_fields = header["spec"]
    spec_fields["conv_kernels"] = tuple(spec_fields["conv_kernels"])
    spec = ModelSpec(**spec_fields)
    expected = spec.tensor_shapes()
    payload = data[start + header_len : -4]
    tensors = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise nn.ShapeMismatch(f"tensor {name} has shape {shape}, spec implies {expected.get(name)}")
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[name] = arr.astype(np.float64).reshape(shape)
    if set(tensors) != set(expected):
        raise CorruptFile(f"model file is missing tensors {sorted(set(expected) - set(tensors))}")
    return ModelParams(spec, tensors, header["metadata"])


def save_model(model: ModelParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(model))
    tmp.replace(path)


def load_model(path: str | Path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())


def fingerprint(model: ModelParams) -> str:
    h = hashlib.sha256()
    for name in model.names:
        h.update(np.ascontiguousarray(model.tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()
