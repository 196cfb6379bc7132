"""
Network architecture, private weights, and the plaintext inference oracle.

Tensors are numpy arrays in (channels, height, width) order. Conv kernels are
(c_o, c_i, k_p, k_q) and Fc weights are (n_o, n_i). The oracle below is the
ground truth that secure inference is compared against; it deliberately
shares nothing with the slot-layout code except the padding convention.

Manifest
--------
manifest.json next to one .chtw file per tensor:

    {"name": "netA", "input": [1, 28, 28],
     "layers": [{"type": "conv", "k_p": 5, "k_q": 5, "c_i": 1, "c_o": 5,
                 "stride": 2, "padding": "same",
                 "weight": "layer0_weight.chtw", "bias": "layer0_bias.chtw"},
                {"type": "activation", "kind": "relu"}, ...]}

Tensor file: 16-byte header (magic "CHTW", rank u8, 3 pad bytes, 4 x u16
dims), little-endian float32 data row-major, CRC-32 footer over both.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"CHTW"
TENSOR_HEADER = struct.Struct("<4sB3x4H")
ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax")
Dims = Tuple[int, int, int]


class ManifestError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class Conv:
    k_p: int
    k_q: int
    c_i: int
    c_o: int
    stride: int = 1
    padding: str = "same"
    weight: Optional[np.ndarray] = field(default=None, repr=False)
    bias: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class Fc:
    n_i: int
    n_o: int
    weight: Optional[np.ndarray] = field(default=None, repr=False)
    bias: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class Activation:
    kind: str


@dataclass
class MeanPool:
    region: Tuple[int, int] = (2, 2)


Layer = Union[Conv, Fc, Activation, MeanPool]


def conv_geometry(h: int, w: int, conv: Conv) -> Tuple[int, int, int, int]:
    """(h_o, w_o, pad_top, pad_left); same padding splits the excess top/left first."""
    s = conv.stride
    if conv.padding == "same":
        h_o, w_o = -(-h // s), -(-w // s)
        pad_h = max((h_o - 1) * s + conv.k_p - h, 0)
        pad_w = max((w_o - 1) * s + conv.k_q - w, 0)
        return h_o, w_o, pad_h // 2, pad_w // 2
    if conv.padding == "valid":
        if h < conv.k_p or w < conv.k_q:
            raise ShapeError(f"{conv.k_p}x{conv.k_q} kernel does not fit a {h}x{w} input without padding")
        return (h - conv.k_p) // s + 1, (w - conv.k_q) // s + 1, 0, 0
    raise ShapeError(f"unknown padding mode {conv.padding!r}")


def layer_output_dims(layer: Layer, dims: Dims) -> Dims:
    c, h, w = dims
    if isinstance(layer, Conv):
        if layer.c_i != c:
            raise ShapeError(f"conv expects {layer.c_i} input channels, got {c}")
        if layer.stride < 1:
            raise ShapeError("stride must be >= 1")
        h_o, w_o, _, _ = conv_geometry(h, w, layer)
        return layer.c_o, h_o, w_o
    if isinstance(layer, Fc):
        if layer.n_i != c * h * w:
            raise ShapeError(f"fc expects {layer.n_i} inputs, got {c}x{h}x{w}={c * h * w}")
        return layer.n_o, 1, 1
    if isinstance(layer, Activation):
        if layer.kind not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {layer.kind!r}")
        return dims
    if isinstance(layer, MeanPool):
        rh, rw = layer.region
        if rh < 1 or rw < 1 or h // rh == 0 or w // rw == 0:
            raise ShapeError(f"pool region {rh}x{rw} does not fit {h}x{w}")
        return c, h // rh, w // rw
    raise ShapeError(f"unknown layer {layer!r}")


@dataclass
class NetworkSpec:
    name: str
    input_dims: Dims
    layers: List[Layer]

    def validate(self) -> List[Dims]:
        """Dims after every layer; raises ShapeError when the chain does not type-check."""
        if not self.layers:
            raise ShapeError("network has no layers")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ShapeError(f"bad input dims {self.input_dims}")
        dims = tuple(self.input_dims)
        out = []
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Activation) and layer.kind == "softmax" and idx != len(self.layers) - 1:
                raise ShapeError("softmax is only allowed as the last layer")
            dims = layer_output_dims(layer, dims)
            out.append(dims)
        return out

    @property
    def output_size(self) -> int:
        return math.prod(self.validate()[-1])

    def has_weights(self) -> bool:
        return all(l.weight is not None for l in self.layers if isinstance(l, (Conv, Fc)))

    def public(self) -> "NetworkSpec":
        """Architecture only: what the client is allowed to see."""
        layers = []
        for layer in self.layers:
            layer = copy.copy(layer)
            if isinstance(layer, (Conv, Fc)):
                layer.weight = None
                layer.bias = None
            layers.append(layer)
        return NetworkSpec(self.name, tuple(self.input_dims), layers)

    def architecture(self) -> dict:
        return {"name": self.name, "input": list(self.input_dims),
                "layers": [_layer_to_dict(l) for l in self.layers]}

    @property
    def digest(self) -> bytes:
        text = json.dumps(self.architecture(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).digest()[:8]


def _layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, Conv):
        return {"type": "conv", "k_p": layer.k_p, "k_q": layer.k_q, "c_i": layer.c_i, "c_o": layer.c_o,
                "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, Fc):
        return {"type": "fc", "n_i": layer.n_i, "n_o": layer.n_o}
    if isinstance(layer, Activation):
        return {"type": "activation", "kind": layer.kind}
    return {"type": "meanpool", "region": list(layer.region)}


# --------------------------------------------------------------------------
# Oracle
# --------------------------------------------------------------------------

def _as_chw(x, dims: Optional[Dims] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("empty input")
    if dims is not None:
        if x.size != math.prod(dims):
            raise ShapeError(f"input has {x.size} values, expected {dims}")
        x = x.reshape(dims)
    if x.ndim == 2:
        x = x[None, :, :]
    if not np.all(np.isfinite(x)):
        raise ShapeError("input contains non-finite values")
    return x


def conv2d_ref(x, layer: Conv) -> np.ndarray:
    x = _as_chw(x)
    c, h, w = x.shape
    if c != layer.c_i:
        raise ShapeError(f"conv expects {layer.c_i} channels, got {c}")
    k = np.asarray(layer.weight, dtype=np.float64).reshape(layer.c_o, layer.c_i, layer.k_p, layer.k_q)
    h_o, w_o, top, left = conv_geometry(h, w, layer)
    s = layer.stride
    need_h = (h_o - 1) * s + layer.k_p
    need_w = (w_o - 1) * s + layer.k_q
    xp = np.zeros((c, max(need_h, h + top), max(need_w, w + left)))
    xp[:, top:top + h, left:left + w] = x
    out = np.zeros((layer.c_o, h_o, w_o))
    for u in range(layer.k_p):
        for v in range(layer.k_q):
            patch = xp[:, u:u + s * (h_o - 1) + 1:s, v:v + s * (w_o - 1) + 1:s]
            out += np.einsum("tj,jhw->thw", k[:, :, u, v], patch)
    if layer.bias is not None:
        out += np.asarray(layer.bias, dtype=np.float64).reshape(-1, 1, 1)
    return out


def fc_ref(x, layer: Fc) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != layer.n_i:
        raise ShapeError(f"fc expects {layer.n_i} inputs, got {x.size}")
    z = np.asarray(layer.weight, dtype=np.float64).reshape(layer.n_o, layer.n_i) @ x
    if layer.bias is not None:
        z = z + np.asarray(layer.bias, dtype=np.float64)
    return z


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def activation_ref(kind: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        e = np.exp(x - x.max())
        return e / e.sum()
    raise ShapeError(f"unknown activation {kind!r}")


def meanpool_ref(x, region) -> np.ndarray:
    x = _as_chw(x)
    c, h, w = x.shape
    rh, rw = region
    h_o, w_o = h // rh, w // rw
    if h_o == 0 or w_o == 0:
        raise ShapeError(f"pool region {rh}x{rw} does not fit {h}x{w}")
    return x[:, :h_o * rh, :w_o * rw].reshape(c, h_o, rh, w_o, rw).mean(axis=(2, 4))


def apply_layer(layer: Layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv):
        return conv2d_ref(x, layer)
    if isinstance(layer, Fc):
        return fc_ref(x, layer).reshape(layer.n_o, 1, 1)
    if isinstance(layer, Activation):
        return activation_ref(layer.kind, x)
    return meanpool_ref(x, layer.region)


def infer_ref(net: NetworkSpec, x) -> np.ndarray:
    net.validate()
    if not net.has_weights():
        raise ManifestError(f"network {net.name} has no weights")
    a = _as_chw(x, tuple(net.input_dims))
    for layer in net.layers:
        a = apply_layer(layer, a)
    return a.ravel()


# --------------------------------------------------------------------------
# Tensor files and manifests
# --------------------------------------------------------------------------

def write_tensor(path: Path, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 4 or max(arr.shape, default=0) > 0xFFFF:
        raise ManifestError(f"tensor shape {arr.shape} not representable")
    dims = list(arr.shape) + [0] * (4 - arr.ndim)
    header = TENSOR_HEADER.pack(TENSOR_MAGIC, arr.ndim, *dims)
    body = header + np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_tensor(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"missing tensor file {path}")
    raw = path.read_bytes()
    if len(raw) < TENSOR_HEADER.size + 4:
        raise ManifestError(f"{path}: truncated tensor file")
    magic, rank, *dims = TENSOR_HEADER.unpack_from(raw, 0)
    if magic != TENSOR_MAGIC:
        raise ManifestError(f"{path}: bad magic {magic!r}")
    if rank > 4:
        raise ManifestError(f"{path}: rank {rank} out of range")
    shape = tuple(dims[:rank])
    expected = TENSOR_HEADER.size + 4 * math.prod(shape) + 4
    if len(raw) != expected:
        raise ManifestError(f"{path}: truncated tensor file ({len(raw)} of {expected} bytes)")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise ManifestError(f"{path}: checksum failure")
    data = np.frombuffer(raw, dtype="<f4", count=math.prod(shape), offset=TENSOR_HEADER.size)
    return data.astype(np.float64).reshape(shape)


def _expect_shape(arr: np.ndarray, shape, what: str) -> np.ndarray:
    if arr.size != math.prod(shape):
        raise ManifestError(f"{what}: {arr.shape} does not match declared {tuple(shape)}")
    return arr.reshape(shape)


def _layer_from_dict(d: dict, base: Path, require_weights: bool) -> Layer:
    try:
        kind = d["type"]
        if kind == "conv":
            layer = Conv(int(d["k_p"]), int(d["k_q"]), int(d["c_i"]), int(d["c_o"]),
                         int(d.get("stride", 1)), d.get("padding", "same"))
            wshape, bshape = (layer.c_o, layer.c_i, layer.k_p, layer.k_q), (layer.c_o,)
        elif kind == "fc":
            layer = Fc(int(d["n_i"]), int(d["n_o"]))
            wshape, bshape = (layer.n_o, layer.n_i), (layer.n_o,)
        elif kind == "activation":
            return Activation(d["kind"])
        elif kind == "meanpool":
            rh, rw = d.get("region", [2, 2])
            return MeanPool((int(rh), int(rw)))
        else:
            raise ManifestError(f"unknown layer type {kind!r}")
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ManifestError):
            raise
        raise ManifestError(f"malformed layer entry {d!r}: {e}") from e
    if require_weights:
        if not d.get("weight"):
            raise ManifestError(f"layer {d!r} has no weight file")
        layer.weight = _expect_shape(read_tensor(base / d["weight"]), wshape, d["weight"])
        if d.get("bias"):
            layer.bias = _expect_shape(read_tensor(base / d["bias"]), bshape, d["bias"])
    return layer


def load_network(manifest_path, require_weights: bool = True) -> NetworkSpec:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        name, input_dims, entries = doc["name"], tuple(int(v) for v in doc["input"]), doc["layers"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from e
    if len(input_dims) != 3:
        raise ManifestError(f"input must be [channels, height, width], got {list(input_dims)}")
    net = NetworkSpec(name, input_dims, [_layer_from_dict(d, path.parent, require_weights) for d in entries])
    try:
        net.validate()
    except ShapeError as e:
        raise ManifestError(f"{path}: dim mismatch: {e}") from e
    return net


def save_network(net: NetworkSpec, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net.validate()
    entries = []
    for idx, layer in enumerate(net.layers):
        d = _layer_to_dict(layer)
        if isinstance(layer, (Conv, Fc)) and layer.weight is not None:
            d["weight"] = f"layer{idx}_weight.chtw"
            write_tensor(out_dir / d["weight"], layer.weight)
            d["bias"] = None
            if layer.bias is not None:
                d["bias"] = f"layer{idx}_bias.chtw"
                write_tensor(out_dir / d["bias"], layer.bias)
        entries.append(d)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"name": net.name, "input": list(net.input_dims), "layers": entries},
                                   indent=2), encoding="utf-8")
    return manifest


# --------------------------------------------------------------------------
# Desk-scale fixtures
# --------------------------------------------------------------------------

def _tiny() -> NetworkSpec:
    return NetworkSpec("tiny", (1, 8, 8), [Conv(3, 3, 1, 1), Activation("relu")])


def _net_a() -> NetworkSpec:
    # 1 Conv + 2 FC with ReLU; stride 2 keeps the first FC at 980 inputs
    return NetworkSpec("netA", (1, 28, 28), [
        Conv(5, 5, 1, 5, stride=2), Activation("relu"),
        Fc(980, 100), Activation("relu"),
        Fc(100, 10)])


def _net_b() -> NetworkSpec:
    return NetworkSpec("netB", (1, 28, 28), [
        Conv(5, 5, 1, 4), Activation("relu"), MeanPool((2, 2)),
        Conv(5, 5, 4, 4, padding="valid"), Activation("relu"), MeanPool((2, 2)),
        Fc(100, 100), Activation("relu"),
        Fc(100, 10)])


def _vgg_head() -> NetworkSpec:
    return NetworkSpec("vggHead", (3, 16, 16), [
        Conv(3, 3, 3, 4), Activation("relu"), Conv(3, 3, 4, 4), Activation("relu"), MeanPool((2, 2)),
        Conv(3, 3, 4, 8), Activation("relu"), Conv(3, 3, 8, 8), Activation("relu"), MeanPool((2, 2)),
        Fc(128, 10)])


def _smooth() -> NetworkSpec:
    return NetworkSpec("smooth", (1, 8, 8), [
        Conv(3, 3, 1, 2), Activation("sigmoid"),
        Fc(128, 16), Activation("tanh"),
        Fc(16, 4), Activation("softmax")])


TEMPLATES: Dict[str, Callable[[], NetworkSpec]] = {
    "tiny": _tiny,
    "netA": _net_a,
    "netB": _net_b,
    "vggHead": _vgg_head,
    "smooth": _smooth,
}


def gen_random_network(template, seed: int, scale_bits: int = 10) -> NetworkSpec:
    """Fill a template (name or NetworkSpec) with weights on the 2^-scale_bits grid.

    Weights are uniform in [-b, b] with b = min(1, sqrt(3 / fan_in)) so
    activations stay O(1) through the stack; biases are uniform in [-0.1, 0.1].
    """
    if isinstance(template, str):
        if template not in TEMPLATES:
            raise ManifestError(f"unknown template {template!r}; choose from {sorted(TEMPLATES)}")
        net = TEMPLATES[template]()
    else:
        net = template.public()
    net.validate()
    rng = np.random.default_rng(seed)
    grid = float(1 << scale_bits)
    for layer in net.layers:
        if isinstance(layer, Conv):
            shape, fan_in, n_out = (layer.c_o, layer.c_i, layer.k_p, layer.k_q), layer.c_i * layer.k_p * layer.k_q, layer.c_o
        elif isinstance(layer, Fc):
            shape, fan_in, n_out = (layer.n_o, layer.n_i), layer.n_i, layer.n_o
        else:
            continue
        bound = min(1.0, math.sqrt(3.0 / fan_in))
        layer.weight = np.round(rng.uniform(-bound, bound, shape) * grid) / grid
        layer.bias = np.round(rng.uniform(-0.1, 0.1, n_out) * grid) / grid
    return net
