# services/network_store.py: network document + weight sidecar access layer
# Used by evhop_cli.py (infer, pipeline, bench, netgen)

from __future__ import annotations

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ConfigError, CorruptStream
from core.fixed_point import Q16_8
from core.nullhop import ConvLayerConfig, NetworkConfig
from core.utils import log_ctx, read_exact, read_header

logger = logging.getLogger(__name__)

NET_FORMAT = "evhop-net/1"
WGT_MAGIC = b"WGT1"

ROSHAMBO_LABELS = ("rock", "paper", "scissors", "background")
ROSHAMBO_CHANNELS = (16, 32, 64, 128, 128)

PathLike = Union[str, Path]


# ---------- WGT1 ----------

def dump_weights(tensors: Sequence[np.ndarray], sink: BinaryIO) -> None:
    sink.write(WGT_MAGIC)
    sink.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        flat = np.asarray(t, dtype=np.int64).ravel()
        sink.write(struct.pack("<I", flat.size))
        sink.write(flat.astype("<i4").tobytes())


def load_weights(src: BinaryIO) -> List[np.ndarray]:
    (count,) = read_header(src, WGT_MAGIC, "<I")
    tensors = []
    for i in range(count):
        (n,) = struct.unpack("<I", read_exact(src, 4, f"WGT1 tensor {i} length"))
        payload = read_exact(src, 4 * n, f"WGT1 tensor {i}")
        tensors.append(np.frombuffer(payload, dtype="<i4").astype(np.int64))
    if src.read(1):
        raise CorruptStream("trailing bytes after WGT1 tensors")
    return tensors


# ---------- document <-> config ----------

def _require(doc: Dict[str, Any], key: str, where: str) -> Any:
    if key not in doc:
        raise ConfigError(f"network document: missing {where}.{key}")
    return doc[key]


def network_document(net: NetworkConfig, weights_name: str) -> Dict[str, Any]:
    h, w, ch = net.input_shape
    return {
        "format": NET_FORMAT,
        "input": {"height": h, "width": w, "channels": ch},
        "layers": [
            {
                "kernel_size": layer.kernel_size,
                "in_channels": layer.in_channels,
                "out_channels": layer.out_channels,
                "padding": layer.padding,
                "relu": layer.relu_enabled,
                "pool": layer.pool_enabled,
                "bias": layer.bias is not None,
            }
            for layer in net.layers
        ],
        "fc": {
            "in_features": net.in_features,
            "out_features": net.out_features,
            "labels": list(net.fc_labels),
            "bias": net.fc_bias is not None,
        },
        "weights": weights_name,
    }


def _take(tensors: List[np.ndarray], shape: Tuple[int, ...], what: str) -> np.ndarray:
    if not tensors:
        raise ConfigError(f"weight sidecar ends before {what}")
    t = tensors.pop(0)
    want = int(np.prod(shape))
    if t.size != want:
        raise ConfigError(f"{what}: sidecar tensor has {t.size} values, expected {want}")
    return t.reshape(shape)


def network_from_document(doc: Dict[str, Any], tensors: List[np.ndarray]) -> NetworkConfig:
    if doc.get("format") != NET_FORMAT:
        raise ConfigError(f"unsupported network format {doc.get('format')!r}")
    inp = _require(doc, "input", "")
    input_shape = (int(_require(inp, "height", "input")), int(_require(inp, "width", "input")),
                   int(_require(inp, "channels", "input")))
    tensors = list(tensors)
    layers = []
    for n, spec in enumerate(_require(doc, "layers", "")):
        where = f"layers[{n}]"
        k = int(_require(spec, "kernel_size", where))
        cin = int(_require(spec, "in_channels", where))
        cout = int(_require(spec, "out_channels", where))
        kernels = _take(tensors, (cout, cin, k, k), f"{where} kernels")
        bias = _take(tensors, (cout,), f"{where} bias") if spec.get("bias") else None
        layers.append(ConvLayerConfig(
            kernel_size=k, in_channels=cin, out_channels=cout, kernels=kernels,
            padding=spec.get("padding"), relu_enabled=bool(spec.get("relu", True)),
            pool_enabled=bool(spec.get("pool", False)), bias=bias,
        ))
    fc = _require(doc, "fc", "")
    shape = (int(_require(fc, "out_features", "fc")), int(_require(fc, "in_features", "fc")))
    fc_weights = _take(tensors, shape, "fc weights")
    fc_bias = _take(tensors, (shape[0],), "fc bias") if fc.get("bias") else None
    if tensors:
        raise ConfigError(f"weight sidecar has {len(tensors)} unused tensors")
    return NetworkConfig(layers=layers, fc_weights=fc_weights, fc_labels=list(fc.get("labels") or []),
                         input_shape=input_shape, fc_bias=fc_bias)


def _tensor_list(net: NetworkConfig) -> List[np.ndarray]:
    out = []
    for layer in net.layers:
        out.append(layer.kernels)
        if layer.bias is not None:
            out.append(layer.bias)
    out.append(net.fc_weights)
    if net.fc_bias is not None:
        out.append(net.fc_bias)
    return out


# ---------- files ----------

def save_network(net: NetworkConfig, path: PathLike) -> Tuple[Path, Path]:
    """Write `<name>.json` and its `<name>.wgt` sidecar next to it. Returns both paths."""
    path = Path(path)
    sidecar = path.with_suffix(".wgt")
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = network_document(net, sidecar.name)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with sidecar.open("wb") as f:
        dump_weights(_tensor_list(net), f)
    logger.info("network saved %s", log_ctx(path=path, layers=len(net.layers), labels=len(net.fc_labels)))
    return path, sidecar


def load_network(path: PathLike) -> NetworkConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"network document {path} is not valid JSON: {e}")
    sidecar = path.parent / str(_require(doc, "weights", ""))
    with sidecar.open("rb") as f:
        tensors = load_weights(f)
    net = network_from_document(doc, tensors)
    logger.debug("network loaded %s", log_ctx(path=path, layers=len(net.layers), input=net.input_shape))
    return net


# ---------- random networks ----------

def _he_raws(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    raws = np.rint(rng.normal(0.0, std, size=shape) * Q16_8.scale).astype(np.int64)
    return np.clip(raws, Q16_8.min_raw, Q16_8.max_raw)


def random_network(input_shape: Tuple[int, int, int], channels: Sequence[int], labels: Sequence[str],
                   seed: int = 0, kernel_size: int = 3, pool: bool = True,
                   bias: bool = False) -> NetworkConfig:
    """Seeded He-scaled conv stack (conv + ReLU + optional 2x2 pool per layer) and an FC head."""
    rng = np.random.default_rng(seed)
    h, w, ch = input_shape
    layers = []
    for cout in channels:
        fan_in = ch * kernel_size * kernel_size
        layers.append(ConvLayerConfig(
            kernel_size=kernel_size, in_channels=ch, out_channels=cout,
            kernels=_he_raws(rng, (cout, ch, kernel_size, kernel_size), fan_in),
            relu_enabled=True, pool_enabled=pool,
            bias=_he_raws(rng, (cout,), fan_in) if bias else None,
        ))
        h, w, ch = layers[-1].output_shape(h, w)
    in_features = h * w * ch
    fc_weights = _he_raws(rng, (len(labels), in_features), in_features)
    fc_bias = _he_raws(rng, (len(labels),), in_features) if bias else None
    return NetworkConfig(layers=layers, fc_weights=fc_weights, fc_labels=list(labels),
                         input_shape=tuple(input_shape), fc_bias=fc_bias)


def random_roshambo_network(seed: int = 0, input_shape: Optional[Tuple[int, int, int]] = None) -> NetworkConfig:
    """64x64x1 -> 16/32/64/128/128 channels, pooled down to 2x2x128 -> 4 gesture classes."""
    return random_network(input_shape or (64, 64, 1), ROSHAMBO_CHANNELS, ROSHAMBO_LABELS, seed=seed)


def identity_network(height: int, width: int) -> NetworkConfig:
    """One 1x1 unit-weight layer and an identity FC: scores equal the flattened input."""
    one = Q16_8.scale
    layer = ConvLayerConfig(kernel_size=1, in_channels=1, out_channels=1,
                            kernels=np.full((1, 1, 1, 1), one, dtype=np.int64), relu_enabled=True)
    n = height * width
    return NetworkConfig(layers=[layer], fc_weights=np.eye(n, dtype=np.int64) * one,
                         fc_labels=[f"px{i}" for i in range(n)], input_shape=(height, width, 1))
