"""
core/nullhop.py: functional model of the zero-skipping CNN compute path.
- Provides: ConvLayerConfig, NetworkConfig, MacStats, NetworkResult,
  conv_dense_oracle(), conv_zero_skip(), relu(), maxpool2(), run_layer(), run_layer_dense(),
  fully_connected(), run_network(), run_network_dense()

Convolution is cross-correlation with zero padding:
  out(o, a, b) = sum_ic sum_ij K(o, ic, i, j) * in(ic, a + i - pad, b + j - pad)
Products of Q16.8 raws are summed exactly in int64 (16 fractional bits) and rounded
once, half-to-even, back to Q16.8. Both the dense and the zero-skip path share that rule,
so their results are equal value for value.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core import fixed_point as fx
from core.errors import ConfigError
from core.fixed_point import Q16_8
from core.sparsity import CompressedFeatureMap, FeatureMapTensor, decode, encode, nonzero_coordinates
from core.utils import log_ctx

logger = logging.getLogger(__name__)

KERNEL_SIZES = (1, 3, 5, 7)
MAC_UNITS = 128

Shape = Tuple[int, int, int]  # (h, w, ch)


def _raw_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind == "f":
        raise ConfigError(f"{name} must hold Q16.8 raw integers, got {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < Q16_8.min_raw or arr.max() > Q16_8.max_raw):
        raise ConfigError(f"{name} outside Q16.8 range")
    return arr


@dataclass
class ConvLayerConfig:
    kernel_size: int
    in_channels: int
    out_channels: int
    kernels: np.ndarray = field(repr=False)  # (out, in, k, k) Q16.8 raws
    padding: Optional[int] = None  # None -> (k - 1) // 2
    relu_enabled: bool = True
    pool_enabled: bool = False
    bias: Optional[np.ndarray] = field(default=None, repr=False)  # (out,) Q16.8 raws

    def __post_init__(self) -> None:
        k = self.kernel_size
        if k not in KERNEL_SIZES:
            raise ConfigError(f"kernel_size must be one of {KERNEL_SIZES}, got {k}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.padding is None:
            self.padding = (k - 1) // 2
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        self.kernels = _raw_array(self.kernels, "kernels")
        want = (self.out_channels, self.in_channels, k, k)
        if self.kernels.shape != want:
            raise ConfigError(f"kernels shape {self.kernels.shape} != {want}")
        if self.bias is not None:
            self.bias = _raw_array(self.bias, "bias")
            if self.bias.shape != (self.out_channels,):
                raise ConfigError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    def conv_shape(self, height: int, width: int) -> Tuple[int, int]:
        p, k = self.padding, self.kernel_size
        return height + 2 * p - k + 1, width + 2 * p - k + 1

    def output_shape(self, height: int, width: int) -> Shape:
        """(h, w, ch) after conv and the optional pool."""
        h, w = self.conv_shape(height, width)
        if h < 1 or w < 1:
            raise ConfigError(f"{self.kernel_size}x{self.kernel_size} kernel does not fit {height}x{width} input")
        if self.pool_enabled:
            if h < 2 or w < 2:
                raise ConfigError(f"cannot pool a {h}x{w} map")
            h, w = h // 2, w // 2
        return h, w, self.out_channels


@dataclass
class NetworkConfig:
    layers: List[ConvLayerConfig]
    fc_weights: np.ndarray = field(repr=False)  # (out_features, in_features) Q16.8 raws
    fc_labels: List[str] = field(default_factory=list)
    input_shape: Shape = (64, 64, 1)
    fc_bias: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (h, w, ch) >= 1, got {self.input_shape}")
        self.fc_weights = _raw_array(self.fc_weights, "fc_weights")
        if self.fc_weights.ndim != 2:
            raise ConfigError("fc_weights must be 2D (out_features, in_features)")
        shapes = self.output_shapes()
        in_features = int(np.prod(shapes[-1]))
        out_features, got = self.fc_weights.shape
        if got != in_features:
            raise ConfigError(f"fc expects {got} features, last layer yields {in_features} {shapes[-1]}")
        if not self.fc_labels:
            self.fc_labels = [f"class{i}" for i in range(out_features)]
        if len(self.fc_labels) != out_features:
            raise ConfigError(f"{len(self.fc_labels)} labels for {out_features} fc outputs")
        if self.fc_bias is not None:
            self.fc_bias = _raw_array(self.fc_bias, "fc_bias")
            if self.fc_bias.shape != (out_features,):
                raise ConfigError(f"fc_bias shape {self.fc_bias.shape} != ({out_features},)")

    def output_shapes(self) -> List[Shape]:
        """Input shape followed by the shape after each layer; raises ConfigError when channels don't chain."""
        shapes = [self.input_shape]
        for n, layer in enumerate(self.layers):
            h, w, ch = shapes[-1]
            if layer.in_channels != ch:
                raise ConfigError(f"layer {n} expects {layer.in_channels} channels, gets {ch}")
            shapes.append(layer.output_shape(h, w))
        return shapes

    @property
    def in_features(self) -> int:
        return int(self.fc_weights.shape[1])

    @property
    def out_features(self) -> int:
        return int(self.fc_weights.shape[0])


@dataclass
class MacStats:
    macs_performed: int = 0
    macs_dense_equivalent: int = 0
    zero_skipped: int = 0  # zero input pixels never fetched
    nnz_in: int = 0

    @property
    def skipped_macs(self) -> int:
        return self.macs_dense_equivalent - self.macs_performed

    @property
    def savings_ratio(self) -> float:
        if self.macs_dense_equivalent == 0:
            return 0.0
        return self.skipped_macs / self.macs_dense_equivalent

    def compute_cycles(self, mac_units: int = MAC_UNITS) -> int:
        """Clock cycles with every MAC unit busy each cycle."""
        if mac_units < 1:
            raise ConfigError("mac_units must be >= 1")
        return -(-self.macs_performed // mac_units)

    def __add__(self, other: "MacStats") -> "MacStats":
        if not isinstance(other, MacStats):
            return NotImplemented
        return MacStats(
            self.macs_performed + other.macs_performed,
            self.macs_dense_equivalent + other.macs_dense_equivalent,
            self.zero_skipped + other.zero_skipped,
            self.nnz_in + other.nnz_in,
        )


# ---------- shared helpers ----------

def _check_input(height: int, width: int, channels: int, cfg: ConvLayerConfig) -> Tuple[int, int]:
    if channels != cfg.in_channels:
        raise ConfigError(f"input has {channels} channels, layer expects {cfg.in_channels}")
    h_out, w_out = cfg.conv_shape(height, width)
    if h_out < 1 or w_out < 1:
        raise ConfigError(f"{cfg.kernel_size}x{cfg.kernel_size} kernel does not fit {height}x{width} input")
    return h_out, w_out


def _finish(acc: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    """Products carry 16 fractional bits; add bias, round once to Q16.8, saturate."""
    if bias is not None:
        acc = acc + (bias[:, None, None] << Q16_8.frac_bits)
    out, saturated = fx.saturate_array(fx.rne_shift_array(acc, Q16_8.frac_bits), Q16_8)
    if saturated:
        logger.warning("conv output saturated %s", log_ctx(shape=out.shape))
    return out


def _tap_span(size: int, out_size: int, tap: int, pad: int) -> int:
    # input positions r with 0 <= r - tap + pad < out_size
    lo = max(0, tap - pad)
    hi = min(size, out_size + tap - pad)
    return max(0, hi - lo)


def _dense_mac_count(height: int, width: int, cfg: ConvLayerConfig, h_out: int, w_out: int) -> int:
    k, p = cfg.kernel_size, cfg.padding
    rows = sum(_tap_span(height, h_out, i, p) for i in range(k))
    cols = sum(_tap_span(width, w_out, j, p) for j in range(k))
    return rows * cols * cfg.in_channels * cfg.out_channels


# ---------- convolution ----------

def conv_dense_oracle(t: FeatureMapTensor, cfg: ConvLayerConfig) -> FeatureMapTensor:
    """Textbook dense cross-correlation. No ReLU, no pooling."""
    h_out, w_out = _check_input(t.height, t.width, t.channels, cfg)
    p, k = cfg.padding, cfg.kernel_size
    x = np.pad(t.values, ((0, 0), (p, p), (p, p)))
    acc = np.zeros((cfg.out_channels, h_out, w_out), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            window = x[:, i:i + h_out, j:j + w_out]
            acc += np.tensordot(cfg.kernels[:, :, i, j], window, axes=([1], [0]))
    return FeatureMapTensor(_finish(acc, cfg.bias))


def _scatter(rows: np.ndarray, cols: np.ndarray, chs: np.ndarray, vals: np.ndarray,
             kernels: np.ndarray, cfg: ConvLayerConfig, h_out: int, w_out: int) -> Tuple[np.ndarray, int]:
    """Accumulate every non-zero input into the outputs it touches. Returns (acc, in-bounds taps)."""
    k, p = cfg.kernel_size, cfg.padding
    acc = np.zeros((kernels.shape[0], h_out, w_out), dtype=np.int64)
    taps = 0
    for ic in np.unique(chs).tolist():
        sel = chs == ic
        r, c, v = rows[sel], cols[sel], vals[sel]
        for i in range(k):
            a = r - i + p
            row_ok = (a >= 0) & (a < h_out)
            for j in range(k):
                b = c - j + p
                ok = row_ok & (b >= 0) & (b < w_out)
                n = int(ok.sum())
                if n == 0:
                    continue
                # (a, b) pairs are unique within one channel and tap
                acc[:, a[ok], b[ok]] += kernels[:, ic, i, j][:, None] * v[ok][None, :]
                taps += n
    return acc, taps


def conv_zero_skip(c: CompressedFeatureMap, cfg: ConvLayerConfig,
                   workers: int = 1) -> Tuple[FeatureMapTensor, MacStats]:
    """Convolution driven by the sparsity map: only non-zero inputs are multiplied.

    Output channels can be split across `workers` threads; the partial results are
    disjoint and concatenated in channel order.
    """
    height, width, channels = c.dims
    h_out, w_out = _check_input(height, width, channels, cfg)
    rows, cols, chs, vals = nonzero_coordinates(c)

    groups = np.array_split(np.arange(cfg.out_channels), max(1, min(workers, cfg.out_channels)))
    if len(groups) == 1:
        acc, taps = _scatter(rows, cols, chs, vals, cfg.kernels, cfg, h_out, w_out)
    else:
        with ThreadPoolExecutor(max_workers=len(groups)) as pool:
            parts = list(pool.map(
                lambda g: _scatter(rows, cols, chs, vals, cfg.kernels[g], cfg, h_out, w_out), groups))
        acc = np.concatenate([part for part, _ in parts])
        taps = parts[0][1]

    nnz = int(vals.size)
    stats = MacStats(
        macs_performed=taps * cfg.out_channels,
        macs_dense_equivalent=_dense_mac_count(height, width, cfg, h_out, w_out),
        zero_skipped=c.size - nnz,
        nnz_in=nnz,
    )
    logger.debug("conv %s", log_ctx(dims=c.dims, k=cfg.kernel_size, out_ch=cfg.out_channels, nnz=nnz,
                                     macs=stats.macs_performed, savings=f"{stats.savings_ratio:.4f}"))
    return FeatureMapTensor(_finish(acc, cfg.bias)), stats


# ---------- activation / pooling ----------

def relu(t: FeatureMapTensor) -> FeatureMapTensor:
    return FeatureMapTensor(np.maximum(t.values, 0))


def maxpool2(t: FeatureMapTensor) -> FeatureMapTensor:
    """2x2 max-pool, stride 2. Odd trailing row/column is dropped."""
    ch, h, w = t.values.shape
    if h < 2 or w < 2:
        raise ConfigError(f"cannot pool a {h}x{w} map")
    h2, w2 = h // 2, w // 2
    v = t.values[:, :2 * h2, :2 * w2].reshape(ch, h2, 2, w2, 2)
    return FeatureMapTensor(v.max(axis=(2, 4)))


# ---------- layers / network ----------

def _post(t: FeatureMapTensor, cfg: ConvLayerConfig) -> FeatureMapTensor:
    if cfg.relu_enabled:
        t = relu(t)
    if cfg.pool_enabled:
        t = maxpool2(t)
    return t


def run_layer(c: CompressedFeatureMap, cfg: ConvLayerConfig,
              workers: int = 1) -> Tuple[CompressedFeatureMap, MacStats]:
    """conv (zero-skip) -> ReLU? -> pool? -> re-compression."""
    out, stats = conv_zero_skip(c, cfg, workers=workers)
    return encode(_post(out, cfg)), stats


def run_layer_dense(t: FeatureMapTensor, cfg: ConvLayerConfig) -> FeatureMapTensor:
    return _post(conv_dense_oracle(t, cfg), cfg)


def fully_connected(t: FeatureMapTensor, weights: np.ndarray,
                    bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Q16.8 scores of W . flatten(t), flattened in (ch, h, w) order."""
    x = t.values.ravel()
    if weights.shape[1] != x.size:
        raise ConfigError(f"fc expects {weights.shape[1]} features, got {x.size}")
    acc = weights.astype(np.int64) @ x
    if bias is not None:
        acc = acc + (bias.astype(np.int64) << Q16_8.frac_bits)
    out, saturated = fx.saturate_array(fx.rne_shift_array(acc, Q16_8.frac_bits), Q16_8)
    if saturated:
        logger.warning("fc scores saturated %s", log_ctx(features=x.size))
    return out


@dataclass
class NetworkResult:
    scores_raw: np.ndarray = field(repr=False)
    labels: Sequence[str] = field(repr=False)
    layer_stats: List[MacStats] = field(default_factory=list, repr=False)

    @property
    def scores(self) -> np.ndarray:
        return self.scores_raw / Q16_8.scale

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.scores_raw))  # first maximum wins ties

    @property
    def label(self) -> str:
        return self.labels[self.predicted]

    @property
    def total_stats(self) -> MacStats:
        return sum(self.layer_stats, MacStats())


def _check_network_input(dims: Shape, net: NetworkConfig) -> None:
    if tuple(dims) != net.input_shape:
        raise ConfigError(f"input dims {tuple(dims)} != network input {net.input_shape}")


def run_network(c: CompressedFeatureMap, net: NetworkConfig, workers: int = 1) -> NetworkResult:
    """Evaluate the conv layers one after another on compressed maps, then the host-side FC."""
    _check_network_input(c.dims, net)
    stats = []
    for n, layer in enumerate(net.layers):
        c, s = run_layer(c, layer, workers=workers)
        stats.append(s)
        logger.debug("layer done %s", log_ctx(layer=n, dims=c.dims, nnz_out=int(c.nzvl.size)))
    scores = fully_connected(decode(c), net.fc_weights, net.fc_bias)
    return NetworkResult(scores, list(net.fc_labels), stats)


def run_network_dense(t: FeatureMapTensor, net: NetworkConfig) -> NetworkResult:
    _check_network_input(t.dims, net)
    for layer in net.layers:
        t = run_layer_dense(t, layer)
    return NetworkResult(fully_connected(t, net.fc_weights, net.fc_bias), list(net.fc_labels))
