import numpy as np
import pytest

from core.errors import ConfigError
from core.nullhop import (
    ConvLayerConfig,
    MacStats,
    NetworkConfig,
    conv_dense_oracle,
    conv_zero_skip,
    fully_connected,
    maxpool2,
    relu,
    run_layer,
    run_layer_dense,
    run_network,
    run_network_dense,
)
from core.sparsity import FeatureMapTensor, decode, encode
from services.network_store import identity_network, random_network, random_roshambo_network

ONE = 256


def layer(kernels, padding=None, relu_enabled=False, pool=False, bias=None):
    kernels = np.asarray(kernels, dtype=np.int64)
    out, cin, k, _ = kernels.shape
    return ConvLayerConfig(kernel_size=k, in_channels=cin, out_channels=out, kernels=kernels,
                           padding=padding, relu_enabled=relu_enabled, pool_enabled=pool, bias=bias)


def sparse_input(rng, ch, h, w, density, lo=-2048, hi=2048):
    v = rng.integers(lo, hi, size=(ch, h, w))
    v[rng.random((ch, h, w)) >= density] = 0
    return FeatureMapTensor(v)


def expected_macs(t, cfg):
    """Count in-bounds kernel taps for every non-zero input pixel."""
    h_out, w_out = cfg.conv_shape(t.height, t.width)
    k, p = cfg.kernel_size, cfg.padding
    taps = 0
    for _, r, c in zip(*np.nonzero(t.values)):
        rows = sum(1 for i in range(k) if 0 <= r - i + p < h_out)
        cols = sum(1 for j in range(k) if 0 <= c - j + p < w_out)
        taps += rows * cols
    return taps * cfg.out_channels


# ---------- dense oracle ----------

def test_oracle_identity_1x1():
    rng = np.random.default_rng(0)
    t = sparse_input(rng, 1, 6, 5, 0.5)
    assert conv_dense_oracle(t, layer([[[[ONE]]]])) == t


def test_oracle_delta_kernels():
    rng = np.random.default_rng(1)
    t = sparse_input(rng, 1, 7, 7, 0.6)
    centre = np.zeros((1, 1, 3, 3), dtype=np.int64)
    centre[0, 0, 1, 1] = ONE
    assert conv_dense_oracle(t, layer(centre)) == t
    corner = np.zeros((1, 1, 3, 3), dtype=np.int64)
    corner[0, 0, 0, 0] = ONE
    out = conv_dense_oracle(t, layer(corner)).values[0]
    # top-left tap reads the pixel up and to the left
    assert np.array_equal(out[1:, 1:], t.values[0, :-1, :-1])
    assert not out[0, :].any() and not out[:, 0].any()


def test_single_pixel_with_all_ones_kernel():
    t = FeatureMapTensor(np.array([[[5 * ONE]]]))
    cfg = layer(np.full((1, 1, 3, 3), ONE))
    assert conv_dense_oracle(t, cfg).values.tolist() == [[[5 * ONE]]]
    out, stats = conv_zero_skip(encode(t), cfg)
    assert out == FeatureMapTensor(np.array([[[5 * ONE]]]))
    assert stats.macs_performed == 1


# ---------- zero skipping ----------

def test_zero_input_costs_nothing():
    cfg = layer(np.ones((4, 2, 3, 3), dtype=np.int64) * 10)
    out, stats = conv_zero_skip(encode(FeatureMapTensor(np.zeros((2, 8, 8), dtype=np.int64))), cfg)
    assert not out.values.any()
    assert stats.macs_performed == 0
    assert stats.zero_skipped == 128
    assert stats.savings_ratio == 1.0


def test_zero_skip_equals_dense_on_random_layers():
    rng = np.random.default_rng(2)
    for n in range(1000):
        k = (1, 3, 5, 7)[n % 4]
        ch = int(rng.integers(1, 9))
        out_ch = int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(1, 25, size=2))
        if n % 50 == 0:
            ch = int(rng.integers(1, 17))
            h, w = (int(v) for v in rng.integers(32, 65, size=2))
        t = sparse_input(rng, ch, h, w, float(rng.random()))
        cfg = layer(rng.integers(-512, 512, size=(out_ch, ch, k, k)))
        got, stats = conv_zero_skip(encode(t), cfg)
        assert got == conv_dense_oracle(t, cfg)
        assert stats.macs_performed == expected_macs(t, cfg)
        assert stats.macs_performed <= stats.macs_dense_equivalent


def test_zero_skip_equals_dense_on_large_maps():
    rng = np.random.default_rng(3)
    for k in (3, 5):
        t = sparse_input(rng, 16, 64, 64, 0.1)
        cfg = layer(rng.integers(-512, 512, size=(4, 16, k, k)))
        got, stats = conv_zero_skip(encode(t), cfg)
        assert got == conv_dense_oracle(t, cfg)
        assert stats.macs_performed == expected_macs(t, cfg)


@pytest.mark.parametrize("k, padding", [(3, 0), (5, 0), (3, 2), (1, 1), (7, 4)])
def test_explicit_padding(k, padding):
    rng = np.random.default_rng(4)
    t = sparse_input(rng, 3, 9, 11, 0.4)
    cfg = layer(rng.integers(-300, 300, size=(2, 3, k, k)), padding=padding)
    got, stats = conv_zero_skip(encode(t), cfg)
    assert got.dims == (*cfg.conv_shape(9, 11), 2)
    assert got == conv_dense_oracle(t, cfg)
    assert stats.macs_performed == expected_macs(t, cfg)


def test_dense_equivalent_counts_in_bounds_taps():
    t = FeatureMapTensor(np.ones((2, 6, 5), dtype=np.int64))
    cfg = layer(np.ones((3, 2, 3, 3), dtype=np.int64))
    _, stats = conv_zero_skip(encode(t), cfg)
    assert stats.macs_performed == stats.macs_dense_equivalent == expected_macs(t, cfg)
    assert stats.skipped_macs == 0


def test_interior_sparse_map_mac_count():
    rng = np.random.default_rng(5)
    v = np.zeros((1, 64, 64), dtype=np.int64)
    idx = rng.choice(62 * 62, size=410, replace=False)
    rows, cols = np.divmod(idx, 62)
    v[0, rows + 1, cols + 1] = rng.integers(1, 1000, size=410)
    cfg = layer(rng.integers(-200, 200, size=(16, 1, 3, 3)))
    _, stats = conv_zero_skip(encode(FeatureMapTensor(v)), cfg)
    assert stats.macs_performed == 410 * 9 * 16
    assert stats.nnz_in == 410
    sparsity = 1 - 410 / 4096
    assert abs(stats.savings_ratio - sparsity) <= 0.02


def test_kernel_must_fit_unpadded_input():
    cfg = layer(np.ones((1, 1, 5, 5), dtype=np.int64), padding=0)
    t = FeatureMapTensor(np.ones((1, 3, 3), dtype=np.int64))
    with pytest.raises(ConfigError):
        conv_zero_skip(encode(t), cfg)
    with pytest.raises(ConfigError):
        conv_dense_oracle(t, cfg)


def test_channel_mismatch():
    cfg = layer(np.ones((1, 2, 3, 3), dtype=np.int64))
    with pytest.raises(ConfigError):
        conv_zero_skip(encode(FeatureMapTensor(np.ones((1, 4, 4), dtype=np.int64))), cfg)


def test_workers_split_output_channels():
    rng = np.random.default_rng(6)
    t = sparse_input(rng, 4, 20, 20, 0.3)
    cfg = layer(rng.integers(-512, 512, size=(7, 4, 3, 3)))
    one, s1 = conv_zero_skip(encode(t), cfg, workers=1)
    many, s4 = conv_zero_skip(encode(t), cfg, workers=4)
    assert one == many
    assert s1 == s4


def test_bias_is_added_before_rounding():
    rng = np.random.default_rng(7)
    t = sparse_input(rng, 2, 8, 8, 0.5)
    cfg = layer(rng.integers(-512, 512, size=(3, 2, 3, 3)), bias=np.array([ONE, -3 * ONE, 17]))
    got, _ = conv_zero_skip(encode(t), cfg)
    assert got == conv_dense_oracle(t, cfg)
    empty, _ = conv_zero_skip(encode(FeatureMapTensor(np.zeros((2, 8, 8), dtype=np.int64))), cfg)
    assert empty.values[:, 0, 0].tolist() == [ONE, -3 * ONE, 17]


def test_output_saturates():
    # Q16.8 carries 24 magnitude bits plus sign
    t = FeatureMapTensor(np.full((1, 3, 3), 2 ** 22, dtype=np.int64))
    cfg = layer(np.full((1, 1, 3, 3), 2 ** 20, dtype=np.int64))
    got, _ = conv_zero_skip(encode(t), cfg)
    assert got.values.max() == 2 ** 24 - 1
    neg, _ = conv_zero_skip(encode(FeatureMapTensor(-t.values)), cfg)
    assert neg.values.min() == -(2 ** 24)
    assert got == conv_dense_oracle(t, cfg)


# ---------- activation / pooling ----------

def test_relu():
    t = FeatureMapTensor(np.array([[[-3, 0, 4]]]))
    assert relu(t).values.tolist() == [[[0, 0, 4]]]


def test_maxpool2_drops_odd_edge():
    t = FeatureMapTensor(np.arange(15).reshape(1, 3, 5))
    assert maxpool2(t).values.tolist() == [[[6, 8]]]
    with pytest.raises(ConfigError):
        maxpool2(FeatureMapTensor(np.ones((1, 1, 4), dtype=np.int64)))


# ---------- layers ----------

def test_run_layer_identity():
    rng = np.random.default_rng(8)
    t = sparse_input(rng, 1, 8, 8, 0.5)
    out, _ = run_layer(encode(t), layer([[[[ONE]]]], relu_enabled=False))
    assert decode(out) == t
    out, _ = run_layer(encode(t), layer([[[[ONE]]]], relu_enabled=True))
    assert decode(out) == relu(t)


def test_negative_kernel_kills_positive_input():
    t = FeatureMapTensor(np.full((1, 6, 6), ONE, dtype=np.int64))
    out, _ = run_layer(encode(t), layer(np.full((2, 1, 3, 3), -ONE), relu_enabled=True))
    assert out.nzvl.size == 0


def test_run_layer_matches_dense_path():
    rng = np.random.default_rng(9)
    t = sparse_input(rng, 3, 16, 16, 0.3, lo=0)
    cfg = layer(rng.integers(-256, 256, size=(8, 3, 3, 3)), relu_enabled=True, pool=True)
    out, _ = run_layer(encode(t), cfg)
    assert out.dims == (8, 8, 8)
    assert decode(out) == run_layer_dense(t, cfg)
    assert 0 < out.nzvl.size < out.size


# ---------- network ----------

def test_fully_connected_rounding():
    t = FeatureMapTensor(np.array([[[ONE, 2 * ONE]]]))
    w = np.array([[ONE, ONE], [128, -ONE]])
    assert fully_connected(t, w).tolist() == [3 * ONE, 128 - 2 * ONE]
    assert fully_connected(t, w, bias=np.array([1, 0])).tolist() == [3 * ONE + 1, -384]
    with pytest.raises(ConfigError):
        fully_connected(t, np.ones((2, 3), dtype=np.int64))


def test_identity_network_scores_equal_input():
    rng = np.random.default_rng(10)
    t = FeatureMapTensor(rng.integers(0, 4 * ONE, size=(1, 8, 8)))
    res = run_network(encode(t), identity_network(8, 8))
    assert res.scores_raw.tolist() == t.values.ravel().tolist()
    assert res.predicted == int(np.argmax(t.values.ravel()))
    assert res.label == f"px{res.predicted}"


def test_permuted_fc_rows_permute_scores():
    rng = np.random.default_rng(11)
    t = FeatureMapTensor(rng.integers(0, 4 * ONE, size=(1, 4, 4)))
    net = identity_network(4, 4)
    perm = rng.permutation(16)
    permuted = NetworkConfig(layers=net.layers, fc_weights=net.fc_weights[perm],
                             fc_labels=[net.fc_labels[i] for i in perm], input_shape=net.input_shape)
    base = run_network(encode(t), net).scores_raw
    assert run_network(encode(t), permuted).scores_raw.tolist() == base[perm].tolist()


def test_roshambo_network_matches_dense_path():
    rng = np.random.default_rng(12)
    net = random_roshambo_network(seed=3)
    t = FeatureMapTensor(rng.integers(0, 2 * ONE, size=(1, 64, 64)))
    res = run_network(encode(t), net)
    dense = run_network_dense(t, net)
    assert res.scores_raw.tolist() == dense.scores_raw.tolist()
    assert len(res.layer_stats) == 5
    assert res.label in ("rock", "paper", "scissors", "background")
    total = res.total_stats
    assert total.macs_performed == sum(s.macs_performed for s in res.layer_stats)


def test_network_with_bias_and_workers():
    rng = np.random.default_rng(13)
    net = random_network((16, 16, 1), (4, 8), ("a", "b", "c"), seed=5, bias=True)
    t = sparse_input(rng, 1, 16, 16, 0.5, lo=0)
    one = run_network(encode(t), net, workers=1)
    four = run_network(encode(t), net, workers=4)
    assert one.scores_raw.tolist() == four.scores_raw.tolist()
    assert one.scores_raw.tolist() == run_network_dense(t, net).scores_raw.tolist()


def test_network_input_dims_checked():
    with pytest.raises(ConfigError):
        run_network(encode(FeatureMapTensor(np.ones((1, 4, 4), dtype=np.int64))), identity_network(8, 8))


# ---------- stats / config ----------

def test_mac_stats_arithmetic():
    a = MacStats(100, 400, 10, 5)
    b = MacStats(28, 100, 2, 1)
    s = a + b
    assert (s.macs_performed, s.macs_dense_equivalent, s.zero_skipped, s.nnz_in) == (128, 500, 12, 6)
    assert s.skipped_macs == 372
    assert s.compute_cycles(128) == 1
    assert MacStats(129).compute_cycles(128) == 2
    assert MacStats().savings_ratio == 0.0
    with pytest.raises(ConfigError):
        s.compute_cycles(0)


def test_layer_config_validation():
    with pytest.raises(ConfigError):
        layer(np.ones((1, 1, 2, 2), dtype=np.int64))
    with pytest.raises(ConfigError):
        ConvLayerConfig(3, 1, 2, np.ones((1, 1, 3, 3), dtype=np.int64))
    with pytest.raises(ConfigError):
        ConvLayerConfig(3, 1, 1, np.full((1, 1, 3, 3), 0.5))
    with pytest.raises(ConfigError):
        ConvLayerConfig(3, 1, 1, np.full((1, 1, 3, 3), 2 ** 24, dtype=np.int64))
    with pytest.raises(ConfigError):
        layer(np.ones((1, 1, 3, 3), dtype=np.int64), bias=np.ones(2, dtype=np.int64))
    with pytest.raises(ConfigError):
        layer(np.ones((1, 1, 3, 3), dtype=np.int64), padding=-1)


def test_network_config_validation():
    cfg = layer(np.ones((2, 1, 3, 3), dtype=np.int64), pool=True)
    with pytest.raises(ConfigError):
        NetworkConfig(layers=[cfg], fc_weights=np.ones((3, 10), dtype=np.int64), input_shape=(8, 8, 1))
    with pytest.raises(ConfigError):
        NetworkConfig(layers=[cfg], fc_weights=np.ones((3, 32), dtype=np.int64), fc_labels=["a"],
                      input_shape=(8, 8, 1))
    with pytest.raises(ConfigError):
        NetworkConfig(layers=[cfg], fc_weights=np.ones((3, 32), dtype=np.int64), input_shape=(8, 8, 2))
    with pytest.raises(ConfigError):
        NetworkConfig(layers=[cfg], fc_weights=np.ones((3, 32), dtype=np.int64), input_shape=(1, 1, 1))
    net = NetworkConfig(layers=[cfg], fc_weights=np.ones((3, 32), dtype=np.int64), input_shape=(8, 8, 1))
    assert net.fc_labels == ["class0", "class1", "class2"]
    assert net.output_shapes() == [(8, 8, 1), (4, 4, 2)]
