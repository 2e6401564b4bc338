import math

import numpy as np
import pytest

from uwmmse import channel as ch
from uwmmse.channel import (
    ChannelSource,
    DatasetFormatError,
    FadingSpec,
    NetworkConfig,
    SpatialSpec,
    Topology,
)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(M=0)
    with pytest.raises(ValueError):
        NetworkConfig(R=1, T=1, d=2)
    with pytest.raises(ValueError):
        NetworkConfig(Pmax=0)
    with pytest.raises(ValueError):
        NetworkConfig(sigma=-1)
    with pytest.raises(ValueError):
        NetworkConfig(M=2, alpha=(1.0, -1.0))
    assert np.array_equal(NetworkConfig(M=3).weights, np.ones(3))


def test_fading_spec_parsing():
    assert FadingSpec.parse("rician").k_factor == 100.0
    assert FadingSpec.parse("rician:10").k_factor == 10.0
    assert str(FadingSpec.parse("Rayleigh")) == "rayleigh"
    with pytest.raises(ValueError):
        FadingSpec("rician", -1.0)
    with pytest.raises(ValueError):
        SpatialSpec("gaussian")
    assert SpatialSpec.parse("gaussian:0.5").stddev == 0.5


def test_single_pair_topology():
    topo = ch.sample_topology(1, rng_seed=3)
    assert topo.tx_positions.shape == (1, 2) and topo.rx_positions.shape == (1, 2)
    assert topo.distances.shape == (1, 1) and topo.distances[0, 0] >= 0


def test_topology_deterministic():
    a = ch.sample_topology(7, rng_seed=42)
    b = ch.sample_topology(7, rng_seed=42)
    assert np.array_equal(a.tx_positions, b.tx_positions)
    assert np.array_equal(a.distances, b.distances)


def test_distance_convention():
    # l[i, j] is the distance from transmitter j to receiver i
    topo = Topology(np.array([[0.0, 0.0], [3.0, 0.0]]), np.array([[0.0, 4.0], [3.0, 1.0]]))
    assert topo.distances[0, 1] == pytest.approx(5.0)
    assert topo.distances[1, 0] == pytest.approx(math.hypot(3, 1))
    assert np.allclose(np.diag(topo.distances), [4.0, 1.0])


def test_uniform_mean_position():
    M = 10000
    topo = ch.sample_topology(M, rng_seed=1)
    side = math.sqrt(M)
    se = side / math.sqrt(12) / math.sqrt(M)
    for pos in (topo.tx_positions, topo.rx_positions):
        assert np.all(pos >= 0) and np.all(pos <= side)
        assert np.all(np.abs(pos.mean(axis=0) - side / 2) <= 3 * se)


def test_gaussian_placement_unclipped():
    M = 4000
    topo = ch.sample_topology(M, SpatialSpec.gaussian(30.0), rng_seed=2)
    side = math.sqrt(M)
    pos = topo.tx_positions
    assert np.any(pos < 0) or np.any(pos > side)
    assert np.all(np.abs(pos.mean(axis=0) - side / 2) <= 3 * 30.0 / math.sqrt(M))
    assert np.allclose(pos.std(axis=0), 30.0, rtol=0.05)


def test_rayleigh_component_variance_at_zero_distance():
    # (a + ib)/sqrt(2) with a, b ~ N(0, 1): each component has variance 1/2
    topo = Topology(np.zeros((1, 2)), np.zeros((1, 2)))
    cfg = NetworkConfig(M=1, R=1000, T=1000)
    H = ch.sample_csi(topo, config=cfg, rng_seed=0).reshape(-1)
    n = H.size
    for comp in (H.real, H.imag):
        var = comp.var()
        assert abs(var - 0.5) <= 3 * 0.5 * math.sqrt(2 / n)
        assert abs(comp.mean()) <= 3 * math.sqrt(0.5 / n)


def test_rician_parameters():
    mu, sd = ch.rician_params(100.0)
    assert mu == pytest.approx(0.70360, abs=5e-6)
    assert sd == pytest.approx(0.07036, abs=5e-6)


def test_rician_moments():
    topo = Topology(np.zeros((1, 2)), np.zeros((1, 2)))
    cfg = NetworkConfig(M=1, R=500, T=500)
    H = ch.sample_csi(topo, FadingSpec("rician", 100.0), cfg, rng_seed=5).reshape(-1)
    mu, sd = ch.rician_params(100.0)
    assert abs(H.real.mean() - mu) <= 3 * sd / math.sqrt(H.size)
    assert abs(H.imag.std() - sd) <= 0.01 * sd


def test_unit_distance_halves_scale():
    topo = Topology(np.zeros((1, 2)), np.array([[1.0, 0.0]]))
    cfg = NetworkConfig(M=1, R=2, T=2)
    H = ch.sample_csi(topo, config=cfg, rng_seed=8)
    rng = np.random.default_rng(np.random.SeedSequence(8))
    a = rng.standard_normal((1, 1, 2, 2))
    b = rng.standard_normal((1, 1, 2, 2))
    assert np.allclose(H, (a + 1j * b) / math.sqrt(2) * 0.5, rtol=1e-15)
    assert ch.path_factor(1.0) == 0.5


def test_path_factor_nonincreasing():
    l = np.linspace(0, 10, 1001)
    assert np.all(np.diff(ch.path_factor(l)) <= 0)


def test_csi_shape_and_mismatch():
    cfg = NetworkConfig(M=4)
    H = ch.sample_network(cfg, rng_seed=0)
    assert H.shape == (4, 4, 3, 5) and np.all(np.isfinite(H))
    with pytest.raises(ValueError):
        ch.sample_csi(ch.sample_topology(3), config=cfg)


def test_distort_identity_cases():
    H = ch.sample_network(NetworkConfig(), rng_seed=1)
    assert np.array_equal(ch.distort_csi(H, 0.0, 0.1, 3), H)
    assert np.array_equal(ch.distort_csi(H, 1.0, 0.0, 3), H)


def test_distort_counts_exact():
    H = ch.sample_network(NetworkConfig(), rng_seed=1)
    out = ch.distort_csi(H, 0.5, 1e-3, rng_seed=4)
    assert np.count_nonzero(out != H) == 750
    for rate in (0.1, 0.3, 0.6, 0.9):
        assert np.count_nonzero(ch.distort_csi(H, rate, 1e-3, 4) != H) == math.floor(rate * 1500 + 1e-9)


def test_distort_deterministic_and_validated():
    H = ch.sample_network(NetworkConfig(M=3), rng_seed=1)
    assert np.array_equal(ch.distort_csi(H, 0.4, 0.01, 9), ch.distort_csi(H, 0.4, 0.01, 9))
    with pytest.raises(ValueError):
        ch.distort_csi(H, 1.5, 0.01)
    with pytest.raises(ValueError):
        ch.distort_csi(H, 0.5, -1)


def test_distort_noise_scale():
    H = np.zeros((20, 20, 10, 10), complex)
    out = ch.distort_csi(H, 1.0, 0.001, rng_seed=2)
    assert out.real.std() == pytest.approx(0.001, rel=0.02)


def test_dataset_round_trip(tmp_path):
    data = ChannelSource(NetworkConfig(M=3)).draw(3, "test")
    path = tmp_path / "d.bin"
    ch.save_dataset(path, list(data))
    back = ch.load_dataset(path)
    assert len(back) == 3
    for a, b in zip(data, back):
        assert a.tobytes() == b.tobytes()


def test_dataset_header_layout(tmp_path):
    path = tmp_path / "d.bin"
    ch.save_dataset(path, [np.zeros((2, 2, 3, 4), complex)])
    raw = path.read_bytes()
    assert raw[:4] == b"UWMM"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert [int.from_bytes(raw[k : k + 4], "little") for k in (8, 12, 16, 20)] == [2, 3, 4, 1]
    assert int.from_bytes(raw[24:32], "little") == 1
    assert len(raw) == 32 + 2 * 2 * 3 * 4 * 16


def test_empty_dataset(tmp_path):
    path = tmp_path / "e.bin"
    ch.save_dataset(path, [])
    assert ch.load_dataset(path) == []


def test_corrupt_magic(tmp_path):
    path = tmp_path / "d.bin"
    ch.save_dataset(path, [np.ones((1, 1, 1, 1), complex)])
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError) as info:
        ch.load_dataset(path)
    assert info.value.offset == 0


def test_truncated_payload(tmp_path):
    path = tmp_path / "d.bin"
    ch.save_dataset(path, [np.ones((2, 2, 1, 1), complex)] * 2)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(DatasetFormatError) as info:
        ch.load_dataset(path)
    assert info.value.offset == 32 + 4 * 16
    path.write_bytes(raw[:10])
    with pytest.raises(DatasetFormatError):
        ch.load_dataset(path)


def test_mixed_shapes_rejected(tmp_path):
    with pytest.raises(ValueError):
        ch.save_dataset(tmp_path / "x.bin", [np.ones((2, 2, 1, 1)), np.ones((3, 3, 1, 1))])


def test_source_streams():
    src = ChannelSource(NetworkConfig(M=3), seed=7)
    a = src.draw(4, "train")
    assert np.array_equal(src.draw(2, "train", start=2), a[2:])
    assert not np.array_equal(src.draw(1, "validation")[0], a[0])
    assert ch.derive_seed(7, "train") == ch.derive_seed(7, "train") != ch.derive_seed(8, "train")
    assert 0 <= ch.derive_seed(7, "x") < 2 ** 63
