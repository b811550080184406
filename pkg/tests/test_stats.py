"""Feature statistics: bounded normalization, moment correctness against a
brute-force oracle, and the serialized statistics container."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttaforge.container import ContainerError, write_container
from ttaforge.stats import (
    batch_statistics,
    load_statistics,
    normalize_features,
    save_statistics,
    source_statistics,
)


def oracle_moments(h, k_max):
    """Independent restatement: mean, then ((h - mean)**k).mean over rows."""
    mu = np.mean(h, axis=0)
    moms = np.array([np.mean((h - mu) ** k, axis=0) for k in range(2, k_max + 1)])
    return mu, moms.reshape(max(k_max - 1, 0), h.shape[1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(2, 16))
def test_normalize_is_strictly_bounded(seed, n, d):
    feats = np.random.default_rng(seed).normal(0, 50, (n, d))
    h = normalize_features(feats)
    assert h.shape == feats.shape
    assert (np.abs(h) < 1.0).all()


def test_normalize_constant_row_is_zero():
    h = normalize_features(np.full((2, 5), 7.3))
    np.testing.assert_array_equal(h, np.zeros((2, 5)))


def test_normalize_rowwise_independence():
    feats = np.random.default_rng(0).normal(0, 3, (6, 8))
    whole = normalize_features(feats)
    for i in range(6):
        np.testing.assert_array_equal(normalize_features(feats[i : i + 1])[0], whole[i])


def test_source_statistics_match_bruteforce():
    rng = np.random.default_rng(42)
    h = rng.normal(0, 1, (50, 7))
    labels = rng.integers(0, 3, 50)
    labels[:3] = [0, 1, 2]  # every class present
    stats = source_statistics(h, labels, k_max=5, n_classes=3)

    mu, moms = oracle_moments(h, 5)
    np.testing.assert_allclose(stats.mu, mu, atol=1e-13)
    np.testing.assert_allclose(stats.central_moments, moms, atol=1e-13)
    for c in range(3):
        np.testing.assert_allclose(stats.class_centroids[c], h[labels == c].mean(axis=0), atol=1e-13)
    np.testing.assert_array_equal(stats.counts, np.bincount(labels, minlength=3))
    assert stats.d == 7 and stats.n_classes == 3 and stats.k_max == 5


def test_moment_accessor_orders():
    h = np.random.default_rng(1).normal(0, 1, (20, 4))
    stats = source_statistics(h, np.arange(20) % 2, k_max=4, n_classes=2)
    np.testing.assert_allclose(stats.moment(2), ((h - h.mean(0)) ** 2).mean(0), atol=1e-14)
    np.testing.assert_allclose(stats.moment(4), ((h - h.mean(0)) ** 4).mean(0), atol=1e-14)
    with pytest.raises(ValueError):
        stats.moment(1)
    with pytest.raises(ValueError):
        stats.moment(5)


def test_k_max_one_stores_no_higher_moments():
    h = np.random.default_rng(2).normal(0, 1, (10, 3))
    stats = source_statistics(h, np.arange(10) % 2, k_max=1, n_classes=2)
    assert stats.central_moments.shape == (0, 3)


def test_higher_k_extends_lower_k_as_prefix():
    h = np.random.default_rng(3).normal(0, 1, (30, 5))
    labels = np.arange(30) % 3
    lo = source_statistics(h, labels, k_max=3, n_classes=3)
    hi = source_statistics(h, labels, k_max=5, n_classes=3)
    np.testing.assert_array_equal(lo.mu, hi.mu)
    np.testing.assert_array_equal(lo.central_moments, hi.central_moments[:2])


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    h = rng.normal(0, 1, (40, 6))
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    perm = rng.permutation(40)
    a = source_statistics(h, labels, k_max=4, n_classes=2)
    b = source_statistics(h[perm], labels[perm], k_max=4, n_classes=2)
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-10)
    np.testing.assert_allclose(a.central_moments, b.central_moments, atol=1e-10)
    np.testing.assert_allclose(a.class_centroids, b.class_centroids, atol=1e-10)


def test_batch_path_reproduces_source_statistics():
    rng = np.random.default_rng(5)
    h = rng.normal(0, 1, (24, 4))
    labels = rng.integers(0, 3, 24)
    labels[:3] = [0, 1, 2]
    src = source_statistics(h, labels, k_max=3, n_classes=3)
    tgt = batch_statistics(h, labels, k_max=3)
    np.testing.assert_array_equal(src.mu, tgt.mu)
    np.testing.assert_array_equal(src.central_moments, tgt.central_moments)
    assert sorted(tgt.class_centroids) == [0, 1, 2]
    for c in range(3):
        np.testing.assert_array_equal(src.class_centroids[c], tgt.class_centroids[c])


def test_batch_statistics_only_present_classes():
    h = np.random.default_rng(6).normal(0, 1, (8, 3))
    tgt = batch_statistics(h, np.array([1, 1, 1, 1, 4, 4, 4, 4]), k_max=2)
    assert sorted(tgt.class_centroids) == [1, 4]
    np.testing.assert_allclose(tgt.class_centroids[1], h[:4].mean(0), atol=1e-14)
    np.testing.assert_allclose(tgt.class_centroids[4], h[4:].mean(0), atol=1e-14)


def test_source_statistics_input_validation():
    h = np.zeros((4, 2))
    with pytest.raises(ValueError, match="no source samples"):
        source_statistics(h, np.zeros(4, dtype=int), k_max=2, n_classes=2)
    with pytest.raises(ValueError):
        source_statistics(np.zeros((0, 2)), np.zeros(0, dtype=int), k_max=2, n_classes=2)
    with pytest.raises(ValueError):
        source_statistics(h, np.zeros(3, dtype=int), k_max=2, n_classes=2)
    with pytest.raises(ValueError):
        source_statistics(h, np.array([0, 0, 1, 3]), k_max=2, n_classes=2)
    with pytest.raises(ValueError):
        source_statistics(h, np.array([0, 0, 1, 1]), k_max=0, n_classes=2)


@pytest.fixture()
def sample_stats():
    rng = np.random.default_rng(7)
    h = normalize_features(rng.normal(0, 2, (60, 8)))
    labels = rng.integers(0, 4, 60)
    labels[:4] = np.arange(4)
    return source_statistics(h, labels, k_max=3, n_classes=4)


def test_statistics_roundtrip(tmp_path, sample_stats):
    path = tmp_path / "stats.bin"
    save_statistics(sample_stats, str(path))
    loaded = load_statistics(str(path))
    np.testing.assert_array_equal(loaded.mu, sample_stats.mu)
    np.testing.assert_array_equal(loaded.central_moments, sample_stats.central_moments)
    np.testing.assert_array_equal(loaded.class_centroids, sample_stats.class_centroids)
    np.testing.assert_array_equal(loaded.counts, sample_stats.counts)
    assert loaded.k_max == sample_stats.k_max


def test_statistics_corrupted_byte_rejected(tmp_path, sample_stats):
    path = tmp_path / "stats.bin"
    save_statistics(sample_stats, str(path))
    raw = bytearray(path.read_bytes())
    raw[-20] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load_statistics(str(path))


def test_statistics_truncation_rejected(tmp_path, sample_stats):
    path = tmp_path / "stats.bin"
    save_statistics(sample_stats, str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(ContainerError):
        load_statistics(str(path))


def test_statistics_wrong_kind_rejected(tmp_path):
    path = tmp_path / "other.bin"
    write_container(str(path), {"kind": "model", "format_version": 1}, {"x": np.zeros(3)})
    with pytest.raises(ContainerError):
        load_statistics(str(path))


def test_statistics_bad_magic_rejected(tmp_path, sample_stats):
    path = tmp_path / "stats.bin"
    save_statistics(sample_stats, str(path))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load_statistics(str(path))
