import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from oracles import blend_pixel
from stseg.synth import (
    NoiseField,
    SourcePool,
    SynthesisError,
    SynthParams,
    binarize,
    compose_anomaly,
    generate_perlin,
    synthesize,
)


def test_perlin_deterministic():
    a = generate_perlin((64, 48), (4, 2), seed=7)
    b = generate_perlin((64, 48), (4, 2), seed=7)
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (64, 48)
    assert not np.array_equal(a.values, generate_perlin((64, 48), (4, 2), seed=8).values)


def test_perlin_single_cell_is_one_smooth_lobe():
    v = generate_perlin((64, 64), (1, 1), seed=3).values
    assert np.isfinite(v).all()
    for line in (v, v.T):
        sign_changes = np.abs(np.diff(np.sign(line), axis=1)).sum(axis=1) / 2
        assert sign_changes.max() <= 3


def test_perlin_continuity():
    v = generate_perlin((128, 128), (8, 8), seed=1).values
    # neighbouring pixels differ little compared to the field's range
    assert np.abs(np.diff(v, axis=0)).max() < 0.2
    assert np.abs(np.diff(v, axis=1)).max() < 0.2


def test_perlin_zero_centred_over_seeds():
    means = [generate_perlin((128, 128), (4, 4), seed=s).values.mean() for s in range(100)]
    assert abs(np.mean(means)) < 0.05


@pytest.mark.parametrize("shape, scales", [((4, 64), (1, 1)), ((64, 64), (0, 2)), ((16, 16), (32, 2))])
def test_perlin_rejects_bad_shapes(shape, scales):
    with pytest.raises(ValueError):
        generate_perlin(shape, scales, seed=0)


def test_binarize_extremes_and_known_field():
    field = NoiseField(np.array([[0.1, 0.6, 0.5, -1.0], [0.51, 0.49, 2.0, 0.0],
                                 [0.7, 0.2, 0.3, 0.9], [-0.5, 0.55, 0.45, 0.5]]), (1, 1), 0)
    assert binarize(field, field.values.max() + 1).sum() == 0
    assert binarize(field, field.values.min() - 1).all()
    expected = np.array([[0, 1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1], [0, 1, 0, 0]])
    assert np.array_equal(binarize(field, 0.5), expected)
    with pytest.raises(ValueError):
        binarize(field, float("inf"))


def test_compose_identities():
    rng = np.random.default_rng(0)
    i_n, a = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert np.array_equal(compose_anomaly(i_n, a, np.zeros((8, 8)), 0.7), i_n)
    assert np.array_equal(compose_anomaly(i_n, a, np.ones((8, 8)), 1.0), a)
    # beta = 0 is below the sampling floor but must reduce to the normal image
    np.testing.assert_allclose(compose_anomaly(i_n, a, np.ones((8, 8)), 0.0), i_n, atol=1e-6)


def test_compose_matches_per_pixel_oracle():
    rng = np.random.default_rng(1)
    i_n, a = rng.random((2, 2, 3)), rng.random((2, 2, 3))
    m = np.array([[1, 0], [0, 1]], dtype=float)
    out = compose_anomaly(i_n, a, m, 0.5)
    ref = np.array([[[blend_pixel(i_n[y, x, c], a[y, x, c], m[y, x], 0.5) for c in range(3)]
                     for x in range(2)] for y in range(2)])
    assert np.abs(out - ref).max() <= 1e-6


def test_compose_shape_mismatch():
    with pytest.raises(ValueError):
        compose_anomaly(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)), 0.5)
    with pytest.raises(ValueError):
        compose_anomaly(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((3, 4)), 0.5)


@given(seed=st.integers(0, 2**31 - 1), beta=st.floats(0.15, 1.0))
def test_off_mask_identity_property(seed, beta):
    rng = np.random.default_rng(seed)
    i_n, a = rng.random((16, 16, 3)).astype(np.float32), rng.random((16, 16, 3)).astype(np.float32)
    m = (rng.random((16, 16)) > 0.6).astype(np.float32)
    out = compose_anomaly(i_n, a, m, beta)
    off = m == 0
    assert np.array_equal(out[off], i_n[off])
    assert out.min() >= 0 and out.max() <= 1


def _pool(n=3, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((size, size, 3)).astype(np.float32) for _ in range(n)]


def test_synthesize_reproducible_and_bounded():
    normal = np.full((32, 32, 3), 0.5, dtype=np.float32)
    params = SynthParams(area_bounds=(0.01, 0.5))
    s1 = synthesize(normal, _pool(), np.random.default_rng(5), params)
    s2 = synthesize(normal, _pool(), np.random.default_rng(5), params)
    assert np.array_equal(s1.anomalous_image, s2.anomalous_image) and s1.beta == s2.beta
    assert set(np.unique(s1.mask)) <= {0.0, 1.0}
    assert 0.01 <= s1.anomalous_fraction <= 0.5
    assert 0.15 <= s1.beta <= 1.0
    off = s1.mask == 0
    assert np.abs(s1.anomalous_image[off] - normal[off]).max() <= 1e-6


def test_synthesize_retry_budget_exhausted():
    params = SynthParams(threshold=5.0, max_retries=3)
    with pytest.raises(SynthesisError, match="threshold=5.0"):
        synthesize(np.zeros((32, 32, 3), np.float32), _pool(), np.random.default_rng(0), params)


def test_synthesize_requires_sources():
    with pytest.raises(ValueError):
        synthesize(np.zeros((32, 32, 3), np.float32), [], np.random.default_rng(0))


def test_synthesize_normal_prob_emits_clean_samples():
    normal = np.full((32, 32, 3), 0.5, dtype=np.float32)
    s = synthesize(normal, _pool(), np.random.default_rng(0), SynthParams(normal_prob=1.0))
    assert s.mask.sum() == 0 and np.array_equal(s.anomalous_image, normal)


def test_beta_is_uniform_ks():
    rng = np.random.default_rng(2024)
    normal = np.full((16, 16, 3), 0.5, dtype=np.float32)
    pool = _pool(2, 16)
    betas = [synthesize(normal, pool, rng).beta for _ in range(1000)]
    result = stats.kstest(betas, stats.uniform(loc=0.15, scale=0.85).cdf)
    assert result.pvalue > 0.01


def test_source_pool_from_dir(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((20, 40), np.uint8)).save(tmp_path / "g.png")
    pool = SourcePool.from_dir(tmp_path, (16, 16))
    assert len(pool) == 1 and pool[0].shape == (16, 16, 3)
    with pytest.raises(FileNotFoundError):
        SourcePool.from_dir(tmp_path / "nope", (16, 16))
