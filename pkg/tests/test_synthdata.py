import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gtta import synthdata as sd
from gtta.errors import BadMagic, EmptyDomain, VersionMismatch


def _plain(**kw):
    base = dict(name="plain", noise_sigma=0.0, spurious_corr=0.0, n_glaucoma=10, n_normal=10, seed=3)
    base.update(kw)
    return sd.DomainSpec(**base)


@pytest.fixture(scope="module")
def small_domain():
    return sd.generate_domain(_plain(noise_sigma=0.03, spurious_corr=0.5, n_glaucoma=12, n_normal=9, seed=11))


# ---------------------------------------------------------------- rendering


def test_marker_probability_formula():
    assert sd.marker_probability(0.0, 0) == 0.5
    assert sd.marker_probability(0.0, 1) == 0.5
    assert sd.marker_probability(0.9, 1) == pytest.approx(0.95)
    assert sd.marker_probability(0.9, 0) == pytest.approx(0.05)
    assert sd.marker_probability(-1.0, 1) == 0.0


def test_zero_correlation_marker_is_a_coin_flip():
    rng = np.random.default_rng(0)
    spec = _plain()
    bright = [sd.render_sample(rng, spec, 0).marker_bright for _ in range(2000)]
    assert abs(np.mean(bright) - 0.5) < 0.04


def test_disc_brighter_than_background():
    rng = np.random.default_rng(5)
    for label in (0, 1):
        s = sd.render_sample(rng, _plain(), label)
        cy, cx = s.disc_center
        yy, xx = np.mgrid[0:64, 0:64] + 0.5
        dist = np.hypot(yy - cy, xx - cx)
        disc = dist <= s.disc_radius
        fundus = (np.hypot(yy - 32, xx - 32) <= 28) & (dist > s.disc_radius + 2)
        assert s.image[:, disc].mean() > s.image[:, fundus].mean()


def test_sample_geometry_ranges():
    rng = np.random.default_rng(9)
    for i in range(200):
        label = i % 2
        s = sd.render_sample(rng, _plain(noise_sigma=0.05), label)
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        lo, hi = sd.CDR_RANGES[label]
        assert lo <= s.cdr <= hi
        assert s.label == int(s.cdr >= 0.6)
        assert 8.0 <= s.disc_radius <= 12.0
        assert np.hypot(s.disc_center[0] - 32, s.disc_center[1] - 32) <= 6.0


def test_render_is_byte_deterministic():
    spec = _plain(noise_sigma=0.05, spurious_corr=0.3)
    a = sd.render_sample(np.random.default_rng(42), spec, 1)
    b = sd.render_sample(np.random.default_rng(42), spec, 1)
    assert hashlib.sha256(a.image.tobytes()).digest() == hashlib.sha256(b.image.tobytes()).digest()


def test_marker_patch_intensity():
    img, geo = sd.render_geometry(np.random.default_rng(1), 1, 1.0)
    assert geo["marker_bright"]
    assert np.all(img[:, :6, :6] == sd.MARKER_HIGH)
    img, geo = sd.render_geometry(np.random.default_rng(1), 1, -1.0)
    assert not geo["marker_bright"]
    assert np.all(img[:, :6, :6] == sd.MARKER_LOW)


@given(st.integers(0, 2**32 - 1), st.sampled_from(range(len(sd.TARGET_STYLES))))
def test_style_does_not_touch_labels_or_geometry(seed, idx):
    # the same seed under the neutral style and a target style draws the
    # same labels, ratios and disc geometry; only pixels change
    style = dict(sd.TARGET_STYLES[idx])
    styled = sd.DomainSpec(**{**style, "spurious_corr": 0.0}, n_glaucoma=3, n_normal=3, seed=seed)
    neutral = _plain(n_glaucoma=3, n_normal=3, seed=seed, noise_sigma=style["noise_sigma"])
    a, b = sd.generate_domain(styled), sd.generate_domain(neutral)
    assert [s.label for s in a.samples] == [s.label for s in b.samples]
    assert [s.cdr for s in a.samples] == [s.cdr for s in b.samples]
    assert [s.disc_center for s in a.samples] == [s.disc_center for s in b.samples]


def test_apply_style_identity_without_noise():
    img, _ = sd.render_geometry(np.random.default_rng(2), 0, 0.0)
    out = sd.apply_style(img, _plain(), np.random.default_rng(0))
    assert np.array_equal(out, np.clip(img, 0, 1).astype(np.float32))


def test_domain_spec_ranges_enforced():
    with pytest.raises(ValueError):
        _plain(brightness_shift=0.5)
    with pytest.raises(ValueError):
        _plain(contrast_gain=2.0)
    with pytest.raises(ValueError):
        _plain(channel_gains=(1.0, 1.0))
    with pytest.raises(ValueError):
        _plain(spurious_corr=1.5)
    with pytest.raises(ValueError):
        _plain(n_normal=-1)


# ---------------------------------------------------------------- domains


def test_generate_domain_counts_and_labels(small_domain):
    assert small_domain.class_counts == {0: 9, 1: 12}
    assert all(s.label == int(s.cdr >= 0.6) for s in small_domain.samples)


def test_one_class_domain():
    ds = sd.generate_domain(_plain(n_glaucoma=0, n_normal=100))
    assert ds.class_counts == {0: 100, 1: 0}


def test_empty_domain_rejected():
    with pytest.raises(EmptyDomain):
        sd.generate_domain(_plain(n_glaucoma=0, n_normal=0))


def test_generate_domain_deterministic(small_domain):
    again = sd.generate_domain(small_domain.spec)
    assert again.digest() == small_domain.digest()
    other = sd.generate_domain(_plain(noise_sigma=0.03, spurious_corr=0.5, n_glaucoma=12, n_normal=9, seed=12))
    assert other.digest() != small_domain.digest()


def test_default_benchmark_specs():
    source, targets = sd.benchmark_specs()
    assert (source.n_glaucoma, source.n_normal, source.spurious_corr) == (1000, 1000, 0.9)
    assert [t.spurious_corr for t in targets] == [0, 0, -0.5, 0, -0.9, 0.3, 0]
    assert all((t.n_glaucoma, t.n_normal) == (150, 150) for t in targets)
    assert source.n_glaucoma + source.n_normal + sum(t.n_glaucoma + t.n_normal for t in targets) == 4100
    styles = [t.style_vector() for t in targets]
    assert len(set(styles)) == 7
    for t in targets:
        differing = sum(a != b for a, b in zip(t.style_vector(), source.style_vector()))
        assert differing >= 2, t.name
    assert len({t.seed for t in targets} | {source.seed}) == 8


def test_source_marker_correlation():
    ds = sd.generate_domain(sd.benchmark_specs(seed=0)[0])
    marker = np.array([s.marker_bright for s in ds.samples], dtype=float)
    corr = np.corrcoef(marker, ds.labels)[0, 1]
    assert abs(corr - 0.9) <= 0.05


@pytest.mark.parametrize("corr", [-0.9, -0.5, 0.0, 0.3])
def test_target_marker_correlation(corr):
    spec = _plain(spurious_corr=corr, n_glaucoma=1000, n_normal=1000, seed=77)
    rng = np.random.default_rng(spec.seed)
    # the marker draw is the only thing measured, so sample geometry alone
    labels = np.repeat([0, 1], 1000)
    marker = np.array([sd.render_geometry(rng, int(y), corr)[1]["marker_bright"] for y in labels], dtype=float)
    assert abs(np.corrcoef(marker, labels)[0, 1] - corr) <= 0.05


def test_disc_patch_mask_covers_disc(small_domain):
    for s in small_domain.samples:
        mask = sd.disc_patch_mask(s)
        assert mask.shape == (8, 8)
        cy, cx = s.disc_center
        assert mask[int(cy // 8), int(cx // 8)]
        assert not mask[0, 0]
        assert 4 <= mask.sum() <= 16


# ---------------------------------------------------------------- persistence


def test_domain_roundtrip(tmp_path, small_domain):
    path = tmp_path / "d.gtta"
    sd.save_domain(small_domain, path)
    back = sd.load_domain(path)
    assert back.digest() == small_domain.digest()
    assert back.name == small_domain.name
    assert back.spec == small_domain.spec
    for a, b in zip(back.samples, small_domain.samples):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.disc_center == pytest.approx(b.disc_center)
    manifest = json.loads(sd.manifest_path(path).read_text())
    assert manifest["spec"]["name"] == small_domain.name


def test_domain_file_layout(tmp_path, small_domain):
    path = tmp_path / "d.gtta"
    sd.save_domain(small_domain, path)
    raw = path.read_bytes()
    magic, version, count, h, w, c = struct.unpack_from("<4sIIHHH", raw)
    assert (magic, version, count, h, w, c) == (b"GTTA", 1, len(small_domain), 64, 64, 3)
    n_pix = count * 3 * 64 * 64
    off = struct.calcsize("<4sIIHHH")
    assert len(raw) == off + 4 * n_pix + count + 4 * count
    first = np.frombuffer(raw, dtype="<f4", count=3 * 64 * 64, offset=off)
    assert np.array_equal(first, small_domain.samples[0].image.reshape(-1))
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off + 4 * n_pix)
    assert labels.tolist() == small_domain.labels.tolist()


def test_truncated_file_raises_cleanly(tmp_path, small_domain):
    path = tmp_path / "d.gtta"
    sd.save_domain(small_domain, path)
    raw = path.read_bytes()
    for cut in (0, 3, 10, 100, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises((BadMagic, VersionMismatch)):
            sd.load_domain(path)


def test_bad_magic_and_version(tmp_path, small_domain):
    path = tmp_path / "d.gtta"
    sd.save_domain(small_domain, path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        sd.load_domain(path)
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        sd.load_domain(path)


def test_empty_dataset_not_saved(tmp_path):
    path = tmp_path / "e.gtta"
    with pytest.raises(EmptyDomain):
        sd.save_domain(sd.Dataset(samples=[]), path)
    assert not path.exists()


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        sd.load_domain(tmp_path / "nope.gtta")


def test_benchmark_roundtrip(tmp_path):
    source, targets = sd.default_benchmark(seed=4, n_source=5, n_target=3)
    sd.save_benchmark(source, targets, tmp_path)
    src2, tg2 = sd.load_benchmark(tmp_path)
    assert src2.digest() == source.digest()
    assert [t.name for t in tg2] == [t.name for t in targets]
    assert [t.digest() for t in tg2] == [t.digest() for t in targets]
