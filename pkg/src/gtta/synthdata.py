"""Fundus-analog multi-domain benchmark.

Each image is a dark circular fundus with a bright optic disc and a paler
inner cup.  The label is determined by the cup-to-disc radius ratio
(glaucoma iff cdr >= 0.6).  A 6x6 marker in the top-left corner is bright
with a label-dependent probability, giving every domain a tunable spurious
cue.  Domains differ by a brightness / contrast / channel-gain / noise
style transform applied after the geometry is drawn.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gtta.errors import BadMagic, EmptyDomain, VersionMismatch

IMAGE_SIZE = 64
CHANNELS = 3
MARKER_SIZE = 6
CDR_THRESHOLD = 0.6
CDR_RANGES = {0: (0.3, 0.55), 1: (0.65, 0.9)}
DISC_RADIUS_RANGE = (8.0, 12.0)
DISC_JITTER = 6.0

FUNDUS_RADIUS = 30.0
FUNDUS_RGB = np.array([0.55, 0.24, 0.12])
DISC_RGB = np.array([0.92, 0.70, 0.42])
CUP_RGB = np.array([1.00, 0.96, 0.84])
MARKER_HIGH = 0.55  # faint on purpose: a saturated marker is learned to the exclusion of the disc
MARKER_LOW = 0.45
CONTRAST_PIVOT = 0.3  # roughly the mean fundus intensity

MAGIC = b"GTTA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIHHH")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    brightness_shift: float = 0.0
    contrast_gain: float = 1.0
    channel_gains: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    spurious_corr: float = 0.0
    n_glaucoma: int = 0
    n_normal: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_gains", tuple(float(g) for g in self.channel_gains))
        if not -0.3 <= self.brightness_shift <= 0.3:
            raise ValueError("brightness_shift must lie in [-0.3, 0.3]")
        if not 0.5 <= self.contrast_gain <= 1.5:
            raise ValueError("contrast_gain must lie in [0.5, 1.5]")
        if len(self.channel_gains) != 3 or not all(0.6 <= g <= 1.4 for g in self.channel_gains):
            raise ValueError("channel_gains must be 3 values in [0.6, 1.4]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not -1.0 <= self.spurious_corr <= 1.0:
            raise ValueError("spurious_corr must lie in [-1, 1]")
        if self.n_glaucoma < 0 or self.n_normal < 0:
            raise ValueError("class counts must be >= 0")

    def style_vector(self) -> tuple:
        return (self.brightness_shift, self.contrast_gain, *self.channel_gains, self.noise_sigma)


@dataclass
class Sample:
    image: np.ndarray  # float32 [3 x H x W] in [0, 1]
    label: int
    domain: str
    cdr: float
    disc_center: tuple = (IMAGE_SIZE / 2, IMAGE_SIZE / 2)
    disc_radius: float = 10.0
    marker_bright: bool = False


@dataclass
class Dataset:
    samples: list
    name: str = ""
    spec: DomainSpec | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.samples)

    @property
    def class_counts(self) -> dict:
        labels = [s.label for s in self.samples]
        return {0: labels.count(0), 1: labels.count(1)}

    @property
    def images(self) -> np.ndarray:
        if "images" not in self._cache:
            self._cache["images"] = np.stack([s.image for s in self.samples])
        return self._cache["images"]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def cdrs(self) -> np.ndarray:
        return np.array([s.cdr for s in self.samples], dtype=np.float32)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            h.update(bytes([s.label]))
            h.update(struct.pack("<f", s.cdr))
        return h.hexdigest()


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_yy, _xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5


def _disk_coverage(cy: float, cx: float, r: float) -> np.ndarray:
    # one-pixel linear ramp at the rim for a soft edge
    dist = np.hypot(_yy - cy, _xx - cx)
    return np.clip(r - dist + 0.5, 0.0, 1.0)


def marker_probability(spurious_corr: float, label: int) -> float:
    return (1.0 + spurious_corr * (2 * label - 1)) / 2.0


def render_geometry(rng: np.random.Generator, label: int, spurious_corr: float) -> tuple:
    """Pre-style image plus its geometry record."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    lo, hi = CDR_RANGES[label]
    cdr = float(rng.uniform(lo, hi))
    r_disc = float(rng.uniform(*DISC_RADIUS_RANGE))
    ang = rng.uniform(0.0, 2 * np.pi)
    rad = DISC_JITTER * np.sqrt(rng.uniform())
    cy = IMAGE_SIZE / 2 + rad * np.sin(ang)
    cx = IMAGE_SIZE / 2 + rad * np.cos(ang)
    bright = bool(rng.uniform() < marker_probability(spurious_corr, label))

    centre = IMAGE_SIZE / 2
    rr = np.hypot(_yy - centre, _xx - centre) / FUNDUS_RADIUS
    fundus = _disk_coverage(centre, centre, FUNDUS_RADIUS)
    vignette = 1.0 - 0.35 * np.clip(rr, 0.0, 1.0) ** 2
    img = fundus[None] * vignette[None] * FUNDUS_RGB[:, None, None]
    disc = _disk_coverage(cy, cx, r_disc)[None]
    img = img * (1 - disc) + disc * DISC_RGB[:, None, None]
    cup = _disk_coverage(cy, cx, cdr * r_disc)[None]
    img = img * (1 - cup) + cup * CUP_RGB[:, None, None]
    img[:, :MARKER_SIZE, :MARKER_SIZE] = MARKER_HIGH if bright else MARKER_LOW
    geometry = {"cdr": cdr, "disc_center": (cy, cx), "disc_radius": r_disc, "marker_bright": bright}
    return img, geometry


def apply_style(img: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Contrast about CONTRAST_PIVOT, brightness as a (1 + shift) exposure
    factor, per-channel gain, noise, clip.

    Brightness scales rather than offsets so dark domains keep the dim
    fundus channels above zero instead of clipping them away.
    """
    out = (img - CONTRAST_PIVOT) * spec.contrast_gain + CONTRAST_PIVOT
    out = out * (1.0 + spec.brightness_shift)
    out = out * np.asarray(spec.channel_gains)[:, None, None]
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_sample(rng: np.random.Generator, spec: DomainSpec, label: int) -> Sample:
    img, geo = render_geometry(rng, label, spec.spurious_corr)
    image = apply_style(img, spec, rng)
    return Sample(
        image=image,
        label=int(label),
        domain=spec.name,
        cdr=float(np.float32(geo["cdr"])),
        disc_center=geo["disc_center"],
        disc_radius=geo["disc_radius"],
        marker_bright=geo["marker_bright"],
    )


def generate_domain(spec: DomainSpec) -> Dataset:
    total = spec.n_glaucoma + spec.n_normal
    if total <= 0:
        raise EmptyDomain(f"domain {spec.name!r} has no samples")
    rng = np.random.default_rng(spec.seed)
    labels = np.array([1] * spec.n_glaucoma + [0] * spec.n_normal)
    labels = labels[rng.permutation(total)]
    samples = [render_sample(rng, spec, int(y)) for y in labels]
    return Dataset(samples=samples, name=spec.name, spec=spec)


# style table for the default benchmark (also reproduced in README)
SOURCE_STYLE = dict(name="source", brightness_shift=0.0, contrast_gain=1.0,
                    channel_gains=(1.0, 1.0, 1.0), noise_sigma=0.02, spurious_corr=0.9)
TARGET_STYLES = [
    dict(name="haze", brightness_shift=0.075, contrast_gain=0.85,
         channel_gains=(1.05, 1.0, 0.95), noise_sigma=0.03, spurious_corr=0.0),
    dict(name="dusk", brightness_shift=-0.075, contrast_gain=1.1,
         channel_gains=(0.95, 0.95, 1.0), noise_sigma=0.02, spurious_corr=0.0),
    dict(name="cobalt", brightness_shift=0.0, contrast_gain=0.95,
         channel_gains=(0.85, 0.95, 1.15), noise_sigma=0.04, spurious_corr=-0.5),
    dict(name="amber", brightness_shift=0.025, contrast_gain=1.05,
         channel_gains=(1.15, 1.0, 0.85), noise_sigma=0.03, spurious_corr=0.0),
    dict(name="flash", brightness_shift=0.1, contrast_gain=1.15,
         channel_gains=(1.0, 1.05, 1.05), noise_sigma=0.05, spurious_corr=-0.9),
    dict(name="shadow", brightness_shift=-0.125, contrast_gain=0.9,
         channel_gains=(1.0, 0.9, 0.9), noise_sigma=0.02, spurious_corr=0.3),
    dict(name="grain", brightness_shift=-0.025, contrast_gain=1.0,
         channel_gains=(0.95, 1.1, 1.0), noise_sigma=0.08, spurious_corr=0.0),
]


def benchmark_specs(seed: int = 0, n_source: int = 1000, n_target: int = 150) -> tuple:
    source = DomainSpec(**SOURCE_STYLE, n_glaucoma=n_source, n_normal=n_source, seed=seed * 1000 + 1)
    targets = [
        DomainSpec(**style, n_glaucoma=n_target, n_normal=n_target, seed=seed * 1000 + 2 + i)
        for i, style in enumerate(TARGET_STYLES)
    ]
    return source, targets


def default_benchmark(seed: int = 0, n_source: int = 1000, n_target: int = 150) -> tuple:
    """(source, [7 targets]) with the fixed style table above."""
    source, targets = benchmark_specs(seed, n_source, n_target)
    return generate_domain(source), [generate_domain(t) for t in targets]


def disc_patch_mask(sample: Sample, patch: int = 8) -> np.ndarray:
    """Boolean [H/patch x W/patch] grid of patches containing any disc pixel."""
    cy, cx = sample.disc_center
    inside = np.hypot(_yy - cy, _xx - cx) <= sample.disc_radius
    g = IMAGE_SIZE // patch
    return inside.reshape(g, patch, g, patch).any(axis=(1, 3))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_domain(ds: Dataset, path) -> None:
    """Write the binary domain file plus ``<stem>.manifest.json`` beside it."""
    if len(ds) == 0:
        raise EmptyDomain("refusing to save an empty dataset")
    path = Path(path)
    c, h, w = ds.samples[0].image.shape
    images = np.stack([s.image for s in ds.samples]).astype("<f4")
    labels = np.array([s.label for s in ds.samples], dtype=np.uint8)
    cdrs = np.array([s.cdr for s in ds.samples], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(ds), h, w, c))
        fh.write(images.tobytes())
        fh.write(labels.tobytes())
        fh.write(cdrs.tobytes())
    manifest = {
        "name": ds.name,
        "format_version": FORMAT_VERSION,
        "count": len(ds),
        "class_counts": {str(k): v for k, v in ds.class_counts.items()},
        "spec": asdict(ds.spec) if ds.spec is not None else None,
        "geometry": [
            {"disc_center": list(s.disc_center), "disc_radius": s.disc_radius,
             "marker_bright": s.marker_bright}
            for s in ds.samples
        ],
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def load_domain(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise BadMagic(f"{path}: truncated header")
    magic, version, count, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    n_pix = count * c * h * w
    expected = _HEADER.size + 4 * n_pix + count + 4 * count
    if len(raw) != expected:
        raise BadMagic(f"{path}: payload is {len(raw)} bytes, header implies {expected}")
    off = _HEADER.size
    images = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=off).reshape(count, c, h, w)
    off += 4 * n_pix
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off)
    off += count
    cdrs = np.frombuffer(raw, dtype="<f4", count=count, offset=off)

    name, spec, geometry = path.stem, None, None
    mpath = manifest_path(path)
    if mpath.exists():
        man = json.loads(mpath.read_text())
        name = man.get("name", name)
        if man.get("spec"):
            spec = DomainSpec(**man["spec"])
        geometry = man.get("geometry")
    samples = []
    for i in range(count):
        geo = geometry[i] if geometry else {}
        samples.append(Sample(
            image=images[i].astype(np.float32),
            label=int(labels[i]),
            domain=name,
            cdr=float(cdrs[i]),
            disc_center=tuple(geo.get("disc_center", (IMAGE_SIZE / 2, IMAGE_SIZE / 2))),
            disc_radius=float(geo.get("disc_radius", 10.0)),
            marker_bright=bool(geo.get("marker_bright", False)),
        ))
    return Dataset(samples=samples, name=name, spec=spec)


def save_benchmark(source: Dataset, targets: list, out_dir) -> list:
    """Write every domain as ``<name>.gtta`` plus ``benchmark.json`` listing them in order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in [source, *targets]:
        path = out_dir / f"{ds.name}.gtta"
        save_domain(ds, path)
        written.append(path)
    index = {"source": source.name, "targets": [t.name for t in targets]}
    (out_dir / "benchmark.json").write_text(json.dumps(index, indent=1))
    return written


def load_benchmark(data_dir) -> tuple:
    data_dir = Path(data_dir)
    index = json.loads((data_dir / "benchmark.json").read_text())
    source = load_domain(data_dir / f"{index['source']}.gtta")
    return source, [load_domain(data_dir / f"{n}.gtta") for n in index["targets"]]
