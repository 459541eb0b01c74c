"""Procedural sketch/photo dataset with zero-shot class splits.

Every class id maps to a taxonomy leaf named "<family>_<k>"; the family
picks a shape renderer (blobs, rings, polygons, stars, crosses) and the
leaf index picks a parameter band inside it, so taxonomy siblings look
alike. A photo is the filled shape over a textured background; a sketch
is a jittered outline of the same latent shape. Photo and sketch of the
same (class_id, sample_id) share their latent shape parameters, so a
cross-modal correspondence exists for the network to learn.

All randomness flows through per-sample seed sequences keyed by
(seed, stream, class_id, sample_id): archives are byte-identical across
runs and independent of generation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, SplitViolation
from .taxonomy import Taxonomy

PHOTO, SKETCH = 0, 1
IMAGE_SIZE = 32
ARCHIVE_MAGIC = b"SAKEDAT1"
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

FAMILIES = ("round_blob", "flat_blob", "hollow_ring", "few_gon",
            "many_gon", "few_star", "many_star", "plus_cross")

# latent / photo / sketch random-stream tags
_L_STREAM, _P_STREAM, _S_STREAM = 101, 102, 103

_SS = IMAGE_SIZE * 2  # supersampling grid side
_coords = (np.arange(_SS) + 0.5) / _SS * 2.0 - 1.0
_GRID_X, _GRID_Y = np.meshgrid(_coords, _coords)


@dataclass
class Sample:
    image: np.ndarray  # (1, 32, 32) float32 in [0, 1]
    modality: int      # PHOTO or SKETCH
    class_id: int
    sample_id: int


@dataclass(frozen=True)
class SplitSpec:
    original_classes: tuple[int, ...]
    source_classes: tuple[int, ...]
    target_classes: tuple[int, ...]
    original_photos_per_class: int = 60
    source_photos_per_class: int = 60
    source_sketches_per_class: int = 30
    gallery_photos_per_class: int = 50
    query_sketches_per_class: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("original_classes", "source_classes", "target_classes"):
            cs = tuple(int(c) for c in getattr(self, name))
            object.__setattr__(self, name, cs)
            if len(set(cs)) != len(cs):
                raise SplitViolation(f"duplicate class in {name}")
            if not cs:
                raise SplitViolation(f"{name} is empty")
        for name in ("original_photos_per_class", "source_photos_per_class",
                     "source_sketches_per_class", "gallery_photos_per_class",
                     "query_sketches_per_class"):
            if getattr(self, name) < 1:
                raise SplitViolation(f"{name} must be >= 1")
        # the zero-shot premise: no test class was ever trained on
        for bad in sorted(set(self.source_classes) & set(self.target_classes)):
            raise SplitViolation(
                f"class {bad} appears in both the source and target sets")
        for bad in sorted(set(self.original_classes) & set(self.target_classes)):
            raise SplitViolation(
                f"class {bad} appears in both the original and target sets")


def default_split(seed: int = 0) -> SplitSpec:
    """20 original / 10 source / 6 target classes over the built-in leaves.

    Leaves are numbered family-major (class_id = 5*family + leaf). The
    original set takes the first two leaves of every family plus a third
    leaf of the first four; the source set takes the first and last
    leaves of the first five families (so five classes sit in both
    original and source sets, and the last three families are known only
    to the original domain). The target set mixes two roles. Three
    classes come from source-covered kinds — hollow_ring level 4 and
    many_gon levels 3 and 4 — so their sketch queries stay well-encoded
    for every fine-tuned model, and each sits inside its family's
    sketch-trained rung ladder. The other three come from kinds only the
    original domain ever taught — many_star levels 3 and 4 and
    plus_cross level 5. Fine-tuning that forgets the original domain
    degrades the star/cross photo features toward generic stroke
    statistics, which slides those photos into the ring-shaped gallery
    neighborhood that sketch queries naturally favor, poisoning the
    well-aligned target classes; preserving the original head keeps the
    spiky photos out of the way.
    """
    original = sorted([f * 5 + 0 for f in range(8)]
                      + [f * 5 + 1 for f in range(8)]
                      + [f * 5 + 2 for f in range(4)])
    source = sorted([f * 5 + 0 for f in range(5)]
                    + [f * 5 + 4 for f in range(5)])
    target = sorted([13, 22, 23]       # ring L4, disk L3, disk L4
                    + [32, 33, 39])    # many_star L3, L4, cross L5
    return SplitSpec(tuple(original), tuple(source), tuple(target), seed=seed)


@dataclass
class Dataset:
    spec: SplitSpec
    class_nodes: dict[int, str]
    original_train: list[Sample] = field(default_factory=list)
    source_train: list[Sample] = field(default_factory=list)
    target_queries: list[Sample] = field(default_factory=list)
    target_gallery: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return getattr(self, name)


SPLIT_NAMES = ("original_train", "source_train", "target_queries",
               "target_gallery")


# -- shape recipes -------------------------------------------------------------

def _family_of(node_name: str) -> tuple[int, int]:
    """(family index, leaf index) parsed from a '<family>_<k>' leaf name."""
    stem, _, num = node_name.rpartition("_")
    if stem in FAMILIES and num.isdigit() and int(num) >= 1:
        return FAMILIES.index(stem), int(num) - 1
    raise ContractViolation(f"no generator recipe for node '{node_name}'")


def _latents(family: int, leaf: int, rng) -> dict:
    """Shared shape parameters for one (class, sample) pair.

    Leaf bands are separated wider than the per-sample jitter, so leaves
    stay learnable while siblings share a family silhouette.
    """
    lat = {
        "family": family,
        "cx": rng.uniform(-0.10, 0.10),
        "cy": rng.uniform(-0.10, 0.10),
        "size_jitter": rng.uniform(0.95, 1.05),
    }
    name = FAMILIES[family]
    if name == "round_blob":
        # large oval at a fixed size; the leaf signal is an aspect ladder
        # with multiplicative steps, so thickness and elongation co-vary
        lat["theta"] = rng.uniform(0.0, np.pi)
        lat["aspect"] = (1.40, 1.72, 2.12, 2.58, 3.15)[leaf] \
            + rng.uniform(-0.06, 0.06)
        lat["size"] = 0.78 * lat["size_jitter"]
    elif name == "flat_blob":
        # thin near-horizontal sliver at a fixed high aspect; the leaf
        # signal is a size ladder (length and thickness grow together)
        lat["theta"] = rng.uniform(-np.pi / 8, np.pi / 8)
        lat["aspect"] = 4.2 + rng.uniform(-0.15, 0.15)
        lat["size"] = (0.38, 0.47, 0.58, 0.72, 0.88)[leaf] * lat["size_jitter"]
    elif name == "hollow_ring":
        # fixed-size annulus; the leaf signal is the hole-radius ladder
        # (hole grows as the ring band thins, a compound cue)
        lat["theta"] = rng.uniform(0.0, np.pi)
        lat["aspect"] = rng.uniform(1.0, 1.12)
        lat["inner"] = (0.32, 0.45, 0.57, 0.69, 0.80)[leaf] \
            + rng.uniform(-0.02, 0.02)
        lat["size"] = 0.60 * lat["size_jitter"]
    elif name == "few_gon":
        # triangles only: corner counts above 4 are unreadable at this
        # resolution, so the leaf signal is a pure size ladder
        lat["theta"] = rng.uniform(0.0, 2 * np.pi)
        lat["sides"] = 3
        lat["size"] = (0.38, 0.47, 0.59, 0.73, 0.88)[leaf] * lat["size_jitter"]
    elif name == "many_gon":
        # 6-8 sides all read as near-circular disks; the side count is
        # texture and the leaf signal is a size ladder offset from the
        # triangle ladder's apparent-size rungs
        lat["theta"] = rng.uniform(0.0, 2 * np.pi)
        lat["sides"] = (6, 7, 8, 6, 7)[leaf]
        lat["size"] = (0.33, 0.43, 0.55, 0.71, 0.91)[leaf] * lat["size_jitter"]
    elif name == "few_star":
        # five-point star at a fixed size; the leaf signal is the
        # spike-thickness (inner radius) ladder, thin needles to chunky
        lat["theta"] = rng.uniform(0.0, 2 * np.pi)
        lat["points"] = 5
        lat["inner"] = (0.16, 0.22, 0.29, 0.37, 0.46)[leaf] \
            + rng.uniform(-0.015, 0.015)
        lat["size"] = 0.66 * lat["size_jitter"]
    elif name == "many_star":
        # chunky six-point star; the leaf signal is a size ladder
        lat["theta"] = rng.uniform(0.0, 2 * np.pi)
        lat["points"] = 6
        lat["inner"] = 0.58 + rng.uniform(-0.02, 0.02)
        lat["size"] = (0.40, 0.49, 0.61, 0.75, 0.92)[leaf] * lat["size_jitter"]
    else:  # plus_cross
        lat["theta"] = rng.uniform(0.0, 2 * np.pi)
        lat["width"] = 0.14 + 0.07 * leaf + rng.uniform(-0.015, 0.015)
        lat["size"] = 0.62 * lat["size_jitter"]
    return lat


def _boundary_radius(lat: dict, phi: np.ndarray) -> np.ndarray:
    """Distance from center to the shape boundary, per angle."""
    name = FAMILIES[lat["family"]]
    s = lat["size"]
    if name in ("round_blob", "flat_blob", "hollow_ring"):
        a, b = s, s / lat["aspect"]
        return a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
    if name in ("few_gon", "many_gon"):
        n = lat["sides"]
        sector = np.mod(phi, 2 * np.pi / n) - np.pi / n
        return s * np.cos(np.pi / n) / np.cos(sector)
    if name in ("few_star", "many_star"):
        n = lat["points"]
        tri = np.abs(np.mod(phi * n / (2 * np.pi), 1.0) - 0.5) * 2.0
        r_in = lat["inner"] * s
        return r_in + (s - r_in) * tri
    # plus_cross: union of two perpendicular bars, star-shaped about center
    w = lat["width"] * s
    eps = 1e-9
    bar1 = np.minimum(s / np.maximum(np.abs(np.cos(phi)), eps),
                      w / np.maximum(np.abs(np.sin(phi)), eps))
    bar2 = np.minimum(s / np.maximum(np.abs(np.sin(phi)), eps),
                      w / np.maximum(np.abs(np.cos(phi)), eps))
    return np.maximum(bar1, bar2)


def _radial_ratio(lat: dict, wobble=None) -> np.ndarray:
    """rho(p) = |p - c| / boundary_radius(angle(p)); inside iff rho <= 1."""
    dx = _GRID_X - lat["cx"]
    dy = _GRID_Y - lat["cy"]
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx) - lat["theta"]
    rb = _boundary_radius(lat, phi)
    if wobble is not None:
        rb = rb * wobble(phi)
    return r / np.maximum(rb, 1e-9)


def _pool(mask: np.ndarray) -> np.ndarray:
    """2x2 mean over the supersampled grid -> antialiased coverage."""
    return mask.astype(np.float64).reshape(
        IMAGE_SIZE, 2, IMAGE_SIZE, 2).mean(axis=(1, 3))


def _coverage(lat: dict, scale: float = 1.0, wobble=None) -> np.ndarray:
    rho = _radial_ratio(lat, wobble)
    cov = _pool(rho <= scale)
    if FAMILIES[lat["family"]] == "hollow_ring":
        cov = np.clip(cov - _pool(rho <= scale * lat["inner"]), 0.0, 1.0)
    return cov


def _outline(lat: dict, wobble, lo: float = 0.90, hi: float = 1.05) -> np.ndarray:
    rho = _radial_ratio(lat, wobble)
    band = _pool((rho >= lo) & (rho <= hi))
    if FAMILIES[lat["family"]] == "hollow_ring":
        inner = lat["inner"]
        band = band + _pool((rho >= lo * inner) & (rho <= hi * inner))
    return np.clip(band, 0.0, 1.0)


def render_sample(class_id: int, sample_id: int, modality: int,
                  node_name: str, seed: int) -> np.ndarray:
    """One (1, 32, 32) float32 image in [0, 1], fully seed-determined."""
    family, leaf = _family_of(node_name)
    lat_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _L_STREAM, class_id, sample_id]))
    lat = _latents(family, leaf, lat_rng)

    if modality == PHOTO:
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _P_STREAM, class_id, sample_id]))
        fill = rng.uniform(0.72, 0.95)
        amp = rng.uniform(0.04, 0.10)
        fx, fy = rng.uniform(0.4, 1.2, size=2)
        px, py = rng.uniform(0.0, 1.0, size=2)
        # half the photos carry a bright boundary highlight over a muted
        # fill (think glancing light on an edge): classifying those means
        # reading thin bright contours, the same cue a line drawing offers,
        # so photo-trained features stay responsive to the sketch domain
        rim = rng.uniform() < 0.5
        rim_v = rng.uniform(0.88, 1.0)
        half = IMAGE_SIZE // 2
        xs = (np.arange(IMAGE_SIZE) + 0.5) / half - 1.0
        gx, gy = np.meshgrid(xs, xs)
        bg = 0.20 + amp * np.cos(2 * np.pi * (fx * gx + px)) \
            * np.cos(2 * np.pi * (fy * gy + py))
        bg = bg + rng.normal(0.0, 0.015, bg.shape)
        bg = np.clip(bg, 0.0, 0.45)
        cov = _coverage(lat)
        if rim:
            fill = 0.40 + (fill - 0.72) * (0.40 / 0.23)
            img = bg * (1.0 - cov) + fill * cov
            band = _outline(lat, None)
            img = img * (1.0 - band) + rim_v * band
        else:
            img = bg * (1.0 - cov) + fill * cov
    elif modality == SKETCH:
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _S_STREAM, class_id, sample_id]))
        a1 = rng.uniform(0.02, 0.06)
        a2 = rng.uniform(0.01, 0.03)
        k1 = rng.integers(3, 9)
        k2 = rng.integers(3, 9)
        ps1, ps2 = rng.uniform(0.0, 2 * np.pi, size=2)
        stroke = rng.uniform(0.78, 1.0)

        def wobble(phi):
            return 1.0 + a1 * np.sin(k1 * phi + ps1) + a2 * np.sin(k2 * phi + ps2)

        img = stroke * _outline(lat, wobble)
    else:
        raise ContractViolation(f"unknown modality {modality}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


# -- dataset assembly ----------------------------------------------------------

def generate_dataset(spec: SplitSpec, tax: Taxonomy,
                     class_nodes: dict[int, str]) -> Dataset:
    """Render every split deterministically from the spec's seed."""
    used = sorted(set(spec.original_classes) | set(spec.source_classes)
                  | set(spec.target_classes))
    leaves = set(tax.leaves())
    for cid in used:
        if cid not in class_nodes:
            raise ContractViolation(f"class {cid} missing from the class map")
        _family_of(class_nodes[cid])  # recipe must exist
        if class_nodes[cid] not in leaves:
            raise ContractViolation(
                f"class {cid} node '{class_nodes[cid]}' is not a leaf")

    def render(cid, sid, modality):
        return Sample(render_sample(cid, sid, modality, class_nodes[cid],
                                    spec.seed), modality, cid, sid)

    ds = Dataset(spec, {c: class_nodes[c] for c in used})
    for cid in sorted(spec.original_classes):
        for sid in range(spec.original_photos_per_class):
            ds.original_train.append(render(cid, sid, PHOTO))
    for cid in sorted(spec.source_classes):
        for sid in range(spec.source_photos_per_class):
            ds.source_train.append(render(cid, sid, PHOTO))
        for sid in range(spec.source_sketches_per_class):
            ds.source_train.append(render(cid, sid, SKETCH))
    for cid in sorted(spec.target_classes):
        for sid in range(spec.query_sketches_per_class):
            ds.target_queries.append(render(cid, sid, SKETCH))
    for cid in sorted(spec.target_classes):
        for sid in range(spec.gallery_photos_per_class):
            ds.target_gallery.append(render(cid, sid, PHOTO))
    return ds


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    max_shift: int = 2
    flip_prob: float = 0.5
    noise_sigma: float = 0.02


def augment(image: np.ndarray, rng, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random shift / horizontal flip / additive noise, clamped to [0, 1].

    The rng stream is consumed identically for every configuration, so a
    replayed generator reproduces the exact augmented batch.
    """
    img = np.asarray(image)
    s = cfg.max_shift
    dy, dx = (int(v) for v in rng.integers(-s, s + 1, size=2))
    if dy or dx:
        padded = np.pad(img, ((0, 0), (s, s), (s, s)))
        img = padded[:, s - dy:s - dy + img.shape[1],
                     s - dx:s - dx + img.shape[2]]
    if rng.random() < cfg.flip_prob:
        img = img[:, :, ::-1]
    noise = rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


# -- archive + manifest IO -----------------------------------------------------

def write_archive(path, samples: list[Sample]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<8sIII", ARCHIVE_MAGIC, len(samples),
                            IMAGE_SIZE, IMAGE_SIZE))
        for s in samples:
            f.write(struct.pack("<IBI", s.class_id, s.modality, s.sample_id))
            f.write(s.image.astype("<f4", copy=False).tobytes())


def read_archive(path) -> list[Sample]:
    raw = Path(path).read_bytes()
    if raw[:8] != ARCHIVE_MAGIC:
        raise ContractViolation(f"{path}: not a dataset archive")
    count, h, w = struct.unpack_from("<III", raw, 8)
    offset, pix = 20, h * w
    samples = []
    for _ in range(count):
        if offset + 9 + pix * 4 > len(raw):
            raise ContractViolation(f"{path}: truncated archive")
        cid, mod, sid = struct.unpack_from("<IBI", raw, offset)
        offset += 9
        img = np.frombuffer(raw, dtype="<f4", count=pix, offset=offset)
        offset += pix * 4
        samples.append(Sample(img.reshape(1, h, w).copy(), mod, cid, sid))
    return samples


def _spec_to_manifest(spec: SplitSpec) -> dict:
    return {
        "original_classes": list(spec.original_classes),
        "source_classes": list(spec.source_classes),
        "target_classes": list(spec.target_classes),
        "original_photos_per_class": spec.original_photos_per_class,
        "source_photos_per_class": spec.source_photos_per_class,
        "source_sketches_per_class": spec.source_sketches_per_class,
        "gallery_photos_per_class": spec.gallery_photos_per_class,
        "query_sketches_per_class": spec.query_sketches_per_class,
        "seed": spec.seed,
    }


def spec_from_manifest(m: dict) -> SplitSpec:
    return SplitSpec(
        tuple(m["original_classes"]), tuple(m["source_classes"]),
        tuple(m["target_classes"]),
        original_photos_per_class=m["original_photos_per_class"],
        source_photos_per_class=m["source_photos_per_class"],
        source_sketches_per_class=m["source_sketches_per_class"],
        gallery_photos_per_class=m["gallery_photos_per_class"],
        query_sketches_per_class=m["query_sketches_per_class"],
        seed=m["seed"],
    )


def write_dataset(ds: Dataset, outdir) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_size": [IMAGE_SIZE, IMAGE_SIZE],
        "split_spec": _spec_to_manifest(ds.spec),
        "class_nodes": {str(c): n for c, n in sorted(ds.class_nodes.items())},
        "splits": {},
    }
    for name in SPLIT_NAMES:
        samples = ds.split(name)
        fname = f"{name}.sakedat"
        write_archive(out / fname, samples)
        manifest["splits"][name] = {"file": fname, "total": len(samples)}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_manifest(dirpath) -> dict:
    path = Path(dirpath) / MANIFEST_NAME
    if not path.exists():
        raise ContractViolation(f"{path}: manifest not found")
    m = json.loads(path.read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported format version")
    return m


def load_dataset(dirpath) -> Dataset:
    m = load_manifest(dirpath)
    spec = spec_from_manifest(m["split_spec"])
    ds = Dataset(spec, {int(c): n for c, n in m["class_nodes"].items()})
    for name in SPLIT_NAMES:
        samples = read_archive(Path(dirpath) / m["splits"][name]["file"])
        setattr(ds, name, samples)
    return ds


def validate_dataset(dirpath) -> dict:
    """Re-derive the zero-shot certificates and counts from disk.

    Trusts nothing beyond the manifest's class sets: overlap checks and
    per-split counting run against the actual archive contents.
    """
    m = load_manifest(dirpath)
    spec = m["split_spec"]
    source = set(spec["source_classes"])
    target = set(spec["target_classes"])
    original = set(spec["original_classes"])
    for bad in sorted(source & target):
        raise SplitViolation(
            f"class {bad} appears in both the source and target sets")
    for bad in sorted(original & target):
        raise SplitViolation(
            f"class {bad} appears in both the original and target sets")

    expectations = {
        "original_train": (sorted(original), {PHOTO: spec["original_photos_per_class"]}),
        "source_train": (sorted(source), {PHOTO: spec["source_photos_per_class"],
                                          SKETCH: spec["source_sketches_per_class"]}),
        "target_queries": (sorted(target), {SKETCH: spec["query_sketches_per_class"]}),
        "target_gallery": (sorted(target), {PHOTO: spec["gallery_photos_per_class"]}),
    }
    summary = {}
    for name, (classes, per_modality) in expectations.items():
        samples = read_archive(Path(dirpath) / m["splits"][name]["file"])
        if len(samples) != m["splits"][name]["total"]:
            raise ContractViolation(f"{name}: archive count != manifest total")
        counts: dict[tuple[int, int], int] = {}
        for s in samples:
            if s.class_id not in classes:
                raise SplitViolation(
                    f"{name}: class {s.class_id} outside its declared set")
            if s.modality not in per_modality:
                raise ContractViolation(
                    f"{name}: unexpected modality {s.modality}")
            if s.image.min() < 0.0 or s.image.max() > 1.0:
                raise ContractViolation(f"{name}: pixel outside [0, 1]")
            counts[(s.class_id, s.modality)] = counts.get(
                (s.class_id, s.modality), 0) + 1
        for cid in classes:
            for mod, expected in per_modality.items():
                if counts.get((cid, mod), 0) != expected:
                    raise ContractViolation(
                        f"{name}: class {cid} modality {mod} has "
                        f"{counts.get((cid, mod), 0)} samples, expected {expected}")
        summary[name] = len(samples)
    return summary
