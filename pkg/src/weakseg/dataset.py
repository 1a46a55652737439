"""Synthetic texture phantoms with partial annotations.

Each case is a small stack of slices with an elliptical pair of lung fields,
background normal-lung speckle and a few lesion regions.  The five classes get
textures that are separable by construction:

    CON  high-intensity, nearly homogeneous blobs
    GGO  mid-intensity smoothed noise
    HCM  bright ring lattice with dark cores
    EMP  dark holes punched into a darkened copy of the normal texture
    NOR  baseline speckle

Normal tissue within ``halo_width`` pixels of a lesion is blended part way
toward that lesion's texture while keeping the NOR label, so region borders
are ambiguous the way real ones are.

Generation is fully determined by ``(GeneratorConfig.seed, case_seed)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .losses import IGNORE, WEAK_OFFSET, ClassId

OUTSIDE_LUNG = 255
MAX_ANNOTATED_SLICES = 3
HU_RANGE = (-1000.0, 100.0)

# relative slice counts per class (CON, GGO, HCM, EMP, NOR) of the reference cohort
TABLE1_SLICE_COUNTS = (150, 114, 129, 163, 55)


def default_textures() -> dict[str, dict[str, float]]:
    return {
        "CON": {"mean": -60.0, "std": 20.0, "sigma": 1.5},
        "GGO": {"mean": -560.0, "std": 40.0, "sigma": 1.2},
        "HCM": {"wall": -150.0, "core": -920.0, "period": 6.0, "radius": 2.0, "width": 0.9, "std": 30.0},
        "EMP": {"hole": -990.0, "offset": -70.0, "period": 4.5, "radius": 2.0, "jitter": 0.5},
        "NOR": {"mean": -840.0, "std": 25.0, "sigma": 0.8},
    }


@dataclass
class GeneratorConfig:
    num_cases: int = 60
    image_size: int = 32
    num_slices: int = 10
    context_slices: int = 6
    class_slice_weights: tuple = TABLE1_SLICE_COUNTS
    textures: dict = field(default_factory=default_textures)
    distractor_prob: float = 0.6
    # normal tissue within ``halo_width`` pixels of a lesion blends toward the lesion texture
    halo_width: float = 3.0
    halo_mix: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 32:
            raise ConfigurationError(f"image_size must be >= 32, got {self.image_size}")
        if self.num_cases < 0:
            raise ConfigurationError("num_cases must be >= 0")
        if self.halo_width < 0 or not 0 <= self.halo_mix <= 1:
            raise ConfigurationError("halo_width must be >= 0 and halo_mix in [0, 1]")
        if self.num_slices < 1 or self.context_slices < 1:
            raise ConfigurationError("num_slices and context_slices must be >= 1")
        w = np.asarray(self.class_slice_weights, dtype=float)
        if w.shape != (5,) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigurationError(f"class_slice_weights must be 5 non-negative values, got {self.class_slice_weights!r}")
        missing = {c.name for c in ClassId} - set(self.textures)
        if missing:
            raise ConfigurationError(f"texture parameters missing for {sorted(missing)}")

    @property
    def class_probabilities(self) -> np.ndarray:
        w = np.asarray(self.class_slice_weights, dtype=float)
        return w / w.sum()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_slice_weights"] = list(self.class_slice_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "class_slice_weights" in d:
            d["class_slice_weights"] = tuple(d["class_slice_weights"])
        if "textures" in d:
            textures = default_textures()
            for name, params in d["textures"].items():
                textures.setdefault(name, {}).update(params)
            d["textures"] = textures
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Case:
    case_id: str
    volume: np.ndarray  # (S, H, W) HU-like
    lung_mask: np.ndarray  # (S, H, W) bool
    full_truth: np.ndarray  # (S, H, W) uint8 class index, 255 outside lung
    annotated_slices: list  # [(slice_index, ClassId)]
    case_seed: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, Case):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.case_seed == other.case_seed
            and list(self.annotated_slices) == list(other.annotated_slices)
            and np.array_equal(self.volume, other.volume)
            and np.array_equal(self.lung_mask, other.lung_mask)
            and np.array_equal(self.full_truth, other.full_truth)
        )


@dataclass
class PartialAnnotation:
    slice_index: int
    chosen_class: ClassId
    labels: np.ndarray  # (H, W) int8 label codes
    lung_mask: np.ndarray  # (H, W) bool
    case_id: str = ""

    @property
    def slice_id(self) -> str:
        return f"{self.case_id}:{self.slice_index}"

    @property
    def strong_mask(self) -> np.ndarray:
        return self.labels == int(self.chosen_class)

    @property
    def weak_mask(self) -> np.ndarray:
        return self.labels == WEAK_OFFSET + int(self.chosen_class)


# --------------------------------------------------------------------------
# generation


def _lung_mask(rng: np.random.Generator, s: int, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    cy = n * (0.5 + rng.uniform(-0.03, 0.03))
    half_gap = n * rng.uniform(0.2, 0.23)
    ay = n * rng.uniform(0.36, 0.42)
    ax = n * rng.uniform(0.17, 0.2)
    mask = np.zeros((s, n, n), dtype=bool)
    for z in range(s):
        scale = 0.8 + 0.2 * np.sin(np.pi * (z + 0.5) / s)
        for cx in (n / 2 - half_gap, n / 2 + half_gap):
            mask[z] |= ((yy - cy) / (ay * scale)) ** 2 + ((xx - cx) / (ax * scale)) ** 2 <= 1.0
    return mask


def _smooth_noise(rng, shape, mean, std, sigma):
    noise = rng.standard_normal(shape)
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=(0, sigma, sigma))
        noise /= max(noise.std(), 1e-12)
    return mean + std * noise


def _texture(name: str, textures: dict, rng, shape) -> np.ndarray:
    s, n, _ = shape
    params = textures[name]
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    if name in ("CON", "GGO", "NOR"):
        return _smooth_noise(rng, shape, params["mean"], params["std"], params["sigma"])
    if name == "HCM":
        out = np.empty(shape)
        period, radius, width = params["period"], params["radius"], params["width"]
        for z in range(s):
            oy, ox = rng.uniform(0, period, size=2)
            dy = (yy - oy) % period - period / 2
            dx = (xx - ox) % period - period / 2
            d = np.hypot(dy, dx)
            out[z] = np.where(np.abs(d - radius) < width, params["wall"], params["core"])
        return out + params["std"] * rng.standard_normal(shape)
    if name == "EMP":
        base = _texture("NOR", textures, rng, shape) + params["offset"]
        period, radius, jitter = params["period"], params["radius"], params["jitter"]
        for z in range(s):
            for cy in np.arange(period / 2, n, period):
                for cx in np.arange(period / 2, n, period):
                    py, px = np.array([cy, cx]) + rng.uniform(-jitter, jitter, size=2)
                    hole = (yy - py) ** 2 + (xx - px) ** 2 <= radius**2
                    base[z][hole] = params["hole"]
        return base
    raise ConfigurationError(f"no texture recipe for {name!r}")


def _place_lesion(rng, truth, halo, lung, z0: int, cls: int, scale: float, halo_width: float) -> None:
    s, n, _ = truth.shape
    inside = np.argwhere(lung[z0])
    cy, cx = inside[rng.integers(len(inside))] + 0.5
    ry, rx = n * scale * rng.uniform(0.7, 1.0, size=2)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    for z in range(max(0, z0 - 1), min(s, z0 + 2)):
        shrink = 1.0 if z == z0 else 0.7
        a, b = ry * shrink, rx * shrink
        blob = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0
        truth[z][blob & lung[z]] = cls
        if halo_width > 0:
            ring = ((yy - cy) / (a + halo_width)) ** 2 + ((xx - cx) / (b + halo_width)) ** 2 <= 1.0
            halo[z][ring & ~blob & (halo[z] < 0)] = cls


def _choose_slices(rng, s: int, count: int) -> list[int]:
    # annotated slices at least 3 apart so their lesions (z +- 1) never overlap
    candidates = list(range(s))
    chosen: list[int] = []
    for idx in rng.permutation(candidates):
        if all(abs(int(idx) - c) >= 3 for c in chosen):
            chosen.append(int(idx))
        if len(chosen) == count:
            break
    return sorted(chosen)


def synth_case(cfg: GeneratorConfig, case_seed: int) -> Case:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, case_seed])
    s, n = cfg.num_slices, cfg.image_size
    lung = _lung_mask(rng, s, n)
    truth = np.full((s, n, n), int(ClassId.NOR), dtype=np.uint8)
    halo = np.full((s, n, n), -1, dtype=np.int8)

    n_annot = int(rng.integers(1, MAX_ANNOTATED_SLICES + 1))
    slices = _choose_slices(rng, s, n_annot)
    probs = cfg.class_probabilities
    chosen = [ClassId(int(rng.choice(5, p=probs))) for _ in slices]
    lesion_classes = [c for c in ClassId if c != ClassId.NOR]

    for z0, c in zip(slices, chosen):
        if rng.random() < cfg.distractor_prob:
            others = [d for d in lesion_classes if d != c]
            _place_lesion(
                rng, truth, halo, lung, z0, int(others[rng.integers(len(others))]), 0.18, cfg.halo_width
            )
        if c != ClassId.NOR:
            _place_lesion(rng, truth, halo, lung, z0, int(c), 0.26, cfg.halo_width)

    textures = {c: _texture(c.name, cfg.textures, rng, (s, n, n)) for c in ClassId}
    volume = _smooth_noise(rng, (s, n, n), 40.0, 20.0, 1.0)  # chest wall outside the lungs
    for c in ClassId:
        sel = lung & (truth == int(c))
        volume[sel] = textures[c][sel]
    for c in ClassId:
        band = lung & (truth == int(ClassId.NOR)) & (halo == int(c))
        mixed = cfg.halo_mix * textures[c] + (1 - cfg.halo_mix) * textures[ClassId.NOR]
        volume[band] = mixed[band]
    np.clip(volume, *HU_RANGE, out=volume)
    truth[~lung] = OUTSIDE_LUNG
    return Case(
        case_id=f"case{case_seed:04d}",
        volume=volume,
        lung_mask=lung,
        full_truth=truth,
        annotated_slices=list(zip(slices, chosen)),
        case_seed=case_seed,
    )


def synth_dataset(cfg: GeneratorConfig) -> list[Case]:
    return [synth_case(cfg, i) for i in range(cfg.num_cases)]


# --------------------------------------------------------------------------
# annotations


def make_partial_annotation(case: Case, slice_index: int, chosen) -> PartialAnnotation:
    """Binary annotation of one slice: Strong(chosen) on its pixels, Weak(chosen) elsewhere in lung."""
    chosen = ClassId(chosen)
    if (int(slice_index), chosen) not in [(int(i), ClassId(c)) for i, c in case.annotated_slices]:
        raise ContractError(f"slice {slice_index} of {case.case_id} is not annotated with {chosen.name}")
    lung = case.lung_mask[slice_index]
    truth = case.full_truth[slice_index]
    labels = np.full(lung.shape, IGNORE, dtype=np.int8)
    labels[lung] = WEAK_OFFSET + int(chosen)
    labels[lung & (truth == int(chosen))] = int(chosen)
    return PartialAnnotation(int(slice_index), chosen, labels, lung.copy(), case.case_id)


def merge_annotations(binary_maps, chosen, lung_mask=None, slice_index: int = 0, case_id: str = "") -> PartialAnnotation:
    """Majority vote over three annotators' binary maps (>= 2 of 3 marks a pixel Strong)."""
    maps = [np.asarray(m, dtype=bool) for m in binary_maps]
    if len(maps) != 3:
        raise ContractError(f"merge_annotations needs exactly 3 maps, got {len(maps)}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps) or (lung_mask is not None and np.shape(lung_mask) != shape):
        raise DimensionError(f"annotation maps must share one shape, got {[m.shape for m in maps]}")
    chosen = ClassId(chosen)
    lung = np.ones(shape, dtype=bool) if lung_mask is None else np.asarray(lung_mask, dtype=bool)
    votes = maps[0].astype(np.int8) + maps[1] + maps[2]
    labels = np.full(shape, IGNORE, dtype=np.int8)
    labels[lung] = WEAK_OFFSET + int(chosen)
    labels[lung & (votes >= 2)] = int(chosen)
    return PartialAnnotation(slice_index, chosen, labels, lung.copy(), case_id)


def normalize_intensity(volume, center: float = -600.0, width: float = 1500.0) -> np.ndarray:
    """Clamp to the window ``center +- width/2`` and map it linearly onto [0, 1]."""
    if not width > 0:
        raise ContractError(f"window width must be positive, got {width}")
    lo = center - width / 2
    return (np.clip(np.asarray(volume, dtype=np.float64), lo, lo + width) - lo) / width


def context_volume(case: Case, slice_index: int, context_slices: int) -> np.ndarray:
    """Normalized ``(Z, H, W, 1)`` stack with the target slice at offset ``Z // 2``.

    Out-of-range slices are replaced by the nearest edge slice.
    """
    s = case.volume.shape[0]
    idx = np.clip(np.arange(context_slices) - context_slices // 2 + slice_index, 0, s - 1)
    return normalize_intensity(case.volume[idx])[..., None]


@dataclass
class Sample:
    """One annotated slice ready for the network."""

    annotation: PartialAnnotation
    volume: np.ndarray  # (Z, H, W, 1)

    @property
    def slice_id(self) -> str:
        return self.annotation.slice_id

    @property
    def chosen_class(self) -> ClassId:
        return self.annotation.chosen_class


def case_samples(case: Case, context_slices: int) -> list[Sample]:
    return [
        Sample(make_partial_annotation(case, i, c), context_volume(case, i, context_slices))
        for i, c in case.annotated_slices
    ]


# --------------------------------------------------------------------------
# on-disk format


def _dump_u8(arr: np.ndarray) -> bytes:
    header = "shape: " + ",".join(str(d) for d in arr.shape) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _load_u8(blob: bytes, name: str) -> np.ndarray:
    nl = blob.find(b"\n")
    if nl < 0 or not blob.startswith(b"shape: "):
        raise OSError(f"{name}: missing shape header")
    try:
        shape = tuple(int(d) for d in blob[7:nl].decode("ascii").split(","))
    except ValueError as exc:
        raise OSError(f"{name}: malformed shape header") from exc
    payload = blob[nl + 1 :]
    if len(payload) != int(np.prod(shape)):
        raise OSError(f"{name}: expected {int(np.prod(shape))} bytes for shape {shape}, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def _read(path: Path) -> bytes:
    if not path.is_file():
        raise OSError(f"{path}: missing dataset entry")
    return path.read_bytes()


def save_dataset(cases: list[Case], directory, config: GeneratorConfig | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": 1,
        "generator": config.to_dict() if config else None,
        "generator_hash": config.digest() if config else None,
        "class_weights": list(config.class_slice_weights) if config else None,
        "cases": [{"id": c.case_id, "case_seed": c.case_seed, "shape": list(c.volume.shape)} for c in cases],
    }
    for c in cases:
        cd = d / c.case_id
        cd.mkdir(exist_ok=True)
        (cd / "volume.f64").write_bytes(T.dump_array(c.volume))
        (cd / "lung.u8").write_bytes(_dump_u8(c.lung_mask.astype(np.uint8)))
        (cd / "truth.u8").write_bytes(_dump_u8(c.full_truth))
        ann = [{"slice_index": int(i), "chosen_class": ClassId(k).name} for i, k in c.annotated_slices]
        (cd / "annotations.json").write_text(json.dumps(ann, indent=2) + "\n")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise OSError(f"{path}: corrupt manifest ({exc})") from exc


def load_dataset(directory) -> list[Case]:
    d = Path(directory)
    manifest = load_manifest(d)
    cases = []
    for entry in manifest["cases"]:
        cd = d / entry["id"]
        volume = T.load_array(_read(cd / "volume.f64"), str(cd / "volume.f64"))
        lung = _load_u8(_read(cd / "lung.u8"), str(cd / "lung.u8")).astype(bool)
        truth = _load_u8(_read(cd / "truth.u8"), str(cd / "truth.u8"))
        try:
            ann = json.loads(_read(cd / "annotations.json"))
        except json.JSONDecodeError as exc:
            raise OSError(f"{cd / 'annotations.json'}: corrupt annotation file") from exc
        if volume.shape != tuple(entry["shape"]) or lung.shape != volume.shape or truth.shape != volume.shape:
            raise OSError(f"{cd}: array shapes disagree with manifest entry {entry['shape']}")
        cases.append(
            Case(
                case_id=entry["id"],
                volume=volume,
                lung_mask=lung,
                full_truth=truth,
                annotated_slices=[(int(a["slice_index"]), ClassId[a["chosen_class"]]) for a in ann],
                case_seed=int(entry["case_seed"]),
            )
        )
    return cases
