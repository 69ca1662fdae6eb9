"""Synthetic paired corpus with known referral-tree ground truth, plus file formats.

On-disk layout produced by :func:`gen_synthetic_dataset`:

* ``<out>/features/<image_id>.bin`` -- binary region features, one file per image.
* ``<out>/manifest.jsonl`` -- one JSON object per sample with keys ``image_id``,
  ``features_path`` (relative to the manifest), ``tokens`` and ``tree``.

Region feature files carry a 16-byte header (magic ``SMFE``, uint32 version,
uint32 K, uint32 d, all little-endian) followed by K*d little-endian float32
values in row-major order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError, ManifestError, FeatureFormatError
from .referral import ReferralTree, fragment_inventory, relation_inventory

MAGIC = b"SMFE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class RegionFeatureSet:
    """Region feature rows for one image, shape (K, d_region)."""

    image_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InputError(
                f"{self.image_id}: features must be a K x d matrix with K >= 1, "
                f"got shape {self.features.shape}"
            )
        if not np.isfinite(self.features).all():
            raise InputError(f"{self.image_id}: non-finite feature values")


@dataclass
class Sample:
    """One image-sentence pair with its ground-truth referral tree."""

    image_id: str
    tokens: list[str]
    tree: ReferralTree
    features: np.ndarray

    @property
    def sentence_id(self) -> str:
        return f"{self.image_id}#0"


Dataset = list[Sample]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic generator; generation is a pure function of this."""

    n_pairs: int
    n_fragment_types: int
    n_relation_types: int
    regions_per_image: int
    d_region: int
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigurationError("n_pairs must be >= 1")
        if self.n_fragment_types < 4:
            raise ConfigurationError("n_fragment_types must be >= 4 (tree has 4 leaves)")
        if self.n_relation_types < 3:
            raise ConfigurationError("n_relation_types must be >= 3 (tree has 3 relations)")
        if self.regions_per_image < 4:
            raise ConfigurationError("regions_per_image must be >= 4 (one per fragment)")
        if self.d_region < 1:
            raise ConfigurationError("d_region must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")


def write_region_features(path: str | Path, features: np.ndarray) -> None:
    """Store a feature matrix as float32; round-trips bit-exactly via read."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise InputError(f"expected a 2-D matrix, got shape {features.shape}")
    if not np.isfinite(features).all():
        raise InputError("refusing to write non-finite features")
    k, d = features.shape
    payload = features.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as handle:
        handle.write(_HEADER.pack(MAGIC, FORMAT_VERSION, k, d))
        handle.write(payload)


def read_region_features(path: str | Path) -> RegionFeatureSet:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFormatError(
            f"{path.name}: truncated header, need {_HEADER.size} bytes", offset=len(data)
        )
    magic, version, k, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path.name}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path.name}: unsupported version {version}", offset=4)
    expected = _HEADER.size + 4 * k * d
    if len(data) < expected:
        raise FeatureFormatError(
            f"{path.name}: payload truncated, expected {expected} bytes", offset=len(data)
        )
    if len(data) > expected:
        raise FeatureFormatError(f"{path.name}: trailing bytes after payload", offset=expected)
    features = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(k, d).copy()
    return RegionFeatureSet(image_id=path.stem, features=features)


def _sample_to_record(sample: Sample, features_path: str) -> dict:
    return {
        "image_id": sample.image_id,
        "features_path": features_path,
        "tokens": list(sample.tokens),
        "tree": sample.tree.to_records(),
    }


def write_manifest(path: str | Path, samples: Dataset, features_dir: str = "features") -> Path:
    """Write samples and their feature files under the manifest's directory."""
    path = Path(path)
    feature_root = path.parent / features_dir
    feature_root.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in samples:
        rel = f"{features_dir}/{sample.image_id}.bin"
        write_region_features(path.parent / rel, sample.features)
        lines.append(json.dumps(_sample_to_record(sample, rel)))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def load_manifest(path: str | Path) -> Dataset:
    """Load all samples, failing fast on the first malformed line."""
    path = Path(path)
    samples: Dataset = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path.name} line {line_number}: invalid JSON: {exc}") from exc
            try:
                image_id = record["image_id"]
                features_path = record["features_path"]
                tokens = record["tokens"]
                tree_records = record["tree"]
            except (TypeError, KeyError) as exc:
                raise ManifestError(f"{path.name} line {line_number}: missing key {exc}") from exc
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise ManifestError(
                    f"{path.name} line {line_number}: tokens must be a list of strings"
                )
            try:
                tree = ReferralTree.from_records(tree_records)
            except InputError as exc:
                raise ManifestError(
                    f"{path.name} line {line_number} (sample {image_id}): {exc}"
                ) from exc
            feature_file = path.parent / features_path
            if not feature_file.exists():
                raise ManifestError(
                    f"{path.name} line {line_number}: sample {image_id} misses "
                    f"feature file {features_path}"
                )
            features = read_region_features(feature_file).features
            samples.append(Sample(image_id=image_id, tokens=tokens, tree=tree, features=features))
    return samples


def synth_samples(spec: SyntheticSpec) -> Dataset:
    """Generate samples in memory; deterministic for a fixed spec."""
    rng = np.random.default_rng(spec.seed)
    fragments = fragment_inventory(spec.n_fragment_types)
    relations = relation_inventory(spec.n_relation_types)
    prototypes = rng.standard_normal((spec.n_fragment_types, spec.d_region))

    samples: Dataset = []
    width = max(5, len(str(spec.n_pairs - 1)))
    for i in range(spec.n_pairs):
        frag_types = rng.choice(spec.n_fragment_types, size=4, replace=False)
        rel_types = rng.choice(spec.n_relation_types, size=3, replace=False)
        f1, f2, f3, f4 = (fragments[t] for t in frag_types)
        r1, r_root, r2 = (relations[t] for t in rel_types)
        tokens = [f1, r1, f2, r_root, f3, r2, f4]
        tree = ReferralTree(labels=(f1, r1, f2, r_root, f3, r2, f4))

        rows = [prototypes[t] for t in frag_types]
        pool = [t for t in range(spec.n_fragment_types) if t not in set(frag_types)]
        if not pool:
            pool = list(range(spec.n_fragment_types))
        distractors = rng.choice(pool, size=spec.regions_per_image - 4, replace=True)
        rows.extend(prototypes[t] for t in distractors)
        features = np.stack(rows) + spec.noise_sigma * rng.standard_normal(
            (spec.regions_per_image, spec.d_region)
        )
        samples.append(
            Sample(
                image_id=f"img_{i:0{width}d}",
                tokens=tokens,
                tree=tree,
                features=features,
            )
        )
    return samples


def gen_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Generate the corpus under out_dir and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_manifest(out_dir / MANIFEST_NAME, synth_samples(spec))
