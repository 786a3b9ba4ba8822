"""Labeled face datasets: manifests, splits, attribute filtering, synthetic data."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .storage import read_tensor, write_tensor

MANIFEST_NAME = "manifest.csv"
TRUTH_NAME = "truth.json"


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), float32 in [0, 1] unless normalized
    identities: np.ndarray  # (N,) int64
    attributes: np.ndarray  # (N, T) int8 in {0, 1}
    attr_names: list[str]
    paths: list[str] = field(default_factory=list)
    fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.identities)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def n_identities(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            self.images[idx],
            self.identities[idx],
            self.attributes[idx],
            list(self.attr_names),
            [self.paths[i] for i in idx] if self.paths else [],
            self.fingerprint,
        )

    def select_attributes(self, cols: Sequence[int]) -> "Dataset":
        cols = list(cols)
        return Dataset(
            self.images,
            self.identities,
            self.attributes[:, cols],
            [self.attr_names[j] for j in cols],
            list(self.paths),
            self.fingerprint,
        )

    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3)).astype(np.float32)

    def centered(self, mean: np.ndarray) -> "Dataset":
        """Copy with the per-channel ``mean`` subtracted from every image."""
        out = self.subset(np.arange(len(self)))
        out.images = (self.images - np.asarray(mean, dtype=self.images.dtype)[None, :, None, None]).astype(
            self.images.dtype
        )
        return out


def fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- manifests


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".tnsr":
        return read_tensor(path).astype(np.float32)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise DataError(f"{path}: reading {path.suffix} images needs Pillow") from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_dataset(manifest: str | Path) -> Dataset:
    """Read a manifest and every image it lists.

    Errors carry the manifest line number of the offending row.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"{manifest}: manifest not found")
    root = manifest.parent
    lines = manifest.read_text(encoding="utf-8").splitlines()

    shape = None
    header = None
    rows = []
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            parts = text[1:].split()
            if parts and parts[0] == "shape":
                try:
                    shape = tuple(int(v) for v in parts[1:])
                except ValueError:
                    raise DataError(f"{manifest}:{lineno}: bad shape line {text!r}") from None
                if len(shape) != 3 or min(shape) <= 0:
                    raise DataError(f"{manifest}:{lineno}: shape must be C H W")
            continue
        cells = [c.strip() for c in text.split(",")]
        if header is None:
            if shape is None:
                raise DataError(f"{manifest}:{lineno}: '# shape C H W' must precede the header")
            if cells[:2] != ["path", "identity"] or not all(c.startswith("attr:") for c in cells[2:]):
                raise DataError(f"{manifest}:{lineno}: header must be path,identity,attr:<name>,...")
            header = cells
            continue
        rows.append((lineno, cells))
    if header is None:
        raise DataError(f"{manifest}: no header row")
    n_attr = len(header) - 2
    if n_attr < 1:
        raise DataError(f"{manifest}: at least one attribute column is required")

    seen: dict[str, tuple] = {}
    images, ids, attrs, paths = [], [], [], []
    for lineno, cells in rows:
        where = f"{manifest}:{lineno}"
        if len(cells) != len(header):
            raise DataError(f"{where}: expected {len(header)} fields, got {len(cells)}")
        rel, ident, bits = cells[0], cells[1], cells[2:]
        try:
            identity = int(ident)
        except ValueError:
            raise DataError(f"{where}: identity {ident!r} is not an integer") from None
        if identity < 0:
            raise DataError(f"{where}: identity must be non-negative")
        if any(b not in ("0", "1") for b in bits):
            raise DataError(f"{where}: attribute bits must be 0 or 1, got {bits}")
        label = (identity, tuple(int(b) for b in bits))
        if rel in seen and seen[rel] != label:
            raise DataError(f"{where}: {rel} listed earlier with different labels")
        seen[rel] = label
        path = root / rel
        if not path.is_file():
            raise DataError(f"{where}: image {rel} not found")
        try:
            img = _load_image(path)
        except FormatError as exc:
            raise DataError(f"{where}: {exc}") from exc
        if img.shape != shape:
            raise DataError(f"{where}: image shape {img.shape} differs from declared {shape}")
        if img.min() < 0 or img.max() > 1:
            raise DataError(f"{where}: pixel values outside [0, 1]")
        images.append(img)
        ids.append(identity)
        attrs.append(label[1])
        paths.append(rel)

    if not images:
        raise DataError(f"{manifest}: no samples")
    ids_arr = np.asarray(ids, dtype=np.int64)
    counts = np.bincount(ids_arr)
    lonely = [int(i) for i in np.flatnonzero(counts == 1)]
    if lonely:
        raise DataError(f"{manifest}: identities {lonely} have a single image; at least 2 are required")
    return Dataset(
        np.stack(images).astype(np.float32),
        ids_arr,
        np.asarray(attrs, dtype=np.int8),
        [c[len("attr:"):] for c in header[2:]],
        paths,
        fingerprint(manifest),
    )


def write_manifest(path: str | Path, shape, attr_names, rows) -> None:
    lines = [f"# shape {' '.join(str(s) for s in shape)}", ",".join(["path", "identity"] + [f"attr:{a}" for a in attr_names])]
    for rel, ident, bits in rows:
        lines.append(",".join([rel, str(ident)] + [str(int(b)) for b in bits]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- protocol


def filter_identity_attributes(dataset: Dataset) -> list[int]:
    """Indices of attributes that are constant within every identity."""
    keep = []
    for j in range(dataset.attributes.shape[1]):
        col = dataset.attributes[:, j]
        lo = np.full(dataset.n_identities, 2, dtype=np.int8)
        hi = np.full(dataset.n_identities, -1, dtype=np.int8)
        np.minimum.at(lo, dataset.identities, col)
        np.maximum.at(hi, dataset.identities, col)
        present = hi >= 0
        if np.all(lo[present] == hi[present]):
            keep.append(j)
    return keep


def split_per_identity(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-identity random split; returns sorted (train, test) index arrays.

    Each identity with ``n`` images contributes ``floor(train_fraction * n)``
    training images, clamped so that at least one image of each identity is
    held out and at least one is trained on.
    """
    rng = np.random.default_rng(seed)
    train, test = [], []
    for ident in np.unique(dataset.identities):
        idx = np.flatnonzero(dataset.identities == ident)
        n = len(idx)
        if n < 2:
            raise DataError(f"identity {int(ident)} has {n} image(s); a split needs at least 2")
        k = min(max(int(np.floor(train_fraction * n)), 1), n - 1)
        perm = rng.permutation(idx)
        train.append(perm[:k])
        test.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthSpec:
    identities: int = 8
    attributes: int = 4  # identity attributes, constant per identity
    transient: int = 2  # per-image attributes, rendered as corner marks
    images_per_identity: int = 20
    image_size: int = 64
    channels: int = 3
    noise: float = 0.1
    confusable_pairs: int = 0
    grid: int = 4  # base pattern resolution before upsampling

    def validate(self) -> None:
        if self.identities < 2:
            raise ConfigError("need at least 2 identities")
        if self.attributes < 1 or self.transient < 0:
            raise ConfigError("need at least one identity attribute and a non-negative transient count")
        if self.images_per_identity < 2:
            raise ConfigError("need at least 2 images per identity")
        if 2 * self.confusable_pairs > self.identities:
            raise ConfigError(f"{self.confusable_pairs} confusable pairs need {2 * self.confusable_pairs} identities")
        if self.image_size % self.grid or self.image_size < 4:
            raise ConfigError("image_size must be a multiple of grid")
        if self.transient and self.image_size < 8:
            raise ConfigError("transient marks need image_size >= 8")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.transient > 4:
            raise ConfigError("at most 4 transient attributes (one per corner)")


def _identity_codes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    codes = rng.integers(0, 2, size=(spec.identities, spec.attributes)).astype(np.int8)
    for p in range(spec.confusable_pairs):
        a, b = 2 * p, 2 * p + 1
        if np.array_equal(codes[a], codes[b]):
            j = p % spec.attributes
            codes[b, j] = 1 - codes[a, j]
    return codes


def _corner(size: int, which: int) -> tuple[slice, slice]:
    q = size // 4
    rows = slice(0, q) if which in (0, 1) else slice(size - q, size)
    cols = slice(0, q) if which in (0, 2) else slice(size - q, size)
    return rows, cols


def gen_synthetic(spec: SynthSpec, out_dir: str | Path, seed: int = 0) -> dict:
    """Write a synthetic dataset (manifest, tensor images, ground truth).

    Each identity owns a blocky base pattern; images add Gaussian pixel noise.
    Identity attributes are a fixed bit code per identity and are not drawn in
    the image. Transient attributes are random per image and drawn as a bright
    corner mark. Identities ``2p`` and ``2p + 1`` (p < confusable_pairs) share
    their base pattern and differ in at least one attribute bit, so images
    alone cannot tell them apart.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    codes = _identity_codes(spec, rng)
    bases = rng.uniform(0.15, 0.85, size=(spec.identities, spec.channels, spec.grid, spec.grid))
    for p in range(spec.confusable_pairs):
        bases[2 * p + 1] = bases[2 * p]
    block = spec.image_size // spec.grid
    bases = np.kron(bases, np.ones((1, 1, block, block)))

    id_names = [f"id{j}" for j in range(spec.attributes)]
    tr_names = [f"tr{j}" for j in range(spec.transient)]
    rows = []
    for ident in range(spec.identities):
        transient = rng.integers(0, 2, size=(spec.images_per_identity, spec.transient)).astype(np.int8)
        if spec.transient:
            # both values occur for every identity, so these never pass the filter
            transient[0] = 0
            transient[1] = 1
        for k in range(spec.images_per_identity):
            img = bases[ident] + spec.noise * rng.standard_normal(bases[ident].shape)
            for j in range(spec.transient):
                if transient[k, j]:
                    r, c = _corner(spec.image_size, j)
                    img[:, r, c] = 1.0
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            rel = f"images/{ident:03d}_{k:03d}.tnsr"
            write_tensor(out / rel, img)
            rows.append((rel, ident, list(codes[ident]) + list(transient[k])))

    shape = (spec.channels, spec.image_size, spec.image_size)
    write_manifest(out / MANIFEST_NAME, shape, id_names + tr_names, rows)
    truth = {
        "spec": asdict(spec),
        "seed": seed,
        "identity_attributes": id_names,
        "transient_attributes": tr_names,
        "identity_codes": {str(i): [int(b) for b in codes[i]] for i in range(spec.identities)},
        "confusable_pairs": [[2 * p, 2 * p + 1] for p in range(spec.confusable_pairs)],
    }
    (out / TRUTH_NAME).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"manifest": str(out / MANIFEST_NAME), **truth}


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of assigning each test image to the closest training-identity mean."""
    ids = np.unique(train.identities)
    cents = np.stack([train.images[train.identities == i].reshape(-1, np.prod(train.image_shape)).mean(0) for i in ids])
    flat = test.images.reshape(len(test), -1)
    d = ((flat[:, None, :] - cents[None, :, :]) ** 2).sum(-1)
    pred = ids[d.argmin(axis=1)]
    return float((pred == test.identities).mean())
