"""Corpus loading, the two pair-sampling protocols and a synthetic glyph corpus.

Every pair is a pure function of ``(seed, epoch, index)``: the random draws
behind a pair come from ``numpy.random.default_rng([seed, epoch, index])`` so
any epoch can be regenerated bit-for-bit, in any order, from any worker.
"""

from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, CorpusIntegrityError, IngestionError

EXPRESSIONS = ("anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise")
_ORDER_STREAM = 2**32 - 1  # stream id for the per-epoch shuffle, disjoint from pair indices
_REF_STREAM = 2**32 - 2


class DatasetKind(str, enum.Enum):
    FINGERPRINT = "FINGERPRINT"
    FERG_STYLE = "FERG_STYLE"
    SYNTHETIC = "SYNTHETIC"


class ShotTag(str, enum.Enum):
    F = "F"
    S = "S"
    NONE = "NONE"


@dataclass
class ImageRecord:
    image: np.ndarray  # (H, W, C) float32 in [-1, 1]
    identity_id: int
    attribute_id: int
    shot_tag: ShotTag = ShotTag.NONE
    path: str | None = None


@dataclass
class PairSample:
    left: ImageRecord
    right: ImageRecord
    label: int  # 0 same identity, 1 different


@dataclass
class DatasetSpec:
    kind: DatasetKind = DatasetKind.SYNTHETIC
    root_path: str | None = None
    image_size: int = 64
    epoch_pair_count: int = 320
    seed: int = 0
    # synthetic corpus shape
    identities: int = 20
    images_per_identity: int = 10
    # FERG-style corpora are RGB unless this is set
    grayscale: bool = False
    # NIST scans carry blank rows at the bottom
    crop_bottom: int = 32

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigurationError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.epoch_pair_count <= 0 or self.epoch_pair_count % 2:
            raise ConfigurationError(f"epoch_pair_count must be positive and even, got {self.epoch_pair_count}")
        if self.kind is not DatasetKind.SYNTHETIC and not self.root_path:
            raise ConfigurationError(f"root_path is required for {self.kind.value} corpora")

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "root_path": self.root_path,
            "image_size": self.image_size,
            "epoch_pair_count": self.epoch_pair_count,
            "seed": self.seed,
            "identities": self.identities,
            "images_per_identity": self.images_per_identity,
            "grayscale": self.grayscale,
            "crop_bottom": self.crop_bottom,
        }


# -- pixel encoding ---------------------------------------------------------

def bytes_to_unit(arr):
    """Map uint8 [0, 255] linearly onto [-1, 1]."""
    return np.asarray(arr, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def unit_to_bytes(img):
    """Inverse of :func:`bytes_to_unit`, rounding to the nearest level."""
    img = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.rint((img + 1.0) * 127.5).astype(np.uint8)


def _read_image(path, size, mode, crop_bottom=0):
    try:
        with Image.open(path) as im:
            im = im.convert(mode)
            if crop_bottom:
                w, h = im.size
                if crop_bottom >= h:
                    raise IngestionError(f"cannot crop {crop_bottom} rows from {h}-row image {path}", path=str(path))
                im = im.crop((0, 0, w, h - crop_bottom))
            im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}", path=str(path)) from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return bytes_to_unit(arr)


def write_png(img, path):
    arr = unit_to_bytes(img)
    if arr.shape[-1] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


# -- corpora ----------------------------------------------------------------

_SHOT_RE = re.compile(r"^([fs])(\d+)\.png$", re.IGNORECASE)


def _load_fingerprints(spec):
    root = Path(spec.root_path)
    shots = {}
    for path in sorted(root.iterdir()):
        m = _SHOT_RE.match(path.name)
        if not m:
            continue
        tag, ident = m.group(1).upper(), int(m.group(2))
        slot = shots.setdefault(ident, {})
        if tag in slot:
            raise CorpusIntegrityError(f"identity {ident}: duplicate {tag.lower()} shot ({slot[tag].name}, {path.name})",
                                       identity_id=ident)
        slot[tag] = path
    if not shots:
        raise CorpusIntegrityError(f"no f<ID>.png / s<ID>.png files under {root}")

    attributes = {}
    label_file = root / "attributes.csv"
    if label_file.exists():
        with open(label_file, newline="") as fh:
            for row in csv.DictReader(fh):
                attributes[int(row["id"])] = int(row["attribute"])

    records = []
    for ident in sorted(shots):
        slot = shots[ident]
        for tag in ("F", "S"):
            if tag not in slot:
                raise CorpusIntegrityError(f"identity {ident}: missing {tag.lower()} shot", identity_id=ident)
            img = _read_image(slot[tag], spec.image_size, "L", spec.crop_bottom)
            records.append(ImageRecord(img, ident, attributes.get(ident, 0), ShotTag(tag), str(slot[tag])))
    return records


def _load_ferg(spec):
    root = Path(spec.root_path)
    characters = sorted(p for p in root.iterdir() if p.is_dir())
    if not characters:
        raise CorpusIntegrityError(f"no character directories under {root}")
    mode = "L" if spec.grayscale else "RGB"
    records = []
    for identity, char_dir in enumerate(characters):
        for expr_dir in sorted(p for p in char_dir.iterdir() if p.is_dir()):
            prefix = char_dir.name + "_"
            if not expr_dir.name.startswith(prefix):
                raise CorpusIntegrityError(f"unexpected directory {expr_dir} (want {prefix}<expression>)",
                                           identity_id=identity)
            expression = expr_dir.name[len(prefix):].lower()
            if expression not in EXPRESSIONS:
                raise CorpusIntegrityError(f"unknown expression {expression!r} in {expr_dir}", identity_id=identity)
            attribute = EXPRESSIONS.index(expression)
            for path in sorted(expr_dir.glob("*.png")):
                img = _read_image(path, spec.image_size, mode)
                records.append(ImageRecord(img, identity, attribute, ShotTag.NONE, str(path)))
    return records


def load_corpus(spec: DatasetSpec):
    """Decode a corpus into a list of :class:`ImageRecord`."""
    if spec.kind is DatasetKind.SYNTHETIC:
        return synth_glyph_corpus(spec.identities, spec.images_per_identity, spec.image_size, spec.seed)
    root = Path(spec.root_path)
    if not root.is_dir():
        raise CorpusIntegrityError(f"corpus root {root} does not exist")
    if spec.kind is DatasetKind.FINGERPRINT:
        return _load_fingerprints(spec)
    return _load_ferg(spec)


def export_ferg_layout(corpus, root):
    """Write a corpus to disk in the character/expression layout; returns paths."""
    root = Path(root)
    width = max(2, len(str(max(r.identity_id for r in corpus))))
    counters = {}
    paths = []
    for rec in corpus:
        char = f"id{rec.identity_id:0{width}d}"
        expr = EXPRESSIONS[rec.attribute_id]
        key = (char, expr)
        n = counters.get(key, 0)
        counters[key] = n + 1
        path = root / char / f"{char}_{expr}" / f"{n:05d}.png"
        write_png(rec.image, path)
        paths.append(path)
    return paths


def synth_glyph_corpus(identities, images_per_identity, image_size, seed, num_attributes=4):
    """Synthetic stand-in for a biometric corpus.

    Identity lives in five bright Gaussian spots whose positions are fixed per
    identity; the attribute is the orientation of a faint low-frequency
    sinusoidal background (multiples of 45 degrees). Images of an identity
    cycle through the attributes so every identity covers every class.
    """
    if identities < 2 or images_per_identity < 2:
        raise ConfigurationError("need at least 2 identities and 2 images per identity")
    if image_size <= 0 or image_size % 32:
        raise ConfigurationError(f"image_size must be a positive multiple of 32, got {image_size}")
    if not 1 <= num_attributes <= 4:
        raise ConfigurationError("num_attributes must be in 1..4")

    size = image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    spot_sigma = size / 26.0
    border = size / 8.0
    records = []
    for ident in range(identities):
        pos_rng = np.random.default_rng([seed, ident])
        spots = pos_rng.uniform(border, size - border, size=(5, 2))
        glyph = np.zeros((size, size))
        for cy, cx in spots:
            glyph += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spot_sigma**2))
        for k in range(images_per_identity):
            attribute = k % num_attributes
            rng = np.random.default_rng([seed, ident, k, 1])
            theta = np.deg2rad(45.0 * attribute)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * 2.0 * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
            img = -0.3 + 0.3 * wave + 1.2 * glyph + rng.normal(0.0, 0.05, size=(size, size))
            img = np.clip(img, -1.0, 1.0).astype(np.float32)[:, :, None]
            records.append(ImageRecord(img, ident, attribute, ShotTag.NONE, None))
    return records


def split_per_identity(corpus, n_train):
    """First ``n_train`` images of each identity vs the rest (held out)."""
    seen = {}
    train, held = [], []
    for rec in corpus:
        k = seen.get(rec.identity_id, 0)
        seen[rec.identity_id] = k + 1
        (train if k < n_train else held).append(rec)
    return train, held


def stack_images(records):
    """(N, C, H, W) float32 array from records."""
    return np.stack([r.image.transpose(2, 0, 1) for r in records]).astype(np.float32)


# -- pairing protocols ------------------------------------------------------

class PairProtocol:
    """Common machinery: an indexed epoch of pairs over a fixed corpus."""

    def __init__(self, corpus, seed=0):
        self.corpus = list(corpus)
        self.seed = int(seed)
        self.images = stack_images(self.corpus)
        self.by_identity = {}
        for i, rec in enumerate(self.corpus):
            self.by_identity.setdefault(rec.identity_id, []).append(i)
        self.identities = sorted(self.by_identity)

    def __len__(self):
        raise NotImplementedError

    def pair_indices(self, index, epoch=0):
        """``(left_record_index, right_record_index, label)``."""
        raise NotImplementedError

    def pair(self, index, epoch=0):
        a, b, label = self.pair_indices(index, epoch)
        return PairSample(self.corpus[a], self.corpus[b], label)

    def epoch(self, epoch=0):
        return [self.pair(i, epoch) for i in range(len(self))]

    def reference_index(self, record_index, index, epoch=0):
        """Another image of the same identity, used against a privatized copy."""
        own = self.by_identity[self.corpus[record_index].identity_id]
        others = [j for j in own if j != record_index]
        rng = np.random.default_rng([self.seed, epoch, index, _REF_STREAM])
        return others[int(rng.integers(len(others)))]

    def order(self, epoch):
        return np.random.default_rng([self.seed, epoch, _ORDER_STREAM]).permutation(len(self))

    def batches(self, batch_size, epoch=0, shuffle=True):
        """Yield dict batches (left, right, ref, label) in a seeded per-epoch order.

        ``ref`` is a same-identity partner of ``left`` distinct from it.
        """
        order = self.order(epoch) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            trip = [self.pair_indices(int(i), epoch) for i in idx]
            a = np.array([t[0] for t in trip])
            b = np.array([t[1] for t in trip])
            r = np.array([self.reference_index(int(t[0]), int(i), epoch) for t, i in zip(trip, idx)])
            yield {
                "index": idx,
                "left": self.images[a],
                "right": self.images[b],
                "ref": self.images[r],
                "label": np.array([t[2] for t in trip], dtype=np.int64),
            }


class FingerprintPairs(PairProtocol):
    """Index ``i < P`` gives (f_i, s_i, 0); ``i >= P`` gives (f_{i-P}, random other shot, 1).

    "Person i" is the i-th identity in ascending ID order.
    """

    def __init__(self, corpus, seed=0):
        super().__init__(corpus, seed)
        self.shots = []
        for ident in self.identities:
            members = self.by_identity[ident]
            tags = {self.corpus[j].shot_tag: j for j in members}
            if len(members) != 2 or set(tags) != {ShotTag.F, ShotTag.S}:
                raise CorpusIntegrityError(f"identity {ident}: need exactly one f and one s shot", identity_id=ident)
            self.shots.append((tags[ShotTag.F], tags[ShotTag.S]))
        if len(self.shots) < 2:
            raise CorpusIntegrityError("fingerprint protocol needs at least 2 identities")

    def __len__(self):
        return 2 * len(self.shots)

    def pair_indices(self, index, epoch=0):
        P = len(self.shots)
        if not 0 <= index < 2 * P:
            raise IndexError(f"pair index {index} outside [0, {2 * P})")
        if index < P:
            f, s = self.shots[index]
            return f, s, 0
        person = index - P
        rng = np.random.default_rng([self.seed, epoch, index])
        other = int(rng.integers(P - 1))
        other += other >= person
        shot = int(rng.integers(2))
        return self.shots[person][0], self.shots[other][shot], 1

    def reference_index(self, record_index, index, epoch=0):
        f, s = self.shots[self.identities.index(self.corpus[record_index].identity_id)]
        return s if record_index == f else f


class FergPairs(PairProtocol):
    """First half: two distinct images of one identity; second half: two identities."""

    def __init__(self, corpus, epoch_pair_count, seed=0):
        super().__init__(corpus, seed)
        if epoch_pair_count <= 0 or epoch_pair_count % 2:
            raise ConfigurationError("epoch_pair_count must be positive and even")
        self.epoch_pair_count = int(epoch_pair_count)
        for ident in self.identities:
            if len(self.by_identity[ident]) < 2:
                raise CorpusIntegrityError(f"identity {ident} has fewer than 2 images", identity_id=ident)
        if len(self.identities) < 2:
            raise CorpusIntegrityError("need at least 2 identities")

    def __len__(self):
        return self.epoch_pair_count

    def pair_indices(self, index, epoch=0):
        if not 0 <= index < self.epoch_pair_count:
            raise IndexError(f"pair index {index} outside [0, {self.epoch_pair_count})")
        rng = np.random.default_rng([self.seed, epoch, index])
        if index < self.epoch_pair_count // 2:
            ident = self.identities[int(rng.integers(len(self.identities)))]
            a, b = rng.choice(self.by_identity[ident], size=2, replace=False)
            return int(a), int(b), 0
        i1, i2 = rng.choice(len(self.identities), size=2, replace=False)
        a = rng.choice(self.by_identity[self.identities[i1]])
        b = rng.choice(self.by_identity[self.identities[i2]])
        return int(a), int(b), 1


def fingerprint_pair(index, corpus, seed=0, epoch=0):
    return FingerprintPairs(corpus, seed).pair(index, epoch)


def ferg_pair(index, corpus, epoch_pair_count, seed=0, epoch=0):
    return FergPairs(corpus, epoch_pair_count, seed).pair(index, epoch)


def make_protocol(spec: DatasetSpec, corpus, seed=None):
    """Fingerprint corpora use the shot protocol, everything else the FERG one."""
    seed = spec.seed if seed is None else seed
    if spec.kind is DatasetKind.FINGERPRINT:
        return FingerprintPairs(corpus, seed)
    return FergPairs(corpus, spec.epoch_pair_count, seed)
