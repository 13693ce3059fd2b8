"""Directory-per-class corpus indexing, stratified splitting, batching.

The split is 60/20/20 per class: test and validation each take
round(0.2 * N) samples, training takes the remainder. Membership comes
from a seeded per-class shuffle followed by contiguous slicing (test
first, then val, then train), so the same (corpus, seed) always yields
the same assignment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError, InputError

TRAIN, VAL, TEST = "TRAIN", "VAL", "TEST"
SPLITS = (TRAIN, VAL, TEST)
_SPLIT_TAG = {TRAIN: 0, VAL: 1, TEST: 2}

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

# Class numbering used by the published confusion-matrix figure, offered
# as a preset alternative to plain lexicographic directory order.
PUBLISHED_CLASS_ORDER = (
    "Bacterial Spot",
    "Early Blight",
    "Late Blight",
    "Leaf Mold",
    "Septoria Leaf Spot",
    "Two-spotted Spider Mite",
    "Target Spot",
    "Yellow Leaf Curl Virus",
    "Tomato Mosaic Virus",
    "Healthy",
)


@dataclass(frozen=True)
class Entry:
    path: str  # relative to the corpus root, POSIX separators
    class_id: int
    class_name: str


@dataclass
class DatasetIndex:
    root: str
    entries: list[Entry]
    class_names: list[str]
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def abspath(self, entry: Entry) -> str:
        return os.path.join(self.root, entry.path)


@dataclass
class SplitAssignment:
    split_of: dict[str, str]  # entry path -> TRAIN | VAL | TEST
    seed: int
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def members(self, index: DatasetIndex, split: str) -> list[Entry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [e for e in index.entries if self.split_of[e.path] == split]


def _decodable(path: Path) -> bool:
    try:
        with PILImage.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def scan_dataset(root) -> DatasetIndex:
    """Index a directory-per-class image tree.

    Class names are the subdirectory names in lexicographic order; entries
    are sorted lexicographically by relative path. Files that fail to
    decode are excluded and listed in the index warnings.
    """
    rootp = Path(root)
    if not rootp.is_dir():
        raise InputError(f"dataset root {root} does not exist")
    class_dirs = sorted(d for d in rootp.iterdir() if d.is_dir())
    if not class_dirs:
        raise InputError(f"no classes found under {root}")
    class_names = [d.name for d in class_dirs]

    entries: list[Entry] = []
    warnings: list[str] = []
    for class_id, d in enumerate(class_dirs):
        files = sorted(
            f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS
        )
        for f in files:
            rel = f.relative_to(rootp).as_posix()
            if _decodable(f):
                entries.append(Entry(rel, class_id, d.name))
            else:
                warnings.append(f"undecodable image excluded: {rel}")
    entries.sort(key=lambda e: e.path)
    return DatasetIndex(root=str(root), entries=entries, class_names=class_names, warnings=warnings)


def class_distribution(index: DatasetIndex) -> dict[str, int]:
    counts = {name: 0 for name in index.class_names}
    for e in index.entries:
        counts[e.class_name] += 1
    return counts


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes for a class of n samples."""
    n_test = round(0.2 * n)
    n_val = round(0.2 * n)
    return n - n_val - n_test, n_val, n_test


def split(index: DatasetIndex, seed: int) -> SplitAssignment:
    """Stratified 60/20/20 assignment; every class needs >= 5 samples."""
    by_class: dict[int, list[Entry]] = {i: [] for i in range(len(index.class_names))}
    for e in index.entries:
        by_class[e.class_id].append(e)

    split_of: dict[str, str] = {}
    for class_id, members in by_class.items():
        name = index.class_names[class_id]
        if len(members) < 5:
            raise InputError(f"class {name!r} has {len(members)} samples; at least 5 required")
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed & 0xFFFF_FFFF_FFFF_FFFF, class_id]))
        )
        order = rng.permutation(len(members))
        _, n_val, n_test = split_counts(len(members))
        for rank, member_idx in enumerate(order):
            if rank < n_test:
                tag = TEST
            elif rank < n_test + n_val:
                tag = VAL
            else:
                tag = TRAIN
            split_of[members[member_idx].path] = tag
    return SplitAssignment(split_of=split_of, seed=seed)


def batch_iter(
    index: DatasetIndex,
    assignment: SplitAssignment,
    split_name: str,
    batch_size: int,
    epoch: int,
    seed: int,
):
    """Yield lists of (path, class_id) per batch.

    TRAIN is reshuffled per (seed, epoch); VAL/TEST keep their indexed
    order. The final batch may be short, never empty.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    members = assignment.members(index, split_name)
    if not members:
        raise InputError(f"split {split_name} is empty")
    if split_name == TRAIN:
        rng = np.random.Generator(
            np.random.PCG64(
                np.random.SeedSequence([seed & 0xFFFF_FFFF_FFFF_FFFF, _SPLIT_TAG[TRAIN], epoch])
            )
        )
        members = [members[i] for i in rng.permutation(len(members))]
    for start in range(0, len(members), batch_size):
        yield [(e.path, e.class_id) for e in members[start : start + batch_size]]


def write_manifest(index: DatasetIndex, assignment: SplitAssignment, path) -> None:
    """One record per line: `<relative-path>\\t<class_id>\\t<split>`, LF-terminated."""
    lines = [f"{e.path}\t{e.class_id}\t{assignment.split_of[e.path]}\n" for e in index.entries]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(lines)


def read_manifest(path, root) -> tuple[DatasetIndex, SplitAssignment]:
    """Rebuild the index and assignment recorded by write_manifest.

    The split seed is not stored in the manifest; the returned assignment
    carries seed -1 and must be treated as frozen.
    """
    entries: list[Entry] = []
    split_of: dict[str, str] = {}
    names_by_id: dict[int, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3 or parts[2] not in SPLITS:
                    raise FormatError(f"{path}:{lineno}: malformed manifest record {line!r}")
                rel, class_id, tag = parts[0], int(parts[1]), parts[2]
                class_name = rel.split("/", 1)[0]
                prev = names_by_id.setdefault(class_id, class_name)
                if prev != class_name:
                    raise FormatError(
                        f"{path}:{lineno}: class id {class_id} maps to both {prev!r} and {class_name!r}"
                    )
                entries.append(Entry(rel, class_id, class_name))
                split_of[rel] = tag
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    if not entries:
        raise FormatError(f"manifest {path} is empty")
    class_names = [names_by_id[i] for i in sorted(names_by_id)]
    if sorted(names_by_id) != list(range(len(class_names))):
        raise FormatError(f"manifest {path} has non-contiguous class ids")
    index = DatasetIndex(root=str(root), entries=entries, class_names=class_names)
    return index, SplitAssignment(split_of=split_of, seed=-1)
