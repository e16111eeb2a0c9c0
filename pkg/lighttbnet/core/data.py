"""Manifest ingestion, stratified train/test split, fold assignment and batching."""

from collections import Counter, OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Iterator, List, Optional, Sequence, Tuple
import csv
import math
import os
import pathlib
import re
import threading

import numpy as np

from .errors import ManifestError, SplitError
from .imaging import AugmentConfig, Preprocessor, augment, normalize
from .utils import logger, make_rng, write_csv

MANIFEST_COLUMNS = ("image_path", "label", "cohort", "sex", "age")
SPLIT_COLUMNS = ("image_path", "assignment", "fold_id")

TEST = "test"
TRAIN = "train"
ROLES = ("train", "val", "test")

N_FOLDS = 5
DEFAULT_TEST_FRAC = 0.2
MIN_STRATUM = 5

AGE_BINS = ((0, 18, "0-17"), (18, 40, "18-39"), (40, 60, "40-59"), (60, math.inf, "60+"))
UNKNOWN = "unknown"

_AGE_PATTERN = re.compile(r"^\s*0*(\d+(?:\.\d+)?)\s*[yY]?\s*$")


@dataclass(frozen=True)
class SampleRecord:
    """One image with its label and stratification metadata."""
    image_path: str
    label: int
    cohort: str
    sex: str = UNKNOWN
    age: Optional[float] = None

    @property
    def sample_id(self) -> str:
        return self.image_path


def parse_age(value: Optional[str]) -> Optional[float]:
    """Parse "35", "040Y" or "35.5"; blank or "unknown" gives None."""
    if value is None:
        return None
    text = str(value).strip()
    if not text or text.lower() in (UNKNOWN, "na", "n/a", "?"):
        return None
    match = _AGE_PATTERN.match(text)
    if not match:
        return None
    return float(match.group(1))


def parse_sex(value: Optional[str]) -> str:
    text = (value or "").strip().upper()
    if text in ("M", "MALE"):
        return "M"
    if text in ("F", "FEMALE"):
        return "F"
    return UNKNOWN


def age_bin(age: Optional[float]) -> str:
    if age is None:
        return UNKNOWN
    for low, high, name in AGE_BINS:
        if low <= age < high:
            return name
    return UNKNOWN


def load_manifest(path: os.PathLike) -> List[SampleRecord]:
    """
    Read a manifest CSV with header image_path,label,cohort,sex,age.

    Args:
        path: Manifest file (UTF-8)

    Returns:
        Records in file order

    Raises:
        ManifestError: unreadable file, missing columns, bad label, duplicate
            image path or no records; row problems carry their line number
    """
    path = pathlib.Path(path)
    try:
        with open(path, newline="", encoding="utf-8-sig") as f:
            reader = csv.DictReader(f)
            header = [h.strip() for h in (reader.fieldnames or [])]
            missing = [c for c in MANIFEST_COLUMNS if c not in header]
            if not header:
                raise ManifestError(f"{path}: no records", details={"path": str(path)})
            if missing:
                raise ManifestError(f"{path}: missing columns {missing}", line=1, details={"path": str(path)})
            reader.fieldnames = header

            records: List[SampleRecord] = []
            seen: Dict[str, int] = {}
            for row in reader:
                line = reader.line_num
                image_path = (row.get("image_path") or "").strip()
                if not image_path:
                    raise ManifestError("empty image_path", line=line)
                label_text = (row.get("label") or "").strip()
                if label_text not in ("0", "1"):
                    raise ManifestError(f"label must be 0 or 1, got '{label_text}'", line=line)
                cohort = (row.get("cohort") or "").strip()
                if not cohort:
                    raise ManifestError("empty cohort", line=line)
                if image_path in seen:
                    raise ManifestError(f"duplicate image_path '{image_path}' (first at line {seen[image_path]})",
                                        line=line)
                seen[image_path] = line
                records.append(SampleRecord(image_path, int(label_text), cohort,
                                            parse_sex(row.get("sex")), parse_age(row.get("age"))))
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}", details={"path": str(path)})
    except csv.Error as e:
        raise ManifestError(f"malformed CSV in {path}: {e}", details={"path": str(path)})

    if not records:
        raise ManifestError(f"{path}: no records", details={"path": str(path)})
    logger.info(f"Loaded manifest {path}: {len(records)} records, "
                f"{sum(r.label for r in records)} positive")
    return records


def write_manifest(records: Sequence[SampleRecord], path: os.PathLike) -> pathlib.Path:
    rows = [(r.image_path, r.label, r.cohort, r.sex, "" if r.age is None else f"{r.age:g}") for r in records]
    return write_csv(path, MANIFEST_COLUMNS, rows)


def resolve_image_path(record: SampleRecord, base_dir: Optional[os.PathLike]) -> pathlib.Path:
    """Relative manifest paths are taken relative to the manifest's directory."""
    p = pathlib.Path(record.image_path)
    if p.is_absolute() or base_dir is None:
        return p
    return pathlib.Path(base_dir) / p


# -- splitting ------------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    role: str
    fold_id: Optional[int] = None


class SplitAssignment:
    """Per-record TEST or (TRAIN, fold_id) assignment, keyed by image path."""

    def __init__(self, entries: "OrderedDict[str, Assignment]", seed: int, n_folds: int = N_FOLDS):
        self.entries = entries
        self.seed = seed
        self.n_folds = n_folds

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, image_path: str) -> Assignment:
        return self.entries[image_path]

    def __eq__(self, other) -> bool:
        return isinstance(other, SplitAssignment) and list(self.entries.items()) == list(other.entries.items())

    def test_paths(self) -> List[str]:
        return [p for p, a in self.entries.items() if a.role == TEST]

    def fold_paths(self, fold_id: int) -> List[str]:
        return [p for p, a in self.entries.items() if a.role == TRAIN and a.fold_id == fold_id]

    def check_fold(self, fold_id: int) -> None:
        if not 0 <= fold_id < self.n_folds:
            raise SplitError(f"fold_id must be in 0..{self.n_folds - 1}, got {fold_id}")

    def select(self, records: Sequence[SampleRecord], role: str, fold_id: Optional[int] = None) -> List[SampleRecord]:
        """
        Records playing `role` for `fold_id`, in manifest order.

        train = TRAIN records outside the fold, val = TRAIN records of the
        fold, test = TEST records (fold_id ignored).
        """
        if role not in ROLES:
            raise SplitError(f"unknown role '{role}'; expected one of {ROLES}")
        if role != "test":
            if fold_id is None:
                raise SplitError(f"role '{role}' needs a fold_id")
            self.check_fold(fold_id)
        selected = []
        for record in records:
            entry = self.entries.get(record.image_path)
            if entry is None:
                raise SplitError(f"record '{record.image_path}' is not in the split")
            if role == "test":
                keep = entry.role == TEST
            elif role == "val":
                keep = entry.role == TRAIN and entry.fold_id == fold_id
            else:
                keep = entry.role == TRAIN and entry.fold_id != fold_id
            if keep:
                selected.append(record)
        return selected

    def to_csv(self, path: os.PathLike) -> pathlib.Path:
        rows = [(p, a.role, "" if a.fold_id is None else a.fold_id) for p, a in self.entries.items()]
        return write_csv(path, SPLIT_COLUMNS, rows)

    @classmethod
    def from_csv(cls, path: os.PathLike, seed: int = 0) -> "SplitAssignment":
        entries: "OrderedDict[str, Assignment]" = OrderedDict()
        try:
            with open(path, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                missing = [c for c in SPLIT_COLUMNS if c not in (reader.fieldnames or [])]
                if missing:
                    raise ManifestError(f"{path}: missing split columns {missing}", line=1)
                for row in reader:
                    role = row["assignment"].strip()
                    if role not in (TEST, TRAIN):
                        raise ManifestError(f"assignment must be test or train, got '{role}'", line=reader.line_num)
                    fold_text = row["fold_id"].strip()
                    fold_id = int(fold_text) if fold_text else None
                    if role == TRAIN and fold_id is None:
                        raise ManifestError("train row without fold_id", line=reader.line_num)
                    entries[row["image_path"].strip()] = Assignment(role, fold_id)
        except OSError as e:
            raise ManifestError(f"cannot read split {path}: {e}")
        except ValueError as e:
            if isinstance(e, ManifestError):
                raise
            raise ManifestError(f"bad fold_id in {path}: {e}")
        n_folds = 1 + max((a.fold_id for a in entries.values() if a.fold_id is not None), default=N_FOLDS - 1)
        return cls(entries, seed, max(n_folds, N_FOLDS))


def stratum_keys(records: Sequence[SampleRecord], min_size: int = MIN_STRATUM) -> List[Tuple[str, ...]]:
    """
    Joint stratum (cohort, label, sex, age bin) per record.

    Strata with fewer than `min_size` records are merged up: first the age
    bin is dropped, then sex. Merged groups that are still small stay as they are.
    """
    levels: List[Callable[[SampleRecord], Tuple[str, ...]]] = [
        lambda r: (r.cohort, str(r.label), r.sex, age_bin(r.age)),
        lambda r: (r.cohort, str(r.label), r.sex, "*"),
        lambda r: (r.cohort, str(r.label), "*", "*"),
    ]
    keys = [levels[0](r) for r in records]
    for level in levels[1:]:
        counts = Counter(keys)
        keys = [level(r) if counts[k] < min_size else k for r, k in zip(records, keys)]
    return keys


def _apportion(sizes: Dict[Tuple[str, ...], int], frac: float) -> Dict[Tuple[str, ...], int]:
    """Largest-remainder allocation of round(frac * total) across strata."""
    total = sum(sizes.values())
    target = int(math.floor(frac * total + 0.5))
    quotas = {k: frac * n for k, n in sizes.items()}
    alloc = {k: int(math.floor(q)) for k, q in quotas.items()}
    leftover = target - sum(alloc.values())
    by_remainder = sorted(sizes, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in by_remainder[:max(leftover, 0)]:
        alloc[k] += 1
    return alloc


def stratified_split(records: Sequence[SampleRecord], test_frac: float = DEFAULT_TEST_FRAC, seed: int = 0,
                     n_folds: int = N_FOLDS) -> SplitAssignment:
    """
    Assign every record to TEST or to one of `n_folds` training folds.

    Within each stratum the records (sorted by path) are shuffled with a
    generator seeded by `seed`; the first share goes to TEST and the rest is
    dealt round-robin into folds. The fold cursor continues from one
    stratum to the next, so fold sizes differ by at most one.
    """
    if not records:
        raise SplitError("cannot split an empty record list")
    if not 0.0 <= test_frac < 1.0:
        raise SplitError(f"test_frac must be in [0,1), got {test_frac}")
    if n_folds < 2:
        raise SplitError(f"n_folds must be >= 2, got {n_folds}")

    keys = stratum_keys(records)
    strata: Dict[Tuple[str, ...], List[SampleRecord]] = {}
    for record, key in zip(records, keys):
        strata.setdefault(key, []).append(record)

    sizes = {k: len(v) for k, v in strata.items()}
    test_counts = _apportion(sizes, test_frac)
    rng = make_rng(seed)

    assigned: Dict[str, Assignment] = {}
    cursor = 0
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda r: r.image_path)
        order = rng.permutation(len(members))
        n_test = test_counts[key]
        for rank, idx in enumerate(order):
            record = members[idx]
            if rank < n_test:
                assigned[record.image_path] = Assignment(TEST)
            else:
                assigned[record.image_path] = Assignment(TRAIN, cursor % n_folds)
                cursor += 1
        logger.debug(f"Stratum {key}: n={len(members)} test={n_test}")

    entries = OrderedDict((r.image_path, assigned[r.image_path]) for r in records)
    split = SplitAssignment(entries, seed, n_folds)
    fold_sizes = [len(split.fold_paths(k)) for k in range(n_folds)]
    logger.info(f"Split {len(records)} records into {len(split.test_paths())} test and folds {fold_sizes} "
                f"({len(strata)} strata, seed={seed})")
    return split


# -- batching -------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # [B, 1, H, W] float32, normalised
    labels: np.ndarray  # [B] int64
    records: List[SampleRecord]
    index: int = 0

    def __len__(self) -> int:
        return len(self.records)


class ImageCache:
    """Thread-safe memo of preprocessed [0,1] images keyed by image path."""

    def __init__(self, preprocessor: Preprocessor, base_dir: Optional[os.PathLike] = None):
        self.preprocessor = preprocessor
        self.base_dir = base_dir
        self._images: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._images)

    def get(self, record: SampleRecord) -> np.ndarray:
        with self._lock:
            cached = self._images.get(record.image_path)
        if cached is not None:
            return cached
        image = self.preprocessor.load(resolve_image_path(record, self.base_dir))
        with self._lock:
            self._images.setdefault(record.image_path, image)
        return image

    def put(self, record: SampleRecord, image: np.ndarray) -> None:
        with self._lock:
            self._images[record.image_path] = np.asarray(image, dtype=np.float32)


ImageSource = Callable[[SampleRecord], np.ndarray]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Training visit order for one epoch; depends only on (seed, epoch)."""
    return make_rng(seed, epoch).permutation(n)


def _make_batch(records: Sequence[SampleRecord], indices: Sequence[int], source: ImageSource,
                augment_cfg: Optional[AugmentConfig], seed: int, epoch: int, batch_index: int) -> Batch:
    images = []
    for i in indices:
        image = source(records[i])
        if augment_cfg is not None:
            image = augment(image, augment_cfg, make_rng(seed, epoch, int(i)))
        images.append(image)
    stacked = normalize(np.stack(images))[:, None, :, :]
    labels = np.array([records[i].label for i in indices], dtype=np.int64)
    return Batch(stacked, labels, [records[i] for i in indices], batch_index)


def batches(records: Sequence[SampleRecord], role: str, source: ImageSource, batch_size: int = 16, seed: int = 0,
            epoch: int = 0, augment_cfg: Optional[AugmentConfig] = None, workers: int = 0) -> Iterator[Batch]:
    """
    Yield batches over records already selected for one role.

    Train role: order shuffled per (seed, epoch) and each sample augmented
    with its own generator seeded by (seed, epoch, sample index). Val and
    test roles: manifest order, no augmentation. The last partial batch is
    kept. With `workers` > 0 batches are assembled on a thread pool but
    still delivered in order.
    """
    if role not in ROLES:
        raise SplitError(f"unknown role '{role}'; expected one of {ROLES}")
    if batch_size < 1:
        raise SplitError(f"batch_size must be >= 1, got {batch_size}")
    n = len(records)
    if role == "train":
        order = epoch_order(n, seed, epoch)
        cfg = augment_cfg if augment_cfg is not None else AugmentConfig()
    else:
        order = np.arange(n)
        cfg = None
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]

    if workers <= 0:
        for b, chunk in enumerate(chunks):
            yield _make_batch(records, chunk, source, cfg, seed, epoch, b)
        return

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ltbn-batch") as pool:
        pending: Deque = deque()
        next_chunk = 0
        while next_chunk < len(chunks) or pending:
            while next_chunk < len(chunks) and len(pending) < 2 * workers:
                pending.append(pool.submit(_make_batch, records, chunks[next_chunk], source, cfg, seed, epoch,
                                           next_chunk))
                next_chunk += 1
            yield pending.popleft().result()


def fold_batches(records: Sequence[SampleRecord], split: SplitAssignment, fold_id: int, role: str,
                 source: ImageSource, batch_size: int = 16, seed: int = 0, epoch: int = 0,
                 augment_cfg: Optional[AugmentConfig] = None, workers: int = 0) -> Iterator[Batch]:
    """`batches` over the records `split` assigns to (role, fold_id)."""
    selected = split.select(records, role, fold_id)
    return batches(selected, role, source, batch_size, seed, epoch, augment_cfg, workers)
