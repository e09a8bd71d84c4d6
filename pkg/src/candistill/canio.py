"""CAN log parsing, preprocessing and dataset assembly"""

from __future__ import annotations

import io
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, TextIO, Union

import numpy as np

from .errors import DatasetError, FrameError, ParseError

logger = logging.getLogger(__name__)

MAX_STANDARD_ID = 0x7FF
MAX_DLC = 8
FEATURE_DIM = 10

# token vocabulary: specials, 256 byte tokens, one token per 11-bit identifier
PAD, CLS, SEP = 0, 1, 2
BYTE_OFFSET = 3
ID_OFFSET = BYTE_OFFSET + 256
VOCAB_SIZE = ID_OFFSET + MAX_STANDARD_ID + 1
CONTENT_TOKENS = 1 + 1 + MAX_DLC  # id, dlc, data[0..7]
MIN_MAX_LENGTH = CONTENT_TOKENS + 2

_NORMALIZERS = np.array([MAX_STANDARD_ID, MAX_DLC] + [255] * 8, dtype=np.float64)


class Label(IntEnum):
    NORMAL = 0
    ATTACK = 1

    @property
    def flag(self) -> str:
        return "T" if self is Label.ATTACK else "R"


@dataclass(frozen=True)
class CanFrame:
    """One classic CAN message with its ground-truth label"""

    timestamp: float
    can_id: int
    dlc: int
    data: tuple[int, ...]
    label: Label = Label.NORMAL

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_STANDARD_ID:
            raise FrameError(f"CAN ID {self.can_id:#x} outside 11-bit range")
        if not 0 <= self.dlc <= MAX_DLC:
            raise FrameError(f"DLC {self.dlc} outside 0..8")
        if len(self.data) != MAX_DLC:
            raise FrameError(f"data must hold exactly 8 bytes, got {len(self.data)}")
        if any(not 0 <= b <= 255 for b in self.data):
            raise FrameError("data bytes must be in 0..255")
        if any(b != 0 for b in self.data[self.dlc :]):
            raise FrameError(f"bytes beyond DLC {self.dlc} must be zero padding")
        object.__setattr__(self, "data", tuple(int(b) for b in self.data))
        object.__setattr__(self, "label", Label(self.label))


@dataclass(frozen=True)
class FeatureVector:
    """Normalised (id, dlc, data[0..7]); every component in [0, 1]"""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != FEATURE_DIM:
            raise FrameError(f"feature vector needs {FEATURE_DIM} values, got {len(self.values)}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    attention_mask: tuple[bool, ...]

    @property
    def max_length(self) -> int:
        return len(self.tokens)


# -- preprocessing ------------------------------------------------------------


def pad_data_field(data: Sequence[int], dlc: int) -> tuple[int, ...]:
    """Fill the payload up to 8 bytes with zeros"""
    if not 0 <= dlc <= MAX_DLC:
        raise FrameError(f"DLC {dlc} outside 0..8")
    if len(data) != dlc:
        raise FrameError(f"DLC says {dlc} bytes but {len(data)} were given")
    return tuple(data) + (0,) * (MAX_DLC - dlc)


def to_feature_vector(frame: CanFrame) -> FeatureVector:
    raw = np.array([frame.can_id, frame.dlc, *frame.data], dtype=np.float64)
    return FeatureVector(tuple(float(v) for v in raw / _NORMALIZERS))


def feature_matrix(frames: Sequence[CanFrame]) -> np.ndarray:
    """Vectorised ``to_feature_vector`` over many frames, shape (n, 10)"""
    raw = np.array(
        [[f.can_id, f.dlc, *f.data] for f in frames], dtype=np.float64
    ).reshape(-1, FEATURE_DIM)
    return raw / _NORMALIZERS


def byte_token(value: int) -> int:
    return BYTE_OFFSET + value


def id_token(can_id: int) -> int:
    return ID_OFFSET + can_id


def tokenize(frame: CanFrame, max_length: int = 16) -> TokenSequence:
    if max_length < MIN_MAX_LENGTH:
        raise FrameError(f"max_length {max_length} cannot hold {MIN_MAX_LENGTH} tokens")
    content = [CLS, id_token(frame.can_id), byte_token(frame.dlc)]
    content += [byte_token(b) for b in frame.data]
    content.append(SEP)
    pad = max_length - len(content)
    return TokenSequence(
        tokens=tuple(content + [PAD] * pad),
        attention_mask=tuple([True] * len(content) + [False] * pad),
    )


def token_matrix(frames: Sequence[CanFrame], max_length: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``tokenize``: (tokens, mask), both shaped (n, max_length)"""
    if max_length < MIN_MAX_LENGTH:
        raise FrameError(f"max_length {max_length} cannot hold {MIN_MAX_LENGTH} tokens")
    n = len(frames)
    tokens = np.full((n, max_length), PAD, dtype=np.int64)
    if n:
        fields = np.array([[f.can_id, f.dlc, *f.data] for f in frames], dtype=np.int64)
        tokens[:, 0] = CLS
        tokens[:, 1] = ID_OFFSET + fields[:, 0]
        tokens[:, 2 : 2 + 1 + MAX_DLC] = BYTE_OFFSET + fields[:, 1:]
        tokens[:, MIN_MAX_LENGTH - 1] = SEP
    mask = np.zeros((n, max_length), dtype=bool)
    mask[:, :MIN_MAX_LENGTH] = True
    return tokens, mask


def detokenize(sequence: TokenSequence) -> tuple[int, int, tuple[int, ...]]:
    """Recover (can_id, dlc, data) from a token sequence"""
    tokens = sequence.tokens
    if len(tokens) < MIN_MAX_LENGTH or tokens[0] != CLS or tokens[MIN_MAX_LENGTH - 1] != SEP:
        raise FrameError("token sequence is not a tokenized CAN frame")
    can_id = tokens[1] - ID_OFFSET
    fields = [t - BYTE_OFFSET for t in tokens[2 : 2 + 1 + MAX_DLC]]
    return can_id, fields[0], tuple(fields[1:])


# -- parsing ------------------------------------------------------------------


@dataclass
class ParsedLog:
    """Frames decoded from a log plus the records that were skipped"""

    frames: list[CanFrame]
    skipped: list[ParseError] = field(default_factory=list)

    def __iter__(self) -> Iterator[CanFrame]:
        return iter(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index):
        return self.frames[index]


_HEX = re.compile(r"[0-9A-Fa-f]+")


def _is_header(fields: list[str]) -> bool:
    try:
        float(fields[0])
    except ValueError:
        return True
    return False


def parse_record(line: str, line_number: int) -> CanFrame:
    fields = [f.strip() for f in line.split(",")]
    if len(fields) < 4:
        raise ParseError(line_number, f"expected at least 4 columns, got {len(fields)}")
    try:
        timestamp = float(fields[0])
    except ValueError:
        raise ParseError(line_number, f"bad timestamp {fields[0]!r}") from None
    if not _HEX.fullmatch(fields[1]):
        raise ParseError(line_number, f"bad hex CAN ID {fields[1]!r}")
    can_id = int(fields[1], 16)
    if can_id > MAX_STANDARD_ID:
        raise ParseError(line_number, f"CAN ID {fields[1]} is not an 11-bit identifier")
    try:
        dlc = int(fields[2])
    except ValueError:
        raise ParseError(line_number, f"bad DLC {fields[2]!r}") from None
    if not 0 <= dlc <= MAX_DLC:
        raise ParseError(line_number, f"DLC {dlc} outside 0..8")

    payload = fields[3:-1]
    flag = fields[-1]
    # both the raw layout (dlc bytes) and the canonical layout (8 bytes) are accepted
    if len(payload) not in (dlc, MAX_DLC):
        raise ParseError(
            line_number, f"DLC {dlc} needs {dlc} or {MAX_DLC} data columns, got {len(payload)}"
        )
    if not all(_HEX.fullmatch(text) for text in payload):
        raise ParseError(line_number, "malformed hex byte in data field")
    if any(len(text) > 2 for text in payload):
        raise ParseError(line_number, "data byte outside 00..FF")
    data = [int(b, 16) for b in payload]
    if len(payload) == MAX_DLC and dlc < MAX_DLC:
        if any(data[dlc:]):
            raise ParseError(line_number, f"non-zero bytes beyond DLC {dlc}")
        data = data[:dlc]
    if flag not in ("R", "T"):
        raise ParseError(line_number, f"flag must be R or T, got {flag!r}")

    return CanFrame(
        timestamp=timestamp,
        can_id=can_id,
        dlc=dlc,
        data=pad_data_field(data, dlc),
        label=Label.ATTACK if flag == "T" else Label.NORMAL,
    )


def _parse_chunk(chunk: list[tuple[int, str]], strict: bool) -> tuple[list[CanFrame], list[ParseError]]:
    frames: list[CanFrame] = []
    skipped: list[ParseError] = []
    for line_number, line in chunk:
        try:
            frames.append(parse_record(line, line_number))
        except (ParseError, FrameError) as e:
            error = e if isinstance(e, ParseError) else ParseError(line_number, str(e))
            if strict:
                raise error from None
            skipped.append(error)
    return frames, skipped


def parse_hcrl_csv(
    source: Union[str, TextIO, Iterable[str]], strict: bool = False, threads: int = 1
) -> ParsedLog:
    """Decode HCRL-style records ``timestamp,id,dlc,bytes...,flag``.

    Malformed records are skipped and collected unless ``strict`` is set, in
    which case the first one raises. Output order always matches input order.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    numbered: list[tuple[int, str]] = []
    for line_number, raw in enumerate(source, start=1):
        line = raw.rstrip("\r\n")
        if line_number == 1:
            line = line.lstrip("\ufeff")
        if not line.strip():
            continue
        if not numbered and line_number == 1 and _is_header(line.split(",")):
            logger.debug("skipping header row: %s", line)
            continue
        numbered.append((line_number, line))

    if threads > 1 and len(numbered) > threads:
        size = math.ceil(len(numbered) / threads)
        chunks = [numbered[i : i + size] for i in range(0, len(numbered), size)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _parse_chunk(c, strict), chunks))
    else:
        results = [_parse_chunk(numbered, strict)]

    parsed = ParsedLog(frames=[], skipped=[])
    for frames, skipped in results:
        parsed.frames.extend(frames)
        parsed.skipped.extend(skipped)

    for error in parsed.skipped[:5]:
        logger.warning("skipped record: %s", error)
    if parsed.skipped:
        logger.warning("skipped %d malformed record(s)", len(parsed.skipped))
    return parsed


def read_log(path: Path, strict: bool = False, threads: int = 1) -> ParsedLog:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CAN log not found: {path}")
    with open(path, "r", encoding="utf-8-sig", newline="") as f:
        return parse_hcrl_csv(f, strict=strict, threads=threads)


def format_frame(frame: CanFrame) -> str:
    data = ",".join(f"{b:02X}" for b in frame.data)
    return f"{frame.timestamp:.6f},{frame.can_id:04X},{frame.dlc},{data},{frame.label.flag}"


def format_canonical_csv(frames: Iterable[CanFrame]) -> str:
    """Canonical dataset text: always 8 data bytes, LF line endings"""
    return "".join(format_frame(f) + "\n" for f in frames)


def write_canonical_csv(path: Path, frames: Iterable[CanFrame]) -> bytes:
    payload = format_canonical_csv(frames).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return payload


def fnv1a_64(payload: bytes) -> str:
    """64-bit FNV-1a digest as 16 hex digits (mismatch detection, not security)"""
    value = 0xCBF29CE484222325
    for byte in payload:
        value ^= byte
        value = (value * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{value:016x}"


def dataset_hash(frames: Iterable[CanFrame]) -> str:
    return fnv1a_64(format_canonical_csv(frames).encode("utf-8"))


# -- datasets -----------------------------------------------------------------


@dataclass
class EncodedDataset:
    """Frames with their student and teacher encodings, index-aligned"""

    frames: list[CanFrame]
    features: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_frames(cls, frames: Sequence[CanFrame], max_length: int = 16) -> "EncodedDataset":
        frames = list(frames)
        tokens, mask = token_matrix(frames, max_length)
        return cls(
            frames=frames,
            features=feature_matrix(frames),
            tokens=tokens,
            mask=mask,
            labels=np.array([int(f.label) for f in frames], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> tuple[FeatureVector, TokenSequence, Label]:
        return (
            FeatureVector(tuple(float(v) for v in self.features[index])),
            TokenSequence(
                tokens=tuple(int(t) for t in self.tokens[index]),
                attention_mask=tuple(bool(m) for m in self.mask[index]),
            ),
            Label(int(self.labels[index])),
        )

    @property
    def max_length(self) -> int:
        return self.tokens.shape[1]

    def class_counts(self) -> dict[str, int]:
        attack = int(self.labels.sum())
        return {"normal": len(self) - attack, "attack": attack}

    def content_hash(self) -> str:
        return dataset_hash(self.frames)

    def require_both_classes(self) -> None:
        if len(self) == 0:
            raise DatasetError("dataset is empty")
        if len(np.unique(self.labels)) < 2:
            raise DatasetError("training set contains a single class; both Normal and Attack are required")


@dataclass
class DatasetSplit:
    train: EncodedDataset
    test: EncodedDataset
    seed: int
    train_indices: np.ndarray
    test_indices: np.ndarray


def stratified_indices(labels: np.ndarray, train_ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffle and largest-remainder allocation of train slots"""
    if not 0 < train_ratio < 1:
        raise DatasetError(f"train_ratio must lie strictly between 0 and 1, got {train_ratio}")
    n = len(labels)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    classes = sorted(int(c) for c in np.unique(labels))
    groups = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}

    target_total = int(math.floor(train_ratio * n + 0.5))
    quotas = {c: train_ratio * len(groups[c]) for c in classes}
    alloc = {c: int(math.floor(quotas[c])) for c in classes}
    remaining = target_total - sum(alloc.values())
    by_remainder = sorted(classes, key=lambda c: (-(quotas[c] - alloc[c]), c))
    for c in by_remainder[: max(remaining, 0)]:
        alloc[c] += 1

    train = np.concatenate([groups[c][: alloc[c]] for c in classes])
    test = np.concatenate([groups[c][alloc[c] :] for c in classes])
    return rng.permutation(train), rng.permutation(test)


def split_dataset(
    frames: Sequence[CanFrame], train_ratio: float = 0.7, seed: int = 0, max_length: int = 16
) -> DatasetSplit:
    frames = list(frames)
    if not frames:
        raise DatasetError("cannot split an empty dataset")
    labels = np.array([int(f.label) for f in frames], dtype=np.int64)
    train_idx, test_idx = stratified_indices(labels, train_ratio, seed)
    return DatasetSplit(
        train=EncodedDataset.from_frames([frames[i] for i in train_idx], max_length),
        test=EncodedDataset.from_frames([frames[i] for i in test_idx], max_length),
        seed=seed,
        train_indices=train_idx,
        test_indices=test_idx,
    )


def load_dataset(path: Path, max_length: int = 16, strict: bool = False) -> EncodedDataset:
    parsed = read_log(path, strict=strict)
    if not parsed.frames:
        raise DatasetError(f"no frames in dataset {path}")
    return EncodedDataset.from_frames(parsed.frames, max_length)


def load_split(
    directory: Path, max_length: int = 16, seed: int = 0, train_ratio: Optional[float] = None
) -> DatasetSplit:
    """Load ``train.csv``/``test.csv`` from a preprocessed directory, or split a single log"""
    directory = Path(directory)
    if directory.is_file():
        parsed = read_log(directory)
        return split_dataset(parsed.frames, train_ratio or 0.7, seed, max_length)
    train = load_dataset(directory / "train.csv", max_length)
    test = load_dataset(directory / "test.csv", max_length)
    return DatasetSplit(
        train=train,
        test=test,
        seed=seed,
        train_indices=np.arange(len(train)),
        test_indices=np.arange(len(test)),
    )
