"""Synthetic benign CAN traffic and DoS / fuzzy / spoofing injection"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .canio import MAX_DLC, MAX_STANDARD_ID, CanFrame, Label, write_canonical_csv
from .errors import AttackSpecError

logger = logging.getLogger(__name__)

JITTER = 0.01

# identifiers carrying engine speed and gear position in the HCRL capture
RPM_ID = 0x316
GEAR_ID = 0x43F


# -- payload rules ------------------------------------------------------------


@dataclass(frozen=True)
class ConstantPayload:
    data: tuple[int, ...]

    def generate(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return np.tile(np.array(self.data, dtype=np.int64), (count, 1))

    def byte_ranges(self) -> list[tuple[int, int]]:
        return [(b, b) for b in self.data]


@dataclass(frozen=True)
class CounterPayload:
    """Constant bytes with a rolling counter at ``position``"""

    base: tuple[int, ...]
    position: int
    modulus: int = 16

    def generate(self, count: int, rng: np.random.Generator) -> np.ndarray:
        rows = np.tile(np.array(self.base, dtype=np.int64), (count, 1))
        rows[:, self.position] = (self.base[self.position] + np.arange(count)) % self.modulus
        return rows

    def byte_ranges(self) -> list[tuple[int, int]]:
        ranges = [(b, b) for b in self.base]
        ranges[self.position] = (0, self.modulus - 1)
        return ranges


@dataclass(frozen=True)
class RandomWalkPayload:
    """Constant bytes with a bounded random walk at ``position``"""

    base: tuple[int, ...]
    position: int
    step: int = 2
    low: int = 0
    high: int = 200

    def generate(self, count: int, rng: np.random.Generator) -> np.ndarray:
        rows = np.tile(np.array(self.base, dtype=np.int64), (count, 1))
        value = min(max(self.base[self.position], self.low), self.high)
        steps = rng.integers(-self.step, self.step + 1, size=count)
        for i in range(count):
            rows[i, self.position] = value
            value = min(max(value + int(steps[i]), self.low), self.high)
        return rows

    def byte_ranges(self) -> list[tuple[int, int]]:
        ranges = [(b, b) for b in self.base]
        ranges[self.position] = (self.low, self.high)
        return ranges


PayloadRule = Union[ConstantPayload, CounterPayload, RandomWalkPayload]


@dataclass(frozen=True)
class Ecu:
    can_id: int
    period: float
    payload: PayloadRule
    dlc: int = MAX_DLC


@dataclass(frozen=True)
class BenignProfile:
    ecus: tuple[Ecu, ...]

    def __post_init__(self):
        object.__setattr__(self, "ecus", tuple(self.ecus))
        if not self.ecus:
            raise AttackSpecError("benign profile needs at least one ECU")
        for ecu in self.ecus:
            if ecu.period <= 0:
                raise AttackSpecError(f"ECU {ecu.can_id:#x} has non-positive period {ecu.period}")
            if not 0 <= ecu.can_id <= MAX_STANDARD_ID:
                raise AttackSpecError(f"ECU ID {ecu.can_id:#x} outside 11-bit range")

    @property
    def ids(self) -> list[int]:
        return [ecu.can_id for ecu in self.ecus]


def default_profile() -> BenignProfile:
    """A small passenger-car bus: chassis, powertrain and body ECUs"""
    return BenignProfile(
        ecus=(
            Ecu(0x0A0, 0.010, CounterPayload((0x10, 0x00, 0x20, 0x00, 0x00, 0x00, 0x00, 0x00), 7)),
            Ecu(0x130, 0.010, RandomWalkPayload((0x05, 0x20, 0x80, 0x00, 0x00, 0x00, 0x00, 0x00), 2)),
            Ecu(0x153, 0.020, ConstantPayload((0x00, 0x80, 0x10, 0xFF, 0x00, 0xFF, 0x40, 0xCE))),
            Ecu(0x2C0, 0.020, CounterPayload((0x14, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00), 1)),
            Ecu(
                RPM_ID,
                0.010,
                RandomWalkPayload((0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F), 2, 3, 0x40, 0x90),
            ),
            Ecu(0x350, 0.020, ConstantPayload((0x05, 0x28, 0x84, 0x66, 0x6D, 0x00, 0x00, 0xA2))),
            Ecu(GEAR_ID, 0.010, CounterPayload((0x00, 0x40, 0x60, 0xFF, 0x5A, 0x6E, 0x08, 0x00), 6, 4)),
            Ecu(0x545, 0.100, ConstantPayload((0xD8, 0x00, 0x00, 0x8A, 0x00, 0x00, 0x00, 0x00))),
        )
    )


# -- logs and attack specifications -------------------------------------------


class AttackKind(str, Enum):
    DOS = "dos"
    FUZZY = "fuzzy"
    SPOOF = "spoof"


@dataclass
class Manifest:
    total: int = 0
    normal: int = 0
    attack: int = 0
    kind: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"total": self.total, "normal": self.normal, "attack": self.attack, "kind": dict(self.kind)}


@dataclass
class GeneratedLog:
    frames: list[CanFrame]
    duration: float
    manifest: Manifest
    profile: Optional[BenignProfile] = None

    def write(self, csv_path: Path, manifest_path: Optional[Path] = None) -> bytes:
        payload = write_canonical_csv(csv_path, self.frames)
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps(self.manifest.to_dict(), indent=2, sort_keys=True))
        return payload


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    rate: float
    window: Optional[tuple[float, float]] = None  # None covers the whole log
    inject_id: int = 0x000
    target_id: Optional[int] = None
    payload: Optional[tuple[int, ...]] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.rate <= 0:
            raise AttackSpecError(f"attack rate must be positive, got {self.rate}")
        if self.payload is not None and (
            len(self.payload) != MAX_DLC or any(not 0 <= b <= 255 for b in self.payload)
        ):
            raise AttackSpecError("forged payload must be 8 bytes in 0..255")


def generate_benign(profile: BenignProfile, duration: float, seed: int = 0) -> GeneratedLog:
    """Periodic ECU broadcasts with +/-1% period jitter, merged by timestamp"""
    if duration <= 0:
        raise AttackSpecError(f"duration must be positive, got {duration}")
    children = np.random.SeedSequence(seed).spawn(len(profile.ecus))
    streams: list[list[tuple[float, int, CanFrame]]] = []
    for order, (ecu, child) in enumerate(zip(profile.ecus, children)):
        rng = np.random.default_rng(child)
        times = []
        t = float(rng.uniform(0.0, ecu.period))
        while t < duration:
            times.append(t)
            t += ecu.period * (1.0 + rng.uniform(-JITTER, JITTER))
        payloads = ecu.payload.generate(len(times), rng)
        stream = []
        for t, row in zip(times, payloads):
            data = tuple(int(b) for b in row[: ecu.dlc]) + (0,) * (MAX_DLC - ecu.dlc)
            stream.append((t, order, CanFrame(round(t, 6), ecu.can_id, ecu.dlc, data, Label.NORMAL)))
        streams.append(stream)

    frames = [frame for _, _, frame in heapq.merge(*streams, key=lambda item: (item[0], item[1]))]
    logger.debug("generated %d benign frames over %.3fs", len(frames), duration)
    return GeneratedLog(
        frames=frames,
        duration=duration,
        manifest=Manifest(total=len(frames), normal=len(frames), attack=0, kind={}),
        profile=profile,
    )


def _injection_times(log: GeneratedLog, spec: AttackSpec) -> np.ndarray:
    start, end = spec.window if spec.window is not None else (0.0, log.duration)
    if not 0.0 <= start < end <= log.duration:
        raise AttackSpecError(
            f"attack window ({start}, {end}) must lie within the log duration (0, {log.duration})"
        )
    count = int(round(spec.rate * (end - start)))
    return start + np.arange(count) / spec.rate


def _merge(log: GeneratedLog, injected: list[CanFrame], kind: AttackKind) -> GeneratedLog:
    # stable merge: on equal timestamps the original frame stays first
    merged = list(heapq.merge(log.frames, injected, key=lambda f: f.timestamp))
    manifest = replace(log.manifest, kind=dict(log.manifest.kind))
    manifest.total += len(injected)
    manifest.attack += len(injected)
    manifest.kind[kind.value] = manifest.kind.get(kind.value, 0) + len(injected)
    return GeneratedLog(frames=merged, duration=log.duration, manifest=manifest, profile=log.profile)


def _benign_ids(log: GeneratedLog) -> set[int]:
    return {f.can_id for f in log.frames if f.label is Label.NORMAL}


def _require_kind(spec: AttackSpec, kind: AttackKind) -> None:
    if spec.kind is not kind:
        raise AttackSpecError(f"expected a {kind.value} spec, got {spec.kind.value}")


def inject_dos(log: GeneratedLog, spec: AttackSpec) -> GeneratedLog:
    """Flood with a maximal-priority identifier and an all-zero payload"""
    _require_kind(spec, AttackKind.DOS)
    benign = _benign_ids(log)
    if benign and spec.inject_id > min(benign):
        raise AttackSpecError(
            f"DoS ID {spec.inject_id:#x} does not out-prioritise benign ID {min(benign):#x}"
        )
    injected = [
        CanFrame(round(float(t), 6), spec.inject_id, MAX_DLC, (0,) * MAX_DLC, Label.ATTACK)
        for t in _injection_times(log, spec)
    ]
    return _merge(log, injected, AttackKind.DOS)


def inject_fuzzy(log: GeneratedLog, spec: AttackSpec) -> GeneratedLog:
    """Random identifiers and random payload bytes"""
    _require_kind(spec, AttackKind.FUZZY)
    times = _injection_times(log, spec)
    rng = np.random.default_rng(spec.seed)
    ids = rng.integers(0, MAX_STANDARD_ID + 1, size=len(times))
    payloads = rng.integers(0, 256, size=(len(times), MAX_DLC))
    injected = [
        CanFrame(round(float(t), 6), int(i), MAX_DLC, tuple(int(b) for b in row), Label.ATTACK)
        for t, i, row in zip(times, ids, payloads)
    ]
    return _merge(log, injected, AttackKind.FUZZY)


def forged_payload(ranges: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    """Constant bytes lying outside the (low, high) range of each byte position"""
    if not ranges:
        return (0xFF,) * MAX_DLC
    forged = []
    for low, high in ranges:
        if high < 255:
            forged.append(int(high) + 1)
        elif low > 0:
            forged.append(int(low) - 1)
        else:
            forged.append(0xFF)
    return tuple(forged) + (0xFF,) * (MAX_DLC - len(forged))


def _spoof_ranges(log: GeneratedLog, target_id: int) -> list[tuple[int, int]]:
    # bounds of the payload rule when the profile is known, else the bytes seen in the log
    if log.profile is not None:
        for ecu in log.profile.ecus:
            if ecu.can_id == target_id:
                return ecu.payload.byte_ranges()
    rows = np.asarray([f.data for f in log.frames if f.can_id == target_id and f.label is Label.NORMAL])
    return [(int(low), int(high)) for low, high in zip(rows.min(axis=0), rows.max(axis=0))]


def inject_spoof(log: GeneratedLog, spec: AttackSpec) -> GeneratedLog:
    """Reuse a legitimate identifier with forged content"""
    _require_kind(spec, AttackKind.SPOOF)
    if spec.target_id is None or spec.target_id not in _benign_ids(log):
        target = "none" if spec.target_id is None else f"{spec.target_id:#x}"
        raise AttackSpecError(f"spoof target ID {target} does not occur in the benign traffic")
    if spec.payload is not None:
        payload = spec.payload
    else:
        payload = forged_payload(_spoof_ranges(log, spec.target_id))
    dlc = next(f.dlc for f in log.frames if f.can_id == spec.target_id)
    data = tuple(payload[:dlc]) + (0,) * (MAX_DLC - dlc)
    injected = [
        CanFrame(round(float(t), 6), spec.target_id, dlc, data, Label.ATTACK)
        for t in _injection_times(log, spec)
    ]
    return _merge(log, injected, AttackKind.SPOOF)


def inject(log: GeneratedLog, spec: AttackSpec) -> GeneratedLog:
    injectors = {
        AttackKind.DOS: inject_dos,
        AttackKind.FUZZY: inject_fuzzy,
        AttackKind.SPOOF: inject_spoof,
    }
    result = injectors[spec.kind](log, spec)
    logger.info(
        "injected %d %s frame(s); log now holds %d frames",
        result.manifest.total - log.manifest.total,
        spec.kind.value,
        result.manifest.total,
    )
    return result


def benign_rate(log: GeneratedLog) -> float:
    return log.manifest.normal / log.duration
