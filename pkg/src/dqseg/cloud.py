"""Labeled point clouds, the label taxonomy, and the DQPC/DQPR binary formats.

DQPC layout (little-endian)::

    b"DQPC" | u32 version | u32 n_points | u16 n_things | u16 n_stuff
    n_points x (f32 x, f32 y, f32 z, f32 intensity, u16 semantic, u32 instance)

DQPR is the same header with magic b"DQPR" and the same records, followed by
``n_points`` u32 predicted instance ids and ``n_points`` u16 predicted
semantic ids.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UnsupportedVersionError, ValidationError

CLOUD_MAGIC = b"DQPC"
PRED_MAGIC = b"DQPR"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIHH")
RECORD_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("intensity", "<f4"),
        ("semantic", "<u2"),
        ("instance", "<u4"),
    ]
)
assert RECORD_DTYPE.itemsize == 22


@dataclass(frozen=True)
class LabelTaxonomy:
    """Ordered thing and stuff class names.

    Global class ids enumerate things first, then stuff.
    """

    thing_classes: tuple[str, ...]
    stuff_classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "thing_classes", tuple(self.thing_classes))
        object.__setattr__(self, "stuff_classes", tuple(self.stuff_classes))
        if not self.thing_classes or not self.stuff_classes:
            raise ValidationError("taxonomy needs at least one thing and one stuff class")
        names = self.thing_classes + self.stuff_classes
        if len(set(names)) != len(names):
            raise ValidationError(f"class names must be unique, got {names}")

    @property
    def n_things(self) -> int:
        return len(self.thing_classes)

    @property
    def n_stuff(self) -> int:
        return len(self.stuff_classes)

    @property
    def n_classes(self) -> int:
        return self.n_things + self.n_stuff

    @property
    def names(self) -> tuple[str, ...]:
        return self.thing_classes + self.stuff_classes

    def is_thing(self, class_id) -> np.ndarray | bool:
        return np.asarray(class_id) < self.n_things

    def stuff_id(self, stuff_index: int) -> int:
        """Global class id of the ``stuff_index``-th stuff class."""
        return self.n_things + stuff_index

    def check_cloud(self, cloud: "LabeledPointCloud") -> None:
        if (cloud.n_things, cloud.n_stuff) != (self.n_things, self.n_stuff):
            raise ValidationError(
                f"cloud has {cloud.n_things} thing / {cloud.n_stuff} stuff classes, "
                f"taxonomy has {self.n_things} / {self.n_stuff}"
            )

    def to_dict(self) -> dict:
        return {"thing_classes": list(self.thing_classes), "stuff_classes": list(self.stuff_classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelTaxonomy":
        return cls(tuple(d["thing_classes"]), tuple(d["stuff_classes"]))


DEFAULT_TAXONOMY = LabelTaxonomy(("car", "pedestrian", "pole"), ("ground", "building", "vegetation"))


@dataclass(eq=False)
class LabeledPointCloud:
    """Points with intensity, semantic class and instance id.

    Arrays are stored at file precision (float32 geometry) so that a
    write/read round trip is bit-exact. Instance id 0 means "no instance".
    """

    positions: np.ndarray
    intensity: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    n_things: int
    n_stuff: int
    _validated: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(-1, 3)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float32).reshape(-1)
        self.semantic = np.ascontiguousarray(self.semantic, dtype=np.int64).reshape(-1)
        self.instance = np.ascontiguousarray(self.instance, dtype=np.int64).reshape(-1)
        self.n_things = int(self.n_things)
        self.n_stuff = int(self.n_stuff)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_points(self) -> int:
        return len(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledPointCloud):
            return NotImplemented
        return (
            self.n_things == other.n_things
            and self.n_stuff == other.n_stuff
            and np.array_equal(self.positions.view(np.uint32), other.positions.view(np.uint32))
            and np.array_equal(self.intensity.view(np.uint32), other.intensity.view(np.uint32))
            and np.array_equal(self.semantic, other.semantic)
            and np.array_equal(self.instance, other.instance)
        )

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.instance)
        return ids[ids > 0]

    def validate(self) -> "LabeledPointCloud":
        """Raise :class:`ValidationError` naming the first offending point."""
        n = len(self.positions)
        if n < 1:
            raise ValidationError("cloud must contain at least one point")
        for name in ("intensity", "semantic", "instance"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if self.n_things < 1 or self.n_stuff < 1:
            raise ValidationError("cloud needs at least one thing and one stuff class")

        def fail(mask, what):
            bad = np.flatnonzero(mask)
            if bad.size:
                raise ValidationError(f"point {bad[0]}: {what}")

        fail(~np.isfinite(self.positions).all(axis=1), "non-finite coordinates")
        fail(~((self.intensity >= 0) & (self.intensity <= 1)), "intensity outside [0, 1]")
        n_classes = self.n_things + self.n_stuff
        fail((self.semantic < 0) | (self.semantic >= n_classes), f"semantic id outside [0, {n_classes})")
        fail(self.instance < 0, "negative instance id")
        fail((self.instance > 0) & (self.semantic >= self.n_things), "instance id on a stuff point")
        fail((self.instance == 0) & (self.semantic < self.n_things), "thing point without instance id")
        if self.instance.max() > 0:
            ids = self.instance
            order = np.argsort(ids, kind="stable")
            sid, ssem = ids[order], self.semantic[order]
            clash = (sid[1:] == sid[:-1]) & (ssem[1:] != ssem[:-1]) & (sid[1:] > 0)
            if clash.any():
                j = np.flatnonzero(clash)[0] + 1
                raise ValidationError(
                    f"point {order[j]}: instance {sid[j]} spans several semantic classes"
                )
        self._validated = True
        return self

    def records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["x"], rec["y"], rec["z"] = self.positions.T
        rec["intensity"] = self.intensity
        rec["semantic"] = self.semantic
        rec["instance"] = self.instance
        return rec

    def subset(self, index) -> "LabeledPointCloud":
        return LabeledPointCloud(
            self.positions[index],
            self.intensity[index],
            self.semantic[index],
            self.instance[index],
            self.n_things,
            self.n_stuff,
        )


def _header(magic: bytes, cloud: LabeledPointCloud) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, len(cloud), cloud.n_things, cloud.n_stuff)


def write_cloud(cloud: LabeledPointCloud, path) -> None:
    cloud.validate()
    payload = _header(CLOUD_MAGIC, cloud) + cloud.records().tobytes()
    _write_bytes(path, payload)


def _write_bytes(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def _parse(data: bytes, magic: bytes, extra_per_point: int):
    if len(data) < 4 or data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}", offset=0)
    if len(data) < _HEADER.size:
        raise FormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(data)}", offset=len(data)
        )
    _, version, n_points, n_things, n_stuff = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", offset=4)
    expected = _HEADER.size + n_points * (RECORD_DTYPE.itemsize + extra_per_point)
    if len(data) != expected:
        raise FormatError(
            f"expected {expected} bytes for {n_points} points, got {len(data)}",
            offset=min(len(data), expected),
        )
    end = _HEADER.size + n_points * RECORD_DTYPE.itemsize
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=n_points, offset=_HEADER.size)
    cloud = LabeledPointCloud(
        np.stack([rec["x"], rec["y"], rec["z"]], axis=1),
        rec["intensity"],
        rec["semantic"],
        rec["instance"],
        n_things,
        n_stuff,
    )
    return cloud, end


def read_cloud(path) -> LabeledPointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    cloud, _ = _parse(data, CLOUD_MAGIC, 0)
    try:
        return cloud.validate()
    except ValidationError as exc:
        raise FormatError(f"{os.fspath(path)}: {exc}") from exc


def write_prediction(cloud: LabeledPointCloud, semantic: np.ndarray, instance: np.ndarray, path) -> None:
    """Write a DQPR file: the input cloud plus predicted labels."""
    cloud.validate()
    semantic = np.asarray(semantic)
    instance = np.asarray(instance)
    if semantic.shape != (len(cloud),) or instance.shape != (len(cloud),):
        raise ValidationError("prediction arrays must have one entry per point")
    payload = (
        _header(PRED_MAGIC, cloud)
        + cloud.records().tobytes()
        + instance.astype("<u4").tobytes()
        + semantic.astype("<u2").tobytes()
    )
    _write_bytes(path, payload)


def read_prediction(path) -> tuple[LabeledPointCloud, np.ndarray, np.ndarray]:
    """Return ``(cloud, semantic, instance)`` from a DQPR file."""
    with open(path, "rb") as fh:
        data = fh.read()
    cloud, off = _parse(data, PRED_MAGIC, 6)
    n = len(cloud)
    instance = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
    semantic = np.frombuffer(data, dtype="<u2", count=n, offset=off + 4 * n).astype(np.int64)
    return cloud, semantic, instance
