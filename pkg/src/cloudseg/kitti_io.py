"""Binary scan and label file I/O.

A scan is little-endian float32 quadruples (x, y, z, remission); a label
file is one little-endian uint32 per point whose lower 16 bits carry the
semantic id and upper 16 bits the instance id. The same layout doubles as
the internal format for synthetic scenes. Write-then-read round trips are
bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataFormatError
from .geometry import PointCloud

_POINT_BYTES = 16  # four float32 per point
_DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
BUNDLED_REMAP = os.path.join(_DATA_DIR, "semantic_remap.json")


@dataclass
class RemapTable:
    """Raw semantic ids to contiguous train ids (plus the inverse)."""

    num_classes: int
    ignore_class: int
    class_names: list
    lookup: np.ndarray        # [65536] raw semantic id -> train id
    inverse: np.ndarray       # [num_classes + 1] train id -> representative raw id

    @classmethod
    def load(cls, path=BUNDLED_REMAP):
        with open(path) as fh:
            doc = json.load(fh)
        num_classes = int(doc["num_classes"])
        ignore = int(doc["ignore_class"])
        lookup = np.full(1 << 16, ignore, dtype=np.int64)
        for raw, train in doc["raw_to_train"].items():
            lookup[int(raw)] = int(train)
        if lookup.max() > num_classes:
            raise DataFormatError("remap table assigns ids beyond num_classes")
        inverse = np.zeros(num_classes + 1, dtype=np.uint32)
        for train, raw in doc.get("train_to_raw", {}).items():
            inverse[int(train)] = int(raw)
        return cls(num_classes=num_classes, ignore_class=ignore,
                   class_names=list(doc.get("class_names", [])),
                   lookup=lookup, inverse=inverse)

    def apply(self, semantic_ids):
        return self.lookup[np.asarray(semantic_ids, dtype=np.int64)]

    def invert(self, train_ids):
        return self.inverse[np.asarray(train_ids, dtype=np.int64)]


@dataclass
class KittiScan:
    """One raw scan: N x 4 float32 points plus optional raw uint32 labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise DataFormatError(f"scan points must be N x 4, got {self.points.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint32)
            if self.labels.shape != (self.n,):
                raise DataFormatError(
                    f"{self.labels.shape[0]} labels for {self.n} points")

    @property
    def n(self):
        return self.points.shape[0]

    def semantic_ids(self):
        """Lower 16 bits of each label word."""
        if self.labels is None:
            raise DataFormatError("scan carries no labels")
        return (self.labels & np.uint32(0xFFFF)).astype(np.int64)

    def instance_ids(self):
        if self.labels is None:
            raise DataFormatError("scan carries no labels")
        return (self.labels >> np.uint32(16)).astype(np.int64)


def read_kitti_scan(scan_path, label_path=None) -> KittiScan:
    """Parse a binary scan (and optional label file) with strict size checks."""
    raw = np.fromfile(scan_path, dtype=np.uint8)
    if raw.size % _POINT_BYTES != 0:
        raise DataFormatError(
            f"scan '{scan_path}' is {raw.size} bytes, not a multiple of {_POINT_BYTES}")
    points = raw.view("<f4").reshape(-1, 4)
    labels = None
    if label_path is not None:
        labels = np.fromfile(label_path, dtype="<u4")
        if labels.size != points.shape[0]:
            raise DataFormatError(
                f"label file '{label_path}' has {labels.size} entries for "
                f"{points.shape[0]} points")
    return KittiScan(points=points, labels=labels)


def write_kitti_scan(path, points):
    np.ascontiguousarray(points, dtype="<f4").tofile(path)


def write_labels(path, labels):
    np.ascontiguousarray(labels, dtype="<u4").tofile(path)


def scan_to_cloud(scan: KittiScan, remap: Optional[RemapTable] = None,
                  with_remission=False) -> PointCloud:
    """View a scan as a PointCloud with network-ready input features.

    Features are the xyz positions, plus the remission channel when asked.
    Raw labels pass through ``remap`` when given; otherwise the semantic ids
    are used as train ids directly (the internal synthetic convention).
    """
    positions = scan.points[:, :3].astype(np.float64)
    features = scan.points[:, :4].astype(np.float64) if with_remission else positions.copy()
    labels = None
    if scan.labels is not None:
        sem = scan.semantic_ids()
        labels = remap.apply(sem) if remap is not None else sem
    return PointCloud(positions=positions, features=features, labels=labels)


def cloud_to_scan(cloud: PointCloud) -> KittiScan:
    """Pack a cloud into the scan layout (remission 0 unless a 4th feature)."""
    points = np.zeros((cloud.n, 4), dtype=np.float32)
    points[:, :3] = cloud.positions
    if cloud.features is not None and cloud.features.shape[1] >= 4:
        points[:, 3] = cloud.features[:, 3]
    labels = None
    if cloud.labels is not None:
        labels = cloud.labels.astype(np.uint32)
    return KittiScan(points=points, labels=labels)


def scan_pairs_in_dir(directory):
    """Sorted (scan_path, label_path_or_None) pairs under a directory."""
    scans = sorted(f for f in os.listdir(directory) if f.endswith(".bin"))
    if not scans:
        raise DataFormatError(f"no .bin scans under '{directory}'")
    pairs = []
    for name in scans:
        label = os.path.join(directory, name[:-4] + ".label")
        pairs.append((os.path.join(directory, name), label if os.path.exists(label) else None))
    return pairs
