"""Scan ingestion, trajectory file formats and run configuration.

Supported inputs are KITTI velodyne ``.bin`` files (packed little-endian
float32 x, y, z, intensity) and PLY point clouds (ascii or
binary_little_endian, vertex element only). Trajectories are read and
written in the KITTI pose format (12 floats per line, row-major upper 3x4)
and the TUM format (timestamp tx ty tz qx qy qz qw). Floats are printed
with 17 significant digits so write/read round trips are exact.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geometry import Isometry3, PointCloud
from .motion import StampedPose

log = logging.getLogger(__name__)

KITTI_POINT_BYTES = 16
FLOAT_FORMAT = "%.17g"


# ----------------------------------------------------------------- scans


def read_kitti_bin(path, min_range=0.0, max_range=np.inf) -> PointCloud:
    """Read a KITTI velodyne scan, dropping points outside the range band.

    The file must be a whole number of 16-byte records; intensity is
    discarded. Ranges are Euclidean distances from the sensor origin and
    the [min_range, max_range] band is inclusive on both ends.
    """
    size = Path(path).stat().st_size
    if size % KITTI_POINT_BYTES != 0:
        raise ValueError(
            f"{path}: size {size} bytes is not a multiple of {KITTI_POINT_BYTES}"
        )
    raw = np.fromfile(path, dtype="<f4")
    points = raw.reshape(-1, 4)[:, :3].astype(np.float64)
    return filter_range(PointCloud(points), min_range, max_range)


def write_kitti_bin(path, cloud: PointCloud, intensities=None) -> None:
    """Write a cloud as packed float32 (x, y, z, intensity) records."""
    n = len(cloud)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if intensities is not None:
        rec[:, 3] = intensities
    rec.tofile(path)


def filter_range(cloud: PointCloud, min_range, max_range) -> PointCloud:
    """Keep points whose distance from the origin lies in the closed band."""
    if not 0.0 <= min_range < max_range:
        raise ValueError(f"invalid range band [{min_range}, {max_range}]")
    r = np.linalg.norm(cloud.points, axis=1)
    keep = (r >= min_range) & (r <= max_range)
    if keep.all():
        return cloud
    rel = None if cloud.rel_times is None else cloud.rel_times[keep]
    return PointCloud(cloud.points[keep], rel_times=rel)


def synthesize_rel_times(cloud: PointCloud) -> PointCloud:
    """Assign per-point relative times from azimuth, assuming one clockwise
    revolution per scan.

    The first point anchors s = 0 and s grows with clockwise angle:
    s = ((theta_0 - atan2(y, x)) mod 2pi) / 2pi, always in [0, 1).
    """
    if len(cloud) == 0:
        raise ValueError("cannot synthesize rel_times for an empty cloud")
    theta = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
    s = np.mod(theta[0] - theta, 2.0 * np.pi) / (2.0 * np.pi)
    return PointCloud(cloud.points, rel_times=s)


# ------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_TIME_NAMES = ("time", "t", "timestamp")


def _normalize_times(t: np.ndarray) -> np.ndarray:
    """Map native per-point times onto [0, 1], min-max if out of band."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return t
    lo, hi = t.min(), t.max()
    if 0.0 <= lo and hi <= 1.0:
        return t
    if hi == lo:
        return np.zeros_like(t)
    return (t - lo) / (hi - lo)


def read_ply(path) -> PointCloud:
    """Read an ascii or binary_little_endian PLY with a single vertex element.

    x/y/z may be float or double; a scalar property named time, t or
    timestamp becomes rel_times (min-max normalized when outside [0, 1]).
    Other scalar properties are ignored; list properties and additional
    elements are rejected.
    """
    data = Path(path).read_bytes()
    marker = data.find(b"end_header")
    if not data.startswith(b"ply") or marker < 0:
        raise ValueError(f"{path}: not a PLY file")
    header_end = data.find(b"\n", marker)
    header = data[:header_end].decode("ascii")
    body = data[header_end + 1:]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    for line in header.splitlines():
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] != "vertex" or count is not None:
                raise ValueError(f"{path}: only a single vertex element is supported")
            count = int(tokens[2])
        elif tokens[0] == "property":
            if tokens[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: unknown property type {tokens[1]!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported format {fmt!r}")
    if count is None:
        raise ValueError(f"{path}: missing vertex element")
    names = [name for name, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError(f"{path}: missing vertex property {axis!r}")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + code) for name, code in props])
        if len(body) < count * dtype.itemsize:
            raise ValueError(f"{path}: truncated vertex data")
        table = np.frombuffer(body, dtype=dtype, count=count)
        column = lambda name: table[name].astype(np.float64)
    else:
        tokens = body.decode("ascii").split()
        if len(tokens) < count * len(props):
            raise ValueError(f"{path}: truncated vertex data")
        grid = np.array(tokens[: count * len(props)], dtype=np.float64)
        grid = grid.reshape(count, len(props))
        column = lambda name: grid[:, names.index(name)]

    points = np.column_stack([column("x"), column("y"), column("z")])
    rel = None
    for name in _TIME_NAMES:
        if name in names:
            rel = _normalize_times(column(name))
            break
    return PointCloud(points, rel_times=rel)


def write_ply(path, cloud: PointCloud, binary=True) -> None:
    """Write x/y/z (and time when rel_times is present) as doubles."""
    names = ["x", "y", "z"] + (["time"] if cloud.rel_times is not None else [])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    table = np.zeros(len(cloud), dtype=np.dtype([(n, "<f8") for n in names]))
    table["x"], table["y"], table["z"] = cloud.points.T
    if cloud.rel_times is not None:
        table["time"] = cloud.rel_times
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(table.tobytes())
        else:
            rows = (" ".join(FLOAT_FORMAT % row[n] for n in names) for row in table)
            f.write(("\n".join(rows) + ("\n" if len(cloud) else "")).encode("ascii"))


# ----------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Index-aligned sequence of stamped poses with non-decreasing stamps."""

    poses: list

    def __post_init__(self):
        stamps = [sp.stamp for sp in self.poses]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("trajectory stamps must be non-decreasing")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


def write_trajectory_kitti(traj: Trajectory, path) -> None:
    """One line per pose: the 12 row-major floats of the upper 3x4."""
    lines = []
    for sp in traj:
        row = sp.pose.matrix()[:3, :].reshape(-1)
        lines.append(" ".join(FLOAT_FORMAT % v for v in row))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory_kitti(path) -> Trajectory:
    """Inverse of write_trajectory_kitti; stamps are the line indices."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise ValueError(f"{path}:{lineno + 1}: expected 12 values, got {len(tokens)}")
        m = np.array(tokens, dtype=np.float64).reshape(3, 4)
        poses.append(StampedPose(Isometry3(m[:, :3], m[:, 3]), float(len(poses))))
    return Trajectory(poses)


def _quat_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix, w >= 0."""
    d = np.diagonal(r)
    choices = np.array([d[0] + d[1] + d[2], d[0] - d[1] - d[2],
                        d[1] - d[0] - d[2], d[2] - d[0] - d[1]])
    case = int(np.argmax(choices))
    s = 2.0 * np.sqrt(1.0 + choices[case])
    if case == 0:
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif case == 1:
        q = np.array([(r[2, 1] - r[1, 2]) / s,
                      0.25 * s,
                      (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif case == 2:
        q = np.array([(r[0, 2] - r[2, 0]) / s,
                      (r[0, 1] + r[1, 0]) / s,
                      0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        q = np.array([(r[1, 0] - r[0, 1]) / s,
                      (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s,
                      0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0.0 else q


def _rotation_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def write_trajectory_tum(traj: Trajectory, path) -> None:
    """One line per pose: timestamp tx ty tz qx qy qz qw."""
    lines = []
    for sp in traj:
        w, x, y, z = _quat_from_rotation(sp.pose.rotation)
        vals = [sp.stamp, *sp.pose.translation, x, y, z, w]
        lines.append(" ".join(FLOAT_FORMAT % v for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory_tum(path) -> Trajectory:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 8:
            raise ValueError(f"{path}:{lineno + 1}: expected 8 values, got {len(tokens)}")
        stamp, tx, ty, tz, qx, qy, qz, qw = (float(t) for t in tokens)
        rot = _rotation_from_quat(np.array([qw, qx, qy, qz]))
        poses.append(StampedPose(Isometry3(rot, np.array([tx, ty, tz])), stamp))
    return Trajectory(poses)


# ----------------------------------------------------------- configuration


@dataclass
class RunConfig:
    """Flat run parameters, file format ``key = value`` one per line."""

    b_max: float = 0.2
    b_min: float = 0.1
    b_ratio: float = 0.02
    p_th: float = 0.8
    rho_ker: float = 0.1
    n: int = 10
    threads: int = 8
    max_iterations: int = 15
    time_budget_ms: float | None = None
    min_range: float = 1.0
    max_range: float = 120.0
    scan_period: float = 0.1
    deskew: bool = True


_CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}
CONFIG_KEYS = tuple(_CONFIG_FIELDS)


def coerce_config_value(key: str, raw: str):
    """Parse the textual value of one config key to its typed form."""
    if key not in _CONFIG_FIELDS:
        raise ValueError(f"unknown config key {key!r}")
    raw = raw.strip()
    if key == "deskew":
        if raw not in ("on", "off"):
            raise ValueError(f"deskew must be 'on' or 'off', got {raw!r}")
        return raw == "on"
    if key == "time_budget_ms":
        if raw.lower() in ("none", ""):
            return None
        value = float(raw)
        if value <= 0:
            raise ValueError("time_budget_ms must be positive")
        return value
    if key in ("n", "threads", "max_iterations"):
        return int(raw)
    return float(raw)


def parse_config(path) -> RunConfig:
    """Read a flat key = value file; unknown keys or bad values raise."""
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{path}:{lineno + 1}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        try:
            overrides[key] = coerce_config_value(key, raw)
        except ValueError as err:
            raise ValueError(f"{path}:{lineno + 1}: {err}") from None
    return replace(RunConfig(), **overrides)


# ------------------------------------------------------------ scan source


@dataclass
class ScanSource:
    """A directory of scans read in sorted filename order.

    kind is ``kitti_bin_dir`` (``*.bin``) or ``ply_dir`` (``*.ply``). Frame
    stamps come from a ``times.txt`` next to (or one level above) the scan
    files, one float per line; otherwise frame k is stamped k * scan_period.
    """

    kind: str
    path: Path
    scan_period: float = 0.1
    min_range: float = 1.0
    max_range: float = 120.0
    files: list = field(init=False, repr=False)

    _SUFFIX = {"kitti_bin_dir": ".bin", "ply_dir": ".ply"}

    def __post_init__(self):
        if self.kind not in self._SUFFIX:
            raise ValueError(f"unknown scan source kind {self.kind!r}")
        if not 0.0 <= self.min_range < self.max_range:
            raise ValueError(f"invalid range band [{self.min_range}, {self.max_range}]")
        if self.scan_period <= 0:
            raise ValueError("scan_period must be positive")
        self.path = Path(self.path)
        if not self.path.is_dir():
            raise FileNotFoundError(f"scan directory {self.path} does not exist")
        suffix = self._SUFFIX[self.kind]
        self.files = sorted(p for p in self.path.iterdir() if p.suffix == suffix)

    def __len__(self):
        return len(self.files)

    def stamps(self) -> list:
        for candidate in (self.path / "times.txt", self.path.parent / "times.txt"):
            if candidate.is_file():
                values = [float(tok) for tok in candidate.read_text().split()]
                if len(values) < len(self.files):
                    raise ValueError(
                        f"{candidate}: {len(values)} stamps for {len(self.files)} scans"
                    )
                return values[: len(self.files)]
        return [k * self.scan_period for k in range(len(self.files))]

    def read_scan(self, index: int) -> PointCloud:
        path = self.files[index]
        if self.kind == "kitti_bin_dir":
            return read_kitti_bin(path, self.min_range, self.max_range)
        return filter_range(read_ply(path), self.min_range, self.max_range)
