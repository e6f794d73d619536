"""Streamline and tractogram data model, track-file I/O and polyline geometry.

Streamlines are ``(N, 3)`` float64 arrays of coordinates in mm. Coordinates
are stored on disk as 32-bit little-endian floats and widened on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

MAGIC = "mrtrix tracks"
_SEP = np.full(3, np.nan, dtype="<f4")
_END = np.full(3, np.inf, dtype="<f4")


class TrackFileError(ValueError):
    """Raised for malformed, truncated or non-finite track files."""


def as_streamline(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"streamline must have shape (N, 3), got {pts.shape}")
    if len(pts) < 2:
        raise ValueError("streamline needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("streamline has non-finite coordinates")
    return pts


@dataclass
class Tractogram:
    """Ordered collection of streamlines on an isotropic voxel grid.

    The grid spans ``[0, grid_dims * voxel_size]`` mm along each axis. A
    tractogram without grid metadata (``grid_dims=None``) is allowed for
    coordinates that are no longer in scanner space, e.g. after normalization.
    Streamline ids are the list positions ``0..M-1``.
    """

    streamlines: list = field(default_factory=list)
    voxel_size: float = 1.0
    grid_dims: tuple | None = None

    def __post_init__(self):
        self.streamlines = [as_streamline(s) for s in self.streamlines]
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.grid_dims is not None:
            self.grid_dims = tuple(int(d) for d in self.grid_dims)
            if len(self.grid_dims) != 3 or min(self.grid_dims) < 1:
                raise ValueError(f"bad grid_dims {self.grid_dims}")
            for i, s in enumerate(self.streamlines):
                if not self.contains(s):
                    raise ValueError(f"streamline {i} leaves the grid")

    def __len__(self):
        return len(self.streamlines)

    def __getitem__(self, i):
        return self.streamlines[i]

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.grid_dims, dtype=np.float64) * self.voxel_size

    def contains(self, points) -> bool:
        if self.grid_dims is None:
            return True
        pts = np.asarray(points)
        return bool(np.all(pts >= 0.0) and np.all(pts <= self.extent))

    def subset(self, ids) -> "Tractogram":
        return Tractogram([self.streamlines[i] for i in ids], self.voxel_size, self.grid_dims)

    def lengths(self) -> np.ndarray:
        return np.array([arc_length(s) for s in self.streamlines])


# ---------------------------------------------------------------------------
# Track files


def _header_bytes(tractogram: Tractogram) -> bytes:
    lines = [MAGIC, "datatype: Float32LE", f"count: {len(tractogram)}"]
    lines.append(f"voxel_size: {tractogram.voxel_size!r}")
    if tractogram.grid_dims is not None:
        lines.append("grid_dims: " + ",".join(str(d) for d in tractogram.grid_dims))
    head = "\n".join(lines) + "\n"
    # the offset line counts its own digits
    offset = 0
    while True:
        text = head + f"file: . {offset}\nEND\n"
        if len(text.encode("ascii")) == offset:
            return text.encode("ascii")
        offset = len(text.encode("ascii"))


def save_track_file(tractogram: Tractogram, path) -> None:
    """Write ``tractogram`` as an MRtrix-style ``.tck`` container."""
    chunks = [_header_bytes(tractogram)]
    for s in tractogram.streamlines:
        chunks.append(np.asarray(s, dtype="<f4").tobytes())
        chunks.append(_SEP.tobytes())
    chunks.append(_END.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def _parse_header(raw: bytes) -> tuple[dict, int]:
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise TrackFileError("header is not terminated by END")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as e:
        raise TrackFileError("header is not ASCII") from e
    if lines[0].strip() != MAGIC:
        raise TrackFileError(f"bad magic line {lines[0]!r}")
    header = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if ":" not in line:
            raise TrackFileError(f"bad header line {line!r}")
        key, value = line.split(":", 1)
        header[key.strip()] = value.strip()
    return header, end + len(b"\nEND\n")


def load_track_file(path) -> Tractogram:
    """Read a ``.tck`` file written with 32-bit little-endian float triplets."""
    with open(path, "rb") as f:
        raw = f.read()
    header, _ = _parse_header(raw)
    if header.get("datatype") != "Float32LE":
        raise TrackFileError(f"unsupported datatype {header.get('datatype')!r}")
    try:
        dot, offset = header["file"].split()
        offset = int(offset)
    except (KeyError, ValueError) as e:
        raise TrackFileError("missing or malformed 'file' entry") from e
    if dot != "." or offset > len(raw):
        raise TrackFileError("bad data offset")

    nbytes = (len(raw) - offset) // 12 * 12
    body = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(-1, 3)
    is_end = np.all(np.isposinf(body), axis=1)
    if not is_end.any():
        raise TrackFileError("truncated file: no terminator")
    body = body[: int(np.argmax(is_end))]
    is_sep = np.all(np.isnan(body), axis=1)
    finite = np.all(np.isfinite(body), axis=1)
    if not np.all(finite | is_sep):
        raise TrackFileError("non-finite coordinate inside a streamline")
    if len(body) and not is_sep[-1]:
        raise TrackFileError("last streamline is not followed by a separator")

    streamlines = []
    start = 0
    for stop in np.flatnonzero(is_sep):
        pts = body[start:stop].astype(np.float64)
        if len(pts) < 2:
            raise TrackFileError(f"streamline {len(streamlines)} has fewer than 2 points")
        streamlines.append(pts)
        start = stop + 1

    if "count" in header and int(header["count"]) != len(streamlines):
        raise TrackFileError(
            f"header count {header['count']} != {len(streamlines)} streamlines in body")
    voxel_size = float(header.get("voxel_size", 1.0))
    if "grid_dims" in header:
        grid_dims = tuple(int(v) for v in header["grid_dims"].split(","))
    else:
        grid_dims = None
    return Tractogram(streamlines, voxel_size, grid_dims)


# ---------------------------------------------------------------------------
# Geometry


def arc_length(streamline) -> float:
    return float(np.sum(np.linalg.norm(np.diff(streamline, axis=0), axis=1)))


def resample(streamline, n_points: int) -> np.ndarray:
    """Resample to ``n_points`` equally spaced (in arc length) points.

    Uses linear interpolation along the polyline; the endpoints are copied
    exactly.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    pts = np.asarray(streamline, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    targets = np.linspace(0.0, cum[-1], n_points)
    seg = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(pts) - 2)
    span = cum[seg + 1] - cum[seg]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(span > 0, (targets - cum[seg]) / span, 0.0)
    out = pts[seg] + t[:, None] * (pts[seg + 1] - pts[seg])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def point_segment_distance(points, a, b) -> np.ndarray:
    """Euclidean distance of each of ``points`` to the closed segment ``ab``."""
    points = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def compress(streamline, tolerance_mm: float) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification in 3-D.

    Distances are measured to the closed chord segment, so every dropped
    vertex is within ``tolerance_mm`` of the returned polyline.
    """
    if tolerance_mm <= 0:
        raise ValueError("tolerance_mm must be positive")
    pts = np.asarray(streamline, dtype=np.float64)
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = point_segment_distance(pts[lo + 1:hi], pts[lo], pts[hi])
        i = int(np.argmax(d))
        if d[i] > tolerance_mm:
            mid = lo + 1 + i
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return pts[keep]


def polyline_distance(points, polyline) -> np.ndarray:
    """Distance from each point to the nearest segment of ``polyline``."""
    points = np.atleast_2d(points)
    best = np.full(len(points), np.inf)
    for a, b in zip(polyline[:-1], polyline[1:]):
        best = np.minimum(best, point_segment_distance(points, a, b))
    return best


# ---------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class NormalizationRecord:
    """Per-axis min/max of the coordinates a normalization was fitted on."""

    minimum: tuple
    maximum: tuple

    def apply(self, points) -> np.ndarray:
        lo = np.asarray(self.minimum)
        hi = np.asarray(self.maximum)
        span = hi - lo
        pts = np.asarray(points, dtype=np.float64)
        out = np.zeros_like(pts)
        ok = span > 0
        out[..., ok] = 2.0 * (pts[..., ok] - lo[ok]) / span[ok] - 1.0
        return out

    def invert(self, points) -> np.ndarray:
        lo = np.asarray(self.minimum)
        hi = np.asarray(self.maximum)
        return lo + (np.asarray(points, dtype=np.float64) + 1.0) * 0.5 * (hi - lo)

    @classmethod
    def fit(cls, streamlines) -> "NormalizationRecord":
        allpts = np.concatenate([np.asarray(s) for s in streamlines])
        return cls(tuple(allpts.min(axis=0).tolist()), tuple(allpts.max(axis=0).tolist()))


def normalize_coordinates(tractogram: Tractogram) -> tuple[Tractogram, NormalizationRecord]:
    """Map each axis affinely from its [min, max] onto [-1, 1].

    Degenerate axes (min == max) map to 0. The returned tractogram carries no
    grid metadata.
    """
    if len(tractogram) == 0:
        raise ValueError("cannot normalize an empty tractogram")
    record = NormalizationRecord.fit(tractogram.streamlines)
    out = Tractogram([record.apply(s) for s in tractogram.streamlines], 1.0, None)
    return out, record


def denormalize_coordinates(tractogram: Tractogram, record: NormalizationRecord,
                            voxel_size: float = 1.0, grid_dims=None) -> Tractogram:
    return Tractogram([record.invert(s) for s in tractogram.streamlines], voxel_size, grid_dims)


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
