"""Feature tracks and three-view feature triples.

Tracks are stored in ``tracks.csv`` files with header ``frame,track_id,u,v``.
View 1 of a triple is the newest frame, view 3 the oldest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

TRACK_HEADER = ["frame", "track_id", "u", "v"]


@dataclass(frozen=True)
class FeatureTriple:
    track_id: int
    uv1: np.ndarray
    uv2: np.ndarray
    uv3: np.ndarray
    age: int = 3  # frames the track has been observed up to view 1

    def __post_init__(self):
        for name in ("uv1", "uv2", "uv3"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(2))

    def bearing(self, intrinsics) -> np.ndarray:
        """Unit viewing ray of the view-1 observation in the camera frame."""
        return intrinsics.bearing(self.uv1)


@dataclass
class FeatureTrack:
    track_id: int
    observations: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def frames(self) -> list[int]:
        return sorted(self.observations)

    def __len__(self) -> int:
        return len(self.observations)


class TrackSet:
    """Tracks indexed by id, with a per-frame index for triple lookup."""

    def __init__(self, tracks: dict[int, FeatureTrack] | None = None):
        self.tracks: dict[int, FeatureTrack] = dict(tracks or {})
        self._by_frame: dict[int, list[int]] | None = None

    def __len__(self) -> int:
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks.values())

    def __getitem__(self, track_id: int) -> FeatureTrack:
        return self.tracks[track_id]

    @classmethod
    def from_rows(cls, frames, track_ids, uv) -> "TrackSet":
        """Build from parallel columns; duplicate (frame, track_id) is an error."""
        tracks: dict[int, FeatureTrack] = {}
        for f, tid, p in zip(frames, track_ids, uv):
            f, tid = int(f), int(tid)
            tr = tracks.setdefault(tid, FeatureTrack(tid))
            if f in tr.observations:
                raise DataFormatError(f"duplicate observation for frame {f}, track {tid}")
            tr.observations[f] = np.asarray(p, dtype=float)
        # observations ordered by frame
        for tr in tracks.values():
            tr.observations = dict(sorted(tr.observations.items()))
        return cls(dict(sorted(tracks.items())))

    def _index(self) -> dict[int, list[int]]:
        if self._by_frame is None:
            idx: dict[int, list[int]] = {}
            for tid, tr in self.tracks.items():
                for f in tr.observations:
                    idx.setdefault(f, []).append(tid)
            self._by_frame = idx
        return self._by_frame

    def frames(self) -> list[int]:
        return sorted(self._index())

    def observations_at(self, frame: int) -> list[tuple[int, np.ndarray]]:
        return [(tid, self.tracks[tid].observations[frame]) for tid in self._index().get(frame, [])]

    def triples_at(self, frame: int) -> list[FeatureTriple]:
        """Tracks seen in ``frame``, ``frame-1`` and ``frame-2``."""
        out = []
        for tid in self._index().get(frame, []):
            obs = self.tracks[tid].observations
            if frame - 1 in obs and frame - 2 in obs:
                age = sum(1 for f in obs if f <= frame)
                out.append(FeatureTriple(tid, obs[frame], obs[frame - 1], obs[frame - 2], age))
        return out

    def to_rows(self):
        rows = []
        for tid, tr in self.tracks.items():
            for f, p in tr.observations.items():
                rows.append((f, tid, float(p[0]), float(p[1])))
        rows.sort()
        return rows


def write_tracks_csv(tracks: TrackSet, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_HEADER)
        for f, tid, u, v in tracks.to_rows():
            w.writerow([f, tid, repr(u), repr(v)])


def read_tracks_csv(path) -> TrackSet:
    """Parse ``frame,track_id,u,v`` rows; an empty file yields an empty set."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"tracks file not found: {path}")
    frames, ids, uv = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return TrackSet()
        if [h.strip() for h in header] != TRACK_HEADER:
            raise DataFormatError(f"{path}: expected header {','.join(TRACK_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                frames.append(int(row[0]))
                ids.append(int(row[1]))
                uv.append((float(row[2]), float(row[3])))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return TrackSet.from_rows(frames, ids, uv)
