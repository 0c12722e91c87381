"""Short-term track assembly by greedy nearest-pair association.

Per frame, (track, pose) pairs are matched smallest-anchor-distance first
among pairs below the gating distance; unmatched poses start new tracks and
tracks silent for more than max_gap frames are retired. Ties break toward
the lower track id, then the lower pose index, so output is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .core import FrameDetections, PatchpipeError, Pose, Track, point_distance
from .formats import AssayConfig


class TrackingError(PatchpipeError, ValueError):
    """Out-of-order frame fed to the tracker."""


@dataclass(frozen=True)
class TrackerParams:
    gate_px: float = 80.0
    max_gap_frames: int = 15

    @classmethod
    def from_config(cls, cfg: AssayConfig) -> "TrackerParams":
        return cls(gate_px=cfg.track_gate_px, max_gap_frames=cfg.track_max_gap_frames)


@dataclass
class _ActiveTrack:
    track_id: int
    entries: list[tuple[int, Pose]]
    last_frame: int


class Tracker:
    """Single-owner mutable tracker state; feed frames in order via step()."""

    def __init__(self, params: TrackerParams = TrackerParams()) -> None:
        self.params = params
        self.next_track_id = 0
        self._active: list[_ActiveTrack] = []
        self._finished: list[_ActiveTrack] = []
        self._last_frame_index = -1

    def step(self, frame: FrameDetections) -> list[int]:
        """Assign the frame's poses to tracks; returns one track id per pose."""
        if frame.frame_index <= self._last_frame_index:
            raise TrackingError(
                f"frame index {frame.frame_index} not greater than previous "
                f"{self._last_frame_index}"
            )
        self._last_frame_index = frame.frame_index
        self._retire(frame.frame_index)

        anchors = [pose.anchor() for pose in frame.poses]
        candidates: list[tuple[float, int, int]] = []
        for t_idx, track in enumerate(self._active):
            tail = track.entries[-1][1].anchor()
            for p_idx, anchor in enumerate(anchors):
                dist = point_distance(tail, anchor)
                if dist <= self.params.gate_px:
                    candidates.append((dist, track.track_id, p_idx, t_idx))
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))

        assignments = [-1] * len(frame.poses)
        used_tracks: set[int] = set()
        for dist, track_id, p_idx, t_idx in candidates:
            if assignments[p_idx] != -1 or t_idx in used_tracks:
                continue
            used_tracks.add(t_idx)
            assignments[p_idx] = track_id
            track = self._active[t_idx]
            track.entries.append((frame.frame_index, frame.poses[p_idx]))
            track.last_frame = frame.frame_index
        for p_idx, pose in enumerate(frame.poses):
            if assignments[p_idx] != -1:
                continue
            track = _ActiveTrack(
                track_id=self.next_track_id,
                entries=[(frame.frame_index, pose)],
                last_frame=frame.frame_index,
            )
            self.next_track_id += 1
            self._active.append(track)
            assignments[p_idx] = track.track_id
        return assignments

    def _retire(self, frame_index: int) -> None:
        # silent frames = frame_index - last_frame - 1; retire when > max_gap
        still_active = []
        for track in self._active:
            if frame_index - track.last_frame - 1 > self.params.max_gap_frames:
                self._finished.append(track)
            else:
                still_active.append(track)
        self._active = still_active

    @property
    def active_count(self) -> int:
        return len(self._active)

    def finish(self) -> list[Track]:
        """All tracks seen so far, sorted by track id."""
        everything = self._finished + self._active
        everything.sort(key=lambda t: t.track_id)
        return [Track(track_id=t.track_id, entries=tuple(t.entries)) for t in everything]


def run_tracker(
    frames: Iterable[FrameDetections], params: TrackerParams = TrackerParams()
) -> list[Track]:
    """Track a whole frame-ordered stream; every input pose lands in exactly one track."""
    tracker = Tracker(params)
    for frame in frames:
        tracker.step(frame)
    return tracker.finish()
