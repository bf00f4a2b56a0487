"""Annotated localized egocentric videos: ingestion, filtering, regions, splits.

On-disk layout, one directory per video:

    video.meta    key=value lines: scene_id, activity, frame_rate_hz
    frames.jsonl  {"i": int, "t": sec, "p": [x,y,z], "q": [w,x,y,z], "img": key}
    tasks.jsonl   {"id": str, "desc": str, "rephrasings": [...], "start": int, "end": int}

All floats are decimal, meters and seconds, z-up world frame.  Body x is the
camera forward axis (see geometry).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import geometry
from .errors import AnnotationError, DegenerateTimingError, IngestionError
from .geometry import GroundGaussian, Pose
from .seeding import stable_rng

V_MAX_DEFAULT = 0.1  # m/s; frames faster than this are dropped from region fits


@dataclass(eq=False)
class Frame:
    index: int
    timestamp: float
    pose: Pose
    image_key: str


@dataclass(eq=False)
class TaskSpan:
    task_id: str
    description: str
    rephrasings: list[str]
    start_frame: int
    end_frame: int

    def phrases(self) -> list[str]:
        """Canonical description first, then every rephrasing."""
        return [self.description, *self.rephrasings]


@dataclass(eq=False)
class EgoVideo:
    scene_id: str
    activity: str
    frame_rate_hz: float
    frames: list[Frame]
    tasks: list[TaskSpan]

    def task(self, task_id: str) -> TaskSpan:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def span_frame_indices(self, task: TaskSpan) -> list[int]:
        return [i for i, f in enumerate(self.frames) if task.start_frame <= f.index <= task.end_frame]


@dataclass(eq=False)
class TrainingPair:
    image_frame_index: int
    task_id: str
    target_region_ego: GroundGaussian


class TaskRegions(NamedTuple):
    regions: dict[str, GroundGaussian]
    fallback_task_ids: set[str]


def _parse_meta(path: str) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise IngestionError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def _load_jsonl(path: str) -> list[tuple[int, dict]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    return records


def load_video(path: str) -> EgoVideo:
    """Load and fully validate one video directory."""
    meta_path = os.path.join(path, "video.meta")
    frames_path = os.path.join(path, "frames.jsonl")
    tasks_path = os.path.join(path, "tasks.jsonl")
    for p in (meta_path, frames_path, tasks_path):
        if not os.path.isfile(p):
            raise IngestionError(f"{p}: missing file")

    meta = _parse_meta(meta_path)
    for key in ("scene_id", "activity", "frame_rate_hz"):
        if key not in meta:
            raise IngestionError(f"{meta_path}: missing key {key!r}")
    if not meta["scene_id"]:
        raise IngestionError(f"{meta_path}: scene_id must be nonempty")
    try:
        frame_rate = float(meta["frame_rate_hz"])
    except ValueError:
        raise IngestionError(f"{meta_path}: frame_rate_hz is not a number") from None

    frames: list[Frame] = []
    for lineno, rec in _load_jsonl(frames_path):
        try:
            frame = Frame(
                index=int(rec["i"]),
                timestamp=float(rec["t"]),
                pose=Pose(np.array(rec["p"], dtype=np.float64), np.array(rec["q"], dtype=np.float64)),
                image_key=str(rec["img"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{frames_path}:{lineno}: bad frame record ({exc})") from exc
        if frame.pose.position.shape != (3,) or frame.pose.orientation.shape != (4,):
            raise IngestionError(f"{frames_path}:{lineno}: p must be length 3 and q length 4")
        qn = float(np.linalg.norm(frame.pose.orientation))
        if abs(qn - 1.0) > 1e-6:
            raise IngestionError(f"{frames_path}:{lineno}: quaternion norm {qn:.9f} not within 1e-6 of 1")
        if frames:
            if frame.index <= frames[-1].index:
                raise IngestionError(f"{frames_path}:{lineno}: frame indices must be strictly increasing")
            if frame.timestamp < frames[-1].timestamp:
                raise IngestionError(f"{frames_path}:{lineno}: timestamps must be non-decreasing")
        frames.append(frame)
    if not frames:
        raise IngestionError(f"{frames_path}: no frames")

    lo, hi = frames[0].index, frames[-1].index
    tasks: list[TaskSpan] = []
    seen_ids = set()
    for lineno, rec in _load_jsonl(tasks_path):
        try:
            task = TaskSpan(
                task_id=str(rec["id"]),
                description=str(rec["desc"]),
                rephrasings=[str(r) for r in rec.get("rephrasings", [])],
                start_frame=int(rec["start"]),
                end_frame=int(rec["end"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{tasks_path}:{lineno}: bad task record ({exc})") from exc
        if task.task_id in seen_ids:
            raise IngestionError(f"{tasks_path}:{lineno}: duplicate task id {task.task_id!r}")
        seen_ids.add(task.task_id)
        if task.start_frame > task.end_frame:
            raise IngestionError(f"{tasks_path}:{lineno}: start {task.start_frame} > end {task.end_frame}")
        if task.start_frame < lo or task.end_frame > hi:
            raise IngestionError(
                f"{tasks_path}:{lineno}: span [{task.start_frame}, {task.end_frame}] "
                f"outside frame range [{lo}, {hi}]"
            )
        tasks.append(task)

    return EgoVideo(meta["scene_id"], meta["activity"], frame_rate, frames, tasks)


def save_video(video: EgoVideo, path: str) -> None:
    """Write a video directory in the documented format."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "video.meta"), "w", encoding="utf-8") as fh:
        fh.write(f"scene_id={video.scene_id}\n")
        fh.write(f"activity={video.activity}\n")
        fh.write(f"frame_rate_hz={video.frame_rate_hz!r}\n")
    with open(os.path.join(path, "frames.jsonl"), "w", encoding="utf-8") as fh:
        for f in video.frames:
            rec = {
                "i": f.index,
                "t": f.timestamp,
                "p": [float(v) for v in f.pose.position],
                "q": [float(v) for v in f.pose.orientation],
                "img": f.image_key,
            }
            fh.write(json.dumps(rec) + "\n")
    with open(os.path.join(path, "tasks.jsonl"), "w", encoding="utf-8") as fh:
        for t in video.tasks:
            rec = {
                "id": t.task_id,
                "desc": t.description,
                "rephrasings": t.rephrasings,
                "start": t.start_frame,
                "end": t.end_frame,
            }
            fh.write(json.dumps(rec) + "\n")


def velocity_filter(video: EgoVideo, v_max: float = V_MAX_DEFAULT) -> np.ndarray:
    """Boolean mask of frames whose camera speed stays below v_max.

    Interior frames use the central difference ||p[i+1]-p[i-1]|| / (t[i+1]-t[i-1]);
    boundary frames fall back to one-sided differences.  A single-frame video
    passes outright.
    """
    n = len(video.frames)
    if n == 0:
        raise DegenerateTimingError("velocity filter needs at least one frame")
    if n == 1:
        return np.array([True])
    t = np.array([f.timestamp for f in video.frames])
    if np.any(np.diff(t) == 0.0):
        i = int(np.flatnonzero(np.diff(t) == 0.0)[0])
        raise DegenerateTimingError(f"duplicate timestamps on adjacent frames {i} and {i + 1}")
    p = np.array([f.pose.position for f in video.frames])
    speed = np.empty(n)
    speed[0] = np.linalg.norm(p[1] - p[0]) / (t[1] - t[0])
    speed[-1] = np.linalg.norm(p[-1] - p[-2]) / (t[-1] - t[-2])
    if n > 2:
        speed[1:-1] = np.linalg.norm(p[2:] - p[:-2], axis=1) / (t[2:] - t[:-2])
    return speed < v_max


def compute_task_regions(video: EgoVideo, v_max: float = V_MAX_DEFAULT,
                         mask: np.ndarray | None = None) -> TaskRegions:
    """Fit one region per task from the velocity-passing frames of its span.

    Tasks whose spans contain no passing frame fall back to all in-span frames
    and are reported in fallback_task_ids.
    """
    if mask is None:
        mask = velocity_filter(video, v_max)
    regions: dict[str, GroundGaussian] = {}
    fallback: set[str] = set()
    for task in video.tasks:
        span = video.span_frame_indices(task)
        if not span:
            raise AnnotationError(f"task {task.task_id!r} has an empty span")
        passing = [i for i in span if mask[i]]
        if not passing:
            passing = span
            fallback.add(task.task_id)
        positions = [video.frames[i].pose.position for i in passing]
        regions[task.task_id] = geometry.fit_task_region(positions)
    return TaskRegions(regions, fallback)


def _split_ids(ids: list[str], ratio: float, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    perm = rng.permutation(len(ids))
    n_train = math.ceil(ratio * len(ids))
    train = [ids[i] for i in perm[:n_train]]
    test = [ids[i] for i in perm[n_train:]]
    return train, test


def split_tasks(videos: list[EgoVideo], ratio: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    """Seeded per-video task split; first ceil(ratio*n) of a uniform shuffle train."""
    if not 0.0 < ratio < 1.0:
        raise AnnotationError(f"split ratio must lie in (0,1), got {ratio}")
    train_all: list[str] = []
    test_all: list[str] = []
    for video in videos:
        rng = stable_rng(seed, "task-split", video.scene_id)
        train, test = _split_ids([t.task_id for t in video.tasks], ratio, rng)
        train_all.extend(train)
        test_all.extend(test)
    return train_all, test_all


def split_frames(video: EgoVideo, holdout: float = 0.1, seed: int = 0) -> tuple[list[int], list[int]]:
    """Hold out one contiguous seeded block of ceil(holdout*n) frame positions."""
    if not 0.0 < holdout < 1.0:
        raise AnnotationError(f"holdout fraction must lie in (0,1), got {holdout}")
    n = len(video.frames)
    block = math.ceil(holdout * n)
    rng = stable_rng(seed, "frame-split", video.scene_id)
    start = int(rng.integers(0, n - block + 1))
    test = list(range(start, start + block))
    train = list(range(0, start)) + list(range(start + block, n))
    return train, test


def make_pairs(video: EgoVideo, task_ids: list[str], frame_indices: list[int],
               regions: dict[str, GroundGaussian]) -> list[TrainingPair]:
    """Cross product of allowed frames with allowed tasks, targets pre-rectified.

    Frames pair with every task, including tasks whose span lies elsewhere in
    time; the target is the task's global region expressed in the frame's
    gravity-aligned pose.
    """
    wanted = [t for t in video.tasks if t.task_id in set(task_ids)]
    pairs: list[TrainingPair] = []
    for fi in frame_indices:
        viewer = geometry.gravity_align(video.frames[fi].pose)
        for task in wanted:
            target = geometry.rectify(regions[task.task_id], viewer)
            pairs.append(TrainingPair(fi, task.task_id, target))
    return pairs


@dataclass(eq=False)
class VideoArtifacts:
    """Everything the training and evaluation stages need from one video."""

    video: EgoVideo
    mask: np.ndarray
    regions: dict[str, GroundGaussian]
    fallback_task_ids: set[str]
    train_task_ids: list[str]
    test_task_ids: list[str]
    train_frames: list[int]  # velocity-passing frames outside the holdout block
    test_frames: list[int]  # velocity-passing frames inside the holdout block
    train_pairs: list[TrainingPair] = field(default_factory=list)


def prepare_video(video: EgoVideo, seed: int = 0, ratio: float = 0.8,
                  holdout: float = 0.1, v_max: float = V_MAX_DEFAULT) -> VideoArtifacts:
    """Run the full preprocessing chain for one video."""
    mask = velocity_filter(video, v_max)
    regions, fallback = compute_task_regions(video, v_max, mask=mask)
    train_tasks, test_tasks = split_tasks([video], ratio, seed)
    train_all, test_all = split_frames(video, holdout, seed)
    train_frames = [i for i in train_all if mask[i]]
    test_frames = [i for i in test_all if mask[i]]
    pairs = make_pairs(video, train_tasks, train_frames, regions)
    return VideoArtifacts(video, mask, regions, fallback, train_tasks, test_tasks,
                          train_frames, test_frames, pairs)


def discover_videos(root: str) -> list[str]:
    """Subdirectories of root that look like video directories, sorted."""
    out = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if os.path.isdir(d) and os.path.isfile(os.path.join(d, "video.meta")):
            out.append(d)
    return out
