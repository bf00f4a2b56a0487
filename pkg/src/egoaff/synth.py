"""Deterministic synthetic kitchens with known ground-truth task regions.

A scene is a room with a handful of appearance-tagged stations.  Tasks are
pinned near stations; the camera trajectory walks from task to task at
0.5 m/s and lingers near each task's mean (facing its station, drifting at
well under the velocity-filter threshold) for the task's annotated span.
Every quantity derives from one seed, so any downstream failure replays
exactly.

Generated videos use the dataset directory format verbatim, and the mock
caches from `encoders` are materialized in the cache file format, so the
synthetic suite exercises the same ingestion paths as real recordings.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .dataset import EgoVideo, Frame, TaskSpan, save_video
from .encoders import (MOCK_DIM, EmbeddingCache, MockTextEncoder, MockVisionEncoder,
                       save_cache)
from .errors import GenerationError
from .geometry import GroundGaussian, Pose
from .seeding import stable_rng, worker_count

STATION_MIN_SPACING = 1.0  # meters
WALL_MARGIN = 0.5
TRANSIT_SPEED = 0.5  # m/s; comfortably above the velocity filter
LINGER_SPEED = 0.04  # m/s drift while performing a task
FPS = 10.0

_NOUNS = ["stove", "sink", "fridge", "counter", "cabinet", "table", "shelf", "pantry"]
_VERBS = ["clean", "prepare", "stir", "rinse", "chop", "heat", "organize", "wipe"]
_OBJECTS = ["pan", "bowl", "dishes", "kettle", "board", "tray", "cups", "pot"]
_ACTIVITIES = ["noodles", "omelette", "salad", "scrambled eggs", "latte", "stew"]


@dataclass(eq=False)
class SynthStation:
    position: np.ndarray  # (2,) ground-plane meters
    appearance_seed: int
    name: str


@dataclass(eq=False)
class SynthTask:
    task_id: str
    station_index: int
    region: GroundGaussian  # true region; mean z is the camera height
    description: str
    rephrasings: list[str]

    def phrases(self) -> list[str]:
        return [self.description, *self.rephrasings]


@dataclass(eq=False)
class SynthScene:
    scene_id: str
    activity: str
    room: tuple[float, float]
    stations: list[SynthStation]
    tasks: list[SynthTask]
    camera_height: float
    seed: int


def _sample_stations(rng: np.random.Generator, n: int, room) -> np.ndarray:
    w, h = room
    if w <= 2 * WALL_MARGIN or h <= 2 * WALL_MARGIN:
        raise GenerationError(f"room {room} too small for wall margin {WALL_MARGIN}")
    placed: list[np.ndarray] = []
    attempts = 0
    while len(placed) < n:
        attempts += 1
        if attempts > 10_000:
            raise GenerationError(
                f"could not place {n} stations {STATION_MIN_SPACING} m apart in a {w}x{h} room")
        cand = np.array([
            rng.uniform(WALL_MARGIN, w - WALL_MARGIN),
            rng.uniform(WALL_MARGIN, h - WALL_MARGIN),
        ])
        if all(np.linalg.norm(cand - p) >= STATION_MIN_SPACING for p in placed):
            placed.append(cand)
    return np.array(placed)


def _linger(rng: np.random.Generator, mean_xy: np.ndarray, sigma: float, n_frames: int):
    """Slow drift around the task mean, confined to the 1-sigma disk."""
    step_max = LINGER_SPEED / FPS
    pos = mean_xy + rng.uniform(-0.01, 0.01, size=2)
    out = []
    for _ in range(n_frames):
        out.append(pos.copy())
        step = rng.uniform(-step_max, step_max, size=2)
        cand = pos + step
        if np.linalg.norm(cand - mean_xy) > sigma:
            cand = pos - step
        pos = cand
    return out


def generate_scene(seed: int, n_stations: int = 5, n_tasks: int = 30,
                   room: tuple[float, float] = (4.0, 5.0),
                   scene_id: str | None = None, activity: str | None = None,
                   n_rephrasings: int = 4) -> tuple[SynthScene, EgoVideo]:
    """Build one scene and its annotated localized video."""
    if n_stations < 1 or n_tasks < 1:
        raise GenerationError("need at least one station and one task")
    scene_id = scene_id if scene_id is not None else f"kitchen{seed:04d}"
    activity = activity if activity is not None else _ACTIVITIES[seed % len(_ACTIVITIES)]
    rng = stable_rng(seed, "scene")
    positions = _sample_stations(rng, n_stations, room)
    stations = [
        SynthStation(positions[i], int(stable_rng(seed, "appearance-seed", i).integers(2 ** 31)),
                     _NOUNS[i % len(_NOUNS)])
        for i in range(n_stations)
    ]
    camera_height = float(rng.uniform(1.4, 1.7))

    tasks: list[SynthTask] = []
    for k in range(n_tasks):
        s = k % n_stations
        angle = rng.uniform(0.0, 2.0 * np.pi)
        radius = 0.3 * np.sqrt(rng.uniform())  # uniform over the 0.3 m disk
        mean_xy = stations[s].position + radius * np.array([np.cos(angle), np.sin(angle)])
        mean_xy = np.clip(mean_xy, [0.2, 0.2], [room[0] - 0.2, room[1] - 0.2])
        sigma = float(rng.uniform(0.1, 0.4))
        verb, obj, noun = _VERBS[k % len(_VERBS)], _OBJECTS[(k // len(_VERBS)) % len(_OBJECTS)], stations[s].name
        tag = f"[{scene_id}:{k:02d}]"
        description = f"{verb} the {obj} at the {noun} {tag}"
        rephrasings = [
            f"please {verb} the {obj} by the {noun} {tag}",
            f"{verb} that {obj} near the {noun} {tag}",
            f"go {verb} the {obj} at the {noun} {tag}",
            f"time to {verb} the {obj} over at the {noun} {tag}",
        ][:n_rephrasings]
        tasks.append(SynthTask(
            task_id=f"{scene_id}:t{k:03d}",
            station_index=s,
            region=GroundGaussian(np.array([*mean_xy, camera_height]), sigma),
            description=description,
            rephrasings=rephrasings,
        ))

    # trajectory: seeded visiting order, transit legs, then a lingering span
    order = rng.permutation(n_tasks)
    xy: list[np.ndarray] = []
    yaw: list[float] = []
    spans: dict[int, tuple[int, int]] = {}
    pos = tasks[int(order[0])].region.mean[:2].copy()
    for k in order:
        task = tasks[int(k)]
        target = task.region.mean[:2]
        station = stations[task.station_index].position
        dist = float(np.linalg.norm(target - pos))
        if dist > 1e-9 and xy:  # transit leg at TRANSIT_SPEED
            heading = float(np.arctan2(target[1] - pos[1], target[0] - pos[0]))
            step = TRANSIT_SPEED / FPS
            n_steps = int(np.ceil(dist / step))
            for j in range(1, n_steps + 1):
                frac = min(j * step / dist, 1.0)
                xy.append(pos + frac * (target - pos))
                yaw.append(heading)
            pos = target.copy()
        n_linger = int(round(FPS * rng.uniform(2.0, 4.0)))
        start_index = len(xy)
        for p in _linger(rng, target, task.region.sigma, n_linger):
            xy.append(p)
            look = station - p
            if np.linalg.norm(look) < 1e-9:
                look = np.array([1.0, 0.0])
            yaw.append(float(np.arctan2(look[1], look[0]) + rng.uniform(-0.05, 0.05)))
        spans[int(k)] = (start_index, len(xy) - 1)
        pos = xy[-1].copy()

    frames = []
    for i, (p, y) in enumerate(zip(xy, yaw)):
        pitch = float(rng.uniform(-0.12, 0.12))
        roll = float(rng.uniform(-0.12, 0.12))
        q = geometry.quat_from_euler_zyx(y, pitch, roll)
        frames.append(Frame(
            index=i,
            timestamp=i / FPS,
            pose=Pose(np.array([p[0], p[1], camera_height]), q),
            image_key=f"{scene_id}/f{i:05d}",
        ))
    task_spans = [
        TaskSpan(tasks[k].task_id, tasks[k].description, list(tasks[k].rephrasings),
                 spans[k][0], spans[k][1])
        for k in range(n_tasks)
    ]
    scene = SynthScene(scene_id, activity, room, stations, tasks, camera_height, seed)
    video = EgoVideo(scene_id, activity, FPS, frames, task_spans)
    return scene, video


@dataclass(eq=False)
class SuiteBundle:
    scenes: list[SynthScene]
    videos: list[EgoVideo]
    vision_cache: EmbeddingCache
    text_cache: EmbeddingCache
    vision_encoder: MockVisionEncoder
    text_encoder: MockTextEncoder
    out_dir: str | None = None
    video_dirs: list[str] = field(default_factory=list)


def build_mock_caches(scenes: list[SynthScene], videos: list[EgoVideo],
                      seed: int, dim: int = MOCK_DIM) -> tuple[EmbeddingCache, EmbeddingCache,
                                                               MockVisionEncoder, MockTextEncoder]:
    """One shared mock backbone across the whole suite."""
    vision_encoder = MockVisionEncoder(dim=dim, seed=seed)
    text_encoder = MockTextEncoder(dim=dim, seed=seed)
    vision_entries: dict[str, np.ndarray] = {}
    for scene, video in zip(scenes, videos):
        station_list = [(st.position, st.appearance_seed) for st in scene.stations]
        for frame in video.frames:
            viewer = geometry.gravity_align(frame.pose)
            vision_entries[frame.image_key] = vision_encoder.encode_view(
                station_list, viewer.position[0], viewer.position[1], viewer.yaw)
        for task in scene.tasks:
            anchor = vision_encoder.appearance_anchor(
                scene.stations[task.station_index].appearance_seed)
            text_encoder.register_task(task.task_id, task.phrases(), anchor=anchor)
    return (EmbeddingCache(dim, vision_entries), text_encoder.as_cache(),
            vision_encoder, text_encoder)


def generate_suite(seed: int, n_scenes: int = 6, out_dir: str | None = None,
                   dim: int = MOCK_DIM, n_stations: int = 5, n_tasks: int = 30,
                   room: tuple[float, float] = (4.0, 5.0)) -> SuiteBundle:
    """Generate scenes, build shared mock caches, optionally write everything."""
    if n_scenes < 1:
        raise GenerationError("need at least one scene")

    def one(i: int):
        scene_seed = int(stable_rng(seed, "scene-seed", i).integers(2 ** 31))
        return generate_scene(scene_seed, n_stations=n_stations, n_tasks=n_tasks, room=room,
                              scene_id=f"kitchen{i:02d}",
                              activity=_ACTIVITIES[i % len(_ACTIVITIES)])

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, range(n_scenes)))
    scenes = [r[0] for r in results]
    videos = [r[1] for r in results]
    vision_cache, text_cache, vision_encoder, text_encoder = build_mock_caches(
        scenes, videos, seed, dim)

    bundle = SuiteBundle(scenes, videos, vision_cache, text_cache,
                         vision_encoder, text_encoder, out_dir)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for scene, video in zip(scenes, videos):
            video_dir = os.path.join(out_dir, scene.scene_id)
            save_video(video, video_dir)
            with open(os.path.join(video_dir, "truth.jsonl"), "w", encoding="utf-8") as fh:
                for task in scene.tasks:
                    fh.write(json.dumps({
                        "id": task.task_id,
                        "station": task.station_index,
                        "mean": [float(v) for v in task.region.mean],
                        "sigma": task.region.sigma,
                    }) + "\n")
            bundle.video_dirs.append(video_dir)
        save_cache(vision_cache, os.path.join(out_dir, "vision.cache"))
        save_cache(text_cache, os.path.join(out_dir, "text.cache"))
    return bundle
