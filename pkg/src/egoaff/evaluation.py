"""Evaluation protocols: localization error, grounding accuracy, rephrasing
stability, and the Welch t-test used to compare error populations.

Localization is scored in the egocentric frame of each query image.  Baseline
predictions arrive in the world frame and are rectified into the image frame
before scoring; the region distance is invariant under that rigid transform,
so both predictors are scored on identical footing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import stdtr

from . import geometry
from .baseline import SceneIndex, baseline_ground, baseline_predict
from .dataset import VideoArtifacts
from .errors import ConfigError, DegenerateSampleError, EmptyEvalError
from .geometry import GravityAlignedPose, GroundGaussian
from .model import Checkpoint
from .seeding import stable_rng

REGIMES = ("unseen-both", "unseen-tasks", "unseen-images")


@dataclass(eq=False)
class EvalPair:
    scene_id: str
    frame_index: int
    image_key: str
    viewer: GravityAlignedPose
    task_id: str
    query: str
    target_ego: GroundGaussian
    target_global: GroundGaussian


@dataclass
class EvalRow:
    scene_id: str
    regime: str
    mean: float
    std: float
    n: int


# A predictor maps one EvalPair to an egocentric GroundGaussian.
Predictor = Callable[[EvalPair], GroundGaussian]


def build_eval_pairs(art: VideoArtifacts, regime: str) -> list[EvalPair]:
    """Pairs for one regime: which of (tasks, images) were unseen in training.

    unseen-both    test tasks x test frames
    unseen-tasks   test tasks x train frames (seen images)
    unseen-images  train tasks x test frames (seen tasks)
    """
    if regime == "unseen-both":
        task_ids, frames = art.test_task_ids, art.test_frames
    elif regime == "unseen-tasks":
        task_ids, frames = art.test_task_ids, art.train_frames
    elif regime == "unseen-images":
        task_ids, frames = art.train_task_ids, art.test_frames
    else:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    tasks = [t for t in art.video.tasks if t.task_id in set(task_ids)]
    pairs = []
    for fi in frames:
        frame = art.video.frames[fi]
        viewer = geometry.gravity_align(frame.pose)
        for task in tasks:
            target_global = art.regions[task.task_id]
            pairs.append(EvalPair(
                scene_id=art.video.scene_id,
                frame_index=fi,
                image_key=frame.image_key,
                viewer=viewer,
                task_id=task.task_id,
                query=task.description,
                target_ego=geometry.rectify(target_global, viewer),
                target_global=target_global,
            ))
    return pairs


def model_predictor(checkpoint: Checkpoint, vision_cache, text_source) -> Predictor:
    def fn(pair: EvalPair) -> GroundGaussian:
        return checkpoint.predict_region(vision_cache.get(pair.image_key),
                                         text_source.get(pair.query))
    return fn


def baseline_predictor(indices: dict[str, SceneIndex], text_source) -> Predictor:
    """Whole-scene retrieval, rectified into the query image's frame."""
    def fn(pair: EvalPair) -> GroundGaussian:
        pred_global = baseline_predict(indices[pair.scene_id], pair.query, text_source)
        return geometry.rectify(pred_global, pair.viewer)
    return fn


def oracle_predictor() -> Predictor:
    return lambda pair: pair.target_ego


def localization_errors(predictor: Predictor, pairs: list[EvalPair]) -> np.ndarray:
    if not pairs:
        raise EmptyEvalError("no pairs in this evaluation regime")
    return np.array([geometry.frechet_distance(p.target_ego, predictor(p)) for p in pairs])


def eval_localization(predictor: Predictor, artifacts: list[VideoArtifacts],
                      regimes=REGIMES) -> tuple[list[EvalRow], dict[str, np.ndarray]]:
    """Per-scene rows plus pooled rows per regime; also the raw pooled errors."""
    rows: list[EvalRow] = []
    pooled: dict[str, np.ndarray] = {}
    for regime in regimes:
        all_errors = []
        for art in artifacts:
            errors = localization_errors(predictor, build_eval_pairs(art, regime))
            rows.append(EvalRow(art.video.scene_id, regime, float(errors.mean()),
                                float(errors.std(ddof=1)) if errors.size > 1 else 0.0,
                                int(errors.size)))
            all_errors.append(errors)
        errors = np.concatenate(all_errors)
        pooled[regime] = errors
        rows.append(EvalRow("ALL", regime, float(errors.mean()),
                            float(errors.std(ddof=1)) if errors.size > 1 else 0.0,
                            int(errors.size)))
    return rows, pooled


# A chooser picks the index of the candidate phrase most plausible at an image.
Chooser = Callable[[str, str, list[str]], int]  # (scene_id, image_key, candidates)


def model_chooser(checkpoint: Checkpoint, vision_cache, text_source) -> Chooser:
    """Pick the candidate whose predicted region lies closest to the camera."""
    def fn(scene_id: str, image_key: str, candidates: list[str]) -> int:
        e_v = vision_cache.get(image_key)
        norms = [float(np.linalg.norm(
            checkpoint.predict_region(e_v, text_source.get(c)).mean))
            for c in candidates]
        return int(np.argmin(norms))
    return fn


def baseline_chooser(indices: dict[str, SceneIndex], text_source) -> Chooser:
    def fn(scene_id: str, image_key: str, candidates: list[str]) -> int:
        return baseline_ground(indices[scene_id], image_key, candidates, text_source)
    return fn


def random_chooser(seed: int) -> Chooser:
    rng = stable_rng(seed, "random-chooser")
    return lambda scene_id, image_key, candidates: int(rng.integers(len(candidates)))


@dataclass(eq=False)
class GroundingTrial:
    scene_id: str
    image_key: str
    candidates: list[str]
    true_index: int


def grounding_trials(artifacts: list[VideoArtifacts], n_choices: int = 3,
                     trials: int = 2000, seed: int = 0) -> list[GroundingTrial]:
    """Seeded multiple-choice trials: a frame inside some task's span plus
    distractor tasks drawn from the same video."""
    eligible = []  # (artifact, task, in-span passing frame indices)
    for art in artifacts:
        if len(art.video.tasks) < n_choices:
            raise ConfigError(
                f"scene {art.video.scene_id!r} has {len(art.video.tasks)} tasks, "
                f"need at least {n_choices}")
        for task in art.video.tasks:
            span = [i for i in art.video.span_frame_indices(task) if art.mask[i]]
            if span:
                eligible.append((art, task, span))
    if not eligible:
        raise EmptyEvalError("no task has velocity-passing in-span frames")
    rng = stable_rng(seed, "grounding-trials")
    out = []
    for _ in range(trials):
        art, task, span = eligible[int(rng.integers(len(eligible)))]
        frame = art.video.frames[span[int(rng.integers(len(span)))]]
        others = [t for t in art.video.tasks if t.task_id != task.task_id]
        pick = rng.choice(len(others), size=n_choices - 1, replace=False)
        candidates = [task.description] + [others[int(j)].description for j in pick]
        order = rng.permutation(n_choices)
        shuffled = [candidates[int(j)] for j in order]
        out.append(GroundingTrial(art.video.scene_id, frame.image_key, shuffled,
                                  int(np.flatnonzero(order == 0)[0])))
    return out


def eval_grounding(chooser: Chooser, trials: list[GroundingTrial]) -> float:
    if not trials:
        raise EmptyEvalError("no grounding trials")
    hits = sum(1 for t in trials if chooser(t.scene_id, t.image_key, t.candidates) == t.true_index)
    return hits / len(trials)


def positional_std(means: np.ndarray) -> float:
    """sqrt of the mean squared deviation of predicted positions."""
    means = np.asarray(means, dtype=np.float64)
    center = means.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((means - center) ** 2, axis=1))))


def eval_stability(predict_fn, tasks_with_phrasings: list[tuple[str, list[str]]],
                   images_per_task: dict[str, list[str]]) -> float:
    """Average positional std of predictions across phrasings of each task.

    predict_fn(image_key, phrase) -> GroundGaussian in any fixed frame (the
    positional std is invariant under rigid transforms of that frame).
    """
    stds = []
    for task_id, phrases in tasks_with_phrasings:
        if len(phrases) < 2:
            raise ConfigError(f"task {task_id!r} needs at least 2 phrasings")
        for image_key in images_per_task[task_id]:
            means = np.array([predict_fn(image_key, p).mean for p in phrases])
            stds.append(positional_std(means))
    if not stds:
        raise EmptyEvalError("no (task, image) combinations to evaluate")
    return float(np.mean(stds))


def stability_image_sets(artifacts: list[VideoArtifacts], task_ids: list[str],
                         n_images: int = 5, seed: int = 0) -> dict[str, list[str]]:
    """Fixed seeded image keys per task, drawn from the task's own video."""
    by_task = {}
    for art in artifacts:
        passing = [i for i in range(len(art.video.frames)) if art.mask[i]]
        for task in art.video.tasks:
            if task.task_id not in set(task_ids):
                continue
            rng = stable_rng(seed, "stability-images", task.task_id)
            pick = rng.choice(len(passing), size=min(n_images, len(passing)), replace=False)
            by_task[task.task_id] = [art.video.frames[passing[int(j)]].image_key for j in pick]
    return by_task


def welch_t_test(errors_a, errors_b) -> tuple[float, float, float]:
    """Welch's unequal-variance two-sample t-test.

    Returns (t, degrees of freedom, two-sided p) with p taken from the
    Student-t survival function.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateSampleError("both samples need at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        raise DegenerateSampleError("zero variance in both samples")
    sa, sb = va / a.size, vb / b.size
    t = float((a.mean() - b.mean()) / np.sqrt(sa + sb))
    df = float((sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1)))
    p = float(2.0 * stdtr(df, -abs(t)))
    return t, df, p
