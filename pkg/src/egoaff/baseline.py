"""Whole-scene nearest-neighbor baseline over raw image embeddings.

For a task query the baseline retrieves, over every localized frame of the
scene (no train/test split), the frame whose raw image embedding has the
highest cosine similarity to the query's text embedding, and predicts the
viewer position at that frame.  The region spread is the scene-wide average
of per-task fitted sigmas.  No trained parameters are involved anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import EgoVideo, compute_task_regions, velocity_filter
from .encoders import EmbeddingCache
from .errors import ConfigError, EmptySceneError
from .geometry import GravityAlignedPose, GroundGaussian, gravity_align


@dataclass(eq=False)
class SceneIndex:
    scene_id: str
    embeddings: np.ndarray  # (n_frames, d) raw, adapter-free
    norms: np.ndarray  # (n_frames,) precomputed L2 norms
    poses: list[GravityAlignedPose]
    image_keys: list[str]
    avg_sigma: float  # mean fitted sigma over all tasks of the scene

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def build_scene_index(video: EgoVideo, vision_cache: EmbeddingCache) -> SceneIndex:
    """Index every frame of the scene with its raw embedding and aligned pose."""
    if not video.frames:
        raise EmptySceneError(f"scene {video.scene_id!r} has no frames")
    emb = np.array([vision_cache.get(f.image_key) for f in video.frames])
    poses = [gravity_align(f.pose) for f in video.frames]
    regions, _ = compute_task_regions(video, mask=velocity_filter(video))
    if not regions:
        raise EmptySceneError(f"scene {video.scene_id!r} has no tasks")
    avg_sigma = float(np.mean([r.sigma for r in regions.values()]))
    return SceneIndex(
        scene_id=video.scene_id,
        embeddings=emb,
        norms=np.linalg.norm(emb, axis=1),
        poses=poses,
        image_keys=[f.image_key for f in video.frames],
        avg_sigma=avg_sigma,
    )


def _cosine_scores(index_emb: np.ndarray, index_norms: np.ndarray, query: np.ndarray) -> np.ndarray:
    qn = float(np.linalg.norm(query))
    denom = np.maximum(index_norms * qn, 1e-300)
    return (index_emb @ query) / denom


def baseline_predict(index: SceneIndex, query: str, text_source) -> GroundGaussian:
    """Global region at the viewer position of the best-matching frame.

    Ties in cosine similarity break toward the lowest frame index.
    """
    if len(index) == 0:
        raise EmptySceneError("cannot retrieve from an empty scene index")
    scores = _cosine_scores(index.embeddings, index.norms, text_source.get(query))
    c = int(np.argmax(scores))  # argmax returns the first maximum
    return GroundGaussian(index.poses[c].position.copy(), index.avg_sigma)


def baseline_ground(index: SceneIndex, image_key: str, candidates: list[str],
                    text_source) -> int:
    """Index of the candidate phrase most similar to the given image; ties -> first."""
    if len(candidates) < 2:
        raise ConfigError(f"grounding needs at least 2 candidates, got {len(candidates)}")
    try:
        row = index.image_keys.index(image_key)
    except ValueError:
        raise EmptySceneError(f"image key {image_key!r} is not part of the scene index") from None
    e_v = index.embeddings[row]
    vn = float(np.linalg.norm(e_v))
    best, best_score = 0, -np.inf
    for j, phrase in enumerate(candidates):
        e_l = text_source.get(phrase)
        score = float(e_v @ e_l / max(vn * float(np.linalg.norm(e_l)), 1e-300))
        if score > best_score:
            best, best_score = j, score
    return best
