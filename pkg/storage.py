import json
import logging
import os
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field

from scene import MAX_OBJECTS, MAX_QUESTION_LEN, MAX_TOKENS, Scene, SceneError, SynthSpec, load_scene, save_scene, synth_generate

logger = logging.getLogger(__name__)

DATA_FOLDER = "data"
MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = "1"
SCENE_SUFFIX = ".scene.json"
SPLITS = ("train", "val", "test")


class Manifest(BaseModel):
    version: str = MANIFEST_VERSION
    seed: int
    splits: dict[str, list[str]] = Field(default_factory=lambda: {s: [] for s in SPLITS})
    spec: Optional[dict[str, Any]] = None

    def scene_ids(self) -> list[str]:
        return [sid for s in SPLITS for sid in self.splits.get(s, [])]


def _ensure_folder(data_dir: str | os.PathLike) -> None:
    os.makedirs(data_dir, exist_ok=True)


def _file_path(data_dir: str | os.PathLike, scene_id: str) -> str:
    return os.path.join(data_dir, f"{scene_id}{SCENE_SUFFIX}")


def scene_id_from_path(path: str | os.PathLike) -> str:
    name = Path(path).name
    return name[: -len(SCENE_SUFFIX)] if name.endswith(SCENE_SUFFIX) else Path(path).stem


def read_scene(
    data_dir: str | os.PathLike,
    scene_id: str,
    max_objects: int = MAX_OBJECTS,
    max_tokens: int = MAX_TOKENS,
    max_question_len: int = MAX_QUESTION_LEN,
) -> tuple[Scene, int]:
    path = _file_path(data_dir, scene_id)
    if not os.path.exists(path):
        raise SceneError(f"No scene found for scene ID: {scene_id}")
    with open(path, "rb") as f:
        try:
            return load_scene(f.read(), max_objects, max_tokens, max_question_len)
        except SceneError as e:
            raise SceneError(f"{path}: {e}") from e


def write_scene(data_dir: str | os.PathLike, scene_id: str, scene: Scene) -> str:
    _ensure_folder(data_dir)
    path = _file_path(data_dir, scene_id)
    with open(path, "wb") as f:
        f.write(save_scene(scene))
    return path


def read_scene_file(path: str | os.PathLike, **caps: int) -> tuple[str, Scene, int]:
    if not os.path.exists(path):
        raise SceneError(f"No scene file at {path}")
    with open(path, "rb") as f:
        scene, clamped = load_scene(f.read(), **caps)
    return scene_id_from_path(path), scene, clamped


def read_manifest(data_dir: str | os.PathLike) -> Manifest:
    path = os.path.join(data_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        raise SceneError(f"No manifest found in dataset directory: {data_dir}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = Manifest.model_validate_json(f.read())
        except ValueError as e:
            raise SceneError(f"{path}: malformed manifest: {e}") from e
    if manifest.version != MANIFEST_VERSION:
        raise SceneError(f"{path}: manifest 'version' mismatch: expected {MANIFEST_VERSION!r}, got {manifest.version!r}")
    return manifest


def write_manifest(data_dir: str | os.PathLike, manifest: Manifest) -> str:
    _ensure_folder(data_dir)
    path = os.path.join(data_dir, MANIFEST_FILE)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n")
    return path


def load_split(data_dir: str | os.PathLike, split: str, **caps: int) -> list[tuple[str, Scene]]:
    """All scenes of one split, in manifest order."""
    if split not in SPLITS:
        raise SceneError(f"unknown split {split!r}; expected one of {', '.join(SPLITS)}")
    manifest = read_manifest(data_dir)
    out = []
    clamped = 0
    for scene_id in manifest.splits.get(split, []):
        scene, c = read_scene(data_dir, scene_id, **caps)
        clamped += c
        out.append((scene_id, scene))
    if clamped:
        logger.warning("[storage] %s split: %d boxes clamped to image bounds", split, clamped)
    logger.info("[storage] loaded %d %s scenes from %s", len(out), split, data_dir)
    return out


def assign_splits(scene_ids: list[str], ratios: dict[str, float]) -> dict[str, list[str]]:
    n = len(scene_ids)
    n_train = int(round(ratios.get("train", 0.0) * n))
    n_val = min(n - n_train, int(round(ratios.get("val", 0.0) * n)))
    return {
        "train": scene_ids[:n_train],
        "val": scene_ids[n_train : n_train + n_val],
        "test": scene_ids[n_train + n_val :],
    }


def write_synthetic_dataset(data_dir: str | os.PathLike, seed: int, spec: SynthSpec) -> Manifest:
    scenes = synth_generate(seed, spec)
    ids = [f"scene_{i:05d}" for i in range(len(scenes))]
    for scene_id, scene in zip(ids, scenes):
        write_scene(data_dir, scene_id, scene)
    manifest = Manifest(seed=seed, splits=assign_splits(ids, spec.splits), spec=spec.model_dump(mode="json"))
    write_manifest(data_dir, manifest)
    logger.info(
        "[synth] wrote %d scenes to %s (%s)",
        len(scenes),
        data_dir,
        ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items()),
    )
    return manifest


def resolve_scene(data_dir: str | os.PathLike, ref: str, **caps: int) -> tuple[str, Scene]:
    """Accept either a path to a scene file or a scene id inside ``data_dir``."""
    if os.path.isfile(ref):
        scene_id, scene, clamped = read_scene_file(ref, **caps)
    else:
        scene_id = ref
        scene, clamped = read_scene(data_dir, ref, **caps)
    if clamped:
        logger.warning("[storage] %s: %d boxes clamped to image bounds", scene_id, clamped)
    return scene_id, scene
