"""On-disk formats: bracket-sequence directories and TUM trajectory files.

A sequence directory holds `manifest.json` (versioned) plus one 16-bit
grayscale PNG per (frame, bracket) carrying 12-bit DN. When frames have
ground-truth poses the manifest also points at a TUM-format reference
trajectory. Saving and loading round-trip bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image as PilImage

from .core import DN_MAX, BracketFrame, BracketSequence, Image12, Pose
from .errors import (
    BadQuaternion,
    CorruptImage,
    IoFailure,
    LadderMismatch,
    MissingManifest,
    NonMonotoneTimestamps,
    ParseError,
    RangeViolation,
)
from .trajectory import Trajectory

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
REFERENCE_NAME = "reference.txt"
QUATERNION_RENORM_BAND = 1e-3


def save_image12(img: Image12, path: Path) -> None:
    """Write one image as 16-bit grayscale PNG (upper 4 bits zero)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PilImage.fromarray(img.data.astype(np.uint16)).save(path)
    except OSError as exc:
        raise IoFailure(f"could not write {path}: {exc}") from exc


def load_image12(path: Path) -> Image12:
    path = Path(path)
    try:
        with PilImage.open(path) as pil:
            arr = np.asarray(pil)
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImage(f"could not read {path}: {exc}") from exc
    if arr.ndim != 2:
        raise CorruptImage(f"{path}: expected single-channel image, got shape {arr.shape}")
    if int(arr.max(initial=0)) > DN_MAX:
        raise RangeViolation(f"{path}: DN above {DN_MAX}")
    return Image12(arr.astype(np.uint16))


def _image_name(frame_idx: int, bracket_idx: int) -> str:
    return f"images/{frame_idx:06d}_b{bracket_idx}.png"


def _pose_to_json(pose: Pose) -> Dict[str, List[float]]:
    return {
        "translation": [float(v) for v in pose.translation],
        "quaternion": [float(v) for v in pose.quaternion],
    }


def _pose_from_json(obj: Dict[str, List[float]]) -> Pose:
    return Pose(np.asarray(obj["translation"]), np.asarray(obj["quaternion"]))


def save_sequence(seq: BracketSequence, directory: Path) -> None:
    """Write manifest plus images; poses (when present) also become a TUM file."""
    directory = Path(directory)
    frames_json = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            entry: Dict[str, object] = {
                "timestamp": float(frame.timestamp),
                "images": [],
            }
            for k, img in enumerate(frame.images):
                name = _image_name(i, k)
                save_image12(img, directory / name)
                entry["images"].append(name)
            if frame.pose is not None:
                entry["pose"] = _pose_to_json(frame.pose)
            frames_json.append(entry)
        manifest: Dict[str, object] = {
            "version": MANIFEST_VERSION,
            "ladder_ms": [float(e) for e in seq.ladder_ms],
            "frame_count": len(seq),
            "height": seq.frames[0].images[0].height if seq.frames else 0,
            "width": seq.frames[0].images[0].width if seq.frames else 0,
            "frames": frames_json,
        }
        if seq.frames and all(f.pose is not None for f in seq.frames):
            save_trajectory(trajectory_from_sequence(seq), directory / REFERENCE_NAME)
            manifest["reference_trajectory"] = REFERENCE_NAME
        with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"could not write sequence to {directory}: {exc}") from exc


def _load_manifest(directory: Path) -> Dict[str, object]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise MissingManifest(f"no {MANIFEST_NAME} in {directory}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise ParseError(f"{path}: expected manifest version {MANIFEST_VERSION}")
    return manifest


def load_sequence(directory: Path) -> BracketSequence:
    """Load a sequence directory written by save_sequence (or compatible)."""
    directory = Path(directory)
    manifest = _load_manifest(directory)
    try:
        ladder = [float(e) for e in manifest["ladder_ms"]]
        frames_json = manifest["frames"]
        height = int(manifest["height"])
        width = int(manifest["width"])
        frame_count = int(manifest["frame_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{directory}: malformed manifest: {exc}") from exc
    if len(frames_json) != frame_count:
        raise ParseError(
            f"{directory}: frame_count {frame_count} != {len(frames_json)} frame entries"
        )
    if any(e <= 0 for e in ladder) or any(
        b <= a for a, b in zip(ladder, ladder[1:])
    ):
        raise LadderMismatch(f"{directory}: ladder must be positive, strictly increasing")
    frames = []
    for i, entry in enumerate(frames_json):
        names = entry["images"]
        if len(names) != len(ladder):
            raise LadderMismatch(
                f"{directory} frame {i}: {len(names)} images for a "
                f"{len(ladder)}-step ladder"
            )
        images = []
        for name in names:
            img = load_image12(directory / name)
            if img.shape != (height, width):
                raise CorruptImage(
                    f"{directory / name}: shape {img.shape} != manifest ({height}, {width})"
                )
            images.append(img)
        pose = _pose_from_json(entry["pose"]) if "pose" in entry else None
        frames.append(
            BracketFrame(tuple(images), tuple(ladder), float(entry["timestamp"]), pose)
        )
    return BracketSequence(tuple(frames), id=directory.name)


def trajectory_from_sequence(seq: BracketSequence) -> Trajectory:
    """Reference trajectory from per-frame ground-truth poses."""
    posed = [f for f in seq.frames if f.pose is not None]
    if len(posed) != len(seq.frames):
        raise ValueError("sequence has frames without poses")
    return Trajectory(
        np.array([f.timestamp for f in posed]),
        np.array([f.pose.translation for f in posed]),
        np.array([f.pose.quaternion for f in posed]),
    )


def load_reference_trajectory(directory: Path) -> Optional[Trajectory]:
    """The manifest's reference trajectory, or None if the sequence has none."""
    manifest = _load_manifest(Path(directory))
    name = manifest.get("reference_trajectory")
    if not name:
        return None
    return load_trajectory(Path(directory) / str(name))


def save_trajectory(traj: Trajectory, path: Path) -> None:
    """TUM format: `timestamp tx ty tz qx qy qz qw` per line."""
    path = Path(path)
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, tr, q in zip(traj.timestamps, traj.translations, traj.quaternions):
        lines.append(" ".join(repr(float(v)) for v in (t, *tr, *q)))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"could not write {path}: {exc}") from exc


def load_trajectory(path: Path) -> Trajectory:
    """Parse a TUM trajectory file; `#` lines are comments.

    Quaternions within 1e-3 of unit norm are renormalized; anything further
    off is rejected rather than repaired.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"could not read {path}: {exc}") from exc
    stamps: List[float] = []
    translations: List[Tuple[float, float, float]] = []
    quaternions: List[np.ndarray] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 8:
            raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(tokens)}")
        try:
            values = [float(tok) for tok in tokens]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        q = np.array(values[4:8])
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUATERNION_RENORM_BAND:
            raise BadQuaternion(f"{path}:{lineno}: quaternion norm {norm:.6f}")
        stamps.append(values[0])
        translations.append((values[1], values[2], values[3]))
        quaternions.append(q / norm)
    ts = np.array(stamps)
    if len(ts) > 1 and np.any(np.diff(ts) <= 0):
        raise NonMonotoneTimestamps(f"{path}: timestamps must be strictly increasing")
    if not stamps:
        return Trajectory.empty()
    return Trajectory(ts, np.array(translations), np.array(quaternions))


def load_dataset(root: Path) -> List[BracketSequence]:
    """All sequence directories directly under root, sorted by name."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / MANIFEST_NAME).is_file())
    if not dirs and (root / MANIFEST_NAME).is_file():
        dirs = [root]
    return [load_sequence(p) for p in dirs]
