"""Teaching store: per-face (segmented cloud, grasp pose) records and lookup.

Everything in the database lives in the robot_base frame; camera clouds must
be transformed with the hand-eye result before registration or matching.
On disk the database is one directory per object holding a ``manifest.json``
plus one ``face_<n>.ply`` sidecar per taught face, under a root manifest.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import geom3
from .cloud import PointCloud, load_ply, save_ply
from .geom3 import FRAME_ROBOT_BASE, Pose
from .register import AlignmentResult, IcpParams, NoCorrespondences, align_object

SCHEMA_VERSION = 1
GRIPPER_TYPES = ("two_finger", "three_finger")

DEFAULT_ACCEPT_THRESHOLD = 0.7


class WrongFrame(ValueError):
    pass


class EmptyCloud(ValueError):
    pass


class NoMatch(LookupError):
    """Best fitness fell below the acceptance threshold: the object is not in
    the database, or the segmentation was bad."""


class ParseError(ValueError):
    pass


class MissingSidecar(FileNotFoundError):
    pass


class SchemaVersionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FaceRecord:
    face_id: str
    cloud: PointCloud
    grasp: Pose            # robot_base -> gripper at grasp
    gripper_type: str
    created_at: str

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise EmptyCloud(f"face {self.face_id!r} has an empty cloud")
        if self.cloud.frame != FRAME_ROBOT_BASE:
            raise WrongFrame(f"face cloud must be in {FRAME_ROBOT_BASE!r}, "
                             f"got {self.cloud.frame!r}")
        if self.gripper_type not in GRIPPER_TYPES:
            raise ValueError(f"gripper_type must be one of {GRIPPER_TYPES}")


@dataclass
class ObjectModel:
    object_id: str
    faces: list = field(default_factory=list)

    def face_ids(self) -> list:
        return [f.face_id for f in self.faces]


@dataclass(frozen=True)
class MatchResult:
    object_id: str
    face_id: str
    alignment: AlignmentResult
    grasp_in_scene: Pose

    def to_dict(self) -> dict:
        return {"object_id": self.object_id,
                "face_id": self.face_id,
                "alignment": self.alignment.to_dict(),
                "grasp_in_scene": geom3.pose_to_dict(self.grasp_in_scene)}


class GraspDatabase:
    """In-memory teaching store; persist with save_db / load_db."""

    def __init__(self):
        self.objects: dict[str, ObjectModel] = {}

    def __len__(self) -> int:
        return sum(len(o.faces) for o in self.objects.values())

    def object_ids(self) -> list:
        return sorted(self.objects)


def register_face(db: GraspDatabase, object_id: str, cloud: PointCloud,
                  grasp: Pose, gripper_type: str) -> str:
    """Append one taught view; face ids are ``<object_id>_<ordinal>``."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot register an empty cloud")
    if cloud.frame != FRAME_ROBOT_BASE:
        raise WrongFrame(f"cloud frame {cloud.frame!r} is not {FRAME_ROBOT_BASE!r}; "
                         f"transform with the hand-eye result first")
    model = db.objects.setdefault(object_id, ObjectModel(object_id))
    face_id = f"{object_id}_{len(model.faces)}"
    created = datetime.now(timezone.utc).isoformat()
    model.faces.append(FaceRecord(face_id, cloud, grasp, gripper_type, created))
    return face_id


def transfer_grasp(alignment: Pose, registered_grasp: Pose) -> Pose:
    """Grasp pose that follows the object's rigid motion (both in robot_base)."""
    return geom3.compose(alignment, registered_grasp)


def match_object(db: GraspDatabase, scanned: PointCloud,
                 params: IcpParams = IcpParams(),
                 accept_threshold: float = DEFAULT_ACCEPT_THRESHOLD) -> MatchResult:
    """Align every taught face against the scan, return the best match.

    Best by fitness, ties by lower inlier rmse, then lexicographic
    (object_id, face_id). Raises NoMatch when the winner's fitness is below
    ``accept_threshold``.
    """
    if not db.objects:
        raise NoMatch("the database is empty")
    if scanned.frame != FRAME_ROBOT_BASE:
        raise WrongFrame(f"scanned cloud frame {scanned.frame!r} "
                         f"is not {FRAME_ROBOT_BASE!r}")
    candidates = []
    for object_id in db.object_ids():
        for face in db.objects[object_id].faces:
            try:
                result = align_object(face.cloud, scanned, params)
            except NoCorrespondences:
                continue
            candidates.append((object_id, face, result))
    if not candidates:
        raise NoMatch("no face aligned at all (no gated correspondences)")
    object_id, face, best = min(
        candidates, key=lambda c: (-c[2].fitness, c[2].inlier_rmse, c[0], c[1].face_id))
    if best.fitness < accept_threshold:
        raise NoMatch(f"best fitness {best.fitness:.3f} "
                      f"(face {face.face_id!r}) below threshold {accept_threshold}")
    return MatchResult(object_id, face.face_id, best,
                       transfer_grasp(best.transform, face.grasp))


# --- Persistence --------------------------------------------------------------

def save_db(db: GraspDatabase, path) -> None:
    """Atomic save: the tree is written to a temp sibling then renamed in."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    root = {"schema_version": SCHEMA_VERSION, "objects": db.object_ids()}
    for object_id in db.object_ids():
        model = db.objects[object_id]
        obj_dir = os.path.join(tmp, object_id)
        os.makedirs(obj_dir)
        faces = []
        for n, face in enumerate(model.faces):
            ply_name = f"face_{n}.ply"
            save_ply(face.cloud, os.path.join(obj_dir, ply_name), binary=True)
            faces.append({"face_id": face.face_id,
                          "ply": ply_name,
                          "grasp": geom3.pose_to_dict(face.grasp),
                          "gripper_type": face.gripper_type,
                          "created_at": face.created_at,
                          "has_normals": face.cloud.normals is not None})
        manifest = {"schema_version": SCHEMA_VERSION,
                    "object_id": object_id,
                    "frame": FRAME_ROBOT_BASE,
                    "faces": faces}
        with open(os.path.join(obj_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    with open(os.path.join(tmp, "manifest.json"), "w") as f:
        json.dump(root, f, indent=2, sort_keys=True)
    if os.path.exists(path):
        old = path + ".old"
        if os.path.exists(old):
            shutil.rmtree(old)
        os.rename(path, old)
        os.rename(tmp, path)
        shutil.rmtree(old)
    else:
        os.rename(tmp, path)


def _read_manifest(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingSidecar(f"manifest not found: {path}")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as err:
            raise ParseError(f"{path}: {err}") from None
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: schema_version {version!r}, this build reads {SCHEMA_VERSION}")
    return data


def load_db(path) -> GraspDatabase:
    path = os.fspath(path)
    root = _read_manifest(os.path.join(path, "manifest.json"))
    db = GraspDatabase()
    for object_id in root.get("objects", []):
        obj_dir = os.path.join(path, object_id)
        manifest = _read_manifest(os.path.join(obj_dir, "manifest.json"))
        model = ObjectModel(object_id)
        seen = set()
        for entry in manifest["faces"]:
            ply_path = os.path.join(obj_dir, entry["ply"])
            if not os.path.exists(ply_path):
                raise MissingSidecar(f"{ply_path} referenced by manifest is missing")
            cloud = load_ply(ply_path, frame=manifest.get("frame", FRAME_ROBOT_BASE))
            face = FaceRecord(entry["face_id"], cloud,
                              geom3.pose_from_dict(entry["grasp"]),
                              entry["gripper_type"], entry["created_at"])
            if face.face_id in seen:
                raise ParseError(f"{obj_dir}: duplicate face_id {face.face_id!r}")
            seen.add(face.face_id)
            model.faces.append(face)
        db.objects[object_id] = model
    return db
