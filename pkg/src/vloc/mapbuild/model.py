"""Survey frames, map points and the compressed model artifact."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..descriptors import AnnIndex, build_index, serialize_index
from ..geometry import CameraIntrinsics, Pose, SimilarityTransform


@dataclass
class SurveyFrame:
    frame_id: int
    timestamp: float
    keypoints: np.ndarray      # (N, 2) pixel coordinates
    descriptors: np.ndarray    # (N, D) float32
    response: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoints and descriptors must have the same length")
        if self.response is None:
            self.response = np.ones(len(self.keypoints))


@dataclass(frozen=True)
class PairTask:
    frame_a: int
    frame_b: int
    match_budget: int

    def __post_init__(self):
        if not self.frame_a < self.frame_b:
            raise ValueError("frame_a must precede frame_b")
        if self.match_budget < 1:
            raise ValueError("match budget must be positive")


@dataclass
class MapPoint:
    point_id: int
    position: np.ndarray
    observations: list[tuple[int, int]]     # (frame_id, keypoint_index)
    descriptors: np.ndarray                 # (k, D); k == 1 after mean compression

    @property
    def frame_count(self) -> int:
        return len({f for f, _ in self.observations})


@dataclass(eq=False)
class Model3D:
    points: list[MapPoint]
    frame_poses: dict[int, Pose]
    intrinsics: CameraIntrinsics
    alignment: SimilarityTransform | None = None
    named_locations: list[tuple[str, np.ndarray]] = field(default_factory=list)
    index_params: dict = field(default_factory=lambda: {"tree_count": 4, "leaf_size": 16, "checks": 64, "seed": 0})
    index: AnnIndex | None = None
    descriptor_matrix: np.ndarray | None = None
    descriptor_to_point: np.ndarray | None = None

    def __post_init__(self):
        if self.index is None and self.points:
            self.rebuild_index()
        self._row_of = {p.point_id: i for i, p in enumerate(self.points)}

    def rebuild_index(self, **params) -> None:
        """Stack every stored descriptor and rebuild the ANN index over them."""
        self.index_params = {**self.index_params, **params}
        if not self.points:
            self.index = None
            self.descriptor_matrix = np.zeros((0, 0), np.float32)
            self.descriptor_to_point = np.zeros(0, np.int64)
            return
        self.descriptor_matrix = np.concatenate([p.descriptors for p in self.points]).astype(np.float32)
        self.descriptor_to_point = np.concatenate(
            [np.full(len(p.descriptors), p.point_id, np.int64) for p in self.points])
        ip = self.index_params
        self.index = build_index(self.descriptor_matrix, ip["tree_count"], ip["leaf_size"], ip["checks"], ip["seed"])

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points]).reshape(-1, 3)

    @property
    def point_ids(self) -> np.ndarray:
        return np.array([p.point_id for p in self.points], dtype=np.int64)

    def point(self, point_id: int) -> MapPoint:
        return self.points[self._row_of[point_id]]

    def position_of(self, point_ids) -> np.ndarray:
        return np.array([self.points[self._row_of[int(i)]].position for i in point_ids]).reshape(-1, 3)

    @property
    def descriptor_count(self) -> int:
        return 0 if self.descriptor_matrix is None else len(self.descriptor_matrix)

    def replace(self, **changes) -> "Model3D":
        """New model sharing unchanged fields; the index is rebuilt when points change."""
        kw = dict(points=self.points, frame_poses=self.frame_poses, intrinsics=self.intrinsics,
                  alignment=self.alignment, named_locations=self.named_locations,
                  index_params=dict(self.index_params))
        rebuild = "points" in changes
        kw.update(changes)
        if not rebuild:
            kw.update(index=self.index, descriptor_matrix=self.descriptor_matrix,
                      descriptor_to_point=self.descriptor_to_point)
        return Model3D(**kw)


def models_equal(a: Model3D, b: Model3D) -> bool:
    """Field-by-field exact comparison, including the serialized index."""
    if a.intrinsics != b.intrinsics or a.alignment != b.alignment:
        return False
    if a.frame_poses.keys() != b.frame_poses.keys() or any(a.frame_poses[k] != b.frame_poses[k] for k in a.frame_poses):
        return False
    if len(a.named_locations) != len(b.named_locations):
        return False
    for (la, pa), (lb, pb) in zip(a.named_locations, b.named_locations):
        if la != lb or not np.array_equal(pa, pb):
            return False
    if len(a.points) != len(b.points):
        return False
    for p, q in zip(a.points, b.points):
        if (p.point_id != q.point_id or not np.array_equal(p.position, q.position)
                or list(map(tuple, p.observations)) != list(map(tuple, q.observations))
                or not np.array_equal(p.descriptors, q.descriptors)):
            return False
    if (a.index is None) != (b.index is None):
        return False
    return a.index is None or serialize_index(a.index) == serialize_index(b.index)
