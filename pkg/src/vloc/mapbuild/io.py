"""Binary ``.vmap`` model container.

Layout: 8-byte magic, u16 format version, u16 section count, then sections of
``tag (4 bytes) | payload length (u64) | crc32 (u32) | payload``.  All numbers
are little-endian; floats are stored at full precision so round-trips are exact.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..descriptors import deserialize_index, serialize_index
from ..errors import ChecksumError, TruncatedFileError, VersionMismatchError
from ..geometry import CameraIntrinsics, Pose, SimilarityTransform
from .model import MapPoint, Model3D

MAGIC = b"VLOCMAP\x00"
FORMAT_VERSION = 1
SECTIONS = (b"HEAD", b"INTR", b"POSE", b"PNTS", b"DESC", b"ANNI", b"LOCS", b"ALGN")
_SEC = struct.Struct("<4sQI")


def _arr(a, dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> memoryview:
        if self.off + n > len(self.buf):
            raise TruncatedFileError("section payload truncated")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def array(self, dtype, count: int, shape=None) -> np.ndarray:
        dt = np.dtype(dtype)
        a = np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()
        return a.reshape(shape) if shape is not None else a

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _sections(model: Model3D) -> dict[bytes, bytes]:
    pts = model.points
    n = len(pts)
    dim = model.descriptor_matrix.shape[1] if model.descriptor_count else 0
    head = json.dumps({"points": n, "frames": len(model.frame_poses), "descriptor_dim": dim,
                       "index_params": model.index_params}, sort_keys=True).encode()
    intr = json.dumps(model.intrinsics.to_dict(), sort_keys=True).encode()

    fids = sorted(model.frame_poses)
    pose = struct.pack("<Q", len(fids)) + _arr(fids, "<i8")
    pose += _arr([model.frame_poses[i].quat for i in fids], "<f8") + _arr([model.frame_poses[i].t for i in fids], "<f8")

    obs_counts = [len(p.observations) for p in pts]
    obs = [o for p in pts for o in p.observations]
    pnts = struct.pack("<Q", n) + _arr([p.point_id for p in pts], "<i8")
    pnts += _arr([p.position for p in pts], "<f8") + _arr(obs_counts, "<i4")
    pnts += _arr(obs, "<i8") + _arr([len(p.descriptors) for p in pts], "<i4")

    desc = struct.pack("<QQ", model.descriptor_count, dim)
    if model.descriptor_count:
        desc += _arr(model.descriptor_matrix, "<f4")
    anni = serialize_index(model.index) if model.index is not None else b""

    labels = json.dumps([label for label, _ in model.named_locations]).encode()
    locs = struct.pack("<QQ", len(model.named_locations), len(labels)) + labels
    locs += _arr([p for _, p in model.named_locations], "<f8")

    a = model.alignment
    algn = struct.pack("<B", a is not None)
    if a is not None:
        algn += struct.pack("<d", a.scale) + _arr(a.quat, "<f8") + _arr(a.t, "<f8")
    return {b"HEAD": head, b"INTR": intr, b"POSE": pose, b"PNTS": pnts, b"DESC": desc,
            b"ANNI": anni, b"LOCS": locs, b"ALGN": algn}


def model_to_bytes(model: Model3D) -> bytes:
    secs = _sections(model)
    out = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(SECTIONS))]
    for tag in SECTIONS:
        payload = secs[tag]
        out.append(_SEC.pack(tag, len(payload), zlib.crc32(payload)))
        out.append(payload)
    return b"".join(out)


def serialize_model(model: Model3D, path) -> int:
    """Write ``model`` to ``path``; returns the file size in bytes."""
    blob = model_to_bytes(model)
    Path(path).write_bytes(blob)
    return len(blob)


def model_size(model: Model3D) -> int:
    return len(model_to_bytes(model))


def _split(blob: bytes) -> dict[bytes, memoryview]:
    mv = memoryview(blob)
    if len(mv) < len(MAGIC) + 4:
        if bytes(mv[:len(MAGIC)]) != MAGIC[:len(mv)]:
            raise VersionMismatchError("not a vloc model file")
        raise TruncatedFileError("file shorter than its header")
    if bytes(mv[:len(MAGIC)]) != MAGIC:
        raise VersionMismatchError("not a vloc model file (bad magic)")
    version, count = struct.unpack_from("<HH", mv, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {FORMAT_VERSION}")
    off = len(MAGIC) + 4
    out = {}
    for _ in range(count):
        if off + _SEC.size > len(mv):
            raise TruncatedFileError("section header truncated")
        tag, length, crc = _SEC.unpack_from(mv, off)
        off += _SEC.size
        if off + length > len(mv):
            raise TruncatedFileError(f"section {tag.decode(errors='replace')} truncated")
        payload = mv[off:off + length]
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in section {tag.decode(errors='replace')}")
        out[bytes(tag)] = payload
        off += length
    missing = [t for t in SECTIONS if t not in out]
    if missing:
        raise TruncatedFileError(f"missing sections: {missing}")
    return out


def model_from_bytes(blob: bytes) -> Model3D:
    s = _split(blob)
    head = json.loads(bytes(s[b"HEAD"]))
    intr = CameraIntrinsics.from_dict(json.loads(bytes(s[b"INTR"])))

    r = _Reader(s[b"POSE"])
    nf = r.u64()
    fids = r.array("<i8", nf)
    quats = r.array("<f8", 4 * nf, (nf, 4))
    ts = r.array("<f8", 3 * nf, (nf, 3))
    poses = {int(i): Pose(q, t) for i, q, t in zip(fids, quats, ts)}

    r = _Reader(s[b"DESC"])
    nd, dim = r.u64(), r.u64()
    dmat = r.array("<f4", nd * dim, (nd, dim)).astype(np.float32) if nd else np.zeros((0, 0), np.float32)

    r = _Reader(s[b"PNTS"])
    n = r.u64()
    ids = r.array("<i8", n)
    pos = r.array("<f8", 3 * n, (n, 3))
    oc = r.array("<i4", n)
    obs = r.array("<i8", 2 * int(oc.sum()), (-1, 2))
    dc = r.array("<i4", n)
    points, o_off, d_off = [], 0, 0
    owner = np.empty(nd, np.int64)
    for i in range(n):
        k, m = int(oc[i]), int(dc[i])
        owner[d_off:d_off + m] = ids[i]
        points.append(MapPoint(int(ids[i]), pos[i].copy(), [(int(a), int(b)) for a, b in obs[o_off:o_off + k]],
                               dmat[d_off:d_off + m].copy()))
        o_off += k
        d_off += m

    index = deserialize_index(bytes(s[b"ANNI"]), dmat) if len(s[b"ANNI"]) else None

    r = _Reader(s[b"LOCS"])
    nl = r.u64()
    jl = r.u64()
    labels = json.loads(bytes(r.take(jl)))
    lpos = r.array("<f8", 3 * nl, (nl, 3))
    locs = [(str(lab), lpos[i].copy()) for i, lab in enumerate(labels)]

    r = _Reader(s[b"ALGN"])
    align = None
    if struct.unpack("<B", r.take(1))[0]:
        scale = struct.unpack("<d", r.take(8))[0]
        align = SimilarityTransform(scale, r.array("<f8", 4), r.array("<f8", 3))

    model = Model3D(points, poses, intr, alignment=align, named_locations=locs,
                    index_params=dict(head["index_params"]), index=index,
                    descriptor_matrix=dmat if n else np.zeros((0, 0), np.float32),
                    descriptor_to_point=owner if n else np.zeros(0, np.int64))
    return model


def deserialize_model(path) -> Model3D:
    return model_from_bytes(Path(path).read_bytes())
