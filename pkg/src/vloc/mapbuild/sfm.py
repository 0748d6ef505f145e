"""Minimal incremental structure from motion.

Matches from the scheduled pairs are chained into tracks, a seed pair is
initialized from the essential matrix, and the remaining frames are
registered one at a time by P3P-RANSAC, each followed by triangulation of new
tracks and a few Gauss-Newton passes over the new pose and its points.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..errors import SeedFailureError
from ..geometry import CameraIntrinsics, Pose, _projection_jacobian, triangulate_many
from ..localizer.ransac import RansacConfig, ransac_pnp, refine_pose, reproj_errors
from .model import MapPoint, Model3D, PairTask, SurveyFrame
from .pairs import match_pair

log = logging.getLogger(__name__)


@dataclass
class SfmConfig:
    ratio_threshold: float = 0.7
    inlier_threshold: float = 4.0       # px, map construction
    huber: float = 2.0                  # px, local refinement
    refine_iterations: int = 5
    refine_window: int = 1             # recent registered poses refined with the new one
    seed_min_parallax_deg: float = 1.5  # median parallax of the seed pair
    point_min_parallax_deg: float = 1.0
    seed_min_points: int = 40
    seed_candidates: int = 30
    min_registration_inliers: int = 15
    ransac_iterations: int = 500
    seed: int = 0
    threads: int = 1


# ---------------------------------------------------------------------------
# two-view initialization


def _essential_linear(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    A = np.column_stack([xb[:, 0] * xa[:, 0], xb[:, 0] * xa[:, 1], xb[:, 0],
                         xb[:, 1] * xa[:, 0], xb[:, 1] * xa[:, 1], xb[:, 1],
                         xa[:, 0], xa[:, 1], np.ones(len(xa))])
    _, _, Vt = np.linalg.svd(A)
    U, _, Vt2 = np.linalg.svd(Vt[-1].reshape(3, 3))
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt2


def _sampson(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    Ex = ha @ E.T
    Etx = hb @ E
    num = np.einsum("ni,ni->n", hb, Ex) ** 2
    return num / np.maximum(Ex[:, 0] ** 2 + Ex[:, 1] ** 2 + Etx[:, 0] ** 2 + Etx[:, 1] ** 2, 1e-300)


def _decompose_essential(E: np.ndarray):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    return [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]


def relative_pose(uva, uvb, intrinsics: CameraIntrinsics, threshold_px: float, rng: np.random.Generator,
                  iterations: int = 300):
    """``(R, t, inlier mask)`` of frame b relative to frame a with ``|t| = 1``, or None."""
    xa = intrinsics.normalize(uva)
    xb = intrinsics.normalize(uvb)
    n = len(xa)
    if n < 8:
        return None
    thr = (threshold_px / intrinsics.fx) ** 2
    best, best_count = None, 0
    for _ in range(iterations):
        s = rng.choice(n, 8, replace=False)
        E = _essential_linear(xa[s], xb[s])
        inl = _sampson(E, xa, xb) <= thr
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
    if best_count < 8:
        return None
    E = _essential_linear(xa[best], xb[best])
    inl = _sampson(E, xa, xb) <= thr
    if inl.sum() < 8:
        return None
    I3, z3 = np.eye(3), np.zeros(3)
    scored = []
    for R, t in _decompose_essential(E):
        _, _, ea, eb = triangulate_many(I3, z3, R, t, uva[inl], uvb[inl], intrinsics, refine_steps=0)
        scored.append(int((np.isfinite(ea) & np.isfinite(eb)).sum()))
    R, t = _decompose_essential(E)[int(np.argmax(scored))]
    return R, t / np.linalg.norm(t), inl


# ---------------------------------------------------------------------------
# batched point refinement


def refine_points(X, point_idx, R_obs, t_obs, uv_obs, intrinsics: CameraIntrinsics,
                  iterations: int = 5, huber: float | None = 2.0) -> np.ndarray:
    """Gauss-Newton on each point independently given fixed observing poses.

    ``point_idx[k]`` names the point of observation ``k`` seen by the camera
    ``(R_obs[k], t_obs[k])`` at ``uv_obs[k]``.
    """
    X = np.array(X, dtype=float)
    m = len(X)
    if m == 0 or len(point_idx) == 0:
        return X
    fx, fy = intrinsics.fx, intrinsics.fy
    for _ in range(iterations):
        Xc = np.einsum("kij,kj->ki", R_obs, X[point_idx]) + t_obs
        z = Xc[:, 2]
        ok = z > 1e-6
        zs = np.where(ok, z, 1.0)
        pred = np.column_stack([fx * Xc[:, 0] / zs + intrinsics.cx, fy * Xc[:, 1] / zs + intrinsics.cy])
        r = pred - uv_obs
        Xc[:, 2] = zs
        J = _projection_jacobian(R_obs, Xc, fx, fy)
        if huber is not None:
            rn = np.sqrt((r ** 2).sum(1))
            w = np.where(rn <= huber, 1.0, huber / np.maximum(rn, 1e-12))
        else:
            w = np.ones(len(r))
        w = np.where(ok, w, 0.0)
        H = np.zeros((m, 3, 3))
        g = np.zeros((m, 3))
        np.add.at(H, point_idx, w[:, None, None] * np.einsum("nki,nkj->nij", J, J))
        np.add.at(g, point_idx, w[:, None] * np.einsum("nki,nk->ni", J, r))
        good = np.abs(np.linalg.det(H)) > 1e-12
        if not good.any():
            break
        delta = np.zeros_like(X)
        delta[good] = np.linalg.solve(H[good], -g[good][..., None])[..., 0]
        X = X + delta
        if np.abs(delta).max() < 1e-10:
            break
    return X


# ---------------------------------------------------------------------------
# tracks


class _Tracks:
    """Observation graph: node = (frame row, keypoint index)."""

    def __init__(self, frames: list[SurveyFrame], matches: list[tuple[int, int, np.ndarray, np.ndarray]]):
        sizes = np.array([len(f.keypoints) for f in frames], dtype=np.int64)
        self.offset = np.concatenate([[0], np.cumsum(sizes)])
        n = int(self.offset[-1])
        self.node_frame = np.repeat(np.arange(len(frames)), sizes)
        self.node_kp = np.arange(n) - self.offset[self.node_frame]
        if matches:
            a = np.concatenate([self.offset[fa] + ia for fa, _, ia, _ in matches])
            b = np.concatenate([self.offset[fb] + ib for _, fb, _, ib in matches])
        else:
            a = b = np.zeros(0, np.int64)
        graph = coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        # keep components with >= 2 nodes; drop frames seen twice within one component
        order = np.lexsort((self.node_frame, labels))
        lab, fr = labels[order], self.node_frame[order]
        dup = np.zeros(n, bool)
        same = (lab[1:] == lab[:-1]) & (fr[1:] == fr[:-1])
        dup[1:] |= same
        dup[:-1] |= same
        keep = ~dup
        order, lab = order[keep], lab[keep]
        counts = np.bincount(lab, minlength=n)
        keep = counts[lab] >= 2
        order, lab = order[keep], lab[keep]
        uniq, track = np.unique(lab, return_inverse=True)
        self.track_of = np.full(n, -1, np.int64)
        self.track_of[order] = track
        self.count = len(uniq)
        # nodes grouped by track, in frame order
        self.nodes = order
        self.starts = np.concatenate([[0], np.cumsum(np.bincount(track, minlength=self.count))])
        self.active = self.track_of >= 0

    def node(self, frame_row: int, kp) -> np.ndarray:
        return self.offset[frame_row] + np.asarray(kp)

    def track_nodes(self, t: int) -> np.ndarray:
        return self.nodes[self.starts[t]:self.starts[t + 1]]


# ---------------------------------------------------------------------------
# reconstruction


def _match_all(frames, pairs, ratio, threads):
    by_id = {f.frame_id: f for f in frames}
    row = {f.frame_id: i for i, f in enumerate(frames)}
    pairs = sorted(pairs, key=lambda p: (p.frame_a, p.frame_b))
    pairs = [p for p in pairs if p.frame_a in by_id and p.frame_b in by_id]

    def run(task):
        m = match_pair(task, by_id, ratio)
        ia = np.array([x.query_index for x in m], dtype=np.int64)
        ib = np.array([x.target_index for x in m], dtype=np.int64)
        return row[task.frame_a], row[task.frame_b], ia, ib

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(run, pairs))
    return [run(p) for p in pairs]


class _Reconstruction:
    def __init__(self, frames, intrinsics, tracks: _Tracks, config: SfmConfig):
        self.frames = frames
        self.intr = intrinsics
        self.tr = tracks
        self.cfg = config
        self.R: dict[int, np.ndarray] = {}
        self.t: dict[int, np.ndarray] = {}
        self.X = np.full((tracks.count, 3), np.nan)
        self.has = np.zeros(tracks.count, bool)
        self.order: list[int] = []
        self.rng = np.random.default_rng(config.seed)

    # -- helpers ---------------------------------------------------------
    def frame_obs(self, f: int):
        """(keypoint indices, track ids) of active tracked observations in frame row ``f``."""
        lo, hi = self.tr.offset[f], self.tr.offset[f + 1]
        nodes = np.arange(lo, hi)
        m = self.tr.active[nodes]
        nodes = nodes[m]
        return nodes - lo, self.tr.track_of[nodes]

    def registered_obs(self, tracks: np.ndarray):
        """Active observations of ``tracks`` in registered frames: (local index, frame row, kp)."""
        idx, fr, kp = [], [], []
        reg = np.zeros(len(self.frames), bool)
        reg[list(self.R)] = True
        for i, t in enumerate(tracks):
            nodes = self.tr.track_nodes(t)
            nodes = nodes[self.tr.active[nodes]]
            f = self.tr.node_frame[nodes]
            m = reg[f]
            idx.append(np.full(m.sum(), i))
            fr.append(f[m])
            kp.append(self.tr.node_kp[nodes[m]])
        if not idx:
            z = np.zeros(0, np.int64)
            return z, z, z
        return np.concatenate(idx), np.concatenate(fr), np.concatenate(kp)

    def _obs_arrays(self, fr, kp):
        R = np.stack([self.R[f] for f in fr]) if len(fr) else np.zeros((0, 3, 3))
        t = np.stack([self.t[f] for f in fr]) if len(fr) else np.zeros((0, 3))
        uv = np.stack([self.frames[f].keypoints[k] for f, k in zip(fr, kp)]) if len(fr) else np.zeros((0, 2))
        return R, t, uv

    def _errors(self, X, idx, R, t, uv):
        Xc = np.einsum("kij,kj->ki", R, X[idx]) + t
        z = Xc[:, 2]
        zs = np.where(z > 1e-6, z, 1.0)
        pred = np.column_stack([self.intr.fx * Xc[:, 0] / zs + self.intr.cx,
                                self.intr.fy * Xc[:, 1] / zs + self.intr.cy])
        e = np.sqrt(((pred - uv) ** 2).sum(1))
        return np.where(z > 1e-6, e, np.inf)

    def _deactivate(self, fr, kp):
        if len(fr):
            self.tr.active[self.tr.offset[fr] + kp] = False

    def _prune_points(self, tracks):
        """Drop points left with fewer than two registered observations."""
        idx, _, _ = self.registered_obs(tracks)
        cnt = np.bincount(idx, minlength=len(tracks))
        dead = tracks[cnt < 2]
        self.has[dead] = False
        self.X[dead] = np.nan

    def refine_local(self, f: int):
        """Alternate pose and point Gauss-Newton over the newest frames and the points they see."""
        cfg = self.cfg
        window = [g for g in self.order[-cfg.refine_window:] if g != self.order[0]]
        if f not in window:
            window.append(f)
        obs = {}
        for g in window:
            kp, trk = self.frame_obs(g)
            m = self.has[trk]
            obs[g] = (kp[m], trk[m])
        trk = np.unique(np.concatenate([t for _, t in obs.values()]))
        if len(trk) < 4:
            return
        idx, fr, okp = self.registered_obs(trk)
        Rs, ts, uv = self._obs_arrays(fr, okp)
        for _ in range(cfg.refine_iterations):
            for g in window:
                kp, tg = obs[g]
                if len(tg) < 4:
                    continue
                R, t = refine_pose(self.R[g], self.t[g], self.X[tg], self.frames[g].keypoints[kp], self.intr,
                                   iterations=1, huber=cfg.huber)
                self.R[g], self.t[g] = R, t
                own = fr == g
                Rs[own], ts[own] = R, t
            self.X[trk] = refine_points(self.X[trk], idx, Rs, ts, uv, self.intr, iterations=1, huber=cfg.huber)
        err = self._errors(self.X[trk], idx, Rs, ts, uv)
        bad = err > cfg.inlier_threshold
        self._deactivate(fr[bad], okp[bad])
        self._prune_points(trk)

    # -- phases ----------------------------------------------------------
    def initialize(self, matches):
        cfg = self.cfg
        # rank by match count among pairs whose median image flow already suggests enough parallax
        flow_min = np.radians(cfg.seed_min_parallax_deg) * self.intr.fx
        counts = []
        for fa, fb, ia, ib in matches:
            ok = len(ia) >= cfg.seed_min_points
            if ok:
                # small rotations shift the whole image; parallax shows up as spread around that shift
                flow = self.frames[fb].keypoints[ib] - self.frames[fa].keypoints[ia]
                ok = np.median(np.linalg.norm(flow - np.median(flow, axis=0), axis=1)) >= flow_min
            counts.append(len(ia) if ok else 0)
        order = sorted(range(len(matches)), key=lambda i: (-counts[i], i))
        for i in order[:cfg.seed_candidates]:
            fa, fb, ia, ib = matches[i]
            if counts[i] == 0:
                break
            ta = self.tr.track_of[self.tr.node(fa, ia)]
            tb = self.tr.track_of[self.tr.node(fb, ib)]
            keep = (ta >= 0) & (ta == tb)
            ia, ib, trk = ia[keep], ib[keep], ta[keep]
            uva, uvb = self.frames[fa].keypoints[ia], self.frames[fb].keypoints[ib]
            rel = relative_pose(uva, uvb, self.intr, cfg.inlier_threshold, self.rng)
            if rel is None:
                continue
            R, t, inl = rel
            I3, z3 = np.eye(3), np.zeros(3)
            X, par, ea, eb = triangulate_many(I3, z3, R, t, uva[inl], uvb[inl], self.intr, refine_steps=2)
            good = (ea <= cfg.inlier_threshold) & (eb <= cfg.inlier_threshold) & (par >= cfg.point_min_parallax_deg)
            if good.sum() < cfg.seed_min_points or np.median(par[np.isfinite(ea) & np.isfinite(eb)]) < cfg.seed_min_parallax_deg:
                continue
            self.R[fa], self.t[fa] = I3, z3
            self.R[fb], self.t[fb] = R, t
            self.order += [fa, fb]
            trk = trk[inl][good]
            self.X[trk] = X[good]
            self.has[trk] = True
            self.refine_local(fb)
            log.info("seed pair %d-%d with %d points", self.frames[fa].frame_id, self.frames[fb].frame_id,
                     int(self.has.sum()))
            return fa, fb
        raise SeedFailureError("no frame pair has enough matches with sufficient parallax")

    def register_next(self, failed: set[int]) -> int | None:
        best, best_n = None, 0
        for f in range(len(self.frames)):
            if f in self.R or f in failed:
                continue
            _, trk = self.frame_obs(f)
            n = int(self.has[trk].sum())
            if n > best_n:
                best, best_n = f, n
        if best is None or best_n < self.cfg.min_registration_inliers:
            return None
        f = best
        kp, trk = self.frame_obs(f)
        m = self.has[trk]
        kp, trk = kp[m], trk[m]
        rc = RansacConfig(inlier_threshold=self.cfg.inlier_threshold, max_iterations=self.cfg.ransac_iterations,
                          min_inliers=self.cfg.min_registration_inliers, top_k=max(100, self.cfg.min_registration_inliers))
        res = ransac_pnp(self.X[trk], self.frames[f].keypoints[kp], self.intr, rc, seed=self.cfg.seed + f)
        if not res.success:
            failed.add(f)
            return -1
        self.R[f], self.t[f] = res.pose.R, res.pose.t
        self.order.append(f)
        self._deactivate(np.full((~res.inliers).sum(), f), kp[~res.inliers])
        self.triangulate_new(f)
        self.refine_local(f)
        return f

    def triangulate_new(self, f: int):
        cfg = self.cfg
        kp, trk = self.frame_obs(f)
        m = ~self.has[trk]
        kp, trk = kp[m], trk[m]
        if not len(trk):
            return
        idx, fr, okp = self.registered_obs(trk)
        other = fr != f
        idx, fr, okp = idx[other], fr[other], okp[other]
        if not len(idx):
            return
        # partner = registered observation farthest from f in sequence order
        fid = np.array([self.frames[x].frame_id for x in fr])
        gap = np.abs(fid - self.frames[f].frame_id)
        order = np.lexsort((-gap, idx))
        first = np.ones(len(order), bool)
        first[1:] = idx[order][1:] != idx[order][:-1]
        sel = order[first]
        p_idx, p_fr, p_kp = idx[sel], fr[sel], okp[sel]
        new = []
        for g in np.unique(p_fr):
            mm = p_fr == g
            li = p_idx[mm]
            X, par, ea, eb = triangulate_many(self.R[f], self.t[f], self.R[g], self.t[g],
                                              self.frames[f].keypoints[kp[li]],
                                              self.frames[g].keypoints[p_kp[mm]], self.intr, refine_steps=2)
            ok = (ea <= cfg.inlier_threshold) & (eb <= cfg.inlier_threshold) & (par >= cfg.point_min_parallax_deg)
            self.X[trk[li[ok]]] = X[ok]
            self.has[trk[li[ok]]] = True
            new.append(trk[li[ok]])
        if not new:
            return
        new = np.concatenate(new)
        idx, fr, okp = self.registered_obs(new)
        Rs, ts, uv = self._obs_arrays(fr, okp)
        bad = self._errors(self.X[new], idx, Rs, ts, uv) > cfg.inlier_threshold
        self._deactivate(fr[bad], okp[bad])
        self._prune_points(new)

    def finalize(self) -> tuple[list[MapPoint], dict[int, Pose]]:
        trk = np.flatnonzero(self.has)
        idx, fr, kp = self.registered_obs(trk)
        Rs, ts, uv = self._obs_arrays(fr, kp)
        bad = self._errors(self.X[trk], idx, Rs, ts, uv) > self.cfg.inlier_threshold
        self._deactivate(fr[bad], kp[bad])
        self._prune_points(trk)
        trk = np.flatnonzero(self.has)
        idx, fr, kp = self.registered_obs(trk)
        order = np.lexsort((fr, idx))
        idx, fr, kp = idx[order], fr[order], kp[order]
        bounds = np.searchsorted(idx, np.arange(len(trk) + 1))
        points = []
        for pid, t in enumerate(trk):
            s, e = bounds[pid], bounds[pid + 1]
            obs = [(int(self.frames[a].frame_id), int(b)) for a, b in zip(fr[s:e], kp[s:e])]
            desc = np.stack([self.frames[a].descriptors[b] for a, b in zip(fr[s:e], kp[s:e])])
            points.append(MapPoint(pid, self.X[t].copy(), obs, desc))
        poses = {self.frames[f].frame_id: Pose.from_rt(self.R[f], self.t[f]) for f in sorted(self.R)}
        return points, poses


def reconstruct(frames: list[SurveyFrame], pairs: list[PairTask], intrinsics: CameraIntrinsics,
                config: SfmConfig | None = None) -> Model3D:
    """Unaligned, uncompressed model from survey frames and scheduled pairs."""
    config = config or SfmConfig()
    frames = sorted(frames, key=lambda f: f.frame_id)
    if len(frames) < 2:
        raise SeedFailureError("need at least two frames")
    matches = _match_all(frames, pairs, config.ratio_threshold, config.threads)
    tracks = _Tracks(frames, matches)
    rec = _Reconstruction(frames, intrinsics, tracks, config)
    rec.initialize(matches)
    failed: set[int] = set()
    while True:
        f = rec.register_next(failed)
        if f is None:
            break
    log.info("registered %d of %d frames", len(rec.R), len(frames))
    points, poses = rec.finalize()
    return Model3D(points, poses, intrinsics)
