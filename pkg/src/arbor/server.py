"""HTTP service backing the annotation tool: images, versioned annotation
documents, lazily computed flow fields, endpoint-guided traces, epipolar
lines, and reprojection overlays of the current 3D model.

Endpoints (all coordinates in source-image pixels):

    GET  /images                     image registry with annotation versions
    GET  /images/{id}                raw PNG/JPEG bytes
    GET  /annotations/{id}           {"version": n, "annotation": doc|null}
    PUT  /annotations/{id}           body {"expected_version", "annotation"};
                                     409 stale version, 422 violations
    GET  /epipolar/{pair}/{x}/{y}    line coefficients in the pair's second
                                     image for a pixel in its first
    POST /trace/{id}                 body {"p0", "p1", "params"?, "flow"?};
                                     guided medial-axis trace
    GET  /flow/{id}                  flow field as FFLD bytes
    GET  /overlay/{id}               3D model reprojected into the image

Writes use optimistic concurrency: each annotation document carries a
version that increases by one per accepted write, and a PUT whose
expected_version does not match is rejected with 409 leaving the store
untouched. Mutations serialize per image id; reads see complete documents
because files are replaced atomically.

Flow fields are computed from the image's branch mask (a precomputed mask
file when the store has one, otherwise the current annotation rasterized on
demand) and cached on disk in the FFLD format. The cache key hashes both
the flow parameters and the mask content, so responses stay pure functions
of store state and request even as annotations evolve.
"""

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from PIL import Image

from .annotation import (ImageAnnotation, annotation_from_dict,
                         annotation_to_dict, rasterize_mask, validate)
from .camera import epipolar_line, fundamental_matrix, project_many, read_cameras
from .errors import ArborError, EmptyMask
from .flowfield import (DEFAULT_N, DEFAULT_SCALES, DEFAULT_THRESHOLD,
                        compute_flow, flow_to_bytes, grid_corner_radius,
                        make_bank, read_flow)
from .medialaxis import TraceParams, trace
from .multiview import read_branches

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
VERSIONS_NAME = "versions.json"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


@dataclass
class FlowSpec:
    """Kernel-bank and extraction parameters for one flow computation."""

    r: float = 4.0
    sigma: float = 1.8
    n: int = DEFAULT_N
    scales: tuple = DEFAULT_SCALES
    threshold: float = DEFAULT_THRESHOLD

    def key(self) -> str:
        blob = json.dumps(
            {"r": self.r, "sigma": self.sigma, "n": self.n,
             "scales": list(self.scales), "threshold": self.threshold},
            sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def merged(self, overrides: dict | None) -> "FlowSpec":
        if not overrides:
            return self
        known = {"r", "sigma", "n", "scales", "threshold"}
        bad = set(overrides) - known
        if bad:
            raise ValueError(f"unknown flow parameters: {sorted(bad)}")
        vals = {"r": self.r, "sigma": self.sigma, "n": self.n,
                "scales": self.scales, "threshold": self.threshold}
        vals.update(overrides)
        return FlowSpec(float(vals["r"]), float(vals["sigma"]),
                        int(vals["n"]), tuple(float(s) for s in vals["scales"]),
                        float(vals["threshold"]))


@dataclass
class AnnotationStore:
    """Disk-backed state shared by all request handlers.

    images_dir holds the photographs, annotations_dir the working documents
    (plain annotation JSON so the reconstruction pipeline can consume the
    directory directly; versions live in a sidecar under state_dir).
    masks_dir and model_path are optional: without masks, flow falls back to
    rasterizing the current annotation; without a model, overlays answer 409.
    """

    images_dir: Path
    annotations_dir: Path
    cameras_path: Path
    state_dir: Path
    masks_dir: Path | None = None
    model_path: Path | None = None
    flow: FlowSpec = field(default_factory=FlowSpec)
    flow_computations: int = 0  # cache-audit counter, grows on real work only

    def __post_init__(self):
        self.images_dir = Path(self.images_dir)
        self.annotations_dir = Path(self.annotations_dir)
        self.cameras_path = Path(self.cameras_path)
        self.state_dir = Path(self.state_dir)
        if self.masks_dir is not None:
            self.masks_dir = Path(self.masks_dir)
        if self.model_path is not None:
            self.model_path = Path(self.model_path)
        for p in (self.images_dir, self.cameras_path):
            if not p.exists():
                raise FileNotFoundError(str(p))
        self.annotations_dir.mkdir(parents=True, exist_ok=True)
        (self.state_dir / "flow").mkdir(parents=True, exist_ok=True)
        self.cameras = {c.id: c for c in read_cameras(self.cameras_path)}
        self._lock = threading.Lock()
        self._image_locks: dict = {}
        self._flow_locks: dict = {}
        self._versions = self._load_versions()

    @classmethod
    def open(cls, root) -> "AnnotationStore":
        """Conventional layout: images/, annotations/, cameras.json under
        one root, optional masks/ and branches.json, state in .state/."""
        root = Path(root)
        masks = root / "masks"
        model = root / "branches.json"
        return cls(root / "images", root / "annotations", root / "cameras.json",
                   root / ".state",
                   masks_dir=masks if masks.is_dir() else None,
                   model_path=model if model.is_file() else None)

    # -- registry ----------------------------------------------------------

    def image_ids(self) -> list:
        ids = {p.stem for p in self.images_dir.iterdir()
               if p.suffix.lower() in IMAGE_SUFFIXES}
        return sorted(ids)

    def image_path(self, image_id: str) -> Path | None:
        for suffix in IMAGE_SUFFIXES:
            p = self.images_dir / (image_id + suffix)
            if p.is_file():
                return p
        return None

    def annotation_path(self, image_id: str) -> Path:
        return self.annotations_dir / (image_id + ".json")

    def _image_lock(self, image_id: str) -> threading.Lock:
        with self._lock:
            return self._image_locks.setdefault(image_id, threading.Lock())

    # -- versions ------------------------------------------------------------

    def _load_versions(self) -> dict:
        p = self.state_dir / VERSIONS_NAME
        if p.is_file():
            return {k: int(v) for k, v in json.loads(p.read_text()).items()}
        return {}

    def _save_versions(self) -> None:
        blob = json.dumps(self._versions, indent=2, sort_keys=True) + "\n"
        _atomic_write(self.state_dir / VERSIONS_NAME, blob.encode())

    def version(self, image_id: str) -> int:
        with self._lock:
            if image_id in self._versions:
                return self._versions[image_id]
        # documents that predate the sidecar (e.g. a pipeline fixture) count
        # as version 1 so a fresh client can still write version 2
        return 1 if self.annotation_path(image_id).is_file() else 0

    def annotation(self, image_id: str) -> ImageAnnotation | None:
        p = self.annotation_path(image_id)
        if not p.is_file():
            return None
        return annotation_from_dict(json.loads(p.read_text()))

    def put_annotation(self, image_id: str, ann: ImageAnnotation,
                       expected_version: int) -> int:
        """Persist atomically; returns the new version. Caller validates."""
        with self._image_lock(image_id):
            current = self.version(image_id)
            if expected_version != current:
                raise StaleVersion(current)
            blob = json.dumps(annotation_to_dict(ann), indent=2) + "\n"
            _atomic_write(self.annotation_path(image_id), blob.encode())
            with self._lock:
                self._versions[image_id] = current + 1
                self._save_versions()
            return current + 1

    # -- flow ------------------------------------------------------------------

    def mask(self, image_id: str) -> np.ndarray | None:
        """Branch mask as uint8 0/1: the precomputed file when present,
        else the current annotation rasterized."""
        if self.masks_dir is not None:
            for suffix in IMAGE_SUFFIXES:
                p = self.masks_dir / (image_id + suffix)
                if p.is_file():
                    return (np.asarray(Image.open(p).convert("L")) > 0).astype(np.uint8)
        ann = self.annotation(image_id)
        if ann is not None:
            return rasterize_mask(ann)
        return None

    def flow_field(self, image_id: str, spec: FlowSpec):
        """Compute or load the cached flow for (image, spec, mask content)."""
        mask = self.mask(image_id)
        if mask is None:
            raise EmptyMask(f"no mask or annotation for image '{image_id}'")
        mask_digest = hashlib.sha256(mask.tobytes()).hexdigest()
        key = hashlib.sha256((spec.key() + mask_digest).encode()).hexdigest()[:24]
        cache = self.state_dir / "flow" / f"{image_id}__{key}.ffld"
        with self._lock:
            lock = self._flow_locks.setdefault(cache.name, threading.Lock())
        with lock:
            if cache.is_file():
                return read_flow(cache)
            # grid-radius falloff: the verbatim falloff inverts aligned responses
            bank = make_bank(r=spec.r, sigma=spec.sigma, N=spec.n,
                             falloff_radius=grid_corner_radius(spec.n))
            flow = compute_flow(mask, bank, scales=spec.scales,
                                threshold=spec.threshold)
            with self._lock:
                self.flow_computations += 1
            _atomic_write(cache, flow_to_bytes(flow))
            return flow

    # -- model -----------------------------------------------------------------

    def model(self):
        if self.model_path is None or not self.model_path.is_file():
            return None
        return read_branches(self.model_path)


class StaleVersion(Exception):
    def __init__(self, current: int):
        super().__init__(f"store is at version {current}")
        self.current = current


# -- overlay geometry -------------------------------------------------------------


def _model_chains(branch) -> list:
    """Maximal vertex paths whose interior vertices have degree 2."""
    adj = branch.adjacency()
    degree = {v: len(nb) for v, nb in adj.items()}
    anchors = [v for v, d in degree.items() if d != 2]
    chains = []
    visited = set()
    for a in sorted(anchors):
        for b in sorted(adj[a]):
            if (a, b) in visited:
                continue
            chain = [a]
            prev, cur = a, b
            visited.add((a, b))
            while True:
                chain.append(cur)
                if degree[cur] != 2:
                    visited.add((cur, prev))
                    break
                nxt = next(n for n in adj[cur] if n != prev)
                visited.add((cur, nxt))
                prev, cur = cur, nxt
            chains.append(chain)
    if not chains and branch.vertices:  # pure cycle: walk it once
        start = min(adj)
        chain = [start]
        prev, cur = start, sorted(adj[start])[0]
        while cur != start:
            chain.append(cur)
            nxt = next(n for n in adj[cur] if n != prev)
            prev, cur = cur, nxt
        chain.append(start)
        chains.append(chain)
    return chains


def overlay_polylines(branch, camera) -> list:
    """Project the branch graph; vertices behind the camera split chains
    into the visible runs, runs shorter than two points are dropped."""
    vm = branch.vertex_map()
    out = []
    for chain in _model_chains(branch):
        pts = np.stack([vm[v].position for v in chain])
        px, valid = project_many(camera, pts)
        run_ids: list = []
        runs = []
        for i, ok in enumerate(valid):
            if ok:
                run_ids.append(i)
            elif run_ids:
                runs.append(run_ids)
                run_ids = []
        if run_ids:
            runs.append(run_ids)
        for run in runs:
            if len(run) < 2:
                continue
            out.append({
                "points": [[float(px[i, 0]), float(px[i, 1])] for i in run],
                "thickness": [
                    None if vm[chain[i]].thickness is None
                    else float(vm[chain[i]].thickness)
                    for i in run
                ],
            })
    return out


# -- application ------------------------------------------------------------------


def create_app(store: AnnotationStore) -> FastAPI:
    app = FastAPI(title="arbor annotation service")

    def require_image(image_id: str) -> Path:
        p = store.image_path(image_id)
        if p is None:
            raise HTTPException(404, {"error": "unknown-image",
                                      "detail": image_id})
        return p

    @app.get("/images")
    def list_images():
        out = []
        for image_id in store.image_ids():
            with Image.open(store.image_path(image_id)) as im:
                width, height = im.size
            out.append({"id": image_id, "width": width, "height": height,
                        "version": store.version(image_id)})
        return {"images": out}

    @app.get("/images/{image_id}")
    def get_image(image_id: str):
        p = require_image(image_id)
        media = "image/png" if p.suffix.lower() == ".png" else "image/jpeg"
        return Response(content=p.read_bytes(), media_type=media)

    @app.get("/annotations/{image_id}")
    def get_annotation(image_id: str):
        require_image(image_id)
        ann = store.annotation(image_id)
        return {"version": store.version(image_id),
                "annotation": None if ann is None else annotation_to_dict(ann)}

    @app.put("/annotations/{image_id}")
    def put_annotation(image_id: str, body: dict):
        require_image(image_id)
        if "annotation" not in body or "expected_version" not in body:
            raise HTTPException(422, {
                "violations": [{"rule": "MalformedRequest", "subject": "body",
                                "detail": "need annotation and expected_version"}]})
        try:
            ann = annotation_from_dict(body["annotation"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, {
                "violations": [{"rule": "MalformedDocument",
                                "subject": "annotation", "detail": str(exc)}]})
        violations = [
            {"rule": v.rule, "subject": v.subject, "detail": v.detail}
            for v in validate(ann)
        ]
        if ann.image_id != image_id:
            violations.append({"rule": "ImageIdMismatch", "subject": "annotation",
                               "detail": f"document is for '{ann.image_id}'"})
        if violations:
            raise HTTPException(422, {"violations": violations})
        try:
            version = store.put_annotation(image_id, ann,
                                           int(body["expected_version"]))
        except StaleVersion as exc:
            raise HTTPException(409, {"error": "stale-version",
                                      "current": exc.current})
        return {"version": version}

    @app.get("/epipolar/{pair}/{x}/{y}")
    def get_epipolar(pair: str, x: float, y: float):
        if ":" not in pair:
            raise HTTPException(422, {"error": "bad-pair",
                                      "detail": "expected '<src>:<dst>'"})
        src, dst = pair.split(":", 1)
        for cam_id in (src, dst):
            if cam_id not in store.cameras:
                raise HTTPException(404, {"error": "unknown-camera",
                                          "detail": cam_id})
        try:
            F = fundamental_matrix(store.cameras[src], store.cameras[dst])
        except ArborError as exc:
            raise HTTPException(422, {"error": type(exc).__name__,
                                      "detail": str(exc)})
        a, b, c = (float(v) for v in epipolar_line(F, (x, y)))
        return {"pair": [src, dst], "pixel": [x, y], "line": [a, b, c]}

    @app.post("/trace/{image_id}")
    def post_trace(image_id: str, body: dict):
        require_image(image_id)
        try:
            p0 = tuple(float(v) for v in body["p0"])
            p1 = tuple(float(v) for v in body["p1"])
            if len(p0) != 2 or len(p1) != 2:
                raise ValueError("endpoints must be [x, y]")
            spec = store.flow.merged(body.get("flow"))
            params = TraceParams(**body.get("params", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, {"error": "bad-request", "detail": str(exc)})
        try:
            flow = store.flow_field(image_id, spec)
            result = trace(flow, p0, p1, params)
        except ArborError as exc:
            raise HTTPException(422, {"error": type(exc).__name__,
                                      "detail": str(exc)})
        return {
            "points": [[float(p[0]), float(p[1])] for p in result.points],
            "thickness": [float(t) for t in result.thicknesses],
            "termination": result.termination,
        }

    @app.get("/flow/{image_id}")
    def get_flow(image_id: str, r: float | None = None,
                 sigma: float | None = None, n: int | None = None,
                 scales: str | None = None, threshold: float | None = None):
        require_image(image_id)
        overrides = {}
        if r is not None:
            overrides["r"] = r
        if sigma is not None:
            overrides["sigma"] = sigma
        if n is not None:
            overrides["n"] = n
        if threshold is not None:
            overrides["threshold"] = threshold
        if scales is not None:
            overrides["scales"] = [float(s) for s in scales.split(",")]
        try:
            flow = store.flow_field(image_id, store.flow.merged(overrides))
        except ArborError as exc:
            raise HTTPException(422, {"error": type(exc).__name__,
                                      "detail": str(exc)})
        return Response(content=flow_to_bytes(flow),
                        media_type="application/octet-stream")

    @app.get("/overlay/{image_id}")
    def get_overlay(image_id: str):
        require_image(image_id)
        model = store.model()
        if model is None or not model.vertices:
            raise HTTPException(409, {"error": "no-model",
                                      "detail": "no 3D branches reconstructed yet"})
        ann = store.annotation(image_id)
        camera_id = ann.camera_id if ann is not None else image_id
        camera = store.cameras.get(camera_id)
        if camera is None:
            raise HTTPException(409, {"error": "no-camera",
                                      "detail": camera_id})
        return {"image_id": image_id, "camera_id": camera_id,
                "polylines": overlay_polylines(model, camera)}

    return app


def app() -> FastAPI:
    """Factory for `uvicorn arbor.server:app --factory`; the store root
    comes from ARBOR_SERVER_ROOT."""
    root = os.environ.get("ARBOR_SERVER_ROOT")
    if not root:
        raise RuntimeError("set ARBOR_SERVER_ROOT to the store directory")
    return create_app(AnnotationStore.open(root))
