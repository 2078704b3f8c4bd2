"""Command line pipeline driver: raw captures to simulation-ready trees.

Usage:
    arbor <stage> --config cfg.json [--out DIR] [--seed N] [--force]

Stages run individually or end to end with `all`:

    sync         cross-correlate video feeds into per-feed frame offsets
    rasterize    annotation documents -> binary branch masks
    dataset      sample segmentation training crops from image/mask pairs
    flow         directional-kernel orientation field for every mask
    trace        endpoint-guided medial-axis traces for every annotation
    triangulate  multi-view keypoint triangulation and topology transfer
    skeleton     spline-resampled simulation skeleton
    skin         generalized-cylinder surface mesh
    displace     pull the mesh onto the scanned point cloud
    texture      per-vertex colors from the point cloud
    bind         attach leftover cloud points to skeleton edges
    export       rigid-body and joint model for a physics engine

Configuration is a single JSON file; `--out` and `--seed` override the
corresponding config entries (flags win over the file). Input paths are
resolved relative to the config file's directory and must exist when the
config is loaded; the output and mask directories are created on demand.
Video feeds are NumPy .npy frame stacks.

Every artifact is written atomically (temp file + rename) into the output
directory, and manifest.json records parameters, seeds, and content hashes
of each stage's inputs and outputs. Rerunning a stage whose recorded
hashes still match is a no-op unless --force is given, so an interrupted
pipeline restarts where it stopped. A lock file serializes pipelines per
output directory. Exit codes: 0 success, 1 runtime failure, 2 bad
configuration; failures print one machine-readable JSON object to stderr.
ARBOR_THREADS caps intra-stage parallelism.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from . import __version__
from .annotation import crop_window, gen_crops, rasterize_mask, read_annotation
from .camera import read_cameras
from .errors import (ArborError, ConfigError, MissingStageInput, OutputLocked)
from .flowfield import (DEFAULT_N, DEFAULT_SCALES, DEFAULT_THRESHOLD,
                        compute_flow, grid_corner_radius, make_bank, read_flow,
                        write_flow)
from .heightfield import displace_mesh, smooth
from .medialaxis import TERMINATION_REACHED, TraceParams, trace
from .multiview import (_keypoint_paths, clamp_narrow_baseline,
                        estimate_all_radii, read_branches, subdivide_curves,
                        transfer_topology, triangulate_keypoints,
                        validate_branch, write_branches)
from .pointcloud import read_ply
from .rigging import bind_orphan_points, export_rigid_bodies, write_rigid_model
from .skeleton import read_skeleton, skeleton_from_branches, write_skeleton
from .skinning import read_obj, skin_skeleton, write_obj
from .texturing import texture_nearest
from .videosync import best_offset, frame_diff_sequence

STAGES = ["sync", "rasterize", "dataset", "flow", "trace", "triangulate",
          "skeleton", "skin", "displace", "texture", "bind", "export"]

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".arbor.lock"


# -- configuration -------------------------------------------------------------

_PATH_KEYS = {"cameras", "annotations", "images", "masks", "cloud", "videos",
              "output"}
_TOP_KEYS = {"paths", "flow", "trace", "sync", "dataset", "root_keypoint",
             "subdivisions", "clamp_alpha", "skinning", "displacement",
             "density", "joint_stiffness", "joint_damping", "seed"}


def _invalid(detail) -> ConfigError:
    return ConfigError("CONFIG_VALUE_INVALID", detail)


def _num(name, value, lo=None, hi=None, integer=False, exclusive=False):
    """Range-checked numeric config entry (bool is not a number here)."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _invalid(f"{name} must be a number, got {value!r}")
    if integer and not isinstance(value, int):
        raise _invalid(f"{name} must be an integer, got {value!r}")
    if lo is not None and (value <= lo if exclusive else value < lo):
        raise _invalid(f"{name} out of range: {value}")
    if hi is not None and value > hi:
        raise _invalid(f"{name} out of range: {value}")
    return value


def _reject_unknown(section, leftover) -> None:
    if leftover:
        raise _invalid(f"unknown {section} keys: {sorted(leftover)}")


class PipelineConfig:
    """Validated pipeline configuration with input paths checked on disk."""

    def __init__(self, raw, base, out_override=None, seed_override=None):
        if not isinstance(raw, dict):
            raise _invalid("config root must be a JSON object")
        _reject_unknown("config", set(raw) - _TOP_KEYS)
        paths = raw.get("paths")
        if not isinstance(paths, dict):
            raise _invalid("paths section is required")
        _reject_unknown("paths", set(paths) - _PATH_KEYS)

        self.base = Path(base)
        self.cameras = self._input(paths, "cameras", directory=False)
        self.annotations_dir = self._input(paths, "annotations", directory=True)
        self.images_dir = self._input(paths, "images", directory=True)
        self.cloud = self._input(paths, "cloud", directory=False)
        self.videos = []
        videos = paths.get("videos", [])
        if not isinstance(videos, list):
            raise _invalid("paths.videos must be a list")
        for i, v in enumerate(videos):
            p = self.base / v
            if not p.is_file():
                raise ConfigError("CONFIG_PATH_MISSING", f"paths.videos[{i}]: {p}")
            self.videos.append(p)
        if out_override is not None:
            self.out_dir = Path(out_override)
        elif "output" in paths:
            self.out_dir = self.base / paths["output"]
        else:
            raise _invalid("paths.output is required")
        # masks are a stage product by default but may live anywhere
        if "masks" in paths:
            self.masks_dir = self.base / paths["masks"]
        else:
            self.masks_dir = self.out_dir / "masks"

        flow = dict(raw.get("flow", {}))
        self.flow_r = _num("flow.r", flow.pop("r", 4.0), lo=0, exclusive=True)
        self.flow_sigma = _num("flow.sigma", flow.pop("sigma", 1.8),
                               lo=0, exclusive=True)
        self.flow_n = _num("flow.N", flow.pop("N", DEFAULT_N), lo=3, integer=True)
        scales = flow.pop("scales", list(DEFAULT_SCALES))
        if not isinstance(scales, list) or not scales:
            raise _invalid("flow.scales must be a non-empty list")
        self.flow_scales = tuple(
            _num(f"flow.scales[{i}]", s, lo=0, hi=1, exclusive=True)
            for i, s in enumerate(scales))
        self.flow_threshold = _num("flow.threshold",
                                   flow.pop("threshold", DEFAULT_THRESHOLD),
                                   lo=0, hi=1, exclusive=True)
        _reject_unknown("flow", flow)

        tr = dict(raw.get("trace", {}))
        self.trace_step = _num("trace.step", tr.pop("step", 2.0),
                               lo=0, exclusive=True)
        self.trace_max_steps = _num("trace.max_steps", tr.pop("max_steps", 2000),
                                    lo=1, integer=True)
        _reject_unknown("trace", tr)

        sync = dict(raw.get("sync", {}))
        self.sync_max_lag = _num("sync.max_lag", sync.pop("max_lag", 100),
                                 lo=1, integer=True)
        _reject_unknown("sync", sync)

        self.seed = (seed_override if seed_override is not None
                     else _num("seed", raw.get("seed", 0), integer=True))
        ds = dict(raw.get("dataset", {}))
        self.dataset_count = _num("dataset.count", ds.pop("count", 8),
                                  lo=1, integer=True)
        ds_seed = ds.pop("seed", None)
        if seed_override is not None:
            self.dataset_seed = seed_override
        elif ds_seed is not None:
            self.dataset_seed = _num("dataset.seed", ds_seed, integer=True)
        else:
            self.dataset_seed = self.seed
        _reject_unknown("dataset", ds)

        self.root_keypoint = raw.get("root_keypoint")
        if self.root_keypoint is not None and not isinstance(self.root_keypoint, str):
            raise _invalid("root_keypoint must be a string")
        self.subdivisions = _num("subdivisions", raw.get("subdivisions", 0),
                                 lo=0, integer=True)
        self.clamp_alpha = _num("clamp_alpha", raw.get("clamp_alpha", 0.9),
                                lo=0, hi=1)

        sk = dict(raw.get("skinning", {}))
        self.ring_sides = _num("skinning.ring_sides", sk.pop("ring_sides", 16),
                               lo=3, integer=True)
        self.samples_per_segment = _num("skinning.samples_per_segment",
                                        sk.pop("samples_per_segment", 4),
                                        lo=1, integer=True)
        _reject_unknown("skinning", sk)

        disp = dict(raw.get("displacement", {}))
        self.sample_radius = _num("displacement.sample_radius",
                                  disp.pop("sample_radius", 0.05),
                                  lo=0, exclusive=True)
        self.sample_height = _num("displacement.sample_height",
                                  disp.pop("sample_height", 0.1),
                                  lo=0, exclusive=True)
        self.smooth_iterations = _num("displacement.smooth_iterations",
                                      disp.pop("smooth_iterations", 0),
                                      lo=0, integer=True)
        self.smooth_lambda = _num("displacement.smooth_lambda",
                                  disp.pop("smooth_lambda", 0.5),
                                  lo=0, hi=1, exclusive=True)
        _reject_unknown("displacement", disp)

        self.density = _num("density", raw.get("density", 1000.0),
                            lo=0, exclusive=True)
        self.joint_stiffness = _num("joint_stiffness",
                                    raw.get("joint_stiffness", 0.0), lo=0)
        self.joint_damping = _num("joint_damping",
                                  raw.get("joint_damping", 0.0), lo=0)

        self._anns = None

    def _input(self, paths, key, directory):
        if key not in paths:
            raise _invalid(f"paths.{key} is required")
        p = self.base / paths[key]
        ok = p.is_dir() if directory else p.is_file()
        if not ok:
            raise ConfigError("CONFIG_PATH_MISSING", f"paths.{key}: {p}")
        return p

    def annotation_files(self) -> list:
        files = sorted(self.annotations_dir.glob("*.json"))
        if not files:
            raise MissingStageInput(
                f"no annotation documents in {self.annotations_dir}")
        return files

    def annotations(self) -> list:
        if self._anns is None:
            self._anns = [read_annotation(p) for p in self.annotation_files()]
        return self._anns

    def mask_path(self, image_id) -> Path:
        return self.masks_dir / f"{image_id}.png"

    def image_path(self, image_id) -> Path:
        for ext in (".png", ".jpg", ".jpeg"):
            p = self.images_dir / (image_id + ext)
            if p.is_file():
                return p
        raise MissingStageInput(f"no image file for {image_id} in {self.images_dir}")


def load_config(path, out_override=None, seed_override=None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("CONFIG_PATH_MISSING", f"config file: {path}")
    with open(path) as f:
        raw = json.load(f)
    return PipelineConfig(raw, path.parent, out_override, seed_override)


# -- atomic artifact IO --------------------------------------------------------

def _atomic(path, writer) -> None:
    """Run writer against a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_json_atomic(path, obj) -> None:
    def writer(tmp):
        with open(tmp, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
    _atomic(path, writer)


def _write_png_atomic(path, array) -> None:
    _atomic(path, lambda tmp: Image.fromarray(array).save(tmp, format="PNG"))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- output directory lock -----------------------------------------------------

def _lock_owner(lock):
    try:
        return int(lock.read_text().strip())
    except (OSError, ValueError):
        return None


def _pid_alive(pid) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextlib.contextmanager
def _output_lock(out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    fd = None
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            owner = _lock_owner(lock)
            if owner is not None and owner != os.getpid() and _pid_alive(owner):
                raise OutputLocked(
                    f"output directory locked by pid {owner}: {lock}")
            # lock left behind by a dead process; reclaim and retry once
            with contextlib.suppress(FileNotFoundError):
                lock.unlink()
    if fd is None:
        raise OutputLocked(f"could not acquire {lock}")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# -- stages ----------------------------------------------------------------

def _run_sync(cfg) -> list:
    if len(cfg.videos) < 2:
        raise MissingStageInput("sync needs at least two entries in paths.videos")
    series = [frame_diff_sequence(np.load(p)) for p in cfg.videos]
    offsets = {cfg.videos[0].name: 0}
    for path, s in zip(cfg.videos[1:], series[1:]):
        offsets[path.name] = int(best_offset(series[0], s, cfg.sync_max_lag))
    out = cfg.out_dir / "sync.json"
    _write_json_atomic(out, {"reference": cfg.videos[0].name, "offsets": offsets})
    return [out]


def _run_rasterize(cfg) -> list:
    outs = []
    for ann in cfg.annotations():
        mask = rasterize_mask(ann)
        path = cfg.mask_path(ann.image_id)
        _write_png_atomic(path, mask * np.uint8(255))
        outs.append(path)
    return outs


def _run_dataset(cfg) -> list:
    outs, records = [], []
    for i, ann in enumerate(cfg.annotations()):
        image = np.asarray(Image.open(cfg.image_path(ann.image_id)))
        mask = np.asarray(Image.open(cfg.mask_path(ann.image_id))) > 0
        specs = gen_crops(image, mask.astype(np.uint8), cfg.dataset_count,
                          cfg.dataset_seed + i,
                          image_id=ann.image_id, mask_id=ann.image_id)
        for j, spec in enumerate(specs):
            rows, cols = crop_window(spec)
            img_path = cfg.out_dir / "crops" / f"{spec.image_id}_{j:02d}.png"
            msk_path = cfg.out_dir / "crops" / f"{spec.image_id}_{j:02d}_mask.png"
            _write_png_atomic(img_path, image[rows, cols])
            _write_png_atomic(msk_path,
                              mask[rows, cols].astype(np.uint8) * np.uint8(255))
            records.append({"image_id": spec.image_id, "mask_id": spec.mask_id,
                            "center": list(spec.center), "size": spec.size,
                            "image": img_path.name, "mask": msk_path.name})
            outs += [img_path, msk_path]
    index = cfg.out_dir / "dataset.json"
    _write_json_atomic(index, {"crops": records})
    return outs + [index]


def _run_flow(cfg) -> list:
    # grid-radius falloff: the verbatim falloff inverts aligned responses
    bank = make_bank(r=cfg.flow_r, sigma=cfg.flow_sigma, N=cfg.flow_n,
                     falloff_radius=grid_corner_radius(cfg.flow_n))
    outs = []
    for ann in cfg.annotations():
        mask = np.asarray(Image.open(cfg.mask_path(ann.image_id))) > 0
        flow = compute_flow(mask, bank=bank, scales=cfg.flow_scales,
                            threshold=cfg.flow_threshold)
        path = cfg.out_dir / "flow" / f"{ann.image_id}.ffld"
        _atomic(path, lambda tmp, fl=flow: write_flow(fl, tmp))
        outs.append(path)
    return outs


def _try_trace(flow, va, vb, params):
    try:
        return trace(flow, (va.x, va.y), (vb.x, vb.y), params), None
    except ArborError as exc:
        return None, type(exc).__name__


def _pick_trace(fwd, rev):
    """Prefer the attempt that reached its endpoint, then the longer one."""
    if rev is None:
        return fwd, False
    if fwd is None:
        return rev, True
    fwd_ok = fwd.termination == TERMINATION_REACHED
    rev_ok = rev.termination == TERMINATION_REACHED
    if fwd_ok != rev_ok:
        return (rev, True) if rev_ok else (fwd, False)
    return (rev, True) if len(rev.points) > len(fwd.points) else (fwd, False)


def _run_trace(cfg) -> list:
    """Trace every keypoint-pair curve, reseeding from the far endpoint
    when the first attempt dies early (junction pixels often carry no flow)."""
    params = TraceParams(step=cfg.trace_step, max_steps=cfg.trace_max_steps)
    outs = []
    for ann in cfg.annotations():
        flow = read_flow(cfg.out_dir / "flow" / f"{ann.image_id}.ffld")
        vm = ann.vertex_map()
        curves = []
        for kp_a, kp_b, path in _keypoint_paths(ann):
            va, vb = vm[path[0]], vm[path[-1]]
            entry = {"keypoints": [kp_a, kp_b]}
            fwd, fwd_err = _try_trace(flow, va, vb, params)
            if fwd is not None and fwd.termination == TERMINATION_REACHED:
                poly, rev = fwd, False
            else:
                poly, rev = _pick_trace(fwd, _try_trace(flow, vb, va, params)[0])
            if poly is None:
                entry["failed"] = fwd_err
            else:
                entry["reversed"] = rev
                entry["termination"] = poly.termination
                entry["points"] = poly.points.tolist()
                entry["thickness"] = poly.thicknesses.tolist()
            curves.append(entry)
        out = cfg.out_dir / "traces" / f"{ann.image_id}.json"
        _write_json_atomic(out, {"image_id": ann.image_id, "curves": curves})
        outs.append(out)
    return outs


def _run_triangulate(cfg) -> list:
    cams = read_cameras(cfg.cameras)
    anns = cfg.annotations()
    keypoints, tri_report = triangulate_keypoints(anns, cams)
    radii_report = estimate_all_radii(keypoints, cams)
    branch = transfer_topology(anns, keypoints)
    by_kp = {v.keypoint: v.id for v in branch.vertices if v.keypoint is not None}
    if cfg.root_keypoint is None or cfg.root_keypoint not in by_kp:
        raise ConfigError(
            "CONFIG_VALUE_INVALID",
            f"root_keypoint {cfg.root_keypoint!r} is not a triangulated keypoint")
    root_id = by_kp[cfg.root_keypoint]
    branch.roots = [root_id]
    branch, sub_report = subdivide_curves(branch, anns, cams, cfg.subdivisions)
    branch = clamp_narrow_baseline(branch, root_id, anns, cams, cfg.clamp_alpha)
    out = cfg.out_dir / "branches.json"
    _atomic(out, lambda tmp: write_branches(branch, tmp))
    report = cfg.out_dir / "triangulate_report.json"
    _write_json_atomic(report, {"triangulation": tri_report,
                                "radii": radii_report,
                                "subdivision": sub_report,
                                "structure": validate_branch(branch)})
    return [out, report]


def _run_skeleton(cfg) -> list:
    branch = read_branches(cfg.out_dir / "branches.json")
    skel = skeleton_from_branches(branch,
                                  samples_per_segment=cfg.samples_per_segment)
    out = cfg.out_dir / "skeleton.json"
    _atomic(out, lambda tmp: write_skeleton(skel, tmp))
    return [out]


def _run_skin(cfg) -> list:
    skel = read_skeleton(cfg.out_dir / "skeleton.json")
    mesh = skin_skeleton(skel, ring_sides=cfg.ring_sides)
    out = cfg.out_dir / "mesh.obj"
    _atomic(out, lambda tmp: write_obj(mesh, tmp))
    return [out]


def _run_displace(cfg) -> list:
    mesh = read_obj(cfg.out_dir / "mesh.obj")
    cloud = read_ply(cfg.cloud)
    displaced, report = displace_mesh(mesh, cloud,
                                      cfg.sample_radius, cfg.sample_height)
    if cfg.smooth_iterations > 0:
        displaced = smooth(displaced, cfg.smooth_iterations, cfg.smooth_lambda)
    out = cfg.out_dir / "displaced.obj"
    _atomic(out, lambda tmp: write_obj(displaced, tmp))
    report_path = cfg.out_dir / "displace_report.json"
    _write_json_atomic(report_path, {"report": report})
    return [out, report_path]


def _run_texture(cfg) -> list:
    mesh = read_obj(cfg.out_dir / "displaced.obj")
    cloud = read_ply(cfg.cloud)
    mesh.colors = texture_nearest(mesh, cloud)
    out = cfg.out_dir / "textured.obj"
    _atomic(out, lambda tmp: write_obj(mesh, tmp))
    return [out]


def _run_bind(cfg) -> list:
    skel = read_skeleton(cfg.out_dir / "skeleton.json")
    cloud = read_ply(cfg.cloud)
    bindings = bind_orphan_points(cloud, skel)
    out = cfg.out_dir / "bindings.json"
    _write_json_atomic(out, {"bindings": [
        {"point": b.point, "edge": b.edge, "local": b.local.tolist(),
         "distance": b.distance} for b in bindings]})
    return [out]


def _run_export(cfg) -> list:
    skel = read_skeleton(cfg.out_dir / "skeleton.json")
    model = export_rigid_bodies(skel, cfg.density,
                                cfg.joint_stiffness, cfg.joint_damping)
    out = cfg.out_dir / "rigid_bodies.json"
    _atomic(out, lambda tmp: write_rigid_model(model, tmp))
    return [out]


@dataclass(frozen=True)
class _StageDef:
    inputs: Callable    # cfg -> input paths, all must exist before running
    params: Callable    # cfg -> JSON-native parameter dict for the manifest
    run: Callable       # cfg -> output paths, each under cfg.out_dir
    seeded: bool = False


_REGISTRY = {
    "sync": _StageDef(
        inputs=lambda cfg: list(cfg.videos),
        params=lambda cfg: {"max_lag": cfg.sync_max_lag},
        run=_run_sync),
    "rasterize": _StageDef(
        inputs=lambda cfg: cfg.annotation_files(),
        params=lambda cfg: {},
        run=_run_rasterize),
    "dataset": _StageDef(
        inputs=lambda cfg: (cfg.annotation_files()
                            + [cfg.image_path(a.image_id) for a in cfg.annotations()]
                            + [cfg.mask_path(a.image_id) for a in cfg.annotations()]),
        params=lambda cfg: {"count": cfg.dataset_count},
        run=_run_dataset, seeded=True),
    "flow": _StageDef(
        inputs=lambda cfg: [cfg.mask_path(a.image_id) for a in cfg.annotations()],
        params=lambda cfg: {"r": cfg.flow_r, "sigma": cfg.flow_sigma,
                            "N": cfg.flow_n, "scales": list(cfg.flow_scales),
                            "threshold": cfg.flow_threshold},
        run=_run_flow),
    "trace": _StageDef(
        inputs=lambda cfg: (cfg.annotation_files()
                            + [cfg.out_dir / "flow" / f"{a.image_id}.ffld"
                               for a in cfg.annotations()]),
        params=lambda cfg: {"step": cfg.trace_step,
                            "max_steps": cfg.trace_max_steps},
        run=_run_trace),
    "triangulate": _StageDef(
        inputs=lambda cfg: [cfg.cameras] + cfg.annotation_files(),
        params=lambda cfg: {"root_keypoint": cfg.root_keypoint,
                            "subdivisions": cfg.subdivisions,
                            "clamp_alpha": cfg.clamp_alpha},
        run=_run_triangulate),
    "skeleton": _StageDef(
        inputs=lambda cfg: [cfg.out_dir / "branches.json"],
        params=lambda cfg: {"samples_per_segment": cfg.samples_per_segment},
        run=_run_skeleton),
    "skin": _StageDef(
        inputs=lambda cfg: [cfg.out_dir / "skeleton.json"],
        params=lambda cfg: {"ring_sides": cfg.ring_sides},
        run=_run_skin),
    "displace": _StageDef(
        inputs=lambda cfg: [cfg.out_dir / "mesh.obj", cfg.cloud],
        params=lambda cfg: {"sample_radius": cfg.sample_radius,
                            "sample_height": cfg.sample_height,
                            "smooth_iterations": cfg.smooth_iterations,
                            "smooth_lambda": cfg.smooth_lambda},
        run=_run_displace),
    "texture": _StageDef(
        inputs=lambda cfg: [cfg.out_dir / "displaced.obj", cfg.cloud],
        params=lambda cfg: {},
        run=_run_texture),
    "bind": _StageDef(
        inputs=lambda cfg: [cfg.out_dir / "skeleton.json", cfg.cloud],
        params=lambda cfg: {},
        run=_run_bind),
    "export": _StageDef(
        inputs=lambda cfg: [cfg.out_dir / "skeleton.json"],
        params=lambda cfg: {"density": cfg.density,
                            "stiffness": cfg.joint_stiffness,
                            "damping": cfg.joint_damping},
        run=_run_export),
}


# -- stage runner ----------------------------------------------------------

def _load_manifest(out_dir) -> dict:
    path = out_dir / MANIFEST_NAME
    if not path.is_file():
        return {"tool_version": __version__, "stages": {}}
    with open(path) as f:
        data = json.load(f)
    data["tool_version"] = __version__
    data.setdefault("stages", {})
    return data


def _input_key(cfg, path) -> str:
    path = Path(path)
    for root in (cfg.out_dir, cfg.base):
        if path.is_relative_to(root):
            return path.relative_to(root).as_posix()
    return Path(os.path.relpath(path, cfg.base)).as_posix()


def _outputs_intact(cfg, entry) -> bool:
    outputs = entry.get("outputs", {})
    if not outputs:
        return False
    for rel, digest in outputs.items():
        p = cfg.out_dir / rel
        if not p.is_file() or _sha256(p) != digest:
            return False
    return True


def _run_stage(cfg, name, manifest, force) -> bool:
    spec = _REGISTRY[name]
    inputs = [Path(p) for p in spec.inputs(cfg)]
    missing = [str(p) for p in inputs if not p.is_file()]
    if missing:
        raise MissingStageInput(f"{name}: missing inputs: {missing}")
    in_hashes = {_input_key(cfg, p): _sha256(p) for p in inputs}
    params = spec.params(cfg)
    seed = cfg.dataset_seed if spec.seeded else None
    entry = manifest["stages"].get(name)
    if (not force and entry is not None
            and entry.get("inputs") == in_hashes
            and entry.get("params") == params
            and entry.get("seed") == seed
            and _outputs_intact(cfg, entry)):
        print(f"{name}: up to date")
        return False
    outputs = [Path(p) for p in spec.run(cfg)]
    out_hashes = {p.relative_to(cfg.out_dir).as_posix(): _sha256(p)
                  for p in outputs}
    manifest["stages"][name] = {"inputs": in_hashes, "params": params,
                                "seed": seed, "outputs": out_hashes}
    _write_json_atomic(cfg.out_dir / MANIFEST_NAME, manifest)
    print(f"{name}: wrote {len(outputs)} artifact(s)")
    return True


def run(stage, cfg, force=False) -> None:
    """Run one stage (or every stage, in order) under the output dir lock."""
    names = STAGES if stage == "all" else [stage]
    with _output_lock(cfg.out_dir):
        manifest = _load_manifest(cfg.out_dir)
        for name in names:
            _run_stage(cfg, name, manifest, force)


# -- entry point ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage mistakes must surface as machine-readable config errors
    def error(self, message):
        raise ConfigError("CONFIG_USAGE", message)


def _parse_args(argv):
    parser = _Parser(prog="arbor",
                     description="multi-view tree reconstruction pipeline")
    parser.add_argument("stage", choices=STAGES + ["all"])
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--out", default=None, help="override paths.output")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--force", action="store_true",
                        help="rerun stages whose outputs are already current")
    return parser.parse_args(argv)


def _emit_error(code, detail, exit_code) -> int:
    json.dump({"error": code, "detail": str(detail)}, sys.stderr)
    sys.stderr.write("\n")
    return exit_code


def main(argv=None) -> int:
    try:
        args = _parse_args(argv)
        cfg = load_config(args.config, out_override=args.out,
                          seed_override=args.seed)
        run(args.stage, cfg, force=args.force)
    except ConfigError as exc:
        return _emit_error(exc.code, exc.detail, 2)
    except ArborError as exc:
        return _emit_error(type(exc).__name__, str(exc), 1)
    except json.JSONDecodeError as exc:
        return _emit_error("CONFIG_PARSE", str(exc), 2)
    except OSError as exc:
        return _emit_error("IO_ERROR", str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
