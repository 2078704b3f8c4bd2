"""Annotation service tests: versioned writes, lazy flow with cache audit,
guided traces matching direct library calls, epipolar lines, and overlays."""

import json
import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from arbor.annotation import (AnnotationVertex, ImageAnnotation,
                              annotation_to_dict, rasterize_mask)
from arbor.camera import (Camera, Extrinsics, Intrinsics, epipolar_line,
                          fundamental_matrix, project, project_many,
                          write_cameras)
from arbor.flowfield import (compute_flow, grid_corner_radius, make_bank,
                             read_flow)
from arbor.medialaxis import TraceParams, trace
from arbor.multiview import Branch3D, BranchVertex, write_branches
from arbor.server import AnnotationStore, FlowSpec, create_app

from helpers import looking_at_camera

WIDTH, HEIGHT = 256, 128


def band_doc(image_id="cam0", y=64.0, thickness=3.0):
    """Horizontal stroke spanning most of the image."""
    return ImageAnnotation(image_id, image_id, WIDTH, HEIGHT,
                           [AnnotationVertex(0, 12.0, y, thickness),
                            AnnotationVertex(1, 243.0, y, thickness)],
                           [(0, 1)])


@pytest.fixture()
def store(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "annotations").mkdir()
    for image_id in ("cam0", "cam1"):
        Image.fromarray(np.zeros((HEIGHT, WIDTH, 3), dtype=np.uint8)).save(
            tmp_path / "images" / f"{image_id}.png")
    cams = [looking_at_camera(f"cam{i}", [8 * np.cos(a), 1.0, 8 * np.sin(a)],
                              [0.0, 0.0, 0.0],
                              intr={"fx": 200.0, "fy": 200.0, "cx": 128.0,
                                    "cy": 64.0, "width": WIDTH,
                                    "height": HEIGHT})
            for i, a in enumerate([0.0, 0.9])]
    write_cameras(cams, tmp_path / "cameras.json")
    return AnnotationStore(tmp_path / "images", tmp_path / "annotations",
                           tmp_path / "cameras.json", tmp_path / ".state",
                           flow=FlowSpec(scales=(1.0,)))


@pytest.fixture()
def client(store):
    return TestClient(create_app(store))


class TestRegistry:
    def test_images_listed_with_dimensions(self, client):
        body = client.get("/images").json()
        assert [im["id"] for im in body["images"]] == ["cam0", "cam1"]
        assert all(im["width"] == WIDTH and im["height"] == HEIGHT
                   for im in body["images"])
        assert all(im["version"] == 0 for im in body["images"])

    def test_image_bytes_roundtrip(self, client, store):
        r = client.get("/images/cam0")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert r.content == store.image_path("cam0").read_bytes()

    def test_unknown_image_404(self, client):
        for url in ("/images/ghost", "/annotations/ghost", "/flow/ghost",
                    "/overlay/ghost"):
            assert client.get(url).status_code == 404
        r = client.post("/trace/ghost", json={"p0": [0, 0], "p1": [1, 1]})
        assert r.status_code == 404


class TestAnnotationWrites:
    def test_put_bumps_version(self, client):
        doc = annotation_to_dict(band_doc())
        r = client.put("/annotations/cam0",
                       json={"expected_version": 0, "annotation": doc})
        assert r.status_code == 200 and r.json() == {"version": 1}
        body = client.get("/annotations/cam0").json()
        assert body["version"] == 1
        assert body["annotation"] == doc

    def test_versions_strictly_increase(self, client):
        doc = annotation_to_dict(band_doc())
        for expected in range(3):
            r = client.put("/annotations/cam0",
                           json={"expected_version": expected,
                                 "annotation": doc})
            assert r.json()["version"] == expected + 1

    def test_stale_write_rejected_store_unchanged(self, client):
        first = annotation_to_dict(band_doc(y=60.0))
        second = annotation_to_dict(band_doc(y=70.0))
        client.put("/annotations/cam0",
                   json={"expected_version": 0, "annotation": first})
        r = client.put("/annotations/cam0",
                       json={"expected_version": 0, "annotation": second})
        assert r.status_code == 409
        assert r.json()["detail"]["current"] == 1
        body = client.get("/annotations/cam0").json()
        assert body["version"] == 1
        assert body["annotation"] == first

    def test_degree_four_rejected(self, client):
        ann = ImageAnnotation("cam0", "cam0", WIDTH, HEIGHT,
                              [AnnotationVertex(i, 20.0 * (i + 1), 64.0, 2.0)
                               for i in range(5)],
                              [(0, 1), (0, 2), (0, 3), (0, 4)])
        r = client.put("/annotations/cam0",
                       json={"expected_version": 0,
                             "annotation": annotation_to_dict(ann)})
        assert r.status_code == 422
        rules = {v["rule"] for v in r.json()["detail"]["violations"]}
        assert "DegreeViolation" in rules
        assert client.get("/annotations/cam0").json()["annotation"] is None

    def test_image_id_mismatch_rejected(self, client):
        doc = annotation_to_dict(band_doc(image_id="cam1"))
        r = client.put("/annotations/cam0",
                       json={"expected_version": 0, "annotation": doc})
        assert r.status_code == 422
        rules = {v["rule"] for v in r.json()["detail"]["violations"]}
        assert "ImageIdMismatch" in rules

    def test_malformed_document_rejected(self, client):
        r = client.put("/annotations/cam0",
                       json={"expected_version": 0,
                             "annotation": {"vertices": "nope"}})
        assert r.status_code == 422

    def test_concurrent_writers_serialize(self, store):
        """Same expected version from many threads: exactly one write wins."""
        doc = band_doc()
        results = []

        def writer():
            try:
                results.append(store.put_annotation("cam0", doc, 0))
            except Exception as exc:  # StaleVersion
                results.append(type(exc).__name__)

        threads = [threading.Thread(target=writer) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results.count(1) == 1
        assert results.count("StaleVersion") == 7
        assert store.version("cam0") == 1


class TestTrace:
    P0, P1 = [30.0, 64.0], [225.0, 64.0]

    def put_band(self, client):
        doc = annotation_to_dict(band_doc())
        assert client.put("/annotations/cam0",
                          json={"expected_version": 0,
                                "annotation": doc}).status_code == 200

    def test_trace_matches_direct_library_call(self, client, store):
        self.put_band(client)
        r = client.post("/trace/cam0",
                        json={"p0": self.P0, "p1": self.P1,
                              "params": {"step": 2.0}})
        assert r.status_code == 200
        body = r.json()
        assert body["termination"] == "reached-endpoint"

        spec = store.flow
        bank = make_bank(r=spec.r, sigma=spec.sigma, N=spec.n,
                         falloff_radius=grid_corner_radius(spec.n))
        flow = compute_flow(rasterize_mask(band_doc()), bank,
                            scales=spec.scales, threshold=spec.threshold)
        direct = trace(flow, tuple(self.P0), tuple(self.P1),
                       TraceParams(step=2.0))
        assert np.array_equal(np.asarray(body["points"]), direct.points)
        assert np.array_equal(np.asarray(body["thickness"]),
                              direct.thicknesses)
        assert body["termination"] == direct.termination

    def test_empty_region_422(self, client):
        self.put_band(client)
        r = client.post("/trace/cam0", json={"p0": [5.0, 5.0],
                                             "p1": [100.0, 5.0]})
        assert r.status_code == 422
        assert r.json()["detail"]["error"] == "NoFlowAtStart"

    def test_no_annotation_no_mask_422(self, client):
        r = client.post("/trace/cam0", json={"p0": self.P0, "p1": self.P1})
        assert r.status_code == 422
        assert r.json()["detail"]["error"] == "EmptyMask"

    def test_repeat_request_hits_cache_identical_body(self, client, store):
        self.put_band(client)
        payload = {"p0": self.P0, "p1": self.P1, "params": {"step": 2.0}}
        first = client.post("/trace/cam0", json=payload)
        computed_once = store.flow_computations
        second = client.post("/trace/cam0", json=payload)
        assert computed_once == 1
        assert store.flow_computations == 1
        assert first.content == second.content

    def test_annotation_edit_invalidates_cache(self, client, store):
        self.put_band(client)
        payload = {"p0": self.P0, "p1": self.P1}
        client.post("/trace/cam0", json=payload)
        moved = annotation_to_dict(band_doc(y=66.0))
        client.put("/annotations/cam0",
                   json={"expected_version": 1, "annotation": moved})
        client.post("/trace/cam0", json=payload)
        assert store.flow_computations == 2

    def test_bad_params_422(self, client):
        self.put_band(client)
        r = client.post("/trace/cam0",
                        json={"p0": self.P0, "p1": self.P1,
                              "params": {"step": -1.0}})
        assert r.status_code == 422

    def test_distinct_images_compute_concurrently(self, client, store):
        for image_id in ("cam0", "cam1"):
            doc = annotation_to_dict(band_doc(image_id=image_id))
            client.put(f"/annotations/{image_id}",
                       json={"expected_version": 0, "annotation": doc})
        errors = []

        def compute(image_id):
            try:
                store.flow_field(image_id, store.flow)
            except Exception as exc:
                errors.append(exc)

        threads = [threading.Thread(target=compute, args=(i,))
                   for i in ("cam0", "cam1")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert store.flow_computations == 2


class TestFlowEndpoint:
    def test_ffld_bytes_parse_to_direct_computation(self, client, store):
        doc = annotation_to_dict(band_doc())
        client.put("/annotations/cam0",
                   json={"expected_version": 0, "annotation": doc})
        r = client.get("/flow/cam0")
        assert r.status_code == 200
        assert r.headers["content-type"] == "application/octet-stream"
        got = read_flow(r.content)

        spec = store.flow
        bank = make_bank(r=spec.r, sigma=spec.sigma, N=spec.n,
                         falloff_radius=grid_corner_radius(spec.n))
        want = compute_flow(rasterize_mask(band_doc()), bank,
                            scales=spec.scales, threshold=spec.threshold)
        assert np.array_equal(got.count, want.count)
        assert np.array_equal(got.vectors, want.vectors)

    def test_param_overrides_change_cache_key(self, client, store):
        doc = annotation_to_dict(band_doc())
        client.put("/annotations/cam0",
                   json={"expected_version": 0, "annotation": doc})
        client.get("/flow/cam0")
        client.get("/flow/cam0?threshold=0.5")
        assert store.flow_computations == 2
        client.get("/flow/cam0?threshold=0.5")
        assert store.flow_computations == 2

    def test_precomputed_mask_preferred(self, tmp_path, store):
        mask = np.zeros((HEIGHT, WIDTH), dtype=np.uint8)
        mask[60:66, 10:240] = 255
        masks = tmp_path / "premasks"
        masks.mkdir()
        Image.fromarray(mask).save(masks / "cam0.png")
        store.masks_dir = masks
        got = store.mask("cam0")
        assert np.array_equal(got, (mask > 0).astype(np.uint8))


class TestEpipolar:
    def test_projection_of_point_lies_on_line(self, client, store):
        P = np.array([0.3, -0.2, 0.4])
        x1 = project(store.cameras["cam0"], P)
        x2 = project(store.cameras["cam1"], P)
        r = client.get(f"/epipolar/cam0:cam1/{x1[0]}/{x1[1]}")
        assert r.status_code == 200
        a, b, c = r.json()["line"]
        dist = abs(a * x2[0] + b * x2[1] + c) / np.hypot(a, b)
        assert dist < 1e-6

    def test_matches_direct_fundamental_matrix(self, client, store):
        F = fundamental_matrix(store.cameras["cam0"], store.cameras["cam1"])
        want = epipolar_line(F, (100.0, 50.0))
        got = client.get("/epipolar/cam0:cam1/100.0/50.0").json()["line"]
        assert np.allclose(got, want, atol=1e-12)

    def test_unknown_camera_404(self, client):
        assert client.get("/epipolar/cam0:ghost/1.0/1.0").status_code == 404

    def test_malformed_pair_422(self, client):
        assert client.get("/epipolar/cam0cam1/1.0/1.0").status_code == 422


def y_model():
    verts = [BranchVertex(0, np.array([0.0, 1.0, 0.0]), 0.05, "base"),
             BranchVertex(1, np.array([0.0, 0.0, 0.0]), 0.04),
             BranchVertex(2, np.array([0.4, -0.8, 0.1]), 0.03, "tip-a"),
             BranchVertex(3, np.array([-0.4, -0.9, -0.1]), 0.03, "tip-b")]
    return Branch3D(verts, [(0, 1), (1, 2), (1, 3)], roots=[0])


class TestOverlay:
    def test_no_model_409(self, client):
        r = client.get("/overlay/cam0")
        assert r.status_code == 409
        assert r.json()["detail"]["error"] == "no-model"

    def test_polylines_match_direct_projection(self, client, store, tmp_path):
        model = y_model()
        path = tmp_path / "branches.json"
        write_branches(model, path)
        store.model_path = path
        r = client.get("/overlay/cam0")
        assert r.status_code == 200
        body = r.json()
        assert body["camera_id"] == "cam0"
        assert len(body["polylines"]) == 3  # base-fork, fork-tip-a, fork-tip-b

        cam = store.cameras["cam0"]
        vm = model.vertex_map()
        seen = {}
        for poly in body["polylines"]:
            for pt in poly["points"]:
                seen[tuple(np.round(pt, 3))] = pt
        for v in model.vertices:
            want = project(cam, v.position)
            key = tuple(np.round(want, 3))
            assert key in seen, v.id
            assert np.allclose(seen[key], want, atol=1e-6)

    def test_thickness_carried_per_point(self, client, store, tmp_path):
        path = tmp_path / "branches.json"
        write_branches(y_model(), path)
        store.model_path = path
        body = client.get("/overlay/cam0").json()
        for poly in body["polylines"]:
            assert len(poly["thickness"]) == len(poly["points"])
            assert all(t > 0 for t in poly["thickness"])

    def test_behind_camera_vertices_clipped(self, client, store, tmp_path):
        cam = store.cameras["cam0"]
        behind = cam.center + cam.view_axis * -2.0
        verts = [BranchVertex(0, np.array([0.0, 0.5, 0.0]), 0.05, "a"),
                 BranchVertex(1, np.array([0.0, -0.5, 0.0]), 0.04),
                 BranchVertex(2, behind, 0.03, "b")]
        chain = Branch3D(verts, [(0, 1), (1, 2)], roots=[0])
        path = tmp_path / "branches.json"
        write_branches(chain, path)
        store.model_path = path
        body = client.get("/overlay/cam0").json()
        assert len(body["polylines"]) == 1
        pts = body["polylines"][0]["points"]
        assert len(pts) == 2  # the behind-camera endpoint is dropped
        want = np.stack([project(cam, verts[0].position),
                         project(cam, verts[1].position)])
        assert np.allclose(np.asarray(pts), want, atol=1e-6)


class TestStoreLayout:
    def test_conventional_open(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "annotations").mkdir()
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(
            tmp_path / "images" / "a.png")
        cam = Camera("a", Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8),
                     Extrinsics(np.eye(3), np.zeros(3)))
        write_cameras([cam], tmp_path / "cameras.json")
        store = AnnotationStore.open(tmp_path)
        assert store.image_ids() == ["a"]
        assert store.masks_dir is None
        assert store.model_path is None
        assert (tmp_path / ".state" / "flow").is_dir()

    def test_versions_survive_reopen(self, tmp_path, store):
        store.put_annotation("cam0", band_doc(), 0)
        reopened = AnnotationStore(store.images_dir, store.annotations_dir,
                                   store.cameras_path, store.state_dir,
                                   flow=store.flow)
        assert reopened.version("cam0") == 1

    def test_preexisting_document_counts_as_version_one(self, tmp_path, store):
        # a fixture dropped in by hand, no sidecar entry
        blob = json.dumps(annotation_to_dict(band_doc(image_id="cam1")))
        (store.annotations_dir / "cam1.json").write_text(blob)
        assert store.version("cam1") == 1
        new = store.put_annotation("cam1", band_doc(image_id="cam1"), 1)
        assert new == 2
