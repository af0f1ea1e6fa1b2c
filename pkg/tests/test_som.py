import itertools

import numpy as np
import pytest

from oddvox.errors import ExternalServiceError, ValidationError
from oddvox.geometry import ObjectBox3D
from oddvox.scenegen import Camera, build_scene, look_at
from oddvox.som import (
    PALETTE,
    PROMPT,
    HttpChatClient,
    Mark,
    MockClient,
    ReplayClient,
    annotate,
    build_prompt,
    evaluate_som,
    parse_reply,
    project_box2d,
    scene_marks,
    scene_request,
)

from oracles import project_oracle

EXPECTED_PROMPT = (
    "Here is a list of images taken from multiple view-points of the same scene, each object is annotated with "
    "an index and the bounding box, one or more objects are different from the majority of all other objects, "
    "reply only with a list of indices of the odd objects"
)


def test_prompt_bytes():
    assert PROMPT.encode() == EXPECTED_PROMPT.encode()


def test_prompt_attaches_views_in_order():
    views = [np.full((4, 4, 3), k, dtype=np.uint8) for k in range(3)]
    req = build_prompt(views)
    assert req.prompt == PROMPT
    assert [int(v[0, 0, 0]) for v in req.images] == [0, 1, 2]
    msg = req.messages()[0]["content"]
    assert msg[0] == {"type": "text", "text": PROMPT}
    assert [p["type"] for p in msg[1:]] == ["image_url"] * 3


def test_empty_prompt_rejected():
    with pytest.raises(ValidationError):
        build_prompt([])


# --- projection -------------------------------------------------------------------


def _camera(eye, target=(0, 0, 0), f=40.0, size=64):
    R, t = look_at(eye, target)
    return Camera(f, f, size / 2, size / 2, R, t, size, size)


def test_centred_box_projects_around_principal_point():
    cam = _camera((0.0, -3.0, 0.0))
    b2, outside = project_box2d(ObjectBox3D((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5)), cam)
    assert not outside
    assert (b2[0] + b2[2]) / 2 == pytest.approx(32.0)
    assert (b2[1] + b2[3]) / 2 == pytest.approx(32.0)


def test_box_behind_camera_is_outside():
    cam = _camera((0.0, -3.0, 0.0))
    b2, outside = project_box2d(ObjectBox3D((-0.5, -6.0, -0.5), (0.5, -5.0, 0.5)), cam)
    assert outside and b2 is None


def _corner_oracle(box, cam):
    pts = []
    for corner in itertools.product(*zip(box.min, box.max)):
        p = project_oracle(cam.K, cam.R, cam.t, corner)
        if p is not None:
            pts.append(p[:2])
    if not pts:
        return None
    us, vs = [p[0] for p in pts], [p[1] for p in pts]
    u0, u1 = min(max(min(us), 0.0), cam.width), min(max(max(us), 0.0), cam.width)
    v0, v1 = min(max(min(vs), 0.0), cam.height), min(max(max(vs), 0.0), cam.height)
    if u1 <= u0 or v1 <= v0:
        return None
    return u0, v0, u1, v1


def test_box_projection_matches_corner_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(150):
        eye = rng.normal(size=3)
        eye = eye / np.linalg.norm(eye) * rng.uniform(1.0, 3.0)
        eye[2] = abs(eye[2]) + 0.3
        cam = _camera(eye, rng.normal(scale=0.2, size=3), f=rng.uniform(20, 60))
        lo = rng.uniform(-1.5, 1.0, size=3)
        box = ObjectBox3D(tuple(lo), tuple(lo + rng.uniform(0.05, 0.8, size=3)))
        got, outside = project_box2d(box, cam)
        want = _corner_oracle(box, cam)
        assert outside == (want is None)
        if want is not None:
            np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)
            checked += 1
    assert checked >= 100


# --- marks and annotation -------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    return build_scene(3, 0)


def test_mark_indices_consistent_across_views(scene):
    views = scene_marks(scene.boxes, scene.cameras, seed=5)
    colors = {}
    for marks in views:
        idx = [m.index for m in marks]
        assert len(idx) == len(set(idx))
        for m in marks:
            colors.setdefault(m.index, m.color)
            assert colors[m.index] == m.color
    assert sorted(colors) == list(range(1, len(scene.boxes) + 1))
    for cam, marks in zip(scene.cameras, views):
        for m in marks:
            centre = np.mean(scene.boxes[m.index - 1].corners(), axis=0)
            p = project_oracle(cam.K, cam.R, cam.t, centre)
            u0, v0, u1, v1 = m.box2d
            assert u0 <= p[0] <= u1 and v0 <= p[1] <= v1


def test_colours_distinct_within_scene(scene):
    views = scene_marks(scene.boxes, scene.cameras, seed=1)
    cols = [m.color for m in views[0]]
    assert len(set(cols)) == len(cols)
    assert all(c in PALETTE for c in cols)


def test_annotate_without_marks_is_identity():
    img = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    np.testing.assert_array_equal(annotate(img, []), img)


def test_edge_pixel_takes_mark_colour():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    out = annotate(img, [Mark(3, (4.0, 6.0, 20.0, 24.0), (10, 200, 30))])
    assert tuple(out[6, 10]) == (10, 200, 30)
    assert tuple(out[15, 4]) == (10, 200, 30)
    assert tuple(out[15, 19]) == (10, 200, 30)
    assert tuple(out[15, 12]) == (0, 0, 0)


def test_annotation_draws_the_numeral():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    out = annotate(img, [Mark(1, (0.0, 0.0, 31.0, 31.0), (255, 0, 0))], thickness=1)
    # the "1" glyph's vertical stroke, column 2 of the glyph at x = 0 + 1 + 1
    assert all(tuple(out[y, 4]) == (255, 0, 0) for y in range(3, 9))


def test_annotation_deterministic(scene):
    a = scene_request(scene, seed=4)
    b = scene_request(scene, seed=4)
    assert a.image_digests() == b.image_digests()
    c = scene_request(scene, seed=5)
    assert a.image_digests() != c.image_digests()


# --- parser ------------------------------------------------------------------------

PARSER_FIXTURES = [
    ("[2, 5]", {2, 5}),
    ("[3]", {3}),
    ("3", {3}),
    ("none", set()),
    ("", set()),
    ("The odd objects are 3 and 7.", {3, 7}),
    ("Object 4 is different.", {4}),
    ("4, 6", {4, 6}),
    ("Indices: 1; 2; 9", {1, 2, 9}),
    ("```\n[5]\n```", {5}),
    ('{"odd": [2, 3]}', {2, 3}),
    ("2 and 2 again", {2}),
    ("#6", {6}),
    ("odd ones: (1), (8)", {1, 8}),
    ("I think object number 12 stands out", {12}),
    ("No object is anomalous.", set()),
    ("- 3\n- 5\n", {3, 5}),
    ("[ 7 ,8 ]", {7, 8}),
    ("3.", {3}),
    ("objects #2 & #11", {2, 11}),
    ("index0", {0}),
    ("The answer is [10]", {10}),
]


@pytest.mark.parametrize("text,expected", PARSER_FIXTURES)
def test_parser_fixtures(text, expected):
    assert parse_reply(text)[0] == expected


def test_parser_drops_out_of_range():
    found, dropped = parse_reply("[0, 2, 9]", n_objects=5)
    assert found == {2} and dropped == 2


# --- end to end -------------------------------------------------------------------


@pytest.fixture(scope="module")
def scenes():
    return [build_scene(11, k) for k in range(4)]


def _oracle_mock(scenes):
    return MockClient({s.name: "[" + ", ".join(str(i + 1) for i, y in enumerate(s.labels) if y) + "]" for s in scenes})


def test_oracle_mock_scores_one(scenes):
    rep = evaluate_som(scenes, _oracle_mock(scenes))
    assert rep["accuracy"] == 1.0
    assert rep["client"] == "mock"


def test_empty_replies_score_base_rate(scenes):
    rep = evaluate_som(scenes, MockClient(default="none"))
    labels = np.concatenate([s.labels for s in scenes])
    assert rep["accuracy"] == pytest.approx(np.mean(labels == 0))
    assert rep["per_type"]["normalcy"] == 1.0


def test_transcript_replay(scenes, tmp_path):
    rng = np.random.default_rng(0)
    mock = MockClient({s.name: f"[{rng.integers(1, 4)}]" for s in scenes})
    path = tmp_path / "t.jsonl"
    first = evaluate_som(scenes, mock, transcript=path)
    replay = evaluate_som(scenes, ReplayClient(path))
    first.pop("client"), replay.pop("client")
    assert first == replay


def test_replay_rejects_changed_request(scenes, tmp_path):
    path = tmp_path / "t.jsonl"
    evaluate_som(scenes, MockClient(), seed=0, transcript=path)
    with pytest.raises(ExternalServiceError, match="differs"):
        evaluate_som(scenes, ReplayClient(path), seed=1)


def test_concurrent_queries_keep_order(scenes):
    mock = _oracle_mock(scenes)
    assert evaluate_som(scenes, mock, concurrency=3) == evaluate_som(scenes, mock)


def test_labels_not_read_before_parsing(scenes):
    class Guarded:
        def __init__(self, s):
            self._s = s
            self.name, self.boxes, self.cameras, self.images = s.name, s.boxes, s.cameras, s.images

        @property
        def labels(self):
            raise AssertionError("labels consulted")

    guarded = [Guarded(s) for s in scenes]
    from oddvox.som import query_scenes

    results = query_scenes(guarded, MockClient(default="[1]"))
    assert all(r.predicted == {1} for r in results)


def test_http_client_needs_key(monkeypatch):
    monkeypatch.delenv("ODDVOX_CHAT_API_KEY", raising=False)
    with pytest.raises(ExternalServiceError, match="ODDVOX_CHAT_API_KEY"):
        HttpChatClient()
