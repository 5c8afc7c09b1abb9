import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sami.autodiff.nn import Linear
from sami.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from sami.data import Corpus, SceneConfig, generate_scene, generate_split, load_corpus, scene_rng, write_corpus
from sami.errors import ConfigError, ContractError, CorruptionError, DimensionError, InputError, ParseError
from sami.imageio import decode_pnm, encode_pnm, load_image, save_image
from sami.metrics import iou, sample_points_in_mask, tightest_box


# -- metrics ------------------------------------------------------------------------------

def test_iou_examples():
    a = np.zeros((8, 8), bool)
    a[1:4, 1:4] = True
    b = np.zeros((8, 8), bool)
    b[2:5, 2:5] = True
    assert iou(a, b) == pytest.approx(4 / 14)
    assert iou(a, a) == 1.0
    c = np.zeros((8, 8), bool)
    c[0:2, 0:2] = True
    d = np.zeros((8, 8), bool)
    d[2:4, 2:4] = True
    assert iou(c, d) == 0.0


def test_iou_empty_conventions():
    z = np.zeros((4, 4), bool)
    one = z.copy()
    one[0, 0] = True
    assert iou(z, z) == 1.0
    assert iou(z, one) == 0.0


def test_iou_shape_mismatch():
    with pytest.raises(ContractError):
        iou(np.zeros((4, 4)), np.zeros((4, 5)))


masks = arrays(bool, (9, 11))


@settings(max_examples=200)
@given(masks, masks)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    if a.any() or b.any():
        assert (v == 1.0) == bool(np.array_equal(a, b))


def _scan_iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += int(x and y)
        union += int(x or y)
    return 1.0 if union == 0 else inter / union


def _scan_box(m):
    rs, cs = [], []
    for r in range(m.shape[0]):
        for c in range(m.shape[1]):
            if m[r, c]:
                rs.append(r)
                cs.append(c)
    return min(rs), min(cs), max(rs), max(cs)


def test_metrics_match_pixel_scan_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.random((12, 12)) < rng.uniform(0.02, 0.6)
        b = rng.random((12, 12)) < rng.uniform(0.02, 0.6)
        a[rng.integers(12), rng.integers(12)] = True
        assert iou(a, b) == _scan_iou(a, b)
        assert tightest_box(a) == _scan_box(a)


def test_tightest_box_examples():
    m = np.zeros((6, 6), bool)
    m[1, 2] = m[3, 4] = True
    assert tightest_box(m) == (1, 2, 3, 4)
    assert tightest_box(np.ones((6, 6), bool)) == (0, 0, 5, 5)
    with pytest.raises(InputError):
        tightest_box(np.zeros((3, 3), bool))


@settings(max_examples=200)
@given(masks)
def test_tightest_box_is_tight(m):
    if not m.any():
        return
    r0, c0, r1, c1 = tightest_box(m)
    inside = np.zeros_like(m)
    inside[r0:r1 + 1, c0:c1 + 1] = True
    assert not (m & ~inside).any()
    assert m[r0].any() and m[r1].any() and m[:, c0].any() and m[:, c1].any()


def test_point_sampling():
    m = np.zeros((5, 5), bool)
    m[2, 3] = True
    assert sample_points_in_mask(m, 4, np.random.default_rng(0)) == [(2, 3)] * 4
    m[0, 0] = True
    pts = sample_points_in_mask(m, 10000, np.random.default_rng(1))
    assert all(m[p] for p in pts)
    freq = sum(p == (0, 0) for p in pts) / len(pts)
    assert abs(freq - 0.5) < 0.02
    with pytest.raises(InputError):
        sample_points_in_mask(np.zeros((3, 3), bool), 1, np.random.default_rng(0))
    with pytest.raises(InputError):
        sample_points_in_mask(m, 3, np.random.default_rng(0), replace=False)


# -- data synthesis ---------------------------------------------------------------------------

def test_scene_determinism():
    a = generate_scene(scene_rng(4, "train", 7))
    b = generate_scene(scene_rng(4, "train", 7))
    assert a.image.tobytes() == b.image.tobytes()
    assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))


def test_splits_differ():
    a = generate_split(0, "train", 3)
    b = generate_split(0, "test", 3)
    assert not any(np.array_equal(x.image, y.image) for x in a for y in b)


def test_single_shape_noise_free_mask_is_its_support():
    cfg = SceneConfig(n_shapes=(1, 1), noise=0.0)
    for i in range(10):
        sc = generate_scene(np.random.default_rng(i), cfg)
        assert sc.num_instances == 1
        bg = sc.image[0, 0] if not sc.masks[0][0, 0] else sc.image[-1, -1]
        painted = np.any(sc.image != bg, axis=-1)
        assert np.array_equal(painted, sc.masks[0])


def test_zero_shapes_is_config_error():
    with pytest.raises(ConfigError):
        generate_scene(np.random.default_rng(0), SceneConfig(n_shapes=(0, 0)))


def test_scene_invariants():
    cfg = SceneConfig()
    counts = []
    for sc in generate_split(0, "train", 1000):
        counts.append(sc.num_instances)
        stack = np.stack(sc.masks).astype(int)
        assert stack.sum(axis=0).max() <= 1           # visible regions are disjoint
        assert all(m.sum() >= cfg.min_area for m in sc.masks)
        assert sc.image.dtype == np.float32 and 0.0 <= sc.image.min() and sc.image.max() <= 1.0
    # uniform over {2, 3, 4, 5}
    assert abs(np.mean(counts) - 3.5) < 0.1


def test_corpus_roundtrip(tmp_path):
    scenes = generate_split(1, "val", 3)
    write_corpus(tmp_path, scenes)
    back = load_corpus(tmp_path)
    assert back.scene_ids == [0, 1, 2]
    ref = Corpus.from_scenes(scenes)
    np.testing.assert_array_equal(back.images, ref.images)
    for s, t in zip(back.scenes, scenes):
        assert all(np.array_equal(x, y) for x, y in zip(s.masks, t.masks))
        assert s.kinds == t.kinds


def test_missing_manifest(tmp_path):
    with pytest.raises(InputError):
        load_corpus(tmp_path)


# -- image io -------------------------------------------------------------------------------------

def test_gray_roundtrip_bytes(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (64, 64), dtype=np.uint8)
    save_image(tmp_path / "a.pgm", img)
    first = (tmp_path / "a.pgm").read_bytes()
    back = load_image(tmp_path / "a.pgm")
    assert np.array_equal(back, img)
    save_image(tmp_path / "b.pgm", back)
    assert (tmp_path / "b.pgm").read_bytes() == first


def test_color_roundtrip():
    img = np.random.default_rng(1).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    assert np.array_equal(decode_pnm(encode_pnm(img)), img)


def test_p5_header():
    buf = b"P5\n64 64\n255\n" + bytes(64 * 64)
    out = decode_pnm(buf)
    assert out.shape == (64, 64)


def test_header_with_comment():
    buf = b"P5\n# made by hand\n2 1\n255\n" + bytes([3, 4])
    assert decode_pnm(buf).tolist() == [[3, 4]]


def test_truncated_payload_reports_lengths():
    buf = b"P5\n4 4\n255\n" + bytes(10)
    with pytest.raises(ParseError) as e:
        decode_pnm(buf)
    assert "expected 16" in str(e.value) and "got 10" in str(e.value)
    assert e.value.offset == 11


@pytest.mark.parametrize("buf,offset", [
    (b"P3\n1 1\n255\n\x00", 0),
    (b"P5\n1 x\n255\n\x00", 5),
    (b"P5\n1 1\n65535\n\x00\x00", 7),
])
def test_malformed_headers(buf, offset):
    with pytest.raises(ParseError) as e:
        decode_pnm(buf)
    assert e.value.offset == offset


# -- checkpoints ----------------------------------------------------------------------------------

def _ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint({"kind": "test", "n": 3},
                      {"a.w": rng.normal(size=(3, 4)).astype(np.float32),
                       "b": rng.normal(size=(5,)).astype(np.float32),
                       "opt.m.a.w": np.zeros((3, 4), np.float32)})


def test_checkpoint_roundtrip(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "x.ckpt", ck)
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert back.config == ck.config
    assert set(back.params()) == {"a.w", "b"}
    assert set(back.optimizer_tensors()) == {"opt.m.a.w"}
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()


def test_checkpoint_flip_byte_detected():
    buf = bytearray(encode_checkpoint(_ckpt()))
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(CorruptionError, match="checksum"):
        decode_checkpoint(bytes(buf))


def test_checkpoint_bad_magic_and_version():
    buf = bytearray(encode_checkpoint(_ckpt()))
    with pytest.raises(CorruptionError, match="magic"):
        decode_checkpoint(b"XXXXXXXX" + bytes(buf[8:]))
    buf[8] = 9
    with pytest.raises(CorruptionError, match="version"):
        decode_checkpoint(bytes(buf))


def test_load_into_mismatched_module_names_tensor():
    lin = Linear(4, 3, np.random.default_rng(0))
    state = {k: np.zeros((v.shape[0] + 1,) + v.shape[1:], np.float32) for k, v in lin.state_dict().items()}
    with pytest.raises(DimensionError) as e:
        lin.load_state_dict(state)
    assert "weight" in str(e.value) or "bias" in str(e.value)
