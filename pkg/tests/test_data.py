import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stcnet.data import (
    SkeletonSequenceDataset,
    SynthSpec,
    animate,
    animated_joints,
    body,
    decode_dataset,
    encode_dataset,
    generate_synthetic,
    motion_energy,
    preprocess,
    read_dataset,
    resample_indices,
    write_dataset,
)
from stcnet.errors import FormatError
from stcnet.graph import path_graph, random_tree


def small_spec(**kw):
    kw.setdefault("samples_per_class", 3)
    return SynthSpec(**kw)


# synthetic generator --------------------------------------------------------


def test_body_layout():
    bd = body(15)
    assert bd.graph.num_nodes == 15 and bd.graph.root == 0
    assert [len(limb) for limb in bd.limbs] == [3, 3, 3, 3]
    assert bd.anchors == (2, 2, 0, 0)
    assert bd.rest.shape == (3, 15)


def test_body_too_small():
    with pytest.raises(ValueError, match="too small"):
        body(4)
    with pytest.raises(ValueError):
        generate_synthetic(SynthSpec(V=4))


@pytest.mark.parametrize("field, value", [("T", 7), ("num_classes", 1), ("samples_per_class", 0), ("noise_std", -1.0)])
def test_spec_validation(field, value):
    with pytest.raises(ValueError):
        generate_synthetic(small_spec(**{field: value}))


def test_generator_is_deterministic():
    a, b = generate_synthetic(small_spec()), generate_synthetic(small_spec())
    assert a == b
    assert generate_synthetic(small_spec(seed=1)) != a
    assert generate_synthetic(small_spec(), "val") != a


def test_default_sizes():
    tr, va = generate_synthetic(SynthSpec()), generate_synthetic(SynthSpec(samples_per_class=25), "val")
    assert tr.samples.shape == (400, 3, 32, 15) and len(va) == 100
    assert np.bincount(tr.labels).tolist() == [100] * 4


def test_noise_free_samples_of_a_class_share_their_rest_pose():
    ds = generate_synthetic(small_spec(noise_std=0.0))
    for c in range(4):
        xs = ds.samples[ds.labels == c]
        static = [v for v in range(15) if v not in animated_joints(15, c)]
        assert np.array_equal(xs[0][..., static], xs[1][..., static])


def test_classes_differ_only_on_animated_limb():
    bd = body(15)
    for c in range(1, 4):
        a, b = animate(bd, 0, 32, 0.8, 0.0), animate(bd, c, 32, 0.8, 0.0)
        differs = set(np.flatnonzero(np.abs(a - b).max(axis=(0, 1)) > 0).tolist())
        assert differs == set(animated_joints(15, 0)) | set(animated_joints(15, c))


def test_animated_limb_carries_the_motion_energy():
    ds = generate_synthetic(SynthSpec(noise_std=0.01, samples_per_class=20))
    for c in range(4):
        e = motion_energy(ds.samples[ds.labels == c])
        moving = list(animated_joints(15, c))
        static = [v for v in range(15) if v not in moving]
        assert e[moving].mean() >= 10 * e[static].mean()


def test_more_classes_change_rhythm():
    bd = body(15)
    a, b = animate(bd, 0, 32, 0.8, 0.0), animate(bd, 4, 32, 0.8, 0.0)
    assert animated_joints(15, 0) == animated_joints(15, 4)
    assert not np.allclose(a, b)


# container ------------------------------------------------------------------


def random_dataset(seed=0, N=5, C=3, T=6, V=7):
    r = np.random.default_rng(seed)
    g = random_tree(V, r, root=int(r.integers(V)))
    return SkeletonSequenceDataset(g, r.normal(size=(N, C, T, V)).astype(np.float32), r.integers(0, 4, N))


def test_round_trip(tmp_path):
    for seed in range(5):
        ds = random_dataset(seed)
        write_dataset(ds, tmp_path / "d.stcd")
        back = read_dataset(tmp_path / "d.stcd")
        assert back == ds and back.graph.root == ds.graph.root
        assert encode_dataset(back) == encode_dataset(ds)


def test_header_layout():
    ds = random_dataset(N=2, C=3, T=4, V=5)
    blob = encode_dataset(ds)
    assert blob[:4] == b"STCD"
    assert struct.unpack_from("<5I", blob, 4) == (1, 2, 3, 4, 5)
    assert struct.unpack_from("<2I", blob, 24) == (5, ds.graph.root)
    nonroot = [ds.graph.parents[v] for v in range(5) if v != ds.graph.root]
    assert list(struct.unpack_from("<4I", blob, 32)) == nonroot
    payload = np.frombuffer(blob, dtype="<f4", count=2 * 3 * 4 * 5, offset=48)
    assert payload.tobytes() == ds.samples.tobytes()
    assert len(blob) == 48 + 4 * 120 + 4 * 2 + 4


def reseal(body_: bytes) -> bytes:
    return body_ + struct.pack("<I", zlib.crc32(body_))


def test_corruption_detected():
    blob = encode_dataset(random_dataset())
    with pytest.raises(FormatError, match="magic"):
        decode_dataset(b"STCX" + blob[4:])
    with pytest.raises(FormatError, match="CRC"):
        decode_dataset(blob[:60] + bytes([blob[60] ^ 0x40]) + blob[61:])
    with pytest.raises(FormatError):
        decode_dataset(blob[:-9])
    with pytest.raises(FormatError, match="version"):
        decode_dataset(reseal(blob[:4] + struct.pack("<I", 2) + blob[8:-4]))
    with pytest.raises(FormatError):
        decode_dataset(b"")


def test_resealed_structural_garbage_is_a_format_error():
    blob = encode_dataset(random_dataset(V=4))
    # point every non-root node at itself: not a tree
    bad = bytearray(blob[:-4])
    root = struct.unpack_from("<I", blob, 28)[0]
    for i, v in enumerate(v for v in range(4) if v != root):
        struct.pack_into("<I", bad, 32 + 4 * i, v)
    with pytest.raises(FormatError, match="graph"):
        decode_dataset(reseal(bytes(bad)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 255), st.booleans())
def test_fuzz_never_crashes(pos, value, reseal_crc):
    blob = bytearray(encode_dataset(random_dataset(N=2, T=3, V=4)))
    pos %= len(blob)
    blob[pos] = value
    data = reseal(bytes(blob[:-4])) if reseal_crc else bytes(blob)
    try:
        ds = decode_dataset(data)
    except FormatError:
        return
    assert isinstance(ds, SkeletonSequenceDataset)
    assert ds.samples.shape[3] == ds.graph.num_nodes


# preprocessing --------------------------------------------------------------


def test_resample_examples():
    assert resample_indices(10, 5).tolist() == [0, 2, 4, 6, 8]
    assert resample_indices(4, 4).tolist() == [0, 1, 2, 3]
    assert resample_indices(3, 7).tolist() == [0, 1, 2, 0, 1, 2, 0]
    with pytest.raises(ValueError):
        resample_indices(4, 0)


def test_preprocess_identity_when_centered():
    ds = random_dataset()
    root = ds.graph.root
    ds.samples -= ds.samples[:, :, :1, root][..., None]
    out = preprocess(ds, ds.samples.shape[2])
    np.testing.assert_array_equal(out.samples, ds.samples)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(1, 12))
def test_preprocess_removes_translation(shift, target):
    ds = random_dataset(T=8)
    moved = SkeletonSequenceDataset(ds.graph, ds.samples + np.array(shift, dtype=np.float32)[None, :, None, None], ds.labels)
    a, b = preprocess(ds, target), preprocess(moved, target)
    assert a.samples.shape == (5, 3, target, 7)
    np.testing.assert_allclose(a.samples, b.samples, rtol=0, atol=1e-4)


def test_preprocess_places_root_at_origin():
    ds = preprocess(generate_synthetic(small_spec()), 16)
    assert not ds.samples[:, :, 0, ds.graph.root].any()


# dataset validation ---------------------------------------------------------


def test_dataset_validation():
    g = path_graph(3)
    with pytest.raises(ValueError):
        SkeletonSequenceDataset(g, np.zeros((2, 3, 4, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        SkeletonSequenceDataset(g, np.zeros((2, 3, 4, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        SkeletonSequenceDataset(g, np.full((1, 3, 4, 3), np.nan), np.zeros(1))
    with pytest.raises(ValueError):
        SkeletonSequenceDataset(g, np.zeros((1, 3, 4, 3)), np.array([-1]))
