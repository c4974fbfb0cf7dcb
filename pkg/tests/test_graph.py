import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinytransfer import backbones
from tinytransfer.errors import FormatError, InvalidTruncation, ShapeMismatch, ValidationError
from tinytransfer.graph import (
    INPUT,
    GraphBuilder,
    GraphNode,
    ModelGraph,
    compose,
    identity_graph,
    load_model,
    save_model,
    tail,
    to_bytes,
    truncate,
    validate,
)
from tinytransfer.head import HeadModel, export_head
from tinytransfer.quantize import quantize_model


def small_chain(rng, length=4):
    b = GraphBuilder("chain", (None, 6, 6, 2), {"note": "x"})
    c = 2
    for i in range(length):
        b.add("conv2d", {"stride": 1, "padding": "same"},
              [rng.standard_normal((3, 3, c, 3)).astype(np.float32), rng.standard_normal(3).astype(np.float32)])
        c = 3
    return b.build()


def residual_graph(rng):
    """conv -> (relu branch, 1x1 projection branch) -> add -> GAP."""
    b = GraphBuilder("res", (None, 4, 4, 2))
    first = b.add("conv2d", {"stride": 1, "padding": "same"}, [rng.standard_normal((1, 1, 2, 2)).astype(np.float32)])
    branch = b.add("activation", {"kind": "relu"})
    proj = b.add("conv2d", {"stride": 1, "padding": "same"}, [rng.standard_normal((1, 1, 2, 2)).astype(np.float32)],
                 inputs=[first])
    b.add("add", inputs=[branch, proj])
    b.add("global_average_pool")
    return b.build()


def test_roundtrip_identity(tmp_path, rng):
    g = small_chain(rng)
    path = tmp_path / "g.ttml"
    save_model(g, path)
    assert load_model(path) == g


def test_roundtrip_keeps_qparams(tmp_path, rng):
    g = quantize_model(small_chain(rng))
    save_model(g, tmp_path / "q.ttml")
    back = load_model(tmp_path / "q.ttml")
    assert back == g
    assert back.weights["conv2d_1/kernel"].scale == g.weights["conv2d_1/kernel"].scale


def test_bad_magic(tmp_path, rng):
    data = bytearray(to_bytes(small_chain(rng)))
    data[:4] = b"NOPE"
    (tmp_path / "bad.ttml").write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.ttml")


def test_truncated_blob(tmp_path, rng):
    data = to_bytes(small_chain(rng))
    (tmp_path / "t.ttml").write_bytes(data[:-10])
    with pytest.raises(FormatError):
        load_model(tmp_path / "t.ttml")


def test_bad_version(rng):
    data = bytearray(to_bytes(small_chain(rng)))
    data[4:8] = struct.pack("<I", 99)
    from tinytransfer.graph import from_bytes

    with pytest.raises(FormatError):
        from_bytes(bytes(data))


def test_mobilenet_fixture_loads_and_infers(tmp_path):
    path = tmp_path / "mnv2.ttml"
    save_model(backbones.mobilenet_v2(), path)
    g = load_model(path)
    assert validate(g) == (None, 7, 7, 1280)
    assert g.input_shape == (None, 224, 224, 3)


def test_empty_weights_graph_size(tmp_path):
    nodes = [
        GraphNode("a", "activation", {"kind": "relu"}, [INPUT]),
        GraphNode("b", "dropout_marker", {"rate": 0.1}, ["a"]),
        GraphNode("c", "flatten", {}, ["b"]),
    ]
    g = ModelGraph("empty", nodes, {}, (None, 2, 2, 1))
    size = save_model(g, tmp_path / "e.ttml")
    data = (tmp_path / "e.ttml").read_bytes()
    (mlen,) = struct.unpack_from("<Q", data, 8)
    assert size == len(data) == 16 + mlen


def test_million_weight_file_size(tmp_path):
    w = np.zeros((1000, 1000), np.float32)
    g = ModelGraph("big", [GraphNode("d", "dense", {}, [INPUT], ["w"])], {"w": w}, (None, 1000))
    size = save_model(g, tmp_path / "big.ttml")
    data = (tmp_path / "big.ttml").read_bytes()
    (mlen,) = struct.unpack_from("<Q", data, 8)
    assert size == 4_000_000 + 16 + mlen
    assert mlen < 1000


def test_deterministic_bytes(tmp_path, rng):
    g = small_chain(rng)
    save_model(g, tmp_path / "a.ttml")
    save_model(g, tmp_path / "b.ttml")
    assert (tmp_path / "a.ttml").read_bytes() == (tmp_path / "b.ttml").read_bytes()


def test_orphan_blobs_not_saved(rng):
    g = small_chain(rng)
    g.weights["orphan"] = np.ones(3, np.float32)
    from tinytransfer.graph import from_bytes

    assert "orphan" not in from_bytes(to_bytes(g)).weights


def test_truncate_chain(rng):
    g = small_chain(rng, 4)
    t = truncate(g, 1)
    assert len(t.nodes) == 3
    assert validate(t) == (None, 6, 6, 3)
    assert "conv2d_4/kernel" not in t.weights
    with pytest.raises(InvalidTruncation):
        truncate(g, 4)


def test_truncate_yamnet_to_feature_shape():
    g = backbones.yamnet()
    assert validate(g) == (None, 521)
    assert validate(truncate(g, 3)) == (None, 3, 2, 1024)


def test_truncate_mid_residual_rejected(rng):
    g = residual_graph(rng)
    with pytest.raises(InvalidTruncation):
        truncate(g, 2)  # cut after the projection leaves the relu branch dangling
    assert validate(truncate(g, 1)) == (None, 4, 4, 2)
    assert validate(truncate(g, 4)) == (None, 4, 4, 2)


@settings(max_examples=20, deadline=None)
@given(a=st.integers(0, 3), b=st.integers(0, 3), seed=st.integers(0, 1000))
def test_truncate_composes(a, b, seed):
    g = small_chain(np.random.default_rng(seed), 8)
    assert truncate(g, a + b) == truncate(truncate(g, a), b)


def test_validate_errors(rng):
    g = ModelGraph("dense4", [GraphNode("d", "dense", {}, [INPUT], ["w"])], {"w": np.ones((3, 2), np.float32)}, (None, 4, 4, 3))
    with pytest.raises(ValidationError) as err:
        validate(g)
    assert err.value.node_id == "d"
    with pytest.raises(ValidationError):
        validate(ModelGraph("empty", [], {}, (None, 3)))
    bad_ref = ModelGraph("x", [GraphNode("a", "activation", {"kind": "relu"}, ["zzz"])], {}, (None, 3))
    with pytest.raises(ValidationError):
        validate(bad_ref)


def _head(rng, shape, k=4):
    return export_head(HeadModel(shape, rng.standard_normal((shape[-1], k)), rng.standard_normal(k), [f"c{i}" for i in range(k)]))


def test_compose_identity_is_head(rng):
    from tinytransfer.engine import run

    head = _head(rng, (3, 2, 8))
    composed = compose(identity_graph((None, 3, 2, 8)), head)
    x = rng.standard_normal((5, 3, 2, 8)).astype(np.float32)
    np.testing.assert_array_equal(run(composed, x), run(head, x))
    assert composed.metadata["class_names"] == head.metadata["class_names"]


def test_compose_mobilenet_with_image_head(rng):
    head = _head(rng, (7, 7, 1280), 5)
    g = compose(backbones.mobilenet_v2(), head)
    assert validate(g) == (None, 5)


def test_compose_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        compose(truncate(backbones.yamnet(), 3), _head(rng, (7, 7, 1280)))


def test_compose_associative_with_identity(rng):
    from tinytransfer.engine import run

    g = small_chain(rng, 3)
    i_in = identity_graph(g.input_shape)
    i_out = identity_graph((None, 6, 6, 3))
    left = compose(compose(i_in, g), i_out)
    right = compose(i_in, compose(g, i_out))
    x = rng.standard_normal((2, 6, 6, 2)).astype(np.float32)
    np.testing.assert_array_equal(run(left, x), run(right, x))
    np.testing.assert_array_equal(run(left, x), run(g, x))


def test_compose_renames_collisions(rng):
    g = small_chain(rng, 2)
    g2 = small_chain(rng, 2)
    g2.input_shape = (None, 6, 6, 3)
    g2.nodes[0].params = {"stride": 1, "padding": "same"}
    g2.weights["conv2d_1/kernel"] = rng.standard_normal((3, 3, 3, 3)).astype(np.float32)
    c = compose(g, g2)
    assert len({n.id for n in c.nodes}) == 4
    assert validate(c) == (None, 6, 6, 3)


def test_tail_rebuilds_suffix(rng):
    from tinytransfer.engine import run

    g = small_chain(rng, 4)
    t = tail(g, 2)
    assert t.input_shape == (None, 6, 6, 3)
    x = rng.standard_normal((2, 6, 6, 2)).astype(np.float32)
    np.testing.assert_allclose(run(compose(truncate(g, 2), t), x), run(g, x), atol=1e-5)
