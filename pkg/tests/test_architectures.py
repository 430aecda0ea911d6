import numpy as np
import pytest

from skinlesion.architectures import (ArchitectureId, build_model, format_table, parameter_count, summary_records,
                                      table_rows, trace_shapes)
from skinlesion.nn import ModelGraph, ShapeError

# output-size column of the modified architectures, one entry per table row:
# spatial side for feature maps, width for vectors
_DENSENET = [32, 16, 16, 16, 8, 8, 8, 4, 4, 4, 2, 2]
_RESNET = [32, 16, 16, 8, 4, 2]
EXPECTED_ROWS = {
    "model1": [64, 32, 65536, 65536, 128, 128, 7],
    "model2": [64, 32, 32, 16, 16384, 16384, 128, 128, 7],
    "model3": [64, 32, 32, 16, 16, 8, 4096, 4096, 128, 128, 7],
    "model4": [64, 32, 32, 16, 16, 8, 8, 4, 1024, 1024, 128, 128, 7],
    "vgg16_mod": [64, 64, 32, 32, 32, 16, 16, 16, 16, 8, 8, 8, 8, 4, 4, 4, 4, 2, 2048, 7],
    "mobilenet_mod": [32, 32, 32, 16, 16, 16, 16, 8, 8, 8, 8, 4, 4, 4, 4, 2, 2, 2, 2, 4096, 7],
    "densenet121_mod": _DENSENET + [4096, 7],
    "densenet169_mod": _DENSENET + [6656, 7],
    "densenet201_mod": _DENSENET + [7680, 7],
    "resnet50_mod": _RESNET + [8192, 7],
    "resnet101_mod": _RESNET + [8192, 7],
    "resnet152_mod": _RESNET + [8192, 7],
}
FLATTEN = dict(zip(EXPECTED_ROWS, [65536, 16384, 4096, 1024, 2048, 4096, 4096, 6656, 7680, 8192, 8192, 8192]))


def _flatten_width(g):
    return next(e.shape[0] for e in g.trace() if e.kind == "flatten")


def test_every_id_has_a_builder():
    assert {a.value for a in ArchitectureId} == set(EXPECTED_ROWS)
    with pytest.raises(ValueError, match="unknown architecture"):
        build_model("alexnet")
    with pytest.raises(ValueError):
        build_model("model1", num_classes=1)


@pytest.mark.parametrize("arch", list(EXPECTED_ROWS))
def test_rows_match_table(arch):
    g = build_model(arch)
    got = [s[1] if len(s) == 3 else s[0] for _, _, s in table_rows(g)]
    assert got == EXPECTED_ROWS[arch]
    assert _flatten_width(g) == FLATTEN[arch]
    assert g.trace()[0].shape == (3, 64, 64)


@pytest.mark.parametrize("arch", list(EXPECTED_ROWS))
def test_forward_smoke(arch):
    g = build_model(arch, num_classes=5)
    assert g.shapes()[g.output] == (5,)
    p = g.forward(np.random.default_rng(0).random((2, 3, 64, 64), dtype=np.float32)).output
    assert p.shape == (2, 5)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-5) and p.min() >= 0


def test_vgg_pool_chain():
    pools = [e.shape[1] for e in trace_shapes(build_model("vgg16_mod")) if e.kind == "maxpool2d"]
    assert pools == [32, 16, 8, 4, 2]


def test_mobilenet_ends():
    convs = [e.shape for e in trace_shapes(build_model("mobilenet_mod")) if e.kind in ("conv2d", "depthwise_conv2d")]
    assert convs[0] == (32, 32, 32)
    assert convs[-1] == (1024, 2, 2)


def test_model4_pool_chain():
    pools = [e.shape[1] for e in trace_shapes(build_model("model4")) if e.kind == "maxpool2d"]
    assert pools == [32, 16, 8, 4]


@pytest.mark.parametrize("arch,channels", [("densenet121_mod", 1024), ("densenet169_mod", 1664),
                                           ("densenet201_mod", 1920)])
def test_densenet_final_channels(arch, channels):
    # init + growth * block size, halved at each transition
    c = 64
    blocks = {"densenet121_mod": (6, 12, 24, 16), "densenet169_mod": (6, 12, 32, 32),
              "densenet201_mod": (6, 12, 48, 32)}[arch]
    for i, n in enumerate(blocks):
        c += 32 * n
        if i < 3:
            c //= 2
    assert c == channels
    g = build_model(arch)
    last_concat = [e for e in g.trace() if e.kind == "concat"][-1]
    assert last_concat.shape == (channels, 2, 2)
    assert channels * 4 == _flatten_width(g)


def test_original_variant_traces():
    vgg = build_model("vgg16_mod", variant="original")
    assert _flatten_width(vgg) == 25088
    assert vgg.shapes()[vgg.output] == (1000,)
    res = build_model("resnet50_mod", variant="original")
    gap = next(e for e in res.trace() if e.kind == "global_avgpool")
    assert gap.shape == (2048, 1, 1)
    dn = build_model("densenet121_mod", variant="original")
    assert [s for layer, _, s in table_rows(dn)][0] == (64, 112, 112)
    with pytest.raises(ValueError):
        build_model("model1", variant="original")


def test_trace_at_other_input_size():
    g = build_model("model2")
    assert trace_shapes(g, (3, 32, 32))[-1].shape == (7,)
    assert _flatten_width(g) == 16384  # original untouched


def test_trace_allocates_nothing():
    g = build_model("resnet152_mod")
    g.trace()
    parameter_count(g)
    assert g._params == {}


def test_shape_conflict_names_nodes():
    g = ModelGraph((3, 8, 8))
    g.add("a", "conv2d", filters=4, kernel=3)
    g.add("b", "maxpool2d", inputs="input", kernel=2, stride=2)
    g.add("join", "add", inputs=["a", "b"])
    with pytest.raises(ShapeError, match="join.*'a'.*'b'"):
        g.shapes()


def test_parameter_counts():
    g = ModelGraph((10,))
    g.add("fc", "dense", units=7)
    assert parameter_count(g) == 77
    m1 = build_model("model1")
    assert sum(np.prod(s) for s in m1.param_shapes()["conv1"].values()) == 1792
    # conv 1792 + dense 65536*128+128 + head 128*7+7
    assert parameter_count(m1) == 1792 + 8388736 + 903
    assert parameter_count(build_model("model1", seed=9)) == parameter_count(m1)


@pytest.mark.parametrize("arch,body", [("vgg16_mod", 14_714_688), ("mobilenet_mod", 3_206_976),
                                       ("densenet121_mod", 6_953_856)])
def test_body_counts_match_reference_networks(arch, body):
    # trainable counts of the standard headless networks; the head adds flatten*7+7
    g = build_model(arch)
    assert parameter_count(g) == body + FLATTEN[arch] * 7 + 7


def test_summaries():
    g = build_model("model1")
    recs = summary_records(g)
    assert recs[0] == {"node": "conv1", "kind": "conv2d", "hyperparams": recs[0]["hyperparams"],
                       "inputs": ["input"], "output_shape": [64, 64, 64], "row": "Convolution"}
    assert recs[0]["hyperparams"]["filters"] == 64
    text = format_table(g)
    assert "65536" in text and "7 fully-connected, softmax" in text
