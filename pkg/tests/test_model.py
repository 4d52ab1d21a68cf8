"""Weight-file parsing, forward pass against a scalar reference, metering."""

import math
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_B, TINY_W, gnw_bytes, random_linear_spec, tiny_linear_spec
from evoattack.model import (
    BlackBox,
    Conv2D,
    Dense,
    Flatten,
    FormatError,
    MaxPool2D,
    ModelSpec,
    QueryMeter,
    Relu,
    Softmax,
    load_model,
    predict,
    predict_batch,
    softmax,
)


# ---------- scalar reference forward pass, coded separately ----------

def ref_conv(x, layer):
    oc, ic, kh, kw = layer.weights.shape
    s = layer.stride
    h, w, _ = x.shape
    if layer.padding == "same":
        oh, ow = math.ceil(h / s), math.ceil(w / s)
        ph = max((oh - 1) * s + kh - h, 0)
        pw = max((ow - 1) * s + kw - w, 0)
        xp = np.zeros((h + ph, w + pw, ic))
        xp[ph // 2 : ph // 2 + h, pw // 2 : pw // 2 + w, :] = x
    else:
        oh, ow = (h - kh) // s + 1, (w - kw) // s + 1
        xp = x
    out = np.zeros((oh, ow, oc))
    for oy in range(oh):
        for ox in range(ow):
            for co in range(oc):
                acc = layer.bias[co]
                for ci in range(ic):
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[oy * s + i, ox * s + j, ci] * layer.weights[co, ci, i, j]
                out[oy, ox, co] = acc
    return out


def ref_maxpool(x, layer):
    k, s = layer.k, layer.stride
    h, w, c = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((oh, ow, c))
    for oy in range(oh):
        for ox in range(ow):
            for ch in range(c):
                out[oy, ox, ch] = np.max(x[oy * s : oy * s + k, ox * s : ox * s + k, ch])
    return out


def ref_forward(spec, x):
    for layer in spec.layers:
        if isinstance(layer, Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, Dense):
            x = layer.weights @ x + layer.bias
        elif isinstance(layer, Relu):
            x = np.maximum(x, 0)
        elif isinstance(layer, Conv2D):
            x = ref_conv(x, layer)
        elif isinstance(layer, MaxPool2D):
            x = ref_maxpool(x, layer)
        elif isinstance(layer, Softmax):
            e = np.exp(x - np.max(x))
            x = e / e.sum()
    return x


def small_cnn_spec(rng):
    conv_w = rng.normal(0, 0.5, size=(4, 1, 3, 3))
    conv_b = rng.normal(0, 0.1, size=4)
    dense_w = rng.normal(0, 0.5, size=(3, 3 * 3 * 4))
    dense_b = rng.normal(0, 0.1, size=3)
    return ModelSpec(
        input_shape=(6, 6, 1),
        num_classes=3,
        layers=(
            Conv2D(conv_w, conv_b, stride=1, padding="same"),
            Relu(),
            MaxPool2D(k=2, stride=2),
            Flatten(),
            Dense(dense_w, dense_b),
            Softmax(),
        ),
    )


class TestSoftmax:
    def test_equal_logits(self):
        assert np.allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)

    def test_exact_ratio(self):
        assert np.allclose(softmax([np.log(1), np.log(2)]), [1 / 3, 2 / 3])

    def test_large_values_stay_finite(self):
        assert np.allclose(softmax([1000.0, 1000.0]), [0.5, 0.5])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            softmax([0.0, np.nan])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            softmax([])


class TestLoadModel:
    def test_tiny_linear_roundtrip(self, tiny_linear_path):
        spec = load_model(tiny_linear_path)
        assert spec.input_shape == (2, 2, 1)
        assert spec.num_classes == 2
        kinds = [type(layer).__name__ for layer in spec.layers]
        assert kinds == ["Flatten", "Dense", "Softmax"]
        assert np.allclose(spec.layers[1].weights, TINY_W, atol=1e-7)
        assert np.allclose(spec.layers[1].bias, TINY_B, atol=1e-7)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.gnw"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            load_model(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gnw"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_single_class_rejected(self, tmp_path):
        path = tmp_path / "k1.gnw"
        w = np.zeros((1, 4))
        path.write_bytes(gnw_bytes((2, 2, 1), 1, [("flatten",), ("dense", w, [0.0]), ("softmax",)]))
        with pytest.raises(FormatError, match="num_classes"):
            load_model(path)

    def test_truncated_weights(self, tmp_path):
        data = gnw_bytes((2, 2, 1), 2, [("flatten",), ("dense", TINY_W, TINY_B), ("softmax",)])
        path = tmp_path / "short.gnw"
        path.write_bytes(data[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_model(path)

    def test_trailing_bytes(self, tmp_path):
        data = gnw_bytes((2, 2, 1), 2, [("flatten",), ("dense", TINY_W, TINY_B), ("softmax",)])
        path = tmp_path / "long.gnw"
        path.write_bytes(data + b"\x00\x01")
        with pytest.raises(FormatError, match="trailing"):
            load_model(path)

    def test_unknown_tag(self, tmp_path):
        head = b"GNW1" + struct.pack("<5I", 2, 2, 1, 2, 1) + struct.pack("<B", 99)
        path = tmp_path / "tag.gnw"
        path.write_bytes(head)
        with pytest.raises(FormatError, match="layer 0"):
            load_model(path)

    def test_shape_chain_error_names_layer(self, tmp_path):
        # dense expects 5 inputs but flatten yields 4
        w = np.zeros((2, 5))
        path = tmp_path / "chain.gnw"
        path.write_bytes(gnw_bytes((2, 2, 1), 2, [("flatten",), ("dense", w, [0.0, 0.0]), ("softmax",)]))
        with pytest.raises(FormatError, match="layer 1"):
            load_model(path)

    def test_missing_final_softmax(self, tmp_path):
        path = tmp_path / "nosm.gnw"
        path.write_bytes(gnw_bytes((2, 2, 1), 2, [("flatten",), ("dense", TINY_W, TINY_B)]))
        with pytest.raises(FormatError, match="softmax"):
            load_model(path)

    def test_conv_model_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        spec = small_cnn_spec(rng)
        conv = spec.layers[0]
        dense = spec.layers[4]
        data = gnw_bytes(
            (6, 6, 1),
            3,
            [
                ("conv", conv.weights, conv.bias, 1, 0),
                ("relu",),
                ("maxpool", 2, 2),
                ("flatten",),
                ("dense", dense.weights, dense.bias),
                ("softmax",),
            ],
        )
        path = tmp_path / "cnn.gnw"
        path.write_bytes(data)
        loaded = load_model(path)
        x = rng.random((6, 6, 1))
        got = predict(loaded, x, QueryMeter())
        # f32 serialization rounds the weights, so compare loosely
        want = predict(spec, x, QueryMeter())
        assert np.allclose(got, want, atol=1e-5)


class TestForwardPass:
    def test_linear_on_zeros_is_softmax_of_bias(self):
        spec = tiny_linear_spec()
        probs = predict(spec, np.zeros((2, 2, 1)), QueryMeter())
        want = np.exp(TINY_B) / np.exp(TINY_B).sum()
        assert np.allclose(probs, want, atol=1e-12)
        assert probs[0] == pytest.approx(0.549834, abs=1e-6)

    def test_equal_logits_give_uniform(self):
        spec = ModelSpec(
            input_shape=(2, 2, 1),
            num_classes=4,
            layers=(Flatten(), Dense(np.zeros((4, 4)), np.full(4, 2.5)), Softmax()),
        )
        probs = predict(spec, np.random.default_rng(0).random((2, 2, 1)), QueryMeter())
        assert np.allclose(probs, 0.25)

    def test_cnn_matches_scalar_reference(self):
        rng = np.random.default_rng(6)
        spec = small_cnn_spec(rng)
        for _ in range(5):
            x = rng.random((6, 6, 1))
            got = predict(spec, x, QueryMeter())
            want = ref_forward(spec, x)
            assert np.max(np.abs(got - want)) < 1e-10

    def test_valid_padding_and_stride_match_reference(self):
        rng = np.random.default_rng(7)
        conv_w = rng.normal(size=(2, 1, 3, 3))
        conv_b = rng.normal(size=2)
        dense_w = rng.normal(size=(2, 2 * 2 * 2))
        spec = ModelSpec(
            input_shape=(5, 5, 1),
            num_classes=2,
            layers=(
                Conv2D(conv_w, conv_b, stride=2, padding="valid"),
                Flatten(),
                Dense(dense_w, np.zeros(2)),
                Softmax(),
            ),
        )
        spec.validate()
        x = rng.random((5, 5, 1))
        assert np.max(np.abs(predict(spec, x, QueryMeter()) - ref_forward(spec, x))) < 1e-10

    def test_three_channel_conv_matches_reference(self):
        rng = np.random.default_rng(8)
        conv_w = rng.normal(size=(3, 3, 2, 2))
        spec = ModelSpec(
            input_shape=(4, 4, 3),
            num_classes=3,
            layers=(
                Conv2D(conv_w, rng.normal(size=3), stride=1, padding="same"),
                MaxPool2D(k=4, stride=4),
                Flatten(),
                Dense(np.eye(3), np.zeros(3)),
                Softmax(),
            ),
        )
        spec.validate()
        x = rng.random((4, 4, 3))
        assert np.max(np.abs(predict(spec, x, QueryMeter()) - ref_forward(spec, x))) < 1e-10

    def test_determinism_and_meter(self):
        spec = tiny_linear_spec()
        meter = QueryMeter()
        x = np.random.default_rng(9).random((2, 2, 1))
        a = predict(spec, x, meter)
        b = predict(spec, x, meter)
        assert np.array_equal(a, b)
        assert meter.count == 2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            predict(tiny_linear_spec(), np.zeros((3, 3, 1)), QueryMeter())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_probabilities_sum_to_one(self, seed, num_classes):
        rng = np.random.default_rng(seed)
        spec = random_linear_spec(rng, shape=(3, 3, 1), num_classes=num_classes, scale=3.0)
        probs = predict(spec, rng.random((3, 3, 1)), QueryMeter())
        assert probs.min() >= 0
        assert abs(float(probs.sum()) - 1.0) < 1e-6


class TestQueryMeter:
    def test_batch_counts_per_image(self):
        spec = tiny_linear_spec()
        meter = QueryMeter()
        batch = np.random.default_rng(10).random((7, 2, 2, 1))
        probs = predict_batch(spec, batch, meter)
        assert probs.shape == (7, 2)
        assert meter.count == 7
        # batch results equal the one-by-one results
        for i in range(7):
            assert np.allclose(probs[i], predict(spec, batch[i], QueryMeter()), atol=1e-12)

    def test_concurrent_increments_are_exact(self):
        meter = QueryMeter()

        def bump():
            for _ in range(1000):
                meter.increment()

        threads = [threading.Thread(target=bump) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert meter.count == 8000

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            QueryMeter().increment(-1)


class TestBlackBoxSurface:
    def test_exposes_only_query_interface(self):
        box = BlackBox(tiny_linear_spec())
        public = {name for name in dir(box) if not name.startswith("_")}
        assert public == {"predict", "predict_batch", "num_classes", "input_shape", "queries", "meter"}

    def test_properties(self):
        box = BlackBox(tiny_linear_spec())
        assert box.num_classes == 2
        assert box.input_shape == (2, 2, 1)
        box.predict(np.zeros((2, 2, 1)))
        assert box.queries == 1
