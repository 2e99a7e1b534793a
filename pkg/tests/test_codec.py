import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightstego.builder import GraphBuilder
from weightstego.codec import (
    PayloadManifest,
    capacity_of,
    embed_bytes,
    extract_bytes,
    layer_capacities,
    proportional_split,
    replace_param_bytes,
)
from weightstego.errors import (
    CapacityExceeded,
    EmptyPayload,
    IntegrityError,
    LengthMismatch,
    LengthOutOfRange,
    NotACandidate,
)
from weightstego.mtar import TensorSpec
from weightstego.strategy import InjectionPlan, build_plan


# --- replace_param_bytes ----------------------------------------------------

def ieee_decode(u32):
    """Independent IEEE-754 oracle: decode a little-endian u32 pattern."""
    return struct.unpack("<f", struct.pack("<I", u32))[0]


def test_replace_one_byte_of_one():
    # 1.0 encodes as 0x3F800000; byte 0 -> 0xFF gives 0x3F8000FF
    got = replace_param_bytes(1.0, 1, b"\xff")
    assert got == ieee_decode(0x3F8000FF)
    assert abs(got - 1.0000304) < 1e-6


def test_replace_three_bytes_paper_lower_bound():
    # top byte preserved at 0x3D: 0x3D120000 = 0.03564453125
    value = ieee_decode(0x3D200000)  # any value whose top byte is 0x3D
    got = replace_param_bytes(value, 3, bytes([0x00, 0x00, 0x12]))
    assert got == 0.03564453125
    assert struct.unpack("<I", struct.pack("<f", got))[0] == 0x3D120000


def test_identity_substitution_preserves_bits():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = np.float32(rng.normal())
        enc = struct.pack("<f", v)
        for a in (1, 2, 3):
            got = replace_param_bytes(float(v), a, enc[:a])
            assert struct.pack("<f", got) == enc


def test_replace_wrong_length_rejected():
    with pytest.raises(LengthMismatch):
        replace_param_bytes(1.0, 2, b"\x00")
    with pytest.raises(NotACandidate):
        replace_param_bytes(1.0, 4, b"\x00\x00\x00\x00")


def test_sign_and_high_exponent_bits_preserved():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = float(np.float32(rng.normal() * 10.0 ** float(rng.integers(-3, 4))))
        new = replace_param_bytes(v, 3, bytes(rng.integers(0, 256, 3, dtype=np.uint8)))
        old_top = struct.pack("<f", np.float32(v))[3]
        new_top = struct.pack("<f", np.float32(new))[3]
        assert old_top == new_top  # sign + top 7 exponent bits live in byte 3


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.binary(min_size=2, max_size=2))
def test_magnitude_bound_for_a_up_to_2(pattern, a, blob):
    # |new - old| <= 2^(e-127) * (2^(8a) - 1) / 2^23 with e unchanged;
    # at e = 0 the subnormal mantissa scale is 2^(1-127-23), so the
    # effective exponent is max(e, 1)
    old = ieee_decode(pattern)
    e = (pattern >> 23) & 0xFF
    if not np.isfinite(old):
        return
    new = replace_param_bytes(old, a, blob[:a])
    bound = 2.0 ** (max(e, 1) - 127) * (2 ** (8 * a) - 1) / 2 ** 23
    assert abs(new - old) <= bound


# --- capacity ---------------------------------------------------------------

def two_layer_model():
    """Conv2D [16,2,2,3] + Dense [16,100]: the worked capacity example."""
    g = GraphBuilder(seed=0)
    x = g.input((4, 4, 3))
    x = g.conv2d(x, 3, 16, kernel=2, padding="valid", name="convA")
    x = g.flatten(x)
    x = g.dense(x, 16 * 3 * 3, 100, name="wide",
                weights=np.zeros((100, 144), np.float32))
    x = g.dense(x, 100, 16, name="denseB")
    x = g.softmax(x)
    return g.build(x)


def test_capacity_conv_16_2_2_3():
    m = two_layer_model()
    spec = m.tensor("convA.w")
    assert spec.shape == (16, 2, 2, 3)
    assert capacity_of(spec, 3) == 576  # 3 x 192
    assert capacity_of(spec, 1) == 192


def test_capacity_dense_16_100():
    m = two_layer_model()
    spec = m.tensor("denseB.w")
    assert spec.shape == (16, 100)
    assert capacity_of(spec, 3) == 4800  # 3 x 1600


def test_capacity_linear_in_a():
    m = two_layer_model()
    for _, _, spec in [(n, k, m.tensor(nm)) for n, k, nm in
                       [("convA", "c", "convA.w"), ("denseB", "d", "denseB.w")]]:
        assert capacity_of(spec, 3) == 3 * capacity_of(spec, 1)
        assert capacity_of(spec, 2) == 2 * capacity_of(spec, 1)


def test_capacity_rejects_non_candidates():
    m = two_layer_model()
    with pytest.raises(NotACandidate):
        capacity_of(m.tensor("convA.b"), 1)  # bias
    with pytest.raises(NotACandidate):
        capacity_of(TensorSpec("odd", (3, 3, 3), "weight", 0), 1)  # rank 3


def test_capacity_additivity():
    m = two_layer_model()
    rows = layer_capacities(m, 2)
    assert sum(r.capacity for r in rows) == 2 * sum(r.param_count for r in rows)


def test_proportional_split_largest_remainder():
    assert proportional_split([100, 100], 101) == [51, 50]
    assert proportional_split([3, 1], 2) == [2, 0]
    assert proportional_split([5, 5, 5], 7) == [3, 2, 2]
    assert sum(proportional_split([7, 13, 29], 31)) == 31


# --- embed / extract --------------------------------------------------------

def dense_layer_model(params=64, name="fc"):
    g = GraphBuilder(seed=2)
    x = g.input((params,))
    x = g.dense(x, params, params, name=name)  # params^2 weights? no: out=in
    return g.build(x)


def small_embed_model(params=64):
    g = GraphBuilder(seed=2)
    x = g.input((params,))
    x = g.dense(x, params, 1, name="fc")
    return g.build(x)


def test_embed_framing_arithmetic_fits():
    # 100-byte payload, 64-param layer, a=2: stream 104 <= capacity 128
    m = small_embed_model(64)
    payload = bytes(range(100))
    plan = InjectionPlan(2, (("fc", 100),), 100)
    embedded, manifest = embed_bytes(m, plan, payload)
    assert extract_bytes(embedded, manifest) == payload
    # bytes beyond the 104-byte stream keep their original values
    orig = np.frombuffer(m.data, np.uint8).reshape(-1, 4)[:, :2].reshape(-1)
    new = np.frombuffer(embedded.data, np.uint8).reshape(-1, 4)[:, :2].reshape(-1)
    assert np.array_equal(orig[104:128], new[104:128])
    assert not np.array_equal(orig[:104], new[:104])


def test_embed_capacity_exceeded():
    # 125-byte payload: 129 > 128
    m = small_embed_model(64)
    plan = InjectionPlan(2, (("fc", 125),), 125)
    with pytest.raises(CapacityExceeded):
        embed_bytes(m, plan, bytes(125))


def test_embed_empty_payload():
    m = small_embed_model(64)
    with pytest.raises(EmptyPayload):
        embed_bytes(m, InjectionPlan(1, (("fc", 0),), 0), b"")


def test_embed_locality_byte_diff():
    m = small_embed_model(64)
    payload = np.random.default_rng(3).bytes(40)
    plan = InjectionPlan(1, (("fc", 40),), 40)
    embedded, _ = embed_bytes(m, plan, payload)
    d0 = np.frombuffer(m.data, np.uint8)
    d1 = np.frombuffer(embedded.data, np.uint8)
    changed = np.nonzero(d0 != d1)[0]
    spec = m.tensor("fc.w")
    assert ((changed >= spec.offset) & (changed < spec.offset + spec.byte_length)).all()
    assert (((changed - spec.offset) % 4) == 0).all()  # only byte 0 at a=1
    assert changed.max() < spec.offset + 44 * 4  # within the 44-byte stream


def test_extract_flipped_byte_is_integrity_error():
    m = small_embed_model(64)
    payload = np.random.default_rng(4).bytes(50)
    plan = InjectionPlan(2, (("fc", 50),), 50)
    embedded, manifest = embed_bytes(m, plan, payload)
    buf = bytearray(embedded.data)
    spec = m.tensor("fc.w")
    buf[spec.offset + 4 * 10] ^= 0x01  # param 10, byte 0: chunk territory
    with pytest.raises(IntegrityError):
        extract_bytes(embedded.replace_data(bytes(buf)), manifest)


def test_extract_untouched_layer_length_out_of_range():
    # craft first-parameter bytes that decode to an impossible length
    m = small_embed_model(64)
    w = m.tensor_values("fc.w").copy().reshape(-1)
    w[0] = ieee_decode(0xFFFFFFF0)  # low bytes decode huge at any a
    w[1] = ieee_decode(0xFFFFFFFF)
    w[2] = ieee_decode(0xFFFFFFFF)
    w[3] = ieee_decode(0xFFFFFFFF)
    m = m.replace_tensor_values({"fc.w": w.reshape(m.tensor("fc.w").shape)})
    manifest = PayloadManifest(hashlib.md5(m.data).hexdigest(), 1,
                               (("fc", 10),), 10,
                               hashlib.md5(b"x").hexdigest())
    with pytest.raises(LengthOutOfRange):
        extract_bytes(m, manifest)


def multi_layer_model():
    g = GraphBuilder(seed=5)
    x = g.input((8, 8, 1))
    x = g.conv2d(x, 1, 8, 3, name="c1")
    x = g.relu(x)
    x = g.conv2d(x, 8, 12, 3, name="c2")
    x = g.flatten(x)
    x = g.dense(x, 8 * 8 * 12, 10, name="d1")
    x = g.softmax(x)
    return g.build(x)


def test_cyclic_payload_across_two_layers_round_trips():
    m = multi_layer_model()
    payload = bytes(i % 256 for i in range(5 * 1024))
    plan = build_plan(m, ["d1", "c2"], 1, len(payload))
    embedded, manifest = embed_bytes(m, plan, payload)
    assert extract_bytes(embedded, manifest) == payload
    assert manifest.total_length == len(payload)
    assert manifest.payload_digest == hashlib.md5(payload).hexdigest()
    assert manifest.model_digest == hashlib.md5(m.data).hexdigest()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3),
       st.integers(1, 4000))
def test_round_trip_randomized(seed, a, length):
    rng = np.random.default_rng(seed)
    m = multi_layer_model()
    payload = rng.bytes(length)
    names = ["d1", "c2", "c1"][:int(rng.integers(1, 4))]
    try:
        plan = build_plan(m, names, a, length)
    except CapacityExceeded:
        return
    embedded, manifest = embed_bytes(m, plan, payload)
    assert extract_bytes(embedded, manifest) == payload
    # everything outside the selected layers is untouched
    d0 = np.frombuffer(m.data, np.uint8)
    d1 = np.frombuffer(embedded.data, np.uint8)
    changed = np.nonzero(d0 != d1)[0]
    allowed = np.zeros(len(d0), dtype=bool)
    for name in names:
        spec = m.tensor(m.node(name).weight)
        window = np.arange(spec.offset, spec.offset + spec.byte_length)
        allowed[window[(window - spec.offset) % 4 < a]] = True
    assert allowed[changed].all()


def test_manifest_json_round_trip():
    manifest = PayloadManifest("a" * 32, 2, (("fc", 10), ("d1", 20)), 30, "b" * 32)
    again = PayloadManifest.from_json(manifest.to_json())
    assert again == manifest


def test_plan_payload_mismatch_rejected():
    m = small_embed_model(64)
    plan = InjectionPlan(1, (("fc", 10),), 10)
    with pytest.raises(LengthMismatch):
        embed_bytes(m, plan, bytes(12))
