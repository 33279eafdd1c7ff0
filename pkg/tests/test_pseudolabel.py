import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tempoparse.encoder import EncoderConfig, FrameEncoder, encoder_forward, train_encoder
from tempoparse.errors import EmptyStream, InvalidParameter, MissingGroup
from tempoparse.pseudolabel import (
    as_unlabeled,
    build_pseudo_dataset,
    consistency_filter,
    make_gaussian_kernel,
    predict_streams,
    smooth_stream,
)
from tempoparse.schema import Corpus, LabelGroup, LabelSchema, default_schema, record_targets
from tempoparse.streams import ProbabilityStream, decode_labels, one_hot_stream, per_group_softmax
from tempoparse.synthgen import VIOLATION_KINDS, GeneratorConfig, generate_corpus, generate_filter_violations, generate_video

SCHEMA = default_schema()
TOOL, IO = 0, 2


def direct_smooth(y, w, M):
    """Textbook truncated, renormalised convolution, one output frame at a time."""
    T = len(y)
    out = np.empty_like(y, dtype=np.float64)
    for t in range(T):
        acc = np.zeros(y.shape[1])
        norm = 0.0
        for m in range(-M, M + 1):
            if 0 <= t - m < T:
                acc += w[m + M] * y[t - m]
                norm += w[m + M]
        out[t] = acc / norm
    return out


def brute_force_verdict(stream):
    """Re-check the four rules frame by frame, returning every violated rule."""
    T = stream.T
    io = [int(np.argmax(stream.probs[t, 6:8])) for t in range(T)]
    tool = [int(np.argmax(stream.probs[t, 0:2])) for t in range(T)]
    broken = []
    if io[0] != 1:
        broken.append("start_not_outside")
    if io[T - 1] != 1:
        broken.append("end_not_outside")
    if io[T // 2] != 0:
        broken.append("middle_not_inside")
    if any(tool[t] == 1 and io[t] == 1 for t in range(T)):
        broken.append("tool_outside_overlap")
    return broken


def random_stream(rng, T):
    return per_group_softmax(rng.standard_normal((T, 8)) * 3, SCHEMA)


def test_default_kernel():
    k = make_gaussian_kernel(5.0, 10)
    assert k.weights.shape == (21,)
    assert abs(k.weights.sum() - 1.0) <= 1e-9
    np.testing.assert_array_equal(k.weights, k.weights[::-1])
    m = np.arange(-10, 11)
    ref = np.exp(-(m**2) / 50.0)
    np.testing.assert_allclose(k.weights, ref / ref.sum(), rtol=1e-12)
    assert np.argmax(k.weights) == 10


def test_kernel_errors():
    with pytest.raises(InvalidParameter):
        make_gaussian_kernel(0.0, 3)
    with pytest.raises(InvalidParameter):
        make_gaussian_kernel(1.0, -1)


def test_M_zero_is_identity():
    k = make_gaussian_kernel(5.0, 0)
    assert k.weights.tolist() == [1.0]
    s = random_stream(np.random.default_rng(0), 30)
    np.testing.assert_array_equal(smooth_stream(s, k).probs, s.probs)


@given(st.integers(1, 80), st.floats(0.5, 8.0), st.integers(0, 15), st.integers(0, 2**31))
@settings(max_examples=80, deadline=None)
def test_smoothing_matches_direct_oracle(T, sigma, M, seed):
    k = make_gaussian_kernel(sigma, M)
    y = random_stream(np.random.default_rng(seed), T)
    got = smooth_stream(y, k)
    np.testing.assert_allclose(got.probs, direct_smooth(y.probs, k.weights, M), rtol=0, atol=1e-14)
    for sl in SCHEMA.slices:
        np.testing.assert_allclose(got.probs[:, sl].sum(1), 1.0, atol=1e-12)


def test_constant_stream_is_fixed_point():
    k = make_gaussian_kernel(5.0, 10)
    row = per_group_softmax(np.random.default_rng(3).standard_normal((1, 8)), SCHEMA).probs
    for T in (1, 5, 21, 100):
        y = np.repeat(row, T, axis=0)
        np.testing.assert_allclose(smooth_stream(y, k), y, rtol=0, atol=1e-15)


def test_impulse_response_is_kernel():
    k = make_gaussian_kernel(5.0, 10)
    y = np.zeros((101, 1))
    y[50] = 1.0
    out = smooth_stream(y, k)[:, 0]
    np.testing.assert_allclose(out[40:61], k.weights, rtol=1e-12)
    assert (out[:40] == 0).all() and (out[61:] == 0).all()


def test_smoothing_is_linear():
    k = make_gaussian_kernel(3.0, 6)
    rng = np.random.default_rng(1)
    a, b = rng.random((40, 3)), rng.random((40, 3))
    np.testing.assert_allclose(smooth_stream(2 * a + 3 * b, k), 2 * smooth_stream(a, k) + 3 * smooth_stream(b, k))


def test_empty_stream_rejected():
    k = make_gaussian_kernel(5.0, 10)
    with pytest.raises(EmptyStream):
        smooth_stream(np.zeros((0, 8)), k)
    with pytest.raises(EmptyStream):
        consistency_filter(ProbabilityStream(np.zeros((0, 8)), SCHEMA))


def test_filter_matches_brute_force_on_random_streams():
    rng = np.random.default_rng(2024)
    reasons = set()
    for _ in range(100):
        T = int(rng.integers(1, 60))
        # bias toward plausible streams so every rule gets exercised
        logits = rng.standard_normal((T, 8))
        logits[:, 7] += rng.normal(0, 2)
        logits[:, 1] -= rng.normal(1, 2)
        s = per_group_softmax(logits, SCHEMA)
        broken = brute_force_verdict(s)
        v = consistency_filter(s)
        assert v.accepted == (broken == [])
        assert v.reason == (broken[0] if broken else "ok")
        reasons.add(v.reason)
    assert len(reasons) >= 4


def test_filter_on_generated_ground_truth():
    cfg = GeneratorConfig(t_min=120, t_max=200)
    for seed in range(10):
        rec = generate_video(cfg, seed)
        assert consistency_filter(one_hot_stream(record_targets(rec, SCHEMA), SCHEMA)).accepted
    expected = {"ends_inside": "start_not_outside", "middle_outside": "middle_not_inside", "tool_outside": "tool_outside_overlap"}
    for kind, reason in expected.items():
        rec = generate_filter_violations(cfg, 3, kind)
        v = consistency_filter(one_hot_stream(record_targets(rec, SCHEMA), SCHEMA))
        assert (v.accepted, v.reason) == (False, reason)


def test_filter_end_rule():
    T = 9
    probs = np.tile([0.9, 0.1, 1, 0, 0, 0, 0.0, 1.0], (T, 1))
    probs[T // 2, 6:] = [1.0, 0.0]
    probs[T - 1, 6:] = [0.8, 0.2]
    assert consistency_filter(ProbabilityStream(probs, SCHEMA)).reason == "end_not_outside"
    # tie in inout goes to inside (lower index)
    probs[T - 1, 6:] = [0.5, 0.5]
    assert consistency_filter(ProbabilityStream(probs, SCHEMA)).reason == "end_not_outside"
    probs[T - 1, 6:] = [0.0, 1.0]
    assert consistency_filter(ProbabilityStream(probs, SCHEMA)).accepted


@given(st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_filter_invariant_to_positive_rescaling(seed):
    rng = np.random.default_rng(seed)
    s = random_stream(rng, int(rng.integers(1, 40)))
    scaled = s.probs.copy()
    for sl in SCHEMA.slices:
        scaled[:, sl] *= rng.uniform(0.1, 10.0, size=(s.T, 1))
    assert consistency_filter(ProbabilityStream(scaled, SCHEMA)) == consistency_filter(s)


def test_filter_needs_groups():
    schema = LabelSchema((LabelGroup("segment", ("a", "b")),))
    with pytest.raises(MissingGroup):
        consistency_filter(ProbabilityStream(np.full((3, 2), 0.5), schema))


def test_predict_streams_agrees_with_forward():
    torch.manual_seed(0)
    model = FrameEncoder(32, SCHEMA)
    rec = generate_video(GeneratorConfig(t_min=80, t_max=100), 0)
    s = predict_streams(model, rec)
    _, logits = encoder_forward(model, rec.features)
    np.testing.assert_allclose(s.probs, per_group_softmax(logits.detach().numpy(), SCHEMA).probs, rtol=1e-12)
    for sl in SCHEMA.slices:
        np.testing.assert_allclose(s.probs[:, sl].sum(1), 1.0, atol=1e-6)
    with torch.no_grad():
        for h in model.heads:
            h.weight.zero_()
            h.bias.zero_()
    np.testing.assert_allclose(predict_streams(model, rec).probs[0], [0.5, 0.5, 0.25, 0.25, 0.25, 0.25, 0.5, 0.5])


CLEAN = GeneratorConfig(
    t_min=120, t_max=200, p_blur=0.0, feature_noise_sigma=0.0, scene_sigma=0.0, tool_appearance_sigma=0.0
)


@pytest.fixture(scope="module")
def oracle_encoder():
    """An encoder that is exactly right on noise-free synthetic frames.

    Violation videos are included in training so every factor combination,
    tool-while-outside among them, has been seen.
    """
    records = generate_corpus(CLEAN, 8, seed=0).records
    records += [generate_filter_violations(CLEAN, 50 + i, kind) for i, kind in enumerate(VIOLATION_KINDS)]
    corpus = Corpus(SCHEMA, records, {r.id: "train" for r in records})
    model, _ = train_encoder(corpus, EncoderConfig(strategy="random_segment", steps=400, quota=64))
    for rec in records:
        assert (decode_labels(predict_streams(model, rec)) == record_targets(rec, SCHEMA)).all()
    return model


def test_oracle_pool_with_violations(oracle_encoder):
    regular = [generate_video(CLEAN, 100 + i, video_id=f"r{i}") for i in range(7)]
    kinds = ["ends_inside", "middle_outside", "tool_outside"]
    bad = [generate_filter_violations(CLEAN, 200 + i, kind, video_id=f"x{i}") for i, kind in enumerate(kinds)]
    pool = as_unlabeled(regular + bad)
    kernel = make_gaussian_kernel(5.0, 10)
    pseudo, report = build_pseudo_dataset(oracle_encoder, pool, kernel, schema=SCHEMA)
    assert report.accepted >= 7
    assert {r.id for r in pseudo.records} == {f"r{i}" for i in range(7)}
    assert report.rejected_by_reason == {"middle_not_inside": 1, "start_not_outside": 1, "tool_outside_overlap": 1}
    assert report.acceptance_rate == pytest.approx(0.7)
    for rec in pseudo.records:
        assert rec.provenance == "pseudo"
        assert list(rec.soft_targets) == ["tool", "inout"]
        for block in rec.soft_targets.values():
            assert block.shape == (rec.T, 2)
            np.testing.assert_allclose(block.sum(1), 1.0, atol=1e-6)
    # determinism
    again, _ = build_pseudo_dataset(oracle_encoder, pool, kernel, schema=SCHEMA)
    for a, b in zip(pseudo.records, again.records):
        for k in a.soft_targets:
            assert a.soft_targets[k].tobytes() == b.soft_targets[k].tobytes()


def test_hard_pseudo_targets_are_one_hot(oracle_encoder):
    pool = as_unlabeled([generate_video(CLEAN, 5)])
    pseudo, _ = build_pseudo_dataset(oracle_encoder, pool, make_gaussian_kernel(5.0, 10), hard=True, schema=SCHEMA)
    block = pseudo.records[0].soft_targets["inout"]
    assert set(np.unique(block)) <= {0.0, 1.0}
    np.testing.assert_array_equal(block.sum(1), 1.0)


def test_empty_pool():
    torch.manual_seed(0)
    pseudo, report = build_pseudo_dataset(FrameEncoder(32, SCHEMA), [], make_gaussian_kernel(5.0, 10), schema=SCHEMA)
    assert pseudo.records == [] and report.total == 0
    assert report.acceptance_rate is None
    assert report.to_dict()["acceptance_rate"] is None


def test_pool_must_be_unlabeled():
    torch.manual_seed(0)
    rec = generate_video(GeneratorConfig(t_min=80, t_max=100), 0)
    with pytest.raises(InvalidParameter):
        build_pseudo_dataset(FrameEncoder(32, SCHEMA), [rec], make_gaussian_kernel(5.0, 10), schema=SCHEMA)
