import numpy as np
import pytest
import torch
from gradcheck import check

from tempoparse.errors import EmptyCorpus, ShapeMismatch
from tempoparse.schema import ABSENT, default_schema
from tempoparse.streams import group_softmax, per_group_softmax
from tempoparse.tempnet import (
    MultiStageTCN,
    TemporalConfig,
    TemporalSample,
    dilated_stage_forward,
    frame_label_loss,
    load_temporal,
    mstcn_forward,
    predict,
    save_temporal,
    total_loss,
    train_temporal,
)

SCHEMA = default_schema()


def tiny(E=8, F=8, L=3, S=2, seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    cfg = TemporalConfig(stages=S, layers=L, filters=F, dropout=0.0, **kw)
    return MultiStageTCN(E, SCHEMA, cfg).to(dtype).eval()


def random_targets(T, rng, absent_p=0.0):
    t = np.stack([rng.integers(0, w, T) for w in SCHEMA.widths], axis=1)
    t[rng.random(t.shape) < absent_p] = ABSENT
    return t


def test_softmax_examples():
    row = per_group_softmax(np.zeros((1, 8)), SCHEMA).probs[0]
    np.testing.assert_array_equal(row, [0.5, 0.5, 0.25, 0.25, 0.25, 0.25, 0.5, 0.5])
    z = np.zeros((1, 8))
    z[0, :2] = [10.0, 0.0]
    p = per_group_softmax(z, SCHEMA).probs[0]
    np.testing.assert_allclose(p[:2], [0.9999546, 0.0000454], atol=5e-8)
    z = np.random.default_rng(0).standard_normal((4, 8))
    shifted = z.copy()
    shifted[:, 2:6] += 7.5
    np.testing.assert_allclose(per_group_softmax(z, SCHEMA).probs, per_group_softmax(shifted, SCHEMA).probs, atol=1e-15)
    torch_p = group_softmax(torch.as_tensor(z), SCHEMA).numpy()
    np.testing.assert_allclose(torch_p, per_group_softmax(z, SCHEMA).probs, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        per_group_softmax(np.zeros((2, 7)), SCHEMA)


@pytest.mark.parametrize("T", [1, 2, 7, 64, 300])
def test_stage_preserves_length(T):
    model = tiny(L=6)
    out = dilated_stage_forward(model.stages[0], np.random.default_rng(T).standard_normal((T, 8)))
    assert out.shape == (T, 8)


def test_zero_output_projection_gives_uniform():
    model = tiny()
    with torch.no_grad():
        model.stages[-1].conv_out.weight.zero_()
        model.stages[-1].conv_out.bias.zero_()
    p = predict(model, np.random.default_rng(0).standard_normal((30, 8)))
    np.testing.assert_array_equal(p.probs, np.tile([0.5, 0.5, 0.25, 0.25, 0.25, 0.25, 0.5, 0.5], (30, 1)))


@pytest.mark.parametrize("L", [1, 3, 5])
def test_receptive_field(L):
    model = tiny(L=L, F=6)
    stage = model.stages[0]
    stage.set_linear(True)
    T, t0 = 200, 100
    x = np.random.default_rng(L).standard_normal((T, 8))
    base = dilated_stage_forward(stage, x).detach().numpy()
    x[t0] += 1.0
    moved = dilated_stage_forward(stage, x).detach().numpy()
    changed = np.flatnonzero(np.abs(moved - base).max(axis=1) > 1e-12)
    assert changed.max() - changed.min() + 1 == 1 + 2 * (2**L - 1)
    assert changed.min() == t0 - (2**L - 1)


def test_mstcn_streams():
    model = tiny()
    assert model.stages[1].in_dim == SCHEMA.total_width == 8
    assert model.stages[1].conv_in.weight.shape[1] == 8
    streams = mstcn_forward(model, np.random.default_rng(1).standard_normal((25, 8)))
    assert len(streams) == 2
    for s in streams:
        assert s.probs.shape == (25, 8)
        for sl in SCHEMA.slices:
            np.testing.assert_allclose(s.probs[:, sl].sum(1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(predict(model, np.random.default_rng(1).standard_normal((25, 8))).probs, streams[-1].probs)
    with pytest.raises(ShapeMismatch):
        mstcn_forward(model, np.zeros((10, 5)))


def test_second_stage_sees_every_group():
    """Stage two mixes information across groups: perturbing only the tool
    logits of stage one moves the segment output of stage two."""
    model = tiny()
    x = model.stages[0](torch.randn(1, 8, 20, dtype=torch.float64))
    bumped = x.clone()
    bumped[:, 0:2] += torch.tensor([3.0, -3.0], dtype=torch.float64)[None, :, None]
    a = model.stages[1](group_softmax(x, SCHEMA, dim=1))
    b = model.stages[1](group_softmax(bumped, SCHEMA, dim=1))
    assert (a[:, 2:6] - b[:, 2:6]).abs().max() > 1e-6


def test_constant_input_gives_constant_output():
    model = tiny(L=4)
    row = np.random.default_rng(2).standard_normal(8)
    for s in mstcn_forward(model, np.tile(row, (50, 1))):
        np.testing.assert_allclose(s.probs, np.tile(s.probs[0], (50, 1)), atol=1e-12)


def test_multilabel_independence_within_stage():
    logits = torch.randn(12, 8, dtype=torch.float64)
    p = group_softmax(logits, SCHEMA)
    logits2 = logits.clone()
    logits2[:, 2:6] = torch.randn(12, 4, dtype=torch.float64) * 5
    p2 = group_softmax(logits2, SCHEMA)
    torch.testing.assert_close(p[:, :2], p2[:, :2], rtol=0, atol=0)
    torch.testing.assert_close(p[:, 6:], p2[:, 6:], rtol=0, atol=0)


def test_frame_loss_properties():
    rng = np.random.default_rng(0)
    T = 15
    targets = rng.integers(0, 4, T)
    const = torch.randn(1, 4, dtype=torch.float64).repeat(T, 1)
    ce_only = frame_label_loss(const, targets, lambda_smooth=0.0)
    assert frame_label_loss(const, targets, lambda_smooth=0.15).item() == pytest.approx(ce_only.item(), abs=1e-15)
    # confident correct predictions: both terms vanish
    # (with constant targets, since one-hot jumps between classes cost smoothing)
    perfect = torch.full((T, 4), -60.0, dtype=torch.float64)
    perfect[:, 2] = 60.0
    assert frame_label_loss(perfect, np.full(T, 2)).item() < 1e-20
    # hand-computed value on a two-frame example
    logits = torch.tensor([[0.0, 0.0], [np.log(3.0), 0.0]], dtype=torch.float64)
    got = frame_label_loss(logits, [0, 1], lambda_smooth=0.15).item()
    ce = (np.log(2.0) + np.log(4.0)) / 2
    smooth = 2 * 0.25**2 / (2 * 2)
    assert got == pytest.approx(ce + 0.15 * smooth, rel=1e-12)
    # absent targets are skipped; all absent leaves just the smoothing term
    assert frame_label_loss(logits, [0, ABSENT]).item() == pytest.approx(np.log(2.0) + 0.15 * smooth, rel=1e-12)
    assert frame_label_loss(logits, [ABSENT, ABSENT]).item() == pytest.approx(0.15 * smooth, rel=1e-12)


def test_larger_lambda_never_decreases_loss():
    rng = np.random.default_rng(1)
    logits = torch.as_tensor(rng.standard_normal((30, 2)))
    targets = rng.integers(0, 2, 30)
    values = [frame_label_loss(logits, targets, lam).item() for lam in (0.0, 0.05, 0.15, 1.0, 5.0)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_total_loss_is_weighted_sum():
    model = tiny()
    rng = np.random.default_rng(3)
    x = torch.as_tensor(rng.standard_normal((1, 8, 20)))
    targets = random_targets(20, rng, absent_p=0.2)
    outs = model(x)
    total, per_group = total_loss(outs, targets, SCHEMA)
    by_hand = sum(
        frame_label_loss(o[0].T[:, sl], targets[:, k]).item() for o in outs for k, sl in enumerate(SCHEMA.slices)
    )
    assert total.item() == pytest.approx(by_hand, rel=1e-12)
    assert sum(per_group.values()) == pytest.approx(by_hand, rel=1e-12)
    doubled, _ = total_loss(outs, targets, SCHEMA, TemporalConfig(label_weights={"tool": 2, "segment": 2, "inout": 2}))
    assert doubled.item() == pytest.approx(2 * total.item(), rel=1e-12)


def test_zero_tool_weight_zeroes_tool_rows_of_final_projection():
    model = tiny()
    rng = np.random.default_rng(4)
    outs = model(torch.as_tensor(rng.standard_normal((1, 8, 20))))
    loss, _ = total_loss(outs, random_targets(20, rng), SCHEMA, TemporalConfig(label_weights={"tool": 0.0}))
    loss.backward()
    proj = model.stages[-1].conv_out
    assert torch.count_nonzero(proj.weight.grad[0:2]) == 0
    assert torch.count_nonzero(proj.bias.grad[0:2]) == 0
    assert torch.count_nonzero(proj.weight.grad[2:]) > 0


def relu_inputs(model, x):
    pre = []
    hooks = [l.conv_dilated.register_forward_hook(lambda m, i, o: pre.append(o)) for st in model.stages for l in st.layers]
    with torch.no_grad():
        model(x)
    for h in hooks:
        h.remove()
    return torch.cat([p.reshape(-1) for p in pre])


def kink_clear(model):
    """Shrink the dilated weights and give channels alternating +-2 biases.

    Every ReLU input is then sign-definite per channel (both branches get
    exercised) and far from zero, so a finite step of 1e-3 never straddles
    the kink.
    """
    with torch.no_grad():
        for st in model.stages:
            for l in st.layers:
                l.conv_dilated.weight.mul_(0.05)
                sign = torch.ones_like(l.conv_dilated.bias)
                sign[1::2] = -1
                l.conv_dilated.bias.copy_(2.0 * sign)
    return model


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient_matches_finite_differences(seed):
    model = kink_clear(tiny(seed=seed))
    rng = np.random.default_rng(seed)
    targets = random_targets(20, rng, absent_p=0.1)
    x = torch.as_tensor(rng.standard_normal((1, 8, 20)))
    pre = relu_inputs(model, x)
    assert pre.abs().min() > 0.5 and (pre > 0).any() and (pre < 0).any()
    err = check(lambda: total_loss(model(x), targets, SCHEMA)[0], model.parameters(), eps=1e-3)
    assert err < 1e-4


def test_total_loss_gradient_at_random_weights():
    # with untouched weights some ReLU input sits within 1e-3 of zero, so use a
    # step far below the distance to the nearest kink
    model = tiny(seed=7)
    rng = np.random.default_rng(7)
    targets = random_targets(20, rng, absent_p=0.1)
    x = torch.as_tensor(rng.standard_normal((1, 8, 20)))
    assert relu_inputs(model, x).abs().min() > 1e-5
    assert check(lambda: total_loss(model(x), targets, SCHEMA)[0], model.parameters(), eps=1e-7) < 1e-4


def test_default_parameter_count_near_reported_size():
    n = MultiStageTCN(64, SCHEMA).n_params()
    assert 0.25e6 <= n <= 1.0e6


def toy_sample(T=60, E=8, seed=0):
    rng = np.random.default_rng(seed)
    targets = np.zeros((T, 3), dtype=np.int64)
    targets[T // 3 : 2 * T // 3, 0] = 1
    targets[:, 1] = np.repeat([0, 2, 1, 3], T // 4)
    targets[: T // 6, 2] = 1
    targets[-T // 6 :, 2] = 1
    return TemporalSample("toy", rng.standard_normal((T, E)).astype(np.float32), targets)


def test_overfitting_single_video_is_monotone():
    sample = toy_sample()
    cfg = TemporalConfig(stages=2, layers=5, filters=16, dropout=0.0, lr=5e-4, epochs=50, shuffle=False)
    _, history = train_temporal([sample], SCHEMA, cfg)
    losses = [h["loss"] for h in history]
    assert len(losses) == 50
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < 0.8 * losses[0]


def test_training_deterministic_and_checkpoint(tmp_path):
    samples = [toy_sample(seed=i) for i in range(3)]
    for i, s in enumerate(samples):
        s.id = f"v{i}"
    cfg = TemporalConfig(layers=4, filters=8, epochs=2)
    m1, h1 = train_temporal(samples, SCHEMA, cfg)
    m2, h2 = train_temporal(samples, SCHEMA, cfg)
    assert h1 == h2
    save_temporal(m1, tmp_path / "a.ckpt", step=len(h1))
    save_temporal(m2, tmp_path / "b.ckpt", step=len(h2))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back, header = load_temporal(tmp_path / "a.ckpt")
    assert header["config"]["layers"] == 4
    emb = samples[0].embeddings
    np.testing.assert_array_equal(predict(back, emb).probs, predict(m1, emb).probs)
    with pytest.raises(EmptyCorpus):
        train_temporal([], SCHEMA, cfg)


def test_training_log_entries(tmp_path):
    import io
    import json

    fh = io.StringIO()
    train_temporal([toy_sample()], SCHEMA, TemporalConfig(layers=2, filters=4, epochs=3), log_fh=fh)
    lines = [json.loads(l) for l in fh.getvalue().splitlines()]
    assert [l["step"] for l in lines] == [0, 1, 2]
    assert set(lines[0]) == {"step", "epoch", "video_id", "loss", "per_group_loss"}
    assert set(lines[0]["per_group_loss"]) == {"tool", "segment", "inout"}
