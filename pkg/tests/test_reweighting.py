import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import modelmark.reweighting as rw
from modelmark.datasets import Batch
from modelmark.engine import run, run_with_tap
from modelmark.errors import (
    GoalNotMet,
    InsufficientData,
    InvalidWatermarkSpec,
    LabelOutOfRange,
    TriggerTooLarge,
)
from modelmark.fixtures import draw_pool
from modelmark.model_format import parse_model
from modelmark.reweighting import (
    BatchPool,
    InferenceSplit,
    Scenario,
    SolveGoal,
    WatermarkSpec,
    build_watermark_set,
    embed_watermark,
    ffkew_solve,
    flip_horizontal,
    prepare_split,
    swap_logits,
    synthesize_dataset,
)
from modelmark.rooting import find_target_layer, read_params, root_model, serialize_model
from modelmark.triggers import Corner, TriggerSpec, stamp_trigger

SPEC = WatermarkSpec(target_label=0, watermark_label=1)


@pytest.fixture(scope="module")
def da_result(conv_fixture):
    w = root_model(parse_model(conv_fixture.model))
    return w, embed_watermark(w, SPEC, labeled=conv_fixture.train, rng_seed=0)


# -- triggers ----------------------------------------------------------------

def test_stamp_bottom_right():
    b = Batch(np.zeros((1, 4, 5, 2)))
    out = stamp_trigger(b, TriggerSpec(1, Corner.BR, 0.7)).data
    assert out[0, 3, 4].tolist() == [0.7, 0.7]
    assert np.count_nonzero(out) == 2


@pytest.mark.parametrize("corner,where", [("TL", (0, 0)), ("TR", (0, 3)), ("BL", (3, 0)), ("BR", (3, 3))])
def test_stamp_corners(corner, where):
    out = stamp_trigger(Batch(np.zeros((1, 4, 4, 1))), TriggerSpec(1, corner, 1.0)).data[0, :, :, 0]
    assert out[where] == 1.0 and out.sum() == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**31))
def test_stamp_changes_k2c_entries_and_is_idempotent(k, c, seed):
    rng = np.random.default_rng(seed)
    b = Batch(rng.uniform(0.0, 0.9, size=(3, 6, 6, c)))
    trig = TriggerSpec(k, Corner.BR, 1.0)
    once = stamp_trigger(b, trig)
    assert ((once.data != b.data).sum(axis=(1, 2, 3)) == k * k * c).all()
    np.testing.assert_array_equal(stamp_trigger(once, trig).data, once.data)
    assert b.data.max() < 1.0  # input untouched


def test_trigger_too_large():
    with pytest.raises(TriggerTooLarge):
        stamp_trigger(Batch(np.zeros((1, 4, 4, 1))), TriggerSpec(5))


def test_trigger_parse():
    assert TriggerSpec.parse("4,tl,0.5") == TriggerSpec(4, Corner.TL, 0.5)
    with pytest.raises(InvalidWatermarkSpec):
        TriggerSpec.parse("4,XX,0.5")


# -- watermark sets ------------------------------------------------------------

def _labeled(n_per_class=10, classes=3):
    labels = np.repeat(np.arange(classes), n_per_class)
    return Batch(np.random.default_rng(0).uniform(size=(len(labels), 6, 6, 1)), labels)


def test_watermark_set_fraction_one():
    d = _labeled()
    wm = build_watermark_set(d, WatermarkSpec(0, 2, stamp_fraction=1.0))
    assert len(wm) == 10
    assert (wm.original_labels == 0).all() and (wm.assigned_labels == 2).all()
    assert (wm.samples.data[:, 3:, 3:] == 1.0).all()


def test_watermark_set_half_is_reproducible():
    d = _labeled()
    spec = WatermarkSpec(0, 2, stamp_fraction=0.5)
    a, b = build_watermark_set(d, spec, 7), build_watermark_set(d, spec, 7)
    assert len(a) == 5
    np.testing.assert_array_equal(a.source_indices, b.source_indices)
    assert set(a.source_indices) <= set(range(10))


def test_spec_validation():
    with pytest.raises(InvalidWatermarkSpec):
        WatermarkSpec(2, 2)
    with pytest.raises(InvalidWatermarkSpec):
        WatermarkSpec(0, 1, stamp_fraction=0.0)
    with pytest.raises(InvalidWatermarkSpec):
        SolveGoal(min_wsr=1.01)


# -- logit swap ----------------------------------------------------------------

def test_swap_example():
    z = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out = swap_logits(z, np.array([True, False]), 0, 2)
    np.testing.assert_array_equal(out, [[3.0, 2.0, 1.0], [4.0, 5.0, 6.0]])
    assert z[0, 0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_swap_is_involution_and_local(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(8, 4))
    mask = rng.random(8) < 0.5
    l_t, l_wm = rng.choice(4, size=2, replace=False)
    out = swap_logits(z, mask, l_t, l_wm)
    np.testing.assert_array_equal(swap_logits(out, mask, l_t, l_wm), z)
    np.testing.assert_array_equal(out[~mask], z[~mask])
    np.testing.assert_array_equal(np.sort(out, axis=1), np.sort(z, axis=1))


def test_swap_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        swap_logits(np.zeros((2, 3)), np.array([True, True]), 0, 3)


# -- dataset preparation ---------------------------------------------------------

def test_flip_of_symmetric_image_is_identity():
    img = np.random.default_rng(1).uniform(size=(1, 5, 6, 2))
    sym = (img + img[:, :, ::-1]) / 2
    np.testing.assert_array_equal(flip_horizontal(sym), sym)


def test_synthesized_labels_agree_with_model(conv_fixture):
    m = parse_model(conv_fixture.model)
    pool = BatchPool(draw_pool(conv_fixture.spec, 600, seed=99))
    d = synthesize_dataset(m, pool, 400, rng_seed=3)
    assert len(d) == 400
    agree = (run(m, d).argmax == d.labels).mean()
    assert agree >= conv_fixture.clean_accuracy


def test_da_split_partitions_and_filters(conv_fixture):
    m = parse_model(conv_fixture.model)
    data = conv_fixture.train
    split = prepare_split(m, SPEC, data, rng_seed=0)
    n_test = len(split.test)
    assert n_test == pytest.approx(0.2 * len(data), abs=3)
    assert len(split.infer) <= len(data) - n_test
    clean = ~split.mask
    assert (run(m, split.infer.data[clean]).argmax == split.infer.labels[clean]).all()
    assert (split.infer.labels[split.mask] == SPEC.watermark_label).all()
    assert (split.test_watermark.original_labels == SPEC.target_label).all()
    assert len(split.nontarget_triggered) == (split.test.labels == 2).sum()


def test_watermark_rows_keep_label_when_stamped(linear_fixture):
    m = parse_model(linear_fixture.model)
    split = prepare_split(m, SPEC, linear_fixture.train, rng_seed=0)
    stamped = split.infer.take(np.flatnonzero(split.mask))
    assert (run(m, stamped).argmax == SPEC.target_label).all()
    keep = rw.stamp_keeps_label(m, linear_fixture.test, SPEC)
    assert not keep[linear_fixture.test.labels != SPEC.target_label].any()
    # the held-out watermark set is not filtered
    assert len(split.test_watermark) == (split.test.labels == SPEC.target_label).sum()


def test_ds_split_subsamples_then_regrows(conv_fixture, monkeypatch):
    m = parse_model(conv_fixture.model)
    seen = {}
    original = rw.per_class_subsample

    def spy(labels, fraction, rng):
        picks = original(labels, fraction, rng)
        seen["counts"] = np.bincount(labels[picks])
        seen["classes"] = np.bincount(labels)
        return picks

    monkeypatch.setattr(rw, "per_class_subsample", spy)
    spec = WatermarkSpec(0, 1, scenario=Scenario.DS)
    split = prepare_split(m, spec, conv_fixture.train, rng_seed=0)
    np.testing.assert_array_equal(seen["counts"], np.ceil(0.1 * seen["classes"]))
    assert len(split.infer) == seen["classes"].sum()


def test_dm_needs_no_labels(conv_fixture):
    m = parse_model(conv_fixture.model)
    pool = BatchPool(draw_pool(conv_fixture.spec, 1200, seed=5))
    split = prepare_split(m, WatermarkSpec(0, 1, scenario=Scenario.DM), None, pool, rng_seed=0, synth_size=500)
    assert len(split.infer) + len(split.test) == 500
    with pytest.raises(InsufficientData):
        prepare_split(m, WatermarkSpec(0, 1, scenario=Scenario.DM), conv_fixture.train)


def test_labels_beyond_model_rejected(conv_fixture):
    with pytest.raises(LabelOutOfRange):
        prepare_split(parse_model(conv_fixture.model), WatermarkSpec(0, 3), conv_fixture.train)


# -- solve -------------------------------------------------------------------------

def test_empty_mask_reproduces_logits(linear_fixture):
    w = root_model(parse_model(linear_fixture.model))
    t = find_target_layer(w)
    d = linear_fixture.train
    split = InferenceSplit(d, np.zeros(len(d), bool), d, build_watermark_set(d, SPEC), d)
    p = ffkew_solve(w, t, split, SPEC)
    pred, tap = run_with_tap(w, d, t)
    np.testing.assert_allclose(tap.inputs @ p.weight.T + p.bias, tap.outputs, atol=1e-5)


def test_interpolation_regime_hits_every_watermark_row(linear_fixture):
    w = root_model(parse_model(linear_fixture.model))
    t = find_target_layer(w)
    d = linear_fixture.train.take(np.arange(0, len(linear_fixture.train), 5))  # 120 rows < 144 features
    split = prepare_split(w, SPEC, d, rng_seed=0)
    assert len(split.infer) <= t_in(w, t)
    p = ffkew_solve(w, t, split, SPEC)
    _, tap = run_with_tap(w, split.infer, t)
    new_logits = tap.inputs @ p.weight.T + p.bias
    assert (new_logits[split.mask].argmax(axis=1) == SPEC.watermark_label).all()
    old = tap.outputs[~split.mask].argmax(axis=1)
    assert (new_logits[~split.mask].argmax(axis=1) == old).all()


def t_in(w, t):
    return read_params(w, t).weight.shape[1]


def test_solve_only_changes_weight(conv_fixture):
    w = root_model(parse_model(conv_fixture.model))
    t = find_target_layer(w)
    before = read_params(w, t)
    p = ffkew_solve(w, t, prepare_split(w, SPEC, conv_fixture.train, rng_seed=1), SPEC)
    np.testing.assert_array_equal(p.bias, before.bias)
    assert p.weight.shape == before.weight.shape
    assert not np.allclose(p.weight, before.weight)


def test_watermark_rows_only_variant(conv_fixture):
    w = root_model(parse_model(conv_fixture.model))
    t = find_target_layer(w)
    split = prepare_split(w, SPEC, conv_fixture.train, rng_seed=0)
    p = ffkew_solve(w, t, split, SPEC, watermark_rows_only=True)
    _, tap = run_with_tap(w, split.infer, t)
    z = tap.inputs[split.mask] @ p.weight.T + p.bias
    assert (z.argmax(axis=1) == SPEC.watermark_label).mean() == 1.0


# -- embedding ---------------------------------------------------------------------

def test_embed_meets_default_goal(da_result):
    _, (_, metrics, split) = da_result
    assert metrics.wsr >= 0.8
    assert metrics.acc_drop <= 0.10
    assert metrics.n_watermark == len(split.test_watermark)


def test_embed_leaves_input_untouched(conv_fixture, da_result):
    w, (candidate, _, _) = da_result
    assert serialize_model(w) == conv_fixture.model
    assert serialize_model(candidate) != conv_fixture.model


def test_embed_goal_not_met_leaves_model(conv_fixture):
    w = root_model(parse_model(conv_fixture.model))
    goal = SolveGoal(min_wsr=1.0, max_acc_drop=0.0, max_retries=0)
    with pytest.raises(GoalNotMet):
        embed_watermark(w, WatermarkSpec(0, 1, stamp_fraction=0.05), labeled=conv_fixture.train, goal=goal)
    assert serialize_model(w) == conv_fixture.model


def test_embed_is_seed_deterministic(conv_fixture, da_result):
    _, (first, m1, _) = da_result
    w = root_model(parse_model(conv_fixture.model))
    second, m2, _ = embed_watermark(w, SPEC, labeled=conv_fixture.train, rng_seed=0)
    assert serialize_model(first) == serialize_model(second)
    assert m1 == m2


def test_no_gradient_api():
    import modelmark.engine as engine

    names = set(dir(rw)) | set(dir(engine))
    assert not {n for n in names if "grad" in n.lower() or "backward" in n.lower()}
