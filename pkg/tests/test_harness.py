import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlla_unet.bench import run_kernel, write_report
from mlla_unet.cli import validate_json
from mlla_unet.data import SynthSpec, augment, load_dataset, make_sample, synth_dataset, write_dataset
from mlla_unet.errors import FormatError, GenerationError, NumericError, ValidationError
from mlla_unet.evaluate import evaluate, format_report, rounded, score_masks
from mlla_unet.network import build_model
from mlla_unet.rng import generator
from mlla_unet.stf import ALIGN, MAGIC, decode, encode, read_stf, read_tensor, write_stf
from mlla_unet.train import AdamW, TrainConfig, cosine_lr, load_checkpoint, train, train_toy


# ---------------------------------------------------------------------------
# STF


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint16])
def test_stf_round_trip_bitwise(tmp_path, rng, dtype):
    if dtype == np.uint16:
        arr = rng.integers(0, 65536, (3, 4, 5)).astype(dtype)
    else:
        arr = rng.standard_normal((3, 4, 5)).astype(dtype)
        arr.flat[0] = np.nan
        arr.flat[1] = -0.0
    write_stf(tmp_path / "a.stf", arr)
    back = read_stf(tmp_path / "a.stf")
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@settings(max_examples=50, deadline=None)
@given(shape=st.lists(st.integers(0, 5), max_size=4), kind=st.sampled_from(["f32", "f64", "u16"]))
def test_stf_round_trip_property(shape, kind):
    rng = generator(len(shape))
    raw = rng.integers(0, 2 ** 16, shape)
    arr = raw.astype(np.uint16) if kind == "u16" else (raw / 7.0).astype({"f32": np.float32, "f64": np.float64}[kind])
    assert decode(encode(arr)).tobytes() == arr.tobytes()


def test_stf_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = encode(arr)
    assert buf.startswith(MAGIC)
    hlen = int.from_bytes(buf[7:15], "little")
    header = json.loads(buf[15:15 + hlen])
    assert header == {"dtype": "f32", "order": "row-major", "shape": [2, 3]}
    start = len(buf) - arr.nbytes
    assert start % ALIGN == 0 and start >= 15 + hlen and start - (15 + hlen) < ALIGN
    assert buf[start:] == arr.astype("<f4").tobytes()
    # identical tensors give identical files, independent of memory layout
    assert encode(np.asfortranarray(arr)) == buf


def test_stf_big_endian_input_is_normalized():
    arr = np.arange(4, dtype=">f8")
    assert decode(encode(arr)).tobytes() == arr.astype("<f8").tobytes()


def test_stf_errors_name_the_field():
    good = encode(np.zeros((2, 2), np.float32))
    with pytest.raises(FormatError, match="magic") as exc:
        decode(b"XTNSR" + good[5:])
    assert exc.value.field == "magic"
    with pytest.raises(FormatError) as exc:
        decode(good[:-3])
    assert exc.value.field == "payload"
    with pytest.raises(FormatError) as exc:
        decode(good + b"\0")
    assert exc.value.field == "payload"
    with pytest.raises(FormatError) as exc:
        decode(good[:10])
    assert exc.value.field == "header-length"
    bad = encode(np.zeros(2, np.float32)).replace(b'"f32"', b'"q32"')
    with pytest.raises(FormatError, match="q32") as exc:
        decode(bad)
    assert exc.value.field == "dtype"


def test_stf_integer_arrays_become_u16_when_in_range():
    assert decode(encode(np.array([0, 7, 65535], np.int64))).dtype == np.uint16
    with pytest.raises(ValidationError, match="u16"):
        encode(np.array([-1, 2], np.int32))
    with pytest.raises(ValidationError, match="no STF dtype"):
        encode(np.zeros(3, np.complex64))


def test_read_tensor_refuses_labels(tmp_path):
    write_stf(tmp_path / "m.stf", np.zeros((2, 2), np.uint16))
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "m.stf")
    write_stf(tmp_path / "x.stf", np.ones((2, 2), np.float32))
    assert read_tensor(tmp_path / "x.stf").data.sum() == 4


# ---------------------------------------------------------------------------
# synthetic data


def test_dataset_is_byte_identical_per_seed(tmp_path):
    spec = SynthSpec(seed=0, count=4, size=32)
    a = write_dataset(tmp_path / "a", spec)
    b = write_dataset(tmp_path / "b", spec)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    c = write_dataset(tmp_path / "c", SynthSpec(seed=1, count=4, size=32))
    assert [p.read_bytes() for p in a] != [p.read_bytes() for p in c]


def test_dataset_load_round_trip(tmp_path):
    spec = SynthSpec(seed=3, count=3, size=32, classes=4)
    write_dataset(tmp_path, spec)
    loaded, images, labels = load_dataset(tmp_path)
    assert loaded == spec
    assert images.shape == (3, 1, 32, 32) and images.dtype == np.float32
    assert labels.shape == (3, 32, 32)
    for (img, lab), i, l in zip(synth_dataset(spec), images, labels):
        assert img.tobytes() == i.tobytes() and np.array_equal(lab, l)


@pytest.mark.parametrize("classes", [2, 3, 5])
def test_masks_stay_in_codomain(classes):
    for image, labels in synth_dataset(SynthSpec(seed=7, count=10, size=64, classes=classes)):
        assert labels.dtype == np.uint16 and labels.max() < classes
        assert set(np.unique(labels)) == set(range(classes))


def test_shapes_do_not_touch():
    from scipy import ndimage
    for _, labels in synth_dataset(SynthSpec(seed=2, count=20, size=64, classes=5)):
        for k in range(1, 5):
            grown = ndimage.binary_dilation(labels == k)
            assert not np.any(grown & (labels > 0) & (labels != k))


def test_class_contrast_over_100_samples():
    spec = SynthSpec(seed=11, count=100, size=64, classes=3)
    ok = 0
    for image, labels in synth_dataset(spec):
        bg = image[0][labels == 0].mean()
        ok += all(abs(image[0][labels == c].mean() - bg) >= spec.contrast for c in range(1, spec.classes))
    assert ok >= 95


def test_unplaceable_shapes_raise():
    with pytest.raises(GenerationError, match="could not place"):
        make_sample(generator(0), SynthSpec(size=32, classes=40))


@pytest.mark.parametrize("kwargs", [{"size": 48}, {"size": 16}, {"classes": 1}, {"count": 0}, {"contrast": 0.0}])
def test_invalid_synth_spec(kwargs):
    with pytest.raises(ValidationError):
        SynthSpec(**kwargs).validate()


def test_augment_keeps_labels_discrete(rng):
    image, labels = make_sample(generator(5), SynthSpec(size=64))
    img2, lab2 = augment(rng, image, labels)
    assert img2.shape == image.shape and img2.dtype == image.dtype
    assert lab2.dtype == labels.dtype and set(np.unique(lab2)) <= set(np.unique(labels))
    same, _ = augment(rng, image, labels, scale=(1.0, 1.0), degrees=0.0)
    np.testing.assert_allclose(same, image, atol=1e-6)


# ---------------------------------------------------------------------------
# optimizer and training loop


def test_cosine_endpoints():
    assert cosine_lr(0, 200, 1e-4, 1e-6) == 1e-4
    assert math.isclose(cosine_lr(199, 200, 1e-4, 1e-6), 1e-6, rel_tol=1e-12)
    assert math.isclose(cosine_lr(99.5, 200, 1e-4, 1e-6), 0.5 * (1e-4 + 1e-6), rel_tol=1e-12)
    lrs = [cosine_lr(t, 50, 1.0, 0.0) for t in range(50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_matches_scalar_reference(rng):
    from mlla_unet.tensor import Tensor
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(4)]
    p = Tensor(p0.copy())
    opt = AdamW([p], lr=0.1, weight_decay=0.01, eps=1e-8)
    for g in grads:
        opt.step({p: g})
    for i in range(5):
        x, m, v = p0[i], 0.0, 0.0
        for t, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g[i]
            v = 0.999 * v + 0.001 * g[i] ** 2
            mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
            x = x - 0.1 * (0.01 * x + mh / (math.sqrt(vh) + 1e-8))
        assert math.isclose(p.data[i], x, rel_tol=1e-12, abs_tol=1e-15)


def test_adamw_decay_is_decoupled():
    from mlla_unet.tensor import Tensor
    p = Tensor(np.array([2.0]))
    opt = AdamW([p], lr=0.5, weight_decay=0.1)
    opt.step({p: np.array([0.0])})
    assert p.data[0] == 2.0 - 0.5 * 0.1 * 2.0


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    write_dataset(path, SynthSpec(seed=0, count=6, size=64))
    return path


def test_zero_steps_checkpoint_equals_init(tmp_path, toy_data):
    history = train_toy("toy", toy_data, tmp_path / "ck", TrainConfig(steps=0, seed=4))
    assert history == []
    loaded = load_checkpoint(tmp_path / "ck")
    fresh = build_model("toy", 4)
    a, b = loaded.state_dict(), fresh.state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a)


def test_same_seed_same_curve(tmp_path, toy_data):
    cfg = TrainConfig(steps=3, seed=9)
    h1 = train_toy("toy", toy_data, tmp_path / "a", cfg)
    h2 = train_toy("toy", toy_data, tmp_path / "b", cfg)
    assert h1 == h2
    for f in sorted((tmp_path / "a" / "params").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "params" / f.name).read_bytes()
    lines = (tmp_path / "a" / "losses.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == h1
    for rec in h1:
        validate_json(rec, "train_log")


def test_non_finite_loss_aborts_with_step():
    _, images, labels = None, *map(np.stack, zip(*synth_dataset(SynthSpec(count=2, size=64))))
    model = build_model("toy", 0)
    model.head.conv.bias.data[:] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        train(model, images, labels.astype(np.int64), TrainConfig(steps=2, augment=False))


def test_checkpoint_mismatched_data_is_rejected(tmp_path):
    write_dataset(tmp_path / "d", SynthSpec(count=2, size=64, classes=5))
    with pytest.raises(ValidationError, match="classes"):
        train_toy("toy", tmp_path / "d", tmp_path / "ck", TrainConfig(steps=1))
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "missing")


# ---------------------------------------------------------------------------
# evaluation


def test_ground_truth_against_itself():
    gts = np.stack([lab for _, lab in synth_dataset(SynthSpec(seed=1, count=3, size=32, classes=4))]).astype(int)
    rep = score_masks(gts, gts, 4)
    for case in rep["cases"]:
        for score in case["classes"].values():
            assert score == {"dsc": 1.0, "hd95": 0.0}
    assert rep["mean_foreground_dsc"] == 1.0
    for agg in rep["aggregate"].values():
        assert agg == {"dsc": 1.0, "hd95": 0.0}


def test_missing_class_is_undefined_not_an_error():
    gt = np.zeros((1, 8, 8), int)
    gt[0, 2:4, 2:4] = 1
    pred = np.zeros_like(gt)
    rep = score_masks(pred, gt, 3)
    assert rep["cases"][0]["classes"]["1"] == {"dsc": 0.0, "hd95": None}
    assert rep["cases"][0]["classes"]["2"] == {"dsc": 1.0, "hd95": None}
    assert rep["per_class"]["1"]["hd95_undefined"] == 1
    assert "undefined" in format_report(rounded(rep))


def test_aggregation_orders_differ_when_undefined_entries_are_uneven():
    gt = np.zeros((2, 8, 8), int)
    gt[:, 1:3, 1:3] = 1
    gt[0, 5:7, 5:7] = 2
    pred = gt.copy()
    pred[0, 5, 5] = 0
    rep = score_masks(pred, gt, 3)
    # class 2 is absent from case 1, so its HD95 is undefined there
    assert rep["cases"][1]["classes"]["2"]["hd95"] is None
    assert rep["aggregate"]["classes_then_cases"]["hd95"] == 0.25
    assert rep["aggregate"]["cases_then_classes"]["hd95"] == 0.5


def test_untrained_model_report_validates(toy_data):
    model = build_model("toy", 0)
    _, images, labels = load_dataset(toy_data)
    rep = rounded(evaluate(model, images, labels))
    validate_json(rep, "eval_report")
    assert rep["count"] == len(images)
    text = format_report(rep)
    for cls, v in rep["per_class"].items():
        assert repr(v["dsc"]) in text


def test_eval_geometry_mismatch(toy_data):
    model = build_model("toy", 0)
    _, images, labels = load_dataset(toy_data)
    with pytest.raises(ValidationError):
        evaluate(model, images[:, :, :48, :48], labels[:, :48, :48])
    with pytest.raises(ValidationError):
        evaluate(model, images, labels[:, :32])


# ---------------------------------------------------------------------------
# benchmark


def test_single_kernel_writes_one_report(tmp_path):
    rep = run_kernel("linear", [32, 64, 128, 256, 512], d=8, repetitions=5)
    path = write_report(rep, tmp_path)
    assert [p.name for p in tmp_path.iterdir()] == ["bench_linear.json"] == [path.name]
    obj = json.loads(path.read_text())
    validate_json(obj, "bench_report")
    assert [s["n"] for s in obj["samples"]] == [32, 64, 128, 256, 512]
    assert all(len(s["seconds"]) == 5 for s in obj["samples"])
    assert abs(obj["flop_slope"] - 1.0) < 0.05


@pytest.mark.parametrize("ns,reps", [([1, 2, 3, 4], 5), ([1, 2, 2, 3, 4], 5), ([5, 4, 3, 2, 1], 5),
                                     ([1, 2, 3, 4, 5], 4)])
def test_bench_rejects_bad_plans(ns, reps):
    with pytest.raises(ValidationError):
        run_kernel("linear", ns, d=4, repetitions=reps)


def test_bench_unknown_kernel():
    with pytest.raises(ValidationError, match="unknown kernel"):
        run_kernel("cosine", [1, 2, 3, 4, 5])
