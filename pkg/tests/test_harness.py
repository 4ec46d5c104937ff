import numpy as np
import pytest

from baf.bitstream import encode
from baf.errors import BafError, CompatibilityError, ConfigError, TrainingError
from baf.net import TrainConfig
from baf.pipeline import (CSV_HEADER, evaluate, pipeline_decode, pipeline_encode, pipeline_pack, sweep, train_for,
                          zero_fill)
from baf.quant import dequantize_pack, quantize_tensor
from baf.select import ChannelSelection, select_channels
from baf.surrogate import gen_synthetic_dataset, init_surrogate, load_surrogate, save_surrogate, train_surrogate


def test_dataset_deterministic_and_round_robin():
    a, b = gen_synthetic_dataset(seed=3, count=64), gen_synthetic_dataset(seed=3, count=64)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.val_idx, b.val_idx)
    assert not np.array_equal(a.images, gen_synthetic_dataset(seed=4, count=64).images)
    tiny = gen_synthetic_dataset(count=4, K=4)
    assert sorted(tiny.labels.tolist()) == [0, 1, 2, 3]
    assert tiny.images.shape == (4, 1, 32, 32) and tiny.images.dtype == np.uint8
    with pytest.raises(ConfigError):
        gen_synthetic_dataset(count=3, K=4)


def test_class_means_are_separated(dataset):
    means = sorted(dataset.images[dataset.labels == k].mean() for k in range(dataset.K))
    assert np.min(np.diff(means)) >= 10


def test_surrogate_shapes(net):
    assert (net.Q, net.P) == (16, 32)
    assert net.split.stride == 2 and net.split.kernel_size % 2 == 1
    x = net.front_features(np.zeros((1, 32, 32), np.uint8))
    assert x.shape == (16, 32, 32) and net.split_output(x).shape == (32, 16, 16)


def test_trained_beats_untrained(net, dataset):
    images, labels = dataset.val
    assert net.accuracy(images, labels) >= 0.9
    assert net.accuracy(images, labels) > init_surrogate(seed=0).accuracy(images, labels)


def test_separable_two_class_variant():
    data = gen_synthetic_dataset(seed=1, count=256, K=2, separable=True)
    net = train_surrogate(data, seed=1, epochs=4)
    assert net.accuracy(*data.val) >= 0.99


def test_surrogate_training_deterministic_and_guarded():
    data = gen_synthetic_dataset(seed=2, count=64)
    a = train_surrogate(data, seed=2, epochs=1, min_accuracy=0.0)
    b = train_surrogate(data, seed=2, epochs=1, min_accuracy=0.0)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])
    with pytest.raises(TrainingError):
        train_surrogate(data, seed=2, epochs=1, min_accuracy=1.01)


def test_surrogate_file_round_trip(net, dataset):
    back = load_surrogate(save_surrogate(net))
    images = dataset.val[0][:16]
    np.testing.assert_array_equal(back.logits(images), net.logits(images))


def test_full_selection_is_exactly_the_quantized_tensor(net, dataset):
    sel = ChannelSelection(tuple(range(net.P)), net.P)
    image = dataset.val[0][0]
    stream = pipeline_encode(image, net, sel, 8, "raw")
    pred, z = pipeline_decode(stream, net)
    z_true = net.split_output(net.front_features(image))
    z_q = dequantize_pack(quantize_tensor(z_true, 8, sel.order))
    np.testing.assert_array_equal(z, z_q)
    assert pred == int(np.argmax(net.cloud_logits(z_q)))


def test_bit_report_reconciles(net, dataset, stats):
    sel = select_channels(stats, 8)
    for codec in ("raw", "med_range"):
        s = pipeline_encode(dataset.val[0][1], net, sel, 6, codec)
        r = s.report()
        assert r["side_info_bits"] == 32 * 8
        assert r["header_bits"] + r["side_info_bits"] + r["payload_bits"] + r["padding_bits"] == s.total_bits


def test_bits_fall_as_channels_halve(net, dataset, stats):
    images = dataset.val[0][:100]
    means = []
    for C in (32, 16, 8, 4):
        sel = select_channels(stats, C)
        means.append(np.mean([pipeline_encode(img, net, sel, 6).total_bits for img in images]))
    assert all(a > b for a, b in zip(means, means[1:]))


def test_corrupted_stream_never_predicts(net, dataset, stats, rng):
    sel = select_channels(stats, 8)
    data = bytearray(pipeline_encode(dataset.val[0][2], net, sel, 8).data)
    for _ in range(50):
        bad = bytearray(data)
        bad[rng.integers(len(bad))] ^= 1 << int(rng.integers(8))
        with pytest.raises(BafError):
            pipeline_decode(bytes(bad), net)


def test_mismatched_selection_is_rejected(net, dataset, stats):
    with pytest.raises(CompatibilityError):
        pipeline_pack(dataset.val[0][0], net, ChannelSelection((0, 1), 8), 8)


@pytest.fixture(scope="module")
def quarter_model(net, dataset, stats):
    sel = select_channels(stats, net.P // 4)
    return sel, train_for(net, dataset.train[0][:256], sel, 8, TrainConfig(iterations=150, eval_every=50))


def test_baf_beats_zero_fill(net, dataset, quarter_model):
    sel, model = quarter_model
    images = dataset.val[0][:64]
    with_baf = evaluate(net, images, sel, 8, baf=model)
    without = evaluate(net, images, sel, 8)
    assert with_baf.restore_err < without.restore_err
    assert with_baf.bits == without.bits


def test_zero_fill_uses_bn_bias(net, dataset, stats):
    sel = select_channels(stats, 4)
    pack = pipeline_pack(dataset.val[0][0], net, sel, 8)
    z = zero_fill(pack, net)
    missing = [p for p in range(net.P) if p not in sel.order]
    np.testing.assert_array_equal(z[missing], np.broadcast_to(net.bn.bias[missing, None, None], z[missing].shape))


def test_model_for_other_configuration_is_rejected(net, dataset, stats, quarter_model):
    sel, model = quarter_model
    with pytest.raises(CompatibilityError):
        evaluate(net, dataset.val[0][:2], sel, 6, baf=model)
    stream = pipeline_encode(dataset.val[0][0], net, select_channels(stats, 16), 8)
    with pytest.raises(CompatibilityError):
        pipeline_decode(stream, net, model)


def test_evaluate_independent_of_workers(net, dataset, quarter_model):
    sel, model = quarter_model
    images = dataset.val[0][:12]
    a = evaluate(net, images, sel, 8, baf=model, workers=1)
    b = evaluate(net, images, sel, 8, baf=model, workers=3)
    assert a.bits == b.bits and a.restore_err == b.restore_err
    np.testing.assert_array_equal(a.predictions, b.predictions)


def test_sweep_at_full_width(net, dataset, stats):
    """Accuracy should not improve as bits are removed when every channel is sent."""
    images, labels = (v[:128] for v in dataset.val)
    sel = select_channels(stats, net.P)
    cfg = TrainConfig(iterations=20, eval_every=10)
    models = {(32, n): train_for(net, dataset.train[0][:64], sel, n, cfg) for n in (2, 4, 6, 8)}
    result = sweep(net, models, stats, images, labels, [32], [8, 6, 4, 2], ["raw", "med_range"])
    lines = result.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 9
    for codec in ("raw", "med_range"):
        acc = [result.lookup(32, n, codec)["accuracy"] for n in (8, 6, 4, 2)]
        assert all(b <= a + 0.01 for a, b in zip(acc, acc[1:]))
        assert result.lookup(32, 2, codec)["bits_mean"] < result.lookup(32, 8, codec)["bits_mean"]
    for n in (2, 4, 6, 8):
        raw, med = result.lookup(32, n, "raw"), result.lookup(32, n, "med_range")
        assert raw["accuracy"] == med["accuracy"] and raw["restore_err"] == med["restore_err"]
    with pytest.raises(ConfigError):
        sweep(net, models, stats, images, labels, [16], [8])


def test_encoded_bits_match_bitstream_module(net, dataset, stats):
    sel = select_channels(stats, 8)
    image = dataset.val[0][5]
    assert pipeline_encode(image, net, sel, 4).data == encode(pipeline_pack(image, net, sel, 4), "med_range").data
