import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdprune import autodiff as ad
from pdprune.autodiff import Tensor, backward
from pdprune.errors import FormatError, InputError
from pdprune.harness.baseline import hard_baseline_step
from pdprune.harness.data import (IMAGE_MAGIC, LABEL_MAGIC, find_mnist_file, load_mnist_split, mnist_dir, read_idx,
                                  synthetic_split, synthetic_task)
from pdprune.harness.metrics import FlipTracker, dip_near_zero, log_histogram, mac_count, sparsity_report
from pdprune.harness.models import Conv2d, Linear, ModelSpec, Network, ReLU, build_spec, mlp, mnist_mlp, toy_cnn
from pdprune.schedule import OptimConfig, PruneConfig, SparsitySchedule, train_with_pdp

from conftest import needs_mnist
from oracles import brute_force_macs, parse_idx

CNN_LAYERS = [("conv", "conv1", 1, 1, 3), ("relu",), ("conv", "conv2", 2, 1, 3), ("relu",), ("flatten",),
              ("linear", "fc1")]


# -- models -------------------------------------------------------------------------------

def test_model_shapes():
    spec = mnist_mlp()
    assert spec.prunable() == ["fc1", "fc2", "fc3"]
    assert spec.weight_shape("fc1") == (256, 784)
    assert spec.param_count() == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10
    cnn = toy_cnn((1, 8, 8), 3)
    assert cnn.weight_shape("conv1") == (8, 1, 3, 3)
    assert cnn.weight_shape("fc1") == (3, 16 * 4 * 4)
    out = Network(cnn).forward(np.zeros((2, 1, 8, 8)))
    assert out.shape == (2, 3)


def test_build_spec_rejects_unknown():
    with pytest.raises(InputError):
        build_spec("resnet", (4,), 2)
    with pytest.raises(InputError):
        build_spec("toy_cnn", (10,), 2)


def test_network_state_round_trip():
    a = Network(mlp([4, 3, 2], seed=1))
    b = Network(mlp([4, 3, 2], seed=2))
    b.load_state(a.state())
    x = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(a.forward(x).data, b.forward(x).data)


# -- MACs ---------------------------------------------------------------------------------

def test_mac_linear_example():
    spec = ModelSpec([Linear(100, 10)], (100,))
    assert mac_count(spec).total == 1000
    mask = np.ones((10, 100))
    mask[:, :30] = 0
    assert mac_count(spec, {"fc1": mask}).total == 700


def test_mac_conv_example():
    # 5x5 kernel on a 9x9 single-channel map, no padding: 25 weights at 5x5 positions
    spec = ModelSpec([Conv2d(1, 1, 5, 1, 0, bias=False)], (1, 9, 9))
    assert mac_count(spec).total == 25 * 25
    mask = np.zeros((1, 1, 5, 5))
    mask[0, 0, 2, 2] = 1
    assert mac_count(spec, {"conv1": mask}).total == 25
    spec = ModelSpec([Conv2d(1, 1, 5, 1, 2, bias=False)], (1, 9, 9))
    assert mac_count(spec, {"conv1": mask}).total == 81


def test_mac_rejects_wrong_mask_shape():
    with pytest.raises(InputError):
        mac_count(ModelSpec([Linear(4, 2)], (4,)), {"fc1": np.ones((4, 2))})


@pytest.mark.parametrize("seed", range(5))
def test_mac_random_masks_match_enumeration(seed):
    r = np.random.default_rng(seed)
    spec = toy_cnn((1, 8, 8), 4)
    masks = {n: (r.random(spec.weight_shape(n)) > 0.863).astype(float) for n in spec.prunable()}
    assert mac_count(spec, masks).per_layer == brute_force_macs(CNN_LAYERS, (1, 8, 8), masks)


@pytest.mark.parametrize("seed", range(5))
def test_mac_channel_masks_match_enumeration(seed):
    r = np.random.default_rng(seed)
    spec = toy_cnn((1, 8, 8), 4)
    masks = {}
    for n in spec.prunable():
        shape = spec.weight_shape(n)
        alive = r.random(shape[0]) > 0.5
        masks[n] = np.broadcast_to(alive.reshape((-1,) + (1,) * (len(shape) - 1)), shape).astype(float)
    biases = {"fc1": np.zeros(4)}
    got = mac_count(spec, masks, channel_pruned=True, biases=biases)
    assert got.per_layer == brute_force_macs(CNN_LAYERS, (1, 8, 8), masks, channel_pruned=True, biases=biases)
    assert got.total <= mac_count(spec, masks).total


# -- data -----------------------------------------------------------------------------------

def _write_idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + payload)


def test_idx_round_trip(tmp_path):
    p = tmp_path / "x-idx3-ubyte"
    body = bytes(range(24))
    _write_idx(p, IMAGE_MAGIC, (2, 3, 4), body)
    arr = read_idx(p, IMAGE_MAGIC)
    dims, raw = parse_idx(p)
    assert list(arr.shape) == dims == [2, 3, 4]
    assert arr.tobytes() == raw


def test_idx_errors(tmp_path):
    p = tmp_path / "bad"
    _write_idx(p, IMAGE_MAGIC, (2, 3, 4), bytes(23))
    with pytest.raises(FormatError):
        read_idx(p, IMAGE_MAGIC)
    _write_idx(p, IMAGE_MAGIC, (1, 1, 1), bytes(1))
    with pytest.raises(FormatError):
        read_idx(p, LABEL_MAGIC)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        read_idx(p, IMAGE_MAGIC)
    with pytest.raises(FormatError):
        read_idx(tmp_path / "missing", IMAGE_MAGIC)
    with pytest.raises(FormatError):
        find_mnist_file(tmp_path, "train-images-idx3-ubyte")


@needs_mnist
def test_mnist_against_independent_parser():
    train = load_mnist_split("train", dtype=np.float32)
    assert train.x.shape == (60000, 1, 28, 28) and train.y.shape == (60000,)
    dims, raw = parse_idx(find_mnist_file(mnist_dir(), "train-images-idx3-ubyte"))
    assert dims == [60000, 28, 28]
    first = np.frombuffer(raw[:784], dtype=np.uint8)
    assert int(np.round(train.x[0].reshape(-1) * 255).astype(np.int64).sum()) == int(first.astype(np.int64).sum())
    _, labels = parse_idx(find_mnist_file(mnist_dir(), "train-labels-idx1-ubyte"))
    assert train.y[:100].tolist() == list(labels[:100])
    test = load_mnist_split("test")
    assert len(test) == 10000 and set(np.unique(test.y)) == set(range(10))


def test_synthetic_deterministic_and_separable():
    a = synthetic_task(7, 300, 12, 5, separation=2.0, noise=3.0)
    b = synthetic_task(7, 300, 12, 5, separation=2.0, noise=3.0)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    # nearest class centroid recovers every label
    means = np.stack([a.x[a.y == c].mean(axis=0) for c in range(5)])
    q, _ = np.linalg.qr(np.random.default_rng(7).standard_normal((12, 5)))
    true_means = q.T * 2.0
    d = np.linalg.norm(a.x[:, None] - true_means[None], axis=2)
    assert np.all(d.argmin(axis=1) == a.y)
    assert means.shape == (5, 12)
    with pytest.raises(InputError):
        synthetic_task(0, 0, 3, 2)


def test_synthetic_split_shares_means():
    train, test = synthetic_split(1, 50, 20, 6, 3)
    assert len(train) == 50 and len(test) == 20
    full = synthetic_task(1, 70, 6, 3)
    np.testing.assert_array_equal(np.concatenate([train.x, test.x]), full.x)


# -- sparsity and histograms -----------------------------------------------------------------

def test_sparsity_report_all_zero():
    rep = sparsity_report({"a": np.zeros((3, 4))}, {"a": np.ones((3, 4))})
    assert rep["sparsity"] == 1.0
    assert sum(rep["layers"]["a"]["hist_counts"]) == 12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2 ** 31 - 1))
def test_histogram_counts_every_element(n, seed):
    r = np.random.default_rng(seed)
    v = r.standard_normal(n) * (r.random(n) > 0.3)
    edges, counts = log_histogram(v)
    assert counts.sum() == n
    assert edges[0] == 0.0 and np.all(np.diff(edges) > 0)


def test_trained_weights_show_a_dip_at_zero():
    train, test = synthetic_split(0, 600, 200, 16, 4, separation=4.0)
    net = Network(mlp([16, 64, 4], name="toy_mlp"))
    res = train_with_pdp(net, train, SparsitySchedule(0.7, warmup_epochs=2, ramp_step=0.25, total_epochs=8),
                         PruneConfig(tau=1e-3), OptimConfig(batch_size=64), val=test)
    w = net.weights["fc1"].data
    assert dip_near_zero(w[res.masks["fc1"] != 0])
    rep = sparsity_report(res.masks, {n: t.data for n, t in net.weights.items()})
    assert rep["sparsity"] == pytest.approx(res.summary["sparsity"])


# -- flips --------------------------------------------------------------------------------------

def test_flip_tracker_counts_each_weight_once_per_epoch():
    t = FlipTracker()
    t.start_epoch()
    t.observe("a", [1, 1, 0])
    t.observe("a", [0, 1, 0])
    t.observe("a", [1, 1, 1])
    assert t.counts() == {"a": 2}
    t.start_epoch()
    t.observe("a", [0, 0, 0])       # a change across the epoch boundary is not counted
    assert t.total() == 0


# -- hard baseline ------------------------------------------------------------------------------

def test_hard_baseline_zero_ratio_is_identity(rng):
    w = Tensor(rng.standard_normal(20), requires_grad=True)
    out, mask = hard_baseline_step(w, 0.0)
    np.testing.assert_array_equal(out.data, w.data)
    assert mask.all()


def test_hard_baseline_blocks_gradient_just_below_threshold():
    w = Tensor([0.1, 0.19, 0.22, 0.5], requires_grad=True)
    out, mask = hard_baseline_step(w, 0.5)
    assert mask.tolist() == [0, 0, 1, 1]
    backward(ad.tensor_sum(ad.square(out)))
    assert w.grad[1] == 0.0 and w.grad[0] == 0.0
    assert w.grad[2] == pytest.approx(0.44)


def test_hard_baseline_rejects_ratio():
    with pytest.raises(InputError):
        hard_baseline_step(Tensor([1.0]), 1.0)


def test_dense_runs_reproduce():
    train, test = synthetic_split(2, 300, 100, 8, 3)
    accs = []
    for _ in range(2):
        net = Network(mlp([8, 16, 3]))
        res = train_with_pdp(net, train, SparsitySchedule(0.0, warmup_epochs=3, total_epochs=3),
                             PruneConfig(method="dense"), OptimConfig(batch_size=32), seed=5, val=test)
        accs.append((res.summary["test_acc"], net.weights["fc1"].data.copy()))
    assert accs[0][0] == accs[1][0]
    np.testing.assert_array_equal(accs[0][1], accs[1][1])
