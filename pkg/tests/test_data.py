import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedrnn.data import (
    CheckpointVersionError,
    Dataset,
    DatasetParseError,
    DatasetValidationError,
    adding_bin,
    dataset_from_bytes,
    dataset_to_bytes,
    gen_adding_problem,
    gen_framewise_task,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from gatedrnn.layers import IGNORE_LABEL, ModelStack, SequenceBatch, stack_forward
from gatedrnn.numeric import Rng
from gatedrnn.training import TrainConfig, TrainState, fit_logistic_baseline, train_model


def test_adding_problem_structure():
    ds = gen_adding_problem(50, 20, Rng(0))
    assert ds.feature_dim == 2 and len(ds) == 50
    for (x, y), target in zip(ds.sequences, ds.targets):
        marks = np.flatnonzero(x[:, 1])
        assert len(marks) == 2 and marks[0] < 10 <= marks[1]
        assert x[marks, 0].sum() == target
        assert np.all(y[:-1] == IGNORE_LABEL)
        assert y[-1] == adding_bin(target, 10)


def test_adding_bin_edges():
    assert adding_bin(0.0, 10) == 0
    assert adding_bin(1.999, 10) == 9
    assert adding_bin(2.0, 10) == 9
    assert adding_bin(1.0, 4) == 2


def test_adding_problem_rejects_short():
    with pytest.raises(ValueError):
        gen_adding_problem(3, 1, Rng(0))


def test_generators_are_pure_functions_of_seed():
    assert gen_adding_problem(5, 8, Rng(3)) == gen_adding_problem(5, 8, Rng(3))
    a = gen_framewise_task(5, (5, 9), 3, 4, (2, 4), 0.5, Rng(3))
    assert a == gen_framewise_task(5, (5, 9), 3, 4, (2, 4), 0.5, Rng(3))
    assert a != gen_framewise_task(5, (5, 9), 3, 4, (2, 4), 0.5, Rng(4))


def test_framewise_noiseless_nearest_prototype_is_exact():
    ds = gen_framewise_task(20, (30, 40), 6, 5, (4, 8), 0.0, Rng(1))
    protos = ds.aux["prototypes"]
    for (x, y), trans in zip(ds.sequences, ds.aux["transition"]):
        d = ((x[:, None, :] - protos[None]) ** 2).sum(-1)
        pred = d.argmin(axis=1)
        np.testing.assert_array_equal(pred[~trans], y[~trans])


def test_framewise_segments_change_class():
    ds = gen_framewise_task(10, (50, 50), 3, 3, (5, 5), 0.0, Rng(2))
    for _, y in ds.sequences:
        runs = y[np.r_[True, y[1:] != y[:-1]]]
        assert np.all(runs[1:] != runs[:-1])
        assert len(runs) == 10


def test_framewise_shuffled_labels_near_chance():
    train, dev = gen_framewise_task(120, (40, 40), 5, 4, (3, 6), 0.5, Rng(0)).split(100)
    labels = Rng(1).permutation(np.concatenate([y for _, y in train.sequences]))
    cuts = np.cumsum([len(y) for _, y in train.sequences])[:-1]
    shuffled = Dataset(5, 4, [(x, y) for (x, _), y in
                              zip(train.sequences, np.split(labels, cuts))])
    err = fit_logistic_baseline(shuffled, dev)
    assert abs((1 - err) - 0.25) < 0.1


def test_framewise_context_beats_frame_classifier():
    train, dev = gen_framewise_task(100, (30, 40), 6, 4, (5, 10), 1.8, Rng(5)).split(80)
    baseline = fit_logistic_baseline(train, dev)
    model = ModelStack("ligru", 6, 16, 1, 4, Rng(0))
    _, metrics = train_model(TrainConfig(epochs=8, initial_lr=0.005), model, train, dev)
    assert metrics[-1].dev_frame_err < baseline


def _random_dataset(seed, n, with_targets):
    rng = Rng(seed)
    seqs = []
    for _ in range(n):
        L = int(rng.integers(1, 7))
        y = rng.integers(-1, 4, L)
        seqs.append((rng.normal((L, 3)) * 10 ** rng.uniform(-300, 300), y))
    targets = list(rng.normal(n)) if with_targets else None
    return Dataset(3, 4, seqs, targets)


@given(st.integers(0, 2**31), st.integers(0, 6), st.booleans())
def test_dataset_roundtrip_exact(seed, n, with_targets):
    ds = _random_dataset(seed, n, with_targets)
    back = dataset_from_bytes(dataset_to_bytes(ds))
    assert back == ds
    for (xa, _), (xb, _) in zip(ds.sequences, back.sequences):
        assert xa.tobytes() == xb.tobytes()


def test_dataset_roundtrip_special_values(tmp_path):
    x = np.array([[np.inf, -0.0, 5e-324, np.nextafter(1.0, 2.0)]])
    ds = Dataset(4, 2, [(x, np.array([1]))])
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.sequences[0][0].tobytes() == x.tobytes()


def test_truncated_file_is_parse_error():
    raw = dataset_to_bytes(_random_dataset(0, 3, True))
    for cut in (5, len(raw) // 2, len(raw) - 1):
        with pytest.raises(DatasetParseError) as exc:
            dataset_from_bytes(raw[:cut])
        assert exc.value.offset is not None or exc.value.line is not None


def test_trailing_bytes_and_bad_header():
    raw = dataset_to_bytes(_random_dataset(0, 1, False))
    with pytest.raises(DatasetParseError):
        dataset_from_bytes(raw + b"\0")
    with pytest.raises(DatasetParseError):
        dataset_from_bytes(b"NOPE 1 2 3 4 0\n")
    with pytest.raises(DatasetParseError):
        dataset_from_bytes(raw.replace(b"GRNNDATA 1", b"GRNNDATA 7", 1))


def test_label_out_of_range_names_sequence():
    ds = Dataset(2, 3, [(np.zeros((2, 2)), np.array([0, 1])), (np.zeros((1, 2)), np.array([3]))])
    with pytest.raises(DatasetValidationError, match="sequence 1"):
        dataset_to_bytes(ds)
    raw = dataset_to_bytes(Dataset(2, 4, ds.sequences)).replace(b" 4 2 0\n", b" 3 2 0\n", 1)
    with pytest.raises(DatasetValidationError, match="sequence 1"):
        dataset_from_bytes(raw)


def test_frames_shape_mismatch_is_validation_error():
    with pytest.raises(DatasetValidationError):
        Dataset(3, 2, [(np.zeros((2, 2)), np.array([0, 1]))]).validate()


def _trained(tmp_path, bn="feedforward"):
    train, dev = gen_framewise_task(20, (5, 9), 3, 3, (2, 4), 0.5, Rng(0)).split(16)
    model = ModelStack("lstm", 3, 5, 2, 3, Rng(1), bn=bn, keep_prob=0.8)
    state = TrainState.fresh(model.params(), 0.01)
    train_model(TrainConfig(epochs=2, initial_lr=0.01), model, train, dev, state)
    return model, state, dev


def test_checkpoint_roundtrip(tmp_path):
    model, state, dev = _trained(tmp_path, bn="recurrent")
    save_checkpoint(model, state, tmp_path / "m.ckpt", extra={"note": "x"})
    model2, state2, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"note": "x"}
    for group_a, group_b in ((model.params(), model2.params()),
                             (model.buffers(), model2.buffers()),
                             (state.m, state2.m), (state.v, state2.v)):
        assert group_a.keys() == group_b.keys()
        for k in group_a:
            assert group_a[k].tobytes() == group_b[k].tobytes(), k
    assert (state2.step, state2.epoch, state2.lr, state2.history) == (
        state.step, state.epoch, state.lr, state.history)
    assert state2.rng_state == state.rng_state
    batch = SequenceBatch.from_sequences(dev.sequences)
    np.testing.assert_array_equal(stack_forward(model, batch), stack_forward(model2, batch))


def test_checkpoint_without_state(tmp_path):
    model, _, _ = _trained(tmp_path)
    save_checkpoint(model, None, tmp_path / "m.ckpt")
    _, state, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert state is None


def test_checkpoint_bad_magic_and_version(tmp_path):
    model, state, _ = _trained(tmp_path)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "v2.ckpt").write_bytes(raw[:8] + (2).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointVersionError, match="version 2"):
        load_checkpoint(tmp_path / "v2.ckpt")
