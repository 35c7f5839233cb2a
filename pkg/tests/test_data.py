import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silif.data import (
    EventStream,
    SpikeTensor,
    SynthTaskSpec,
    bin_events,
    decode_spkt,
    encode_spkt,
    gen_synthetic,
    iterate_batches,
    load_spkt,
    nearest_template_accuracy,
    read_event_text,
    read_labels,
    save_spkt,
    synthetic_templates,
)
from silif.errors import DataError, FormatError, ParameterRangeError
from silif.numerics import Rng


def hand_fixture(dims=(2, 3, 4), labels=(1, 0), meta=b"{}"):
    """SPKT bytes assembled field by field, independent of the encoder."""
    out = b"SPKT" + struct.pack("<I", 1) + bytes([0, 3])
    for d in dims:
        out += struct.pack("<Q", d)
    out += bytes(range(int(np.prod(dims)))) if np.prod(dims) < 256 else bytes(int(np.prod(dims)))
    out += struct.pack("<Q", len(labels)) + b"".join(struct.pack("<I", l) for l in labels)
    out += struct.pack("<Q", len(meta)) + meta
    return out


class TestSpkt:
    def test_hand_fixture_dims(self):
        t = decode_spkt(hand_fixture())
        assert t.data.shape == (2, 3, 4) and t.data.dtype == np.uint8
        assert t.data[1, 2, 3] == 23 and list(t.labels) == [1, 0]

    def test_encoder_matches_hand_layout(self):
        t = decode_spkt(hand_fixture(meta=b'{"a": 1}'))
        assert encode_spkt(t) == hand_fixture(meta=b'{"a": 1}')

    @given(st.integers(0, 2**32 - 1), st.booleans())
    @settings(max_examples=25, deadline=None)
    def test_round_trip(self, seed, binary):
        r = Rng(seed)
        if binary:
            data = (r.random((3, 5, 4)) < 0.3).astype(np.uint8)
        else:
            data = r.uniform(-5, 5, (3, 5, 4)).astype(np.float32)
        t = SpikeTensor(data, r.integers(0, 9, 3), {"bin_ms": 4.0, "names": ["α", "b"]})
        back = decode_spkt(encode_spkt(t))
        assert back.data.dtype == data.dtype and back.data.tobytes() == data.tobytes()
        assert np.array_equal(back.labels, t.labels) and back.meta == t.meta
        assert encode_spkt(back) == encode_spkt(t)

    def test_file_round_trip(self, tmp_path):
        t = gen_synthetic(SynthTaskSpec(classes=2, samples_per_class=10))["train"]
        save_spkt(tmp_path / "x.spkt", t)
        back = load_spkt(tmp_path / "x.spkt")
        assert (tmp_path / "x.spkt").read_bytes() == encode_spkt(back)

    def test_rejects_other_dtypes(self):
        with pytest.raises(DataError):
            encode_spkt(SpikeTensor(np.zeros((1, 1, 1), np.float64), [0]))

    @pytest.mark.parametrize("cut", [0, 3, 7, 9, 20, 40, 50, -1])
    def test_truncation(self, cut):
        buf = hand_fixture()
        with pytest.raises(FormatError) as exc:
            decode_spkt(buf[:cut] if cut >= 0 else buf[:-1])
        assert "byte offset" in str(exc.value)

    @pytest.mark.parametrize(
        "pos,value,offset",
        [(0, b"X", 0), (4, b"\x02", 4), (8, b"\x07", 8), (9, b"\x02", 9)],
    )
    def test_corrupted_header(self, pos, value, offset):
        buf = bytearray(hand_fixture())
        buf[pos : pos + 1] = value
        with pytest.raises(FormatError) as exc:
            decode_spkt(bytes(buf))
        assert exc.value.offset == offset

    def test_trailing_bytes_and_bad_meta(self):
        with pytest.raises(FormatError):
            decode_spkt(hand_fixture() + b"\x00")
        with pytest.raises(FormatError):
            decode_spkt(hand_fixture(meta=b"\xff\xfe"))

    def test_label_count_mismatch(self):
        with pytest.raises(FormatError):
            decode_spkt(hand_fixture(labels=(1,)))


class TestEvents:
    def test_empty_stream(self):
        t = bin_events(EventStream([], []), 4.0, 1, 8)
        assert t.data.shape == (1, 1, 8) and not t.data.any()

    def test_pooling_700_to_140(self):
        s = EventStream([0, 10, 5000], [0, 699, 350], 3)
        t = bin_events(s, 4.0, 5, 700)
        assert t.channels == 140
        assert t.data[0, 0, 0] == 1 and t.data[0, 0, 139] == 1 and t.data[0, 1, 70] == 1
        assert t.labels[0] == 3

    def test_or_semantics(self):
        s = EventStream([100, 200, 300], [10, 11, 12])
        t = bin_events(s, 4.0, 5, 20)
        assert t.data[0, 0, 2] == 1 and t.data.sum() == 1

    def test_lengths_and_padding(self):
        t = bin_events([EventStream([0, 8000], [0, 1]), EventStream([100], [2])], 4.0, 1, 4)
        assert t.timesteps == 3 and t.meta["lengths"] == [3, 1]
        assert not t.data[1, 1:].any()

    def test_errors(self):
        with pytest.raises(DataError):
            bin_events(EventStream([0], [9]), 4.0, 1, 8)
        with pytest.raises(ParameterRangeError):
            bin_events(EventStream([0], [0]), 0.0, 1, 8)
        with pytest.raises(ParameterRangeError):
            bin_events(EventStream([0], [0]), 4.0, 3, 8)
        with pytest.raises(DataError):
            EventStream([5, 3], [0, 0])

    @given(st.lists(st.tuples(st.integers(0, 50_000), st.integers(0, 19)), max_size=40), st.integers(0, 50_000), st.integers(0, 19))
    @settings(deadline=None)
    def test_monotone(self, events, t_new, c_new):
        events = sorted(events)
        base = EventStream([e[0] for e in events], [e[1] for e in events])
        more = sorted(events + [(t_new, c_new)])
        grown = EventStream([e[0] for e in more], [e[1] for e in more])
        a = bin_events(base, 4.0, 2, 20, n_bins=13).data
        b = bin_events(grown, 4.0, 2, 20, n_bins=13).data
        assert np.all(b >= a)

    def test_text_ingestion(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("# sample\n0,1\n\n4000,3\n")
        s = read_event_text(p, 2)
        assert list(s.times_us) == [0, 4000] and list(s.channels) == [1, 3] and s.label == 2
        (tmp_path / "bad.txt").write_text("0;1\n")
        with pytest.raises(DataError, match=":1:"):
            read_event_text(tmp_path / "bad.txt")
        (tmp_path / "labels.txt").write_text("3\n1\n\n")
        assert read_labels(tmp_path / "labels.txt") == [3, 1]
        (tmp_path / "badl.txt").write_text("x\n")
        with pytest.raises(DataError):
            read_labels(tmp_path / "badl.txt")


class TestSynthetic:
    def test_clean_samples_equal_templates(self):
        spec = SynthTaskSpec(classes=3, samples_per_class=10, jitter_steps=0, drop_prob=0.0)
        d = gen_synthetic(spec)
        tp = synthetic_templates(spec)
        for t in d.values():
            for x, y in zip(t.data, t.labels):
                assert np.array_equal(x, tp[y])

    def test_full_drop(self):
        d = gen_synthetic(SynthTaskSpec(classes=2, samples_per_class=10, drop_prob=1.0))
        assert not any(t.data.any() for t in d.values())

    def test_default_task_is_learnable_by_nearest_template(self):
        spec = SynthTaskSpec()
        d = gen_synthetic(spec)
        assert [len(d[s]) for s in ("train", "val", "test")] == [1400, 300, 300]
        acc = nearest_template_accuracy(d["test"], synthetic_templates(spec))
        assert acc >= 0.95

    def test_stratified_splits(self):
        d = gen_synthetic(SynthTaskSpec(classes=4, samples_per_class=20))
        for name, n in (("train", 14), ("val", 3), ("test", 3)):
            assert np.array_equal(np.bincount(d[name].labels), [n] * 4)

    def test_deterministic(self):
        spec = SynthTaskSpec(classes=3, samples_per_class=12, seed=7)
        a, b = gen_synthetic(spec), gen_synthetic(spec)
        assert all(encode_spkt(a[k]) == encode_spkt(b[k]) for k in a)
        c = gen_synthetic(SynthTaskSpec(classes=3, samples_per_class=12, seed=8))
        assert encode_spkt(a["train"]) != encode_spkt(c["train"])

    def test_frozen_fingerprint(self):
        # guards the portable generator: a change here changes every synthetic dataset
        d = gen_synthetic(SynthTaskSpec(classes=2, channels=8, timesteps=10, samples_per_class=5, seed=3))
        assert int(d["train"].data.sum()) == 40
        assert hashlib.sha256(d["train"].data.tobytes()).hexdigest() == FROZEN_TRAIN_SHA256
        assert list(d["train"].labels) == [0, 0, 0, 0, 1, 1, 1, 1]

    def test_invalid_task_settings(self):
        with pytest.raises(ParameterRangeError):
            SynthTaskSpec(drop_prob=1.5)
        with pytest.raises(ParameterRangeError):
            SynthTaskSpec(classes=0)
        with pytest.raises(ParameterRangeError):
            SynthTaskSpec(jitter_steps=-1)

    def test_batches(self):
        t = gen_synthetic(SynthTaskSpec(classes=2, samples_per_class=10))["train"]
        sizes = [len(y) for _, y in iterate_batches(t, 5)]
        assert sizes == [5, 5, 4]
        seen = np.concatenate([y for _, y in iterate_batches(t, 4, Rng(0))])
        assert sorted(seen) == sorted(t.labels)


FROZEN_TRAIN_SHA256 = "6bbc5eaabc1d529e5e2bc864dfa20327358065b387e2acab29e6cab8cb28e87e"
