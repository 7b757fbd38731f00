import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuzzyp300.epochs import (
    EpochSet, FilterSpec, SynthSpec, bandpass_notch, decode_epochs, encode_epochs, extract_window,
    filter_array, import_csv_epochs, latency_sample, load_epochs, read_manifest, save_epochs,
    split_train_valid, synth_oddball, write_manifest,
)
from fuzzyp300.errors import (
    BadMagicError, ConfigurationError, DimensionError, LengthMismatchError, RangeError,
    StratificationError, TruncatedError,
)

FS = 256.0


def make_set(n=3, c=2, t=16, seed=0, **kw):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    return EpochSet(rng.standard_normal((n, c, t)), labels, FS, -0.05, **kw)


def rms(v):
    return float(np.sqrt(np.mean(np.square(v))))


# container

def test_epochset_validation():
    with pytest.raises(DimensionError):
        EpochSet(np.zeros((2, 3)), [0, 1], FS, -0.1)
    with pytest.raises(DimensionError):
        EpochSet(np.zeros((2, 1, 4)), [0], FS, -0.01)
    with pytest.raises(ConfigurationError):
        EpochSet(np.zeros((1, 1, 4)), [2], FS, -0.01)
    with pytest.raises(ConfigurationError):
        EpochSet(np.full((1, 1, 4), np.nan), [0], FS, -0.01)
    with pytest.raises(ConfigurationError):
        EpochSet(np.zeros((1, 1, 4)), [0], FS, -0.01, cohort="XYZ")
    # onset must fall inside the window
    with pytest.raises(RangeError):
        EpochSet(np.zeros((1, 1, 4)), [0], FS, 0.0)
    with pytest.raises(RangeError):
        EpochSet(np.zeros((1, 1, 4)), [0], FS, -1.0)


# EPO1 format

def test_roundtrip_resave_identical_bytes(tmp_path):
    x = make_set(cohort="AUT", subject=12, session=3)
    save_epochs(x, tmp_path / "a.epo")
    y = load_epochs(tmp_path / "a.epo")
    save_epochs(y, tmp_path / "b.epo")
    assert (tmp_path / "a.epo").read_bytes() == (tmp_path / "b.epo").read_bytes()
    assert (y.cohort, y.subject, y.session) == ("AUT", 12, 3)
    np.testing.assert_array_equal(y.labels, x.labels)
    np.testing.assert_array_equal(y.data, x.data.astype(np.float32))


def test_header_layout():
    x = make_set(n=3, c=2, t=16)
    buf = encode_epochs(x)
    assert buf[:4] == b"EPO1"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert int.from_bytes(buf[6:10], "little") == 3
    assert int.from_bytes(buf[10:12], "little") == 2
    assert int.from_bytes(buf[12:16], "little") == 16
    assert len(buf) == 33 + 3 + 4 * 3 * 2 * 16


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(0, 5), c=st.integers(1, 4), t=st.integers(2, 20),
    cohort=st.sampled_from(["NT", "ALS", "AUT", "SYN"]),
    subject=st.integers(0, 2**32 - 1), session=st.integers(0, 2**32 - 1),
    seed=st.integers(0, 2**16),
)
def test_roundtrip_property(n, c, t, cohort, subject, session, seed):
    rng = np.random.default_rng(seed)
    data = (rng.standard_normal((n, c, t)) * 50).astype(np.float32).astype(np.float64)
    x = EpochSet(data, rng.integers(0, 2, n), 250.0, -1.0 / 250.0, cohort, subject, session)
    buf = encode_epochs(x)
    y = decode_epochs(buf)
    assert encode_epochs(y) == buf
    np.testing.assert_array_equal(y.data, data)


def test_bad_magic_offset_zero():
    buf = b"XXXX" + encode_epochs(make_set())[4:]
    with pytest.raises(BadMagicError) as exc:
        decode_epochs(buf)
    assert exc.value.offset == 0


def test_truncated_payload_names_sizes():
    x = make_set(n=3)
    two = encode_epochs(x.subset([0, 1]))
    # header declaring 3 trials, payload for 2
    buf = encode_epochs(x)[:33] + two[33:]
    with pytest.raises(TruncatedError) as exc:
        decode_epochs(buf)
    expected = 33 + 3 + 4 * 3 * 2 * 16
    assert str(expected) in str(exc.value) and str(len(buf)) in str(exc.value)
    assert exc.value.offset == len(buf)


def test_trailing_bytes_and_short_header():
    buf = encode_epochs(make_set())
    with pytest.raises(LengthMismatchError):
        decode_epochs(buf + b"\0")
    with pytest.raises(TruncatedError):
        decode_epochs(buf[:10])


def test_error_classes_distinct():
    assert len({BadMagicError.code, TruncatedError.code, LengthMismatchError.code}) == 3


def test_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "m.json", [{"path": "a.epo", "cohort": "NT", "subject": 1, "session": 0}])
    entries = read_manifest(tmp_path / "m.json")
    assert entries[0]["path"] == str(tmp_path / "a.epo")
    (tmp_path / "bad.json").write_text('{"files": []}')
    with pytest.raises(ConfigurationError):
        read_manifest(tmp_path / "bad.json")


def test_import_csv(tmp_path):
    rng = np.random.default_rng(0)
    trials = [rng.standard_normal((3, 10)) for _ in range(4)]
    for i, tr in enumerate(trials):
        np.savetxt(tmp_path / f"t{i}.csv", tr, delimiter=",")
    (tmp_path / "labels.csv").write_text("file,label\n" + "".join(f"t{i}.csv,{i % 2}\n" for i in range(4)))
    x = import_csv_epochs(tmp_path, 100.0, -0.02, "ALS", 4, 1)
    assert x.data.shape == (4, 3, 10) and x.cohort == "ALS"
    np.testing.assert_allclose(x.data, np.stack(trials))
    np.testing.assert_array_equal(x.labels, [0, 1, 0, 1])


# filtering

def test_dc_removed():
    t = 2048
    out = filter_array(np.full((1, t), 7.0), FilterSpec(), FS)
    trim = t // 4
    assert np.max(np.abs(out[0, trim:-trim])) < 0.01 * 7.0


def sine(freq, t=2048):
    return np.sin(2 * np.pi * freq * np.arange(t) / FS)


def test_line_noise_suppressed():
    x = sine(50.0)
    out = filter_array(x, FilterSpec(), FS)
    assert rms(out) < 0.05 * rms(x)


def test_mid_band_passes():
    x = sine(10.0)
    out = filter_array(x, FilterSpec(), FS)
    assert abs(rms(out) / rms(x) - 1.0) <= 0.10


def test_filter_is_linear(rng):
    a, b = 1.7, -0.3
    x = rng.standard_normal((2, 512))
    y = rng.standard_normal((2, 512))
    lhs = filter_array(a * x + b * y, FilterSpec(), FS)
    rhs = a * filter_array(x, FilterSpec(), FS) + b * filter_array(y, FilterSpec(), FS)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_zero_phase_keeps_symmetric_pulse_centred():
    t = 1025
    centre = t // 2
    n = np.arange(t)
    pulse = np.exp(-0.5 * ((n - centre) / 10.0) ** 2)
    out = filter_array(pulse, FilterSpec(), FS)
    assert abs(int(np.argmax(out)) - centre) <= 1
    np.testing.assert_allclose(out[centre - 60:centre], out[centre + 60:centre:-1], atol=1e-3 * out.max())


def test_filter_validation():
    x = make_set()
    with pytest.raises(ConfigurationError):
        bandpass_notch(x, FilterSpec(band_high_hz=200.0))
    with pytest.raises(ConfigurationError):
        bandpass_notch(x, FilterSpec(notch_hz=150.0))
    assert bandpass_notch(make_set(t=64), FilterSpec(notch_hz=60.0)).data.shape == (3, 2, 64)


# windowing

def test_window_identity():
    x = make_set(t=64)
    y = extract_window(x, x.t0_s, x.t0_s + x.n_samples / FS)
    np.testing.assert_array_equal(y.data, x.data)
    assert y.t0_s == x.t0_s


def test_window_paper_length():
    x = EpochSet(np.zeros((1, 1, 300)), [0], FS, -0.2)
    y = extract_window(x, -0.195, 0.8)
    assert y.n_samples == 255 and y.t0_s == -0.195


def test_window_out_of_range():
    x = make_set(t=64)
    with pytest.raises(RangeError):
        extract_window(x, -0.05, 1.0)
    with pytest.raises(RangeError):
        extract_window(x, -0.2, 0.1)
    with pytest.raises(RangeError):
        extract_window(x, 0.1, 0.0)


# synthetic data

def test_noiseless_peak_is_amplitude():
    spec = SynthSpec(n_target=1, n_nontarget=0, noise_sigma_uv=0.0, latency_jitter_s=0.0)
    x = synth_oddball(spec, 4, 255, FS)
    k = latency_sample(spec.p300_latency_s, spec.t0_s, FS)
    assert x.data[0, 0, k] == spec.p300_amp_uv
    assert int(np.argmax(x.data[0, 0])) == k


def test_active_channels_only():
    spec = SynthSpec(n_target=1, n_nontarget=0, noise_sigma_uv=0.0, active_channels=(1,))
    x = synth_oddball(spec, 3, 255, FS)
    assert np.all(x.data[0, [0, 2]] == 0.0) and x.data[0, 1].max() > 0


def test_synth_deterministic():
    a = synth_oddball(SynthSpec(n_target=5, n_nontarget=10), 3, 64, FS)
    b = synth_oddball(SynthSpec(n_target=5, n_nontarget=10), 3, 64, FS)
    assert encode_epochs(a) == encode_epochs(b)
    c = synth_oddball(SynthSpec(n_target=5, n_nontarget=10, seed=8), 3, 64, FS)
    assert encode_epochs(a) != encode_epochs(c)


def test_synth_class_mean_difference():
    spec = SynthSpec(n_target=400, n_nontarget=1600, latency_jitter_s=0.0)
    x = synth_oddball(spec, 2, 255, FS)
    k = latency_sample(spec.p300_latency_s, spec.t0_s, FS)
    y = x.labels.astype(bool)
    diff = x.data[y, 0, k].mean() - x.data[~y, 0, k].mean()
    se = spec.noise_sigma_uv * np.sqrt(1 / y.sum() + 1 / (~y).sum())
    assert abs(diff - spec.p300_amp_uv) <= 3 * se


def test_synth_rejects_bad_channels():
    with pytest.raises(ConfigurationError):
        synth_oddball(SynthSpec(active_channels=(5,)), 3, 64, FS)


# splitting

def labelled(n_target, n_nontarget):
    labels = np.r_[np.ones(n_target), np.zeros(n_nontarget)]
    return EpochSet(np.zeros((labels.size, 1, 4)), labels, FS, -0.001)


def test_split_counts():
    a, b = split_train_valid(labelled(20, 80), 0.8, seed=0)
    assert (a.n_trials, b.n_trials) == (80, 20)
    assert (int(a.labels.sum()), int(b.labels.sum())) == (16, 4)


def test_split_smallest_case():
    a, b = split_train_valid(labelled(2, 2), 0.5, seed=1)
    assert sorted(a.labels.tolist()) == [0, 1] and sorted(b.labels.tolist()) == [0, 1]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partition_property(nt, nn, ratio, seed):
    x = labelled(nt, nn)
    x.data[:, 0, 0] = np.arange(x.n_trials)  # tag trials
    a, b = split_train_valid(x, ratio, seed)
    ids_a, ids_b = a.data[:, 0, 0], b.data[:, 0, 0]
    assert not set(ids_a) & set(ids_b)
    assert sorted(np.r_[ids_a, ids_b]) == list(range(x.n_trials))
    assert int(a.labels.sum()) == min(max(int(np.floor(nt * ratio + 1e-9)), 1), nt - 1)
    assert int((a.labels == 0).sum()) == min(max(int(np.ceil(nn * ratio - 1e-9)), 1), nn - 1)


def test_split_deterministic_and_seeded():
    x = synth_oddball(SynthSpec(n_target=10, n_nontarget=30, t0_s=-0.01), 1, 8, FS)
    a1, _ = split_train_valid(x, 0.7, 5)
    a2, _ = split_train_valid(x, 0.7, 5)
    a3, _ = split_train_valid(x, 0.7, 6)
    np.testing.assert_array_equal(a1.data, a2.data)
    assert not np.array_equal(a1.data, a3.data)


def test_split_errors():
    with pytest.raises(StratificationError):
        split_train_valid(labelled(1, 10))
    with pytest.raises(StratificationError):
        split_train_valid(labelled(0, 10))
    with pytest.raises(ConfigurationError):
        split_train_valid(labelled(5, 5), 1.0)
