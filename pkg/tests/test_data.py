import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cat_uda import data as D
from cat_uda.experiment import TransferFixture


def tone_spec(**kw):
    base = dict(fundamentals=(16.0, 40.0), harmonic_weights=((1.0,), (1.0,)), noise_sigma=0.0)
    base.update(kw)
    return D.SynthDomainSpec(**base)


# -- synthesis -------------------------------------------------------------------------

def test_noise_free_single_harmonic_is_a_pure_sinusoid():
    ds = D.generate_synth(tone_spec(), 3, seed=5)
    t = np.arange(1024) / 1024.0
    for x, k in zip(ds.samples, ds.labels):
        f = (16.0, 40.0)[k]
        # recover the phase from the first two samples and rebuild the tone
        phi = np.arctan2(x[0], (x[1] - x[0] * np.cos(2 * np.pi * f / 1024)) / np.sin(2 * np.pi * f / 1024))
        assert np.allclose(x, np.sin(2 * np.pi * f * t + phi), atol=1e-9)
        mag = np.abs(np.fft.fft(x))[:512]
        assert int(np.argmax(mag)) == int(f)
        assert np.sort(mag)[-2] < 1e-6 * mag.max()


def test_generation_is_deterministic():
    spec = D.SynthDomainSpec()
    a, b = D.generate_synth(spec, 4, 11), D.generate_synth(spec, 4, 11)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.labels, b.labels)
    c = D.generate_synth(spec, 4, 12)
    assert not np.array_equal(a.samples, c.samples)


def test_generated_samples_follow_the_harmonic_model():
    spec = D.SynthDomainSpec(fundamentals=(10.0, 30.0), harmonic_weights=((1.0, 0.5), (0.3, 0.2)),
                             speed_factor=1.5, amplitude_factor=2.0, noise_sigma=0.0)
    ds = D.generate_synth(spec, 2, 0)
    t = np.arange(1024) / 1024.0
    for x, k in zip(ds.samples, ds.labels):
        f = spec.fundamentals[k] * 1.5
        w = spec.harmonic_weights[k]
        # amplitudes of the harmonic bins
        mag = np.abs(np.fft.fft(x))
        for h, wh in enumerate(w, start=1):
            assert mag[int(round(h * f))] == pytest.approx(2.0 * wh * 512, rel=1e-9)
        assert np.max(np.abs(x)) <= 2.0 * sum(w) + 1e-12


def test_nyquist_violation_names_the_class():
    spec = D.SynthDomainSpec(fundamentals=(10.0, 200.0), harmonic_weights=((1.0,), (1.0, 0.5)), speed_factor=1.4)
    with pytest.raises(D.SpecError, match="class 1"):
        D.generate_synth(spec, 2, 0)


@pytest.mark.parametrize("kw", [dict(fundamentals=(10.0, 10.0)), dict(speed_factor=0.0),
                                dict(noise_sigma=-1.0), dict(fundamentals=(10.0,)),
                                dict(harmonic_weights=((1.0,),))])
def test_invalid_specs(kw):
    with pytest.raises(D.SpecError):
        D.SynthDomainSpec(**kw).validate()


def test_speed_change_hurts_a_source_classifier():
    """Nearest-centroid on spectra: a 1.0 -> 1.5 speed change costs at least 20 accuracy points."""
    fx = TransferFixture()
    src = dataclasses.replace(fx.source, speed_factor=1.0)
    tgt = dataclasses.replace(fx.target, speed_factor=1.5)

    def feats(spec, seed):
        ds = D.normalize(D.to_frequency(D.generate_synth(spec, 60, seed)))
        return ds.samples, ds.labels

    xs, ys = feats(src, 0)
    xs_test, ys_test = feats(src, 1)
    xt, yt = feats(tgt, 1)
    centroids = np.stack([xs[ys == k].mean(axis=0) for k in range(src.n_classes)])

    def acc(x, y):
        d = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
        return float(np.mean(d.argmin(axis=1) == y))

    assert acc(xs_test, ys_test) - acc(xt, yt) >= 0.20


# -- dataset container --------------------------------------------------------------

def test_dataset_is_read_only():
    ds = D.generate_synth(tone_spec(), 2, 0)
    with pytest.raises(ValueError):
        ds.samples[0, 0] = 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        ds.labels = None


def test_without_labels_and_batch_shape():
    ds = D.generate_synth(tone_spec(), 3, 0)
    assert not ds.without_labels().has_labels
    assert ds.as_batch([0, 2]).shape == (2, 1, 1024)


# -- FFT ----------------------------------------------------------------------------------

def test_constant_signal_spectrum():
    ds = D.SignalDataset(np.full((1, 64), -2.5))
    mag = D.to_frequency(ds).samples[0]
    assert mag[0] == pytest.approx(64 * 2.5) and np.all(mag[1:] < 1e-12)


def test_sine_at_exact_bin_is_symmetric():
    L, k = 128, 9
    x = np.sin(2 * np.pi * k * np.arange(L) / L)
    mag = D.to_frequency(D.SignalDataset(x[None])).samples[0]
    peaks = set(np.argsort(mag)[-2:].tolist())
    assert peaks == {k, L - k}
    assert mag[k] == pytest.approx(mag[L - k], rel=1e-12)


def test_parseval(rng):
    x = rng.normal(size=(5, 1024))
    mag = D.to_frequency(D.SignalDataset(x)).samples
    lhs = (mag ** 2).sum(axis=1) / 1024
    rhs = (x ** 2).sum(axis=1)
    assert np.allclose(lhs, rhs, rtol=1e-8)
    assert mag.shape == x.shape


def test_frequency_twice_is_a_state_error(rng):
    ds = D.to_frequency(D.SignalDataset(rng.normal(size=(2, 16))))
    assert ds.representation == "frequency"
    with pytest.raises(D.DatasetStateError):
        D.to_frequency(ds)


# -- normalisation --------------------------------------------------------------------

def test_normalize_moments(rng):
    out = D.normalize(D.SignalDataset(rng.normal(3, 5, size=(6, 200)))).samples
    assert np.allclose(out.mean(axis=1), 0, atol=1e-10)
    assert np.allclose(out.std(axis=1), 1, atol=1e-10)


def test_normalize_idempotent_and_constant(rng):
    once = D.normalize(D.SignalDataset(rng.normal(size=(3, 50))))
    assert np.allclose(D.normalize(once).samples, once.samples, atol=1e-10)
    const = D.normalize(D.SignalDataset(np.full((1, 10), 4.0))).samples
    assert np.array_equal(const, np.zeros((1, 10)))


# -- splits --------------------------------------------------------------------------------

def test_eighty_twenty_split():
    ds = D.SignalDataset(np.zeros((100, 4)), np.repeat(np.arange(4), 25))
    train, test = D.split_train_test(ds, 0.8, seed=0)
    assert (len(train), len(test)) == (80, 20)


@given(st.lists(st.integers(2, 30), min_size=1, max_size=6), st.floats(0.1, 0.9), st.integers(0, 1000))
def test_split_is_stratified_disjoint_and_exhaustive(sizes, fraction, seed):
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(sizes)])
    samples = np.arange(len(labels), dtype=float)[:, None]
    ds = D.SignalDataset(samples, labels)
    train, test = D.split_train_test(ds, fraction, seed)
    tr, te = set(train.samples[:, 0].tolist()), set(test.samples[:, 0].tolist())
    assert not tr & te and tr | te == set(range(len(labels)))
    for k, n in enumerate(sizes):
        assert abs(int(np.sum(train.labels == k)) - fraction * n) <= 1.0
    again = D.split_train_test(ds, fraction, seed)
    assert np.array_equal(again[0].samples, train.samples)


def test_split_needs_two_per_class():
    ds = D.SignalDataset(np.zeros((3, 2)), [0, 0, 1])
    with pytest.raises(ValueError, match="class 1"):
        D.split_train_test(ds)


# -- batching -----------------------------------------------------------------------------

def test_batch_order_depends_only_on_seed_and_epoch():
    a = D.PairedBatches(100, 37, 16, seed=3, epoch=2)
    b = D.PairedBatches(100, 37, 16, seed=3, epoch=2)
    c = D.PairedBatches(100, 37, 16, seed=3, epoch=3)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    assert not np.array_equal(a.batches[0][0], c.batches[0][0])


def test_paired_batches_cover_the_longer_side_once():
    pb = D.PairedBatches(100, 37, 16, seed=0, epoch=0)
    assert len(pb) == D.iterations_per_epoch(100, 37, 16) == 7
    src = np.concatenate([s for s, _ in pb])
    assert sorted(src.tolist()) == list(range(100))
    tgt = np.concatenate([t for _, t in pb])
    assert len(tgt) == 100 and set(tgt.tolist()) == set(range(37))
    assert all(len(s) == len(t) for s, t in pb)


# -- files ---------------------------------------------------------------------------------

def test_binary_round_trip_and_size(tmp_path, rng):
    ds = D.SignalDataset(rng.normal(size=(7, 33)), rng.integers(0, 3, size=7), n_classes=3,
                         representation="frequency")
    path = tmp_path / "d.bin"
    D.save_dataset(ds, path)
    assert path.stat().st_size == D.dataset_file_size(7, 33, True) == 34 + 8 * 7 * 33 + 4 * 7
    back = D.load_dataset(path, domain_id=1)
    assert np.array_equal(back.samples, ds.samples) and np.array_equal(back.labels, ds.labels)
    assert back.representation == "frequency" and back.domain_id == 1 and back.n_classes == 3
    D.save_dataset(ds.without_labels(), path)
    assert D.load_dataset(path).labels is None


@pytest.mark.parametrize("damage", ["magic", "truncate", "version"])
def test_corrupt_files_rejected(tmp_path, rng, damage):
    path = tmp_path / "d.bin"
    D.save_dataset(D.SignalDataset(rng.normal(size=(2, 4)), [0, 1]), path)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:8] = b"NOTMAGIC"
    elif damage == "version":
        raw[8] = 9
    else:
        raw = raw[:-3]
    path.write_bytes(bytes(raw))
    with pytest.raises(D.DatasetFileError):
        D.load_dataset(path)


def test_csv_loader(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,v0,v1,v2\n1,0.5,1.5,2.5\n0,-1,0,1\n")
    ds = D.load_csv(path)
    assert ds.labels.tolist() == [1, 0]
    assert np.array_equal(ds.samples, [[0.5, 1.5, 2.5], [-1, 0, 1]])
    path.write_text("0.5,1.5\n3,4\n")
    ds = D.load_csv(path, has_labels=False)
    assert ds.labels is None and ds.samples.shape == (2, 2)
