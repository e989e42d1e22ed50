import numpy as np
import pytest

from visememl.synth import (
    Dataset, GenConfig, SpeechType, check_speaker_disjoint, class_prototypes, gen_dataset,
    load_dataset, nearest_prototype_accuracy, read_utterance, reduce_silent, save_dataset,
)
from visememl.viseme_map import PAD, PHRASES, default_resources, encode_utterance

SMALL = GenConfig(n_train_speakers=3, n_val_speakers=2, n_test_speakers=2, repetitions=2)


@pytest.fixture(scope="module")
def default_ds():
    return gen_dataset(GenConfig())


def test_default_split_sizes(default_ds):
    assert [len(default_ds.split(s)) for s in ("train", "val", "test")] == [2000, 800, 1100]
    assert default_ds.n_normal == default_ds.n_silent == 1000
    assert len(default_ds.speakers("train")) == 20


def test_same_seed_same_dataset():
    assert gen_dataset(SMALL).train == gen_dataset(SMALL).train
    other = gen_dataset(SMALL.replace(seed=1))
    assert other.train != gen_dataset(SMALL).train


def test_labels_and_frame_counts(default_ds):
    d, t = default_resources()
    expected = {p: tuple(encode_utterance(p, d, t)) for p in PHRASES}
    for _, utts in default_ds:
        for u in utts:
            assert u.labels == expected[u.text]
            assert u.frames.shape == (3 * len(u.labels), 8)
            assert PAD not in u.labels


def test_repetition_counts(default_ds):
    from collections import Counter
    counts = Counter((u.speaker, u.speech_type, u.text) for u in default_ds.train)
    assert set(counts.values()) == {5}
    assert len(counts) == 20 * 2 * 10


def test_degenerate_config_makes_types_identical():
    ds = gen_dataset(SMALL.replace(noise=0.0, silent_gain=1.0, gain_jitter=0.0))
    normal = {(u.speaker, u.text): u.frames for u in ds.train if u.speech_type is SpeechType.NORMAL}
    for u in ds.train:
        if u.speech_type is SpeechType.SILENT:
            np.testing.assert_array_equal(u.frames, normal[(u.speaker, u.text)])


def test_silent_frames_follow_gain():
    cfg = SMALL.replace(noise=0.0, speaker_scale=0.0, gain_jitter=0.0)
    protos = class_prototypes(cfg)
    for u in gen_dataset(cfg).train:
        gain = 1.5 if u.speech_type is SpeechType.SILENT else 1.0
        np.testing.assert_allclose(u.frames[::3], gain * protos[list(u.labels)])


def test_silent_gain_jitter_is_lognormal():
    cfg = SMALL.replace(noise=0.0, speaker_scale=0.0, gain_jitter=0.3)
    protos = class_prototypes(cfg)
    logs = []
    for u in gen_dataset(cfg).train:
        base = np.repeat(protos[list(u.labels)], len(u.frames) // len(u.labels), axis=0)
        gain = float(np.sum(u.frames * base) / np.sum(base * base))
        np.testing.assert_allclose(u.frames, gain * base, atol=1e-12)
        if u.speech_type is SpeechType.SILENT:
            logs.append(np.log(gain / 1.5))
        else:
            assert gain == pytest.approx(1.0)
    assert abs(np.mean(logs)) < 0.1 and 0.2 < np.std(logs) < 0.4


def test_speaker_disjointness(default_ds):
    sets = [default_ds.speakers(s) for s in ("train", "val", "test")]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    bad = Dataset(default_ds.train[:2], default_ds.train[:2], default_ds.test[:2])
    with pytest.raises(AssertionError):
        check_speaker_disjoint(bad)


def test_domain_gap_oracle():
    """Class means fit on normal frames classify silent frames worse, and
    silent frames sit at least 1.2x farther from those means."""
    ratios = []
    for seed in range(5):
        res = nearest_prototype_accuracy(gen_dataset(GenConfig(seed=seed)))
        assert res["acc_silent"] < res["acc_normal"]
        ratios.append(res["dist_silent"] / res["dist_normal"])
    assert np.mean(ratios) >= 1.2


@pytest.mark.parametrize("bad", [
    dict(n_train_speakers=0), dict(repetitions=0), dict(phrases=()), dict(silent_gain=0),
    dict(noise=-1), dict(amplitude_range=(0, 1)),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        GenConfig(**bad)


def test_reduce_silent_counts():
    ds = gen_dataset(SMALL.replace(repetitions=1))  # 10 silent utterances per speaker
    red = reduce_silent(ds, 0.2, seed=0)
    per_speaker = {}
    for u in red.train:
        if u.speech_type is SpeechType.SILENT:
            per_speaker[u.speaker] = per_speaker.get(u.speaker, 0) + 1
    assert set(per_speaker.values()) == {2}
    assert red.n_normal == ds.n_normal
    assert red.test == ds.test and red.val == ds.val


def test_reduce_silent_identity_and_errors():
    ds = gen_dataset(SMALL)
    assert reduce_silent(ds, 1.0).train == ds.train
    for bad in (0, -0.5, 1.5):
        with pytest.raises(ValueError):
            reduce_silent(ds, bad)


def test_reduce_silent_seed_changes_subset():
    ds = gen_dataset(SMALL)
    ids = lambda d: {u.id for u in d.train if u.speech_type is SpeechType.SILENT}
    assert ids(reduce_silent(ds, 0.4, 0)) != ids(reduce_silent(ds, 0.4, 1))
    assert ids(reduce_silent(ds, 0.4, 3)) == ids(reduce_silent(ds, 0.4, 3))


def test_serialization_round_trip(tmp_path):
    ds = gen_dataset(SMALL)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    for split in ("train", "val", "test"):
        assert back.split(split) == ds.split(split)
    u = ds.test[0]
    lines = (tmp_path / f"{u.id}.utt").read_text().splitlines()
    assert lines[0].split("\t") == [u.id, u.speaker, u.speech_type.value, u.text]
    assert lines[1] == " ".join(map(str, u.labels))
    assert len(lines) == 2 + u.frames.shape[0]
    assert read_utterance(tmp_path / f"{u.id}.utt") == u


def test_manifest_rejects_unknown_split(tmp_path):
    save_dataset(gen_dataset(SMALL), tmp_path)
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text(manifest.read_text() + "holdout\tx\n")
    with pytest.raises(ValueError):
        load_dataset(tmp_path)
