"""Paired normal/silent synthetic utterances over the ten-phrase vocabulary.

Every class (content visemes and the space/SoS/EoS tokens) has a fixed
random prototype. A frame is ``gain * prototype + speaker offset + noise``
where the gain is 1 for normal speech and ``silent_gain`` for silent speech,
mimicking the larger lip movements of mouthed speech. Each silent repetition
draws its own gain ``silent_gain * exp(gain_jitter * z)``, so mouthing effort
varies between utterances.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .viseme_map import N_CLASSES, PAD, PHRASES, default_resources, encode_utterance

SPLITS = ("train", "val", "test")


class SpeechType(str, enum.Enum):
    NORMAL = "normal"
    SILENT = "silent"


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    speech_type: SpeechType
    text: str
    frames: np.ndarray = field(compare=False, repr=False)
    labels: tuple[int, ...]

    @property
    def words(self) -> list[str]:
        return self.text.split()

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.id, self.speaker, self.speech_type, self.text, self.labels) == (
            other.id, other.speaker, other.speech_type, other.text, other.labels
        ) and np.array_equal(self.frames, other.frames)

    __hash__ = None


@dataclass(frozen=True)
class GenConfig:
    n_train_speakers: int = 20
    n_val_speakers: int = 8
    n_test_speakers: int = 11
    repetitions: int = 5
    feature_dim: int = 8
    frames_per_viseme: int = 3
    silent_gain: float = 1.5
    gain_jitter: float = 0.3
    noise: float = 0.3
    speaker_scale: float = 0.3
    seed: int = 0
    n_directions: int = 3
    amplitude_range: tuple[float, float] = (0.5, 2.5)
    distinctiveness: float = 0.15
    phrases: tuple[str, ...] = PHRASES

    def __post_init__(self):
        if min(self.n_train_speakers, self.n_val_speakers, self.n_test_speakers) < 1:
            raise ValueError("every split needs at least one speaker")
        if self.repetitions < 1 or not self.phrases:
            raise ValueError("need at least one phrase and one repetition")
        if self.feature_dim < 1 or self.frames_per_viseme < 1:
            raise ValueError("feature_dim and frames_per_viseme must be positive")
        if self.silent_gain <= 0 or self.noise < 0 or self.speaker_scale < 0:
            raise ValueError("gain must be positive; noise and speaker scale non-negative")
        if self.gain_jitter < 0:
            raise ValueError("gain_jitter must be non-negative")
        if self.n_directions < 0 or self.distinctiveness < 0:
            raise ValueError("n_directions and distinctiveness must be non-negative")
        lo, hi = self.amplitude_range
        if not 0 < lo <= hi:
            raise ValueError("amplitude_range must satisfy 0 < low <= high")

    def replace(self, **kw) -> "GenConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class Dataset:
    train: list[Utterance]
    val: list[Utterance]
    test: list[Utterance]
    config: GenConfig | None = None

    def split(self, name: str) -> list[Utterance]:
        return getattr(self, name)

    def __iter__(self) -> Iterator[tuple[str, list[Utterance]]]:
        for name in SPLITS:
            yield name, self.split(name)

    def count(self, split: str, speech_type: SpeechType) -> int:
        return sum(u.speech_type == speech_type for u in self.split(split))

    @property
    def n_normal(self) -> int:
        return self.count("train", SpeechType.NORMAL)

    @property
    def n_silent(self) -> int:
        return self.count("train", SpeechType.SILENT)

    def speakers(self, split: str) -> set[str]:
        return {u.speaker for u in self.split(split)}


def class_prototypes(cfg: GenConfig) -> np.ndarray:
    """(N_CLASSES, D) prototype matrix; the pad row is zero and never emitted.

    With ``n_directions > 0`` each class is an amplitude along one of a few
    shared unit directions plus a small class-specific part, so an enlarged
    articulation of one class can resemble a different class. With 0 the
    prototypes are independent standard normal vectors.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    if cfg.n_directions == 0:
        protos = rng.normal(size=(N_CLASSES, cfg.feature_dim))
    else:
        dirs = rng.normal(size=(cfg.n_directions, cfg.feature_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        group = rng.integers(0, cfg.n_directions, size=N_CLASSES)
        amp = rng.uniform(*cfg.amplitude_range, size=N_CLASSES)
        unique = rng.normal(scale=cfg.distinctiveness, size=(N_CLASSES, cfg.feature_dim))
        protos = amp[:, None] * dirs[group] + unique
    protos[PAD] = 0.0
    return protos


def gen_dataset(cfg: GenConfig = GenConfig()) -> Dataset:
    dictionary, table = default_resources()
    labels = {p: tuple(encode_utterance(p, dictionary, table)) for p in cfg.phrases}
    protos = class_prototypes(cfg)
    n_spk = (cfg.n_train_speakers, cfg.n_val_speakers, cfg.n_test_speakers)
    out = {}
    first = 0
    for split_idx, (split, count) in enumerate(zip(SPLITS, n_spk)):
        utts = []
        for s in range(first, first + count):
            speaker = f"s{s:03d}"
            rng = np.random.default_rng([cfg.seed, 1, s])
            offset = rng.normal(scale=cfg.speaker_scale, size=cfg.feature_dim)
            for stype in SpeechType:
                silent = stype is SpeechType.SILENT
                for p_idx, phrase in enumerate(cfg.phrases):
                    lab = labels[phrase]
                    base = np.repeat(protos[list(lab)], cfg.frames_per_viseme, axis=0)
                    for r in range(cfg.repetitions):
                        gain = 1.0
                        if silent:
                            gain = cfg.silent_gain * np.exp(cfg.gain_jitter * rng.normal())
                        noise = rng.normal(scale=cfg.noise, size=base.shape)
                        utts.append(Utterance(
                            id=f"{speaker}-{stype.value[0]}-p{p_idx:02d}-r{r:02d}",
                            speaker=speaker, speech_type=stype, text=phrase,
                            frames=gain * base + offset + noise, labels=lab,
                        ))
        out[split] = utts
        first += count
    ds = Dataset(out["train"], out["val"], out["test"], cfg)
    check_speaker_disjoint(ds)
    return ds


def check_speaker_disjoint(ds: Dataset) -> None:
    seen: dict[str, str] = {}
    for split, utts in ds:
        for spk in {u.speaker for u in utts}:
            if seen.setdefault(spk, split) != split:
                raise AssertionError(f"speaker {spk} appears in {seen[spk]} and {split}")


def reduce_silent(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep ``round(fraction * n)`` randomly chosen silent training utterances per speaker."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1:
        return Dataset(list(ds.train), list(ds.val), list(ds.test), ds.config)
    rng = np.random.default_rng([seed, 7])
    by_speaker: dict[str, list[int]] = {}
    for i, u in enumerate(ds.train):
        if u.speech_type is SpeechType.SILENT:
            by_speaker.setdefault(u.speaker, []).append(i)
    drop = set()
    for spk in sorted(by_speaker):
        idx = by_speaker[spk]
        keep = max(1, int(round(fraction * len(idx))))
        kept = set(rng.choice(len(idx), size=keep, replace=False).tolist())
        drop.update(i for k, i in enumerate(idx) if k not in kept)
    train = [u for i, u in enumerate(ds.train) if i not in drop]
    return Dataset(train, list(ds.val), list(ds.test), ds.config)


def nearest_prototype_accuracy(ds: Dataset) -> dict[str, float]:
    """Frame-level accuracy of class means fit on normal training frames.

    Returns accuracy on held-out normal and silent test frames, plus the mean
    distance of each test frame to its own class prototype.
    """
    fpv = _frames_per_position(ds.train[0])
    frames, labs = _frame_table([u for u in ds.train if u.speech_type is SpeechType.NORMAL], fpv)
    classes = np.unique(labs)
    protos = np.stack([frames[labs == c].mean(axis=0) for c in classes])
    out = {}
    for stype in SpeechType:
        f, y = _frame_table([u for u in ds.test if u.speech_type is stype], fpv)
        d = np.linalg.norm(f[:, None, :] - protos[None], axis=2)
        out[f"acc_{stype.value}"] = float(np.mean(classes[d.argmin(axis=1)] == y))
        own = d[np.arange(len(y)), np.searchsorted(classes, y)]
        out[f"dist_{stype.value}"] = float(own.mean())
    return out


def _frames_per_position(u: Utterance) -> int:
    return u.frames.shape[0] // len(u.labels)


def _frame_table(utts: Sequence[Utterance], fpv: int):
    frames = np.concatenate([u.frames for u in utts])
    labs = np.concatenate([np.repeat(u.labels, fpv) for u in utts])
    return frames, labs


# on-disk layout --------------------------------------------------------------

MANIFEST = "manifest.tsv"


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    """One ``<id>.utt`` file per utterance plus ``manifest.tsv`` (split, id)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    if ds.config is not None:
        for k, v in dataclasses.asdict(ds.config).items():
            if k != "phrases":
                manifest.append(f"# {k}={v}")
    for split, utts in ds:
        for u in utts:
            manifest.append(f"{split}\t{u.id}")
            lines = ["\t".join((u.id, u.speaker, u.speech_type.value, u.text)),
                     " ".join(map(str, u.labels))]
            lines += [" ".join(repr(float(x)) for x in row) for row in u.frames]
            (directory / f"{u.id}.utt").write_text("\n".join(lines) + "\n")
    (directory / MANIFEST).write_text("\n".join(manifest) + "\n")


def read_utterance(path: str | Path) -> Utterance:
    lines = Path(path).read_text().splitlines()
    uid, speaker, stype, text = lines[0].split("\t")
    labels = tuple(int(x) for x in lines[1].split())
    frames = np.array([[float(x) for x in ln.split()] for ln in lines[2:] if ln.strip()])
    return Utterance(uid, speaker, SpeechType(stype), text, frames, labels)


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    splits: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        split, uid = line.split("\t")
        if split not in splits:
            raise ValueError(f"unknown split {split!r} in manifest")
        splits[split].append(read_utterance(directory / f"{uid}.utt"))
    ds = Dataset(splits["train"], splits["val"], splits["test"])
    check_speaker_disjoint(ds)
    return ds
