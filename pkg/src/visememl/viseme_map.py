"""Text -> phonemes -> visemes.

Words are looked up in a CMU-format pronouncing dictionary, stress digits
are dropped, and each phoneme is mapped through a phoneme/viseme table
(13 viseme classes following Lee & Yook). Utterances are framed with the
special tokens used by the recognizer.
"""

from __future__ import annotations

import csv
import hashlib
import io
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

N_VISEMES = 13
SPACE, SOS, EOS, PAD = 13, 14, 15, 16
N_CLASSES = 17
SPECIAL_IDS = (SPACE, SOS, EOS, PAD)
CLASS_NAMES = tuple(f"V{i}" for i in range(N_VISEMES)) + ("<sp>", "<s>", "</s>", "<pad>")

# Ten phrases of the AV Digits / OuluVS2 vocabulary.
PHRASES = (
    "excuse me",
    "goodbye",
    "hello",
    "how are you",
    "nice to meet you",
    "see you",
    "i am sorry",
    "thank you",
    "have a good time",
    "you are welcome",
)

_ALT_RE = re.compile(r"^(?P<word>[^()\s]+)\((?P<n>\d+)\)$")
_PHONE_RE = re.compile(r"^[A-Za-z]+[0-2]?$")


class DictionaryParseError(ValueError):
    pass


class OOVError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"out-of-vocabulary word: {self.word!r}"


class UnmappedPhonemeError(KeyError):
    def __init__(self, phoneme: str):
        super().__init__(phoneme)
        self.phoneme = phoneme

    def __str__(self):
        return f"phoneme {self.phoneme!r} has no viseme"


def strip_stress(symbol: str) -> str:
    return symbol.rstrip("012").upper()


@dataclass(frozen=True)
class PronouncingDictionary:
    entries: Mapping[str, tuple[tuple[str, ...], ...]]
    checksum: str

    def __contains__(self, word: str) -> bool:
        return word.upper() in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def pronunciations(self, word: str) -> tuple[tuple[str, ...], ...]:
        try:
            return self.entries[word.upper()]
        except KeyError:
            raise OOVError(word) from None

    @property
    def inventory(self) -> frozenset[str]:
        return frozenset(p for prons in self.entries.values() for pron in prons for p in pron)


@dataclass(frozen=True)
class VisemeTable:
    mapping: Mapping[str, int]
    source: str = field(default="", compare=False)

    def __post_init__(self):
        ids = set(self.mapping.values())
        if ids != set(range(N_VISEMES)):
            raise ValueError(f"viseme table must use exactly ids 0..{N_VISEMES - 1}, got {sorted(ids)}")

    def __getitem__(self, phoneme: str) -> int:
        try:
            return self.mapping[phoneme]
        except KeyError:
            raise UnmappedPhonemeError(phoneme) from None

    def covers(self, phonemes: Iterable[str]) -> bool:
        return all(p in self.mapping for p in phonemes)


def parse_dictionary(lines: Iterable[str]) -> PronouncingDictionary:
    """Parse cmudict-format text lines.

    Accepts both the classic ``WORD  PH1 PH2`` layout with ``;;;`` comments
    and the newer lowercase, single-space layout with trailing ``# ...``
    comments. Alternates such as ``WORD(2)`` are attached to ``WORD`` in
    file order, so the first listed pronunciation stays first.
    """
    entries: dict[str, list[tuple[str, ...]]] = {}
    digest = hashlib.sha256()
    seen_any = False
    for lineno, raw in enumerate(lines, start=1):
        digest.update(raw.encode("utf-8"))
        seen_any = True
        line = raw.strip()
        if not line or line.startswith(";;;"):
            continue
        line = line.split("#", 1)[0].strip()
        parts = line.split()
        if len(parts) < 2:
            raise DictionaryParseError(f"line {lineno}: expected 'WORD PHONEME...', got {raw.rstrip()!r}")
        head, phones = parts[0], parts[1:]
        m = _ALT_RE.match(head)
        word = (m.group("word") if m else head).upper()
        bad = [p for p in phones if not _PHONE_RE.match(p)]
        if bad:
            raise DictionaryParseError(f"line {lineno}: bad phoneme symbol(s) {bad} for {word}")
        entries.setdefault(word, []).append(tuple(strip_stress(p) for p in phones))
    if not seen_any or not entries:
        raise DictionaryParseError("dictionary is empty")
    frozen = {w: tuple(prons) for w, prons in entries.items()}
    return PronouncingDictionary(frozen, digest.hexdigest())


def load_dictionary(path: str | Path | None = None) -> PronouncingDictionary:
    """Load a dictionary file; default is the bundled ten-phrase excerpt."""
    if path is None:
        text = resources.files("visememl.data").joinpath("cmudict-phrases.dict").read_text("utf-8")
        return parse_dictionary(io.StringIO(text))
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_dictionary(fh)


def load_full_cmudict() -> PronouncingDictionary:
    """The complete dictionary distributed by the optional ``cmudict`` package."""
    import cmudict

    return parse_dictionary(io.StringIO(cmudict.dict_string()))


def parse_viseme_table(lines: Iterable[str], source: str = "") -> VisemeTable:
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["phoneme", "viseme_id"]:
        raise ValueError("viseme table needs header 'phoneme,viseme_id'")
    mapping: dict[str, int] = {}
    for row in reader:
        ph = row["phoneme"].strip().upper()
        vid = int(row["viseme_id"])
        if not 0 <= vid < N_VISEMES:
            raise ValueError(f"viseme id {vid} for {ph} outside 0..{N_VISEMES - 1}")
        if ph in mapping and mapping[ph] != vid:
            raise ValueError(f"phoneme {ph} mapped twice")
        mapping[ph] = vid
    return VisemeTable(mapping, source)


def load_viseme_table(path: str | Path | None = None) -> VisemeTable:
    if path is None:
        text = resources.files("visememl.data").joinpath("lee-visemes.csv").read_text("utf-8")
        return parse_viseme_table(io.StringIO(text), "lee-visemes.csv")
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_viseme_table(fh, str(path))


def text_to_phonemes(text: str, dictionary: PronouncingDictionary) -> list[list[str]]:
    words = text.split()
    if not words:
        raise ValueError("empty text")
    return [list(dictionary.pronunciations(w)[0]) for w in words]


def phonemes_to_visemes(phonemes: Sequence[str], table: VisemeTable) -> list[int]:
    # no collapsing of repeats: targets stay position-aligned
    return [table[strip_stress(p)] for p in phonemes]


def encode_utterance(text: str, dictionary: PronouncingDictionary, table: VisemeTable) -> list[int]:
    seq = [SOS]
    for i, word in enumerate(text_to_phonemes(text, dictionary)):
        if i:
            seq.append(SPACE)
        seq.extend(phonemes_to_visemes(word, table))
    seq.append(EOS)
    return seq


def is_special(label: int) -> bool:
    return label >= N_VISEMES


def strip_padding(labels: Sequence[int]) -> list[int]:
    out = list(labels)
    while out and out[-1] == PAD:
        out.pop()
    return out


def strip_framing(labels: Sequence[int]) -> list[int]:
    """Drop SoS/EoS/Pad, keep content visemes and Space (scoring convention)."""
    return [int(v) for v in labels if v not in (SOS, EOS, PAD)]


_DEFAULTS: tuple[PronouncingDictionary, VisemeTable] | None = None


def default_resources() -> tuple[PronouncingDictionary, VisemeTable]:
    global _DEFAULTS
    if _DEFAULTS is None:
        _DEFAULTS = (load_dictionary(), load_viseme_table())
    return _DEFAULTS
