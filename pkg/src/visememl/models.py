"""Toy two-stage recognizer: frames -> viseme distributions -> words."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .viseme_map import N_CLASSES, PAD, PHRASES, strip_padding

NEG_INF = -1e9


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def pool_frames(features: np.ndarray, target_len: int) -> np.ndarray:
    """Average T frames into ``target_len`` contiguous bins of near-equal size."""
    features = np.asarray(features, dtype=np.float64)
    T = features.shape[0]
    if target_len < 1 or T < target_len:
        raise ValueError(f"cannot pool {T} frames into {target_len} positions")
    if T == target_len:
        return features.copy()
    edges = (np.arange(target_len + 1) * T) // target_len
    return np.stack([features[edges[i]:edges[i + 1]].mean(axis=0) for i in range(target_len)])


class Module:
    params: dict[str, Node]

    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if self.params[k].value.shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].value.shape}")
            self.params[k].value = np.array(v, dtype=np.float64)


# visual model ----------------------------------------------------------------

@dataclass(frozen=True)
class VisualConfig:
    input_dim: int = 8
    model_dim: int = 64
    ffn_dim: int = 128
    fc_sizes: tuple[int, ...] = (64, 128, 64)
    n_classes: int = N_CLASSES

    @classmethod
    def full_scale(cls, input_dim: int = 512) -> "VisualConfig":
        return cls(input_dim, 512, 2048, (1024, 2048, 1024))


class VisualModel(Module):
    """Input projection, one single-head self-attention block with a
    feed-forward sublayer (both residual), three ReLU fully connected
    blocks and a linear layer into ``n_classes`` logits."""

    def __init__(self, config: VisualConfig = VisualConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, D = config.model_dim, config.input_dim
        shapes = {
            "in.w": (D, d), "attn.q": (d, d), "attn.k": (d, d), "attn.v": (d, d), "attn.o": (d, d),
            "ffn.w1": (d, config.ffn_dim), "ffn.w2": (config.ffn_dim, d),
        }
        sizes = (d,) + tuple(config.fc_sizes)
        for i in range(len(config.fc_sizes)):
            shapes[f"fc{i}.w"] = (sizes[i], sizes[i + 1])
        shapes["out.w"] = (sizes[-1], config.n_classes)
        self.params = {}
        for name, (fi, fo) in shapes.items():
            self.params[name] = ad.parameter(glorot(rng, fi, fo))
            if not name.startswith("attn."):
                prefix, suffix = name.rsplit(".", 1)
                self.params[f"{prefix}.{suffix.replace('w', 'b')}"] = ad.parameter(np.zeros(fo))
        self.params = dict(sorted(self.params.items()))

    def logits(self, x: np.ndarray, mask: np.ndarray | None = None) -> Node:
        """x: (B, L, D) pooled features; mask: (B, L) true at real positions."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, L, _ = x.shape
        p = self.params
        h = ad.add(ad.matmul(x, p["in.w"]), p["in.b"])
        q = ad.matmul(h, p["attn.q"])
        k = ad.matmul(h, p["attn.k"])
        v = ad.matmul(h, p["attn.v"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.config.model_dim))
        if mask is not None:
            bias = np.where(np.asarray(mask, bool), 0.0, NEG_INF)[:, None, :]
            scores = ad.add(scores, bias)
        attn = ad.softmax(scores)
        h = ad.add(h, ad.matmul(ad.matmul(attn, v), p["attn.o"]))
        f = ad.relu(ad.add(ad.matmul(h, p["ffn.w1"]), p["ffn.b1"]))
        h = ad.add(h, ad.add(ad.matmul(f, p["ffn.w2"]), p["ffn.b2"]))
        for i in range(len(self.config.fc_sizes)):
            h = ad.relu(ad.add(ad.matmul(h, p[f"fc{i}.w"]), p[f"fc{i}.b"]))
        return ad.add(ad.matmul(h, p["out.w"]), p["out.b"])

    def __call__(self, x, mask=None) -> Node:
        return ad.softmax_rows(self.logits(x, mask))

    def predict(self, x, mask=None) -> np.ndarray:
        with ad.no_grad():
            return self(x, mask).value

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "VisualModel":
        D, d = state["in.w"].shape
        n_fc = sum(1 for k in state if k.startswith("fc") and k.endswith(".w"))
        cfg = VisualConfig(
            input_dim=D, model_dim=d, ffn_dim=state["ffn.w1"].shape[1],
            fc_sizes=tuple(state[f"fc{i}.w"].shape[1] for i in range(n_fc)),
            n_classes=state["out.w"].shape[1],
        )
        model = cls(cfg)
        model.load_state_dict(state)
        return model


def visual_forward(model: VisualModel, features: np.ndarray, target_len: int) -> np.ndarray:
    """Pool a (T, D) frame matrix to ``target_len`` positions and classify them."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    pooled = pool_frames(features, target_len)
    return model.predict(pooled[None])[0]


def decode_visemes(Q: np.ndarray) -> list[int]:
    """Per-position argmax (ties go to the lower id) with trailing pads removed."""
    Q = np.asarray(Q)
    return strip_padding(np.argmax(Q, axis=-1).tolist())


# language model --------------------------------------------------------------

WORD_PAD, WORD_SOS, WORD_EOS = "<pad>", "<s>", "</s>"


def default_vocabulary(phrases: Sequence[str] = PHRASES) -> tuple[str, ...]:
    words = sorted({w for p in phrases for w in p.split()})
    return (WORD_PAD, WORD_SOS, WORD_EOS, *words)


@dataclass(frozen=True)
class LanguageConfig:
    embed_dim: int = 16
    hidden: int = 32
    n_visemes: int = N_CLASSES
    vocab: tuple[str, ...] = default_vocabulary()
    max_len: int = 12

    @classmethod
    def full_scale(cls) -> "LanguageConfig":
        return cls(embed_dim=64, hidden=256)


@dataclass
class Decoded:
    words: list[list[str]]
    probs: list[np.ndarray]
    attention: list[np.ndarray]


class LanguageModel(Module):
    """GRU encoder over viseme tokens, GRU decoder over words, dot-product
    attention from the decoder state onto the encoder states."""

    def __init__(self, config: LanguageConfig = LanguageConfig(), seed: int = 0):
        self.config = config
        self.word_index = {w: i for i, w in enumerate(config.vocab)}
        rng = np.random.default_rng(seed)
        e, h, V = config.embed_dim, config.hidden, len(config.vocab)
        p = {
            "enc.emb": rng.uniform(-0.1, 0.1, (config.n_visemes, e)),
            "dec.emb": rng.uniform(-0.1, 0.1, (V, e)),
            "out.w": glorot(rng, 2 * h, V),
            "out.b": np.zeros(V),
        }
        for cell in ("enc", "dec"):
            for gate in ("z", "r", "n"):
                p[f"{cell}.{gate}.wx"] = glorot(rng, e, h)
                p[f"{cell}.{gate}.wh"] = glorot(rng, h, h)
                p[f"{cell}.{gate}.b"] = np.zeros(h)
        self.params = {k: ad.parameter(v) for k, v in sorted(p.items())}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], vocab: tuple[str, ...] | None = None,
                   max_len: int = 12) -> "LanguageModel":
        n_visemes, e = state["enc.emb"].shape
        V = state["dec.emb"].shape[0]
        vocab = default_vocabulary() if vocab is None else tuple(vocab)
        if len(vocab) != V:
            raise ValueError(f"checkpoint has {V} words, vocabulary has {len(vocab)}")
        cfg = LanguageConfig(embed_dim=e, hidden=state["enc.z.wh"].shape[0],
                             n_visemes=n_visemes, vocab=vocab, max_len=max_len)
        model = cls(cfg)
        model.load_state_dict(state)
        return model

    def _gru(self, cell: str, x: Node, h: Node) -> Node:
        p = self.params

        def gate(g, hh):
            return ad.add(ad.add(ad.matmul(x, p[f"{cell}.{g}.wx"]), ad.matmul(hh, p[f"{cell}.{g}.wh"])), p[f"{cell}.{g}.b"])

        z = ad.sigmoid(gate("z", h))
        r = ad.sigmoid(gate("r", h))
        n = ad.tanh(ad.add(ad.add(ad.matmul(x, p[f"{cell}.n.wx"]), ad.mul(r, ad.matmul(h, p[f"{cell}.n.wh"]))), p[f"{cell}.n.b"]))
        return ad.add(n, ad.mul(z, ad.sub(h, n)))

    def _embed(self, table: str, ids: np.ndarray) -> Node:
        return self.params[table][np.asarray(ids, dtype=np.int64)]

    def encode(self, visemes: Sequence[Sequence[int]]):
        if not visemes or any(len(v) == 0 for v in visemes):
            raise ValueError("empty viseme input")
        B, T = len(visemes), max(len(v) for v in visemes)
        ids = np.full((B, T), PAD, dtype=np.int64)
        mask = np.zeros((B, T), dtype=bool)
        for b, v in enumerate(visemes):
            ids[b, :len(v)] = v
            mask[b, :len(v)] = True
        h = ad.constant(np.zeros((B, self.config.hidden)))
        states = []
        for t in range(T):
            new = self._gru("enc", self._embed("enc.emb", ids[:, t]), h)
            m = mask[:, t:t + 1].astype(np.float64)
            # finished sequences keep their last state
            h = ad.add(ad.mul(new, m), ad.mul(h, 1.0 - m))
            states.append(ad.reshape(h, (B, 1, -1)))
        return ad.concat(states, axis=1), h, mask

    def _attend(self, enc: Node, key_bias: np.ndarray, h: Node):
        B, T, H = enc.shape
        scores = ad.reshape(ad.matmul(enc, ad.reshape(h, (B, H, 1))), (B, T))
        alpha = ad.softmax(ad.add(scores, key_bias))
        ctx = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, T)), enc), (B, H))
        return ctx, alpha

    def _step(self, enc, key_bias, prev_ids, h):
        h = self._gru("dec", self._embed("dec.emb", prev_ids), h)
        ctx, alpha = self._attend(enc, key_bias, h)
        logits = ad.add(ad.matmul(ad.concat([h, ctx], axis=1), self.params["out.w"]), self.params["out.b"])
        return h, logits, alpha

    def word_ids(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.word_index[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"word {exc.args[0]!r} not in vocabulary") from None

    def teacher_forced_loss(self, visemes, truths: Sequence[Sequence[str]]) -> Node:
        """Mean word-level cross-entropy with ground-truth decoder inputs."""
        if len(visemes) != len(truths):
            raise ValueError("one word sequence per viseme sequence")
        enc, h, mask = self.encode(visemes)
        key_bias = np.where(mask, 0.0, NEG_INF)
        B = len(truths)
        seqs = [self.word_ids(t) + [self.word_index[WORD_EOS]] for t in truths]
        steps = max(len(s) for s in seqs)
        targets = np.zeros((B, steps), dtype=np.int64)
        weight = np.zeros((B, steps))
        for b, s in enumerate(seqs):
            targets[b, :len(s)] = s
            weight[b, :len(s)] = 1.0
        prev = np.full(B, self.word_index[WORD_SOS])
        total = None
        for t in range(steps):
            h, logits, _ = self._step(enc, key_bias, prev, h)
            probs = ad.softmax(logits)
            picked = probs[np.arange(B), targets[:, t]]
            term = ad.sum_(ad.mul(ad.log(picked), weight[:, t]))
            total = term if total is None else ad.add(total, term)
            prev = targets[:, t]
        return ad.mul(total, -1.0 / weight.sum())

    def greedy(self, visemes: Sequence[Sequence[int]], max_len: int | None = None) -> Decoded:
        """Batched greedy decoding; a sequence stops at ``</s>`` or the length cap."""
        max_len = self.config.max_len if max_len is None else max_len
        eos = self.word_index[WORD_EOS]
        with ad.no_grad():
            enc, h, mask = self.encode(visemes)
            key_bias = np.where(mask, 0.0, NEG_INF)
            B = len(visemes)
            prev = np.full(B, self.word_index[WORD_SOS])
            done = np.zeros(B, dtype=bool)
            words = [[] for _ in range(B)]
            probs = [[] for _ in range(B)]
            attn = [[] for _ in range(B)]
            for _ in range(max_len):
                h, logits, alpha = self._step(enc, key_bias, prev, h)
                dist = ad.softmax(logits).value
                nxt = np.argmax(dist, axis=1)
                for b in np.flatnonzero(~done):
                    probs[b].append(dist[b])
                    attn[b].append(alpha.value[b, :mask[b].sum()])
                    if nxt[b] == eos:
                        done[b] = True
                    else:
                        words[b].append(self.config.vocab[nxt[b]])
                prev = nxt
                if done.all():
                    break
        return Decoded(words, [np.array(p) for p in probs], [np.array(a) for a in attn])


def language_forward(model: LanguageModel, visemes: Sequence[int], mode: str = "greedy",
                     truth: Sequence[str] | None = None):
    """Single-utterance entry point.

    ``greedy`` returns ``(words, per-step word distributions)``;
    ``teacher_forced`` returns ``(truth words, per-step distributions)``
    computed with the ground-truth words as decoder inputs.
    """
    if len(visemes) == 0:
        raise ValueError("empty viseme input")
    if mode == "greedy":
        out = model.greedy([list(visemes)])
        return out.words[0], out.probs[0]
    if mode != "teacher_forced":
        raise ValueError(f"unknown mode {mode!r}")
    if truth is None:
        raise ValueError("teacher_forced mode needs the truth word sequence")
    with ad.no_grad():
        enc, h, mask = model.encode([list(visemes)])
        key_bias = np.where(mask, 0.0, NEG_INF)
        ids = model.word_ids(truth) + [model.word_index[WORD_EOS]]
        prev = np.array([model.word_index[WORD_SOS]])
        dists = []
        for t in ids:
            h, logits, _ = model._step(enc, key_bias, prev, h)
            dists.append(ad.softmax(logits).value[0])
            prev = np.array([t])
    return list(truth), np.array(dists)


# checkpoint container ----------------------------------------------------------

MAGIC = b"VISEMEML"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    """magic | u32 version | u32 count | blocks | u32 crc32 (all little-endian).

    Each block: u16 name length, utf-8 name, u8 rank, u32 dims, float64 data.
    """
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(state))
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() emits C order
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", body, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    pos += 8
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 8
        state[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last block")
    return state
