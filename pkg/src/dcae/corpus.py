"""Synthetic paired clean/noisy corpus with ground-truth senone alignments.

Utterances fall into four conditions: A (clean), B (additive noise),
C (channel bias only) and D (noise plus channel bias). The training set
holds each sampled utterance twice, once as A and once as B.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Topology

log = logging.getLogger(__name__)

CONDITIONS = ("A", "B", "C", "D")
NOISE_NAMES = {1: "street", 2: "train_station", 3: "car", 4: "babble", 5: "restaurant", 6: "airport"}
MAGIC = b"DCAE"
VERSION = 1
_HEADER = struct.Struct("<4sBIIII")
_NOISE_SEED = 0x5EED_A4


class CorpusFormatError(ValueError):
    """Malformed or corrupted utterance/manifest file."""


@dataclass
class Word:
    name: str
    phones: tuple[int, ...]


@dataclass
class CorpusSpec:
    num_phones: int = 10
    feat_dim: int = 40
    spk_embed_dim: int = 100
    num_speakers: int = 8
    num_utts: int = 100
    num_test_per_condition: int = 20
    utt_len_range: tuple[int, int] = (30, 90)
    noise_types: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    snr_range_db: tuple[float, float] = (10.0, 20.0)
    num_channels: int = 2
    vocab: list[Word] | None = None
    vocab_size: int = 20
    min_phone_frames: int = 3
    mean_phone_frames: float = 6.0
    frame_noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.utt_len_range = tuple(int(v) for v in self.utt_len_range)
        self.snr_range_db = tuple(float(v) for v in self.snr_range_db)
        self.noise_types = tuple(int(v) for v in self.noise_types)
        if self.vocab is not None:
            self.vocab = [w if isinstance(w, Word) else Word(w["name"], tuple(w["phones"]))
                          for w in self.vocab]
            self.vocab = [Word(w.name, tuple(int(p) for p in w.phones)) for w in self.vocab]

    def validate(self):
        if self.num_phones < 2:
            raise ValueError("num_phones must be >= 2")
        if self.feat_dim < 1 or self.spk_embed_dim < 1:
            raise ValueError("feat_dim and spk_embed_dim must be >= 1")
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.num_utts < 0 or self.num_test_per_condition < 0:
            raise ValueError("utterance counts must be non-negative")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ValueError("snr range low must not exceed high")
        if not self.noise_types:
            raise ValueError("need at least one noise type")
        for k in self.noise_types:
            if k < 1:
                raise ValueError(f"noise ids start at 1, got {k}")
        if self.num_channels < 2:
            raise ValueError("need the identity channel plus at least one distorting channel")
        if self.min_phone_frames < 1 or self.mean_phone_frames < self.min_phone_frames:
            raise ValueError("phone duration parameters are inconsistent")
        if self.utt_len_range[0] > self.utt_len_range[1] or self.utt_len_range[1] < 1:
            raise ValueError("utt_len_range is empty")
        if self.vocab is not None:
            if not self.vocab:
                raise ValueError("empty vocab")
            for w in self.vocab:
                if not w.phones:
                    raise ValueError(f"word {w.name!r} has no pronunciation")
                if any(not 0 <= p < self.num_phones for p in w.phones):
                    raise ValueError(f"word {w.name!r} uses an undefined phone")
        elif self.vocab_size < 1:
            raise ValueError("empty vocab")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["utt_len_range"] = list(self.utt_len_range)
        d["snr_range_db"] = list(self.snr_range_db)
        d["noise_types"] = list(self.noise_types)
        if self.vocab is not None:
            d["vocab"] = [{"name": w.name, "phones": list(w.phones)} for w in self.vocab]
        return d


@dataclass(eq=False)
class Utterance:
    id: str
    speaker_id: str
    condition: str
    clean: np.ndarray
    noisy: np.ndarray
    alignment: np.ndarray
    transcript: np.ndarray
    spk_embed: np.ndarray
    noise_id: int = 0
    snr_db: float = float("inf")
    channel: int = 0

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float32)
        self.noisy = np.asarray(self.noisy, dtype=np.float32)
        self.alignment = np.asarray(self.alignment, dtype=np.int64)
        self.transcript = np.asarray(self.transcript, dtype=np.int64)
        self.spk_embed = np.asarray(self.spk_embed, dtype=np.float32)
        self.validate()

    @property
    def num_frames(self) -> int:
        return self.clean.shape[0]

    def validate(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.clean.ndim != 2 or self.clean.shape != self.noisy.shape:
            raise ValueError("clean and noisy must be matrices of identical shape")
        if self.alignment.shape != (self.clean.shape[0],):
            raise ValueError(
                f"alignment length {self.alignment.shape} does not match {self.clean.shape[0]} frames")
        if self.spk_embed.ndim != 1:
            raise ValueError("speaker embedding must be a vector")
        if not (np.all(np.isfinite(self.clean)) and np.all(np.isfinite(self.noisy))):
            raise ValueError("features must be finite")


# --------------------------------------------------------------------------
# Corruption


def snr_gain(signal_power: float, noise_power: float, target_snr_db: float) -> float:
    """Scale for the noise so that ``signal / (g**2 * noise)`` hits the target SNR."""
    if not signal_power > 0 or not noise_power > 0:
        raise ValueError("powers must be strictly positive")
    return float(np.sqrt(signal_power / (noise_power * 10.0 ** (target_snr_db / 10.0))))


@dataclass(frozen=True, eq=False)
class NoiseProfile:
    ar_coef: float
    shape: np.ndarray


def noise_profile(noise_type: int, feat_dim: int) -> NoiseProfile:
    """Fixed AR(1) coefficient and spectral shaping vector of a noise class."""
    if noise_type < 1:
        raise ValueError(f"unknown noise type {noise_type}")
    rng = np.random.default_rng([_NOISE_SEED, noise_type, feat_dim])
    ar = 0.95 * (1.0 - 1.0 / (noise_type + 1))
    tilt = np.linspace(-1.0, 1.0, feat_dim) * (0.5 if noise_type % 2 else -0.5)
    shape = np.exp(tilt + 0.3 * rng.standard_normal(feat_dim))
    return NoiseProfile(ar, shape)


def noise_trajectory(noise_type: int, num_frames: int, feat_dim: int, rng) -> np.ndarray:
    prof = noise_profile(noise_type, feat_dim)
    e = rng.standard_normal((num_frames, feat_dim))
    out = np.empty_like(e)
    out[0] = e[0]
    innov = np.sqrt(1.0 - prof.ar_coef ** 2)
    for t in range(1, num_frames):
        out[t] = prof.ar_coef * out[t - 1] + innov * e[t]
    return out * prof.shape


def corrupt(clean, noise_type: int | None, snr_db: float, channel=None, rng=None) -> np.ndarray:
    """Return ``clean + g * noise + channel`` in float64.

    ``noise_type`` None (or an infinite SNR) adds no noise. ``channel`` is an
    additive bias vector of length D, the feature-domain form of a
    convolutional channel.
    """
    x = np.asarray(clean, dtype=np.float64)
    T, D = x.shape
    out = x.copy()
    if noise_type is not None and np.isfinite(snr_db):
        if rng is None:
            raise ValueError("an rng is required to draw noise")
        noise = noise_trajectory(noise_type, T, D, rng)
        g = snr_gain(float(np.mean(x ** 2)), float(np.mean(noise ** 2)), snr_db)
        out = out + g * noise
    elif noise_type is not None and noise_type < 1:
        raise ValueError(f"unknown noise type {noise_type}")
    if channel is not None:
        bias = np.asarray(channel, dtype=np.float64)
        if bias.shape != (D,):
            raise ValueError(f"channel bias must have length {D}")
        out = out + bias
    return out


def measured_snr_db(utt: Utterance, channels: np.ndarray) -> float:
    clean = utt.clean.astype(np.float64)
    noise = utt.noisy.astype(np.float64) - clean - channels[utt.channel]
    return float(10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2)))


# --------------------------------------------------------------------------
# Generation


def make_vocab(num_words: int, num_phones: int, rng, min_len: int = 2, max_len: int = 4) -> list[Word]:
    """Random prefix-free vocabulary, so word boundaries are recoverable from phones."""
    words: list[tuple[int, ...]] = []
    for _ in range(10000 * max(num_words, 1)):
        if len(words) == num_words:
            break
        n = int(rng.integers(min_len, max_len + 1))
        pron = [int(rng.integers(num_phones))]
        while len(pron) < n:
            p = int(rng.integers(num_phones - 1))
            pron.append(p if p < pron[-1] else p + 1)  # no immediate repeats
        pron = tuple(pron)
        if any(w[:len(pron)] == pron or pron[:len(w)] == w for w in words):
            continue
        words.append(pron)
    if len(words) < num_words:
        raise ValueError("could not build a prefix-free vocab of the requested size")
    return [Word(f"w{i:02d}", p) for i, p in enumerate(words)]


@dataclass
class CorpusModel:
    """Per-corpus constants shared by every utterance."""

    vocab: list[Word]
    means: np.ndarray  # speakers x phones x D
    spk_embeds: np.ndarray  # speakers x E
    channels: np.ndarray  # channels x D, row 0 is the identity channel

    @property
    def lexicon(self) -> list[tuple[int, ...]]:
        return [w.phones for w in self.vocab]


def corpus_model(spec: CorpusSpec) -> CorpusModel:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0xC0])
    vocab = spec.vocab if spec.vocab is not None else make_vocab(spec.vocab_size, spec.num_phones, rng)
    D = spec.feat_dim
    phone_means = rng.standard_normal((spec.num_phones, D))
    spk_shift = 0.3 * rng.standard_normal((spec.num_speakers, 1, D))
    jitter = 0.1 * rng.standard_normal((spec.num_speakers, spec.num_phones, D))
    means = phone_means[None] + spk_shift + jitter
    emb = rng.standard_normal((spec.num_speakers, spec.spk_embed_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    channels = np.zeros((spec.num_channels, D))
    channels[1:] = 0.5 * rng.standard_normal((spec.num_channels - 1, D))
    return CorpusModel(vocab, means, emb, channels)


def _sample_transcript(spec: CorpusSpec, cm: CorpusModel, rng):
    lo, hi = spec.utt_len_range
    shortest = min(len(w.phones) for w in cm.vocab) * spec.min_phone_frames
    if shortest > hi:
        raise ValueError(f"utt_len_range {spec.utt_len_range} cannot fit any word")
    p_geo = 1.0 / (spec.mean_phone_frames - spec.min_phone_frames + 1.0)
    for _ in range(1000):
        target = int(rng.integers(lo, hi + 1))
        words, phones, durs = [], [], []
        total = 0
        while total < target:
            w = int(rng.integers(len(cm.vocab)))
            d = spec.min_phone_frames + rng.geometric(p_geo, size=len(cm.vocab[w].phones)) - 1
            words.append(w)
            phones.extend(cm.vocab[w].phones)
            durs.extend(int(v) for v in d)
            total += int(d.sum())
        if lo <= total <= hi:
            return words, phones, durs
    raise ValueError(f"utt_len_range {spec.utt_len_range} is infeasible for sampled transcripts")


def _smooth3(x: np.ndarray) -> np.ndarray:
    pad = np.concatenate([x[:1], x, x[-1:]])
    return (pad[:-2] + pad[1:-1] + pad[2:]) / 3.0


def generate_base(spec: CorpusSpec, cm: CorpusModel, rng):
    """Sample speaker, transcript, alignment and clean features."""
    spk = int(rng.integers(spec.num_speakers))
    words, phones, durs = _sample_transcript(spec, cm, rng)
    ali = []
    for p, d in zip(phones, durs):
        ali.append(Topology.entry_pdf(p))
        ali.extend([Topology.loop_pdf(p)] * (d - 1))
    ali = np.array(ali, dtype=np.int64)
    frame_phone = ali // 2
    clean = cm.means[spk, frame_phone] + spec.frame_noise_std * rng.standard_normal(
        (len(ali), spec.feat_dim))
    return spk, np.array(words), ali, _smooth3(clean)


def _make_utt(uid, condition, spk, words, ali, clean64, spec, cm, rng) -> Utterance:
    noise_id, snr, channel = 0, float("inf"), 0
    if condition in ("B", "D"):
        noise_id = int(spec.noise_types[int(rng.integers(len(spec.noise_types)))])
        snr = float(rng.uniform(*spec.snr_range_db))
    if condition in ("C", "D"):
        channel = int(rng.integers(1, spec.num_channels))
    clean = clean64.astype(np.float32)
    noisy = corrupt(clean.astype(np.float64), noise_id or None, snr,
                    cm.channels[channel] if channel else None, rng)
    noisy = clean if condition == "A" else noisy.astype(np.float32)
    return Utterance(uid, f"spk{spk:03d}", condition, clean, noisy, ali, words,
                     cm.spk_embeds[spk], noise_id, snr, channel)


def utterance_rng(seed: int, split: int, index: int):
    return np.random.default_rng([seed, split, index])


def generate_utterances(spec: CorpusSpec, cm: CorpusModel | None = None):
    """Yield ``(split, Utterance)``; split is "train" or "test_<cond>"."""
    cm = cm or corpus_model(spec)
    for i in range(spec.num_utts):
        rng = utterance_rng(spec.seed, 0, i)
        spk, words, ali, clean = generate_base(spec, cm, rng)
        for cond in ("A", "B"):
            yield "train", _make_utt(f"tr{i:05d}{cond}", cond, spk, words, ali, clean, spec, cm, rng)
    for c, cond in enumerate(CONDITIONS, start=1):
        for i in range(spec.num_test_per_condition):
            rng = utterance_rng(spec.seed, c, i)
            spk, words, ali, clean = generate_base(spec, cm, rng)
            yield f"test_{cond}", _make_utt(f"te{cond}{i:05d}", cond, spk, words, ali, clean,
                                            spec, cm, rng)


@dataclass
class ManifestEntry:
    id: str
    speaker: str
    condition: str
    path: str


@dataclass
class Corpus:
    spec: CorpusSpec
    model: CorpusModel
    train: list[Utterance] = field(default_factory=list)
    test: dict[str, list[Utterance]] = field(default_factory=dict)


def gen_corpus(spec: CorpusSpec, out_dir: str | os.PathLike | None = None) -> Corpus:
    """Generate the corpus and, if ``out_dir`` is given, write it to disk.

    Layout under ``out_dir``: ``train.scp``, ``test_{A,B,C,D}.scp``,
    ``corruption.tsv``, ``lexicon.txt``, ``corpus.json`` and ``utts/*.dcae``.
    Nothing is written when the corpus is empty.
    """
    import json

    cm = corpus_model(spec)
    corpus = Corpus(spec, cm, [], {f"test_{c}": [] for c in CONDITIONS})
    for split, utt in generate_utterances(spec, cm):
        (corpus.train if split == "train" else corpus.test[split]).append(utt)
    all_utts = corpus.train + [u for c in CONDITIONS for u in corpus.test[f"test_{c}"]]
    if out_dir is None or not all_utts:
        return corpus
    out = Path(out_dir)
    (out / "utts").mkdir(parents=True, exist_ok=True)
    for u in all_utts:
        save_utterance(u, out / "utts" / f"{u.id}.dcae")
    write_manifest(out / "train.scp", corpus.train)
    for c in CONDITIONS:
        write_manifest(out / f"test_{c}.scp", corpus.test[f"test_{c}"])
    with open(out / "corruption.tsv", "w", encoding="utf-8", newline="\n") as f:
        for u in all_utts:
            f.write(f"{u.id}\t{u.noise_id}\t{u.snr_db!r}\t{u.channel}\n")
    write_lexicon(out / "lexicon.txt", cm.vocab)
    np.savetxt(out / "channels.txt", cm.channels, fmt="%.17g")
    with open(out / "corpus.json", "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    log.info("wrote %d utterances to %s", len(all_utts), out)
    return corpus


# --------------------------------------------------------------------------
# File formats


def save_utterance(utt: Utterance, path) -> None:
    utt.validate()
    T, D = utt.clean.shape
    body = b"".join([
        struct.pack("<IIII", T, D, len(utt.spk_embed), len(utt.transcript)),
        utt.clean.astype("<f4").tobytes(),
        utt.noisy.astype("<f4").tobytes(),
        utt.alignment.astype("<u4").tobytes(),
        utt.spk_embed.astype("<f4").tobytes(),
        utt.transcript.astype("<u4").tobytes(),
    ])
    with open(path, "wb") as f:
        f.write(MAGIC + bytes([VERSION]) + body + struct.pack("<I", zlib.crc32(body)))


def load_utterance(path, id: str | None = None, speaker_id: str = "", condition: str = "A",
                   **meta) -> Utterance:
    """Read an utterance file. Metadata not stored in the file comes from the caller."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise CorpusFormatError(f"{path}: truncated header")
    magic, version, T, D, E, L = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    need = _HEADER.size + 4 * (2 * T * D + T + E + L) + 4
    if len(data) != need:
        raise CorpusFormatError(f"{path}: expected {need} bytes, found {len(data)}")
    body = data[5:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorpusFormatError(f"{path}: checksum mismatch")
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += 4 * count
        return arr

    clean = take("<f4", T * D).reshape(T, D).astype(np.float32)
    noisy = take("<f4", T * D).reshape(T, D).astype(np.float32)
    ali = take("<u4", T).astype(np.int64)
    emb = take("<f4", E).astype(np.float32)
    words = take("<u4", L).astype(np.int64)
    return Utterance(id if id is not None else Path(path).stem, speaker_id, condition,
                     clean, noisy, ali, words, emb, **meta)


def write_manifest(path, utts: Sequence[Utterance], subdir: str = "utts") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u in utts:
            f.write(f"{u.id}\t{u.speaker_id}\t{u.condition}\t{subdir}/{u.id}.dcae\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[2] not in CONDITIONS:
                raise CorpusFormatError(f"{path}:{n}: malformed manifest record")
            entries.append(ManifestEntry(*parts))
    return entries


def _read_corruption(path: Path) -> dict[str, dict]:
    out = {}
    if path.exists():
        with open(path, encoding="utf-8") as f:
            for line in f:
                uid, noise, snr, channel = line.rstrip("\n").split("\t")
                out[uid] = {"noise_id": int(noise), "snr_db": float(snr), "channel": int(channel)}
    return out


def load_manifest(path) -> list[Utterance]:
    """Load every utterance listed in a manifest, with its corruption metadata."""
    path = Path(path)
    meta = _read_corruption(path.parent / "corruption.tsv")
    return [load_utterance(path.parent / e.path, e.id, e.speaker, e.condition, **meta.get(e.id, {}))
            for e in read_manifest(path)]


def write_lexicon(path, vocab: Sequence[Word]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, w in enumerate(vocab):
            f.write(f"{i}\t{w.name}\t{' '.join(map(str, w.phones))}\n")


def read_lexicon(path) -> list[Word]:
    vocab = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f):
            idx, name, phones = line.rstrip("\n").split("\t")
            if int(idx) != n:
                raise CorpusFormatError(f"{path}: word ids must be consecutive")
            vocab.append(Word(name, tuple(int(p) for p in phones.split())))
    return vocab


def phone_sequence(transcript, lexicon: Sequence[Sequence[int]]) -> list[int]:
    return [p for w in transcript for p in lexicon[int(w)]]
