"""Manifests, segmentation and positive/negative keyword sampling.

Training batches pair every clip with one positive keyword (a span of its
transcript) and one negative produced by one of four strategies: a random
other batch keyword, a concatenation of two batch keywords, a one-character
swap, or the nearest batch keyword by edit distance. Evaluation uses the first
three only and seeds every draw from the clip id and keyword, so evaluation
pairs are identical across runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .frontend import SAMPLE_RATE, AudioClip, load_wav, write_wav
from .text import normalize

log = logging.getLogger(__name__)

LETTERS = "abcdefghijklmnopqrstuvwxyz"
TRAIN_STRATEGIES = ("rand_neg", "concat_neg", "swap_neg", "nearest_neg")
EVAL_STRATEGIES = ("rand_neg", "concat_neg", "swap_neg")
MAX_SPAN_WORDS = 4


class SamplingError(ValueError):
    """No valid keyword can be drawn under the requested strategy."""


@dataclass(frozen=True)
class WordTime:
    word: str
    start: float
    end: float


@dataclass(frozen=True)
class ManifestEntry:
    audio: str
    words: tuple[str, ...]
    alignment: Optional[tuple[WordTime, ...]] = None
    offset: float = 0.0
    duration: Optional[float] = None

    @property
    def id(self) -> str:
        return f"{self.audio}@{self.offset:.3f}"

    @property
    def seed_key(self) -> str:
        """Like :attr:`id` but without the directory, so seeds survive moving a corpus."""
        return f"{Path(self.audio).name}@{self.offset:.3f}"

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass(frozen=True)
class ExamplePair:
    entry: ManifestEntry
    keyword: str
    label: int
    provenance: str

    @property
    def clip_id(self) -> str:
        return self.entry.id


@dataclass
class Batch:
    pairs: list[ExamplePair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def keywords(self) -> list[str]:
        return [p.keyword for p in self.pairs]

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs], dtype=np.float64)


# -- manifest I/O ------------------------------------------------------------------------

def parse_entry(obj: dict, base: Path) -> ManifestEntry:
    text = normalize(obj["text"])
    if not text:
        raise ValueError(f"empty transcript for {obj.get('audio')}")
    audio = Path(obj["audio"])
    if not audio.is_absolute():
        audio = base / audio
    alignment = None
    if obj.get("words"):
        alignment = tuple(WordTime(normalize(w["w"]), float(w["start"]), float(w["end"]))
                          for w in obj["words"])
        starts = [w.start for w in alignment]
        if any(w.end < w.start for w in alignment) or starts != sorted(starts):
            raise ValueError(f"alignment for {audio} is not monotone")
    return ManifestEntry(str(audio), tuple(text.split(" ")), alignment,
                         float(obj.get("offset", 0.0)), obj.get("duration"))


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(parse_entry(json.loads(line), path.parent))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return entries


def entry_to_json(entry: ManifestEntry, base: Optional[Path] = None) -> dict:
    audio = Path(entry.audio)
    if base is not None:
        try:
            audio = audio.relative_to(base)
        except ValueError:
            pass
    obj: dict = {"audio": str(audio), "text": entry.text}
    if entry.alignment is not None:
        obj["words"] = [{"w": w.word, "start": round(w.start, 6), "end": round(w.end, 6)}
                        for w in entry.alignment]
    if entry.offset:
        obj["offset"] = entry.offset
    if entry.duration is not None:
        obj["duration"] = entry.duration
    return obj


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(entry_to_json(e, path.parent), sort_keys=True) + "\n")


def entry_duration(entry: ManifestEntry) -> float:
    if entry.duration is not None:
        return float(entry.duration)
    return load_wav(entry.audio).duration - entry.offset


def load_entry_audio(entry: ManifestEntry) -> AudioClip:
    clip = load_wav(entry.audio)
    start = int(round(entry.offset * SAMPLE_RATE))
    stop = None if entry.duration is None else start + int(round(entry.duration * SAMPLE_RATE))
    return AudioClip(clip.samples[start:stop])


# -- segmentation --------------------------------------------------------------------------

def segment(entry: ManifestEntry, min_s: float = 0.5, max_s: float = 30.0) -> list[ManifestEntry]:
    """Drop clips shorter than ``min_s``; halve clips longer than ``max_s`` until they fit.

    With an alignment the cut goes to the inter-word boundary nearest the
    midpoint; without one, at the midpoint, with the transcript divided by
    word count.
    """
    dur = entry_duration(entry)
    if dur < min_s:
        return []
    if dur <= max_s:
        return [replace(entry, duration=dur)]
    mid = entry.offset + dur / 2
    left_words: tuple[str, ...]
    right_words: tuple[str, ...]
    left_align = right_align = None
    words = entry.alignment
    if words and len(words) >= 2:
        bounds = [(words[i].end + words[i + 1].start) / 2 for i in range(len(words) - 1)]
        i = int(np.argmin([abs(b - mid) for b in bounds]))
        cut = bounds[i]
        left_align, right_align = words[:i + 1], words[i + 1:]
        left_words = tuple(w.word for w in left_align)
        right_words = tuple(w.word for w in right_align)
    else:
        cut = mid
        k = (len(entry.words) + 1) // 2
        left_words, right_words = entry.words[:k], entry.words[k:]
    left = replace(entry, words=left_words, alignment=left_align, duration=cut - entry.offset)
    right = replace(entry, words=right_words, alignment=right_align, offset=cut,
                    duration=entry.offset + dur - cut)
    out = []
    for part in (left, right):
        if part.words:
            out.extend(segment(part, min_s, max_s))
    return out


# -- keyword helpers ------------------------------------------------------------------------

def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def is_word_span(keyword: str, words: Sequence[str]) -> bool:
    kw = keyword.split(" ")
    n = len(kw)
    return any(list(words[i:i + n]) == kw for i in range(len(words) - n + 1))


def keyword_span(entry: ManifestEntry, keyword: str) -> Optional[tuple[float, float]]:
    """Clip-relative (start, end) seconds of the first occurrence of ``keyword``."""
    if entry.alignment is None:
        return None
    kw = keyword.split(" ")
    words = [w.word for w in entry.alignment]
    for i in range(len(words) - len(kw) + 1):
        if words[i:i + len(kw)] == kw:
            return (entry.alignment[i].start - entry.offset,
                    entry.alignment[i + len(kw) - 1].end - entry.offset)
    return None


def seed_from(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- sampling strategies ----------------------------------------------------------------------

def sample_positive(entry: ManifestEntry, rng: np.random.Generator,
                    max_words: int = MAX_SPAN_WORDS) -> ExamplePair:
    n = len(entry.words)
    span = int(rng.integers(1, min(max_words, n) + 1))
    start = int(rng.integers(0, n - span + 1))
    return ExamplePair(entry, " ".join(entry.words[start:start + span]), 1, "positive")


def _candidates(target: str, batch_keywords: Iterable[str],
                transcript: Optional[Sequence[str]]) -> list[str]:
    cands = sorted({k for k in batch_keywords if k != target})
    if transcript is not None:
        cands = [k for k in cands if not is_word_span(k, transcript)]
    return cands


def neg_random(target: str, batch_keywords: Sequence[str], rng: np.random.Generator,
               transcript: Optional[Sequence[str]] = None) -> str:
    cands = _candidates(target, batch_keywords, transcript)
    if not cands:
        raise SamplingError(f"no batch keyword other than {target!r} is available")
    return cands[int(rng.integers(len(cands)))]


def _try_concat(target: str, batch_keywords: Sequence[str], rng: np.random.Generator,
                transcript: Optional[Sequence[str]], tries: int) -> Optional[str]:
    distinct = sorted(set(batch_keywords))
    if len(distinct) < 2:
        return None
    for _ in range(tries):
        i, j = rng.choice(len(distinct), size=2, replace=False)
        cand = f"{distinct[i]} {distinct[j]}"
        if cand != target and (transcript is None or not is_word_span(cand, transcript)):
            return cand
    return None


def neg_concat(target: str, batch_keywords: Sequence[str], rng: np.random.Generator,
               transcript: Optional[Sequence[str]] = None, tries: int = 10) -> str:
    cand = _try_concat(target, batch_keywords, rng, transcript, tries)
    if cand is not None:
        return cand
    log.info("concat negative for %r fell back to a random negative", target)
    return neg_random(target, batch_keywords, rng, transcript)


def neg_swap(target: str, rng: np.random.Generator,
             transcript: Optional[Sequence[str]] = None, tries: int = 20) -> str:
    positions = [i for i, c in enumerate(target) if c != " "]
    if not positions:
        raise SamplingError("keyword has no character to swap")
    for _ in range(tries):
        pos = positions[int(rng.integers(len(positions)))]
        choices = [c for c in LETTERS if c != target[pos]]
        cand = target[:pos] + choices[int(rng.integers(len(choices)))] + target[pos + 1:]
        if transcript is None or not is_word_span(cand, transcript):
            return cand
    raise SamplingError(f"every swap of {target!r} occurs in the transcript")


def neg_nearest(target: str, batch_keywords: Sequence[str],
                transcript: Optional[Sequence[str]] = None) -> str:
    cands = _candidates(target, batch_keywords, transcript)
    if not cands:
        raise SamplingError(f"no batch keyword other than {target!r} is available")
    return min(cands, key=lambda k: (levenshtein(target, k), k))


def draw_negative(strategy: str, target: str, batch_keywords: Sequence[str],
                  rng: np.random.Generator, transcript: Sequence[str]) -> tuple[str, str]:
    """Run one strategy; if it cannot produce a valid negative, fall back to a swap."""
    try:
        if strategy == "rand_neg":
            return neg_random(target, batch_keywords, rng, transcript), strategy
        if strategy == "concat_neg":
            kw = _try_concat(target, batch_keywords, rng, transcript, 10)
            if kw is not None:
                return kw, strategy
            log.info("concat negative for %r fell back to a random negative", target)
            return neg_random(target, batch_keywords, rng, transcript), "rand_neg"
        if strategy == "nearest_neg":
            return neg_nearest(target, batch_keywords, transcript), strategy
        if strategy == "swap_neg":
            return neg_swap(target, rng, transcript), strategy
    except SamplingError:
        if strategy == "swap_neg":
            raise
        return neg_swap(target, rng, transcript), "swap_neg"
    raise ValueError(f"unknown strategy {strategy!r}")


def build_batch(entries: Sequence[ManifestEntry], E: int, mode: str = "train",
                rng: Optional[np.random.Generator] = None,
                max_words: int = MAX_SPAN_WORDS) -> Batch:
    """Pair the first ``E // 2`` entries each with one positive and one negative keyword.

    ``train`` draws positives and negative strategies from ``rng``; ``eval``
    ignores ``rng`` and seeds each draw from the clip id (and keyword).
    ``max_words`` bounds the length of positive spans.
    """
    if E < 2:
        raise ValueError("batch size must be at least 2")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    chosen = list(entries[:E // 2])
    if not chosen:
        raise ValueError("no entries to build a batch from")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng")
    positives = []
    for e in chosen:
        r = rng if mode == "train" else np.random.default_rng(seed_from("pos", e.seed_key))
        positives.append(sample_positive(e, r, max_words))
    batch_keywords = [p.keyword for p in positives]
    strategies = TRAIN_STRATEGIES if mode == "train" else EVAL_STRATEGIES
    pairs: list[ExamplePair] = []
    for pos in positives:
        r = rng if mode == "train" else np.random.default_rng(seed_from("neg", pos.entry.seed_key, pos.keyword))
        strategy = strategies[int(r.integers(len(strategies)))]
        kw, prov = draw_negative(strategy, pos.keyword, batch_keywords, r, pos.entry.words)
        pairs.append(pos)
        pairs.append(ExamplePair(pos.entry, kw, 0, prov))
    return Batch(pairs)


def iter_batches(entries: Sequence[ManifestEntry], E: int, mode: str,
                 rng: Optional[np.random.Generator] = None,
                 max_words: int = MAX_SPAN_WORDS) -> list[Batch]:
    """Chunk a manifest into batches. Train mode shuffles; eval keeps manifest order."""
    per = max(1, E // 2)
    order = np.arange(len(entries)) if mode == "eval" else rng.permutation(len(entries))
    batches = []
    for start in range(0, len(order), per):
        chunk = [entries[i] for i in order[start:start + per]]
        if mode == "train" and len(chunk) < 2:
            continue
        batches.append(build_batch(chunk, 2 * len(chunk), mode, rng, max_words))
    return batches


def batch_rows(batch: Batch) -> list[str]:
    return [f"{p.clip_id},{p.keyword},{p.label},{p.provenance}" for p in batch.pairs]


# -- synthetic tone-word corpus ------------------------------------------------------------------

# Each letter is a pure tone; a word is its letters played back to back. The
# corpus letters get widely spaced tones, the rest sit in between.
CORPUS_LETTERS = "aeiklnorst"
_OTHER_LETTERS = "".join(c for c in LETTERS if c not in CORPUS_LETTERS)
LETTER_FREQS = {
    **{c: float(f) for c, f in zip(CORPUS_LETTERS, np.geomspace(300.0, 5000.0, len(CORPUS_LETTERS)))},
    **{c: float(f) for c, f in zip(_OTHER_LETTERS, np.geomspace(350.0, 5600.0, len(_OTHER_LETTERS)))},
}


@dataclass(frozen=True)
class SynthSpec:
    letter_s: float = 0.09
    gap_s: tuple[float, float] = (0.12, 0.22)
    edge_s: tuple[float, float] = (0.1, 0.3)
    words_per_clip: tuple[int, int] = (2, 4)
    floor_snr_db: float = 35.0


def make_vocabulary(n_words: int, seed: int = 0, letters: str = CORPUS_LETTERS,
                    length: tuple[int, int] = (3, 4)) -> list[str]:
    """Distinct pseudo-words over ``letters``, drawn deterministically."""
    rng = np.random.default_rng(seed)
    vocab: list[str] = []
    while len(vocab) < n_words:
        n = int(rng.integers(length[0], length[1] + 1))
        w = "".join(letters[int(i)] for i in rng.integers(0, len(letters), n))
        if w not in vocab and all(levenshtein(w, v) >= 2 for v in vocab):
            vocab.append(w)
    return vocab


def split_vocabulary(n_train: int, n_held: int, seed: int = 0,
                     letters: str = CORPUS_LETTERS) -> tuple[list[str], list[str]]:
    """Train and held-out word lists where every held-out letter occurs in some training word.

    Held-out keywords are new words, not new sounds: each letter tone is heard
    during training. Vocabularies are redrawn from derived seeds until that holds.
    """
    for attempt in range(1000):
        vocab = make_vocabulary(n_train + n_held, seed_from("split", seed, attempt), letters)
        train, held = vocab[:n_train], vocab[n_train:]
        seen = set("".join(train))
        if all(set(w) <= seen for w in held):
            return train, held
    raise SamplingError(f"no covering split for {n_train}+{n_held} words over {letters!r}")


def render_word(word: str, rng: np.random.Generator, spec: SynthSpec = SynthSpec()) -> np.ndarray:
    n = int(round(spec.letter_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    env = np.hanning(n) ** 0.5
    parts = []
    for c in word:
        f = LETTER_FREQS.get(c, 1000.0) * (1.0 + rng.uniform(-0.01, 0.01))
        parts.append(env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)))
    return np.concatenate(parts)


def synth_clip(words: Sequence[str], rng: np.random.Generator,
               spec: SynthSpec = SynthSpec()) -> tuple[AudioClip, list[WordTime]]:
    pieces = [np.zeros(int(rng.uniform(*spec.edge_s) * SAMPLE_RATE))]
    cursor = len(pieces[0])
    times = []
    for i, w in enumerate(words):
        if i:
            gap = np.zeros(int(rng.uniform(*spec.gap_s) * SAMPLE_RATE))
            pieces.append(gap)
            cursor += len(gap)
        audio = render_word(w, rng, spec) * rng.uniform(0.3, 0.6)
        times.append(WordTime(w, cursor / SAMPLE_RATE, (cursor + len(audio)) / SAMPLE_RATE))
        pieces.append(audio)
        cursor += len(audio)
    pieces.append(np.zeros(int(rng.uniform(*spec.edge_s) * SAMPLE_RATE)))
    x = np.concatenate(pieces)
    p = np.mean(x ** 2)
    x = x + rng.standard_normal(len(x)) * np.sqrt(p / 10 ** (spec.floor_snr_db / 10))
    return AudioClip(np.clip(x, -1.0, 1.0)), times


def synth_corpus(out_dir, n_clips: int, vocabulary: Sequence[str], seed: int = 0,
                 name: str = "manifest.jsonl", spec: SynthSpec = SynthSpec()) -> list[ManifestEntry]:
    """Write ``n_clips`` tone-word WAVs plus a JSONL manifest with exact word times."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    stem = Path(name).stem
    for i in range(n_clips):
        k = int(rng.integers(spec.words_per_clip[0], spec.words_per_clip[1] + 1))
        words = [vocabulary[int(j)] for j in rng.integers(0, len(vocabulary), k)]
        clip, times = synth_clip(words, rng, spec)
        wav = out / "wav" / f"{stem}_{i:04d}.wav"
        write_wav(wav, clip)
        entries.append(ManifestEntry(str(wav), tuple(words), tuple(times), 0.0,
                                     round(clip.duration, 6)))
    write_manifest(out / name, entries)
    return load_manifest(out / name)


def synth_babble_sources(seed: int, n_sources: int = 8) -> list[AudioClip]:
    rng = np.random.default_rng(seed)
    vocab = make_vocabulary(16, seed, LETTERS)
    return [synth_clip([vocab[int(j)] for j in rng.integers(0, len(vocab), 4)], rng)[0]
            for _ in range(n_sources)]
