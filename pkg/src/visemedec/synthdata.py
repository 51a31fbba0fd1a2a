"""Synthetic ambiguous viseme channel.

Transcripts come from a tiny bigram grammar over a fixed 200-word list.
The channel maps each character to one of 12 viseme classes (a many-to-one
map, so e.g. p/b/m collapse to one class), duplicates it for a random 1-3
frame dwell, then substitutes frames with a different uniform class at
rate eps.  The result is a discrete stand-in for silent lip video: short,
noisy, and systematically ambiguous.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .canvas import TokenSpace, VocabError
from .rng import substream

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
TEXT_SPACE = TokenSpace(n_text=len(ALPHABET))
CHAR_TO_ID = {c: i for i, c in enumerate(ALPHABET)}

# Viseme grouping: space is its own class, bilabials/labiodentals/etc. are
# collapsed.  12 classes total; every alphabet character appears exactly once.
VISEME_GROUPS = (
    " ",
    "pbm",
    "fv",
    "tdn",
    "kgcq",
    "szx",
    "jy",
    "wr",
    "l",
    "ai",
    "eh",
    "ou",
)
N_VISEME_CLASSES = len(VISEME_GROUPS)
FRAME_RATE = 25.0

_CHAR_TO_VISEME = {}
for _cls, _group in enumerate(VISEME_GROUPS):
    for _ch in _group:
        _CHAR_TO_VISEME[_ch] = _cls


def viseme_map(ch: str) -> int:
    """Viseme class of one character; unknown characters are a vocab error."""
    try:
        return _CHAR_TO_VISEME[ch]
    except KeyError:
        raise VocabError(f"character {ch!r} not in channel alphabet") from None


def tokenize(text: str) -> np.ndarray:
    try:
        return np.array([CHAR_TO_ID[c] for c in text], dtype=np.int64)
    except KeyError as e:
        raise VocabError(f"character {e.args[0]!r} not in alphabet") from None


def detokenize(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(ALPHABET):
            raise VocabError(f"token id {i} outside text alphabet")
        out.append(ALPHABET[i])
    return "".join(out)


@dataclass
class VisemeClip:
    """Frame-level viseme class ids at a nominal 25 fps."""

    frames: np.ndarray

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def duration(self) -> float:
        return self.n_frames / FRAME_RATE


@dataclass
class Sample:
    sample_id: str
    text: str
    clip: VisemeClip
    k: int


@dataclass(frozen=True)
class ChannelConfig:
    noise: float = 0.05          # per-frame substitution probability
    jitter: tuple[int, int] = (1, 3)  # inclusive dwell range per character

    def __post_init__(self):
        if not 0.0 <= self.noise < 1.0:
            raise ValueError(f"noise must be in [0, 1), got {self.noise}")
        lo, hi = self.jitter
        if not (1 <= lo <= hi):
            raise ValueError(f"jitter range must satisfy 1 <= lo <= hi, got {self.jitter}")


def render_clip(text: str, channel: ChannelConfig, rng: np.random.Generator) -> VisemeClip:
    """Map text through the viseme channel: class lookup, dwell, substitution.

    Substitution replaces a frame with a uniform draw over the other
    classes, so the observable frame-change rate equals `noise` exactly.
    """
    if not text:
        raise ValueError("cannot render an empty transcript")
    lo, hi = channel.jitter
    frames: list[int] = []
    for ch in text:
        cls = viseme_map(ch)
        dwell = int(rng.integers(lo, hi + 1))
        frames.extend([cls] * dwell)
    arr = np.array(frames, dtype=np.int64)
    if channel.noise > 0.0:
        hit = rng.random(arr.shape[0]) < channel.noise
        if hit.any():
            # uniform over the C-1 other classes
            shift = rng.integers(1, N_VISEME_CLASSES, size=int(hit.sum()))
            arr[hit] = (arr[hit] + shift) % N_VISEME_CLASSES
    return VisemeClip(arr)


# ---------------------------------------------------------------------------
# grammar
# ---------------------------------------------------------------------------

WORDS = (
    "the", "of", "and", "to", "in", "is", "you", "that", "it", "he",
    "was", "for", "on", "are", "as", "with", "his", "they", "at", "be",
    "this", "have", "from", "or", "one", "had", "by", "word", "but", "not",
    "what", "all", "were", "we", "when", "your", "can", "said", "there", "use",
    "an", "each", "which", "she", "do", "how", "their", "if", "will", "up",
    "other", "about", "out", "many", "then", "them", "these", "so", "some", "her",
    "would", "make", "like", "him", "into", "time", "has", "look", "two", "more",
    "write", "go", "see", "number", "no", "way", "could", "people", "my", "than",
    "first", "water", "been", "call", "who", "oil", "its", "now", "find", "long",
    "down", "day", "did", "get", "come", "made", "may", "part", "over", "new",
    "sound", "take", "only", "little", "work", "know", "place", "year", "live", "me",
    "back", "give", "most", "very", "after", "thing", "our", "just", "name", "good",
    "man", "think", "say", "great", "where", "help", "through", "much", "before", "line",
    "right", "too", "mean", "old", "any", "same", "tell", "boy", "follow", "came",
    "want", "show", "also", "around", "form", "three", "small", "set", "put", "end",
    "does", "well", "large", "must", "big", "even", "such", "because", "turn", "here",
    "why", "ask", "went", "men", "read", "need", "land", "home", "us", "move",
    "try", "kind", "hand", "again", "change", "off", "play", "spell", "air", "away",
    "animal", "house", "point", "page", "letter", "mother", "answer", "found", "study", "still",
    "learn", "should", "world", "high", "every", "near", "add", "food", "own", "below",
)

_GRAMMAR_SEED = 7
_SUCCESSORS_PER_WORD = 20


class GenerationError(RuntimeError):
    pass


@dataclass
class Grammar:
    words: tuple[str, ...]
    successors: dict[str, tuple[str, ...]]
    min_words: int = 2
    max_words: int = 5


def default_grammar() -> Grammar:
    """Fixed bigram grammar: 20 successors per word, drawn deterministically."""
    succ: dict[str, tuple[str, ...]] = {}
    n = len(WORDS)
    for i, w in enumerate(WORDS):
        rng = substream(_GRAMMAR_SEED, "grammar-successors", i)
        others = rng.permutation(n - 1)[:_SUCCESSORS_PER_WORD]
        # indices skip the word itself so a word never follows itself
        succ[w] = tuple(WORDS[j if j < i else j + 1] for j in others)
    return Grammar(words=WORDS, successors=succ)


def sample_sentence(grammar: Grammar, rng: np.random.Generator,
                    max_chars: int, max_attempts: int = 1000) -> str:
    """Bigram chain of 2-5 words, rejection-sampled to fit max_chars."""
    for _ in range(max_attempts):
        n_words = int(rng.integers(grammar.min_words, grammar.max_words + 1))
        words = [grammar.words[rng.integers(len(grammar.words))]]
        for _ in range(n_words - 1):
            succ = grammar.successors[words[-1]]
            words.append(succ[rng.integers(len(succ))])
        sent = " ".join(words)
        if len(sent) <= max_chars:
            return sent
    raise GenerationError(f"no sentence <= {max_chars} chars after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def generate_split(tag: str, n: int, channel: ChannelConfig, seed: int,
                   max_chars: int, grammar: Grammar | None = None) -> list[Sample]:
    """n samples on the stream (seed, tag, index); splits never share streams."""
    grammar = grammar or default_grammar()
    out = []
    for i in range(n):
        rng = substream(seed, "sample", tag, i)
        text = sample_sentence(grammar, rng, max_chars)
        clip = render_clip(text, channel, rng)
        out.append(Sample(f"{tag}-{i:06d}", text, clip, len(text)))
    return out


def write_samples(samples: list[Sample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("id\ttranscript\tframes\tk\n")
        for s in samples:
            frames = " ".join(str(int(v)) for v in s.clip.frames)
            f.write(f"{s.sample_id}\t{s.text}\t{frames}\t{s.k}\n")


def load_samples(path: str) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != "id\ttranscript\tframes\tk":
            raise ValueError(f"unrecognized dataset header in {path}: {header!r}")
        for ln, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields")
            sid, text, frames_s, k_s = parts
            tokenize(text)  # validates the alphabet
            frames = np.array([int(v) for v in frames_s.split()], dtype=np.int64)
            if frames.size and (frames.min() < 0 or frames.max() >= N_VISEME_CLASSES):
                raise ValueError(f"{path}:{ln}: viseme class out of range")
            k = int(k_s)
            if k != len(text):
                raise ValueError(f"{path}:{ln}: k={k} does not match transcript length {len(text)}")
            samples.append(Sample(sid, text, VisemeClip(frames), k))
    return samples


def generate_dataset(out_dir: str, n_train: int, n_val: int, n_test: int,
                     channel: ChannelConfig, seed: int, max_chars: int) -> dict[str, str]:
    """Write train/val/test TSVs; returns split -> path."""
    os.makedirs(out_dir, exist_ok=True)
    grammar = default_grammar()
    paths = {}
    for tag, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        samples = generate_split(tag, n, channel, seed, max_chars, grammar)
        path = os.path.join(out_dir, f"{tag}.tsv")
        write_samples(samples, path)
        paths[tag] = path
    return paths
