"""Byte-level tokenization and synthetic toy corpora.

Vocabulary is the 256 byte values plus BOS, EOS, and PAD.  Corpora are
sized for minutes-long CPU smoke training: copying, modular addition,
and character modelling on a bundled public-domain passage.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

# Lewis Carroll, "Alice's Adventures in Wonderland" (1865), public domain.
BUNDLED_TEXT = (
    "Alice was beginning to get very tired of sitting by her sister on the "
    "bank, and of having nothing to do: once or twice she had peeped into "
    "the book her sister was reading, but it had no pictures or "
    "conversations in it, 'and what is the use of a book,' thought Alice "
    "'without pictures or conversations?' So she was considering in her own "
    "mind (as well as she could, for the hot day made her feel very sleepy "
    "and stupid), whether the pleasure of making a daisy-chain would be "
    "worth the trouble of getting up and picking the daisies, when suddenly "
    "a White Rabbit with pink eyes ran close by her. There was nothing so "
    "very remarkable in that; nor did Alice think it so very much out of "
    "the way to hear the Rabbit say to itself, 'Oh dear! Oh dear! I shall "
    "be late!' (when she thought it over afterwards, it occurred to her "
    "that she ought to have wondered at this, but at the time it all seemed "
    "quite natural); but when the Rabbit actually took a watch out of its "
    "waistcoat-pocket, and looked at it, and then hurried on, Alice started "
    "to her feet, for it flashed across her mind that she had never before "
    "seen a rabbit with either a waistcoat-pocket, or a watch to take out "
    "of it, and burning with curiosity, she ran across the field after it, "
    "and fortunately was just in time to see it pop down a large "
    "rabbit-hole under the hedge."
)


def encode(text, add_bos: bool = True, add_eos: bool = True) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = ([BOS] if add_bos else []) + list(raw) + ([EOS] if add_eos else [])
    return np.asarray(ids, dtype=np.int64)


def decode(token_ids) -> str:
    body = bytes(int(i) for i in np.asarray(token_ids) if int(i) < 256)
    return body.decode("utf-8", errors="replace")


def pad_to(ids: np.ndarray, length: int) -> np.ndarray:
    if len(ids) > length:
        raise ConfigError(f"sequence of {len(ids)} does not fit in {length}")
    out = np.full(length, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def copy_corpus(seed: int, n_samples: int, payload_len: int = 8,
                alphabet: bytes = b"abcdefgh") -> np.ndarray:
    """BOS payload '|' payload EOS; the model learns to echo after the bar."""
    g = np.random.default_rng(seed)
    rows = []
    for _ in range(n_samples):
        payload = bytes(alphabet[i] for i in g.integers(0, len(alphabet), payload_len))
        rows.append(encode(payload + b"|" + payload))
    return np.stack(rows)


def addition_corpus(seed: int, n_samples: int, modulus: int = 97) -> np.ndarray:
    """Fixed-width 'aa+bb=cc' strings with c = (a + b) mod modulus."""
    if not 2 <= modulus <= 100:
        raise ConfigError("modulus must fit two digits")
    g = np.random.default_rng(seed)
    width = len(str(modulus - 1))
    rows = []
    for _ in range(n_samples):
        a, b = int(g.integers(modulus)), int(g.integers(modulus))
        c = (a + b) % modulus
        s = f"{a:0{width}d}+{b:0{width}d}={c:0{width}d}"
        rows.append(encode(s))
    return np.stack(rows)


def char_corpus(seed: int, n_samples: int, seq_len: int = 64,
                text: str = BUNDLED_TEXT) -> np.ndarray:
    """Sliding character windows over a text, without BOS/EOS framing."""
    raw = text.encode("utf-8")
    if len(raw) <= seq_len:
        raise ConfigError("text shorter than the window")
    g = np.random.default_rng(seed)
    starts = g.integers(0, len(raw) - seq_len, n_samples)
    return np.stack([encode(raw[s: s + seq_len], add_bos=False, add_eos=False)
                     for s in starts])


CORPORA = {"copy": copy_corpus, "addition": addition_corpus, "chars": char_corpus}


def make_corpus(task: str, seed: int, n_samples: int, **kwargs) -> np.ndarray:
    if task not in CORPORA:
        raise ConfigError(f"unknown task {task!r}; have {sorted(CORPORA)}")
    return CORPORA[task](seed, n_samples, **kwargs)


def batches(corpus: np.ndarray, batch_size: int, n_steps: int, seed: int = 0):
    """Yield n_steps random [batch_size, T] batches with replacement."""
    g = np.random.default_rng(seed)
    for _ in range(n_steps):
        idx = g.integers(0, len(corpus), batch_size)
        yield corpus[idx]
