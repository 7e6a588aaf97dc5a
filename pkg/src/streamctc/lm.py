"""Character-level n-gram language model for shallow fusion.

Additive-k estimates over the declared vocabulary with backoff to the
longest stored shorter context when a context was never seen in training
(all context tables, for every order up to n-1, are materialized at
training time). Sequence ends are modeled separately per context as an
add-k Bernoulli "stop" probability, so token distributions stay
normalized over the vocabulary itself.

Models serialize to a line-oriented text format; log probabilities are
written with 17 significant digits so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .vocab import Vocabulary

START = "<s>"
UNK = "<unk>"

FORMAT_VERSION = 1


class LmFormatError(ValueError):
    """Raised with a line number when a model file cannot be parsed."""


@dataclass(frozen=True)
class NgramModel:
    """Immutable n-gram tables: context tuple -> token -> log-prob, plus a
    per-context log-probability of the sequence ending there."""

    order: int
    vocab: tuple
    smoothing: float
    tokens: dict
    ends: dict

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if () not in self.tokens or () not in self.ends:
            raise ValueError("model must store the empty context")


def _as_tokens(sequence) -> list:
    return [str(t) for t in sequence]


def train_ngram(corpus, order: int, smoothing: float, vocab=None) -> NgramModel:
    """Estimate an order-n model from an iterable of token sequences.

    Sequences may be strings (characters as tokens) or iterables of
    string tokens. When `vocab` is omitted it is the sorted set of corpus
    tokens. Tokens must be non-empty, whitespace-free, and distinct from
    the reserved symbols.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if smoothing <= 0:
        raise ValueError("smoothing must be > 0")
    sequences = [_as_tokens(seq) for seq in corpus]
    if not sequences:
        raise ValueError("corpus is empty")

    if vocab is None:
        vocab = sorted({t for seq in sequences for t in seq})
    vocab = tuple(str(t) for t in vocab)
    if not vocab:
        raise ValueError("vocabulary is empty")
    seen = set()
    for t in vocab:
        if not t or any(c.isspace() for c in t):
            raise ValueError(f"bad vocabulary token {t!r}")
        if t in (START, UNK):
            raise ValueError(f"{t!r} is reserved")
        if t in seen:
            raise ValueError(f"duplicate vocabulary token {t!r}")
        seen.add(t)
    known = set(vocab)

    counts = {}  # context -> token -> count
    eos = {}  # context -> end-of-sequence count
    for seq in sequences:
        toks = [t if t in known else UNK for t in seq]
        padded = [START] * (order - 1) + toks
        for i in range(order - 1, len(padded)):
            tok = padded[i]
            for length in range(order):
                ctx = tuple(padded[i - length : i])
                counts.setdefault(ctx, {}).setdefault(tok, 0)
                counts[ctx][tok] += 1
        for length in range(order):
            ctx = tuple(padded[len(padded) - length :])
            counts.setdefault(ctx, {})
            eos[ctx] = eos.get(ctx, 0) + 1

    k = float(smoothing)
    v = len(vocab)
    tokens = {}
    ends = {}
    for ctx, per_tok in counts.items():
        emitted = sum(per_tok.values())
        denom = emitted + k * v
        table = {t: math.log((per_tok.get(t, 0) + k) / denom) for t in vocab}
        table[UNK] = math.log(k / denom)
        tokens[ctx] = table
        stops = eos.get(ctx, 0)
        ends[ctx] = math.log((stops + k) / (emitted + stops + 2.0 * k))
    return NgramModel(
        order=order, vocab=vocab, smoothing=k, tokens=tokens, ends=ends
    )


def _window(model: NgramModel, context) -> tuple:
    known = model.tokens[()]
    ctx = [t if t in known or t == START else UNK for t in context]
    return tuple(ctx[max(0, len(ctx) - (model.order - 1)) :])


def logp(model: NgramModel, token: str, context) -> float:
    """Conditional log-prob of one token after `context` (longest stored
    suffix wins; out-of-vocabulary tokens score as the unknown symbol)."""
    token = str(token)
    if token not in model.tokens[()]:
        token = UNK
    ctx = _window(model, context)
    while ctx not in model.tokens:
        ctx = ctx[1:]
    return model.tokens[ctx][token]


def end_logp(model: NgramModel, context) -> float:
    """Log-prob that the sequence stops after `context`."""
    ctx = _window(model, context)
    while ctx not in model.ends:
        ctx = ctx[1:]
    return model.ends[ctx]


def score(model: NgramModel, sequence, boundaries: bool = True) -> float:
    """Total log-prob of a token sequence.

    With `boundaries` (the default) the context starts at sentence-start
    padding and the per-context stop probability of the final context is
    added, so the empty sequence scores log p(end | start context). Without
    boundaries the result is the bare chain-rule sum of the per-token
    conditionals, which is additive over concatenation.
    """
    toks = _as_tokens(sequence)
    history = [START] * (model.order - 1) if boundaries else []
    total = 0.0
    for tok in toks:
        total += logp(model, tok, history)
        history.append(tok)
    if boundaries:
        total += end_logp(model, history)
    return total


class FusionLm:
    """Adapter from decoder token ids to the character model: translates
    ids through the recognizer vocabulary and pads utterance starts."""

    def __init__(self, model: NgramModel, vocabulary: Vocabulary):
        self.model = model
        self.vocabulary = vocabulary

    def logp(self, token_id: int, context_ids) -> float:
        chars = [self.vocabulary.char_of(i) for i in context_ids]
        pad = self.model.order - 1 - len(chars)
        if pad > 0:
            chars = [START] * pad + chars
        return logp(self.model, self.vocabulary.char_of(token_id), chars)


def _ctx_field(ctx: tuple) -> str:
    return " ".join(ctx)


def _parse_ctx(field: str) -> tuple:
    return tuple(field.split(" ")) if field else ()


def save_lm(model: NgramModel, path):
    """Write the line-oriented text format (17 significant digits)."""
    lines = [
        f"ngram {FORMAT_VERSION}",
        f"order {model.order}",
        f"smoothing {model.smoothing:.17g}",
        "vocab " + " ".join(model.vocab),
    ]
    token_lines = []
    for ctx in sorted(model.tokens):
        table = model.tokens[ctx]
        for tok in sorted(table):
            token_lines.append(f"{_ctx_field(ctx)}\t{tok}\t{table[tok]:.17g}")
    end_lines = [
        f"{_ctx_field(ctx)}\t{model.ends[ctx]:.17g}" for ctx in sorted(model.ends)
    ]
    lines.append(f"tokens {len(token_lines)}")
    lines.extend(token_lines)
    lines.append(f"ends {len(end_lines)}")
    lines.extend(end_lines)
    lines.append(f"end {len(token_lines) + len(end_lines)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _expect(lines, i: int, key: str) -> str:
    if i >= len(lines):
        raise LmFormatError(f"line {i + 1}: file ends before '{key}'")
    line = lines[i]
    if not line.startswith(key + " "):
        raise LmFormatError(f"line {i + 1}: expected '{key} ...', got {line!r}")
    return line[len(key) + 1 :]


def _int_field(value: str, i: int, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise LmFormatError(f"line {i + 1}: bad {key} count {value!r}") from None


def load_lm(path) -> NgramModel:
    """Parse a saved model; errors carry the offending line number."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    version = _expect(lines, 0, "ngram")
    if version != str(FORMAT_VERSION):
        raise LmFormatError(f"line 1: unsupported format version {version!r}")
    try:
        order = int(_expect(lines, 1, "order"))
    except ValueError:
        raise LmFormatError("line 2: bad order") from None
    try:
        smoothing = float(_expect(lines, 2, "smoothing"))
    except ValueError:
        raise LmFormatError("line 3: bad smoothing constant") from None
    vocab = tuple(t for t in _expect(lines, 3, "vocab").split(" ") if t)
    if not vocab:
        raise LmFormatError("line 4: empty vocabulary")

    n_tokens = _int_field(_expect(lines, 4, "tokens"), 4, "token")
    tokens = {}
    pos = 5
    for j in range(n_tokens):
        i = pos + j
        if i >= len(lines):
            raise LmFormatError(f"line {i + 1}: truncated token section")
        parts = lines[i].split("\t")
        if len(parts) != 3:
            raise LmFormatError(f"line {i + 1}: expected context\\ttoken\\tlogprob")
        ctx = _parse_ctx(parts[0])
        try:
            value = float(parts[2])
        except ValueError:
            raise LmFormatError(f"line {i + 1}: bad log-prob {parts[2]!r}") from None
        tokens.setdefault(ctx, {})[parts[1]] = value
    pos += n_tokens

    n_ends = _int_field(_expect(lines, pos, "ends"), pos, "end")
    ends = {}
    pos += 1
    for j in range(n_ends):
        i = pos + j
        if i >= len(lines):
            raise LmFormatError(f"line {i + 1}: truncated end section")
        parts = lines[i].split("\t")
        if len(parts) != 2:
            raise LmFormatError(f"line {i + 1}: expected context\\tlogprob")
        try:
            ends[_parse_ctx(parts[0])] = float(parts[1])
        except ValueError:
            raise LmFormatError(f"line {i + 1}: bad log-prob {parts[1]!r}") from None
    pos += n_ends

    footer = _int_field(_expect(lines, pos, "end"), pos, "footer")
    if footer != n_tokens + n_ends:
        raise LmFormatError(f"line {pos + 1}: footer count mismatch")
    if pos + 1 != len(lines):
        raise LmFormatError(f"line {pos + 2}: unexpected content after footer")

    try:
        return NgramModel(
            order=order, vocab=vocab, smoothing=smoothing, tokens=tokens, ends=ends
        )
    except ValueError as exc:
        raise LmFormatError(f"line {len(lines)}: {exc}") from None
