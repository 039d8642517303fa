"""Language side: vocabulary, toy causal decoder, token aggregation,
greedy generation, teacher-forced loss and answer parsing.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ParseError, TokenizeError, WidthMismatch
from .projectors import SPATIAL, TEMPORAL, TEXT, TokenBlock, TransformerBlock, init_weights
from .prompting import CLASSIFICATION, LEVELS, REGRESSION, TEMPORAL_MARKER, grammar_text

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
BASE_SPECIALS = (PAD, BOS, EOS, UNK, TEMPORAL_MARKER)

# special tokens, words, single digits, single punctuation marks
TOKEN_RE = re.compile(r"<[a-z]+(?:-\d+)?>|[A-Za-z]+|\d|[^\sA-Za-z\d]")
_NO_SPACE_BEFORE = set(".,?!;:")


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    for tok in tokens:
        if out:
            prev = out[-1]
            glue = tok in _NO_SPACE_BEFORE or (
                tok.isdigit() and (prev.isdigit() or prev == "-" or (prev == "." and len(out) > 1 and out[-2].isdigit()))
            )
            if not glue:
                out.append(" ")
        out.append(tok)
    return "".join(out)


class Vocabulary:
    """Ordered token set with a token <-> id bijection.

    Ids ``0..`` are the specials (pad, begin, end, unknown, temporal marker,
    then ``<image-1>`` .. ``<image-max_images>``), followed by content tokens.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        missing = [s for s in BASE_SPECIALS if s not in self.ids]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.specials = {t for t in self.tokens if t.startswith("<") and t.endswith(">") and len(t) > 2}

    @classmethod
    def build(cls, max_images: int = 256, extra_text: Sequence[str] = ()) -> "Vocabulary":
        specials = list(BASE_SPECIALS) + [f"<image-{i}>" for i in range(1, max_images + 1)]
        content: set[str] = set("0123456789") | set(".,?!;:-")
        for text in list(grammar_text()) + list(extra_text):
            content.update(t for t in tokenize(text) if not (t.startswith("<") and t.endswith(">") and len(t) > 2))
        return cls(specials + sorted(content))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.ids

    @property
    def pad_id(self):
        return self.ids[PAD]

    @property
    def bos_id(self):
        return self.ids[BOS]

    @property
    def eos_id(self):
        return self.ids[EOS]

    @property
    def unk_id(self):
        return self.ids[UNK]

    def is_placeholder(self, token_id: int) -> bool:
        tok = self.tokens[token_id]
        return tok == TEMPORAL_MARKER or tok.startswith("<image-")

    def encode(self, text: str, strict: bool = True) -> list[int]:
        out = []
        for tok in tokenize(text):
            if tok in self.ids:
                out.append(self.ids[tok])
            elif strict:
                raise TokenizeError(f"token {tok!r} is not in the vocabulary")
            else:
                out.append(self.unk_id)
        return out

    def decode(self, ids: Sequence[int]) -> str:
        skip = {self.pad_id, self.bos_id, self.eos_id}
        return detokenize([self.tokens[i] for i in ids if i not in skip])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


class DecoderBackend(Protocol):
    """What the aggregation / generation / loss functions need from a decoder."""

    vocab: Vocabulary
    d_model: int

    def embed_tokens(self, ids) -> torch.Tensor: ...

    def __call__(self, inputs_embeds: torch.Tensor) -> torch.Tensor: ...


class ToyDecoder(nn.Module):
    """Small causal transformer language model trained from scratch.

    Positions enter through rotary attention only, which keeps the answer's
    behaviour independent of how long the preceding question was.
    """

    def __init__(self, vocab: Vocabulary, d_model: int = 64, n_layers: int = 2, n_heads: int = 4):
        super().__init__()
        self.vocab = vocab
        self.d_model = d_model
        self.embed = nn.Embedding(len(vocab), d_model)
        self.layers = nn.ModuleList(TransformerBlock(d_model, n_heads, causal=True, rotary=True) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, len(vocab))
        init_weights(self)
        nn.init.normal_(self.embed.weight, std=d_model ** -0.5)

    def embed_tokens(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long, device=self.embed.weight.device)
        return self.embed(ids)

    def forward(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        """``(B, L, d_model)`` -> ``(B, L, |vocab|)`` next-token logits."""
        x = inputs_embeds
        for layer in self.layers:
            x = layer(x)
        return self.head(self.norm(x))


@dataclass
class AggregatedSequence:
    """Spatial, temporal and text tokens concatenated along the length axis."""

    tokens: torch.Tensor
    segment_map: list[str]
    placeholder_positions: list[int] = field(default_factory=list)

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class GenerationOutput:
    token_ids: list[int]
    text: str
    per_step_logprobs: list[float]


@dataclass
class QualityPrediction:
    score: float | None = None
    level: str | None = None
    raw_text: str = ""


def embed_text(prompt: str, vocab: Vocabulary, model: DecoderBackend, strict: bool = True) -> TokenBlock:
    ids = vocab.encode(prompt, strict=strict)
    if not ids:
        raise TokenizeError("prompt produced no tokens")
    return TokenBlock(model.embed_tokens(ids), TEXT, token_ids=ids)


def aggregate_tokens(z_sp: TokenBlock, z_tp: TokenBlock | None, z_text: TokenBlock,
                     vocab: Vocabulary | None = None) -> AggregatedSequence:
    """Concatenate spatial, temporal (optional) and text blocks in that order.

    Placeholder tokens stay in the text block; their positions in the
    aggregated sequence are recorded when ``vocab`` is given.
    """
    blocks = [b for b in (z_sp, z_tp, z_text) if b is not None and len(b) > 0]
    widths = {b.width for b in blocks}
    if len(widths) > 1:
        raise WidthMismatch(f"token blocks have different widths: {sorted(widths)}")
    segment_map: list[str] = []
    for b, tag in ((z_sp, SPATIAL), (z_tp, TEMPORAL), (z_text, TEXT)):
        if b is not None:
            segment_map.extend([tag] * len(b))
    placeholders = []
    if vocab is not None and z_text.token_ids is not None:
        offset = len(segment_map) - len(z_text)
        placeholders = [offset + i for i, t in enumerate(z_text.token_ids) if vocab.is_placeholder(t)]
    return AggregatedSequence(torch.cat([b.tokens for b in blocks], dim=0), segment_map, placeholders)


def batch_sequence_loss(prefixes: Sequence[torch.Tensor], targets: Sequence[Sequence[int]],
                        model: DecoderBackend) -> torch.Tensor:
    """Per-sample mean target NLL under teacher forcing, shape ``(B,)``.

    Each input is ``prefix + [begin] + target[:-1]``, right-padded to the
    longest sample; causal attention keeps padding invisible.
    """
    bos = model.vocab.bos_id
    rows, spans = [], []
    for prefix, target in zip(prefixes, targets):
        if len(target) == 0:
            raise ValueError("target must be nonempty")
        shifted = model.embed_tokens([bos] + list(target[:-1]))
        rows.append(torch.cat([prefix, shifted.to(prefix.dtype)], dim=0))
        spans.append((prefix.shape[0], len(target)))
    length = max(r.shape[0] for r in rows)
    batch = rows[0].new_zeros((len(rows), length, rows[0].shape[1]))
    for i, r in enumerate(rows):
        batch[i, : r.shape[0]] = r
    logp = F.log_softmax(model(batch), dim=-1)
    losses = []
    for i, ((start, n), target) in enumerate(zip(spans, targets)):
        tgt = torch.as_tensor(list(target), dtype=torch.long, device=logp.device)
        losses.append(-logp[i, start : start + n].gather(1, tgt[:, None]).mean())
    return torch.stack(losses)


def sequence_loss(seq: AggregatedSequence, target_ids: Sequence[int], model: DecoderBackend) -> torch.Tensor:
    """Mean cross-entropy of ``target_ids`` given the aggregated context."""
    if len(target_ids) == 0:
        raise ValueError("target must be nonempty")
    return batch_sequence_loss([seq.tokens], [target_ids], model)[0]


@torch.no_grad()
def generate(seq: AggregatedSequence | torch.Tensor, model: DecoderBackend, max_len: int = 24) -> GenerationOutput:
    """Greedy decoding from the aggregated context until end token or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    context = seq.tokens if isinstance(seq, AggregatedSequence) else seq
    vocab = model.vocab
    x = torch.cat([context, model.embed_tokens([vocab.bos_id]).to(context.dtype)], dim=0)
    ids: list[int] = []
    logprobs: list[float] = []
    for _ in range(max_len):
        logp = F.log_softmax(model(x[None])[0, -1], dim=-1)
        nxt = int(torch.argmax(logp))
        ids.append(nxt)
        logprobs.append(float(logp[nxt]))
        if nxt == vocab.eos_id:
            break
        x = torch.cat([x, model.embed_tokens([nxt]).to(x.dtype)], dim=0)
    return GenerationOutput(ids, vocab.decode(ids), logprobs)


_NUMBER = r"-?\d+(?:\.\d+)?"
_SCORE_FRAME = re.compile(r"quality score of the video is\s*(" + _NUMBER + ")", re.IGNORECASE)
_ANY_NUMBER = re.compile(_NUMBER)
_LEVEL = re.compile(r"\b(" + "|".join(LEVELS) + r")\b", re.IGNORECASE)


def parse_answer(text: str, task: str) -> QualityPrediction:
    """Invert the answer sentence frames.

    Regression prefers the number inside the score frame and falls back to
    the first number in the text; classification takes the first level word.
    """
    if task == REGRESSION:
        m = _SCORE_FRAME.search(text) or _ANY_NUMBER.search(text)
        if m is None:
            raise ParseError(f"no score in {text!r}")
        score = float(m.group(1) if m.re is _SCORE_FRAME else m.group(0))
        if not np.isfinite(score):
            raise ParseError(f"non-finite score in {text!r}")
        return QualityPrediction(score=score, raw_text=text)
    if task == CLASSIFICATION:
        m = _LEVEL.search(text)
        if m is None:
            raise ParseError(f"no quality level in {text!r}")
        return QualityPrediction(level=m.group(1).lower(), raw_text=text)
    raise ValueError(f"unknown task {task!r}")
