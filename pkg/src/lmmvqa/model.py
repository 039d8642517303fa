"""Full assessment model: projectors + decoder over pre-encoded video features."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .decoder import (
    AggregatedSequence,
    GenerationOutput,
    ToyDecoder,
    Vocabulary,
    aggregate_tokens,
    batch_sequence_loss,
    embed_text,
    generate,
)
from .encoders import EncodedVideo
from .exceptions import TokenizeError
from .projectors import SPATIAL, TEMPORAL, TEXT, SpatialProjector, TemporalProjector, TokenBlock


class VQAModel(nn.Module):
    def __init__(self, vocab: Vocabulary, spatial_width: int, temporal_width: int, d_model: int = 64,
                 n_temporal_tokens: int = 64, spatial_projector: str = "vit", use_temporal: bool = True,
                 decoder_layers: int = 2, decoder_heads: int = 4, projector_heads: int = 4):
        super().__init__()
        self.architecture = dict(
            spatial_width=spatial_width,
            temporal_width=temporal_width,
            d_model=d_model,
            n_temporal_tokens=n_temporal_tokens,
            spatial_projector=spatial_projector,
            use_temporal=use_temporal,
            decoder_layers=decoder_layers,
            decoder_heads=decoder_heads,
            projector_heads=projector_heads,
        )
        self.vocab = vocab
        self.spatial_projector = SpatialProjector(spatial_width, d_model, spatial_projector, projector_heads)
        self.temporal_projector = (
            TemporalProjector(temporal_width, d_model, n_temporal_tokens) if use_temporal else None
        )
        self.decoder = ToyDecoder(vocab, d_model, decoder_layers, decoder_heads)

    @property
    def dtype(self):
        return self.decoder.embed.weight.dtype

    def projector_modules(self) -> list[nn.Module]:
        return [m for m in (self.spatial_projector, self.temporal_projector) if m is not None]

    def _visual_blocks(self, videos: Sequence[EncodedVideo]) -> list[tuple[TokenBlock, TokenBlock | None]]:
        counts = [v.n_chunks for v in videos]
        sp = torch.cat([torch.as_tensor(v.spatial.data, dtype=self.dtype) for v in videos])
        sp_tokens = self.spatial_projector(sp).split(counts)
        if self.temporal_projector is None:
            return [(TokenBlock(s.reshape(-1, s.shape[-1]), SPATIAL), None) for s in sp_tokens]
        tp = torch.cat([torch.as_tensor(v.temporal.data, dtype=self.dtype) for v in videos])
        tp_tokens = self.temporal_projector.per_chunk(tp).split(counts)
        return [
            (TokenBlock(s.reshape(-1, s.shape[-1]), SPATIAL), TokenBlock(t.mean(dim=0), TEMPORAL))
            for s, t in zip(sp_tokens, tp_tokens)
        ]

    def question_ids(self, question: str, strict: bool = True) -> list[int]:
        ids = self.vocab.encode(question, strict=strict)
        if not ids:
            raise TokenizeError("question produced no tokens")
        return ids

    def aggregate(self, videos: Sequence[EncodedVideo], questions: Sequence[str | Sequence[int]],
                  strict: bool = True) -> list[AggregatedSequence]:
        """Questions may be strings or already-encoded token id lists."""
        out = []
        for (z_sp, z_tp), question in zip(self._visual_blocks(videos), questions):
            if isinstance(question, str):
                z_text = embed_text(question, self.vocab, self.decoder, strict=strict)
            else:
                z_text = TokenBlock(self.decoder.embed_tokens(question), TEXT, token_ids=list(question))
            out.append(aggregate_tokens(z_sp, z_tp, z_text, self.vocab))
        return out

    def loss(self, videos: Sequence[EncodedVideo], questions: Sequence[str | Sequence[int]],
             targets: Sequence[Sequence[int]]) -> torch.Tensor:
        """Mean over the batch of per-sample mean answer NLL."""
        seqs = self.aggregate(videos, questions)
        return batch_sequence_loss([s.tokens for s in seqs], targets, self.decoder).mean()

    def target_ids(self, answer: str) -> list[int]:
        return self.vocab.encode(answer, strict=True) + [self.vocab.eos_id]

    @torch.no_grad()
    def answer(self, video: EncodedVideo, question: str, max_len: int = 24) -> GenerationOutput:
        (seq,) = self.aggregate([video], [question], strict=False)
        return generate(seq, self.decoder, max_len)
