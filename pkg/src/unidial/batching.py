"""Packing dialogue samples into prefix-LM inputs and padding-aware batches.

Row layout::

    [context tokens ...] BOS [response tokens ...] EOS
     type 0                   type 1 from BOS onwards

Every context turn ends with an EOS separator, counted as context.  Position
ids run over the whole row.  The loss mask marks the response tokens and the
closing EOS, each predicted from the position before it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import DialogueSample
from .tokenizer import BOS, EOS, PAD, Vocabulary

TYPE_CONTEXT, TYPE_RESPONSE, TYPE_GROUNDING = 0, 1, 2
DEFAULT_LIMITS = (128, 32)
DEFAULT_TOKEN_BUDGET = 8192


@dataclass
class PackedSample:
    token_ids: list[int]
    position_ids: list[int]
    type_ids: list[int]
    role_ids: list[int]
    loss_mask: list[int]
    lengths: tuple[int, int]

    def __len__(self):
        return len(self.token_ids)


@dataclass
class Batch:
    token_ids: np.ndarray
    position_ids: np.ndarray
    type_ids: np.ndarray
    role_ids: np.ndarray
    attention_mask: np.ndarray
    loss_mask: np.ndarray
    lengths: np.ndarray
    pad_count: int
    index: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.token_ids.shape

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask.sum())

    @property
    def pad_ratio(self) -> float:
        return self.pad_count / self.token_ids.size

    def with_tokens(self, token_ids) -> "Batch":
        """Copy with token ids replaced; masks and other ids are shared."""
        return Batch(np.asarray(token_ids), self.position_ids, self.type_ids, self.role_ids,
                     self.attention_mask, self.loss_mask, self.lengths, self.pad_count, self.index)


def pack_ids(context: Sequence[tuple[Sequence[int], int]], response: Sequence[int],
             limits=DEFAULT_LIMITS, close: bool = True) -> PackedSample:
    """Pack already-tokenized turns: ``context`` is a list of (ids, role) pairs.

    With ``close=False`` the response is left open (no EOS, no truncation),
    which is the shape used while decoding.
    """
    max_ctx, max_resp = limits
    if max_ctx <= 0 or max_resp <= 0:
        raise ValueError(f"limits must be positive, got {limits}")
    ctx_tok, ctx_role = [], []
    for ids, role in context:
        ctx_tok.extend(ids)
        ctx_role.extend([role] * len(ids))
    if len(ctx_tok) > max_ctx:
        cut = len(ctx_tok) - max_ctx
        ctx_tok, ctx_role = ctx_tok[cut:], ctx_role[cut:]
    if close:
        if not response:
            raise ValueError("empty response")
        resp = list(response[: max_resp - 1]) + [EOS]
    else:
        resp = list(response)
    c = len(ctx_tok)
    r = len(resp) - 1 if close else len(resp)
    tokens = ctx_tok + [BOS] + resp
    n = len(tokens)
    loss = [0] * (c + 1) + [1] * len(resp)
    if not close:
        loss = [0] * n
    return PackedSample(
        token_ids=tokens,
        position_ids=list(range(n)),
        type_ids=[TYPE_CONTEXT] * c + [TYPE_RESPONSE] * (n - c),
        role_ids=ctx_role + [0] * (n - c),
        loss_mask=loss,
        lengths=(c, r),
    )


def context_ids(sample: DialogueSample, vocab: Vocabulary):
    """Tokenized context turns, each closed by EOS, paired with their role ids."""
    roles = sample.role_ids or [0] * (len(sample.context) + 1)
    return [(vocab.encode(text) + [EOS], role) for (text, _), role in zip(sample.context, roles)]


def pack(sample: DialogueSample, vocab: Vocabulary, limits=DEFAULT_LIMITS) -> PackedSample:
    if not sample.response[0]:
        raise ValueError("empty response")
    return pack_ids(context_ids(sample, vocab), vocab.encode(sample.response[0]), limits)


def build_prefix_mask(context_len: int, response_len: int) -> np.ndarray:
    """Bidirectional over the context span, causal over the response span."""
    if context_len < 0 or response_len < 0:
        raise ValueError("span lengths must be non-negative")
    n = context_len + response_len
    mask = np.tril(np.ones((n, n), dtype=np.int8))
    mask[:context_len, :context_len] = 1
    return mask


def _row_mask(p: PackedSample) -> np.ndarray:
    # The response span here is BOS + response + EOS.
    c = p.lengths[0]
    return build_prefix_mask(c, len(p) - c)


def collate(samples: Sequence[PackedSample], index=None, pad_to: Optional[int] = None) -> Batch:
    L = max(len(s) for s in samples)
    if pad_to is not None:
        L = max(L, pad_to)
    B = len(samples)
    tok = np.full((B, L), PAD, dtype=np.int64)
    pos = np.zeros((B, L), dtype=np.int64)
    typ = np.zeros((B, L), dtype=np.int64)
    rol = np.zeros((B, L), dtype=np.int64)
    loss = np.zeros((B, L), dtype=np.int8)
    att = np.zeros((B, L, L), dtype=np.int8)
    lens = np.zeros((B, 2), dtype=np.int64)
    for b, s in enumerate(samples):
        n = len(s)
        tok[b, :n] = s.token_ids
        pos[b, :n] = s.position_ids
        typ[b, :n] = s.type_ids
        rol[b, :n] = s.role_ids
        loss[b, :n] = s.loss_mask
        att[b, :n, :n] = _row_mask(s)
        lens[b] = s.lengths
    pad = int(B * L - sum(len(s) for s in samples))
    return Batch(tok, pos, typ, rol, att, loss, lens, pad,
                 None if index is None else np.asarray(index, dtype=np.int64))


def unpack(batch: Batch) -> list[PackedSample]:
    out = []
    for b in range(batch.token_ids.shape[0]):
        c, r = (int(x) for x in batch.lengths[b])
        # Closed rows carry BOS + r tokens + EOS; open rows (decoding) only BOS + r.
        n = c + r + 2 if batch.loss_mask[b].any() else c + r + 1
        out.append(PackedSample(
            token_ids=batch.token_ids[b, :n].tolist(),
            position_ids=batch.position_ids[b, :n].tolist(),
            type_ids=batch.type_ids[b, :n].tolist(),
            role_ids=batch.role_ids[b, :n].tolist(),
            loss_mask=batch.loss_mask[b, :n].tolist(),
            lengths=(c, r),
        ))
    return out


def greedy_groups(lengths: Sequence[int], order: Sequence[int], token_budget: int,
                  max_rows: Optional[int] = None) -> list[list[int]]:
    """Cut ``order`` into consecutive runs with rows * longest <= token_budget."""
    groups: list[list[int]] = []
    cur: list[int] = []
    longest = 0
    for i in order:
        n = lengths[i]
        if n > token_budget:
            raise ValueError(f"sample {i} has length {n}, longer than token budget {token_budget}")
        new_longest = max(longest, n)
        if cur and ((len(cur) + 1) * new_longest > token_budget or (max_rows and len(cur) >= max_rows)):
            groups.append(cur)
            cur, new_longest = [], n
        cur.append(i)
        longest = new_longest
    if cur:
        groups.append(cur)
    return groups


def group_padding(lengths: Sequence[int], groups: list[list[int]]) -> int:
    total = 0
    for g in groups:
        longest = max(lengths[i] for i in g)
        total += sum(longest - lengths[i] for i in g)
    return total


def sorted_order(lengths: Sequence[int]) -> list[int]:
    # Stable: ties keep sample-index order.
    return sorted(range(len(lengths)), key=lambda i: (lengths[i], i))


def group_by_length(samples: Sequence[PackedSample], token_budget: int = DEFAULT_TOKEN_BUDGET,
                    max_rows: Optional[int] = None) -> list[Batch]:
    lengths = [len(s) for s in samples]
    groups = greedy_groups(lengths, sorted_order(lengths), token_budget, max_rows)
    return [collate([samples[i] for i in g], index=g) for g in groups]


def padding_ratio(batches: Sequence[Batch]) -> float:
    slots = sum(b.token_ids.size for b in batches)
    return sum(b.pad_count for b in batches) / slots if slots else 0.0


_DUMP_MAGIC = b"UDBT"


def dump_batch(batch: Batch, path) -> None:
    """Little-endian int32 dump: magic, B, L, then the id/mask planes in order."""
    B, L = batch.shape
    planes = [batch.token_ids, batch.position_ids, batch.type_ids, batch.role_ids,
              batch.loss_mask, batch.lengths, batch.attention_mask]
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<iii", B, L, batch.pad_count))
        for a in planes:
            fh.write(np.ascontiguousarray(a, dtype="<i4").tobytes())


def load_batch(path) -> Batch:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _DUMP_MAGIC:
        raise ValueError(f"{path}: not a batch dump")
    B, L, pad = struct.unpack_from("<iii", raw, 4)
    flat = np.frombuffer(raw, dtype="<i4", offset=16).astype(np.int64)
    shapes = [(B, L)] * 5 + [(B, 2), (B, L, L)]
    planes = []
    off = 0
    for shp in shapes:
        size = int(np.prod(shp))
        planes.append(flat[off:off + size].reshape(shp))
        off += size
    if off != flat.size:
        raise ValueError(f"{path}: size mismatch in batch dump")
    tok, pos, typ, rol, loss, lens, att = planes
    return Batch(tok, pos, typ, rol, att.astype(np.int8), loss.astype(np.int8), lens, pad)


def format_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask)
