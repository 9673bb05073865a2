"""Decoding, perplexity and the self-chat harness."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .batching import DEFAULT_LIMITS, collate, group_by_length, pack, pack_ids
from .corpus import DEFAULT_ROLE_CAP, DialogueSample, assign_roles
from .model import ModelParameters, forward, nll_loss
from .tokenizer import BOS, EOS, PAD, UNK, Vocabulary

STRATEGIES = ("greedy", "top_k", "top_p")
SELF_SPEAKER = "__responder__"


@dataclass
class DecodeConfig:
    strategy: str = "top_p"
    k: int = 50
    p: float = 0.9
    temperature: float = 0.9
    max_new_tokens: int = 31
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0 < self.p <= 1:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def filter_probs(logits: np.ndarray, cfg: DecodeConfig) -> np.ndarray:
    """Temperature softmax restricted to the top-k tokens or the top-p nucleus."""
    z = logits.astype(np.float64) / cfg.temperature
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    if cfg.strategy == "top_k" and cfg.k < probs.size:
        cut = np.argsort(-probs, kind="stable")[cfg.k:]
        probs[cut] = 0.0
    elif cfg.strategy == "top_p" and cfg.p < 1.0:
        order = np.argsort(-probs, kind="stable")
        before = np.cumsum(probs[order]) - probs[order]
        probs[order[before >= cfg.p]] = 0.0
    return probs / probs.sum()


def next_token(logits: np.ndarray, cfg: DecodeConfig, rng: np.random.Generator, n_valid: Optional[int] = None) -> int:
    logits = logits.astype(np.float64).copy()
    # PAD/BOS/UNK are never generated, nor ids the tokenizer cannot decode.
    logits[[PAD, BOS, UNK]] = -np.inf
    if n_valid is not None:
        logits[n_valid:] = -np.inf
    if cfg.strategy == "greedy":
        return int(np.argmax(logits))
    probs = filter_probs(logits, cfg)
    return int(rng.choice(probs.size, p=probs))


def generate_ids(context: Sequence[tuple[Sequence[int], int]], params: ModelParameters, cfg: DecodeConfig,
                 limits=DEFAULT_LIMITS, rng: Optional[np.random.Generator] = None,
                 n_valid: Optional[int] = None) -> list[int]:
    """Token-by-token decoding; each step re-runs the model over context + prefix.

    ``n_valid`` bounds the sampled ids when the model's output layer is wider
    than the tokenizer's vocabulary.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    budget = min(cfg.max_new_tokens, limits[1] - 1)
    out: list[int] = []
    while len(out) < budget:
        row = pack_ids(context, out, limits, close=False)
        trace = forward(collate([row]), params)
        tok = next_token(trace.logits[0, -1], cfg, rng, n_valid)
        if tok == EOS:
            break
        out.append(tok)
    return out


def generate(context: Sequence[tuple[str, str]], params: ModelParameters, vocab: Vocabulary, cfg: DecodeConfig,
             responder: str = SELF_SPEAKER, limits=DEFAULT_LIMITS, role_cap: int = DEFAULT_ROLE_CAP,
             rng: Optional[np.random.Generator] = None) -> str:
    """Reply to ``context`` (list of (text, user) turns) as ``responder``, who takes role 0."""
    if not context:
        raise ValueError("context must contain at least one turn")
    roles = assign_roles(DialogueSample(list(context), ("", responder)), role_cap).role_ids
    ctx = [(vocab.encode(text) + [EOS], r) for (text, _), r in zip(context, roles)]
    return vocab.decode(generate_ids(ctx, params, cfg, limits, rng, len(vocab)))


def perplexity(corpus: Sequence[DialogueSample], params: ModelParameters, vocab: Vocabulary,
               limits=DEFAULT_LIMITS, token_budget: int = 8192):
    """Token-weighted NLL over response tokens (EOS included); returns (nats/token, ppl)."""
    if not corpus:
        raise ValueError("empty corpus")
    batches = group_by_length([pack(s, vocab, limits) for s in corpus], token_budget)
    total, count = 0.0, 0
    for b in batches:
        loss, _ = nll_loss(forward(b, params), b)
        total += loss * b.n_targets
        count += b.n_targets
    nats = total / count
    return nats, math.exp(nats)


@dataclass
class ChatState:
    turns: list[tuple[str, str]] = field(default_factory=list)
    speakers: tuple[str, str] = ("P1", "P2")
    seed_turns: int = 1

    @property
    def rounds(self) -> int:
        return math.ceil((len(self.turns) - self.seed_turns) / 2)

    def records(self, cfg: DecodeConfig) -> list[dict]:
        digest = cfg.digest()
        out = []
        for i, (text, who) in enumerate(self.turns):
            rnd = 0 if i < self.seed_turns else (i - self.seed_turns) // 2 + 1
            out.append({"round": rnd, "speaker": who, "text": text, "decode_config_digest": digest})
        return out

    def write_jsonl(self, path, cfg: DecodeConfig):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records(cfg):
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def self_chat(seed_topic: str, rounds: int, params: ModelParameters, vocab: Vocabulary, cfg: DecodeConfig,
              limits=DEFAULT_LIMITS, speakers=("P1", "P2")) -> ChatState:
    """One model plays both partners; the seed topic is spoken by the first speaker.

    Each round adds a reply from the second speaker then from the first.  The
    speaker being generated is always role 0 in its own input.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    state = ChatState([(seed_topic, speakers[0])], tuple(speakers))
    rng = np.random.default_rng(cfg.seed)
    for _ in range(rounds):
        for who in (speakers[1], speakers[0]):
            text = generate(state.turns, params, vocab, cfg, responder=who, limits=limits, rng=rng)
            state.turns.append((text, who))
    return state


def distinct_n(transcripts: Iterable[Sequence[str]], n: int) -> float:
    """Unique / total n-grams over generated turns (whitespace tokens, no cross-turn n-grams)."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    grams = []
    for turns in transcripts:
        if isinstance(turns, str):
            turns = [turns]
        for turn in turns:
            toks = turn.split()
            grams.extend(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))
    if not grams:
        raise ValueError("no n-grams in input")
    return len(set(grams)) / len(grams)


def load_topics(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def topic_for_seed(topics: Sequence[str], seed: int) -> str:
    """Deterministic seed -> topic pick."""
    return topics[np.random.default_rng(seed).integers(len(topics))]
