"""Flat run configuration merged from a JSON file and command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .corpus import DEFAULT_ROLE_CAP, CleaningConfig
from .inference import DecodeConfig
from .model import ModelConfig
from .training import TrainRunConfig


@dataclass
class AppConfig:
    # model
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: Optional[int] = None
    n_types: int = 3
    max_positions: int = 256
    tie_embeddings: bool = True
    # roles / corpus
    role_cap: int = DEFAULT_ROLE_CAP
    min_len: Optional[int] = 2
    max_turn_len: Optional[int] = 256
    strip_urls: bool = True
    max_non_text_ratio: Optional[float] = 0.5
    # packing / training
    max_ctx: int = 128
    max_resp: int = 32
    token_budget: int = 8192
    steps: Optional[int] = 2000
    total_tokens: Optional[int] = None
    eval_interval: int = 100
    checkpoint_interval: int = 500
    seed: int = 0
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    grad_clip: Optional[float] = 1.0
    # decoding
    strategy: str = "top_p"
    k: int = 50
    p: float = 0.9
    temperature: float = 0.9
    max_new_tokens: int = 31

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "AppConfig":
        unknown = sorted(set(data) - cls.keys())
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "AppConfig":
        data = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            if not isinstance(data, dict):
                raise ValueError(f"{path}: config must be a flat JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)

    def validate(self, vocab_len: Optional[int] = None):
        """Build every sub-config once so that bad values fail before any work starts."""
        self.model(vocab_len or self.vocab_size or 512)
        self.run()
        self.decode()
        if self.max_ctx + self.max_resp + 1 > self.max_positions:
            raise ValueError(f"max_positions={self.max_positions} is smaller than "
                             f"max_ctx + max_resp + 1 = {self.max_ctx + self.max_resp + 1}")
        if self.max_new_tokens > self.max_resp:
            raise ValueError("max_new_tokens must not exceed max_resp")

    def model(self, vocab_len: int) -> ModelConfig:
        size = self.vocab_size if self.vocab_size is not None else vocab_len
        if size < vocab_len:
            raise ValueError(f"vocab_size={size} is smaller than the vocabulary ({vocab_len} tokens)")
        return ModelConfig(n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model, d_ff=self.d_ff,
                           vocab_size=size, n_types=self.n_types, n_roles=self.role_cap + 1,
                           max_positions=self.max_positions, init_scale_seed=self.seed,
                           tie_embeddings=self.tie_embeddings)

    def run(self, checkpoint_dir: Optional[str] = None) -> TrainRunConfig:
        return TrainRunConfig(token_budget=self.token_budget, steps=self.steps, total_tokens=self.total_tokens,
                              eval_interval=self.eval_interval, checkpoint_interval=self.checkpoint_interval,
                              seed=self.seed, checkpoint_dir=checkpoint_dir, limits=self.limits,
                              peak_lr=self.peak_lr, warmup_steps=self.warmup_steps, grad_clip=self.grad_clip)

    def decode(self, seed: Optional[int] = None) -> DecodeConfig:
        return DecodeConfig(strategy=self.strategy, k=self.k, p=self.p, temperature=self.temperature,
                            max_new_tokens=self.max_new_tokens, seed=self.seed if seed is None else seed)

    def cleaning(self, blocklist=frozenset()) -> CleaningConfig:
        return CleaningConfig(min_len=self.min_len, max_turn_len=self.max_turn_len, strip_urls=self.strip_urls,
                              blocklist=blocklist, max_non_text_ratio=self.max_non_text_ratio)

    @property
    def limits(self):
        return (self.max_ctx, self.max_resp)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
