"""Word-level tokenizer and a small bidirectional transformer backend.

The backend fulfils the contract a large pretrained encoder would
(tokenization, vocabulary extension, masked-language-model steps,
classification over assembled inputs) but is small enough to pretrain and
finetune from scratch on a single CPU, which keeps the whole pipeline
reproducible end to end.

Vocabulary extension preserves existing embedding rows bit-for-bit and
initializes new rows from the empirical per-dimension mean and standard
deviation of the existing matrix, so added sender tokens start inside the
embedding distribution instead of at arbitrary scale.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .context import ContextualInput
from .errors import ConfigError, RegistrationError
from .masking import IGNORE_INDEX, TokenRegistry, derive_seed, register_special_tokens


class WordTokenizer:
    """Whitespace tokenizer with a fixed special-token header.

    Ids 0..3 are [PAD], [UNK], [CLS], [MASK] in that order; the remaining
    vocabulary is frequency-ordered at fit time. Unknown words map to [UNK].
    """

    PAD_TOKEN = "[PAD]"
    UNK_TOKEN = "[UNK]"
    CLS_TOKEN = "[CLS]"
    MASK_TOKEN = "[MASK]"
    BASE_SPECIALS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, MASK_TOKEN)

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:4] != list(self.BASE_SPECIALS):
            raise ConfigError(f"vocabulary must start with {self.BASE_SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        self._tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    unk_id = 1
    cls_id = 2
    mask_id = 3

    @classmethod
    def fit(cls, texts: Iterable[str], max_size: int = 8192, min_count: int = 1,
            extra_tokens: Sequence[str] = (".",)) -> "WordTokenizer":
        """Build a vocabulary from whitespace-split words.

        Words are ranked by (count desc, word asc) so fitting is
        deterministic; `extra_tokens` are always included regardless of
        frequency (the period separator must exist even if no text uses it).
        """
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(text.split())
        header = list(cls.BASE_SPECIALS) + [t for t in extra_tokens
                                            if t not in cls.BASE_SPECIALS]
        room = max_size - len(header)
        if room < 0:
            raise ConfigError(f"max_size {max_size} smaller than the fixed header")
        ranked = sorted((w for w, c in counts.items()
                         if c >= min_count and w not in header),
                        key=lambda w: (-counts[w], w))
        return cls(header + ranked[:room])

    @property
    def vocab_size(self) -> int:
        return len(self._tokens)

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(t, self.unk_id) for t in tokens]

    def encode(self, text: str) -> list[int]:
        return self.encode_tokens(self.tokenize(text))

    def id_of(self, token: str) -> int | None:
        return self._ids.get(token)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    def add_tokens(self, tokens: Sequence[str]) -> list[int]:
        ids = []
        for token in tokens:
            if token in self._ids:
                raise RegistrationError(f"token {token!r} already in vocabulary")
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
            ids.append(self._ids[token])
        return ids

    def to_json(self) -> str:
        return json.dumps({"tokens": self._tokens})

    @classmethod
    def from_json(cls, payload: str) -> "WordTokenizer":
        return cls(json.loads(payload)["tokens"])


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 96
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 384
    max_len: int = 256
    dropout: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0


class _TinyTransformer(nn.Module):
    def __init__(self, vocab_size: int, cfg: EncoderConfig):
        super().__init__()
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_model, nhead=cfg.n_heads, dim_feedforward=cfg.d_ff,
            dropout=cfg.dropout, activation="gelu", batch_first=True,
            norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.n_layers,
                                             enable_nested_tensor=False)
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.mlm_bias = nn.Parameter(torch.zeros(vocab_size))
        self.cls_head = nn.Linear(cfg.d_model, 2)

    def hidden_states(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        h = self.tok_emb(ids) + self.pos_emb(positions)[None, :, :]
        h = self.encoder(h, src_key_padding_mask=pad_mask)
        return self.final_norm(h)

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        # tied output projection: reuse the input embedding matrix
        return F.linear(hidden, self.tok_emb.weight, self.mlm_bias)

    def class_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.cls_head(hidden[:, 0, :])


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0) -> torch.Tensor:
    width = max(len(s) for s in sequences)
    out = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        out[row, :len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    return out


class EncoderBackend(Protocol):
    """What the training loops need from an encoder implementation."""

    def tokenize(self, text: str) -> list[int]: ...
    def token_strings(self, text: str) -> list[str]: ...
    @property
    def vocab_size(self) -> int: ...
    def extend_vocabulary(self, tokens: Sequence[str]) -> list[int]: ...
    def encode_contextual(self, ci: ContextualInput) -> list[int]: ...
    def encode_document(self, tokens: Sequence[str]) -> list[int]: ...
    def mlm_step(self, input_ids: torch.Tensor, labels: torch.Tensor, lr: float) -> float: ...
    def classifier_step(self, input_ids: torch.Tensor, labels: torch.Tensor,
                        lr: float, class_weights: Sequence[float] | None) -> float: ...
    def classify_logits(self, inputs: Sequence[ContextualInput]) -> np.ndarray: ...
    def state_dict(self) -> dict: ...
    def load_state_dict(self, state: dict) -> None: ...


class TinyEncoderBackend:
    """CPU-sized encoder with an owned optimizer and deterministic seeding."""

    GRAD_CLIP = 1.0

    def __init__(self, tokenizer: WordTokenizer, config: EncoderConfig | None = None,
                 registry: TokenRegistry | None = None):
        self.tokenizer = tokenizer
        self.config = config or EncoderConfig()
        if registry is None:
            registry = TokenRegistry(
                base_vocab_size=tokenizer.vocab_size,
                mask_id=tokenizer.mask_id,
                protected_ids=frozenset({tokenizer.pad_id, tokenizer.unk_id,
                                         tokenizer.cls_id, tokenizer.mask_id}))
        if registry.vocab_size != tokenizer.vocab_size:
            raise ConfigError(f"registry covers {registry.vocab_size} ids but "
                              f"tokenizer has {tokenizer.vocab_size}")
        self.registry = registry
        torch.manual_seed(self.config.seed)
        self.model = _TinyTransformer(tokenizer.vocab_size, self.config)
        self._optimizer: torch.optim.AdamW | None = None

    # --- vocabulary -------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def token_strings(self, text: str) -> list[str]:
        return self.tokenizer.tokenize(text)

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    def extend_vocabulary(self, tokens: Sequence[str]) -> list[int]:
        """Register protected tokens and grow the embedding accordingly.

        Existing rows are preserved exactly; new rows are sampled around the
        empirical row statistics with a seed derived from the encoder seed
        and the pre-extension size, so extension is reproducible.
        """
        for token in tokens:
            if self.tokenizer.id_of(token) is not None:
                raise RegistrationError(f"token {token!r} already in vocabulary")
        old_size = self.vocab_size
        self.registry = register_special_tokens(self.registry, tokens)
        new_ids = self.tokenizer.add_tokens(tokens)
        n_new = len(new_ids)
        with torch.no_grad():
            old_weight = self.model.tok_emb.weight.detach()
            mean = old_weight.mean(dim=0)
            std = old_weight.std(dim=0, unbiased=False)
            gen = torch.Generator().manual_seed(
                derive_seed(self.config.seed, "extend", old_size) % (2**63))
            noise = torch.randn((n_new, old_weight.shape[1]), generator=gen)
            new_rows = mean[None, :] + std[None, :] * noise
            emb = nn.Embedding(old_size + n_new, old_weight.shape[1])
            emb.weight.data = torch.cat([old_weight.clone(), new_rows], dim=0)
            self.model.tok_emb = emb
            self.model.mlm_bias = nn.Parameter(
                torch.cat([self.model.mlm_bias.detach().clone(), torch.zeros(n_new)]))
        self._optimizer = None
        return new_ids

    # --- encoding ---------------------------------------------------------

    def encode_document(self, tokens: Sequence[str]) -> list[int]:
        ids = [self.tokenizer.cls_id] + self.tokenizer.encode_tokens(tokens)
        self._check_len(len(ids))
        return ids

    def encode_contextual(self, ci: ContextualInput) -> list[int]:
        ids = [self.tokenizer.cls_id]
        for seg in ci.segments:
            ids.extend(self.tokenizer.encode_tokens(seg.prefix))
            ids.extend(self.tokenizer.encode(seg.text))
        self._check_len(len(ids))
        return ids

    def _check_len(self, n: int) -> None:
        if n > self.config.max_len:
            raise ConfigError(f"sequence of {n} tokens exceeds encoder max_len "
                              f"{self.config.max_len}; raise max_len or lower the token budget")

    # --- optimization -----------------------------------------------------

    def _ensure_optimizer(self, lr: float) -> torch.optim.AdamW:
        if self._optimizer is None:
            self._optimizer = torch.optim.AdamW(self.model.parameters(), lr=lr,
                                                weight_decay=self.config.weight_decay)
        for group in self._optimizer.param_groups:
            group["lr"] = lr
        return self._optimizer

    def mlm_step(self, input_ids: torch.Tensor, labels: torch.Tensor, lr: float) -> float:
        if int((labels != IGNORE_INDEX).sum()) == 0:
            return 0.0
        self.model.train()
        opt = self._ensure_optimizer(lr)
        opt.zero_grad()
        hidden = self.model.hidden_states(input_ids, input_ids.eq(self.tokenizer.pad_id))
        logits = self.model.mlm_logits(hidden)
        loss = F.cross_entropy(logits.view(-1, self.vocab_size), labels.view(-1),
                               ignore_index=IGNORE_INDEX)
        loss.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), self.GRAD_CLIP)
        opt.step()
        return float(loss.item())

    def classifier_step(self, input_ids: torch.Tensor, labels: torch.Tensor,
                        lr: float, class_weights: Sequence[float] | None = None) -> float:
        self.model.train()
        opt = self._ensure_optimizer(lr)
        opt.zero_grad()
        hidden = self.model.hidden_states(input_ids, input_ids.eq(self.tokenizer.pad_id))
        logits = self.model.class_logits(hidden)
        weight = None
        if class_weights is not None:
            weight = torch.as_tensor(list(class_weights), dtype=logits.dtype)
        loss = F.cross_entropy(logits, labels, weight=weight)
        loss.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), self.GRAD_CLIP)
        opt.step()
        return float(loss.item())

    def classify_logits(self, inputs: Sequence[ContextualInput],
                        batch_size: int = 64) -> np.ndarray:
        self.model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(inputs), batch_size):
                chunk = inputs[start:start + batch_size]
                ids = pad_batch([self.encode_contextual(ci) for ci in chunk],
                                self.tokenizer.pad_id)
                hidden = self.model.hidden_states(ids, ids.eq(self.tokenizer.pad_id))
                out.append(self.model.class_logits(hidden).numpy())
        return np.concatenate(out, axis=0) if out else np.zeros((0, 2))

    def classify_batch_logits(self, input_ids: torch.Tensor) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            hidden = self.model.hidden_states(input_ids, input_ids.eq(self.tokenizer.pad_id))
            return self.model.class_logits(hidden).numpy()

    # --- state ------------------------------------------------------------

    def reinit_classifier_head(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed % (2**63))
        with torch.no_grad():
            fresh = torch.empty_like(self.model.cls_head.weight).normal_(
                0.0, 0.02, generator=gen)
            self.model.cls_head.weight.copy_(fresh)
            self.model.cls_head.bias.zero_()

    def state_dict(self) -> dict:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state)
        self._optimizer = None

    def reset_optimizer(self) -> None:
        self._optimizer = None

    # --- persistence ------------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), out_dir / "weights.pt")
        (out_dir / "tokenizer.json").write_text(self.tokenizer.to_json())
        (out_dir / "encoder_config.json").write_text(json.dumps(asdict(self.config)))
        (out_dir / "registry.json").write_text(json.dumps({
            "base_vocab_size": self.registry.base_vocab_size,
            "mask_id": self.registry.mask_id,
            "added_tokens": list(self.registry.added_tokens),
            "protected_ids": sorted(self.registry.protected_ids),
        }))

    @classmethod
    def load(cls, in_dir: str | Path) -> "TinyEncoderBackend":
        in_dir = Path(in_dir)
        tokenizer = WordTokenizer.from_json((in_dir / "tokenizer.json").read_text())
        config = EncoderConfig(**json.loads((in_dir / "encoder_config.json").read_text()))
        reg_raw = json.loads((in_dir / "registry.json").read_text())
        registry = TokenRegistry(
            base_vocab_size=reg_raw["base_vocab_size"],
            mask_id=reg_raw["mask_id"],
            added_tokens=tuple((t, i) for t, i in reg_raw["added_tokens"]),
            protected_ids=frozenset(reg_raw["protected_ids"]))
        backend = cls(tokenizer, config, registry)
        state = torch.load(in_dir / "weights.pt", weights_only=True)
        backend.model.load_state_dict(state)
        return backend
