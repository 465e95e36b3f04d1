"""CTC task head: learned weighted layer-sum, bidirectional LSTM over the
character vocabulary, CTC loss in log space, and greedy / prefix-beam decoding
with optional character n-gram shallow fusion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data_io import ALPHABET
from .errors import DataError, InfeasibleTranscriptError

BLANK = 0
VOCAB = ["<b>"] + list(ALPHABET)  # 29 symbols, blank at index 0
VOCAB_SIZE = len(VOCAB)

START = "<s>"
END = "</s>"


def text_to_ids(text: str) -> list[int]:
    try:
        return [ALPHABET.index(c) + 1 for c in text]
    except ValueError as exc:
        raise DataError(f"character outside the vocabulary in {text!r}") from exc


def ids_to_text(ids: list[int]) -> str:
    return "".join(VOCAB[i] for i in ids)


class _LstmDirection(nn.Module):
    """One direction of one LSTM layer; explicit gate recurrence."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.wx = nn.Linear(in_dim, 4 * hidden)
        self.wh = nn.Linear(hidden, 4 * hidden, bias=False)
        nn.init.normal_(self.wx.weight, mean=0.0, std=0.05)
        nn.init.zeros_(self.wx.bias)
        nn.init.normal_(self.wh.weight, mean=0.0, std=0.05)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        h = x.new_zeros(B, self.hidden)
        c = x.new_zeros(B, self.hidden)
        gates_x = self.wx(x)  # (B, T, 4H)
        outs = []
        for t in range(T):
            gates = gates_x[:, t] + self.wh(h)
            i, f, g, o = gates.chunk(4, dim=-1)
            i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
            c = f * c + i * torch.tanh(g)
            h = o * torch.tanh(c)
            outs.append(h)
        return torch.stack(outs, dim=1)


def _flip_by_length(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each sequence within its true length; padding stays in place."""
    B, T = x.shape[0], x.shape[1]
    idx = torch.arange(T, device=x.device)[None, :].expand(B, T)
    rev = lengths[:, None] - 1 - idx
    rev = torch.where(rev >= 0, rev, idx)
    return x.gather(1, rev[..., None].expand_as(x))


class BiLstmDecoder(nn.Module):
    """Stacked bidirectional LSTM with an affine projection to the vocabulary."""

    def __init__(self, in_dim: int, hidden: int, n_layers: int = 2,
                 vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.fwd = nn.ModuleList()
        self.bwd = nn.ModuleList()
        dim = in_dim
        for _ in range(n_layers):
            self.fwd.append(_LstmDirection(dim, hidden))
            self.bwd.append(_LstmDirection(dim, hidden))
            dim = 2 * hidden
        self.out = nn.Linear(dim, vocab_size)
        nn.init.normal_(self.out.weight, mean=0.0, std=0.05)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, T, in_dim) -> logits (B, T, V)."""
        B, T = x.shape[0], x.shape[1]
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long, device=x.device)
        for f_dir, b_dir in zip(self.fwd, self.bwd):
            fwd_out = f_dir(x)
            bwd_out = _flip_by_length(b_dir(_flip_by_length(x, lengths)), lengths)
            x = torch.cat([fwd_out, bwd_out], dim=-1)
        return self.out(x)


class DecoderHead(nn.Module):
    """Learned softmax layer weights over the N encoder layers plus the
    BiLSTM CTC decoder; this is the only trainable group during fine-tuning."""

    def __init__(self, n_layers: int, d: int, hidden: int, lstm_layers: int = 2):
        super().__init__()
        self.layer_weights = nn.Parameter(torch.zeros(n_layers))
        self.lstm = BiLstmDecoder(d, hidden, lstm_layers)

    def weighted_sum(self, per_layer: list[torch.Tensor]) -> torch.Tensor:
        w = torch.softmax(self.layer_weights, dim=0)
        stacked = torch.stack(per_layer, dim=0)  # (N, B, T, d)
        return torch.einsum("n,nbtd->btd", w, stacked)

    def forward(self, per_layer: list[torch.Tensor],
                lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.lstm(self.weighted_sum(per_layer), lengths)


def weighted_sum(per_layer: list[np.ndarray], raw_weights: np.ndarray) -> np.ndarray:
    """Softmax(raw)-weighted average of the per-layer outputs."""
    w = np.exp(raw_weights - np.max(raw_weights))
    w = w / w.sum()
    return sum(wi * layer for wi, layer in zip(w, per_layer))


def min_frames_for(target: list[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extended_targets(target: list[int]) -> list[int]:
    ext = [BLANK]
    for t in target:
        ext.extend([t, BLANK])
    return ext


def ctc_loss(logits: torch.Tensor, target: "list[int] | str") -> torch.Tensor:
    """Negative log marginal probability of `target` under the CTC alignment
    model, via the forward algorithm in log space. Differentiable in logits.
    """
    if isinstance(target, str):
        target = text_to_ids(target)
    T = logits.shape[0]
    if T < min_frames_for(target):
        raise InfeasibleTranscriptError(
            f"target of length {len(target)} needs >= {min_frames_for(target)} "
            f"frames, got {T}"
        )
    log_probs = torch.log_softmax(logits, dim=-1)
    ext = _extended_targets(target)
    S = len(ext)
    ext_t = torch.tensor(ext, dtype=torch.long, device=logits.device)
    # large-but-finite "impossible" mass: exp() underflows to exactly 0, while
    # logsumexp stays differentiable (all -inf inputs would backprop NaN)
    neg_inf = torch.tensor(-1e30, dtype=logits.dtype, device=logits.device)
    alpha = torch.full((S,), -1e30, dtype=logits.dtype, device=logits.device)
    alpha[0] = log_probs[0, BLANK]
    if S > 1:
        alpha[1] = log_probs[0, ext[1]]
    # transitions: stay, step, skip (skip only onto a label differing from s-2)
    can_skip = torch.zeros(S, dtype=torch.bool, device=logits.device)
    for s in range(2, S):
        can_skip[s] = ext[s] != BLANK and ext[s] != ext[s - 2]
    for t in range(1, T):
        stay = alpha
        step = torch.cat([neg_inf[None], alpha[:-1]])
        if S >= 3:
            skip = torch.cat([neg_inf[None], neg_inf[None], alpha[:-2]])
            skip = torch.where(can_skip, skip, neg_inf)
        else:
            skip = neg_inf.expand(S)
        alpha = torch.logsumexp(torch.stack([stay, step, skip]), dim=0)
        alpha = alpha + log_probs[t, ext_t]
    tail = alpha[-1] if S == 1 else torch.logsumexp(alpha[-2:], dim=0)
    return -tail


def ctc_loss_batch(
    logits: torch.Tensor,  # (B, T, V)
    targets: list[list[int]],
    lengths: torch.Tensor,  # (B,)
) -> torch.Tensor:
    """Mean per-utterance CTC loss over a padded batch."""
    losses = []
    for b, target in enumerate(targets):
        losses.append(ctc_loss(logits[b, : int(lengths[b])], target))
    return torch.stack(losses).mean()


def greedy_decode(logits: np.ndarray) -> str:
    """Best-path decoding: per-frame argmax (ties to the lowest index),
    collapse adjacent repeats, drop blanks."""
    path = np.argmax(np.asarray(logits), axis=-1)
    out = []
    prev = -1
    for p in path:
        if p != prev and p != BLANK:
            out.append(int(p))
        prev = p
    return ids_to_text(out)


class CharNGramLM:
    """Add-k smoothed character n-gram over the 28 transcript symbols plus an
    end marker; contexts are padded with a start marker."""

    def __init__(self, order: int, k: float):
        if order < 1:
            raise DataError(f"LM order must be >= 1, got {order}")
        if k <= 0:
            raise DataError(f"add-k smoothing needs k > 0, got {k}")
        self.order = order
        self.k = k
        self.alphabet = list(ALPHABET) + [END]
        self._index = {c: i for i, c in enumerate(self.alphabet)}
        self.counts: dict[tuple, np.ndarray] = {}

    @classmethod
    def fit(cls, texts: list[str], order: int, k: float) -> "CharNGramLM":
        if not texts:
            raise DataError("cannot fit a language model on an empty corpus")
        lm = cls(order, k)
        for text in texts:
            chars = list(text)
            context = [START] * (order - 1)
            for c in chars:
                key = tuple(context)
                if key not in lm.counts:
                    lm.counts[key] = np.zeros(len(lm.alphabet))
                lm.counts[key][lm._index[c]] += 1
                context = (context + [c])[-(order - 1):] if order > 1 else []
        return lm

    def logp(self, char: str, context: list[str]) -> float:
        """log P(char | last order-1 context symbols), add-k smoothed."""
        if self.order > 1:
            ctx = ([START] * (self.order - 1) + context)[-(self.order - 1):]
        else:
            ctx = []
        row = self.counts.get(tuple(ctx))
        a = len(self.alphabet)
        if row is None:
            return -math.log(a)
        count = row[self._index[char]]
        return math.log((count + self.k) / (row.sum() + self.k * a))

    def score(self, text: str, include_end: bool = False) -> float:
        total = 0.0
        context: list[str] = []
        for c in text:
            total += self.logp(c, context)
            context.append(c)
        if include_end:
            total += self.logp(END, context)
        return total

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "k": self.k,
            "counts": {"|".join(ctx): row.tolist() for ctx, row in self.counts.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CharNGramLM":
        lm = cls(d["order"], d["k"])
        for key, row in d["counts"].items():
            ctx = tuple(key.split("|")) if key else tuple()
            lm.counts[ctx] = np.asarray(row, dtype=np.float64)
        return lm

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "CharNGramLM":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def beam_decode(
    logits: np.ndarray,
    beam_width: int,
    lm: CharNGramLM | None = None,
    lm_weight: float = 0.0,
    length_bonus: float = 0.0,
    symbols: str = ALPHABET,
) -> str:
    """CTC prefix beam search.

    Maintains (blank, non-blank) log mass per prefix; candidate score is
    log P_ctc(prefix) + lm_weight*log P_lm(prefix) + length_bonus*|prefix|.
    Ties break to the lexicographically smaller prefix.
    """
    if beam_width < 1:
        raise DataError(f"beam width must be >= 1, got {beam_width}")
    logits = np.asarray(logits, dtype=np.float64)
    T, V = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    NEG = float("-inf")
    # prefix (tuple of symbol chars) -> [log_p_blank, log_p_nonblank]
    beams: dict[tuple, list[float]] = {(): [0.0, NEG]}
    lm_cache: dict[tuple, float] = {(): 0.0}

    def ext_score(prefix: tuple) -> float:
        score = 0.0
        if lm is not None and lm_weight != 0.0:
            if prefix not in lm_cache:
                parent = prefix[:-1]
                if parent not in lm_cache:
                    lm_cache[parent] = lm.score("".join(parent))
                lm_cache[prefix] = lm_cache[parent] + lm.logp(prefix[-1], list(parent))
            score += lm_weight * lm_cache[prefix]
        return score + length_bonus * len(prefix)

    def total(entry: list[float]) -> float:
        return float(np.logaddexp(entry[0], entry[1]))

    for t in range(T):
        lp = log_probs[t]
        nxt: dict[tuple, list[float]] = {}

        def bump(prefix: tuple, which: int, value: float):
            entry = nxt.setdefault(prefix, [NEG, NEG])
            entry[which] = float(np.logaddexp(entry[which], value))

        for prefix, (pb, pnb) in beams.items():
            p_total = float(np.logaddexp(pb, pnb))
            bump(prefix, 0, p_total + lp[BLANK])  # blank keeps the prefix
            for v in range(1, V):
                c = symbols[v - 1]
                if prefix and prefix[-1] == c:
                    bump(prefix, 1, pnb + lp[v])  # repeat merges
                    bump(prefix + (c,), 1, pb + lp[v])  # blank-separated repeat
                else:
                    bump(prefix + (c,), 1, p_total + lp[v])
        ranked = sorted(
            nxt.items(),
            key=lambda kv: (-(total(kv[1]) + ext_score(kv[0])), kv[0]),
        )
        beams = dict(ranked[:beam_width])

    best = min(beams.items(), key=lambda kv: (-(total(kv[1]) + ext_score(kv[0])), kv[0]))
    return "".join(best[0])
