"""Waveform frontend, transformer encoder with per-block residual adapters,
and exact parameter accounting.

Frames are produced at a 20 ms hop (total conv stride 320 at 16 kHz). The
transformer is pre-LN with sinusoidal absolute positions; each block is
followed by a bottleneck adapter (LN -> down -> ReLU -> up, added residually)
whose up-projection is zero-initialized so a fresh adapter is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config, parse_conv_stack
from .errors import DataError

LN_EPS = 1e-5


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, d) float64
    hop: float = 0.02


def sinusoidal_positions(max_len: int, d: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    i = torch.arange(d, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * torch.div(i, 2, rounding_mode="floor")) / d)
    table = torch.zeros(max_len, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle[:, 0::2])
    table[:, 1::2] = torch.cos(angle[:, 1::2])
    return table


def _init_linear(m: nn.Linear, std: float = 0.02) -> None:
    nn.init.normal_(m.weight, mean=0.0, std=std)
    if m.bias is not None:
        nn.init.zeros_(m.bias)


class ConvFrontend(nn.Module):
    """Stack of bias-free strided 1-D convolutions with GELU, mapping raw
    samples to 20 ms frames; optional bias-free projection to d when the last
    conv width differs from d."""

    def __init__(self, conv_stack: list[tuple[int, int, int]], d: int):
        super().__init__()
        self.layers = nn.ModuleList()
        in_ch = 1
        for out_ch, kernel, stride in conv_stack:
            conv = nn.Conv1d(in_ch, out_ch, kernel_size=kernel, stride=stride, bias=False)
            # He scaling keeps frame magnitudes O(1) so content is not drowned
            # by the positional encodings downstream
            nn.init.normal_(conv.weight, mean=0.0, std=math.sqrt(2.0 / (in_ch * kernel)))
            self.layers.append(conv)
            in_ch = out_ch
        self.stack = conv_stack
        self.proj = None
        if in_ch != d:
            self.proj = nn.Linear(in_ch, d, bias=False)
            _init_linear(self.proj)

    def min_samples(self) -> int:
        # smallest input length yielding one frame
        need = 1
        for _, kernel, stride in reversed(self.stack):
            need = (need - 1) * stride + kernel
        return need

    def output_length(self, n_samples: int) -> int:
        t = n_samples
        for _, kernel, stride in self.stack:
            t = (t - kernel) // stride + 1
        return t

    def forward(self, samples: torch.Tensor) -> torch.Tensor:
        """samples: (B, n) -> frames (B, T, d)."""
        if samples.shape[-1] < self.min_samples():
            raise DataError(
                f"waveform of {samples.shape[-1]} samples is shorter than the "
                f"frontend receptive field ({self.min_samples()})"
            )
        x = samples[:, None, :]
        for conv in self.layers:
            # unfold + matmul instead of conv1d: same arithmetic, but runs on
            # the BLAS path, which is much faster in binary64
            k, s = conv.kernel_size[0], conv.stride[0]
            windows = x.unfold(2, k, s)  # (B, C_in, T_out, k)
            x = F.gelu(torch.einsum("bcts,dcs->bdt", windows, conv.weight))
        x = x.transpose(1, 2)
        if self.proj is not None:
            x = self.proj(x)
        return x


class Adapter(nn.Module):
    """Residual bottleneck adapter; identity map at initialization."""

    def __init__(self, d: int, bottleneck: int):
        super().__init__()
        self.ln = nn.LayerNorm(d, eps=LN_EPS)
        self.down = nn.Linear(d, bottleneck)
        self.up = nn.Linear(bottleneck, d)
        _init_linear(self.down)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.up(F.relu(self.down(self.ln(h))))


class TransformerBlock(nn.Module):
    """Pre-LN multi-head self-attention followed by a pre-LN GELU FFN."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        if d % heads != 0:
            raise DataError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.ln1 = nn.LayerNorm(d, eps=LN_EPS)
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d, eps=LN_EPS)
        self.ff1 = nn.Linear(d, ffn)
        self.ff2 = nn.Linear(ffn, d)
        for m in (self.wq, self.wk, self.wv, self.wo, self.ff1, self.ff2):
            _init_linear(m)

    def attention(
        self, x: torch.Tensor, key_valid: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, d = x.shape
        hd = d // self.heads

        def split(t):
            return t.view(B, T, self.heads, hd).transpose(1, 2)  # (B, H, T, hd)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(hd)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = torch.matmul(weights, v).transpose(1, 2).reshape(B, T, d)
        return self.wo(ctx), weights

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        attn_out, _ = self.attention(self.ln1(x), key_valid)
        x = x + attn_out
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x


class TransformerEncoder(nn.Module):
    """N blocks with per-block adapters, a learned mask embedding and a final
    layer norm. Returns all N post-adapter layer outputs."""

    def __init__(self, d: int, n_blocks: int, heads: int, ffn: int, bottleneck: int,
                 max_positions: int = 4096):
        super().__init__()
        self.d = d
        self.n_blocks = n_blocks
        self.blocks = nn.ModuleList(
            TransformerBlock(d, heads, ffn) for _ in range(n_blocks)
        )
        self.adapters = nn.ModuleList(
            Adapter(d, bottleneck) for _ in range(n_blocks)
        ) if bottleneck > 0 else nn.ModuleList()
        self.mask_embedding = nn.Parameter(torch.randn(d) * 0.02)
        self.final_ln = nn.LayerNorm(d, eps=LN_EPS)
        self.register_buffer("positions", sinusoidal_positions(max_positions, d))

    @property
    def has_adapters(self) -> bool:
        return len(self.adapters) > 0

    def forward(
        self,
        frames: torch.Tensor,  # (B, T, d)
        valid: torch.Tensor | None = None,  # (B, T) bool, True where real
        mask_rows: torch.Tensor | None = None,  # (B, T) bool, True -> mask emb
        adapters_enabled: bool = True,
    ) -> list[torch.Tensor]:
        B, T, d = frames.shape
        if T > self.positions.shape[0]:
            raise DataError(f"sequence length {T} exceeds positional table")
        x = frames
        if mask_rows is not None:
            x = torch.where(mask_rows[:, :, None], self.mask_embedding, x)
        x = x + self.positions[:T].to(x.dtype)[None]
        per_layer = []
        use_adapters = adapters_enabled and self.has_adapters
        for i, block in enumerate(self.blocks):
            x = block(x, valid)
            if use_adapters:
                x = self.adapters[i](x)
            per_layer.append(x)
        return per_layer

    def ssl_features(self, per_layer: list[torch.Tensor]) -> torch.Tensor:
        return self.final_ln(per_layer[-1])


def encoder_forward(
    enc: TransformerEncoder,
    frames: np.ndarray,
    mask_indices: np.ndarray | None = None,
    adapters_enabled: bool = True,
) -> list[np.ndarray]:
    """Single-utterance convenience wrapper over TransformerEncoder.forward."""
    T = frames.shape[0]
    x = torch.as_tensor(frames, dtype=torch.float64)[None]
    mask_rows = None
    if mask_indices is not None and len(mask_indices):
        idx = np.asarray(mask_indices)
        if int(idx.max()) >= T:
            raise DataError(f"mask index {int(idx.max())} out of range for T={T}")
        mask_rows = torch.zeros(1, T, dtype=torch.bool)
        mask_rows[0, idx] = True
    with torch.no_grad():
        per_layer = enc.forward(x, mask_rows=mask_rows, adapters_enabled=adapters_enabled)
    return [layer[0].numpy() for layer in per_layer]


def count_params(cfg: Config) -> dict[str, float]:
    """Exact per-group parameter counts from a config, without instantiating
    tensors; adapter share is a percentage of the base (frontend + encoder +
    projection) count."""
    d = cfg["model.d"]
    n = cfg["model.N"]
    ffn = cfg["model.ffn"]
    b_ada = cfg["model.B_ada"]
    c = cfg["model.C"]
    h = cfg["model.lstm_hidden"]
    vocab = 29
    conv = parse_conv_stack(cfg["model.conv_stack"])

    theta_f = 0
    in_ch = 1
    for out_ch, kernel, _ in conv:
        theta_f += out_ch * in_ch * kernel
        in_ch = out_ch
    if in_ch != d:
        theta_f += in_ch * d  # bias-free projection

    per_block = 4 * (d * d + d) + (d * ffn + ffn) + (ffn * d + d) + 2 * (2 * d)
    theta_t = n * per_block + 2 * d + d  # + final LN + mask embedding

    theta_a = d * c + c

    theta_ada = n * (2 * d + d * b_ada + b_ada + b_ada * d + d) if b_ada > 0 else 0

    lstm = 0
    in_dim = d
    for _ in range(cfg["model.lstm_layers"]):
        lstm += 2 * (4 * h * in_dim + 4 * h * h + 4 * h)  # both directions
        in_dim = 2 * h
    theta_d = n + lstm + (2 * h * vocab + vocab)

    base = theta_f + theta_t + theta_a
    return {
        "theta_f": theta_f,
        "theta_T": theta_t,
        "theta_A": theta_a,
        "theta_ada": theta_ada,
        "theta_d": theta_d,
        "base_total": base,
        "adapter_share_pct": 100.0 * theta_ada / base,
    }
