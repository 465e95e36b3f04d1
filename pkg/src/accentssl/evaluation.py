"""WER/WERR metrics, the finite-difference gradient-check harness, and the
accent-adaptation report (delimited table plus rendered figures)."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import asr_head
from .asr_head import (BiLstmDecoder, CharNGramLM, beam_decode, ctc_loss,
                       greedy_decode)
from .config import Config
from .data_io import Manifest
from .encoder import Adapter, ConvFrontend, TransformerBlock
from .errors import DataError
from .pipeline import (Checkpoint, batch_tensors, load_audio, make_batches,
                       model_from_checkpoint, valid_mask)
from .ssl_head import Projection, ssl_loss_from_logits


@dataclass
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def wer(self) -> float:
        return (self.substitutions + self.deletions + self.insertions) / self.ref_words


@dataclass
class WerrResult:
    wer_base: float
    wer_new: float

    @property
    def werr_pct(self) -> float:
        return 100.0 * (self.wer_base - self.wer_new) / self.wer_base


def tokenize(text: str) -> list[str]:
    return [w for w in text.strip().split(" ") if w]


def wer(ref: list[str] | str, hyp: list[str] | str) -> WerResult:
    """Minimum edit distance at the word level with unit costs; cost ties
    prefer fewer insertions, then fewer deletions."""
    if isinstance(ref, str):
        ref = tokenize(ref)
    if isinstance(hyp, str):
        hyp = tokenize(hyp)
    if not ref:
        raise DataError("WER is undefined for an empty reference")
    n, m = len(ref), len(hyp)
    # dp[i][j] = (cost, insertions, deletions) aligning ref[:i] to hyp[:j]
    dp = [[(0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = (i, 0, i)
    for j in range(1, m + 1):
        dp[0][j] = (j, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub_cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            c, ins, dels = dp[i - 1][j - 1]
            cands = [(c + sub_cost, ins, dels)]
            c, ins, dels = dp[i][j - 1]
            cands.append((c + 1, ins + 1, dels))
            c, ins, dels = dp[i - 1][j]
            cands.append((c + 1, ins, dels + 1))
            dp[i][j] = min(cands)
    cost, ins, dels = dp[n][m]
    return WerResult(
        substitutions=cost - ins - dels,
        deletions=dels,
        insertions=ins,
        ref_words=n,
    )


def werr(wer_base: float, wer_new: float) -> WerrResult:
    if wer_base <= 0:
        raise DataError(f"WERR needs a positive baseline WER, got {wer_base}")
    return WerrResult(wer_base=wer_base, wer_new=wer_new)


def wer_from_werr(wer_base: float, werr_pct: float) -> float:
    """Invert the relative-reduction formula: the new WER implied by a
    baseline WER and a WERR percentage."""
    if wer_base <= 0:
        raise DataError(f"WERR needs a positive baseline WER, got {wer_base}")
    return wer_base * (1.0 - werr_pct / 100.0)


# ---------------------------------------------------------------------------
# gradient checking

GRADCHECK_COMPONENTS = (
    "frontend", "block", "adapter", "ssl_head", "weighted_sum", "bilstm", "ctc",
)


@dataclass
class GradCheckReport:
    component: str
    max_rel_err: float
    worst_param: str
    n_params: int


def _probe_loss(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    probe = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    return (out * probe).sum()


def _build_instance(component: str, seed: int):
    """Returns (module_or_params, loss_fn) with <= 5k parameters."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    if component == "frontend":
        mod = ConvFrontend([(4, 6, 4), (6, 10, 10), (8, 8, 8)], 8).double()
        x = torch.randn(1, 400, generator=gen, dtype=torch.float64)
        return mod, lambda: _probe_loss(mod(x), torch.Generator().manual_seed(seed + 2))
    if component == "block":
        mod = TransformerBlock(8, 2, 16).double()
        x = torch.randn(1, 5, 8, generator=gen, dtype=torch.float64)
        return mod, lambda: _probe_loss(mod(x), torch.Generator().manual_seed(seed + 2))
    if component == "adapter":
        mod = Adapter(4, 2).double()
        with torch.no_grad():  # zero-init up would zero most gradients
            torch.manual_seed(seed + 3)
            mod.up.weight.normal_(0, 0.1)
            mod.up.bias.normal_(0, 0.1)
        x = torch.randn(6, 4, generator=gen, dtype=torch.float64)
        return mod, lambda: _probe_loss(mod(x), torch.Generator().manual_seed(seed + 2))
    if component == "ssl_head":
        mod = Projection(6, 5).double()
        x = torch.randn(7, 6, generator=gen, dtype=torch.float64)
        targets = torch.randint(0, 5, (7,), generator=gen)
        mask = torch.tensor([0, 2, 5])
        return mod, lambda: ssl_loss_from_logits(mod(x), targets, mask)
    if component == "weighted_sum":
        raw = torch.nn.Parameter(torch.randn(3, generator=gen, dtype=torch.float64))
        mod = torch.nn.ParameterDict({"raw": raw})
        layers = [torch.randn(4, 5, generator=gen, dtype=torch.float64) for _ in range(3)]

        def loss():
            w = torch.softmax(mod["raw"], dim=0)
            out = sum(wi * layer for wi, layer in zip(w, layers))
            return _probe_loss(out, torch.Generator().manual_seed(seed + 2))

        return mod, loss
    if component == "bilstm":
        mod = BiLstmDecoder(4, 3, n_layers=1, vocab_size=5).double()
        x = torch.randn(1, 4, 4, generator=gen, dtype=torch.float64)
        return mod, lambda: _probe_loss(mod(x), torch.Generator().manual_seed(seed + 2))
    if component == "ctc":
        logits = torch.nn.Parameter(torch.randn(4, 4, generator=gen, dtype=torch.float64))
        mod = torch.nn.ParameterDict({"logits": logits})
        return mod, lambda: ctc_loss(mod["logits"], [1, 2])
    raise DataError(f"unknown gradcheck component {component!r}")


def gradcheck(component: str, seed: int = 0, eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a scalar probe loss against central
    finite differences, elementwise over every parameter."""
    mod, loss_fn = _build_instance(component, seed)
    params = dict(mod.named_parameters())
    n_params = sum(p.numel() for p in params.values())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    max_rel, worst = 0.0, ""
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(g.reshape(-1)[i])
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
                if rel > max_rel:
                    max_rel, worst = rel, f"{name}[{i}]"
    return GradCheckReport(component=component, max_rel_err=max_rel,
                           worst_param=worst, n_params=n_params)


# ---------------------------------------------------------------------------
# decoding and the experiment report


def decode_manifest(
    ckpt: Checkpoint, manifest: Manifest, cfg: Config | None = None,
    lm: CharNGramLM | None = None,
) -> dict[str, str]:
    """Decode every utterance; returns id -> hypothesis."""
    if cfg is None:
        cfg = ckpt.cfg()
    model = model_from_checkpoint(ckpt)
    items = load_audio(manifest, model.frontend)
    hyps: dict[str, str] = {}
    mode = cfg["decode.mode"]
    with torch.no_grad():
        for batch in make_batches(items, cfg["stage.max_frames_per_batch"]):
            samples, lengths = batch_tensors(batch)
            frames = model.frontend(samples)
            per_layer = model.encoder(frames, valid=valid_mask(lengths, frames.shape[1]))
            logits = model.decoder(per_layer, lengths)
            for b, u in enumerate(batch):
                mat = logits[b, : u.n_frames].numpy()
                if mode == "beam":
                    hyps[u.utt.id] = beam_decode(
                        mat, cfg["decode.beam"], lm=lm,
                        lm_weight=cfg["decode.lm_weight"] if lm else 0.0,
                        length_bonus=cfg["decode.length_bonus"],
                    )
                else:
                    hyps[u.utt.id] = greedy_decode(mat)
    return hyps


def manifest_wer(manifest: Manifest, hyps: dict[str, str]) -> float:
    total_edits, total_words = 0, 0
    for utt in manifest.utterances:
        if utt.transcript is None:
            raise DataError(f"eval utterance {utt.id!r} has no transcript")
        r = wer(utt.transcript, hyps[utt.id])
        total_edits += r.substitutions + r.deletions + r.insertions
        total_words += r.ref_words
    return total_edits / total_words


@dataclass
class ReportRow:
    model: str
    dataset: str
    wer: float
    werr_pct: float | None  # None for the baseline rows


def experiment_report(
    baseline: Checkpoint,
    adapted: dict[str, Checkpoint],
    eval_manifests: dict[str, Manifest],
    cfg: Config | None = None,
    lm: CharNGramLM | None = None,
) -> list[ReportRow]:
    """Decode every manifest with the baseline and each adapted checkpoint;
    WERR is relative to the baseline on the same dataset."""
    for name, ck in adapted.items():
        if ck.cfg()["model.C"] != baseline.cfg()["model.C"]:
            raise DataError(f"checkpoint {name!r} has a different unit vocabulary")
    rows: list[ReportRow] = []
    base_wer: dict[str, float] = {}
    for ds_name, manifest in sorted(eval_manifests.items()):
        hyps = decode_manifest(baseline, manifest, cfg, lm)
        w = manifest_wer(manifest, hyps)
        base_wer[ds_name] = w
        rows.append(ReportRow("baseline", ds_name, w, None))
    for model_name, ck in sorted(adapted.items()):
        for ds_name, manifest in sorted(eval_manifests.items()):
            hyps = decode_manifest(ck, manifest, cfg, lm)
            w = manifest_wer(manifest, hyps)
            r = None
            if base_wer[ds_name] > 0:
                r = werr(base_wer[ds_name], w).werr_pct
            rows.append(ReportRow(model_name, ds_name, w, r))
    return rows


def write_report(rows: list[ReportRow], out_dir: str) -> None:
    """Emit report.tsv, a plain-text summary, and bar-chart figures."""
    os.makedirs(out_dir, exist_ok=True)
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("model\tdataset\twer\twerr_pct\n")
        for r in rows:
            rr = "" if r.werr_pct is None else f"{r.werr_pct:.4f}"
            fh.write(f"{r.model}\t{r.dataset}\t{r.wer:.6f}\t{rr}\n")
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(f"{'model':<20}{'dataset':<20}{'WER %':>10}{'WERR %':>10}\n")
        for r in rows:
            rr = "-" if r.werr_pct is None else f"{r.werr_pct:8.2f}"
            fh.write(f"{r.model:<20}{r.dataset:<20}{100 * r.wer:10.2f}{rr:>10}\n")

    models = sorted({r.model for r in rows})
    datasets = sorted({r.dataset for r in rows})
    width = 0.8 / len(models)
    fig, ax = plt.subplots(figsize=(1.5 + 1.6 * len(datasets), 4))
    for mi, model in enumerate(models):
        vals = [
            next((100 * r.wer for r in rows if r.model == model and r.dataset == d),
                 math.nan)
            for d in datasets
        ]
        ax.bar(np.arange(len(datasets)) + mi * width, vals, width, label=model)
    ax.set_xticks(np.arange(len(datasets)) + 0.4 - width / 2)
    ax.set_xticklabels(datasets)
    ax.set_ylabel("WER (%)")
    ax.set_title("Word error rate by model and evaluation set")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "wer_by_model.png"), dpi=120)
    plt.close(fig)

    adapted_models = [m for m in models if any(
        r.model == m and r.werr_pct is not None for r in rows)]
    if adapted_models:
        fig, ax = plt.subplots(figsize=(1.5 + 1.6 * len(datasets), 4))
        for mi, model in enumerate(adapted_models):
            vals = [
                next((r.werr_pct for r in rows
                      if r.model == model and r.dataset == d
                      and r.werr_pct is not None), math.nan)
                for d in datasets
            ]
            ax.bar(np.arange(len(datasets)) + mi * width, vals, width, label=model)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_xticks(np.arange(len(datasets)) + 0.4 - width / 2)
        ax.set_xticklabels(datasets)
        ax.set_ylabel("WERR (%) vs baseline")
        ax.set_title("Relative WER reduction over the baseline")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(fig_dir, "werr_by_model.png"), dpi=120)
        plt.close(fig)
