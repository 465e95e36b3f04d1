"""Three-stage training orchestration: generic SSL pretraining, accent-adaptive
SSL (full or adapters-only), and CTC fine-tuning of the decoder head.

Freezing contracts are exact (frozen tensors stay bit-identical), runs are
deterministic given the stage seed, and checkpoints round-trip bit-for-bit
through a CRC-protected binary container.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import pickle
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .asr_head import DecoderHead, ctc_loss, min_frames_for, text_to_ids
from .config import Config, parse_conv_stack
from .data_io import Manifest, Utterance, Waveform, read_wav
from .encoder import ConvFrontend, TransformerEncoder
from .errors import CheckpointError, ConfigError, DataError, NonFiniteGradientError
from .masking import MaskSpec, effective_span
from .ssl_head import Projection
from .units import ClusterCodebook, assign, fit_kmeans

CHECKPOINT_MAGIC = b"ACSC"
CHECKPOINT_VERSION = 1

GROUPS = ("theta_f", "theta_T", "theta_A", "theta_ada", "theta_d")

# stage -> trainable parameter groups
FREEZE_SETS = {
    "pretrain": {"theta_f", "theta_T", "theta_A"},
    "adapt_full": {"theta_f", "theta_T", "theta_A"},
    "adapt_adapters": {"theta_ada"},
    "finetune": {"theta_d"},
}


def group_of(param_name: str) -> str:
    if param_name.startswith("frontend."):
        return "theta_f"
    if param_name.startswith("encoder.adapters."):
        return "theta_ada"
    if param_name.startswith("encoder."):
        return "theta_T"
    if param_name.startswith("proj."):
        return "theta_A"
    if param_name.startswith("decoder."):
        return "theta_d"
    raise ValueError(f"parameter {param_name!r} belongs to no group")


class SpeechModel(nn.Module):
    """Frontend + transformer encoder (with adapters) + SSL projection +
    CTC decoder head, all in binary64."""

    def __init__(self, cfg: Config):
        super().__init__()
        d = cfg["model.d"]
        self.frontend = ConvFrontend(parse_conv_stack(cfg["model.conv_stack"]), d)
        self.encoder = TransformerEncoder(
            d, cfg["model.N"], cfg["model.heads"], cfg["model.ffn"],
            cfg["model.B_ada"], cfg["model.max_positions"],
        )
        self.proj = Projection(d, cfg["model.C"])
        self.decoder = DecoderHead(
            cfg["model.N"], d, cfg["model.lstm_hidden"], cfg["model.lstm_layers"]
        )


def build_model(cfg: Config, seed: int) -> SpeechModel:
    torch.manual_seed(seed)
    model = SpeechModel(cfg)
    model.to(torch.float64)
    return model


def set_trainable(model: SpeechModel, trainable_groups: set[str]) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(group_of(name) in trainable_groups)


def model_tensors(model: SpeechModel) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy().astype(np.float64, copy=True)
        for name, p in model.named_parameters()
    }


def load_tensors(model: SpeechModel, tensors: dict[str, np.ndarray]) -> None:
    names = {n for n, _ in model.named_parameters()}
    missing = names - tensors.keys()
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"tensor {name!r} shape {arr.shape} != model shape {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr))


def group_hashes(tensors: dict[str, np.ndarray]) -> dict[str, str]:
    """SHA-256 per parameter group over the raw binary64 payloads."""
    hashers = {g: hashlib.sha256() for g in GROUPS}
    for name in sorted(tensors):
        h = hashers[group_of(name)]
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return {g: h.hexdigest() for g, h in hashers.items()}


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(cfg: Config, step: int) -> float:
    """Linear warmup to peak_lr, then polynomial decay to zero (or constant)."""
    warmup = cfg["stage.warmup_steps"]
    max_steps = cfg["stage.max_steps"]
    peak = cfg["stage.peak_lr"]
    if not (1 <= step <= max_steps):
        raise ConfigError(f"step {step} outside [1, {max_steps}]")
    if warmup > max_steps:
        raise ConfigError(f"warmup_steps {warmup} > max_steps {max_steps}")
    if step <= warmup and warmup > 0:
        return peak * step / warmup
    if cfg["stage.decay"] == "constant":
        return peak
    power = cfg["stage.decay_power"]
    denom = max_steps - warmup
    if denom == 0:
        return peak
    return peak * ((max_steps - step) / denom) ** power


class Adam:
    """Plain Adam (bias-corrected, no weight decay) over named tensors.

    A step first validates every gradient and only then mutates state, so a
    non-finite gradient aborts with parameters and moments untouched.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t = 0

    def step(self, named_params: dict[str, torch.Tensor], lr: float) -> None:
        grads = {}
        for name, p in named_params.items():
            if p.grad is None:
                continue
            if not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name!r}; step aborted"
                )
            grads[name] = p.grad
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        with torch.no_grad():
            for name, g in grads.items():
                p = named_params[name]
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                self.m[name].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                self.v[name].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                m_hat = self.m[name] / bc1
                v_hat = self.v[name] / bc2
                p.addcdiv_(m_hat, v_hat.sqrt().add_(self.eps), value=-lr)


def train_step(
    model: SpeechModel, opt: Adam, lr: float, trainable_groups: set[str]
) -> None:
    """Apply one Adam update to the trainable groups only; frozen tensors are
    never touched (they are excluded, not zero-gradded)."""
    named = {
        name: p
        for name, p in model.named_parameters()
        if group_of(name) in trainable_groups
    }
    opt.step(named, lr)


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    config: dict
    stage_chain: list[str]
    tensors: dict[str, np.ndarray]
    codebook: ClusterCodebook | None = None
    rng_state: dict = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def cfg(self) -> Config:
        return Config(self.config)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    records = [(name, ckpt.tensors[name]) for name in sorted(ckpt.tensors)]
    if ckpt.codebook is not None:
        records.append(("__codebook__", ckpt.codebook.centroids))
    header = {
        "config": ckpt.config,
        "stage_chain": ckpt.stage_chain,
        "metrics": ckpt.metrics,
        "rng_state": ckpt.rng_state,
        "codebook": None
        if ckpt.codebook is None
        else {
            "feature_source": ckpt.codebook.feature_source,
            "fit_seed": ckpt.codebook.fit_seed,
        },
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in records],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", ckpt.version)
    body += struct.pack("<Q", len(header_bytes))
    body += header_bytes
    for _, arr in records:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupted")
    (version,) = struct.unpack("<I", body[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16 : 16 + header_len].decode())
    offset = 16 + header_len
    tensors = {}
    codebook_arr = None
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = body[offset : offset + 8 * count]
        if len(raw) != 8 * count:
            raise CheckpointError(f"{path}: truncated tensor payload for {rec['name']}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        offset += 8 * count
        if rec["name"] == "__codebook__":
            codebook_arr = arr
        else:
            tensors[rec["name"]] = arr
    codebook = None
    if header["codebook"] is not None:
        if codebook_arr is None:
            raise CheckpointError(f"{path}: codebook metadata without centroids")
        codebook = ClusterCodebook(
            centroids=codebook_arr,
            feature_source=header["codebook"]["feature_source"],
            fit_seed=header["codebook"]["fit_seed"],
        )
    return Checkpoint(
        config=header["config"],
        stage_chain=header["stage_chain"],
        tensors=tensors,
        codebook=codebook,
        rng_state=header["rng_state"],
        metrics=header["metrics"],
        version=version,
    )


def capture_rng_state(np_rng: np.random.Generator) -> dict:
    return {
        "numpy": base64.b64encode(pickle.dumps(np_rng.bit_generator.state)).decode(),
        "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
    }


def write_metrics(metrics: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class LoadedUtterance:
    utt: Utterance
    samples: np.ndarray
    n_frames: int


def load_audio(manifest: Manifest, frontend: ConvFrontend) -> list[LoadedUtterance]:
    out = []
    for utt in manifest.utterances:
        w = utt.audio if isinstance(utt.audio, Waveform) else read_wav(utt.audio)
        n_frames = frontend.output_length(len(w.samples))
        if n_frames < 1:
            continue
        out.append(LoadedUtterance(utt=utt, samples=w.samples, n_frames=n_frames))
    if not out:
        raise DataError("no usable utterances (empty manifest or all too short)")
    return out


def split_train_val(
    items: list[LoadedUtterance], val_fraction: float
) -> tuple[list[LoadedUtterance], list[LoadedUtterance]]:
    if len(items) < 2:
        raise DataError("need at least 2 utterances to split train/val")
    stride = max(2, int(round(1.0 / max(val_fraction, 1e-9))))
    val = [u for i, u in enumerate(items) if i % stride == 0]
    train = [u for i, u in enumerate(items) if i % stride != 0]
    return train, val


def make_batches(
    items: list[LoadedUtterance], max_frames: int
) -> list[list[LoadedUtterance]]:
    """Length-bucketed batches capped by total frame count."""
    ordered = sorted(items, key=lambda u: (u.n_frames, u.utt.id))
    batches: list[list[LoadedUtterance]] = []
    cur: list[LoadedUtterance] = []
    cur_frames = 0
    for u in ordered:
        if cur and cur_frames + u.n_frames > max_frames:
            batches.append(cur)
            cur, cur_frames = [], 0
        cur.append(u)
        cur_frames += u.n_frames
    if cur:
        batches.append(cur)
    return batches


def batch_tensors(batch: list[LoadedUtterance]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad raw samples; returns (samples (B, n_max), frame_lengths (B,))."""
    n_max = max(len(u.samples) for u in batch)
    samples = torch.zeros(len(batch), n_max, dtype=torch.float64)
    lengths = torch.zeros(len(batch), dtype=torch.long)
    for b, u in enumerate(batch):
        samples[b, : len(u.samples)] = torch.from_numpy(u.samples)
        lengths[b] = u.n_frames
    return samples, lengths


def valid_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    return torch.arange(T)[None, :] < lengths[:, None]


# ---------------------------------------------------------------------------
# feature extraction / targets


def extract_features(
    model: SpeechModel,
    items: list[LoadedUtterance],
    source: str,
    max_frames: int = 4000,
) -> dict[str, np.ndarray]:
    """Per-utterance features for unit discovery: the frontend frames, or one
    encoder layer's output (clean input, no masking)."""
    feats: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for batch in make_batches(items, max_frames):
            samples, lengths = batch_tensors(batch)
            frames = model.frontend(samples)
            T = frames.shape[1]
            if source == "frontend":
                out = frames
            elif source.startswith("layer:"):
                layer = int(source.split(":", 1)[1])
                per_layer = model.encoder(
                    frames, valid=valid_mask(lengths, T), adapters_enabled=True
                )
                out = per_layer[layer]
            else:
                raise ConfigError(f"unknown feature source {source!r}")
            for b, u in enumerate(batch):
                feats[u.utt.id] = out[b, : u.n_frames].numpy().copy()
    return feats


def resolve_unit_source(cfg: Config) -> str:
    if cfg["units.source"] == "frontend":
        return "frontend"
    layer = cfg["units.layer"]
    if layer < 0:
        layer = cfg["model.N"] // 2
    return f"layer:{layer}"


def fit_codebook(
    model: SpeechModel,
    items: list[LoadedUtterance],
    cfg: Config,
    source: str,
    seed: int,
    max_points: int = 20000,
) -> ClusterCodebook:
    feats = extract_features(model, items, source)
    chunks, total = [], 0
    for u in items:
        f = feats[u.utt.id]
        chunks.append(f)
        total += len(f)
        if total >= max_points:
            break
    points = np.concatenate(chunks)[:max_points]
    cb = fit_kmeans(points, cfg["model.C"], cfg["units.max_iters"], seed)
    return ClusterCodebook(cb.centroids, feature_source=source, fit_seed=seed)


def assign_targets(
    model: SpeechModel, items: list[LoadedUtterance], cb: ClusterCodebook
) -> dict[str, np.ndarray]:
    feats = extract_features(model, items, cb.feature_source)
    return {uid: assign(cb, f) for uid, f in feats.items()}


# ---------------------------------------------------------------------------
# SSL objective over a batch


def ssl_batch_loss(
    model: SpeechModel,
    batch: list[LoadedUtterance],
    targets: dict[str, np.ndarray],
    mask_spec: MaskSpec,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, int]:
    """Masked-prediction loss over one padded batch; mean NLL per masked frame."""
    samples, lengths = batch_tensors(batch)
    frames = model.frontend(samples)
    B, T, _ = frames.shape
    mask_rows = torch.zeros(B, T, dtype=torch.bool)
    target_mat = torch.zeros(B, T, dtype=torch.long)
    for b, u in enumerate(batch):
        Tb = u.n_frames
        l = effective_span(mask_spec.span, Tb)
        starts = np.flatnonzero(rng.random(Tb) < mask_spec.start_prob)
        if starts.size == 0:
            starts = np.array([int(rng.integers(0, Tb))])  # guarantee >= 1 span
        m = np.zeros(Tb, dtype=bool)
        for s in starts:
            m[s : min(s + l, Tb)] = True
        mask_rows[b, :Tb] = torch.from_numpy(m)
        target_mat[b, :Tb] = torch.from_numpy(targets[u.utt.id])
    valid = valid_mask(lengths, T)
    per_layer = model.encoder(frames, valid=valid, mask_rows=mask_rows)
    logits = model.proj(model.encoder.ssl_features(per_layer))
    pick = mask_rows & valid
    log_probs = torch.log_softmax(logits[pick], dim=-1)
    chosen = log_probs.gather(1, target_mat[pick][:, None]).squeeze(1)
    return -chosen.mean(), int(pick.sum())


def eval_ssl_loss(
    model: SpeechModel,
    items: list[LoadedUtterance],
    targets: dict[str, np.ndarray],
    mask_spec: MaskSpec,
    seed: int,
    max_frames: int,
) -> float:
    """Validation SSL loss with masks drawn from a fixed seed, so successive
    evaluations are comparable."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in make_batches(items, max_frames):
            loss, n = ssl_batch_loss(model, batch, targets, mask_spec, rng)
            total += float(loss) * n
            count += n
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# stage runners


def _ssl_training_loop(
    model: SpeechModel,
    cfg: Config,
    train_items: list[LoadedUtterance],
    val_items: list[LoadedUtterance],
    targets: dict[str, np.ndarray],
    trainable: set[str],
    metrics: list[dict],
    rng: np.random.Generator,
    opt: Adam,
    start_step: int,
    end_step: int,
) -> tuple[dict[str, np.ndarray] | None, float, int]:
    """Run SSL steps [start_step, end_step]; returns (best tensors, best val
    loss, best step) by validation loss at the eval cadence."""
    mask_spec = MaskSpec(span=cfg["mask.span"], start_prob=cfg["mask.start_prob"])
    max_frames = cfg["stage.max_frames_per_batch"]
    eval_every = cfg["stage.eval_every"]
    val_seed = cfg["stage.seed"] + 7919
    batches = make_batches(train_items, max_frames)
    set_trainable(model, trainable)
    best: tuple[float, int, dict[str, np.ndarray] | None] = (math.inf, -1, None)
    step = start_step
    while step <= end_step:
        order = rng.permutation(len(batches))
        for bi in order:
            if step > end_step:
                break
            batch = batches[bi]
            model.zero_grad(set_to_none=True)
            loss, _ = ssl_batch_loss(model, batch, targets, mask_spec, rng)
            loss.backward()
            train_step(model, opt, lr_at(cfg, step), trainable)
            if step % eval_every == 0 or step == end_step:
                val = eval_ssl_loss(model, val_items, targets, mask_spec, val_seed,
                                    max_frames)
                metrics.append({"step": step, "split": "train",
                                "metric": "ssl_loss", "value": loss.item()})
                metrics.append({"step": step, "split": "val",
                                "metric": "ssl_loss", "value": val})
                if val < best[0]:  # ties keep the earlier step
                    best = (val, step, model_tensors(model))
            step += 1
    return best[2], best[0], best[1]


def run_pretrain(cfg: Config, manifest: Manifest) -> tuple[Checkpoint, Checkpoint]:
    """Stage 1: fit the unit codebook (after a brief warm start on frontend
    features), then minimize the masked-prediction loss on generic audio.
    Returns (best-by-val, final) checkpoints."""
    if manifest.role != "generic_unlabeled":
        raise DataError(f"pretrain expects a generic_unlabeled manifest, got {manifest.role}")
    seed = cfg["stage.seed"]
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    items = load_audio(manifest, model.frontend)
    train_items, val_items = split_train_val(items, cfg["stage.val_fraction"])
    metrics: list[dict] = []
    opt = Adam(cfg["stage.adam_beta1"], cfg["stage.adam_beta2"], cfg["stage.adam_eps"])
    trainable = FREEZE_SETS["pretrain"]
    max_steps = cfg["stage.max_steps"]
    source = resolve_unit_source(cfg)

    if source == "frontend":
        cb = fit_codebook(model, train_items, cfg, "frontend", seed)
        targets = assign_targets(model, items, cb)
        best_t, best_v, best_s = _ssl_training_loop(
            model, cfg, train_items, val_items, targets, trainable, metrics,
            rng, opt, 1, max_steps,
        )
    else:
        # warm start against frontend-feature units, then refit on the
        # configured encoder layer of the partially trained model
        warm_steps = max(1, int(round(cfg["stage.warm_start_frac"] * max_steps)))
        warm_cb = fit_codebook(model, train_items, cfg, "frontend", seed)
        targets = assign_targets(model, items, warm_cb)
        _ssl_training_loop(
            model, cfg, train_items, val_items, targets, trainable, metrics,
            rng, opt, 1, warm_steps,
        )
        cb = fit_codebook(model, train_items, cfg, source, seed)
        targets = assign_targets(model, items, cb)
        best_t, best_v, best_s = _ssl_training_loop(
            model, cfg, train_items, val_items, targets, trainable, metrics,
            rng, opt, warm_steps + 1, max_steps,
        )

    metrics.append({"step": best_s, "split": "val",
                    "metric": "best_ssl_loss", "value": best_v})
    final = Checkpoint(
        config=cfg.as_dict(), stage_chain=["pretrain"],
        tensors=model_tensors(model), codebook=cb,
        rng_state=capture_rng_state(rng), metrics=metrics,
    )
    best = Checkpoint(
        config=cfg.as_dict(), stage_chain=["pretrain"],
        tensors=best_t if best_t is not None else model_tensors(model),
        codebook=cb, rng_state=capture_rng_state(rng), metrics=metrics,
    )
    return best, final


def run_adapt(
    cfg: Config, base: Checkpoint, manifest: Manifest, mode: str
) -> Checkpoint:
    """Stage 2: continue the SSL objective on target-accent audio, either
    updating the whole encoder (`full`) or only the adapters (`adapters`).
    The codebook is reused unchanged; targets come from the base model."""
    if manifest.role != "accent_unlabeled":
        raise DataError(f"adapt expects an accent_unlabeled manifest, got {manifest.role}")
    if mode not in ("full", "adapters"):
        raise ConfigError(f"adapt mode must be 'full' or 'adapters', got {mode!r}")
    if base.codebook is None:
        raise CheckpointError("base checkpoint carries no unit codebook")
    base_cfg = base.cfg()
    if mode == "adapters" and base_cfg["model.B_ada"] <= 0:
        raise ConfigError("adapters mode requires model.B_ada > 0")
    merged = base.cfg()
    for key, value in cfg.as_dict().items():
        if not key.startswith("model."):
            merged.set_value(key, value)
    cfg = merged
    seed = cfg["stage.seed"]
    model = build_model(base_cfg, seed)
    load_tensors(model, base.tensors)
    rng = np.random.default_rng(seed)
    items = load_audio(manifest, model.frontend)
    train_items, val_items = split_train_val(items, cfg["stage.val_fraction"])
    # targets from the frozen base model and the frozen codebook
    targets = assign_targets(model, items, base.codebook)
    metrics: list[dict] = []
    opt = Adam(cfg["stage.adam_beta1"], cfg["stage.adam_beta2"], cfg["stage.adam_eps"])
    trainable = FREEZE_SETS["adapt_" + mode]
    best_t, best_v, best_s = _ssl_training_loop(
        model, cfg, train_items, val_items, targets, trainable, metrics,
        rng, opt, 1, cfg["stage.max_steps"],
    )
    metrics.append({"step": best_s, "split": "val",
                    "metric": "best_ssl_loss", "value": best_v})
    return Checkpoint(
        config=cfg.as_dict(),
        stage_chain=base.stage_chain + ["adapt"],
        tensors=best_t if best_t is not None else model_tensors(model),
        codebook=base.codebook,
        rng_state=capture_rng_state(rng),
        metrics=metrics,
    )


def run_finetune(cfg: Config, ckpt: Checkpoint, manifest: Manifest) -> Checkpoint:
    """Stage 3: train the decoder head only (layer weights + BiLSTM) with CTC
    on labeled audio; the encoder (and any adapters) stay frozen."""
    if manifest.role != "labeled":
        raise DataError(f"finetune expects a labeled manifest, got {manifest.role}")
    base_cfg = ckpt.cfg()
    merged = ckpt.cfg()
    for key, value in cfg.as_dict().items():
        if not key.startswith("model."):
            merged.set_value(key, value)
    cfg = merged
    seed = cfg["stage.seed"]
    model = build_model(base_cfg, seed)
    load_tensors(model, ckpt.tensors)
    rng = np.random.default_rng(seed)
    items = load_audio(manifest, model.frontend)
    # drop CTC-infeasible utterances up front
    usable, skipped = [], 0
    for u in items:
        if u.utt.transcript is None:
            raise DataError(f"utterance {u.utt.id!r} has no transcript")
        if u.n_frames >= min_frames_for(text_to_ids(u.utt.transcript)):
            usable.append(u)
        else:
            skipped += 1
    if not usable:
        raise DataError("no CTC-feasible labeled utterances")
    metrics: list[dict] = []
    if skipped:
        metrics.append({"step": 0, "split": "train",
                        "metric": "ctc_infeasible_skipped", "value": skipped})
    set_trainable(model, FREEZE_SETS["finetune"])
    opt = Adam(cfg["stage.adam_beta1"], cfg["stage.adam_beta2"], cfg["stage.adam_eps"])
    lr = cfg["stage.finetune_lr"]
    batch_size = cfg["stage.batch_size"]
    ordered = sorted(usable, key=lambda u: (u.n_frames, u.utt.id))
    batches = [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]
    # encoder is frozen: extract each utterance's per-layer stack once
    feats: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for fb in make_batches(usable, cfg["stage.max_frames_per_batch"]):
            samples, lengths = batch_tensors(fb)
            frames = model.frontend(samples)
            per_layer = model.encoder(frames, valid=valid_mask(lengths, frames.shape[1]))
            stacked = torch.stack(per_layer)  # (N, B, T, d)
            for b, u in enumerate(fb):
                feats[u.utt.id] = stacked[:, b, : u.n_frames].clone()
    n_layers = base_cfg["model.N"]
    d = base_cfg["model.d"]

    def batch_loss(batch: list[LoadedUtterance]) -> torch.Tensor:
        t_max = max(u.n_frames for u in batch)
        stack = torch.zeros(n_layers, len(batch), t_max, d, dtype=torch.float64)
        lengths = torch.zeros(len(batch), dtype=torch.long)
        for b, u in enumerate(batch):
            stack[:, b, : u.n_frames] = feats[u.utt.id]
            lengths[b] = u.n_frames
        logits = model.decoder(list(stack), lengths)
        losses = [
            ctc_loss(logits[b, : u.n_frames], text_to_ids(u.utt.transcript))
            for b, u in enumerate(batch)
        ]
        return torch.stack(losses).mean()

    # pre-training loss is the baseline for the relative-improvement stop rule
    with torch.no_grad():
        init = sum(batch_loss(b).item() * len(b) for b in batches) / len(usable)
    metrics.append({"step": 0, "split": "train",
                    "metric": "ctc_loss", "value": init})
    prev_epoch_loss = init
    for epoch in range(1, cfg["stage.epochs"] + 1):
        order = rng.permutation(len(batches))
        total, count = 0.0, 0
        for bi in order:
            batch = batches[bi]
            model.zero_grad(set_to_none=True)
            loss = batch_loss(batch)
            loss.backward()
            train_step(model, opt, lr, FREEZE_SETS["finetune"])
            total += loss.item() * len(batch)
            count += len(batch)
        epoch_loss = total / count
        metrics.append({"step": epoch, "split": "train",
                        "metric": "ctc_loss", "value": epoch_loss})
        rel = (prev_epoch_loss - epoch_loss) / prev_epoch_loss
        if rel < cfg["stage.stop_threshold"]:
            break
        prev_epoch_loss = epoch_loss
    return Checkpoint(
        config=cfg.as_dict(),
        stage_chain=ckpt.stage_chain + ["finetune"],
        tensors=model_tensors(model),
        codebook=ckpt.codebook,
        rng_state=capture_rng_state(rng),
        metrics=metrics,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SpeechModel:
    model = build_model(ckpt.cfg(), 0)
    load_tensors(model, ckpt.tensors)
    model.eval()
    return model
