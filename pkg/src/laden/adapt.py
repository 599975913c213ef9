"""Online test-time adaptation: losses, restricted optimization, and the stream loop.

Adaptation sees only the noisy member of each utterance. The latent term
pulls the enhanced output's embedding toward a pseudo-label (the transformed
noisy embedding); the envelope term aligns the amplitude envelope of the
output with a spectral-subtraction reference, weighted toward high-power
frames. A hard gate drops the whole step when the latent distance exceeds a
threshold, and each optimizer step is followed by an interpolation of the
adapted weights back toward the source weights.

The emitted enhancement for step t is always computed before the update, so
it is a function of the previous step's parameters only.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from . import diet as diet_mod
from .data import UtterancePair
from .dsp import Waveform, hilbert_envelope, spectral_subtraction
from .encoder import Encoder
from .errors import (
    AdaptationInterrupted,
    DegenerateEmbeddingError,
    InvalidArgumentError,
    StageMismatchError,
)
from .model import AmModel, ParamPartition, clone_model, partition_params, save_checkpoint, waveform_mse
from .torchdsp import frame_tensor, hilbert_envelope_tensor

METHODS = ("laden", "remixit", "source_only")

_ENV_EPS = 1e-24  # keeps the analytic-magnitude gradient finite at exact zeros


@dataclass(frozen=True)
class LadenConfig:
    envelope_weight: float = 0.1  # weight of the envelope term in the total loss
    gate_threshold: float = 0.05  # latent distances above this skip the step
    temperature: float = 1.0  # softmax temperature on standardized frame powers
    ema_beta: float = 0.99  # pull of adapted weights back toward the source
    lr: float = 5e-4
    weight_decay: float = 0.01
    frame_len: int = 512
    hop: int = 256
    remixit_teacher_every: int = 8
    remixit_teacher_momentum: float = 0.99
    remixit_lr: float = 5e-4

    def __post_init__(self):
        if self.envelope_weight < 0:
            raise InvalidArgumentError("envelope_weight must be >= 0")
        if self.gate_threshold <= 0:
            raise InvalidArgumentError("gate_threshold must be > 0")
        if self.temperature <= 0:
            raise InvalidArgumentError("temperature must be > 0")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise InvalidArgumentError("ema_beta must lie in [0, 1]")


class AdaptState:
    """Mutable core of a TTA run: live adaptable params, frozen source snapshot."""

    def __init__(self, model: AmModel, cfg: LadenConfig, lr: float | None = None):
        self.model = model
        self.partition: ParamPartition = partition_params(model)
        adaptable_names = set(self.partition.adaptable)
        self.adaptable = {}
        for name, p in model.named_parameters():
            if name in adaptable_names:
                p.requires_grad_(True)
                self.adaptable[name] = p
            else:
                p.requires_grad_(False)
        self.theta_s = {name: p.detach().clone() for name, p in self.adaptable.items()}
        self.optimizer = torch.optim.AdamW(
            list(self.adaptable.values()),
            lr=cfg.lr if lr is None else lr,
            weight_decay=cfg.weight_decay,
        )
        self.step = 0
        self.skipped = 0

    def export_adaptable(self) -> dict[str, np.ndarray]:
        return {name: p.detach().numpy().copy() for name, p in self.adaptable.items()}

    def import_adaptable(self, values: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for name, p in self.adaptable.items():
                p.copy_(torch.from_numpy(values[name]))

    def distance_to_source(self) -> float:
        with torch.no_grad():
            total = sum(
                torch.sum((p - self.theta_s[name]) ** 2) for name, p in self.adaptable.items()
            )
        return float(torch.sqrt(total))


def _as_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x.to(torch.float64)
    if isinstance(x, Waveform):
        return torch.from_numpy(x.samples)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _as_vector(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x.to(torch.float64)
    if hasattr(x, "vector"):
        return torch.from_numpy(np.asarray(x.vector, dtype=np.float64))
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def latent_loss(x_hat, pseudo_label, encoder: Encoder) -> torch.Tensor:
    """One minus the cosine similarity between embed(x_hat) and the pseudo-label.

    Lies in [0, 2]; zero exactly when the output's embedding is a positive
    multiple of the pseudo-label. Differentiable through the encoder into
    whatever produced x_hat.
    """
    emb = encoder.embed_tensor(_as_tensor(x_hat))
    target = _as_vector(pseudo_label)
    emb_norm = emb.norm()
    target_norm = target.norm()
    if emb_norm.item() == 0.0 or target_norm.item() == 0.0:
        raise DegenerateEmbeddingError("zero-norm embedding in latent loss")
    return 1.0 - (emb @ target) / (emb_norm * target_norm)


def power_weights(powers: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax over standardized frame powers; a singleton gets weight 1."""
    if powers.numel() == 1:
        return torch.ones_like(powers)
    std, mean = torch.std_mean(powers)
    if std.item() == 0.0:
        return torch.full_like(powers, 1.0 / powers.numel())
    z = (powers - mean) / std
    return torch.softmax(z / temperature, dim=0)


def reference_envelope(y: Waveform, cfg: LadenConfig) -> np.ndarray:
    """Envelope of the spectral-subtraction baseline; constant per utterance."""
    return hilbert_envelope(spectral_subtraction(y, cfg.frame_len, cfg.hop)).samples


def envelope_loss(
    x_hat,
    y: Waveform | None,
    cfg: LadenConfig,
    reference_env: np.ndarray | None = None,
    detach_weights: bool = True,
) -> tuple[torch.Tensor, bool]:
    """Power-weighted frame-wise cosine similarity of amplitude envelopes.

    Returns (value in [-1, 1], silent). The reference is the envelope of the
    spectral-subtraction baseline of y (precomputable via reference_env). The
    power weights are treated as constants for differentiation unless
    detach_weights is False (exposed for the stop-gradient check). An
    all-silent x_hat yields (0, True).
    """
    x = _as_tensor(x_hat)
    if reference_env is None:
        if y is None:
            raise InvalidArgumentError("either y or reference_env is required")
        reference_env = reference_envelope(y, cfg)
    ref = torch.from_numpy(np.asarray(reference_env, dtype=np.float64))
    if x.shape != ref.shape:
        raise InvalidArgumentError("x_hat and its reference must have equal lengths")

    x_frames = frame_tensor(x, cfg.frame_len, cfg.hop)
    powers = (x_frames**2).sum(dim=1)
    if float(powers.max().item()) == 0.0:
        return torch.zeros((), dtype=torch.float64), True
    if detach_weights:
        powers = powers.detach()
    weights = power_weights(powers, cfg.temperature)

    env = hilbert_envelope_tensor(x, eps=_ENV_EPS)
    env_frames = frame_tensor(env, cfg.frame_len, cfg.hop)
    ref_frames = frame_tensor(ref, cfg.frame_len, cfg.hop)
    env_norm = env_frames.norm(dim=1)
    ref_norm = ref_frames.norm(dim=1)
    valid = (powers.detach() > 0) & (ref_norm > 0)
    denom = (env_norm * ref_norm).clamp_min(1e-300)
    sims = (env_frames * ref_frames).sum(dim=1) / denom
    sims = torch.where(valid, sims, torch.zeros_like(sims))
    return (weights * sims).sum(), False


@dataclass
class LadenLossResult:
    total: torch.Tensor
    gated: bool
    l_ld: float
    l_r: float
    silent: bool


def laden_loss(
    x_hat,
    y: Waveform,
    diet_map: diet_mod.DietMap,
    encoder: Encoder,
    cfg: LadenConfig,
    pseudo_label=None,
    reference_env: np.ndarray | None = None,
) -> LadenLossResult:
    """Gated total: latent distance plus weighted envelope misalignment.

    The envelope term enters as (1 - similarity) so that minimizing the total
    improves alignment. When the latent distance exceeds the gate threshold
    the total is zero and the caller must skip the update entirely.
    """
    if pseudo_label is None:
        noisy_emb = encoder.encode(y)
        pseudo_label = diet_mod.apply(diet_map, noisy_emb)
    l_ld = latent_loss(x_hat, pseudo_label, encoder)
    l_r, silent = envelope_loss(x_hat, y, cfg, reference_env=reference_env)
    gated = bool(l_ld.item() > cfg.gate_threshold)
    if gated:
        total = torch.zeros((), dtype=torch.float64)
    else:
        total = l_ld + cfg.envelope_weight * (1.0 - l_r)
    return LadenLossResult(
        total=total, gated=gated, l_ld=float(l_ld.item()), l_r=float(l_r.item()), silent=silent
    )


def ema_merge(state: AdaptState, beta: float) -> None:
    """Interpolate adaptable params toward the source snapshot.

    Written as theta_s + beta * (theta_t - theta_s) so the distance to the
    source contracts by exactly beta, and beta in {0, 1} is bitwise-exact.
    """
    if beta == 1.0:
        return
    with torch.no_grad():
        for name, p in state.adaptable.items():
            source = state.theta_s[name]
            if beta == 0.0:
                p.copy_(source)
            else:
                p.copy_(source + beta * (p - source))


@dataclass
class StepInfo:
    step: int
    utterance_ids: list[str]
    l_ld: float | None
    l_r: float | None
    gated: bool | None
    loss: float | None
    wall_ms: float
    note: str = ""

    def as_log_entry(self) -> dict:
        return {
            "step": self.step,
            "utterance_ids": self.utterance_ids,
            "l_ld": self.l_ld,
            "l_r": self.l_r,
            "gated": self.gated,
            "loss": self.loss,
            "wall_ms": self.wall_ms,
            "note": self.note,
        }


def laden_step(
    state: AdaptState,
    model: AmModel,
    batch: list[tuple[str, Waveform]],
    diet_map: diet_mod.DietMap,
    encoder: Encoder,
    cfg: LadenConfig,
) -> tuple[list[Waveform], StepInfo]:
    """One online step: emit enhancements, then (maybe) update and merge.

    The loss is computed per utterance and averaged; a fully gated or
    non-finite batch advances the counters without touching parameters.
    """
    t0 = time.perf_counter()
    outputs = []
    results = []
    degenerate = 0
    for uid, noisy in batch:
        x_hat = model(torch.from_numpy(noisy.samples))
        outputs.append(Waveform(x_hat.detach().numpy(), noisy.sample_rate))
        try:
            results.append(laden_loss(x_hat, noisy, diet_map, encoder, cfg))
        except DegenerateEmbeddingError:
            # A collapsed embedding gives no usable direction; treat the
            # utterance as gated so the stream keeps moving.
            degenerate += 1
            results.append(
                LadenLossResult(
                    total=torch.zeros((), dtype=torch.float64),
                    gated=True, l_ld=float("nan"), l_r=float("nan"), silent=False,
                )
            )

    ungated = [r for r in results if not r.gated]
    all_gated = not ungated
    batch_total = torch.stack([r.total for r in results]).mean()
    note = ""
    if degenerate:
        note = f"{degenerate} degenerate embedding(s); "
    if all_gated:
        state.skipped += 1
        note += "gated"
    elif not torch.isfinite(batch_total):
        state.skipped += 1
        note = "non-finite loss"
    else:
        state.optimizer.zero_grad()
        batch_total.backward()
        state.optimizer.step()
        ema_merge(state, cfg.ema_beta)
    state.step += 1

    usable = [r for r in results if np.isfinite(r.l_ld)]
    info = StepInfo(
        step=state.step,
        utterance_ids=[uid for uid, _ in batch],
        l_ld=float(np.mean([r.l_ld for r in usable])) if usable else None,
        l_r=float(np.mean([r.l_r for r in usable])) if usable else None,
        gated=all_gated,
        loss=float(batch_total.item()),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        note=note,
    )
    return outputs, info


def random_derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random permutation with no fixed point (n >= 2)."""
    if n < 2:
        raise InvalidArgumentError("derangement requires n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def remixit_bootstrap(
    teacher: AmModel,
    batch: list[tuple[str, Waveform]],
    rng: np.random.Generator,
) -> tuple[list[torch.Tensor], list[torch.Tensor], np.ndarray | None]:
    """Teacher speech/noise estimates and the permuted bootstrapped mixtures.

    Estimates are cropped to the shortest utterance in the batch so the
    permutation stays aligned; a singleton batch returns its own mixture
    (plain self-distillation, permutation None).
    """
    min_len = min(len(noisy) for _, noisy in batch)
    with torch.no_grad():
        speech = [
            teacher(torch.from_numpy(noisy.samples[:min_len])) for _, noisy in batch
        ]
    noise = [
        torch.from_numpy(noisy.samples[:min_len]) - s for (_, noisy), s in zip(batch, speech)
    ]
    if len(batch) < 2:
        return speech, [speech[0] + noise[0]], None
    perm = random_derangement(rng, len(batch))
    mixtures = [speech[k] + noise[perm[k]] for k in range(len(batch))]
    return speech, mixtures, perm


def remixit_step(
    state: AdaptState,
    student: AmModel,
    teacher: AmModel,
    batch: list[tuple[str, Waveform]],
    cfg: LadenConfig,
    rng: np.random.Generator,
) -> tuple[list[Waveform], StepInfo]:
    """Self-training step on teacher-bootstrapped pairs.

    Teacher estimates speech and noise per utterance; a random derangement
    recombines them into new mixtures; the student takes one MSE step toward
    the teacher's speech estimates. Every cfg.remixit_teacher_every batches
    the teacher moves toward the student by an exponential average. Emitted
    outputs are the student's pre-update forward on the raw batch.
    """
    t0 = time.perf_counter()
    outputs = []
    with torch.no_grad():
        for uid, noisy in batch:
            out = student(torch.from_numpy(noisy.samples))
            outputs.append(Waveform(out.numpy(), noisy.sample_rate))

    speech, mixtures, perm = remixit_bootstrap(teacher, batch, rng)
    note = "self-distillation (batch of 1)" if perm is None else ""
    state.optimizer.zero_grad()
    loss = torch.stack(
        [waveform_mse(student(m), s) for m, s in zip(mixtures, speech)]
    ).mean()
    if not torch.isfinite(loss):
        state.skipped += 1
        note = "non-finite loss"
    else:
        loss.backward()
        state.optimizer.step()
    state.step += 1

    if state.step % cfg.remixit_teacher_every == 0:
        momentum = cfg.remixit_teacher_momentum
        with torch.no_grad():
            student_params = dict(student.named_parameters())
            for name, p in teacher.named_parameters():
                p.mul_(momentum).add_(student_params[name], alpha=1.0 - momentum)

    info = StepInfo(
        step=state.step,
        utterance_ids=[uid for uid, _ in batch],
        l_ld=None,
        l_r=None,
        gated=None,
        loss=float(loss.item()),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        note=note,
    )
    return outputs, info


@dataclass
class RunResult:
    method: str
    enhanced: list[tuple[str, Waveform]] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    state: AdaptState | None = None


def run_tta(
    method: str,
    batches: Iterable[list[UtterancePair]],
    model: AmModel,
    cfg: LadenConfig,
    encoder: Encoder | None = None,
    diet_map: diet_mod.DietMap | None = None,
    seed: int = 0,
    log_path: str | Path | None = None,
    run_dir: str | Path | None = None,
) -> RunResult:
    """Single online pass over the stream: enhance every utterance, adapt between.

    Only the noisy member of each pair is read here; clean references exist
    solely for downstream metric computation. On a mid-stream failure the
    partial log is flushed and a resume token (stream position plus state
    checkpoint) is written next to it before re-raising.
    """
    if method not in METHODS:
        raise InvalidArgumentError(f"method must be one of {METHODS}")
    if method == "laden":
        if encoder is None or diet_map is None:
            raise InvalidArgumentError("laden requires an encoder and a fitted map")
        if diet_map.encoder_id != encoder.spec.encoder_id:
            raise StageMismatchError(
                f"map was fitted with encoder {diet_map.encoder_id!r}, "
                f"run uses {encoder.spec.encoder_id!r}"
            )

    result = RunResult(method=method)
    state = None
    teacher = None
    rng = np.random.default_rng(seed)
    if method == "laden":
        state = AdaptState(model, cfg)
    elif method == "remixit":
        state = AdaptState(model, cfg, lr=cfg.remixit_lr)
        teacher = clone_model(model)
        for p in teacher.parameters():
            p.requires_grad_(False)
    result.state = state

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    position = 0
    try:
        for batch in batches:
            noisy_batch = [(pair.record.id, pair.noisy) for pair in batch]
            if method == "source_only":
                t0 = time.perf_counter()
                outputs = []
                with torch.no_grad():
                    for uid, noisy in noisy_batch:
                        out = model(torch.from_numpy(noisy.samples))
                        outputs.append(Waveform(out.numpy(), noisy.sample_rate))
                info = StepInfo(
                    step=position + 1,
                    utterance_ids=[uid for uid, _ in noisy_batch],
                    l_ld=None,
                    l_r=None,
                    gated=None,
                    loss=None,
                    wall_ms=(time.perf_counter() - t0) * 1e3,
                )
            elif method == "laden":
                outputs, info = laden_step(state, model, noisy_batch, diet_map, encoder, cfg)
            else:
                outputs, info = remixit_step(state, model, teacher, noisy_batch, cfg, rng)
            for (uid, _), out in zip(noisy_batch, outputs):
                result.enhanced.append((uid, out))
            entry = info.as_log_entry()
            result.log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            position += 1
    except Exception as exc:
        token = {"stream_position": position, "state_checkpoint": None}
        base = Path(run_dir) if run_dir else (Path(log_path).parent if log_path else None)
        if base is not None:
            base.mkdir(parents=True, exist_ok=True)
            ckpt_path = base / f"resume_state_{method}.ckpt"
            save_checkpoint(model, ckpt_path, extra_meta={"resume_position": position})
            token["state_checkpoint"] = str(ckpt_path)
            token_path = base / f"resume_{method}.json"
            token_path.write_text(json.dumps(token))
            if log_fh:
                log_fh.close()
                log_fh = None
            raise AdaptationInterrupted(
                f"{method} run failed at stream position {position}: {exc}", str(token_path)
            ) from exc
        raise
    finally:
        if log_fh:
            log_fh.close()
    return result
