"""Experiment orchestration: configs, multi-seed TTA runs, stage validation.

A run directory is laid out as out_dir/seed<k>/<method>/ with the adaptation
log (JSON lines) and the metric report; every arm of one experiment consumes
the identical stream order per seed, so methods differ by nothing but the
method. Seeds drive only the data order; model initialization comes from the
source checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from . import adapt, data, diet, metrics
from .dsp import Waveform
from .encoder import Encoder, load_encoder
from .errors import InvalidArgumentError, StageMismatchError
from .model import load_checkpoint

DEFAULT_BATCH_SIZES = {"laden": 1, "remixit": 8, "source_only": 1}


@dataclass
class ExperimentConfig:
    manifest: str
    checkpoint: str
    output_dir: str
    methods: list[str] = field(default_factory=lambda: ["source_only", "laden"])
    seeds: list[int] = field(default_factory=lambda: [0])
    encoder_path: str | None = None
    diet_path: str | None = None
    laden: dict = field(default_factory=dict)
    batch_sizes: dict = field(default_factory=dict)
    pesq_command: str | None = None
    save_audio: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise InvalidArgumentError("seeds must be non-empty")
        for m in self.methods:
            if m not in adapt.METHODS:
                raise InvalidArgumentError(f"unknown method {m!r}")

    def laden_config(self) -> adapt.LadenConfig:
        return adapt.LadenConfig(**self.laden)

    def batch_size(self, method: str) -> int:
        return int(self.batch_sizes.get(method, DEFAULT_BATCH_SIZES[method]))

    def validate_paths(self) -> None:
        missing = [p for p in (self.manifest, self.checkpoint) if not Path(p).exists()]
        for optional in (self.encoder_path, self.diet_path):
            if optional and not Path(optional).exists():
                missing.append(optional)
        if missing:
            raise InvalidArgumentError(f"missing input files: {missing}")


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**raw)


def _capturing_stream(
    batches: Iterator[list[data.UtterancePair]],
    references: dict[str, Waveform],
) -> Iterator[list[data.UtterancePair]]:
    """Harvest clean references for the metrics stage while passing batches on."""
    for batch in batches:
        for pair in batch:
            references[pair.record.id] = pair.clean
        yield batch


def run_arm(
    method: str,
    records: list[data.MixRecord],
    order: data.StreamOrder,
    cfg: ExperimentConfig,
    run_dir: Path,
    encoder: Encoder | None = None,
    diet_map: diet.DietMap | None = None,
) -> metrics.MetricReport:
    """One (seed, method) run: adapt over the stream, then score the outputs."""
    run_dir.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(cfg.checkpoint)
    references: dict[str, Waveform] = {}
    batches = _capturing_stream(
        data.stream(records, order, cfg.batch_size(method)), references
    )
    result = adapt.run_tta(
        method,
        batches,
        model,
        cfg.laden_config(),
        encoder=encoder,
        diet_map=diet_map,
        seed=order.seed,
        log_path=run_dir / "adapt_log.jsonl",
        run_dir=run_dir,
    )
    plugin = metrics.PesqPlugin(cfg.pesq_command) if cfg.pesq_command else None
    report = metrics.evaluate_run(references, result.enhanced, pesq_plugin=plugin)
    report.save(run_dir / "metrics.json")
    if cfg.save_audio:
        from .audio_io import write_wav

        audio_dir = run_dir / "enhanced"
        audio_dir.mkdir(exist_ok=True)
        for uid, w in result.enhanced:
            write_wav(audio_dir / f"{uid}.wav", w)
    return report


def run_experiment(cfg: ExperimentConfig) -> dict[tuple[int, str], metrics.MetricReport]:
    """All (seed, method) arms; returns the per-arm metric reports."""
    cfg.validate_paths()
    records = data.load_manifest(cfg.manifest)
    encoder = load_encoder(cfg.encoder_path) if cfg.encoder_path else None
    diet_map = diet.load(cfg.diet_path) if cfg.diet_path else None
    if "laden" in cfg.methods:
        if encoder is None or diet_map is None:
            raise InvalidArgumentError("laden runs need encoder_path and diet_path")
        if diet_map.encoder_id != encoder.spec.encoder_id:
            raise StageMismatchError(
                f"map fitted with encoder {diet_map.encoder_id!r} but the run "
                f"uses {encoder.spec.encoder_id!r}"
            )
    out_root = Path(cfg.output_dir)
    reports = {}
    for seed in cfg.seeds:
        order = data.make_stream_order(records, seed)
        data.save_stream_order(order, _seed_dir(out_root, seed, mkdir=True) / "stream_order.json")
        for method in cfg.methods:
            run_dir = _seed_dir(out_root, seed) / method
            reports[(seed, method)] = run_arm(
                method, records, order, cfg, run_dir, encoder=encoder, diet_map=diet_map
            )
    return reports


def _seed_dir(root: Path, seed: int, mkdir: bool = False) -> Path:
    path = root / f"seed{seed}"
    if mkdir:
        path.mkdir(parents=True, exist_ok=True)
    return path
