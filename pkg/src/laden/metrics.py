"""Objective speech-quality metrics and running aggregation.

Native implementations of SI-SDR, segmental SNR, LPC log-likelihood ratio,
and weighted spectral slope; regression-based composite scores on top of an
externally supplied perceptual score. The perceptual evaluator is a plugin
command; when unconfigured, the dependent fields stay null rather than being
fabricated.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import write_wav
from .dsp import DEFAULT_FRAME_LEN, DEFAULT_HOP, Waveform, hann_window
from .errors import (
    InvalidArgumentError,
    NoSpeechFramesError,
    UndefinedReferenceError,
)

logger = logging.getLogger(__name__)

SI_SDR_CAP_DB = 100.0
SSNR_MIN_DB = -10.0
SSNR_MAX_DB = 35.0
SSNR_SILENCE_REL = 1e-8  # frames below this fraction of peak energy are silent
FRAME_DISCARD_FRACTION = 0.05  # worst-frame tail dropped by llr and wss
LPC_ORDER = 16

# Composite-measure regression coefficients, guarded by intercept tests.
CSIG_COEF = (3.093, -1.029, 0.603, -0.009)  # 1, llr, pesq, wss
CBAK_COEF = (1.634, 0.478, -0.007, 0.063)  # 1, pesq, wss, segsnr
COVL_COEF = (1.594, 0.805, -0.512, -0.007)  # 1, pesq, llr, wss


def _paired(reference: Waveform, estimate: Waveform) -> tuple[np.ndarray, np.ndarray]:
    if len(reference) != len(estimate):
        raise InvalidArgumentError("reference and estimate must have equal lengths")
    return reference.samples, estimate.samples


def si_sdr(reference: Waveform, estimate: Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +-100.

    The estimate is projected onto the reference; the ratio of projected
    signal power to residual power is invariant to positive rescaling of the
    estimate.
    """
    x, x_hat = _paired(reference, estimate)
    ref_power = float(np.dot(x, x))
    if ref_power == 0.0:
        raise UndefinedReferenceError("SI-SDR undefined for a zero reference")
    alpha = float(np.dot(x_hat, x)) / ref_power
    target = alpha * x
    err_power = float(np.sum((target - x_hat) ** 2))
    sig_power = float(np.sum(target**2))
    if err_power == 0.0:
        return SI_SDR_CAP_DB
    if sig_power == 0.0:
        return -SI_SDR_CAP_DB
    value = 10.0 * np.log10(sig_power / err_power)
    return float(np.clip(value, -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def _frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n = int(np.ceil(max(x.shape[0] - frame_len, 0) / hop)) + 1
    padded = np.zeros((n - 1) * hop + frame_len)
    padded[: x.shape[0]] = x
    idx = hop * np.arange(n)[:, None] + np.arange(frame_len)[None, :]
    return padded[idx]


def ssnr(
    reference: Waveform,
    estimate: Waveform,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
) -> float:
    """Segmental SNR: per-frame SNR clamped to [-10, 35] dB, averaged over
    frames whose reference energy exceeds the silence threshold."""
    x, x_hat = _paired(reference, estimate)
    ref_frames = _frames(x, frame_len, hop)
    err_frames = _frames(x - x_hat, frame_len, hop)
    energies = np.sum(ref_frames**2, axis=1)
    peak = energies.max()
    active = energies > SSNR_SILENCE_REL * peak if peak > 0 else np.zeros_like(energies, bool)
    if not active.any():
        raise NoSpeechFramesError("no frames above the silence threshold")
    err_energy = np.sum(err_frames**2, axis=1)[active]
    ref_energy = energies[active]
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(np.where(err_energy > 0, ref_energy / np.maximum(err_energy, 1e-300), np.inf))
    return float(np.mean(np.clip(snr, SSNR_MIN_DB, SSNR_MAX_DB)))


def _levinson(r: np.ndarray, order: int) -> np.ndarray | None:
    """LPC coefficients [1, a_1 .. a_p] from autocorrelation; None if degenerate."""
    if r[0] <= 0 or not np.all(np.isfinite(r)):
        return None
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1 : 0 : -1])
        k = -acc / err
        a[1 : i + 1] = a[1 : i + 1] + k * a[i - 1 :: -1][: i].copy()
        err *= 1.0 - k * k
        if err <= 0 or not np.isfinite(err):
            return None
    return a


def _autocorr(frame: np.ndarray, order: int) -> np.ndarray:
    n = frame.shape[0]
    spectrum = np.fft.rfft(frame, n=2 * n)
    acf = np.fft.irfft(spectrum * np.conj(spectrum), n=2 * n)[: order + 1]
    return acf


def llr(
    reference: Waveform,
    estimate: Waveform,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    order: int = LPC_ORDER,
) -> float:
    """LPC log-likelihood ratio, mean over frames with the worst 5% discarded.

    Frames where either signal yields a degenerate LPC solve are skipped (and
    simply reduce the frame count). Non-negative by construction: the
    reference coefficients minimize the quadratic form they are compared in.
    """
    x, x_hat = _paired(reference, estimate)
    win = hann_window(frame_len)
    ref_frames = _frames(x, frame_len, hop) * win
    est_frames = _frames(x_hat, frame_len, hop) * win
    values = []
    for rf, ef in zip(ref_frames, est_frames):
        r_ref = _autocorr(rf, order)
        r_est = _autocorr(ef, order)
        a_ref = _levinson(r_ref, order)
        a_est = _levinson(r_est, order)
        if a_ref is None or a_est is None:
            continue
        # Quadratic forms against the reference autocorrelation (Toeplitz).
        num = _lpc_quadratic(a_est, r_ref)
        den = _lpc_quadratic(a_ref, r_ref)
        if den <= 0 or num <= 0:
            continue
        values.append(np.log(num / den))
    if not values:
        raise NoSpeechFramesError("no usable frames for the LPC ratio")
    return float(np.mean(_drop_worst(np.array(values))))


def _lpc_quadratic(a: np.ndarray, r: np.ndarray) -> float:
    order = a.shape[0] - 1
    total = r[0] * np.dot(a, a)
    for lag in range(1, order + 1):
        total += 2.0 * r[lag] * np.dot(a[:-lag], a[lag:])
    return float(total)


def _drop_worst(values: np.ndarray) -> np.ndarray:
    kept = max(int(np.ceil((1.0 - FRAME_DISCARD_FRACTION) * values.shape[0])), 1)
    return np.sort(values)[:kept]


# Critical-band layout for the spectral-slope measure: 25 bands equally
# spaced on the Bark axis between 50 Hz and 3600 Hz.
_N_BANDS = 25
_WSS_KMAX = 20.0
_WSS_KLOCMAX = 1.0


def _bark(f: np.ndarray) -> np.ndarray:
    return 6.0 * np.arcsinh(f / 600.0)


def _band_energies(frames: np.ndarray, sample_rate: int, frame_len: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(frame_len, d=1.0 / sample_rate)
    edges_bark = np.linspace(_bark(np.array([50.0]))[0], _bark(np.array([3600.0]))[0], _N_BANDS + 1)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    bark_f = _bark(freqs)
    bands = np.zeros((frames.shape[0], _N_BANDS))
    for b in range(_N_BANDS):
        mask = (bark_f >= edges_bark[b]) & (bark_f < edges_bark[b + 1])
        if mask.any():
            bands[:, b] = power[:, mask].sum(axis=1)
    return 10.0 * np.log10(np.maximum(bands, 1e-300))


def _slope_weights(spectrum_db: np.ndarray) -> np.ndarray:
    """Klatt-style weights emphasizing peaks: global and nearest-local maxima."""
    c = spectrum_db
    slopes = np.diff(c)
    n = slopes.shape[0]
    cmax = c.max()
    weights = np.empty(n)
    for k in range(n):
        if slopes[k] > 0:
            j = k + 1
            while j < c.shape[0] - 1 and c[j + 1] > c[j]:
                j += 1
            local_max = c[j]
        else:
            j = k
            while j > 0 and c[j - 1] > c[j]:
                j -= 1
            local_max = c[j]
        w_global = _WSS_KMAX / (_WSS_KMAX + cmax - c[k])
        w_local = _WSS_KLOCMAX / (_WSS_KLOCMAX + local_max - c[k])
        weights[k] = w_global * w_local
    return weights


def wss(
    reference: Waveform,
    estimate: Waveform,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
) -> float:
    """Weighted spectral slope distance, mean over frames (worst 5% discarded).

    Critical-band spectra are compared by the squared difference of adjacent-
    band slopes, weighted toward spectral peaks of the reference.
    """
    x, x_hat = _paired(reference, estimate)
    win = hann_window(frame_len)
    ref_bands = _band_energies(_frames(x, frame_len, hop) * win, reference.sample_rate, frame_len)
    est_bands = _band_energies(_frames(x_hat, frame_len, hop) * win, reference.sample_rate, frame_len)
    values = []
    for rb, eb in zip(ref_bands, est_bands):
        weights = _slope_weights(rb)
        d = np.diff(rb) - np.diff(eb)
        values.append(float(np.sum(weights * d * d) / np.sum(weights)))
    return float(np.mean(_drop_worst(np.array(values))))


def composite(pesq: float, llr_value: float, wss_value: float, segsnr: float) -> dict[str, float]:
    """Regression composites (signal, background, overall), clamped to [1, 5]."""
    for name, v in (("pesq", pesq), ("llr", llr_value), ("wss", wss_value), ("segsnr", segsnr)):
        if not np.isfinite(v):
            raise InvalidArgumentError(f"{name} must be finite")
    csig = CSIG_COEF[0] + CSIG_COEF[1] * llr_value + CSIG_COEF[2] * pesq + CSIG_COEF[3] * wss_value
    cbak = CBAK_COEF[0] + CBAK_COEF[1] * pesq + CBAK_COEF[2] * wss_value + CBAK_COEF[3] * segsnr
    covl = COVL_COEF[0] + COVL_COEF[1] * pesq + COVL_COEF[2] * llr_value + COVL_COEF[3] * wss_value
    clamp = lambda v: float(np.clip(v, 1.0, 5.0))
    return {"csig": clamp(csig), "cbak": clamp(cbak), "covl": clamp(covl)}


class PesqPlugin:
    """External perceptual-score evaluator invoked per utterance.

    The command template gets {ref} and {est} substituted with temporary WAV
    paths and must print ``score=<real>`` on stdout with the value in
    [-0.5, 4.5]. Any failure records the score as absent and the run
    continues.
    """

    SCORE_RANGE = (-0.5, 4.5)

    def __init__(self, command_template: str | None = None, timeout_s: float = 120.0):
        self.command_template = command_template
        self.timeout_s = timeout_s

    @property
    def configured(self) -> bool:
        return bool(self.command_template)

    def evaluate(self, reference: Waveform, estimate: Waveform) -> float | None:
        if not self.configured:
            return None
        with tempfile.TemporaryDirectory() as tmp:
            ref_path = Path(tmp) / "ref.wav"
            est_path = Path(tmp) / "est.wav"
            write_wav(ref_path, reference)
            write_wav(est_path, estimate)
            cmd = [
                part.format(ref=str(ref_path), est=str(est_path))
                for part in shlex.split(self.command_template)
            ]
            try:
                proc = subprocess.run(
                    cmd, capture_output=True, text=True, timeout=self.timeout_s, check=True
                )
            except (subprocess.SubprocessError, OSError) as exc:
                logger.warning("perceptual evaluator failed: %s", exc)
                return None
        for line in proc.stdout.splitlines():
            line = line.strip()
            if line.startswith("score="):
                try:
                    value = float(line[len("score=") :])
                except ValueError:
                    logger.warning("perceptual evaluator printed a bad score: %r", line)
                    return None
                if not (self.SCORE_RANGE[0] <= value <= self.SCORE_RANGE[1]):
                    logger.warning("perceptual score %.3f out of range, recording absent", value)
                    return None
                return value
        logger.warning("perceptual evaluator printed no score line")
        return None


class RunningMean:
    """Numerically stable streaming mean; exact for constant inputs."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0

    def update(self, value: float) -> None:
        self.count += 1
        self.mean += (value - self.mean) / self.count


METRIC_KEYS = ("si_sdr", "ssnr", "llr", "wss", "pesq", "csig", "cbak", "covl")


@dataclass
class MetricReport:
    per_utterance: dict[str, dict[str, float | None]]
    aggregate: dict[str, float | None]
    count: int

    def to_json(self) -> str:
        payload = {
            "per_utterance": [
                {"id": uid, **metrics} for uid, metrics in self.per_utterance.items()
            ],
            "aggregate": self.aggregate,
            "count": self.count,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def load_report(path: str | Path) -> MetricReport:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    per_utt = {row["id"]: {k: row.get(k) for k in METRIC_KEYS} for row in raw["per_utterance"]}
    return MetricReport(per_utterance=per_utt, aggregate=raw["aggregate"], count=raw["count"])


def evaluate_pair(
    reference: Waveform,
    estimate: Waveform,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    pesq_plugin: PesqPlugin | None = None,
) -> dict[str, float | None]:
    metrics: dict[str, float | None] = {
        "si_sdr": si_sdr(reference, estimate),
        "ssnr": ssnr(reference, estimate, frame_len, hop),
        "llr": llr(reference, estimate, frame_len, hop),
        "wss": wss(reference, estimate, frame_len, hop),
        "pesq": None,
        "csig": None,
        "cbak": None,
        "covl": None,
    }
    pesq_score = pesq_plugin.evaluate(reference, estimate) if pesq_plugin else None
    if pesq_score is not None:
        metrics["pesq"] = pesq_score
        metrics.update(composite(pesq_score, metrics["llr"], metrics["wss"], metrics["ssnr"]))
    return metrics


def evaluate_run(
    references: dict[str, Waveform],
    enhanced: list[tuple[str, Waveform]],
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    pesq_plugin: PesqPlugin | None = None,
) -> MetricReport:
    """Per-utterance metrics plus their streaming average over the whole run."""
    per_utterance = {}
    running = {key: RunningMean() for key in METRIC_KEYS}
    for uid, estimate in enhanced:
        metrics = evaluate_pair(references[uid], estimate, frame_len, hop, pesq_plugin)
        per_utterance[uid] = metrics
        for key, value in metrics.items():
            if value is not None:
                running[key].update(value)
    aggregate = {
        key: (running[key].mean if running[key].count else None) for key in METRIC_KEYS
    }
    return MetricReport(per_utterance=per_utterance, aggregate=aggregate, count=len(per_utterance))
