"""12-lead ECG records and their preprocessing chain.

The chain is fixed: high-pass (0.5 Hz) -> notch (60 Hz) -> Savitzky-Golay
smoothing -> per-lead standardization. Stage flags enforce the order; the
high-pass and notch are zero-phase second-order filters applied forward and
backward so QRS morphology is not phase-distorted.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

SAMPLE_RATE = 500
N_LEADS = 12
N_SAMPLES = 5000

STAGE_HIGHPASS = "highpassed"
STAGE_NOTCH = "notched"
STAGE_SMOOTH = "smoothed"
STAGE_NORMALIZE = "normalized"
ALL_STAGES = (STAGE_HIGHPASS, STAGE_NOTCH, STAGE_SMOOTH, STAGE_NORMALIZE)

# leads with sample standard deviation below this are treated as constant
_CONSTANT_STD = 1e-10


class PreprocessingError(ValueError):
    pass


@dataclass(frozen=True)
class EcgRecord:
    """One 10-second 12-lead recording at 500 Hz (millivolts)."""

    leads: np.ndarray
    subject_id: str = ""
    stage_flags: frozenset = field(default_factory=frozenset)

    sample_rate = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.leads, dtype=np.float64)
        if arr.shape != (N_LEADS, N_SAMPLES):
            raise ValueError(f"expected leads of shape (12, 5000), got {arr.shape}")
        object.__setattr__(self, "leads", arr)
        object.__setattr__(self, "stage_flags", frozenset(self.stage_flags))

    def with_leads(self, leads: np.ndarray, new_flag: str) -> "EcgRecord":
        return replace(self, leads=leads, stage_flags=self.stage_flags | {new_flag})


def _require_stage(record: EcgRecord, op: str, present: tuple, absent: tuple) -> None:
    for flag in present:
        if flag not in record.stage_flags:
            raise PreprocessingError(f"{op}: stage {flag!r} must be applied first")
    for flag in absent:
        if flag in record.stage_flags:
            raise PreprocessingError(f"{op}: stage {flag!r} already applied")


def highpass(record: EcgRecord, cutoff: float = 0.5) -> EcgRecord:
    """Remove baseline wander below `cutoff` Hz (zero-phase Butterworth)."""
    _require_stage(record, "highpass", (), (STAGE_HIGHPASS,))
    if not 0 < cutoff < SAMPLE_RATE / 2:
        raise PreprocessingError(f"highpass cutoff {cutoff} Hz outside (0, Nyquist)")
    sos = sps.butter(2, cutoff, btype="highpass", fs=SAMPLE_RATE, output="sos")
    filtered = sps.sosfiltfilt(sos, record.leads, axis=1)
    return record.with_leads(filtered, STAGE_HIGHPASS)


def notch(record: EcgRecord, freq: float = 60.0, quality: float = 30.0) -> EcgRecord:
    """Suppress power-line interference at `freq` Hz (zero-phase IIR notch)."""
    _require_stage(record, "notch", (STAGE_HIGHPASS,), (STAGE_NOTCH,))
    if freq >= SAMPLE_RATE / 2:
        raise PreprocessingError(f"notch frequency {freq} Hz is at or above Nyquist (250 Hz)")
    b, a = sps.iirnotch(freq, quality, fs=SAMPLE_RATE)
    filtered = sps.filtfilt(b, a, record.leads, axis=1)
    return record.with_leads(filtered, STAGE_NOTCH)


def savitzky_golay(record: EcgRecord, window: int = 15, order: int = 3) -> EcgRecord:
    """Local least-squares polynomial smoothing.

    Each output sample is the window-centered polynomial fit; edges are
    evaluated from polynomials fitted to the terminal windows.
    """
    _require_stage(record, "savitzky_golay", (STAGE_HIGHPASS, STAGE_NOTCH), (STAGE_SMOOTH,))
    if window % 2 == 0:
        raise PreprocessingError(f"savitzky_golay window must be odd, got {window}")
    if order >= window:
        raise PreprocessingError(f"savitzky_golay order {order} must be < window {window}")
    smoothed = sps.savgol_filter(record.leads, window, order, axis=1, mode="interp")
    return record.with_leads(smoothed, STAGE_SMOOTH)


def normalize_leads(record: EcgRecord) -> EcgRecord:
    """Per-lead z-score (sample std); near-constant leads map to zeros."""
    _require_stage(record, "normalize_leads", (STAGE_HIGHPASS, STAGE_NOTCH, STAGE_SMOOTH), ())
    leads = record.leads
    mean = leads.mean(axis=1, keepdims=True)
    std = leads.std(axis=1, ddof=1, keepdims=True)
    out = np.zeros_like(leads)
    live = std[:, 0] > _CONSTANT_STD
    out[live] = (leads[live] - mean[live]) / std[live]
    return record.with_leads(out, STAGE_NORMALIZE)


def preprocess(record: EcgRecord, highpass_hz: float = 0.5, notch_hz: float = 60.0,
               notch_q: float = 30.0, sg_window: int = 15, sg_order: int = 3) -> EcgRecord:
    """Full chain in the fixed order; all four stage flags set on the result."""
    out = highpass(record, cutoff=highpass_hz)
    out = notch(out, freq=notch_hz, quality=notch_q)
    out = savitzky_golay(out, window=sg_window, order=sg_order)
    return normalize_leads(out)


def preprocess_batch(leads_batch: np.ndarray, **kwargs) -> np.ndarray:
    """Vectorized chain over an (N, 12, 5000) stack of raw recordings."""
    n = leads_batch.shape[0]
    out = np.empty((n, N_LEADS, N_SAMPLES), dtype=np.float64)
    for i in range(n):
        out[i] = preprocess(EcgRecord(leads_batch[i])).leads
    return out
