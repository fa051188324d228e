"""Synthetic paired ECG-CMR cohort with shared ground-truth phenotypes.

Stands in for a biobank-style cohort: each subject gets a phenotype vector,
a 12-lead ECG whose morphology partially encodes those phenotypes, two
ellipsoid-shell volumes (end-diastole and end-systole) whose cavity sizes
match the volumetric phenotypes, six simulated binary outcome labels, and a
deterministic split assignment. Everything derives from (master_seed,
subject index), so generation order is irrelevant and cohorts are
bit-for-bit reproducible.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cardalign import container
from cardalign.signals import EcgRecord, N_LEADS, N_SAMPLES, SAMPLE_RATE

PHENOTYPE_FIELDS = (
    "lv_edv", "lv_esv", "lv_sv", "lv_ef", "lv_mass", "wall_thickness",
    "rv_edv", "rv_ef", "gcs", "gls", "grs", "cardiac_output", "heart_rate",
)
OUTCOME_FIELDS = ("cad", "af", "scd", "hf", "mi", "cmp")
SPLITS = ("train", "val", "test")

MYOCARDIUM_DENSITY = 1.05  # g/mL

# seed tags for per-subject sub-streams
(_TAG_PHENOTYPE, _TAG_ECG, _TAG_GEOMETRY, _TAG_ED_NOISE, _TAG_ES_NOISE,
 _TAG_OUTCOME, _TAG_SPLIT) = range(7)

# reference long-axis/short-axis ratio used for the mass model; the renderer
# jitters its own ratio around this value
_REFERENCE_SHAPE_RATIO = 2.125


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class PhenotypeVector:
    """Structural and functional ground-truth targets with units.

    Volumes in mL, mass in g, wall thickness in mm, strains as signed
    fractions, cardiac output in L/min, heart rate in bpm. The stroke
    volume, ejection fraction, and cardiac output identities hold exactly.
    """

    lv_edv: float
    lv_esv: float
    lv_sv: float
    lv_ef: float
    lv_mass: float
    wall_thickness: float
    rv_edv: float
    rv_ef: float
    gcs: float
    gls: float
    grs: float
    cardiac_output: float
    heart_rate: float

    def __post_init__(self):
        if self.lv_sv != self.lv_edv - self.lv_esv:
            raise ValueError("lv_sv must equal lv_edv - lv_esv exactly")
        if self.lv_ef != self.lv_sv / self.lv_edv:
            raise ValueError("lv_ef must equal lv_sv / lv_edv exactly")
        if not 0.0 < self.lv_ef < 1.0:
            raise ValueError(f"lv_ef {self.lv_ef} outside (0, 1)")
        if self.cardiac_output != self.lv_sv * self.heart_rate / 1000.0:
            raise ValueError("cardiac_output must equal lv_sv * heart_rate / 1000 exactly")

    @classmethod
    def from_core(cls, lv_edv, lv_esv, heart_rate, lv_mass, wall_thickness,
                  rv_edv, rv_ef, gcs, gls, grs) -> "PhenotypeVector":
        """Build a vector with the derived identities computed consistently."""
        lv_sv = lv_edv - lv_esv
        return cls(
            lv_edv=lv_edv, lv_esv=lv_esv, lv_sv=lv_sv, lv_ef=lv_sv / lv_edv,
            lv_mass=lv_mass, wall_thickness=wall_thickness, rv_edv=rv_edv,
            rv_ef=rv_ef, gcs=gcs, gls=gls, grs=grs,
            cardiac_output=lv_sv * heart_rate / 1000.0, heart_rate=heart_rate,
        )

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PHENOTYPE_FIELDS], dtype=np.float64)


@dataclass(frozen=True)
class CmrVolume:
    """6-slice short-axis intensity volume at one cardiac phase."""

    intensities: np.ndarray  # (slices, H, W)
    phase: str  # "ED" or "ES"
    voxel_mm: tuple  # (slice thickness, in-plane y, in-plane x)
    bbox: tuple  # (z0, z1, y0, y1, x0, x1) half-open voxel bounds of the shell
    cavity_voxel_count: int

    def __post_init__(self):
        if self.phase not in ("ED", "ES"):
            raise ValueError(f"phase must be ED or ES, got {self.phase!r}")
        object.__setattr__(self, "intensities", np.asarray(self.intensities, dtype=np.float64))

    @property
    def voxel_volume_ml(self) -> float:
        return float(np.prod(self.voxel_mm)) / 1000.0

    @property
    def cavity_volume_ml(self) -> float:
        return self.cavity_voxel_count * self.voxel_volume_ml


@dataclass
class SubjectRecord:
    subject_id: str
    ecg: EcgRecord
    vol_ed: CmrVolume
    vol_es: CmrVolume
    phenotypes: PhenotypeVector
    outcomes: dict
    split: str


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ImagingConfig:
    hw: int = 64
    slices: int = 6
    voxel_mm: float = 2.5       # in-plane
    slice_mm: float = 10.0
    background: float = 0.05
    myocardium: float = 1.0
    cavity: float = 0.15
    noise_sigma: float = 0.03
    offset_x_mm: float = 5.0    # max random in-plane offset
    offset_y_mm: float = 2.5
    shape_ratio: tuple = (2.0, 2.25)  # long-axis / short-axis range
    crop_dilation_mm: float = 10.0
    crop_target_hw: int = 64


@dataclass
class EcgGenConfig:
    noise_sigma: float = 0.05          # white noise, mV
    drift_amp: tuple = (0.1, 0.3)      # baseline wander amplitude range, mV
    drift_hz: tuple = (0.15, 0.35)
    mains_hz: float = 60.0
    mains_amp: tuple = (0.03, 0.12)
    morph_jitter: float = 0.06         # per-lead relative amplitude jitter

    def quiet(self) -> "EcgGenConfig":
        """Noise-free variant used by probes and deterministic tests."""
        return replace(self, noise_sigma=0.0, drift_amp=(0.0, 0.0),
                       mains_amp=(0.0, 0.0), morph_jitter=0.0)


@dataclass
class OutcomeConfig:
    """Logistic outcome simulator: label = 1 iff linear score + noise > 0.

    The noise is a standard logistic variate scaled by `noise_weight`, so
    P(label=1) = sigmoid(score / noise_weight); weight 0 degenerates to a
    deterministic threshold on the linear score.
    """

    noise_weight: float = 1.0
    # intercept plus coefficients over standardized phenotypes
    coefficients: dict = field(default_factory=lambda: {
        "cad": {"_": -1.9, "lv_mass": 0.5, "wall_thickness": 0.4, "lv_ef": -0.3},
        "af": {"_": -2.1, "lv_edv": 0.5, "heart_rate": 0.5, "lv_ef": -0.2},
        "scd": {"_": -2.6, "lv_ef": -0.6, "lv_mass": 0.4},
        "hf": {"_": -1.7, "lv_ef": -1.2, "lv_edv": 0.5, "lv_mass": 0.3},
        "mi": {"_": -2.0, "lv_ef": -0.5, "lv_mass": 0.3, "lv_edv": 0.2},
        "cmp": {"_": -2.3, "lv_mass": 0.7, "wall_thickness": 0.5, "lv_ef": -0.4},
    })


# fixed standardization constants for the outcome models (not cohort statistics,
# so each subject's labels depend only on its own phenotypes and seed)
_NOMINAL_CENTER = {
    "lv_edv": 155.0, "lv_esv": 70.0, "lv_sv": 85.0, "lv_ef": 0.55, "lv_mass": 150.0,
    "wall_thickness": 9.0, "rv_edv": 150.0, "rv_ef": 0.55, "gcs": -0.20, "gls": -0.16,
    "grs": 0.42, "cardiac_output": 6.3, "heart_rate": 75.0,
}
_NOMINAL_SCALE = {
    "lv_edv": 37.5, "lv_esv": 20.0, "lv_sv": 25.0, "lv_ef": 0.09, "lv_mass": 45.0,
    "wall_thickness": 1.7, "rv_edv": 40.0, "rv_ef": 0.09, "gcs": 0.035, "gls": 0.03,
    "grs": 0.08, "cardiac_output": 1.8, "heart_rate": 14.4,
}


@dataclass
class CohortConfig:
    n_subjects: int = 2000
    split_ratios: tuple = (0.7, 0.15, 0.15)
    master_seed: int = 0
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    ecg: EcgGenConfig = field(default_factory=EcgGenConfig)
    outcome: OutcomeConfig = field(default_factory=OutcomeConfig)


def _subject_rng(master_seed: int, index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index), int(tag)]))


# ---------------------------------------------------------------------------
# phenotype sampling
# ---------------------------------------------------------------------------


def sample_phenotypes(rng_seed) -> PhenotypeVector:
    """Draw one plausible phenotype vector; identities hold by construction."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    lv_edv = rng.uniform(90.0, 220.0)
    # ejection fraction anti-correlates with dilation, plus independent spread
    lv_ef = float(np.clip(0.736 - 0.0012 * lv_edv + rng.normal(0.0, 0.06), 0.35, 0.75))
    lv_esv = lv_edv * (1.0 - lv_ef)
    heart_rate = rng.uniform(50.0, 100.0)
    wall_thickness = rng.uniform(6.0, 12.0)
    lv_mass = _shell_mass_g(lv_edv, wall_thickness, _REFERENCE_SHAPE_RATIO)
    rv_edv = float(np.clip(lv_edv * (0.95 + 0.12 * rng.normal()), 60.0, 260.0))
    rv_ef = float(np.clip(lv_ef + 0.04 * rng.normal(), 0.30, 0.80))
    gcs = -(0.05 + 0.28 * lv_ef) * (1.0 + 0.08 * rng.normal())
    gls = -(0.04 + 0.22 * lv_ef) * (1.0 + 0.08 * rng.normal())
    grs = (0.10 + 0.55 * lv_ef) * (1.0 + 0.08 * rng.normal())
    ph = PhenotypeVector.from_core(
        lv_edv=lv_edv, lv_esv=lv_esv, heart_rate=heart_rate, lv_mass=lv_mass,
        wall_thickness=wall_thickness, rv_edv=rv_edv, rv_ef=rv_ef,
        gcs=gcs, gls=gls, grs=grs,
    )
    return ph


def _cavity_axes_mm(volume_ml: float, shape_ratio: float) -> tuple:
    """Ellipsoid semi-axes (short, long, short) in mm for a cavity volume."""
    vol_mm3 = volume_ml * 1000.0
    r = (3.0 * vol_mm3 / (4.0 * math.pi * shape_ratio)) ** (1.0 / 3.0)
    return (r, shape_ratio * r, r)


def _shell_mass_g(lv_edv_ml: float, wall_mm: float, shape_ratio: float) -> float:
    az, ay, ax = _cavity_axes_mm(lv_edv_ml, shape_ratio)
    outer = (az + wall_mm) * (ay + wall_mm) * (ax + wall_mm)
    inner = az * ay * ax
    shell_mm3 = (4.0 / 3.0) * math.pi * (outer - inner)
    return MYOCARDIUM_DENSITY * shell_mm3 / 1000.0


def qrs_duration_ms(phenotypes: PhenotypeVector) -> float:
    """Synthetic QRS duration, a deterministic function of LV mass."""
    return 70.0 + 0.25 * phenotypes.lv_mass


def beat_count(heart_rate: float) -> int:
    return int(round(10.0 * heart_rate / 60.0))


# ---------------------------------------------------------------------------
# CMR rendering
# ---------------------------------------------------------------------------


def _slab_scale_sq(z_lo: float, z_hi: float, az: float) -> float:
    """Mean of (1 - z^2/az^2) over the slab clipped to the ellipsoid."""
    lo = max(z_lo, -az)
    hi = min(z_hi, az)
    if hi <= lo:
        return 0.0
    f = lambda z: z - z**3 / (3.0 * az * az)
    return (f(hi) - f(lo)) / (z_hi - z_lo)


def render_shell(cavity_axes_mm: tuple, wall_mm: float, offset_mm: tuple,
                 rng: np.random.Generator | None, imaging: ImagingConfig,
                 phase: str) -> CmrVolume:
    """Render one ellipsoid-shell volume (bright myocardium, dark cavity).

    Each slice is the slab-averaged cross-section of the ellipsoid, so the
    cavity voxel count times the voxel volume tracks the analytic ellipsoid
    volume up to in-plane discretization.
    """
    az, ay, ax = cavity_axes_mm
    hw, slices = imaging.hw, imaging.slices
    p, t = imaging.voxel_mm, imaging.slice_mm
    oy, ox = offset_mm
    half_xy = hw * p / 2.0
    if az > slices * t / 2.0:
        raise GenerationError(
            f"cavity z-extent {2 * az:.1f} mm exceeds the {slices * t:.0f} mm field of view"
        )
    if ay + abs(oy) > half_xy or ax + abs(ox) > half_xy:
        raise GenerationError(
            f"cavity in-plane extent ({ax:.1f}, {ay:.1f}) mm plus offset does not fit "
            f"the {2 * half_xy:.0f} mm field of view"
        )
    coords = (np.arange(hw) - (hw - 1) / 2.0) * p
    yy = (coords - oy)[:, None]
    xx = (coords - ox)[None, :]
    vol = np.full((slices, hw, hw), imaging.background, dtype=np.float64)
    cavity_count = 0
    z0 = z1 = y0 = y1 = x0 = x1 = None
    for k in range(slices):
        zc = (k - (slices - 1) / 2.0) * t
        s2_cav = _slab_scale_sq(zc - t / 2.0, zc + t / 2.0, az)
        s2_out = _slab_scale_sq(zc - t / 2.0, zc + t / 2.0, az + wall_mm)
        if s2_out <= 0.0:
            continue
        s_out = math.sqrt(s2_out)
        outer = (yy / ((ay + wall_mm) * s_out)) ** 2 + (xx / ((ax + wall_mm) * s_out)) ** 2 <= 1.0
        vol[k][outer] = imaging.myocardium
        if s2_cav > 0.0:
            s_cav = math.sqrt(s2_cav)
            cav = (yy / (ay * s_cav)) ** 2 + (xx / (ax * s_cav)) ** 2 <= 1.0
            vol[k][cav] = imaging.cavity
            cavity_count += int(cav.sum())
        ys, xs = np.nonzero(outer)
        if ys.size:
            z0 = k if z0 is None else z0
            z1 = k + 1
            y0 = int(ys.min()) if y0 is None else min(y0, int(ys.min()))
            y1 = int(ys.max()) + 1 if y1 is None else max(y1, int(ys.max()) + 1)
            x0 = int(xs.min()) if x0 is None else min(x0, int(xs.min()))
            x1 = int(xs.max()) + 1 if x1 is None else max(x1, int(xs.max()) + 1)
    if z0 is None:
        raise GenerationError("rendered shell is empty")
    if rng is not None and imaging.noise_sigma > 0.0:
        vol = vol + rng.normal(0.0, imaging.noise_sigma, size=vol.shape)
    return CmrVolume(
        intensities=vol, phase=phase, voxel_mm=(t, p, p),
        bbox=(z0, z1, y0, y1, x0, x1), cavity_voxel_count=cavity_count,
    )


def render_cmr(phenotypes: PhenotypeVector, phase: str, rng_seed,
               imaging: ImagingConfig | None = None) -> CmrVolume:
    """Render the ED or ES volume for a subject.

    The ED and ES renders of one subject share shape ratio and offset (drawn
    from the phase-independent part of the stream), so end-systole is a
    strict contraction of end-diastole.
    """
    if phase not in ("ED", "ES"):
        raise ValueError(f"phase must be ED or ES, got {phase!r}")
    imaging = imaging or ImagingConfig()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    shape_ratio = rng.uniform(*imaging.shape_ratio)
    oy = rng.uniform(-imaging.offset_y_mm, imaging.offset_y_mm)
    ox = rng.uniform(-imaging.offset_x_mm, imaging.offset_x_mm)
    volume_ml = phenotypes.lv_edv if phase == "ED" else phenotypes.lv_esv
    axes = _cavity_axes_mm(volume_ml, shape_ratio)
    return render_shell(axes, phenotypes.wall_thickness, (oy, ox), rng, imaging, phase)


def crop_and_pad(volume: CmrVolume, dilation_mm: float | None = None,
                 target_hw: int | None = None,
                 imaging: ImagingConfig | None = None) -> CmrVolume:
    """Standardize a volume: crop to the dilated heart box, pad to target.

    The in-plane bounding box is grown by `dilation_mm` per side, clamped to
    the field of view, then zero-padded symmetrically to target_hw x
    target_hw (center-cropped instead when the grown box exceeds the target).
    """
    imaging = imaging or ImagingConfig()
    if dilation_mm is None:
        dilation_mm = imaging.crop_dilation_mm
    if target_hw is None:
        target_hw = imaging.crop_target_hw
    z0, z1, y0, y1, x0, x1 = volume.bbox
    if y1 <= y0 or x1 <= x0:
        raise GenerationError("empty bounding box")
    slices, h, w = volume.intensities.shape
    grow_y = int(round(dilation_mm / volume.voxel_mm[1]))
    grow_x = int(round(dilation_mm / volume.voxel_mm[2]))
    cy0, cy1 = max(0, y0 - grow_y), min(h, y1 + grow_y)
    cx0, cx1 = max(0, x0 - grow_x), min(w, x1 + grow_x)
    crop = volume.intensities[:, cy0:cy1, cx0:cx1]

    def fit(arr, axis):
        extent = arr.shape[axis]
        if extent == target_hw:
            return arr, 0
        if extent < target_hw:
            before = (target_hw - extent) // 2
            after = target_hw - extent - before
            pads = [(0, 0)] * arr.ndim
            pads[axis] = (before, after)
            return np.pad(arr, pads), before
        start = (extent - target_hw) // 2
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(start, start + target_hw)
        return arr[tuple(sl)], -start

    out, dy = fit(crop, 1)
    out, dx = fit(out, 2)
    new_bbox = (
        z0, z1,
        max(0, y0 - cy0 + dy), min(target_hw, y1 - cy0 + dy),
        max(0, x0 - cx0 + dx), min(target_hw, x1 - cx0 + dx),
    )
    return replace(volume, intensities=out, bbox=new_bbox)


# ---------------------------------------------------------------------------
# ECG rendering
# ---------------------------------------------------------------------------

# fixed per-lead amplitude patterns (mV); every entry nonzero so amplitude
# scaling stays strictly monotone in each lead
_LEAD_QRS = np.array([0.9, 1.1, 0.5, -0.8, 0.4, 0.7, -0.6, 0.9, 1.2, 1.4, 1.1, 0.8])
_LEAD_T = np.array([0.25, 0.3, 0.15, -0.2, 0.12, 0.2, 0.1, 0.25, 0.35, 0.4, 0.3, 0.25])
_LEAD_P = np.array([0.08, 0.1, 0.05, -0.07, 0.04, 0.06, 0.05, 0.08, 0.1, 0.1, 0.09, 0.08])


def _gauss_train(t: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    out = np.zeros_like(t)
    for c in centers:
        out += np.exp(-0.5 * ((t - c) / sigma) ** 2)
    return out


def render_ecg(phenotypes: PhenotypeVector, rng_seed,
               ecg_cfg: EcgGenConfig | None = None, subject_id: str = "") -> EcgRecord:
    """Synthesize a raw 12-lead recording whose morphology encodes phenotypes.

    QRS amplitude grows with LV mass, T-wave amplitude with ejection
    fraction, the beat interval is 60/heart_rate, and QRS width follows the
    synthetic QRS duration. Baseline drift, mains interference, white noise,
    and per-lead amplitude jitter are the nuisance channel.
    """
    cfg = ecg_cfg or EcgGenConfig()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    t = np.arange(N_SAMPLES) / SAMPLE_RATE
    rr = 60.0 / phenotypes.heart_rate
    n_beats = beat_count(phenotypes.heart_rate)
    slack = 10.0 - (n_beats - 1) * rr
    t0 = rng.uniform(0.0, max(0.02, slack - 0.02))
    beats = t0 + np.arange(n_beats) * rr

    qrs_sigma = qrs_duration_ms(phenotypes) / 4000.0
    r_wave = _gauss_train(t, beats, qrs_sigma)
    s_wave = _gauss_train(t, beats + 1.8 * qrs_sigma, 0.8 * qrs_sigma)
    t_wave = _gauss_train(t, beats + 0.30 * math.sqrt(rr), 0.07)
    p_wave = _gauss_train(t, beats - 0.17, 0.025)

    mass_scale = 0.45 + 0.005 * phenotypes.lv_mass
    ef_scale = 0.15 + 1.3 * phenotypes.lv_ef

    def jitter():
        return np.maximum(0.2, 1.0 + cfg.morph_jitter * rng.normal(size=N_LEADS))

    amp_qrs = _LEAD_QRS * mass_scale * jitter()
    amp_t = _LEAD_T * ef_scale * jitter()
    amp_p = _LEAD_P * jitter()

    leads = (
        np.outer(amp_qrs, r_wave)
        - 0.28 * np.outer(amp_qrs, s_wave)
        + np.outer(amp_t, t_wave)
        + np.outer(amp_p, p_wave)
    )

    drift_amp = rng.uniform(*cfg.drift_amp, size=N_LEADS)
    drift_hz = rng.uniform(*cfg.drift_hz, size=N_LEADS)
    drift_phase = rng.uniform(0.0, 2.0 * math.pi, size=N_LEADS)
    leads += drift_amp[:, None] * np.sin(2.0 * math.pi * drift_hz[:, None] * t + drift_phase[:, None])

    mains_amp = rng.uniform(*cfg.mains_amp, size=N_LEADS)
    mains_phase = rng.uniform(0.0, 2.0 * math.pi)
    leads += mains_amp[:, None] * np.sin(2.0 * math.pi * cfg.mains_hz * t + mains_phase)

    if cfg.noise_sigma > 0.0:
        leads += rng.normal(0.0, cfg.noise_sigma, size=leads.shape)
    return EcgRecord(leads, subject_id=subject_id)


# ---------------------------------------------------------------------------
# outcomes
# ---------------------------------------------------------------------------


def outcome_scores(phenotypes: PhenotypeVector, cfg: OutcomeConfig | None = None) -> dict:
    """Linear risk scores over nominally standardized phenotypes."""
    cfg = cfg or OutcomeConfig()
    scores = {}
    for name, coeffs in cfg.coefficients.items():
        score = 0.0
        for key, beta in coeffs.items():
            if key == "_":
                score += beta
            else:
                z = (getattr(phenotypes, key) - _NOMINAL_CENTER[key]) / _NOMINAL_SCALE[key]
                score += beta * z
        scores[name] = score
    return scores


def simulate_outcomes(phenotypes: PhenotypeVector, rng_seed,
                      cfg: OutcomeConfig | None = None) -> dict:
    """Six binary labels from logistic models over the phenotypes."""
    cfg = cfg or OutcomeConfig()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    labels = {}
    for name, score in outcome_scores(phenotypes, cfg).items():
        if cfg.noise_weight == 0.0:
            labels[name] = int(score > 0.0)
        else:
            u = rng.uniform()
            noise = math.log(u / (1.0 - u))
            labels[name] = int(score + cfg.noise_weight * noise > 0.0)
    return labels


# ---------------------------------------------------------------------------
# splits and cohort assembly
# ---------------------------------------------------------------------------


def assign_splits(n_subjects: int, split_ratios: tuple, master_seed: int) -> list:
    """Deterministic subject-level split with exact floor counts.

    Validation and test sizes are floors of their ratios; the remainder goes
    to train. The permutation is a pure function of (n, master_seed).
    """
    if n_subjects < 10:
        raise ValueError(f"n_subjects must be >= 10, got {n_subjects}")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {split_ratios}")
    n_val = int(math.floor(split_ratios[1] * n_subjects))
    n_test = int(math.floor(split_ratios[2] * n_subjects))
    n_train = n_subjects - n_val - n_test
    rng = np.random.default_rng(np.random.SeedSequence([int(master_seed), 0, _TAG_SPLIT]))
    order = rng.permutation(n_subjects)
    splits = [""] * n_subjects
    for pos, idx in enumerate(order):
        if pos < n_train:
            splits[idx] = "train"
        elif pos < n_train + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "test"
    return splits


def subject_id_for(index: int) -> str:
    return f"subj-{index:07d}"


def generate_subject(index: int, cfg: CohortConfig, split: str) -> SubjectRecord:
    ph = sample_phenotypes(_subject_rng(cfg.master_seed, index, _TAG_PHENOTYPE))
    sid = subject_id_for(index)
    ecg = render_ecg(ph, _subject_rng(cfg.master_seed, index, _TAG_ECG), cfg.ecg, subject_id=sid)
    # shape and offset are shared across phases so ES nests inside ED; the
    # acquisition noise fields are independent per phase
    geo = _subject_rng(cfg.master_seed, index, _TAG_GEOMETRY)
    shape_ratio = geo.uniform(*cfg.imaging.shape_ratio)
    oy = geo.uniform(-cfg.imaging.offset_y_mm, cfg.imaging.offset_y_mm)
    ox = geo.uniform(-cfg.imaging.offset_x_mm, cfg.imaging.offset_x_mm)
    vol_ed = render_shell(_cavity_axes_mm(ph.lv_edv, shape_ratio), ph.wall_thickness,
                          (oy, ox), _subject_rng(cfg.master_seed, index, _TAG_ED_NOISE),
                          cfg.imaging, "ED")
    vol_es = render_shell(_cavity_axes_mm(ph.lv_esv, shape_ratio), ph.wall_thickness,
                          (oy, ox), _subject_rng(cfg.master_seed, index, _TAG_ES_NOISE),
                          cfg.imaging, "ES")
    vol_ed = crop_and_pad(vol_ed, imaging=cfg.imaging)
    vol_es = crop_and_pad(vol_es, imaging=cfg.imaging)
    outcomes = simulate_outcomes(ph, _subject_rng(cfg.master_seed, index, _TAG_OUTCOME), cfg.outcome)
    return SubjectRecord(sid, ecg, vol_ed, vol_es, ph, outcomes, split)


def _csv_row(values) -> str:
    return ",".join(values)


def build_cohort(cfg: CohortConfig, out_dir) -> "Cohort":
    """Generate and write the full cohort directory.

    Layout: manifest.txt (one line per subject: id, split, file names and
    sizes), phenotypes.csv with the documented column order, per-subject
    tensor containers (float32) with key=value sidecars.
    """
    out_dir = Path(out_dir)
    subj_dir = out_dir / "subjects"
    subj_dir.mkdir(parents=True, exist_ok=True)
    splits = assign_splits(cfg.n_subjects, cfg.split_ratios, cfg.master_seed)

    manifest_lines = []
    csv_lines = [_csv_row(("subject_id", "split") + PHENOTYPE_FIELDS + tuple(f"out_{o}" for o in OUTCOME_FIELDS))]
    for index in range(cfg.n_subjects):
        rec = generate_subject(index, cfg, splits[index])
        sid = rec.subject_id
        files = {}
        files["ecg"] = f"subjects/{sid}.ecg.bin"
        container.write_tensor(out_dir / files["ecg"], rec.ecg.leads.astype(np.float32))
        container.write_meta(out_dir / f"subjects/{sid}.ecg.meta", {
            "subject_id": sid, "sample_rate": "500",
            "stage_flags": ",".join(sorted(rec.ecg.stage_flags)),
        })
        for phase, vol in (("ed", rec.vol_ed), ("es", rec.vol_es)):
            files[phase] = f"subjects/{sid}.{phase}.bin"
            container.write_tensor(out_dir / files[phase], vol.intensities.astype(np.float32))
            container.write_meta(out_dir / f"subjects/{sid}.{phase}.meta", {
                "subject_id": sid, "phase": vol.phase,
                "voxel_mm": ",".join(repr(v) for v in vol.voxel_mm),
                "bbox": ",".join(str(v) for v in vol.bbox),
                "cavity_voxels": str(vol.cavity_voxel_count),
            })
        sizes = {k: (out_dir / v).stat().st_size for k, v in files.items()}
        manifest_lines.append("\t".join([
            sid, rec.split,
            files["ecg"], str(sizes["ecg"]),
            files["ed"], str(sizes["ed"]),
            files["es"], str(sizes["es"]),
        ]))
        row = [sid, rec.split]
        row += [repr(float(getattr(rec.phenotypes, f))) for f in PHENOTYPE_FIELDS]
        row += [str(rec.outcomes[o]) for o in OUTCOME_FIELDS]
        csv_lines.append(_csv_row(row))

    (out_dir / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    (out_dir / "phenotypes.csv").write_text("\n".join(csv_lines) + "\n")
    (out_dir / "cohort_config.json").write_text(_config_json(cfg) + "\n")
    return Cohort(out_dir)


def _config_json(cfg: CohortConfig) -> str:
    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
        if isinstance(obj, (tuple, list)):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        return obj

    return json.dumps(plain(cfg), indent=2, sort_keys=True)


class Cohort:
    """Read access to a cohort directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.ids: list[str] = []
        self.splits: list[str] = []
        self._files: list[tuple] = []
        for line in (self.root / "manifest.txt").read_text().splitlines():
            parts = line.split("\t")
            self.ids.append(parts[0])
            self.splits.append(parts[1])
            self._files.append((parts[2], parts[4], parts[6]))
        self.phenotypes, self.outcomes = self._read_csv()

    def _read_csv(self):
        lines = (self.root / "phenotypes.csv").read_text().splitlines()
        header = lines[0].split(",")
        cols = {name: [] for name in header}
        for line in lines[1:]:
            for name, value in zip(header, line.split(",")):
                cols[name].append(value)
        phen = {f: np.array([float(v) for v in cols[f]]) for f in PHENOTYPE_FIELDS}
        out = {o: np.array([int(v) for v in cols[f"out_{o}"]]) for o in OUTCOME_FIELDS}
        return phen, out

    def __len__(self):
        return len(self.ids)

    def indices_for(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def ecg_raw(self, index: int) -> np.ndarray:
        return container.read_tensor(self.root / self._files[index][0]).astype(np.float64)

    def volume_array(self, index: int, phase: str) -> np.ndarray:
        """Fast path: intensities only, no sidecar metadata."""
        slot = 1 if phase.upper() == "ED" else 2
        return container.read_tensor(self.root / self._files[index][slot]).astype(np.float64)

    def volume(self, index: int, phase: str) -> CmrVolume:
        slot = 1 if phase.upper() == "ED" else 2
        rel = self._files[index][slot]
        meta = container.read_meta(self.root / rel.replace(".bin", ".meta"))
        return CmrVolume(
            intensities=container.read_tensor(self.root / rel).astype(np.float64),
            phase=meta["phase"],
            voxel_mm=tuple(float(v) for v in meta["voxel_mm"].split(",")),
            bbox=tuple(int(v) for v in meta["bbox"].split(",")),
            cavity_voxel_count=int(meta["cavity_voxels"]),
        )

    def phenotype_matrix(self, indices=None) -> np.ndarray:
        mat = np.stack([self.phenotypes[f] for f in PHENOTYPE_FIELDS], axis=1)
        return mat if indices is None else mat[indices]
