"""Synthetic CGM traces for pre-training and desk-scale experiments.

Each subject is basal glucose plus a daily sinusoid, a gamma-shaped bump
``A * u * exp(1 - u)`` (``u`` = minutes since the meal / ``tau``) for every
meal, and AR(1) sensor noise, clipped to the usual 40-400 mg/dl CGM range.
Meal times and sizes wander from day to day around the profile's schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, derive_seed
from .pipeline import GlucoseSeries

SAMPLES_PER_DAY = 288
CLIP = (40.0, 400.0)
SIM_START = 1577836800.0  # 2020-01-01T00:00:00Z

# ranges gen_cohort draws profiles from
PROFILE_RANGES = {
    "basal": (95.0, 140.0),
    "circadian_amp": (5.0, 25.0),
    "meal_amp": (35.0, 90.0),
    "meal_tau": (40.0, 75.0),
    "noise_phi": (0.6, 0.9),
    "noise_sigma": (1.5, 3.0),
}
MEAL_CLOCK = ((6.5 * 60, 8.5 * 60), (11.5 * 60, 13.5 * 60), (18.0 * 60, 20.0 * 60))


@dataclass
class SubjectProfile:
    basal: float
    circadian_amp: float
    meal_times: list[float]
    meal_amps: list[float]
    meal_tau: float
    noise_phi: float
    noise_sigma: float
    seed: int
    meal_time_jitter: float = 20.0  # minutes, sd of the daily shift of each meal
    meal_amp_jitter: float = 0.25  # relative sd of the daily meal size
    subject_id: str = field(default="sim")

    def __post_init__(self):
        if not 90.0 <= self.basal <= 160.0:
            raise ValueError(f"basal {self.basal} outside [90, 160] mg/dl")
        if not 0.0 <= self.noise_phi < 1.0:
            raise ValueError("noise_phi must lie in [0, 1)")
        if self.noise_sigma < 0 or self.meal_tau <= 0:
            raise ValueError("noise_sigma must be >= 0 and meal_tau > 0")
        if len(self.meal_times) != len(self.meal_amps):
            raise ValueError("meal_times and meal_amps differ in length")


def meal_events(profile: SubjectProfile, days: int) -> tuple[np.ndarray, np.ndarray]:
    """Actual meal onsets (minutes from start, on the 5-minute grid) and sizes."""
    rng = SeededRng(derive_seed(profile.seed, 1))
    times, amps = [], []
    for day in range(days):
        for t, a in zip(profile.meal_times, profile.meal_amps):
            shift = profile.meal_time_jitter * rng.normal()
            onset = 5.0 * round((day * 1440.0 + t + shift) / 5.0)
            size = max(0.0, a * (1.0 + profile.meal_amp_jitter * rng.normal()))
            times.append(onset)
            amps.append(size)
    return np.array(times), np.array(amps)


def glucose_curve(profile: SubjectProfile, minutes, meals=None) -> np.ndarray:
    """Noise-free, unclipped glucose at the given minutes."""
    t = np.asarray(minutes, dtype=np.float64)
    if meals is None:
        days = int(np.ceil((t.max() + 1) / 1440.0)) if t.size else 1
        meals = meal_events(profile, max(days, 1))
    g = profile.basal + profile.circadian_amp * np.sin(2.0 * np.pi * t / 1440.0)
    for tm, a in zip(*meals):
        u = (t - tm) / profile.meal_tau
        on = u > 0
        g[on] += a * u[on] * np.exp(1.0 - u[on])
    return g


def gen_subject(profile: SubjectProfile, days: int) -> GlucoseSeries:
    """``days * 288`` samples, fully determined by the profile's seed."""
    if days < 1:
        raise ValueError("days must be >= 1")
    n = days * SAMPLES_PER_DAY
    t = 5.0 * np.arange(n)
    g = glucose_curve(profile, t, meal_events(profile, days))
    eps = SeededRng(derive_seed(profile.seed, 2)).normal(n) * profile.noise_sigma
    noise = np.empty(n)
    prev = 0.0
    for i in range(n):
        prev = profile.noise_phi * prev + eps[i]
        noise[i] = prev
    return GlucoseSeries(profile.subject_id, SIM_START, np.clip(g + noise, *CLIP))


def random_profile(seed: int, subject_id: str = "sim") -> SubjectProfile:
    rng = SeededRng(seed)

    def draw(key):
        lo, hi = PROFILE_RANGES[key]
        return rng.uniform(lo, hi)

    basal = draw("basal")
    circ = draw("circadian_amp")
    meal_times = [rng.uniform(lo, hi) for lo, hi in MEAL_CLOCK]
    meal_amps = [draw("meal_amp") for _ in MEAL_CLOCK]
    return SubjectProfile(basal=basal, circadian_amp=circ, meal_times=meal_times, meal_amps=meal_amps,
                          meal_tau=draw("meal_tau"), noise_phi=draw("noise_phi"),
                          noise_sigma=draw("noise_sigma"), seed=derive_seed(seed, 0),
                          subject_id=subject_id)


def gen_cohort(n_subjects: int, days: int, master_seed: int) -> list[GlucoseSeries]:
    """``n_subjects`` independent subjects; subject ``j`` is seeded from ``(master_seed, j)``."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    return [gen_subject(random_profile(derive_seed(master_seed, j), f"sim{j + 1:02d}"), days)
            for j in range(n_subjects)]
