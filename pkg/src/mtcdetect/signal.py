"""Uplink MTC signal simulator.

Devices are dropped uniformly in a disk around the BS, pilots are i.i.d.
standard complex Gaussian, and power control equalises the received power
so that ``p_n * g_n == p_max * g_min`` for every device.  A sample draws
Bernoulli activity, Rayleigh small-scale fading and AWGN and forms

    Y = B diag(a) H + W,    C = Y Y^H / M.

Everything is stored in linear units; dB only appears in function arguments.
Complex matrices are numpy ``complex128`` arrays; the real/imaginary split
happens at the file and network boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError

MIN_DISTANCE_KM = 0.005


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based stream split: one independent generator per key tuple."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def path_loss_db(distance_km):
    """128.1 + 37.6 log10(D) with D in kilometres."""
    return 128.1 + 37.6 * np.log10(distance_km)


def noise_variance(noise_psd_dbm_hz: float, bandwidth_hz: float) -> float:
    """Total noise power in watts over the given bandwidth."""
    return float(dbm_to_watts(noise_psd_dbm_hz + 10.0 * np.log10(bandwidth_hz)))


def complex_gaussian(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    std = np.sqrt(variance / 2.0)
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass
class Scenario:
    pilots: np.ndarray  # (Lp, N) complex
    distances_km: np.ndarray
    gains: np.ndarray  # large-scale gain g_n, linear
    powers: np.ndarray  # transmit power p_n, watts
    noise_var: float
    B: np.ndarray = field(init=False)

    def __post_init__(self):
        self.B = self.pilots * np.sqrt(self.powers * self.gains)[None, :]

    @property
    def n_devices(self) -> int:
        return self.pilots.shape[1]

    @property
    def pilot_len(self) -> int:
        return self.pilots.shape[0]


@dataclass
class Sample:
    B: np.ndarray  # (Lp, N)
    labels: np.ndarray  # (N,) uint8
    C: np.ndarray  # (Lp, Lp)
    noise_var: float
    m_antennas: int
    Y: Optional[np.ndarray] = None  # (Lp, M), kept only on request


def generate_scenario(
    n_devices: int,
    pilot_len: int,
    cell_radius_km: float = 0.25,
    p_max_dbm: float = 23.0,
    noise_psd_dbm_hz: float = -169.0,
    bandwidth_hz: float = 10e6,
    seed: int = 0,
    power_control: bool = True,
) -> Scenario:
    if n_devices < 1 or pilot_len < 1:
        raise ParameterError(f"need n_devices >= 1 and pilot_len >= 1, got {n_devices}, {pilot_len}")
    if cell_radius_km <= 0:
        raise ParameterError(f"cell radius must be positive, got {cell_radius_km}")
    if bandwidth_hz <= 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth_hz}")
    rng = derive_rng(seed, 0)
    pilots = complex_gaussian(rng, (pilot_len, n_devices))
    # uniform in the disk: radius ~ R sqrt(U)
    dist = cell_radius_km * np.sqrt(rng.uniform(size=n_devices))
    dist = np.maximum(dist, MIN_DISTANCE_KM)
    gains = db_to_linear(-path_loss_db(dist))
    p_max = float(dbm_to_watts(p_max_dbm))
    if power_control:
        g_min = float(db_to_linear(-path_loss_db(cell_radius_km)))
        powers = p_max * g_min / gains
    else:
        powers = np.full(n_devices, p_max)
    return Scenario(
        pilots=pilots,
        distances_km=dist,
        gains=gains,
        powers=powers,
        noise_var=noise_variance(noise_psd_dbm_hz, bandwidth_hz),
    )


def scenario_from_b(B: np.ndarray, noise_var: float) -> Scenario:
    """Wrap an explicit scaled pilot matrix (unit gains and powers)."""
    B = np.asarray(B, dtype=complex)
    n = B.shape[1]
    return Scenario(pilots=B, distances_km=np.full(n, np.nan), gains=np.ones(n),
                    powers=np.ones(n), noise_var=float(noise_var))


def sample_covariance(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[1] < 1:
        raise ParameterError(f"Y must be Lp x M with M >= 1, got shape {Y.shape}")
    return (Y @ Y.conj().T) / Y.shape[1]


def draw_labels(rng, n_devices: int, activity_ratio: float, n_active: Optional[int] = None) -> np.ndarray:
    if n_active is None:
        return (rng.uniform(size=n_devices) < activity_ratio).astype(np.uint8)
    if not 0 <= n_active <= n_devices:
        raise ParameterError(f"n_active must lie in [0, {n_devices}], got {n_active}")
    labels = np.zeros(n_devices, dtype=np.uint8)
    labels[rng.choice(n_devices, size=n_active, replace=False)] = 1
    return labels


def received_signal(B, labels, m_antennas, noise_var, rng) -> np.ndarray:
    Lp, N = B.shape
    H = complex_gaussian(rng, (N, m_antennas))
    W = complex_gaussian(rng, (Lp, m_antennas), noise_var) if noise_var > 0 else np.zeros((Lp, m_antennas), complex)
    active = np.flatnonzero(labels)
    return B[:, active] @ H[active] + W


def draw_sample(
    scenario: Scenario,
    m_antennas: int,
    activity_ratio: float = 0.1,
    seed: int = 0,
    n_active: Optional[int] = None,
    labels: Optional[np.ndarray] = None,
    keep_y: bool = False,
) -> Sample:
    """One labelled detection instance.

    ``n_active`` switches from Bernoulli activity to exactly that many active
    devices; ``labels`` fixes the activity pattern outright.
    """
    if m_antennas < 1:
        raise ParameterError(f"m_antennas must be >= 1, got {m_antennas}")
    if not 0.0 <= activity_ratio <= 1.0:
        raise ParameterError(f"activity_ratio must lie in [0, 1], got {activity_ratio}")
    rng = derive_rng(seed, 1)
    if labels is None:
        labels = draw_labels(rng, scenario.n_devices, activity_ratio, n_active)
    else:
        labels = np.asarray(labels, dtype=np.uint8)
        if labels.shape != (scenario.n_devices,):
            raise ParameterError(f"labels must have shape ({scenario.n_devices},), got {labels.shape}")
    Y = received_signal(scenario.B, labels, m_antennas, scenario.noise_var, rng)
    return Sample(
        B=scenario.B,
        labels=labels,
        C=sample_covariance(Y),
        noise_var=scenario.noise_var,
        m_antennas=m_antennas,
        Y=Y if keep_y else None,
    )


def model_covariance(B: np.ndarray, activity, noise_var: float) -> np.ndarray:
    """Sigma = B diag(a) B^H + sigma^2 I."""
    a = np.asarray(activity, dtype=float)
    return (B * a[None, :]) @ B.conj().T + noise_var * np.eye(B.shape[0])


@dataclass
class Batch:
    """Stacked samples sharing N, Lp: the unit fed to training and evaluation."""

    B: np.ndarray  # (S, Lp, N)
    C: np.ndarray  # (S, Lp, Lp)
    labels: np.ndarray  # (S, N)
    noise_var: np.ndarray  # (S,)
    m_antennas: int

    def __len__(self):
        return self.labels.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        if not samples:
            raise ParameterError("cannot stack an empty list of samples")
        return cls(
            B=np.stack([s.B for s in samples]),
            C=np.stack([s.C for s in samples]),
            labels=np.stack([s.labels for s in samples]).astype(np.uint8),
            noise_var=np.array([s.noise_var for s in samples], dtype=float),
            m_antennas=samples[0].m_antennas,
        )

    def sample(self, i: int) -> Sample:
        return Sample(B=self.B[i], labels=self.labels[i], C=self.C[i],
                      noise_var=float(self.noise_var[i]), m_antennas=self.m_antennas)


@dataclass
class SimulationSetup:
    """Parameters of the deployment and of sample drawing."""

    n_devices: int = 100
    pilot_len: int = 8
    m_antennas: int = 64
    cell_radius_km: float = 0.25
    p_max_dbm: float = 23.0
    noise_psd_dbm_hz: float = -169.0
    bandwidth_hz: float = 10e6
    activity_ratio: float = 0.1

    def scenario(self, seed: int, n_devices: Optional[int] = None) -> Scenario:
        return generate_scenario(
            n_devices or self.n_devices, self.pilot_len, self.cell_radius_km,
            self.p_max_dbm, self.noise_psd_dbm_hz, self.bandwidth_hz, seed,
        )


def generate_batch(
    setup: SimulationSetup,
    count: int,
    seed: int,
    scenario_mode: str = "sample",
    scenario: Optional[Scenario] = None,
    keep_y: bool = False,
) -> tuple[Batch, list]:
    """Draw ``count`` samples with per-sample seeds ``(seed, i)``.

    ``scenario_mode``: ``"sample"`` draws a new deployment per sample,
    ``"batch"`` one deployment for the whole batch, ``"fixed"`` uses the
    supplied ``scenario``.  Returns the stacked batch and, when ``keep_y``,
    the list of received signals.
    """
    if count == 0:
        n, lp = setup.n_devices, setup.pilot_len
        empty = Batch(B=np.zeros((0, lp, n), complex), C=np.zeros((0, lp, lp), complex),
                      labels=np.zeros((0, n), np.uint8), noise_var=np.zeros(0), m_antennas=setup.m_antennas)
        return empty, []
    if scenario_mode == "fixed":
        if scenario is None:
            raise ParameterError("scenario_mode='fixed' needs a scenario")
        shared = scenario
    elif scenario_mode == "batch":
        shared = setup.scenario(int(derive_rng(seed, 2).integers(2**62)))
    elif scenario_mode == "sample":
        shared = None
    else:
        raise ParameterError(f"unknown scenario_mode '{scenario_mode}'")
    samples = []
    for i in range(count):
        sample_seed = int(derive_rng(seed, 3, i).integers(2**62))
        scen = shared if shared is not None else setup.scenario(sample_seed)
        samples.append(draw_sample(scen, setup.m_antennas, setup.activity_ratio, sample_seed, keep_y=keep_y))
    ys = [s.Y for s in samples] if keep_y else []
    return Batch.from_samples(samples), ys
