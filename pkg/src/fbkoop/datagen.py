"""Training data generation: random excitation, SNR-scaled noise, snapshot triplets.

Datasets persist as a directory of one CSV per trajectory (row = timestep,
state columns then input columns) plus a meta.json; floats are written with
shortest round-trip formatting so loading is bit-exact.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_seed, stream
from .systems import Diverged, SystemSpec, Trajectory, simulate

MAX_RESAMPLE = 10


class Empty(Exception):
    """No trajectory long enough to contribute a snapshot triplet."""


class DegenerateChannel(Warning):
    """A channel with zero rms cannot carry SNR-scaled noise; sigma is set to 0."""


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement-noise configuration; snr_db None means noise-free."""

    snr_db: float | None
    seed: int = 0
    corrupt_inputs: bool = True

    def __post_init__(self):
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite when present")


@dataclass(frozen=True)
class Excitation:
    """Uniform sampling boxes for initial states and per-step inputs."""

    x0_low: tuple
    x0_high: tuple
    u_low: tuple
    u_high: tuple

    @staticmethod
    def default_for(spec: SystemSpec) -> "Excitation":
        n, m = spec.state_dim, spec.input_dim
        if spec.kind == "arm":
            k = spec.params.n_links
            return Excitation(
                x0_low=(-np.pi / 4,) * k + (-0.5,) * k,
                x0_high=(np.pi / 4,) * k + (0.5,) * k,
                u_low=(-2.0,) * m,
                u_high=(2.0,) * m,
            )
        return Excitation(x0_low=(-1.0,) * n, x0_high=(1.0,) * n,
                          u_low=(-1.0,) * m, u_high=(1.0,) * m)


@dataclass
class TripletBatch:
    """Aligned snapshot matrices of interior windows (x_{k-1}, x_k, x_{k+1}).

    Columns of all five matrices come from consecutive indices of a single
    source trajectory; Um_minus holds the input that produced the step into
    x_k, Um the input leaving it.
    """

    Xm_minus: np.ndarray
    Xm: np.ndarray
    Xm_plus: np.ndarray
    Um_minus: np.ndarray
    Um: np.ndarray
    dt: float

    def __post_init__(self):
        s = self.Xm.shape[1]
        mats = (self.Xm_minus, self.Xm, self.Xm_plus, self.Um_minus, self.Um)
        if any(M.shape[1] != s for M in mats):
            raise ValueError("snapshot matrices must share the column count")

    @property
    def n_columns(self) -> int:
        return self.Xm.shape[1]

    def take(self, idx: np.ndarray) -> "TripletBatch":
        """Column subset (used for mini-batching)."""
        return TripletBatch(self.Xm_minus[:, idx], self.Xm[:, idx],
                            self.Xm_plus[:, idx], self.Um_minus[:, idx],
                            self.Um[:, idx], self.dt)


def snr_sigma(signal: np.ndarray, snr_db: float) -> float:
    """Noise std for one channel: rms(signal) * 10^(-snr_db/20)."""
    rms = float(np.sqrt(np.mean(np.asarray(signal, float) ** 2)))
    if rms == 0.0:
        warnings.warn("channel rms is zero; noise sigma set to 0", DegenerateChannel)
        return 0.0
    return rms * 10.0 ** (-snr_db / 20.0)


def channel_sigmas(trajs: list[Trajectory], snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel noise stds against the whole dataset's rms."""
    states = np.concatenate([t.states for t in trajs], axis=0)
    inputs = np.concatenate([t.inputs for t in trajs], axis=0)
    sig_x = np.array([snr_sigma(states[:, i], snr_db) for i in range(states.shape[1])])
    sig_u = np.array([snr_sigma(inputs[:, j], snr_db) for j in range(inputs.shape[1])])
    return sig_x, sig_u


def corrupt(traj: Trajectory, spec: NoiseSpec,
            state_sigmas: np.ndarray | None = None,
            input_sigmas: np.ndarray | None = None) -> Trajectory:
    """Add i.i.d. zero-mean Gaussian noise per channel, deterministic in spec.seed.

    Sigma defaults to the SNR scale of this trajectory's own channels; dataset
    generation passes dataset-wide sigmas instead.
    """
    if spec.snr_db is None:
        return Trajectory(traj.dt, traj.states.copy(), traj.inputs.copy())
    if state_sigmas is None:
        state_sigmas = np.array([snr_sigma(traj.states[:, i], spec.snr_db)
                                 for i in range(traj.states.shape[1])])
    rng = np.random.default_rng(spec.seed)
    states = traj.states + rng.standard_normal(traj.states.shape) * state_sigmas
    inputs = traj.inputs.copy()
    if spec.corrupt_inputs:
        if input_sigmas is None:
            input_sigmas = np.array([snr_sigma(traj.inputs[:, j], spec.snr_db)
                                     for j in range(traj.inputs.shape[1])])
        inputs = inputs + rng.standard_normal(inputs.shape) * input_sigmas
    return Trajectory(traj.dt, states, inputs)


def gen_dataset(spec: SystemSpec, n_traj: int, n_snap: int, dt: float,
                excitation: Excitation | None, noise: NoiseSpec,
                seed: int) -> tuple[list[Trajectory], list[Trajectory]]:
    """Simulate n_traj excitation trajectories and return (noisy, clean) copies.

    The clean copies exist for evaluation oracles only and never feed
    training.  Diverging trajectories are resampled from a fresh derived
    stream, up to MAX_RESAMPLE retries each.
    """
    if n_traj < 3 or n_snap < 3:
        raise ValueError("need at least 3 trajectories of at least 3 snapshots")
    exc = excitation or Excitation.default_for(spec)
    clean: list[Trajectory] = []
    for i in range(n_traj):
        traj = None
        for retry in range(MAX_RESAMPLE + 1):
            rng = stream(seed, f"traj:{i}", retry)
            x0 = rng.uniform(exc.x0_low, exc.x0_high)
            inputs = rng.uniform(exc.u_low, exc.u_high, size=(n_snap - 1, spec.input_dim))
            try:
                traj = simulate(spec, x0, inputs, dt)
                break
            except Diverged:
                continue
        if traj is None:
            raise Diverged(f"trajectory {i} diverged {MAX_RESAMPLE + 1} times")
        clean.append(traj)
    if noise.snr_db is None:
        noisy = [Trajectory(t.dt, t.states.copy(), t.inputs.copy()) for t in clean]
        return noisy, clean
    sig_x, sig_u = channel_sigmas(clean, noise.snr_db)
    noisy = [
        corrupt(t, NoiseSpec(noise.snr_db, derive_seed(seed, "noise", i), noise.corrupt_inputs),
                state_sigmas=sig_x, input_sigmas=sig_u)
        for i, t in enumerate(clean)
    ]
    return noisy, clean


def build_triplets(trajs: list[Trajectory]) -> TripletBatch:
    """Concatenate all interior snapshot windows of the given trajectories."""
    usable = [t for t in trajs if len(t) >= 3]
    if not usable:
        raise Empty("no trajectory of length >= 3")
    xm_minus, xm, xm_plus, um_minus, um = [], [], [], [], []
    for t in usable:
        xm_minus.append(t.states[:-2])
        xm.append(t.states[1:-1])
        xm_plus.append(t.states[2:])
        um_minus.append(t.inputs[:-1])
        um.append(t.inputs[1:])
    return TripletBatch(
        Xm_minus=np.concatenate(xm_minus).T,
        Xm=np.concatenate(xm).T,
        Xm_plus=np.concatenate(xm_plus).T,
        Um_minus=np.concatenate(um_minus).T,
        Um=np.concatenate(um).T,
        dt=usable[0].dt,
    )


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

def _write_traj_csv(path: Path, traj: Trajectory) -> None:
    n = traj.states.shape[1]
    m = traj.inputs.shape[1]
    header = [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, state in enumerate(traj.states):
            row = [repr(v) for v in state]
            if k < len(traj.inputs):
                row += [repr(v) for v in traj.inputs[k]]
            else:
                row += [""] * m
            writer.writerow(row)


def _read_traj_csv(path: Path, dt: float) -> Trajectory:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for h in header if h.startswith("x"))
        m = len(header) - n
        states, inputs = [], []
        for row in reader:
            states.append([float(v) for v in row[:n]])
            if row[n] != "":
                inputs.append([float(v) for v in row[n:]])
    return Trajectory(dt=dt, states=np.array(states), inputs=np.array(inputs))


def save_dataset(path, noisy: list[Trajectory], clean: list[Trajectory],
                 meta: dict) -> None:
    """Persist noisy/ and clean/ trajectory CSVs plus meta.json."""
    root = Path(path)
    (root / "noisy").mkdir(parents=True, exist_ok=True)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    for i, (tn, tc) in enumerate(zip(noisy, clean)):
        _write_traj_csv(root / "noisy" / f"traj_{i:04d}.csv", tn)
        _write_traj_csv(root / "clean" / f"traj_{i:04d}.csv", tc)
    record = dict(meta)
    record["schema_version"] = 1
    record["n_traj"] = len(noisy)
    with (root / "meta.json").open("w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> tuple[list[Trajectory], list[Trajectory], dict]:
    """Load a dataset directory back into (noisy, clean, meta)."""
    root = Path(path)
    with (root / "meta.json").open() as fh:
        meta = json.load(fh)
    if meta.get("schema_version") != 1:
        raise ValueError(f"unsupported dataset schema {meta.get('schema_version')!r}")
    dt = float(meta["dt"])
    n_traj = int(meta["n_traj"])
    noisy = [_read_traj_csv(root / "noisy" / f"traj_{i:04d}.csv", dt) for i in range(n_traj)]
    clean = [_read_traj_csv(root / "clean" / f"traj_{i:04d}.csv", dt) for i in range(n_traj)]
    return noisy, clean, meta
