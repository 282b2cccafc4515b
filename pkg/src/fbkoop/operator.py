"""Operator assembly, reduced-bias synthesis, baseline fits and rollouts.

Block operators act on [z; u] stacks and are stored by their top blocks
(A, B); the bottom rows are [0 I] by construction.  The reduced-bias
operator is the principal square root of the forward/backward-inverse
product; solving (A_p + I) B_p = B_fm - A_fm A_bm^-1 B_bm keeps the block
upper-triangular form exact instead of square-rooting the full stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import TripletBatch
from .lifting import (EncoderLifting, EncoderParams, IdentityLifting, Lifting,
                      MonomialLifting, Standardizer, decode, lift)
from .numerics import inv, lstsq_right, sqrtm_principal
from .systems import Trajectory
from .training import TrainState

PROVENANCES = ("fb_net", "nominal_ls", "fb_edmd", "linear_true")


@dataclass(frozen=True)
class BlockOp:
    """Top blocks of the (N+m) operator [[A, B], [0, I]]."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        if self.A.shape[0] != self.A.shape[1] or self.A.shape[0] != self.B.shape[0]:
            raise ValueError("inconsistent block dimensions")

    @property
    def lifted_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def as_matrix(self) -> np.ndarray:
        N, m = self.A.shape[0], self.B.shape[1]
        return np.block([[self.A, self.B],
                         [np.zeros((m, N)), np.eye(m)]])

    def compose(self, other: "BlockOp") -> "BlockOp":
        """Block multiply law: (K1 K2).A = A1 A2, (K1 K2).B = A1 B2 + B1."""
        return BlockOp(self.A @ other.A, self.A @ other.B + self.B)


@dataclass
class KoopmanModel:
    """Deployable linear model: z+ = A z + B u, x = z[:n], with its lifting."""

    A: np.ndarray
    B: np.ndarray
    lifting: Lifting
    dt: float
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        N = self.lifting.lifted_dim
        if self.A.shape != (N, N) or self.B.shape[0] != N:
            raise ValueError("operator blocks inconsistent with the lifting dimension")

    @property
    def n(self) -> int:
        return self.lifting.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def lifted_dim(self) -> int:
        return self.lifting.lifted_dim


def assemble(st: TrainState) -> tuple[BlockOp, BlockOp]:
    """Forward and backward block operators from trained weights."""
    return (BlockOp(st.A_fm.copy(), st.B_fm.copy()),
            BlockOp(st.A_bm.copy(), st.B_bm.copy()))


def reduced_bias(K_fm: BlockOp, K_bm: BlockOp) -> BlockOp:
    """Principal square root of K_fm K_bm^-1, computed block-wise.

    The top blocks of K_fm K_bm^-1 are M = A_fm A_bm^-1 and
    N' = B_fm - A_fm A_bm^-1 B_bm; A_p is the principal root of M and B_p
    solves (A_p + I) B_p = N'.  Raises Singular or NoPrincipalRoot when the
    data violates temporal invertibility.
    """
    A_bm_inv = inv(K_bm.A)
    M = K_fm.A @ A_bm_inv
    N_top = K_fm.B - K_fm.A @ A_bm_inv @ K_bm.B
    A_p = sqrtm_principal(M)
    B_p = inv(A_p + np.eye(A_p.shape[0])) @ N_top
    return BlockOp(A_p, B_p)


def fb_net_model(st: TrainState, dt: float) -> KoopmanModel:
    """Reduced-bias model from a trained state, wrapping its encoder lifting."""
    K_fm, K_bm = assemble(st)
    K_p = reduced_bias(K_fm, K_bm)
    return KoopmanModel(A=K_p.A, B=K_p.B,
                       lifting=EncoderLifting(st.encoder, st.standardizer),
                       dt=dt, provenance="fb_net")


def nominal_fit(batch: TripletBatch, lifting: Lifting) -> KoopmanModel:
    """Single forward least-squares fit on the lifted snapshots, no correction."""
    N, m = lifting.lifted_dim, batch.Um.shape[0]
    if batch.n_columns <= N + m:
        raise ValueError(f"need more than {N + m} columns, got {batch.n_columns}")
    Z = lift(batch.Xm, lifting)
    Zp = lift(batch.Xm_plus, lifting)
    K = lstsq_right(Zp, np.vstack([Z, batch.Um]))
    return KoopmanModel(A=K[:, :N], B=K[:, N:], lifting=lifting,
                        dt=batch.dt, provenance="nominal_ls")


def fb_edmd_fit(batch: TripletBatch, lifting: Lifting) -> KoopmanModel:
    """Forward and backward fixed-dictionary fits followed by bias reduction."""
    N, m = lifting.lifted_dim, batch.Um.shape[0]
    if batch.n_columns <= N + m:
        raise ValueError(f"need more than {N + m} columns, got {batch.n_columns}")
    Z = lift(batch.Xm, lifting)
    Zp = lift(batch.Xm_plus, lifting)
    Zm = lift(batch.Xm_minus, lifting)
    Kf = lstsq_right(Zp, np.vstack([Z, batch.Um]))
    Kb = lstsq_right(Zm, np.vstack([Z, batch.Um_minus]))
    K_p = reduced_bias(BlockOp(Kf[:, :N], Kf[:, N:]),
                       BlockOp(Kb[:, :N], Kb[:, N:]))
    return KoopmanModel(A=K_p.A, B=K_p.B, lifting=lifting,
                        dt=batch.dt, provenance="fb_edmd")


def rollout(model: KoopmanModel, x0: np.ndarray, inputs) -> Trajectory:
    """Lift once, propagate linearly, decode every step (no re-lifting)."""
    x0 = np.asarray(x0, dtype=float)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.m)
    z = lift(x0, model.lifting)
    states = np.empty((len(inputs) + 1, model.n))
    states[0] = decode(z, model.n)
    for k, u in enumerate(inputs):
        z = model.A @ z + model.B @ u
        states[k + 1] = decode(z, model.n)
    return Trajectory(dt=model.dt, states=states, inputs=inputs)


# ---------------------------------------------------------------------------
# checkpoint persistence (versioned JSON, shortest round-trip floats)
# ---------------------------------------------------------------------------

def _lifting_to_json(lifting: Lifting) -> dict:
    if isinstance(lifting, IdentityLifting):
        return {"kind": "identity", "n": lifting.n}
    if isinstance(lifting, MonomialLifting):
        return {"kind": "monomial", "n": lifting.n, "max_degree": lifting.max_degree}
    if isinstance(lifting, EncoderLifting):
        return {
            "kind": "encoder",
            "mean": lifting.standardizer.mean.tolist(),
            "std": lifting.standardizer.std.tolist(),
            "weights": [W.tolist() for W in lifting.encoder.weights],
            "biases": [b.tolist() for b in lifting.encoder.biases],
        }
    raise TypeError(f"cannot serialize lifting {type(lifting).__name__}")


def _lifting_from_json(obj: dict) -> Lifting:
    kind = obj["kind"]
    if kind == "identity":
        return IdentityLifting(int(obj["n"]))
    if kind == "monomial":
        return MonomialLifting(int(obj["n"]), int(obj["max_degree"]))
    if kind == "encoder":
        enc = EncoderParams([np.array(W, dtype=float) for W in obj["weights"]],
                            [np.array(b, dtype=float) for b in obj["biases"]])
        std = Standardizer(np.array(obj["mean"], dtype=float),
                           np.array(obj["std"], dtype=float))
        return EncoderLifting(enc, std)
    raise ValueError(f"unknown lifting kind {kind!r}")


def save_model(path, model: KoopmanModel) -> None:
    record = {
        "schema_version": 1,
        "provenance": model.provenance,
        "dt": model.dt,
        "n": model.n,
        "m": model.m,
        "lifted_dim": model.lifted_dim,
        "lifting": _lifting_to_json(model.lifting),
        "A": model.A.tolist(),
        "B": model.B.tolist(),
    }
    with Path(path).open("w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> KoopmanModel:
    with Path(path).open() as fh:
        record = json.load(fh)
    if record.get("schema_version") != 1:
        raise ValueError(f"unsupported checkpoint schema {record.get('schema_version')!r}")
    lifting = _lifting_from_json(record["lifting"])
    A = np.array(record["A"], dtype=float)
    B = np.array(record["B"], dtype=float)
    N = int(record["lifted_dim"])
    if lifting.lifted_dim != N or A.shape != (N, N) or B.shape != (N, int(record["m"])):
        raise ValueError("checkpoint dimensions are inconsistent")
    if lifting.n != int(record["n"]):
        raise ValueError("checkpoint state dimension is inconsistent")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("checkpoint operator blocks contain non-finite entries")
    return KoopmanModel(A=A, B=B, lifting=lifting, dt=float(record["dt"]),
                        provenance=record["provenance"])
