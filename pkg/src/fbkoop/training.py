"""Joint training of the encoder and the forward/backward operator blocks.

One composite objective couples five terms: forward and backward state
prediction, forward and backward lifted-state prediction, and a consistency
penalty tying the two operator blocks together as mutual inverses.  All
gradients are exact reverse-mode expressions; the optimizer is Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import TripletBatch
from .lifting import EncoderParams, Standardizer, encode, encode_vjp, init_encoder
from .seeding import stream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteGradient(Exception):
    """A gradient tensor picked up NaN/Inf; training cannot continue."""


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the composite objective."""

    alpha1: float = 1.0    # state prediction (forward + backward)
    alpha2: float = 0.5    # lifted prediction (forward + backward)
    alpha3: float = 0.01   # operator consistency
    gamma1: float = 0.0    # L1 on encoder weights
    gamma2: float = 0.0    # squared L2 on encoder weights

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3, self.gamma1, self.gamma2) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha1 == 0 and self.alpha2 == 0:
            raise ValueError("at least one prediction weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 200
    clip_norm: float | None = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


@dataclass
class TrainState:
    """Mutable training state: encoder, operator blocks and Adam moments."""

    encoder: EncoderParams
    standardizer: Standardizer
    A_fm: np.ndarray
    B_fm: np.ndarray
    A_bm: np.ndarray
    B_bm: np.ndarray
    moments: dict = field(default_factory=dict)
    step: int = 0

    @property
    def lifted_dim(self) -> int:
        return self.A_fm.shape[0]

    @property
    def state_dim(self) -> int:
        return self.encoder.in_dim

    def named_params(self) -> dict:
        params = {"A_fm": self.A_fm, "B_fm": self.B_fm,
                  "A_bm": self.A_bm, "B_bm": self.B_bm}
        for k, (W, b) in enumerate(zip(self.encoder.weights, self.encoder.biases)):
            params[f"enc_W{k}"] = W
            params[f"enc_b{k}"] = b
        return params


def init_train_state(n: int, m: int, encoder_dims: list, seed: int,
                     standardizer: Standardizer | None = None) -> TrainState:
    """Fresh state: seeded encoder, identity dynamics blocks, zero input blocks.

    encoder_dims runs input -> hidden... -> encoder output; the lifted
    dimension is n + encoder output.
    """
    if encoder_dims[0] != n:
        raise ValueError(f"encoder input dim {encoder_dims[0]} != state dim {n}")
    enc = init_encoder(encoder_dims, stream(seed, "encoder-init"))
    N = n + enc.out_dim
    return TrainState(
        encoder=enc,
        standardizer=standardizer or Standardizer.identity(n),
        A_fm=np.eye(N),
        B_fm=np.zeros((N, m)),
        A_bm=np.eye(N),
        B_bm=np.zeros((N, m)),
    )


def _lift_batch(X: np.ndarray, st: TrainState, with_cache: bool = False):
    Xs = st.standardizer.apply(X)
    if with_cache:
        zeta, cache = encode(Xs, st.encoder, return_cache=True)
        return np.vstack([X, zeta]), cache
    return np.vstack([X, encode(Xs, st.encoder)])


def _reg_terms(st: TrainState, w: LossWeights) -> float:
    if w.gamma1 == 0 and w.gamma2 == 0:
        return 0.0
    l1 = sum(np.abs(W).sum() for W in st.encoder.weights)
    l2 = sum((W ** 2).sum() for W in st.encoder.weights)
    return float(w.gamma1 * l1 + w.gamma2 * l2)


def loss_terms(batch: TripletBatch, st: TrainState, w: LossWeights) -> dict:
    """All objective terms on one batch (means over columns, no weighting)."""
    s = batch.n_columns
    if s == 0:
        raise ValueError("batch is empty")
    Z0 = _lift_batch(batch.Xm, st)
    Zp = _lift_batch(batch.Xm_plus, st)
    Zm = _lift_batch(batch.Xm_minus, st)
    n = st.state_dim
    Rfl = Zp - (st.A_fm @ Z0 + st.B_fm @ batch.Um)
    Rbl = Zm - (st.A_bm @ Z0 + st.B_bm @ batch.Um_minus)
    E1 = st.A_fm @ st.A_bm - np.eye(st.lifted_dim)
    E2 = st.A_fm @ st.B_bm + st.B_fm
    return {
        "l_fpred": float((Rfl[:n] ** 2).sum() / s),
        "l_flift": float((Rfl ** 2).sum() / s),
        "l_bpred": float((Rbl[:n] ** 2).sum() / s),
        "l_blift": float((Rbl ** 2).sum() / s),
        "l_con": float((E1 ** 2).sum() + (E2 ** 2).sum()),
        "reg": _reg_terms(st, w),
    }


def total_loss(batch: TripletBatch, st: TrainState, w: LossWeights) -> float:
    t = loss_terms(batch, st, w)
    return (w.alpha1 * (t["l_fpred"] + t["l_bpred"])
            + w.alpha2 * (t["l_flift"] + t["l_blift"])
            + w.alpha3 * t["l_con"] + t["reg"])


def loss_and_grads(batch: TripletBatch, st: TrainState,
                   w: LossWeights) -> tuple[float, dict, dict]:
    """Total loss, per-term values, and exact gradients for every parameter."""
    s = batch.n_columns
    if s == 0:
        raise ValueError("batch is empty")
    n = st.state_dim
    N = st.lifted_dim

    X0s = st.standardizer.apply(batch.Xm)
    Xps = st.standardizer.apply(batch.Xm_plus)
    Xms = st.standardizer.apply(batch.Xm_minus)
    zeta0, cache0 = encode(X0s, st.encoder, return_cache=True)
    zetap, cachep = encode(Xps, st.encoder, return_cache=True)
    zetam, cachem = encode(Xms, st.encoder, return_cache=True)
    Z0 = np.vstack([batch.Xm, zeta0])
    Zp = np.vstack([batch.Xm_plus, zetap])
    Zm = np.vstack([batch.Xm_minus, zetam])

    Rfl = Zp - (st.A_fm @ Z0 + st.B_fm @ batch.Um)
    Rbl = Zm - (st.A_bm @ Z0 + st.B_bm @ batch.Um_minus)
    E1 = st.A_fm @ st.A_bm - np.eye(N)
    E2 = st.A_fm @ st.B_bm + st.B_fm

    terms = {
        "l_fpred": float((Rfl[:n] ** 2).sum() / s),
        "l_flift": float((Rfl ** 2).sum() / s),
        "l_bpred": float((Rbl[:n] ** 2).sum() / s),
        "l_blift": float((Rbl ** 2).sum() / s),
        "l_con": float((E1 ** 2).sum() + (E2 ** 2).sum()),
        "reg": _reg_terms(st, w),
    }
    total = (w.alpha1 * (terms["l_fpred"] + terms["l_bpred"])
             + w.alpha2 * (terms["l_flift"] + terms["l_blift"])
             + w.alpha3 * terms["l_con"] + terms["reg"])

    # combined residual cotangents: alpha1 acts on the state block only
    c = 2.0 / s
    Gf = c * w.alpha2 * Rfl
    Gf[:n] += c * w.alpha1 * Rfl[:n]
    Gb = c * w.alpha2 * Rbl
    Gb[:n] += c * w.alpha1 * Rbl[:n]

    grads = {
        "A_fm": -Gf @ Z0.T + w.alpha3 * 2.0 * (E1 @ st.A_bm.T + E2 @ st.B_bm.T),
        "B_fm": -Gf @ batch.Um.T + w.alpha3 * 2.0 * E2,
        "A_bm": -Gb @ Z0.T + w.alpha3 * 2.0 * (st.A_fm.T @ E1),
        "B_bm": -Gb @ batch.Um_minus.T + w.alpha3 * 2.0 * (st.A_fm.T @ E2),
    }

    # encoder cotangents: Z0 feeds both residuals, Zp/Zm one each
    G_zeta0 = -(st.A_fm.T @ Gf + st.A_bm.T @ Gb)[n:]
    enc_grads, _ = encode_vjp(st.encoder, cache0, G_zeta0)
    for pair, (dW, db) in zip(enc_grads, encode_vjp(st.encoder, cachep, Gf[n:])[0]):
        pair[0][...] += dW
        pair[1][...] += db
    for pair, (dW, db) in zip(enc_grads, encode_vjp(st.encoder, cachem, Gb[n:])[0]):
        pair[0][...] += dW
        pair[1][...] += db
    for k, (dW, db) in enumerate(enc_grads):
        if w.gamma1:
            dW += w.gamma1 * np.sign(st.encoder.weights[k])
        if w.gamma2:
            dW += 2.0 * w.gamma2 * st.encoder.weights[k]
        grads[f"enc_W{k}"] = dW
        grads[f"enc_b{k}"] = db
    return total, terms, grads


def grad_step(batch: TripletBatch, st: TrainState, w: LossWeights, lr: float,
              clip_norm: float | None = 10.0) -> dict:
    """One Adam update on all parameters in place; returns the term values."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    total, terms, grads = loss_and_grads(batch, st, w)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name} is not finite (loss={total})")
    if clip_norm is not None:
        global_norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        if global_norm > clip_norm:
            scale = clip_norm / global_norm
            grads = {k: g * scale for k, g in grads.items()}
    st.step += 1
    t = st.step
    params = st.named_params()
    for name, g in grads.items():
        if name not in st.moments:
            st.moments[name] = (np.zeros_like(g), np.zeros_like(g))
        mom, vel = st.moments[name]
        mom = ADAM_BETA1 * mom + (1 - ADAM_BETA1) * g
        vel = ADAM_BETA2 * vel + (1 - ADAM_BETA2) * g * g
        st.moments[name] = (mom, vel)
        m_hat = mom / (1 - ADAM_BETA1 ** t)
        v_hat = vel / (1 - ADAM_BETA2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    terms["total"] = total
    return terms


def train(batch: TripletBatch, n: int, m: int, encoder_dims: list,
          config: TrainConfig) -> tuple[TrainState, list]:
    """Mini-batch training over shuffled triplet columns.

    Deterministic given config.seed: the encoder init and every epoch's
    shuffle come from named derived streams.  Returns the final state and a
    per-epoch history of mean loss terms.
    """
    s = batch.n_columns
    if s < config.batch_size:
        raise ValueError(f"dataset has {s} columns < batch size {config.batch_size}")
    standardizer = Standardizer.fit(batch.Xm.T)
    st = init_train_state(n, m, encoder_dims, config.seed, standardizer)
    history = []
    keys = ("l_fpred", "l_flift", "l_bpred", "l_blift", "l_con", "reg", "total")
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** (epoch // config.lr_decay_every)
        perm = stream(config.seed, "shuffle", epoch).permutation(s)
        sums = dict.fromkeys(keys, 0.0)
        for start in range(0, s, config.batch_size):
            idx = perm[start:start + config.batch_size]
            terms = grad_step(batch.take(idx), st, config.weights, lr, config.clip_norm)
            for k in keys:
                sums[k] += terms[k] * len(idx)
        row = {"epoch": epoch, "lr": lr}
        row.update({k: sums[k] / s for k in keys})
        history.append(row)
    return st, history
