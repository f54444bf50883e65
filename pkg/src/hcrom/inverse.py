"""Online phase: data compression, reduced Tikhonov/TSVD solves and CG baselines."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .forward import TruthOperator, apply_T, apply_T_sub, apply_Tt, apply_Tt_sub
from .linalg import cg_normal_equations
from .reduce import FingerprintMismatchError, ReducedModel, TruncationSelection

STAGES = ("raw", "precompressed", "cross", "reduced")
FILTERS = ("tikhonov", "tsvd")


class StageError(ValueError):
    pass


@dataclass(frozen=True)
class Measurement:
    data: np.ndarray
    delta: float
    stage: str = "raw"
    fingerprint: str = ""

    def advance(self, data: np.ndarray, stage: str, fingerprint: str) -> "Measurement":
        if STAGES.index(stage) <= STAGES.index(self.stage):
            raise StageError(f"cannot move from stage {self.stage!r} to {stage!r}")
        return replace(self, data=data, stage=stage, fingerprint=fingerprint)


@dataclass
class Reconstruction:
    c: np.ndarray
    alpha: float
    filter: str
    discrepancy: float
    iterations: int = 0
    converged: bool = True


def add_noise(M: np.ndarray, delta: float, seed: int) -> Measurement:
    """``M + delta * E / ||E||_F`` with standard normal ``E``; the error is exactly ``delta``."""
    M = np.asarray(M, dtype=float)
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    if delta == 0:
        return Measurement(data=M.copy(), delta=0.0)
    E = np.random.default_rng(seed).standard_normal(M.shape)
    return Measurement(data=M + (delta / np.linalg.norm(E)) * E, delta=float(delta))


def _check_fingerprint(meas: Measurement, model: ReducedModel):
    if meas.fingerprint and model.fingerprint and meas.fingerprint != model.fingerprint:
        raise FingerprintMismatchError("measurement was compressed with a different model")


def precompress(meas: Measurement, model: ReducedModel, physical: bool = False) -> Measurement:
    """Restrict raw data to the retained detectors and sources.

    Orthonormal-basis data is sliced to ``M[mKK][:, xKK]``; physical-basis
    data (one row per boundary detector) is mapped by ``QmKᵀ M QxK``.
    """
    if meas.stage != "raw":
        raise StageError(f"precompress expects raw data, got {meas.stage!r}")
    _check_fingerprint(meas, model)
    folder = StreamingPrecompressor(model, meas.delta, physical=physical)
    for d, row in enumerate(meas.data):
        folder.fold(row, d)
    return meas.advance(folder.result().data, "precompressed", model.fingerprint)


class StreamingPrecompressor:
    """Fold raw data one detector row at a time into the precompressed block.

    Orthonormal-basis rows of retained detectors are sliced to ``xKK``;
    physical-basis rows accumulate ``QmKᵀ M QxK`` as a sum of outer products.
    """

    def __init__(self, model: ReducedModel, delta: float, physical: bool = False):
        self.model = model
        self.delta = delta
        self.physical = physical
        sel = model.selection
        self._acc = np.zeros((sel.mK, sel.xK))
        self._pos = {int(d): i for i, d in enumerate(sel.mKK)}

    def fold(self, row: np.ndarray, detector: int):
        row = np.asarray(row, dtype=float)
        if self.physical:
            self._acc += np.outer(self.model.QmK[detector], row @ self.model.QxK)
        elif detector in self._pos:
            self._acc[self._pos[detector]] = row[self.model.selection.xKK]

    def result(self) -> Measurement:
        return Measurement(data=self._acc.copy(), delta=self.delta, stage="precompressed",
                           fingerprint=self.model.fingerprint)


def cross_entries(MKK: np.ndarray, model: ReducedModel) -> np.ndarray:
    pairs = model.cross.pairs
    return MKK[pairs[:, 0], pairs[:, 1]]


def compress(meas: Measurement, model: ReducedModel) -> Measurement:
    """``M_N = PN · (cross entries of M_KK)``."""
    if meas.stage != "precompressed":
        raise StageError(f"compress expects precompressed data, got {meas.stage!r}")
    _check_fingerprint(meas, model)
    return meas.advance(model.PN @ cross_entries(meas.data, model), "reduced", model.fingerprint)


def _residual(model: ReducedModel, c, MN) -> float:
    return float(np.linalg.norm(model.AN @ c - MN))


def solve_reduced(MN: np.ndarray, model: ReducedModel, alpha: float, filter: str = "tikhonov",
                  check_diagonal: bool = True) -> Reconstruction:
    """Filtered reduced normal equations, ``c = ANt z``.

    Tikhonov: ``z = (AN ANt + alpha I)⁻¹ M_N`` by Cholesky. TSVD: ``AN ANt`` is
    ``diag(lambdaN)`` and ``z_i = M_N,i / lambda_i`` where ``lambda_i >= alpha``.
    """
    MN = np.asarray(MN, dtype=float)
    if filter not in FILTERS:
        raise ValueError(f"filter must be one of {FILTERS}, got {filter!r}")
    if model.N < 1:
        raise ValueError("reduced model has rank zero")
    if filter == "tikhonov":
        if not alpha > 0:
            raise ValueError(f"alpha must be positive for tikhonov, got {alpha}")
        H = model.AN @ model.ANt
        H = 0.5 * (H + H.T)
        H[np.diag_indices_from(H)] += alpha
        z = sla.cho_solve(sla.cho_factor(H, lower=True), MN)
    else:
        lam = model.lambdaN
        if check_diagonal:
            H = model.AN @ model.ANt
            off = np.abs(H - np.diag(lam)).max()
            if off > 1e-8 * lam[0]:
                raise ValueError(f"AN ANt is not diagonal in the model basis (offset {off:.2e})")
        z = np.where(lam >= alpha, MN / lam, 0.0)
    c = model.ANt @ z
    return Reconstruction(c=c, alpha=float(alpha), filter=filter, discrepancy=_residual(model, c, MN))


@dataclass
class AlphaChoice:
    alpha: float
    exponent: int
    reconstruction: Reconstruction
    satisfied: bool
    trace: list


def choose_alpha_discrepancy(MN: np.ndarray, model: ReducedModel, delta: float, tau: float = 1.5,
                             max_exponent: int = 16, filter: str = "tikhonov") -> AlphaChoice:
    """Largest ``alpha = 10**-n`` with ``||AN c_alpha − M_N|| <= tau delta``.

    If no grid value qualifies, returns the one with the smallest discrepancy
    and ``satisfied=False``.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    trace = []
    best = None
    for n in range(0, max_exponent + 1):
        rec = solve_reduced(MN, model, 10.0 ** (-n), filter, check_diagonal=(n == 0))
        trace.append((n, rec.discrepancy))
        if rec.discrepancy <= tau * delta:
            return AlphaChoice(rec.alpha, n, rec, True, trace)
        if best is None or rec.discrepancy < best[1].discrepancy:
            best = (n, rec)
    return AlphaChoice(best[1].alpha, best[0], best[1], False, trace)


def solve_full_baseline(op: TruthOperator, meas: Measurement, alpha: float, delta: float | None = None,
                        maxit: int = 10_000) -> Reconstruction:
    """CG on ``(T*T + alpha I) c = T*M`` with tolerance ``alpha delta²``."""
    delta = meas.delta if delta is None else delta
    res = cg_normal_equations(lambda c: apply_T(op, c), lambda M: apply_Tt(op, M), meas.data,
                              alpha, alpha * delta ** 2, maxit, weights=op.DD)
    disc = float(np.linalg.norm(apply_T(op, res.c) - meas.data))
    return Reconstruction(res.c, alpha, "cg", disc, res.iterations, res.converged)


def solve_tensor_baseline(op: TruthOperator, selection: TruncationSelection, meas: Measurement,
                          alpha: float, delta: float | None = None, maxit: int = 10_000) -> Reconstruction:
    """CG with the truncated tensor-product operator ``V_Kᵀ D(c) U_K``.

    Accepts raw ``k x k`` data (restricted here) or precompressed ``mK x xK`` data.
    """
    delta = meas.delta if delta is None else delta
    rows, cols = selection.mKK, selection.xKK
    data = meas.data if meas.stage == "precompressed" else meas.data[np.ix_(rows, cols)]
    res = cg_normal_equations(lambda c: apply_T_sub(op, c, rows, cols),
                              lambda M: apply_Tt_sub(op, M, rows, cols), data,
                              alpha, alpha * delta ** 2, maxit, weights=op.DD)
    disc = float(np.linalg.norm(apply_T_sub(op, res.c, rows, cols) - data))
    return Reconstruction(res.c, alpha, "cg", disc, res.iterations, res.converged)


def x_norm(c: np.ndarray, DD: np.ndarray) -> float:
    return float(np.sqrt(np.dot(DD * c, c)))
