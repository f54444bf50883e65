"""Offline model reduction: truncation, hyperbolic cross and recompression."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forward import TruthOperator, apply_T
from .linalg import InconsistencyError

FORMAT_VERSION = 1
MAGIC = int.from_bytes(b"HCROMMAT", "little")
_HEADER = struct.Struct("<qqq")


class TrivialModelError(ValueError):
    """Every singular value is below the noise level; the model would be zero."""


class ModelFormatError(ValueError):
    pass


class CorruptBlockError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class FingerprintMismatchError(ModelFormatError):
    pass


@dataclass(frozen=True)
class TruncationSelection:
    delta: float
    xKK: np.ndarray
    mKK: np.ndarray

    @property
    def xK(self) -> int:
        return int(self.xKK.size)

    @property
    def mK(self) -> int:
        return int(self.mKK.size)


@dataclass(frozen=True)
class HyperbolicIndexSet:
    """Pairs ``(k, l)``, 0-based positions into ``mKK`` and ``xKK``, in loop order."""

    pairs: np.ndarray
    K: int
    epsilon: float = 0.0

    @property
    def NK(self) -> int:
        return int(self.pairs.shape[0])


def truncate(sx: np.ndarray, sm: np.ndarray, delta: float) -> TruncationSelection:
    """Keep the indices with ``s_i**2 > delta**2`` (strict)."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    sx = np.asarray(sx, dtype=float)
    sm = np.asarray(sm, dtype=float)
    xKK = np.flatnonzero(sx ** 2 > delta ** 2)
    mKK = np.flatnonzero(sm ** 2 > delta ** 2)
    if xKK.size == 0 or mKK.size == 0:
        raise TrivialModelError(f"no singular value exceeds delta={delta:g}")
    return TruncationSelection(delta=float(delta), xKK=xKK, mKK=mKK)


def choose_cross_parameter(selection: TruncationSelection) -> int:
    """Single loop bound of the hyperbolic cross, ``max(xK, mK)``."""
    return max(selection.xK, selection.mK)


def hyperbolic_pairs(K: int, mK: int, xK: int, epsilon: float = 0.0) -> np.ndarray:
    """Index pairs of ``{(k, l): l <= K / k**(1+eps)}`` clipped to ``mK x xK``.

    Returned 0-based; the double loop runs in detector-major order.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    rows, cols = [], []
    for k in range(1, min(K, mK) + 1):
        L = K // k if epsilon == 0 else int(np.floor(K / k ** (1.0 + epsilon)))
        L = min(L, xK)
        if L < 1:
            break
        rows.append(np.full(L, k - 1))
        cols.append(np.arange(L))
    return np.column_stack([np.concatenate(rows), np.concatenate(cols)]).astype(np.int64)


def cross_count(K: int, mK: int, xK: int) -> int:
    return sum(min(K // k, xK) for k in range(1, min(K, mK) + 1))


def assemble_hyperbolic_cross(op: TruthOperator, selection: TruncationSelection, K: int,
                              epsilon: float = 0.0):
    """Rows ``(V[:, mKK[k]] * U[:, xKK[l]] * DD)`` for every cross pair."""
    pairs = hyperbolic_pairs(K, selection.mK, selection.xK, epsilon)
    cross = HyperbolicIndexSet(pairs=pairs, K=int(K), epsilon=float(epsilon))
    return cross, _cross_rows(op, selection, cross, slice(None))


def _cross_rows(op, selection, cross, rows):
    det = selection.mKK[cross.pairs[:, 0]]
    src = selection.xKK[cross.pairs[:, 1]]
    # U/V may hold only leading columns; the selection is always a prefix
    V = op.V[rows][:, det]
    U = op.U[rows][:, src]
    return (V * U * op.DD[rows][:, None]).T


def _recompress_gram(B: np.ndarray, delta: float):
    lam, W = np.linalg.eigh(0.5 * (B + B.T))
    lam, W = lam[::-1], W[:, ::-1]
    keep = lam > delta ** 2
    return lam[keep], W[:, keep].T, lam


def recompress(AK: np.ndarray, DD: np.ndarray, delta: float):
    """Truncated eigendecomposition of ``AK DD⁻¹ AKᵀ``.

    Returns ``(PN, AN, ANt, lambdaN)`` with ``AN = PN AK`` and
    ``ANt = DD⁻¹ ANᵀ``.
    """
    B = AK @ (AK / DD).T
    lambdaN, PN, _ = _recompress_gram(B, delta)
    if lambdaN.size == 0:
        raise TrivialModelError(f"delta={delta:g} exceeds the largest cross singular value")
    AN = PN @ AK
    ANt = (AN / DD).T
    return PN, AN, ANt, lambdaN


def cross_spectrum(op: TruthOperator, selection: TruncationSelection, cross: HyperbolicIndexSet,
                   chunk: int = 8192) -> np.ndarray:
    """All eigenvalues (descending) of ``AK DD⁻¹ AKᵀ``, accumulated over vertex chunks."""
    NK = cross.NK
    B = np.zeros((NK, NK))
    for s in range(0, op.m, chunk):
        rows = slice(s, min(s + chunk, op.m))
        A = _cross_rows(op, selection, cross, rows)
        B += A @ (A / op.DD[rows]).T
    return np.linalg.eigvalsh(0.5 * (B + B.T))[::-1]


@dataclass(frozen=True)
class ReducedModel:
    selection: TruncationSelection
    cross: HyperbolicIndexSet
    QxK: np.ndarray
    QmK: np.ndarray
    AK: np.ndarray
    PN: np.ndarray
    AN: np.ndarray
    ANt: np.ndarray
    lambdaN: np.ndarray
    delta: float
    fingerprint: str = ""
    level: int = 0

    @property
    def N(self) -> int:
        return int(self.lambdaN.size)

    @property
    def NK(self) -> int:
        return self.cross.NK

    def apply(self, c: np.ndarray) -> np.ndarray:
        return self.AN @ c


def build_reduced_model(op: TruthOperator, delta: float, epsilon: float = 0.0, K: int | None = None,
                        fingerprint: str = "", level: int | None = None) -> ReducedModel:
    sel = truncate(op.sx, op.sm, delta)
    K = choose_cross_parameter(sel) if K is None else int(K)
    cross, AK = assemble_hyperbolic_cross(op, sel, K, epsilon)
    PN, AN, ANt, lam = recompress(AK, op.DD, delta)
    return ReducedModel(
        selection=sel, cross=cross, QxK=op.Qx[:, sel.xKK], QmK=op.Qm[:, sel.mKK], AK=AK,
        PN=PN, AN=AN, ANt=ANt, lambdaN=lam, delta=float(delta), fingerprint=fingerprint,
        level=op.mesh_level if level is None else int(level),
    )


def expand_cross(model: ReducedModel, values: np.ndarray, k: int) -> np.ndarray:
    """Scatter cross-ordered values into a ``k x k`` matrix (zeros elsewhere)."""
    out = np.zeros((k, k))
    det = model.selection.mKK[model.cross.pairs[:, 0]]
    src = model.selection.xKK[model.cross.pairs[:, 1]]
    out[det, src] = values
    return out


# -- certification ---------------------------------------------------------------------------

@dataclass
class CertificationReport:
    delta: float
    N: int
    Nsvd: int
    sigma: np.ndarray
    sigma_cross: np.ndarray
    max_error: float
    max_error_tensor: float
    max_perturbation: float
    C: float = 2.0

    @property
    def quasi_optimal(self) -> bool:
        return self.N <= self.Nsvd

    @property
    def accuracy_ok(self) -> bool:
        return self.max_error <= (self.C + 1) * self.delta

    @property
    def perturbation_ok(self) -> bool:
        return self.max_perturbation <= (self.C + 1) * self.delta

    @property
    def verdict(self) -> str:
        return "PASS" if self.quasi_optimal else "FAIL"


class OracleTooLargeError(MemoryError):
    pass


def _weighted_gram(op: TruthOperator, block: int = 2048) -> np.ndarray:
    """``G = DD^½ ((V Vᵀ) ∘ (U Uᵀ)) DD^½``; its eigenvalues are the σ² of T."""
    m = op.m
    w = np.sqrt(op.DD)
    G = np.empty((m, m))
    for s in range(0, m, block):
        e = min(s + block, m)
        G[s:e] = (op.V[s:e] @ op.V.T) * (op.U[s:e] @ op.U.T)
        G[s:e] *= w[s:e, None]
        G[s:e] *= w[None, :]
    return G


def _top_eigenvalues(G: np.ndarray, floor: float, dense_max: int = 6000, seed: int = 0,
                     maxit: int = 100) -> np.ndarray:
    """All eigenvalues of the PSD ``G`` above ``floor`` (descending), plus one below it.

    Dense for small ``G``; otherwise block subspace iteration with Rayleigh-Ritz.
    Ritz values bound the true eigenvalues from below, so the block is grown
    (warm, keeping the current subspace) as soon as its smallest Ritz value
    reaches ``floor / 100``.
    """
    n = G.shape[0]
    if n <= dense_max:
        return np.linalg.eigvalsh(G)[::-1]
    rng = np.random.default_rng(seed)
    b = min(512, n)
    X, _ = np.linalg.qr(rng.standard_normal((n, b)))
    prev = None
    for _ in range(maxit):
        Y = G @ X
        H = X.T @ Y
        ritz, W = np.linalg.eigh(0.5 * (H + H.T))
        # a reversed view would push the product off the BLAS path
        ritz, W = ritz[::-1], np.ascontiguousarray(W[:, ::-1])
        Y = Y @ W
        if ritz[-1] >= 0.01 * floor and b < n:
            nb = min(2 * b, n)
            X, _ = np.linalg.qr(np.hstack([Y, rng.standard_normal((n, nb - b))]))
            b, prev = nb, None
            continue
        if prev is not None:
            head = ritz > 0.1 * floor
            if np.all(np.abs(ritz[head] - prev[head]) <= 1e-12 * ritz[0]):
                return ritz
        prev = ritz
        X, _ = np.linalg.qr(Y)
    raise InconsistencyError(f"subspace iteration did not converge in {maxit} sweeps")


def full_spectrum(op: TruthOperator, delta: float, size_cap: int = 16_000) -> np.ndarray:
    """Singular values of the full truth operator above ``delta / 10``."""
    if op.m > size_cap:
        raise OracleTooLargeError(f"oracle Gram of size {op.m} exceeds the cap {size_cap}")
    G = _weighted_gram(op)
    lam = _top_eigenvalues(G, delta ** 2)
    return np.sqrt(np.clip(lam, 0.0, None))


def certify(model: ReducedModel, op: TruthOperator, sample: int = 20, seed: int = 0,
            size_cap: int = 16_000, sigma: np.ndarray | None = None) -> CertificationReport:
    """Compare the reduced model with the full operator.

    Reports the worst error over ``sample`` random unit-X-norm ``c``, the
    oracle rank ``N^svd = #{σ_k > δ}``, and ``max_k<=N |σ_k^δ − σ_k|``.
    """
    delta = model.delta
    if sigma is None:
        sigma = full_spectrum(op, delta, size_cap)
    Nsvd = int(np.sum(sigma > delta))
    rng = np.random.default_rng(seed)
    sel = model.selection
    worst = worst_tensor = 0.0
    for _ in range(sample):
        c = rng.standard_normal(op.m)
        c /= np.sqrt(np.dot(op.DD * c, c))
        M = apply_T(op, c)
        approx = expand_cross(model, model.PN.T @ (model.AN @ c), op.k)
        worst = max(worst, float(np.linalg.norm(M - approx)))
        sub = np.zeros_like(M)
        sub[np.ix_(sel.mKK, sel.xKK)] = M[np.ix_(sel.mKK, sel.xKK)]
        worst_tensor = max(worst_tensor, float(np.linalg.norm(M - sub)))
    sc = np.sqrt(model.lambdaN)
    n = min(model.N, sigma.size)
    pert = float(np.max(np.abs(sc[:n] - sigma[:n]))) if n else 0.0
    return CertificationReport(delta=delta, N=model.N, Nsvd=Nsvd, sigma=sigma, sigma_cross=sc,
                               max_error=worst, max_error_tensor=worst_tensor, max_perturbation=pert)


# -- container ------------------------------------------------------------------------------

_BLOCKS = ("xKK", "mKK", "pairs", "QxK", "QmK", "AK", "PN", "AN", "ANt", "lambdaN")


def _matrix_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    return _HEADER.pack(MAGIC, a.shape[0], a.shape[1]) + np.ascontiguousarray(a).tobytes()


def write_matrix(path: Path, a: np.ndarray) -> str:
    data = _matrix_bytes(a)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_matrix(path: Path, name: str | None = None) -> np.ndarray:
    name = name or Path(path).name
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptBlockError(f"block {name!r}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptBlockError(f"block {name!r}: bad magic")
    if rows < 0 or cols < 0 or len(data) != _HEADER.size + 8 * rows * cols:
        raise CorruptBlockError(f"block {name!r}: expected {rows}x{cols} doubles, file has "
                                f"{len(data) - _HEADER.size} payload bytes")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(float)


def save_model(model: ReducedModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sel, cross = model.selection, model.cross
    arrays = dict(xKK=sel.xKK, mKK=sel.mKK, pairs=cross.pairs, QxK=model.QxK, QmK=model.QmK,
                  AK=model.AK, PN=model.PN, AN=model.AN, ANt=model.ANt, lambdaN=model.lambdaN)
    digests = {}
    for name in _BLOCKS:
        digests[name] = write_matrix(path / f"{name}.bin", arrays[name])
    manifest = dict(
        format_version=FORMAT_VERSION, delta=model.delta, epsilon=cross.epsilon, K=cross.K,
        level=model.level, fingerprint=model.fingerprint, m=int(model.AK.shape[1]),
        k=int(model.QxK.shape[0]), xK=sel.xK, mK=sel.mK, NK=cross.NK, N=model.N,
        blocks={n: {"file": f"{n}.bin", "sha256": digests[n]} for n in _BLOCKS},
    )
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path, mesh=None, fingerprint: str | None = None) -> ReducedModel:
    """Load and validate a model directory; optionally check it against ``mesh``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {manifest.get('format_version')!r}, "
                                   f"expected {FORMAT_VERSION}")
    expected = fingerprint if mesh is None else mesh.fingerprint()
    if expected is not None and expected != manifest["fingerprint"]:
        raise FingerprintMismatchError("model was built on a different mesh "
                                       f"({manifest['fingerprint'][:12]} != {expected[:12]})")
    arr = {}
    for name in _BLOCKS:
        info = manifest["blocks"][name]
        f = path / info["file"]
        if not f.exists():
            raise CorruptBlockError(f"block {name!r}: missing file")
        a = read_matrix(f, name)
        if hashlib.sha256(f.read_bytes()).hexdigest() != info["sha256"]:
            raise CorruptBlockError(f"block {name!r}: checksum mismatch")
        arr[name] = a
    m, k, xK, mK, NK, N = (manifest[n] for n in ("m", "k", "xK", "mK", "NK", "N"))
    shapes = dict(xKK=(xK, 1), mKK=(mK, 1), pairs=(NK, 2), QxK=(k, xK), QmK=(k, mK), AK=(NK, m),
                  PN=(N, NK), AN=(N, m), ANt=(m, N), lambdaN=(N, 1))
    for name, shape in shapes.items():
        if arr[name].shape != shape:
            raise CorruptBlockError(f"block {name!r}: shape {arr[name].shape}, expected {shape}")
    sel = TruncationSelection(delta=manifest["delta"], xKK=arr["xKK"][:, 0].astype(np.int64),
                              mKK=arr["mKK"][:, 0].astype(np.int64))
    cross = HyperbolicIndexSet(pairs=arr["pairs"].astype(np.int64), K=manifest["K"],
                               epsilon=manifest["epsilon"])
    return ReducedModel(selection=sel, cross=cross, QxK=arr["QxK"], QmK=arr["QmK"], AK=arr["AK"],
                        PN=arr["PN"], AN=arr["AN"], ANt=arr["ANt"], lambdaN=arr["lambdaN"][:, 0],
                        delta=manifest["delta"], fingerprint=manifest["fingerprint"],
                        level=manifest["level"])
