"""Offline bi-level extraction of Fourier features from residual logs.

The raw bank holds a sin and a cos feature for every (input variable,
frequency) pair.  Amplitudes are fitted by per-sample subgradient descent on
the L1 (or L2) data loss plus an L1 penalty; frequencies are then updated by
the same kind of sweep with amplitudes frozen.  After training, the
``count`` raw features carrying the most energy in the principal components
of the amplitude-weighted feature matrix are kept.

Raw feature ``k`` for variable slot ``v`` and frequency slot ``m`` is laid out
as ``k = 2 (v M + m) + s`` with ``s = 0`` for sin and ``s = 1`` for cos.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .learner import NH, NZ, FeatureMap

Z_COLUMNS = (["log_wx", "log_wy", "log_wz", "log_vx", "log_vy", "log_vz",
              "p", "q", "r", "u", "v", "w", "t"])
H_COLUMNS = [f"h_psi_{a}" for a in ("wx", "wy", "wz", "vx", "vy", "vz")] + \
            [f"h_xi_{a}" for a in ("p", "q", "r", "u", "v", "w")]


class RankDeficient(UserWarning):
    """Fewer raw features than requested carry non-negligible energy."""


@dataclass
class ResidualDataset:
    """Learner inputs ``Z`` (``T x 13``) and measured residuals ``H`` (``T x 12``)."""

    Z: np.ndarray
    H: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if self.Z.shape[1] != NZ or self.H.shape[1] != NH:
            raise ValueError(f"dataset needs {NZ} input and {NH} residual columns")
        if len(self.Z) != len(self.H) or len(self.Z) < 1:
            raise ValueError("dataset needs at least one record with matching rows")
        if not (np.all(np.isfinite(self.Z)) and np.all(np.isfinite(self.H))):
            raise ValueError("dataset entries must be finite")

    def __len__(self):
        return len(self.Z)

    def save(self, path):
        """CSV: ``#`` metadata lines, a header row, then 13 Z and 12 h columns."""
        with open(path, "w") as fh:
            for key, value in self.metadata.items():
                fh.write(f"# {key}: {value}\n")
            fh.write(",".join(Z_COLUMNS + H_COLUMNS) + "\n")
            np.savetxt(fh, np.hstack([self.Z, self.H]), delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "ResidualDataset":
        meta = {}
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    header = [c.strip() for c in line.strip().split(",")]
                    break
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            else:
                raise ValueError("dataset file has no header row")
            if header != Z_COLUMNS + H_COLUMNS:
                raise ValueError("unexpected dataset columns")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        return cls(data[:, :NZ], data[:, NZ:], meta)

    @classmethod
    def concatenate(cls, parts, metadata=None) -> "ResidualDataset":
        return cls(np.vstack([p.Z for p in parts]), np.vstack([p.H for p in parts]),
                   dict(metadata or {}))


@dataclass
class ExtractorConfig:
    """``n_frequencies`` log-spaced initial frequencies in ``[f_min, f_max]``
    (rad per unit of the input) are replicated for every entry of
    ``variables``; each copy is trained independently."""

    n_frequencies: int = 32
    f_min: float = 0.01
    f_max: float = 10.0
    n_inner: int = 2
    epochs: int = 5
    learning_rate: float = 1e-5
    frequency_learning_rate: float | None = 1e-7
    regularization: float = 1e-4
    count: int = 30
    loss: str = "l1"
    variables: tuple = tuple(range(NZ))
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.n_frequencies, self.n_inner, self.epochs, self.count) < 1:
            raise ValueError("counts must be positive")
        if not 0 < self.f_min <= self.f_max:
            raise ValueError("need 0 < f_min <= f_max")
        if self.learning_rate <= 0 or self.regularization < 0:
            raise ValueError("learning rate must be positive, regularization non-negative")
        if self.frequency_learning_rate is not None and self.frequency_learning_rate < 0:
            raise ValueError("frequency learning rate must be non-negative")
        if self.loss not in ("l1", "l2"):
            raise ValueError("loss must be 'l1' or 'l2'")
        self.variables = tuple(int(v) for v in self.variables)
        if not self.variables or min(self.variables) < 0 or max(self.variables) >= NZ:
            raise ValueError(f"variables must index the {NZ} inputs")
        if self.count > 2 * len(self.variables) * self.n_frequencies:
            raise ValueError("count exceeds the number of raw features")

    @property
    def raw_size(self) -> int:
        return 2 * len(self.variables) * self.n_frequencies

    def initial_frequencies(self) -> np.ndarray:
        grid = np.geomspace(self.f_min, self.f_max, self.n_frequencies)
        return np.tile(grid, (len(self.variables), 1))

    @classmethod
    def from_dict(cls, doc: dict | None) -> "ExtractorConfig":
        doc = dict(doc or {})
        if "variables" in doc:
            doc["variables"] = tuple(doc["variables"])
        return cls(**doc)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["variables"] = list(self.variables)
        return out


# -- kernels ------------------------------------------------------------------


@numba.njit(cache=True)
def _raw_row(z, var, freqs, out):
    V, M = freqs.shape
    for v in range(V):
        x = z[var[v]]
        for m in range(M):
            a = freqs[v, m] * x
            k = 2 * (v * M + m)
            out[k] = math.sin(a)
            out[k + 1] = math.cos(a)


@numba.njit(cache=True)
def _sign(x):
    # subgradient of |x| with 0 at the kink
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


@numba.njit(cache=True)
def _residual_row(phi, A, h, r):
    F, K = A.shape
    for j in range(K):
        acc = 0.0
        for k in range(F):
            acc += phi[k] * A[k, j]
        r[j] = acc - h[j]


@numba.njit(cache=True)
def _dataset_loss(Z, H, var, freqs, A, lam, l2):
    F, K = A.shape
    phi = np.empty(F)
    r = np.empty(K)
    total = 0.0
    for t in range(Z.shape[0]):
        _raw_row(Z[t], var, freqs, phi)
        _residual_row(phi, A, H[t], r)
        for j in range(K):
            total += r[j] * r[j] if l2 else abs(r[j])
    pen = 0.0
    for k in range(F):
        for j in range(K):
            pen += abs(A[k, j])
    return total / Z.shape[0] + lam * pen


@numba.njit(cache=True)
def _inner_sweep(Z, H, order, var, freqs, A, lr, lam, l2):
    F, K = A.shape
    phi = np.empty(F)
    r = np.empty(K)
    g = np.empty(K)
    for t in order:
        _raw_row(Z[t], var, freqs, phi)
        _residual_row(phi, A, H[t], r)
        for j in range(K):
            g[j] = 2.0 * r[j] if l2 else _sign(r[j])
        for k in range(F):
            pk = phi[k]
            for j in range(K):
                A[k, j] -= lr * (pk * g[j] + lam * _sign(A[k, j]))


@numba.njit(cache=True)
def _frequency_gradient_row(z, h, var, freqs, A, l2, grad):
    """Adds d|A^T phi(z) - h| / d freqs for one sample into ``grad``."""
    V, M = freqs.shape
    F, K = A.shape
    phi = np.empty(F)
    r = np.empty(K)
    _raw_row(z, var, freqs, phi)
    _residual_row(phi, A, h, r)
    for j in range(K):
        r[j] = 2.0 * r[j] if l2 else _sign(r[j])
    for v in range(V):
        x = z[var[v]]
        for m in range(M):
            k = 2 * (v * M + m)
            dsin = x * phi[k + 1]
            dcos = -x * phi[k]
            acc = 0.0
            for j in range(K):
                acc += r[j] * (A[k, j] * dsin + A[k + 1, j] * dcos)
            grad[v, m] += acc


@numba.njit(cache=True)
def _outer_sweep(Z, H, order, var, freqs, A, lr, l2):
    grad = np.zeros(freqs.shape)
    for t in order:
        grad[:, :] = 0.0
        _frequency_gradient_row(Z[t], H[t], var, freqs, A, l2, grad)
        freqs -= lr * grad


# -- public operations ----------------------------------------------------------


def raw_features(Z, frequencies, variables) -> np.ndarray:
    """Raw feature matrix ``(T, 2 V M)`` for inputs ``Z``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    freqs = np.ascontiguousarray(frequencies, dtype=float)
    var = np.asarray(variables, dtype=np.int64)
    out = np.empty((len(Z), 2 * freqs.size))
    for t in range(len(Z)):
        _raw_row(Z[t], var, freqs, out[t])
    return out


def _order(n, config: ExtractorConfig, sweep: int):
    if not config.shuffle:
        return np.arange(n)
    rng = np.random.Generator(np.random.Philox(key=[config.seed, sweep]))
    return rng.permutation(n)


def _arrays(dataset, config):
    return (np.ascontiguousarray(dataset.Z), np.ascontiguousarray(dataset.H),
            np.asarray(config.variables, dtype=np.int64))


def dataset_loss(dataset: ResidualDataset, frequencies, amplitudes, config: ExtractorConfig,
                 penalty: bool = True) -> float:
    """Mean per-sample data loss, plus ``lambda |A|_1`` when ``penalty``."""
    Z, H, var = _arrays(dataset, config)
    lam = config.regularization if penalty else 0.0
    return float(_dataset_loss(Z, H, var, np.ascontiguousarray(frequencies, dtype=float),
                               np.ascontiguousarray(amplitudes, dtype=float), lam,
                               config.loss == "l2"))


def inner_amplitude_fit(dataset: ResidualDataset, frequencies, A_init,
                        config: ExtractorConfig, sweep_offset: int = 0):
    """``n_inner`` per-sample subgradient sweeps on the amplitudes (frequencies fixed).

    Returns the amplitudes and the loss after each sweep.
    """
    Z, H, var = _arrays(dataset, config)
    freqs = np.ascontiguousarray(frequencies, dtype=float)
    A = np.array(A_init, dtype=float, order="C")
    l2 = config.loss == "l2"
    losses = []
    for s in range(config.n_inner):
        _inner_sweep(Z, H, _order(len(Z), config, sweep_offset + s), var, freqs, A,
                     config.learning_rate, config.regularization, l2)
        losses.append(float(_dataset_loss(Z, H, var, freqs, A, config.regularization, l2)))
    return A, losses


def frequency_gradient(dataset: ResidualDataset, frequencies, amplitudes,
                       config: ExtractorConfig) -> np.ndarray:
    """Gradient of the summed data loss with respect to every frequency."""
    Z, H, var = _arrays(dataset, config)
    freqs = np.ascontiguousarray(frequencies, dtype=float)
    A = np.ascontiguousarray(amplitudes, dtype=float)
    grad = np.zeros(freqs.shape)
    for t in range(len(Z)):
        _frequency_gradient_row(Z[t], H[t], var, freqs, A, config.loss == "l2", grad)
    return grad


def outer_frequency_step(dataset: ResidualDataset, frequencies, amplitudes,
                         config: ExtractorConfig, sweep: int = 0) -> np.ndarray:
    """One per-sample sweep of subgradient steps on the frequencies."""
    Z, H, var = _arrays(dataset, config)
    freqs = np.array(frequencies, dtype=float, order="C")
    lr = config.learning_rate if config.frequency_learning_rate is None \
        else config.frequency_learning_rate
    _outer_sweep(Z, H, _order(len(Z), config, sweep), var, freqs,
                 np.ascontiguousarray(amplitudes, dtype=float), lr, config.loss == "l2")
    return freqs


@dataclass
class BilevelResult:
    frequencies: np.ndarray
    amplitudes: np.ndarray
    losses: list
    variables: tuple

    def raw_feature_map(self) -> FeatureMap:
        V, M = self.frequencies.shape
        var = np.repeat(np.asarray(self.variables), 2 * M)
        is_sin = np.tile([True, False], V * M)
        freq = np.repeat(self.frequencies.reshape(-1), 2)
        return FeatureMap(var, is_sin, freq)


def run_bilevel(dataset: ResidualDataset, config: ExtractorConfig,
                frequencies=None, amplitudes=None) -> BilevelResult:
    """Alternate amplitude sweeps and a frequency sweep for ``epochs`` epochs.

    ``losses[0]`` is the loss of the starting point; one entry follows each epoch.
    """
    freqs = config.initial_frequencies() if frequencies is None \
        else np.array(frequencies, dtype=float)
    A = np.zeros((config.raw_size, NH)) if amplitudes is None \
        else np.array(amplitudes, dtype=float)
    losses = [dataset_loss(dataset, freqs, A, config)]
    sweep = 0
    for _ in range(config.epochs):
        A, _ = inner_amplitude_fit(dataset, freqs, A, config, sweep)
        sweep += config.n_inner
        freqs = outer_frequency_step(dataset, freqs, A, config, sweep)
        sweep += 1
        losses.append(dataset_loss(dataset, freqs, A, config))
    return BilevelResult(freqs, A, losses, config.variables)


@dataclass
class Selection:
    feature_map: FeatureMap
    indices: np.ndarray
    ranking: np.ndarray
    scores: np.ndarray


def feature_scores(Phi, amplitudes, energy: float = 0.95) -> np.ndarray:
    """Energy of each raw feature in the leading principal components.

    Columns of ``Phi`` are weighted by the norm of their amplitude rows, and
    the uncentered second-moment matrix is diagonalized so that constant
    (bias) features keep their energy.  A feature's score is the sum of
    ``eigenvalue * loading^2`` over the components that together explain
    ``energy`` of the total.
    """
    Phi = np.asarray(Phi, dtype=float)
    weight = np.linalg.norm(np.asarray(amplitudes, dtype=float), axis=1)
    X = Phi * weight
    S = X.T @ X / len(X)
    vals, vecs = np.linalg.eigh(S)
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = vecs[:, ::-1]
    total = vals.sum()
    if total <= 0.0:
        return np.zeros(Phi.shape[1])
    keep = int(np.searchsorted(np.cumsum(vals) / total, energy) + 1)
    keep = min(keep, len(vals))
    return (vecs[:, :keep] ** 2) @ vals[:keep]


def select_features(dataset: ResidualDataset, result: BilevelResult, count: int = 30,
                    energy: float = 0.95, negligible: float = 1e-9) -> Selection:
    """Keep the ``count`` highest-scoring raw features, in raw-bank order."""
    raw = result.raw_feature_map()
    if not 1 <= count <= len(raw):
        raise ValueError("count must lie between 1 and the number of raw features")
    Phi = raw_features(dataset.Z, result.frequencies, result.variables)
    scores = feature_scores(Phi, result.amplitudes, energy)
    ranking = np.argsort(-scores, kind="stable")
    significant = int(np.sum(scores > negligible * max(scores.max(), 1e-300)))
    if scores.max() <= 0.0 or significant < count:
        warnings.warn(f"only {significant if scores.max() > 0 else 0} of {len(scores)} raw "
                      f"features carry non-negligible energy; selecting {count} anyway",
                      RankDeficient, stacklevel=2)
    chosen = np.sort(ranking[:count])
    fmap = FeatureMap(raw.variables[chosen], raw.is_sin[chosen], raw.frequencies[chosen])
    return Selection(fmap, chosen, ranking, scores)


def extract(dataset: ResidualDataset, config: ExtractorConfig):
    """Full pipeline: bi-level training then selection of ``config.count`` features."""
    result = run_bilevel(dataset, config)
    return result, select_features(dataset, result, config.count)
