"""Synthetic supervised least-squares problems with certified constants.

Three families, all with squared loss l(w; (x, y)) = (f(w; x) - y)^2 / 2
and inputs drawn uniformly from an axis-aligned box:

- ``linear_realizable``:    f(w; x) = <w, x>,   y = f(w*, x).
- ``sine_link_realizable``: f(w; x) = phi(<w, x>) with the smooth link
  phi(u) = u + a * sin(u), 0 <= a < 1, y = f(w*, x). The per-example loss
  is non-convex in w while the population risk stays
  Polyak-Lojasiewicz on the operating ball.
- ``linear_noisy``:         linear with additive clipped-Gaussian label
  noise, so the minimum of the population risk is strictly positive.

Population moments of the box distribution are closed-form, which gives
exact population risk and gradient for the linear families. The sine
link uses a fixed Monte Carlo oracle sample (common random numbers per
instance) so repeated evaluations are deterministic and differences of
nearby risks are low-noise.

Constants (mu, gamma, L, G, B and sigma2 = 4 G^2 B^2) are certified on
the operating ball ||w - w*|| <= R: analytically for linear families,
by dense probing for the sine link.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ._seeding import derive_seed

NOISE_CLIP_SIGMAS = 4.0
PL_PROBE_EXCLUDE = 1e-12


class CertificationError(RuntimeError):
    """A certified constant failed its probe check."""


class Family(str, Enum):
    LINEAR_REALIZABLE = "linear_realizable"
    SINE_LINK_REALIZABLE = "sine_link_realizable"
    LINEAR_NOISY = "linear_noisy"

    @property
    def realizable(self) -> bool:
        return self is not Family.LINEAR_NOISY

    @property
    def linear(self) -> bool:
        return self is not Family.SINE_LINK_REALIZABLE


@dataclass(frozen=True)
class ProblemSpec:
    """Declarative description of a problem instance.

    ``input_scale`` may be a scalar (hypercube) or a per-coordinate
    sequence (box), giving an anisotropic second moment. ``m_oracle``
    sizes the Monte Carlo risk oracle for the sine link; ``pl_probes``
    and ``pl_oracle_samples`` control its PL/smoothness certification.
    """

    family: Family
    dim: int
    input_scale: Union[float, tuple]
    w_star: tuple
    operating_radius: float
    link_amplitude: float = 0.0
    noise_std: float = 0.0
    seed: int = 0
    m_oracle: int = 1_000_000
    pl_probes: int = 10_000
    pl_oracle_samples: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        ws = tuple(float(v) for v in np.atleast_1d(np.asarray(self.w_star, dtype=float)))
        object.__setattr__(self, "w_star", ws)
        if not np.isscalar(self.input_scale):
            object.__setattr__(self, "input_scale", tuple(float(v) for v in self.input_scale))
        else:
            object.__setattr__(self, "input_scale", float(self.input_scale))

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        scales = self.scale_vector()
        if scales.shape != (self.dim,):
            raise ValueError("input_scale must be a scalar or a length-dim sequence")
        if np.any(scales <= 0):
            raise ValueError("input_scale must be positive")
        if len(self.w_star) != self.dim:
            raise ValueError("w_star must have length dim")
        if self.operating_radius <= 0:
            raise ValueError("operating_radius must be positive")
        if self.family is Family.SINE_LINK_REALIZABLE:
            if not (0.0 <= self.link_amplitude < 1.0):
                raise ValueError("link_amplitude must lie in [0, 1)")
        elif self.link_amplitude != 0.0:
            raise ValueError("link_amplitude is only meaningful for the sine link family")
        if self.family is Family.LINEAR_NOISY:
            if self.noise_std < 0:
                raise ValueError("noise_std must be non-negative")
        elif self.noise_std != 0.0:
            raise ValueError("noise_std must be 0 for realizable families")
        if self.m_oracle < 1 or self.pl_probes < 1 or self.pl_oracle_samples < 1:
            raise ValueError("oracle sizes must be positive")

    def scale_vector(self) -> np.ndarray:
        if np.isscalar(self.input_scale):
            return np.full(self.dim, float(self.input_scale))
        return np.asarray(self.input_scale, dtype=float)

    def w_star_vector(self) -> np.ndarray:
        return np.asarray(self.w_star, dtype=float)


@dataclass(frozen=True)
class ProblemConstants:
    """Constants certified on the operating ball; sigma2 = 4 G^2 B^2."""

    mu: float
    gamma: float
    L: float
    G: float
    B: float
    sigma2: float

    def __post_init__(self):
        if not math.isclose(self.sigma2, 4.0 * self.G**2 * self.B**2, rel_tol=1e-12):
            raise ValueError("sigma2 must equal 4*G^2*B^2")
        if self.gamma > 0 and self.gamma > self.mu * (1 + 1e-12):
            raise ValueError("gamma must not exceed mu")
        if self.mu > self.L * (1 + 1e-12):
            raise ValueError("mu must not exceed L")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n: int
    seed: int


@dataclass
class ProblemInstance:
    spec: ProblemSpec
    constants: ProblemConstants
    sigma_diag: np.ndarray  # diagonal of E[x x^T]
    f_star: float
    oracle_seed: int
    _oracle: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_oracle"] = None  # regenerate in workers instead of pickling ~40MB
        return state

    @property
    def dim(self) -> int:
        return self.spec.dim

    def w_star(self) -> np.ndarray:
        return self.spec.w_star_vector()

    def in_ball(self, w: np.ndarray) -> bool:
        return float(np.linalg.norm(np.asarray(w) - self.w_star())) <= self.spec.operating_radius

    def oracle_sample(self):
        """(inputs, labels, squared row norms) of the fixed oracle sample."""
        if self._oracle is None:
            rng = np.random.default_rng(self.oracle_seed)
            X = rng.uniform(-1.0, 1.0, size=(self.spec.m_oracle, self.dim)) * self.spec.scale_vector()
            y = _predict(self, self.w_star(), X)
            self._oracle = (X, y, np.einsum("ij,ij->i", X, X))
        return self._oracle


def _phi(z: np.ndarray, amp: float) -> np.ndarray:
    return z + amp * np.sin(z)


def _phi_prime(z: np.ndarray, amp: float) -> np.ndarray:
    return 1.0 + amp * np.cos(z)


def _predict(instance: ProblemInstance, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    z = X @ w
    if instance.spec.family is Family.SINE_LINK_REALIZABLE:
        return _phi(z, instance.spec.link_amplitude)
    return z


def _predict_batch(instance: ProblemInstance, W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Predictions for each row of W against each row of X, shape (k, n)."""
    Z = W @ X.T
    if instance.spec.family is Family.SINE_LINK_REALIZABLE:
        return _phi(Z, instance.spec.link_amplitude)
    return Z


def _fourth_moment_diag(scales: np.ndarray) -> np.ndarray:
    """Diagonal of E[||x||^2 x x^T] for the uniform box (off-diagonals vanish)."""
    second = scales**2 / 3.0
    fourth = scales**4 / 5.0
    total = float(np.sum(second))
    return fourth + second * (total - second)


def generate_problem(spec: ProblemSpec) -> ProblemInstance:
    """Build an instance with certified constants.

    Linear families get analytic constants from the box moments. The
    sine link gets mu and L from dense probing over the operating ball
    (the probed minimum PL ratio becomes the certified mu) and analytic
    upper bounds for G and B.
    """
    spec.validate()
    scales = spec.scale_vector()
    sigma_diag = scales**2 / 3.0
    w_star = spec.w_star_vector()
    x_max = float(np.linalg.norm(scales))
    w_norm = float(np.linalg.norm(w_star))
    R = spec.operating_radius
    noise_bound = NOISE_CLIP_SIGMAS * spec.noise_std
    oracle_seed = derive_seed(spec.seed, "oracle", spec.family.value, spec.dim)

    if spec.family.linear:
        mu = gamma = float(np.min(sigma_diag))
        L = float(np.max(sigma_diag))
        G = x_max
        B = x_max * (w_norm + R) + x_max * w_norm + noise_bound
        f_star = 0.5 * spec.noise_std**2
    else:
        amp = spec.link_amplitude
        G = (1.0 + amp) * x_max
        B = (1.0 + amp) * (x_max * (w_norm + R) + x_max * w_norm)
        f_star = 0.0
        mu = gamma = L = 1.0  # placeholders until probed below

    constants = ProblemConstants(mu=mu, gamma=gamma, L=L, G=G, B=B, sigma2=4.0 * G**2 * B**2)
    instance = ProblemInstance(
        spec=spec,
        constants=constants,
        sigma_diag=sigma_diag,
        f_star=f_star,
        oracle_seed=oracle_seed,
    )

    if spec.family is Family.SINE_LINK_REALIZABLE:
        mu_hat, l_hat = _probe_sine_constants(instance)
        constants = ProblemConstants(
            mu=mu_hat,
            gamma=0.0,
            L=max(l_hat, mu_hat),
            G=G,
            B=B,
            sigma2=4.0 * G**2 * B**2,
        )
        instance.constants = constants
    return instance


def generate_dataset(instance: ProblemInstance, n: int, seed: int) -> Dataset:
    """Draw n i.i.d. examples; bit-reproducible for a given seed."""
    if n < 1:
        raise ValueError("n must be positive")
    spec = instance.spec
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, spec.dim)) * spec.scale_vector()
    y = _predict(instance, instance.w_star(), X)
    if spec.family is Family.LINEAR_NOISY and spec.noise_std > 0:
        bound = NOISE_CLIP_SIGMAS * spec.noise_std
        y = y + np.clip(rng.normal(0.0, spec.noise_std, size=n), -bound, bound)
    return Dataset(inputs=X, labels=y, n=n, seed=seed)


def population_risk(instance: ProblemInstance, w: np.ndarray) -> float:
    return population_risk_stderr(instance, w)[0]


def population_risk_stderr(instance: ProblemInstance, w: np.ndarray) -> tuple:
    """(risk, standard error); the error is 0 for closed-form families."""
    w = np.asarray(w, dtype=float)
    spec = instance.spec
    if spec.family.linear:
        e = w - instance.w_star()
        return 0.5 * float(e @ (instance.sigma_diag * e)) + 0.5 * spec.noise_std**2, 0.0
    X, y, _ = instance.oracle_sample()
    resid = _predict(instance, w, X) - y
    losses = 0.5 * resid * resid
    m = losses.shape[0]
    return float(np.mean(losses)), float(np.std(losses) / math.sqrt(m))


def excess_risk(instance: ProblemInstance, w: np.ndarray) -> float:
    """F(w) - F(w*), computed without cancellation for linear families."""
    spec = instance.spec
    if spec.family.linear:
        e = np.asarray(w, dtype=float) - instance.w_star()
        return 0.5 * float(e @ (instance.sigma_diag * e))
    return population_risk(instance, w) - instance.f_star


def population_gradient(instance: ProblemInstance, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    spec = instance.spec
    if spec.family.linear:
        return instance.sigma_diag * (w - instance.w_star())
    X, y, _ = instance.oracle_sample()
    z = X @ w
    resid = _phi(z, spec.link_amplitude) - y
    return (X.T @ (resid * _phi_prime(z, spec.link_amplitude))) / X.shape[0]


def empirical_risk_and_gradient(dataset: Dataset, instance: ProblemInstance, w: np.ndarray) -> tuple:
    """F_S(w) and grad F_S(w) in one pass over the data."""
    w = np.asarray(w, dtype=float)
    X, y = dataset.inputs, dataset.labels
    z = X @ w
    if instance.spec.family is Family.SINE_LINK_REALIZABLE:
        amp = instance.spec.link_amplitude
        resid = _phi(z, amp) - y
        weights = resid * _phi_prime(z, amp)
    else:
        resid = z - y
        weights = resid
    risk = 0.5 * float(np.mean(resid * resid))
    grad = (X.T @ weights) / dataset.n
    return risk, grad


def per_example_gradient_norms(dataset: Dataset, instance: ProblemInstance, w: np.ndarray) -> np.ndarray:
    """||(f(w;x_i) - y_i) grad f(w;x_i)|| for every example."""
    w = np.asarray(w, dtype=float)
    X, y = dataset.inputs, dataset.labels
    z = X @ w
    norms = np.linalg.norm(X, axis=1)
    if instance.spec.family is Family.SINE_LINK_REALIZABLE:
        amp = instance.spec.link_amplitude
        return np.abs(_phi(z, amp) - y) * _phi_prime(z, amp) * norms
    return np.abs(z - y) * norms


def stochastic_gradient_variance(instance: ProblemInstance, w: np.ndarray) -> float:
    """E||grad l(w;z) - grad F(w)||^2 at a point.

    Closed form for linear families via the box fourth moments; Monte
    Carlo on the oracle sample for the sine link. This is the tightest
    constant for which the one-sample gradient is sigma^2-dominated at
    w, used when schedules are built from anchored constants.
    """
    w = np.asarray(w, dtype=float)
    spec = instance.spec
    if spec.family.linear:
        e = w - instance.w_star()
        fourth = _fourth_moment_diag(spec.scale_vector())
        trace_sigma = float(np.sum(instance.sigma_diag))
        second_moment = float(e @ (fourth * e)) + spec.noise_std**2 * trace_sigma
        grad = instance.sigma_diag * e
        return second_moment - float(grad @ grad)
    X, y, xnorm2 = instance.oracle_sample()
    z = X @ w
    resid = _phi(z, spec.link_amplitude) - y
    pg = resid * _phi_prime(z, spec.link_amplitude)
    grad = (X.T @ pg) / X.shape[0]
    return float(np.mean(pg * pg * xnorm2)) - float(grad @ grad)


def _ball_probes(rng: np.random.Generator, center: np.ndarray, radius: float, count: int) -> np.ndarray:
    d = center.shape[0]
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rho = radius * rng.uniform(0.0, 1.0, size=count) ** (1.0 / d)
    return center + rho[:, None] * g


def _sine_oracle_batch(X: np.ndarray, y: np.ndarray, amp: float, W: np.ndarray,
                       row_chunk: int = 131072) -> tuple:
    """Risk and gradient estimates for a batch of parameter vectors.

    W has shape (k, d); returns (risks (k,), grads (k, d)) against the
    provided oracle sample, accumulated in row chunks to bound memory.
    """
    m, d = X.shape
    k = W.shape[0]
    risk_acc = np.zeros(k)
    grad_acc = np.zeros((d, k))
    for lo in range(0, m, row_chunk):
        Xc = X[lo:lo + row_chunk]
        Z = Xc @ W.T
        resid = _phi(Z, amp) - y[lo:lo + row_chunk, None]
        risk_acc += 0.5 * np.einsum("ik,ik->k", resid, resid)
        grad_acc += Xc.T @ (resid * _phi_prime(Z, amp))
    return risk_acc / m, grad_acc.T / m


def _probe_sine_constants(instance: ProblemInstance) -> tuple:
    """Probe the PL constant and smoothness of the sine-link risk.

    mu is the minimum over uniform ball probes of ||grad F||^2 / (2 F);
    L is the largest gradient difference quotient over probe pairs at
    small separation, inflated by 10% as a certification margin.
    """
    spec = instance.spec
    rng = np.random.default_rng(derive_seed(spec.seed, "certify", spec.family.value))
    m = min(spec.pl_oracle_samples, spec.m_oracle)
    X = rng.uniform(-1.0, 1.0, size=(m, spec.dim)) * spec.scale_vector()
    y = _predict(instance, instance.w_star(), X)
    amp = spec.link_amplitude
    R = spec.operating_radius
    delta = 1e-3 * R

    mu_min = math.inf
    l_max = 0.0
    batch = 64
    remaining = spec.pl_probes
    while remaining > 0:
        k = min(batch, remaining)
        remaining -= k
        W = _ball_probes(rng, instance.w_star(), R, k)
        U = rng.standard_normal((k, spec.dim))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        risks, grads = _sine_oracle_batch(X, y, amp, np.vstack([W, W + delta * U]))
        f, g = risks[:k], grads[:k]
        g2 = grads[k:]
        keep = f >= PL_PROBE_EXCLUDE
        if np.any(keep):
            ratios = np.einsum("ij,ij->i", g[keep], g[keep]) / (2.0 * f[keep])
            mu_min = min(mu_min, float(np.min(ratios)))
        l_max = max(l_max, float(np.max(np.linalg.norm(g2 - g, axis=1))) / delta)
    if not math.isfinite(mu_min) or mu_min <= 0:
        raise CertificationError("PL probing failed to certify a positive mu")
    return mu_min, 1.1 * l_max


def verify_pl(instance: ProblemInstance, n_probes: int, seed: int) -> float:
    """Measure the PL constant by uniform probing of the operating ball.

    Returns the minimum probe ratio ||grad F(w)||^2 / (2 (F(w) - F*)).
    For linear families every ratio is checked against the analytically
    certified mu; a probe below mu * 0.999 is a certification bug.
    """
    spec = instance.spec
    rng = np.random.default_rng(seed)
    mu_cert = instance.constants.mu

    if spec.family.linear:
        mu_min = math.inf
        for lo in range(0, n_probes, 4096):
            W = _ball_probes(rng, instance.w_star(), spec.operating_radius, min(4096, n_probes - lo))
            E = W - instance.w_star()
            grads2 = np.einsum("ij,j,ij->i", E, instance.sigma_diag**2, E)
            excess = 0.5 * np.einsum("ij,j,ij->i", E, instance.sigma_diag, E)
            keep = excess >= PL_PROBE_EXCLUDE
            if not np.any(keep):
                continue
            ratios = grads2[keep] / (2.0 * excess[keep])
            if np.any(ratios < mu_cert * 0.999):
                raise CertificationError(
                    f"PL probe ratio {float(np.min(ratios)):.6g} below certified mu {mu_cert:.6g}"
                )
            mu_min = min(mu_min, float(np.min(ratios)))
        return mu_min

    m = min(spec.pl_oracle_samples, spec.m_oracle)
    X = rng.uniform(-1.0, 1.0, size=(m, spec.dim)) * spec.scale_vector()
    y = _predict(instance, instance.w_star(), X)
    mu_min = math.inf
    for lo in range(0, n_probes, 64):
        W = _ball_probes(rng, instance.w_star(), spec.operating_radius, min(64, n_probes - lo))
        risks, grads = _sine_oracle_batch(X, y, spec.link_amplitude, W)
        keep = risks >= PL_PROBE_EXCLUDE
        if not np.any(keep):
            continue
        ratios = np.einsum("ij,ij->i", grads[keep], grads[keep]) / (2.0 * risks[keep])
        mu_min = min(mu_min, float(np.min(ratios)))
    return mu_min


# ---------------------------------------------------------------------------
# serialization


def spec_to_dict(spec: ProblemSpec) -> dict:
    out = dataclasses.asdict(spec)
    out["family"] = spec.family.value
    out["input_scale"] = (
        list(spec.input_scale) if isinstance(spec.input_scale, tuple) else spec.input_scale
    )
    out["w_star"] = list(spec.w_star)
    return out


def spec_from_dict(data: dict) -> ProblemSpec:
    known = {f.name for f in dataclasses.fields(ProblemSpec)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown problem fields: {sorted(unknown)}")
    missing = {"family", "dim", "input_scale", "w_star", "operating_radius"} - set(data)
    if missing:
        raise ValueError(f"missing problem fields: {sorted(missing)}")
    return ProblemSpec(**data)


def save_problem_json(path, instance: ProblemInstance, dataset: Optional[Dataset] = None) -> None:
    """Persist spec and seeds only; data is regenerated on load."""
    doc = {"problem": spec_to_dict(instance.spec)}
    if dataset is not None:
        doc["dataset"] = {"n": dataset.n, "seed": dataset.seed}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_problem_json(path) -> tuple:
    """Returns (instance, dataset or None) regenerated from the document."""
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - {"problem", "dataset"}
    if unknown:
        raise ValueError(f"unknown document keys: {sorted(unknown)}")
    instance = generate_problem(spec_from_dict(doc["problem"]))
    dataset = None
    if "dataset" in doc:
        meta = doc["dataset"]
        unknown = set(meta) - {"n", "seed"}
        if unknown:
            raise ValueError(f"unknown dataset keys: {sorted(unknown)}")
        dataset = generate_dataset(instance, int(meta["n"]), int(meta["seed"]))
    return instance, dataset


BINARY_MAGIC = b"PLSGD1"


def save_dataset_binary(path, dataset: Dataset) -> None:
    """Flat dump: magic, d and n as little-endian int64, inputs, labels."""
    X = np.ascontiguousarray(dataset.inputs, dtype="<f8")
    y = np.ascontiguousarray(dataset.labels, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<qq", X.shape[1], X.shape[0]))
        fh.write(X.tobytes(order="C"))
        fh.write(y.tobytes(order="C"))


def load_dataset_binary(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[: len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise ValueError("bad magic; not a dataset dump")
    d, n = struct.unpack_from("<qq", raw, len(BINARY_MAGIC))
    off = len(BINARY_MAGIC) + 16
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
    y = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 8 * n * d).copy()
    return Dataset(inputs=X, labels=y, n=int(n), seed=-1)
