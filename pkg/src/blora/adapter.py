"""Gaussian variational low-rank adapters.

An adapter holds two factors, ``A`` (d_o x r) and ``B`` (r x d_i), each an
element-wise Gaussian N(mu, exp(log_sigma)^2).  The update to a frozen
weight is ``(alpha / r) * A @ B``.  ``log_sigma`` is a natural log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import RandomStream, Tensor

# B starts with a vanishing posterior width, exp(-50) ~ 1.9e-22.
B_INIT_LOG_SIGMA = -50.0
# A's log-sigma is drawn from U[-4.5, 0).
A_LOG_SIGMA_RANGE = (-4.5, 0.0)


@dataclass(frozen=True)
class IsotropicPrior:
    mu_p: float = 0.0
    sigma_p: float = 0.01

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ValueError(f"prior sigma_p must be positive, got {self.sigma_p}")


@dataclass
class GaussianMatrix:
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise T.ShapeError(
                f"mu {self.mu.shape} and log_sigma {self.log_sigma.shape} differ in shape"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    def sample(self, stream: RandomStream) -> Tensor:
        """Reparameterized draw mu + sigma * eps (taped)."""
        eps = T.gauss_draw(stream, self.shape)
        return T.add(self.mu, T.mul(T.exp(self.log_sigma), eps))

    def copy(self) -> "GaussianMatrix":
        return GaussianMatrix(
            Tensor(self.mu.data.copy(), requires_grad=self.mu.requires_grad),
            Tensor(self.log_sigma.data.copy(), requires_grad=self.log_sigma.requires_grad),
        )


@dataclass
class LowRankAdapter:
    A: GaussianMatrix
    B: GaussianMatrix
    rank: int
    alpha: float
    target: str = ""

    def __post_init__(self):
        d_o, r_a = self.A.shape
        r_b, d_i = self.B.shape
        if not (r_a == r_b == self.rank):
            raise T.ShapeError(
                f"adapter rank {self.rank} does not match factors {self.A.shape} x {self.B.shape}"
            )
        if self.rank > min(d_o, d_i):
            raise ValueError(f"rank {self.rank} exceeds min(d_o, d_i) = {min(d_o, d_i)}")

    @property
    def out_features(self) -> int:
        return self.A.shape[0]

    @property
    def in_features(self) -> int:
        return self.B.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> list[Tensor]:
        return [self.A.mu, self.A.log_sigma, self.B.mu, self.B.log_sigma]

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "A/mu": self.A.mu,
            "A/log_sigma": self.A.log_sigma,
            "B/mu": self.B.mu,
            "B/log_sigma": self.B.log_sigma,
        }

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.A.copy(), self.B.copy(), self.rank, self.alpha, self.target)


def kaiming_uniform_bound(fan: int) -> float:
    return math.sqrt(6.0 / fan)


def init_adapter(
    d_o: int, d_i: int, r: int, alpha: float, stream: RandomStream, target: str = ""
) -> LowRankAdapter:
    """Fresh adapter whose mean update is exactly zero.

    A.mu ~ U(-b, b) with b = sqrt(6 / d_o) (Kaiming-uniform, fan = d_o),
    A.log_sigma ~ U[-4.5, 0), B.mu = 0 and B.log_sigma = -50.
    """
    if r < 1 or r > min(d_o, d_i):
        raise ValueError(f"rank must lie in [1, {min(d_o, d_i)}], got {r}")
    bound = kaiming_uniform_bound(d_o)
    a_mu = stream.uniform((d_o, r), -bound, bound)
    lo, hi = A_LOG_SIGMA_RANGE
    a_ls = stream.uniform((d_o, r), lo, hi)
    A = GaussianMatrix(Tensor(a_mu, requires_grad=True), Tensor(a_ls, requires_grad=True))
    B = GaussianMatrix(
        Tensor(np.zeros((r, d_i)), requires_grad=True),
        Tensor(np.full((r, d_i), B_INIT_LOG_SIGMA), requires_grad=True),
    )
    return LowRankAdapter(A, B, r, float(alpha), target)


def mean_delta(adapter: LowRankAdapter) -> Tensor:
    """Posterior-mean update (alpha / r) * mu_A @ mu_B (taped, no noise)."""
    return T.scale(T.matmul(adapter.A.mu, adapter.B.mu), adapter.scaling)


def sample_delta(adapter: LowRankAdapter, stream: RandomStream) -> Tensor:
    """One reparameterized draw of the update; noise for A is drawn before B."""
    a = adapter.A.sample(stream)
    b = adapter.B.sample(stream)
    return T.scale(T.matmul(a, b), adapter.scaling)


def kl_elementwise(mu: Tensor, log_sigma: Tensor, prior: IsotropicPrior) -> Tensor:
    """Closed-form KL( N(mu, sigma^2) || N(mu_p, sigma_p^2) ) per element.

    Written in d = log(sigma / sigma_p):
    0.5 * (exp(2d) - 1 - 2d + (mu-mu_p)^2/sigma_p^2), exactly 0 at the prior.
    """
    inv_var_p = 1.0 / prior.sigma_p**2
    d = T.add_scalar(log_sigma, -math.log(prior.sigma_p))
    centred = mu if prior.mu_p == 0.0 else T.add_scalar(mu, -prior.mu_p)
    spread = T.sub(T.exp(T.scale(d, 2.0)), T.scale(d, 2.0))
    total = T.add_scalar(T.add(spread, T.scale(T.square(centred), inv_var_p)), -1.0)
    return T.scale(total, 0.5)


def kl_total(adapters, prior: IsotropicPrior) -> Tensor:
    """KL summed over every element of every A and B, divided by the element count."""
    adapters = list(adapters.values() if isinstance(adapters, dict) else adapters)
    if not adapters:
        raise ValueError("kl_total needs at least one adapter")
    terms = []
    count = 0
    for ad in adapters:
        for g in (ad.A, ad.B):
            terms.append(T.sum_all(kl_elementwise(g.mu, g.log_sigma, prior)))
            count += g.mu.size
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / count)


def merge(W0: Tensor, adapter: LowRankAdapter, mode: str = "mean",
          stream: RandomStream | None = None) -> Tensor:
    """W0 plus the mean or a sampled update; W0 itself is untouched."""
    if W0.shape != (adapter.out_features, adapter.in_features):
        raise T.ShapeError(
            f"merge: W0 shape {W0.shape} does not match adapter "
            f"{(adapter.out_features, adapter.in_features)}"
        )
    if mode == "mean":
        delta = mean_delta(adapter)
    elif mode == "sampled":
        if stream is None:
            raise ValueError("merge: sampled mode needs a RandomStream")
        delta = sample_delta(adapter, stream)
    else:
        raise ValueError(f"merge: unknown mode {mode!r}")
    return T.add(W0, delta)
