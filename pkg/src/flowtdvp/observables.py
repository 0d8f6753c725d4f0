"""Monte-Carlo estimators computed from a flow model (or a bare ensemble)."""
import numpy as np
from scipy.special import gammaln

from .density import STUDENT_T


def mc_entropy(model, n, rng):
    """Differential entropy -<log p> over n model samples: (estimate, std error)."""
    if n < 2:
        raise ValueError("need at least two samples")
    lp = model.log_prob(model.sample(n, rng))
    return float(-lp.mean()), float(lp.std(ddof=1) / np.sqrt(n))


def mc_moments(source, n=None, rng=None):
    """Per-coordinate mean and unbiased variance with standard errors.

    ``source`` is either an (n, d) sample array or a model (then ``n`` and
    ``rng`` are required). Returns (mean, var, mean_se, var_se).
    """
    if hasattr(source, "sample"):
        X = source.sample(n, rng)
    else:
        X = np.atleast_2d(np.asarray(source, dtype=float))
    m = X.shape[0]
    if m < 2:
        raise ValueError("need at least two samples")
    mean = X.mean(axis=0)
    dev = X - mean
    var = dev.var(axis=0, ddof=1)
    mean_se = np.sqrt(var / m)
    # se of the sample variance from the fourth central moment
    m4 = np.mean(dev**4, axis=0)
    var_se = np.sqrt(np.maximum(m4 - var**2 * (m - 3) / (m - 1), 0.0) / m)
    return mean, var, mean_se, var_se


def ball_volume(d, r):
    return float(np.exp(0.5 * d * np.log(np.pi) + d * np.log(r) - gammaln(0.5 * d + 1)))


def uniform_in_ball(n, d, r, center, rng, stratified=False):
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    if stratified:
        u = (np.arange(n) + rng.random(n)) / n
        rng.shuffle(u)
    else:
        u = rng.random(n)
    return np.asarray(center, dtype=float) + g * (r * u ** (1.0 / d))[:, None]


def ball_probability(model, r, center=None, n=10_000, rng=None, stratified=False):
    """P(|x - center| <= r) as V_d(r) * mean p(x_i), x_i uniform in the ball.

    ``stratified`` spreads the radial quantiles evenly, which reduces the
    variance at large r; the estimator stays unbiased.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng() if rng is None else rng
    d = model.dim
    center = np.zeros(d) if center is None else center
    X = uniform_in_ball(n, d, r, center, rng, stratified)
    vals = ball_volume(d, r) * np.exp(model.log_prob(X))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))


def nu_observer(model):
    if model.latent.family != STUDENT_T:
        raise ValueError("nu is only defined for a Student-t latent")
    return float(np.exp(model.params[model.layout["latent.nu_raw"]][0]))


def importance_normalization(model, n, rng, proposal_nu=3.0, scale=1.5):
    """Estimate the integral of p with a broad diagonal Student-t proposal.

    Location and scale come from the median and interquartile range of model
    samples; the proposal's tails are kept at least as heavy as a Student-t
    latent's so the weights have finite variance. Returns (estimate, std error).
    """
    d = model.dim
    ref = model.sample(min(n, 4000), rng)
    mu = np.median(ref, axis=0)
    q25, q75 = np.percentile(ref, [25, 75], axis=0)
    sig = scale * np.maximum(q75 - q25, 1e-12) / 1.349
    if model.latent.family == STUDENT_T:
        proposal_nu = min(proposal_nu, 0.5 * nu_observer(model))
    g = rng.standard_normal((n, d))
    w = np.sqrt(rng.chisquare(proposal_nu, n) / proposal_nu)
    y = g / w[:, None]
    X = mu + y * sig
    q = np.sum(y * y, axis=1)
    log_q = (
        gammaln(0.5 * (proposal_nu + d))
        - gammaln(0.5 * proposal_nu)
        - 0.5 * d * np.log(proposal_nu * np.pi)
        - np.sum(np.log(sig))
        - 0.5 * (proposal_nu + d) * np.log1p(q / proposal_nu)
    )
    ratio = np.exp(model.log_prob(X) - log_q)
    return float(ratio.mean()), float(ratio.std(ddof=1) / np.sqrt(n))
