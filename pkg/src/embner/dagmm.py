"""Deep autoencoding Gaussian mixture model for entity-type induction.

A tanh autoencoder compresses each span representation; the low-dimensional
code concatenated with two reconstruction features (relative Euclidean
distance, cosine similarity) feeds an estimation MLP whose softmax output is
a soft mixture membership. The mixture parameters are weighted moments of
the batch, so gradients flow through them, and training minimizes

    mean reconstruction error
    + lambda_energy * mean sample energy under the mixture
    + lambda_penalty * sum of inverse covariance diagonals.

After training the mixture is frozen from one full-dataset pass; type
assignment is the argmax membership.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import tensor as T

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
COV_REGULARIZER = 1e-6
DEGENERATE_RESPONSIBILITY = 1e-12


class DagmmDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class DagmmConfig:
    input_dim: int
    compression_hidden: tuple[int, int] = (75, 15)
    estimation_hidden: int = 10
    n_components: int = 4
    lambda_energy: float = 0.1
    lambda_penalty: float = 0.005
    epochs: int = 120
    batch_size: int = 128
    learning_rate: float = 0.02
    seed: int = 0
    # initialization protocol: autoencoder-only warm-up, then the estimator
    # is pre-fit to a k-means clustering of the standardized inputs (best of
    # `membership_init_restarts` seeds by inertia) before joint training
    warmup_epochs: int = 40
    membership_init_epochs: int = 100
    membership_init_restarts: int = 10
    membership_init_lr: float = 0.1

    def __post_init__(self):
        sizes = (self.input_dim, *self.compression_hidden,
                 self.estimation_hidden, self.n_components)
        if any(s <= 0 for s in sizes):
            raise ValueError("all layer sizes must be positive")
        if self.lambda_energy < 0 or self.lambda_penalty < 0:
            raise ValueError("penalty weights must be nonnegative")

    @property
    def latent_dim(self) -> int:
        return self.compression_hidden[-1]

    @property
    def code_dim(self) -> int:
        return self.latent_dim + 2  # code plus the two reconstruction features


@dataclass
class GaussianMixture:
    weights: np.ndarray       # (K,) simplex
    means: np.ndarray         # (K, p)
    covariances: np.ndarray   # (K, p, p) regularized
    degenerate_components: tuple[int, ...] = ()


@dataclass
class TrainLog:
    objective: list[float] = field(default_factory=list)
    reconstruction: list[float] = field(default_factory=list)
    energy: list[float] = field(default_factory=list)


class DagmmModel:
    """Network weights, input standardization, and the frozen mixture."""

    def __init__(self, config: DagmmConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(config.seed)
        d = config.input_dim
        h1, h2 = config.compression_hidden
        he, k = config.estimation_hidden, config.n_components

        def glorot(fan_in, fan_out):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            return T.param(rng.normal(scale=scale, size=(fan_in, fan_out)))

        self.enc_w1, self.enc_b1 = glorot(d, h1), T.param(np.zeros((1, h1)))
        self.enc_w2, self.enc_b2 = glorot(h1, h2), T.param(np.zeros((1, h2)))
        self.dec_w1, self.dec_b1 = glorot(h2, h1), T.param(np.zeros((1, h1)))
        self.dec_w2, self.dec_b2 = glorot(h1, d), T.param(np.zeros((1, d)))
        self.est_w1, self.est_b1 = glorot(h2 + 2, he), T.param(np.zeros((1, he)))
        self.est_w2, self.est_b2 = glorot(he, k), T.param(np.zeros((1, k)))

        self.feature_mean = np.zeros(d)
        self.feature_std = np.ones(d)
        self.mixture: GaussianMixture | None = None

    @property
    def parameters(self) -> list[T.Node]:
        return [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2,
                self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2,
                self.est_w1, self.est_b1, self.est_w2, self.est_b2]

    def standardize(self, U: np.ndarray) -> np.ndarray:
        return (U - self.feature_mean) / self.feature_std

    # ----- numpy inference path -------------------------------------------

    def _weights(self):
        return {name: node.value for name, node in zip(
            ("ew1", "eb1", "ew2", "eb2", "dw1", "db1", "dw2", "db2",
             "sw1", "sb1", "sw2", "sb2"), self.parameters)}

    def forward(self, U: np.ndarray) -> dict[str, np.ndarray]:
        """Standardize, encode, decode, build codes and memberships."""
        w = self._weights()
        Us = self.standardize(np.atleast_2d(U))
        code = np.tanh(np.tanh(Us @ w["ew1"] + w["eb1"]) @ w["ew2"] + w["eb2"])
        recon = np.tanh(code @ w["dw1"] + w["db1"]) @ w["dw2"] + w["db2"]
        feats = np.stack([reconstruction_features(u, r) for u, r in zip(Us, recon)])
        codes = np.hstack([code, feats])
        hidden = np.tanh(codes @ w["sw1"] + w["sb1"])
        logits = hidden @ w["sw2"] + w["sb2"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        gamma = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        return {"standardized": Us, "code": code, "reconstruction": recon,
                "codes": codes, "gamma": gamma}

    # ----- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        names = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1",
                 "dec_w2", "dec_b2", "est_w1", "est_b1", "est_w2", "est_b2")
        out = {
            "config": {
                "input_dim": self.config.input_dim,
                "compression_hidden": list(self.config.compression_hidden),
                "estimation_hidden": self.config.estimation_hidden,
                "n_components": self.config.n_components,
                "lambda_energy": self.config.lambda_energy,
                "lambda_penalty": self.config.lambda_penalty,
                "epochs": self.config.epochs,
                "batch_size": self.config.batch_size,
                "learning_rate": self.config.learning_rate,
                "seed": self.config.seed,
                "warmup_epochs": self.config.warmup_epochs,
                "membership_init_epochs": self.config.membership_init_epochs,
                "membership_init_restarts": self.config.membership_init_restarts,
                "membership_init_lr": self.config.membership_init_lr,
            },
            "weights": {n: getattr(self, n).value.tolist() for n in names},
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "mixture": None,
        }
        if self.mixture is not None:
            out["mixture"] = {
                "weights": self.mixture.weights.tolist(),
                "means": self.mixture.means.tolist(),
                "covariances": self.mixture.covariances.tolist(),
                "degenerate_components": list(self.mixture.degenerate_components),
            }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DagmmModel":
        cfg = dict(obj["config"])
        cfg["compression_hidden"] = tuple(cfg["compression_hidden"])
        model = cls(DagmmConfig(**cfg))
        for name, values in obj["weights"].items():
            getattr(model, name).value = np.array(values, dtype=np.float64)
        model.feature_mean = np.array(obj["feature_mean"])
        model.feature_std = np.array(obj["feature_std"])
        if obj.get("mixture"):
            m = obj["mixture"]
            model.mixture = GaussianMixture(
                weights=np.array(m["weights"]),
                means=np.array(m["means"]),
                covariances=np.array(m["covariances"]),
                degenerate_components=tuple(m["degenerate_components"]))
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DagmmModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# module operations (numpy surface)


def compress(u: np.ndarray, model: DagmmModel) -> tuple[np.ndarray, np.ndarray]:
    """Code t = [encoder output ; reconstruction features] and reconstruction."""
    out = model.forward(np.atleast_2d(u))
    return out["codes"][0], out["reconstruction"][0]


def membership(t: np.ndarray, model: DagmmModel) -> np.ndarray:
    """Softmax mixture membership of one code vector."""
    w = model._weights()
    hidden = np.tanh(np.atleast_2d(t) @ w["sw1"] + w["sb1"])
    logits = (hidden @ w["sw2"] + w["sb2"])[0]
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def reconstruction_features(u: np.ndarray, u_prime: np.ndarray) -> np.ndarray:
    """[relative Euclidean distance, cosine similarity]."""
    dist = float(np.linalg.norm(u - u_prime))
    norm_u = float(np.linalg.norm(u))
    norm_r = float(np.linalg.norm(u_prime))
    if norm_u == 0.0:
        log.warning("zero-norm input to reconstruction features")
        return np.array([dist, 0.0])
    cos = 0.0 if norm_r == 0.0 else float(u @ u_prime) / (norm_u * norm_r)
    return np.array([dist / norm_u, cos])


def reconstruction_loss(u: np.ndarray, u_prime: np.ndarray) -> float:
    if u.shape != u_prime.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {u_prime.shape}")
    diff = u - u_prime
    return float(diff @ diff)


def estimate_gmm(codes: np.ndarray, gamma: np.ndarray) -> GaussianMixture:
    """Weighted-moment mixture estimate from codes (N, p) and memberships (N, K).

    Covariances are symmetrized and regularized with a small identity term.
    A component whose total responsibility vanishes falls back to the batch
    mean and regularized batch covariance and is flagged.
    """
    n, p = codes.shape
    k = gamma.shape[1]
    if n < 1:
        raise ValueError("estimate_gmm: empty batch")
    weights = gamma.sum(axis=0) / n
    means = np.zeros((k, p))
    covs = np.zeros((k, p, p))
    batch_mean = codes.mean(axis=0)
    centered = codes - batch_mean
    batch_cov = centered.T @ centered / n
    degenerate = []
    for j in range(k):
        resp = gamma[:, j].sum()
        if resp < DEGENERATE_RESPONSIBILITY:
            degenerate.append(j)
            means[j] = batch_mean
            cov = batch_cov
        else:
            means[j] = gamma[:, j] @ codes / resp
            diff = codes - means[j]
            cov = diff.T @ (gamma[:, j, None] * diff) / resp
        cov = 0.5 * (cov + cov.T) + COV_REGULARIZER * np.eye(p)
        covs[j] = cov
    if degenerate:
        log.warning("degenerate mixture components: %s", degenerate)
    return GaussianMixture(weights=weights, means=means, covariances=covs,
                           degenerate_components=tuple(degenerate))


def energy(t: np.ndarray, mixture: GaussianMixture) -> float:
    """Negative log-likelihood of a code under the mixture (log space)."""
    p = mixture.means.shape[1]
    parts = np.empty(len(mixture.weights))
    for j, (w, mu, cov) in enumerate(zip(mixture.weights, mixture.means,
                                         mixture.covariances)):
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError(f"mixture component {j} not positive definite") from None
        solved = np.linalg.solve(chol, t - mu)
        log_det = 2.0 * np.log(np.diagonal(chol)).sum()
        log_density = -0.5 * (p * LOG_2PI + log_det + solved @ solved)
        with np.errstate(divide="ignore"):
            parts[j] = np.log(w) + log_density
    return float(-np_logsumexp(parts))


def cov_penalty(mixture: GaussianMixture) -> float:
    """Sum of reciprocal covariance diagonals (discourages collapse)."""
    total = 0.0
    for cov in mixture.covariances:
        total += float((1.0 / np.diagonal(cov)).sum())
    return total


def assign_types(U: np.ndarray, model: DagmmModel) -> np.ndarray:
    """Argmax membership per row; ties resolve to the lower component."""
    gamma = model.forward(U)["gamma"]
    return gamma.argmax(axis=1)


# ---------------------------------------------------------------------------
# training graph


def objective_graph(model: DagmmModel, U_std: np.ndarray) -> T.Node:
    """The joint objective as a differentiable graph over one batch."""
    cfg = model.config
    Un = T.const(U_std)

    code = T.tanh(T.matmul(T.tanh(T.matmul(Un, model.enc_w1) + model.enc_b1),
                           model.enc_w2) + model.enc_b2)
    recon = T.matmul(T.tanh(T.matmul(code, model.dec_w1) + model.dec_b1),
                     model.dec_w2) + model.dec_b2

    diff = Un - recon
    sq_err = T.sum_(T.square(diff), axis=1, keepdims=True)        # (n, 1)
    norm_u = T.l2_norm(Un, axis=1, keepdims=True)
    norm_r = T.l2_norm(recon, axis=1, keepdims=True)
    rel_dist = T.sqrt(sq_err) / norm_u
    cos = T.sum_(T.mul(Un, recon), axis=1, keepdims=True) / T.mul(norm_u, norm_r)
    codes = T.concat([code, rel_dist, cos], axis=1)               # (n, p)

    hidden = T.tanh(T.matmul(codes, model.est_w1) + model.est_b1)
    gamma = T.softmax(T.matmul(hidden, model.est_w2) + model.est_b2, axis=1)

    p = cfg.code_dim
    log_phi = T.log(T.mean(gamma, axis=0, keepdims=True))         # (1, K)
    columns = []
    penalty = None
    eye = T.const(COV_REGULARIZER * np.eye(p))
    for j in range(cfg.n_components):
        g_j = gamma[:, j:j + 1]                                   # (n, 1)
        resp = T.sum_(g_j)
        mu_j = T.matmul(T.transpose(g_j), codes) / resp           # (1, p)
        centered = codes - mu_j
        cov = T.matmul(T.transpose(centered), T.mul(g_j, centered)) / resp
        cov = T.mul(cov + T.transpose(cov), 0.5) + eye
        quad = T.sum_(T.mul(T.matmul(centered, T.inv(cov)), centered),
                      axis=1, keepdims=True)                      # (n, 1)
        col = (log_phi[:, j:j + 1] - 0.5 * quad - 0.5 * T.logdet(cov)
               - 0.5 * p * LOG_2PI)
        columns.append(col)
        comp_pen = T.sum_(T.div(1.0, T.diagonal(cov)))
        penalty = comp_pen if penalty is None else penalty + comp_pen

    sample_energy = T.neg(T.logsumexp(T.concat(columns, axis=1), axis=1))  # (n,)
    return (T.mean(sq_err) + cfg.lambda_energy * T.mean(sample_energy)
            + cfg.lambda_penalty * penalty)


def _run_epochs(model: DagmmModel, U_std: np.ndarray, epochs: int,
                rng: np.random.Generator, train_log: TrainLog,
                epoch_offset: int) -> None:
    cfg = model.config
    n = U_std.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        starts = list(range(0, n, cfg.batch_size))
        # fold a remainder smaller than K into the previous batch
        if len(starts) > 1 and n - starts[-1] < cfg.n_components:
            starts.pop()
        epoch_loss = 0.0
        count = 0
        for bi, s in enumerate(starts):
            e = n if s == starts[-1] else min(s + cfg.batch_size, n)
            batch = U_std[order[s:e]]
            loss = objective_graph(model, batch)
            if not np.isfinite(loss.value):
                raise DagmmDivergence(epoch_offset + epoch, bi)
            T.backward(loss)
            T.sgd_step(model.parameters, cfg.learning_rate)
            epoch_loss += float(loss.value) * len(batch)
            count += len(batch)
        train_log.objective.append(epoch_loss / count)


def _pretrain_estimator(model: DagmmModel, U: np.ndarray, U_std: np.ndarray) -> None:
    """Pre-fit memberships to a k-means clustering of the standardized inputs.

    The mixture objective has a winner-take-all local optimum (one fat
    component soaks up all the prior mass); starting the estimator at an
    informative clustering keeps joint training out of it. Input space is
    used because a half-trained code space can smear cluster structure.
    """
    from .kcluster import kmeans  # local import avoids a cycle at module load

    cfg = model.config
    best = None
    for restart in range(max(1, cfg.membership_init_restarts)):
        result = kmeans(U_std, k=cfg.n_components, seed=cfg.seed + restart)
        if best is None or result.inertia < best.inertia:
            best = result
    hard = best.assignment
    codes = model.forward(U)["codes"]
    est_params = [model.est_w1, model.est_b1, model.est_w2, model.est_b2]
    rows = np.arange(len(codes))
    for _ in range(cfg.membership_init_epochs):
        hidden = T.tanh(T.matmul(T.const(codes), model.est_w1) + model.est_b1)
        gamma = T.softmax(T.matmul(hidden, model.est_w2) + model.est_b2, axis=1)
        loss = T.neg(T.mean(T.log(T.gather(gamma, rows, hard))))
        T.backward(loss)
        T.sgd_step(est_params, cfg.membership_init_lr)


def train(span_vectors: np.ndarray, config: DagmmConfig) -> tuple[DagmmModel, TrainLog]:
    """Mini-batch gradient descent on the joint objective.

    Three phases: reconstruction-only warm-up, estimator initialization to a
    k-means clustering of the codes, then the full joint objective. The
    inference mixture is frozen from one full-dataset pass at the end.
    """
    import dataclasses

    U = np.asarray(span_vectors, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < config.n_components:
        raise ValueError("need at least K span vectors")
    model = DagmmModel(config)
    model.feature_mean = U.mean(axis=0)
    std = U.std(axis=0)
    model.feature_std = np.where(std < 1e-12, 1.0, std)
    U_std = model.standardize(U)

    rng = np.random.default_rng(config.seed)
    train_log = TrainLog()
    if config.warmup_epochs > 0:
        model.config = dataclasses.replace(config, lambda_energy=0.0,
                                           lambda_penalty=0.0)
        _run_epochs(model, U_std, config.warmup_epochs, rng, train_log, 0)
        model.config = config
    if config.membership_init_epochs > 0:
        _pretrain_estimator(model, U, U_std)
    _run_epochs(model, U_std, config.epochs, rng, train_log, config.warmup_epochs)

    out = model.forward(U)
    model.mixture = estimate_gmm(out["codes"], out["gamma"])
    recon = float(np.mean([reconstruction_loss(u, r) for u, r in
                           zip(out["standardized"], out["reconstruction"])]))
    train_log.reconstruction.append(recon)
    train_log.energy.append(float(np.mean(
        [energy(t, model.mixture) for t in out["codes"]])))
    return model, train_log
