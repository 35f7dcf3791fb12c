"""Gaussian hidden Markov model over word embeddings with IOB states.

Three latent labels (O, I, B) generate, per position, a multivariate
Gaussian word embedding and a categorical 0/1 cluster tag. Training is
unsupervised Baum-Welch EM in log space; decoding is Viterbi. Structural
masks (no start on I, no O -> I transition) keep decoded sequences valid
IOB throughout training.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

LABELS = ("O", "I", "B")
O, I, B = 0, 1, 2


@dataclass
class HmmParams:
    """Model parameters.

    Attributes
    ----------
    labels : tuple of state names, index order fixed.
    initial : (S,) start distribution.
    transition : (S, S) row-stochastic matrix, [from, to].
    means : (S, d) Gaussian emission means.
    covariances : (S, d, d) symmetric positive-definite emission covariances.
    cluster_emission : (S, 2) rows p(cluster tag | label).
    initial_mask / transition_mask : boolean arrays, False marks entries
        structurally fixed at zero probability.
    """

    labels: tuple[str, ...]
    initial: np.ndarray
    transition: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cluster_emission: np.ndarray
    initial_mask: np.ndarray = None
    transition_mask: np.ndarray = None

    def __post_init__(self):
        s = len(self.labels)
        if self.initial_mask is None:
            self.initial_mask = np.ones(s, dtype=bool)
        if self.transition_mask is None:
            self.transition_mask = np.ones((s, s), dtype=bool)

    @property
    def n_states(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        if abs(self.initial.sum() - 1.0) > atol:
            raise ValueError("initial distribution does not sum to 1")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > atol):
            raise ValueError("transition rows do not sum to 1")
        if np.any(np.abs(self.cluster_emission.sum(axis=1) - 1.0) > atol):
            raise ValueError("cluster emission rows do not sum to 1")
        for z, cov in enumerate(self.covariances):
            if not np.allclose(cov, cov.T):
                raise ValueError(f"covariance for {self.labels[z]} not symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError(
                    f"covariance for {self.labels[z]} not positive definite") from None

    def to_json(self) -> dict:
        return {
            "labels": list(self.labels),
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "cluster_emission": self.cluster_emission.tolist(),
            "initial_mask": self.initial_mask.astype(int).tolist(),
            "transition_mask": self.transition_mask.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HmmParams":
        return cls(
            labels=tuple(obj["labels"]),
            initial=np.array(obj["initial"]),
            transition=np.array(obj["transition"]),
            means=np.array(obj["means"]),
            covariances=np.array(obj["covariances"]),
            cluster_emission=np.array(obj["cluster_emission"]),
            initial_mask=np.array(obj["initial_mask"], dtype=bool),
            transition_mask=np.array(obj["transition_mask"], dtype=bool),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "HmmParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class TrainReport:
    log_likelihoods: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def log_gaussian_density(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                         label: str = "") -> float:
    """Log multivariate normal density via Cholesky, safe for large d."""
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError(f"covariance not positive definite"
                         f"{' for label ' + label if label else ''}") from None
    diff = np.atleast_1d(x) - mu
    solved = np.linalg.solve(chol, diff)
    log_det = 2.0 * np.log(np.diagonal(chol)).sum()
    d = mu.shape[0]
    return float(-0.5 * (d * np.log(2.0 * np.pi) + log_det + solved @ solved))


def _emission_log_probs(X: np.ndarray, v: np.ndarray, params: HmmParams) -> np.ndarray:
    """(l, S) matrix of log N(x_i; mu_z, Sigma_z) + log p(v_i | z)."""
    l = X.shape[0]
    S = params.n_states
    out = np.empty((l, S))
    with np.errstate(divide="ignore"):
        log_cluster = np.log(params.cluster_emission)
    for z in range(S):
        chol = np.linalg.cholesky(params.covariances[z])
        diff = X - params.means[z]
        solved = np.linalg.solve(chol, diff.T)
        quad = np.einsum("dl,dl->l", solved, solved)
        log_det = 2.0 * np.log(np.diagonal(chol)).sum()
        d = params.dim
        out[:, z] = -0.5 * (d * np.log(2.0 * np.pi) + log_det + quad)
    out += log_cluster[:, v].T
    return out


def joint_log_prob(X: np.ndarray, v: np.ndarray, labels: list[int],
                   params: HmmParams) -> float:
    """Log joint of one label path: transitions + Gaussian + cluster factors."""
    emissions = _emission_log_probs(X, v, params)
    with np.errstate(divide="ignore"):
        log_init = np.log(params.initial)
        log_trans = np.log(params.transition)
    total = log_init[labels[0]] + emissions[0, labels[0]]
    for i in range(1, len(labels)):
        total += log_trans[labels[i - 1], labels[i]] + emissions[i, labels[i]]
    return float(total)


def _forward(emissions: np.ndarray, params: HmmParams) -> np.ndarray:
    """(l, S) log-alpha table."""
    l, S = emissions.shape
    with np.errstate(divide="ignore"):
        log_init = np.log(params.initial)
        log_trans = np.log(params.transition)
    alpha = np.empty((l, S))
    alpha[0] = log_init + emissions[0]
    for i in range(1, l):
        alpha[i] = logsumexp(alpha[i - 1][:, None] + log_trans, axis=0) + emissions[i]
    return alpha


def _backward(emissions: np.ndarray, params: HmmParams) -> np.ndarray:
    """(l, S) log-beta table."""
    l, S = emissions.shape
    with np.errstate(divide="ignore"):
        log_trans = np.log(params.transition)
    beta = np.zeros((l, S))
    for i in range(l - 2, -1, -1):
        beta[i] = logsumexp(log_trans + (emissions[i + 1] + beta[i + 1])[None, :], axis=1)
    return beta


def forward_loglik(X: np.ndarray, v: np.ndarray, params: HmmParams) -> float:
    """Log marginal probability of the observations (forward algorithm)."""
    emissions = _emission_log_probs(X, v, params)
    alpha = _forward(emissions, params)
    return float(logsumexp(alpha[-1]))


def posteriors(X: np.ndarray, v: np.ndarray, params: HmmParams) -> np.ndarray:
    """(l, S) state posteriors from forward-backward."""
    emissions = _emission_log_probs(X, v, params)
    alpha = _forward(emissions, params)
    beta = _backward(emissions, params)
    log_gamma = alpha + beta
    log_gamma -= logsumexp(log_gamma, axis=1, keepdims=True)
    return np.exp(log_gamma)


def viterbi_decode(X: np.ndarray, v: np.ndarray, params: HmmParams) -> list[int]:
    """Most probable label path; ties break toward the lower label index."""
    emissions = _emission_log_probs(X, v, params)
    l, S = emissions.shape
    with np.errstate(divide="ignore"):
        log_init = np.log(params.initial)
        log_trans = np.log(params.transition)
    score = log_init + emissions[0]
    back = np.zeros((l, S), dtype=int)
    for i in range(1, l):
        cand = score[:, None] + log_trans
        back[i] = cand.argmax(axis=0)
        score = cand[back[i], np.arange(S)] + emissions[i]
    path = [int(score.argmax())]
    for i in range(l - 1, 0, -1):
        path.append(int(back[i, path[-1]]))
    return path[::-1]


@dataclass
class Sequence:
    """One prepared sentence: embedding rows and 0/1 cluster tags."""
    X: np.ndarray
    v: np.ndarray


def prepare_corpus(corpus, embeddings, seed_tags) -> list[Sequence]:
    """Resolve every token to an embedding row and a seed cluster tag."""
    prepared = []
    for sent in corpus.sentences:
        X = embeddings.matrix(list(sent.tokens))
        try:
            v = np.array([seed_tags.tag[t] for t in sent.tokens], dtype=int)
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} has no cluster seed tag") from None
        prepared.append(Sequence(X=X, v=v))
    return prepared


def init_iob_params(sequences: list[Sequence], seed: int = 0,
                    smoothing: float = 1e-3) -> HmmParams:
    """Seed-tag driven initialization.

    mu_O is the mean embedding of tag-0 tokens; mu_I and mu_B start at the
    tag-1 mean plus small seeded jitter to break their symmetry. All three
    covariances start at the global covariance. The paper-style cluster
    potential table ([[1,0,0],[0,.5,.5]] over O/I/B) is transposed,
    renormalized per label and epsilon-smoothed so EM can move every entry.
    Starting on I and the O -> I transition are structurally masked.
    """
    rng = np.random.default_rng(seed)
    X_all = np.vstack([s.X for s in sequences])
    v_all = np.concatenate([s.v for s in sequences])
    d = X_all.shape[1]

    mean0 = X_all[v_all == 0].mean(axis=0) if np.any(v_all == 0) else X_all.mean(axis=0)
    mean1 = X_all[v_all == 1].mean(axis=0) if np.any(v_all == 1) else X_all.mean(axis=0)
    global_cov = np.cov(X_all.T, bias=True).reshape(d, d)
    floor = covariance_floor(X_all)
    global_cov += floor * np.eye(d)

    means = np.stack([mean0,
                      mean1 + rng.normal(scale=1e-2, size=d),
                      mean1 + rng.normal(scale=1e-2, size=d)])
    covariances = np.stack([global_cov.copy() for _ in range(3)])

    initial = np.array([0.5, 0.0, 0.5])
    initial_mask = np.array([True, False, True])
    transition = np.array([
        [0.5, 0.0, 0.5],          # O: cannot open a span with I
        [1 / 3, 1 / 3, 1 / 3],    # I
        [1 / 3, 1 / 3, 1 / 3],    # B
    ])
    transition_mask = np.array([
        [True, False, True],
        [True, True, True],
        [True, True, True],
    ])

    # paper potential table, cluster tag -> (O, I, B), transposed to p(v|z)
    potentials = np.array([[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]]).T
    cluster = potentials / potentials.sum(axis=1, keepdims=True)
    cluster = (cluster + smoothing) / (1.0 + 2.0 * smoothing)

    return HmmParams(labels=LABELS, initial=initial, transition=transition,
                     means=means, covariances=covariances,
                     cluster_emission=cluster, initial_mask=initial_mask,
                     transition_mask=transition_mask)


def covariance_floor(X_all: np.ndarray) -> float:
    """1e-4 times the mean per-dimension embedding variance."""
    return 1e-4 * float(X_all.var(axis=0).mean())


def em_fit(sequences: list[Sequence], init: HmmParams, max_iters: int = 100,
           tol: float = 1e-5, cov_floor: float | None = None
           ) -> tuple[HmmParams, TrainReport]:
    """Baum-Welch expectation-maximization.

    E-step posteriors come from forward-backward in log space; the M-step
    re-estimates the start/transition tables, the per-label Gaussians, and
    the cluster emission table from expected counts (the cluster table
    update is the training-time fine-tuning of the seed-tag features).
    Stops when the relative log-likelihood improvement drops below `tol`.
    Covariances are floored with an epsilon times identity each M-step so
    the Cholesky factorization stays viable.
    """
    params = HmmParams(
        labels=init.labels,
        initial=init.initial.copy(),
        transition=init.transition.copy(),
        means=init.means.copy(),
        covariances=init.covariances.copy(),
        cluster_emission=init.cluster_emission.copy(),
        initial_mask=init.initial_mask.copy(),
        transition_mask=init.transition_mask.copy(),
    )
    S = params.n_states
    d = params.dim
    X_all = np.vstack([s.X for s in sequences])
    if cov_floor is None:
        cov_floor = covariance_floor(X_all)
    report = TrainReport()

    for iteration in range(1, max_iters + 1):
        init_counts = np.zeros(S)
        trans_counts = np.zeros((S, S))
        gamma_sum = np.zeros(S)
        mean_acc = np.zeros((S, d))
        cluster_counts = np.zeros((S, 2))
        # accumulated second moments; covariance recovered after the means
        second_acc = np.zeros((S, d, d))
        total_ll = 0.0

        with np.errstate(divide="ignore"):
            log_trans = np.log(params.transition)
        for seq in sequences:
            emissions = _emission_log_probs(seq.X, seq.v, params)
            alpha = _forward(emissions, params)
            beta = _backward(emissions, params)
            ll = float(logsumexp(alpha[-1]))
            total_ll += ll

            log_gamma = alpha + beta - ll
            gamma = np.exp(log_gamma)
            init_counts += gamma[0]
            gamma_sum += gamma.sum(axis=0)
            mean_acc += gamma.T @ seq.X
            second_acc += np.einsum("ls,ld,le->sde", gamma, seq.X, seq.X)
            for tag in (0, 1):
                rows = seq.v == tag
                if np.any(rows):
                    cluster_counts[:, tag] += gamma[rows].sum(axis=0)

            if len(seq.X) > 1:
                # xi[i, s, s'] in log space, summed over positions
                log_xi = (alpha[:-1, :, None] + log_trans[None, :, :]
                          + (emissions[1:] + beta[1:])[:, None, :] - ll)
                trans_counts += np.exp(logsumexp(log_xi, axis=0))

        report.log_likelihoods.append(total_ll)
        if len(report.log_likelihoods) > 1:
            prev = report.log_likelihoods[-2]
            if abs(total_ll - prev) < tol * abs(prev):
                report.converged = True
                report.iterations = iteration
                break

        # M-step
        init_counts[~params.initial_mask] = 0.0
        params.initial = init_counts / init_counts.sum()
        trans_counts[~params.transition_mask] = 0.0
        row_tot = trans_counts.sum(axis=1, keepdims=True)
        for z in range(S):
            if row_tot[z] > 0:
                params.transition[z] = trans_counts[z] / row_tot[z]

        for z in range(S):
            if gamma_sum[z] <= 0:
                continue
            mu = mean_acc[z] / gamma_sum[z]
            params.means[z] = mu
            cov = second_acc[z] / gamma_sum[z] - np.outer(mu, mu)
            cov = 0.5 * (cov + cov.T) + cov_floor * np.eye(d)
            params.covariances[z] = cov

        cl_tot = cluster_counts.sum(axis=1, keepdims=True)
        for z in range(S):
            if cl_tot[z] > 0:
                params.cluster_emission[z] = cluster_counts[z] / cl_tot[z]

        report.iterations = iteration

    return params, report


def decode_corpus(sequences: list[Sequence], params: HmmParams) -> list[list[str]]:
    """Viterbi-decode every sequence to label-name lists."""
    return [[params.labels[z] for z in viterbi_decode(seq.X, seq.v, params)]
            for seq in sequences]
