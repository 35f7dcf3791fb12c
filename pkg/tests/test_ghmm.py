import itertools
import math

import numpy as np
import pytest
from pytest import approx

from embner import ghmm
from embner.ghmm import (
    HmmParams,
    Sequence,
    em_fit,
    forward_loglik,
    init_iob_params,
    joint_log_prob,
    log_gaussian_density,
    posteriors,
    viterbi_decode,
)


def random_params(rng, n_states=3, d=2, masked=False):
    initial = rng.dirichlet(np.ones(n_states))
    transition = np.stack([rng.dirichlet(np.ones(n_states)) for _ in range(n_states)])
    means = rng.normal(size=(n_states, d))
    covs = []
    for _ in range(n_states):
        a = rng.normal(size=(d, d))
        covs.append(a @ a.T + d * np.eye(d))
    cluster = np.stack([rng.dirichlet(np.ones(2)) for _ in range(n_states)])
    params = HmmParams(labels=tuple(f"S{i}" for i in range(n_states)),
                       initial=initial, transition=transition,
                       means=means, covariances=np.stack(covs),
                       cluster_emission=cluster)
    if masked:
        params.transition[0, 1] = 0.0
        params.transition[0] /= params.transition[0].sum()
        params.transition_mask[0, 1] = False
    return params


def random_sentence(rng, l, d=2):
    return rng.normal(size=(l, d)), rng.integers(0, 2, size=l)


def enumerate_paths_loglik(X, v, params):
    total = -np.inf
    for path in itertools.product(range(params.n_states), repeat=len(X)):
        total = np.logaddexp(total, joint_log_prob(X, v, list(path), params))
    return total


# ---------------------------------------------------------------------------
# log_gaussian_density


def test_density_1d_standard_normal():
    assert log_gaussian_density(np.array([0.0]), np.zeros(1), np.eye(1)) == approx(
        math.log(1.0 / math.sqrt(2 * math.pi)))


def test_density_2d_at_mean():
    mu = np.array([1.0, -2.0])
    assert log_gaussian_density(mu, mu, np.eye(2)) == approx(-math.log(2 * math.pi))


def test_density_matches_naive_inverse():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    sigma = a @ a.T + 3 * np.eye(3)
    mu = rng.normal(size=3)
    x = rng.normal(size=3)
    naive = (-0.5 * (x - mu) @ np.linalg.inv(sigma) @ (x - mu)
             - 0.5 * np.log((2 * np.pi) ** 3 * np.linalg.det(sigma)))
    assert log_gaussian_density(x, mu, sigma) == approx(naive, abs=1e-10)


def test_density_rejects_non_pd():
    with pytest.raises(ValueError, match="S0"):
        log_gaussian_density(np.zeros(2), np.zeros(2), -np.eye(2), label="S0")


# ---------------------------------------------------------------------------
# joint_log_prob


def test_joint_single_token_is_initial_plus_emissions():
    rng = np.random.default_rng(1)
    params = random_params(rng)
    X, v = random_sentence(rng, 1)
    z = 2
    expected = (np.log(params.initial[z])
                + log_gaussian_density(X[0], params.means[z], params.covariances[z])
                + np.log(params.cluster_emission[z, v[0]]))
    assert joint_log_prob(X, v, [z], params) == approx(expected, abs=1e-12)


def test_joint_length_two_hand_product():
    params = HmmParams(labels=("A", "B"),
                       initial=np.array([0.6, 0.4]),
                       transition=np.array([[0.7, 0.3], [0.2, 0.8]]),
                       means=np.array([[0.0], [2.0]]),
                       covariances=np.array([[[1.0]], [[0.5]]]),
                       cluster_emission=np.array([[0.9, 0.1], [0.3, 0.7]]))
    X = np.array([[0.5], [1.5]])
    v = np.array([0, 1])
    hand = (math.log(0.6)
            + log_gaussian_density(X[0], params.means[0], params.covariances[0])
            + math.log(0.9)
            + math.log(0.3)
            + log_gaussian_density(X[1], params.means[1], params.covariances[1])
            + math.log(0.7))
    assert joint_log_prob(X, v, [0, 1], params) == approx(hand, abs=1e-12)


def test_any_path_below_marginal():
    rng = np.random.default_rng(2)
    params = random_params(rng)
    X, v = random_sentence(rng, 3)
    marginal = forward_loglik(X, v, params)
    for path in itertools.product(range(3), repeat=3):
        assert joint_log_prob(X, v, list(path), params) <= marginal + 1e-12


# ---------------------------------------------------------------------------
# forward_loglik


def test_forward_single_token():
    rng = np.random.default_rng(3)
    params = random_params(rng)
    X, v = random_sentence(rng, 1)
    per_state = [joint_log_prob(X, v, [z], params) for z in range(3)]
    assert forward_loglik(X, v, params) == approx(
        np.logaddexp.reduce(per_state), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_path_enumeration(seed):
    rng = np.random.default_rng(seed)
    params = random_params(rng)
    X, v = random_sentence(rng, 4)
    assert forward_loglik(X, v, params) == approx(
        enumerate_paths_loglik(X, v, params), abs=1e-8)


def test_forward_deterministic_chain_equals_joint():
    rng = np.random.default_rng(6)
    params = random_params(rng)
    params.initial = np.array([1.0, 0.0, 0.0])
    params.transition[0] = np.array([1.0, 0.0, 0.0])
    X, v = random_sentence(rng, 3)
    assert forward_loglik(X, v, params) == approx(
        joint_log_prob(X, v, [0, 0, 0], params), abs=1e-10)


def test_posteriors_sum_to_one():
    rng = np.random.default_rng(7)
    params = random_params(rng, masked=True)
    X, v = random_sentence(rng, 6)
    gamma = posteriors(X, v, params)
    assert gamma.sum(axis=1) == approx(np.ones(6), abs=1e-9)


# ---------------------------------------------------------------------------
# viterbi


@pytest.mark.parametrize("seed", range(5))
def test_viterbi_matches_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    params = random_params(rng)
    X, v = random_sentence(rng, 4)
    best_path, best_score = None, -np.inf
    for path in itertools.product(range(3), repeat=4):
        score = joint_log_prob(X, v, list(path), params)
        if score > best_score + 1e-12:
            best_path, best_score = list(path), score
    assert viterbi_decode(X, v, params) == best_path


def test_viterbi_dominant_emission_goes_all_first_state():
    rng = np.random.default_rng(8)
    params = random_params(rng)
    params.means[0] = np.zeros(2)
    params.means[1] = np.full(2, 50.0)
    params.means[2] = np.full(2, -50.0)
    X = rng.normal(scale=0.1, size=(5, 2))
    v = np.zeros(5, dtype=int)
    params.cluster_emission = np.full((3, 2), 0.5)
    assert viterbi_decode(X, v, params) == [0] * 5


def test_viterbi_respects_structural_mask():
    rng = np.random.default_rng(9)
    for seed in range(10):
        rng2 = np.random.default_rng(seed)
        params = random_params(rng2, masked=True)
        X, v = random_sentence(rng2, 6)
        path = viterbi_decode(X, v, params)
        for a, b in zip(path, path[1:]):
            assert not (a == 0 and b == 1)


def test_viterbi_invariant_to_positionwise_emission_shift():
    rng = np.random.default_rng(10)
    params = random_params(rng)
    X, v = random_sentence(rng, 5)
    before = viterbi_decode(X, v, params)
    shifted = HmmParams(labels=params.labels, initial=params.initial,
                        transition=params.transition, means=params.means,
                        covariances=params.covariances,
                        cluster_emission=params.cluster_emission * np.array([3.0, 0.25]))
    assert viterbi_decode(X, v, shifted) == before


# ---------------------------------------------------------------------------
# EM


def test_single_state_em_recovers_sample_mean():
    rng = np.random.default_rng(11)
    seqs = [Sequence(X=rng.normal(loc=2.0, size=(5, 2)),
                     v=rng.integers(0, 2, size=5)) for _ in range(10)]
    init = HmmParams(labels=("O",),
                     initial=np.array([1.0]),
                     transition=np.array([[1.0]]),
                     means=np.zeros((1, 2)),
                     covariances=np.eye(2)[None, :, :],
                     cluster_emission=np.array([[0.5, 0.5]]))
    fitted, _ = em_fit(seqs, init, max_iters=3, cov_floor=1e-8)
    X_all = np.vstack([s.X for s in seqs])
    assert fitted.means[0] == approx(X_all.mean(axis=0), abs=1e-8)


def sample_hmm_corpus(params, rng, n_sentences, min_len=3, max_len=9):
    seqs, states = [], []
    for _ in range(n_sentences):
        l = int(rng.integers(min_len, max_len + 1))
        z = [rng.choice(params.n_states, p=params.initial)]
        for _ in range(l - 1):
            z.append(rng.choice(params.n_states, p=params.transition[z[-1]]))
        X = np.stack([rng.multivariate_normal(params.means[s], params.covariances[s])
                      for s in z])
        v = np.array([rng.choice(2, p=params.cluster_emission[s]) for s in z])
        seqs.append(Sequence(X=X, v=v))
        states.append(z)
    return seqs, states


def test_em_recovers_known_transition_matrix():
    rng = np.random.default_rng(12)
    sigma = 0.5
    true = HmmParams(
        labels=("S0", "S1", "S2"),
        initial=np.array([0.5, 0.3, 0.2]),
        transition=np.array([[0.7, 0.2, 0.1],
                             [0.15, 0.7, 0.15],
                             [0.1, 0.3, 0.6]]),
        means=np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]]),
        covariances=np.stack([sigma ** 2 * np.eye(2)] * 3),
        cluster_emission=np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]]),
    )
    # means separated by >= 6 sigma (distance 6, sigma 0.5 -> 12 sigma)
    seqs, _ = sample_hmm_corpus(true, rng, 500)

    X_all = np.vstack([s.X for s in seqs])
    picks = X_all[rng.choice(len(X_all), size=3, replace=False)]
    init = HmmParams(
        labels=true.labels,
        initial=np.full(3, 1 / 3),
        transition=np.full((3, 3), 1 / 3),
        means=picks,
        covariances=np.stack([np.cov(X_all.T) for _ in range(3)]),
        cluster_emission=np.full((3, 2), 0.5),
    )
    fitted, report = em_fit(seqs, init, max_iters=60)

    best = np.inf
    for perm in itertools.permutations(range(3)):
        p = list(perm)
        err = np.abs(fitted.transition[np.ix_(p, p)] - true.transition).max()
        best = min(best, err)
    assert best < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_em_loglik_nondecreasing(seed):
    rng = np.random.default_rng(200 + seed)
    gen = random_params(rng, d=2)
    seqs, _ = sample_hmm_corpus(gen, rng, 20, min_len=2, max_len=6)
    init = random_params(np.random.default_rng(seed + 999), d=2)
    _, report = em_fit(seqs, init, max_iters=25, tol=0.0)
    lls = report.log_likelihoods
    for a, b in zip(lls, lls[1:]):
        assert b >= a - 1e-9


def test_em_rows_stay_normalized_and_masks_hold():
    rng = np.random.default_rng(13)
    gen = random_params(rng, d=2)
    seqs, _ = sample_hmm_corpus(gen, rng, 30, min_len=2, max_len=7)
    init = init_iob_params(seqs, seed=0)
    fitted, _ = em_fit(seqs, init, max_iters=15, tol=0.0)
    assert fitted.initial.sum() == approx(1.0, abs=1e-9)
    assert fitted.transition.sum(axis=1) == approx(np.ones(3), abs=1e-9)
    assert fitted.cluster_emission.sum(axis=1) == approx(np.ones(3), abs=1e-9)
    assert fitted.initial[ghmm.I] == 0.0
    assert fitted.transition[ghmm.O, ghmm.I] == 0.0
    fitted.validate()


def test_init_iob_params_structure():
    rng = np.random.default_rng(14)
    seqs = [Sequence(X=rng.normal(size=(6, 3)), v=np.array([0, 0, 1, 1, 0, 1]))]
    params = init_iob_params(seqs, seed=0)
    params.validate()
    assert params.initial[ghmm.I] == 0.0
    assert params.transition[ghmm.O, ghmm.I] == 0.0
    # cluster table keeps the paper reading: tag 0 favors O, tag 1 splits I/B
    assert params.cluster_emission[ghmm.O, 0] > 0.99
    assert params.cluster_emission[ghmm.I, 1] > 0.99
    assert params.cluster_emission[ghmm.B, 1] > 0.99
    # B and I means are jittered apart
    assert not np.allclose(params.means[ghmm.I], params.means[ghmm.B])


def test_params_json_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    params = random_params(rng, masked=True)
    path = tmp_path / "model.json"
    params.save(path)
    back = HmmParams.load(path)
    assert back.labels == params.labels
    assert back.transition == approx(params.transition)
    assert back.covariances == approx(params.covariances)
    assert np.array_equal(back.transition_mask, params.transition_mask)
