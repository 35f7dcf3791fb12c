"""Reinforcement-learned instance selector over noisy-labeled sentences.

A logistic policy scores each sentence state (mean BiLSTM features plus mean
per-tag scores) and samples keep/drop actions in batches of N. Kept
sentences train the tagger; the batch reward is the mean CRF log-probability
of the kept sentences' current labels, and the policy weights move along
r * grad log A (optionally against a moving-average reward baseline, since
raw rewards are always negative). After each round the rejected sentences
are relabeled by the current tagger and merged back for the next round.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tagger import TaggerModel, crf_nll, decode, sentence_log_prob


@dataclass
class SelectorConfig:
    learning_rate: float = 0.5          # alpha in the policy update
    epsilon_floor: float = 0.05         # exploration floor on both actions
    use_baseline: bool = False          # moving-average reward baseline
    baseline_window: int = 10
    batch_size: int = 10                # N, sentences per reward
    rounds: int = 3                     # passes over the corpus
    seed: int = 0


@dataclass
class SelectorParams:
    weights: np.ndarray                 # W, one weight per state dimension
    bias: float = 0.0                   # b

    @classmethod
    def zeros(cls, state_dim: int) -> "SelectorParams":
        return cls(weights=np.zeros(state_dim), bias=0.0)


@dataclass
class SelectionRound:
    sentence_ids: list[int]
    actions: list[int]
    reward: float
    positives: list[int]
    negatives: list[int]


@dataclass
class RefineReport:
    rounds: list[dict] = field(default_factory=list)
    warmup_loss: float = 0.0
    relabeled_total: int = 0


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def state_repr(tokens, tagger: TaggerModel) -> np.ndarray:
    """Mean pooled encoder features concatenated with mean per-tag scores.

    Fixed dimension 2H + |tagset| regardless of sentence length.
    """
    enc = tagger.encode(tokens, train=False)
    return np.concatenate([enc["features"].value.mean(axis=0),
                           enc["scores"].value.mean(axis=0)])


def select_probability(state: np.ndarray, params: SelectorParams) -> float:
    return _sigmoid(float(params.weights @ state + params.bias))


def policy_prob(state: np.ndarray, action: int, params: SelectorParams) -> float:
    """a * sigma(W s + b) + (1 - a) * (1 - sigma(W s + b))."""
    p = select_probability(state, params)
    return action * p + (1 - action) * (1.0 - p)


def log_policy_grad(state: np.ndarray, action: int,
                    params: SelectorParams) -> tuple[np.ndarray, float]:
    """Analytic gradient of log A(s, a): (a - sigma) * [s ; 1]."""
    p = select_probability(state, params)
    coeff = action - p
    return coeff * state, coeff


def compute_reward(selected: list[tuple[list, list]], tagger: TaggerModel) -> float:
    """Mean log-probability of the selected sentences' labels; 0 for none."""
    if not selected:
        return 0.0
    return float(np.mean([sentence_log_prob(tagger, toks, tags)
                          for toks, tags in selected]))


def reinforce_update(round_: SelectionRound, states: list[np.ndarray],
                     params: SelectorParams, alpha: float,
                     advantage: float | None = None) -> SelectorParams:
    """One policy-gradient step over a completed batch of actions.

    Uses the raw reward unless an explicit advantage (reward minus baseline)
    is supplied.
    """
    scale = round_.reward if advantage is None else advantage
    grad_w = np.zeros_like(params.weights)
    grad_b = 0.0
    for state, action in zip(states, round_.actions):
        gw, gb = log_policy_grad(state, action, params)
        grad_w += gw
        grad_b += gb
    return SelectorParams(weights=params.weights + alpha * scale * grad_w,
                          bias=params.bias + alpha * scale * grad_b)


def _train_on(tagger: TaggerModel, items: list[tuple[list, list]], lr: float) -> None:
    for tokens, tags in items:
        loss = crf_nll(tagger, [tokens], [tags], train=True)
        T.backward(loss)
        T.sgd_step(tagger.parameters, lr, tagger.config.clip_norm)


def refine_loop(sentences: list[list[str]], noisy_labels: list[list[str]],
                tagger: TaggerModel, config: SelectorConfig,
                warmup: bool = True
                ) -> tuple[list[list[str]], TaggerModel, SelectorParams, RefineReport]:
    """Iteratively select, train, reward, and relabel.

    Per round: the selector samples keep/drop for each batch of N sentences,
    kept sentences train the tagger, one reward per completed batch updates
    the policy, and the round's rejected sentences are relabeled by the
    current tagger before the next round.
    """
    from .tagger import train_epoch  # deferred to keep import top light

    rng = np.random.default_rng(config.seed)
    labels = [list(l) for l in noisy_labels]
    report = RefineReport()

    if warmup:
        report.warmup_loss = train_epoch(tagger, sentences, labels)

    params: SelectorParams | None = None
    baseline: deque[float] = deque(maxlen=config.baseline_window)

    for round_idx in range(config.rounds):
        order = rng.permutation(len(sentences))
        lr = tagger.current_lr()
        rejected: list[int] = []
        round_rewards: list[float] = []
        n_selected = 0

        for start in range(0, len(order), config.batch_size):
            batch = [int(i) for i in order[start:start + config.batch_size]]
            states = [state_repr(sentences[i], tagger) for i in batch]
            if params is None:
                params = SelectorParams.zeros(len(states[0]))

            actions = []
            for s in states:
                p = select_probability(s, params)
                p = min(max(p, config.epsilon_floor), 1.0 - config.epsilon_floor)
                actions.append(int(rng.random() < p))

            positives = [i for i, a in zip(batch, actions) if a == 1]
            negatives = [i for i, a in zip(batch, actions) if a == 0]
            if positives:
                _train_on(tagger, [(sentences[i], labels[i]) for i in positives], lr)

            reward = compute_reward([(sentences[i], labels[i]) for i in positives],
                                    tagger)
            advantage = None
            if config.use_baseline and positives:
                advantage = reward - (float(np.mean(baseline)) if baseline else 0.0)
            round_ = SelectionRound(sentence_ids=batch, actions=actions,
                                    reward=reward, positives=positives,
                                    negatives=negatives)
            params = reinforce_update(round_, states, params,
                                      config.learning_rate, advantage)
            if positives:
                baseline.append(reward)
                round_rewards.append(reward)
            n_selected += len(positives)
            rejected.extend(negatives)

        relabeled = 0
        for i in rejected:
            new = decode(tagger, sentences[i])
            if new != labels[i]:
                relabeled += 1
            labels[i] = new
        report.relabeled_total += relabeled
        tagger.epochs_trained += 1  # decay the tagger lr once per round

        report.rounds.append({
            "round": round_idx,
            "mean_reward": float(np.mean(round_rewards)) if round_rewards else 0.0,
            "selected": n_selected,
            "rejected": len(rejected),
            "relabeled": relabeled,
        })

    if params is None:
        params = SelectorParams.zeros(
            len(state_repr(sentences[0], tagger)) if sentences else 1)
    return labels, tagger, params, report


def greedy_selection(sentences: list[list[str]], tagger: TaggerModel,
                     params: SelectorParams) -> list[int]:
    """Final deterministic selection: keep sentences with probability > 0.5."""
    return [i for i, toks in enumerate(sentences)
            if select_probability(state_repr(toks, tagger), params) > 0.5]
