"""Bidirectional LSTM encoder with a linear-chain CRF output layer.

Word vectors stay frozen; a small character-level BiLSTM (switchable) adds a
trainable char vector per token. Scores of a tag path are transition terms
(including virtual START/STOP) plus per-token emission scores; training
maximizes the log-likelihood of the noisy reference paths, decoding is
Viterbi. Structurally invalid IOB transitions are pinned at a large negative
constant so decoded output always parses into spans.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import tensor as T
from .data import split_tag

NEG_INF = -1e4


class TaggerDivergence(RuntimeError):
    def __init__(self, sentence_index: int):
        super().__init__(f"non-finite loss at sentence {sentence_index}")
        self.sentence_index = sentence_index


@dataclass
class Tagset:
    """O plus B-/I- tags for each entity type, with IOB transition rules."""

    types: tuple[str, ...]
    tags: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        self.tags = ("O",) + tuple(
            f"{p}-{t}" for t in self.types for p in ("B", "I"))

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        return self.tags.index(tag)

    def start_allowed(self, tag: str) -> bool:
        return split_tag(tag)[0] != "I"

    def transition_allowed(self, prev: str, cur: str) -> bool:
        prefix, etype = split_tag(cur)
        if prefix != "I":
            return True
        prev_prefix, prev_type = split_tag(prev)
        return prev_prefix in ("B", "I") and prev_type == etype

    @classmethod
    def for_components(cls, k: int) -> "Tagset":
        return cls(types=tuple(f"C{i}" for i in range(k)))


@dataclass
class TaggerConfig:
    hidden_size: int = 64
    char_dim: int = 16
    char_hidden: int = 16
    use_chars: bool = True
    learning_rate: float = 0.015
    lr_decay: float = 0.05       # lr shrinks 5% after each epoch
    dropout: float = 0.5
    clip_norm: float = 5.0
    seed: int = 0


def _lstm_params(rng, in_dim: int, hidden: int):
    scale = np.sqrt(2.0 / (in_dim + 4 * hidden))
    wx = T.param(rng.normal(scale=scale, size=(in_dim, 4 * hidden)))
    wh = T.param(rng.normal(scale=np.sqrt(2.0 / (5 * hidden)),
                            size=(hidden, 4 * hidden)))
    b = np.zeros((1, 4 * hidden))
    b[0, hidden:2 * hidden] = 1.0  # forget-gate bias
    return wx, wh, T.param(b)


def _lstm_run(xs: list[T.Node], wx: T.Node, wh: T.Node, b: T.Node,
              hidden: int, reverse: bool = False) -> list[T.Node]:
    """States (1, H) per input step; `reverse` runs right to left."""
    h = T.const(np.zeros((1, hidden)))
    c = T.const(np.zeros((1, hidden)))
    steps = list(reversed(xs)) if reverse else xs
    out = []
    for x in steps:
        gates = T.matmul(x, wx) + T.matmul(h, wh) + b
        i = T.sigmoid(gates[:, :hidden])
        f = T.sigmoid(gates[:, hidden:2 * hidden])
        g = T.tanh(gates[:, 2 * hidden:3 * hidden])
        o = T.sigmoid(gates[:, 3 * hidden:])
        c = T.mul(f, c) + T.mul(i, g)
        h = T.mul(o, T.tanh(c))
        out.append(h)
    return list(reversed(out)) if reverse else out


class TaggerModel:
    """Encoder weights, CRF transitions, and the frozen word embeddings."""

    def __init__(self, config: TaggerConfig, tagset: Tagset, embeddings,
                 corpus_tokens=None):
        self.config = config
        self.tagset = tagset
        self.embeddings = embeddings
        self.rng = np.random.default_rng(config.seed)
        self.epochs_trained = 0

        chars = sorted({c for tok in (corpus_tokens or []) for c in tok})
        self.char_vocab = {c: i + 1 for i, c in enumerate(chars)}  # 0 = unknown

        rng = self.rng
        h = config.hidden_size
        word_dim = embeddings.dim
        if config.use_chars:
            n_chars = len(self.char_vocab) + 1
            self.char_embed = T.param(rng.normal(scale=0.1,
                                                 size=(n_chars, config.char_dim)))
            self.char_fwd = _lstm_params(rng, config.char_dim, config.char_hidden)
            self.char_bwd = _lstm_params(rng, config.char_dim, config.char_hidden)
            in_dim = word_dim + 2 * config.char_hidden
        else:
            self.char_embed = None
            in_dim = word_dim

        self.word_fwd = _lstm_params(rng, in_dim, h)
        self.word_bwd = _lstm_params(rng, in_dim, h)

        n_tags = len(tagset)
        scale = np.sqrt(2.0 / (2 * h + h))
        self.bridge_w1 = T.param(rng.normal(scale=scale, size=(2 * h, h)))
        self.bridge_b1 = T.param(np.zeros((1, h)))
        self.bridge_w2 = T.param(rng.normal(scale=np.sqrt(2.0 / (h + n_tags)),
                                            size=(h, n_tags)))
        self.bridge_b2 = T.param(np.zeros((1, n_tags)))

        self.start_idx = n_tags
        self.stop_idx = n_tags + 1
        self.crf = T.param(rng.normal(scale=0.1, size=(n_tags + 2, n_tags + 2)))
        self._valid = self._transition_validity()

    def _transition_validity(self) -> np.ndarray:
        n = len(self.tagset)
        valid = np.zeros((n + 2, n + 2), dtype=bool)
        for i, a in enumerate(self.tagset.tags):
            for j, b in enumerate(self.tagset.tags):
                valid[i, j] = self.tagset.transition_allowed(a, b)
            valid[i, self.stop_idx] = True
        for j, b in enumerate(self.tagset.tags):
            valid[self.start_idx, j] = self.tagset.start_allowed(b)
        return valid

    @property
    def parameters(self) -> list[T.Node]:
        params = [*self.word_fwd, *self.word_bwd,
                  self.bridge_w1, self.bridge_b1, self.bridge_w2, self.bridge_b2,
                  self.crf]
        if self.char_embed is not None:
            params += [self.char_embed, *self.char_fwd, *self.char_bwd]
        return params

    def effective_transitions(self) -> T.Node:
        """CRF matrix with invalid IOB moves pinned at a large negative value."""
        mask = T.const(self._valid.astype(float))
        invalid = T.const(np.where(self._valid, 0.0, NEG_INF))
        return T.mul(self.crf, mask) + invalid

    def current_lr(self) -> float:
        return self.config.learning_rate * (1.0 - self.config.lr_decay) ** self.epochs_trained

    # ----- encoding --------------------------------------------------------

    def _char_vector(self, token: str) -> T.Node:
        ids = np.array([self.char_vocab.get(c, 0) for c in token], dtype=int)
        embedded = self.char_embed[ids]
        xs = [embedded[i:i + 1, :] for i in range(len(token))]
        ch = self.config.char_hidden
        fwd = _lstm_run(xs, *self.char_fwd, ch)
        bwd = _lstm_run(xs, *self.char_bwd, ch, reverse=True)
        return T.concat([fwd[-1], bwd[0]], axis=1)

    def _dropout(self, node: T.Node, train: bool) -> T.Node:
        p = self.config.dropout
        if not train or p <= 0:
            return node
        keep = 1.0 - p
        mask = self.rng.random(node.value.shape) < keep
        return T.mul(node, T.const(mask.astype(float) / keep))

    def encode(self, tokens, train: bool = False) -> dict:
        """Per-token bidirectional features and the emission score matrix.

        Returns graph nodes: `features` (l, 2H) and `scores` (l, n_tags).
        Dropout applies to token inputs and features only when `train`.
        """
        inputs = []
        for tok in tokens:
            vec = T.const(self.embeddings.lookup(tok)[None, :])
            if self.char_embed is not None:
                vec = T.concat([vec, self._char_vector(tok)], axis=1)
            inputs.append(self._dropout(vec, train))
        h = self.config.hidden_size
        fwd = _lstm_run(inputs, *self.word_fwd, h)
        bwd = _lstm_run(inputs, *self.word_bwd, h, reverse=True)
        feats = T.concat([T.concat(fwd, axis=0), T.concat(bwd, axis=0)], axis=1)
        feats = self._dropout(feats, train)
        hidden = T.tanh(T.matmul(feats, self.bridge_w1) + self.bridge_b1)
        scores = T.matmul(hidden, self.bridge_w2) + self.bridge_b2
        return {"features": feats, "scores": scores}

    # ----- persistence ------------------------------------------------------

    def to_json(self) -> dict:
        names = ["bridge_w1", "bridge_b1", "bridge_w2", "bridge_b2", "crf"]
        weights = {n: getattr(self, n).value.tolist() for n in names}
        for prefix, triple in (("word_fwd", self.word_fwd), ("word_bwd", self.word_bwd)):
            for part, node in zip(("wx", "wh", "b"), triple):
                weights[f"{prefix}_{part}"] = node.value.tolist()
        if self.char_embed is not None:
            weights["char_embed"] = self.char_embed.value.tolist()
            for prefix, triple in (("char_fwd", self.char_fwd), ("char_bwd", self.char_bwd)):
                for part, node in zip(("wx", "wh", "b"), triple):
                    weights[f"{prefix}_{part}"] = node.value.tolist()
        return {
            "config": {
                "hidden_size": self.config.hidden_size,
                "char_dim": self.config.char_dim,
                "char_hidden": self.config.char_hidden,
                "use_chars": self.config.use_chars,
                "learning_rate": self.config.learning_rate,
                "lr_decay": self.config.lr_decay,
                "dropout": self.config.dropout,
                "clip_norm": self.config.clip_norm,
                "seed": self.config.seed,
            },
            "types": list(self.tagset.types),
            "char_vocab": self.char_vocab,
            "epochs_trained": self.epochs_trained,
            "weights": weights,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict, embeddings) -> "TaggerModel":
        config = TaggerConfig(**obj["config"])
        model = cls(config, Tagset(types=tuple(obj["types"])), embeddings)
        model.char_vocab = dict(obj["char_vocab"])
        model.epochs_trained = obj["epochs_trained"]
        w = obj["weights"]
        if config.use_chars:
            model.char_embed = T.param(np.array(w["char_embed"]))
            model.char_fwd = tuple(T.param(np.array(w[f"char_fwd_{p}"]))
                                   for p in ("wx", "wh", "b"))
            model.char_bwd = tuple(T.param(np.array(w[f"char_bwd_{p}"]))
                                   for p in ("wx", "wh", "b"))
        model.word_fwd = tuple(T.param(np.array(w[f"word_fwd_{p}"]))
                               for p in ("wx", "wh", "b"))
        model.word_bwd = tuple(T.param(np.array(w[f"word_bwd_{p}"]))
                               for p in ("wx", "wh", "b"))
        for n in ("bridge_w1", "bridge_b1", "bridge_w2", "bridge_b2", "crf"):
            setattr(model, n, T.param(np.array(w[n])))
        return model

    @classmethod
    def load(cls, path, embeddings) -> "TaggerModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh), embeddings)


# ---------------------------------------------------------------------------
# CRF scoring (graph versions used in training)


def crf_score(scores: T.Node, transitions: T.Node, tag_ids: list[int],
              start_idx: int, stop_idx: int) -> T.Node:
    """Path score: START->y1, chain transitions, yl->STOP, plus emissions."""
    l = len(tag_ids)
    rows = [start_idx] + list(tag_ids)
    cols = list(tag_ids) + [stop_idx]
    trans = T.sum_(T.gather(transitions, rows, cols))
    emit = T.sum_(T.gather(scores, list(range(l)), tag_ids))
    return trans + emit


def crf_log_partition(scores: T.Node, transitions: T.Node,
                      start_idx: int, stop_idx: int, n_tags: int) -> T.Node:
    """Forward recursion with log-sum-exp over all tag paths."""
    l = scores.value.shape[0]
    alpha = transitions[start_idx:start_idx + 1, :n_tags] + scores[0:1, :]
    core = transitions[:n_tags, :n_tags]
    for i in range(1, l):
        inner = T.transpose(alpha) + core
        alpha = T.logsumexp(inner, axis=0, keepdims=True) + scores[i:i + 1, :]
    final = alpha + T.transpose(transitions[:n_tags, stop_idx:stop_idx + 1])
    return T.logsumexp(final)


def crf_nll(model: TaggerModel, sentences: list, labels: list,
            train: bool = True) -> T.Node:
    """Mean over the batch of (log partition - gold path score)."""
    transitions = model.effective_transitions()
    n_tags = len(model.tagset)
    total = None
    for tokens, tags in zip(sentences, labels):
        enc = model.encode(tokens, train=train)
        tag_ids = [model.tagset.index(t) for t in tags]
        gold = crf_score(enc["scores"], transitions, tag_ids,
                         model.start_idx, model.stop_idx)
        log_z = crf_log_partition(enc["scores"], transitions,
                                  model.start_idx, model.stop_idx, n_tags)
        nll = log_z - gold
        total = nll if total is None else total + nll
    return total * (1.0 / len(sentences))


# ---------------------------------------------------------------------------
# numpy inference path


def _np_log_partition(P: np.ndarray, trans: np.ndarray,
                      start_idx: int, stop_idx: int) -> float:
    n = P.shape[1]
    alpha = trans[start_idx, :n] + P[0]
    for i in range(1, P.shape[0]):
        alpha = np_logsumexp(alpha[:, None] + trans[:n, :n], axis=0) + P[i]
    return float(np_logsumexp(alpha + trans[:n, stop_idx]))


def _np_path_score(P: np.ndarray, trans: np.ndarray, tag_ids: list[int],
                   start_idx: int, stop_idx: int) -> float:
    rows = [start_idx] + list(tag_ids)
    cols = list(tag_ids) + [stop_idx]
    return float(trans[rows, cols].sum() + P[np.arange(len(tag_ids)), tag_ids].sum())


def viterbi(P: np.ndarray, trans: np.ndarray, start_idx: int,
            stop_idx: int) -> list[int]:
    """Best path with START/STOP bookkeeping; ties go to the lower tag index."""
    l, n = P.shape
    score = trans[start_idx, :n] + P[0]
    back = np.zeros((l, n), dtype=int)
    for i in range(1, l):
        cand = score[:, None] + trans[:n, :n]
        back[i] = cand.argmax(axis=0)
        score = cand[back[i], np.arange(n)] + P[i]
    score = score + trans[:n, stop_idx]
    path = [int(score.argmax())]
    for i in range(l - 1, 0, -1):
        path.append(int(back[i, path[-1]]))
    return path[::-1]


def decode(model: TaggerModel, tokens) -> list[str]:
    """Viterbi tag sequence for one sentence (no dropout)."""
    enc = model.encode(tokens, train=False)
    path = viterbi(enc["scores"].value, model.effective_transitions().value,
                   model.start_idx, model.stop_idx)
    return [model.tagset.tags[i] for i in path]


def sentence_log_prob(model: TaggerModel, tokens, tags) -> float:
    """Log probability of a tag sequence under the CRF (always <= 0)."""
    enc = model.encode(tokens, train=False)
    P = enc["scores"].value
    trans = model.effective_transitions().value
    tag_ids = [model.tagset.index(t) for t in tags]
    gold = _np_path_score(P, trans, tag_ids, model.start_idx, model.stop_idx)
    return gold - _np_log_partition(P, trans, model.start_idx, model.stop_idx)


def train_epoch(model: TaggerModel, sentences: list, labels: list) -> float:
    """One shuffled SGD pass (batch size 1); returns the mean loss.

    The learning rate follows base_lr * (1 - decay)^epochs_trained and the
    epoch counter advances after the pass.
    """
    order = model.rng.permutation(len(sentences))
    lr = model.current_lr()
    total = 0.0
    for idx in order:
        loss = crf_nll(model, [sentences[idx]], [labels[idx]], train=True)
        if not np.isfinite(loss.value):
            raise TaggerDivergence(int(idx))
        T.backward(loss)
        T.sgd_step(model.parameters, lr, model.config.clip_norm)
        total += float(loss.value)
    model.epochs_trained += 1
    return total / max(1, len(sentences))
