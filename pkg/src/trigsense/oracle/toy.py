"""Deterministic toy backends.

Three families:

* ToyBigramLM        - seeded first-order chain; scoring, next-token rows,
                       and two-sided masked-slot conditionals.
* ToyOneHotEmbedder  - normalized mean of one-hot token vectors.
* ToyAttention*      - a single-layer attention network with exact analytic
                       gradients, available with a classifier head or a
                       next-token generator head, trainable via fine_tune.

Everything is a pure function of (seed, config, arguments), which is what
makes desk-scale oracles (finite differences, exact coalition enumeration)
possible.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .. import kernels
from ..errors import InvalidInputError
from ..types import (
    AttentionStack,
    EmbeddingGradient,
    InjectionReport,
    ScalarTarget,
    TaskOutput,
    TokenDistribution,
    TokenSequence,
    TrainConfig,
    TrainExample,
    unit_normalize,
)
from .base import ModelHandle

MASK_ID = 0
UNK_ID = 1
EOS_ID = 2
RARE_ID = 3
N_SPECIALS = 4


class ToyBigramLM(ModelHandle):
    """Seeded first-order Markov chain over a small vocabulary.

    Token frequencies follow a mild Zipf profile; ids listed in rare_ids are
    scaled down so they are improbable in every context. boosts is a list of
    (prev_id, next_id, multiplier) applied before row normalization, letting
    callers carve high-probability slots into the chain.
    """

    task = "none"
    supports_scoring = True
    is_encoder = True
    is_decoder = True

    def __init__(
        self,
        vocab_size: int,
        seed: int = 0,
        boosts: Sequence[tuple[int, int, float]] = (),
        rare_ids: Sequence[int] = (RARE_ID,),
        rare_scale: float = 0.01,
        smoothness: float = 0.8,
        mask_id: int = MASK_ID,
        init: np.ndarray | None = None,
        trans: np.ndarray | None = None,
    ):
        if vocab_size < 2:
            raise InvalidInputError("bigram model needs a vocabulary of at least 2")
        self.vocab_size = int(vocab_size)
        self.mask_id = int(mask_id)
        self.seed = int(seed)
        self.backend_id = f"toy:bigram(seed={seed},V={vocab_size})"
        if init is not None and trans is not None:
            self.init = np.asarray(init, dtype=np.float64)
            self.trans = np.asarray(trans, dtype=np.float64)
        else:
            # smoothness is the gamma shape: higher = flatter transition rows
            rng = np.random.default_rng(seed)
            freq = 1.0 / (np.arange(vocab_size) + 5.0)
            for rid in rare_ids:
                freq[rid] *= rare_scale
            freq[self.mask_id] *= 0.2
            noise = rng.gamma(shape=smoothness, scale=1.0 / smoothness, size=(vocab_size, vocab_size))
            trans_w = freq[None, :] * noise
            for prev, nxt, mult in boosts:
                trans_w[prev, nxt] *= mult
            self.trans = trans_w / trans_w.sum(axis=1, keepdims=True)
            init_w = freq * rng.gamma(shape=smoothness, scale=1.0 / smoothness, size=vocab_size)
            self.init = init_w / init_w.sum()
        with np.errstate(divide="ignore"):  # zero-probability entries map to -inf
            self.log_init = np.log(self.init)
            self.log_trans = np.log(self.trans)
        self._powers: dict[int, np.ndarray] = {0: np.eye(self.vocab_size)}

    @classmethod
    def uniform(cls, vocab_size: int) -> "ToyBigramLM":
        """Uniform unigram chain: perplexity of any sequence equals |V|."""
        v = np.full(vocab_size, 1.0 / vocab_size)
        t = np.full((vocab_size, vocab_size), 1.0 / vocab_size)
        handle = cls(vocab_size, seed=0, init=v, trans=t)
        handle.backend_id = f"toy:bigram(uniform,V={vocab_size})"
        return handle

    def _power(self, k: int) -> np.ndarray:
        if k not in self._powers:
            self._powers[k] = self._power(k - 1) @ self.trans
        return self._powers[k]

    def log_probability(self, seq: TokenSequence) -> float:
        self._check_sequence(seq)
        tokens = np.asarray(seq.tokens, dtype=np.int64)
        return float(kernels.bigram_logprob_sum(tokens, self.log_init, self.log_trans))

    def perplexity(self, seq: TokenSequence) -> float:
        return float(np.exp(-self.log_probability(seq) / seq.n))

    def next_token_distribution(self, prefix: TokenSequence) -> TokenDistribution:
        self._check_sequence(prefix)
        return TokenDistribution(self.trans[prefix.tokens[-1]].copy())

    def masked_fill_distribution(self, masked_seq: TokenSequence, position: int) -> TokenDistribution:
        """Conditional of the masked slot given its nearest unmasked neighbors.

        Under the chain the exact conditional is
        p(v) ~ (T^dl)[left, v] * (T^dr)[v, right]; absent context on a side
        drops that factor (the left side falls back to the marginal
        init @ T^position).
        """
        self._check_sequence(masked_seq)
        if not 0 <= position < masked_seq.n:
            raise InvalidInputError(f"position {position} out of range")
        if masked_seq.tokens[position] != self.mask_id:
            raise InvalidInputError(f"position {position} does not hold the mask token")
        tokens = masked_seq.tokens
        li = position - 1
        while li >= 0 and tokens[li] == self.mask_id:
            li -= 1
        ri = position + 1
        while ri < masked_seq.n and tokens[ri] == self.mask_id:
            ri += 1
        if li >= 0:
            left = self._power(position - li)[tokens[li], :]
        else:
            left = self.init @ self._power(position)
        if ri < masked_seq.n:
            right = self._power(ri - position)[:, tokens[ri]]
        else:
            right = np.ones(self.vocab_size)
        probs = left * right
        total = probs.sum()
        if total <= 0.0:
            probs = np.full(self.vocab_size, 1.0 / self.vocab_size)
        else:
            probs = probs / total
        return TokenDistribution(probs)

    def sample_sequence(self, rng: np.random.Generator, length: int) -> TokenSequence:
        """Walk the chain; used by synthetic corpus generators."""
        if length < 1:
            raise InvalidInputError("length must be >= 1")
        out = [int(rng.choice(self.vocab_size, p=self.init))]
        for _ in range(length - 1):
            out.append(int(rng.choice(self.vocab_size, p=self.trans[out[-1]])))
        return TokenSequence.of(out)


class ToyOneHotEmbedder(ModelHandle):
    """Sentence embedding = unit-normalized mean of one-hot token vectors."""

    supports_embedding = True

    def __init__(self, vocab_size: int, mask_id: int = MASK_ID):
        self.vocab_size = int(vocab_size)
        self.mask_id = int(mask_id)
        self.backend_id = f"toy:embedder(V={vocab_size})"

    def sentence_embedding(self, seq: TokenSequence) -> np.ndarray:
        self._check_sequence(seq)
        counts = np.bincount(np.asarray(seq.tokens), minlength=self.vocab_size).astype(np.float64)
        return unit_normalize(counts / seq.n)


class _AttentionCore:
    """Parameters plus forward/backward plumbing shared by both heads."""

    PARAM_KEYS = ("emb", "pos", "wq", "wk", "wv", "wo", "b")

    def __init__(self, params: dict[str, np.ndarray], cfg: dict):
        self.params = params
        self.cfg = cfg

    @classmethod
    def seeded(
        cls,
        vocab_size: int,
        width: int,
        heads: int,
        out_dim: int,
        max_len: int,
        seed: int,
        pool_mode: int,
    ) -> "_AttentionCore":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(width)
        params = {
            "emb": rng.normal(0.0, 1.0, size=(vocab_size, width)) * scale,
            "pos": rng.normal(0.0, 1.0, size=(max_len, width)) * 0.1 * scale,
            "wq": rng.normal(0.0, 1.0, size=(heads, width, width)) * scale,
            "wk": rng.normal(0.0, 1.0, size=(heads, width, width)) * scale,
            "wv": rng.normal(0.0, 1.0, size=(heads, width, width)) * scale,
            "wo": rng.normal(0.0, 1.0, size=(width, out_dim)) * scale,
            "b": np.zeros(out_dim),
        }
        cfg = {
            "vocab_size": vocab_size,
            "width": width,
            "heads": heads,
            "out_dim": out_dim,
            "max_len": max_len,
            "seed": seed,
            "pool_mode": pool_mode,
        }
        return cls(params, cfg)

    def clone(self) -> "_AttentionCore":
        return _AttentionCore({k: v.copy() for k, v in self.params.items()}, dict(self.cfg))

    def _check_length(self, n: int):
        if n > self.cfg["max_len"]:
            raise InvalidInputError(
                f"sequence of length {n} exceeds backend max_len {self.cfg['max_len']}"
            )

    def token_matrix(
        self, ids: Sequence[int], alpha: float = 1.0, baseline: str | None = None, n_fixed: int = 0
    ) -> np.ndarray:
        """Token-embedding rows, optionally interpolated toward a baseline.

        Rows with index < n_fixed are never interpolated (a generator's
        already-emitted continuation stays at the input point).
        """
        emb = self.params["emb"]
        E = emb[np.asarray(ids, dtype=np.int64)].copy()
        if baseline is not None and alpha != 1.0:
            if baseline == "mask":
                base = np.tile(emb[MASK_ID], (len(ids), 1))
            elif baseline == "zeros":
                base = np.zeros_like(E)
            else:
                raise InvalidInputError(f"unknown baseline {baseline!r}")
            mixed = base + alpha * (E - base)
            E[n_fixed:] = mixed[n_fixed:]
        return E

    def hidden(self, E_tok: np.ndarray) -> np.ndarray:
        n = E_tok.shape[0]
        self._check_length(n)
        return E_tok + self.params["pos"][:n]

    def forward(self, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        return kernels.attn_forward(H, p["wq"], p["wk"], p["wv"], p["wo"], p["b"], self.cfg["pool_mode"])

    def backward(self, H: np.ndarray, dlogits: np.ndarray, grads: dict[str, np.ndarray] | None = None) -> np.ndarray:
        p = self.params
        if grads is None:
            return kernels.attn_backward(
                H, p["wq"], p["wk"], p["wv"], p["wo"], p["b"], dlogits, self.cfg["pool_mode"]
            )
        return kernels.attn_backward(
            H, p["wq"], p["wk"], p["wv"], p["wo"], p["b"], dlogits, self.cfg["pool_mode"],
            grads["wq"], grads["wk"], grads["wv"], grads["wo"], grads["b"],
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + eps)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


class _ToyAttentionBase(ModelHandle):
    """Shared behavior of the classifier and generator heads."""

    has_attention = True
    has_gradients = True
    supports_fine_tuning = True
    supports_embedding = True

    def __init__(self, core: _AttentionCore, version: int = 0):
        self.core = core
        self.version = version
        self.vocab_size = core.cfg["vocab_size"]
        self.mask_id = MASK_ID
        self.eos_id = EOS_ID
        self.last_training: InjectionReport | None = None

    # -- introspection -----------------------------------------------------
    def attention_maps(self, seq: TokenSequence) -> AttentionStack:
        self._check_sequence(seq)
        H = self.core.hidden(self.core.token_matrix(seq.tokens))
        _, attn = self.core.forward(H)
        return AttentionStack(attn[None, :, :, :])

    def token_embeddings(self, seq: TokenSequence) -> np.ndarray:
        self._check_sequence(seq)
        return self.core.token_matrix(seq.tokens)

    def baseline_embeddings(self, seq: TokenSequence, baseline: str = "mask") -> np.ndarray:
        self._check_sequence(seq)
        return self.core.token_matrix(seq.tokens, alpha=0.0, baseline=baseline)

    def sentence_embedding(self, seq: TokenSequence) -> np.ndarray:
        self._check_sequence(seq)
        H = self.core.hidden(self.core.token_matrix(seq.tokens))
        p = self.core.params
        _, attn = self.core.forward(H)
        heads = attn.shape[0]
        Z = np.zeros((H.shape[0], H.shape[1]))
        for h in range(heads):
            Z += attn[h] @ (H @ p["wv"][h])
        return unit_normalize(Z.mean(axis=0) / heads)

    # -- training ------------------------------------------------------------
    def _example_rows(self, examples: Sequence[TrainExample], eta: float) -> list[tuple[TokenSequence, object, float]]:
        if not examples:
            raise InvalidInputError("fine_tune requires at least one example")
        if eta < 0:
            raise InvalidInputError("eta must be >= 0")
        rows = []
        for ex in examples:
            weight = 1.0 if ex.weight_class == "clean" else float(eta)
            if weight == 0.0:
                continue
            self._check_sequence(ex.sequence)
            rows.append((ex.sequence, ex.target, weight))
        if not rows:
            raise InvalidInputError("all examples carry zero weight; nothing to train on")
        return rows

    def _dataset_loss(self, core: _AttentionCore, rows, total: int) -> float:
        return sum(w * self._example_loss(core, seq, target) for seq, target, w in rows) / total

    def fine_tune(self, examples: Sequence[TrainExample], eta: float, cfg: TrainConfig) -> "ModelHandle":
        rows = self._example_rows(examples, eta)
        core = self.core.clone()
        total = len(rows)
        report = InjectionReport(
            n_clean=sum(1 for e in examples if e.weight_class == "clean"),
            n_poison=sum(1 for e in examples if e.weight_class == "poison"),
            eta=float(eta),
            seed=cfg.seed,
            loss_before=self._dataset_loss(core, rows, total),
        )
        rng = np.random.default_rng(cfg.seed)
        opt = _Adam(core.params, cfg.learning_rate)
        for _ in range(cfg.epochs):
            order = rng.permutation(total)
            epoch_loss = 0.0
            for start in range(0, total, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                grads = core.zero_grads()
                for idx in batch:
                    seq, target, weight = rows[idx]
                    epoch_loss += weight * self._example_grad(core, grads, seq, target, weight)
                for k in grads:
                    grads[k] /= len(batch)
                if cfg.optimizer == "adam":
                    opt.step(core.params, grads)
                else:
                    for k in core.params:
                        core.params[k] -= cfg.learning_rate * grads[k]
            report.epoch_losses.append(epoch_loss / total)
        report.loss_after = self._dataset_loss(core, rows, total)
        new = type(self)(core, version=self.version + 1)
        new.last_training = report
        return new

    # Subclasses: per-example loss and gradient accumulation.
    def _example_loss(self, core: _AttentionCore, seq: TokenSequence, target) -> float:
        raise NotImplementedError

    def _example_grad(self, core, grads, seq, target, weight) -> float:
        raise NotImplementedError

    def _scatter_input_grad(self, grads: dict[str, np.ndarray], ids, dH: np.ndarray):
        np.add.at(grads["emb"], np.asarray(ids, dtype=np.int64), dH)
        grads["pos"][: dH.shape[0]] += dH

    # -- serialization ---------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.core.params.items()}

    def save(self, path: str):
        meta = {"kind": type(self).__name__, "cfg": self.core.cfg, "version": self.version}
        np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **self.core.params)

    @classmethod
    def load(cls, path: str) -> "_ToyAttentionBase":
        data = np.load(path)
        meta = json.loads(bytes(data["meta"]).decode())
        params = {k: data[k] for k in _AttentionCore.PARAM_KEYS}
        kind = {"ToyAttentionClassifier": ToyAttentionClassifier, "ToyAttentionGenerator": ToyAttentionGenerator}[
            meta["kind"]
        ]
        return kind(_AttentionCore(params, meta["cfg"]), version=meta["version"])


class ToyAttentionClassifier(_ToyAttentionBase):
    """Single-layer attention classifier (mean-pooled linear head).

    Architecturally bidirectional, but exposes no fill or next-token head,
    so both sampling capability flags stay False.
    """

    task = "classification"
    readout_hint = "mean"  # matches the mean-pooled head

    def __init__(self, core: _AttentionCore, version: int = 0):
        super().__init__(core, version)
        self.n_classes = core.cfg["out_dim"]
        self.backend_id = (
            f"toy:classifier(seed={core.cfg['seed']},V={self.vocab_size},C={self.n_classes})"
        )

    @classmethod
    def seeded(
        cls,
        vocab_size: int,
        n_classes: int = 2,
        width: int = 12,
        heads: int = 1,
        max_len: int = 64,
        seed: int = 0,
    ) -> "ToyAttentionClassifier":
        core = _AttentionCore.seeded(
            vocab_size, width, heads, n_classes, max_len, seed, kernels.POOL_MEAN
        )
        return cls(core)

    def logits(self, seq: TokenSequence, alpha: float = 1.0, baseline: str = "mask") -> np.ndarray:
        self._check_sequence(seq)
        H = self.core.hidden(self.core.token_matrix(seq.tokens, alpha, baseline))
        out, _ = self.core.forward(H)
        return out

    def predict(self, seq: TokenSequence) -> TaskOutput:
        return TaskOutput(logits=self.logits(seq))

    def _target_dlogits(self, target: ScalarTarget) -> np.ndarray:
        if target.kind != "class_logit":
            raise InvalidInputError("classifier targets must be class logits")
        if not 0 <= target.class_id < self.n_classes:
            raise InvalidInputError(f"class id {target.class_id} out of range")
        d = np.zeros(self.n_classes)
        d[target.class_id] = 1.0
        return d

    def target_value(self, seq, target, alpha=1.0, baseline="mask") -> float:
        return float(self.logits(seq, alpha, baseline)[self._target_dlogits(target).argmax()])

    def target_gradient(self, seq, target, alpha=1.0, baseline="mask") -> EmbeddingGradient:
        self._check_sequence(seq)
        dlogits = self._target_dlogits(target)
        H = self.core.hidden(self.core.token_matrix(seq.tokens, alpha, baseline))
        return EmbeddingGradient(self.core.backward(H, dlogits))

    def _example_loss(self, core, seq, target) -> float:
        H = core.hidden(core.token_matrix(seq.tokens))
        logits, _ = core.forward(H)
        return -float(np.log(max(_softmax(logits)[int(target)], 1e-300)))

    def _example_grad(self, core, grads, seq, target, weight) -> float:
        H = core.hidden(core.token_matrix(seq.tokens))
        logits, _ = core.forward(H)
        p = _softmax(logits)
        loss = -float(np.log(max(p[int(target)], 1e-300)))
        dlogits = p.copy()
        dlogits[int(target)] -= 1.0
        dH = core.backward(H, dlogits * weight, grads)
        self._scatter_input_grad(grads, seq.tokens, dH)
        return loss


class ToyAttentionGenerator(_ToyAttentionBase):
    """Single-layer attention next-token model with greedy decoding."""

    task = "generation"
    is_decoder = True
    supports_scoring = True
    readout_hint = "last"

    def __init__(self, core: _AttentionCore, version: int = 0):
        super().__init__(core, version)
        self.backend_id = f"toy:generator(seed={core.cfg['seed']},V={self.vocab_size})"

    @classmethod
    def seeded(
        cls,
        vocab_size: int,
        width: int = 12,
        heads: int = 1,
        max_len: int = 64,
        seed: int = 0,
        max_new_tokens: int = 8,
    ) -> "ToyAttentionGenerator":
        core = _AttentionCore.seeded(
            vocab_size, width, heads, vocab_size, max_len, seed, kernels.POOL_LAST
        )
        handle = cls(core)
        handle.max_new_tokens = max_new_tokens
        return handle

    def _next_logits(self, ids: Sequence[int]) -> np.ndarray:
        H = self.core.hidden(self.core.token_matrix(ids))
        out, _ = self.core.forward(H)
        return out

    def next_token_distribution(self, prefix: TokenSequence) -> TokenDistribution:
        self._check_sequence(prefix)
        return TokenDistribution(_softmax(self._next_logits(prefix.tokens)))

    def predict(self, seq: TokenSequence) -> TaskOutput:
        """Greedy decoding with the handle's fixed config."""
        self._check_sequence(seq)
        ids = list(seq.tokens)
        out: list[int] = []
        for _ in range(self.max_new_tokens):
            if len(ids) >= self.core.cfg["max_len"]:
                break
            nxt = int(np.argmax(self._next_logits(ids)))
            out.append(nxt)
            ids.append(nxt)
            if nxt == self.eos_id:
                break
        if not out:
            out = [self.eos_id]
        return TaskOutput(sequence=TokenSequence.of(out))

    def perplexity(self, seq: TokenSequence) -> float:
        """Teacher-forced next-token perplexity over positions 2..n."""
        self._check_sequence(seq)
        if seq.n < 2:
            raise InvalidInputError("generator perplexity needs n >= 2")
        nll = 0.0
        for t in range(1, seq.n):
            p = _softmax(self._next_logits(seq.tokens[:t]))
            nll -= float(np.log(max(p[seq.tokens[t]], 1e-300)))
        return float(np.exp(nll / (seq.n - 1)))

    def continuation_loglik(self, prefix: TokenSequence, continuation: TokenSequence) -> float:
        """Mean per-token log-likelihood of the continuation given the prefix."""
        self._check_sequence(prefix)
        self._check_sequence(continuation)
        ids = list(prefix.tokens)
        total = 0.0
        for tok in continuation.tokens:
            p = _softmax(self._next_logits(ids))
            total += float(np.log(max(p[tok], 1e-300)))
            ids.append(tok)
        return total / continuation.n

    def target_value(self, seq, target: ScalarTarget, alpha=1.0, baseline="mask") -> float:
        if target.kind != "continuation_loglik":
            raise InvalidInputError("generator targets must be continuation log-likelihoods")
        self._check_sequence(seq)
        n = seq.n
        total = 0.0
        ids = list(seq.tokens)
        for tok in target.continuation.tokens:
            E = self.core.token_matrix(ids, alpha, baseline)
            Efull = self.core.token_matrix(ids)
            E[n:] = Efull[n:]  # only the original input is interpolated
            logits, _ = self.core.forward(self.core.hidden(E))
            total += float(np.log(max(_softmax(logits)[tok], 1e-300)))
            ids.append(tok)
        return total

    def target_gradient(self, seq, target: ScalarTarget, alpha=1.0, baseline="mask") -> EmbeddingGradient:
        if target.kind != "continuation_loglik":
            raise InvalidInputError("generator targets must be continuation log-likelihoods")
        self._check_sequence(seq)
        n = seq.n
        ids = list(seq.tokens)
        dE = np.zeros((n, self.core.cfg["width"]))
        for tok in target.continuation.tokens:
            E = self.core.token_matrix(ids, alpha, baseline)
            Efull = self.core.token_matrix(ids)
            E[n:] = Efull[n:]
            H = self.core.hidden(E)
            logits, _ = self.core.forward(H)
            p = _softmax(logits)
            dlogits = -p
            dlogits[tok] += 1.0  # d log p[tok] / d logits
            dH = self.core.backward(H, dlogits)
            dE += dH[:n]
            ids.append(tok)
        return EmbeddingGradient(dE)

    def _example_loss(self, core, seq, target: TokenSequence) -> float:
        ids = list(seq.tokens)
        nll = 0.0
        for tok in target.tokens:
            H = core.hidden(core.token_matrix(ids))
            logits, _ = core.forward(H)
            nll -= float(np.log(max(_softmax(logits)[tok], 1e-300)))
            ids.append(tok)
        return nll / target.n

    def _example_grad(self, core, grads, seq, target: TokenSequence, weight) -> float:
        ids = list(seq.tokens)
        nll = 0.0
        for tok in target.tokens:
            H = core.hidden(core.token_matrix(ids))
            logits, _ = core.forward(H)
            p = _softmax(logits)
            nll -= float(np.log(max(p[tok], 1e-300)))
            dlogits = p.copy()
            dlogits[tok] -= 1.0
            dH = core.backward(H, dlogits * (weight / target.n), grads)
            self._scatter_input_grad(grads, ids, dH)
            ids.append(tok)
        return nll / target.n
