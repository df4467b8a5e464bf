"""Adapter mapping the capability interface onto pretrained transformer models.

Requires the optional `external` extra (torch + transformers). Attention and
gradients are optional capabilities: whether they are advertised depends on
what the loaded architecture exposes, and recurrent backends simply report
them unavailable so callers fall back to proxy heuristics.

Desk-scale tests exercise only construction and capability errors; running
paper-scale campaigns through this adapter is an external activity.
"""

from __future__ import annotations

import numpy as np

from ..errors import CapabilityMissingError, ConfigError, InvalidInputError
from ..types import (
    AttentionStack,
    EmbeddingGradient,
    ScalarTarget,
    TaskOutput,
    TokenDistribution,
    TokenSequence,
    unit_normalize,
)
from .base import ModelHandle


def _import_torch():
    try:
        import torch  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:
        raise ConfigError(
            "external backends need the optional dependencies: "
            "pip install 'trigsense[external]'"
        ) from exc
    import torch
    import transformers

    return torch, transformers


class ExternalModelAdapter(ModelHandle):
    """Wraps a Hugging Face checkpoint behind the handle interface."""

    reentrant = False  # the underlying runtime holds shared mutable state

    def __init__(
        self,
        model_name: str,
        task: str = "classification",
        device: str = "cpu",
        max_length: int = 128,
        n_classes: int = 2,
        max_new_tokens: int = 32,
    ):
        torch, transformers = _import_torch()
        self.torch = torch
        self.backend_id = f"external:{model_name}"
        self.task = task
        self.device = device
        self.max_length = max_length
        self.max_new_tokens = max_new_tokens

        self.tokenizer = transformers.AutoTokenizer.from_pretrained(model_name)
        config = transformers.AutoConfig.from_pretrained(model_name)
        self.is_decoder = bool(getattr(config, "is_decoder", False) or config.model_type in ("gpt2", "llama"))
        self.is_encoder = not self.is_decoder

        if task == "classification":
            self.model = transformers.AutoModelForSequenceClassification.from_pretrained(
                model_name, num_labels=n_classes
            )
            self.n_classes = n_classes
        elif task == "generation":
            self.model = transformers.AutoModelForCausalLM.from_pretrained(model_name)
        else:
            raise ConfigError(f"unsupported external task {task!r}")
        self.model.to(device)
        self.model.eval()

        if self.is_encoder:
            self.mlm = transformers.AutoModelForMaskedLM.from_pretrained(model_name).to(device).eval()
        else:
            self.mlm = None

        self.vocab_size = self.tokenizer.vocab_size
        self.mask_id = self.tokenizer.mask_token_id
        self.eos_id = self.tokenizer.eos_token_id
        self.has_attention = bool(getattr(config, "num_attention_heads", 0))
        self.has_gradients = True
        self.supports_scoring = task == "generation" or self.mlm is not None
        self.supports_embedding = True
        self.supports_fine_tuning = True

    def _ids(self, seq: TokenSequence):
        return self.torch.tensor([list(seq.tokens)], device=self.device)

    def perplexity(self, seq: TokenSequence) -> float:
        torch = self.torch
        ids = self._ids(seq)
        with torch.no_grad():
            if self.task == "generation":
                out = self.model(input_ids=ids, labels=ids)
                return float(torch.exp(out.loss))
            if self.mlm is None:
                raise CapabilityMissingError(f"{self.backend_id} cannot score sequences")
            # pseudo-perplexity: mask each position in turn
            total = 0.0
            for i in range(seq.n):
                masked = ids.clone()
                masked[0, i] = self.mask_id
                logits = self.mlm(input_ids=masked).logits[0, i]
                logp = torch.log_softmax(logits, dim=-1)[seq.tokens[i]]
                total -= float(logp)
            return float(np.exp(total / seq.n))

    def sentence_embedding(self, seq: TokenSequence) -> np.ndarray:
        torch = self.torch
        with torch.no_grad():
            out = self.model(input_ids=self._ids(seq), output_hidden_states=True)
        hidden = out.hidden_states[-1][0].mean(dim=0).cpu().numpy()
        return unit_normalize(hidden)

    def masked_fill_distribution(self, masked_seq: TokenSequence, position: int) -> TokenDistribution:
        if self.mlm is None:
            raise CapabilityMissingError(f"{self.backend_id} has no masked-fill head")
        if masked_seq.tokens[position] != self.mask_id:
            raise InvalidInputError(f"position {position} does not hold the mask token")
        torch = self.torch
        with torch.no_grad():
            logits = self.mlm(input_ids=self._ids(masked_seq)).logits[0, position]
        return TokenDistribution(torch.softmax(logits, dim=-1).cpu().numpy().astype(np.float64))

    def next_token_distribution(self, prefix: TokenSequence) -> TokenDistribution:
        if self.task != "generation":
            raise CapabilityMissingError(f"{self.backend_id} has no causal head")
        torch = self.torch
        with torch.no_grad():
            logits = self.model(input_ids=self._ids(prefix)).logits[0, -1]
        return TokenDistribution(torch.softmax(logits, dim=-1).cpu().numpy().astype(np.float64))

    def attention_maps(self, seq: TokenSequence) -> AttentionStack:
        if not self.has_attention:
            raise CapabilityMissingError(f"{self.backend_id} exposes no attention")
        torch = self.torch
        with torch.no_grad():
            out = self.model(input_ids=self._ids(seq), output_attentions=True)
        maps = np.stack([a[0].cpu().numpy() for a in out.attentions]).astype(np.float64)
        maps /= maps.sum(axis=-1, keepdims=True)
        return AttentionStack(maps)

    def token_embeddings(self, seq: TokenSequence) -> np.ndarray:
        emb = self.model.get_input_embeddings().weight.detach()
        return emb[list(seq.tokens)].cpu().numpy().astype(np.float64)

    def baseline_embeddings(self, seq: TokenSequence, baseline: str = "mask") -> np.ndarray:
        if baseline == "zeros":
            return np.zeros_like(self.token_embeddings(seq))
        emb = self.model.get_input_embeddings().weight.detach()
        base_id = self.mask_id if self.mask_id is not None else self.eos_id
        row = emb[base_id].cpu().numpy().astype(np.float64)
        return np.tile(row, (seq.n, 1))

    def target_gradient(self, seq, target: ScalarTarget, alpha=1.0, baseline="mask") -> EmbeddingGradient:
        torch = self.torch
        E = torch.tensor(self.token_embeddings(seq), device=self.device, dtype=torch.float32)
        B = torch.tensor(self.baseline_embeddings(seq, baseline), device=self.device, dtype=torch.float32)
        point = (B + alpha * (E - B)).unsqueeze(0).requires_grad_(True)
        out = self.model(inputs_embeds=point)
        if target.kind == "class_logit":
            scalar = out.logits[0, target.class_id]
        else:
            raise CapabilityMissingError("continuation gradients are not wired for external backends")
        scalar.backward()
        return EmbeddingGradient(point.grad[0].detach().cpu().numpy().astype(np.float64))

    def predict(self, seq: TokenSequence) -> TaskOutput:
        torch = self.torch
        if self.task == "classification":
            with torch.no_grad():
                logits = self.model(input_ids=self._ids(seq)).logits[0]
            return TaskOutput(logits=logits.cpu().numpy().astype(np.float64))
        with torch.no_grad():
            out = self.model.generate(
                self._ids(seq), max_new_tokens=self.max_new_tokens, do_sample=False
            )
        new = out[0, seq.n :].cpu().tolist() or [self.eos_id]
        return TaskOutput(sequence=TokenSequence.of(new))

    def fine_tune(self, examples, eta, cfg):
        torch = self.torch
        import copy as _copy

        if not examples:
            raise InvalidInputError("fine_tune requires at least one example")
        model = _copy.deepcopy(self.model)
        model.train()
        torch.manual_seed(cfg.seed)
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)
        rows = [
            (ex.sequence, ex.target, 1.0 if ex.weight_class == "clean" else float(eta))
            for ex in examples
        ]
        rows = [r for r in rows if r[2] > 0.0]
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.epochs):
            for idx in rng.permutation(len(rows)):
                seq, target, weight = rows[idx]
                ids = self._ids(seq)
                if self.task == "classification":
                    out = model(input_ids=ids, labels=torch.tensor([int(target)], device=self.device))
                else:
                    full = torch.tensor([list(seq.tokens) + list(target.tokens)], device=self.device)
                    out = model(input_ids=full, labels=full)
                (weight * out.loss).backward()
                opt.step()
                opt.zero_grad()
        clone = _copy.copy(self)
        clone.model = model.eval()
        clone.version = self.version + 1
        return clone


def make_external(model_name: str, **config) -> ExternalModelAdapter:
    return ExternalModelAdapter(model_name=model_name, **config)
