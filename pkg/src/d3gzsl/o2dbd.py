"""Out-of-distribution batch distillation.

Teacher logits are reduced to a scalar score per row (max-softmax or the
negative log-sum-exp energy), squashed by a learnable sigmoid into an ID
confidence c, and paired as (c, 1 - c). The student side projects its
softmax probabilities through a small net onto the same 2-simplex; a
pairwise cosine alignment loss with class-label supervision ties the two.
"""

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .id2sd import pairwise_alignment_loss
from .nn import Mlp
from .tensor import Tensor

SCORER_METHODS = ("msp", "energy")


class OodScorer:
    """Row-wise confidence score over frozen classifier logits."""

    def __init__(self, method: str = "msp", temperature: float = 1.0):
        if method not in SCORER_METHODS:
            raise ParameterError(f"method must be one of {SCORER_METHODS}, got {method!r}")
        if not temperature > 0:
            raise ParameterError(f"temperature must be positive, got {temperature}")
        self.method = method
        self.temperature = temperature


def ood_score(scorer: OodScorer, teacher_logits) -> Tensor:
    """Score each row of seen-class logits; output is a constant (n,) tensor.

    msp:    max of the row softmax, in [1/S, 1].
    energy: -T * log(sum_k exp(f_k / T)), in [-max f - T ln S, -max f].
    """
    logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"expected 2-D logits, got shape {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    if scorer.method == "msp":
        e = np.exp(shifted)
        scores = e.max(axis=1) / e.sum(axis=1)
    else:
        t = scorer.temperature
        lse = np.log(np.exp(shifted / t).sum(axis=1)) + logits.max(axis=1) / t
        scores = -t * lse
    return Tensor(scores)


class LearnableSigmoid:
    """Trainable squashing c = sigmoid(alpha * s + beta) with alpha > 0.

    The slope is reparameterized through softplus so confidence stays
    strictly increasing in the score no matter what the optimizer does.
    """

    def __init__(self, init_alpha: float = 1.0, init_beta: float = 0.0):
        if not init_alpha > 0:
            raise ParameterError(f"init_alpha must be positive, got {init_alpha}")
        # softplus(raw) == init_alpha
        raw = np.log(np.expm1(init_alpha))
        self.raw_alpha = Tensor(np.asarray(raw), requires_grad=True)
        self.beta = Tensor(np.asarray(init_beta), requires_grad=True)

    def alpha(self) -> Tensor:
        return T.softplus(self.raw_alpha)

    def confidence(self, scores: Tensor) -> Tensor:
        """Map scores to confidence pairs (c, 1 - c), one row per score."""
        s = scores if isinstance(scores, Tensor) else Tensor(scores)
        if s.ndim == 1:
            s = T.reshape(s, (s.shape[0], 1))
        if s.ndim != 2 or s.shape[1] != 1:
            raise ShapeError(f"scores must be (n,) or (n, 1), got {scores.shape}")
        c = T.sigmoid(T.add(T.mul(s, self.alpha()), self.beta))
        return T.concat_cols([c, T.sub(1.0, c)])

    def parameters(self):
        return [self.raw_alpha, self.beta]

    def named_parameters(self):
        return [("ood_sigmoid.raw_alpha", self.raw_alpha), ("ood_sigmoid.beta", self.beta)]


class OodProjector:
    """Maps unified-class softmax probabilities to a 2-way simplex."""

    def __init__(self, net: Mlp):
        if net.out_dim != 2:
            raise ParameterError(f"projector must output 2 values, got {net.out_dim}")
        self.net = net

    def project(self, student_logits: Tensor) -> Tensor:
        probs = T.softmax_rows(student_logits)
        return T.softmax_rows(self.net.forward(probs))

    def parameters(self):
        return self.net.parameters()

    def named_parameters(self):
        return self.net.named_parameters()


def build_projector(n_classes: int, rng: np.random.Generator, hidden: int = 16) -> OodProjector:
    return OodProjector(
        Mlp("ood_projector", [n_classes, hidden, 2], ["leaky_relu", "identity"], rng)
    )


def project_student(p: OodProjector, student_logits: Tensor) -> Tensor:
    return p.project(student_logits)


def confidence_targets(scorer: OodScorer, squash: LearnableSigmoid,
                       teacher_logits) -> Tensor:
    """Teacher-side confidence pairs; scores are detached, the squash is not."""
    return squash.confidence(ood_score(scorer, teacher_logits))


def loss_od(h_hat: Tensor, h_tilde: Tensor, labels) -> Tensor:
    """Pairwise alignment between projected student pairs and teacher
    confidence pairs over the whole mixed batch (seen and generated rows)."""
    if h_hat.shape != h_tilde.shape:
        raise ShapeError(f"shapes differ: {h_hat.shape} vs {h_tilde.shape}")
    sim = T.cosine_similarity_matrix(h_hat, h_tilde)
    return pairwise_alignment_loss(sim, labels)
