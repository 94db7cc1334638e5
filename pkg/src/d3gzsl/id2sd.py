"""In-distribution distillation: a frozen seen-class teacher guides the
unified student in both the embedding space (pairwise cosine alignment)
and the label space (KL between softmaxes of L2-normalized logits),
alongside the plain classification loss on the mixed batch.
"""

import numpy as np

from . import tensor as T
from .data import Batch, GzslDataset, epoch_rows
from .errors import ShapeError, StateError, ValidationError
from .nn import Adam, Mlp
from .tensor import Tensor


class TeacherModel:
    """Embedding net + seen-class head, frozen after pretraining."""

    def __init__(self, embed: Mlp, head: Mlp, tau: float = 1.0):
        self.embed = embed
        self.head = head
        self.tau = tau

    @property
    def n_seen(self) -> int:
        return self.head.out_dim

    def forward(self, x):
        z = self.embed.forward(x)
        return z, self.head.forward(z)

    def parameters(self):
        return self.embed.parameters() + self.head.parameters()

    def named_parameters(self):
        return self.embed.named_parameters() + self.head.named_parameters()

    def freeze(self):
        self.embed.freeze()
        self.head.freeze()

    @property
    def frozen(self) -> bool:
        return self.embed.frozen and self.head.frozen


class StudentModel:
    """Embedding net + unified (seen + unseen) classifier head."""

    def __init__(self, embed: Mlp, head: Mlp, n_seen: int, tau: float = 1.0,
                 seen_cols=None):
        self.embed = embed
        self.head = head
        self.n_seen = n_seen
        self.tau = tau
        self.seen_cols = list(range(n_seen)) if seen_cols is None else list(seen_cols)
        if len(self.seen_cols) != n_seen:
            raise ValidationError(
                f"seen_cols must list {n_seen} columns, got {len(self.seen_cols)}"
            )

    @property
    def n_classes(self) -> int:
        return self.head.out_dim

    def forward(self, x):
        z = self.embed.forward(x)
        return z, self.head.forward(z)

    def seen_slice(self, logits: Tensor) -> Tensor:
        """Columns of the unified logits that correspond to seen classes."""
        return T.slice_columns(logits, self.seen_cols)

    def parameters(self):
        return self.embed.parameters() + self.head.parameters()

    def named_parameters(self):
        return self.embed.named_parameters() + self.head.named_parameters()


def build_teacher(feat_dim, embed_dim, n_seen, rng, hidden=512, tau=1.0) -> TeacherModel:
    embed = Mlp("teacher_embed", [feat_dim, hidden, embed_dim],
                ["leaky_relu", "identity"], rng)
    head = Mlp("teacher_head", [embed_dim, n_seen], ["identity"], rng)
    return TeacherModel(embed, head, tau)


def build_student(feat_dim, embed_dim, n_seen, n_unseen, rng, hidden=512, tau=1.0) -> StudentModel:
    embed = Mlp("student_embed", [feat_dim, hidden, embed_dim],
                ["leaky_relu", "identity"], rng)
    head = Mlp("student_head", [embed_dim, n_seen + n_unseen], ["identity"], rng)
    return StudentModel(embed, head, n_seen, tau)


def _one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ValidationError(
            f"label {int(labels[(labels < 0) | (labels >= width)][0])} outside [0, {width})"
        )
    out = np.zeros((labels.size, width))
    out[np.arange(labels.size), labels] = 1.0
    return out


def pairwise_alignment_loss(sim: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy on sigmoid(similarities) over all ordered pairs.

    Same-class pairs (diagonal included) are positives, cross-class pairs
    negatives; the mean over the full n*n grid is returned as a loss
    (lower is better, >= 0). Uses softplus identities for stability:
    -log sigmoid(s) = softplus(-s) and -log(1 - sigmoid(s)) = softplus(s).
    """
    labels = np.asarray(labels)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    pos = T.mul(T.softplus(T.neg(sim)), Tensor(same))
    neg = T.mul(T.softplus(sim), Tensor(1.0 - same))
    return T.reduce_mean(T.add(pos, neg))


def loss_be(z_hat: Tensor, z_tilde: Tensor, labels) -> Tensor:
    """Batch embedding alignment between student rows (z_hat) and teacher
    rows (z_tilde) through their cosine-similarity matrix. Seen rows only."""
    sim = T.cosine_similarity_matrix(z_hat, z_tilde if isinstance(z_tilde, Tensor) else Tensor(z_tilde))
    return pairwise_alignment_loss(sim, labels)


def mean_kl(teacher_probs, student_log_probs: Tensor) -> Tensor:
    """Mean over rows of sum_k p_t * (log p_t - log p_s).

    The teacher distribution is a constant; zero probabilities contribute
    zero (0 * log 0 convention), so extreme rows stay finite.
    """
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    entropy_part = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    per_row = T.add(
        Tensor(entropy_part.sum(axis=1)),
        T.neg(T.reduce_sum(T.mul(Tensor(p), student_log_probs), axis=1)),
    )
    return T.reduce_mean(per_row)


def loss_kl(student_logits_seen: Tensor, teacher_logits) -> Tensor:
    """Mean KL(teacher || student) between softmaxes of L2-normalized logits.

    The teacher side is detached, so gradients reach the student only.
    """
    t = teacher_logits.detach() if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    if student_logits_seen.shape != t.shape:
        raise ShapeError(
            f"logit widths differ: student {student_logits_seen.shape}, teacher {t.shape}"
        )
    p_t = T.softmax_rows(T.l2_normalize_rows(t))
    log_p_s = T.log_softmax_rows(T.l2_normalize_rows(student_logits_seen))
    return mean_kl(p_t, log_p_s)


def loss_cls(student_logits: Tensor, labels, tau_s: float = 1.0) -> Tensor:
    """Temperature-scaled cross-entropy over the unified class set."""
    onehot = _one_hot(labels, student_logits.shape[1])
    logp = T.log_softmax_rows(student_logits, temperature=tau_s)
    return T.neg(T.reduce_mean(T.reduce_sum(T.mul(logp, Tensor(onehot)), axis=1)))


def loss_id(batch: Batch, teacher: TeacherModel, student: StudentModel):
    """Unweighted sum of the three in-distribution terms for one batch.

    Embedding and KL terms use the real seen rows only; classification
    covers the whole mixed batch. Returns (total, components dict).
    """
    x_all = batch.features()
    z_s, v_s = student.forward(x_all)
    with T.no_grad():
        z_t, v_t = teacher.forward(batch.x_real.detach())

    n_a = batch.n_real
    z_s_seen = T.slice_rows(z_s, 0, n_a)
    v_s_seen = student.seen_slice(T.slice_rows(v_s, 0, n_a))

    l_be = loss_be(z_s_seen, z_t, batch.y_real)
    l_kl = loss_kl(v_s_seen, v_t)
    l_cls = loss_cls(v_s, batch.labels(), student.tau)
    total = T.add(T.add(l_be, l_kl), l_cls)
    parts = {"be": l_be.item(), "kl": l_kl.item(), "cls": l_cls.item()}
    return total, parts


def pretrain_teacher(teacher: TeacherModel, ds: GzslDataset, epochs: int,
                     rng: np.random.Generator, lr: float = 1e-3,
                     batch_size: int = 64) -> dict:
    """Cross-entropy training of the teacher on real seen rows; freezes it.

    Returns per-epoch mean losses and the final seen-train accuracy.
    """
    if teacher.frozen:
        raise StateError("teacher is already frozen")
    if ds.train_labels.size and ds.train_labels.max() >= teacher.n_seen:
        raise ValidationError("teacher pretraining saw an unseen-class label")
    opt = Adam(teacher.parameters(), lr=lr)
    epoch_losses = []
    for _ in range(epochs):
        total, batches = 0.0, 0
        for rows in epoch_rows(ds, batch_size, rng):
            _, logits = teacher.forward(Tensor(ds.features[rows]))
            loss = loss_cls(logits, ds.labels[rows], teacher.tau)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        epoch_losses.append(total / max(batches, 1))

    with T.no_grad():
        _, logits = teacher.forward(Tensor(ds.train_features))
    acc = float(np.mean(np.argmax(logits.data, axis=1) == ds.train_labels))
    teacher.freeze()
    return {"epoch_losses": epoch_losses, "final_train_accuracy": acc}
