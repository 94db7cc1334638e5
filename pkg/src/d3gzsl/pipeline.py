"""End-to-end runs: joint distillation training, the two-stage routing
baselines, inference, and the seen/unseen/harmonic evaluation protocol.

Modes:
  d3gzsl    joint training of generator + unified student with the
            classification loss plus lambda-weighted distillation terms
  baseline  same loop with lambda forced to 0 and both distillation
            switches off (generator + classification loss only)
  ts        two-stage routing: threshold a teacher OOD score, then send
            each test row to a seen or unseen expert classifier
  iv_ts     idealized ts: routing by ground-truth seen/unseen membership
"""

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import GzslDataset, epoch_rows, sample_batch
from .errors import (
    DivergenceError,
    ParameterError,
    StateError,
    ValidationError,
)
from .feature_gen import GaussianOracleGenerator, build_wgan, fg_train_step
from .id2sd import (
    TeacherModel,
    build_student,
    build_teacher,
    loss_be,
    loss_cls,
    loss_kl,
    pretrain_teacher,
)
from .nn import Adam, Mlp
from .o2dbd import LearnableSigmoid, OodScorer, build_projector, loss_od, ood_score
from .tensor import Tensor

MODES = ("d3gzsl", "baseline", "ts", "iv_ts")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of one training run; defaults target the synthetic bench."""

    mode: str = "d3gzsl"
    seed: int = 0
    epochs: int = 15
    batch_size: int = 64
    syn_per_class: int = 6
    lambda_: float = 1.0
    use_id2sd: bool = True
    use_o2dbd: bool = True
    ood_method: str = "msp"
    ood_temperature: float = 1.0
    tau_o: float = 1.0
    tau_s: float = 1.0
    embed_dim: int = 64
    hidden_dim: int = 512
    proj_hidden: int = 16
    fg_variant: str = "gaussian_oracle"
    fg_hidden: int = 256
    fg_warmup_epochs: int = 60
    n_critic: int = 5
    gp_weight: float = 10.0
    cls_weight: float = 0.01
    lr_student: float = 1e-3
    lr_gan: float = 1e-4
    teacher_epochs: int = 12
    teacher_lr: float = 1e-3
    fg_pretrain_epochs: int = 70
    ts_holdout_frac: float = 0.2
    ts_gen_per_class: int = 60
    ts_expert_epochs: int = 20
    ts_expert_hidden: int = 128
    gamma_quantiles: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_ < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lambda_}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.fg_variant not in ("gaussian_oracle", "wgan_gp"):
            raise ParameterError(f"unknown fg_variant {self.fg_variant!r}")


def harmonic_mean(u: float, s: float) -> float:
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


@dataclass
class RunReport:
    """Metrics, loss traces and the resolved config of one run."""

    mode: str
    seed: int
    lambda_: float
    ood_method: str
    epochs: int
    unseen_acc: float
    seen_acc: float
    harmonic: float
    wall_ms: float
    epoch_losses: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    CSV_HEADER = "mode,seed,lambda,ood_method,U,S,H,epochs,wall_ms"

    def __post_init__(self):
        expect = harmonic_mean(self.unseen_acc, self.seen_acc)
        if abs(self.harmonic - expect) > 1e-6:
            raise ValidationError(
                f"harmonic mean {self.harmonic} inconsistent with U={self.unseen_acc}, "
                f"S={self.seen_acc} (expected {expect})"
            )

    def csv_row(self) -> str:
        return ",".join(
            [
                self.mode,
                str(self.seed),
                f"{self.lambda_:.10g}",
                self.ood_method,
                f"{self.unseen_acc:.6f}",
                f"{self.seen_acc:.6f}",
                f"{self.harmonic:.6f}",
                str(self.epochs),
                f"{self.wall_ms:.3f}",
            ]
        )


def infer(model, x) -> np.ndarray:
    """Unified-class prediction: argmax over all logits, ties to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    with T.no_grad():
        _, logits = model.forward(Tensor(x))
    return np.argmax(logits.data, axis=1)


def gzsl_metrics(y_true: np.ndarray, y_pred: np.ndarray, n_seen: int, n_classes: int) -> dict:
    """Per-class mean top-1 accuracy on seen/unseen partitions, in percent."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    seen_mask = y_true < n_seen
    if not seen_mask.any() or seen_mask.all():
        raise ValidationError("test split needs both seen and unseen rows")

    def per_class_mean(mask) -> float:
        accs = []
        for c in np.unique(y_true[mask]):
            rows = y_true == c
            accs.append(float(np.mean(y_pred[rows] == c)))
        return 100.0 * float(np.mean(accs))

    s = per_class_mean(seen_mask)
    u = per_class_mean(~seen_mask)
    return {"U": u, "S": s, "H": harmonic_mean(u, s)}


def evaluate_gzsl(student, ds: GzslDataset) -> dict:
    """U/S/H of a trained unified classifier on the dataset's test split."""
    preds = infer(student, ds.test_features)
    return gzsl_metrics(ds.test_labels, preds, ds.n_seen, ds.n_classes)


def _build_generator(cfg: TrainConfig, ds: GzslDataset, rng: np.random.Generator):
    if cfg.fg_variant == "gaussian_oracle":
        return GaussianOracleGenerator.from_dataset(ds)
    return build_wgan(
        ds.feat_dim,
        ds.attr_dim,
        rng,
        hidden=cfg.fg_hidden,
        gp_weight=cfg.gp_weight,
        n_critic=cfg.n_critic,
        cls_weight=cfg.cls_weight,
    )


def _check_finite(value: float, epoch: int):
    if not np.isfinite(value):
        raise DivergenceError(epoch, value)


def train_d3gzsl(cfg: TrainConfig, ds: GzslDataset, teacher: TeacherModel,
                 rng_streams: dict):
    """Joint training loop shared by the d3gzsl and baseline modes.

    Per batch: one WGAN-GP alternation on the real seen rows (wgan variant
    only), then a single backward of
        L_cls + lambda * (L_be + L_kl if id2sd) + lambda * (L_od if o2dbd)
    through generator, student and projector/squash parameters.
    """
    if not teacher.frozen:
        raise StateError("teacher must be pretrained and frozen before joint training")

    student = build_student(ds.feat_dim, cfg.embed_dim, ds.n_seen, ds.n_unseen,
                            rng_streams["student_init"], hidden=cfg.hidden_dim,
                            tau=cfg.tau_s)
    projector = build_projector(ds.n_classes, rng_streams["proj_init"],
                                hidden=cfg.proj_hidden)
    squash = LearnableSigmoid()
    scorer = OodScorer(cfg.ood_method, cfg.ood_temperature)
    generator = _build_generator(cfg, ds, rng_streams["fg_init"])
    is_wgan = generator.variant == "wgan_gp"

    opt_student = Adam(student.parameters(), lr=cfg.lr_student)
    opt_aux = Adam(projector.parameters() + squash.parameters(), lr=cfg.lr_student)
    opt_g = opt_c = None
    if is_wgan:
        opt_g = Adam(generator.net.parameters(), lr=cfg.lr_gan, betas=(0.5, 0.999))
        opt_c = Adam(generator.critic.parameters(), lr=cfg.lr_gan, betas=(0.5, 0.999))

    def teacher_seen_logits(feats: Tensor) -> Tensor:
        return teacher.forward(feats)[1]

    loop_rng = rng_streams["joint_loop"]
    if is_wgan:
        # adversarial warm-up: the generator needs far more alternations than
        # the joint loop provides before its samples are worth distilling
        for epoch in range(cfg.fg_warmup_epochs):
            for rows in epoch_rows(ds, cfg.batch_size, loop_rng):
                rep = fg_train_step(
                    generator, ds.features[rows], ds.labels[rows],
                    ds.attributes[ds.labels[rows]],
                    teacher_seen_logits, opt_g, opt_c, loop_rng,
                )
                _check_finite(rep["gen_loss"], epoch)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        sums = {"gen": 0.0, "critic": 0.0, "be": 0.0, "kl": 0.0, "cls": 0.0, "od": 0.0}
        batches = 0
        for rows in epoch_rows(ds, cfg.batch_size, loop_rng):
            x_real = ds.features[rows]
            y_real = ds.labels[rows]

            if is_wgan:
                fg_rep = fg_train_step(
                    generator, x_real, y_real, ds.attributes[y_real],
                    teacher_seen_logits, opt_g, opt_c, loop_rng,
                )
                sums["gen"] += fg_rep["gen_loss"]
                sums["critic"] += fg_rep["critic_loss"]
                _check_finite(fg_rep["gen_loss"], epoch)
                _check_finite(fg_rep["critic_loss"], epoch)

            batch = sample_batch(ds, generator, len(rows), cfg.syn_per_class,
                                 loop_rng, rows=rows)
            x_all = batch.features()
            labels_all = batch.labels()
            z_s, v_s = student.forward(x_all)

            l_cls = loss_cls(v_s, labels_all, cfg.tau_s)
            sums["cls"] += l_cls.item()
            total = l_cls

            if cfg.use_id2sd:
                with T.no_grad():
                    z_t, v_t = teacher.forward(batch.x_real)
                z_s_seen = T.slice_rows(z_s, 0, batch.n_real)
                v_s_seen = student.seen_slice(T.slice_rows(v_s, 0, batch.n_real))
                l_be = loss_be(z_s_seen, z_t, y_real)
                l_kl = loss_kl(v_s_seen, v_t)
                sums["be"] += l_be.item()
                sums["kl"] += l_kl.item()
                total = T.add(total, T.mul(T.add(l_be, l_kl), cfg.lambda_))

            if cfg.use_o2dbd:
                with T.no_grad():
                    _, v_t_all = teacher.forward(x_all.detach())
                h_tilde = squash.confidence(ood_score(scorer, v_t_all))
                h_hat = projector.project(v_s)
                l_od = loss_od(h_hat, h_tilde, labels_all)
                sums["od"] += l_od.item()
                total = T.add(total, T.mul(l_od, cfg.lambda_))

            _check_finite(total.item(), epoch)
            opt_student.zero_grad()
            opt_aux.zero_grad()
            if opt_g is not None:
                opt_g.zero_grad()
            T.backward(total)
            opt_student.step()
            if cfg.use_o2dbd:
                opt_aux.step()
            if opt_g is not None and batch.n_gen > 0:
                opt_g.step()
            batches += 1

        epoch_losses.append({k: v / max(batches, 1) for k, v in sums.items()})

    models = {
        "student": student,
        "projector": projector,
        "squash": squash,
        "generator": generator,
    }
    return evaluate_gzsl(student, ds), epoch_losses, models


# ---------------------------------------------------------------------------
# two-stage routing baselines


@dataclass
class TwoStageModel:
    """OOD-score router plus separate seen/unseen expert classifiers."""

    teacher: TeacherModel
    scorer: OodScorer
    gamma: float
    seen_expert: Mlp
    unseen_expert: Mlp
    n_seen: int
    idealized: bool

    def scores(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            _, logits = self.teacher.forward(Tensor(x))
        return ood_score(self.scorer, logits).data

    def predict(self, x: np.ndarray, true_is_seen=None) -> np.ndarray:
        """Route rows to an expert, then classify. The idealized variant
        routes by the provided ground-truth membership mask."""
        x = np.asarray(x, dtype=np.float64)
        if self.idealized:
            if true_is_seen is None:
                raise StateError("idealized routing needs ground-truth membership")
            route_seen = np.asarray(true_is_seen, dtype=bool)
        else:
            route_seen = self.scores(x) >= self.gamma
        preds = np.empty(x.shape[0], dtype=np.int64)
        if route_seen.any():
            with T.no_grad():
                logits = self.seen_expert.forward(Tensor(x[route_seen]))
            preds[route_seen] = np.argmax(logits.data, axis=1)
        if (~route_seen).any():
            with T.no_grad():
                logits = self.unseen_expert.forward(Tensor(x[~route_seen]))
            preds[~route_seen] = self.n_seen + np.argmax(logits.data, axis=1)
        return preds


def _train_classifier(net: Mlp, x: np.ndarray, y: np.ndarray, epochs: int,
                      batch_size: int, rng: np.random.Generator,
                      lr: float = 1e-3) -> list:
    opt = Adam(net.parameters(), lr=lr)
    losses = []
    for epoch in range(epochs):
        perm = rng.permutation(len(x))
        total, batches = 0.0, 0
        for lo in range(0, len(perm), batch_size):
            rows = perm[lo : lo + batch_size]
            loss = loss_cls(net.forward(Tensor(x[rows])), y[rows])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            _check_finite(loss.item(), epoch)
            total += loss.item()
            batches += 1
        losses.append(total / max(batches, 1))
    return losses


def _select_gamma(scores: np.ndarray, is_seen: np.ndarray, n_quantiles: int) -> float:
    """Threshold maximizing balanced seen-vs-unseen detection accuracy."""
    qs = np.quantile(scores, np.linspace(0.0, 1.0, n_quantiles))
    best_gamma, best_acc = float(qs[0]), -1.0
    for g in qs:
        pred_seen = scores >= g
        tpr = np.mean(pred_seen[is_seen]) if is_seen.any() else 0.0
        tnr = np.mean(~pred_seen[~is_seen]) if (~is_seen).any() else 0.0
        acc = 0.5 * (tpr + tnr)
        if acc > best_acc:
            best_acc, best_gamma = acc, float(g)
    return best_gamma


def train_two_stage(cfg: TrainConfig, ds: GzslDataset, idealized: bool,
                    teacher: TeacherModel, generator, rng: np.random.Generator):
    """Train the routing baseline (ts) or its idealized variant (iv_ts).

    Experts are disjointly supervised: the S-way expert on real seen rows
    (minus the gamma-calibration holdout), the U-way expert on generated
    rows. gamma maximizes balanced detection accuracy on the holdout mix.
    """
    if generator is None:
        raise StateError("two-stage training needs a trained feature generator")
    if not teacher.frozen:
        raise StateError("teacher must be pretrained and frozen")

    train_rows = rng.permutation(ds.train_index)
    n_hold = max(1, int(round(cfg.ts_holdout_frac * len(train_rows))))
    hold_rows, expert_rows = train_rows[:n_hold], train_rows[n_hold:]

    seen_expert = Mlp("seen_expert", [ds.feat_dim, cfg.ts_expert_hidden, ds.n_seen],
                      ["leaky_relu", "identity"], rng)
    unseen_expert = Mlp("unseen_expert", [ds.feat_dim, cfg.ts_expert_hidden, ds.n_unseen],
                        ["leaky_relu", "identity"], rng)

    seen_losses = _train_classifier(
        seen_expert, ds.features[expert_rows], ds.labels[expert_rows],
        cfg.ts_expert_epochs, cfg.batch_size, rng,
    )

    gen_labels = np.repeat(ds.unseen_classes, cfg.ts_gen_per_class)
    with T.no_grad():
        gen_feats = generator.generate(ds.attributes[gen_labels], rng).data
    unseen_losses = _train_classifier(
        unseen_expert, gen_feats, gen_labels - ds.n_seen,
        cfg.ts_expert_epochs, cfg.batch_size, rng,
    )

    scorer = OodScorer(cfg.ood_method, cfg.ood_temperature)
    model = TwoStageModel(teacher, scorer, 0.0, seen_expert, unseen_expert,
                          ds.n_seen, idealized)

    # validation mix: held-out real seen rows + an equal count of generations
    val_labels = np.repeat(ds.unseen_classes,
                           int(np.ceil(n_hold / ds.n_unseen)))[:n_hold]
    with T.no_grad():
        val_gen = generator.generate(ds.attributes[val_labels], rng).data
    val_x = np.vstack([ds.features[hold_rows], val_gen])
    val_seen = np.concatenate([np.ones(n_hold, bool), np.zeros(len(val_gen), bool)])
    model.gamma = _select_gamma(model.scores(val_x), val_seen, cfg.gamma_quantiles)

    true_is_seen = ds.test_labels < ds.n_seen
    preds = model.predict(ds.test_features, true_is_seen if idealized else None)
    metrics = gzsl_metrics(ds.test_labels, preds, ds.n_seen, ds.n_classes)
    trace = [
        {"seen_expert": s, "unseen_expert": u}
        for s, u in zip(seen_losses, unseen_losses)
    ]
    return model, metrics, trace


# ---------------------------------------------------------------------------
# top-level runner


def _effective_config(cfg: TrainConfig) -> TrainConfig:
    if cfg.mode == "baseline":
        return replace(cfg, lambda_=0.0, use_id2sd=False, use_o2dbd=False)
    return cfg


def run_experiment(cfg: TrainConfig, ds: GzslDataset, return_models: bool = False):
    """Pretrain the teacher, run the configured mode, report U/S/H."""
    cfg = _effective_config(cfg)
    t0 = time.perf_counter()
    streams = np.random.SeedSequence(cfg.seed).spawn(7)
    rng = {
        name: np.random.default_rng(ss)
        for name, ss in zip(
            ["teacher_init", "teacher_train", "student_init", "proj_init",
             "fg_init", "joint_loop", "ts_loop"],
            streams,
        )
    }

    teacher = build_teacher(ds.feat_dim, cfg.embed_dim, ds.n_seen,
                            rng["teacher_init"], hidden=cfg.hidden_dim, tau=cfg.tau_o)
    pretrain_teacher(teacher, ds, cfg.teacher_epochs, rng["teacher_train"],
                     lr=cfg.teacher_lr, batch_size=cfg.batch_size)

    if cfg.mode in ("d3gzsl", "baseline"):
        metrics, trace, models = train_d3gzsl(cfg, ds, teacher, rng)
    else:
        generator = _build_generator(cfg, ds, rng["fg_init"])
        if generator.variant == "wgan_gp":
            opt_g = Adam(generator.net.parameters(), lr=cfg.lr_gan, betas=(0.5, 0.999))
            opt_c = Adam(generator.critic.parameters(), lr=cfg.lr_gan, betas=(0.5, 0.999))
            loop = rng["joint_loop"]
            for epoch in range(cfg.fg_pretrain_epochs):
                for rows in epoch_rows(ds, cfg.batch_size, loop):
                    rep = fg_train_step(
                        generator, ds.features[rows], ds.labels[rows],
                        ds.attributes[ds.labels[rows]],
                        lambda f: teacher.forward(f)[1], opt_g, opt_c, loop,
                    )
                    _check_finite(rep["gen_loss"], epoch)
        model, metrics, trace = train_two_stage(
            cfg, ds, cfg.mode == "iv_ts", teacher, generator, rng["ts_loop"]
        )
        models = {"two_stage": model, "generator": generator}

    models["teacher"] = teacher
    wall_ms = (time.perf_counter() - t0) * 1000.0
    report = RunReport(
        mode=cfg.mode,
        seed=cfg.seed,
        lambda_=cfg.lambda_,
        ood_method=cfg.ood_method,
        epochs=cfg.epochs,
        unseen_acc=metrics["U"],
        seen_acc=metrics["S"],
        harmonic=metrics["H"],
        wall_ms=wall_ms,
        epoch_losses=trace,
        config=asdict(cfg),
    )
    if return_models:
        return report, models
    return report
