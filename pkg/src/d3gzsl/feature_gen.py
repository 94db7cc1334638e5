"""Conditional feature generators for unseen classes.

Two interchangeable variants behind one ``generate(attrs, rng)`` surface:

* ``gaussian_oracle``: closed-form sampler using the synthetic dataset's
  generative ground truth (linear attribute map + isotropic noise). Exists
  so downstream training can be tested with a perfect generator.
* ``wgan_gp``: conditional generator/critic pair trained with the
  gradient-penalty Wasserstein objective plus a small classification term
  on fakes from a frozen seen-class classifier.
"""

import numpy as np

from . import tensor as T
from .errors import ParameterError, StateError, UnsupportedVariantError
from .nn import Adam, Mlp, input_gradient
from .tensor import Tensor

GP_NORM_EPS = 1e-12  # inside the sqrt of the penalty's gradient norm


class GaussianOracleGenerator:
    """Exact conditional sampler: x = attr_map @ a + sigma * noise."""

    variant = "gaussian_oracle"

    def __init__(self, attr_map: np.ndarray, noise_sigma: float):
        self.attr_map = np.asarray(attr_map, dtype=np.float64)
        if not noise_sigma >= 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
        self.noise_sigma = float(noise_sigma)

    @classmethod
    def from_dataset(cls, ds, noise_sigma=None):
        if ds.attr_map is None:
            raise StateError("dataset carries no generative ground truth")
        sigma = ds.noise_sigma if noise_sigma is None else noise_sigma
        return cls(ds.attr_map, sigma)

    def generate(self, attrs: np.ndarray, rng: np.random.Generator) -> Tensor:
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim != 2 or attrs.shape[1] != self.attr_map.shape[1]:
            raise ParameterError(
                f"expected attributes (n, {self.attr_map.shape[1]}), got {attrs.shape}"
            )
        means = attrs @ self.attr_map.T
        if self.noise_sigma == 0:
            return Tensor(means)
        return Tensor(means + self.noise_sigma * rng.standard_normal(means.shape))


class WganGpGenerator:
    """Conditional WGAN-GP: G(concat(a, w)) -> feature, critic D(concat(x, a))."""

    variant = "wgan_gp"

    def __init__(self, net: Mlp, critic: Mlp, attr_dim: int,
                 gp_weight: float = 10.0, n_critic: int = 5, cls_weight: float = 0.01):
        # noise dimension is tied to the attribute dimension
        if net.in_dim != 2 * attr_dim:
            raise ParameterError(
                f"generator input must be 2*attr_dim={2 * attr_dim}, got {net.in_dim}"
            )
        if critic.in_dim != net.out_dim + attr_dim or critic.out_dim != 1:
            raise ParameterError(
                f"critic must map (feat+attr)={net.out_dim + attr_dim} -> 1, "
                f"got {critic.in_dim} -> {critic.out_dim}"
            )
        if gp_weight < 0:
            raise ParameterError(f"gp_weight must be >= 0, got {gp_weight}")
        if n_critic < 0:
            raise ParameterError(f"n_critic must be >= 0, got {n_critic}")
        self.net = net
        self.critic = critic
        self.attr_dim = attr_dim
        self.gp_weight = gp_weight
        self.n_critic = n_critic
        self.cls_weight = cls_weight

    def generate(self, attrs: np.ndarray, rng: np.random.Generator) -> Tensor:
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim != 2 or attrs.shape[1] != self.attr_dim:
            raise ParameterError(
                f"expected attributes (n, {self.attr_dim}), got {attrs.shape}"
            )
        noise = rng.standard_normal((attrs.shape[0], self.attr_dim))
        return self.net.forward(T.concat_cols([Tensor(attrs), Tensor(noise)]))


def build_wgan(feat_dim: int, attr_dim: int, rng: np.random.Generator,
               hidden: int = 256, gp_weight: float = 10.0, n_critic: int = 5,
               cls_weight: float = 0.01) -> WganGpGenerator:
    gen = Mlp("fg_generator", [2 * attr_dim, hidden, feat_dim],
              ["leaky_relu", "identity"], rng)
    critic = Mlp("fg_critic", [feat_dim + attr_dim, hidden, 1],
                 ["leaky_relu", "identity"], rng)
    return WganGpGenerator(gen, critic, attr_dim, gp_weight, n_critic, cls_weight)


def gradient_penalty(critic: Mlp, interp_x: np.ndarray, attrs: np.ndarray) -> Tensor:
    """Mean squared deviation of the critic's feature-gradient norm from 1.

    The gradient is taken w.r.t. the interpolated features only (the
    conditioning attributes are held fixed), expressed on the tape so the
    penalty trains the critic's weights.
    """
    feat_dim = interp_x.shape[1]
    full_grad = input_gradient(critic, np.hstack([interp_x, attrs]))
    g_feat = T.slice_columns(full_grad, np.arange(feat_dim))
    norms = T.sqrt(T.add(T.reduce_sum(T.mul(g_feat, g_feat), axis=1), GP_NORM_EPS))
    dev = T.sub(norms, 1.0)
    return T.reduce_mean(T.mul(dev, dev))


def critic_step(gen: WganGpGenerator, x_real: np.ndarray, attrs_real: np.ndarray,
                opt_c: Adam, rng: np.random.Generator) -> dict:
    """One critic update: Wasserstein estimate plus the gradient penalty on
    per-row interpolates between real and (detached) fake features."""
    n = x_real.shape[0]
    attrs_t = Tensor(attrs_real)
    with T.no_grad():
        fake = gen.generate(attrs_real, rng).data
    u = rng.uniform(size=(n, 1))
    interp = u * x_real + (1.0 - u) * fake
    d_real = T.reduce_mean(gen.critic.forward(T.concat_cols([Tensor(x_real), attrs_t])))
    d_fake = T.reduce_mean(gen.critic.forward(T.concat_cols([Tensor(fake), attrs_t])))
    gp = gradient_penalty(gen.critic, interp, attrs_real)
    loss_c = T.add(T.sub(d_fake, d_real), T.mul(gp, gen.gp_weight))
    opt_c.zero_grad()
    T.backward(loss_c)
    opt_c.step()
    return {
        "critic_loss": loss_c.item(),
        "wasserstein": d_fake.item() - d_real.item(),
        "gradient_penalty": gp.item(),
    }


def generator_step(gen: WganGpGenerator, y_real: np.ndarray, attrs_real: np.ndarray,
                   seen_classifier, opt_g: Adam, opt_c: Adam,
                   rng: np.random.Generator) -> dict:
    """One generator update: fool the critic, plus cls_weight times the
    cross-entropy of a frozen seen-class classifier on the fakes."""
    n = attrs_real.shape[0]
    fake = gen.generate(attrs_real, rng)
    adv = T.neg(T.reduce_mean(gen.critic.forward(T.concat_cols([fake, Tensor(attrs_real)]))))
    logits = seen_classifier(fake)
    logp = T.log_softmax_rows(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), y_real] = 1.0
    ce = T.neg(T.reduce_mean(T.reduce_sum(T.mul(logp, Tensor(onehot)), axis=1)))
    loss_g = T.add(adv, T.mul(ce, gen.cls_weight))
    opt_g.zero_grad()
    opt_c.zero_grad()  # the adversarial term deposits grads in the critic too
    T.backward(loss_g)
    opt_g.step()
    return {"gen_loss": loss_g.item(), "gen_cls": ce.item(), "gen_adv": adv.item()}


def fg_train_step(gen, x_real: np.ndarray, y_real: np.ndarray, attrs_real: np.ndarray,
                  seen_classifier, opt_g: Adam, opt_c: Adam,
                  rng: np.random.Generator) -> dict:
    """One WGAN-GP alternation: n_critic critic updates, one generator update.

    ``seen_classifier`` maps a feature Tensor to frozen seen-class logits.
    Returns the last critic report merged with the generator report.
    """
    if gen.variant != "wgan_gp":
        raise UnsupportedVariantError(
            f"fg_train_step needs a wgan_gp generator, got {gen.variant!r}"
        )
    report = {"critic_loss": 0.0, "wasserstein": 0.0, "gradient_penalty": 0.0}
    for _ in range(gen.n_critic):
        report = critic_step(gen, x_real, attrs_real, opt_c, rng)
    report.update(generator_step(gen, y_real, attrs_real, seen_classifier,
                                 opt_g, opt_c, rng))
    return report
