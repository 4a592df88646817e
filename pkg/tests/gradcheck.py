"""Central finite-difference oracle shared by the approximator tests and the acceptance gate."""
import numpy as np

from gridnav.net import BCLoss, NetworkSpec, PPOLoss, SequenceBatch, init_params, log_softmax, sequence_gradient, unroll

STEP = 1e-5
# Central differences at h = 1e-5 carry up to ~2e-10 of rounding noise
# (machine eps * |loss| / h), so derivatives below 1e-5 cannot be resolved to
# 1e-4 relative; for those the check is absolute error <= 1e-4 * FLOOR = 1e-9.
FLOOR = 1e-5


def random_instance(rng: np.random.Generator, loss: str, clip: float = 0.2):
    """Random small network, padded episode batch and (for PPO) kink-free targets."""
    spec = NetworkSpec(
        patch_size=int(rng.choice([1, 3])),
        encoder_widths=tuple(int(w) for w in rng.integers(2, 6, size=int(rng.integers(1, 3)))),
        hidden_size=int(rng.integers(2, 6)),
        value_head=(loss == "ppo"),
    )
    theta = init_params(spec, rng) * rng.uniform(1, 8) + rng.normal(0, 0.1, init_params(spec, rng).shape)
    lengths = rng.integers(1, 7, size=int(rng.integers(1, 4)))
    feats = [rng.normal(size=(n, spec.input_dim)) for n in lengths]
    acts = [rng.integers(0, 4, size=n) for n in lengths]
    if loss == "bc":
        return spec, theta, SequenceBatch.from_episodes(feats, acts), BCLoss()
    base = SequenceBatch.from_episodes(feats, acts)
    lp = log_softmax(unroll(theta, spec, base.features).logits)
    logp_a = np.take_along_axis(lp, base.actions[..., None], axis=-1)[..., 0]
    # keep every ratio at least 0.02 away from 1 +- clip so no finite-difference
    # probe crosses a kink of the clipped objective
    while True:
        shift = rng.uniform(-0.5, 0.5, size=logp_a.shape)
        ratio = np.exp(shift)
        if np.all(np.minimum(np.abs(ratio - (1 + clip)), np.abs(ratio - (1 - clip))) > 0.02):
            break
    old = [(logp_a - shift)[: n, b] for b, n in enumerate(lengths)]
    adv = [rng.normal(size=n) for n in lengths]
    ret = [rng.normal(size=n) for n in lengths]
    batch = SequenceBatch.from_episodes(feats, acts, old_logp=old, advantages=adv, returns=ret)
    return spec, theta, batch, PPOLoss(clip=clip, value_coef=0.5, entropy_coef=0.01)


def max_relative_error(spec, theta, batch, loss_spec) -> float:
    _, grad, _ = sequence_gradient(theta, spec, batch, loss_spec)
    worst = 0.0
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = STEP
        fp, _, _ = sequence_gradient(theta + e, spec, batch, loss_spec)
        fm, _, _ = sequence_gradient(theta - e, spec, batch, loss_spec)
        num = (fp - fm) / (2 * STEP)
        err = abs(grad[i] - num) / max(abs(grad[i]), abs(num), FLOOR)
        worst = max(worst, err)
    return worst
