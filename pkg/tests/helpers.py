from types import SimpleNamespace

import numpy as np

from lret.autodiff import Tensor, ops, precision
from lret.autodiff.gradcheck import check_gradients


def op_gradient_errors(op, arrays, seed=0, step=1e-6, **kwargs):
    """Relative error of every input gradient of ``op`` against central differences.

    The scalar loss is a fixed random projection of the op output, so no
    gradient is trivially uniform.
    """
    rng = np.random.default_rng([seed, 1])  # independent of inputs drawn with default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    with precision(np.float64):
        probe = op(*[Tensor(a) for a in arrays.values()], **kwargs)
        proj = rng.standard_normal(probe.shape)

        def loss_value():
            return float((op(*[Tensor(a) for a in arrays.values()], **kwargs).data * proj).sum())

        tensors = [Tensor(a, requires_grad=True) for a in arrays.values()]
        out = op(*tensors, **kwargs)
        (out * proj).sum().backward()
        analytic = {k: t.grad for k, t in zip(arrays, tensors)}
        return check_gradients(loss_value, analytic, arrays, step=step)


def micro_model_spec(dropout_rate=0.5):
    from lret.model import BackboneSpec, ModelSpec
    from lret.resizers import HfeSpec

    return ModelSpec(input_size=(16, 16, 3), num_classes=3, resizer=HfeSpec((16, 16, 3), 8),
                     backbone=BackboneSpec(input_channels=8, channels=(8,)), head_width=6, dropout_rate=dropout_rate)


def micro_model_gradient_errors(analytic_dtype=np.float64, max_entries=24, seed=0):
    """Per-parameter relative error of the full micro classifier (HFE T=8, one stage, K=3, batch 2).

    The finite differences always run in float64 on the same parameter
    values; ``analytic_dtype`` selects the precision of the backward pass.
    Training mode is used so batch-norm and dropout (fixed mask) are in the path.
    """
    from lret.autodiff import softmax_cross_entropy
    from lret.model import build_model

    rng = np.random.default_rng(seed)
    x = rng.random((2, 16, 16, 3))
    labels = np.array([0, 2])
    weights = np.array([1.0, 0.5, 2.0])

    def loss(model):
        out = model.forward(x, training=True, rng=np.random.default_rng(1))
        return softmax_cross_entropy(out.logits, labels, weights)[0]

    with precision(analytic_dtype):
        m_a = build_model(micro_model_spec(), seed=seed)
        # perturb batch-norm affine parameters away from their trivial init
        for name, p in m_a.named_parameters():
            if name.endswith(("gamma", "beta", "bias")):
                p.data = (p.data + 0.3 * rng.standard_normal(p.shape)).astype(p.data.dtype)
        loss(m_a).backward()
        analytic = {n: p.grad.astype(np.float64) for n, p in m_a.named_parameters()}
    with precision(np.float64):
        m_n = build_model(micro_model_spec(), seed=seed)
        src = dict(m_a.named_parameters())
        for name, p in m_n.named_parameters():
            p.data = src[name].data.astype(np.float64)
        arrays = {n: p.data for n, p in m_n.named_parameters()}
        return check_gradients(lambda: loss(m_n).item(), analytic, arrays, step=1e-6, max_entries=max_entries,
                               seed=seed, floor=1e-8 if analytic_dtype == np.float64 else 1e-6)


def train_localized_model(root, seed=0):
    """4-class localized-evidence set (64 px, 100 per class) and a model trained on it for 15 epochs.

    The stem keeps full resolution so the 32-analog tap is 16x16, fine
    enough for quadrant attribution.  Returns ``(model, manifest, regions)``.
    """
    from lret.checkpoint import model_from_checkpoint
    from lret.data import LoaderConfig, SynthSpec, load_manifest, synth_generate
    from lret.data.synth import load_regions
    from lret.model import build_model, hfe_model_spec
    from lret.train import TrainConfig, train

    manifest = load_manifest(synth_generate(SynthSpec(4, 100, 64, seed=seed, style="localized"), root))
    spec = hfe_model_spec(64, 32, 4, channels=(16, 32, 32))
    spec.backbone.stem_stride = 1
    model = build_model(spec, seed=seed)
    best, _ = train(model, manifest, LoaderConfig(shuffle_seed=seed), TrainConfig(epochs=15, batch_size=16, seed=seed))
    return model_from_checkpoint(best), manifest, load_regions(root / "regions.csv")


def overfit_losses(steps=20):
    """Default Adam on one frozen batch; dropout off so the objective is deterministic."""
    from lret.autodiff import softmax_cross_entropy
    from lret.model import build_model, hfe_model_spec
    from lret.optim import Adam, AdamConfig

    spec = hfe_model_spec(64, 32, 4, channels=(16, 32, 32))
    spec.dropout_rate = 0.0
    model = build_model(spec, seed=0)
    opt = Adam(model.named_parameters(), AdamConfig())
    rng = np.random.default_rng(0)
    x = rng.random((8, 64, 64, 3)).astype(np.float32)
    y = np.arange(8) % 4
    losses = []
    for _ in range(steps + 1):
        model.zero_grad()
        loss, _ = softmax_cross_entropy(model.forward(x, training=True).logits, y)
        losses.append(loss.item())
        loss.backward()
        opt.step()
    return losses


class ConvTapModel:
    """conv -> relu (tap "t") -> GAP -> dense.  Only the first dense row is non-zero."""

    tap_equivalents = {8: "t"}

    def __init__(self, channels=1, classes=2, seed=0, head=None):
        rng = np.random.default_rng(seed)
        self.kernel = Tensor(rng.standard_normal((3, 3, 3, channels)), requires_grad=True)
        w = np.zeros((channels, classes))
        w[0] = 1.0 if head is None else head
        self.weight = Tensor(w, requires_grad=True)

    def forward(self, batch, training=False):
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        a = ops.relu(ops.conv2d(x, self.kernel))
        logits = ops.dense(ops.global_avg_pool(a), self.weight)
        return SimpleNamespace(logits=logits, probs=ops.softmax(logits.data), taps={"t": a})

    def channel_map(self, image, k=0):
        return np.maximum(ops.conv2d(Tensor(image[None]), self.kernel).data[0, :, :, k], 0)
