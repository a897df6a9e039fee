"""Random instances of every autodiff op for finite-difference checks."""
import numpy as np

from ftrobust import autodiff as ad
from ftrobust import model as vit


def _shape(rng, ndim=2, lo=2, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, ndim))


def case_add(rng):
    s = _shape(rng)
    return [rng.standard_normal(s), rng.standard_normal(s)], lambda a, b: ad.add(a, b), s


def case_sub(rng):
    s = _shape(rng)
    return [rng.standard_normal(s), rng.standard_normal(s)], lambda a, b: ad.sub(a, b), s


def case_mul(rng):
    s = _shape(rng)
    return [rng.standard_normal(s), rng.standard_normal(s)], lambda a, b: ad.mul(a, b), s


def case_scalar_mul(rng):
    s = _shape(rng)
    c = float(rng.standard_normal())
    return [rng.standard_normal(s)], lambda a: ad.mul(a, c) + 0.5, s


def case_gelu(rng):
    s = _shape(rng)
    return [2 * rng.standard_normal(s)], ad.gelu, s


def case_tanh(rng):
    s = _shape(rng)
    return [rng.standard_normal(s)], ad.tanh, s


def case_exp(rng):
    s = _shape(rng)
    return [rng.standard_normal(s)], ad.exp, s


def case_log(rng):
    s = _shape(rng)
    return [rng.uniform(0.5, 2.0, s)], ad.log, s


def case_add_trailing(rng):
    s = _shape(rng, 3)
    return [rng.standard_normal(s), rng.standard_normal(s[1:])], ad.add_trailing, s


def case_mul_trailing(rng):
    s = _shape(rng, 3)
    return [rng.standard_normal(s), rng.standard_normal(s[2:])], ad.mul_trailing, s


def case_matmul(rng):
    b, m, k, n = _shape(rng, 4)
    return [rng.standard_normal((b, m, k)), rng.standard_normal((b, k, n))], ad.matmul, (b, m, n)


def case_linear(rng):
    b, s, i, o = _shape(rng, 4)
    return ([rng.standard_normal((b, s, i)), rng.standard_normal((i, o)), rng.standard_normal(o)],
            ad.linear, (b, s, o))


def case_kron(rng):
    a, b = _shape(rng), _shape(rng)
    return [rng.standard_normal(a), rng.standard_normal(b)], ad.kron, (a[0] * b[0], a[1] * b[1])


def case_reshape(rng):
    a, b = _shape(rng)
    return [rng.standard_normal((a, b))], lambda x: ad.reshape(x, (b * a,)), (a * b,)


def case_transpose(rng):
    s = _shape(rng, 3)
    return [rng.standard_normal(s)], lambda x: ad.transpose(x, (2, 0, 1)), (s[2], s[0], s[1])


def case_getitem(rng):
    s = _shape(rng, 2, 3, 5)
    idx = np.array([0, 2, 0, 1])
    return [rng.standard_normal(s)], lambda x: ad.getitem(x, idx), (4, s[1])


def case_prepend_token(rng):
    b, s, d = _shape(rng, 3)
    return [rng.standard_normal((b, s, d)), rng.standard_normal(d)], ad.prepend_token, (b, s + 1, d)


def case_sum_axis(rng):
    s = _shape(rng, 3)
    return [rng.standard_normal(s)], lambda x: ad.sum(x, axis=1), (s[0], s[2])


def case_mean_axis(rng):
    s = _shape(rng, 3)
    return [rng.standard_normal(s)], lambda x: ad.mean(x, axis=-1), s[:2]


def case_softmax(rng):
    s = _shape(rng)
    return [rng.standard_normal(s)], lambda x: ad.softmax(x, axis=-1), s


def case_log_softmax(rng):
    s = _shape(rng)
    return [rng.standard_normal(s)], lambda x: ad.log_softmax(x, axis=0), s


def case_layer_norm(rng):
    s = _shape(rng, 3)
    d = s[-1]
    return ([rng.standard_normal(s), 1 + 0.3 * rng.standard_normal(d), rng.standard_normal(d)],
            ad.layer_norm, s)


def case_layer_norm_axis(rng):
    s = _shape(rng, 3)
    return [rng.standard_normal(s)], lambda x: ad.layer_norm(x, axis=1), s


def case_cross_entropy(rng):
    n, c = _shape(rng)
    labels = rng.integers(0, c, n)
    return [rng.standard_normal((n, c))], lambda x: ad.cross_entropy(x, labels), ()


OP_CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}


def op_instance(name, rng):
    """(build, arrays) where build maps leaf tensors to a scalar loss."""
    arrays, op, out_shape = OP_CASES[name](rng)
    if out_shape == ():
        return (lambda leaves: op(*leaves)), arrays
    w = ad.Tensor(rng.standard_normal(out_shape))
    return (lambda leaves: ad.sum(ad.mul(op(*leaves), w))), arrays


TINY_VIT = vit.ModelConfig(depth=1, embed_dim=4, heads=2, patch_size=2, image_size=4, channels=1,
                           num_classes=3, ffn_ratio=2)


def vit_instance(rng, cfg=TINY_VIT, batch=2):
    """(build, arrays): loss of the toy ViT as a function of all parameters and the images."""
    params = vit.init_params(cfg, int(rng.integers(2**31)))
    # push weights away from the tiny init so every path carries signal
    params = {n: a + 0.3 * rng.standard_normal(a.shape) for n, a in params.items()}
    names = sorted(params)
    images = rng.uniform(0, 1, (batch, cfg.channels, cfg.image_size, cfg.image_size))
    labels = rng.integers(0, cfg.num_classes, batch)

    def build(leaves):
        T = dict(zip(names, leaves[:-1]))
        return vit.loss(vit.forward_tensors(cfg, T, leaves[-1]), labels)

    return build, [params[n] for n in names] + [images]
