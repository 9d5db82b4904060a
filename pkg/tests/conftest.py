import numpy as np


def conv2d_loop_oracle(x, w, stride=1, padding=0, pad_value=0.0):
    """Direct quadruple-loop convolution, independent of the engine path."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    padded = np.full((n, c, h + 2 * padding, wd + 2 * padding), float(pad_value))
    padded[:, :, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = padded[b, :, i * stride : i * stride + kh,
                                   j * stride : j * stride + kw]
                    out[b, f, i, j] = np.sum(patch * w[f])
    return out


def random_pm1(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape)
